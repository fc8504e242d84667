#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <vector>

#include "mkgc/numerics/grad_check.hpp"
#include "mkgc/numerics/matrix.hpp"
#include "mkgc/numerics/tape.hpp"

namespace mkgc {
namespace {

using boost::multiprecision::cpp_bin_float_50;

TEST(Softmax, SymmetricPairIsHalf) {
  const Vector p = softmax(Vector{0.0, 0.0});
  EXPECT_EQ(p[0], 0.5);
  EXPECT_EQ(p[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Vector p = softmax(Vector{1000.0, 1000.0, 1000.0});
  for (double x : p) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MatchesFiftyDigitReference) {
  const std::vector<double> logits = {1.0, 2.0, 3.0};
  cpp_bin_float_50 total = 0;
  std::vector<cpp_bin_float_50> e;
  for (double x : logits) {
    e.push_back(boost::multiprecision::exp(cpp_bin_float_50(x)));
    total += e.back();
  }
  const Vector p = softmax(Vector(logits));
  for (std::size_t i = 0; i < logits.size(); ++i) {
    EXPECT_NEAR(p[i], static_cast<double>(e[i] / total), 1e-15);
  }
}

TEST(Softmax, EmptyIsInvalidArgument) {
  try {
    softmax(Vector{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(12);
    Vector v(n);
    for (double& x : v.values()) x = rng.uniform(-50.0, 50.0);
    const double shift = rng.uniform(-300.0, 300.0);
    Vector shifted = v;
    for (double& x : shifted.values()) x += shift;
    const Vector p = softmax(v);
    const Vector q = softmax(shifted);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total += p[i];
      EXPECT_GT(p[i], 0.0 - 0.0);
      EXPECT_LE(p[i], 1.0);
      EXPECT_NEAR(p[i], q[i], 1e-12);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
    EXPECT_EQ(argmax_det(v), argmax_det(p));
  }
}

TEST(ArgmaxDet, TiesResolveToLowestIndex) {
  EXPECT_EQ(argmax_det(Vector{1.0, 1.0, 0.0}), 0u);
  EXPECT_EQ(argmax_det(Vector{0.0, 5.0, 5.0}), 1u);
  EXPECT_EQ(argmax_det(Vector{0.1, 0.9, 0.3}), 1u);
  EXPECT_THROW(argmax_det(Vector{}), Error);
}

TEST(DenseOps, IdentityAndZero) {
  const Vector v{1.5, -2.0, 3.25};
  EXPECT_EQ(matvec(Matrix::identity(3), v), v);
  EXPECT_EQ(matvec(Matrix(3, 3), v), Vector(3));
}

TEST(DenseOps, HandComputedThreeByThree) {
  const Matrix a(3, 3, {1, 2, 3, 0, -1, 4, 2, 1, 0});
  const Matrix b(3, 3, {0, 1, 2, 1, 0, -1, 3, 1, 1});
  EXPECT_EQ(matvec(a, Vector{1.0, -2.0, 0.5}), (Vector{-1.5, 4.0, 0.0}));
  EXPECT_EQ(matmul(a, b), Matrix(3, 3, {11, 4, 3, 11, 4, 5, 1, 2, 3}));
}

TEST(DenseOps, ShapeMismatchIsInvalidArgument) {
  try {
    matvec(Matrix(2, 3), Vector(2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidArgument);
  }
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), Error);
  EXPECT_THROW(add(Matrix(2, 2), Matrix(2, 3)), Error);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1.0}), Error);
}

TEST(DenseOps, ConcatStacks) {
  const std::vector<Vector> parts = {Vector{1.0}, Vector{2.0, 3.0}};
  EXPECT_EQ(concat(parts), (Vector{1.0, 2.0, 3.0}));
}

TEST(DenseOps, NonFiniteInputsRejected) {
  EXPECT_THROW(Vector({std::nan("")}), Error);
  EXPECT_THROW(scale(Matrix(1, 1, {1e308}), 1e308), Error);
}

TEST(GradCheck, SquareAtThree) {
  const auto report = grad_check([](const Vector& x) { return x[0] * x[0]; }, Vector{6.0},
                                 Vector{3.0}, {.eps = 1e-5, .tol = 1e-6});
  EXPECT_TRUE(report.passed);
  EXPECT_NEAR(report.numeric[0], 6.0, 1e-6);
}

TEST(GradCheck, ConstantHasZeroError) {
  const auto report =
      grad_check([](const Vector&) { return 4.0; }, Vector{0.0, 0.0}, Vector{1.0, -1.0});
  EXPECT_TRUE(report.passed);
  EXPECT_EQ(report.max_rel_error, 0.0);
}

TEST(GradCheck, NonFiniteProbeNamesCoordinate) {
  const auto report = grad_check(
      [](const Vector& x) { return x[1] > 0.5 ? std::log(-1.0) : x[0]; }, Vector{1.0, 0.0},
      Vector{0.0, 0.5});
  EXPECT_FALSE(report.passed);
  EXPECT_EQ(report.worst_coordinate, 1u);
  EXPECT_NE(report.diagnostic.find("coordinate 1"), std::string::npos);
}

TEST(GradCheck, WrongGradientFails) {
  const auto report =
      grad_check([](const Vector& x) { return x[0] * x[0]; }, Vector{5.0}, Vector{3.0});
  EXPECT_FALSE(report.passed);
}

TEST(GradCheck, EpsOutOfRangeRejected) {
  EXPECT_THROW(grad_check([](const Vector&) { return 0.0; }, Vector{0.0}, Vector{0.0},
                          {.eps = 0.5}),
               Error);
}

// Random composed expressions: reverse mode vs central differences.
TEST(Tape, RandomCompositionsMatchFiniteDifferences) {
  Rng rng(2024);
  int checked = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t n = 2 + rng.below(5);
    const std::size_t h = 2 + rng.below(5);
    const Matrix w1 = Matrix::gaussian(h, n, 0.7, rng);
    const Matrix w2 = Matrix::gaussian(h, n, 0.7, rng);
    const Matrix bias = Matrix::gaussian(h, 1, 0.3, rng);
    const std::size_t target = rng.below(h);
    const int variant = static_cast<int>(trial % 4);
    TapeFunction f = [&](ad::Tape& t, ad::Var x) {
      ad::Var a = ad::matmul(t.constant_ref(w1), x);
      ad::Var b = ad::matmul(t.constant_ref(w2), x);
      ad::Var z = ad::tanh(ad::add(a, t.constant_ref(bias)));
      switch (variant) {
        case 0:
          return ad::sum(ad::hadamard(z, ad::softmax(b)));
        case 1:
          return ad::scale(ad::pick(ad::log_softmax(ad::add(z, b)), target), -1.0);
        case 2: {
          ad::Var s = ad::dot(z, b);
          return ad::add(ad::squared_norm(ad::mul_scalar(z, s)), ad::l2_norm(b));
        }
        default: {
          std::vector<ad::Var> parts = {z, b, a};
          ad::Var m = ad::mean(parts);
          ad::Var stacked = ad::concat_rows(parts);
          return ad::add(ad::sum(ad::tanh(m)), ad::scale(ad::squared_norm(stacked), 0.05));
        }
      }
    };
    Vector x(n);
    for (double& v : x.values()) v = rng.uniform(-1.0, 1.0);
    const auto report = grad_check(f, x, {.eps = 1e-5, .tol = 1e-4});
    EXPECT_TRUE(report.passed) << "trial " << trial << ": " << report.diagnostic
                               << " rel=" << report.max_rel_error;
    ++checked;
  }
  EXPECT_GE(checked, 100);
}

TEST(Tape, UnusedLeafHasExactlyZeroGradient) {
  ad::Tape tape;
  ad::Var used = tape.parameter(Matrix(2, 1, {1.0, 2.0}));
  ad::Var unused = tape.parameter(Matrix(2, 1, {3.0, 4.0}));
  ad::Var loss = ad::squared_norm(used);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(unused), Matrix(2, 1));
  EXPECT_EQ(tape.grad(used), Matrix(2, 1, {2.0, 4.0}));
}

TEST(Tape, ConstantsAreNotDifferentiated) {
  ad::Tape tape;
  const Matrix w = Matrix::identity(2);
  ad::Var c = tape.constant_ref(w);
  ad::Var x = tape.parameter(Matrix(2, 1, {1.0, 1.0}));
  tape.backward(ad::sum(ad::matmul(c, x)));
  EXPECT_FALSE(tape.requires_grad(c));
  EXPECT_EQ(tape.grad(c), Matrix(2, 2));
  EXPECT_EQ(tape.grad(x), Matrix(2, 1, {1.0, 1.0}));
}

TEST(Tape, UsageErrors) {
  ad::Tape empty;
  ad::Tape other;
  ad::Var foreign = other.parameter(Matrix(1, 1, {1.0}));
  try {
    empty.backward(foreign);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUsage);
  }
  ad::Tape t;
  ad::Var v = t.parameter(Matrix(2, 1, {1.0, 2.0}));
  EXPECT_THROW(t.grad(v), Error);
  EXPECT_THROW(t.backward(v), Error);  // not a scalar
}

TEST(Tape, ReductionsAreBitReproducible) {
  Rng rng(5);
  const Matrix w = Matrix::gaussian(16, 16, 1.0, rng);
  const Matrix x0 = Matrix::gaussian(16, 1, 1.0, rng);
  auto run = [&]() {
    ad::Tape tape;
    ad::Var x = tape.parameter_ref(x0);
    ad::Var loss = ad::sum(ad::tanh(ad::matmul(tape.constant_ref(w), x)));
    tape.backward(loss);
    return std::pair{loss.scalar(), digest(tape.grad(x))};
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace mkgc

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "melo/tensor.hpp"
#include "test_support.hpp"

using namespace melo;
using melo::testing::random_matrix;

namespace {
MatrixF mat(std::initializer_list<std::initializer_list<float>> rows) {
  MatrixF m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (auto r : rows) {
    Eigen::Index j = 0;
    for (float v : r) m(i, j++) = v;
    ++i;
  }
  return m;
}

// Plain triple loop, independent of Eigen's product kernels.
MatrixD naive_matmul(const MatrixD& a, const MatrixD& b) {
  MatrixD out = MatrixD::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index k = 0; k < a.cols(); ++k) out(i, j) += a(i, k) * b(k, j);
  return out;
}

double rel_err(const MatrixD& a, const MatrixD& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }
}  // namespace

TEST_CASE("matmul examples") {
  CHECK(matmul<float>(MatrixF::Identity(2, 2), mat({{1, 2}, {3, 4}})) == mat({{1, 2}, {3, 4}}));
  CHECK(matmul<float>(mat({{1, 1}}), mat({{1}, {1}})) == mat({{2}}));
  CHECK(matmul<float>(mat({{1, 2}, {3, 4}}), mat({{5, 6}, {7, 8}})) == mat({{19, 22}, {43, 50}}));
}

TEST_CASE("matmul agrees with a triple loop") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> dim(1, 40);
    const int m = dim(rng), k = dim(rng), n = dim(rng);
    const MatrixD a = random_matrix(rng, m, k), b = random_matrix(rng, k, n);
    CHECK(rel_err(matmul<double>(a, b), naive_matmul(a, b)) < 1e-12);
  }
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  try {
    matmul<float>(MatrixF::Zero(2, 3), MatrixF::Zero(4, 5));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x5]") != std::string::npos);
  }
}

TEST_CASE("matmul is associative and distributes over the low-rank update") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixF a = testing::random_matrix_f(rng, 5, 7), b = testing::random_matrix_f(rng, 7, 6),
                  c = testing::random_matrix_f(rng, 6, 4);
    const MatrixF left = matmul<float>(matmul<float>(a, b), c);
    const MatrixF right = matmul<float>(a, matmul<float>(b, c));
    CHECK((left - right).norm() / right.norm() < 1e-4);

    // (W0 + BA) x == W0 x + B (A x)
    const MatrixF w0 = testing::random_matrix_f(rng, 8, 8), bm = testing::random_matrix_f(rng, 8, 2),
                  am = testing::random_matrix_f(rng, 2, 8), x = testing::random_matrix_f(rng, 8, 1);
    const MatrixF dense = matmul<float>(MatrixF(w0 + matmul<float>(bm, am)), x);
    const MatrixF factored = matmul<float>(w0, x) + matmul<float>(bm, matmul<float>(am, x));
    CHECK((dense - factored).norm() / dense.norm() < 1e-5);
  }
}

TEST_CASE("primitives are deterministic") {
  std::mt19937_64 rng(5);
  const MatrixF a = testing::random_matrix_f(rng, 33, 17), b = testing::random_matrix_f(rng, 17, 29);
  const VectorF g = VectorF::Ones(17), beta = VectorF::Zero(17);
  for (int i = 0; i < 3; ++i) {
    CHECK(matmul<float>(a, b) == matmul<float>(a, b));
    CHECK(softmax<float>(a, 1) == softmax<float>(a, 1));
    CHECK(layernorm<float>(a, g, beta, 1e-6f) == layernorm<float>(a, g, beta, 1e-6f));
    CHECK(gelu<float>(a) == gelu<float>(a));
  }
}

TEST_CASE("softmax examples") {
  const VectorD uniform = softmax<double>(VectorD::Zero(3));
  for (int i = 0; i < 3; ++i) CHECK(uniform(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  VectorF big(2);
  big << 1000.0f, 0.0f;
  const VectorF s = softmax<float>(big);
  CHECK(std::isfinite(s(0)));
  CHECK(s(0) == 1.0f);
  CHECK(s(1) == 0.0f);

  VectorD ln2(2);
  ln2 << std::log(2.0), 0.0;
  const VectorD p = softmax<double>(ln2);
  CHECK(p(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(p(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows are probability vectors") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const MatrixF x = testing::random_matrix_f(rng, 6, 9, 10.0f);
    for (int axis : {0, 1}) {
      const MatrixF p = softmax<float>(x, axis);
      CHECK(p.minCoeff() >= 0.0f);
      const Eigen::VectorXf sums = axis == 1 ? Eigen::VectorXf(p.rowwise().sum()) : Eigen::VectorXf(p.colwise().sum().transpose());
      for (Eigen::Index i = 0; i < sums.size(); ++i) CHECK(std::abs(sums(i) - 1.0f) <= 1e-6f);
    }
  }
  CHECK_THROWS_AS(softmax<float>(MatrixF::Zero(2, 2), 2), ShapeError);
}

TEST_CASE("layernorm examples") {
  const VectorF one = VectorF::Ones(2), zero = VectorF::Zero(2);
  MatrixF constant(1, 2);
  constant << 3.0f, 3.0f;
  CHECK(layernorm<float>(constant, one, zero, 1e-6f) == MatrixF::Zero(1, 2));

  MatrixD unit(1, 2);
  unit << 1.0, -1.0;
  const MatrixD same = layernorm<double>(unit, VectorD::Ones(2), VectorD::Zero(2), 1e-12);
  CHECK(same(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(same(0, 1) == doctest::Approx(-1.0).epsilon(1e-9));

  MatrixF x(1, 2);
  x << 0.0f, 2.0f;
  VectorF beta(2);
  beta << 5.0f, 5.0f;
  const MatrixF y = layernorm<float>(x, one, beta, 1e-6f);
  CHECK(std::abs(y(0, 0) - 4.0f) < 1e-5f);
  CHECK(std::abs(y(0, 1) - 6.0f) < 1e-5f);

  CHECK_THROWS_AS(layernorm<float>(x, VectorF::Ones(3), beta, 1e-6f), ShapeError);
}

TEST_CASE("layernorm output has zero mean and unit variance before the affine") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const MatrixD x = random_matrix(rng, 4, 16, 3.0) .array() + 7.0;
    const MatrixD y = layernorm<double>(x, VectorD::Ones(16), VectorD::Zero(16), 1e-12);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double mean = y.row(i).mean();
      const double var = (y.row(i).array() - mean).square().mean();
      CHECK(std::abs(mean) < 1e-5);
      CHECK(std::abs(var - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("gelu uses the tanh approximation") {
  CHECK(gelu(0.0f) == 0.0f);
  CHECK(gelu(10.0) == doctest::Approx(10.0).epsilon(1e-9));
  CHECK(std::abs(gelu(-10.0)) < 1e-9);

  // Independent evaluation in long double.
  const long double x = 1.0L;
  const long double expected =
      0.5L * x * (1.0L + std::tanh(std::sqrt(2.0L / 3.14159265358979323846L) * (x + 0.044715L * x * x * x)));
  CHECK(gelu(1.0) == doctest::Approx(static_cast<double>(expected)).epsilon(1e-12));
  CHECK(gelu(1.0f) == doctest::Approx(0.8412).epsilon(1e-4));
}

TEST_CASE("gelu derivative matches central differences") {
  for (double x = -4.0; x <= 4.0; x += 0.37) {
    const double h = 1e-5;
    const double fd = (gelu(x + h) - gelu(x - h)) / (2 * h);
    CHECK(gelu_derivative(x) == doctest::Approx(fd).epsilon(1e-7));
  }
}

TEST_CASE("tensor invariants and raw file round trip") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);

  testing::TempDir dir;
  Tensor t({2, 3, 4});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) * 0.5f - 3.0f;
  save_tensor(t, dir / "t.melt");
  CHECK(load_tensor(dir / "t.melt") == t);
  CHECK(std::filesystem::file_size(dir / "t.melt") == 4 + 4 + 3 * 4 + t.size() * 4);
}

TEST_CASE("pgm reader") {
  testing::TempDir dir;
  {
    std::ofstream out(dir / "a.pgm", std::ios::binary);
    out << "P5\n# comment\n3 2\n255\n";
    const unsigned char px[] = {0, 51, 102, 153, 204, 255};
    out.write(reinterpret_cast<const char*>(px), sizeof(px));
  }
  const Tensor t = load_image(dir / "a.pgm");
  CHECK(t.shape() == std::vector<std::size_t>{1, 2, 3});
  CHECK(t[0] == 0.0f);
  CHECK(t[5] == 1.0f);
  CHECK(t[1] == doctest::Approx(0.2f));

  {
    std::ofstream out(dir / "b.pgm");
    out << "P2 2 1 10\n5 10\n";
  }
  const Tensor u = load_pgm(dir / "b.pgm");
  CHECK(u[0] == doctest::Approx(0.5f));
  CHECK(u[1] == 1.0f);
}

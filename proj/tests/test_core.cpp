#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dml/core.hpp"
#include "dml/losses.hpp"
#include "dml/verify.hpp"

#include <cmath>

using namespace dml;

namespace {

EmbeddingBatch make_batch(const Matrix& m, std::vector<int> labels) {
  EmbeddingBatch b;
  b.vectors = m;
  b.labels = std::move(labels);
  return b;
}

}  // namespace

TEST_CASE("pairwise distances, hand values") {
  Matrix m(3, 2);
  m << 0, 0, 3, 0, 0, 4;
  auto b = make_batch(m, {0, 0, 1});

  auto sq = pairwise_distances(b, Metric::SquaredEuclidean);
  CHECK(sq.values(0, 0) == 0.0);
  CHECK(sq.values(0, 1) == doctest::Approx(9.0));
  CHECK(sq.values(0, 2) == doctest::Approx(16.0));
  CHECK(sq.values(1, 2) == doctest::Approx(25.0));
  CHECK(sq.values(1, 2) == sq.values(2, 1));

  auto eu = pairwise_distances(b, Metric::Euclidean);
  CHECK(eu.values(0, 1) == doctest::Approx(3.0));
  CHECK(eu.values(1, 2) == doctest::Approx(5.0));
}

TEST_CASE("identical rows give zero distance across metrics") {
  Matrix m(2, 3);
  m << 1, 2, 3, 1, 2, 3;
  auto b = make_batch(m, {0, 1});
  for (auto metric : {Metric::SquaredEuclidean, Metric::Euclidean, Metric::CosineDistance}) {
    auto d = pairwise_distances(b, metric);
    CHECK(d.values(0, 1) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("cosine distance of orthogonal unit rows is 1") {
  Matrix m(2, 2);
  m << 1, 0, 0, 1;
  auto d = pairwise_distances(make_batch(m, {0, 1}), Metric::CosineDistance);
  CHECK(d.values(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("cosine distance rejects a zero-norm row") {
  Matrix m(2, 2);
  m << 0, 0, 1, 0;
  CHECK_THROWS_AS(pairwise_distances(make_batch(m, {0, 1}), Metric::CosineDistance),
                  std::domain_error);
}

TEST_CASE("negative dot of unit rows relates to squared euclidean") {
  auto b = random_batch(7, 12, 5, 3);
  auto u = l2_normalize(b);
  auto sq = pairwise_distances(u, Metric::SquaredEuclidean);
  auto nd = pairwise_distances(u, Metric::NegativeDot);
  // ||x-y||^2 = 2 + 2 * (-x.y) on the unit sphere
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j)
      if (i != j) CHECK(sq.values(i, j) == doctest::Approx(2.0 + 2.0 * nd.values(i, j)).epsilon(1e-9));
}

TEST_CASE("squared euclidean is translation invariant") {
  auto b = random_batch(3, 10, 6, 4);
  auto before = pairwise_distances(b, Metric::SquaredEuclidean);
  EmbeddingBatch shifted = b;
  shifted.vectors.rowwise() += Eigen::RowVectorXd::Constant(6, 2.5);
  auto after = pairwise_distances(shifted, Metric::SquaredEuclidean);
  CHECK((before.values - after.values).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("l2 normalization, hand value and idempotence") {
  Matrix m(1, 2);
  m << 3, 4;
  auto u = l2_normalize(make_batch(m, {0}));
  CHECK(u.normalized);
  CHECK(u.vectors(0, 0) == doctest::Approx(0.6));
  CHECK(u.vectors(0, 1) == doctest::Approx(0.8));

  auto again = l2_normalize(u);
  CHECK((again.vectors - u.vectors).cwiseAbs().maxCoeff() < 1e-15);

  Matrix z = Matrix::Zero(1, 2);
  CHECK_THROWS_AS(l2_normalize(make_batch(z, {0})), std::domain_error);
}

TEST_CASE("l2_normalize_backward matches finite differences") {
  SamplerRng rng(11);
  Matrix raw(4, 5);
  for (int i = 0; i < raw.size(); ++i) raw.data()[i] = rng.normal();
  Matrix gu(4, 5);
  for (int i = 0; i < gu.size(); ++i) gu.data()[i] = rng.normal();

  Matrix unit = l2_normalize_rows(raw);
  Matrix analytic = l2_normalize_backward(raw, unit, gu);

  const double h = 1e-6;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 5; ++c) {
      Matrix plus = raw, minus = raw;
      plus(r, c) += h;
      minus(r, c) -= h;
      double fp = (l2_normalize_rows(plus).array() * gu.array()).sum();
      double fm = (l2_normalize_rows(minus).array() * gu.array()).sum();
      double fd = (fp - fm) / (2 * h);
      CHECK(analytic(r, c) == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("log_sum_exp is stable and correct") {
  CHECK(log_sum_exp({0.0, 0.0}) == doctest::Approx(std::log(2.0)));
  CHECK(log_sum_exp({1000.0, 1000.0}) == doctest::Approx(1000.0 + std::log(2.0)));
  CHECK(log_sum_exp({-1000.0}) == doctest::Approx(-1000.0));
  CHECK(std::isinf(log_sum_exp({})));
}

TEST_CASE("batch validation rejects label/row mismatch") {
  EmbeddingBatch b;
  b.vectors = Matrix::Zero(3, 2);
  b.labels = {0, 1};
  CHECK_THROWS_AS(b.validate(), std::invalid_argument);
}

TEST_CASE("grad_check accepts a correct gradient and flags a broken one") {
  // f = sum of squares: grad 2x, simple and smooth everywhere
  LossEvaluator good;
  good.fn = [](const EmbeddingBatch& b, const ParamMap&) {
    DifferentiableResult r;
    r.value = b.vectors.squaredNorm();
    r.grad_embeddings = 2.0 * b.vectors;
    return r;
  };
  auto batch = random_batch(21, 5, 4, 2);
  auto rep = grad_check(good, batch, 1e-5, 1e-4);
  CHECK(rep.pass);
  CHECK(rep.max_rel_error < 1e-4);

  LossEvaluator bad = good;
  bad.fn = [](const EmbeddingBatch& b, const ParamMap&) {
    DifferentiableResult r;
    r.value = b.vectors.squaredNorm();
    r.grad_embeddings = -2.0 * b.vectors;  // wrong sign
    return r;
  };
  auto rep2 = grad_check(bad, batch, 1e-5, 1e-4);
  CHECK_FALSE(rep2.pass);
}

TEST_CASE("grad_check covers trainable parameters") {
  LossEvaluator ev;
  ev.params["w"] = Matrix::Constant(1, 3, 0.5);
  ev.fn = [](const EmbeddingBatch& b, const ParamMap& p) {
    DifferentiableResult r;
    const Matrix& w = p.at("w");
    r.value = (b.vectors * w.transpose()).sum();
    r.grad_embeddings = Matrix::Zero(b.vectors.rows(), b.vectors.cols());
    r.grad_embeddings.rowwise() += w.row(0);
    r.grad_params["w"] = Matrix::Zero(1, 3);
    r.grad_params["w"].row(0) = b.vectors.colwise().sum();
    return r;
  };
  auto batch = random_batch(22, 4, 3, 2);
  auto rep = grad_check(ev, batch, 1e-5, 1e-4);
  CHECK(rep.pass);

  // corrupting the parameter gradient must be detected
  LossEvaluator bad = ev;
  bad.fn = [inner = ev.fn](const EmbeddingBatch& b, const ParamMap& p) {
    auto r = inner(b, p);
    r.grad_params["w"](0, 1) += 0.7;
    return r;
  };
  CHECK_FALSE(grad_check(bad, batch, 1e-5, 1e-4).pass);
}

TEST_CASE("grad_check skips points close to a kink") {
  LossEvaluator hinge;
  hinge.fn = [](const EmbeddingBatch& b, const ParamMap&) {
    DifferentiableResult r;
    double x = b.vectors(0, 0);
    r.value = std::max(0.0, x);
    r.grad_embeddings = Matrix::Zero(b.vectors.rows(), b.vectors.cols());
    r.grad_embeddings(0, 0) = x > 0 ? 1.0 : 0.0;
    r.track_kink(x);
    return r;
  };
  Matrix m = Matrix::Constant(1, 1, 1e-6);
  auto rep = grad_check(hinge, make_batch(m, {0}), 1e-5, 1e-4);
  CHECK(rep.skipped_near_kink);
  CHECK(rep.pass);

  Matrix far = Matrix::Constant(1, 1, 0.5);
  auto rep2 = grad_check(hinge, make_batch(far, {0}), 1e-5, 1e-4);
  CHECK_FALSE(rep2.skipped_near_kink);
  CHECK(rep2.pass);
}

#include "kpdeform/prior.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "test_support.hpp"

using namespace kpd;

namespace {

std::vector<KeypointSet> random_sets(Rng& rng, int n, int k) {
  std::vector<KeypointSet> out;
  for (int i = 0; i < n; ++i) out.emplace_back(test::random_points(rng, k, -0.5, 0.5));
  return out;
}

Eigen::MatrixXd stacked_centered(const std::vector<KeypointSet>& sets) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(sets.size()), sets[0].points.size());
  for (std::size_t i = 0; i < sets.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = flatten_keypoints(sets[i].points).transpose();
  x.rowwise() -= x.colwise().mean();
  return x;
}

double reconstruction_error(const PCAPrior& p, const std::vector<KeypointSet>& sets, int n_basis) {
  double err = 0.0;
  for (const auto& s : sets) {
    const Eigen::VectorXd c = flatten_keypoints(s.points) - p.mean;
    const Eigen::MatrixXd b = p.basis.topRows(n_basis);
    err += (c - b.transpose() * (b * c)).squaredNorm();
  }
  return err;
}

// Sets mirror-symmetric about x = 0: keypoints 0/1 are partners, 2 and 3
// lie on the plane.
std::vector<KeypointSet> symmetric_sets(Rng& rng, int n) {
  std::vector<KeypointSet> out;
  for (int i = 0; i < n; ++i) {
    Points p(4, 3);
    p.row(0) << rng.uniform(0.1, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3);
    p.row(1) << -p(0, 0), p(0, 1), p(0, 2);
    p.row(2) << 0.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3);
    p.row(3) << 0.0, rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3);
    out.emplace_back(p);
  }
  return out;
}

}  // namespace

TEST(FitPca, IdenticalSetsGiveZeroSpread) {
  Rng rng(1);
  const Points p = test::random_points(rng, 5, -0.5, 0.5);
  const std::vector<KeypointSet> sets(12, KeypointSet(p));
  const PCAPrior prior = fit_pca(sets);
  EXPECT_LT((unflatten_keypoints(prior.mean) - p).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_EQ(prior.singular_values.size(), 8);
  EXPECT_EQ(prior.singular_values.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(prior.rank, 0);
  EXPECT_TRUE(prior.rank_deficient);
}

TEST(FitPca, RankOneDataRecoversDirection) {
  Rng rng(2);
  const Points base = test::random_points(rng, 4, -0.5, 0.5);
  Eigen::VectorXd dir = Eigen::VectorXd::Random(12).normalized();
  std::vector<KeypointSet> sets;
  for (int i = 0; i < 15; ++i)
    sets.emplace_back(unflatten_keypoints(flatten_keypoints(base) + rng.uniform(-1, 1) * dir));
  const PCAPrior prior = fit_pca(sets);
  EXPECT_GT(prior.singular_values(0), 0.1);
  for (int b = 1; b < 8; ++b) EXPECT_EQ(prior.singular_values(b), 0.0);
  EXPECT_NEAR(std::abs(prior.basis.row(0).dot(dir)), 1.0, 1e-10);
  EXPECT_EQ(prior.rank, 1);
  EXPECT_TRUE(prior.rank_deficient);
  for (int b = 1; b < 8; ++b) EXPECT_EQ(prior.basis.row(b).norm(), 0.0);
}

TEST(FitPca, MatchesCovarianceEigenOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto sets = random_sets(rng, 10, 3);  // 9 dims, rank 9 after centering
    const PCAPrior prior = fit_pca(sets);
    ASSERT_FALSE(prior.rank_deficient);
    const Eigen::MatrixXd x = stacked_centered(sets);
    const auto [vals, vecs] = test::jacobi_eigen(x.transpose() * x);
    for (int b = 0; b < 8; ++b) EXPECT_NEAR(prior.singular_values(b), std::sqrt(std::max(0.0, vals(b))), 1e-9);
    // the oracle's top-8 subspace; eigenvalues are distinct for random data
    const Eigen::MatrixXd oracle = vecs.leftCols(8).transpose();
    EXPECT_LT(test::max_principal_angle(prior.basis, oracle), 1e-6);
    for (int b = 0; b < 8; ++b)
      EXPECT_LT(test::max_principal_angle(prior.basis.row(b), oracle.row(b)), 1e-6) << "basis " << b;
  }
}

TEST(FitPca, InvariantsOnRandomData) {
  Rng rng(4);
  const auto sets = random_sets(rng, 30, 6);
  const PCAPrior prior = fit_pca(sets);
  const Eigen::MatrixXd gram = prior.basis * prior.basis.transpose();
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff(), 1e-8);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(18);
  for (const auto& s : sets) mean += flatten_keypoints(s.points) / static_cast<double>(sets.size());
  EXPECT_LT((prior.mean - mean).cwiseAbs().maxCoeff(), 1e-14);
  for (int b = 0; b + 1 < 8; ++b) EXPECT_GE(prior.singular_values(b), prior.singular_values(b + 1));
  for (int b = 0; b < 8; ++b) {
    Eigen::Index arg = 0;
    prior.basis.row(b).cwiseAbs().maxCoeff(&arg);
    EXPECT_GT(prior.basis(b, arg), 0.0) << "sign convention, basis " << b;
  }
}

TEST(FitPca, EightBasesReconstructAtLeastAsWellAsSeven) {
  Rng rng(5);
  const auto sets = random_sets(rng, 40, 8);
  const PCAPrior prior = fit_pca(sets);
  const double e8 = reconstruction_error(prior, sets, 8);
  const double e7 = reconstruction_error(prior, sets, 7);
  EXPECT_LE(e8, e7);
  // and no other 7-dim subspace drawn from the oracle's eigenvectors does better
  const auto [vals, vecs] = test::jacobi_eigen(stacked_centered(sets).transpose() * stacked_centered(sets));
  for (int drop = 0; drop < 8; ++drop) {
    PCAPrior alt = prior;
    int row = 0;
    for (int b = 0; b < 8; ++b)
      if (b != drop) alt.basis.row(row++) = vecs.col(b).transpose();
    EXPECT_LE(e8, reconstruction_error(alt, sets, 7) + 1e-12);
  }
}

TEST(FitPca, Errors) {
  Rng rng(6);
  EXPECT_THROW(fit_pca(random_sets(rng, 8, 3)), InvalidInput);
  auto sets = random_sets(rng, 10, 3);
  sets[4] = KeypointSet(test::random_points(rng, 4, -1, 1));
  EXPECT_THROW(fit_pca(sets), InvalidInput);
  sets = random_sets(rng, 10, 3);
  sets[2].points(0, 0) = std::nan("");
  EXPECT_THROW(fit_pca(sets), InvalidInput);
}

TEST(Projection, ReconstructionIsAContraction) {
  Rng rng(7);
  const PCAPrior prior = fit_pca(random_sets(rng, 30, 5));
  for (int i = 0; i < 20; ++i) {
    const KeypointSet p(test::random_points(rng, 5, -1, 1));
    const double err = (reconstruct(prior, p).points - p.points).norm();
    EXPECT_LE(err, (flatten_keypoints(p.points) - prior.mean).norm() + 1e-12);
  }
}

TEST(SamplePrior, ZeroIsMeanAndOppositeCoefficientsMirror) {
  Rng rng(8);
  const PCAPrior prior = fit_pca(random_sets(rng, 20, 4));
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(8);
  EXPECT_LT((sample_prior(prior, zero).points - unflatten_keypoints(prior.mean)).cwiseAbs().maxCoeff(), 1e-15);
  Eigen::VectorXd c = zero;
  c(0) = 0.3;
  const Points plus = sample_prior(prior, c).points;
  const Points minus = sample_prior(prior, -c).points;
  EXPECT_LT(((plus + minus) / 2 - unflatten_keypoints(prior.mean)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_THROW(sample_prior(prior, Eigen::VectorXd::Zero(7)), InvalidInput);
}

TEST(Synchronize, EditAtMeanGivesMean) {
  Rng rng(9);
  const PCAPrior prior = fit_pca(random_sets(rng, 20, 4));
  const Points mean = unflatten_keypoints(prior.mean);
  const KeypointSet out = synchronize(prior, KeypointSet(mean), {{2, mean.row(2).transpose()}});
  EXPECT_LT((out.points - mean).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Synchronize, EditsAreHonoredExactly) {
  Rng rng(10);
  const PCAPrior prior = fit_pca(random_sets(rng, 20, 5));
  const KeypointSet p(unflatten_keypoints(prior.mean));
  const Vec3 a(0.123456789, -0.3, 0.77), b(-0.5, 0.25, 0.1);
  const KeypointSet out = synchronize(prior, p, {{1, a}, {3, b}});
  EXPECT_EQ(out.points.row(1), a.transpose());
  EXPECT_EQ(out.points.row(3), b.transpose());
}

TEST(Synchronize, AllKeypointsEditedReturnsEdits) {
  Rng rng(11);
  const PCAPrior prior = fit_pca(random_sets(rng, 20, 4));
  const Points target = test::random_points(rng, 4, -1, 1);
  std::vector<KeypointEdit> edits;
  for (int k = 0; k < 4; ++k) edits.push_back({k, target.row(k).transpose()});
  EXPECT_EQ(synchronize(prior, KeypointSet(unflatten_keypoints(prior.mean)), edits).points, target);
}

TEST(Synchronize, OneEditOnRankOnePriorRecoversInstance) {
  Rng rng(12);
  const Points base = test::random_points(rng, 6, -0.5, 0.5);
  const Eigen::VectorXd dir = Eigen::VectorXd::Random(18).normalized();
  std::vector<KeypointSet> sets;
  for (int i = 0; i < 12; ++i)
    sets.emplace_back(unflatten_keypoints(flatten_keypoints(base) + rng.uniform(-0.5, 0.5) * dir));
  const PCAPrior prior = fit_pca(sets);
  const Points mean = unflatten_keypoints(prior.mean);
  const Points& instance = sets[3].points;
  const KeypointSet out = synchronize(prior, KeypointSet(mean), {{2, instance.row(2).transpose()}});
  EXPECT_LT(chamfer_distance(out.points, instance), chamfer_distance(mean, instance));
  EXPECT_LT((out.points - instance).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Synchronize, SymmetricEditsStaySymmetric) {
  Rng rng(13);
  const PCAPrior prior = fit_pca(symmetric_sets(rng, 30));
  // the prior's basis is itself mirror-symmetric
  for (int b = 0; b < prior.rank; ++b) {
    const Points v = unflatten_keypoints(prior.basis.row(b).transpose());
    EXPECT_TRUE(test::mirror_symmetric(v, 1e-9)) << "basis " << b;
  }
  const Vec3 q(0.45, 0.1, -0.2);
  const Vec3 mq(-q.x(), q.y(), q.z());
  const KeypointSet out = synchronize(prior, KeypointSet(unflatten_keypoints(prior.mean)), {{0, q}, {1, mq}});
  EXPECT_TRUE(test::mirror_symmetric(out.points, 1e-6));
  EXPECT_NEAR(out.points(2, 0), 0.0, 1e-6);
  EXPECT_NEAR(out.points(3, 0), 0.0, 1e-6);
}

TEST(Synchronize, Errors) {
  Rng rng(14);
  const PCAPrior prior = fit_pca(random_sets(rng, 20, 4));
  const KeypointSet p(unflatten_keypoints(prior.mean));
  EXPECT_THROW(synchronize(prior, p, {}), InvalidInput);
  EXPECT_THROW(synchronize(prior, p, {{4, Vec3::Zero()}}), InvalidInput);
  EXPECT_THROW(synchronize(prior, p, {{-1, Vec3::Zero()}}), InvalidInput);
  EXPECT_THROW(synchronize(prior, KeypointSet(Points::Zero(3, 3)), {{0, Vec3::Zero()}}), InvalidInput);
}

TEST(ShiftAlongBasis, ZeroShiftIsIdentity) {
  Rng rng(15);
  const auto sets = random_sets(rng, 20, 4);
  const PCAPrior prior = fit_pca(sets);
  EXPECT_EQ(shift_along_basis(prior, sets[0], 0, 0.0).points, sets[0].points);
  const Points up = shift_along_basis(prior, sets[0], 1, 2.0).points;
  const double sd = prior.stddev()(1);
  EXPECT_NEAR((up - sets[0].points).norm(), 2.0 * sd, 1e-12);
  EXPECT_THROW(shift_along_basis(prior, sets[0], 8, 1.0), InvalidInput);
}

TEST(PriorIo, RoundTripIsExact) {
  Rng rng(16);
  PCAPrior prior = fit_pca(random_sets(rng, 20, 4));
  prior.model_checksum = "0123456789abcdef";
  const auto path = (std::filesystem::temp_directory_path() / "kpd_prior_test.json").string();
  save_prior(prior, path);
  const PCAPrior back = load_prior(path);
  EXPECT_EQ(back.mean, prior.mean);
  EXPECT_EQ(back.basis, prior.basis);
  EXPECT_EQ(back.singular_values, prior.singular_values);
  EXPECT_EQ(back.num_keypoints, 4);
  EXPECT_EQ(back.num_samples, 20u);
  EXPECT_EQ(back.model_checksum, prior.model_checksum);
  std::filesystem::remove(path);
  EXPECT_THROW(prior_from_json(json{{"format", "other"}}), InvalidInput);
  EXPECT_THROW(load_prior(path), InvalidInput);
}

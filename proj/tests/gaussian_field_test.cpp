#include <gtest/gtest.h>

#include "support.hpp"

using namespace difgs;
using namespace difgs::testing;

namespace {

const Box kCube{{-1, -1, -1}, {1, 1, 1}};

std::vector<double> random_raw(std::size_t n_g, std::size_t c_g, std::mt19937_64& rng, double scale = 1.0) {
  std::vector<double> raw(n_g * gaussian_param_width(c_g));
  for (auto& v : raw) v = uniform(rng, -scale, scale);
  return raw;
}

Quat random_quat(std::mt19937_64& rng) {
  return normalize_quaternion({uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)});
}

}  // namespace

TEST(InitPositions, CentroidsOfRegularPartition) {
  const Box b{{0, -2, 10}, {4, 2, 16}};
  const auto p = init_positions(2, b);
  ASSERT_EQ(p.size(), 8u);
  EXPECT_DOUBLE_EQ(p[0].x, 1);
  EXPECT_DOUBLE_EQ(p[0].y, -1);
  EXPECT_DOUBLE_EQ(p[0].z, 11.5);
  EXPECT_DOUBLE_EQ(p[1].x, 3);  // x fastest
  EXPECT_DOUBLE_EQ(p[7].z, 14.5);
  EXPECT_EQ(init_positions(5, b).size(), 125u);
  EXPECT_THROW(init_positions(0, b), InvalidParameter);
}

TEST(NearestK, GridSearchMatchesBruteForce) {
  std::mt19937_64 rng(51);
  for (std::size_t v : {1u, 2u, 3u, 5u, 8u}) {
    const GaussianGrid grid(v, kCube);
    for (int t = 0; t < 300; ++t) {
      const Vec3 p{uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5), uniform(rng, -1.5, 1.5)};
      for (std::size_t k : {1u, 3u, 8u}) {
        if (k > grid.size()) continue;
        EXPECT_EQ(grid.nearest_k(p, k), brute_force_nearest(p, grid.u_hat, k)) << "v=" << v << " k=" << k;
        EXPECT_EQ(nearest_k(p, grid.u_hat, k), brute_force_nearest(p, grid.u_hat, k));
      }
    }
  }
}

TEST(NearestK, TiesResolveToLowestIndex) {
  const GaussianGrid grid(2, kCube);
  // the cube center is equidistant from all eight centroids
  EXPECT_EQ(grid.nearest_k({0, 0, 0}, 3), (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_THROW(grid.nearest_k({0, 0, 0}, 9), InvalidParameter);
}

TEST(Covariance, MatchesEigenAndIsSymmetricPositiveDefinite) {
  std::mt19937_64 rng(52);
  for (int t = 0; t < 200; ++t) {
    const Quat q = random_quat(rng);
    const Vec3 s{uniform(rng, 0.01, 2), uniform(rng, 0.01, 2), uniform(rng, 0.01, 2)};
    const Mat3 a = build_covariance(q, s);
    const Eigen::Matrix3d b = covariance_eigen(q, s);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        EXPECT_NEAR(a[i][j], b(i, j), 1e-12);
        EXPECT_NEAR(a[i][j], a[j][i], 1e-14);
      }
    Eigen::Matrix3d am;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) am(i, j) = a[i][j];
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(am).eigenvalues().minCoeff(), 0);
    EXPECT_NEAR(determinant(a), s.x * s.x * s.y * s.y * s.z * s.z, 1e-10);
  }
}

TEST(Covariance, RotationIsOrthonormal) {
  std::mt19937_64 rng(53);
  for (int t = 0; t < 100; ++t) {
    const Mat3 m = rotation_from_quaternion(random_quat(rng));
    const Mat3 mm = matmul(m, transpose(m));
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) EXPECT_NEAR(mm[i][j], i == j ? 1.0 : 0.0, 1e-12);
    EXPECT_NEAR(determinant(m), 1.0, 1e-12);
  }
  EXPECT_THROW(normalize_quaternion({0, 0, 0, 0}), ZeroNorm);
}

TEST(GaussianWeight, MatchesDenseDensity) {
  std::mt19937_64 rng(54);
  for (int t = 0; t < 200; ++t) {
    const Quat q = random_quat(rng);
    const Vec3 s{uniform(rng, 0.1, 1), uniform(rng, 0.1, 1), uniform(rng, 0.1, 1)};
    const Vec3 u{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const Vec3 p{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const double ref = gaussian_density_eigen(p, u, covariance_eigen(q, s));
    EXPECT_NEAR(gaussian_weight(p, u, build_covariance(q, s)), ref, 1e-10 * std::max(1.0, ref));
  }
}

TEST(GaussianWeight, IntegratesToOne) {
  const Quat q = normalize_quaternion({1, 0.3, -0.2, 0.5});
  const Mat3 sigma = build_covariance(q, {0.3, 0.5, 0.4});
  const Vec3 u{0.1, -0.2, 0.05};
  const int n = 80;
  const double h = 6.0 / n;
  double sum = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        sum += gaussian_weight({-3 + (i + 0.5) * h, -3 + (j + 0.5) * h, -3 + (k + 0.5) * h}, u, sigma);
  EXPECT_NEAR(sum * h * h * h, 1.0, 1e-3);
}

TEST(GaussianWeight, SingularCovarianceIsRejected) {
  const Mat3 sigma = build_covariance({1, 0, 0, 0}, {1e-6, 1e-6, 1e-6});
  EXPECT_THROW(gaussian_weight({0, 0, 0}, {0, 0, 0}, sigma), SingularCovariance);
}

TEST(Activation, RespectsBoundsAndIdentityAtZero) {
  std::mt19937_64 rng(55);
  const GaussianGrid grid(3, kCube);
  const auto gs = activate_gaussians(grid, 4, random_raw(grid.size(), 4, rng, 20.0));
  for (std::size_t i = 0; i < gs.n_g; ++i) {
    for (int a = 0; a < 3; ++a) {
      EXPECT_LE(std::abs(gs.delta_u[3 * i + a]), 0.5 * grid.pitch[a]);
      EXPECT_GE(gs.scale[3 * i + a], gs.act.s_min);
      EXPECT_LE(gs.scale[3 * i + a], gs.act.s_max);
    }
    double qn = 0;
    for (int a = 0; a < 4; ++a) qn += gs.quat[4 * i + a] * gs.quat[4 * i + a];
    EXPECT_NEAR(qn, 1.0, 1e-12);
  }
  const std::vector<double> zero(grid.size() * gaussian_param_width(4), 0.0);
  const auto g0 = activate_gaussians(grid, 4, zero);
  EXPECT_EQ(g0.quat[0], 1.0);
  EXPECT_EQ(g0.delta_u[0], 0.0);
  EXPECT_NEAR(g0.scale[0], 0.5 * (g0.act.s_min + g0.act.s_max), 1e-15);
  EXPECT_THROW(activate_gaussians(grid, 4, std::vector<double>(5)), ShapeMismatch);
}

TEST(QueryField, AllGaussiansMatchesDenseSum) {
  std::mt19937_64 rng(56);
  const GaussianGrid grid(2, kCube);
  const auto gs = activate_gaussians(grid, 3, random_raw(grid.size(), 3, rng));
  for (int t = 0; t < 100; ++t) {
    const Vec3 p{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const auto a = query_field<double>(p, gs, gs.n_g);
    const auto b = query_field_full(p, gs);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(a[c], b[c], 1e-10 * (1 + std::abs(b[c])));
  }
}

TEST(QueryField, TruncationUsesNearestInitialPositions) {
  std::mt19937_64 rng(57);
  const GaussianGrid grid(3, kCube);
  const auto gs = activate_gaussians(grid, 2, random_raw(grid.size(), 2, rng));
  for (int t = 0; t < 100; ++t) {
    const Vec3 p{uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    const auto idx = brute_force_nearest(p, grid.u_hat, 3);
    std::vector<double> ref(2, 0.0);
    for (auto i : idx) {
      const double w = gaussian_density_eigen(
          p, gs.center[i],
          covariance_eigen({gs.quat[4 * i], gs.quat[4 * i + 1], gs.quat[4 * i + 2], gs.quat[4 * i + 3]},
                           {gs.scale[3 * i], gs.scale[3 * i + 1], gs.scale[3 * i + 2]}));
      for (int c = 0; c < 2; ++c) ref[c] += w * gs.feat[i * 2 + c];
    }
    const auto got = query_field<double>(p, gs, 3);
    for (int c = 0; c < 2; ++c) EXPECT_NEAR(got[c], ref[c], 1e-10 * (1 + std::abs(ref[c])));
  }
  EXPECT_THROW(query_field<double>({0, 0, 0}, gs, 0), InvalidParameter);
}

TEST(QueryField, GradientThroughActivationsMatchesFiniteDifferences) {
  std::mt19937_64 rng(58);
  const GaussianGrid grid(2, kCube);
  const std::size_t c_g = 3;
  GradStats all;
  for (int trial = 0; trial < 10; ++trial) {
    auto raw = random_raw(grid.size(), c_g, rng);
    std::vector<Vec3> pts(6);
    std::vector<double> r(pts.size() * c_g);
    for (auto& p : pts) p = {uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)};
    for (auto& v : r) v = uniform(rng, -1, 1);
    auto loss = [&] {
      const auto gs = activate_gaussians(grid, c_g, raw);
      double s = 0;
      for (std::size_t n = 0; n < pts.size(); ++n) {
        const auto f = query_field<double>(pts[n], gs, 3);
        for (std::size_t c = 0; c < c_g; ++c) s += r[n * c_g + c] * f[c];
      }
      return s;
    };
    const auto gs = activate_gaussians(grid, c_g, raw);
    GaussianGrad grad(gs);
    for (std::size_t n = 0; n < pts.size(); ++n) {
      std::vector<double> out(c_g);
      std::vector<FieldTap> taps;
      query_field(pts[n], gs, 3, out.data(), taps);
      query_field_backward<double>(gs, taps, r.data() + n * c_g, grad);
    }
    const auto draw = activation_backward(gs, grad);
    for (std::size_t i = 0; i < raw.size(); ++i) all.add(draw[i], central_diff(loss, raw[i]));
  }
  EXPECT_LT(all.quantile(0.99), 1e-5);
  EXPECT_LT(all.max_rel, 1e-3);
}

TEST(Covariance, AnalyticQuaternionCases) {
  const Mat3 id = rotation_from_quaternion({1, 0, 0, 0});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(id[i][j], i == j ? 1.0 : 0.0, 1e-15);
  // 90 degrees about z
  const double h = std::sqrt(0.5);
  const Mat3 rz = rotation_from_quaternion({h, 0, 0, h});
  const double expect[3][3] = {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(rz[i][j], expect[i][j], 1e-15);
  // the same rotation gives Sigma with swapped x/y variances
  const Mat3 s = build_covariance({h, 0, 0, h}, {1, 2, 3});
  EXPECT_NEAR(s[0][0], 4, 1e-12);
  EXPECT_NEAR(s[1][1], 1, 1e-12);
  EXPECT_NEAR(s[2][2], 9, 1e-12);
  EXPECT_NEAR(s[0][1], 0, 1e-12);
}

TEST(Covariance, EigenvaluesAreSquaredScales) {
  std::mt19937_64 rng(59);
  for (int t = 0; t < 100; ++t) {
    const Vec3 s{uniform(rng, 0.05, 2), uniform(rng, 0.05, 2), uniform(rng, 0.05, 2)};
    const Mat3 a = build_covariance(random_quat(rng), s);
    Eigen::Matrix3d am;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) am(i, j) = a[i][j];
    Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(am).eigenvalues();
    std::array<double, 3> want{s.x * s.x, s.y * s.y, s.z * s.z};
    std::sort(want.begin(), want.end());
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(ev(i), want[i], 1e-9);
  }
}

TEST(GaussianWeight, PeakValue) {
  std::mt19937_64 rng(60);
  const Vec3 u{0.3, -0.1, 0.2};
  EXPECT_NEAR(gaussian_weight(u, u, build_covariance(random_quat(rng), {1, 1, 1})),
              std::pow(2 * std::numbers::pi, -1.5), 1e-12);
  const Vec3 s{0.5, 0.2, 0.8};
  EXPECT_NEAR(gaussian_weight(u, u, build_covariance(random_quat(rng), s)),
              std::pow(2 * std::numbers::pi, -1.5) / (s.x * s.y * s.z), 1e-9);
}

TEST(QueryField, ThreeNearestMatchesFullSumWhenWellSeparated) {
  std::mt19937_64 rng(61);
  for (std::size_t v : {3u, 4u}) {
    const GaussianGrid grid(v, kCube);
    const std::size_t c_g = 4, width = gaussian_param_width(c_g);
    auto raw = random_raw(grid.size(), c_g, rng, 0.3);
    const auto probe = activate_gaussians(grid, c_g, raw);
    const double cell = grid.min_pitch(), target = 0.1 * cell;
    const double p = (target - probe.act.s_min) / (probe.act.s_max - probe.act.s_min);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      for (int a = 0; a < 3; ++a) raw[i * width + a] = 0;  // stay on the centroid
      for (int a = 0; a < 3; ++a) raw[i * width + 7 + c_g + a] = std::log(p / (1 - p)) + uniform(rng, -0.1, 0.1);
    }
    const auto gs = activate_gaussians(grid, c_g, raw);
    for (int t = 0; t < 200; ++t) {
      const Vec3 c = grid.u_hat[rng() % grid.size()];
      const Vec3 q{c.x + uniform(rng, -0.25, 0.25) * cell, c.y + uniform(rng, -0.25, 0.25) * cell,
                   c.z + uniform(rng, -0.25, 0.25) * cell};
      const auto a = query_field<double>(q, gs, 3);
      const auto b = query_field<double>(q, gs, gs.n_g);
      double na = 0, nd = 0;
      for (std::size_t ch = 0; ch < c_g; ++ch) {
        nd += (a[ch] - b[ch]) * (a[ch] - b[ch]);
        na += b[ch] * b[ch];
      }
      EXPECT_LT(std::sqrt(nd), 1e-6 * std::sqrt(na));
    }
  }
}

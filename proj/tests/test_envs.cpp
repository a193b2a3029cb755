#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include <Eigen/Dense>

#include "soiltdm/envs.hpp"
#include "soiltdm/io.hpp"

using namespace soiltdm;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LinGaussEnv zero_noise_env(const MatrixXd& A, const MatrixXd& B) {
  LinGaussEnv::Params p = LinGaussEnv::default_2d();
  p.A = A;
  p.B = B;
  p.noise_std = VectorXd::Zero(A.rows());
  p.Qc = MatrixXd::Identity(A.rows(), A.rows());
  p.Rc = MatrixXd::Identity(B.cols(), B.cols());
  return LinGaussEnv(p);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::vector<double> trajectory_digest(const Trajectory& t) {
  std::vector<double> d;
  for (const auto& tr : t) {
    for (Eigen::Index i = 0; i < tr.state.size(); ++i) d.push_back(tr.state[i]);
    for (Eigen::Index i = 0; i < tr.action.size(); ++i) d.push_back(tr.action[i]);
    for (Eigen::Index i = 0; i < tr.next_state.size(); ++i)
      d.push_back(tr.next_state[i]);
    d.push_back(tr.env_reward);
  }
  return d;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("lingauss with zero noise: origin is a fixed point under zero action") {
  const auto env = zero_noise_env(MatrixXd::Identity(2, 2) * 0.9,
                                  MatrixXd::Identity(2, 2));
  Rng rng(1);
  const auto tr = env_step(env, VectorXd::Zero(2), VectorXd::Zero(2), rng, 0);
  CHECK(tr.next_state.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lingauss A=I B=I zero noise advances linearly") {
  const auto env =
      zero_noise_env(MatrixXd::Identity(2, 2), MatrixXd::Identity(2, 2));
  Rng rng(2);
  VectorXd s(2), a(2);
  s << 1.0, 0.0;
  a << 0.0, 1.0;
  const auto tr = env_step(env, s, a, rng, 0);
  CHECK(tr.next_state[0] == doctest::Approx(1.0));
  CHECK(tr.next_state[1] == doctest::Approx(1.0));
}

TEST_CASE("pendulum at the bottom with zero torque stays at rest") {
  PendulumEnv env;
  VectorXd bottom(2), zero(1);
  const double pi = 3.14159265358979323846;
  bottom << pi, 0.0;
  zero << 0.0;
  const VectorXd d = env.drift(bottom, zero);
  CHECK(d[0] == doctest::Approx(pi).epsilon(1e-12));
  CHECK(std::abs(d[1]) < 1e-12);
}

TEST_CASE("transition density peaks at the analytic mode value") {
  auto env = make_env("lingauss2");
  Rng rng(3);
  const VectorXd s = rng.normal_vector(2);
  const VectorXd a = rng.normal_vector(2);
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const VectorXd mode = env->drift(s, a);
  double expected = -std::log(2 * 3.14159265358979323846);
  for (int i = 0; i < 2; ++i) expected -= std::log(lg->params().noise_std[i]);
  CHECK(transition_logpdf(*env, s, a, mode) == doctest::Approx(expected).epsilon(1e-12));
  // any other point scores lower
  CHECK(transition_logpdf(*env, s, a, mode + VectorXd::Constant(2, 0.05)) < expected);
}

TEST_CASE("transition density integrates to one on a 2d grid") {
  auto env = make_env("lingauss2");
  Rng rng(4);
  const VectorXd s = rng.normal_vector(2);
  const VectorXd a = rng.normal_vector(2);
  const VectorXd mode = env->drift(s, a);
  const double span = 0.8;  // +- 8 sigma
  const int g = 200;
  const double step = 2 * span / g;
  double mass = 0.0;
  VectorXd probe(2);
  for (int i = 0; i < g; ++i) {
    for (int j = 0; j < g; ++j) {
      probe << mode[0] - span + (i + 0.5) * step, mode[1] - span + (j + 0.5) * step;
      mass += std::exp(transition_logpdf(*env, s, a, probe));
    }
  }
  mass *= step * step;
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("sampled next states pass a KS test against the analytic marginals") {
  for (const char* name : {"lingauss2", "pointmass2d", "pendulum"}) {
    auto env = make_env(name);
    Rng rng(5);
    const VectorXd s = 0.3 * rng.normal_vector(env->state_dim());
    const VectorXd a = 0.3 * rng.normal_vector(env->action_dim());
    const VectorXd mean = env->drift(s, a);
    const VectorXd std = env->noise_stddev();
    const int n = 2000;
    MatrixXd samples(env->state_dim(), n);
    for (int i = 0; i < n; ++i)
      samples.col(i) = env_step(*env, s, a, rng, 0).next_state;
    const double crit = 1.6276 / std::sqrt(static_cast<double>(n));
    for (int d = 0; d < env->state_dim(); ++d) {
      std::vector<double> xs(samples.row(d).begin(), samples.row(d).end());
      std::sort(xs.begin(), xs.end());
      double ks = 0.0;
      for (int i = 0; i < n; ++i) {
        const double cdf = normal_cdf((xs[i] - mean[d]) / std[d]);
        ks = std::max(ks, std::abs(cdf - (i + 1.0) / n));
        ks = std::max(ks, std::abs(cdf - static_cast<double>(i) / n));
      }
      CHECK(ks < crit);
    }
  }
}

TEST_CASE("scalar undiscounted riccati gain hits the golden-ratio constant") {
  auto env = make_env("lingauss1");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const auto expert = lqr_expert(*lg, 0.0);
  // P solves P^2 = 1 + P, so P = (1+sqrt(5))/2 and K = P/(1+P) = (sqrt(5)-1)/2
  const double golden_k = (std::sqrt(5.0) - 1.0) / 2.0;
  CHECK(expert.gain()(0, 0) == doctest::Approx(golden_k).epsilon(1e-9));
}

TEST_CASE("zero state cost yields a zero controller") {
  LinGaussEnv::Params p = LinGaussEnv::default_2d();
  p.Qc = MatrixXd::Zero(2, 2);
  LinGaussEnv env(p);
  const auto expert = lqr_expert(env, 0.0);
  CHECK(expert.gain().cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("expert return beats random on every seed") {
  auto env = make_env("lingauss2");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const auto expert = lqr_expert(*lg);
  RandomPolicy random(env->action_dim(), env->action_bound());
  const double re = mean_return(*env, expert, 100, Rng(7), false);
  const double rr = mean_return(*env, random, 100, Rng(7), false);
  CHECK(re > rr);
}

TEST_CASE("expert closed loop is stable") {
  auto env = make_env("lingauss2");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const auto expert = lqr_expert(*lg);
  const MatrixXd M = lg->params().A - lg->params().B * expert.gain();
  const auto eig = M.eigenvalues();
  for (Eigen::Index i = 0; i < eig.size(); ++i) CHECK(std::abs(eig[i]) < 1.0);
}

TEST_CASE("rollout with zero steps is empty") {
  auto env = make_env("lingauss2");
  RandomPolicy pol(2, 1.0);
  Rng rng(8);
  CHECK(rollout(*env, pol, 0, rng).empty());
}

TEST_CASE("rollouts are deterministic given the seed") {
  auto env = make_env("pointmass2d");
  RandomPolicy pol(2, 1.0);
  Rng r1(9), r2(9);
  const auto t1 = rollout(*env, pol, 50, r1);
  const auto t2 = rollout(*env, pol, 50, r2);
  REQUIRE(t1.size() == t2.size());
  CHECK(trajectory_digest(t1) == trajectory_digest(t2));
}

TEST_CASE("parallel rollouts give the same multiset regardless of scheduling") {
  auto env = make_env("lingauss2");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const auto expert = lqr_expert(*lg);
  const Rng base(10);
  auto a = rollout_many(*env, expert, 16, 40, base, 3);
  auto b = rollout_many(*env, expert, 16, 40, base, 7);
  std::vector<std::vector<double>> da, db;
  for (const auto& t : a) da.push_back(trajectory_digest(t));
  for (const auto& t : b) db.push_back(trajectory_digest(t));
  std::sort(da.begin(), da.end());
  std::sort(db.begin(), db.end());
  CHECK(da == db);
}

TEST_CASE("single-episode dataset has monotone step indices") {
  auto env = make_env("lingauss2");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const auto expert = lqr_expert(*lg);
  Rng rng(11);
  const auto ds = gen_expert_dataset(*env, expert, 1, rng, true);
  REQUIRE(ds.episodes.size() == 1);
  for (std::size_t i = 0; i < ds.episodes[0].size(); ++i)
    CHECK(ds.episodes[0][i].step_index == static_cast<int>(i));
}

TEST_CASE("state-only export carries no actions") {
  auto env = make_env("lingauss2");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const auto expert = lqr_expert(*lg);
  Rng rng(12);
  const auto ds = gen_expert_dataset(*env, expert, 3, rng, false);
  CHECK(!ds.includes_actions);
  CHECK(ds.action_dim == 0);
  for (const auto& ep : ds.episodes)
    for (const auto& tr : ep) CHECK(tr.action.size() == 0);
}

TEST_CASE("expert dataset state mean matches the stationary closed loop") {
  auto env = make_env("lingauss2");
  const auto* lg = dynamic_cast<const LinGaussEnv*>(env.get());
  const double expert_noise = 0.05;
  const auto expert = lqr_expert(*lg, expert_noise);
  Rng rng(13);
  const auto ds = gen_expert_dataset(*env, expert, 10, rng, false);

  // stationary covariance of s' = (A - BK) s + w + B eta via Lyapunov iteration
  const MatrixXd M = lg->params().A - lg->params().B * expert.gain();
  const MatrixXd noise_cov =
      lg->params().noise_std.cwiseProduct(lg->params().noise_std).asDiagonal();
  const MatrixXd drive =
      noise_cov + expert_noise * expert_noise *
                      (lg->params().B * lg->params().B.transpose());
  MatrixXd cov = drive;
  for (int i = 0; i < 2000; ++i) cov = M * cov * M.transpose() + drive;

  VectorXd mean = VectorXd::Zero(2);
  int n = 0;
  for (const auto& ep : ds.episodes) {
    for (const auto& tr : ep) {
      if (tr.step_index < 50) continue;  // burn-in toward stationarity
      mean += tr.state;
      ++n;
    }
  }
  mean /= n;
  // stationary mean is zero; allow 3 sigma with a generous autocorrelation margin
  const double n_eff = n / 20.0;
  for (int d = 0; d < 2; ++d) {
    CHECK(std::abs(mean[d]) < 3.0 * std::sqrt(cov(d, d) / n_eff));
  }
}

TEST_CASE("dataset files round-trip bit exactly") {
  auto env = make_env("pointmass2d");
  RandomPolicy pol(2, 1.0);
  Rng rng(14);
  for (int trial = 0; trial < 3; ++trial) {
    const bool with_actions = trial % 2 == 0;
    Rng gen = rng.derive(static_cast<std::uint64_t>(trial));
    const auto ds = gen_expert_dataset(*env, pol, 2 + trial, gen, with_actions);
    const std::string path = temp_path("soiltdm_ds_test.bin");
    write_dataset(ds, path);
    const auto back = read_dataset(path);
    CHECK(back.env_name == ds.env_name);
    CHECK(back.includes_actions == ds.includes_actions);
    REQUIRE(back.episodes.size() == ds.episodes.size());
    for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
      REQUIRE(back.episodes[e].size() == ds.episodes[e].size());
      for (std::size_t t = 0; t < ds.episodes[e].size(); ++t) {
        const auto& x = ds.episodes[e][t];
        const auto& y = back.episodes[e][t];
        CHECK(x.state == y.state);
        CHECK(x.action == y.action);
        CHECK(x.next_state == y.next_state);
        CHECK(x.env_reward == y.env_reward);
        CHECK(x.step_index == y.step_index);
      }
    }
    std::remove(path.c_str());
  }
}

TEST_CASE("actions outside the box are clipped and flagged") {
  auto env = make_env("pointmass2d");
  Rng rng(15);
  VectorXd big(2);
  big << 5.0, -7.0;
  const auto tr = env_step(*env, VectorXd::Zero(4), big, rng, 0);
  CHECK(tr.clipped);
  CHECK(tr.action[0] == doctest::Approx(1.0));
  CHECK(tr.action[1] == doctest::Approx(-1.0));
  CHECK_THROWS_AS(
      env_step(*env, VectorXd::Zero(4),
               VectorXd::Constant(2, std::numeric_limits<double>::quiet_NaN()),
               rng, 0),
      NumericError);
}

TEST_CASE("unknown environment name is rejected") {
  CHECK_THROWS_AS(make_env("mujoco"), ConfigError);
}

TEST_CASE("a trained dynamics flow approaches the analytic transition density") {
  auto env = make_env("lingauss2");
  RandomPolicy pol(2, env->action_bound());
  const Rng base(16);
  const auto episodes = rollout_many(*env, pol, 25, 200, base, 4);

  // delta target: x = s' - s, cond = (a, s); the reparameterization is
  // volume-preserving so the density is unchanged
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.size();
  FlowDataset data;
  data.x.resize(2, static_cast<Eigen::Index>(n));
  data.cond.resize(4, static_cast<Eigen::Index>(n));
  Eigen::Index col = 0;
  for (const auto& ep : episodes)
    for (const auto& tr : ep) {
      data.x.col(col) = tr.next_state - tr.state;
      data.cond.col(col).head(2) = tr.action;
      data.cond.col(col).tail(2) = tr.state;
      ++col;
    }

  FlowConfig cfg;
  cfg.data_dim = 2;
  cfg.cond_dim = 4;
  cfg.blocks = 4;
  cfg.subnet_hidden = 48;
  cfg.cond_hidden = 48;
  cfg.cond_features = 24;
  cfg.clamp = 1.0;
  Rng rng(17);
  ConditionalFlow flow(cfg, rng);
  train_mle(flow, data, NoiseSchedule::none(), 1500, 128, 3e-3, rng);
  train_mle(flow, data, NoiseSchedule::none(), 500, 128, 5e-4, rng);

  // held-out comparison on fresh transitions
  const auto heldout = rollout_many(*env, pol, 3, 200, base.derive(99), 3);
  double total = 0.0;
  int count = 0;
  for (const auto& ep : heldout) {
    for (const auto& tr : ep) {
      Eigen::VectorXd c(4);
      c.head(2) = tr.action;
      c.tail(2) = tr.state;
      const double model = flow.log_prob(tr.next_state - tr.state, c)[0];
      const double exact = transition_logpdf(*env, tr.state, tr.action, tr.next_state);
      total += std::abs(model - exact);
      ++count;
    }
  }
  CHECK(total / count < 0.5);
}

#include "soiltdm/envs.hpp"

#include <algorithm>
#include <cmath>
#include <future>

#include <Eigen/Dense>

#include "soiltdm/errors.hpp"
#include "soiltdm/io.hpp"

namespace soiltdm {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr std::uint32_t kDatasetMagic = 0x53445453;  // "STDS"
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

Transition env_step(const Env& env, const Eigen::VectorXd& state,
                    const Eigen::VectorXd& action, Rng& rng, int step_index) {
  require_shape(state.size() == env.state_dim(), "env_step state dimension");
  require_shape(action.size() == env.action_dim(), "env_step action dimension");
  if (!state.allFinite()) throw NumericError("env_step state is non-finite");
  if (!action.allFinite()) throw NumericError("env_step action is non-finite");

  const double bound = env.action_bound();
  Transition tr;
  tr.state = state;
  tr.action = action.cwiseMax(-bound).cwiseMin(bound);
  tr.clipped = (tr.action - action).cwiseAbs().maxCoeff() > 0.0;
  const Eigen::VectorXd mean = env.drift(state, tr.action);
  const Eigen::VectorXd std = env.noise_stddev();
  tr.next_state = mean + std.cwiseProduct(rng.normal_vector(mean.size()));
  tr.env_reward = env.reward(state, tr.action, tr.next_state);
  tr.step_index = step_index;
  tr.done = step_index + 1 >= env.horizon();
  return tr;
}

double transition_logpdf(const Env& env, const Eigen::VectorXd& s,
                         const Eigen::VectorXd& a, const Eigen::VectorXd& next) {
  require_shape(s.size() == env.state_dim() && next.size() == env.state_dim() &&
                    a.size() == env.action_dim(),
                "transition_logpdf dimensions");
  const Eigen::VectorXd mean = env.drift(s, a);
  const Eigen::VectorXd std = env.noise_stddev();
  double lp = -0.5 * env.state_dim() * kLog2Pi;
  for (Eigen::Index i = 0; i < std.size(); ++i) {
    if (std[i] <= 0.0) throw NumericError("transition_logpdf needs positive noise");
    const double z = (next[i] - mean[i]) / std[i];
    lp += -std::log(std[i]) - 0.5 * z * z;
  }
  return lp;
}

LinGaussEnv::LinGaussEnv(Params p) : p_(std::move(p)) {
  require_shape(p_.A.rows() == p_.A.cols(), "LinGauss A must be square");
  require_shape(p_.B.rows() == p_.A.rows(), "LinGauss B row count");
  require_shape(p_.noise_std.size() == p_.A.rows(), "LinGauss noise dimension");
  require_shape(p_.Qc.rows() == p_.A.rows() && p_.Rc.rows() == p_.B.cols(),
                "LinGauss cost dimensions");
}

Eigen::VectorXd LinGaussEnv::sample_start(Rng& rng) const {
  return p_.start_std * rng.normal_vector(state_dim());
}

Eigen::VectorXd LinGaussEnv::drift(const Eigen::VectorXd& s,
                                   const Eigen::VectorXd& a) const {
  return p_.A * s + p_.B * a;
}

double LinGaussEnv::reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                           const Eigen::VectorXd&) const {
  return p_.alive_bonus - (s.dot(p_.Qc * s) + a.dot(p_.Rc * a));
}

LinGaussEnv::Params LinGaussEnv::default_2d() {
  Params p;
  p.id = "lingauss2";
  p.A.resize(2, 2);
  p.A << 0.95, 0.10, 0.0, 0.90;
  p.B = Eigen::MatrixXd::Identity(2, 2);
  p.noise_std = Eigen::VectorXd::Constant(2, 0.10);
  p.Qc = Eigen::MatrixXd::Identity(2, 2);
  p.Rc = 0.1 * Eigen::MatrixXd::Identity(2, 2);
  return p;
}

LinGaussEnv::Params LinGaussEnv::default_1d() {
  Params p;
  p.id = "lingauss1";
  p.A = Eigen::MatrixXd::Identity(1, 1);
  p.B = Eigen::MatrixXd::Identity(1, 1);
  p.noise_std = Eigen::VectorXd::Constant(1, 0.10);
  p.Qc = Eigen::MatrixXd::Identity(1, 1);
  p.Rc = Eigen::MatrixXd::Identity(1, 1);
  p.control_gamma = 1.0;
  return p;
}

PointMass2DEnv::PointMass2DEnv() = default;

Eigen::VectorXd PointMass2DEnv::sample_start(Rng& rng) const {
  Eigen::VectorXd s(4);
  s[0] = 0.8 * rng.normal();
  s[1] = 0.8 * rng.normal();
  s[2] = 0.2 * rng.normal();
  s[3] = 0.2 * rng.normal();
  return s;
}

Eigen::VectorXd PointMass2DEnv::drift(const Eigen::VectorXd& s,
                                      const Eigen::VectorXd& a) const {
  Eigen::VectorXd next(4);
  next[0] = s[0] + dt_ * s[2];
  next[1] = s[1] + dt_ * s[3];
  next[2] = s[2] + dt_ * a[0];
  next[3] = s[3] + dt_ * a[1];
  return next;
}

Eigen::VectorXd PointMass2DEnv::noise_stddev() const {
  Eigen::VectorXd std(4);
  std << 0.005, 0.005, 0.02, 0.02;
  return std;
}

double PointMass2DEnv::reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                              const Eigen::VectorXd&) const {
  const double pos = s.head(2).squaredNorm();
  const double vel = s.tail(2).squaredNorm();
  return 1.0 - (0.6 * pos + 0.12 * vel + 0.05 * a.squaredNorm());
}

void PointMass2DEnv::lqr_matrices(Eigen::MatrixXd& A, Eigen::MatrixXd& B,
                                  Eigen::MatrixXd& Qc, Eigen::MatrixXd& Rc) const {
  A = Eigen::MatrixXd::Identity(4, 4);
  A(0, 2) = dt_;
  A(1, 3) = dt_;
  B = Eigen::MatrixXd::Zero(4, 2);
  B(2, 0) = dt_;
  B(3, 1) = dt_;
  Qc = Eigen::VectorXd{{0.6, 0.6, 0.12, 0.12}}.asDiagonal();
  Rc = 0.05 * Eigen::MatrixXd::Identity(2, 2);
}

PendulumEnv::PendulumEnv() = default;

Eigen::VectorXd PendulumEnv::sample_start(Rng& rng) const {
  Eigen::VectorXd s(2);
  s[0] = 0.15 * rng.normal();
  s[1] = 0.10 * rng.normal();
  return s;
}

Eigen::VectorXd PendulumEnv::drift(const Eigen::VectorXd& s,
                                   const Eigen::VectorXd& a) const {
  // angle from upright; gravity destabilizes
  const double theta = s[0];
  const double omega = s[1];
  const double accel =
      (gravity_ / length_) * std::sin(theta) + a[0] / (mass_ * length_ * length_);
  Eigen::VectorXd next(2);
  next[0] = theta + dt_ * omega;
  next[1] = omega + dt_ * accel;
  return next;
}

Eigen::VectorXd PendulumEnv::noise_stddev() const {
  Eigen::VectorXd std(2);
  std << 1e-3, 0.01;
  return std;
}

double PendulumEnv::reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                           const Eigen::VectorXd&) const {
  return 1.0 - (s[0] * s[0] + 0.1 * s[1] * s[1] + 0.01 * a[0] * a[0]);
}

std::unique_ptr<Env> make_env(const std::string& name) {
  if (name == "lingauss2") return std::make_unique<LinGaussEnv>(LinGaussEnv::default_2d());
  if (name == "lingauss1") return std::make_unique<LinGaussEnv>(LinGaussEnv::default_1d());
  if (name == "pointmass2d") return std::make_unique<PointMass2DEnv>();
  if (name == "pendulum") return std::make_unique<PendulumEnv>();
  throw ConfigError("unknown environment: " + name);
}

Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                         const Eigen::MatrixXd& Qc, const Eigen::MatrixXd& Rc,
                         double gamma, double tol, int max_iter) {
  Eigen::MatrixXd P = Qc;
  for (int it = 0; it < max_iter; ++it) {
    const Eigen::MatrixXd BtP = B.transpose() * P;
    const Eigen::MatrixXd inner = Rc + gamma * BtP * B;
    const Eigen::MatrixXd K = gamma * inner.ldlt().solve(BtP * A);
    const Eigen::MatrixXd next =
        Qc + gamma * A.transpose() * P * (A - B * K);
    const double delta = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (delta < tol) break;
  }
  const Eigen::MatrixXd BtP = B.transpose() * P;
  const Eigen::MatrixXd inner = Rc + gamma * BtP * B;
  return gamma * inner.ldlt().solve(BtP * A);
}

Eigen::VectorXd LqrPolicy::act(const Eigen::VectorXd& s, Rng& rng) const {
  Eigen::VectorXd a = -gain_ * s;
  if (noise_std_ > 0.0) a += noise_std_ * rng.normal_vector(a.size());
  return a;
}

Eigen::VectorXd LqrPolicy::act_deterministic(const Eigen::VectorXd& s) const {
  return -gain_ * s;
}

LqrPolicy lqr_expert(const LinGaussEnv& env, double action_noise_std) {
  const auto& p = env.params();
  return LqrPolicy(lqr_gain(p.A, p.B, p.Qc, p.Rc, p.control_gamma),
                   action_noise_std);
}

Eigen::VectorXd RandomPolicy::act(const Eigen::VectorXd&, Rng& rng) const {
  Eigen::VectorXd a(dim_);
  for (int i = 0; i < dim_; ++i) a[i] = rng.uniform(-bound_, bound_);
  return a;
}

Eigen::VectorXd RandomPolicy::act_deterministic(const Eigen::VectorXd&) const {
  return Eigen::VectorXd::Zero(dim_);
}

Eigen::VectorXd FlowPolicy::act(const Eigen::VectorXd& s, Rng& rng) const {
  return flow_->sample(s, rng).col(0);
}

Eigen::VectorXd FlowPolicy::act_deterministic(const Eigen::VectorXd& s) const {
  return flow_->sample_median(s).col(0);
}

Trajectory rollout(const Env& env, const Policy& policy, int max_steps, Rng& rng,
                   bool deterministic) {
  Trajectory traj;
  const int steps = std::min(max_steps, env.horizon());
  if (steps <= 0) return traj;
  traj.reserve(static_cast<std::size_t>(steps));
  Eigen::VectorXd s = env.sample_start(rng);
  for (int t = 0; t < steps; ++t) {
    const Eigen::VectorXd a =
        deterministic ? policy.act_deterministic(s) : policy.act(s, rng);
    Transition tr = env_step(env, s, a, rng, t);
    s = tr.next_state;
    const bool done = tr.done;
    traj.push_back(std::move(tr));
    if (done) break;
  }
  return traj;
}

std::vector<Trajectory> rollout_many(const Env& env, const Policy& policy,
                                     int count, int max_steps, const Rng& base,
                                     int workers, bool deterministic) {
  std::vector<Trajectory> out(static_cast<std::size_t>(count));
  workers = std::max(1, std::min(workers, count));
  std::vector<std::future<void>> futs;
  futs.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    futs.push_back(std::async(std::launch::async, [&, w] {
      auto local_env = env.clone();
      for (int i = w; i < count; i += workers) {
        Rng rng = base.derive(1000 + static_cast<std::uint64_t>(i));
        out[static_cast<std::size_t>(i)] =
            rollout(*local_env, policy, max_steps, rng, deterministic);
      }
    }));
  }
  for (auto& f : futs) f.get();
  return out;
}

double trajectory_return(const Trajectory& t) {
  double r = 0.0;
  for (const auto& tr : t) r += tr.env_reward;
  return r;
}

double mean_return(const Env& env, const Policy& policy, int episodes, Rng rng,
                   bool deterministic) {
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Rng er = rng.derive(static_cast<std::uint64_t>(e));
    total += trajectory_return(rollout(env, policy, env.horizon(), er, deterministic));
  }
  return total / episodes;
}

ExpertDataset gen_expert_dataset(const Env& env, const Policy& expert, int k,
                                 Rng& rng, bool include_actions) {
  ExpertDataset ds;
  ds.env_name = env.name();
  ds.state_dim = env.state_dim();
  ds.action_dim = include_actions ? env.action_dim() : 0;
  ds.includes_actions = include_actions;
  ds.episodes.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Rng er = rng.derive(static_cast<std::uint64_t>(i));
    Trajectory traj = rollout(env, expert, env.horizon(), er);
    if (!include_actions) {
      for (auto& tr : traj) tr.action.resize(0);
    }
    ds.episodes.push_back(std::move(traj));
  }
  return ds;
}

void write_dataset(const ExpertDataset& ds, const std::string& path) {
  BinaryWriter w(path);
  w.u32(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.str(ds.env_name);
  w.u32(static_cast<std::uint32_t>(ds.state_dim));
  w.u32(static_cast<std::uint32_t>(ds.action_dim));
  w.u32(static_cast<std::uint32_t>(ds.episodes.size()));
  w.u8(ds.includes_actions ? 1 : 0);
  for (const auto& ep : ds.episodes) {
    w.u32(static_cast<std::uint32_t>(ep.size()));
    for (const auto& tr : ep) {
      w.f64_array(tr.state.data(), static_cast<std::size_t>(tr.state.size()));
      if (ds.includes_actions)
        w.f64_array(tr.action.data(), static_cast<std::size_t>(tr.action.size()));
      w.f64_array(tr.next_state.data(),
                  static_cast<std::size_t>(tr.next_state.size()));
      w.f64(tr.env_reward);
      w.u8(tr.done ? 1 : 0);
      w.u32(static_cast<std::uint32_t>(tr.step_index));
    }
  }
  if (!w.good()) throw ConfigError("failed writing dataset: " + path);
}

ExpertDataset read_dataset(const std::string& path) {
  BinaryReader r(path);
  if (r.u32() != kDatasetMagic) throw ConfigError("not a dataset file: " + path);
  if (r.u32() != kDatasetVersion)
    throw ConfigError("unsupported dataset version in " + path);
  ExpertDataset ds;
  ds.env_name = r.str();
  ds.state_dim = static_cast<int>(r.u32());
  ds.action_dim = static_cast<int>(r.u32());
  const std::uint32_t k = r.u32();
  ds.includes_actions = r.u8() != 0;
  ds.episodes.resize(k);
  for (auto& ep : ds.episodes) {
    ep.resize(r.u32());
    for (auto& tr : ep) {
      tr.state.resize(ds.state_dim);
      r.f64_array(tr.state.data(), static_cast<std::size_t>(ds.state_dim));
      if (ds.includes_actions) {
        tr.action.resize(ds.action_dim);
        r.f64_array(tr.action.data(), static_cast<std::size_t>(ds.action_dim));
      }
      tr.next_state.resize(ds.state_dim);
      r.f64_array(tr.next_state.data(), static_cast<std::size_t>(ds.state_dim));
      tr.env_reward = r.f64();
      tr.done = r.u8() != 0;
      tr.step_index = static_cast<int>(r.u32());
    }
  }
  return ds;
}

void write_dataset_csv(const ExpertDataset& ds, const std::string& path) {
  std::vector<std::string> cols{"episode", "step"};
  for (int i = 0; i < ds.state_dim; ++i) cols.push_back("s" + std::to_string(i));
  for (int i = 0; i < ds.action_dim; ++i) cols.push_back("a" + std::to_string(i));
  for (int i = 0; i < ds.state_dim; ++i) cols.push_back("s_next" + std::to_string(i));
  cols.push_back("env_reward");
  cols.push_back("done");
  CsvWriter csv(path, cols);
  for (std::size_t e = 0; e < ds.episodes.size(); ++e) {
    for (const auto& tr : ds.episodes[e]) {
      std::vector<std::string> cells{std::to_string(e),
                                     std::to_string(tr.step_index)};
      for (Eigen::Index i = 0; i < tr.state.size(); ++i)
        cells.push_back(fmt_double(tr.state[i]));
      for (Eigen::Index i = 0; i < tr.action.size(); ++i)
        cells.push_back(fmt_double(tr.action[i]));
      for (Eigen::Index i = 0; i < tr.next_state.size(); ++i)
        cells.push_back(fmt_double(tr.next_state[i]));
      cells.push_back(fmt_double(tr.env_reward));
      cells.push_back(tr.done ? "1" : "0");
      csv.row(cells);
    }
  }
}

FlowDataset state_pair_view(const std::vector<Trajectory>& episodes) {
  std::size_t n = 0;
  for (const auto& ep : episodes) n += ep.size();
  if (n == 0) throw ConfigError("state_pair_view: no transitions");
  const auto d = episodes.front().front().state.size();
  FlowDataset out;
  out.x.resize(d, static_cast<Eigen::Index>(n));
  out.cond.resize(d, static_cast<Eigen::Index>(n));
  Eigen::Index col = 0;
  for (const auto& ep : episodes) {
    for (const auto& tr : ep) {
      out.x.col(col) = tr.next_state;
      out.cond.col(col) = tr.state;
      ++col;
    }
  }
  return out;
}

FlowDataset state_pair_view(const ExpertDataset& ds) {
  return state_pair_view(ds.episodes);
}

}  // namespace soiltdm

#pragma once

#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "soiltdm/flows.hpp"
#include "soiltdm/rng.hpp"

namespace soiltdm {

struct Transition {
  Eigen::VectorXd state;
  Eigen::VectorXd action;
  Eigen::VectorXd next_state;
  double env_reward = 0.0;
  bool done = false;
  int step_index = 0;
  bool clipped = false;
};

using Trajectory = std::vector<Transition>;

// All in-repo environments follow s' = drift(s, a) + eps with
// eps ~ N(0, diag(noise_stddev^2)), which keeps the transition density exact.
class Env {
 public:
  virtual ~Env() = default;
  virtual std::string name() const = 0;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int horizon() const = 0;
  virtual double action_bound() const = 0;  // box [-b, b]^m
  virtual Eigen::VectorXd sample_start(Rng& rng) const = 0;
  virtual Eigen::VectorXd drift(const Eigen::VectorXd& s,
                                const Eigen::VectorXd& a) const = 0;
  virtual Eigen::VectorXd noise_stddev() const = 0;
  virtual double reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                        const Eigen::VectorXd& next) const = 0;
  virtual std::unique_ptr<Env> clone() const = 0;
};

// Samples the next state; actions outside the box are clipped and flagged.
Transition env_step(const Env& env, const Eigen::VectorXd& state,
                    const Eigen::VectorXd& action, Rng& rng, int step_index);

// Exact Gaussian log density of s' given (s, a).
double transition_logpdf(const Env& env, const Eigen::VectorXd& s,
                         const Eigen::VectorXd& a, const Eigen::VectorXd& next);

// Linear-Gaussian environment with quadratic state/action costs and a
// per-step alive bonus so returns stay positive for competent control.
class LinGaussEnv : public Env {
 public:
  struct Params {
    std::string id = "lingauss2";
    Eigen::MatrixXd A, B;
    Eigen::VectorXd noise_std;   // diagonal
    Eigen::MatrixXd Qc, Rc;      // cost matrices
    double alive_bonus = 1.0;
    double start_std = 0.5;
    int horizon = 200;
    double action_bound = 2.0;
    double control_gamma = 0.99;  // discount used by the expert controller
  };

  explicit LinGaussEnv(Params p);

  std::string name() const override { return p_.id; }
  int state_dim() const override { return static_cast<int>(p_.A.rows()); }
  int action_dim() const override { return static_cast<int>(p_.B.cols()); }
  int horizon() const override { return p_.horizon; }
  double action_bound() const override { return p_.action_bound; }
  Eigen::VectorXd sample_start(Rng& rng) const override;
  Eigen::VectorXd drift(const Eigen::VectorXd& s,
                        const Eigen::VectorXd& a) const override;
  Eigen::VectorXd noise_stddev() const override { return p_.noise_std; }
  double reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                const Eigen::VectorXd& next) const override;
  std::unique_ptr<Env> clone() const override {
    return std::make_unique<LinGaussEnv>(*this);
  }

  const Params& params() const { return p_; }

  static Params default_2d();
  static Params default_1d();

 private:
  Params p_;
};

// 2D double integrator with bounded acceleration.
class PointMass2DEnv : public Env {
 public:
  PointMass2DEnv();

  std::string name() const override { return "pointmass2d"; }
  int state_dim() const override { return 4; }
  int action_dim() const override { return 2; }
  int horizon() const override { return horizon_; }
  double action_bound() const override { return 1.0; }
  Eigen::VectorXd sample_start(Rng& rng) const override;
  Eigen::VectorXd drift(const Eigen::VectorXd& s,
                        const Eigen::VectorXd& a) const override;
  Eigen::VectorXd noise_stddev() const override;
  double reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                const Eigen::VectorXd& next) const override;
  std::unique_ptr<Env> clone() const override {
    return std::make_unique<PointMass2DEnv>(*this);
  }

  // Linear-quadratic description of the same dynamics, for the analytic
  // optimal controller.
  void lqr_matrices(Eigen::MatrixXd& A, Eigen::MatrixXd& B, Eigen::MatrixXd& Qc,
                    Eigen::MatrixXd& Rc) const;
  double control_gamma() const { return 0.99; }

 private:
  double dt_ = 0.1;
  int horizon_ = 200;
};

// Torque-controlled pendulum, angle measured from upright; stabilization task.
class PendulumEnv : public Env {
 public:
  PendulumEnv();

  std::string name() const override { return "pendulum"; }
  int state_dim() const override { return 2; }
  int action_dim() const override { return 1; }
  int horizon() const override { return horizon_; }
  double action_bound() const override { return 2.0; }
  Eigen::VectorXd sample_start(Rng& rng) const override;
  Eigen::VectorXd drift(const Eigen::VectorXd& s,
                        const Eigen::VectorXd& a) const override;
  Eigen::VectorXd noise_stddev() const override;
  double reward(const Eigen::VectorXd& s, const Eigen::VectorXd& a,
                const Eigen::VectorXd& next) const override;
  std::unique_ptr<Env> clone() const override {
    return std::make_unique<PendulumEnv>(*this);
  }

 private:
  double dt_ = 0.05;
  double gravity_ = 9.81;
  double length_ = 1.0;
  double mass_ = 1.0;
  int horizon_ = 200;
};

std::unique_ptr<Env> make_env(const std::string& name);

// Discounted discrete-time Riccati fixed point; returns the gain K of the
// optimal linear controller a = -K s.
Eigen::MatrixXd lqr_gain(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B,
                         const Eigen::MatrixXd& Qc, const Eigen::MatrixXd& Rc,
                         double gamma, double tol = 1e-12, int max_iter = 100000);

class Policy {
 public:
  virtual ~Policy() = default;
  virtual Eigen::VectorXd act(const Eigen::VectorXd& state, Rng& rng) const = 0;
  virtual Eigen::VectorXd act_deterministic(const Eigen::VectorXd& state) const = 0;
};

class LqrPolicy : public Policy {
 public:
  LqrPolicy(Eigen::MatrixXd gain, double action_noise_std)
      : gain_(std::move(gain)), noise_std_(action_noise_std) {}
  Eigen::VectorXd act(const Eigen::VectorXd& s, Rng& rng) const override;
  Eigen::VectorXd act_deterministic(const Eigen::VectorXd& s) const override;
  const Eigen::MatrixXd& gain() const { return gain_; }

 private:
  Eigen::MatrixXd gain_;
  double noise_std_;
};

// Expert policy for a LinGauss environment: a = -K s + eta.
LqrPolicy lqr_expert(const LinGaussEnv& env, double action_noise_std = 0.05);

class RandomPolicy : public Policy {
 public:
  RandomPolicy(int action_dim, double bound) : dim_(action_dim), bound_(bound) {}
  Eigen::VectorXd act(const Eigen::VectorXd&, Rng& rng) const override;
  Eigen::VectorXd act_deterministic(const Eigen::VectorXd&) const override;

 private:
  int dim_;
  double bound_;
};

// Samples actions from a conditional flow a ~ mu(a|s).
class FlowPolicy : public Policy {
 public:
  explicit FlowPolicy(std::shared_ptr<const ConditionalFlow> flow)
      : flow_(std::move(flow)) {}
  Eigen::VectorXd act(const Eigen::VectorXd& s, Rng& rng) const override;
  Eigen::VectorXd act_deterministic(const Eigen::VectorXd& s) const override;
  const ConditionalFlow& flow() const { return *flow_; }

 private:
  std::shared_ptr<const ConditionalFlow> flow_;
};

Trajectory rollout(const Env& env, const Policy& policy, int max_steps, Rng& rng,
                   bool deterministic = false);

// Independent rollouts with per-worker rng streams, merged by worker index.
std::vector<Trajectory> rollout_many(const Env& env, const Policy& policy,
                                     int count, int max_steps, const Rng& base,
                                     int workers = 4, bool deterministic = false);

double trajectory_return(const Trajectory& t);
double mean_return(const Env& env, const Policy& policy, int episodes, Rng rng,
                   bool deterministic = true);

struct ExpertDataset {
  std::string env_name;
  int state_dim = 0;
  int action_dim = 0;
  bool includes_actions = false;
  std::vector<Trajectory> episodes;
};

ExpertDataset gen_expert_dataset(const Env& env, const Policy& expert, int k,
                                 Rng& rng, bool include_actions);

void write_dataset(const ExpertDataset& ds, const std::string& path);
ExpertDataset read_dataset(const std::string& path);
void write_dataset_csv(const ExpertDataset& ds, const std::string& path);

// Flow training views. State pairs: x = s', cond = s. Actions: x = a,
// cond = (s', s) for the inverse model; x = s', cond = (a, s) forward.
FlowDataset state_pair_view(const ExpertDataset& ds);
FlowDataset state_pair_view(const std::vector<Trajectory>& episodes);

}  // namespace soiltdm

#pragma once

#include <limits>
#include <vector>

#include <Eigen/Core>

#include "soiltdm/diffcore.hpp"
#include "soiltdm/rng.hpp"

namespace soiltdm {

// Gaussian noise injected into training data, annealed over steps.
struct NoiseSchedule {
  enum class Mode { kLinearDecay, kConstant, kNone };
  Mode mode = Mode::kNone;
  double sigma_start = 0.05;
  double sigma_end = 0.005;
  long total_steps = 0;

  double sigma_at(long step) const;

  static NoiseSchedule linear_decay(double s0, double s1, long steps) {
    return {Mode::kLinearDecay, s0, s1, steps};
  }
  static NoiseSchedule constant(double sigma) {
    return {Mode::kConstant, sigma, sigma, 0};
  }
  static NoiseSchedule none() { return {Mode::kNone, 0.0, 0.0, 0}; }
};

struct FlowConfig {
  int data_dim = 0;
  int cond_dim = 0;        // 0 = unconditional
  int blocks = 6;
  int subnet_hidden = 48;
  int subnet_layers = 2;   // hidden layers per coupling subnet
  int cond_hidden = 48;
  int cond_layers = 2;     // hidden layers in the shared condition encoder
  int cond_features = 32;
  double clamp = 6.0;      // coupling exponent bound
  Activation activation = Activation::kRelu;  // subnets and encoder
};

// Columns are samples. `cond` may be 0 x N for unconditional flows.
struct FlowDataset {
  Eigen::MatrixXd x;
  Eigen::MatrixXd cond;
};

// Conditional RealNVP with affine coupling blocks, soft exponent clamping
// and activation normalization. One-dimensional data is padded with an
// auxiliary standard-normal lane so a coupling split exists: training fits
// the joint over (x, aux) and log_prob reads the joint on the aux = 0 slice
// with the aux base density divided out.
class ConditionalFlow {
 public:
  ConditionalFlow() = default;
  ConditionalFlow(const FlowConfig& cfg, Rng& rng);

  const FlowConfig& config() const { return cfg_; }
  int data_dim() const { return cfg_.data_dim; }
  int cond_dim() const { return cfg_.cond_dim; }
  int flow_dim() const { return flow_dim_; }
  bool padded() const { return flow_dim_ != cfg_.data_dim; }
  bool conditional() const { return cfg_.cond_dim > 0; }
  bool actnorm_initialized() const { return actnorm_initialized_; }

  struct ForwardResult {
    Eigen::MatrixXd z;        // flow_dim x B
    Eigen::VectorXd logdet;   // per sample
  };

  // Maps augmented inputs (flow_dim rows) to latents. Bijective with inverse().
  ForwardResult forward(const Eigen::MatrixXd& x_aug,
                        const Eigen::MatrixXd& cond) const;
  Eigen::MatrixXd inverse(const Eigen::MatrixXd& z,
                          const Eigen::MatrixXd& cond) const;

  // Pads data with the auxiliary lane: zeros (rng == nullptr) or standard
  // normals (training).
  Eigen::MatrixXd augment(const Eigen::MatrixXd& x, Rng* rng) const;

  // Exact log density of the data (data_dim rows).
  Eigen::VectorXd log_prob(const Eigen::MatrixXd& x,
                           const Eigen::MatrixXd& cond) const;
  Eigen::MatrixXd sample(const Eigen::MatrixXd& cond, Rng& rng) const;
  Eigen::MatrixXd sample_median(const Eigen::MatrixXd& cond) const;

  // Flat parameter vector across encoder, heads, actnorm and subnets.
  Eigen::Index parameter_count() const;
  Eigen::VectorXd parameters() const;
  void set_parameters(const Eigen::VectorXd& flat);

  // Data-dependent actnorm init (zero mean, unit variance per lane, block
  // by block) plus frozen condition standardization stats. Called
  // automatically on the first training batch.
  void init_actnorm(const Eigen::MatrixXd& x_aug, const Eigen::MatrixXd& cond);
  void mark_actnorm_initialized() { actnorm_initialized_ = true; }

  // Frozen condition standardization (not trained, but part of the model).
  const Eigen::VectorXd& cond_shift() const { return cond_shift_; }
  const Eigen::VectorXd& cond_scale_inv() const { return cond_scale_inv_; }
  void set_cond_stats(const Eigen::VectorXd& shift,
                      const Eigen::VectorXd& scale_inv);

  // Mean joint NLL over augmented samples; gradient in flat layout.
  double mean_joint_nll(const Eigen::MatrixXd& x_aug,
                        const Eigen::MatrixXd& cond) const;
  double mean_joint_nll_gradient(const Eigen::MatrixXd& x_aug,
                                 const Eigen::MatrixXd& cond,
                                 Eigen::VectorXd& grad,
                                 double* max_abs_exponent = nullptr);

 private:
  struct Block {
    std::vector<int> lane1, lane2;
    Eigen::VectorXd an_log_scale, an_shift;
    Mlp head;     // per-block linear head on shared condition features
    Mlp subnet1;  // (|lane2| + F) -> 2*|lane1|
    Mlp subnet2;  // (|lane1| + F) -> 2*|lane2|
  };

  struct BlockCache;
  struct FlowCache;

  ForwardResult forward_impl(const Eigen::MatrixXd& x_aug,
                             const Eigen::MatrixXd& cond,
                             FlowCache* cache) const;
  void check_cond(const Eigen::MatrixXd& cond, Eigen::Index batch) const;

  FlowConfig cfg_;
  int flow_dim_ = 0;
  Mlp encoder_;
  std::vector<Block> blocks_;
  bool actnorm_initialized_ = false;
  Eigen::VectorXd cond_shift_, cond_scale_inv_;
};

struct FlowStepStats {
  double nll = 0.0;
  double max_abs_exponent = 0.0;
};

// Owns the optimizer state so training can resume across calls.
class FlowTrainer {
 public:
  FlowTrainer(ConditionalFlow& flow, double learning_rate);

  // One Adam step of joint MLE on an (un-augmented) data batch.
  FlowStepStats step(const Eigen::MatrixXd& x, const Eigen::MatrixXd& cond,
                     Rng& rng);

  long steps_taken() const { return opt_.step_count; }
  AdamState& optimizer() { return opt_; }

 private:
  ConditionalFlow* flow_;
  AdamState opt_;
  Eigen::VectorXd grad_;
};

struct FlowTrainHistory {
  std::vector<double> nll;  // per-step training NLL (noised, joint)
  double max_abs_exponent = 0.0;
  double heldout_loglik = std::numeric_limits<double>::quiet_NaN();
};

// Maximum-likelihood training with noise injected into data and condition
// per the schedule. Reports held-out log-likelihood when a test set is given.
FlowTrainHistory train_mle(ConditionalFlow& flow, const FlowDataset& data,
                           const NoiseSchedule& schedule, long steps, int batch,
                           double learning_rate, Rng& rng,
                           const FlowDataset* heldout = nullptr);

// Mean exact log density over a dataset, no noise.
double heldout_loglik(const ConditionalFlow& flow, const FlowDataset& data);

}  // namespace soiltdm

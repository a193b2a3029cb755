#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "soiltdm/errors.hpp"
#include "soiltdm/rng.hpp"

namespace soiltdm {

enum class Activation { kRelu, kLeakyRelu, kTanh };

std::string activation_name(Activation a);
Activation activation_from_name(const std::string& name);

constexpr double kLeakyReluSlope = 0.01;

// Per-call forward cache; needed by backward().
struct MlpCache {
  Eigen::MatrixXd input;                // in x B
  std::vector<Eigen::MatrixXd> pre;     // pre-activation per layer
  std::vector<Eigen::MatrixXd> post;    // post-activation per hidden layer
};

// Dense feed-forward network. Parameters live in one flat vector
// (column-major weight, then bias, per layer); the activation is applied
// after every layer except the last. Batches are matrices with one sample
// per column.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<int> widths, Activation act);

  int input_dim() const { return widths_.front(); }
  int output_dim() const { return widths_.back(); }
  int num_layers() const { return static_cast<int>(widths_.size()) - 1; }
  const std::vector<int>& widths() const { return widths_; }
  Activation activation() const { return act_; }

  Eigen::Index parameter_count() const { return params_.size(); }
  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }
  Eigen::VectorXd& grad() { return grad_; }
  const Eigen::VectorXd& grad() const { return grad_; }
  void zero_grad() { grad_.setZero(); }

  // Uniform fan-in init on all layers.
  void init_fan_in(Rng& rng);
  // Zeroes the last layer's weight and bias (identity start for couplings).
  void zero_final_layer();

  Eigen::Map<Eigen::MatrixXd> weight(int layer);
  Eigen::Map<const Eigen::MatrixXd> weight(int layer) const;
  Eigen::Map<Eigen::VectorXd> bias(int layer);
  Eigen::Map<const Eigen::VectorXd> bias(int layer) const;

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const;
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, MlpCache& cache) const;

  // Vector-Jacobian product: accumulates dL/dparams into grad() and
  // returns dL/dx. `dy` must match the cached forward call.
  Eigen::MatrixXd backward(const MlpCache& cache, const Eigen::MatrixXd& dy);

 private:
  Eigen::Index layer_offset(int layer) const;

  std::vector<int> widths_;
  Activation act_ = Activation::kRelu;
  Eigen::VectorXd params_;
  Eigen::VectorXd grad_;
};

// Loss of a network output: value plus gradient w.r.t. the output.
struct ScalarLoss {
  double value = 0.0;
  Eigen::MatrixXd grad_output;
};

using OutputLossFn = std::function<ScalarLoss(const Eigen::MatrixXd& output)>;

// Runs forward, applies the loss, backpropagates. Gradient lands in
// net.grad() (overwritten). Returns the loss value.
double scalar_loss_gradient(Mlp& net, const Eigen::MatrixXd& input,
                            const OutputLossFn& loss);

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step_count = 0;
  Eigen::VectorXd first_moment;
  Eigen::VectorXd second_moment;

  AdamState() = default;
  AdamState(Eigen::Index n, double lr);
};

// Standard bias-corrected Adam update, in place.
void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params,
               const Eigen::Ref<const Eigen::VectorXd>& grads);

// Central finite differences of a scalar function of a flat vector.
Eigen::VectorXd finite_difference_gradient(
    const std::function<double(const Eigen::VectorXd&)>& fn,
    const Eigen::VectorXd& at, double h = 1e-5);

// Max-norm relative error between two gradients.
double gradient_rel_error(const Eigen::VectorXd& analytic,
                          const Eigen::VectorXd& numeric);

}  // namespace soiltdm

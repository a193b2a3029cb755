#include "soiltdm/diffcore.hpp"

#include <cmath>

namespace soiltdm {

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "leaky_relu";
    case Activation::kTanh: return "tanh";
  }
  return "relu";
}

Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "leaky_relu") return Activation::kLeakyRelu;
  if (name == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation: " + name);
}

namespace {

void apply_activation(Activation act, Eigen::MatrixXd& z) {
  switch (act) {
    case Activation::kRelu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::kLeakyRelu:
      z = z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakyReluSlope * v; });
      break;
    case Activation::kTanh:
      z = z.array().tanh().matrix();
      break;
  }
}

// derivative as a function of (pre, post) activation values
Eigen::MatrixXd activation_deriv(Activation act, const Eigen::MatrixXd& pre,
                                 const Eigen::MatrixXd& post) {
  switch (act) {
    case Activation::kRelu:
      return pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; });
    case Activation::kLeakyRelu:
      return pre.unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakyReluSlope; });
    case Activation::kTanh:
      return (1.0 - post.array().square()).matrix();
  }
  return Eigen::MatrixXd::Ones(pre.rows(), pre.cols());
}

}  // namespace

Mlp::Mlp(std::vector<int> widths, Activation act)
    : widths_(std::move(widths)), act_(act) {
  if (widths_.size() < 2) throw ConfigError("Mlp needs at least two widths");
  Eigen::Index n = 0;
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    if (widths_[l] <= 0 || widths_[l + 1] <= 0)
      throw ConfigError("Mlp widths must be positive");
    n += static_cast<Eigen::Index>(widths_[l]) * widths_[l + 1] + widths_[l + 1];
  }
  params_ = Eigen::VectorXd::Zero(n);
  grad_ = Eigen::VectorXd::Zero(n);
}

Eigen::Index Mlp::layer_offset(int layer) const {
  Eigen::Index off = 0;
  for (int l = 0; l < layer; ++l) {
    off += static_cast<Eigen::Index>(widths_[l]) * widths_[l + 1] + widths_[l + 1];
  }
  return off;
}

Eigen::Map<Eigen::MatrixXd> Mlp::weight(int layer) {
  return {params_.data() + layer_offset(layer), widths_[layer + 1], widths_[layer]};
}
Eigen::Map<const Eigen::MatrixXd> Mlp::weight(int layer) const {
  return {params_.data() + layer_offset(layer), widths_[layer + 1], widths_[layer]};
}
Eigen::Map<Eigen::VectorXd> Mlp::bias(int layer) {
  const Eigen::Index off =
      layer_offset(layer) + static_cast<Eigen::Index>(widths_[layer + 1]) * widths_[layer];
  return {params_.data() + off, widths_[layer + 1]};
}
Eigen::Map<const Eigen::VectorXd> Mlp::bias(int layer) const {
  const Eigen::Index off =
      layer_offset(layer) + static_cast<Eigen::Index>(widths_[layer + 1]) * widths_[layer];
  return {params_.data() + off, widths_[layer + 1]};
}

void Mlp::init_fan_in(Rng& rng) {
  for (int l = 0; l < num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(widths_[l]));
    auto w = weight(l);
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
    auto b = bias(l);
    for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
  }
}

void Mlp::zero_final_layer() {
  const int last = num_layers() - 1;
  weight(last).setZero();
  bias(last).setZero();
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
  require_shape(x.rows() == input_dim(),
                "Mlp::forward input has " + std::to_string(x.rows()) +
                    " rows, expected " + std::to_string(input_dim()));
  Eigen::MatrixXd h = x;
  for (int l = 0; l < num_layers(); ++l) {
    Eigen::MatrixXd z = (weight(l) * h).colwise() + bias(l);
    if (l + 1 < num_layers()) apply_activation(act_, z);
    h = std::move(z);
  }
  return h;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, MlpCache& cache) const {
  require_shape(x.rows() == input_dim(),
                "Mlp::forward input has " + std::to_string(x.rows()) +
                    " rows, expected " + std::to_string(input_dim()));
  cache.input = x;
  cache.pre.assign(static_cast<std::size_t>(num_layers()), {});
  cache.post.assign(static_cast<std::size_t>(num_layers()), {});
  const Eigen::MatrixXd* h = &cache.input;
  for (int l = 0; l < num_layers(); ++l) {
    cache.pre[l] = (weight(l) * (*h)).colwise() + bias(l);
    if (l + 1 < num_layers()) {
      cache.post[l] = cache.pre[l];
      apply_activation(act_, cache.post[l]);
      h = &cache.post[l];
    } else {
      cache.post[l] = cache.pre[l];
    }
  }
  return cache.post.back();
}

Eigen::MatrixXd Mlp::backward(const MlpCache& cache, const Eigen::MatrixXd& dy) {
  require_shape(dy.rows() == output_dim() && dy.cols() == cache.input.cols(),
                "Mlp::backward cotangent shape mismatch");
  Eigen::MatrixXd dz = dy;
  for (int l = num_layers() - 1; l >= 0; --l) {
    if (l + 1 < num_layers()) {
      dz = dz.cwiseProduct(activation_deriv(act_, cache.pre[l], cache.post[l]));
    }
    const Eigen::MatrixXd& in = (l == 0) ? cache.input : cache.post[l - 1];
    const Eigen::Index off = layer_offset(l);
    Eigen::Map<Eigen::MatrixXd> dw(grad_.data() + off, widths_[l + 1], widths_[l]);
    dw.noalias() += dz * in.transpose();
    Eigen::Map<Eigen::VectorXd> db(
        grad_.data() + off + static_cast<Eigen::Index>(widths_[l + 1]) * widths_[l],
        widths_[l + 1]);
    db.noalias() += dz.rowwise().sum();
    if (l > 0) dz = (weight(l).transpose() * dz).eval();
  }
  return weight(0).transpose() * dz;
}

double scalar_loss_gradient(Mlp& net, const Eigen::MatrixXd& input,
                            const OutputLossFn& loss) {
  MlpCache cache;
  const Eigen::MatrixXd out = net.forward(input, cache);
  ScalarLoss l = loss(out);
  require_finite(l.value, "loss");
  net.zero_grad();
  net.backward(cache, l.grad_output);
  return l.value;
}

AdamState::AdamState(Eigen::Index n, double lr)
    : learning_rate(lr),
      first_moment(Eigen::VectorXd::Zero(n)),
      second_moment(Eigen::VectorXd::Zero(n)) {}

void adam_step(AdamState& state, Eigen::Ref<Eigen::VectorXd> params,
               const Eigen::Ref<const Eigen::VectorXd>& grads) {
  require_shape(params.size() == grads.size() &&
                    params.size() == state.first_moment.size(),
                "adam_step vector lengths disagree");
  if (!grads.allFinite()) throw NumericError("adam_step received non-finite gradient");
  state.step_count += 1;
  state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
  state.second_moment =
      state.beta2 * state.second_moment +
      (1.0 - state.beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  const Eigen::VectorXd mhat = state.first_moment / bc1;
  const Eigen::VectorXd vhat = state.second_moment / bc2;
  const Eigen::VectorXd denom =
      vhat.cwiseSqrt() + Eigen::VectorXd::Constant(params.size(), state.epsilon);
  params -= state.learning_rate * mhat.cwiseQuotient(denom);
}

Eigen::VectorXd finite_difference_gradient(
    const std::function<double(const Eigen::VectorXd&)>& fn,
    const Eigen::VectorXd& at, double h) {
  Eigen::VectorXd g(at.size());
  Eigen::VectorXd p = at;
  for (Eigen::Index i = 0; i < at.size(); ++i) {
    const double v = p[i];
    p[i] = v + h;
    const double fp = fn(p);
    p[i] = v - h;
    const double fm = fn(p);
    p[i] = v;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double gradient_rel_error(const Eigen::VectorXd& analytic,
                          const Eigen::VectorXd& numeric) {
  const double scale =
      std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

}  // namespace soiltdm

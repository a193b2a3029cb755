#include "soiltdm/flows.hpp"

#include <algorithm>
#include <cmath>

#include "soiltdm/errors.hpp"

namespace soiltdm {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kTwoOverPi = 0.63661977236758134308;

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(i) = m.row(idx[i]);
  return out;
}

void set_rows(Eigen::MatrixXd& dst, const std::vector<int>& idx,
              const Eigen::MatrixXd& src) {
  for (std::size_t i = 0; i < idx.size(); ++i) dst.row(idx[i]) = src.row(i);
}

Eigen::MatrixXd vconcat(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  Eigen::MatrixXd out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

}  // namespace

double NoiseSchedule::sigma_at(long step) const {
  switch (mode) {
    case Mode::kNone:
      return 0.0;
    case Mode::kConstant:
      return sigma_end;
    case Mode::kLinearDecay: {
      if (total_steps <= 0) return sigma_end;
      const double frac =
          std::min(1.0, std::max(0.0, static_cast<double>(step) /
                                          static_cast<double>(total_steps)));
      return sigma_start + (sigma_end - sigma_start) * frac;
    }
  }
  return 0.0;
}

struct ConditionalFlow::BlockCache {
  Eigen::MatrixXd x_in;
  Eigen::VectorXd exp_an;
  Eigen::MatrixXd u0, v0, u1, v1;
  Eigen::MatrixXd s2raw, t2, e2, exp_e2;
  Eigen::MatrixXd s1raw, t1, e1, exp_e1;
  Eigen::MatrixXd f;
  MlpCache head_cache, sub1_cache, sub2_cache;
};

struct ConditionalFlow::FlowCache {
  MlpCache enc_cache;
  Eigen::MatrixXd f_shared;
  std::vector<BlockCache> blocks;
};

ConditionalFlow::ConditionalFlow(const FlowConfig& cfg, Rng& rng) : cfg_(cfg) {
  if (cfg.data_dim < 1) throw ConfigError("flow data_dim must be >= 1");
  if (cfg.blocks < 1) throw ConfigError("flow needs at least one block");
  flow_dim_ = std::max(cfg.data_dim, 2);

  if (conditional()) {
    std::vector<int> enc_widths{cfg.cond_dim};
    for (int l = 0; l < cfg.cond_layers; ++l) enc_widths.push_back(cfg.cond_hidden);
    enc_widths.push_back(cfg.cond_features);
    encoder_ = Mlp(enc_widths, cfg.activation);
    encoder_.init_fan_in(rng);
    cond_shift_ = Eigen::VectorXd::Zero(cfg.cond_dim);
    cond_scale_inv_ = Eigen::VectorXd::Ones(cfg.cond_dim);
  }

  const int feat = conditional() ? cfg.cond_features : 0;
  blocks_.resize(static_cast<std::size_t>(cfg.blocks));
  for (int k = 0; k < cfg.blocks; ++k) {
    Block& b = blocks_[k];
    for (int d = 0; d < flow_dim_; ++d) {
      const bool even_lane = (d % 2 == 0);
      if (even_lane == (k % 2 == 0)) {
        b.lane1.push_back(d);
      } else {
        b.lane2.push_back(d);
      }
    }
    const int d1 = static_cast<int>(b.lane1.size());
    const int d2 = static_cast<int>(b.lane2.size());
    b.an_log_scale = Eigen::VectorXd::Zero(flow_dim_);
    b.an_shift = Eigen::VectorXd::Zero(flow_dim_);
    if (conditional()) {
      b.head = Mlp({cfg.cond_features, cfg.cond_features}, cfg.activation);
      b.head.init_fan_in(rng);
    }
    auto subnet_widths = [&](int in, int out) {
      std::vector<int> w{in + feat};
      for (int l = 0; l < cfg.subnet_layers; ++l) w.push_back(cfg.subnet_hidden);
      w.push_back(out);
      return w;
    };
    b.subnet1 = Mlp(subnet_widths(d2, 2 * d1), cfg.activation);
    b.subnet1.init_fan_in(rng);
    b.subnet1.zero_final_layer();
    b.subnet2 = Mlp(subnet_widths(d1, 2 * d2), cfg.activation);
    b.subnet2.init_fan_in(rng);
    b.subnet2.zero_final_layer();
  }
}

void ConditionalFlow::check_cond(const Eigen::MatrixXd& cond,
                                 Eigen::Index batch) const {
  if (!conditional()) return;
  require_shape(cond.rows() == cfg_.cond_dim,
                "flow condition has wrong dimension");
  require_shape(cond.cols() == batch, "flow condition batch size mismatch");
}

void ConditionalFlow::set_cond_stats(const Eigen::VectorXd& shift,
                                     const Eigen::VectorXd& scale_inv) {
  require_shape(shift.size() == cfg_.cond_dim && scale_inv.size() == cfg_.cond_dim,
                "cond stats dimension mismatch");
  cond_shift_ = shift;
  cond_scale_inv_ = scale_inv;
}

namespace {
Eigen::MatrixXd standardize(const Eigen::MatrixXd& cond,
                            const Eigen::VectorXd& shift,
                            const Eigen::VectorXd& scale_inv) {
  Eigen::MatrixXd out = cond;
  out.colwise() -= shift;
  return (out.array().colwise() * scale_inv.array()).matrix();
}
}  // namespace

Eigen::MatrixXd ConditionalFlow::augment(const Eigen::MatrixXd& x,
                                         Rng* rng) const {
  require_shape(x.rows() == cfg_.data_dim, "flow input has wrong dimension");
  if (!padded()) return x;
  Eigen::MatrixXd out(flow_dim_, x.cols());
  out.topRows(cfg_.data_dim) = x;
  if (rng != nullptr) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) out(flow_dim_ - 1, c) = rng->normal();
  } else {
    out.bottomRows(1).setZero();
  }
  return out;
}

ConditionalFlow::ForwardResult ConditionalFlow::forward_impl(
    const Eigen::MatrixXd& x_aug, const Eigen::MatrixXd& cond,
    FlowCache* cache) const {
  require_shape(x_aug.rows() == flow_dim_, "flow_forward expects augmented input");
  check_cond(cond, x_aug.cols());
  if (!x_aug.allFinite()) throw NumericError("flow_forward input is non-finite");
  if (conditional() && !cond.allFinite())
    throw NumericError("flow_forward condition is non-finite");

  const Eigen::Index B = x_aug.cols();
  Eigen::MatrixXd f_shared;
  if (conditional()) {
    const Eigen::MatrixXd cn = standardize(cond, cond_shift_, cond_scale_inv_);
    f_shared = cache ? encoder_.forward(cn, cache->enc_cache)
                     : encoder_.forward(cn);
    if (cache) cache->f_shared = f_shared;
  }
  if (cache) cache->blocks.resize(blocks_.size());

  const double clamp = cfg_.clamp;
  auto clamp_fn = [clamp](double raw) {
    return clamp * kTwoOverPi * std::atan(raw / clamp);
  };

  Eigen::MatrixXd x = x_aug;
  Eigen::VectorXd logdet = Eigen::VectorXd::Zero(B);
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const Block& b = blocks_[k];
    BlockCache* bc = cache ? &cache->blocks[k] : nullptr;

    // actnorm
    Eigen::VectorXd exp_an = b.an_log_scale.array().exp().matrix();
    Eigen::MatrixXd y = (x.array().colwise() * exp_an.array()).matrix();
    y.colwise() += b.an_shift;
    logdet.array() += b.an_log_scale.sum();
    if (bc) {
      bc->x_in = x;
      bc->exp_an = exp_an;
    }

    Eigen::MatrixXd f;
    if (conditional()) {
      f = bc ? b.head.forward(f_shared, bc->head_cache) : b.head.forward(f_shared);
      if (bc) bc->f = f;
    } else {
      f.resize(0, B);
    }

    Eigen::MatrixXd u0 = take_rows(y, b.lane1);
    Eigen::MatrixXd v0 = take_rows(y, b.lane2);
    const int d1 = static_cast<int>(b.lane1.size());
    const int d2 = static_cast<int>(b.lane2.size());

    const Eigen::MatrixXd in1 = vconcat(v0, f);
    Eigen::MatrixXd r1 =
        bc ? b.subnet1.forward(in1, bc->sub1_cache) : b.subnet1.forward(in1);
    Eigen::MatrixXd s2raw = r1.topRows(d1);
    Eigen::MatrixXd t2 = r1.bottomRows(d1);
    Eigen::MatrixXd e2 = s2raw.unaryExpr(clamp_fn);
    Eigen::MatrixXd exp_e2 = e2.array().exp().matrix();
    Eigen::MatrixXd u1 = u0.cwiseProduct(exp_e2) + t2;

    const Eigen::MatrixXd in2 = vconcat(u1, f);
    Eigen::MatrixXd r2 =
        bc ? b.subnet2.forward(in2, bc->sub2_cache) : b.subnet2.forward(in2);
    Eigen::MatrixXd s1raw = r2.topRows(d2);
    Eigen::MatrixXd t1 = r2.bottomRows(d2);
    Eigen::MatrixXd e1 = s1raw.unaryExpr(clamp_fn);
    Eigen::MatrixXd exp_e1 = e1.array().exp().matrix();
    Eigen::MatrixXd v1 = v0.cwiseProduct(exp_e1) + t1;

    logdet += e2.colwise().sum().transpose();
    logdet += e1.colwise().sum().transpose();

    if (bc) {
      bc->u0 = u0; bc->v0 = v0; bc->u1 = u1; bc->v1 = v1;
      bc->s2raw = s2raw; bc->t2 = t2; bc->e2 = e2; bc->exp_e2 = exp_e2;
      bc->s1raw = s1raw; bc->t1 = t1; bc->e1 = e1; bc->exp_e1 = exp_e1;
    }

    set_rows(x, b.lane1, u1);
    set_rows(x, b.lane2, v1);
  }

  if (!x.allFinite() || !logdet.allFinite())
    throw NumericError("flow_forward produced non-finite output");
  return {std::move(x), std::move(logdet)};
}

ConditionalFlow::ForwardResult ConditionalFlow::forward(
    const Eigen::MatrixXd& x_aug, const Eigen::MatrixXd& cond) const {
  return forward_impl(x_aug, cond, nullptr);
}

Eigen::MatrixXd ConditionalFlow::inverse(const Eigen::MatrixXd& z,
                                         const Eigen::MatrixXd& cond) const {
  require_shape(z.rows() == flow_dim_, "flow_inverse expects latent of flow_dim");
  check_cond(cond, z.cols());
  if (!z.allFinite()) throw NumericError("flow_inverse input is non-finite");

  const Eigen::Index B = z.cols();
  Eigen::MatrixXd f_shared;
  if (conditional())
    f_shared = encoder_.forward(standardize(cond, cond_shift_, cond_scale_inv_));

  const double clamp = cfg_.clamp;
  auto clamp_fn = [clamp](double raw) {
    return clamp * kTwoOverPi * std::atan(raw / clamp);
  };

  Eigen::MatrixXd x = z;
  for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
    const Block& b = *it;
    Eigen::MatrixXd f;
    if (conditional()) {
      f = b.head.forward(f_shared);
    } else {
      f.resize(0, B);
    }
    Eigen::MatrixXd u1 = take_rows(x, b.lane1);
    Eigen::MatrixXd v1 = take_rows(x, b.lane2);
    const int d1 = static_cast<int>(b.lane1.size());
    const int d2 = static_cast<int>(b.lane2.size());

    Eigen::MatrixXd r2 = b.subnet2.forward(vconcat(u1, f));
    Eigen::MatrixXd e1 = r2.topRows(d2).unaryExpr(clamp_fn);
    Eigen::MatrixXd v0 = (v1 - r2.bottomRows(d2)).cwiseProduct((-e1.array()).exp().matrix());

    Eigen::MatrixXd r1 = b.subnet1.forward(vconcat(v0, f));
    Eigen::MatrixXd e2 = r1.topRows(d1).unaryExpr(clamp_fn);
    Eigen::MatrixXd u0 = (u1 - r1.bottomRows(d1)).cwiseProduct((-e2.array()).exp().matrix());

    Eigen::MatrixXd y(flow_dim_, B);
    set_rows(y, b.lane1, u0);
    set_rows(y, b.lane2, v0);
    y.colwise() -= b.an_shift;
    x = (y.array().colwise() * (-b.an_log_scale.array()).exp()).matrix();
  }
  if (!x.allFinite()) throw NumericError("flow_inverse produced non-finite output");
  return x;
}

Eigen::VectorXd ConditionalFlow::log_prob(const Eigen::MatrixXd& x,
                                          const Eigen::MatrixXd& cond) const {
  const ForwardResult fr = forward(augment(x, nullptr), cond);
  const Eigen::VectorXd sq = fr.z.colwise().squaredNorm().transpose();
  Eigen::VectorXd lp =
      (-0.5 * sq.array() - 0.5 * flow_dim_ * kLog2Pi + fr.logdet.array())
          .matrix();
  if (padded()) lp.array() += 0.5 * kLog2Pi;  // divide out the aux base density
  return lp;
}

Eigen::MatrixXd ConditionalFlow::sample(const Eigen::MatrixXd& cond,
                                        Rng& rng) const {
  const Eigen::Index B = cond.cols() > 0 ? cond.cols() : 1;
  const Eigen::MatrixXd z = rng.normal_matrix(flow_dim_, B);
  return inverse(z, cond).topRows(cfg_.data_dim);
}

Eigen::MatrixXd ConditionalFlow::sample_median(const Eigen::MatrixXd& cond) const {
  const Eigen::Index B = cond.cols() > 0 ? cond.cols() : 1;
  return inverse(Eigen::MatrixXd::Zero(flow_dim_, B), cond).topRows(cfg_.data_dim);
}

Eigen::Index ConditionalFlow::parameter_count() const {
  Eigen::Index n = conditional() ? encoder_.parameter_count() : 0;
  for (const Block& b : blocks_) {
    if (conditional()) n += b.head.parameter_count();
    n += 2 * flow_dim_;
    n += b.subnet1.parameter_count() + b.subnet2.parameter_count();
  }
  return n;
}

Eigen::VectorXd ConditionalFlow::parameters() const {
  Eigen::VectorXd flat(parameter_count());
  Eigen::Index off = 0;
  auto put = [&](const Eigen::VectorXd& v) {
    flat.segment(off, v.size()) = v;
    off += v.size();
  };
  if (conditional()) put(encoder_.params());
  for (const Block& b : blocks_) {
    if (conditional()) put(b.head.params());
    put(b.an_log_scale);
    put(b.an_shift);
    put(b.subnet1.params());
    put(b.subnet2.params());
  }
  return flat;
}

void ConditionalFlow::set_parameters(const Eigen::VectorXd& flat) {
  require_shape(flat.size() == parameter_count(), "flow parameter vector length mismatch");
  Eigen::Index off = 0;
  auto get = [&](Eigen::VectorXd& v) {
    v = flat.segment(off, v.size());
    off += v.size();
  };
  if (conditional()) get(encoder_.params());
  for (Block& b : blocks_) {
    if (conditional()) get(b.head.params());
    get(b.an_log_scale);
    get(b.an_shift);
    get(b.subnet1.params());
    get(b.subnet2.params());
  }
}

void ConditionalFlow::init_actnorm(const Eigen::MatrixXd& x_aug,
                                   const Eigen::MatrixXd& cond) {
  require_shape(x_aug.rows() == flow_dim_, "init_actnorm expects augmented input");
  check_cond(cond, x_aug.cols());
  const Eigen::Index B = x_aug.cols();
  if (B < 2) throw ConfigError("actnorm init needs at least two samples");

  Eigen::MatrixXd f_shared;
  if (conditional()) {
    const Eigen::VectorXd cmean = cond.rowwise().mean();
    Eigen::VectorXd cvar = Eigen::VectorXd::Zero(cfg_.cond_dim);
    for (Eigen::Index c = 0; c < B; ++c)
      cvar += (cond.col(c) - cmean).cwiseProduct(cond.col(c) - cmean);
    cvar /= static_cast<double>(B);
    cond_shift_ = cmean;
    cond_scale_inv_ = cvar.cwiseSqrt().cwiseMax(1e-3).cwiseInverse();
    f_shared = encoder_.forward(standardize(cond, cond_shift_, cond_scale_inv_));
  }
  const double clamp = cfg_.clamp;
  auto clamp_fn = [clamp](double raw) {
    return clamp * kTwoOverPi * std::atan(raw / clamp);
  };

  Eigen::MatrixXd x = x_aug;
  for (Block& b : blocks_) {
    const Eigen::VectorXd mean = x.rowwise().mean();
    Eigen::VectorXd var = Eigen::VectorXd::Zero(flow_dim_);
    for (Eigen::Index c = 0; c < B; ++c)
      var += (x.col(c) - mean).cwiseProduct(x.col(c) - mean);
    var /= static_cast<double>(B);
    const Eigen::VectorXd stddev =
        var.cwiseSqrt().cwiseMax(1e-3);  // floor keeps the scale invertible
    b.an_log_scale = -stddev.array().log();
    b.an_shift = -mean.cwiseQuotient(stddev);

    // run this block forward to feed the next one
    Eigen::MatrixXd y =
        (x.array().colwise() * b.an_log_scale.array().exp()).matrix();
    y.colwise() += b.an_shift;
    Eigen::MatrixXd f;
    if (conditional()) {
      f = b.head.forward(f_shared);
    } else {
      f.resize(0, B);
    }
    Eigen::MatrixXd u0 = take_rows(y, b.lane1);
    Eigen::MatrixXd v0 = take_rows(y, b.lane2);
    const int d1 = static_cast<int>(b.lane1.size());
    const int d2 = static_cast<int>(b.lane2.size());
    Eigen::MatrixXd r1 = b.subnet1.forward(vconcat(v0, f));
    Eigen::MatrixXd u1 =
        u0.cwiseProduct(r1.topRows(d1).unaryExpr(clamp_fn).array().exp().matrix()) +
        r1.bottomRows(d1);
    Eigen::MatrixXd r2 = b.subnet2.forward(vconcat(u1, f));
    Eigen::MatrixXd v1 =
        v0.cwiseProduct(r2.topRows(d2).unaryExpr(clamp_fn).array().exp().matrix()) +
        r2.bottomRows(d2);
    set_rows(x, b.lane1, u1);
    set_rows(x, b.lane2, v1);
  }
  actnorm_initialized_ = true;
}

double ConditionalFlow::mean_joint_nll(const Eigen::MatrixXd& x_aug,
                                       const Eigen::MatrixXd& cond) const {
  const ForwardResult fr = forward(x_aug, cond);
  const double B = static_cast<double>(x_aug.cols());
  return (0.5 * fr.z.colwise().squaredNorm().sum() - fr.logdet.sum()) / B +
         0.5 * flow_dim_ * kLog2Pi;
}

double ConditionalFlow::mean_joint_nll_gradient(const Eigen::MatrixXd& x_aug,
                                                const Eigen::MatrixXd& cond,
                                                Eigen::VectorXd& grad,
                                                double* max_abs_exponent) {
  FlowCache cache;
  const ForwardResult fr = forward_impl(x_aug, cond, &cache);
  const Eigen::Index B = x_aug.cols();
  const double invB = 1.0 / static_cast<double>(B);
  const double nll =
      (0.5 * fr.z.colwise().squaredNorm().sum() - fr.logdet.sum()) * invB +
      0.5 * flow_dim_ * kLog2Pi;
  require_finite(nll, "flow NLL");

  if (max_abs_exponent) {
    double mx = 0.0;
    for (const auto& bc : cache.blocks) {
      if (bc.e1.size() > 0) mx = std::max(mx, bc.e1.cwiseAbs().maxCoeff());
      if (bc.e2.size() > 0) mx = std::max(mx, bc.e2.cwiseAbs().maxCoeff());
    }
    *max_abs_exponent = mx;
  }

  // cotangents: dNLL/dz = z / B, dNLL/dlogdet = -1/B per sample
  Eigen::MatrixXd dx = fr.z * invB;
  const double dlogdet = -invB;

  if (conditional()) encoder_.zero_grad();
  for (Block& b : blocks_) {
    if (conditional()) b.head.zero_grad();
    b.subnet1.zero_grad();
    b.subnet2.zero_grad();
  }
  std::vector<Eigen::VectorXd> g_an_s(blocks_.size()), g_an_b(blocks_.size());

  const double clamp = cfg_.clamp;
  Eigen::MatrixXd df_shared;
  if (conditional())
    df_shared = Eigen::MatrixXd::Zero(cfg_.cond_features, B);

  for (std::size_t k = blocks_.size(); k-- > 0;) {
    Block& b = blocks_[k];
    BlockCache& bc = cache.blocks[k];
    const int d1 = static_cast<int>(b.lane1.size());
    const int d2 = static_cast<int>(b.lane2.size());

    Eigen::MatrixXd du1 = take_rows(dx, b.lane1);
    Eigen::MatrixXd dv1 = take_rows(dx, b.lane2);

    auto clamp_deriv = [clamp](double raw) {
      const double r = raw / clamp;
      return kTwoOverPi / (1.0 + r * r);
    };

    // v1 = v0 .* exp(e1) + t1, logdet += sum(e1)
    Eigen::MatrixXd de1 = dv1.cwiseProduct(bc.v0).cwiseProduct(bc.exp_e1);
    de1.array() += dlogdet;
    Eigen::MatrixXd ds1raw = de1.cwiseProduct(bc.s1raw.unaryExpr(clamp_deriv));
    Eigen::MatrixXd dr2(2 * d2, B);
    dr2.topRows(d2) = ds1raw;
    dr2.bottomRows(d2) = dv1;
    const Eigen::MatrixXd din2 = b.subnet2.backward(bc.sub2_cache, dr2);
    Eigen::MatrixXd dv0 = dv1.cwiseProduct(bc.exp_e1);
    du1 += din2.topRows(d1);
    Eigen::MatrixXd df;
    if (conditional()) df = din2.bottomRows(cfg_.cond_features);

    // u1 = u0 .* exp(e2) + t2, logdet += sum(e2)
    Eigen::MatrixXd de2 = du1.cwiseProduct(bc.u0).cwiseProduct(bc.exp_e2);
    de2.array() += dlogdet;
    Eigen::MatrixXd ds2raw = de2.cwiseProduct(bc.s2raw.unaryExpr(clamp_deriv));
    Eigen::MatrixXd dr1(2 * d1, B);
    dr1.topRows(d1) = ds2raw;
    dr1.bottomRows(d1) = du1;
    const Eigen::MatrixXd din1 = b.subnet1.backward(bc.sub1_cache, dr1);
    dv0 += din1.topRows(d2);
    if (conditional()) df += din1.bottomRows(cfg_.cond_features);

    Eigen::MatrixXd du0 = du1.cwiseProduct(bc.exp_e2);

    if (conditional()) {
      df_shared += b.head.backward(bc.head_cache, df);
    }

    // actnorm: y = x .* exp(an_s) + an_b ; logdet += sum(an_s) per sample
    Eigen::MatrixXd dy(flow_dim_, B);
    set_rows(dy, b.lane1, du0);
    set_rows(dy, b.lane2, dv0);
    g_an_s[k] = dy.cwiseProduct(bc.x_in).rowwise().sum().cwiseProduct(bc.exp_an);
    g_an_s[k].array() += dlogdet * static_cast<double>(B);
    g_an_b[k] = dy.rowwise().sum();
    dx = (dy.array().colwise() * bc.exp_an.array()).matrix();
  }
  if (conditional()) encoder_.backward(cache.enc_cache, df_shared);

  // gather into the flat layout
  grad.resize(parameter_count());
  Eigen::Index off = 0;
  auto put = [&](const Eigen::VectorXd& v) {
    grad.segment(off, v.size()) = v;
    off += v.size();
  };
  if (conditional()) put(encoder_.grad());
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    const Block& b = blocks_[k];
    if (conditional()) put(b.head.grad());
    put(g_an_s[k]);
    put(g_an_b[k]);
    put(b.subnet1.grad());
    put(b.subnet2.grad());
  }
  return nll;
}

FlowTrainer::FlowTrainer(ConditionalFlow& flow, double learning_rate)
    : flow_(&flow), opt_(flow.parameter_count(), learning_rate) {}

FlowStepStats FlowTrainer::step(const Eigen::MatrixXd& x,
                                const Eigen::MatrixXd& cond, Rng& rng) {
  const Eigen::MatrixXd x_aug = flow_->augment(x, &rng);
  if (!flow_->actnorm_initialized()) flow_->init_actnorm(x_aug, cond);
  double max_exp = 0.0;
  const double nll = flow_->mean_joint_nll_gradient(x_aug, cond, grad_, &max_exp);
  Eigen::VectorXd params = flow_->parameters();
  adam_step(opt_, params, grad_);
  flow_->set_parameters(params);
  return {nll, max_exp};
}

FlowTrainHistory train_mle(ConditionalFlow& flow, const FlowDataset& data,
                           const NoiseSchedule& schedule, long steps, int batch,
                           double learning_rate, Rng& rng,
                           const FlowDataset* heldout) {
  const Eigen::Index n = data.x.cols();
  if (n == 0) throw ConfigError("train_mle: empty dataset");
  require_shape(data.x.rows() == flow.data_dim(), "train_mle data dimension mismatch");
  if (flow.conditional())
    require_shape(data.cond.rows() == flow.cond_dim() && data.cond.cols() == n,
                  "train_mle condition shape mismatch");

  FlowTrainer trainer(flow, learning_rate);
  FlowTrainHistory hist;
  hist.nll.reserve(static_cast<std::size_t>(steps));
  const Eigen::Index bsz = std::min<Eigen::Index>(batch, n);

  for (long t = 0; t < steps; ++t) {
    Eigen::MatrixXd xb(data.x.rows(), bsz);
    Eigen::MatrixXd cb(data.cond.rows(), bsz);
    for (Eigen::Index j = 0; j < bsz; ++j) {
      const auto idx = static_cast<Eigen::Index>(rng.uniform_index(n));
      xb.col(j) = data.x.col(idx);
      if (cb.rows() > 0) cb.col(j) = data.cond.col(idx);
    }
    const double sigma = schedule.sigma_at(t);
    if (sigma > 0.0) {
      xb += sigma * rng.normal_matrix(xb.rows(), bsz);
      if (cb.rows() > 0) cb += sigma * rng.normal_matrix(cb.rows(), bsz);
    }
    const FlowStepStats s = trainer.step(xb, cb, rng);
    hist.nll.push_back(s.nll);
    hist.max_abs_exponent = std::max(hist.max_abs_exponent, s.max_abs_exponent);
  }
  if (heldout != nullptr) hist.heldout_loglik = heldout_loglik(flow, *heldout);
  return hist;
}

double heldout_loglik(const ConditionalFlow& flow, const FlowDataset& data) {
  if (data.x.cols() == 0) throw ConfigError("heldout_loglik: empty dataset");
  return flow.log_prob(data.x, data.cond).mean();
}

}  // namespace soiltdm

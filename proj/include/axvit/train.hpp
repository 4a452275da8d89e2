#pragma once

// Approximation-aware training. The forward pass runs through the layer
// multipliers; the backward pass treats each quantized product as its
// real-arithmetic counterpart and zeroes gradients of operands that were
// clipped by their quantizer (straight-through estimator).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "axvit/nn.hpp"

namespace axvit {

// ---- backward primitives -------------------------------------------------------

inline void mask_clipped(RealTensor& grad, const RealTensor& operand, double clip) {
  if (std::isinf(clip)) return;
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (std::abs(operand[i]) > clip) grad[i] = 0.0;
}

/// Gradients of C = A·B, masked by each operand's clip range.
inline void product_backward(const RealTensor& dc, const RealTensor& a, const RealTensor& b, const ProductTrace& tr,
                             RealTensor* da, RealTensor* db) {
  if (da) {
    *da = ops::matmul_nt(dc, b);
    mask_clipped(*da, a, tr.clip_a);
  }
  if (db) {
    *db = ops::matmul_tn(a, dc);
    mask_clipped(*db, b, tr.clip_b);
  }
}

/// Accumulates weight/bias gradients into `g` and returns dL/dx.
inline RealTensor linear_backward(const RealTensor& dy, const RealTensor& x, const LinearParams& p,
                                  const ProductTrace& tr, LinearParams& g) {
  RealTensor dx, dw;
  product_backward(dy, x, p.weight, tr, &dx, &dw);
  ops::add_inplace(g.weight, dw);
  for (std::size_t i = 0; i < dy.rows(); ++i)
    for (std::size_t j = 0; j < dy.cols(); ++j) g.bias[j] += dy(i, j);
  return dx;
}

inline RealTensor layer_norm_backward(const RealTensor& dy, const LayerNormTrace& tr, const LayerNormParams& p,
                                      LayerNormParams& g) {
  const std::size_t n = dy.rows(), d = dy.cols();
  RealTensor dx = RealTensor::matrix(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      g.gamma[j] += dy(i, j) * tr.xhat(i, j);
      g.beta[j] += dy(i, j);
      dxhat[j] = dy(i, j) * p.gamma[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * tr.xhat(i, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = tr.rstd[i] * (dxhat[j] - mean_dxhat - tr.xhat(i, j) * mean_dxhat_xhat);
  }
  return dx;
}

struct HeadGrads {
  RealTensor dq, dk, dv;
};

inline HeadGrads attention_backward(const RealTensor& dout, const HeadTrace& tr, std::size_t d_k) {
  HeadGrads g;
  RealTensor dp;
  product_backward(dout, tr.probs, tr.v, tr.context, &dp, &g.dv);
  RealTensor ds = RealTensor::matrix(dp.rows(), dp.cols());
  const double inv = 1.0 / std::sqrt(static_cast<double>(d_k));
  for (std::size_t i = 0; i < dp.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < dp.cols(); ++j) dot += dp(i, j) * tr.probs(i, j);
    for (std::size_t j = 0; j < dp.cols(); ++j) ds(i, j) = tr.probs(i, j) * (dp(i, j) - dot) * inv;
  }
  // S = Q·Kᵀ: dQ = dS·K, dK = dSᵀ·Q.
  g.dq = ops::matmul(ds, tr.k);
  mask_clipped(g.dq, tr.q, tr.scores.clip_a);
  g.dk = ops::matmul_tn(ds, tr.q);
  mask_clipped(g.dk, tr.k, tr.scores.clip_b);
  return g;
}

inline RealTensor multi_head_backward(const RealTensor& dout, const MhsaTrace& tr, const MhsaParams& p,
                                      std::size_t heads, MhsaParams& g) {
  const std::size_t d = tr.q.cols(), dk = d / heads;
  RealTensor dconcat = linear_backward(dout, tr.concat, p.out_proj, tr.out_proj, g.out_proj);
  RealTensor dq = RealTensor::matrix(tr.q.rows(), d), dk_full = dq, dv = dq;
  for (std::size_t h = 0; h < heads; ++h) {
    HeadGrads hg = attention_backward(ops::slice_cols(dconcat, h * dk, dk), tr.heads[h], dk);
    ops::put_cols(dq, hg.dq, h * dk);
    ops::put_cols(dk_full, hg.dk, h * dk);
    ops::put_cols(dv, hg.dv, h * dk);
  }
  RealTensor dx = linear_backward(dq, tr.input, p.q_proj, tr.q_proj, g.q_proj);
  ops::add_inplace(dx, linear_backward(dk_full, tr.input, p.k_proj, tr.k_proj, g.k_proj));
  ops::add_inplace(dx, linear_backward(dv, tr.input, p.v_proj, tr.v_proj, g.v_proj));
  return dx;
}

inline RealTensor ffn_backward(const RealTensor& dout, const FfnTrace& tr, const FfnParams& p, FfnParams& g) {
  RealTensor dact = linear_backward(dout, tr.act, p.fc2, tr.fc2, g.fc2);
  for (std::size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(tr.pre_act[i]);
  return linear_backward(dact, tr.input, p.fc1, tr.fc1, g.fc1);
}

inline RealTensor block_backward(const RealTensor& dout, const BlockTrace& tr, const BlockParams& p, std::size_t heads,
                                 const ForwardOptions& opt, BlockParams& g) {
  RealTensor df = ffn_backward(dout, tr.ffn, p.ffn, g.ffn);
  if (opt.layer_norm) df = layer_norm_backward(df, tr.ln2, p.ln2, g.ln2);
  RealTensor dmid = dout;
  ops::add_inplace(dmid, df);
  RealTensor da = multi_head_backward(dmid, tr.attn, p.attn, heads, g.attn);
  if (opt.layer_norm) da = layer_norm_backward(da, tr.ln1, p.ln1, g.ln1);
  RealTensor dx = std::move(dmid);
  ops::add_inplace(dx, da);
  return dx;
}

/// Backpropagates dL/dlogits through a traced forward, accumulating into `g`.
inline void vit_backward(const RealTensor& dlogits, const VitTrace& tr, const VitModel& m, VitModel& g,
                         const ForwardOptions& opt = {}) {
  const auto& cfg = m.config;
  RealTensor dpooled = linear_backward(dlogits, tr.pooled, m.head, ProductTrace{}, g.head);
  RealTensor dx = RealTensor::matrix(cfg.patches, cfg.embed_dim);
  const double inv = 1.0 / static_cast<double>(cfg.patches);
  for (std::size_t i = 0; i < cfg.patches; ++i)
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) dx(i, j) = dpooled(0, j) * inv;
  for (std::size_t l = cfg.layers; l-- > 0;)
    dx = block_backward(dx, tr.blocks[l], m.blocks[l], cfg.heads, opt, g.blocks[l]);
  ops::add_inplace(g.pos_embed, dx);
  linear_backward(dx, tr.patches, m.patch_embed, ProductTrace{}, g.patch_embed);
}

/// Mean cross-entropy of softmax(logits) and its gradient w.r.t. the logits.
inline double softmax_cross_entropy(const RealTensor& logits, std::size_t label, RealTensor& dlogits) {
  dlogits = logits;
  ops::softmax_rows(dlogits);
  const double loss = -std::log(std::max(dlogits(0, label), 1e-300));
  dlogits(0, label) -= 1.0;
  return loss;
}

// ---- optimizers --------------------------------------------------------------

enum class OptimizerKind { sgd, adam };

inline std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ParseError("unknown optimizer '" + std::string(s) + "' (expected sgd|adam)");
}

/// SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8) over a flat parameter list.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  void step(const std::vector<RealTensor*>& params, const std::vector<const RealTensor*>& grads) {
    if (kind_ == OptimizerKind::adam && m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      const auto& g = *grads[i];
      if (kind_ == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
        continue;
      }
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g[j];
        v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g[j] * g[j];
        p[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  OptimizerKind kind_;
  double lr_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---- training loop -------------------------------------------------------------

struct TrainHyperparams {
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 5e-5;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  double data_fraction = 0.025;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw RangeError("learning rate must be >= 0");
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) throw RangeError("data fraction must lie in (0, 1]");
    if (batch_size == 0) throw RangeError("batch size must be positive");
    if (epochs == 0) throw RangeError("epochs must be positive");
  }
};

struct TrainResult {
  std::vector<double> loss_history;  // mean batch loss per optimizer step
};

/// Trains in place. An empty multiplier list trains in real arithmetic;
/// otherwise the forward runs quantized on the given multipliers and weight
/// scales are re-derived after every step.
inline TrainResult train(VitModel& m, const Dataset& data, const LayerMultipliers& muls, const TrainHyperparams& hp,
                         const ForwardOptions& opt = {}) {
  hp.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  const bool quantized = !muls.empty();
  if (quantized && !m.calibrated()) throw StateError("train: approximate finetuning needs a calibrated model");
  const auto used = static_cast<std::size_t>(std::ceil(hp.data_fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> subset = sample_indices(data.size(), std::max<std::size_t>(used, 1), hp.seed);

  VitModel grads = m.zeros_like();
  std::vector<RealTensor*> params;
  std::vector<const RealTensor*> gparams;
  for (auto& [n, t] : m.named_parameters()) params.push_back(t);
  for (auto& [n, t] : grads.named_parameters()) gparams.push_back(t);
  Optimizer optim(hp.optimizer, hp.learning_rate);

  TrainResult result;
  std::mt19937_64 rng(hp.seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    std::shuffle(subset.begin(), subset.end(), rng);
    for (std::size_t start = 0; start < subset.size(); start += hp.batch_size) {
      const std::size_t end = std::min(start + hp.batch_size, subset.size());
      for (auto& [n, t] : grads.named_parameters()) t->fill(0.0);
      double loss = 0.0;
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t idx = subset[s];
        VitTrace tr;
        const RealTensor logits = vit_forward(m, patchify(data, idx, m.config), muls, opt, &tr);
        RealTensor dlogits;
        loss += softmax_cross_entropy(logits, data.labels[idx], dlogits);
        vit_backward(dlogits, tr, m, grads, opt);
      }
      const double bs = static_cast<double>(end - start);
      loss /= bs;
      if (!std::isfinite(loss))
        throw DataError("training diverged: non-finite loss at step " + std::to_string(result.loss_history.size()));
      for (auto& [n, t] : grads.named_parameters()) ops::scale_inplace(*t, 1.0 / bs);
      optim.step(params, gparams);
      if (quantized) refresh_weight_scales(m);
      result.loss_history.push_back(loss);
    }
  }
  return result;
}

/// Approximation-aware finetuning on the multipliers named by `axx`.
inline TrainResult finetune(VitModel& m, const MultiplierBank& bank, const AxxConfig& axx, const Dataset& data,
                            const TrainHyperparams& hp) {
  return train(m, data, bank.resolve(axx, m.config.layers), hp);
}

// ---- toy attention experiment --------------------------------------------------

struct ToyOptions {
  std::size_t iterations = 500;
  std::size_t tokens = 16;
  std::size_t dim = 16;
  std::size_t batch = 4;  // sequences per SGD step
  double learning_rate = 0.5;
  std::size_t eval_sequences = 64;
  std::size_t histogram_bins = 40;
  std::uint64_t seed = 0;
};

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> output_counts, target_counts;
};

struct ToyResult {
  std::vector<double> mse;  // one entry per iteration
  std::vector<double> outputs, targets;
  Histogram histogram;
};

inline Histogram make_histogram(const std::vector<double>& a, const std::vector<double>& b, std::size_t bins) {
  Histogram h;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&a, &b})
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  if (!(hi > lo)) hi = lo + 1.0;
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  auto count = [&](const std::vector<double>& v) {
    std::vector<std::size_t> c(bins, 0);
    for (double x : v) {
      auto i = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
      c[std::min(i, bins - 1)]++;
    }
    return c;
  };
  h.output_counts = count(a);
  h.target_counts = count(b);
  return h;
}

namespace toy_detail {

struct AttentionWeights {
  LinearParams q, k, v;
};

inline AttentionWeights random_attention(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  auto lin = [&] {
    LinearParams p{RealTensor::matrix(d, d), RealTensor({d})};
    for (auto& w : p.weight.values()) w = g(rng);
    return p;
  };
  AttentionWeights w;
  w.q = lin();
  w.k = lin();
  w.v = lin();
  return w;
}

inline QuantParams dynamic_scale(const RealTensor& t, int bits) {
  HistogramCalibrator cal(2048, 99.9);
  cal.observe(t);
  return cal.compute_scale(bits);
}

struct ToyTrace {
  RealTensor x;
  ProductTrace q, k, v;
  HeadTrace head;
};

/// Single-head attention; quantized on `mul` with per-call dynamic scales when given.
inline RealTensor forward(const AttentionWeights& w, const RealTensor& x, const MulBackend* mul, ToyTrace* tr) {
  const std::size_t d = x.cols();
  if (!mul) {
    RealTensor q = ops::matmul(x, w.q.weight), k = ops::matmul(x, w.k.weight), v = ops::matmul(x, w.v.weight);
    return attention_apply(q, k, v, d, nullptr, nullptr);
  }
  const int bits = backend_bitwidth(*mul);
  const QuantParams qx = dynamic_scale(x, bits);
  auto lin = [&](const LinearParams& p, ProductTrace* pt) {
    LinearQuant lq{qx, max_scale(p.weight.values(), bits)};
    return linear_apply(x, p, mul, &lq, pt);
  };
  RealTensor q = lin(w.q, &tr->q), k = lin(w.k, &tr->k), v = lin(w.v, &tr->v);
  AttentionQuant aq{dynamic_scale(q, bits), dynamic_scale(k, bits), dynamic_scale(v, bits), probs_quant(bits)};
  tr->x = x;
  return attention_apply(q, k, v, d, &aq, mul, &tr->head);
}

}  // namespace toy_detail

/// Trains one approximate attention layer with SGD to match a frozen
/// real-arithmetic attention layer on N(0, 1) inputs.
inline ToyResult toy_attention_experiment(const AxMultiplier& mult, const ToyOptions& opt = {}) {
  if (opt.iterations == 0 || opt.batch == 0 || opt.tokens == 0 || opt.dim == 0)
    throw RangeError("toy experiment: sizes must be positive");
  std::mt19937_64 rng(opt.seed);
  const auto teacher = toy_detail::random_attention(opt.dim, rng);
  auto student = toy_detail::random_attention(opt.dim, rng);
  const MulBackend mul = make_backend(mult);
  std::normal_distribution<double> g(0.0, 1.0);
  auto sample = [&] {
    RealTensor x = RealTensor::matrix(opt.tokens, opt.dim);
    for (auto& v : x.values()) v = g(rng);
    return x;
  };

  ToyResult res;
  const double count = static_cast<double>(opt.batch * opt.tokens * opt.dim);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    toy_detail::AttentionWeights grad{
        {RealTensor::matrix(opt.dim, opt.dim), RealTensor({opt.dim})},
        {RealTensor::matrix(opt.dim, opt.dim), RealTensor({opt.dim})},
        {RealTensor::matrix(opt.dim, opt.dim), RealTensor({opt.dim})}};
    double mse = 0.0;
    for (std::size_t b = 0; b < opt.batch; ++b) {
      const RealTensor x = sample();
      const RealTensor target = toy_detail::forward(teacher, x, nullptr, nullptr);
      toy_detail::ToyTrace tr;
      const RealTensor out = toy_detail::forward(student, x, &mul, &tr);
      RealTensor dout(out.shape());
      for (std::size_t i = 0; i < out.size(); ++i) {
        const double e = out[i] - target[i];
        mse += e * e;
        dout[i] = 2.0 * e / count;
      }
      const HeadGrads hg = attention_backward(dout, tr.head, opt.dim);
      linear_backward(hg.dq, tr.x, student.q, tr.q, grad.q);
      linear_backward(hg.dk, tr.x, student.k, tr.k, grad.k);
      linear_backward(hg.dv, tr.x, student.v, tr.v, grad.v);
    }
    mse /= count;
    if (!std::isfinite(mse)) throw DataError("toy experiment diverged at iteration " + std::to_string(it));
    res.mse.push_back(mse);
    for (auto [p, gr] : {std::pair{&student.q, &grad.q}, std::pair{&student.k, &grad.k}, std::pair{&student.v, &grad.v}})
      for (std::size_t j = 0; j < p->weight.size(); ++j) p->weight[j] -= opt.learning_rate * gr->weight[j];
  }
  for (std::size_t s = 0; s < opt.eval_sequences; ++s) {
    const RealTensor x = sample();
    const RealTensor target = toy_detail::forward(teacher, x, nullptr, nullptr);
    toy_detail::ToyTrace tr;
    const RealTensor out = toy_detail::forward(student, x, &mul, &tr);
    res.outputs.insert(res.outputs.end(), out.values().begin(), out.values().end());
    res.targets.insert(res.targets.end(), target.values().begin(), target.values().end());
  }
  res.histogram = make_histogram(res.outputs, res.targets, opt.histogram_bins);
  return res;
}

// ---- STE gradient check --------------------------------------------------------

struct LinearProbeLayer {
  LinearParams params;
  LinearQuant quant;
};

struct FfnProbeLayer {
  FfnParams params;
  FfnQuant quant;
};

using ProbeLayer = std::variant<LinearProbeLayer, FfnProbeLayer>;

struct GradientCheckReport {
  bool accepted = false;
  std::vector<std::size_t> rejected;  // probe elements within epsilon of a clip or rounding boundary
  std::vector<std::size_t> clipped;   // probe elements outside the clip range (analytic gradient 0)
  double max_rel_deviation = 0.0;     // max |analytic - numeric| / max |numeric| over unclipped elements
  RealTensor analytic, numeric;
};

/// Compares the STE gradient of the exact-LUT quantized layer against central
/// finite differences of the real-arithmetic layer, for the scalar objective
/// sum(upstream * layer(probe)) with a seeded Gaussian upstream.
inline GradientCheckReport ste_gradient_check(const ProbeLayer& layer, const RealTensor& probe, double epsilon,
                                              std::uint64_t seed = 0) {
  if (!(epsilon > 0.0)) throw RangeError("gradient check: epsilon must be positive");
  const QuantParams& qin = std::visit([](const auto& l) -> const QuantParams& {
    if constexpr (std::is_same_v<std::decay_t<decltype(l)>, LinearProbeLayer>)
      return l.quant.input;
    else
      return l.quant.fc1.input;
  }, layer);

  GradientCheckReport rep;
  const double clip = qin.clip();
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double a = std::abs(probe[i]);
    if (std::abs(a - clip) <= epsilon) {
      rep.rejected.push_back(i);
    } else if (a > clip) {
      rep.clipped.push_back(i);
    } else {
      const double r = probe[i] / qin.scale;
      const double boundary = std::floor(r) + 0.5;
      if (std::abs(r - boundary) * qin.scale <= epsilon) rep.rejected.push_back(i);
    }
  }
  if (!rep.rejected.empty()) return rep;

  const MulBackend exact = make_backend(AxMultiplier::exact("exact", qin.bitwidth));
  auto run = [&](const RealTensor& x, const MulBackend* mul, void* trace) {
    return std::visit([&](const auto& l) {
      if constexpr (std::is_same_v<std::decay_t<decltype(l)>, LinearProbeLayer>)
        return linear_apply(x, l.params, mul, mul ? &l.quant : nullptr, static_cast<ProductTrace*>(trace));
      else
        return ffn_apply(x, l.params, mul ? &l.quant : nullptr, mul, static_cast<FfnTrace*>(trace));
    }, layer);
  };

  ProductTrace lin_tr;
  FfnTrace ffn_tr;
  const bool is_linear = std::holds_alternative<LinearProbeLayer>(layer);
  const RealTensor y = run(probe, &exact, is_linear ? static_cast<void*>(&lin_tr) : static_cast<void*>(&ffn_tr));
  RealTensor upstream(y.shape());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (auto& v : upstream.values()) v = g(rng);

  if (is_linear) {
    const auto& l = std::get<LinearProbeLayer>(layer);
    LinearParams scratch{RealTensor(l.params.weight.shape()), RealTensor(l.params.bias.shape())};
    rep.analytic = linear_backward(upstream, probe, l.params, lin_tr, scratch);
  } else {
    const auto& l = std::get<FfnProbeLayer>(layer);
    FfnParams scratch{{RealTensor(l.params.fc1.weight.shape()), RealTensor(l.params.fc1.bias.shape())},
                      {RealTensor(l.params.fc2.weight.shape()), RealTensor(l.params.fc2.bias.shape())}};
    rep.analytic = ffn_backward(upstream, ffn_tr, l.params, scratch);
  }

  auto objective = [&](const RealTensor& x) {
    const RealTensor out = run(x, nullptr, nullptr);
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += upstream[i] * out[i];
    return s;
  };
  rep.numeric = RealTensor(probe.shape());
  RealTensor xp = probe;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    xp[i] = probe[i] + epsilon;
    const double fp = objective(xp);
    xp[i] = probe[i] - epsilon;
    const double fm = objective(xp);
    xp[i] = probe[i];
    rep.numeric[i] = (fp - fm) / (2.0 * epsilon);
  }

  std::vector<bool> is_clipped(probe.size(), false);
  for (auto i : rep.clipped) is_clipped[i] = true;
  double denom = 0.0, worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    if (is_clipped[i]) continue;
    denom = std::max(denom, std::abs(rep.numeric[i]));
    worst = std::max(worst, std::abs(rep.analytic[i] - rep.numeric[i]));
  }
  rep.max_rel_deviation = denom > 0.0 ? worst / denom : worst;
  rep.accepted = true;
  return rep;
}

// ---- CSV -----------------------------------------------------------------------

/// step,loss (finetune) or iteration,mse (toy): one value per row.
inline void write_series(std::ostream& os, const std::string& index_name, const std::string& value_name,
                         const std::vector<double>& v) {
  os << index_name << "," << value_name << "\n";
  for (std::size_t i = 0; i < v.size(); ++i) os << i << "," << format_real(v[i]) << "\n";
}

inline std::vector<double> parse_series(std::istream& is, const std::string& source = "<series>") {
  std::vector<double> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#' || lineno == 1) continue;
    const auto f = split(s, ',');
    if (f.size() != 2) throw ParseError(source + ":" + std::to_string(lineno) + ": expected 2 fields");
    if (parse_int(f[0], "index") != static_cast<long long>(out.size()))
      throw ParseError(source + ":" + std::to_string(lineno) + ": index out of sequence");
    out.push_back(parse_real(f[1], "value"));
  }
  return out;
}

inline void write_histogram(std::ostream& os, const Histogram& h) {
  os << "bin_low,bin_high,output_count,target_count\n";
  for (std::size_t i = 0; i + 1 < h.edges.size(); ++i)
    os << format_real(h.edges[i]) << "," << format_real(h.edges[i + 1]) << "," << h.output_counts[i] << ","
       << h.target_counts[i] << "\n";
}

inline Histogram parse_histogram(std::istream& is, const std::string& source = "<histogram>") {
  Histogram h;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#' || lineno == 1) continue;
    const auto f = split(s, ',');
    const std::string where = source + ":" + std::to_string(lineno);
    if (f.size() != 4) throw ParseError(where + ": expected 4 fields");
    const double lo = parse_real(f[0], "bin_low");
    if (h.edges.empty()) h.edges.push_back(lo);
    else if (h.edges.back() != lo) throw ParseError(where + ": bins are not contiguous");
    h.edges.push_back(parse_real(f[1], "bin_high"));
    h.output_counts.push_back(static_cast<std::size_t>(parse_int(f[2], "output_count")));
    h.target_counts.push_back(static_cast<std::size_t>(parse_int(f[3], "target_count")));
  }
  return h;
}

}  // namespace axvit

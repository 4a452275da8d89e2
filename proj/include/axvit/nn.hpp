#pragma once

// Toy vision transformer whose attention and FFN matmuls run on approximate
// multipliers. Patch embedding, LayerNorm, softmax, GELU, residual adds and the
// classifier head stay in exact real arithmetic.
//
// Every forward function takes an optional multiplier backend and quantization
// record. With both null the computation is plain real arithmetic (used for
// pretraining and calibration); otherwise each matmul operand is quantized,
// multiplied on the backend, and dequantized. An optional trace receives the
// intermediates needed by the backward pass in train.hpp.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "axvit/catalog.hpp"
#include "axvit/data.hpp"
#include "axvit/kernels.hpp"
#include "axvit/quant.hpp"
#include "axvit/tensor.hpp"

namespace axvit {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t embed_dim = 32;
  std::size_t heads = 2;
  std::size_t ffn_dim = 64;
  std::size_t patches = 16;
  std::size_t classes = 10;
  std::size_t patch_dim = 16;

  std::size_t head_dim() const { return embed_dim / heads; }

  /// Square patch side, derived from patch_dim.
  std::size_t patch_side() const { return static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patch_dim)))); }
  std::size_t grid_side() const { return static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(patches)))); }

  void validate() const {
    if (layers == 0 || embed_dim == 0 || heads == 0 || ffn_dim == 0 || patches == 0 || classes == 0 || patch_dim == 0)
      throw RangeError("model config: all dimensions must be positive");
    if (embed_dim % heads != 0)
      throw RangeError("model config: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                       std::to_string(heads));
    if (patch_side() * patch_side() != patch_dim) throw RangeError("model config: patch_dim must be a perfect square");
    if (grid_side() * grid_side() != patches) throw RangeError("model config: patches must be a perfect square");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// One multiplier name per transformer block.
struct AxxConfig {
  std::vector<std::string> assignment;

  static AxxConfig uniform(const std::string& name, std::size_t layers) {
    return AxxConfig{std::vector<std::string>(layers, name)};
  }

  std::size_t size() const noexcept { return assignment.size(); }

  /// "a|b|c"
  std::string to_string() const {
    std::string s;
    for (std::size_t i = 0; i < assignment.size(); ++i) {
      if (i) s += '|';
      s += assignment[i];
    }
    return s;
  }

  /// Accepts '|' or ',' separators.
  static AxxConfig parse(const std::string& text) {
    AxxConfig c;
    std::string cur;
    for (char ch : text) {
      if (ch == '|' || ch == ',') {
        c.assignment.push_back(trim(cur));
        cur.clear();
      } else {
        cur += ch;
      }
    }
    c.assignment.push_back(trim(cur));
    for (const auto& n : c.assignment)
      if (n.empty()) throw ParseError("axx config '" + text + "' has an empty entry");
    return c;
  }

  friend bool operator==(const AxxConfig&, const AxxConfig&) = default;
  friend auto operator<=>(const AxxConfig&, const AxxConfig&) = default;
};

/// Calibrated scales keyed by (layer, tensor role), at one bitwidth.
class ScaleMap {
 public:
  using Key = std::pair<std::string, std::string>;

  int bitwidth = 8;

  void set(const std::string& layer, const std::string& role, double scale) {
    if (!(scale > 0.0) || !std::isfinite(scale))
      throw RangeError("scale for " + layer + "/" + role + " must be positive and finite");
    scales_[{layer, role}] = scale;
  }

  bool contains(const std::string& layer, const std::string& role) const { return scales_.count({layer, role}) > 0; }

  QuantParams get(const std::string& layer, const std::string& role) const {
    auto it = scales_.find({layer, role});
    if (it == scales_.end()) throw StateError("model is not calibrated: no scale for " + layer + "/" + role);
    return QuantParams{it->second, 0, bitwidth};
  }

  const std::map<Key, double>& entries() const noexcept { return scales_; }
  std::size_t size() const noexcept { return scales_.size(); }
  bool empty() const noexcept { return scales_.empty(); }
  void clear() { scales_.clear(); }

  friend bool operator==(const ScaleMap&, const ScaleMap&) = default;

 private:
  std::map<Key, double> scales_;
};

struct LinearParams {
  RealTensor weight;  // [in x out]
  RealTensor bias;    // [out]
};

struct LayerNormParams {
  RealTensor gamma;
  RealTensor beta;
};

struct MhsaParams {
  LinearParams q_proj, k_proj, v_proj, out_proj;
};

struct FfnParams {
  LinearParams fc1, fc2;
};

struct BlockParams {
  LayerNormParams ln1;
  MhsaParams attn;
  LayerNormParams ln2;
  FfnParams ffn;
};

struct LinearQuant {
  QuantParams input, weight;
};

struct AttentionQuant {
  QuantParams query, key, value, probs;
};

struct MhsaQuant {
  LinearQuant q_proj, k_proj, v_proj;
  AttentionQuant attention;
  LinearQuant out_proj;
};

struct FfnQuant {
  LinearQuant fc1, fc2;
};

struct BlockQuant {
  MhsaQuant attn;
  FfnQuant ffn;
};

/// Softmax outputs lie in [0, 1]; they use a fixed 1/(2^(b-1)-1) scale.
inline QuantParams probs_quant(int bits) { return QuantParams{1.0 / quant_max(bits), 0, bits}; }

inline std::string block_prefix(std::size_t i) { return "blocks." + std::to_string(i); }

inline BlockQuant block_quant(const ScaleMap& s, std::size_t block) {
  const std::string p = block_prefix(block);
  auto lin = [&](const std::string& name) {
    return LinearQuant{s.get(p + name, "input"), s.get(p + name, "weight")};
  };
  BlockQuant q;
  q.attn.q_proj = lin(".attn.q_proj");
  q.attn.k_proj = lin(".attn.k_proj");
  q.attn.v_proj = lin(".attn.v_proj");
  q.attn.out_proj = lin(".attn.out_proj");
  q.attn.attention = AttentionQuant{s.get(p + ".attn.scores", "query"), s.get(p + ".attn.scores", "key"),
                                    s.get(p + ".attn.context", "value"), probs_quant(s.bitwidth)};
  q.ffn.fc1 = lin(".ffn.fc1");
  q.ffn.fc2 = lin(".ffn.fc2");
  return q;
}

// ---- traces for backprop ---------------------------------------------------

/// Clip ranges of the two operands of one matmul (infinite in real mode).
struct ProductTrace {
  double clip_a = std::numeric_limits<double>::infinity();
  double clip_b = std::numeric_limits<double>::infinity();
};

struct LayerNormTrace {
  RealTensor xhat;
  std::vector<double> rstd;
};

struct HeadTrace {
  RealTensor q, k, v, probs;
  ProductTrace scores, context;
};

struct MhsaTrace {
  RealTensor input;
  RealTensor q, k, v;  // full projections [n x d]
  ProductTrace q_proj, k_proj, v_proj, out_proj;
  std::vector<HeadTrace> heads;
  RealTensor concat;
};

struct FfnTrace {
  RealTensor input, pre_act, act;
  ProductTrace fc1, fc2;
};

struct BlockTrace {
  RealTensor x_in;
  LayerNormTrace ln1;
  MhsaTrace attn;
  RealTensor x_mid;
  LayerNormTrace ln2;
  FfnTrace ffn;
};

struct VitTrace {
  RealTensor patches;
  std::vector<BlockTrace> blocks;
  RealTensor tokens;  // output of the last block
  RealTensor pooled;  // [1 x d]
};

struct ForwardOptions {
  bool layer_norm = true;
};

// ---- building blocks ---------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline RealTensor layer_norm(const RealTensor& x, const LayerNormParams& p, LayerNormTrace* tr = nullptr) {
  const std::size_t n = x.rows(), d = x.cols();
  RealTensor y = RealTensor::matrix(n, d);
  if (tr) {
    tr->xhat = RealTensor::matrix(n, d);
    tr->rstd.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(d);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (x(i, j) - mean) * rstd;
      y(i, j) = p.gamma[j] * xh + p.beta[j];
      if (tr) tr->xhat(i, j) = xh;
    }
    if (tr) tr->rstd[i] = rstd;
  }
  return y;
}

/// x·W + bias, approximate when `mul` is given.
inline RealTensor linear_apply(const RealTensor& x, const LinearParams& p, const MulBackend* mul, const LinearQuant* q,
                               ProductTrace* tr = nullptr) {
  RealTensor y;
  if (mul) {
    if (!q) throw StateError("linear: quantized path requires calibrated scales");
    y = quantized_matmul(x, q->input, p.weight, q->weight, *mul);
    if (tr) *tr = ProductTrace{q->input.clip(), q->weight.clip()};
  } else {
    y = ops::matmul(x, p.weight);
    if (tr) *tr = ProductTrace{};
  }
  ops::add_row_bias(y, p.bias);
  return y;
}

/// dequantize(axx_matmul(quantize(x), quantize(W))) + bias.
inline RealTensor linear_forward(const RealTensor& x, const RealTensor& w, const RealTensor& bias,
                                 const QuantParams& qx, const QuantParams& qw, const MulBackend& mul) {
  qx.validate();
  qw.validate();
  LinearParams p{w, bias};
  LinearQuant q{qx, qw};
  return linear_apply(x, p, &mul, &q);
}

/// softmax(Q Kᵀ / sqrt(d_k)) V for one head. Scores are dequantized before scaling.
inline RealTensor attention_apply(const RealTensor& q, const RealTensor& k, const RealTensor& v, std::size_t d_k,
                                  const AttentionQuant* quant, const MulBackend* mul, HeadTrace* tr = nullptr) {
  if (q.cols() != k.cols() || k.rows() != v.rows())
    throw RangeError("attention: inner dimensions disagree (" + shape_string(q.shape()) + ", " +
                     shape_string(k.shape()) + ", " + shape_string(v.shape()) + ")");
  if (mul && !quant) throw StateError("attention: quantized path requires calibrated scales");
  RealTensor scores = mul ? quantized_matmul(q, quant->query, ops::transpose(k), quant->key, *mul) : ops::matmul_nt(q, k);
  ops::scale_inplace(scores, 1.0 / std::sqrt(static_cast<double>(d_k)));
  ops::softmax_rows(scores);
  RealTensor out = mul ? quantized_matmul(scores, quant->probs, v, quant->value, *mul) : ops::matmul(scores, v);
  if (tr) {
    tr->q = q;
    tr->k = k;
    tr->v = v;
    tr->probs = std::move(scores);
    if (mul) {
      tr->scores = ProductTrace{quant->query.clip(), quant->key.clip()};
      tr->context = ProductTrace{quant->probs.clip(), quant->value.clip()};
    } else {
      tr->scores = tr->context = ProductTrace{};
    }
  }
  return out;
}

inline RealTensor attention_forward(const RealTensor& q, const RealTensor& k, const RealTensor& v, std::size_t d_k,
                                    const AttentionQuant& quant, const MulBackend& mul) {
  return attention_apply(q, k, v, d_k, &quant, &mul);
}

/// Concat(head_1..head_h) W^O with head_i = Attention(x W^Q_i, x W^K_i, x W^V_i).
/// Head i uses columns [i*d_k, (i+1)*d_k) of the projections.
inline RealTensor multi_head_apply(const RealTensor& x, const MhsaParams& p, std::size_t heads, const MhsaQuant* q,
                                   const MulBackend* mul, MhsaTrace* tr = nullptr) {
  const std::size_t d = p.q_proj.weight.cols();
  if (heads == 0 || d % heads != 0)
    throw RangeError("multi-head attention: " + std::to_string(heads) + " heads do not divide width " + std::to_string(d));
  const std::size_t dk = d / heads;
  ProductTrace tq, tk, tv, to;
  RealTensor qf = linear_apply(x, p.q_proj, mul, q ? &q->q_proj : nullptr, &tq);
  RealTensor kf = linear_apply(x, p.k_proj, mul, q ? &q->k_proj : nullptr, &tk);
  RealTensor vf = linear_apply(x, p.v_proj, mul, q ? &q->v_proj : nullptr, &tv);
  RealTensor concat = RealTensor::matrix(x.rows(), d);
  std::vector<HeadTrace> head_traces(tr ? heads : 0);
  for (std::size_t h = 0; h < heads; ++h) {
    RealTensor o = attention_apply(ops::slice_cols(qf, h * dk, dk), ops::slice_cols(kf, h * dk, dk),
                                   ops::slice_cols(vf, h * dk, dk), dk, q ? &q->attention : nullptr, mul,
                                   tr ? &head_traces[h] : nullptr);
    ops::put_cols(concat, o, h * dk);
  }
  RealTensor out = linear_apply(concat, p.out_proj, mul, q ? &q->out_proj : nullptr, &to);
  if (tr) {
    tr->input = x;
    tr->q = std::move(qf);
    tr->k = std::move(kf);
    tr->v = std::move(vf);
    tr->q_proj = tq;
    tr->k_proj = tk;
    tr->v_proj = tv;
    tr->out_proj = to;
    tr->heads = std::move(head_traces);
    tr->concat = std::move(concat);
  }
  return out;
}

inline RealTensor multi_head_forward(const RealTensor& x, const MhsaParams& p, std::size_t heads, const MhsaQuant& q,
                                     const MulBackend& mul) {
  return multi_head_apply(x, p, heads, &q, &mul);
}

/// GELU(x W1 + b1) W2 + b2.
inline RealTensor ffn_apply(const RealTensor& x, const FfnParams& p, const FfnQuant* q, const MulBackend* mul,
                            FfnTrace* tr = nullptr) {
  ProductTrace t1, t2;
  RealTensor pre = linear_apply(x, p.fc1, mul, q ? &q->fc1 : nullptr, &t1);
  RealTensor act(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) act[i] = gelu(pre[i]);
  RealTensor out = linear_apply(act, p.fc2, mul, q ? &q->fc2 : nullptr, &t2);
  if (tr) {
    tr->input = x;
    tr->pre_act = std::move(pre);
    tr->act = std::move(act);
    tr->fc1 = t1;
    tr->fc2 = t2;
  }
  return out;
}

inline RealTensor ffn_forward(const RealTensor& x, const FfnParams& p, const FfnQuant& q, const MulBackend& mul) {
  return ffn_apply(x, p, &q, &mul);
}

// ---- model -------------------------------------------------------------------

struct VitModel {
  ModelConfig config;
  LinearParams patch_embed;  // [patch_dim x d]
  RealTensor pos_embed;      // [patches x d]
  std::vector<BlockParams> blocks;
  LinearParams head;  // [d x classes]
  ScaleMap scales;

  /// Random initialization: weights ~ N(0, 1/fan_in), LayerNorm identity.
  static VitModel create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    auto linear = [&](std::size_t in, std::size_t out) {
      LinearParams p{RealTensor::matrix(in, out), RealTensor({out})};
      const double s = 1.0 / std::sqrt(static_cast<double>(in));
      for (auto& w : p.weight.values()) w = g(rng) * s;
      return p;
    };
    auto norm = [&](std::size_t d) { return LayerNormParams{RealTensor({d}, 1.0), RealTensor({d}, 0.0)}; };
    VitModel m;
    m.config = cfg;
    m.patch_embed = linear(cfg.patch_dim, cfg.embed_dim);
    m.pos_embed = RealTensor::matrix(cfg.patches, cfg.embed_dim);
    for (auto& v : m.pos_embed.values()) v = 0.1 * g(rng);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      BlockParams b;
      b.ln1 = norm(cfg.embed_dim);
      b.attn.q_proj = linear(cfg.embed_dim, cfg.embed_dim);
      b.attn.k_proj = linear(cfg.embed_dim, cfg.embed_dim);
      b.attn.v_proj = linear(cfg.embed_dim, cfg.embed_dim);
      b.attn.out_proj = linear(cfg.embed_dim, cfg.embed_dim);
      b.ln2 = norm(cfg.embed_dim);
      b.ffn.fc1 = linear(cfg.embed_dim, cfg.ffn_dim);
      b.ffn.fc2 = linear(cfg.ffn_dim, cfg.embed_dim);
      m.blocks.push_back(std::move(b));
    }
    m.head = linear(cfg.embed_dim, cfg.classes);
    return m;
  }

  /// Stable, fully qualified parameter names in checkpoint order.
  template <typename Self>
  static auto named_parameters_impl(Self& self) {
    using T = std::conditional_t<std::is_const_v<Self>, const RealTensor*, RealTensor*>;
    std::vector<std::pair<std::string, T>> out;
    auto lin = [&](const std::string& n, auto& p) {
      out.emplace_back(n + ".weight", &p.weight);
      out.emplace_back(n + ".bias", &p.bias);
    };
    auto ln = [&](const std::string& n, auto& p) {
      out.emplace_back(n + ".gamma", &p.gamma);
      out.emplace_back(n + ".beta", &p.beta);
    };
    lin("patch_embed", self.patch_embed);
    out.emplace_back("pos_embed", &self.pos_embed);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      auto& b = self.blocks[i];
      const std::string p = block_prefix(i);
      ln(p + ".ln1", b.ln1);
      lin(p + ".attn.q_proj", b.attn.q_proj);
      lin(p + ".attn.k_proj", b.attn.k_proj);
      lin(p + ".attn.v_proj", b.attn.v_proj);
      lin(p + ".attn.out_proj", b.attn.out_proj);
      ln(p + ".ln2", b.ln2);
      lin(p + ".ffn.fc1", b.ffn.fc1);
      lin(p + ".ffn.fc2", b.ffn.fc2);
    }
    lin("head", self.head);
    return out;
  }

  std::vector<std::pair<std::string, RealTensor*>> named_parameters() { return named_parameters_impl(*this); }
  std::vector<std::pair<std::string, const RealTensor*>> named_parameters() const { return named_parameters_impl(*this); }

  /// Same structure, all parameters zero. Used as a gradient accumulator.
  VitModel zeros_like() const {
    VitModel z = *this;
    for (auto& [name, t] : z.named_parameters()) t->fill(0.0);
    z.scales.clear();
    return z;
  }

  bool calibrated() const { return !scales.empty(); }
};

/// Weight scales set from the given weights by max calibration at `s.bitwidth`.
inline void set_weight_scales(const std::vector<BlockParams>& blocks, ScaleMap& s) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = block_prefix(i);
    const auto& b = blocks[i];
    auto set = [&](const std::string& name, const LinearParams& lp) {
      s.set(p + name, "weight", max_scale(lp.weight.values(), s.bitwidth).scale);
    };
    set(".attn.q_proj", b.attn.q_proj);
    set(".attn.k_proj", b.attn.k_proj);
    set(".attn.v_proj", b.attn.v_proj);
    set(".attn.out_proj", b.attn.out_proj);
    set(".ffn.fc1", b.ffn.fc1);
    set(".ffn.fc2", b.ffn.fc2);
  }
}

inline void refresh_weight_scales(VitModel& m) { set_weight_scales(m.blocks, m.scales); }

/// Image i as a [patches x patch_dim] matrix, pixels mapped to [-1, 1].
inline RealTensor patchify(const Dataset& d, std::size_t i, const ModelConfig& cfg) {
  const std::size_t ps = cfg.patch_side(), gs = cfg.grid_side();
  if (d.rows != ps * gs || d.cols != ps * gs)
    throw RangeError("dataset images are " + std::to_string(d.rows) + "x" + std::to_string(d.cols) + ", model expects " +
                     std::to_string(ps * gs) + "x" + std::to_string(ps * gs));
  auto img = d.image(i);
  RealTensor x = RealTensor::matrix(cfg.patches, cfg.patch_dim);
  for (std::size_t pr = 0; pr < gs; ++pr)
    for (std::size_t pc = 0; pc < gs; ++pc)
      for (std::size_t r = 0; r < ps; ++r)
        for (std::size_t c = 0; c < ps; ++c) {
          const std::uint8_t v = img[(pr * ps + r) * d.cols + pc * ps + c];
          x(pr * gs + pc, r * ps + c) = static_cast<double>(v) / 127.5 - 1.0;
        }
  return x;
}

/// Per-block multiplier backends; an empty list selects real arithmetic.
using LayerMultipliers = std::vector<const MulBackend*>;

inline RealTensor block_apply(const RealTensor& x, const BlockParams& b, std::size_t heads, const BlockQuant* q,
                              const MulBackend* mul, const ForwardOptions& opt, BlockTrace* tr = nullptr) {
  RealTensor a = opt.layer_norm ? layer_norm(x, b.ln1, tr ? &tr->ln1 : nullptr) : x;
  RealTensor attn = multi_head_apply(a, b.attn, heads, q ? &q->attn : nullptr, mul, tr ? &tr->attn : nullptr);
  RealTensor mid = x;
  ops::add_inplace(mid, attn);
  RealTensor c = opt.layer_norm ? layer_norm(mid, b.ln2, tr ? &tr->ln2 : nullptr) : mid;
  RealTensor f = ffn_apply(c, b.ffn, q ? &q->ffn : nullptr, mul, tr ? &tr->ffn : nullptr);
  RealTensor out = mid;
  ops::add_inplace(out, f);
  if (tr) {
    tr->x_in = x;
    tr->x_mid = std::move(mid);
  }
  return out;
}

/// Logits [1 x classes] for one image given as patches.
inline RealTensor vit_forward(const VitModel& m, const RealTensor& patches, const LayerMultipliers& muls,
                              const ForwardOptions& opt = {}, VitTrace* tr = nullptr) {
  const auto& cfg = m.config;
  if (patches.rows() != cfg.patches || patches.cols() != cfg.patch_dim)
    throw RangeError("vit_forward: expected patches " + std::to_string(cfg.patches) + "x" + std::to_string(cfg.patch_dim) +
                     ", got " + shape_string(patches.shape()));
  const bool quantized = !muls.empty();
  if (quantized && muls.size() != cfg.layers)
    throw RangeError("vit_forward: configuration has " + std::to_string(muls.size()) + " entries, model has " +
                     std::to_string(cfg.layers) + " layers");
  if (quantized && !m.calibrated()) throw StateError("vit_forward: model is not calibrated");

  RealTensor x = linear_apply(patches, m.patch_embed, nullptr, nullptr);
  ops::add_inplace(x, m.pos_embed);
  if (tr) {
    tr->patches = patches;
    tr->blocks.assign(cfg.layers, BlockTrace{});
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::optional<BlockQuant> q;
    const MulBackend* mul = nullptr;
    if (quantized) {
      mul = muls[l];
      if (!mul) throw StateError("vit_forward: no multiplier for layer " + std::to_string(l));
      if (backend_bitwidth(*mul) != m.scales.bitwidth)
        throw StateError("layer " + std::to_string(l) + ": multiplier bitwidth " + std::to_string(backend_bitwidth(*mul)) +
                         " differs from calibration bitwidth " + std::to_string(m.scales.bitwidth));
      q = block_quant(m.scales, l);
    }
    x = block_apply(x, m.blocks[l], cfg.heads, q ? &*q : nullptr, mul, opt, tr ? &tr->blocks[l] : nullptr);
  }
  RealTensor pooled = RealTensor::matrix(1, cfg.embed_dim);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) pooled(0, j) += x(i, j);
  ops::scale_inplace(pooled, 1.0 / static_cast<double>(x.rows()));
  RealTensor logits = linear_apply(pooled, m.head, nullptr, nullptr);
  if (tr) {
    tr->tokens = std::move(x);
    tr->pooled = std::move(pooled);
  }
  return logits;
}

inline std::size_t argmax_row(const RealTensor& logits) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < logits.cols(); ++j)
    if (logits(0, j) > logits(0, best)) best = j;
  return best;
}

/// Catalog with a ready-to-use backend (LUT, or functional above 12 bits) per entry.
class MultiplierBank {
 public:
  explicit MultiplierBank(Catalog cat) : catalog_(std::move(cat)) {
    if (catalog_.empty()) throw StateError("multiplier bank: empty catalog");
    for (const auto& m : catalog_) backends_.push_back(make_backend(m));
  }

  const Catalog& catalog() const noexcept { return catalog_; }
  std::size_t size() const noexcept { return catalog_.size(); }
  const MulBackend& backend(std::size_t i) const { return backends_.at(i); }
  const MulBackend& backend(std::string_view name) const { return backends_[catalog_.index_of(name)]; }

  LayerMultipliers resolve(const AxxConfig& cfg, std::size_t layers) const {
    if (cfg.size() != layers)
      throw RangeError("axx config has " + std::to_string(cfg.size()) + " entries, model has " + std::to_string(layers) +
                       " layers");
    LayerMultipliers out;
    out.reserve(layers);
    for (const auto& n : cfg.assignment) out.push_back(&backend(n));
    return out;
  }

 private:
  Catalog catalog_;
  std::vector<MulBackend> backends_;
};

inline RealTensor vit_forward(const VitModel& m, const RealTensor& patches, const AxxConfig& axx,
                              const MultiplierBank& bank, const ForwardOptions& opt = {}) {
  return vit_forward(m, patches, bank.resolve(axx, m.config.layers), opt);
}

/// Top-1 accuracy over the first `batch_limit` samples (all when unset).
inline double evaluate_accuracy(const VitModel& m, const Dataset& data, const LayerMultipliers& muls,
                                std::optional<std::size_t> batch_limit = std::nullopt) {
  const std::size_t n = batch_limit ? std::min(*batch_limit, data.size()) : data.size();
  if (n == 0) throw DataError("evaluate_accuracy: empty dataset");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const RealTensor logits = vit_forward(m, patchify(data, i, m.config), muls);
    if (argmax_row(logits) == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

inline double evaluate_accuracy(const VitModel& m, const Dataset& data, const AxxConfig& axx, const MultiplierBank& bank,
                                std::optional<std::size_t> batch_limit = std::nullopt) {
  return evaluate_accuracy(m, data, bank.resolve(axx, m.config.layers), batch_limit);
}

// ---- calibration ---------------------------------------------------------------

struct CalibrationOptions {
  int bitwidth = 8;
  double percentile = 99.9;
  std::size_t bins = 2048;
  std::optional<std::size_t> limit;  // samples used; all when unset
};

/// Runs the real-arithmetic forward over the data and sets every activation
/// scale by histogram percentile and every weight scale by max.
inline ScaleMap calibrate(const VitModel& m, const Dataset& data, const CalibrationOptions& opt = {}) {
  const std::size_t n = opt.limit ? std::min(*opt.limit, data.size()) : data.size();
  if (n == 0) throw DataError("calibrate: empty dataset");
  std::map<ScaleMap::Key, HistogramCalibrator> cals;
  auto cal = [&](const std::string& layer, const std::string& role) -> HistogramCalibrator& {
    auto key = ScaleMap::Key{layer, role};
    auto it = cals.find(key);
    if (it == cals.end()) it = cals.emplace(key, HistogramCalibrator(opt.bins, opt.percentile)).first;
    return it->second;
  };
  for (std::size_t s = 0; s < n; ++s) {
    VitTrace tr;
    vit_forward(m, patchify(data, s, m.config), {}, {}, &tr);
    for (std::size_t l = 0; l < m.config.layers; ++l) {
      const std::string p = block_prefix(l);
      const BlockTrace& b = tr.blocks[l];
      cal(p + ".attn.q_proj", "input").observe(b.attn.input);
      cal(p + ".attn.k_proj", "input").observe(b.attn.input);
      cal(p + ".attn.v_proj", "input").observe(b.attn.input);
      cal(p + ".attn.scores", "query").observe(b.attn.q);
      cal(p + ".attn.scores", "key").observe(b.attn.k);
      cal(p + ".attn.context", "value").observe(b.attn.v);
      cal(p + ".attn.out_proj", "input").observe(b.attn.concat);
      cal(p + ".ffn.fc1", "input").observe(b.ffn.input);
      cal(p + ".ffn.fc2", "input").observe(b.ffn.act);
    }
  }
  ScaleMap out;
  out.bitwidth = opt.bitwidth;
  set_weight_scales(m.blocks, out);
  for (const auto& [key, c] : cals) out.set(key.first, key.second, c.compute_scale(opt.bitwidth).scale);
  return out;
}

// ---- MAC accounting ------------------------------------------------------------

struct MacProfile {
  std::vector<std::uint64_t> block_macs;  // approximable MACs per transformer block
  std::uint64_t exact_macs = 0;           // patch embedding + head, always on the baseline multiplier

  std::uint64_t total() const {
    std::uint64_t t = exact_macs;
    for (auto v : block_macs) t += v;
    return t;
  }
};

/// Per-image MAC counts: Q/K/V/output projections, QKᵀ, attention·V and both FFN matmuls per block.
inline MacProfile mac_profile(const ModelConfig& c) {
  const std::uint64_t n = c.patches, d = c.embed_dim, f = c.ffn_dim;
  const std::uint64_t block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * f;
  MacProfile p;
  p.block_macs.assign(c.layers, block);
  p.exact_macs = n * c.patch_dim * d + d * c.classes;
  return p;
}

}  // namespace axvit

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/masking.hpp"
#include "d2v/ops.hpp"
#include "d2v/rng.hpp"
#include "d2v/tensor.hpp"

namespace d2v {

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t hidden = 16;
  std::size_t heads = 2;
  std::size_t ffn_mult = 4;
  double dropout = 0.0;
  double stochastic_depth = 0.0;
  std::size_t max_positions = 512;

  std::size_t head_dim() const { return hidden / heads; }

  void validate() const {
    if (layers < 1) throw ConfigError("encoder.layers must be >= 1");
    if (hidden < 1 || heads < 1) throw ConfigError("encoder.hidden and encoder.heads must be positive");
    if (hidden % heads != 0) throw ConfigError("encoder.hidden must be divisible by encoder.heads");
    if (ffn_mult < 1) throw ConfigError("encoder.ffn_mult must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder.dropout must lie in [0, 1)");
    if (!(stochastic_depth >= 0.0 && stochastic_depth < 1.0))
      throw ConfigError("encoder.stochastic_depth must lie in [0, 1)");
    if (max_positions < 1) throw ConfigError("encoder.max_positions must be >= 1");
  }

  bool operator==(const EncoderConfig&) const = default;
};

template <class Real>
Tensor<Real> init_weight(Shape shape, Rng& rng, double std = 0.02) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.truncated_normal(std));
  return Tensor<Real>(std::move(shape), std::move(v), true);
}

template <class Real>
struct BlockParams {
  Tensor<Real> ln1_gain, ln1_shift;
  Tensor<Real> qkv_w, qkv_b;
  Tensor<Real> out_w, out_b;
  Tensor<Real> ln2_gain, ln2_shift;
  Tensor<Real> ffn1_w, ffn1_b;
  Tensor<Real> ffn2_w, ffn2_b;

  NamedTensors<Real> parameters(const std::string& prefix) const {
    return {{prefix + "ln1_gain", ln1_gain}, {prefix + "ln1_shift", ln1_shift},
            {prefix + "qkv_w", qkv_w},       {prefix + "qkv_b", qkv_b},
            {prefix + "out_w", out_w},       {prefix + "out_b", out_b},
            {prefix + "ln2_gain", ln2_gain}, {prefix + "ln2_shift", ln2_shift},
            {prefix + "ffn1_w", ffn1_w},     {prefix + "ffn1_b", ffn1_b},
            {prefix + "ffn2_w", ffn2_w},     {prefix + "ffn2_b", ffn2_b}};
  }
};

/// Transformer parameters; the same layout serves student and teacher.
template <class Real>
struct EncoderParams {
  std::vector<BlockParams<Real>> blocks;

  static EncoderParams init(const EncoderConfig& cfg, Rng rng) {
    cfg.validate();
    const std::size_t h = cfg.hidden, inner = cfg.hidden * cfg.ffn_mult;
    EncoderParams p;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      Rng r = rng.split(l);
      BlockParams<Real> b;
      b.ln1_gain = Tensor<Real>::full({h}, Real(1), true);
      b.ln1_shift = Tensor<Real>::zeros({h}, true);
      b.qkv_w = init_weight<Real>({h, 3 * h}, r);
      b.qkv_b = Tensor<Real>::zeros({3 * h}, true);
      b.out_w = init_weight<Real>({h, h}, r);
      b.out_b = Tensor<Real>::zeros({h}, true);
      b.ln2_gain = Tensor<Real>::full({h}, Real(1), true);
      b.ln2_shift = Tensor<Real>::zeros({h}, true);
      b.ffn1_w = init_weight<Real>({h, inner}, r);
      b.ffn1_b = Tensor<Real>::zeros({inner}, true);
      b.ffn2_w = init_weight<Real>({inner, h}, r);
      b.ffn2_b = Tensor<Real>::zeros({h}, true);
      p.blocks.push_back(std::move(b));
    }
    return p;
  }

  NamedTensors<Real> parameters() const {
    NamedTensors<Real> out;
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      auto block = blocks[l].parameters("block" + std::to_string(l) + "/");
      out.insert(out.end(), block.begin(), block.end());
    }
    return out;
  }

  /// Deep copy with fresh storage.
  EncoderParams clone(bool requires_grad) const {
    EncoderParams copy = *this;
    for (auto& b : copy.blocks)
      for (Tensor<Real>* t : {&b.ln1_gain, &b.ln1_shift, &b.qkv_w, &b.qkv_b, &b.out_w, &b.out_b, &b.ln2_gain,
                              &b.ln2_shift, &b.ffn1_w, &b.ffn1_b, &b.ffn2_w, &b.ffn2_b})
        *t = Tensor<Real>(t->shape(), t->values(), requires_grad);
    return copy;
  }
};

enum class TapSite { FfnOut, AttnOut, BlockOut };

/// Per-block intermediate outputs, each [T, H].
template <class Real>
struct ActivationTaps {
  std::vector<Tensor<Real>> attn_out;   // attention branch before the first residual add
  std::vector<Tensor<Real>> ffn_out;    // FFN branch before the second residual add
  std::vector<Tensor<Real>> block_out;  // after the second residual add

  std::size_t blocks() const { return block_out.size(); }

  const Tensor<Real>& site(TapSite s, std::size_t block) const {
    switch (s) {
      case TapSite::FfnOut: return ffn_out.at(block);
      case TapSite::AttnOut: return attn_out.at(block);
      case TapSite::BlockOut: return block_out.at(block);
    }
    return block_out.at(block);
  }
};

/// Training mode enables dropout and stochastic depth, drawing from `rng`.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;
};

template <class Real>
struct EncodeResult {
  Tensor<Real> final;
  ActivationTaps<Real> taps;
};

namespace detail {

template <class Real>
Tensor<Real> self_attention(const Tensor<Real>& x, const BlockParams<Real>& b, const EncoderConfig& cfg) {
  const std::size_t h = cfg.hidden, d = cfg.head_dim();
  const Real inv_sqrt_d = Real(1) / std::sqrt(static_cast<Real>(d));
  auto qkv = linear(x, b.qkv_w, b.qkv_b);
  std::vector<Tensor<Real>> heads;
  heads.reserve(cfg.heads);
  for (std::size_t i = 0; i < cfg.heads; ++i) {
    auto q = slice(qkv, 1, i * d, d);
    auto k = slice(qkv, 1, h + i * d, d);
    auto v = slice(qkv, 1, 2 * h + i * d, d);
    auto weights = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d), 1);
    heads.push_back(matmul(weights, v));
  }
  auto merged = cfg.heads == 1 ? heads.front() : concat(heads, 1);
  return linear(merged, b.out_w, b.out_b);
}

/// Residual branch under stochastic depth: dropped entirely or rescaled.
template <class Real>
Tensor<Real> residual(const Tensor<Real>& x, const Tensor<Real>& branch, const EncoderConfig& cfg,
                      const ForwardMode& mode) {
  if (!mode.training) return add(x, branch);
  auto out = dropout(branch, cfg.dropout, *mode.rng);
  if (cfg.stochastic_depth > 0.0) {
    if (mode.rng->bernoulli(cfg.stochastic_depth)) return x;
    out = scale(out, static_cast<Real>(1.0 / (1.0 - cfg.stochastic_depth)));
  }
  return add(x, out);
}

}  // namespace detail

/**
 * Pre-norm Transformer encoder over one sequence.
 *
 * Block: h = x + Attn(LN1(x)); y = h + FFN(LN2(h)). Taps are the attention
 * branch, the FFN branch (before its residual add) and y.
 */
template <class Real>
EncodeResult<Real> encode(const EncoderParams<Real>& params, const EncoderConfig& cfg, const Tensor<Real>& embedded,
                          const Tensor<Real>& positions, bool want_taps, const ForwardMode& mode = {}) {
  if (embedded.rank() != 2 || embedded.dim(1) != cfg.hidden)
    throw ConfigError("encode: embedded input " + shape_str(embedded.shape()) + " does not have width " +
                      std::to_string(cfg.hidden));
  if (embedded.dim(0) < 1) throw ConfigError("encode: empty sequence");
  if (embedded.dim(0) > cfg.max_positions)
    throw ConfigError("encode: sequence length " + std::to_string(embedded.dim(0)) + " exceeds max_positions " +
                      std::to_string(cfg.max_positions));
  if (positions.shape() != embedded.shape())
    throw ConfigError("encode: positions " + shape_str(positions.shape()) + " vs embedded " +
                      shape_str(embedded.shape()));
  if (params.blocks.size() != cfg.layers) throw StateError("encode: parameter block count differs from config");
  if (mode.training && mode.rng == nullptr) throw StateError("encode: training mode needs an rng");

  EncodeResult<Real> out;
  auto x = add(embedded, positions);
  for (const auto& b : params.blocks) {
    auto attn = detail::self_attention(layer_norm(x, b.ln1_gain, b.ln1_shift), b, cfg);
    auto h = detail::residual(x, attn, cfg, mode);
    auto hidden = gelu(linear(layer_norm(h, b.ln2_gain, b.ln2_shift), b.ffn1_w, b.ffn1_b));
    auto ffn = linear(hidden, b.ffn2_w, b.ffn2_b);
    x = detail::residual(h, ffn, cfg, mode);
    if (want_taps) {
      out.taps.attn_out.push_back(attn);
      out.taps.ffn_out.push_back(ffn);
      out.taps.block_out.push_back(x);
    }
  }
  out.final = x;
  return out;
}

/// Masked rows take the learned mask embedding; KEEP and RANDOM_TOKEN rows pass
/// through (random ids are substituted before embedding).
template <class Real>
Tensor<Real> substitute_mask_token(const Tensor<Real>& embedded, const MaskPlan& plan, const Tensor<Real>& mask_embedding) {
  if (plan.length != embedded.dim(0))
    throw StateError("substitute_mask_token: plan length " + std::to_string(plan.length) + " vs sequence length " +
                     std::to_string(embedded.dim(0)));
  const auto rows = plan.replace_rows();
  if (rows.empty()) return embedded;
  return row_replace(embedded, std::span<const std::size_t>(rows), mask_embedding);
}

}  // namespace d2v

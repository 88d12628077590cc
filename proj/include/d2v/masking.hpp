#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "d2v/errors.hpp"
#include "d2v/rng.hpp"

namespace d2v {

enum class MaskAction : std::uint8_t { ReplaceMask, Keep, RandomToken };

/// Which positions of one sample are masked and how each is replaced.
struct MaskPlan {
  std::size_t length = 0;
  std::vector<std::size_t> masked;   // ascending
  std::vector<MaskAction> actions;   // parallel to masked
  std::vector<int> random_ids;       // parallel to masked; -1 unless RandomToken

  std::size_t count() const { return masked.size(); }
  bool empty() const { return masked.empty(); }
  double fraction() const { return length ? static_cast<double>(masked.size()) / static_cast<double>(length) : 0.0; }

  bool is_masked(std::size_t pos) const { return std::binary_search(masked.begin(), masked.end(), pos); }

  /// Positions whose embedding is swapped for the learned mask vector.
  std::vector<std::size_t> replace_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (actions[i] == MaskAction::ReplaceMask) out.push_back(masked[i]);
    return out;
  }

  void validate() const {
    if (actions.size() != masked.size() || random_ids.size() != masked.size())
      throw StateError("mask plan: actions not defined exactly on masked positions");
    for (std::size_t i = 0; i < masked.size(); ++i) {
      if (masked[i] >= length) throw StateError("mask plan: position " + std::to_string(masked[i]) + " >= length");
      if (i && masked[i] <= masked[i - 1]) throw StateError("mask plan: positions not strictly ascending");
      if ((actions[i] == MaskAction::RandomToken) != (random_ids[i] >= 0))
        throw StateError("mask plan: random id set on a non-random action");
    }
  }

  /// Plan with every flagged position replaced by the mask embedding.
  static MaskPlan from_flags(const std::vector<char>& flags) {
    MaskPlan plan;
    plan.length = flags.size();
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i]) {
        plan.masked.push_back(i);
        plan.actions.push_back(MaskAction::ReplaceMask);
        plan.random_ids.push_back(-1);
      }
    return plan;
  }
};

/**
 * Block-wise masking over an h x w patch grid.
 *
 * Rectangles of area >= min_block with log-uniform aspect ratio in
 * [min_aspect, 1/min_aspect] are placed at random (overlap allowed) until at
 * least ceil(ratio * h * w) patches are covered. The last block may overshoot.
 */
inline MaskPlan block_mask(std::size_t h, std::size_t w, double ratio, std::size_t min_block, Rng& rng,
                           double min_aspect = 0.3) {
  const std::size_t cells = h * w;
  if (cells == 0) throw ConfigError("block_mask: empty grid");
  if (min_block == 0 || min_block > cells)
    throw ConfigError("block_mask: min_block " + std::to_string(min_block) + " infeasible for a " +
                      std::to_string(h) + "x" + std::to_string(w) + " grid");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("block_mask: ratio must lie in (0, 1)");

  const auto target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(cells) - 1e-9));
  const double log_lo = std::log(min_aspect), log_hi = std::log(1.0 / min_aspect);
  std::vector<char> flags(cells, 0);
  std::size_t covered = 0;
  while (covered < target) {
    const double remaining = static_cast<double>(target - covered);
    const double area = rng.uniform(static_cast<double>(min_block), std::max(static_cast<double>(min_block), remaining));
    const double aspect = std::exp(rng.uniform(log_lo, log_hi));
    auto bh = static_cast<std::size_t>(std::lround(std::sqrt(area * aspect)));
    auto bw = static_cast<std::size_t>(std::lround(std::sqrt(area / aspect)));
    bh = std::clamp<std::size_t>(bh, 1, h);
    bw = std::clamp<std::size_t>(bw, 1, w);
    if (bh * bw < min_block) bw = std::min(w, (min_block + bh - 1) / bh);
    if (bh * bw < min_block) bh = std::min(h, (min_block + bw - 1) / bw);
    const std::size_t top = rng.below(h - bh + 1);
    const std::size_t left = rng.below(w - bw + 1);
    for (std::size_t r = top; r < top + bh; ++r)
      for (std::size_t c = left; c < left + bw; ++c)
        if (!flags[r * w + c]) {
          flags[r * w + c] = 1;
          ++covered;
        }
  }
  return MaskPlan::from_flags(flags);
}

/// Every position starts a span with probability p; spans truncate at the end.
inline MaskPlan span_mask(std::size_t length, double p, std::size_t span, Rng& rng) {
  if (span == 0) throw ConfigError("span_mask: span must be positive");
  if (length < span)
    throw ConfigError("span_mask: sequence length " + std::to_string(length) + " shorter than span " + std::to_string(span));
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("span_mask: p must lie in [0, 1]");
  std::vector<char> flags(length, 0);
  for (std::size_t i = 0; i < length; ++i)
    if (rng.bernoulli(p))
      for (std::size_t j = i; j < std::min(i + span, length); ++j) flags[j] = 1;
  return MaskPlan::from_flags(flags);
}

struct TokenMaskOptions {
  /// Probabilities of (replace with mask, keep, random token) for selected positions.
  std::array<double, 3> action_probs{0.8, 0.1, 0.1};
  /// Random replacement ids are drawn uniformly from [random_lo, random_hi).
  int random_lo = 0;
  int random_hi = 0;
};

/// BERT-style token masking: positions selected independently at `rate`.
inline MaskPlan token_mask(std::size_t length, double rate, Rng& rng, const TokenMaskOptions& opts = {}) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("token_mask: rate must lie in [0, 1]");
  const double total = opts.action_probs[0] + opts.action_probs[1] + opts.action_probs[2];
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("token_mask: action probabilities must sum to 1");
  if (opts.action_probs[2] > 0.0 && opts.random_hi <= opts.random_lo)
    throw ConfigError("token_mask: empty random-token range");
  MaskPlan plan;
  plan.length = length;
  for (std::size_t i = 0; i < length; ++i) {
    if (!rng.bernoulli(rate)) continue;
    const double u = rng.uniform();
    plan.masked.push_back(i);
    if (u < opts.action_probs[0]) {
      plan.actions.push_back(MaskAction::ReplaceMask);
      plan.random_ids.push_back(-1);
    } else if (u < opts.action_probs[0] + opts.action_probs[1]) {
      plan.actions.push_back(MaskAction::Keep);
      plan.random_ids.push_back(-1);
    } else {
      plan.actions.push_back(MaskAction::RandomToken);
      const auto range = static_cast<std::uint64_t>(opts.random_hi - opts.random_lo);
      plan.random_ids.push_back(opts.random_lo + static_cast<int>(rng.below(range)));
    }
  }
  return plan;
}

/// Span masking over tokens; every masked position is replaced by the mask embedding.
inline MaskPlan span_token_mask(std::size_t length, double p, std::size_t span, Rng& rng) {
  return span_mask(length, p, span, rng);
}

/// Applies RandomToken replacements at the id level (text only).
inline std::vector<int> apply_random_tokens(std::vector<int> ids, const MaskPlan& plan) {
  for (std::size_t i = 0; i < plan.masked.size(); ++i)
    if (plan.actions[i] == MaskAction::RandomToken) ids.at(plan.masked[i]) = plan.random_ids[i];
  return ids;
}

enum class MaskKind { Block, Span, Token, SpanToken };

inline std::string to_string(MaskKind k) {
  switch (k) {
    case MaskKind::Block: return "block";
    case MaskKind::Span: return "span";
    case MaskKind::Token: return "token";
    case MaskKind::SpanToken: return "span_token";
  }
  return "?";
}

/// Masking hyperparameters; only the fields of the selected kind are read.
struct MaskingSpec {
  MaskKind kind = MaskKind::Span;
  double ratio = 0.6;          // block
  std::size_t min_block = 16;  // block
  double min_aspect = 0.3;     // block
  double p = 0.065;            // span, span_token
  std::size_t span = 10;       // span, span_token
  double rate = 0.15;          // token
  std::array<double, 3> action_probs{0.8, 0.1, 0.1};  // token

  bool operator==(const MaskingSpec&) const = default;
};

/// Per-sample geometry the plan is drawn against.
struct MaskContext {
  std::size_t length = 0;
  std::size_t grid_h = 0, grid_w = 0;  // block masking only
  int random_lo = 0, random_hi = 0;    // token masking only
};

inline MaskPlan make_plan(const MaskingSpec& spec, const MaskContext& ctx, Rng& rng) {
  switch (spec.kind) {
    case MaskKind::Block:
      if (ctx.grid_h * ctx.grid_w != ctx.length) throw StateError("make_plan: grid does not match sequence length");
      return block_mask(ctx.grid_h, ctx.grid_w, spec.ratio, spec.min_block, rng, spec.min_aspect);
    case MaskKind::Span: return span_mask(ctx.length, spec.p, spec.span, rng);
    case MaskKind::Token: return token_mask(ctx.length, spec.rate, rng, {spec.action_probs, ctx.random_lo, ctx.random_hi});
    case MaskKind::SpanToken: return span_token_mask(ctx.length, spec.p, spec.span, rng);
  }
  throw ConfigError("unknown masking kind");
}

}  // namespace d2v

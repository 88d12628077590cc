#pragma once

#include <memory>
#include <string>

#include "d2v/distill.hpp"
#include "d2v/encoder.hpp"
#include "d2v/frontends.hpp"
#include "d2v/ops.hpp"
#include "d2v/rng.hpp"

namespace d2v {

/**
 * Student network. The frontend and positional table are shared with the
 * teacher, which only owns a separate copy of the transformer blocks.
 */
template <class Real>
struct Model {
  EncoderConfig encoder_cfg;
  std::unique_ptr<Frontend<Real>> frontend;
  Tensor<Real> positions;       // [max_positions, H]
  Tensor<Real> mask_embedding;  // [H]
  EncoderParams<Real> encoder;
  ProjectionHead<Real> head;

  static Model init(const EncoderConfig& cfg, const FrontendSpec& fe, Rng rng) {
    cfg.validate();
    Model m;
    m.encoder_cfg = cfg;
    m.frontend = make_frontend<Real>(fe, cfg.hidden, rng.split("frontend"));
    Rng r = rng.split("embeddings");
    m.positions = init_weight<Real>({cfg.max_positions, cfg.hidden}, r);
    m.mask_embedding = init_weight<Real>({cfg.hidden}, r);
    m.encoder = EncoderParams<Real>::init(cfg, rng.split("encoder"));
    m.head = ProjectionHead<Real>::init(cfg.hidden, rng.split("head"));
    return m;
  }

  /// Frontend and positional parameters, used by both student and teacher.
  NamedTensors<Real> shared_parameters() const {
    NamedTensors<Real> out;
    for (auto& [name, t] : frontend->parameters()) out.emplace_back("frontend/" + name, t);
    out.emplace_back("positions", positions);
    return out;
  }

  /// Every tensor the optimizer updates, in a fixed order.
  NamedTensors<Real> parameters() const {
    NamedTensors<Real> out = shared_parameters();
    out.emplace_back("mask_embedding", mask_embedding);
    for (auto& [name, t] : encoder.parameters()) out.emplace_back("encoder/" + name, t);
    for (auto& [name, t] : head.parameters()) out.emplace_back("head/" + name, t);
    return out;
  }

  Tensor<Real> position_rows(std::size_t length) const {
    if (length > encoder_cfg.max_positions)
      throw ConfigError("sequence length " + std::to_string(length) + " exceeds max_positions " +
                        std::to_string(encoder_cfg.max_positions));
    return slice(positions, 0, 0, length);
  }
};

/// Mean over time of the student's final block output, computed without a graph.
template <class Real>
Tensor<Real> extract_representation(const Model<Real>& model, const Sample& sample) {
  NoGradScope<Real> off;
  auto embedded = model.frontend->embed(sample);
  auto out = encode(model.encoder, model.encoder_cfg, embedded, model.position_rows(embedded.dim(0)), false);
  return mean(out.final, 0);
}

}  // namespace d2v

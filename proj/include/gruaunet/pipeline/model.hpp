// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "gruaunet/decoder/decoder.hpp"
#include "gruaunet/dfn/dfn.hpp"
#include "gruaunet/head/classifier.hpp"
#include "gruaunet/swin/encoder.hpp"

namespace gruaunet::pipeline {

inline const std::string kDfnPrefix = "dfn.";

struct ModelConfig {
  swin::EncoderConfig encoder;
  std::size_t dfn_filters = 4;
  std::size_t dfn_reduction = 4;
  decoder::DecoderConfig decoder;
  head::HeadConfig head;

  static ModelConfig toy() {
    ModelConfig c;
    c.encoder = swin::EncoderConfig::toy();
    c.decoder.blocks_per_level = 1;
    c.head.widths = {32, 16};
    c.head.hidden = 8;
    return c;
  }

  dfn::DfnConfig dfn() const { return {encoder.dim(encoder.stages() - 1), dfn_filters, dfn_reduction}; }

  void validate() const {
    encoder.validate();
    dfn().validate();
    decoder.validate(encoder);
    head.validate();
  }
};

template <std::floating_point T>
struct ModelOutput {
  Var<T> logit;      ///< [1]
  Var<T> prob;       ///< [1], P(spoof)
  Var<T> embedding;  ///< [E]
};

/// Swin encoder -> DFN on the bottleneck -> GRU-gated decoder -> CBAM-GRU head.
template <std::floating_point T>
ModelOutput<T> model_forward(Graph<T>& g, const ParamSet<T>& params, const Var<T>& image, const ModelConfig& cfg) {
  const std::size_t S = cfg.encoder.image_size;
  if (image.shape() != Shape{3, S, S}) {
    throw ShapeError(detail::concat("model expects a [3,", S, ",", S, "] image, got ", shape_str(image.shape())));
  }
  auto enc = swin::encoder_forward(g, params, image, cfg.encoder);
  Var<T> bottleneck = decoder::to_hwc(dfn::dfn_forward(g, params, kDfnPrefix, decoder::to_chw(enc.bottleneck)));
  auto dec = decoder::decoder_forward(g, params, bottleneck, enc.stages, cfg.encoder, cfg.decoder);
  auto h = head::head_forward(g, params, dec.features, cfg.head);
  return {h.logit, h.prob, h.embedding};
}

template <std::floating_point T>
ParamSet<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet<T> p;
  Rng rng(seed);
  swin::init_encoder(p, cfg.encoder, rng);
  dfn::init_dfn(p, kDfnPrefix, cfg.dfn(), rng);
  decoder::init_decoder(p, cfg.encoder, cfg.decoder, rng);
  head::init_head(p, cfg.encoder.embed_dim, cfg.head, rng);
  return p;
}

}  // namespace gruaunet::pipeline

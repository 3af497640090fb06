#pragma once
// Instance adapter: pre-norm self-attention block -> depthwise positional
// mixing -> pre-norm self-attention block, all residual, N x C -> N x C.
//
// Exact multi-head attention stands in for Nystrom attention and a width-3
// depthwise convolution over the instance sequence (zero padded at both
// ends) stands in for the 2-D positional encoding generator. Every residual
// branch ends in a zero-initialised projection, so a fresh adapter is the
// identity map.

#include <cmath>
#include <optional>
#include <string>

#include "mexd/nn.hpp"

namespace mexd {

enum class PositionalMixing { kEnabled, kDisabled };

template <class S>
struct EncoderBlock {
  nn::LayerNorm<S> norm1;
  nn::Linear<S> query, key, value, out;
  nn::LayerNorm<S> norm2;
  nn::Linear<S> ff1, ff2;
  int heads = 4;

  EncoderBlock() = default;
  EncoderBlock(const std::string& name, int width, int heads_, int ff_width)
      : norm1(name + ".norm1", width),
        query(name + ".query", width, width),
        key(name + ".key", width, width),
        value(name + ".value", width, width),
        out(name + ".out", width, width),
        norm2(name + ".norm2", width),
        ff1(name + ".ff1", width, ff_width),
        ff2(name + ".ff2", ff_width, width),
        heads(heads_) {}

  void init(Rng& rng) {
    query.init_xavier(rng);
    key.init_xavier(rng);
    value.init_xavier(rng);
    out.init_zero();
    ff1.init_xavier(rng);
    ff2.init_zero();
  }

  ag::Var<S> forward(ag::Graph<S>& g, ag::Var<S> x) {
    const Eigen::Index width = x.cols();
    const Eigen::Index head_dim = width / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));

    ag::Var<S> h = norm1(g, x);
    ag::Var<S> q = query(g, h);
    ag::Var<S> k = key(g, h);
    ag::Var<S> v = value(g, h);
    std::vector<ag::Var<S>> per_head;
    per_head.reserve(static_cast<std::size_t>(heads));
    for (int i = 0; i < heads; ++i) {
      const Eigen::Index off = i * head_dim;
      auto qh = ag::slice_cols(q, off, head_dim);
      auto kh = ag::slice_cols(k, off, head_dim);
      auto vh = ag::slice_cols(v, off, head_dim);
      auto attn = ag::softmax_rows(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt));
      per_head.push_back(ag::matmul(attn, vh));
    }
    x = ag::add(x, out(g, ag::concat_cols(per_head)));
    ag::Var<S> f = ff2(g, ag::gelu(ff1(g, norm2(g, x))));
    return ag::add(x, f);
  }

  void collect(nn::ParamList<S>& ps) {
    norm1.collect(ps);
    query.collect(ps);
    key.collect(ps);
    value.collect(ps);
    out.collect(ps);
    norm2.collect(ps);
    ff1.collect(ps);
    ff2.collect(ps);
  }
};

template <class S>
struct AdapterParams {
  int width = 0;
  EncoderBlock<S> block1;
  ag::Parameter<S> mix_weight;  // 3 x C depthwise taps
  ag::Parameter<S> mix_bias;    // 1 x C
  EncoderBlock<S> block2;

  AdapterParams() = default;
  AdapterParams(const std::string& name, int width_, int heads, int ff_width)
      : width(width_),
        block1(name + ".block1", width_, heads, ff_width),
        mix_weight(nn::make_param<S>(name + ".mix.weight", 3, width_)),
        mix_bias(nn::make_param<S>(name + ".mix.bias", 1, width_)),
        block2(name + ".block2", width_, heads, ff_width) {
    if (heads < 1 || width_ % heads != 0) {
      throw ConfigError("adapter: width " + std::to_string(width_) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }

  // Identity-at-initialisation parameters.
  void init(Rng& rng) {
    block1.init(rng);
    block2.init(rng);
    mix_weight.value.setZero();
    mix_bias.value.setZero();
  }

  // Gives every residual branch small random weights (used by tests that
  // need a non-trivial adapter).
  void perturb_residuals(Rng& rng, double scale = 0.3) {
    std::normal_distribution<double> d(0.0, scale);
    auto fill = [&](ag::Parameter<S>& p) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = static_cast<S>(d(rng));
    };
    for (EncoderBlock<S>* b : {&block1, &block2}) {
      fill(b->out.weight);
      fill(b->ff2.weight);
      fill(b->out.bias);
      fill(b->norm1.beta);
    }
    fill(mix_weight);
    fill(mix_bias);
  }

  nn::ParamList<S> parameters() {
    nn::ParamList<S> ps;
    block1.collect(ps);
    ps.push_back(&mix_weight);
    ps.push_back(&mix_bias);
    block2.collect(ps);
    return ps;
  }
};

// Ada(.) on a recorded N x C input.
template <class S>
ag::Var<S> adapt(ag::Graph<S>& g, AdapterParams<S>& params, ag::Var<S> x,
                 PositionalMixing mixing = PositionalMixing::kEnabled) {
  if (x.cols() != params.width) {
    throw ShapeError("adapt: input width " + std::to_string(x.cols()) + " != adapter width " +
                     std::to_string(params.width));
  }
  if (x.rows() < 1) throw ShapeError("adapt: empty instance set");
  ag::Var<S> h = params.block1.forward(g, x);
  if (mixing == PositionalMixing::kEnabled) {
    h = ag::add(h, ag::depthwise_conv3(h, g.param(params.mix_weight), g.param(params.mix_bias)));
  }
  return params.block2.forward(g, h);
}

// Evaluation-mode convenience: runs adapt on a plain matrix.
template <class S>
ag::Matrix<S> adapt(AdapterParams<S>& params, const ag::Matrix<S>& instances,
                    PositionalMixing mixing = PositionalMixing::kEnabled) {
  ag::Graph<S> g;
  return adapt(g, params, g.constant(instances), mixing).value();
}

// Prepends the class embedding as row 0, runs adapt, returns row 0 (1 x C).
// An absent or empty sparse set adapts the class embedding alone.
template <class S>
ag::Var<S> adapt_with_class_token(ag::Graph<S>& g, AdapterParams<S>& params,
                                  std::optional<ag::Var<S>> sparse, ag::Var<S> class_embedding,
                                  PositionalMixing mixing = PositionalMixing::kEnabled) {
  if (class_embedding.rows() != 1 || class_embedding.cols() != params.width) {
    throw ShapeError("adapt_with_class_token: class embedding must be 1 x C");
  }
  ag::Var<S> tokens = class_embedding;
  if (sparse && sparse->rows() > 0) tokens = ag::concat_rows<S>({class_embedding, *sparse});
  ag::Var<S> out = adapt(g, params, tokens, mixing);
  return ag::gather_rows(out, {0});
}

}  // namespace mexd

#pragma once

// Transformer decoder over the joint [text; visual] sequence. In enhanced
// mode every layer mixes its queries and keys with a projection of the mean
// of the previous layers' outputs, gated per row by a learned sigmoid.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "evcmf/ops.hpp"
#include "evcmf/param_store.hpp"

namespace evcmf {

struct DecoderConfig {
  std::size_t hidden = 64;  // d
  std::size_t heads = 4;
  std::size_t layers = 4;  // Z
  std::size_t ffn_hidden = 256;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 50;
  bool enhanced = true;
};

/// Token ids with one pad flag per position.
struct TextBatch {
  std::vector<int> ids;
  std::vector<bool> pad;

  static TextBatch unpadded(std::vector<int> ids) {
    TextBatch b{std::move(ids), {}};
    b.pad.assign(b.ids.size(), false);
    return b;
  }
  std::size_t size() const { return ids.size(); }
};

template <typename T>
void init_decoder_params(ParamStore<T>& params, const DecoderConfig& cfg, std::size_t visual_channels,
                         std::mt19937_64& rng) {
  if (cfg.hidden == 0 || cfg.heads == 0 || cfg.hidden % cfg.heads != 0) {
    throw ConfigError("decoder: hidden size " + std::to_string(cfg.hidden) + " not divisible by " +
                      std::to_string(cfg.heads) + " heads");
  }
  if (cfg.vocab_size == 0) throw ConfigError("decoder: vocabulary size must be positive");
  const std::size_t d = cfg.hidden;
  params.add_uniform("decoder.word_embedding", {cfg.vocab_size, d}, d, rng);
  params.add_uniform("decoder.position_embedding", {cfg.max_positions, d}, d, rng);
  params.add_uniform("decoder.visual.weight", {visual_channels, d}, visual_channels, rng);
  params.add_constant("decoder.visual.bias", {d}, T{0});
  for (std::size_t z = 1; z <= cfg.layers; ++z) {
    const std::string p = "decoder.layer" + std::to_string(z) + ".";
    params.add_constant(p + "ln1.gain", {d}, T{1});
    params.add_constant(p + "ln1.bias", {d}, T{0});
    for (const char* m : {"q", "k", "v", "out"}) {
      params.add_uniform(p + "attn." + m + ".weight", {d, d}, d, rng);
      params.add_constant(p + "attn." + m + ".bias", {d}, T{0});
    }
    params.add_uniform(p + "gate.w_q", {d, 1}, d, rng);
    params.add_uniform(p + "gate.w_oq", {d, 1}, d, rng);
    params.add_uniform(p + "gate.w_k", {d, 1}, d, rng);
    params.add_uniform(p + "gate.w_ok", {d, 1}, d, rng);
    params.add_uniform(p + "shallow.W_oq", {d, d}, d, rng);
    params.add_uniform(p + "shallow.W_ok", {d, d}, d, rng);
    params.add_constant(p + "ln2.gain", {d}, T{1});
    params.add_constant(p + "ln2.bias", {d}, T{0});
    params.add_uniform(p + "ffn.fc1.weight", {d, cfg.ffn_hidden}, d, rng);
    params.add_constant(p + "ffn.fc1.bias", {cfg.ffn_hidden}, T{0});
    params.add_uniform(p + "ffn.fc2.weight", {cfg.ffn_hidden, d}, cfg.ffn_hidden, rng);
    params.add_constant(p + "ffn.fc2.bias", {d}, T{0});
  }
  params.add_constant("decoder.final_ln.gain", {d}, T{1});
  params.add_constant("decoder.final_ln.bias", {d}, T{0});
}

inline std::string layer_prefix(std::size_t z) { return "decoder.layer" + std::to_string(z) + "."; }

/// Word embedding plus learned position embedding.
template <typename T>
Tensor<T> embed_text(const TextBatch& batch, const ParamStore<T>& params) {
  const auto& positions = params["decoder.position_embedding"];
  if (batch.ids.empty()) throw InputError("embed_text: empty token sequence");
  if (batch.size() > positions.dim(0)) {
    throw InputError("embed_text: sequence of " + std::to_string(batch.size()) + " tokens exceeds " +
                     std::to_string(positions.dim(0)) + " positions");
  }
  std::vector<int> pos(batch.size());
  for (std::size_t n = 0; n < pos.size(); ++n) pos[n] = static_cast<int>(n);
  return add(embedding(params["decoder.word_embedding"], batch.ids), embedding(positions, pos));
}

/// Flattens [t, h, w, C] cells into tokens and projects them to width d.
/// No positional embedding is added.
template <typename T>
Tensor<T> tokenize_visual(const Tensor<T>& final_rep, const ParamStore<T>& params) {
  const auto& w = params["decoder.visual.weight"];
  if (final_rep.rank() != 4 || final_rep.dim(3) != w.dim(0)) {
    throw ShapeError("tokenize_visual: representation " + shape_str(final_rep.shape()) +
                     " does not match projection " + shape_str(w.shape()));
  }
  const std::size_t tokens = final_rep.size() / final_rep.dim(3);
  return linear(reshape(final_rep, {tokens, final_rep.dim(3)}), w, {params["decoder.visual.bias"]});
}

/// L x L allowed/blocked pattern over the joint sequence (text first).
struct AttentionMaskMatrix {
  std::size_t text = 0;
  std::size_t visual = 0;
  std::vector<bool> allowed;

  std::size_t length() const { return text + visual; }
  bool allows(std::size_t row, std::size_t col) const { return allowed[row * length() + col]; }

  template <typename T>
  Tensor<T> additive() const {
    std::vector<T> v(allowed.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = allowed[i] ? T{0} : blocked_logit<T>();
    return Tensor<T>::from_data({length(), length()}, std::move(v));
  }
};

/// Text rows see earlier-or-equal text and all visual columns; visual rows
/// see visual columns only; pad columns are blocked; the diagonal is open.
inline AttentionMaskMatrix build_attention_mask(std::size_t text, std::size_t visual, const std::vector<bool>& pad) {
  if (text == 0 || visual == 0) throw ShapeError("build_attention_mask: text and visual lengths must be positive");
  if (!pad.empty() && pad.size() != text) throw ShapeError("build_attention_mask: pad flags do not match text length");
  AttentionMaskMatrix m{text, visual, {}};
  const std::size_t L = text + visual;
  m.allowed.assign(L * L, false);
  auto is_pad = [&](std::size_t col) { return col < text && !pad.empty() && pad[col]; };
  for (std::size_t r = 0; r < L; ++r) {
    for (std::size_t c = 0; c < L; ++c) {
      bool ok = r < text ? (c >= text || c <= r) : c >= text;
      if (is_pad(c)) ok = false;
      if (r == c) ok = true;
      m.allowed[r * L + c] = ok;
    }
  }
  return m;
}

/// Outputs of earlier layers; the context for layer 1 is the stack input.
template <typename T>
class LayerTrace {
 public:
  explicit LayerTrace(Tensor<T> input) : input_(std::move(input)) {}

  void push(Tensor<T> output) { outputs_.push_back(std::move(output)); }
  const std::vector<Tensor<T>>& outputs() const { return outputs_; }
  const Tensor<T>& input() const { return input_; }

 private:
  Tensor<T> input_;
  std::vector<Tensor<T>> outputs_;
};

/// Mean of O_1..O_{z-1}, or the layer input I when z = 1.
template <typename T>
Tensor<T> shallow_context(const LayerTrace<T>& trace, std::size_t z, const Tensor<T>& input) {
  if (z < 1) throw ConfigError("shallow_context: layers are numbered from 1");
  if (z == 1) return input;
  if (trace.outputs().size() < z - 1) {
    throw ContractError("shallow_context: trace holds " + std::to_string(trace.outputs().size()) +
                        " outputs, layer " + std::to_string(z) + " needs " + std::to_string(z - 1));
  }
  std::vector<Tensor<T>> prior(trace.outputs().begin(), trace.outputs().begin() + (z - 1));
  return mean_of(prior);
}

template <typename T>
struct EnhancedQK {
  Tensor<T> q;
  Tensor<T> k;
  Tensor<T> gate_q;  // [L, 1]
  Tensor<T> gate_k;  // [L, 1]
};

/// Q^ = (1 - l_q) Q + l_q (O W_oq), l_q = sigmoid(Q w_q + O w_oq); same for K.
template <typename T>
EnhancedQK<T> enhanced_qk(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& context,
                          const ParamStore<T>& params, const std::string& prefix) {
  auto gate_q = sigmoid(add(linear(q, params[prefix + "gate.w_q"]), linear(context, params[prefix + "gate.w_oq"])));
  auto gate_k = sigmoid(add(linear(k, params[prefix + "gate.w_k"]), linear(context, params[prefix + "gate.w_ok"])));
  auto shallow_q = linear(context, params[prefix + "shallow.W_oq"]);
  auto shallow_k = linear(context, params[prefix + "shallow.W_ok"]);
  auto q_hat = add(q, row_scale(sub(shallow_q, q), gate_q));
  auto k_hat = add(k, row_scale(sub(shallow_k, k), gate_k));
  return {q_hat, k_hat, gate_q, gate_k};
}

/// Multi-head scaled dot-product attention with an additive mask.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const Tensor<T>& mask,
                               std::size_t heads) {
  const std::size_t d = q.dim(1);
  const std::size_t dh = d / heads;
  const T scale_factor = T{1} / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = slice_last(q, h * dh, dh);
    auto kh = slice_last(k, h * dh, dh);
    auto vh = slice_last(v, h * dh, dh);
    auto probs = softmax_rows(add(scale(matmul_nt(qh, kh), scale_factor), mask));
    outs.push_back(matmul(probs, vh));
  }
  return heads == 1 ? outs.front() : concat_last(outs);
}

/// One pre-normalised layer. A null context runs the plain layer; otherwise
/// queries and keys are replaced by their gated shallow-context mixtures.
template <typename T>
Tensor<T> transformer_layer(const Tensor<T>& input, const Tensor<T>* context, const ParamStore<T>& params,
                            std::size_t z, const Tensor<T>& mask, const DecoderConfig& cfg) {
  const std::string p = layer_prefix(z);
  auto h = layer_norm(input, params[p + "ln1.gain"], params[p + "ln1.bias"]);
  auto q = linear(h, params[p + "attn.q.weight"], {params[p + "attn.q.bias"]});
  auto k = linear(h, params[p + "attn.k.weight"], {params[p + "attn.k.bias"]});
  auto v = linear(h, params[p + "attn.v.weight"], {params[p + "attn.v.bias"]});
  if (context != nullptr) {
    auto mixed = enhanced_qk(q, k, *context, params, p);
    q = mixed.q;
    k = mixed.k;
  }
  auto attn = multi_head_attention(q, k, v, mask, cfg.heads);
  auto x1 = add(input, linear(attn, params[p + "attn.out.weight"], {params[p + "attn.out.bias"]}));
  auto h2 = layer_norm(x1, params[p + "ln2.gain"], params[p + "ln2.bias"]);
  auto ffn = linear(gelu(linear(h2, params[p + "ffn.fc1.weight"], {params[p + "ffn.fc1.bias"]})),
                    params[p + "ffn.fc2.weight"], {params[p + "ffn.fc2.bias"]});
  auto out = add(x1, ffn);
  require_finite(out, "decoder layer " + std::to_string(z));
  return out;
}

template <typename T>
Tensor<T> vanilla_layer(const Tensor<T>& input, const ParamStore<T>& params, std::size_t z, const Tensor<T>& mask,
                        const DecoderConfig& cfg) {
  return transformer_layer<T>(input, nullptr, params, z, mask, cfg);
}

/// Enhanced layer; falls back to the vanilla layer when enhancement is off.
template <typename T>
Tensor<T> enhanced_layer(const Tensor<T>& input, const Tensor<T>& context, const ParamStore<T>& params,
                         std::size_t z, const Tensor<T>& mask, const DecoderConfig& cfg) {
  return transformer_layer<T>(input, cfg.enhanced ? &context : nullptr, params, z, mask, cfg);
}

/// Per-layer record of a decoder pass, for inspection.
template <typename T>
struct DecodeTrace {
  std::vector<Tensor<T>> contexts;  // context used by layer z (index z-1)
  std::vector<Tensor<T>> outputs;   // O_z
};

/// Runs Z layers over the joint sequence, threading the layer trace.
template <typename T>
Tensor<T> decoder_stack(const Tensor<T>& joint, const Tensor<T>& mask, const ParamStore<T>& params,
                        const DecoderConfig& cfg, DecodeTrace<T>* record = nullptr) {
  LayerTrace<T> trace(joint);
  Tensor<T> x = joint;
  for (std::size_t z = 1; z <= cfg.layers; ++z) {
    auto context = shallow_context(trace, z, joint);
    x = enhanced_layer(x, context, params, z, mask, cfg);
    trace.push(x);
    if (record) {
      record->contexts.push_back(context);
      record->outputs.push_back(x);
    }
  }
  return x;
}

/// Vocabulary logits for every text position, given projected visual tokens.
template <typename T>
Tensor<T> decode_logits_from_tokens(const TextBatch& text, const Tensor<T>& visual_tokens,
                                    const ParamStore<T>& params, const DecoderConfig& cfg,
                                    DecodeTrace<T>* record = nullptr) {
  auto text_tokens = embed_text(text, params);
  auto joint = concat_rows<T>({text_tokens, visual_tokens});
  auto mask = build_attention_mask(text.size(), visual_tokens.dim(0), text.pad).template additive<T>();
  auto out = decoder_stack(joint, mask, params, cfg, record);
  auto rows = slice_rows(out, 0, text.size());
  auto normed = layer_norm(rows, params["decoder.final_ln.gain"], params["decoder.final_ln.bias"]);
  return matmul_nt(normed, params["decoder.word_embedding"]);
}

template <typename T>
Tensor<T> decode_logits(const TextBatch& text, const Tensor<T>& final_rep, const ParamStore<T>& params,
                        const DecoderConfig& cfg, DecodeTrace<T>* record = nullptr) {
  return decode_logits_from_tokens(text, tokenize_visual(final_rep, params), params, cfg, record);
}

}  // namespace evcmf

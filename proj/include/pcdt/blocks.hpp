#pragma once

// Transformer building blocks: sinusoidal position table, one multi-head
// self-attention sublayer, and the pre-norm residual block stack used by the
// trajectory encoder/decoder (bidirectional) and the policy (causal).

#include <cstdint>
#include <string>
#include <vector>

#include "pcdt/adam.hpp"
#include "pcdt/ops.hpp"
#include "pcdt/rng.hpp"
#include "pcdt/tensor.hpp"

namespace pcdt {

enum class AttentionMode { causal, bidirectional };

enum class Modality : std::uint8_t { state, action, latent, goal, dummy, mask, pad };

struct BlockConfig {
  int hidden_size = 64;
  int num_heads = 4;
  int num_layers = 2;
  double p_drop = 0.0;
  AttentionMode attention_mode = AttentionMode::bidirectional;
  int max_sequence_length = 256;

  void validate() const {
    if (hidden_size <= 0 || num_heads <= 0 || num_layers < 0 ||
        max_sequence_length <= 0)
      throw ConfigError("BlockConfig: sizes must be positive");
    if (hidden_size % num_heads != 0)
      throw ConfigError("BlockConfig: heads must divide hidden size");
    if (p_drop < 0.0 || p_drop >= 1.0)
      throw ConfigError("BlockConfig: p_drop must be in [0,1)");
  }
};

// A batch of token sequences plus per-token metadata. positions index the
// sinusoidal table (-1 = no positional encoding); key_valid marks real tokens
// (padding and dropped tokens are 0 and receive exactly zero attention from
// valid queries).
struct TokenSequence {
  Tensor tokens;  // [B, T, D]
  std::vector<int> positions;
  std::vector<Modality> tags;
  std::vector<std::uint8_t> key_valid;
  int batch = 0;
  int length = 0;

  void check_consistent() const {
    const std::size_t n = static_cast<std::size_t>(batch) * length;
    if (tokens.ndim() != 3 || tokens.dim(0) != batch || tokens.dim(1) != length)
      throw DimensionError("TokenSequence: tokens/batch/length mismatch");
    if (positions.size() != n || tags.size() != n || key_valid.size() != n)
      throw DimensionError("TokenSequence: metadata size mismatch");
  }
};

// pe[p, 2i] = sin(p / 10000^(2i/d)), pe[p, 2i+1] = cos(p / 10000^(2i/d))
inline Tensor sinusoidal_positions(int max_len, int d) {
  if (max_len <= 0) throw DimensionError("sinusoidal_positions: max_len <= 0");
  if (d <= 0 || d % 2 != 0)
    throw DimensionError("sinusoidal_positions: dimension must be even");
  std::vector<double> table(static_cast<std::size_t>(max_len) * d);
  for (int p = 0; p < max_len; ++p) {
    double* row = table.data() + static_cast<std::size_t>(p) * d;
    for (int i = 0; i < d / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / d);
      row[2 * i] = std::sin(p * freq);
      row[2 * i + 1] = std::cos(p * freq);
    }
  }
  return Tensor::from_data({max_len, d}, std::move(table));
}

struct AttentionLayerParams {
  Tensor wqkv, bqkv, wo, bo;
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  AttentionLayerParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
};

struct StackParams {
  std::vector<BlockParams> blocks;
};

// Registers one stack's parameters under `prefix.` in insertion order.
// Weights N(0, 0.02), biases zero, layer-norm affine identity.
inline StackParams make_stack_params(NamedParams& params,
                                     const std::string& prefix,
                                     const BlockConfig& cfg, Rng& rng) {
  cfg.validate();
  const int d = cfg.hidden_size;
  const int ff = 4 * d;
  StackParams stack;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string base = prefix + ".layer" + std::to_string(l);
    BlockParams b;
    b.ln1_gain = params.add(base + ".ln1.gain", Tensor::filled({d}, 1.0));
    b.ln1_bias = params.add(base + ".ln1.bias", Tensor::zeros({d}));
    b.attn.wqkv =
        params.add(base + ".attn.wqkv", Tensor::randn({d, 3 * d}, rng, 0.02));
    b.attn.bqkv = params.add(base + ".attn.bqkv", Tensor::zeros({3 * d}));
    b.attn.wo = params.add(base + ".attn.wo", Tensor::randn({d, d}, rng, 0.02));
    b.attn.bo = params.add(base + ".attn.bo", Tensor::zeros({d}));
    b.ln2_gain = params.add(base + ".ln2.gain", Tensor::filled({d}, 1.0));
    b.ln2_bias = params.add(base + ".ln2.bias", Tensor::zeros({d}));
    b.ff1_w = params.add(base + ".ff1.w", Tensor::randn({d, ff}, rng, 0.02));
    b.ff1_b = params.add(base + ".ff1.b", Tensor::zeros({ff}));
    b.ff2_w = params.add(base + ".ff2.w", Tensor::randn({ff, d}, rng, 0.02));
    b.ff2_b = params.add(base + ".ff2.b", Tensor::zeros({d}));
    stack.blocks.push_back(std::move(b));
  }
  return stack;
}

// One multi-head self-attention sublayer (projections + masked softmax mix +
// output projection). Dropout on the attention weights in train mode.
inline TokenSequence attention(const TokenSequence& seq,
                               const AttentionLayerParams& p,
                               const BlockConfig& cfg, bool train_mode,
                               std::uint64_t seed,
                               AttentionProbe* probe = nullptr) {
  seq.check_consistent();
  if (seq.length > cfg.max_sequence_length)
    throw DimensionError("attention: sequence length " +
                         std::to_string(seq.length) + " exceeds limit " +
                         std::to_string(cfg.max_sequence_length));
  const int d = cfg.hidden_size;
  Tensor qkv = linear(seq.tokens, p.wqkv, p.bqkv);
  Tensor q = slice_lastdim(qkv, 0, d);
  Tensor k = slice_lastdim(qkv, d, d);
  Tensor v = slice_lastdim(qkv, 2 * d, d);
  Tensor mixed = attention_mix(
      q, k, v, cfg.num_heads, cfg.attention_mode == AttentionMode::causal,
      seq.key_valid, cfg.p_drop, train_mode, derive_seed(seed, "attn_w"),
      probe);
  TokenSequence out = seq;
  out.tokens = linear(mixed, p.wo, p.bo);
  return out;
}

// N pre-norm residual blocks (attention + GELU feed-forward of width 4D).
// N = 0 is the identity. No final layer norm here; networks own theirs.
inline TokenSequence block_stack_forward(const TokenSequence& seq,
                                         const StackParams& stack,
                                         const BlockConfig& cfg,
                                         bool train_mode, std::uint64_t seed) {
  seq.check_consistent();
  if (static_cast<int>(stack.blocks.size()) != cfg.num_layers)
    throw ConfigError("block_stack_forward: layer count mismatch");
  TokenSequence cur = seq;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const BlockParams& b = stack.blocks[static_cast<std::size_t>(l)];
    const std::uint64_t lseed = derive_seed(seed, "layer", static_cast<std::uint64_t>(l));
    TokenSequence normed = cur;
    normed.tokens = layer_norm(cur.tokens, b.ln1_gain, b.ln1_bias);
    TokenSequence attn_out =
        attention(normed, b.attn, cfg, train_mode, derive_seed(lseed, "attn"));
    cur.tokens = add(cur.tokens, dropout(attn_out.tokens, cfg.p_drop,
                                         train_mode,
                                         derive_seed(lseed, "resid_attn")));
    Tensor ff_in = layer_norm(cur.tokens, b.ln2_gain, b.ln2_bias);
    Tensor ff = linear(gelu(linear(ff_in, b.ff1_w, b.ff1_b)), b.ff2_w, b.ff2_b);
    cur.tokens = add(cur.tokens, dropout(ff, cfg.p_drop, train_mode,
                                         derive_seed(lseed, "resid_ff")));
  }
  return cur;
}

}  // namespace pcdt

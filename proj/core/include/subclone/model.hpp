#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "subclone/tensor.hpp"

namespace subclone {

class Rng;

// Decoder-only pre-norm transformer: x <- x + Attn(LN1(x)); x <- x + MLP(LN2(x));
// logits = LN_f(x) * unembedding. Learned absolute position embeddings,
// untied embedding/unembedding, GELU (tanh form) in the MLP.
struct ModelConfig {
  int n_layers = 1;
  int d_model = 8;
  int n_heads = 1;
  int d_ffn = 32;
  int vocab_size = 2;
  int context_len = 16;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;  // throws ConfigError on violated invariants
  bool operator==(const ModelConfig&) const = default;
};

// W_qkv is [d x 3d] with head-blocked columns: column h*(3*hd) + part*hd + u
// holds head h, part 0/1/2 = q/k/v, neuron u. W_out rows are head-blocked
// context neurons (h*hd + u). Permuting heads is therefore a contiguous
// block permutation on both.
struct BlockWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor w_qkv, b_qkv;  // [d x 3d], [3d]
  Tensor w_out, b_out;  // [d x d], [d]
  Tensor ln2_gain, ln2_bias;
  Tensor w_fc1, b_fc1;  // [d x d_ffn], [d_ffn]
  Tensor w_fc2, b_fc2;  // [d_ffn x d], [d]
};

struct ModelWeights {
  Tensor tok_emb;  // [V x d]
  Tensor pos_emb;  // [T_max x d]
  std::vector<BlockWeights> blocks;
  Tensor final_ln_gain, final_ln_bias;  // [d]
  Tensor unembed;                       // [d x V]

  static ModelWeights zeros(const ModelConfig& cfg);
};

// Stable parameter naming scheme used by checkpoints, the optimizer and the
// gradient checker:
//   tok_emb, pos_emb,
//   block<i>.ln1.gain, block<i>.ln1.bias, block<i>.attn.w_qkv,
//   block<i>.attn.b_qkv, block<i>.attn.w_out, block<i>.attn.b_out,
//   block<i>.ln2.gain, block<i>.ln2.bias, block<i>.mlp.w_fc1,
//   block<i>.mlp.b_fc1, block<i>.mlp.w_fc2, block<i>.mlp.b_fc2,
//   final_ln.gain, final_ln.bias, unembed
struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool decay;  // weight decay applies (matrices yes, vectors/norms no)
};
struct ConstParamRef {
  std::string name;
  const Tensor* tensor;
  bool decay;
};
std::vector<ParamRef> named_params(ModelWeights& w);
std::vector<ConstParamRef> named_params(const ModelWeights& w);

// Token ids, row-major [B x T].
struct TokenBatch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int32_t> ids;

  int32_t at(int64_t b, int64_t t) const {
    return ids[static_cast<size_t>(b * seq_len + t)];
  }
};

// Intermediate activations captured by a traced forward pass.
struct ActivationTrace {
  // length n_blocks+1: after embedding, then after each block
  std::vector<Tensor> residual_snapshots;  // each [B x T x d]
  std::vector<Tensor> attn_branch;         // per block [B x T x d]
  std::vector<Tensor> mlp_branch;          // per block [B x T x d]
  std::vector<Tensor> head_outputs;        // per block [B x T x H x hd]
  std::vector<Tensor> mlp_hidden;          // per block [B x T x d_ffn]
};

// Order of parent blocks to run; supports layer removal/duplication without
// materializing new weights. nullptr means [0 .. n_layers).
using BlockSequence = std::vector<int>;

// Forward pass. Returns logits [B x T x V]; fills trace when non-null.
Tensor forward(const ModelWeights& w, const ModelConfig& cfg,
               const TokenBatch& tokens, ActivationTrace* trace = nullptr,
               const BlockSequence* block_sequence = nullptr);

// Mean next-token cross-entropy over all positions, accumulated in double.
double evaluate_loss(const ModelWeights& w, const ModelConfig& cfg,
                     const TokenBatch& tokens, const TokenBatch& targets,
                     const BlockSequence* block_sequence = nullptr);

// Loss plus gradients for every parameter; grads must be zeros(cfg)-shaped
// (it is overwritten).
double loss_and_grads(const ModelWeights& w, const ModelConfig& cfg,
                      const TokenBatch& tokens, const TokenBatch& targets,
                      ModelWeights& grads);

// Gaussian(0, 0.02) matrices, zero biases, unit norm gains; residual-branch
// output projections (w_out, w_fc2) scaled by 1/sqrt(2 N). Seed-deterministic.
ModelWeights init_random(const ModelConfig& cfg, uint64_t seed);

namespace detail {
float gelu(float x);
float gelu_grad(float x);
}  // namespace detail

}  // namespace subclone

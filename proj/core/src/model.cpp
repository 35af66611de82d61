#include "subclone/model.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

#include "subclone/error.hpp"
#include "subclone/rng.hpp"

namespace subclone {

void ModelConfig::validate() const {
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (n_heads < 1) throw ConfigError("n_heads must be >= 1");
  if (d_model < 1 || d_model % n_heads != 0) {
    throw ConfigError("d_model must be a positive multiple of n_heads");
  }
  if (d_ffn < 1) throw ConfigError("d_ffn must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be >= 1");
  if (context_len < 1) throw ConfigError("context_len must be >= 1");
}

ModelWeights ModelWeights::zeros(const ModelConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.d_model, dff = cfg.d_ffn, v = cfg.vocab_size;
  ModelWeights w;
  w.tok_emb = Tensor::zeros({v, d});
  w.pos_emb = Tensor::zeros({cfg.context_len, d});
  w.blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& b : w.blocks) {
    b.ln1_gain = Tensor::zeros({d});
    b.ln1_bias = Tensor::zeros({d});
    b.w_qkv = Tensor::zeros({d, 3 * d});
    b.b_qkv = Tensor::zeros({3 * d});
    b.w_out = Tensor::zeros({d, d});
    b.b_out = Tensor::zeros({d});
    b.ln2_gain = Tensor::zeros({d});
    b.ln2_bias = Tensor::zeros({d});
    b.w_fc1 = Tensor::zeros({d, dff});
    b.b_fc1 = Tensor::zeros({dff});
    b.w_fc2 = Tensor::zeros({dff, d});
    b.b_fc2 = Tensor::zeros({d});
  }
  w.final_ln_gain = Tensor::zeros({d});
  w.final_ln_bias = Tensor::zeros({d});
  w.unembed = Tensor::zeros({d, v});
  return w;
}

namespace {

template <typename W, typename Ref>
std::vector<Ref> collect_params(W& w) {
  std::vector<Ref> out;
  out.push_back({"tok_emb", &w.tok_emb, true});
  out.push_back({"pos_emb", &w.pos_emb, true});
  for (size_t i = 0; i < w.blocks.size(); ++i) {
    auto& b = w.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "ln1.gain", &b.ln1_gain, false});
    out.push_back({p + "ln1.bias", &b.ln1_bias, false});
    out.push_back({p + "attn.w_qkv", &b.w_qkv, true});
    out.push_back({p + "attn.b_qkv", &b.b_qkv, false});
    out.push_back({p + "attn.w_out", &b.w_out, true});
    out.push_back({p + "attn.b_out", &b.b_out, false});
    out.push_back({p + "ln2.gain", &b.ln2_gain, false});
    out.push_back({p + "ln2.bias", &b.ln2_bias, false});
    out.push_back({p + "mlp.w_fc1", &b.w_fc1, true});
    out.push_back({p + "mlp.b_fc1", &b.b_fc1, false});
    out.push_back({p + "mlp.w_fc2", &b.w_fc2, true});
    out.push_back({p + "mlp.b_fc2", &b.b_fc2, false});
  }
  out.push_back({"final_ln.gain", &w.final_ln_gain, false});
  out.push_back({"final_ln.bias", &w.final_ln_bias, false});
  out.push_back({"unembed", &w.unembed, true});
  return out;
}

}  // namespace

std::vector<ParamRef> named_params(ModelWeights& w) {
  return collect_params<ModelWeights, ParamRef>(w);
}
std::vector<ConstParamRef> named_params(const ModelWeights& w) {
  return collect_params<const ModelWeights, ConstParamRef>(w);
}

namespace detail {

float gelu(float x) {
  // tanh form, GPT-2 convention
  const float c = 0.7978845608028654f;  // sqrt(2/pi)
  const float u = c * (x + 0.044715f * x * x * x);
  return 0.5f * x * (1.0f + std::tanh(u));
}

float gelu_grad(float x) {
  const float c = 0.7978845608028654f;
  const float a = 0.044715f;
  const float u = c * (x + a * x * x * x);
  const float th = std::tanh(u);
  const float sech2 = 1.0f - th * th;
  return 0.5f * (1.0f + th) + 0.5f * x * sech2 * c * (1.0f + 3.0f * a * x * x);
}

}  // namespace detail

namespace {

using detail::matmul_acc_f32;
using detail::matmul_f32;
using detail::transpose_f32;

struct LnStats {
  std::vector<float> mean, rstd;  // per row
};

constexpr float kLnEps = 1e-5f;

void ln_forward(const float* x, const float* gain, const float* bias, float* y,
                LnStats* st, int64_t rows, int64_t d) {
  if (st) {
    st->mean.resize(static_cast<size_t>(rows));
    st->rstd.resize(static_cast<size_t>(rows));
  }
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * d;
    float* yr = y + r * d;
    float mean = 0.0f;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int64_t j = 0; j < d; ++j) {
      const float c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float rstd = 1.0f / std::sqrt(var + kLnEps);
    for (int64_t j = 0; j < d; ++j) {
      yr[j] = (xr[j] - mean) * rstd * gain[j] + bias[j];
    }
    if (st) {
      st->mean[static_cast<size_t>(r)] = mean;
      st->rstd[static_cast<size_t>(r)] = rstd;
    }
  }
}

// dx += backward through layer norm; dgain/dbias accumulated sequentially.
void ln_backward(const float* x, const float* gain, const LnStats& st,
                 const float* dy, float* dx, float* dgain, float* dbias,
                 int64_t rows, int64_t d) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * d;
    const float* dyr = dy + r * d;
    float* dxr = dx + r * d;
    const float mean = st.mean[static_cast<size_t>(r)];
    const float rstd = st.rstd[static_cast<size_t>(r)];
    float sum_dxhat = 0.0f, sum_dxhat_xhat = 0.0f;
    for (int64_t j = 0; j < d; ++j) {
      const float xhat = (xr[j] - mean) * rstd;
      const float dxhat = dyr[j] * gain[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
    }
    const float inv_d = 1.0f / static_cast<float>(d);
    for (int64_t j = 0; j < d; ++j) {
      const float xhat = (xr[j] - mean) * rstd;
      const float dxhat = dyr[j] * gain[j];
      dxr[j] += rstd * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
    }
  }
  // parameter grads: fixed row order
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = x + r * d;
    const float* dyr = dy + r * d;
    const float mean = st.mean[static_cast<size_t>(r)];
    const float rstd = st.rstd[static_cast<size_t>(r)];
    for (int64_t j = 0; j < d; ++j) {
      const float xhat = (xr[j] - mean) * rstd;
      dgain[j] += dyr[j] * xhat;
      dbias[j] += dyr[j];
    }
  }
}

void add_bias_rows(float* y, const float* bias, int64_t rows, int64_t n) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    float* yr = y + r * n;
    for (int64_t j = 0; j < n; ++j) yr[j] += bias[j];
  }
}

void bias_grad(const float* dy, float* db, int64_t rows, int64_t n) {
  for (int64_t r = 0; r < rows; ++r) {
    const float* dyr = dy + r * n;
    for (int64_t j = 0; j < n; ++j) db[j] += dyr[j];
  }
}

// dW[k x n] += x^T[k x M] * dy[M x n]; dx[M x k] += dy * W^T.
void linear_backward(const float* x, const float* w, const float* dy,
                     float* dw, float* dx, int64_t rows, int64_t k, int64_t n) {
  std::vector<float> xt(static_cast<size_t>(rows * k));
  transpose_f32(x, xt.data(), rows, k);
  matmul_acc_f32(xt.data(), dy, dw, k, rows, n);
  if (dx) {
    std::vector<float> wt(static_cast<size_t>(k * n));
    transpose_f32(w, wt.data(), k, n);
    matmul_acc_f32(dy, wt.data(), dx, rows, n, k);
  }
}

struct BlockSaved {
  std::vector<float> x_in, ln1_out, qkv, probs, ctx, x_mid, ln2_out, h1, act;
  LnStats ln1_st, ln2_st;
};

struct ForwardSaved {
  std::vector<float> x0;  // embeddings out [M x d]
  std::vector<BlockSaved> blocks;
  std::vector<float> x_final, lnf_out;  // [M x d]
  LnStats lnf_st;
};

// Causal attention for all (b, h): probs kept lower-triangular, rows above
// the diagonal stay zero. ctx is head-blocked [M x d].
void attention_forward(const float* qkv, float* probs, float* ctx, int64_t B,
                       int64_t T, int64_t H, int64_t hd) {
  const int64_t d3 = 3 * H * hd;
  const int64_t d = H * hd;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t h = 0; h < H; ++h) {
      const int64_t qoff = h * 3 * hd;
      float* p = probs + (b * H + h) * T * T;
      for (int64_t i = 0; i < T; ++i) {
        const float* qi = qkv + (b * T + i) * d3 + qoff;
        float* pi = p + i * T;
        float mx = -1e30f;
        for (int64_t j = 0; j <= i; ++j) {
          const float* kj = qkv + (b * T + j) * d3 + qoff + hd;
          float s = 0.0f;
          for (int64_t u = 0; u < hd; ++u) s += qi[u] * kj[u];
          s *= scale;
          pi[j] = s;
          mx = s > mx ? s : mx;
        }
        float sum = 0.0f;
        for (int64_t j = 0; j <= i; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          sum += pi[j];
        }
        const float inv = 1.0f / sum;
        for (int64_t j = 0; j <= i; ++j) pi[j] *= inv;
        for (int64_t j = i + 1; j < T; ++j) pi[j] = 0.0f;

        float* ci = ctx + (b * T + i) * d + h * hd;
        for (int64_t u = 0; u < hd; ++u) ci[u] = 0.0f;
        for (int64_t j = 0; j <= i; ++j) {
          const float* vj = qkv + (b * T + j) * d3 + qoff + 2 * hd;
          const float pij = pi[j];
          for (int64_t u = 0; u < hd; ++u) ci[u] += pij * vj[u];
        }
      }
    }
  }
}

void attention_backward(const float* qkv, const float* probs, const float* dctx,
                        float* dqkv, int64_t B, int64_t T, int64_t H,
                        int64_t hd) {
  const int64_t d3 = 3 * H * hd;
  const int64_t d = H * hd;
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t h = 0; h < H; ++h) {
      const int64_t qoff = h * 3 * hd;
      const float* p = probs + (b * H + h) * T * T;
      std::vector<float> datt(static_cast<size_t>(T));
      for (int64_t i = 0; i < T; ++i) {
        const float* pi = p + i * T;
        const float* dci = dctx + (b * T + i) * d + h * hd;
        // datt[j] = dctx_i . v_j ; dv_j += p_ij * dctx_i
        for (int64_t j = 0; j <= i; ++j) {
          const float* vj = qkv + (b * T + j) * d3 + qoff + 2 * hd;
          float* dvj = dqkv + (b * T + j) * d3 + qoff + 2 * hd;
          float s = 0.0f;
          const float pij = pi[j];
          for (int64_t u = 0; u < hd; ++u) {
            s += dci[u] * vj[u];
            dvj[u] += pij * dci[u];
          }
          datt[static_cast<size_t>(j)] = s;
        }
        // softmax backward, then scaled dot-product backward
        float dot = 0.0f;
        for (int64_t j = 0; j <= i; ++j) {
          dot += datt[static_cast<size_t>(j)] * pi[j];
        }
        const float* qi = qkv + (b * T + i) * d3 + qoff;
        float* dqi = dqkv + (b * T + i) * d3 + qoff;
        for (int64_t j = 0; j <= i; ++j) {
          const float ds = pi[j] * (datt[static_cast<size_t>(j)] - dot) * scale;
          const float* kj = qkv + (b * T + j) * d3 + qoff + hd;
          float* dkj = dqkv + (b * T + j) * d3 + qoff + hd;
          for (int64_t u = 0; u < hd; ++u) {
            dqi[u] += ds * kj[u];
            dkj[u] += ds * qi[u];
          }
        }
      }
    }
  }
}

void check_tokens(const ModelConfig& cfg, const TokenBatch& tokens) {
  if (tokens.batch < 1 || tokens.seq_len < 1) {
    throw ConfigError("token batch must be non-empty");
  }
  if (tokens.seq_len > cfg.context_len) {
    throw ConfigError("sequence length " + std::to_string(tokens.seq_len) +
                      " exceeds context_len " + std::to_string(cfg.context_len));
  }
  if (tokens.ids.size() !=
      static_cast<size_t>(tokens.batch * tokens.seq_len)) {
    throw ShapeError("token id buffer does not match batch x seq_len");
  }
  for (int32_t id : tokens.ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("token id " + std::to_string(id) +
                        " out of range for vocab_size " +
                        std::to_string(cfg.vocab_size));
    }
  }
}

// Shared forward. logits buffer [M x V] is returned; saved/trace optional.
std::vector<float> forward_impl(const ModelWeights& w, const ModelConfig& cfg,
                                const TokenBatch& tokens,
                                const BlockSequence& seq, ForwardSaved* saved,
                                ActivationTrace* trace) {
  cfg.validate();
  check_tokens(cfg, tokens);
  for (int bi : seq) {
    if (bi < 0 || bi >= cfg.n_layers) {
      throw ConfigError("block sequence index " + std::to_string(bi) +
                        " out of range");
    }
  }

  const int64_t B = tokens.batch, T = tokens.seq_len;
  const int64_t M = B * T;
  const int64_t d = cfg.d_model, dff = cfg.d_ffn, V = cfg.vocab_size;
  const int64_t H = cfg.n_heads, hd = cfg.head_dim();

  std::vector<float> x(static_cast<size_t>(M * d));
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t < T; ++t) {
      const float* te = w.tok_emb.ptr() + static_cast<int64_t>(tokens.at(b, t)) * d;
      const float* pe = w.pos_emb.ptr() + t * d;
      float* xr = x.data() + (b * T + t) * d;
      for (int64_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
    }
  }
  if (saved) saved->x0 = x;
  if (trace) {
    trace->residual_snapshots.clear();
    trace->attn_branch.clear();
    trace->mlp_branch.clear();
    trace->head_outputs.clear();
    trace->mlp_hidden.clear();
    trace->residual_snapshots.push_back(Tensor({B, T, d}, x));
  }

  if (saved) saved->blocks.resize(seq.size());
  std::vector<float> ln_buf(static_cast<size_t>(M * d));
  std::vector<float> qkv(static_cast<size_t>(M * 3 * d));
  std::vector<float> probs(static_cast<size_t>(B * H * T * T));
  std::vector<float> ctx(static_cast<size_t>(M * d));
  std::vector<float> branch(static_cast<size_t>(M * d));
  std::vector<float> h1(static_cast<size_t>(M * dff));
  std::vector<float> act(static_cast<size_t>(M * dff));

  for (size_t step = 0; step < seq.size(); ++step) {
    const BlockWeights& blk = w.blocks[static_cast<size_t>(seq[step])];
    BlockSaved* bs = saved ? &saved->blocks[step] : nullptr;
    if (bs) bs->x_in = x;

    // attention branch
    ln_forward(x.data(), blk.ln1_gain.ptr(), blk.ln1_bias.ptr(), ln_buf.data(),
               bs ? &bs->ln1_st : nullptr, M, d);
    if (bs) bs->ln1_out = ln_buf;
    matmul_f32(ln_buf.data(), blk.w_qkv.ptr(), qkv.data(), M, d, 3 * d);
    add_bias_rows(qkv.data(), blk.b_qkv.ptr(), M, 3 * d);
    attention_forward(qkv.data(), probs.data(), ctx.data(), B, T, H, hd);
    if (bs) {
      bs->qkv = qkv;
      bs->probs = probs;
      bs->ctx = ctx;
    }
    if (trace) {
      // ctx is head-blocked, so [M x d] reads directly as [B x T x H x hd]
      trace->head_outputs.push_back(Tensor({B, T, H, hd}, ctx));
    }
    matmul_f32(ctx.data(), blk.w_out.ptr(), branch.data(), M, d, d);
    add_bias_rows(branch.data(), blk.b_out.ptr(), M, d);
    if (trace) trace->attn_branch.push_back(Tensor({B, T, d}, branch));
    for (int64_t i = 0; i < M * d; ++i) x[static_cast<size_t>(i)] += branch[static_cast<size_t>(i)];
    if (bs) bs->x_mid = x;

    // mlp branch
    ln_forward(x.data(), blk.ln2_gain.ptr(), blk.ln2_bias.ptr(), ln_buf.data(),
               bs ? &bs->ln2_st : nullptr, M, d);
    if (bs) bs->ln2_out = ln_buf;
    matmul_f32(ln_buf.data(), blk.w_fc1.ptr(), h1.data(), M, d, dff);
    add_bias_rows(h1.data(), blk.b_fc1.ptr(), M, dff);
    if (bs) bs->h1 = h1;
    if (trace) trace->mlp_hidden.push_back(Tensor({B, T, dff}, h1));
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < M * dff; ++i) {
      act[static_cast<size_t>(i)] = detail::gelu(h1[static_cast<size_t>(i)]);
    }
    if (bs) bs->act = act;
    matmul_f32(act.data(), blk.w_fc2.ptr(), branch.data(), M, dff, d);
    add_bias_rows(branch.data(), blk.b_fc2.ptr(), M, d);
    if (trace) trace->mlp_branch.push_back(Tensor({B, T, d}, branch));
    for (int64_t i = 0; i < M * d; ++i) x[static_cast<size_t>(i)] += branch[static_cast<size_t>(i)];
    if (trace) trace->residual_snapshots.push_back(Tensor({B, T, d}, x));
  }

  if (saved) saved->x_final = x;
  ln_forward(x.data(), w.final_ln_gain.ptr(), w.final_ln_bias.ptr(),
             ln_buf.data(), saved ? &saved->lnf_st : nullptr, M, d);
  if (saved) saved->lnf_out = ln_buf;

  std::vector<float> logits(static_cast<size_t>(M * V));
  matmul_f32(ln_buf.data(), w.unembed.ptr(), logits.data(), M, d, V);
  return logits;
}

BlockSequence default_sequence(const ModelConfig& cfg) {
  BlockSequence seq(static_cast<size_t>(cfg.n_layers));
  std::iota(seq.begin(), seq.end(), 0);
  return seq;
}

// Mean cross-entropy; optionally writes dlogits = (softmax - onehot)/M.
double cross_entropy(const std::vector<float>& logits, const TokenBatch& targets,
                     int64_t V, std::vector<float>* dlogits) {
  const int64_t M = targets.batch * targets.seq_len;
  if (dlogits) dlogits->assign(static_cast<size_t>(M * V), 0.0f);
  double total = 0.0;
  for (int64_t m = 0; m < M; ++m) {
    const float* row = logits.data() + m * V;
    const int32_t tgt = targets.ids[static_cast<size_t>(m)];
    float mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = row[j] > mx ? row[j] : mx;
    double sum = 0.0;
    for (int64_t j = 0; j < V; ++j) {
      sum += std::exp(static_cast<double>(row[j] - mx));
    }
    const double lse = std::log(sum) + static_cast<double>(mx);
    total += lse - static_cast<double>(row[tgt]);
    if (dlogits) {
      float* drow = dlogits->data() + m * V;
      const float inv_m = 1.0f / static_cast<float>(M);
      for (int64_t j = 0; j < V; ++j) {
        const float p = static_cast<float>(
            std::exp(static_cast<double>(row[j] - mx)) / sum);
        drow[j] = p * inv_m;
      }
      drow[tgt] -= inv_m;
    }
  }
  return total / static_cast<double>(M);
}

void check_targets(const ModelConfig& cfg, const TokenBatch& tokens,
                   const TokenBatch& targets) {
  if (targets.batch != tokens.batch || targets.seq_len != tokens.seq_len) {
    throw ShapeError("targets shape does not match tokens");
  }
  for (int32_t id : targets.ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("target id out of range");
    }
  }
}

}  // namespace

Tensor forward(const ModelWeights& w, const ModelConfig& cfg,
               const TokenBatch& tokens, ActivationTrace* trace,
               const BlockSequence* block_sequence) {
  const BlockSequence seq =
      block_sequence ? *block_sequence : default_sequence(cfg);
  std::vector<float> logits =
      forward_impl(w, cfg, tokens, seq, nullptr, trace);
  return Tensor({tokens.batch, tokens.seq_len, cfg.vocab_size},
                std::move(logits));
}

double evaluate_loss(const ModelWeights& w, const ModelConfig& cfg,
                     const TokenBatch& tokens, const TokenBatch& targets,
                     const BlockSequence* block_sequence) {
  check_targets(cfg, tokens, targets);
  const BlockSequence seq =
      block_sequence ? *block_sequence : default_sequence(cfg);
  std::vector<float> logits =
      forward_impl(w, cfg, tokens, seq, nullptr, nullptr);
  return cross_entropy(logits, targets, cfg.vocab_size, nullptr);
}

double loss_and_grads(const ModelWeights& w, const ModelConfig& cfg,
                      const TokenBatch& tokens, const TokenBatch& targets,
                      ModelWeights& grads) {
  check_targets(cfg, tokens, targets);
  const BlockSequence seq = default_sequence(cfg);
  ForwardSaved saved;
  std::vector<float> logits = forward_impl(w, cfg, tokens, seq, &saved, nullptr);

  const int64_t B = tokens.batch, T = tokens.seq_len;
  const int64_t M = B * T;
  const int64_t d = cfg.d_model, dff = cfg.d_ffn, V = cfg.vocab_size;
  const int64_t H = cfg.n_heads, hd = cfg.head_dim();

  std::vector<float> dlogits;
  const double loss = cross_entropy(logits, targets, V, &dlogits);

  // head: logits = lnf_out * unembed
  std::vector<float> dlnf(static_cast<size_t>(M * d), 0.0f);
  linear_backward(saved.lnf_out.data(), w.unembed.ptr(), dlogits.data(),
                  grads.unembed.ptr(), dlnf.data(), M, d, V);

  std::vector<float> dx(static_cast<size_t>(M * d), 0.0f);
  ln_backward(saved.x_final.data(), w.final_ln_gain.ptr(), saved.lnf_st,
              dlnf.data(), dx.data(), grads.final_ln_gain.ptr(),
              grads.final_ln_bias.ptr(), M, d);

  std::vector<float> dbranch(static_cast<size_t>(M * d));
  std::vector<float> dact(static_cast<size_t>(M * dff));
  std::vector<float> dh1(static_cast<size_t>(M * dff));
  std::vector<float> dln(static_cast<size_t>(M * d));
  std::vector<float> dctx(static_cast<size_t>(M * d));
  std::vector<float> dqkv(static_cast<size_t>(M * 3 * d));

  for (size_t step = seq.size(); step-- > 0;) {
    const BlockWeights& blk = w.blocks[static_cast<size_t>(seq[step])];
    BlockWeights& gblk = grads.blocks[static_cast<size_t>(seq[step])];
    const BlockSaved& bs = saved.blocks[step];

    // mlp branch backward: dx covers both the residual path and the branch
    std::fill(dact.begin(), dact.end(), 0.0f);
    linear_backward(bs.act.data(), blk.w_fc2.ptr(), dx.data(),
                    gblk.w_fc2.ptr(), dact.data(), M, dff, d);
    bias_grad(dx.data(), gblk.b_fc2.ptr(), M, d);
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < M * dff; ++i) {
      dh1[static_cast<size_t>(i)] =
          dact[static_cast<size_t>(i)] *
          detail::gelu_grad(bs.h1[static_cast<size_t>(i)]);
    }
    std::fill(dln.begin(), dln.end(), 0.0f);
    linear_backward(bs.ln2_out.data(), blk.w_fc1.ptr(), dh1.data(),
                    gblk.w_fc1.ptr(), dln.data(), M, d, dff);
    bias_grad(dh1.data(), gblk.b_fc1.ptr(), M, dff);
    ln_backward(bs.x_mid.data(), blk.ln2_gain.ptr(), bs.ln2_st, dln.data(),
                dx.data(), gblk.ln2_gain.ptr(), gblk.ln2_bias.ptr(), M, d);

    // attention branch backward
    std::fill(dctx.begin(), dctx.end(), 0.0f);
    linear_backward(bs.ctx.data(), blk.w_out.ptr(), dx.data(),
                    gblk.w_out.ptr(), dctx.data(), M, d, d);
    bias_grad(dx.data(), gblk.b_out.ptr(), M, d);
    std::fill(dqkv.begin(), dqkv.end(), 0.0f);
    attention_backward(bs.qkv.data(), bs.probs.data(), dctx.data(),
                       dqkv.data(), B, T, H, hd);
    std::fill(dln.begin(), dln.end(), 0.0f);
    linear_backward(bs.ln1_out.data(), blk.w_qkv.ptr(), dqkv.data(),
                    gblk.w_qkv.ptr(), dln.data(), M, d, 3 * d);
    bias_grad(dqkv.data(), gblk.b_qkv.ptr(), M, 3 * d);
    ln_backward(bs.x_in.data(), blk.ln1_gain.ptr(), bs.ln1_st, dln.data(),
                dx.data(), gblk.ln1_gain.ptr(), gblk.ln1_bias.ptr(), M, d);
  }

  // embedding backward
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t t = 0; t < T; ++t) {
      const float* dxr = dx.data() + (b * T + t) * d;
      float* dte =
          grads.tok_emb.ptr() + static_cast<int64_t>(tokens.at(b, t)) * d;
      float* dpe = grads.pos_emb.ptr() + t * d;
      for (int64_t j = 0; j < d; ++j) {
        dte[j] += dxr[j];
        dpe[j] += dxr[j];
      }
    }
  }
  return loss;
}

ModelWeights init_random(const ModelConfig& cfg, uint64_t seed) {
  ModelWeights w = ModelWeights::zeros(cfg);
  Rng rng(seed);
  const float base_std = 0.02f;
  const float resid_scale =
      1.0f / std::sqrt(2.0f * static_cast<float>(cfg.n_layers));
  for (ParamRef& p : named_params(w)) {
    if (p.tensor->rank() >= 2) {
      const bool resid_proj = p.name.ends_with("attn.w_out") ||
                              p.name.ends_with("mlp.w_fc2");
      const float std = resid_proj ? base_std * resid_scale : base_std;
      for (float& v : p.tensor->data) {
        v = static_cast<float>(rng.normal()) * std;
      }
    } else if (p.name.ends_with("gain")) {
      for (float& v : p.tensor->data) v = 1.0f;
    }
    // biases stay zero
  }
  return w;
}

}  // namespace subclone

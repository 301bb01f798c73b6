#pragma once

#include <cmath>
#include <vector>

#include "crepair/ops.hpp"
#include "crepair/tensor.hpp"

namespace crepair {

struct LayerNormParams {
  Tensor gain, bias;
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

// Multi-head attention with the positional term folded into both the score
// and the value path: scores = (Q K^T + Q P^T) / sqrt(d_k), output per head
// W (V + P). P is a relative-distance table shared across heads, clipped at
// +/- clip; it applies to self-attention only (cross-attention distances
// between decoder and memory positions carry no meaning).
struct AttentionBlock {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor rel;  // [2*clip+1, head_dim]; undefined when relative terms are off
  int heads = 1;
  int clip = 16;

  Tensor forward(const Tensor& q_in, const Tensor& kv_in,
                 const std::vector<std::uint8_t>& kv_keep, bool causal) const {
    int d_model = q_in.dim(1);
    int head_dim = d_model / heads;
    bool use_rel = rel.defined();
    double scale_factor = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Tensor q = add_bias(matmul(q_in, wq), bq);
    Tensor k = add_bias(matmul(kv_in, wk), bk);
    Tensor v = add_bias(matmul(kv_in, wv), bv);

    int lq = q.dim(0);
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(q, h * head_dim, (h + 1) * head_dim);
      Tensor kh = slice_cols(k, h * head_dim, (h + 1) * head_dim);
      Tensor vh = slice_cols(v, h * head_dim, (h + 1) * head_dim);
      Tensor scores = matmul(qh, transpose(kh));
      if (use_rel)
        scores = add(scores,
                     rel_bias_expand(matmul(qh, transpose(rel)), lq, clip));
      scores = scale(scores, scale_factor);
      Tensor weights = softmax(attention_mask(scores, kv_keep, causal), 1);
      Tensor ctx = matmul(weights, vh);
      if (use_rel)
        ctx = add(ctx, matmul(rel_weight_collapse(weights, clip), rel));
      head_outputs.push_back(ctx);
    }
    Tensor merged = heads == 1 ? head_outputs[0] : concat(head_outputs, 1);
    return add_bias(matmul(merged, wo), bo);
  }
};

struct FfnBlock {
  Tensor w1, b1, w2, b2;
  Tensor forward(const Tensor& x) const {
    return add_bias(matmul(relu(add_bias(matmul(x, w1), b1)), w2), b2);
  }
};

// Pre-norm encoder block: x += attn(LN(x)); x += ffn(LN(x)).
struct EncoderLayer {
  LayerNormParams ln1, ln2;
  AttentionBlock attn;
  FfnBlock ffn;

  Tensor forward(const Tensor& x, const std::vector<std::uint8_t>& keep) const {
    Tensor h = ln1.forward(x);
    Tensor y = add(x, attn.forward(h, h, keep, /*causal=*/false));
    return add(y, ffn.forward(ln2.forward(y)));
  }
};

// Pre-norm decoder block: causal self-attention, cross-attention over the
// memory, then the feed-forward.
struct DecoderLayer {
  LayerNormParams ln1, ln2, ln3;
  AttentionBlock self_attn, cross_attn;
  FfnBlock ffn;

  Tensor forward(const Tensor& x, const std::vector<std::uint8_t>& self_keep,
                 const Tensor& memory,
                 const std::vector<std::uint8_t>& memory_keep) const {
    Tensor h = ln1.forward(x);
    Tensor y = add(x, self_attn.forward(h, h, self_keep, /*causal=*/true));
    Tensor h2 = ln2.forward(y);
    y = add(y, cross_attn.forward(h2, memory, memory_keep, /*causal=*/false));
    return add(y, ffn.forward(ln3.forward(y)));
  }
};

}  // namespace crepair

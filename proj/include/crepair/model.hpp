#pragma once

#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crepair/bpe.hpp"
#include "crepair/checkpoint.hpp"
#include "crepair/layers.hpp"
#include "crepair/ops.hpp"
#include "crepair/rng.hpp"

namespace crepair {

struct ModelConfig {
  int d_model = 128;
  int n_heads = 4;
  int n_enc_layers = 2;
  int n_dec_layers = 2;
  int ffn_dim = 256;
  int latent_dim = 32;
  int max_len = 192;
  int vocab_size = 0;  // set from the trained vocabulary
  int sample_count = 5;
  int rel_clip = 16;
  int conv_kernel = 3;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
      throw DataError("model config: d_model must be a positive multiple of n_heads");
    if (sample_count < 1) throw DataError("model config: sample_count must be >= 1");
    if (max_len < 8) throw DataError("model config: max_len must be >= 8");
    if (vocab_size <= 0) throw DataError("model config: vocab_size not set");
    if (n_enc_layers < 1 || n_dec_layers < 1)
      throw DataError("model config: layer counts must be >= 1");
    if (ffn_dim < 1 || latent_dim < 1)
      throw DataError("model config: ffn_dim/latent_dim must be >= 1");
    if (rel_clip < 1 || conv_kernel < 1 || conv_kernel % 2 == 0)
      throw DataError("model config: rel_clip >= 1 and odd conv_kernel required");
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model},         {"n_heads", n_heads},
            {"n_enc_layers", n_enc_layers}, {"n_dec_layers", n_dec_layers},
            {"ffn_dim", ffn_dim},         {"latent_dim", latent_dim},
            {"max_len", max_len},         {"vocab_size", vocab_size},
            {"sample_count", sample_count}, {"rel_clip", rel_clip},
            {"conv_kernel", conv_kernel}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_model = j.at("d_model").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_enc_layers = j.at("n_enc_layers").get<int>();
    cfg.n_dec_layers = j.at("n_dec_layers").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.latent_dim = j.at("latent_dim").get<int>();
    cfg.max_len = j.at("max_len").get<int>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.sample_count = j.at("sample_count").get<int>();
    cfg.rel_clip = j.at("rel_clip").get<int>();
    cfg.conv_kernel = j.at("conv_kernel").get<int>();
    return cfg;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Mean and log-variance of the latent posterior; sigma is derived on read so
// it is positive by construction.
struct LatentStats {
  Tensor mu;
  Tensor logvar;
  Tensor sigma() const { return exp_op(scale(logvar, 0.5)); }
};

// Final-layer encoder states plus the padding mask they were computed under.
struct EncoderOutput {
  Tensor states;
  std::vector<std::uint8_t> keep;
};

struct LossParts {
  Tensor total;
  Tensor rc;
  Tensor kl;
};

// Token id 0 is <Pad> by vocabulary construction.
inline constexpr int kPadTokenId = 0;

class CrepairModel {
 public:
  CrepairModel(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed, /*stream=*/0x1417);
    wire(&rng);
  }

  CrepairModel(ModelConfig cfg, ParamStore store)
      : cfg_(cfg), store_(std::move(store)) {
    cfg_.validate();
    std::size_t expected = store_.size();
    wire(nullptr);
    if (store_.size() != expected)
      throw DataError("checkpoint does not match model config: parameter count");
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  // -------------------------------------------------------------------------
  // Encoder
  // -------------------------------------------------------------------------
  EncoderOutput encode_forward(const TokenSequence& tokens) const {
    tokens.validate(cfg_.vocab_size);
    if (tokens.length() == 0) throw DataError("encode: empty input");
    if (tokens.length() > cfg_.max_len)
      throw DataError("encode: sequence length " +
                      std::to_string(tokens.length()) + " exceeds max_len " +
                      std::to_string(cfg_.max_len));
    Tensor x = embedding(tok_embedding_, tokens.ids);
    for (const EncoderLayer& layer : enc_layers_)
      x = layer.forward(x, tokens.mask);
    return {x, tokens.mask};
  }

  // -------------------------------------------------------------------------
  // Latent path: scored positions -> masked softmax weights -> weighted
  // states -> two convolution heads -> pooled mu and log sigma^2.
  // -------------------------------------------------------------------------
  LatentStats latent_stats(const EncoderOutput& enc) const {
    int len = enc.states.dim(0);
    int real = 0;
    for (std::uint8_t k : enc.keep) real += k;
    if (real == 0) throw DataError("latent stats: all positions masked");
    Tensor scores = transpose(
        matmul(enc.states, reshape(latent_att_w_, {cfg_.d_model, 1})));
    Tensor weights = softmax(attention_mask(scores, enc.keep, false), 1);
    Tensor weighted = scale_rows(enc.states, reshape(weights, {len}));
    Tensor mu_seq = conv1d(weighted, mu_conv_w_, mu_conv_b_);
    Tensor lv_seq = conv1d(weighted, lv_conv_w_, lv_conv_b_);
    Tensor pool = masked_mean_row(enc.keep);
    LatentStats stats;
    stats.mu = reshape(matmul(pool, mu_seq), {cfg_.latent_dim});
    stats.logvar = reshape(matmul(pool, lv_seq), {cfg_.latent_dim});
    return stats;
  }

  // -------------------------------------------------------------------------
  // Reparameterized multi-sample fusion: Z_i = mu + sigma * eps_i, fused by
  // elementwise mean. A null rng is noise-off mode and returns mu exactly.
  // -------------------------------------------------------------------------
  Tensor sample_fused_latent(const LatentStats& stats, int n, Rng* rng) const {
    if (n < 1)
      throw NumericError("sample count must be >= 1, got " + std::to_string(n));
    if (rng == nullptr) return stats.mu;
    Tensor sigma = stats.sigma();
    Tensor acc;
    for (int i = 0; i < n; ++i) {
      Tensor eps = Tensor::randn({cfg_.latent_dim}, *rng);
      Tensor zi = add(stats.mu, mul(sigma, eps));
      acc = acc.defined() ? add(acc, zi) : zi;
    }
    return scale(acc, 1.0 / n);
  }

  // -------------------------------------------------------------------------
  // Condition module: embeds the reference repair, runs one encoder layer,
  // mean-pools, and projects through tanh to latent width. Null input (no
  // reference available, i.e. inference) returns the learned null vector.
  // -------------------------------------------------------------------------
  Tensor extract_condition(const TokenSequence* target) const {
    if (target == nullptr) return cond_null_;
    target->validate(cfg_.vocab_size);
    if (target->length() == 0 || target->real_length() == 0)
      throw DataError("condition: empty target sequence");
    if (target->length() > cfg_.max_len)
      throw DataError("condition: sequence exceeds max_len");
    Tensor x = embedding(tok_embedding_, target->ids);
    x = cond_layer_.forward(x, target->mask);
    Tensor pooled = matmul(masked_mean_row(target->mask), x);  // [1, d]
    return reshape(tanh_op(add_bias(matmul(pooled, cond_proj_w_), cond_proj_b_)),
                   {cfg_.latent_dim});
  }

  // -------------------------------------------------------------------------
  // Decoder. Memory M = LayerNorm(E + broadcast(W_z Z) + broadcast(W_c c));
  // each block runs causal self-attention, cross-attention over M, and the
  // feed-forward, all pre-norm with residuals.
  // -------------------------------------------------------------------------
  Tensor decode_forward(const EncoderOutput& enc, const Tensor& z,
                        const Tensor& c, const TokenSequence& prefix) const {
    prefix.validate(cfg_.vocab_size);
    if (prefix.length() == 0) throw DataError("decode: empty prefix");
    if (prefix.length() > cfg_.max_len)
      throw DataError("decode: prefix length " +
                      std::to_string(prefix.length()) + " exceeds max_len " +
                      std::to_string(cfg_.max_len));
    Tensor memory = build_memory(enc, z, c);
    Tensor x = embedding(tok_embedding_, prefix.ids);
    for (const DecoderLayer& layer : dec_layers_)
      x = layer.forward(x, prefix.mask, memory, enc.keep);
    return add_bias(matmul(x, out_w_), out_b_);
  }

  Tensor build_memory(const EncoderOutput& enc, const Tensor& z,
                      const Tensor& c) const {
    int len = enc.states.dim(0);
    Tensor z_row = add_bias(
        matmul(reshape(z, {1, cfg_.latent_dim}), mem_z_w_), mem_z_b_);
    Tensor c_row = add_bias(
        matmul(reshape(c, {1, cfg_.latent_dim}), mem_c_w_), mem_c_b_);
    Tensor mixed = add(add(enc.states, broadcast_row(reshape(z_row, {cfg_.d_model}), len)),
                       broadcast_row(reshape(c_row, {cfg_.d_model}), len));
    return mem_ln_.forward(mixed);
  }

  // -------------------------------------------------------------------------
  // L_CVAE = L_RC + kl_weight * L_KL. The reconstruction term is teacher
  // forcing: logits row t is scored against target token t+1, padding
  // ignored. The KL term is the closed form against a standard-normal prior.
  // -------------------------------------------------------------------------
  LossParts loss(const Tensor& logits, const TokenSequence& target,
                 const LatentStats& stats, double kl_weight) const {
    if (logits.dim(0) != target.length())
      throw NumericError("loss: " + std::to_string(logits.dim(0)) +
                         " logit rows for target length " +
                         std::to_string(target.length()));
    std::vector<int> labels(target.ids.size(), kPadTokenId);
    for (std::size_t t = 0; t + 1 < target.ids.size(); ++t)
      labels[t] = target.mask[t + 1] ? target.ids[t + 1] : kPadTokenId;
    LossParts parts;
    parts.rc = cross_entropy(logits, labels, kPadTokenId);
    parts.kl = kl_divergence(stats);
    if (!std::isfinite(parts.rc.item()))
      throw NumericError("loss: non-finite reconstruction term");
    if (!std::isfinite(parts.kl.item()))
      throw NumericError("loss: non-finite KL term");
    parts.total = add(parts.rc, scale(parts.kl, kl_weight));
    return parts;
  }

  // 1/2 sum_d (mu^2 + sigma^2 - 1 - ln sigma^2) against N(0, I).
  static Tensor kl_divergence(const LatentStats& stats) {
    Tensor mu2 = mul(stats.mu, stats.mu);
    Tensor var = exp_op(stats.logvar);
    Tensor inner = sub(add(mu2, var), add_scalar(stats.logvar, 1.0));
    return scale(sum_all(inner), 0.5);
  }

  // -------------------------------------------------------------------------
  // Checkpoint: "CRPC" magic, format version, config JSON, parameter block.
  // -------------------------------------------------------------------------
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    out.write("CRPC", 4);
    detail::write_u32(out, kCheckpointVersion);
    std::string config = cfg_.to_json().dump();
    detail::write_u64(out, config.size());
    out.write(config.data(), static_cast<std::streamsize>(config.size()));
    store_.save(out);
    if (!out) throw DataError("failed writing checkpoint: " + path);
  }

  static CrepairModel load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "CRPC", 4) != 0)
      throw DataError("checkpoint " + path + ": bad magic");
    std::uint32_t version = detail::read_u32(in, "version");
    if (version != kCheckpointVersion)
      throw DataError("checkpoint " + path + ": unsupported format version " +
                      std::to_string(version));
    std::uint64_t config_len = detail::read_u64(in, "config length");
    if (config_len > 65536)
      throw DataError("checkpoint " + path + ": implausible config length");
    std::string config(config_len, '\0');
    if (!in.read(config.data(), static_cast<std::streamsize>(config_len)))
      throw DataError("checkpoint " + path + ": truncated config");
    ModelConfig cfg;
    try {
      cfg = ModelConfig::from_json(nlohmann::json::parse(config));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("checkpoint " + path + ": bad config: " + e.what());
    }
    return CrepairModel(cfg, ParamStore::load(in));
  }

 private:
  // Fresh construction draws initial values; reconstruction from a store
  // fetches by name and validates shapes instead.
  Tensor& wire_param(const std::string& name, Shape shape, double stddev,
                     Rng* rng, double constant = 0.0) {
    if (rng != nullptr) {
      Tensor t = stddev > 0.0 ? Tensor::randn(shape, *rng, stddev)
                              : Tensor::full(shape, constant);
      return store_.add(name, std::move(t));
    }
    if (!store_.contains(name))
      throw DataError("checkpoint does not match model config: missing " + name);
    Tensor& t = store_.at(name);
    if (t.shape() != shape)
      throw DataError("checkpoint does not match model config: shape of " +
                      name + " is " + shape_str(t.shape()) + ", expected " +
                      shape_str(shape));
    return t;
  }

  static double xavier(int fan_in, int fan_out) {
    return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  }

  LayerNormParams wire_ln(const std::string& prefix, Rng* rng) {
    LayerNormParams ln;
    ln.gain = wire_param(prefix + ".gain", {cfg_.d_model}, 0.0, rng, 1.0);
    ln.bias = wire_param(prefix + ".bias", {cfg_.d_model}, 0.0, rng, 0.0);
    return ln;
  }

  AttentionBlock wire_attention(const std::string& prefix, bool relative,
                                Rng* rng) {
    AttentionBlock block;
    int d = cfg_.d_model;
    double std_w = xavier(d, d);
    block.wq = wire_param(prefix + ".wq", {d, d}, std_w, rng);
    block.bq = wire_param(prefix + ".bq", {d}, 0.0, rng);
    block.wk = wire_param(prefix + ".wk", {d, d}, std_w, rng);
    block.bk = wire_param(prefix + ".bk", {d}, 0.0, rng);
    block.wv = wire_param(prefix + ".wv", {d, d}, std_w, rng);
    block.bv = wire_param(prefix + ".bv", {d}, 0.0, rng);
    block.wo = wire_param(prefix + ".wo", {d, d}, std_w, rng);
    block.bo = wire_param(prefix + ".bo", {d}, 0.0, rng);
    if (relative)
      block.rel = wire_param(prefix + ".rel",
                             {2 * cfg_.rel_clip + 1, cfg_.head_dim()}, 0.02, rng);
    block.heads = cfg_.n_heads;
    block.clip = cfg_.rel_clip;
    return block;
  }

  FfnBlock wire_ffn(const std::string& prefix, Rng* rng) {
    FfnBlock ffn;
    ffn.w1 = wire_param(prefix + ".w1", {cfg_.d_model, cfg_.ffn_dim},
                        xavier(cfg_.d_model, cfg_.ffn_dim), rng);
    ffn.b1 = wire_param(prefix + ".b1", {cfg_.ffn_dim}, 0.0, rng);
    ffn.w2 = wire_param(prefix + ".w2", {cfg_.ffn_dim, cfg_.d_model},
                        xavier(cfg_.ffn_dim, cfg_.d_model), rng);
    ffn.b2 = wire_param(prefix + ".b2", {cfg_.d_model}, 0.0, rng);
    return ffn;
  }

  EncoderLayer wire_encoder_layer(const std::string& prefix, Rng* rng) {
    EncoderLayer layer;
    layer.ln1 = wire_ln(prefix + ".ln1", rng);
    layer.attn = wire_attention(prefix + ".attn", /*relative=*/true, rng);
    layer.ln2 = wire_ln(prefix + ".ln2", rng);
    layer.ffn = wire_ffn(prefix + ".ffn", rng);
    return layer;
  }

  void wire(Rng* rng) {
    int d = cfg_.d_model;
    int latent = cfg_.latent_dim;
    tok_embedding_ =
        wire_param("tok_embedding", {cfg_.vocab_size, d}, 0.02, rng);
    enc_layers_.clear();
    for (int i = 0; i < cfg_.n_enc_layers; ++i)
      enc_layers_.push_back(wire_encoder_layer("enc." + std::to_string(i), rng));

    latent_att_w_ = wire_param("latent.att_w", {d},
                               1.0 / std::sqrt(static_cast<double>(d)), rng);
    double conv_std = xavier(d * cfg_.conv_kernel, latent * cfg_.conv_kernel);
    mu_conv_w_ = wire_param("latent.mu_conv.w", {latent, d, cfg_.conv_kernel},
                            conv_std, rng);
    mu_conv_b_ = wire_param("latent.mu_conv.b", {latent}, 0.0, rng);
    lv_conv_w_ = wire_param("latent.logvar_conv.w",
                            {latent, d, cfg_.conv_kernel}, conv_std, rng);
    lv_conv_b_ = wire_param("latent.logvar_conv.b", {latent}, 0.0, rng);

    cond_layer_ = wire_encoder_layer("cond.layer", rng);
    cond_proj_w_ =
        wire_param("cond.proj.w", {d, latent}, xavier(d, latent), rng);
    cond_proj_b_ = wire_param("cond.proj.b", {latent}, 0.0, rng);
    cond_null_ = wire_param("cond.null", {latent}, 0.0, rng);

    mem_z_w_ = wire_param("mem.z_proj.w", {latent, d}, xavier(latent, d), rng);
    mem_z_b_ = wire_param("mem.z_proj.b", {d}, 0.0, rng);
    mem_c_w_ = wire_param("mem.c_proj.w", {latent, d}, xavier(latent, d), rng);
    mem_c_b_ = wire_param("mem.c_proj.b", {d}, 0.0, rng);
    mem_ln_ = wire_ln("mem.ln", rng);

    dec_layers_.clear();
    for (int i = 0; i < cfg_.n_dec_layers; ++i) {
      std::string prefix = "dec." + std::to_string(i);
      DecoderLayer layer;
      layer.ln1 = wire_ln(prefix + ".ln1", rng);
      layer.self_attn = wire_attention(prefix + ".self", /*relative=*/true, rng);
      layer.ln2 = wire_ln(prefix + ".ln2", rng);
      layer.cross_attn =
          wire_attention(prefix + ".cross", /*relative=*/false, rng);
      layer.ln3 = wire_ln(prefix + ".ln3", rng);
      layer.ffn = wire_ffn(prefix + ".ffn", rng);
      dec_layers_.push_back(layer);
    }

    out_w_ = wire_param("out_proj.w", {d, cfg_.vocab_size},
                        xavier(d, cfg_.vocab_size), rng);
    out_b_ = wire_param("out_proj.b", {cfg_.vocab_size}, 0.0, rng);
  }

  // Constant [1, len] row with 1/real at kept positions; matmul with it is a
  // masked mean over the sequence axis.
  Tensor masked_mean_row(const std::vector<std::uint8_t>& keep) const {
    int len = static_cast<int>(keep.size());
    int real = 0;
    for (std::uint8_t k : keep) real += k;
    if (real == 0) throw DataError("masked mean: all positions masked");
    std::vector<double> row(static_cast<std::size_t>(len), 0.0);
    for (int i = 0; i < len; ++i)
      if (keep[static_cast<std::size_t>(i)])
        row[static_cast<std::size_t>(i)] = 1.0 / real;
    return Tensor::from_vector({1, len}, std::move(row));
  }

  ModelConfig cfg_;
  ParamStore store_;

  Tensor tok_embedding_;
  std::vector<EncoderLayer> enc_layers_;
  Tensor latent_att_w_;
  Tensor mu_conv_w_, mu_conv_b_, lv_conv_w_, lv_conv_b_;
  EncoderLayer cond_layer_;
  Tensor cond_proj_w_, cond_proj_b_, cond_null_;
  Tensor mem_z_w_, mem_z_b_, mem_c_w_, mem_c_b_;
  LayerNormParams mem_ln_;
  std::vector<DecoderLayer> dec_layers_;
  Tensor out_w_, out_b_;
};

}  // namespace crepair

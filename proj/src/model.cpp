#include "sgtm/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sgtm {

void ModelConfig::validate() const {
  if (n_layers == 0 || d_model == 0 || d_mlp == 0 || n_heads == 0 || vocab_size == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (context_len < 2) throw ConfigError("context_len must be at least 2");
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) {
    throw ConfigError("vocab_size must exceed the number of special tokens");
  }
}

ParamLayout ParamLayout::for_config(const ModelConfig& config) {
  ParamLayout layout;
  std::size_t next = 0;
  layout.tok_emb = next++;
  layout.pos_emb = next++;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockParams b{};
    b.ln1_gain = next++;
    b.ln1_bias = next++;
    b.w_qkv = next++;
    b.w_o = next++;
    b.b_o = next++;
    b.ln2_gain = next++;
    b.ln2_bias = next++;
    b.w_1 = next++;
    b.b_1 = next++;
    b.w_2 = next++;
    b.b_2 = next++;
    layout.blocks.push_back(b);
  }
  layout.lnf_gain = next++;
  layout.lnf_bias = next++;
  if (!config.tie_embeddings) layout.unembed = next++;
  return layout;
}

template <class T>
ParamSet<T>::ParamSet(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  push("tok_emb", Tensor<T>(Shape{config.vocab_size, d}));
  push("pos_emb", Tensor<T>(Shape{config.context_len, d}));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    push(p + "ln1.gain", Tensor<T>(Shape{d}));
    push(p + "ln1.bias", Tensor<T>(Shape{d}));
    push(p + "attn.w_qkv", Tensor<T>(Shape{3 * d, d}));
    push(p + "attn.w_o", Tensor<T>(Shape{d, d}));
    push(p + "attn.b_o", Tensor<T>(Shape{d}));
    push(p + "ln2.gain", Tensor<T>(Shape{d}));
    push(p + "ln2.bias", Tensor<T>(Shape{d}));
    push(p + "mlp.w_1", Tensor<T>(Shape{config.d_mlp, d}));
    push(p + "mlp.b_1", Tensor<T>(Shape{config.d_mlp}));
    push(p + "mlp.w_2", Tensor<T>(Shape{config.d_mlp, d}));
    push(p + "mlp.b_2", Tensor<T>(Shape{d}));
  }
  push("ln_f.gain", Tensor<T>(Shape{d}));
  push("ln_f.bias", Tensor<T>(Shape{d}));
  if (!config.tie_embeddings) push("unembed", Tensor<T>(Shape{config.vocab_size, d}));
}

template <class T>
std::optional<std::size_t> ParamSet<T>::find(const std::string& path) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].path == path) return i;
  }
  return std::nullopt;
}

template <class T>
std::size_t ParamSet<T>::total_elements() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) n += e.value.numel();
  return n;
}

bool ForwardMask::empty() const {
  return std::all_of(zero_rows.begin(), zero_rows.end(),
                     [](const auto& ranges) { return ranges.empty(); });
}

template <class T>
void zero_rows(Tensor<T>& t, const std::vector<RowRange>& rows) {
  const std::size_t width = t.row_width();
  for (const RowRange& r : rows) {
    if (r.begin > r.end || r.end > t.dim(0)) {
      throw ContractError("row range [" + std::to_string(r.begin) + ", " + std::to_string(r.end) +
                          ") outside tensor of shape " + shape_to_string(t.shape()));
    }
    std::fill(t.raw() + r.begin * width, t.raw() + r.end * width, T(0));
  }
}

std::size_t TokenBatch::non_pad_tokens() const {
  return static_cast<std::size_t>(
      std::count_if(ids.begin(), ids.end(), [](std::int32_t id) { return id != kPadToken; }));
}

template <class T>
Transformer<T>::Transformer(ModelConfig config)
    : config_(config), layout_(ParamLayout::for_config(config)), params_(config) {}

template <class T>
Transformer<T> Transformer<T>::initialized(ModelConfig config, std::uint64_t seed) {
  Transformer<T> model(config);
  std::mt19937_64 rng(seed);
  const double std_base = 0.02;
  const double std_proj = std_base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  auto normal_fill = [&rng](Tensor<T>& t, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (T& v : t.data()) v = static_cast<T>(dist(rng));
  };
  const ParamLayout& L = model.layout_;
  ParamSet<T>& p = model.params_;
  normal_fill(p[L.tok_emb], std_base);
  normal_fill(p[L.pos_emb], std_base);
  for (const BlockParams& b : L.blocks) {
    p[b.ln1_gain].fill(T(1));
    p[b.ln2_gain].fill(T(1));
    normal_fill(p[b.w_qkv], std_base);
    normal_fill(p[b.w_o], std_proj);
    normal_fill(p[b.w_1], std_base);
    normal_fill(p[b.w_2], std_proj);
  }
  p[L.lnf_gain].fill(T(1));
  if (L.unembed) normal_fill(p[*L.unembed], std_base);
  return model;
}

template <class T>
ForwardResult Transformer<T>::forward(Graph<T>& g, const TokenBatch& batch,
                                      const ForwardOptions& options) const {
  if (batch.batch == 0 || batch.seq == 0 || batch.ids.size() != batch.batch * batch.seq) {
    throw DimensionError("forward: malformed token batch");
  }
  if (batch.seq > config_.context_len) {
    throw ContractError("forward: sequence length " + std::to_string(batch.seq) +
                        " exceeds context length " + std::to_string(config_.context_len));
  }
  if (options.param_mask && options.param_mask->zero_rows.size() != params_.size()) {
    throw ContractError("forward: parameter mask does not match parameter count");
  }
  if (!options.trainable.empty() && options.trainable.size() != params_.size()) {
    throw ContractError("forward: trainable flags do not match parameter count");
  }
  if (options.gate && options.gate->layers.size() != config_.n_layers) {
    throw ContractError("forward: activation gate layer flags do not match block count");
  }

  ForwardResult result;
  result.param_nodes.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> v = params_[i];
    if (options.param_mask) zero_rows(v, options.param_mask->zero_rows[i]);
    const bool rg = options.track_grads && (options.trainable.empty() || options.trainable[i]);
    result.param_nodes.push_back(g.leaf(std::move(v), rg));
  }
  auto P = [&](std::size_t i) { return result.param_nodes[i]; };

  const std::size_t n_rows = batch.batch * batch.seq;
  std::vector<std::int32_t> positions(n_rows);
  for (std::size_t r = 0; r < n_rows; ++r) {
    positions[r] = static_cast<std::int32_t>(r % batch.seq);
  }
  NodeId x = g.add(g.embedding(P(layout_.tok_emb), batch.ids),
                   g.embedding(P(layout_.pos_emb), positions));

  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const BlockParams& b = layout_.blocks[l];
    const bool gated = options.gate && options.gate->layers[l];

    NodeId h = g.layer_norm(x, P(b.ln1_gain), P(b.ln1_bias));
    NodeId qkv = g.matmul(h, P(b.w_qkv), /*transpose_b=*/true);
    NodeId att = g.causal_attention(qkv, batch.batch, batch.seq, config_.n_heads);
    if (gated) att = g.column_gate(att, options.gate->attn_keep, options.gate->mode);
    x = g.add(x, g.add_bias(g.matmul(att, P(b.w_o)), P(b.b_o)));

    NodeId h2 = g.layer_norm(x, P(b.ln2_gain), P(b.ln2_bias));
    NodeId hidden = g.gelu(g.add_bias(g.matmul(h2, P(b.w_1), /*transpose_b=*/true), P(b.b_1)));
    if (gated) hidden = g.column_gate(hidden, options.gate->mlp_keep, options.gate->mode);
    x = g.add(x, g.add_bias(g.matmul(hidden, P(b.w_2)), P(b.b_2)));

    result.block_outputs.push_back(x);
    if (options.stop_after_block && *options.stop_after_block == l) {
      result.output = x;
      return result;
    }
  }
  if (options.stop_after_block) {
    throw ContractError("forward: stop_after_block beyond last block");
  }
  NodeId final_h = g.layer_norm(x, P(layout_.lnf_gain), P(layout_.lnf_bias));
  const std::size_t unembed = layout_.unembed ? *layout_.unembed : layout_.tok_emb;
  result.output = g.matmul(final_h, P(unembed), /*transpose_b=*/true);
  return result;
}

template <class T>
ParamGrads<T> Transformer<T>::collect_grads(const Graph<T>& g, const ForwardResult& fwd,
                                            const ForwardOptions& options) const {
  ParamGrads<T> grads;
  grads.reserve(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor<T>* gr = g.grad(fwd.param_nodes[i]);
    Tensor<T> out = gr ? *gr : Tensor<T>(params_[i].shape());
    if (options.param_mask) zero_rows(out, options.param_mask->zero_rows[i]);
    grads.push_back(std::move(out));
  }
  return grads;
}

std::vector<std::int32_t> next_token_targets(const TokenBatch& batch) {
  std::vector<std::int32_t> targets(batch.batch * batch.seq, kPadToken);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    for (std::size_t t = 0; t + 1 < batch.seq; ++t) {
      if (batch.at(b, t) == kPadToken) continue;
      targets[b * batch.seq + t] = batch.at(b, t + 1);
    }
  }
  return targets;
}

template <class T>
NodeId lm_loss(Graph<T>& g, NodeId logits, const TokenBatch& batch) {
  const std::vector<std::int32_t> targets = next_token_targets(batch);
  const bool any = std::any_of(targets.begin(), targets.end(),
                               [](std::int32_t t) { return t != kPadToken; });
  if (!any) throw ContractError("lm_loss: every target position is padding");
  return g.cross_entropy(logits, targets, kPadToken);
}

template <class T>
std::vector<double> token_losses(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                 const std::vector<double>* bias) {
  const std::size_t vocab = logits.dim(1);
  if (targets.size() != logits.dim(0)) throw DimensionError("token_losses: target count mismatch");
  if (bias && bias->size() != vocab) throw DimensionError("token_losses: bias length mismatch");
  std::vector<double> out;
  std::vector<double> row(vocab);
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const std::int32_t t = targets[r];
    if (t == kPadToken) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) throw IndexError("token_losses: bad target");
    const T* lr = logits.raw() + r * vocab;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < vocab; ++j) {
      row[j] = static_cast<double>(lr[j]) + (bias ? (*bias)[j] : 0.0);
      mx = std::max(mx, row[j]);
    }
    double z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    out.push_back(std::log(z) + mx - row[t]);
  }
  return out;
}

template <class T>
double evaluate_loss(const Transformer<T>& model, const TokenBatch& batch,
                     const ForwardOptions& options) {
  Graph<T> g;
  ForwardOptions opts = options;
  opts.track_grads = false;
  ForwardResult fwd = model.forward(g, batch, opts);
  return static_cast<double>(g.value(lm_loss(g, fwd.output, batch))[0]);
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Transformer<float>;
template class Transformer<double>;
template void zero_rows(Tensor<float>&, const std::vector<RowRange>&);
template void zero_rows(Tensor<double>&, const std::vector<RowRange>&);
template NodeId lm_loss(Graph<float>&, NodeId, const TokenBatch&);
template NodeId lm_loss(Graph<double>&, NodeId, const TokenBatch&);
template std::vector<double> token_losses(const Tensor<float>&, std::span<const std::int32_t>,
                                          const std::vector<double>*);
template std::vector<double> token_losses(const Tensor<double>&, std::span<const std::int32_t>,
                                          const std::vector<double>*);
template double evaluate_loss(const Transformer<float>&, const TokenBatch&,
                              const ForwardOptions&);
template double evaluate_loss(const Transformer<double>&, const TokenBatch&,
                              const ForwardOptions&);

}  // namespace sgtm

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sgtm/graph.hpp"
#include "sgtm/tensor.hpp"

namespace sgtm {

inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kBosToken = 1;
inline constexpr std::int32_t kEosToken = 2;
inline constexpr std::int32_t kNumSpecialTokens = 3;

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 128;
  std::size_t d_mlp = 512;
  std::size_t n_heads = 8;
  std::size_t vocab_size = 512;
  std::size_t context_len = 128;
  bool tie_embeddings = true;

  std::size_t d_head() const { return d_model / n_heads; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Parameter indices into a ParamSet for one transformer block.
struct BlockParams {
  std::size_t ln1_gain, ln1_bias;
  std::size_t w_qkv;  // [3*d, d]: rows are Q heads, then K heads, then V heads
  std::size_t w_o;    // [d, d]: rows index head-major attention outputs
  std::size_t b_o;
  std::size_t ln2_gain, ln2_bias;
  std::size_t w_1;  // [d_mlp, d]: one row per hidden unit
  std::size_t b_1;
  std::size_t w_2;  // [d_mlp, d]: one row per hidden unit
  std::size_t b_2;
};

struct ParamLayout {
  std::size_t tok_emb = 0;
  std::size_t pos_emb = 0;
  std::vector<BlockParams> blocks;
  std::size_t lnf_gain = 0, lnf_bias = 0;
  std::optional<std::size_t> unembed;

  static ParamLayout for_config(const ModelConfig& config);
};

// Declaration-ordered named parameters. With tied embeddings the unembedding
// is the token embedding tensor itself; there is no second copy.
template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string path;
    Tensor<T> value;
  };

  ParamSet() = default;
  // Builds zero-valued parameters with the stable paths of the config.
  explicit ParamSet(const ModelConfig& config);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& path(std::size_t i) const { return entries_.at(i).path; }
  Tensor<T>& operator[](std::size_t i) { return entries_.at(i).value; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_.at(i).value; }
  std::optional<std::size_t> find(const std::string& path) const;
  std::size_t total_elements() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const Entry& e : entries_) out.push(e.path, e.value.template cast<U>());
    return out;
  }

  void push(std::string path, Tensor<T> value) {
    entries_.push_back(Entry{std::move(path), std::move(value)});
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].path != b.entries_[i].path || !(a.entries_[i].value == b.entries_[i].value)) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
};

// Gradients aligned with ParamSet order.
template <class T>
using ParamGrads = std::vector<Tensor<T>>;

struct RowRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const RowRange&, const RowRange&) = default;
};

// Leading-axis row ranges to replace with zero, one list per parameter.
struct ForwardMask {
  std::vector<std::vector<RowRange>> zero_rows;
  bool empty() const;
};

// Zeroes the listed rows of t in place (1-D tensors: elements).
template <class T>
void zero_rows(Tensor<T>& t, const std::vector<RowRange>& rows);

// Per-block masks over hidden activations: MLP hidden units and the
// concatenated per-head attention outputs. keep = 0 marks a gated unit.
struct ActivationGate {
  GateMode mode = GateMode::kGradient;
  std::vector<bool> layers;
  std::vector<std::uint8_t> mlp_keep;
  std::vector<std::uint8_t> attn_keep;
};

struct ForwardOptions {
  std::optional<ForwardMask> param_mask;
  std::optional<ActivationGate> gate;
  // Per-parameter requires_grad; empty means every parameter (if track_grads).
  std::vector<bool> trainable;
  bool track_grads = true;
  // Stop after this block and return its output instead of logits.
  std::optional<std::size_t> stop_after_block;
};

// Token ids laid out [batch, seq]; positions past a sequence end hold kPadToken.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;

  std::int32_t at(std::size_t b, std::size_t t) const { return ids[b * seq + t]; }
  std::size_t non_pad_tokens() const;
};

struct ForwardResult {
  NodeId output;  // logits [batch*seq, vocab], or block output when stopped early
  std::vector<NodeId> param_nodes;
  std::vector<NodeId> block_outputs;
};

template <class T>
class Transformer {
 public:
  Transformer() = default;
  explicit Transformer(ModelConfig config);  // zero parameters
  static Transformer initialized(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

  // Builds the forward computation into g. Stored parameters are never
  // modified; a parameter mask zeroes rows of the graph's copies only.
  ForwardResult forward(Graph<T>& g, const TokenBatch& batch,
                        const ForwardOptions& options = {}) const;

  // Gradient of each parameter after g.backward(); rows zeroed by the
  // forward mask get exactly zero gradient.
  ParamGrads<T> collect_grads(const Graph<T>& g, const ForwardResult& fwd,
                              const ForwardOptions& options = {}) const;

  template <class U>
  Transformer<U> cast() const {
    Transformer<U> out(config_);
    out.params() = params_.template cast<U>();
    return out;
  }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  ParamSet<T> params_;
};

// Next-token targets for batch: targets[b*seq + t] = ids[b, t+1], pad at the
// last position and wherever the next token is padding.
std::vector<std::int32_t> next_token_targets(const TokenBatch& batch);

// Shift-by-one cross entropy averaged over non-pad targets.
template <class T>
NodeId lm_loss(Graph<T>& g, NodeId logits, const TokenBatch& batch);

// Per-position next-token losses (natural log) for non-pad targets, in
// row-major order. bias, when given, is added to every logit row.
template <class T>
std::vector<double> token_losses(const Tensor<T>& logits, std::span<const std::int32_t> targets,
                                 const std::vector<double>* bias = nullptr);

// Mean lm loss of batch without building gradients.
template <class T>
double evaluate_loss(const Transformer<T>& model, const TokenBatch& batch,
                     const ForwardOptions& options = {});

extern template class ParamSet<float>;
extern template class ParamSet<double>;
extern template class Transformer<float>;
extern template class Transformer<double>;

}  // namespace sgtm

#include "sgtm/partition.hpp"

#include <algorithm>

namespace sgtm {

const char* to_string(Variant v) {
  switch (v) {
    case Variant::kSgtm: return "sgtm";
    case Variant::kSgtmJointProjection: return "sgtm_joint_projection";
    case Variant::kSgtmJointAttention: return "sgtm_joint_attention";
    case Variant::kGradientRouting: return "gradient_routing";
    case Variant::kActivationMasking: return "activation_masking";
  }
  return "unknown";
}

const char* to_string(Tag t) {
  switch (t) {
    case Tag::kForget: return "forget";
    case Tag::kRetain: return "retain";
    case Tag::kJoint: return "joint";
  }
  return "unknown";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : {Variant::kSgtm, Variant::kSgtmJointProjection, Variant::kSgtmJointAttention,
                    Variant::kGradientRouting, Variant::kActivationMasking}) {
    if (s == to_string(v)) return v;
  }
  throw ConfigError("unknown partition variant '" + s + "'");
}

Tag tag_from_string(const std::string& s) {
  for (Tag t : {Tag::kForget, Tag::kRetain, Tag::kJoint}) {
    if (s == to_string(t)) return t;
  }
  throw ConfigError("unknown designation tag '" + s + "'");
}

void PartitionSpec::validate(const ModelConfig& config) const {
  if (h_forget > config.n_heads) {
    throw ContractError("h_forget (" + std::to_string(h_forget) + ") exceeds n_heads (" +
                        std::to_string(config.n_heads) + ")");
  }
  if (d_forget > config.d_mlp) {
    throw ContractError("d_forget (" + std::to_string(d_forget) + ") exceeds d_mlp (" +
                        std::to_string(config.d_mlp) + ")");
  }
}

ParamDesignation::ParamDesignation(std::vector<Entry> entries) : entries_(std::move(entries)) {
  for (const Entry& e : entries_) {
    std::size_t next = 0;
    for (const TaggedRange& r : e.ranges) {
      if (r.begin != next || r.end <= r.begin) {
        throw ContractError("designation ranges of '" + e.path + "' do not tile the leading axis");
      }
      next = r.end;
    }
    if (e.shape.empty() || next != e.shape[0]) {
      throw ContractError("designation ranges of '" + e.path + "' do not cover the leading axis");
    }
  }
}

std::size_t ParamDesignation::count(Tag tag) const {
  std::size_t n = 0;
  for (const Entry& e : entries_) {
    const std::size_t width = shape_numel(e.shape) / e.shape[0];
    for (const TaggedRange& r : e.ranges) {
      if (r.tag == tag) n += (r.end - r.begin) * width;
    }
  }
  return n;
}

std::size_t ParamDesignation::total_elements() const {
  std::size_t n = 0;
  for (const Entry& e : entries_) n += shape_numel(e.shape);
  return n;
}

ForwardMask ParamDesignation::rows_with(Tag tag) const {
  ForwardMask mask;
  mask.zero_rows.resize(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    for (const TaggedRange& r : entries_[i].ranges) {
      if (r.tag == tag) mask.zero_rows[i].push_back(RowRange{r.begin, r.end});
    }
  }
  return mask;
}

std::vector<std::vector<Tag>> ParamDesignation::element_tags() const {
  std::vector<std::vector<Tag>> out(entries_.size());
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const Entry& e = entries_[i];
    const std::size_t width = shape_numel(e.shape) / e.shape[0];
    out[i].reserve(shape_numel(e.shape));
    for (const TaggedRange& r : e.ranges) {
      out[i].insert(out[i].end(), (r.end - r.begin) * width, r.tag);
    }
  }
  return out;
}

template <class T>
void ParamDesignation::check_matches(const ParamSet<T>& params) const {
  if (params.size() != entries_.size()) {
    throw ContractError("designation covers " + std::to_string(entries_.size()) +
                        " parameters, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (params.path(i) != entries_[i].path || params[i].shape() != entries_[i].shape) {
      throw ContractError("designation entry '" + entries_[i].path +
                          "' does not match parameter '" + params.path(i) + "'");
    }
  }
}

nlohmann::json ParamDesignation::to_json() const {
  nlohmann::json obj = nlohmann::json::object();
  for (const Entry& e : entries_) {
    nlohmann::json ranges = nlohmann::json::array();
    for (const TaggedRange& r : e.ranges) ranges.push_back({r.begin, r.end, to_string(r.tag)});
    obj[e.path] = std::move(ranges);
  }
  return obj;
}

ParamDesignation ParamDesignation::from_json(const nlohmann::json& j, const ModelConfig& config) {
  if (!j.is_object()) throw ConfigError("designation must be an object of path -> ranges");
  const ParamSet<float> shapes(config);
  std::vector<Entry> entries;
  for (const auto& p : shapes) {
    if (!j.contains(p.path)) throw ContractError("designation is missing parameter '" + p.path + "'");
    Entry e;
    e.path = p.path;
    e.shape = p.value.shape();
    for (const auto& r : j.at(p.path)) {
      if (!r.is_array() || r.size() != 3) throw ConfigError("designation range must be [start, end, tag]");
      e.ranges.push_back(TaggedRange{r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>(),
                                     tag_from_string(r.at(2).get<std::string>())});
    }
    entries.push_back(std::move(e));
  }
  if (j.size() != entries.size()) throw ContractError("designation has parameters unknown to the model");
  return ParamDesignation(std::move(entries));
}

bool operator==(const ParamDesignation& a, const ParamDesignation& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    const auto& x = a.entries_[i];
    const auto& y = b.entries_[i];
    if (x.path != y.path || x.shape != y.shape || x.ranges != y.ranges) return false;
  }
  return true;
}

namespace {

// Appends [begin, end) with tag, merging with the previous range when tags match.
void append(std::vector<TaggedRange>& ranges, std::size_t begin, std::size_t end, Tag tag) {
  if (end <= begin) return;
  if (!ranges.empty() && ranges.back().tag == tag && ranges.back().end == begin) {
    ranges.back().end = end;
    return;
  }
  ranges.push_back(TaggedRange{begin, end, tag});
}

std::vector<TaggedRange> whole(std::size_t rows, Tag tag) { return {TaggedRange{0, rows, tag}}; }

std::vector<TaggedRange> leading_split(std::size_t rows, std::size_t n_forget, Tag rest) {
  std::vector<TaggedRange> out;
  append(out, 0, n_forget, Tag::kForget);
  append(out, n_forget, rows, rest);
  return out;
}

}  // namespace

ParamDesignation build_designation(const ModelConfig& config, const PartitionSpec& spec) {
  config.validate();
  spec.validate(config);
  const ParamSet<float> shapes(config);
  const ParamLayout layout = ParamLayout::for_config(config);
  const std::size_t d = config.d_model;
  const std::size_t head_rows = spec.h_forget * config.d_head();
  const Variant v = spec.variant;

  const bool joint_projection =
      v == Variant::kSgtmJointProjection || v == Variant::kSgtmJointAttention;
  const bool routed = v == Variant::kGradientRouting || v == Variant::kActivationMasking;
  const Tag embedding_tag = spec.embeddings_joint ? Tag::kJoint : Tag::kRetain;

  std::vector<std::vector<TaggedRange>> ranges(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    ranges[i] = whole(shapes[i].dim(0), Tag::kJoint);  // layer norms unless overridden below
  }
  ranges[layout.tok_emb] = whole(config.vocab_size, embedding_tag);
  if (layout.unembed) ranges[*layout.unembed] = whole(config.vocab_size, embedding_tag);
  ranges[layout.pos_emb] = whole(config.context_len, Tag::kRetain);

  for (const BlockParams& b : layout.blocks) {
    if (v == Variant::kSgtmJointAttention) {
      ranges[b.w_qkv] = whole(3 * d, Tag::kJoint);
    } else {
      std::vector<TaggedRange> qkv;
      for (std::size_t part = 0; part < 3; ++part) {
        append(qkv, part * d, part * d + head_rows, Tag::kForget);
        append(qkv, part * d + head_rows, (part + 1) * d, Tag::kRetain);
      }
      ranges[b.w_qkv] = std::move(qkv);
    }
    ranges[b.w_1] = leading_split(config.d_mlp, spec.d_forget, Tag::kRetain);
    ranges[b.b_1] = leading_split(config.d_mlp, spec.d_forget, Tag::kRetain);

    if (joint_projection) {
      ranges[b.w_o] = whole(d, Tag::kJoint);
      ranges[b.b_o] = whole(d, Tag::kJoint);
      ranges[b.w_2] = whole(config.d_mlp, Tag::kJoint);
      ranges[b.b_2] = whole(d, Tag::kJoint);
    } else {
      const Tag rest = routed ? Tag::kJoint : Tag::kRetain;
      ranges[b.w_o] = leading_split(d, head_rows, rest);
      ranges[b.b_o] = whole(d, rest);
      ranges[b.w_2] = leading_split(config.d_mlp, spec.d_forget, rest);
      ranges[b.b_2] = whole(d, rest);
    }
  }

  std::vector<ParamDesignation::Entry> entries;
  entries.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    entries.push_back(ParamDesignation::Entry{shapes.path(i), shapes[i].shape(), std::move(ranges[i])});
  }
  return ParamDesignation(std::move(entries));
}

template <class T>
ParamSet<T> ablate(const ParamSet<T>& params, const ParamDesignation& designation) {
  designation.check_matches(params);
  ParamSet<T> out = params;
  const ForwardMask forget = designation.rows_with(Tag::kForget);
  for (std::size_t i = 0; i < out.size(); ++i) zero_rows(out[i], forget.zero_rows[i]);
  return out;
}

template <class T>
Transformer<T> ablate(const Transformer<T>& model, const ParamDesignation& designation) {
  Transformer<T> out = model;
  out.params() = ablate(model.params(), designation);
  return out;
}

template void ParamDesignation::check_matches(const ParamSet<float>&) const;
template void ParamDesignation::check_matches(const ParamSet<double>&) const;
template ParamSet<float> ablate(const ParamSet<float>&, const ParamDesignation&);
template ParamSet<double> ablate(const ParamSet<double>&, const ParamDesignation&);
template Transformer<float> ablate(const Transformer<float>&, const ParamDesignation&);
template Transformer<double> ablate(const Transformer<double>&, const ParamDesignation&);

}  // namespace sgtm

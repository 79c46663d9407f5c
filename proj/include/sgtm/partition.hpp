#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgtm/model.hpp"

namespace sgtm {

enum class Variant : std::uint8_t {
  kSgtm,
  kSgtmJointProjection,
  kSgtmJointAttention,
  kGradientRouting,
  kActivationMasking,
};

enum class Tag : std::uint8_t { kForget, kRetain, kJoint };

const char* to_string(Variant v);
const char* to_string(Tag t);
Variant variant_from_string(const std::string& s);
Tag tag_from_string(const std::string& s);

// Variants whose forget-batch intervention masks parameter gradients.
inline bool masks_parameter_gradients(Variant v) {
  return v == Variant::kSgtm || v == Variant::kSgtmJointProjection ||
         v == Variant::kSgtmJointAttention;
}

struct PartitionSpec {
  std::size_t h_forget = 1;
  std::size_t d_forget = 16;
  Variant variant = Variant::kSgtm;
  bool embeddings_joint = true;

  void validate(const ModelConfig& config) const;
  friend bool operator==(const PartitionSpec&, const PartitionSpec&) = default;
};

struct TaggedRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  Tag tag = Tag::kRetain;
  friend bool operator==(const TaggedRange&, const TaggedRange&) = default;
};

// Forget/retain/joint designation of every parameter element. Ranges run over
// the leading axis of each parameter (rows of matrices, entries of vectors),
// are sorted, and tile the axis exactly once.
class ParamDesignation {
 public:
  struct Entry {
    std::string path;
    Shape shape;
    std::vector<TaggedRange> ranges;
  };

  ParamDesignation() = default;
  explicit ParamDesignation(std::vector<Entry> entries);

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_.at(i); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t count(Tag tag) const;
  std::size_t total_elements() const;
  // Leading-axis row ranges carrying tag, one list per parameter.
  ForwardMask rows_with(Tag tag) const;
  // One byte per element per parameter (Tag value), for element-wise loops.
  std::vector<std::vector<Tag>> element_tags() const;

  // Throws ContractError when paths or shapes differ from params.
  template <class T>
  void check_matches(const ParamSet<T>& params) const;

  // {path: [[start, end, tag], ...]}; shapes and order come from the config.
  nlohmann::json to_json() const;
  static ParamDesignation from_json(const nlohmann::json& j, const ModelConfig& config);

  friend bool operator==(const ParamDesignation& a, const ParamDesignation& b);

 private:
  std::vector<Entry> entries_;
};

ParamDesignation build_designation(const ModelConfig& config, const PartitionSpec& spec);

// Copy of params with every forget-designated element set to zero.
template <class T>
ParamSet<T> ablate(const ParamSet<T>& params, const ParamDesignation& designation);

template <class T>
Transformer<T> ablate(const Transformer<T>& model, const ParamDesignation& designation);

}  // namespace sgtm

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sgtm/model.hpp"
#include "sgtm/partition.hpp"

namespace sgtm {

// One evaluation point. Token counts are cumulative and split by the true
// domain of the examples processed; flops = 6 * params * tokens.
struct MetricsRow {
  std::size_t step = 0;
  std::uint64_t tokens_retain = 0;
  std::uint64_t tokens_forget = 0;
  double flops = 0;
  double loss_retain_test = 0;
  double loss_forget_test = 0;
  double loss_related_test = 0;
};

struct Snapshot {
  std::size_t step = 0;
  ParamSet<float> params;  // as trained (pre-ablation for routed methods)
};

struct RunRecord {
  std::string method;
  ModelConfig model;
  std::optional<PartitionSpec> partition;  // set for methods that ablate
  std::uint64_t seed = 0;
  std::size_t n_params = 0;
  std::vector<MetricsRow> metrics;
  std::vector<Snapshot> snapshots;
  // Forget-domain tokens that reached training through unlabeled batches.
  std::uint64_t tokens_forget_unlabeled = 0;
  bool diverged = false;
  std::string diagnostic;

  const MetricsRow& final_metrics() const;
};

}  // namespace sgtm

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sgtm/eval.hpp"
#include "sgtm/model.hpp"
#include "sgtm/partition.hpp"
#include "sgtm/run_record.hpp"

namespace sgtm {

// Checkpoint file (see docs/checkpoint_format.md):
//   8 bytes  magic "SGTMCKPT"
//   u64      header length in bytes (little endian)
//   header   UTF-8 JSON
//   blobs    float32 little endian, one per parameter, declaration order
struct Checkpoint {
  nlohmann::json header;
  ModelConfig model;
  std::optional<PartitionSpec> partition;
  std::size_t step = 0;
  std::string method;
  ParamSet<float> params;
  std::optional<nlohmann::json> experiment;  // full experiment config, when recorded
};

inline constexpr int kCheckpointVersion = 1;

// extra is merged into the header (experiment config, seeds, ...).
void write_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                      const std::optional<PartitionSpec>& partition, const ParamSet<float>& params,
                      std::size_t step, const std::string& method,
                      const nlohmann::json& extra = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& path);

// metrics.csv with a fixed column order.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// Exclusive lock on a run directory, released on destruction.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string code_version;
  nlohmann::json seeds;
  std::string started;
  std::string finished;
  std::vector<std::string> artifacts;  // relative to the run directory
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

std::string utc_timestamp();
const char* code_version();

// Refuses to overwrite an existing manifest.
void write_manifest(const std::filesystem::path& dir, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& dir);
bool run_complete(const std::filesystem::path& dir);

// Writes metrics.csv, record.json and checkpoints/step_NNNNNN.ckpt; returns
// the artifact paths relative to dir.
std::vector<std::string> save_run(const std::filesystem::path& dir, const RunRecord& record,
                                  const nlohmann::json& experiment);
RunRecord load_run(const std::filesystem::path& dir, bool with_snapshots = false);

// Path of the newest checkpoint of a run directory.
std::filesystem::path latest_checkpoint(const std::filesystem::path& dir);

void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace sgtm

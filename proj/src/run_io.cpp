#include "sgtm/run_io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include "binary_io.hpp"
#include "sgtm/experiment.hpp"

#ifndef SGTM_VERSION
#define SGTM_VERSION "unknown"
#endif

namespace sgtm {

namespace {
constexpr char kCheckpointMagic[9] = "SGTMCKPT";
}

void write_checkpoint(const std::filesystem::path& path, const ModelConfig& model,
                      const std::optional<PartitionSpec>& partition, const ParamSet<float>& params,
                      std::size_t step, const std::string& method, const nlohmann::json& extra) {
  const ParamSet<float> expected(model);
  if (expected.size() != params.size()) throw ContractError("checkpoint: parameters do not match config");
  nlohmann::json header = extra.is_object() ? extra : nlohmann::json::object();
  header["format_version"] = kCheckpointVersion;
  header["model"] = to_json(model);
  header["step"] = step;
  header["method"] = method;
  header["partition"] = partition ? to_json(*partition) : nlohmann::json(nullptr);
  header["designation"] =
      partition ? build_designation(model, *partition).to_json() : nlohmann::json(nullptr);
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.path(i) != expected.path(i) || params[i].shape() != expected[i].shape()) {
      throw ContractError("checkpoint: parameter " + params.path(i) + " does not match config");
    }
    entries.push_back({{"path", params.path(i)},
                       {"shape", params[i].shape()},
                       {"offset", offset},
                       {"numel", params[i].numel()}});
    offset += params[i].numel() * 4;
  }
  header["params"] = entries;
  header["blob_bytes"] = offset;

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    const std::string text = header.dump();
    detail::write_magic(out, kCheckpointMagic);
    detail::write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& e : params) {
      for (float v : e.value.data()) detail::write_f32(out, v);
    }
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  detail::expect_magic(in, kCheckpointMagic, path.string());
  const auto len = detail::read_le<std::uint64_t>(in);
  if (len > (1ULL << 30)) throw IoError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw IoError(path.string() + ": truncated header");
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(text);
    if (ck.header.at("format_version").get<int>() != kCheckpointVersion) {
      throw IoError(path.string() + ": unsupported checkpoint format_version");
    }
    ck.model = model_config_from_json(ck.header.at("model"));
    ck.model.validate();
    if (!ck.header.at("partition").is_null()) ck.partition = partition_from_json(ck.header.at("partition"));
    ck.step = ck.header.at("step").get<std::size_t>();
    ck.method = ck.header.at("method").get<std::string>();
    if (ck.header.contains("experiment")) ck.experiment = ck.header.at("experiment");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": corrupt checkpoint header: " + e.what());
  }
  ck.params = ParamSet<float>(ck.model);
  const auto& entries = ck.header.at("params");
  if (entries.size() != ck.params.size()) throw IoError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    if (entries[i].at("path").get<std::string>() != ck.params.path(i) ||
        entries[i].at("shape").get<Shape>() != ck.params[i].shape()) {
      throw IoError(path.string() + ": parameter " + ck.params.path(i) + " does not match header config");
    }
    for (float& v : ck.params[i].data()) v = detail::read_f32(in);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes after blobs");
  return ck;
}

// ---------------------------------------------------------------------------

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,tokens_retain,tokens_forget,flops,loss_retain_test,loss_forget_test,loss_related_test\n";
  char buf[512];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%llu,%llu,%.17g,%.17g,%.17g,%.17g\n", r.step,
                  static_cast<unsigned long long>(r.tokens_retain),
                  static_cast<unsigned long long>(r.tokens_forget), r.flops, r.loss_retain_test,
                  r.loss_forget_test, r.loss_related_test);
    out << buf;
  }
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("step,tokens_retain,tokens_forget,flops", 0) != 0) {
    throw IoError(path.string() + ": unexpected metrics header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw IoError(path.string() + ": malformed metrics row");
    try {
      MetricsRow r;
      r.step = std::stoull(cells[0]);
      r.tokens_retain = std::stoull(cells[1]);
      r.tokens_forget = std::stoull(cells[2]);
      r.flops = std::stod(cells[3]);
      r.loss_retain_test = std::stod(cells[4]);
      r.loss_forget_test = std::stod(cells[5]);
      r.loss_related_test = std::stod(cells[6]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw IoError(path.string() + ": malformed metrics value");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------

RunLock::RunLock(const std::filesystem::path& dir) : path_(dir / "run.lock") {
  std::filesystem::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw IoError(dir.string() + " is locked by another writer (" + path_.string() + ")");
    throw IoError("cannot create " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

nlohmann::json RunManifest::to_json() const {
  return {{"command", command},   {"config_hash", config_hash}, {"code_version", code_version},
          {"seeds", seeds},       {"started", started},         {"finished", finished},
          {"artifacts", artifacts}, {"extra", extra}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.code_version = j.at("code_version").get<std::string>();
  m.seeds = j.at("seeds");
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
  m.extra = j.value("extra", nlohmann::json::object());
  return m;
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

const char* code_version() { return SGTM_VERSION; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_manifest(const std::filesystem::path& dir, const RunManifest& manifest) {
  const auto path = dir / "manifest.json";
  if (std::filesystem::exists(path)) throw IoError(path.string() + " already exists; manifests are immutable");
  for (const std::string& a : manifest.artifacts) {
    if (!std::filesystem::exists(dir / a)) throw ContractError("manifest references missing artifact " + a);
  }
  write_json(path, manifest.to_json());
}

RunManifest read_manifest(const std::filesystem::path& dir) {
  try {
    return RunManifest::from_json(read_json(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
}

bool run_complete(const std::filesystem::path& dir) {
  return std::filesystem::exists(dir / "manifest.json");
}

// ---------------------------------------------------------------------------

std::vector<std::string> save_run(const std::filesystem::path& dir, const RunRecord& record,
                                  const nlohmann::json& experiment) {
  std::filesystem::create_directories(dir / "checkpoints");
  std::vector<std::string> artifacts;
  write_metrics_csv(dir / "metrics.csv", record.metrics);
  artifacts.push_back("metrics.csv");
  for (const Snapshot& s : record.snapshots) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoints/step_%06zu.ckpt", s.step);
    write_checkpoint(dir / name, record.model, record.partition, s.params, s.step, record.method,
                     {{"experiment", experiment}, {"seed", record.seed}});
    artifacts.push_back(name);
  }
  nlohmann::json rec = {{"method", record.method},
                        {"seed", record.seed},
                        {"n_params", record.n_params},
                        {"model", to_json(record.model)},
                        {"partition", record.partition ? to_json(*record.partition) : nlohmann::json(nullptr)},
                        {"tokens_forget_unlabeled", record.tokens_forget_unlabeled},
                        {"diverged", record.diverged},
                        {"diagnostic", record.diagnostic}};
  write_json(dir / "record.json", rec);
  artifacts.push_back("record.json");
  return artifacts;
}

RunRecord load_run(const std::filesystem::path& dir, bool with_snapshots) {
  if (!std::filesystem::exists(dir / "record.json")) {
    throw IoError(dir.string() + " is not a run directory (record.json missing)");
  }
  const nlohmann::json rec = read_json(dir / "record.json");
  RunRecord r;
  try {
    r.method = rec.at("method").get<std::string>();
    r.seed = rec.at("seed").get<std::uint64_t>();
    r.n_params = rec.at("n_params").get<std::size_t>();
    r.model = model_config_from_json(rec.at("model"));
    if (!rec.at("partition").is_null()) r.partition = partition_from_json(rec.at("partition"));
    r.tokens_forget_unlabeled = rec.at("tokens_forget_unlabeled").get<std::uint64_t>();
    r.diverged = rec.at("diverged").get<bool>();
    r.diagnostic = rec.at("diagnostic").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "record.json").string() + ": " + e.what());
  }
  r.metrics = read_metrics_csv(dir / "metrics.csv");
  if (with_snapshots && std::filesystem::exists(dir / "checkpoints")) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir / "checkpoints")) {
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      Checkpoint ck = read_checkpoint(f);
      r.snapshots.push_back({ck.step, std::move(ck.params)});
    }
  }
  return r;
}

std::filesystem::path latest_checkpoint(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::exists(dir / "checkpoints")) {
    for (const auto& e : std::filesystem::directory_iterator(dir / "checkpoints")) {
      if (e.path().extension() == ".ckpt") files.push_back(e.path());
    }
  }
  if (files.empty()) throw IoError(dir.string() + " has no checkpoints");
  std::sort(files.begin(), files.end());
  return files.back();
}

}  // namespace sgtm

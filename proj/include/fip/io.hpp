#pragma once

// Persistence: checkpoints, path directories, run logs and JSON views of the
// domain types.
//
// Checkpoint layout (all integers little-endian):
//   "FIPC" | u32 header length | UTF-8 JSON header | n x f64 payload | u64 checksum
// The checksum is FNV-1a 64 over the payload bytes and is also stored in the
// header as a 16-digit hex string.

#include "fip/metric.hpp"
#include "fip/path.hpp"

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

namespace fip {

using Json = nlohmann::json;

inline constexpr int checkpoint_format_version = 1;

Json to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const Json& j);
Json to_json(const PathConfig& cfg);
PathConfig path_config_from_json(const Json& j, PathConfig defaults = {});
Json to_json(const SpectrumReport& report);

std::uint64_t payload_checksum(const Eigen::VectorXd& payload);
std::string hex64(std::uint64_t value);

struct Checkpoint {
    NetworkSpec spec;
    Eigen::VectorXd weights;
    Json metadata = Json::object();
    Json provenance = Json::array(); ///< operations applied, oldest first
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Writes index.json plus one checkpoint per persisted step (and the start point).
void save_path(const std::filesystem::path& dir, const FIPath& path);

/// Restores config, per-step scalars and the persisted weights; steps that were not
/// persisted come back with empty weight vectors.
FIPath load_path(const std::filesystem::path& dir);

/// Append-only line-delimited JSON log. Every record carries `run_id` and a
/// monotone `seq`; `wall_ms` is the only non-deterministic field.
class RunLog {
public:
    explicit RunLog(std::string run_id = "run");

    const std::string& run_id() const noexcept { return run_id_; }
    const std::vector<Json>& records() const noexcept { return records_; }
    bool empty() const noexcept { return records_.empty(); }

    /// Mirrors every subsequent record to `file` (appending).
    void attach(const std::filesystem::path& file);

    const Json& append(const std::string& phase, Json fields);

    /// Records of one phase, in order.
    std::vector<Json> phase(const std::string& name) const;

    /// Records with wall-clock fields removed, for reproducibility checks.
    std::vector<Json> deterministic_view() const;

    static RunLog read(const std::filesystem::path& file);

private:
    std::string run_id_;
    std::vector<Json> records_;
    std::shared_ptr<std::ofstream> sink_;
};

/// Exclusive ownership of an output directory through a lock file.
class OutputLock {
public:
    explicit OutputLock(const std::filesystem::path& dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    std::filesystem::path file_;
};

} // namespace fip

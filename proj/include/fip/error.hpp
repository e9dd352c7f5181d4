#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace fip {

enum class Errc {
    invalid_argument,
    dimension_mismatch,
    non_finite,
    missing_labels,
    label_out_of_range,
    cap_exceeded,
    duplicate_task,
    unknown_task,
    empty_batch,
    infeasible,
    insufficient_steps,
    io_error,
    bad_magic,
    truncated,
    count_mismatch,
    checksum_mismatch,
    unsupported_version,
    divergence,
    config_error,
    locked,
};

constexpr std::string_view to_string(Errc code) noexcept
{
    switch (code) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::dimension_mismatch: return "dimension_mismatch";
    case Errc::non_finite: return "non_finite";
    case Errc::missing_labels: return "missing_labels";
    case Errc::label_out_of_range: return "label_out_of_range";
    case Errc::cap_exceeded: return "cap_exceeded";
    case Errc::duplicate_task: return "duplicate_task";
    case Errc::unknown_task: return "unknown_task";
    case Errc::empty_batch: return "empty_batch";
    case Errc::infeasible: return "infeasible";
    case Errc::insufficient_steps: return "insufficient_steps";
    case Errc::io_error: return "io_error";
    case Errc::bad_magic: return "bad_magic";
    case Errc::truncated: return "truncated";
    case Errc::count_mismatch: return "count_mismatch";
    case Errc::checksum_mismatch: return "checksum_mismatch";
    case Errc::unsupported_version: return "unsupported_version";
    case Errc::divergence: return "divergence";
    case Errc::config_error: return "config_error";
    case Errc::locked: return "locked";
    }
    return "unknown";
}

/// Error carrying a machine-readable code; `what()` holds the human-readable detail.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(message), code_(code)
    { }

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

} // namespace fip

#pragma once

#include "insitu/trace.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace insitu {

// Per-query accounting: c (tools created), u (tool invocations).
struct QuerySample {
  std::string query_id;
  std::uint64_t c = 0;
  std::uint64_t u = 0;
  std::uint64_t successes = 0;
  std::uint64_t tool_tokens = 0;

  bool operator==(const QuerySample&) const = default;
};

// Associative, commutative running sums; merged at the batch barrier and
// carried in checkpoints.
struct MetricSums {
  std::uint64_t queries = 0;
  std::uint64_t c = 0;
  std::uint64_t u = 0;
  std::uint64_t successes = 0;
  std::uint64_t tool_tokens = 0;

  void add(const QuerySample& s);
  MetricSums& operator+=(const MetricSums& o);
  bool operator==(const MetricSums&) const = default;
};

MetricSums sum_samples(std::span<const QuerySample> samples);

// (sum c / sum u) * 1000; nullopt when sum u == 0.
std::optional<double> compute_egl(std::span<const QuerySample> samples);
std::optional<double> compute_egl(const MetricSums& sums);

// sum successes / sum u; nullopt when sum u == 0.
std::optional<double> compute_success_rate(std::span<const QuerySample> samples);

// sum tool_tokens / sum u; nullopt when sum u == 0.
std::optional<double> compute_avg_tokens_per_invocation(std::span<const QuerySample> samples);

struct LibraryPoint {
  std::uint64_t cumulative_queries = 0;
  std::uint64_t library_size = 0;
  bool operator==(const LibraryPoint&) const = default;
};

struct BatchPoint {
  std::uint64_t batch_index = 0;
  std::optional<double> success_rate;
  std::optional<double> avg_tokens;
  bool operator==(const BatchPoint&) const = default;
};

struct ReplayMetrics {
  std::vector<QuerySample> samples;  // stream order
  std::vector<LibraryPoint> library;  // one per commit
  std::vector<BatchPoint> batches;
  std::optional<double> egl;
  std::optional<double> success_rate;
  std::optional<double> avg_tokens;

  bool operator==(const ReplayMetrics&) const = default;
};

// Recomputes every metric from trace events alone.
ReplayMetrics replay(std::span<const TraceEvent> events);
ReplayMetrics replay_file(const std::filesystem::path& trace_path);

struct ExportOptions {
  // 0 = cumulative EGL; otherwise EGL over the trailing `egl_window` queries.
  std::size_t egl_window = 0;
};

inline constexpr int kExportFormatVersion = 1;

// Writes library_size.csv, egl.csv, batches.csv and export_manifest.json.
// Returns the written paths.
std::vector<std::filesystem::path> export_curves(const ReplayMetrics& metrics, const std::filesystem::path& out_dir,
                                                 const ExportOptions& options = {});

// Fixed-precision rendering used in exports; "nan" for undefined.
std::string format_metric(std::optional<double> value);

nlohmann::json to_json(const ReplayMetrics& m);

}  // namespace insitu

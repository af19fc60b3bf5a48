#pragma once

// Parallel batch evolution: jobs of a batch run concurrently against one
// frozen snapshot; at the barrier their new tools are clustered, merged and
// committed as the next snapshot.

#include "insitu/llm_gateway.hpp"
#include "insitu/metrics.hpp"
#include "insitu/prompt_suite.hpp"
#include "insitu/sandbox.hpp"
#include "insitu/tool_registry.hpp"
#include "insitu/trace.hpp"
#include "insitu/workflow.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace insitu {

inline constexpr std::size_t kDefaultBatchSize = 16;

struct AbsorbConfig {
  int aggregator_retries = 1;
  // Let the merger consolidate clusters made only of pre-existing tools.
  bool allow_global_remerge = false;
};

struct EvolutionConfig {
  std::size_t batch_size = kDefaultBatchSize;
  std::size_t worker_cap = 8;
  WorkflowConfig workflow;
  AbsorbConfig absorb;
};

// Every candidate appears in exactly one cluster and nothing else appears.
// Returns a description of the first violation.
std::optional<std::string> validate_partition(const ClusterPlan& plan, const std::vector<std::string>& candidates);

ClusterPlan singleton_plan(const std::vector<std::string>& candidates);

struct ClusterOutcome {
  enum class Kind { passthrough, merged, fallback } kind = Kind::passthrough;
  std::vector<std::string> members;
  std::string survivor;  // name after absorbing
  std::string reason;    // fallback only
};

struct AbsorbResult {
  UnionUpdate update;
  ClusterPlan plan;
  std::vector<ClusterOutcome> outcomes;
  bool degraded = false;
  std::size_t aggregator_calls = 0;
  std::size_t merger_calls = 0;
};

struct AbsorbInput {
  const RegistrySnapshot& global;
  std::vector<LocalTool> locals;                  // query order
  std::map<std::string, ToolStats> global_usage;  // this batch's usage of snapshot records
};

// The record a passthrough local tool becomes at `step`.
ToolRecord record_from_local(const LocalTool& local, std::uint64_t step);

// Names that collide within the batch get _v2, _v3, ... in query order.
std::vector<LocalTool> disambiguate_locals(const RegistrySnapshot& global, std::vector<LocalTool> locals);

AbsorbResult absorb(const AbsorbInput& input, Gateway& gateway, ToolRunner& runner, const PromptSuite& prompts,
                    const AbsorbConfig& config, EventSink& sink);

struct BatchReport {
  std::size_t batch_index = 0;
  std::size_t stream_offset = 0;  // queries consumed after this batch
  std::vector<QueryOutcome> outcomes;
  SnapshotPtr snapshot;
  MetricSums batch_sums;
  MetricSums cumulative;
};

struct Checkpoint {
  std::size_t stream_offset = 0;
  std::size_t batches_done = 0;
  SnapshotPtr snapshot;
  MetricSums cumulative;
};

class StreamSink {
 public:
  virtual ~StreamSink() = default;
  virtual void on_batch(const BatchReport& report) = 0;
  // Called when the stream ends before its last query.
  virtual void on_checkpoint(const Checkpoint& checkpoint) = 0;
};

enum class StreamStatus { completed, stopped, aborted };

struct StreamResult {
  StreamStatus status = StreamStatus::completed;
  SnapshotPtr snapshot;
  std::size_t stream_offset = 0;
  MetricSums cumulative;
  std::string error;
};

struct StreamOptions {
  std::size_t start_offset = 0;
  std::size_t start_batch = 0;
  MetricSums start_sums;
  std::function<bool()> should_stop;  // polled at each barrier
};

// Consecutive slices of at most `batch_size`, in order.
std::vector<std::vector<QueryJob>> partition_stream(const std::vector<QueryJob>& stream, std::size_t batch_size);

class EvolutionEngine {
 public:
  EvolutionEngine(Gateway& gateway, ToolRunner& runner, const PromptSuite& prompts, EvolutionConfig config);

  // Runs one batch against `snapshot` and commits at the barrier. Events go to
  // `trace` in a scheduling-independent order.
  BatchReport run_batch(SnapshotPtr snapshot, const std::vector<QueryJob>& batch, std::size_t batch_index,
                        std::uint64_t cumulative_before, EventSink& trace);

  StreamResult run_stream(SnapshotPtr state0, const std::vector<QueryJob>& stream, EventSink& trace,
                          StreamSink& sink, const StreamOptions& options = {});

  const EvolutionConfig& config() const { return config_; }

 private:
  Gateway& gateway_;
  ToolRunner& runner_;
  const PromptSuite& prompts_;
  EvolutionConfig config_;
};

}  // namespace insitu

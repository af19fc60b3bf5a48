#pragma once

// Append-only event trace. One JSON document per line; each line carries
// a digest chained over the previous line's digest so truncation, edits and
// reordering are detected on read.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace insitu {

inline constexpr int kTraceFormatVersion = 1;

enum class EventKind { header, phase, llm_exchange, invocation, validation, batch_boundary, absorb, commit };

std::string_view to_string(EventKind kind);
std::optional<EventKind> parse_event_kind(std::string_view text);

struct TraceEvent {
  std::uint64_t seq = 0;
  std::int64_t timestamp = 0;
  EventKind kind = EventKind::phase;
  nlohmann::json payload = nlohmann::json::object();
  std::string digest;

  // The line as written (without trailing newline).
  std::string to_line() const;
};

// Digest of an event given the digest of its predecessor ("" for the first).
std::string chain_digest(std::string_view prev_digest, const TraceEvent& event);

class TraceCorruption : public std::runtime_error {
 public:
  TraceCorruption(std::uint64_t seq, const std::string& what)
      : std::runtime_error("trace corrupt at seq " + std::to_string(seq) + ": " + what), seq_(seq) {}
  std::uint64_t seq() const noexcept { return seq_; }

 private:
  std::uint64_t seq_;
};

class EventSink {
 public:
  virtual ~EventSink() = default;
  virtual void emit(EventKind kind, nlohmann::json payload) = 0;
};

// Discards everything.
class NullSink final : public EventSink {
 public:
  void emit(EventKind, nlohmann::json) override {}
};

// Worker-local buffer; drained into the trace at the batch barrier so that
// event order does not depend on thread scheduling.
class EventBuffer final : public EventSink {
 public:
  struct Entry {
    EventKind kind;
    nlohmann::json payload;
  };

  void emit(EventKind kind, nlohmann::json payload) override;
  const std::vector<Entry>& entries() const { return entries_; }
  void drain_into(EventSink& sink);

 private:
  std::vector<Entry> entries_;
};

// Timestamp source. The logical clock makes timestamps equal to sequence
// numbers so scripted runs produce byte-identical traces.
struct Clock {
  std::function<std::int64_t(std::uint64_t seq)> now;
  bool deterministic = false;

  static Clock wall();
  static Clock logical();
};

// Single serialized appender; sequence numbers are assigned here.
class TraceWriter final : public EventSink {
 public:
  // Truncates `path` and starts a new chain.
  TraceWriter(const std::filesystem::path& path, Clock clock);

  // Verifies the existing file and continues its chain.
  static TraceWriter resume(const std::filesystem::path& path, Clock clock);

  TraceWriter(TraceWriter&&) noexcept;
  TraceWriter& operator=(TraceWriter&&) = delete;
  ~TraceWriter() override;

  void emit(EventKind kind, nlohmann::json payload) override;
  std::uint64_t next_seq() const;
  const Clock& clock() const { return clock_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  TraceWriter(const std::filesystem::path& path, Clock clock, std::uint64_t next_seq, std::string last_digest);

  std::filesystem::path path_;
  Clock clock_;
  std::ofstream out_;
  mutable std::mutex mu_;
  std::uint64_t next_seq_ = 0;
  std::string last_digest_;
};

// In-memory sink with the same sequencing and chaining as TraceWriter.
class MemoryTrace final : public EventSink {
 public:
  explicit MemoryTrace(Clock clock = Clock::logical()) : clock_(std::move(clock)) {}
  void emit(EventKind kind, nlohmann::json payload) override;
  std::vector<TraceEvent> events() const;

 private:
  Clock clock_;
  mutable std::mutex mu_;
  std::vector<TraceEvent> events_;
};

// Reads and verifies a trace file: sequence continuity and the digest chain.
std::vector<TraceEvent> read_trace(const std::filesystem::path& path);
std::vector<TraceEvent> parse_trace(std::string_view text);

}  // namespace insitu

#include "insitu/trace.hpp"

#include "insitu/digest.hpp"

#include <chrono>
#include <sstream>

namespace insitu {

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::header: return "header";
    case EventKind::phase: return "phase";
    case EventKind::llm_exchange: return "llm_exchange";
    case EventKind::invocation: return "invocation";
    case EventKind::validation: return "validation";
    case EventKind::batch_boundary: return "batch_boundary";
    case EventKind::absorb: return "absorb";
    case EventKind::commit: return "commit";
  }
  return "unknown";
}

std::optional<EventKind> parse_event_kind(std::string_view text) {
  for (EventKind k : {EventKind::header, EventKind::phase, EventKind::llm_exchange, EventKind::invocation,
                      EventKind::validation, EventKind::batch_boundary, EventKind::absorb, EventKind::commit}) {
    if (to_string(k) == text) return k;
  }
  return std::nullopt;
}

namespace {

nlohmann::json body_of(const TraceEvent& e) {
  return nlohmann::json{{"seq", e.seq}, {"ts", e.timestamp}, {"kind", std::string(to_string(e.kind))},
                        {"payload", e.payload}};
}

TraceEvent make_event(std::uint64_t seq, const Clock& clock, EventKind kind, nlohmann::json payload,
                      const std::string& prev) {
  TraceEvent e;
  e.seq = seq;
  e.timestamp = clock.now(seq);
  e.kind = kind;
  e.payload = std::move(payload);
  e.digest = chain_digest(prev, e);
  return e;
}

}  // namespace

std::string chain_digest(std::string_view prev_digest, const TraceEvent& event) {
  std::string material(prev_digest);
  material.push_back('\n');
  material += body_of(event).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  return sha256_hex(material);
}

std::string TraceEvent::to_line() const {
  auto j = body_of(*this);
  j["digest"] = digest;
  return j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

void EventBuffer::emit(EventKind kind, nlohmann::json payload) {
  entries_.push_back({kind, std::move(payload)});
}

void EventBuffer::drain_into(EventSink& sink) {
  for (auto& e : entries_) sink.emit(e.kind, std::move(e.payload));
  entries_.clear();
}

Clock Clock::wall() {
  return Clock{[](std::uint64_t) {
                 return std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::system_clock::now().time_since_epoch())
                     .count();
               },
               false};
}

Clock Clock::logical() {
  return Clock{[](std::uint64_t seq) { return static_cast<std::int64_t>(seq); }, true};
}

TraceWriter::TraceWriter(const std::filesystem::path& path, Clock clock)
    : TraceWriter(path, std::move(clock), 0, {}) {}

TraceWriter::TraceWriter(const std::filesystem::path& path, Clock clock, std::uint64_t next_seq,
                         std::string last_digest)
    : path_(path), clock_(std::move(clock)), next_seq_(next_seq), last_digest_(std::move(last_digest)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  out_.open(path_, next_seq_ == 0 ? std::ios::trunc : std::ios::app);
  if (!out_) throw std::runtime_error("cannot open trace file " + path_.string());
}

TraceWriter TraceWriter::resume(const std::filesystem::path& path, Clock clock) {
  auto events = read_trace(path);
  if (events.empty()) return TraceWriter(path, std::move(clock));
  return TraceWriter(path, std::move(clock), events.back().seq + 1, events.back().digest);
}

TraceWriter::TraceWriter(TraceWriter&& other) noexcept
    : path_(std::move(other.path_)),
      clock_(std::move(other.clock_)),
      out_(std::move(other.out_)),
      next_seq_(other.next_seq_),
      last_digest_(std::move(other.last_digest_)) {}

TraceWriter::~TraceWriter() = default;

void TraceWriter::emit(EventKind kind, nlohmann::json payload) {
  std::lock_guard lock(mu_);
  auto e = make_event(next_seq_, clock_, kind, std::move(payload), last_digest_);
  out_ << e.to_line() << '\n';
  out_.flush();
  if (!out_) throw std::runtime_error("trace write failed: " + path_.string());
  ++next_seq_;
  last_digest_ = e.digest;
}

std::uint64_t TraceWriter::next_seq() const {
  std::lock_guard lock(mu_);
  return next_seq_;
}

void MemoryTrace::emit(EventKind kind, nlohmann::json payload) {
  std::lock_guard lock(mu_);
  std::string prev = events_.empty() ? std::string() : events_.back().digest;
  events_.push_back(make_event(events_.size(), clock_, kind, std::move(payload), prev));
}

std::vector<TraceEvent> MemoryTrace::events() const {
  std::lock_guard lock(mu_);
  return events_;
}

std::vector<TraceEvent> parse_trace(std::string_view text) {
  std::vector<TraceEvent> events;
  std::string prev;
  std::istringstream in{std::string(text)};
  std::string line;
  std::uint64_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw TraceCorruption(expected, std::string("unparseable line: ") + ex.what());
    }
    TraceEvent e;
    try {
      e.seq = j.at("seq").get<std::uint64_t>();
      e.timestamp = j.at("ts").get<std::int64_t>();
      auto kind = parse_event_kind(j.at("kind").get<std::string>());
      if (!kind) throw TraceCorruption(expected, "unknown event kind");
      e.kind = *kind;
      e.payload = j.at("payload");
      e.digest = j.at("digest").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw TraceCorruption(expected, std::string("malformed event: ") + ex.what());
    }
    if (e.seq != expected) {
      throw TraceCorruption(expected, "sequence gap (found " + std::to_string(e.seq) + ")");
    }
    if (chain_digest(prev, e) != e.digest) throw TraceCorruption(e.seq, "digest mismatch");
    prev = e.digest;
    ++expected;
    events.push_back(std::move(e));
  }
  if (!text.empty() && text.back() != '\n') {
    throw TraceCorruption(expected == 0 ? 0 : expected - 1, "truncated final line");
  }
  return events;
}

std::vector<TraceEvent> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trace file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_trace(ss.str());
}

}  // namespace insitu

#include "insitu/trace.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace insitu;
using testsupport::TempDir;
using testsupport::read_file;
using testsupport::write_file;

namespace {

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

}  // namespace

TEST(EventKinds, RoundTrip) {
  for (auto k : {EventKind::header, EventKind::phase, EventKind::llm_exchange, EventKind::invocation,
                 EventKind::validation, EventKind::batch_boundary, EventKind::absorb, EventKind::commit}) {
    EXPECT_EQ(parse_event_kind(to_string(k)), k);
  }
  EXPECT_FALSE(parse_event_kind("nope").has_value());
}

TEST(TraceWriter, WritesVerifiableChain) {
  TempDir dir;
  {
    TraceWriter w(dir / "t.jsonl", Clock::logical());
    w.emit(EventKind::header, {{"a", 1}});
    w.emit(EventKind::phase, {{"query_id", "q1"}});
    w.emit(EventKind::commit, {{"step", 1}});
    EXPECT_EQ(w.next_seq(), 3u);
  }
  auto events = read_trace(dir / "t.jsonl");
  ASSERT_EQ(events.size(), 3u);
  std::string prev;
  for (std::size_t i = 0; i < events.size(); ++i) {
    EXPECT_EQ(events[i].seq, i);
    EXPECT_EQ(events[i].timestamp, static_cast<std::int64_t>(i));
    EXPECT_EQ(events[i].digest, chain_digest(prev, events[i]));
    prev = events[i].digest;
  }
  EXPECT_EQ(events[1].payload.at("query_id"), "q1");
}

TEST(TraceWriter, LogicalClockIsByteStable) {
  TempDir dir;
  for (const char* name : {"a.jsonl", "b.jsonl"}) {
    TraceWriter w(dir / name, Clock::logical());
    w.emit(EventKind::header, {{"x", "y"}});
    w.emit(EventKind::invocation, {{"status", "ok"}});
  }
  EXPECT_EQ(read_file(dir / "a.jsonl"), read_file(dir / "b.jsonl"));
}

TEST(ReadTrace, DetectsEditedLine) {
  TempDir dir;
  {
    TraceWriter w(dir / "t.jsonl", Clock::logical());
    for (int i = 0; i < 4; ++i) w.emit(EventKind::phase, {{"i", i}});
  }
  auto lines = lines_of(read_file(dir / "t.jsonl"));
  auto pos = lines[2].find("\"i\":2");
  ASSERT_NE(pos, std::string::npos);
  lines[2].replace(pos, 5, "\"i\":9");
  write_file(dir / "t.jsonl", join_lines(lines));
  try {
    read_trace(dir / "t.jsonl");
    FAIL() << "expected corruption";
  } catch (const TraceCorruption& e) {
    EXPECT_EQ(e.seq(), 2u);
  }
}

TEST(ReadTrace, DetectsMissingAndReorderedLines) {
  TempDir dir;
  {
    TraceWriter w(dir / "t.jsonl", Clock::logical());
    for (int i = 0; i < 4; ++i) w.emit(EventKind::phase, {{"i", i}});
  }
  auto lines = lines_of(read_file(dir / "t.jsonl"));
  auto dropped = lines;
  dropped.erase(dropped.begin() + 1);
  EXPECT_THROW(parse_trace(join_lines(dropped)), TraceCorruption);
  auto swapped = lines;
  std::swap(swapped[1], swapped[2]);
  EXPECT_THROW(parse_trace(join_lines(swapped)), TraceCorruption);
  EXPECT_THROW(parse_trace(join_lines(lines) + "{not json\n"), TraceCorruption);
}

TEST(TraceWriter, ResumeContinuesChain) {
  TempDir dir;
  {
    TraceWriter w(dir / "t.jsonl", Clock::logical());
    w.emit(EventKind::header, {});
    w.emit(EventKind::phase, {});
  }
  {
    auto w = TraceWriter::resume(dir / "t.jsonl", Clock::logical());
    EXPECT_EQ(w.next_seq(), 2u);
    w.emit(EventKind::commit, {{"step", 1}});
  }
  auto events = read_trace(dir / "t.jsonl");
  ASSERT_EQ(events.size(), 3u);
  EXPECT_EQ(events[2].kind, EventKind::commit);
}

TEST(TraceWriter, ResumeRejectsCorruptFile) {
  TempDir dir;
  write_file(dir / "t.jsonl", "{\"seq\":1}\n");
  EXPECT_THROW(TraceWriter::resume(dir / "t.jsonl", Clock::logical()), TraceCorruption);
}

TEST(EventBuffer, DrainsInEmissionOrder) {
  EventBuffer buf;
  buf.emit(EventKind::phase, {{"n", 1}});
  buf.emit(EventKind::invocation, {{"n", 2}});
  MemoryTrace t;
  t.emit(EventKind::header, {});
  buf.drain_into(t);
  auto events = t.events();
  ASSERT_EQ(events.size(), 3u);
  EXPECT_EQ(events[1].payload.at("n"), 1);
  EXPECT_EQ(events[2].kind, EventKind::invocation);
  EXPECT_EQ(events[2].seq, 2u);
}

TEST(MemoryTrace, MatchesFileChain) {
  TempDir dir;
  MemoryTrace mem;
  {
    TraceWriter w(dir / "t.jsonl", Clock::logical());
    for (int i = 0; i < 3; ++i) {
      w.emit(EventKind::phase, {{"i", i}});
      mem.emit(EventKind::phase, {{"i", i}});
    }
  }
  std::string text;
  for (const auto& e : mem.events()) text += e.to_line() + "\n";
  EXPECT_EQ(text, read_file(dir / "t.jsonl"));
}

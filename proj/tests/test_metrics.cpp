#include "insitu/metrics.hpp"
#include "insitu/trace.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace insitu;
using testsupport::TempDir;
using testsupport::read_file;

namespace {

QuerySample sample(std::string id, std::uint64_t c, std::uint64_t u, std::uint64_t ok = 0, std::uint64_t tok = 0) {
  QuerySample s;
  s.query_id = std::move(id);
  s.c = c;
  s.u = u;
  s.successes = ok;
  s.tool_tokens = tok;
  return s;
}

// Sums each term separately with long double, then applies the ratio.
std::optional<long double> egl_oracle(const std::vector<QuerySample>& xs) {
  long double c = 0, u = 0;
  for (const auto& s : xs) {
    for (std::uint64_t i = 0; i < s.c; ++i) c += 1;
    for (std::uint64_t i = 0; i < s.u; ++i) u += 1;
  }
  if (u == 0) return std::nullopt;
  return c * 1000.0L / u;
}

}  // namespace

TEST(Egl, WorkedValues) {
  std::vector<QuerySample> xs = {sample("a", 2, 3), sample("b", 0, 5)};
  ASSERT_TRUE(compute_egl(xs).has_value());
  EXPECT_DOUBLE_EQ(*compute_egl(xs), 250.0);
  EXPECT_DOUBLE_EQ(*compute_egl(std::vector<QuerySample>{sample("a", 1, 1)}), 1000.0);
}

TEST(Egl, UndefinedWithoutInvocations) {
  EXPECT_FALSE(compute_egl(std::vector<QuerySample>{}).has_value());
  EXPECT_FALSE(compute_egl(std::vector<QuerySample>{sample("a", 3, 0)}).has_value());
}

TEST(Egl, ZeroWhenNothingCreated) {
  EXPECT_DOUBLE_EQ(*compute_egl(std::vector<QuerySample>{sample("a", 0, 4)}), 0.0);
}

TEST(Egl, MatchesOracleOnRandomSets) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    std::vector<QuerySample> xs;
    const int n = std::uniform_int_distribution<int>(0, 20)(rng);
    for (int i = 0; i < n; ++i) {
      xs.push_back(sample("q" + std::to_string(i), rng() % 4, rng() % 7));
    }
    auto got = compute_egl(xs);
    auto want = egl_oracle(xs);
    ASSERT_EQ(got.has_value(), want.has_value());
    if (got) EXPECT_NEAR(*got, static_cast<double>(*want), 1e-9);
  }
}

TEST(Egl, SumsAreAssociative) {
  std::vector<QuerySample> xs = {sample("a", 1, 2, 2, 10), sample("b", 0, 3, 1, 7), sample("c", 2, 0)};
  MetricSums left;
  left.add(xs[0]);
  MetricSums right;
  right.add(xs[1]);
  right.add(xs[2]);
  left += right;
  EXPECT_EQ(left, sum_samples(xs));
  EXPECT_EQ(left.queries, 3u);
}

TEST(Rates, SuccessAndTokens) {
  std::vector<QuerySample> xs = {sample("a", 0, 4, 3, 40), sample("b", 0, 1, 1, 5)};
  EXPECT_DOUBLE_EQ(*compute_success_rate(xs), 0.8);
  EXPECT_DOUBLE_EQ(*compute_avg_tokens_per_invocation(xs), 9.0);
  EXPECT_FALSE(compute_success_rate(std::vector<QuerySample>{sample("a", 1, 0)}).has_value());
}

TEST(Format, FixedPrecisionAndNan) {
  EXPECT_EQ(format_metric(std::nullopt), "nan");
  EXPECT_EQ(format_metric(0.5), "0.500000");
  EXPECT_EQ(format_metric(1000.0 / 3.0), "333.333333");
}

namespace {

// Two batches: q1 creates a tool and calls it twice, q2 reuses it once
// (one failure), q3 in the next batch calls it three times.
std::vector<TraceEvent> synthetic_trace() {
  MemoryTrace t;
  t.emit(EventKind::header, {{"format_version", 1}});
  t.emit(EventKind::batch_boundary, {{"phase", "start"}, {"batch", 0}, {"queries", {"q1", "q2"}}});
  t.emit(EventKind::validation, {{"origin", "develop"}, {"passed", true}, {"query_id", "q1"}});
  t.emit(EventKind::validation, {{"origin", "develop"}, {"passed", false}, {"query_id", "q1"}});
  t.emit(EventKind::invocation, {{"query_id", "q1"}, {"status", "ok"}, {"output_tokens", 4}});
  t.emit(EventKind::invocation, {{"query_id", "q1"}, {"status", "ok"}, {"output_tokens", 6}});
  t.emit(EventKind::invocation, {{"query_id", "q2"}, {"status", "tool_error"}, {"output_tokens", 10}});
  t.emit(EventKind::commit, {{"cumulative_queries", 2}, {"library_size", 1}});
  t.emit(EventKind::batch_boundary, {{"phase", "end"}});
  t.emit(EventKind::batch_boundary, {{"phase", "start"}, {"batch", 1}, {"queries", {"q3"}}});
  for (int i = 0; i < 3; ++i) {
    t.emit(EventKind::invocation, {{"query_id", "q3"}, {"status", "ok"}, {"output_tokens", 2}});
  }
  t.emit(EventKind::commit, {{"cumulative_queries", 3}, {"library_size", 1}});
  t.emit(EventKind::batch_boundary, {{"phase", "end"}});
  return t.events();
}

}  // namespace

TEST(Replay, RecomputesSamplesFromEvents) {
  auto m = replay(synthetic_trace());
  ASSERT_EQ(m.samples.size(), 3u);
  EXPECT_EQ(m.samples[0], sample("q1", 1, 2, 2, 10));
  EXPECT_EQ(m.samples[1], sample("q2", 0, 1, 0, 10));
  EXPECT_EQ(m.samples[2], sample("q3", 0, 3, 3, 6));
  EXPECT_NEAR(*m.egl, 1000.0 / 6.0, 1e-9);
  EXPECT_NEAR(*m.success_rate, 5.0 / 6.0, 1e-12);
  EXPECT_NEAR(*m.avg_tokens, 26.0 / 6.0, 1e-12);
  ASSERT_EQ(m.library.size(), 2u);
  EXPECT_EQ(m.library[1], (LibraryPoint{3, 1}));
  ASSERT_EQ(m.batches.size(), 2u);
  EXPECT_NEAR(*m.batches[0].success_rate, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(*m.batches[1].avg_tokens, 2.0, 1e-12);
}

TEST(Export, WritesCurves) {
  TempDir dir;
  auto paths = export_curves(replay(synthetic_trace()), dir.path());
  EXPECT_EQ(paths.size(), 4u);
  EXPECT_EQ(read_file(dir / "library_size.csv"), "cumulative_queries,library_size\n2,1\n3,1\n");
  EXPECT_EQ(read_file(dir / "egl.csv"), "cumulative_queries,egl\n1,500.000000\n2,333.333333\n3,166.666667\n");
  EXPECT_EQ(read_file(dir / "batches.csv"),
            "batch_index,success_rate,avg_tokens_per_invocation\n0,0.666667,6.666667\n1,1.000000,2.000000\n");
  auto manifest = nlohmann::json::parse(read_file(dir / "export_manifest.json"));
  EXPECT_EQ(manifest.at("format_version"), kExportFormatVersion);
}

TEST(Export, WindowedEgl) {
  TempDir dir;
  export_curves(replay(synthetic_trace()), dir.path(), {1});
  // Trailing window of one query: q2 and q3 created nothing.
  EXPECT_EQ(read_file(dir / "egl.csv"), "cumulative_queries,egl\n1,500.000000\n2,0.000000\n3,0.000000\n");
}

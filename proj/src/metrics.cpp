#include "insitu/metrics.hpp"

#include <cstdio>
#include <deque>
#include <fstream>
#include <map>

namespace insitu {

void MetricSums::add(const QuerySample& s) {
  ++queries;
  c += s.c;
  u += s.u;
  successes += s.successes;
  tool_tokens += s.tool_tokens;
}

MetricSums& MetricSums::operator+=(const MetricSums& o) {
  queries += o.queries;
  c += o.c;
  u += o.u;
  successes += o.successes;
  tool_tokens += o.tool_tokens;
  return *this;
}

MetricSums sum_samples(std::span<const QuerySample> samples) {
  MetricSums s;
  for (const auto& q : samples) s.add(q);
  return s;
}

std::optional<double> compute_egl(const MetricSums& sums) {
  if (sums.u == 0) return std::nullopt;
  return static_cast<double>(sums.c) / static_cast<double>(sums.u) * 1000.0;
}

std::optional<double> compute_egl(std::span<const QuerySample> samples) {
  return compute_egl(sum_samples(samples));
}

std::optional<double> compute_success_rate(std::span<const QuerySample> samples) {
  auto s = sum_samples(samples);
  if (s.u == 0) return std::nullopt;
  return static_cast<double>(s.successes) / static_cast<double>(s.u);
}

std::optional<double> compute_avg_tokens_per_invocation(std::span<const QuerySample> samples) {
  auto s = sum_samples(samples);
  if (s.u == 0) return std::nullopt;
  return static_cast<double>(s.tool_tokens) / static_cast<double>(s.u);
}

ReplayMetrics replay(std::span<const TraceEvent> events) {
  ReplayMetrics m;
  std::map<std::string, std::size_t> index;  // query id -> position in m.samples
  std::vector<std::size_t> current_batch;
  std::uint64_t batch_index = 0;

  auto sample_for = [&](const nlohmann::json& payload) -> QuerySample* {
    auto it = payload.find("query_id");
    if (it == payload.end() || !it->is_string()) return nullptr;
    auto found = index.find(it->get<std::string>());
    return found == index.end() ? nullptr : &m.samples[found->second];
  };

  for (const auto& e : events) {
    const auto& p = e.payload;
    switch (e.kind) {
      case EventKind::batch_boundary:
        if (p.value("phase", "") == "start") {
          batch_index = p.value("batch", std::uint64_t{0});
          current_batch.clear();
          for (const auto& id : p.value("queries", nlohmann::json::array())) {
            auto key = id.get<std::string>();
            if (!index.count(key)) {
              index[key] = m.samples.size();
              m.samples.push_back(QuerySample{key});
            }
            current_batch.push_back(index[key]);
          }
        } else if (p.value("phase", "") == "end") {
          std::vector<QuerySample> batch;
          for (auto i : current_batch) batch.push_back(m.samples[i]);
          m.batches.push_back(
              {batch_index, compute_success_rate(batch), compute_avg_tokens_per_invocation(batch)});
        }
        break;
      case EventKind::invocation:
        if (auto* s = sample_for(p)) {
          ++s->u;
          if (p.value("status", "") == "ok") ++s->successes;
          s->tool_tokens += p.value("output_tokens", std::uint64_t{0});
        }
        break;
      case EventKind::validation:
        if (p.value("origin", "") == "develop" && p.value("passed", false)) {
          if (auto* s = sample_for(p)) ++s->c;
        }
        break;
      case EventKind::commit:
        m.library.push_back({p.value("cumulative_queries", std::uint64_t{0}), p.value("library_size", std::uint64_t{0})});
        break;
      default:
        break;
    }
  }
  m.egl = compute_egl(m.samples);
  m.success_rate = compute_success_rate(m.samples);
  m.avg_tokens = compute_avg_tokens_per_invocation(m.samples);
  return m;
}

ReplayMetrics replay_file(const std::filesystem::path& trace_path) {
  auto events = read_trace(trace_path);
  return replay(events);
}

std::string format_metric(std::optional<double> value) {
  if (!value) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *value);
  return buf;
}

namespace {

std::filesystem::path write_csv(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path.string());
  return path;
}

}  // namespace

std::vector<std::filesystem::path> export_curves(const ReplayMetrics& metrics, const std::filesystem::path& out_dir,
                                                 const ExportOptions& options) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::filesystem::path> written;

  std::string lib = "cumulative_queries,library_size\n";
  for (const auto& p : metrics.library) {
    lib += std::to_string(p.cumulative_queries) + "," + std::to_string(p.library_size) + "\n";
  }
  written.push_back(write_csv(out_dir / "library_size.csv", lib));

  std::string egl = "cumulative_queries,egl\n";
  MetricSums running;
  std::deque<QuerySample> window;
  for (std::size_t i = 0; i < metrics.samples.size(); ++i) {
    const auto& s = metrics.samples[i];
    std::optional<double> value;
    if (options.egl_window == 0) {
      running.add(s);
      value = compute_egl(running);
    } else {
      window.push_back(s);
      if (window.size() > options.egl_window) window.pop_front();
      MetricSums w;
      for (const auto& q : window) w.add(q);
      value = compute_egl(w);
    }
    egl += std::to_string(i + 1) + "," + format_metric(value) + "\n";
  }
  written.push_back(write_csv(out_dir / "egl.csv", egl));

  std::string batches = "batch_index,success_rate,avg_tokens_per_invocation\n";
  for (const auto& b : metrics.batches) {
    batches += std::to_string(b.batch_index) + "," + format_metric(b.success_rate) + "," +
               format_metric(b.avg_tokens) + "\n";
  }
  written.push_back(write_csv(out_dir / "batches.csv", batches));

  nlohmann::json manifest{{"format_version", kExportFormatVersion},
                          {"egl_window", options.egl_window},
                          {"files", {"library_size.csv", "egl.csv", "batches.csv"}}};
  written.push_back(write_csv(out_dir / "export_manifest.json", manifest.dump(2) + "\n"));
  return written;
}

nlohmann::json to_json(const ReplayMetrics& m) {
  auto opt = [](std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : m.samples) {
    samples.push_back({{"query_id", s.query_id}, {"c", s.c}, {"u", s.u}, {"successes", s.successes},
                       {"tool_tokens", s.tool_tokens}});
  }
  return {{"queries", m.samples.size()},
          {"egl", opt(m.egl)},
          {"success_rate", opt(m.success_rate)},
          {"avg_tokens_per_invocation", opt(m.avg_tokens)},
          {"library_size", m.library.empty() ? nlohmann::json(nullptr) : nlohmann::json(m.library.back().library_size)},
          {"samples", samples}};
}

}  // namespace insitu

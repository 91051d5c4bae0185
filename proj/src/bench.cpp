#include "melo/bench.hpp"

#include <algorithm>
#include <cstring>
#include <iomanip>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <thread>

#include "melo/forward.hpp"
#include "melo/lora.hpp"
#include "melo/registry.hpp"
#include "melo/serialization.hpp"
#include "melo/timing.hpp"

namespace melo {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::ReloadPerTask: return "reload-per-task";
    case Strategy::PreloadAll: return "preload-all";
    case Strategy::MeloShared: return "melo-shared";
  }
  return "unknown";
}

std::string to_string(Ordering o) { return o == Ordering::InOrder ? "in-order" : "random"; }

Strategy parse_strategy(const std::string& s) {
  if (s == "reload-per-task" || s == "reload") return Strategy::ReloadPerTask;
  if (s == "preload-all" || s == "preload") return Strategy::PreloadAll;
  if (s == "melo-shared" || s == "melo") return Strategy::MeloShared;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

Ordering parse_ordering(const std::string& s) {
  if (s == "in-order") return Ordering::InOrder;
  if (s == "random") return Ordering::Random;
  throw std::invalid_argument("unknown ordering '" + s + "'");
}

BenchArtifacts prepare_bench_artifacts(const std::filesystem::path& dir, const ViTConfig& cfg,
                                       const std::vector<std::size_t>& classes_per_task, std::uint64_t seed,
                                       std::uint32_t rank) {
  std::filesystem::create_directories(dir);
  BenchArtifacts art;
  art.config = cfg;
  art.backbone = dir / "backbone.melb";
  const ViTWeights<float> backbone = init_backbone(cfg, seed);
  save_backbone(backbone, art.backbone);

  for (std::size_t t = 0; t < classes_per_task.size(); ++t) {
    TaskArtifacts task;
    task.name = "task" + std::to_string(t);
    task.num_classes = classes_per_task[t];
    task.adapter = dir / (task.name + ".melo");
    task.model = dir / (task.name + ".model.melb");

    LoraAdapter<float> adapter = init_adapter(cfg, task.num_classes, rank, seed + 1 + t, task.name);
    // Stand-in for a trained adapter: B away from zero so every task differs.
    std::mt19937_64 rng(seed * 7919 + t);
    std::normal_distribution<float> normal(0.0f, 0.02f);
    for (auto& layer : adapter.layers) {
      for (auto* pair : {&layer.query, &layer.value}) {
        for (Eigen::Index i = 0; i < pair->b.size(); ++i) pair->b.data()[i] = normal(rng);
      }
    }
    save_adapter(adapter, task.adapter);
    save_backbone(merge_adapter(backbone, adapter), task.model, &adapter.head);
    art.tasks.push_back(std::move(task));
  }
  return art;
}

std::vector<WorkItem> make_workload(const BenchArtifacts& artifacts, std::size_t per_task, Ordering ordering,
                                    std::uint64_t seed) {
  const ViTConfig& cfg = artifacts.config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::vector<WorkItem> items;
  for (const auto& task : artifacts.tasks) {
    for (std::size_t i = 0; i < per_task; ++i) {
      Tensor image({cfg.channels, cfg.image_size, cfg.image_size});
      for (auto& v : image.data()) v = normal(rng);
      items.push_back({task.name, std::move(image)});
    }
  }
  if (ordering == Ordering::Random) std::shuffle(items.begin(), items.end(), rng);
  return items;
}

namespace {

bool bit_identical(const VectorF& a, const VectorF& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())) == 0;
}

const TaskArtifacts& find_task(const BenchArtifacts& art, const std::string& name) {
  for (const auto& t : art.tasks) {
    if (t.name == name) return t;
  }
  throw std::invalid_argument("workload names unknown task '" + name + "'");
}

std::vector<VectorF> reference_outputs(const BenchScenario& sc, const BenchArtifacts& art) {
  std::vector<VectorF> ref;
  ref.reserve(sc.workload.size());
  if (sc.strategy == Strategy::MeloShared) {
    const auto backbone = load_backbone(art.backbone).weights;
    std::map<std::string, LoraAdapter<float>> adapters;
    for (const auto& t : art.tasks) adapters.emplace(t.name, load_adapter(t.adapter));
    for (const auto& item : sc.workload) ref.push_back(forward<float>(item.image, backbone, adapters.at(item.task)));
  } else {
    std::map<std::string, BackboneFile> models;
    for (const auto& t : art.tasks) models.emplace(t.name, load_backbone(t.model));
    for (const auto& item : sc.workload) {
      const auto& m = models.at(item.task);
      if (!m.head) throw std::invalid_argument("task model for '" + item.task + "' has no classifier head");
      ref.push_back(forward<float>(item.image, m.weights, *m.head));
    }
  }
  return ref;
}

std::uint64_t simulated(std::uint64_t measured_ns, std::size_t bytes, const std::optional<double>& cost) {
  if (!cost) return measured_ns;
  return measured_ns + static_cast<std::uint64_t>(*cost * static_cast<double>(bytes));
}

std::size_t file_bytes(const std::filesystem::path& p) { return static_cast<std::size_t>(std::filesystem::file_size(p)); }

}  // namespace

StrategyReport run_bench(const BenchScenario& sc, const BenchArtifacts& art) {
  if (sc.workload.empty()) throw std::invalid_argument("bench: empty workload");
  for (const auto& item : sc.workload) find_task(art, item.task);
  for (const auto& t : art.tasks) {
    for (const auto& p : {t.adapter, t.model}) {
      if (!std::filesystem::exists(p)) throw IoError("bench: missing artifact '" + p.string() + "'");
    }
  }
  if (!std::filesystem::exists(art.backbone)) throw IoError("bench: missing artifact '" + art.backbone.string() + "'");

  const std::vector<VectorF> reference = reference_outputs(sc, art);
  std::vector<VectorF> outputs;
  outputs.reserve(sc.workload.size());

  StrategyReport rep;
  rep.strategy = sc.strategy;
  rep.ordering = sc.ordering;
  rep.images = sc.workload.size();
  std::vector<std::uint64_t> switch_latencies;

  switch (sc.strategy) {
    case Strategy::ReloadPerTask: {
      const auto& first = find_task(art, sc.workload.front().task);
      auto start = MonotonicClock::now();
      auto current = std::make_unique<BackboneFile>(load_backbone(first.model));
      std::string current_task = first.name;
      rep.init_ns = simulated(elapsed_ns(start), file_bytes(first.model), sc.load_cost_ns_per_byte);
      rep.peak_model_bytes = file_bytes(first.model);
      for (const auto& item : sc.workload) {
        if (item.task != current_task) {
          const auto& t = find_task(art, item.task);
          start = MonotonicClock::now();
          current.reset();
          current = std::make_unique<BackboneFile>(load_backbone(t.model));
          current_task = t.name;
          switch_latencies.push_back(simulated(elapsed_ns(start), file_bytes(t.model), sc.load_cost_ns_per_byte));
          rep.peak_model_bytes = std::max(rep.peak_model_bytes, file_bytes(t.model));
        }
        start = MonotonicClock::now();
        outputs.push_back(forward<float>(item.image, current->weights, *current->head));
        rep.infer_ns += elapsed_ns(start);
      }
      break;
    }
    case Strategy::PreloadAll: {
      rep.has_switches = false;
      auto start = MonotonicClock::now();
      std::map<std::string, BackboneFile> models;
      std::size_t bytes = 0;
      for (const auto& t : art.tasks) {
        models.emplace(t.name, load_backbone(t.model));
        bytes += file_bytes(t.model);
      }
      rep.init_ns = simulated(elapsed_ns(start), bytes, sc.load_cost_ns_per_byte);
      rep.peak_model_bytes = bytes;
      for (const auto& item : sc.workload) {
        start = MonotonicClock::now();
        const auto& m = models.at(item.task);
        outputs.push_back(forward<float>(item.image, m.weights, *m.head));
        rep.infer_ns += elapsed_ns(start);
      }
      break;
    }
    case Strategy::MeloShared: {
      auto start = MonotonicClock::now();
      AdapterRegistry registry(art.backbone);
      std::size_t bytes = file_bytes(art.backbone);
      for (const auto& t : art.tasks) {
        registry.register_adapter(t.adapter);
        bytes += file_bytes(t.adapter);
      }
      registry.switch_to(sc.workload.front().task);
      rep.init_ns = simulated(elapsed_ns(start), bytes, sc.load_cost_ns_per_byte);
      rep.peak_model_bytes = registry.memory_report().total();
      for (const auto& item : sc.workload) {
        if (registry.active() != item.task) {
          // Adapters are already resident: no bytes are read on a switch.
          switch_latencies.push_back(registry.switch_to(item.task).latency_ns);
        }
        start = MonotonicClock::now();
        outputs.push_back(registry.infer(item.image));
        rep.infer_ns += elapsed_ns(start);
      }
      break;
    }
  }

  for (std::size_t i = 0; i < outputs.size(); ++i) {
    if (!bit_identical(outputs[i], reference[i])) {
      throw BenchValidityError("bench: " + to_string(sc.strategy) + " output " + std::to_string(i) + " (task '" +
                               sc.workload[i].task + "') differs from the reference model");
    }
  }
  rep.validated = true;
  rep.switch_count = switch_latencies.size();
  for (auto ns : switch_latencies) rep.switch_ns += ns;
  rep.avg_switch_ns = rep.switch_count ? static_cast<double>(rep.switch_ns) / static_cast<double>(rep.switch_count) : 0.0;
  return rep;
}

const StrategyReport& BenchReport::row(Strategy s, Ordering o) const {
  for (const auto& r : rows) {
    if (r.strategy == s && r.ordering == o) return r;
  }
  throw std::out_of_range("bench report has no row for " + to_string(s) + "/" + to_string(o));
}

namespace {
std::string seconds(std::uint64_t ns) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(6) << static_cast<double>(ns) * 1e-9 << "s";
  return s.str();
}
std::string seconds(double ns) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(9) << ns * 1e-9 << "s";
  return s.str();
}
std::string megabytes(std::size_t bytes) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << static_cast<double>(bytes) / 1e6 << "MB";
  return s.str();
}
}  // namespace

std::string BenchReport::to_table() const {
  std::ostringstream out;
  out << "config " << melo::to_string(config) << "  seed=" << seed;
  if (load_cost_ns_per_byte) out << "  load_cost=" << *load_cost_ns_per_byte << "ns/B";
  out << "\n" << environment << "\n\n";
  const int w = 16;
  out << std::left << std::setw(18) << "strategy" << std::setw(10) << "ordering" << std::right << std::setw(w) << "IT"
      << std::setw(w) << "ST" << std::setw(8) << "#sw" << std::setw(w) << "A-ST" << std::setw(w) << "TT" << std::setw(w)
      << "memory" << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(18) << melo::to_string(r.strategy) << std::setw(10) << melo::to_string(r.ordering)
        << std::right << std::setw(w) << seconds(r.init_ns);
    if (r.has_switches) {
      out << std::setw(w) << seconds(r.switch_ns) << std::setw(8) << r.switch_count << std::setw(w)
          << seconds(r.avg_switch_ns);
    } else {
      out << std::setw(w) << "-" << std::setw(8) << "-" << std::setw(w) << "-";
    }
    out << std::setw(w) << seconds(r.infer_ns) << std::setw(w) << megabytes(r.peak_model_bytes) << "\n";
  }
  return out.str();
}

std::string BenchReport::to_key_value() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "seed=" << seed << "\n";
  out << "environment=" << environment << "\n";
  out << "config=" << melo::to_string(config) << "\n";
  if (load_cost_ns_per_byte) out << "load_cost_ns_per_byte=" << *load_cost_ns_per_byte << "\n";
  for (const auto& r : rows) {
    const std::string p = melo::to_string(r.strategy) + "." + melo::to_string(r.ordering) + ".";
    out << p << "images=" << r.images << "\n";
    out << p << "it_ns=" << r.init_ns << "\n";
    if (r.has_switches) {
      out << p << "st_ns=" << r.switch_ns << "\n";
      out << p << "switch_count=" << r.switch_count << "\n";
      out << p << "ast_ns=" << r.avg_switch_ns << "\n";
    }
    out << p << "tt_ns=" << r.infer_ns << "\n";
    out << p << "peak_model_bytes=" << r.peak_model_bytes << "\n";
    out << p << "validated=" << (r.validated ? "true" : "false") << "\n";
  }
  return out.str();
}

BenchReport run_benchmarks(const BenchArtifacts& artifacts, const std::vector<Strategy>& strategies,
                           const std::vector<Ordering>& orderings, std::size_t per_task, std::uint64_t seed,
                           std::optional<double> load_cost_ns_per_byte) {
  BenchReport report;
  report.seed = seed;
  report.environment = environment_stamp();
  report.config = artifacts.config;
  report.load_cost_ns_per_byte = load_cost_ns_per_byte;
  for (auto ordering : orderings) {
    // Same images for every strategy within an ordering.
    const auto workload = make_workload(artifacts, per_task, ordering, seed);
    for (auto strategy : strategies) {
      BenchScenario sc{strategy, ordering, workload, load_cost_ns_per_byte};
      report.rows.push_back(run_bench(sc, artifacts));
    }
  }
  return report;
}

std::string environment_stamp() {
  std::ostringstream s;
#if defined(__clang__)
  s << "compiler=clang-" << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  s << "compiler=gcc-" << __GNUC__ << "." << __GNUC_MINOR__;
#else
  s << "compiler=unknown";
#endif
  s << " eigen=" << EIGEN_WORLD_VERSION << "." << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION;
  s << " hw_threads=" << std::thread::hardware_concurrency();
  s << " clock=steady";
  return s.str();
}

}  // namespace melo

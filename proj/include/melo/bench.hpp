#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "melo/tensor.hpp"
#include "melo/vit.hpp"

namespace melo {

/// reload-per-task: one fine-tuned model resident, reloaded from disk on
/// every task change. preload-all: every fine-tuned model loaded up front.
/// melo-shared: one backbone plus every adapter loaded up front; a task
/// change flips the registry's active adapter.
enum class Strategy { ReloadPerTask, PreloadAll, MeloShared };
enum class Ordering { InOrder, Random };

std::string to_string(Strategy s);
std::string to_string(Ordering o);
Strategy parse_strategy(const std::string& s);
Ordering parse_ordering(const std::string& s);

class BenchValidityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskArtifacts {
  std::string name;
  std::size_t num_classes = 0;
  std::filesystem::path adapter;  // MELO file
  std::filesystem::path model;    // MELB file: merged weights plus head
};

struct BenchArtifacts {
  ViTConfig config;
  std::filesystem::path backbone;
  std::vector<TaskArtifacts> tasks;
};

/// Writes a seeded backbone, one adapter per task (with non-zero B so tasks
/// differ), and each task's standalone fine-tuned model (adapter merged in,
/// head embedded) under `dir`.
BenchArtifacts prepare_bench_artifacts(const std::filesystem::path& dir, const ViTConfig& cfg,
                                       const std::vector<std::size_t>& classes_per_task, std::uint64_t seed,
                                       std::uint32_t rank = 4);

struct WorkItem {
  std::string task;
  Tensor image;
};

/// `per_task` images per task, grouped by task (in-order) or shuffled (random).
std::vector<WorkItem> make_workload(const BenchArtifacts& artifacts, std::size_t per_task, Ordering ordering,
                                    std::uint64_t seed);

struct BenchScenario {
  Strategy strategy = Strategy::MeloShared;
  Ordering ordering = Ordering::InOrder;
  std::vector<WorkItem> workload;
  /// When set, every byte read from disk adds this many nanoseconds to the
  /// reported time of the operation that read it.
  std::optional<double> load_cost_ns_per_byte;
};

struct StrategyReport {
  Strategy strategy = Strategy::MeloShared;
  Ordering ordering = Ordering::InOrder;
  std::size_t images = 0;
  std::uint64_t init_ns = 0;          // IT
  std::uint64_t switch_ns = 0;        // ST
  std::size_t switch_count = 0;
  double avg_switch_ns = 0;           // A-ST = ST / switch_count
  std::uint64_t infer_ns = 0;         // TT
  std::size_t peak_model_bytes = 0;
  bool has_switches = true;           // false for preload-all
  bool validated = false;             // outputs matched the reference bit-exactly
};

/// Runs one strategy over the workload. Every output is compared bit-exactly
/// against a reference computed from independently loaded artifacts; a
/// mismatch throws BenchValidityError and no report is produced.
StrategyReport run_bench(const BenchScenario& scenario, const BenchArtifacts& artifacts);

struct BenchReport {
  std::uint64_t seed = 0;
  std::string environment;
  ViTConfig config;
  std::optional<double> load_cost_ns_per_byte;
  std::vector<StrategyReport> rows;

  const StrategyReport& row(Strategy s, Ordering o) const;
  /// Table with IT, ST, A-ST, TT and memory per strategy and ordering.
  std::string to_table() const;
  std::string to_key_value() const;
};

BenchReport run_benchmarks(const BenchArtifacts& artifacts, const std::vector<Strategy>& strategies,
                           const std::vector<Ordering>& orderings, std::size_t per_task, std::uint64_t seed,
                           std::optional<double> load_cost_ns_per_byte = std::nullopt);

std::string environment_stamp();

}  // namespace melo

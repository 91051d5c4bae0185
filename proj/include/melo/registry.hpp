#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "melo/lora.hpp"
#include "melo/tensor.hpp"
#include "melo/timing.hpp"
#include "melo/vit.hpp"

namespace melo {

class RegistryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SwitchReceipt {
  std::string task;
  std::uint64_t latency_ns = 0;
  bool changed = false;  // false when the task was already active
};

struct MemoryReport {
  std::size_t backbone_bytes = 0;
  std::size_t adapter_bytes_total = 0;
  std::map<std::string, std::size_t> per_adapter;

  std::size_t total() const { return backbone_bytes + adapter_bytes_total; }
};

/// One shared frozen backbone and a catalog of task adapters over it.
///
/// register_adapter is serialised; infer, infer_as and memory_report may run
/// concurrently with each other and with register_adapter. The active task is
/// a single atomic pointer, so switching never copies or touches backbone
/// bytes. Adapters are never removed, so a published entry stays valid.
class AdapterRegistry {
 public:
  explicit AdapterRegistry(ViTWeights<float> backbone);
  explicit AdapterRegistry(const std::filesystem::path& backbone_file);

  AdapterRegistry(const AdapterRegistry&) = delete;
  AdapterRegistry& operator=(const AdapterRegistry&) = delete;

  /// Loads and catalogs an adapter file. Rejects incompatible (d, L) and
  /// duplicate task names; on any error the catalog is unchanged.
  std::string register_adapter(const std::filesystem::path& adapter_file);
  std::string register_adapter(LoraAdapter<float> adapter);

  SwitchReceipt switch_to(const std::string& task);

  /// Logits for the active task. Throws RegistryError when none is active.
  VectorF infer(const Tensor& image);
  /// Logits for a named task without touching the active handle.
  VectorF infer_as(const std::string& task, const Tensor& image) const;

  MemoryReport memory_report() const;

  std::optional<std::string> active() const;
  std::vector<std::string> tasks() const;
  std::size_t size() const;
  const ViTWeights<float>& backbone() const { return *backbone_; }
  const LoraAdapter<float>& adapter(const std::string& task) const;

  std::uint64_t switches() const { return switches_.load(); }
  std::map<std::string, std::uint64_t> inference_counts() const;
  /// Latency of every switch_to call so far.
  LatencySummary switch_latency() const;

 private:
  struct Entry {
    std::shared_ptr<const LoraAdapter<float>> adapter;
    std::size_t bytes = 0;
    mutable std::atomic<std::uint64_t> inferences{0};
  };

  const Entry& find(const std::string& task) const;

  std::shared_ptr<const ViTWeights<float>> backbone_;
  std::size_t backbone_bytes_ = 0;
  mutable std::shared_mutex catalog_mutex_;
  std::map<std::string, std::unique_ptr<Entry>> catalog_;
  std::atomic<const Entry*> active_{nullptr};
  std::atomic<std::uint64_t> switches_{0};
  mutable std::mutex latency_mutex_;
  std::vector<std::uint64_t> switch_latencies_;
};

}  // namespace melo

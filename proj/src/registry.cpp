#include "melo/registry.hpp"

#include "melo/forward.hpp"
#include "melo/serialization.hpp"

namespace melo {

AdapterRegistry::AdapterRegistry(ViTWeights<float> backbone)
    : backbone_(std::make_shared<const ViTWeights<float>>(std::move(backbone))),
      backbone_bytes_(backbone_file_size(backbone_->config)) {}

AdapterRegistry::AdapterRegistry(const std::filesystem::path& backbone_file)
    : AdapterRegistry(load_backbone(backbone_file).weights) {}

std::string AdapterRegistry::register_adapter(const std::filesystem::path& adapter_file) {
  return register_adapter(load_adapter(adapter_file));
}

std::string AdapterRegistry::register_adapter(LoraAdapter<float> adapter) {
  check_compatible(backbone_->config, adapter);
  auto entry = std::make_unique<Entry>();
  entry->bytes = adapter_file_size(adapter);
  std::string name = adapter.task_name;
  entry->adapter = std::make_shared<const LoraAdapter<float>>(std::move(adapter));

  std::unique_lock lock(catalog_mutex_);
  if (catalog_.contains(name)) throw RegistryError("task '" + name + "' is already registered");
  catalog_.emplace(name, std::move(entry));
  return name;
}

const AdapterRegistry::Entry& AdapterRegistry::find(const std::string& task) const {
  std::shared_lock lock(catalog_mutex_);
  auto it = catalog_.find(task);
  if (it == catalog_.end()) throw RegistryError("unknown task '" + task + "'");
  return *it->second;
}

SwitchReceipt AdapterRegistry::switch_to(const std::string& task) {
  const auto start = MonotonicClock::now();
  const Entry& entry = find(task);
  const Entry* previous = active_.exchange(&entry, std::memory_order_acq_rel);
  const std::uint64_t ns = elapsed_ns(start);

  SwitchReceipt receipt{task, ns, previous != &entry};
  if (receipt.changed) switches_.fetch_add(1);
  std::lock_guard lock(latency_mutex_);
  switch_latencies_.push_back(ns);
  return receipt;
}

VectorF AdapterRegistry::infer(const Tensor& image) {
  const Entry* entry = active_.load(std::memory_order_acquire);
  if (entry == nullptr) throw RegistryError("infer: no active task; call switch_to first");
  entry->inferences.fetch_add(1, std::memory_order_relaxed);
  return forward<float>(image, *backbone_, *entry->adapter);
}

VectorF AdapterRegistry::infer_as(const std::string& task, const Tensor& image) const {
  const Entry& entry = find(task);
  entry.inferences.fetch_add(1, std::memory_order_relaxed);
  return forward<float>(image, *backbone_, *entry.adapter);
}

MemoryReport AdapterRegistry::memory_report() const {
  MemoryReport r;
  r.backbone_bytes = backbone_bytes_;
  std::shared_lock lock(catalog_mutex_);
  for (const auto& [name, entry] : catalog_) {
    r.per_adapter[name] = entry->bytes;
    r.adapter_bytes_total += entry->bytes;
  }
  return r;
}

std::optional<std::string> AdapterRegistry::active() const {
  const Entry* entry = active_.load(std::memory_order_acquire);
  if (entry == nullptr) return std::nullopt;
  return entry->adapter->task_name;
}

std::vector<std::string> AdapterRegistry::tasks() const {
  std::shared_lock lock(catalog_mutex_);
  std::vector<std::string> names;
  for (const auto& [name, entry] : catalog_) names.push_back(name);
  return names;
}

std::size_t AdapterRegistry::size() const {
  std::shared_lock lock(catalog_mutex_);
  return catalog_.size();
}

const LoraAdapter<float>& AdapterRegistry::adapter(const std::string& task) const { return *find(task).adapter; }

std::map<std::string, std::uint64_t> AdapterRegistry::inference_counts() const {
  std::shared_lock lock(catalog_mutex_);
  std::map<std::string, std::uint64_t> counts;
  for (const auto& [name, entry] : catalog_) counts[name] = entry->inferences.load();
  return counts;
}

LatencySummary AdapterRegistry::switch_latency() const {
  std::lock_guard lock(latency_mutex_);
  return summarize(switch_latencies_);
}

}  // namespace melo

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "melo/lora.hpp"
#include "melo/vit.hpp"

namespace melo {

/// Bad magic, unsupported version, truncation, or a payload that does not
/// match its header.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kBackboneMagic[4] = {'M', 'E', 'L', 'B'};
inline constexpr char kAdapterMagic[4] = {'M', 'E', 'L', 'O'};
inline constexpr std::uint16_t kBackboneVersion = 1;
inline constexpr std::uint16_t kAdapterVersion = 1;

// Backbone file, all little-endian:
//   "MELB" | u16 version | u32 image_size, patch_size, channels, dim, depth,
//   heads, mlp_dim | u32 tensor_count | tensor_count x (u16 name_len, name,
//   u32 rank, rank x u32 dims, f32 payload) | u32 CRC32 of the tensor records.
//
// A backbone file may carry a classifier head as two extra tensors
// ("head.weight", "head.bias"); that is how a standalone fine-tuned task
// model is stored.

struct BackboneFile {
  ViTWeights<float> weights;
  std::optional<ClassifierHead<float>> head;
};

std::vector<std::uint8_t> encode_backbone(const ViTWeights<float>& w,
                                          const ClassifierHead<float>* head = nullptr);
BackboneFile decode_backbone(std::span<const std::uint8_t> bytes);

void save_backbone(const ViTWeights<float>& w, const std::filesystem::path& path,
                   const ClassifierHead<float>* head = nullptr);
BackboneFile load_backbone(const std::filesystem::path& path);

/// Exact encoded size of a backbone built from cfg.
std::size_t backbone_file_size(const ViTConfig& cfg, std::size_t head_classes = 0);

/// CRC32 over the encoded bytes; used to prove a backbone was not modified.
std::uint32_t backbone_checksum(const ViTWeights<float>& w);

// Adapter file, all little-endian:
//   "MELO" | u16 version | u16 flags | u16 name_len, UTF-8 task name |
//   u32 d, L, r, num_classes | f32 scale | for each layer: A_Q, B_Q, A_V, B_V |
//   head weight | head bias | u32 CRC32 of every preceding byte.

struct AdapterFileHeader {
  std::uint16_t version = kAdapterVersion;
  std::uint16_t flags = 0;
  std::string task_name;
  std::uint32_t dim = 0;
  std::uint32_t depth = 0;
  std::uint32_t rank = 0;
  std::uint32_t num_classes = 0;
  float scale = 1.0f;

  std::size_t header_bytes() const;
  std::size_t payload_floats() const;
  std::size_t file_bytes() const;
};

std::vector<std::uint8_t> encode_adapter(const LoraAdapter<float>& a);
LoraAdapter<float> decode_adapter(std::span<const std::uint8_t> bytes);

void save_adapter(const LoraAdapter<float>& a, const std::filesystem::path& path);
LoraAdapter<float> load_adapter(const std::filesystem::path& path);

/// Exact encoded size of an adapter.
std::size_t adapter_file_size(const LoraAdapter<float>& a);
std::size_t adapter_file_size(const ViTConfig& cfg, std::uint32_t rank, std::size_t num_classes,
                              std::size_t task_name_bytes);

}  // namespace melo

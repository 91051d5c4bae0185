#include "melo/serialization.hpp"

#include <cstring>
#include <map>

#include <zlib.h>

#include "binary_io.hpp"

namespace melo {

namespace detail {
std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for files past 4 GiB.
  constexpr std::size_t kChunk = std::size_t{1} << 30;
  for (std::size_t off = 0; off < bytes.size(); off += kChunk) {
    const std::size_t n = std::min(kChunk, bytes.size() - off);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
  }
  return static_cast<std::uint32_t>(crc);
}
}  // namespace detail

namespace {

using detail::ByteReader;
using detail::ByteWriter;

template <typename T>
void put_named(ByteWriter& w, const std::string& name, const T& t) {
  w.put(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name);
  const bool is_vector = T::ColsAtCompileTime == 1;
  w.put(static_cast<std::uint32_t>(is_vector ? 1 : 2));
  w.put(static_cast<std::uint32_t>(t.rows()));
  if (!is_vector) w.put(static_cast<std::uint32_t>(t.cols()));
  w.put_floats(std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
}

std::size_t named_record_size(const std::string& name, std::size_t rank, std::size_t count) {
  return 2 + name.size() + 4 + 4 * rank + 4 * count;
}

struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void check_magic(ByteReader& r, const char (&magic)[4], const std::string& what) {
  const auto m = r.get_string(4);
  if (std::memcmp(m.data(), magic, 4) != 0) {
    throw FormatError(what + ": bad magic (expected '" + std::string(magic, 4) + "')");
  }
}

template <typename T>
void assign_tensor(T& dst, const std::string& name, std::map<std::string, RawTensor>& pool, Eigen::Index rows,
                   Eigen::Index cols) {
  auto it = pool.find(name);
  if (it == pool.end()) throw FormatError("backbone: missing tensor '" + name + "'");
  const bool is_vector = T::ColsAtCompileTime == 1;
  const std::vector<std::uint32_t> want =
      is_vector ? std::vector<std::uint32_t>{static_cast<std::uint32_t>(rows)}
                : std::vector<std::uint32_t>{static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)};
  if (it->second.dims != want) throw FormatError("backbone: tensor '" + name + "' has shape inconsistent with config");
  dst.resize(rows, cols);
  std::memcpy(dst.data(), it->second.values.data(), it->second.values.size() * sizeof(float));
  pool.erase(it);
}

}  // namespace

std::vector<std::uint8_t> encode_backbone(const ViTWeights<float>& w, const ClassifierHead<float>* head) {
  const ViTConfig& c = w.config;
  ByteWriter out;
  out.put_bytes(std::string_view(kBackboneMagic, 4));
  out.put(kBackboneVersion);
  for (auto v : {c.image_size, c.patch_size, c.channels, c.dim, c.depth, c.heads, c.mlp_dim}) out.put(v);
  std::uint32_t count = 0;
  w.for_each_parameter([&](const std::string&, const auto&) { ++count; });
  if (head != nullptr) count += 2;
  out.put(count);
  const std::size_t payload_start = out.size();
  w.for_each_parameter([&](const std::string& name, const auto& t) { put_named(out, name, t); });
  if (head != nullptr) {
    put_named(out, "head.weight", head->weight);
    put_named(out, "head.bias", head->bias);
  }
  const auto crc = detail::crc32(std::span(out.bytes()).subspan(payload_start));
  out.put(crc);
  return std::move(out.bytes());
}

BackboneFile decode_backbone(std::span<const std::uint8_t> bytes) {
  const std::string what = "backbone";
  ByteReader r(bytes, what);
  check_magic(r, kBackboneMagic, what);
  const auto version = r.get<std::uint16_t>();
  if (version != kBackboneVersion) throw FormatError("backbone: unsupported version " + std::to_string(version));
  ViTConfig c;
  for (auto* f : {&c.image_size, &c.patch_size, &c.channels, &c.dim, &c.depth, &c.heads, &c.mlp_dim}) {
    *f = r.get<std::uint32_t>();
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("backbone: corrupt config block: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  const std::size_t payload_start = r.offset();
  if (bytes.size() < payload_start + 4) throw FormatError("backbone: truncated file");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  const auto payload = bytes.subspan(payload_start, bytes.size() - 4 - payload_start);
  if (detail::crc32(payload) != stored_crc) {
    throw ChecksumError("backbone: CRC32 mismatch (file corrupt or truncated)");
  }

  ByteReader pr(payload, what);
  std::map<std::string, RawTensor> pool;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = pr.get_string(pr.get<std::uint16_t>());
    const auto rank = pr.get<std::uint32_t>();
    if (rank == 0 || rank > 2) throw FormatError("backbone: tensor '" + name + "' has unsupported rank");
    RawTensor t;
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(pr.get<std::uint32_t>());
      n *= t.dims.back();
    }
    t.values.resize(n);
    pr.get_floats(t.values);
    if (!pool.emplace(name, std::move(t)).second) throw FormatError("backbone: duplicate tensor '" + name + "'");
  }
  if (pr.remaining() != 0) throw FormatError("backbone: trailing bytes after tensor records");

  BackboneFile file;
  ViTWeights<float>& w = file.weights;
  w.config = c;
  w.blocks.resize(c.depth);
  const Eigen::Index d = c.dim, m = c.mlp_dim;
  auto expect = [&](const std::string& name) -> std::pair<Eigen::Index, Eigen::Index> {
    if (name == "patch_embed.weight") return {d, c.patch_dim()};
    if (name == "pos_embed") return {c.tokens(), d};
    if (name.ends_with("mlp.fc1.weight")) return {m, d};
    if (name.ends_with("mlp.fc1.bias")) return {m, 1};
    if (name.ends_with("mlp.fc2.weight")) return {d, m};
    if (name.ends_with(".weight") && name.find("attn.") != std::string::npos) return {d, d};
    return {d, 1};
  };
  w.for_each_parameter([&](const std::string& name, auto& t) {
    const auto [rows, cols] = expect(name);
    assign_tensor(t, name, pool, rows, cols);
  });
  if (pool.count("head.weight") || pool.count("head.bias")) {
    if (!pool.count("head.weight") || !pool.count("head.bias")) throw FormatError("backbone: incomplete head");
    const auto classes = static_cast<Eigen::Index>(pool.at("head.bias").dims.at(0));
    ClassifierHead<float> head;
    assign_tensor(head.weight, "head.weight", pool, classes, d);
    assign_tensor(head.bias, "head.bias", pool, classes, 1);
    file.head = std::move(head);
  }
  if (!pool.empty()) throw FormatError("backbone: unexpected tensor '" + pool.begin()->first + "'");
  return file;
}

void save_backbone(const ViTWeights<float>& w, const std::filesystem::path& path, const ClassifierHead<float>* head) {
  detail::write_file(path, encode_backbone(w, head));
}

BackboneFile load_backbone(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_backbone(bytes);
  } catch (const ChecksumError& e) {
    throw ChecksumError("'" + path.string() + "': " + e.what());
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

std::size_t backbone_file_size(const ViTConfig& cfg, std::size_t head_classes) {
  // Shapes only; zero_backbone would allocate, so walk the names on a skeleton.
  ViTWeights<float> skeleton;
  skeleton.config = cfg;
  skeleton.blocks.resize(cfg.depth);
  std::size_t size = 4 + 2 + 7 * 4 + 4;
  const std::size_t d = cfg.dim, m = cfg.mlp_dim;
  skeleton.for_each_parameter([&](const std::string& name, const auto& t) {
    using T = std::decay_t<decltype(t)>;
    const bool is_vector = T::ColsAtCompileTime == 1;
    std::size_t count;
    if (name == "patch_embed.weight") count = d * cfg.patch_dim();
    else if (name == "pos_embed") count = std::size_t{cfg.tokens()} * d;
    else if (name.ends_with("mlp.fc1.weight") || name.ends_with("mlp.fc2.weight")) count = m * d;
    else if (name.ends_with("mlp.fc1.bias")) count = m;
    else if (!is_vector) count = d * d;
    else count = d;
    size += named_record_size(name, is_vector ? 1 : 2, count);
  });
  if (head_classes > 0) {
    size += named_record_size("head.weight", 2, head_classes * d) + named_record_size("head.bias", 1, head_classes);
  }
  return size + 4;
}

std::uint32_t backbone_checksum(const ViTWeights<float>& w) {
  // Hashing the trailer too would always give the CRC residue constant.
  const auto bytes = encode_backbone(w);
  return detail::crc32(std::span(bytes).first(bytes.size() - 4));
}

std::size_t AdapterFileHeader::header_bytes() const { return 4 + 2 + 2 + 2 + task_name.size() + 4 * 4 + 4; }

std::size_t AdapterFileHeader::payload_floats() const {
  return std::size_t{depth} * 4 * std::size_t{rank} * dim + std::size_t{num_classes} * dim + num_classes;
}

std::size_t AdapterFileHeader::file_bytes() const { return header_bytes() + 4 * payload_floats() + 4; }

std::vector<std::uint8_t> encode_adapter(const LoraAdapter<float>& a) {
  if (a.task_name.size() > 0xFFFF) throw std::invalid_argument("adapter task name too long");
  ByteWriter out;
  out.put_bytes(std::string_view(kAdapterMagic, 4));
  out.put(kAdapterVersion);
  out.put(std::uint16_t{0});
  out.put(static_cast<std::uint16_t>(a.task_name.size()));
  out.put_bytes(a.task_name);
  out.put(a.dim);
  out.put(a.depth());
  out.put(a.rank);
  out.put(static_cast<std::uint32_t>(a.num_classes()));
  out.put(a.scale);
  a.for_each_parameter([&](const auto& t) {
    out.put_floats(std::span<const float>(t.data(), static_cast<std::size_t>(t.size())));
  });
  out.put(detail::crc32(out.bytes()));
  return std::move(out.bytes());
}

LoraAdapter<float> decode_adapter(std::span<const std::uint8_t> bytes) {
  const std::string what = "adapter";
  ByteReader r(bytes, what);
  check_magic(r, kAdapterMagic, what);
  AdapterFileHeader h;
  h.version = r.get<std::uint16_t>();
  if (h.version != kAdapterVersion) throw FormatError("adapter: unsupported version " + std::to_string(h.version));
  h.flags = r.get<std::uint16_t>();
  h.task_name = r.get_string(r.get<std::uint16_t>());
  h.dim = r.get<std::uint32_t>();
  h.depth = r.get<std::uint32_t>();
  h.rank = r.get<std::uint32_t>();
  h.num_classes = r.get<std::uint32_t>();
  h.scale = r.get<float>();
  if (h.dim == 0 || h.depth == 0 || h.rank == 0 || h.rank >= h.dim || h.num_classes == 0) {
    throw FormatError("adapter: implausible header (d=" + std::to_string(h.dim) + " L=" + std::to_string(h.depth) +
                      " r=" + std::to_string(h.rank) + " classes=" + std::to_string(h.num_classes) + ")");
  }
  if (bytes.size() != h.file_bytes()) {
    // Check the CRC first when possible so truncation reads as corruption.
    if (bytes.size() >= 4) {
      std::uint32_t stored;
      std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
      if (detail::crc32(bytes.first(bytes.size() - 4)) != stored) {
        throw ChecksumError("adapter: CRC32 mismatch (file is " + std::to_string(bytes.size()) + " bytes, header implies " +
                            std::to_string(h.file_bytes()) + ")");
      }
    }
    throw FormatError("adapter: size " + std::to_string(bytes.size()) + " does not match header (" +
                      std::to_string(h.file_bytes()) + ")");
  }
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (detail::crc32(bytes.first(bytes.size() - 4)) != stored) throw ChecksumError("adapter: CRC32 mismatch");

  LoraAdapter<float> a;
  a.task_name = h.task_name;
  a.dim = h.dim;
  a.rank = h.rank;
  a.scale = h.scale;
  a.layers.resize(h.depth);
  for (auto& l : a.layers) {
    for (auto* p : {&l.query, &l.value}) {
      p->a.resize(h.rank, h.dim);
      p->b.resize(h.dim, h.rank);
    }
  }
  a.head.weight.resize(h.num_classes, h.dim);
  a.head.bias.resize(h.num_classes);
  a.for_each_parameter([&](auto& t) { r.get_floats(std::span<float>(t.data(), static_cast<std::size_t>(t.size()))); });
  return a;
}

void save_adapter(const LoraAdapter<float>& a, const std::filesystem::path& path) {
  detail::write_file(path, encode_adapter(a));
}

LoraAdapter<float> load_adapter(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  try {
    return decode_adapter(bytes);
  } catch (const ChecksumError& e) {
    throw ChecksumError("'" + path.string() + "': " + e.what());
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

std::size_t adapter_file_size(const LoraAdapter<float>& a) {
  AdapterFileHeader h;
  h.task_name = a.task_name;
  h.dim = a.dim;
  h.depth = a.depth();
  h.rank = a.rank;
  h.num_classes = static_cast<std::uint32_t>(a.num_classes());
  return h.file_bytes();
}

std::size_t adapter_file_size(const ViTConfig& cfg, std::uint32_t rank, std::size_t num_classes,
                              std::size_t task_name_bytes) {
  AdapterFileHeader h;
  h.task_name.assign(task_name_bytes, 'x');
  h.dim = cfg.dim;
  h.depth = cfg.depth;
  h.rank = rank;
  h.num_classes = static_cast<std::uint32_t>(num_classes);
  return h.file_bytes();
}

}  // namespace melo

#include <cctype>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"
#include "melo/tensor.hpp"

namespace melo {

std::string shape_string(std::span<const std::size_t> shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
std::size_t checked_product(const std::vector<std::size_t>& shape) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor: zero-length dimension in shape " + shape_string(shape));
  }
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)), data_(checked_product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_product(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape_) + " needs " + std::to_string(checked_product(shape_)) +
                     " values, got " + std::to_string(data_.size()));
  }
}

namespace detail {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

}  // namespace detail

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.put_bytes("MELT");
  w.put(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put(static_cast<std::uint32_t>(d));
  w.put_floats(t.data());
  detail::write_file(path, w.bytes());
}

Tensor load_tensor(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader r(bytes, "tensor file '" + path.string() + "'");
  if (r.get_string(4) != "MELT") throw FormatError("tensor file '" + path.string() + "': bad magic");
  const auto rank = r.get<std::uint32_t>();
  if (rank == 0 || rank > 8) throw FormatError("tensor file '" + path.string() + "': bad rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = r.get<std::uint32_t>();
  Tensor t(shape);
  r.get_floats(t.data());
  if (r.remaining() != 0) throw FormatError("tensor file '" + path.string() + "': trailing bytes");
  return t;
}

Tensor load_pgm(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok += static_cast<char>(bytes[pos++]);
    if (tok.empty()) throw FormatError("pgm '" + path.string() + "': truncated header");
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P5" && magic != "P2") throw FormatError("pgm '" + path.string() + "': unsupported magic " + magic);
  const std::size_t width = std::stoul(next_token());
  const std::size_t height = std::stoul(next_token());
  const std::size_t maxval = std::stoul(next_token());
  if (maxval == 0 || maxval > 65535) throw FormatError("pgm '" + path.string() + "': bad maxval");
  Tensor t({1, height, width});
  const float inv = 1.0f / static_cast<float>(maxval);
  if (magic == "P2") {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(std::stoul(next_token())) * inv;
    return t;
  }
  ++pos;  // single whitespace after maxval
  const std::size_t bpp = maxval < 256 ? 1 : 2;
  if (bytes.size() < pos + t.size() * bpp) throw FormatError("pgm '" + path.string() + "': truncated raster");
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::size_t v = bpp == 1 ? bytes[pos + i] : (std::size_t{bytes[pos + 2 * i]} << 8 | bytes[pos + 2 * i + 1]);
    t[i] = static_cast<float>(v) * inv;
  }
  return t;
}

Tensor load_image(const std::filesystem::path& path) {
  return path.extension() == ".pgm" ? load_pgm(path) : load_tensor(path);
}

}  // namespace melo

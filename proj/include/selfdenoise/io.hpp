// Image, checkpoint and manifest files.
//
// Checkpoint layout (all integers little-endian):
//   "SDAE"  u32 version
//   u32 input_size, input_channels, stages, base_width, bottleneck_channels
//   f64 activation_slope
//   u32 parameter count, then per parameter:
//     u32 name length, UTF-8 name, u32 rank, u64 extents[rank], f32 values[]
#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "selfdenoise/model.hpp"
#include "selfdenoise/tensor.hpp"

namespace selfdenoise {

namespace fs = std::filesystem;

/// I/O and format errors (maps to the CLI's data-error exit code).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::uint16_t to_u16(double v) {
  return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
}
}  // namespace detail

/// Writes a [1,H,W] (or [H,W]) image in [0,1] as binary 16-bit PGM.
template <typename T>
void write_pgm16(const fs::path& path, const Tensor<T>& img) {
  const std::size_t H = img.rank() == 2 ? img.dim(0) : img.dim(1);
  const std::size_t W = img.rank() == 2 ? img.dim(1) : img.dim(2);
  if (img.rank() == 3 && img.dim(0) != 1) throw DataError("PGM holds one channel, image has " + shape_str(img.shape()));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P5\n" << W << ' ' << H << "\n65535\n";
  std::vector<unsigned char> buf(2 * H * W);
  for (std::size_t i = 0; i < H * W; ++i) {
    const auto v = detail::to_u16(static_cast<double>(img[i]));
    buf[2 * i] = static_cast<unsigned char>(v >> 8);
    buf[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

/// Reads binary PGM (8- or 16-bit) as a [1,H,W] tensor scaled to [0,1].
inline Tensor<float> read_pgm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        if (!t.empty()) break;
      } else {
        t += c;
      }
    }
    return t;
  };
  if (token() != "P5") throw DataError(path.string() + ": not a binary PGM (P5)");
  std::size_t W = 0, H = 0, maxval = 0;
  try {
    W = std::stoul(token());
    H = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw DataError(path.string() + ": malformed PGM header");
  }
  if (W == 0 || H == 0 || maxval == 0 || maxval > 65535) throw DataError(path.string() + ": bad PGM header values");
  const std::size_t bytes = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> buf(W * H * bytes);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(is.gcount()) != buf.size()) throw DataError(path.string() + ": truncated PGM data");
  Tensor<float> img(Shape{1, H, W});
  for (std::size_t i = 0; i < W * H; ++i) {
    const unsigned v = bytes == 2 ? (unsigned{buf[2 * i]} << 8) | buf[2 * i + 1] : buf[i];
    img[i] = static_cast<float>(static_cast<double>(v) / static_cast<double>(maxval));
  }
  return img;
}

/// Reads a PNG as [C,H,W] in [0,1]; grey stays 1 channel, colour becomes 3
/// (alpha is dropped).
inline Tensor<float> read_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str()))
    throw DataError(path.string() + ": " + image.message);
  const bool colour = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  // 16-bit files come back untouched through the linear formats, 8-bit files
  // through the 8-bit ones; either way no gamma conversion is applied.
  const bool wide = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
  image.format = wide ? (colour ? PNG_FORMAT_LINEAR_RGB : PNG_FORMAT_LINEAR_Y)
                      : (colour ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY);
  const std::size_t C = colour ? 3 : 1, H = image.height, W = image.width;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw DataError(path.string() + ": " + image.message);
  }
  Tensor<float> img(Shape{C, H, W});
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      double v;
      if (wide) {
        png_uint_16 u;
        std::memcpy(&u, buf.data() + (i * C + c) * 2, 2);
        v = u / 65535.0;
      } else {
        v = buf[i * C + c] / 255.0;
      }
      img[c * H * W + i] = static_cast<float>(v);
    }
  return img;
}

/// Writes a [C,H,W] image (C = 1 or 3) in [0,1] as 16-bit PNG.
template <typename T>
void write_png16(const fs::path& path, const Tensor<T>& img) {
  if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
    throw DataError("PNG output needs [1|3,H,W], got " + shape_str(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot write " + path.string());
  std::unique_ptr<FILE, int (*)(FILE*)> file(fp, &std::fclose);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialisation failed");
  }
  std::vector<unsigned char> rows(H * W * C * 2);
  for (std::size_t i = 0; i < H * W; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const auto v = detail::to_u16(static_cast<double>(img[c * H * W + i]));
      rows[(i * C + c) * 2] = static_cast<unsigned char>(v >> 8);
      rows[(i * C + c) * 2 + 1] = static_cast<unsigned char>(v & 0xFF);
    }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 16,
               C == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t r = 0; r < H; ++r) png_write_row(png, rows.data() + r * W * C * 2);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline bool is_png(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png";
}

inline bool is_image_file(const fs::path& p) {
  auto e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e == ".png" || e == ".pgm" || e == ".pnm";
}

inline Tensor<float> read_image(const fs::path& p) { return is_png(p) ? read_png(p) : read_pgm(p); }

template <typename T>
void write_image(const fs::path& p, const Tensor<T>& img) {
  if (is_png(p))
    write_png16(p, img);
  else
    write_pgm16(p, img);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[4] = {'S', 'D', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    bytes.insert(bytes.end(), b, b + sizeof(U));
  }
  void put_bytes(const void* p, std::size_t n) {
    auto* c = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), c, c + n);
  }
  std::vector<unsigned char> bytes;
};

class ByteReader {
 public:
  ByteReader(std::vector<unsigned char> b, std::string source) : bytes_(std::move(b)), source_(std::move(source)) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    unsigned char b[sizeof(U)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError(source_ + ": truncated checkpoint");
  }
  std::vector<unsigned char> bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<unsigned char> encode_checkpoint(const AutoencoderModel<T>& model) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const auto& c = model.config();
  for (auto v : {c.input_size, c.input_channels, c.stages, c.base_width, c.bottleneck_channels})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<double>(c.activation_slope);
  const auto& params = model.named_parameters();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.put_bytes(p.name.data(), p.name.size());
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (auto e : p.value.shape()) w.put<std::uint64_t>(e);
    for (auto v : p.value.data()) w.put<float>(static_cast<float>(v));
  }
  return w.bytes;
}

template <typename T>
void save_checkpoint(const fs::path& path, const AutoencoderModel<T>& model) {
  const auto bytes = encode_checkpoint(model);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("write failed for " + path.string());
}

template <typename T = float>
AutoencoderModel<T> load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  detail::ByteReader r(std::move(bytes), path.string());
  if (r.get_string(4) != std::string(kCheckpointMagic, 4)) throw DataError(path.string() + ": not a checkpoint");
  if (auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  ModelConfig c;
  c.input_size = r.get<std::uint32_t>();
  c.input_channels = r.get<std::uint32_t>();
  c.stages = r.get<std::uint32_t>();
  c.base_width = r.get<std::uint32_t>();
  c.bottleneck_channels = r.get<std::uint32_t>();
  c.activation_slope = r.get<double>();
  std::vector<Variable<T>> params(r.get<std::uint32_t>());
  for (auto& p : params) {
    p.name = r.get_string(r.get<std::uint32_t>());
    Shape s(r.get<std::uint32_t>());
    for (auto& e : s) e = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (s.empty() || shape_numel(s) > (std::size_t{1} << 32)) throw DataError(path.string() + ": bad extents for " + p.name);
    std::vector<T> d(shape_numel(s));
    for (auto& v : d) v = static_cast<T>(r.get<float>());
    p.value = Tensor<T>(std::move(s), std::move(d));
  }
  if (!r.done()) throw DataError(path.string() + ": trailing bytes after checkpoint");
  try {
    return AutoencoderModel<T>::from_parameters(c, params);
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// key = value files (manifests and run configs)

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

inline KeyValues parse_key_values(std::istream& is, const std::string& source) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline KeyValues read_key_values(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path.string());
  return parse_key_values(is, path.string());
}

inline void write_key_values(const fs::path& path, const KeyValues& kv) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
}

}  // namespace selfdenoise

#include "segguide/image_io.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

namespace segguide {
namespace {

namespace fs = std::filesystem;

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

enum NiftiCode : int16_t {
  kDtUInt8 = 2,
  kDtInt16 = 4,
  kDtInt32 = 8,
  kDtFloat32 = 16,
  kDtFloat64 = 64,
  kDtInt8 = 256,
  kDtUInt16 = 512,
  kDtUInt32 = 768,
  kDtInt64 = 1024,
};

struct GzCloser {
  void operator()(gzFile f) const { gzclose(f); }
};
using GzHandle = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

template <typename T>
T load(const unsigned char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap && sizeof(T) > 1) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void store(unsigned char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

void read_exact(gzFile f, void* dst, size_t n, const fs::path& path) {
  auto* out = static_cast<unsigned char*>(dst);
  while (n > 0) {
    const unsigned chunk = static_cast<unsigned>(std::min<size_t>(n, 1u << 30));
    const int got = gzread(f, out, chunk);
    if (got <= 0) throw std::runtime_error("truncated image file: " + path.string());
    out += got;
    n -= static_cast<size_t>(got);
  }
}

template <typename T>
void convert(const std::vector<unsigned char>& raw, bool swap, std::vector<float>& out) {
  const size_t n = out.size();
  for (size_t i = 0; i < n; ++i) out[i] = static_cast<float>(load<T>(raw.data() + i * sizeof(T), swap));
}

int bytes_per_voxel(int16_t code) {
  switch (code) {
    case kDtUInt8:
    case kDtInt8: return 1;
    case kDtInt16:
    case kDtUInt16: return 2;
    case kDtInt32:
    case kDtUInt32:
    case kDtFloat32: return 4;
    case kDtFloat64:
    case kDtInt64: return 8;
    default: return 0;
  }
}

void decode(int16_t code, const std::vector<unsigned char>& raw, bool swap, std::vector<float>& out) {
  switch (code) {
    case kDtUInt8: convert<uint8_t>(raw, swap, out); break;
    case kDtInt8: convert<int8_t>(raw, swap, out); break;
    case kDtInt16: convert<int16_t>(raw, swap, out); break;
    case kDtUInt16: convert<uint16_t>(raw, swap, out); break;
    case kDtInt32: convert<int32_t>(raw, swap, out); break;
    case kDtUInt32: convert<uint32_t>(raw, swap, out); break;
    case kDtFloat32: convert<float>(raw, swap, out); break;
    case kDtFloat64: convert<double>(raw, swap, out); break;
    case kDtInt64: convert<int64_t>(raw, swap, out); break;
    default: throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(code));
  }
}

// Disk order is X fastest; the tensor is [X, Y, Z] row-major (Z fastest).
torch::Tensor from_disk_order(std::vector<float>& values, const Extent3& xyz) {
  auto t = torch::from_blob(values.data(), {xyz[2], xyz[1], xyz[0]}, torch::kFloat32);
  return t.permute({2, 1, 0}).contiguous();
}

std::vector<float> to_disk_order(const torch::Tensor& data) {
  auto t = data.to(torch::kFloat32).permute({2, 1, 0}).contiguous();
  return std::vector<float>(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
}

ScalarImage read_nifti(const fs::path& path) {
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open image file: " + path.string());
  unsigned char hdr[kHeaderSize];
  read_exact(f.get(), hdr, kHeaderSize, path);

  bool swap = false;
  if (load<int32_t>(hdr, false) != kHeaderSize) {
    if (load<int32_t>(hdr, true) != kHeaderSize) {
      throw std::runtime_error("not a NIfTI-1 file: " + path.string());
    }
    swap = true;
  }
  if (std::memcmp(hdr + 344, "n+1", 3) != 0 && std::memcmp(hdr + 344, "ni1", 3) != 0) {
    throw std::runtime_error("missing NIfTI-1 magic in " + path.string());
  }
  if (std::memcmp(hdr + 344, "ni1", 3) == 0) {
    throw std::runtime_error("two-file NIfTI (.hdr/.img) is not supported: " + path.string());
  }

  const auto ndim = load<int16_t>(hdr + 40, swap);
  if (ndim < 3) throw std::runtime_error("expected a 3D image in " + path.string());
  Extent3 xyz{};
  for (int i = 0; i < 3; ++i) xyz[i] = load<int16_t>(hdr + 42 + 2 * i, swap);
  for (int i = 3; i < ndim && i < 7; ++i) {
    if (load<int16_t>(hdr + 42 + 2 * i, swap) > 1) {
      throw std::runtime_error("4D images are not supported: " + path.string());
    }
  }
  const auto datatype = load<int16_t>(hdr + 70, swap);
  const int bpv = bytes_per_voxel(datatype);
  if (bpv == 0) throw std::runtime_error("unsupported NIfTI datatype in " + path.string());

  ScalarImage image;
  for (int i = 0; i < 3; ++i) {
    const float p = load<float>(hdr + 80 + 4 * i, swap);
    image.spacing_mm[i] = p > 0.0f ? p : 1.0;
  }
  const auto vox_offset = static_cast<long>(load<float>(hdr + 108, swap));
  float slope = load<float>(hdr + 112, swap);
  const float inter = load<float>(hdr + 116, swap);

  // Skip header extensions.
  const long skip = vox_offset - kHeaderSize;
  if (skip > 0) {
    std::vector<unsigned char> pad(static_cast<size_t>(skip));
    read_exact(f.get(), pad.data(), pad.size(), path);
  }

  const size_t n = static_cast<size_t>(xyz[0] * xyz[1] * xyz[2]);
  std::vector<unsigned char> raw(n * static_cast<size_t>(bpv));
  read_exact(f.get(), raw.data(), raw.size(), path);
  std::vector<float> values(n);
  decode(datatype, raw, swap, values);
  if (slope != 0.0f && (slope != 1.0f || inter != 0.0f)) {
    for (auto& v : values) v = v * slope + inter;
  }
  image.data = from_disk_order(values, xyz);
  return image;
}

void write_nifti(const fs::path& path, const ScalarImage& image, VoxelType type) {
  const auto xyz = spatial_extent(image.data);
  for (auto e : xyz) {
    if (e > INT16_MAX) throw std::runtime_error("image too large for NIfTI-1: " + path.string());
  }
  unsigned char hdr[kDataOffset] = {};
  store<int32_t>(hdr, kHeaderSize);
  store<int16_t>(hdr + 40, 3);
  for (int i = 0; i < 3; ++i) store<int16_t>(hdr + 42 + 2 * i, static_cast<int16_t>(xyz[i]));
  for (int i = 3; i < 7; ++i) store<int16_t>(hdr + 42 + 2 * i, 1);
  int16_t code = kDtFloat32;
  int16_t bitpix = 32;
  if (type == VoxelType::kUInt8) {
    code = kDtUInt8;
    bitpix = 8;
  } else if (type == VoxelType::kInt16) {
    code = kDtInt16;
    bitpix = 16;
  }
  store<int16_t>(hdr + 70, code);
  store<int16_t>(hdr + 72, bitpix);
  store<float>(hdr + 76, 1.0f);
  for (int i = 0; i < 3; ++i) store<float>(hdr + 80 + 4 * i, static_cast<float>(image.spacing_mm[i]));
  store<float>(hdr + 108, static_cast<float>(kDataOffset));
  store<float>(hdr + 112, 1.0f);
  hdr[123] = 2;  // mm
  store<int16_t>(hdr + 254, 1);  // sform: scaled identity
  store<float>(hdr + 280, static_cast<float>(image.spacing_mm[0]));
  store<float>(hdr + 296 + 4, static_cast<float>(image.spacing_mm[1]));
  store<float>(hdr + 312 + 8, static_cast<float>(image.spacing_mm[2]));
  std::memcpy(hdr + 344, "n+1", 4);

  const auto values = to_disk_order(image.data);
  std::vector<unsigned char> payload;
  if (type == VoxelType::kFloat32) {
    payload.resize(values.size() * 4);
    std::memcpy(payload.data(), values.data(), payload.size());
  } else if (type == VoxelType::kUInt8) {
    payload.resize(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
      payload[i] = static_cast<uint8_t>(std::clamp(std::lround(values[i]), 0L, 255L));
    }
  } else {
    payload.resize(values.size() * 2);
    for (size_t i = 0; i < values.size(); ++i) {
      store<int16_t>(payload.data() + 2 * i,
                     static_cast<int16_t>(std::clamp(std::lround(values[i]), -32768L, 32767L)));
    }
  }

  const bool gz = path.extension() == ".gz";
  GzHandle f(gzopen(path.c_str(), gz ? "wb6" : "wbT"));
  if (!f) throw std::runtime_error("cannot write image file: " + path.string());
  if (gzwrite(f.get(), hdr, kDataOffset) != kDataOffset ||
      gzwrite(f.get(), payload.data(), static_cast<unsigned>(payload.size())) !=
          static_cast<int>(payload.size())) {
    throw std::runtime_error("write failed: " + path.string());
  }
}

fs::path sidecar_of(const fs::path& raw) { return fs::path(raw.string() + ".json"); }

ScalarImage read_raw(const fs::path& path) {
  std::ifstream meta_in(sidecar_of(path));
  if (!meta_in) throw std::runtime_error("missing sidecar metadata for " + path.string());
  const auto meta = nlohmann::json::parse(meta_in);
  const auto shape = meta.at("shape").get<std::vector<int64_t>>();
  if (shape.size() != 3) throw std::runtime_error("raw sidecar shape must have 3 entries");
  const auto dtype = meta.value("dtype", std::string("float32"));
  if (dtype != "float32") throw std::runtime_error("raw images must be float32: " + path.string());
  ScalarImage image;
  if (meta.contains("spacing")) {
    const auto sp = meta.at("spacing").get<std::vector<double>>();
    for (int i = 0; i < 3; ++i) image.spacing_mm[i] = sp.at(i);
  }
  // Raw payload is stored in tensor order: [X, Y, Z] row-major.
  const size_t n = static_cast<size_t>(shape[0] * shape[1] * shape[2]);
  std::vector<float> values(n);
  std::ifstream in(path, std::ios::binary);
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * 4))) {
    throw std::runtime_error("truncated raw image: " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& v : values) {
      auto* b = reinterpret_cast<unsigned char*>(&v);
      std::reverse(b, b + 4);
    }
  }
  image.data = torch::from_blob(values.data(), {shape[0], shape[1], shape[2]}, torch::kFloat32).clone();
  return image;
}

void write_raw(const fs::path& path, const ScalarImage& image) {
  auto t = image.data.to(torch::kFloat32).contiguous();
  const auto e = spatial_extent(t);
  nlohmann::json meta = {{"shape", {e[0], e[1], e[2]}},
                         {"spacing", {image.spacing_mm[0], image.spacing_mm[1], image.spacing_mm[2]}},
                         {"dtype", "float32"},
                         {"byte_order", "little"}};
  std::ofstream(sidecar_of(path)) << meta.dump(2) << "\n";
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
            static_cast<std::streamsize>(t.numel() * 4));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

bool is_raw_path(const fs::path& path) { return path.extension() == ".raw"; }

ScalarImage read_image(const fs::path& path) {
  if (!fs::exists(path)) throw std::runtime_error("image file not found: " + path.string());
  return is_raw_path(path) ? read_raw(path) : read_nifti(path);
}

void write_image(const fs::path& path, const ScalarImage& image, VoxelType type) {
  if (image.data.dim() != 3) throw ValidationError("write_image expects a 3D tensor");
  if (is_raw_path(path)) {
    write_raw(path, image);
  } else {
    write_nifti(path, image, type);
  }
}

}  // namespace segguide

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "textseg/errors.hpp"

#include <json.hpp>

namespace textseg {

static_assert(std::endian::native == std::endian::little,
              "raw volume payloads are little-endian");

// Sidecar header stored as JSON at <payload path>.json. The payload itself
// is raw little-endian data, row-major in the declared axis order.
struct VolumeHeader {
  std::vector<std::size_t> shape;
  std::string dtype;              // "f32" | "f64" | "u8"
  std::string axis_order = "zyx";
  std::array<double, 3> spacing = {1.0, 1.0, 1.0};

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

  std::size_t element_size() const {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    if (dtype == "u8") return 1;
    throw IoError("unknown volume dtype: " + dtype);
  }
};

namespace iodetail {

inline std::string header_path(const std::string& payload_path) {
  return payload_path + ".json";
}

inline void write_file(const std::string& path, const void* data,
                       std::size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open: " + path);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(n));
  f.read(buf.data(), n);
  if (!f) throw IoError("read failed: " + path);
  return buf;
}

}  // namespace iodetail

inline void write_volume_header(const std::string& payload_path,
                                const VolumeHeader& h) {
  nlohmann::ordered_json j;
  j["shape"] = h.shape;
  j["dtype"] = h.dtype;
  j["axis_order"] = h.axis_order;
  j["spacing"] = h.spacing;
  const std::string text = j.dump(2) + "\n";
  iodetail::write_file(iodetail::header_path(payload_path), text.data(),
                       text.size());
}

inline VolumeHeader read_volume_header(const std::string& payload_path) {
  auto buf = iodetail::read_file(iodetail::header_path(payload_path));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(buf.begin(), buf.end());
  } catch (const std::exception& e) {
    throw IoError("corrupt volume header " +
                  iodetail::header_path(payload_path) + ": " + e.what());
  }
  VolumeHeader h;
  try {
    h.shape = j.at("shape").get<std::vector<std::size_t>>();
    h.dtype = j.at("dtype").get<std::string>();
    h.axis_order = j.value("axis_order", std::string("zyx"));
    auto sp = j.value("spacing", std::vector<double>{1.0, 1.0, 1.0});
    if (sp.size() != 3) throw IoError("spacing must have 3 entries");
    h.spacing = {sp[0], sp[1], sp[2]};
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt volume header " +
                  iodetail::header_path(payload_path) + ": " + e.what());
  }
  (void)h.element_size();  // validates dtype
  return h;
}

template <class T>
inline void write_volume(const std::string& payload_path,
                         const VolumeHeader& h, const std::vector<T>& data) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double> ||
                std::is_same_v<T, std::uint8_t>);
  if (data.size() != h.numel()) {
    throw IoError("payload size " + std::to_string(data.size()) +
                  " does not match header (" + std::to_string(h.numel()) +
                  " elements)");
  }
  if (sizeof(T) != h.element_size()) {
    throw IoError("payload element size does not match dtype " + h.dtype);
  }
  write_volume_header(payload_path, h);
  iodetail::write_file(payload_path, data.data(), data.size() * sizeof(T));
}

namespace iodetail {

inline void check_payload_size(const std::string& path, std::size_t actual,
                               const VolumeHeader& h) {
  const std::size_t expected = h.numel() * h.element_size();
  if (actual != expected) {
    throw IoError("payload size mismatch for " + path + ": expected " +
                  std::to_string(expected) + " bytes, got " +
                  std::to_string(actual) + " bytes");
  }
}

}  // namespace iodetail

// Reads an f32 or f64 payload, widening to double.
inline std::vector<double> read_volume_f64(const std::string& payload_path,
                                           VolumeHeader& h_out) {
  h_out = read_volume_header(payload_path);
  if (h_out.dtype != "f32" && h_out.dtype != "f64") {
    throw IoError("expected real-valued volume, got dtype " + h_out.dtype +
                  " in " + payload_path);
  }
  auto buf = iodetail::read_file(payload_path);
  iodetail::check_payload_size(payload_path, buf.size(), h_out);
  std::vector<double> out(h_out.numel());
  if (h_out.dtype == "f64") {
    std::memcpy(out.data(), buf.data(), buf.size());
  } else {
    const float* src = reinterpret_cast<const float*>(buf.data());
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<double>(src[i]);
  }
  return out;
}

inline std::vector<float> read_volume_f32(const std::string& payload_path,
                                          VolumeHeader& h_out) {
  h_out = read_volume_header(payload_path);
  if (h_out.dtype != "f32") {
    throw IoError("expected f32 volume, got dtype " + h_out.dtype + " in " +
                  payload_path);
  }
  auto buf = iodetail::read_file(payload_path);
  iodetail::check_payload_size(payload_path, buf.size(), h_out);
  std::vector<float> out(h_out.numel());
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

inline std::vector<std::uint8_t> read_volume_u8(const std::string& payload_path,
                                                VolumeHeader& h_out) {
  h_out = read_volume_header(payload_path);
  if (h_out.dtype != "u8") {
    throw IoError("expected u8 volume, got dtype " + h_out.dtype + " in " +
                  payload_path);
  }
  auto buf = iodetail::read_file(payload_path);
  iodetail::check_payload_size(payload_path, buf.size(), h_out);
  std::vector<std::uint8_t> out(h_out.numel());
  std::memcpy(out.data(), buf.data(), buf.size());
  return out;
}

// ---------------------------------------------------------------------------
// Resampling (cubic volumes, pixel-center alignment)
// ---------------------------------------------------------------------------

// Trilinear interpolation of a (z, y, x) volume from size s to size t.
template <class T>
inline std::vector<T> resample_trilinear(const std::vector<T>& src,
                                         std::size_t s, std::size_t t) {
  if (s == t) return src;
  std::vector<T> dst(t * t * t);
  const double ratio = static_cast<double>(s) / static_cast<double>(t);
  auto src_at = [&](std::size_t z, std::size_t y, std::size_t x) {
    return static_cast<double>(src[(z * s + y) * s + x]);
  };
  for (std::size_t z = 0; z < t; ++z)
    for (std::size_t y = 0; y < t; ++y)
      for (std::size_t x = 0; x < t; ++x) {
        auto coord = [&](std::size_t i) {
          double c = (static_cast<double>(i) + 0.5) * ratio - 0.5;
          return std::clamp(c, 0.0, static_cast<double>(s - 1));
        };
        const double fz = coord(z), fy = coord(y), fx = coord(x);
        const std::size_t z0 = static_cast<std::size_t>(fz);
        const std::size_t y0 = static_cast<std::size_t>(fy);
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const std::size_t z1 = std::min(z0 + 1, s - 1);
        const std::size_t y1 = std::min(y0 + 1, s - 1);
        const std::size_t x1 = std::min(x0 + 1, s - 1);
        const double wz = fz - static_cast<double>(z0);
        const double wy = fy - static_cast<double>(y0);
        const double wx = fx - static_cast<double>(x0);
        double v = 0.0;
        v += (1 - wz) * (1 - wy) * (1 - wx) * src_at(z0, y0, x0);
        v += (1 - wz) * (1 - wy) * wx * src_at(z0, y0, x1);
        v += (1 - wz) * wy * (1 - wx) * src_at(z0, y1, x0);
        v += (1 - wz) * wy * wx * src_at(z0, y1, x1);
        v += wz * (1 - wy) * (1 - wx) * src_at(z1, y0, x0);
        v += wz * (1 - wy) * wx * src_at(z1, y0, x1);
        v += wz * wy * (1 - wx) * src_at(z1, y1, x0);
        v += wz * wy * wx * src_at(z1, y1, x1);
        dst[(z * t + y) * t + x] = static_cast<T>(v);
      }
  return dst;
}

// Nearest-neighbour resampling; preserves label values exactly.
inline std::vector<std::uint8_t> resample_nearest(
    const std::vector<std::uint8_t>& src, std::size_t s, std::size_t t) {
  if (s == t) return src;
  std::vector<std::uint8_t> dst(t * t * t);
  const double ratio = static_cast<double>(s) / static_cast<double>(t);
  auto nearest = [&](std::size_t i) {
    const double c = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    const long r = std::lround(std::clamp(c, 0.0, static_cast<double>(s - 1)));
    return static_cast<std::size_t>(r);
  };
  for (std::size_t z = 0; z < t; ++z)
    for (std::size_t y = 0; y < t; ++y)
      for (std::size_t x = 0; x < t; ++x)
        dst[(z * t + y) * t + x] =
            src[(nearest(z) * s + nearest(y)) * s + nearest(x)];
  return dst;
}

}  // namespace textseg

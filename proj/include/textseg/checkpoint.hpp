#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "textseg/errors.hpp"
#include "textseg/tensor.hpp"
#include "textseg/volume_io.hpp"

#include <json.hpp>

namespace textseg {

// Parameter checkpoint: flat little-endian binary of f64 values at
// <base>.bin plus a sidecar manifest <base>.json listing (name, shape,
// offset in bytes) per tensor. Round-trips bit-exactly. f32 payloads are
// accepted on load and widened.
inline void save_checkpoint(
    const std::string& base,
    const std::vector<std::pair<std::string, Tensor>>& params) {
  std::vector<double> flat;
  nlohmann::ordered_json manifest;
  manifest["dtype"] = "f64";
  manifest["entries"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : params) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = flat.size() * sizeof(double);
    manifest["entries"].push_back(e);
    flat.insert(flat.end(), t.values().begin(), t.values().end());
  }
  manifest["total_bytes"] = flat.size() * sizeof(double);
  const std::string text = manifest.dump(2) + "\n";
  iodetail::write_file(base + ".json", text.data(), text.size());
  iodetail::write_file(base + ".bin", flat.data(),
                       flat.size() * sizeof(double));
}

// Loads values into the given tensors; names and shapes must match the
// manifest exactly (same order).
inline void load_checkpoint(
    const std::string& base,
    std::vector<std::pair<std::string, Tensor>> params) {
  auto mbuf = iodetail::read_file(base + ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mbuf.begin(), mbuf.end());
  } catch (const std::exception& e) {
    throw IoError("corrupt checkpoint manifest " + base + ".json: " +
                  e.what());
  }
  const std::string dtype = manifest.value("dtype", "f64");
  if (dtype != "f64" && dtype != "f32") {
    throw IoError("checkpoint dtype must be f64 or f32, got " + dtype);
  }
  const std::size_t esize = dtype == "f64" ? 8 : 4;
  auto bin = iodetail::read_file(base + ".bin");

  const auto& entries = manifest.at("entries");
  if (entries.size() != params.size()) {
    throw IoError("checkpoint has " + std::to_string(entries.size()) +
                  " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    auto& [name, t] = params[i];
    if (e.at("name").get<std::string>() != name) {
      throw IoError("checkpoint tensor " + std::to_string(i) + " is '" +
                    e.at("name").get<std::string>() + "', model expects '" +
                    name + "'");
    }
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape()) {
      throw IoError("checkpoint shape mismatch for " + name);
    }
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t bytes = t.numel() * esize;
    if (offset + bytes > bin.size()) {
      throw IoError("checkpoint payload truncated: need " +
                    std::to_string(offset + bytes) + " bytes, have " +
                    std::to_string(bin.size()));
    }
    auto& dst = t.mutable_values();
    if (dtype == "f64") {
      std::memcpy(dst.data(), bin.data() + offset, bytes);
    } else {
      const float* src = reinterpret_cast<const float*>(bin.data() + offset);
      for (std::size_t k = 0; k < dst.size(); ++k)
        dst[k] = static_cast<double>(src[k]);
    }
    if (!t.all_finite()) {
      throw NumericError("checkpoint tensor " + name +
                         " contains non-finite values");
    }
  }
}

}  // namespace textseg

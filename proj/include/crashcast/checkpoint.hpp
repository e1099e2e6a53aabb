#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "crashcast/config.hpp"
#include "crashcast/tensor.hpp"

namespace crashcast::checkpoint {

// Checkpoint directory layout:
//   manifest.txt   format_version, kind, and the config snapshot (key-value)
//   weights.bin    named tensor blobs
inline constexpr int kFormatVersion = 1;
inline constexpr char kWeightsMagic[8] = {'C', 'C', 'W', 'T', '0', '0', '0', '1'};

namespace detail {

template <class T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

inline void save_weights(const std::filesystem::path& file,
                         const std::vector<std::pair<std::string, const Tensor*>>& weights) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write weights file " + file.string());
  out.write(kWeightsMagic, sizeof(kWeightsMagic));
  detail::write_pod(out, static_cast<std::uint32_t>(weights.size()));
  for (const auto& [name, tensor] : weights) {
    detail::write_pod(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<std::uint32_t>(tensor->ndim()));
    for (int d = 0; d < tensor->ndim(); ++d)
      detail::write_pod(out, static_cast<std::int64_t>(tensor->dim(d)));
    out.write(reinterpret_cast<const char*>(tensor->data()),
              static_cast<std::streamsize>(sizeof(double)) * tensor->size());
  }
  if (!out) throw std::runtime_error("write failed for " + file.string());
}

inline std::map<std::string, Tensor> load_weights(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open weights file " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a weights file: " + file.string());
  std::uint32_t count = 0;
  detail::read_pod(in, count);
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    detail::read_pod(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint32_t ndim = 0;
    detail::read_pod(in, ndim);
    std::vector<int> shape(ndim);
    for (auto& d : shape) {
      std::int64_t v = 0;
      detail::read_pod(in, v);
      d = static_cast<int>(v);
    }
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double)) * t.size());
    if (!in) throw std::runtime_error("truncated weights file: " + file.string());
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

struct Checkpoint {
  int format_version = kFormatVersion;
  std::string kind;  // "detector" | "forecaster"
  config::KeyValues cfg;
  std::map<std::string, Tensor> weights;
};

inline void save(const std::filesystem::path& dir, const std::string& kind,
                 const config::KeyValues& cfg,
                 const std::vector<std::pair<std::string, const Tensor*>>& weights) {
  std::filesystem::create_directories(dir);
  config::KeyValues manifest;
  manifest["format_version"] = std::to_string(kFormatVersion);
  manifest["kind"] = kind;
  for (const auto& [k, v] : cfg) manifest["config." + k] = v;
  config::write_kv_file(dir / "manifest.txt", manifest);
  save_weights(dir / "weights.bin", weights);
}

inline Checkpoint load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "manifest.txt"))
    throw std::runtime_error("no checkpoint manifest at " + dir.string() +
                             " (run the matching train command first)");
  Checkpoint ck;
  const auto manifest = config::load_kv_file(dir / "manifest.txt");
  ck.format_version = static_cast<int>(config::get_int(manifest, "format_version", -1));
  if (ck.format_version != kFormatVersion)
    throw std::runtime_error("unsupported checkpoint format version in " + dir.string());
  ck.kind = config::get_string(manifest, "kind", "");
  for (const auto& [k, v] : manifest)
    if (k.rfind("config.", 0) == 0) ck.cfg[k.substr(7)] = v;
  ck.weights = load_weights(dir / "weights.bin");
  return ck;
}

}  // namespace crashcast::checkpoint

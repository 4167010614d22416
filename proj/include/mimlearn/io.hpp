#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimlearn/common.hpp"
#include "mimlearn/learner.hpp"
#include "mimlearn/synthetic.hpp"

// Binary containers use little-endian IEEE-754 doubles and 32-bit cell
// coordinates behind a magic tag, a format version, and a JSON header:
//
//   magic[4] | u32 version | u64 header_len | header JSON | payload
//
// "MLDS" payload: xs row-major (n*d doubles), then ys (n doubles).
// "MLHY" payload: basis row-major (d*k doubles), then cells in ascending
// coordinate order, each k int32 coordinates followed by one double value.

static_assert(std::endian::native == std::endian::little,
              "binary container io assumes a little-endian host");

namespace mim {

inline constexpr uint32_t kFormatVersion = 1;

inline std::string spec_hash(const nlohmann::json& spec) {
  const std::string dump = spec.dump();
  const uint64_t h = fnv1a64(dump.data(), dump.size());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

namespace detail {

template <typename T>
inline void put(std::ostream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <typename T>
inline void get(std::istream& is, T& value, const char* what) {
  is.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!is) throw IoError(std::string("truncated container while reading ") + what);
}

inline void put_bytes(std::ostream& os, const void* data, size_t len) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
}

inline void get_bytes(std::istream& is, void* data, size_t len, const char* what) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(len));
  if (!is) throw IoError(std::string("truncated container while reading ") + what);
}

inline nlohmann::json open_container(std::istream& is, const char* magic, const char* path) {
  char tag[4];
  get_bytes(is, tag, 4, "magic");
  if (std::memcmp(tag, magic, 4) != 0)
    throw IoError(std::string(path) + ": not a " + magic + " container");
  uint32_t version = 0;
  get(is, version, "format version");
  if (version == 0 || version > kFormatVersion)
    throw IoError(std::string(path) + ": unsupported format version " + std::to_string(version));
  uint64_t hlen = 0;
  get(is, hlen, "header length");
  if (hlen > (1ull << 30)) throw IoError(std::string(path) + ": implausible header length");
  std::string header(hlen, '\0');
  get_bytes(is, header.data(), hlen, "header");
  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded()) throw IoError(std::string(path) + ": malformed container header");
  return j;
}

inline void write_container_prefix(std::ostream& os, const char* magic,
                                   const nlohmann::json& header) {
  put_bytes(os, magic, 4);
  put(os, kFormatVersion);
  const std::string h = header.dump();
  put(os, static_cast<uint64_t>(h.size()));
  put_bytes(os, h.data(), h.size());
}

}  // namespace detail

inline void save_dataset(const LabeledDataset& dataset, const std::string& path,
                         const std::string& hash = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  nlohmann::json header;
  header["d"] = dataset.dim();
  header["n"] = dataset.size();
  header["seed"] = dataset.seed;
  header["format_version"] = kFormatVersion;
  nlohmann::json prov = nlohmann::json::parse(dataset.provenance, nullptr, false);
  header["provenance"] = prov.is_discarded() ? nlohmann::json(dataset.provenance) : prov;
  if (!hash.empty()) header["spec_hash"] = hash;
  detail::write_container_prefix(os, "MLDS", header);
  for (Eigen::Index i = 0; i < dataset.size(); ++i)
    for (Eigen::Index j = 0; j < dataset.dim(); ++j) detail::put(os, dataset.xs(i, j));
  for (Eigen::Index i = 0; i < dataset.size(); ++i) detail::put(os, dataset.ys[i]);
  if (!os) throw IoError(path + ": write failed");
}

inline LabeledDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");
  const nlohmann::json header = detail::open_container(is, "MLDS", path.c_str());
  if (!header.contains("d") || !header.contains("n"))
    throw IoError(path + ": container header lacks dimensions");
  const Eigen::Index d = header.at("d").get<Eigen::Index>();
  const Eigen::Index n = header.at("n").get<Eigen::Index>();
  if (d < 1 || n < 0) throw IoError(path + ": invalid dimensions in header");
  LabeledDataset dataset;
  dataset.seed = header.value("seed", uint64_t{0});
  if (header.contains("provenance")) {
    const auto& p = header.at("provenance");
    dataset.provenance = p.is_string() ? p.get<std::string>() : p.dump();
  }
  dataset.xs.resize(n, d);
  dataset.ys.resize(n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) detail::get(is, dataset.xs(i, j), "samples");
  for (Eigen::Index i = 0; i < n; ++i) detail::get(is, dataset.ys[i], "labels");
  return dataset;
}

inline void save_hypothesis(const PiecewiseConstantHypothesis& h, const std::string& path,
                            const std::string& hash = {}, const std::string& data_hash = {}) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  const Eigen::Index d = h.v.ambient_dim();
  const Eigen::Index k = h.v.dim();
  nlohmann::json header;
  header["d"] = d;
  header["k"] = k;
  header["n_cells"] = h.cell_values.size();
  header["format_version"] = kFormatVersion;
  header["partition"] = {{"dim", h.partition.dim},
                         {"width", h.partition.width},
                         {"offset", h.partition.offset},
                         {"halfwidth", h.partition.halfwidth},
                         {"cells_per_axis", h.partition.cells_per_axis}};
  if (!hash.empty()) header["spec_hash"] = hash;
  if (!data_hash.empty()) header["data_hash"] = data_hash;
  detail::write_container_prefix(os, "MLHY", header);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < k; ++j) detail::put(os, h.v.basis(i, j));
  for (const auto& [cell, value] : h.cell_values) {
    if (static_cast<Eigen::Index>(cell.size()) != k)
      throw ShapeError(path + ": cell arity does not match subspace dimension");
    for (int32_t c : cell) detail::put(os, c);
    detail::put(os, value);
  }
  if (!os) throw IoError(path + ": write failed");
}

inline PiecewiseConstantHypothesis load_hypothesis(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");
  const nlohmann::json header = detail::open_container(is, "MLHY", path.c_str());
  for (const char* key : {"d", "k", "n_cells", "partition"})
    if (!header.contains(key)) throw IoError(path + ": container header lacks " + std::string(key));
  const Eigen::Index d = header.at("d").get<Eigen::Index>();
  const Eigen::Index k = header.at("k").get<Eigen::Index>();
  const size_t n_cells = header.at("n_cells").get<size_t>();
  if (d < 1 || k < 0 || k > d) throw IoError(path + ": invalid dimensions in header");
  PiecewiseConstantHypothesis h;
  const auto& part = header.at("partition");
  h.partition.dim = part.at("dim").get<int>();
  h.partition.width = part.at("width").get<double>();
  h.partition.offset = part.at("offset").get<double>();
  h.partition.halfwidth = part.at("halfwidth").get<double>();
  h.partition.cells_per_axis = part.at("cells_per_axis").get<int>();
  if (h.partition.dim != static_cast<int>(k))
    throw IoError(path + ": partition arity disagrees with k");
  h.v.basis.resize(d, k);
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < k; ++j) detail::get(is, h.v.basis(i, j), "basis");
  for (size_t c = 0; c < n_cells; ++c) {
    std::vector<int32_t> cell(static_cast<size_t>(k));
    for (auto& coord : cell) detail::get(is, coord, "cells");
    double value = 0.0;
    detail::get(is, value, "cells");
    h.cell_values.emplace(std::move(cell), value);
  }
  return h;
}

inline nlohmann::json read_container_header(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError(path + ": cannot open");
  char tag[4];
  detail::get_bytes(is, tag, 4, "magic");
  const char* magic = std::memcmp(tag, "MLDS", 4) == 0   ? "MLDS"
                      : std::memcmp(tag, "MLHY", 4) == 0 ? "MLHY"
                                                         : nullptr;
  if (!magic) throw IoError(path + ": not a recognized container");
  is.seekg(0);
  return detail::open_container(is, magic, path.c_str());
}

inline std::string spec_hash_of_file(const std::string& path) {
  return read_container_header(path).value("spec_hash", std::string{});
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError(path + ": cannot open for writing");
  os << j.dump(2) << '\n';
  if (!os) throw IoError(path + ": write failed");
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError(path + ": cannot open");
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw IoError(path + ": malformed JSON");
  return j;
}

}  // namespace mim

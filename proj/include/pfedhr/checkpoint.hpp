#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "pfedhr/model.hpp"

namespace pfedhr {

// Versioned binary model container. Layout (all integers and floats
// little-endian):
//   "PFHR" | u32 version | u32 record_count | records...
// Each record is one block (body blocks in order, classifier head last):
//   u8 kind | i32 client_id | i32 layer_index | u8 provenance | f32 dropout_p
//   | u8 n_in  | u32 in_spec...
//   | u8 n_out | u32 out_spec...
//   | u32 n_params | { u16 name_len | name | u8 rank | u32 dims... | f32 data... }
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  put_bytes(os, buf, sizeof(T));  // assumes little-endian host, checked below
}

inline void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw TruncatedFile("checkpoint ended unexpectedly");
}

template <typename T>
T get_le(std::istream& is) {
  T v;
  get_bytes(is, &v, sizeof(T));
  return v;
}

inline void check_host_endianness() {
  const std::uint32_t probe = 1;
  unsigned char b;
  std::memcpy(&b, &probe, 1);
  if (b != 1) throw Error("checkpoint io requires a little-endian host");
}

template <typename S>
void write_unit(std::ostream& os, const LayerUnit<S>& unit) {
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(unit.kind));
  put_le<std::int32_t>(os, unit.origin.client_id);
  put_le<std::int32_t>(os, unit.origin.layer_index);
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(unit.origin.kind));
  put_le<float>(os, static_cast<float>(unit.dropout_p));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(unit.in_spec.size()));
  for (int d : unit.in_spec) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(unit.out_spec.size()));
  for (int d : unit.out_spec) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(unit.params.size()));
  for (const auto& [name, t] : unit.params) {
    put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    put_bytes(os, name.data(), name.size());
    put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
    for (int d : t.shape) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (S v : t.data) put_le<float>(os, static_cast<float>(v));
  }
}

template <typename S>
LayerUnit<S> read_unit(std::istream& is) {
  LayerUnit<S> unit;
  unit.kind = static_cast<BlockKind>(get_le<std::uint8_t>(is));
  unit.origin.client_id = get_le<std::int32_t>(is);
  unit.origin.layer_index = get_le<std::int32_t>(is);
  unit.origin.kind = static_cast<ProvenanceKind>(get_le<std::uint8_t>(is));
  unit.dropout_p = static_cast<S>(get_le<float>(is));
  const int n_in = get_le<std::uint8_t>(is);
  for (int i = 0; i < n_in; ++i) unit.in_spec.push_back(static_cast<int>(get_le<std::uint32_t>(is)));
  const int n_out = get_le<std::uint8_t>(is);
  for (int i = 0; i < n_out; ++i) unit.out_spec.push_back(static_cast<int>(get_le<std::uint32_t>(is)));
  const std::uint32_t n_params = get_le<std::uint32_t>(is);
  for (std::uint32_t p = 0; p < n_params; ++p) {
    const std::uint16_t len = get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    get_bytes(is, name.data(), len);
    const int rank = get_le<std::uint8_t>(is);
    std::vector<int> shape;
    for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int>(get_le<std::uint32_t>(is)));
    Tensor<S> t(shape);
    for (auto& v : t.data) v = static_cast<S>(get_le<float>(is));
    unit.params.emplace(std::move(name), std::move(t));
  }
  return unit;
}

}  // namespace detail

template <typename S>
void save_model(const ModelState<S>& model, std::ostream& os) {
  detail::check_host_endianness();
  detail::put_bytes(os, "PFHR", 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(model.layers.size() + 1));
  for (const auto& unit : model.layers) detail::write_unit(os, unit);
  detail::write_unit(os, model.head);
}

template <typename S>
void save_model(const ModelState<S>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path);
  save_model(model, os);
}

template <typename S = float>
ModelState<S> load_model(std::istream& is) {
  detail::check_host_endianness();
  char magic[4];
  detail::get_bytes(is, magic, 4);
  if (std::memcmp(magic, "PFHR", 4) != 0) throw BadMagic("not a PFHR checkpoint");
  const std::uint32_t version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw Error("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t records = detail::get_le<std::uint32_t>(is);
  if (records == 0) throw TruncatedFile("checkpoint contains no records");
  ModelState<S> model;
  for (std::uint32_t i = 0; i + 1 < records; ++i) model.layers.push_back(detail::read_unit<S>(is));
  model.head = detail::read_unit<S>(is);
  return model;
}

template <typename S = float>
ModelState<S> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open checkpoint: " + path);
  return load_model<S>(is);
}

}  // namespace pfedhr

#pragma once

// Checkpoint file: magic, version, step, parameter groups, optimizer
// moments and the RNG state, all little-endian.

#include <string>

#include "avd2v/binio.hpp"
#include "avd2v/pretrain.hpp"

namespace avd2v {

inline constexpr char kCheckpointMagic[] = "AVD2VCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void write_store(binio::Writer& w, const ParamStore<T>& p) {
  w.u32(static_cast<std::uint32_t>(p.size()));
  for (const auto& e : p.entries()) {
    w.str(e.name);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) w.u64(d);
    w.u32(e.trainable ? 1 : 0);
    w.f32s(e.value.data());
  }
}

template <class T>
ParamStore<T> read_store(binio::Reader& r) {
  ParamStore<T> p;
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.str(4096);
    const auto rank = r.u32();
    if (rank > 8) throw FormatError("checkpoint: implausible rank for '" + name + "'");
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    const bool trainable = r.u32() != 0;
    const auto count = shape_numel(shape);
    if (count * 4 > r.remaining()) throw FormatError("checkpoint: truncated data");
    p.add(name, Tensor<T>::from(shape, r.f32s<T>(count)), trainable);
  }
  return p;
}

template <class T>
void write_moments(binio::Writer& w, const std::vector<std::string>& names, const std::vector<std::vector<T>>& m) {
  w.u32(static_cast<std::uint32_t>(m.size()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    w.str(names[i]);
    w.u64(m[i].size());
    w.f32s(std::span<const T>(m[i]));
  }
}

template <class T>
std::vector<std::vector<T>> read_moments(binio::Reader& r, std::vector<std::string>* names) {
  const auto n = r.u32();
  std::vector<std::vector<T>> m;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.str(4096);
    if (names) names->push_back(name);
    const auto count = r.u64();
    if (count * 4 > r.remaining()) throw FormatError("checkpoint: truncated data");
    m.push_back(r.f32s<T>(count));
  }
  return m;
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(const ModelState<T>& s) {
  binio::Writer w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u64(s.step);
  detail::write_store(w, s.student);
  detail::write_store(w, s.teacher);
  w.u64(s.adam.t);
  detail::write_moments(w, s.adam.names, s.adam.m);
  detail::write_moments(w, s.adam.names, s.adam.v);
  w.str(s.rng.serialize());
  return w.bytes();
}

/// Parses into temporaries; the caller only sees a state if the whole file
/// was valid.
template <class T>
ModelState<T> decode_checkpoint(const std::string& bytes, const std::string& context = "checkpoint") {
  binio::Reader r(bytes.data(), bytes.size(), context);
  const std::string magic = r.raw(sizeof(kCheckpointMagic) - 1);
  if (magic != kCheckpointMagic) throw FormatError(context + ": bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(context + ": unsupported version " + std::to_string(version));
  ModelState<T> s;
  s.step = r.u64();
  s.student = detail::read_store<T>(r);
  s.teacher = detail::read_store<T>(r);
  for (auto& e : s.teacher.entries()) e.value.set_requires_grad(false);
  s.adam.t = r.u64();
  s.adam.m = detail::read_moments<T>(r, &s.adam.names);
  s.adam.v = detail::read_moments<T>(r, nullptr);
  if (s.adam.m.size() != s.adam.v.size()) throw FormatError(context + ": moment groups disagree");
  s.rng.deserialize(r.str());
  if (!r.at_end()) throw FormatError(context + ": trailing bytes");
  if (!s.teacher.entries().empty() && !s.teacher.same_structure(s.student))
    throw FormatError(context + ": teacher and student differ in structure");
  return s;
}

template <class T>
void save_checkpoint(const ModelState<T>& s, const std::string& path) {
  binio::write_file_atomic(path, encode_checkpoint(s));
}

template <class T>
ModelState<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(binio::read_file(path), path);
}

}  // namespace avd2v

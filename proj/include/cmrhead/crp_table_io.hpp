#pragma once

// Binary CRP table cache.
//
// Layout (all little-endian):
//   char[8]  magic "CMRCRPTB"
//   u32      format version
//   u32      lag range L
//   u64      list length
//   4 x { u32 n, f64[n] }   beta_enc, beta_rec, gamma_ft, inv_temp axes
//   u64      value count (= entries * (2L + 1))
//   f64[...] q values in grid enumeration order

#include "cmrhead/fit.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <optional>

namespace cmrhead {

static_assert(std::endian::native == std::endian::little,
              "table cache I/O assumes a little-endian host");

inline constexpr char kCrpTableMagic[8] = {'C', 'M', 'R', 'C', 'R', 'P', 'T', 'B'};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw data_error("truncated CRP table file");
  return v;
}

}  // namespace detail

/// Writes the table; returns an error message instead of throwing on failure.
inline std::optional<std::string> save_crp_table(const CRPTable& t, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) return "cannot open " + path + " for writing";
  os.write(kCrpTableMagic, sizeof kCrpTableMagic);
  detail::put<std::uint32_t>(os, t.format_version);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.lag_range));
  detail::put<std::uint64_t>(os, t.list_len);
  for (const auto* axis : {&t.grid.beta_enc, &t.grid.beta_rec, &t.grid.gamma_ft, &t.grid.inv_temp}) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(axis->size()));
    os.write(reinterpret_cast<const char*>(axis->data()),
             static_cast<std::streamsize>(axis->size() * sizeof(double)));
  }
  detail::put<std::uint64_t>(os, t.q.size());
  os.write(reinterpret_cast<const char*>(t.q.data()),
           static_cast<std::streamsize>(t.q.size() * sizeof(double)));
  os.flush();
  if (!os) return "write to " + path + " failed";
  return std::nullopt;
}

inline CRPTable load_crp_table(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot open CRP table " + path);
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCrpTableMagic, sizeof magic) != 0)
    throw data_error(path + " is not a CRP table file");
  CRPTable t;
  t.format_version = detail::get<std::uint32_t>(is);
  if (t.format_version != CRPTable::kFormatVersion)
    throw data_error("unsupported CRP table version " + std::to_string(t.format_version));
  t.lag_range = static_cast<int>(detail::get<std::uint32_t>(is));
  t.list_len = detail::get<std::uint64_t>(is);
  for (auto* axis : {&t.grid.beta_enc, &t.grid.beta_rec, &t.grid.gamma_ft, &t.grid.inv_temp}) {
    const auto n = detail::get<std::uint32_t>(is);
    if (n > (1u << 20)) throw data_error("implausible grid axis length in " + path);
    axis->resize(n);
    if (!is.read(reinterpret_cast<char*>(axis->data()), static_cast<std::streamsize>(n * sizeof(double))))
      throw data_error("truncated CRP table file");
  }
  try {
    t.grid.validate();
  } catch (const precondition_error& e) {
    throw data_error(path + ": " + e.what());
  }
  const auto count = detail::get<std::uint64_t>(is);
  if (count != t.entries() * t.width())
    throw data_error(path + ": value count does not match the grid");
  t.q.resize(count);
  if (!is.read(reinterpret_cast<char*>(t.q.data()), static_cast<std::streamsize>(count * sizeof(double))))
    throw data_error("truncated CRP table file");
  if (is.peek() != std::char_traits<char>::eof()) throw data_error(path + ": trailing bytes");
  return t;
}

}  // namespace cmrhead

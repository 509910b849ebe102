#include "cgpattn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace cgpattn {

namespace {

constexpr char kMagic[8] = {'C', 'G', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint64_t kVersion = 1;

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double d) {
  write_u64(out, std::bit_cast<std::uint64_t>(d));
}

double read_f64(std::istream& in) {
  return std::bit_cast<double>(read_u64(in));
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValueError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 8);
  write_u64(out, kVersion);
  write_u64(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.entry(i).name;
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& m = params.entry(i).value;
    write_u64(out, static_cast<std::uint64_t>(m.rows()));
    write_u64(out, static_cast<std::uint64_t>(m.cols()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& m = params.entry(i).value;
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) write_f64(out, m(r, c));
  }
  if (!out) throw ValueError("checkpoint write failed: " + path);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValueError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw ValueError("not a checkpoint file: " + path);
  if (read_u64(in) != kVersion)
    throw ValueError("unsupported checkpoint version in " + path);
  const std::uint64_t count = read_u64(in);
  std::vector<std::string> names(count);
  for (auto& name : names) {
    const std::uint64_t len = read_u64(in);
    name.resize(len);
    in.read(name.data(), static_cast<std::streamsize>(len));
  }
  std::vector<std::pair<std::uint64_t, std::uint64_t>> shapes(count);
  for (auto& s : shapes) {
    s.first = read_u64(in);
    s.second = read_u64(in);
  }
  ParamStore params;
  for (std::uint64_t i = 0; i < count; ++i) {
    Matrix m(static_cast<Index>(shapes[i].first),
             static_cast<Index>(shapes[i].second));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = read_f64(in);
    params.add(names[i], std::move(m));
  }
  if (!in) throw ValueError("truncated checkpoint: " + path);
  return params;
}

}  // namespace cgpattn

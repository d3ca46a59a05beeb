#include "pcvd/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include "pcvd/binary_io.hpp"

namespace pcvd {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

}  // namespace io

std::vector<std::uint8_t> encode_checkpoint(const ParameterMap& params) {
  io::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (Index e : t.shape()) w.u64(static_cast<std::uint64_t>(e));
    w.raw(t.values().data(), t.values().size() * sizeof(double));
  }
  return w.buffer();
}

ParameterMap decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (r.remaining() < kCheckpointMagic.size() || r.bytes(kCheckpointMagic.size()) != kCheckpointMagic)
    throw FormatError("not a " + std::string(kCheckpointMagic) + " checkpoint", 0);
  const std::uint64_t count = r.u64();
  ParameterMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t at = r.offset();
    const std::string name = r.bytes(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank), at);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& e : shape) {
      const std::uint64_t v = r.u64();
      if (v == 0 || v > (1ull << 32)) throw FormatError("implausible extent in '" + name + "'", r.offset());
      e = static_cast<Index>(v);
      numel *= v;
    }
    if (numel * sizeof(double) > r.remaining()) throw FormatError("truncated payload for '" + name + "'", r.offset());
    std::vector<double> values(numel);
    r.f64s(values.data(), numel);
    if (!out.emplace(name, Tensor(std::move(shape), std::move(values))).second)
      throw FormatError("duplicate parameter '" + name + "'", at);
  }
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const ParameterMap& params) {
  io::write_file(path, encode_checkpoint(params));
}

ParameterMap read_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

std::uint64_t parameter_checksum(const ParameterMap& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
  };
  for (const auto& [name, t] : params) {
    mix(name.data(), name.size());
    for (Index e : t.shape()) mix(&e, sizeof e);
    mix(t.values().data(), t.values().size() * sizeof(double));
  }
  return h;
}

}  // namespace pcvd

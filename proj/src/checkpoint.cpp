#include "promuse/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "promuse/errors.hpp"

namespace promuse {

namespace {

constexpr char kMagic[7] = {'P', 'M', 'U', 'S', 'E', '1', '\0'};

void write_u64(std::ofstream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::ifstream& is, const std::string& path) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw IoError("checkpoint: truncated file " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_f64(std::ofstream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  write_u64(os, bits);
}

double read_f64(std::ifstream& is, const std::string& path) {
  std::uint64_t bits = read_u64(is, path);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_u64(os, params.size());
  for (const auto& e : params.entries()) {
    write_u64(os, e.name.size());
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    const auto& shape = e.tensor.shape();
    write_u64(os, shape.size());
    for (auto ext : shape) write_u64(os, static_cast<std::uint64_t>(ext));
    const char flag = e.trainable ? 1 : 0;
    os.write(&flag, 1);
    for (double v : e.tensor.values()) write_f64(os, v);
  }
  if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

ParameterSet load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifactError("checkpoint: cannot open '" + path + "'");
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(kMagic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint: bad magic in '" + path + "' (not a PMUSE1 file)");

  ParameterSet out;  // built fully before returning; errors leave no partial state
  const std::uint64_t count = read_u64(is, path);
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint64_t name_len = read_u64(is, path);
    if (name_len > (1u << 20)) throw IoError("checkpoint: absurd name length in " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!is) throw IoError("checkpoint: truncated file " + path);
    const std::uint64_t rank = read_u64(is, path);
    if (rank == 0 || rank > 8) throw IoError("checkpoint: bad rank in " + path);
    Shape shape(rank);
    std::int64_t numel = 1;
    for (auto& e : shape) {
      e = static_cast<std::int64_t>(read_u64(is, path));
      if (e <= 0) throw IoError("checkpoint: bad extent in " + path);
      numel *= e;
    }
    char flag = 0;
    is.read(&flag, 1);
    if (!is) throw IoError("checkpoint: truncated file " + path);
    std::vector<double> values(static_cast<std::size_t>(numel));
    for (auto& v : values) v = read_f64(is, path);
    out.add(name, Tensor::from(std::move(values), std::move(shape)), flag != 0);
  }
  return out;
}

std::string manifest_path_for(const std::string& checkpoint_path) {
  return checkpoint_path + ".manifest.json";
}

}  // namespace promuse

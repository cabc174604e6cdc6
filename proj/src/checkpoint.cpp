#include "mlens/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace mlens {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'N', 'S'};

void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw ConfigError("truncated checkpoint header");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const Parameters& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kCheckpointVersion);
  const std::string cfg = params.config.to_json();
  write_u32(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::vector<float> blob;
  for (const double* s : params.scalars()) blob.push_back(static_cast<float>(*s));
  static_assert(sizeof(float) == 4);
  // The build targets little-endian hosts; the format is defined LE.
  os.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size() * 4));
  if (!os) throw ConfigError("checkpoint write failed: " + path);
}

Parameters load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw ConfigError("bad checkpoint magic");
  const uint32_t version = read_u32(is);
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
  const uint32_t cfg_len = read_u32(is);
  std::string cfg_text(cfg_len, '\0');
  is.read(cfg_text.data(), cfg_len);
  if (!is) throw ConfigError("truncated checkpoint config block");
  ModelConfig cfg = ModelConfig::from_json(cfg_text);
  Parameters params = Parameters::init(cfg, Rng(0));
  std::vector<double*> scalars = params.scalars();
  std::vector<float> blob(scalars.size());
  is.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob.size() * 4));
  if (is.gcount() != static_cast<std::streamsize>(blob.size() * 4)) throw ConfigError("truncated checkpoint payload");
  for (size_t i = 0; i < scalars.size(); ++i) *scalars[i] = static_cast<double>(blob[i]);
  return params;
}

}  // namespace mlens

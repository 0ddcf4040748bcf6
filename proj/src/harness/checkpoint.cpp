#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fgc/error.hpp"
#include "fgc/harness.hpp"

namespace fgc::harness {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'F', 'G', 'C', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + offset, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(bytes), std::end(bytes));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

Checkpoint read_body(const json& header, const std::string& bytes, std::size_t offset,
                     const std::string& source);

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw ContractError("checkpoint has no tensor named '" + name + "'");
}

std::string serialize(const Checkpoint& ckpt) {
  json entries = json::array();
  for (const auto& [name, t] : ckpt.tensors) entries.push_back({{"name", name}, {"shape", t.shape()}});
  const json header{{"format", "fgc-checkpoint"},
                    {"version", Checkpoint::kVersion},
                    {"config", to_json(ckpt.config)},
                    {"config_hash", ckpt.config_hash},
                    {"epoch", ckpt.epoch},
                    {"rng_state", ckpt.rng_state},
                    {"tensors", entries}};
  const std::string text = header.dump(1);
  std::string out(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(out, Checkpoint::kVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : ckpt.tensors) {
    for (double v : t.data()) put_le<double>(out, v);
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes, const std::string& source) {
  const std::size_t fixed = sizeof(kMagic) + 4 + 8;
  if (bytes.size() < fixed || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError(source + ": not a checkpoint file");
  }
  const auto version = get_le<std::uint32_t>(bytes, sizeof(kMagic));
  if (version != Checkpoint::kVersion) {
    throw ParseError(source + ": checkpoint version " + std::to_string(version) +
                     " unsupported (expected " + std::to_string(Checkpoint::kVersion) + ")");
  }
  const auto header_size = get_le<std::uint64_t>(bytes, sizeof(kMagic) + 4);
  if (bytes.size() < fixed + header_size) {
    throw ParseError(source + ": truncated checkpoint header");
  }
  json header;
  try {
    header = json::parse(bytes.substr(fixed, header_size));
  } catch (const json::parse_error& e) {
    throw ParseError(source + ": corrupt checkpoint header: " + e.what());
  }
  try {
    return read_body(header, bytes, fixed + header_size, source);
  } catch (const json::exception& e) {
    throw ParseError(source + ": malformed checkpoint header: " + e.what());
  }
}

namespace {

Checkpoint read_body(const json& header, const std::string& bytes, std::size_t offset,
                     const std::string& source) {
  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.config_hash = header.at("config_hash").get<std::uint64_t>();
  if (ckpt.config_hash != config_hash(ckpt.config)) {
    throw ParseError(source + ": config hash does not match the stored config");
  }
  ckpt.epoch = header.at("epoch").get<std::size_t>();
  ckpt.rng_state = header.at("rng_state").get<std::string>();
  for (const auto& e : header.at("tensors")) {
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (bytes.size() < offset + n * 8) {
      throw ParseError(source + ": truncated payload for " + e.at("name").get<std::string>() +
                       ", expected " + std::to_string(offset + n * 8) + " bytes, got " +
                       std::to_string(bytes.size()));
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = get_le<double>(bytes, offset + i * 8);
    offset += n * 8;
    ckpt.tensors.emplace_back(e.at("name").get<std::string>(), Tensor(shape, std::move(values)));
  }
  if (offset != bytes.size()) throw ParseError(source + ": trailing bytes after payload");
  return ckpt;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize(ckpt);
  // Write-then-rename so an interrupted save never leaves a torn file.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str(), path.string());
}

}  // namespace fgc::harness

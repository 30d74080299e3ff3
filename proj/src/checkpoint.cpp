#include "lmdir/checkpoint.hpp"

#include <cstring>

#include "lmdir/hash.hpp"
#include "lmdir/image.hpp"
#include "lmdir/serialize.hpp"

namespace lmdir {

namespace {

constexpr char kMagic[8] = {'L', 'M', 'D', 'I', 'R', 'C', 'K', '1'};

void append_tensors(const ParamSet<float>& set, const std::string& group, nlohmann::json& index,
                    std::vector<std::uint8_t>& blob) {
  for (const auto& [name, t] : set) {
    const std::vector<std::uint8_t> bytes = to_f32le(t);
    index.push_back({{"group", group},
                     {"name", name},
                     {"dtype", "f32le"},
                     {"shape", t.shape()},
                     {"offset", blob.size()},
                     {"nbytes", bytes.size()},
                     {"sha256", sha256_hex(bytes)}});
    blob.insert(blob.end(), bytes.begin(), bytes.end());
  }
}

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& what) {
  throw Error(ErrorCode::CacheCorrupt, "checkpoint " + path.string() + ": " + what);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  net::validate(checkpoint.config);
  nlohmann::json index = nlohmann::json::array();
  std::vector<std::uint8_t> blob;
  append_tensors(checkpoint.params, "params", index, blob);
  append_tensors(checkpoint.extra, "extra", index, blob);
  const nlohmann::json header{{"format_version", kCheckpointFormatVersion},
                              {"config", net::to_json(checkpoint.config)},
                              {"config_hash", net::config_hash(checkpoint.config)},
                              {"tensors", index},
                              {"metadata", checkpoint.metadata}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> file(kMagic, kMagic + 8);
  const std::uint64_t length = text.size();
  for (int b = 0; b < 8; ++b) file.push_back(static_cast<std::uint8_t>(length >> (8 * b)));
  file.insert(file.end(), text.begin(), text.end());
  file.insert(file.end(), blob.begin(), blob.end());
  write_file_atomic(path, file);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::NotFound, "checkpoint not found: " + path.string());
  }
  const std::vector<std::uint8_t> file = read_file(path);
  if (file.size() < 16 || std::memcmp(file.data(), kMagic, 8) != 0) corrupt(path, "not a checkpoint file");
  std::uint64_t length = 0;
  for (int b = 0; b < 8; ++b) length |= static_cast<std::uint64_t>(file[8 + b]) << (8 * b);
  if (length > file.size() - 16) corrupt(path, "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(file.begin() + 16, file.begin() + 16 + static_cast<std::ptrdiff_t>(length));
  } catch (const nlohmann::json::exception& e) {
    corrupt(path, std::string("unreadable header: ") + e.what());
  }
  const std::size_t blob_start = 16 + length;

  Checkpoint out;
  try {
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
      corrupt(path, "unsupported format version " + header.at("format_version").dump());
    }
    out.config = net::config_from_json(header.at("config"));
    out.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& entry : header.at("tensors")) {
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (blob_start + offset + nbytes > file.size()) corrupt(path, "truncated tensor payload");
      const std::span<const std::uint8_t> bytes(file.data() + blob_start + offset, nbytes);
      const std::string name = entry.at("name").get<std::string>();
      if (sha256_hex(bytes) != entry.at("sha256").get<std::string>()) corrupt(path, "digest mismatch for " + name);
      Tensor<float> t = from_f32le(bytes, entry.at("shape").get<Shape>());
      auto& target = entry.at("group").get<std::string>() == "params" ? out.params : out.extra;
      target.emplace(name, std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    corrupt(path, std::string("malformed header: ") + e.what());
  }

  const net::NetworkParams expected = net::init_params<float>(out.config, 0);
  if (expected.size() != out.params.size()) {
    throw Error(ErrorCode::InvalidConfig, "checkpoint " + path.string() + " holds " +
                                              std::to_string(out.params.size()) + " parameters, config implies " +
                                              std::to_string(expected.size()));
  }
  for (const auto& [name, t] : expected) {
    auto it = out.params.find(name);
    if (it == out.params.end() || it->second.shape() != t.shape()) {
      throw Error(ErrorCode::InvalidConfig, "checkpoint " + path.string() + " parameter '" + name +
                                                "' is missing or has the wrong shape");
    }
  }
  return out;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const net::NetworkConfig& expected) {
  Checkpoint c = load_checkpoint(path);
  if (!(c.config == expected)) {
    throw Error(ErrorCode::InvalidConfig, "checkpoint " + path.string() + " was saved with config " +
                                              net::to_json(c.config).dump() + ", expected " +
                                              net::to_json(expected).dump());
  }
  return c;
}

}  // namespace lmdir

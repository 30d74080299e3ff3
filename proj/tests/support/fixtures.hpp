#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include "lmdir/network.hpp"
#include "lmdir/prior.hpp"

namespace lmdir::testing {

// Smaller than tiny_config so float64 and gradient tests stay fast.
inline net::NetworkConfig micro_config() {
  net::NetworkConfig c = net::tiny_config();
  c.levels = 3;
  c.channels_per_level = {4, 8, 16};
  c.blocks_per_level_encoder = {1, 1};
  c.bottleneck_blocks = 1;
  c.blocks_per_level_decoder = {1, 1};
  c.heads_per_level = {1, 2, 2};
  c.prompt_channels = 8;
  c.query_tokens = 2;
  c.prompt_heads = 2;
  c.text_tokens = 5;
  c.text_channels = 6;
  c.image_encoder_channels = {2, 2, 4, 4};
  return c;
}

// Fixture providers whose text encoder matches micro_config, with small
// references so micro-scale runs stay fast.
inline prior::ProviderConfig micro_provider_config() {
  prior::ProviderConfig pc;
  pc.reference_size = 32;
  return pc;
}

inline prior::Providers micro_providers() {
  const net::NetworkConfig c = micro_config();
  prior::Providers p = prior::make_providers(micro_provider_config());
  p.text_encoder = std::make_shared<prior::FixtureTextEncoder>(c.text_tokens, c.text_channels);
  return p;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("lmdir-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace lmdir::testing

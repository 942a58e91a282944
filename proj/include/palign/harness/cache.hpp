#pragma once

// Content-addressed stage cache. Entries are published by rename so a
// reader never sees a partial write; two writers of the same key must
// produce identical bytes.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include <unistd.h>

#include "palign/common.hpp"
#include "palign/rmzoo/artifact.hpp"

namespace palign::harness {

namespace fs = std::filesystem;

struct CacheStats {
  std::map<std::string, std::size_t> hits;
  std::map<std::string, std::size_t> misses;

  std::size_t total_hits() const {
    std::size_t n = 0;
    for (const auto& [_, v] : hits) n += v;
    return n;
  }
  std::size_t total_misses() const {
    std::size_t n = 0;
    for (const auto& [_, v] : misses) n += v;
    return n;
  }
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + p.string());
  out << bytes;
  if (!out) throw DataError("write failed for " + p.string());
}

class StageCache {
 public:
  /// An empty root disables the cache: every lookup misses, nothing is stored.
  explicit StageCache(fs::path root = {}) : root_(std::move(root)) {}

  bool enabled() const { return !root_.empty(); }
  const fs::path& root() const { return root_; }
  CacheStats& stats() { return stats_; }
  const CacheStats& stats() const { return stats_; }

  std::optional<std::string> get(const std::string& stage, const std::string& key) {
    if (enabled()) {
      const auto p = root_ / stage / (key + ".json");
      if (fs::exists(p)) {
        ++stats_.hits[stage];
        return read_file(p);
      }
    }
    ++stats_.misses[stage];
    return std::nullopt;
  }

  void put(const std::string& stage, const std::string& key, const std::string& bytes) {
    if (!enabled()) return;
    const auto dir = root_ / stage;
    fs::create_directories(dir);
    const auto target = dir / (key + ".json");
    const auto tmp = dir / (key + tmp_suffix());
    write_file(tmp, bytes);
    publish(tmp, target, [&] {
      if (read_file(target) != bytes) {
        throw IntegrityError("cache key " + stage + "/" + key + " written twice with different bytes");
      }
    });
  }

  std::optional<RewardModelArtifact> get_artifact(const std::string& stage, const std::string& key) {
    if (enabled()) {
      const auto p = root_ / stage / key;
      if (fs::exists(p / "metadata.json")) {
        ++stats_.hits[stage];
        return load_artifact(p);
      }
    }
    ++stats_.misses[stage];
    return std::nullopt;
  }

  void put_artifact(const std::string& stage, const std::string& key, const RewardModelArtifact& a) {
    if (!enabled()) return;
    const auto dir = root_ / stage;
    fs::create_directories(dir);
    const auto target = dir / key;
    const auto tmp = dir / (key + tmp_suffix());
    save_artifact(a, tmp);
    publish(tmp, target, [&] {
      if (artifact_checksum(load_artifact(target)) != artifact_checksum(a)) {
        throw IntegrityError("cache key " + stage + "/" + key + " written twice with different artifacts");
      }
    });
  }

 private:
  static std::string tmp_suffix() {
    static std::atomic<unsigned> counter{0};
    return ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
  }

  template <class Verify>
  static void publish(const fs::path& tmp, const fs::path& target, Verify verify) {
    std::error_code ec;
    if (!fs::exists(target)) {
      fs::rename(tmp, target, ec);
      if (!ec) return;
    }
    // Someone else published first (or rename onto a non-empty dir failed).
    fs::remove_all(tmp);
    if (!fs::exists(target)) throw DataError("cannot publish cache entry " + target.string() + ": " + ec.message());
    verify();
  }

  fs::path root_;
  CacheStats stats_;
};

}  // namespace palign::harness

#pragma once

// RewardModelArtifact: shared tensors, per-user tensors and training
// provenance, plus the on-disk bundle format.

#include <array>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/common.hpp"
#include "palign/models.hpp"

namespace palign {

using json = nlohmann::json;

enum class Method { global, global_v2, mpu, mpu_avg, lore, lore_alt, pref_mod, genarm, plugin };

inline constexpr std::array<Method, 9> kAllMethods = {
    Method::global, Method::global_v2, Method::mpu,     Method::mpu_avg, Method::lore,
    Method::lore_alt, Method::pref_mod, Method::genarm, Method::plugin};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::global: return "global";
    case Method::global_v2: return "global_v2";
    case Method::mpu: return "mpu";
    case Method::mpu_avg: return "mpu_avg";
    case Method::lore: return "lore";
    case Method::lore_alt: return "lore_alt";
    case Method::pref_mod: return "pref_mod";
    case Method::genarm: return "genarm";
    case Method::plugin: return "plugin";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown reward-model method '" + std::string(s) + "'");
}

/// Methods whose reward depends on per-user parameters.
inline bool is_personalized(Method m) {
  switch (m) {
    case Method::mpu:
    case Method::mpu_avg:
    case Method::lore:
    case Method::lore_alt:
    case Method::pref_mod:
      return true;
    default:
      return false;
  }
}

/// Named tensors; iteration order (std::map) fixes the flattening order.
using ParamSet = std::map<std::string, Matrix>;

struct TrainingManifest {
  std::uint64_t seed = 0;
  int epochs = 0;
  std::vector<double> loss_curve;
  json config = json::object();
  std::string data_checksum;
};

inline constexpr const char* kArtifactFormat = "palign-rm/1";

struct RewardModelArtifact {
  Method method = Method::global;
  std::string plugin_name;
  ParamSet shared_params;
  std::map<std::string, ParamSet> user_params;
  std::string backbone_id;
  std::string tokenizer_family;
  int lora_rank = 0;
  TrainingManifest training_manifest;
  json metadata = json::object();

  bool has_user(const std::string& u) const { return user_params.count(u) > 0; }
};

namespace detail {

inline void hash_params(Fnv1a& h, const ParamSet& ps) {
  h.update_u64(ps.size());
  for (const auto& [name, m] : ps) {
    h.field(name).update_u64(static_cast<std::uint64_t>(m.rows())).update_u64(
        static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) h.update_double(m.data()[i]);
  }
}

}  // namespace detail

/// Hash over θ only; adaptation must leave it unchanged.
inline std::string shared_checksum(const RewardModelArtifact& a) {
  Fnv1a h;
  detail::hash_params(h, a.shared_params);
  return h.hex();
}

inline std::string artifact_checksum(const RewardModelArtifact& a) {
  Fnv1a h;
  h.field(to_string(a.method)).field(a.plugin_name).field(a.backbone_id).field(a.tokenizer_family);
  h.update_u64(static_cast<std::uint64_t>(a.lora_rank));
  detail::hash_params(h, a.shared_params);
  h.update_u64(a.user_params.size());
  for (const auto& [u, ps] : a.user_params) {
    h.field(u);
    detail::hash_params(h, ps);
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Bundle format: <dir>/metadata.json + <dir>/tensors.bin.
// tensors.bin: "PALIGNT1", u64 count, then per tensor u64 name length, name,
// u64 rows, u64 cols, rows*cols raw doubles (column-major).
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("truncated tensor file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_tensor(std::ostream& out, const std::string& name, const Matrix& m) {
  write_u64(out, name.size());
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(out, static_cast<std::uint64_t>(m.rows()));
  write_u64(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, m.data() + i, 8);
    write_u64(out, bits);
  }
}

}  // namespace detail

inline json training_manifest_to_json(const TrainingManifest& t) {
  return json{{"seed", t.seed},
              {"epochs", t.epochs},
              {"loss_curve", t.loss_curve},
              {"config", t.config},
              {"data_checksum", t.data_checksum}};
}

inline TrainingManifest training_manifest_from_json(const json& j) {
  TrainingManifest t;
  t.seed = j.at("seed").get<std::uint64_t>();
  t.epochs = j.at("epochs").get<int>();
  t.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  t.config = j.at("config");
  t.data_checksum = j.at("data_checksum").get<std::string>();
  return t;
}

inline void save_artifact(const RewardModelArtifact& a, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> users;
  for (const auto& [u, _] : a.user_params) users.push_back(u);
  json meta = {{"format", kArtifactFormat},
               {"method", to_string(a.method)},
               {"plugin_name", a.plugin_name},
               {"backbone_id", a.backbone_id},
               {"tokenizer_family", a.tokenizer_family},
               {"lora_rank", a.lora_rank},
               {"users", users},
               {"training_manifest", training_manifest_to_json(a.training_manifest)},
               {"metadata", a.metadata},
               {"checksum", artifact_checksum(a)}};
  std::ofstream(dir / "metadata.json") << meta.dump(2) << '\n';

  std::ofstream out(dir / "tensors.bin", std::ios::binary);
  if (!out) throw InputError("cannot write " + (dir / "tensors.bin").string());
  out.write("PALIGNT1", 8);
  std::uint64_t count = a.shared_params.size();
  for (const auto& [u, ps] : a.user_params) count += ps.size();
  detail::write_u64(out, count);
  for (const auto& [name, m] : a.shared_params) detail::write_tensor(out, "shared/" + name, m);
  for (const auto& [u, ps] : a.user_params) {
    for (const auto& [name, m] : ps) detail::write_tensor(out, "user/" + u + "/" + name, m);
  }
}

inline RewardModelArtifact load_artifact(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "metadata.json");
  if (!mf) throw InputError("no artifact at " + dir.string());
  const json meta = json::parse(mf);
  const auto format = meta.at("format").get<std::string>();
  if (format != kArtifactFormat) {
    throw FormatError("artifact format '" + format + "' is not " + kArtifactFormat);
  }
  RewardModelArtifact a;
  a.method = parse_method(meta.at("method").get<std::string>());
  a.plugin_name = meta.value("plugin_name", "");
  a.backbone_id = meta.at("backbone_id").get<std::string>();
  a.tokenizer_family = meta.at("tokenizer_family").get<std::string>();
  a.lora_rank = meta.at("lora_rank").get<int>();
  a.training_manifest = training_manifest_from_json(meta.at("training_manifest"));
  a.metadata = meta.value("metadata", json::object());

  std::ifstream in(dir / "tensors.bin", std::ios::binary);
  if (!in) throw InputError("missing tensors.bin in " + dir.string());
  char magic[8];
  if (!in.read(magic, 8) || std::string_view(magic, 8) != "PALIGNT1") {
    throw FormatError("bad tensor file magic");
  }
  const auto count = detail::read_u64(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(detail::read_u64(in), '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) {
      throw FormatError("truncated tensor name");
    }
    const auto rows = static_cast<Eigen::Index>(detail::read_u64(in));
    const auto cols = static_cast<Eigen::Index>(detail::read_u64(in));
    Matrix m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) {
      const std::uint64_t bits = detail::read_u64(in);
      std::memcpy(m.data() + k, &bits, 8);
    }
    if (name.rfind("shared/", 0) == 0) {
      a.shared_params[name.substr(7)] = std::move(m);
    } else if (name.rfind("user/", 0) == 0) {
      const auto slash = name.rfind('/');
      a.user_params[name.substr(5, slash - 5)][name.substr(slash + 1)] = std::move(m);
    } else {
      throw FormatError("unknown tensor scope in '" + name + "'");
    }
  }
  if (meta.contains("checksum") && meta["checksum"].get<std::string>() != artifact_checksum(a)) {
    throw IntegrityError("artifact checksum mismatch in " + dir.string());
  }
  return a;
}

}  // namespace palign

#pragma once

// Model scales. Desk scales are TinyCharLM configurations that run in
// process; at-scale entries name external checkpoints and only validate.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <functional>
#include <mutex>
#include <span>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "palign/common.hpp"
#include "palign/models.hpp"

namespace palign::harness {

using nlohmann::json;

struct ScaleSpec {
  std::string name;
  std::string backend = "tinychar";  // "tinychar" | "hf"
  std::string model_id;              // external checkpoint (hf only)
  std::string tokenizer_family = "ascii-char";
  int order = 4;
  int hidden_dim = 64;
  std::size_t context_limit = 1024;
  double nominal_params = 0.0;  // sort key for "ascending scale"

  json to_json() const {
    json j = {{"name", name}, {"backend", backend}, {"tokenizer_family", tokenizer_family},
              {"context_limit", context_limit}, {"nominal_params", nominal_params}};
    if (backend == "hf") {
      j["model_id"] = model_id;
    } else {
      j["order"] = order;
      j["hidden_dim"] = hidden_dim;
    }
    return j;
  }
  static ScaleSpec from_json(const json& j) {
    ScaleSpec s;
    s.name = j.at("name").get<std::string>();
    s.backend = j.value("backend", s.backend);
    s.model_id = j.value("model_id", std::string());
    s.tokenizer_family = j.value("tokenizer_family", s.tokenizer_family);
    s.order = j.value("order", s.order);
    s.hidden_dim = j.value("hidden_dim", s.hidden_dim);
    s.context_limit = j.value("context_limit", s.context_limit);
    s.nominal_params = j.value("nominal_params", s.nominal_params);
    s.validate();
    return s;
  }
  void validate() const {
    if (name.empty()) throw ConfigError("scale needs a name");
    if (backend != "tinychar" && backend != "hf") {
      throw ConfigError("scale '" + name + "': unknown backend '" + backend + "'");
    }
    if (backend == "hf" && model_id.empty()) throw ConfigError("scale '" + name + "': hf scale needs model_id");
    if (backend == "tinychar" && (order < 1 || hidden_dim < 1)) {
      throw ConfigError("scale '" + name + "': order and hidden_dim must be >= 1");
    }
    if (context_limit < 8) throw ConfigError("scale '" + name + "': context_limit too small");
  }
};

/// Built-in desk scales, smallest first.
inline const std::vector<ScaleSpec>& desk_scales() {
  static const std::vector<ScaleSpec> s = [] {
    std::vector<ScaleSpec> v;
    auto add = [&](std::string name, int order, int hidden, double nominal) {
      ScaleSpec x;
      x.name = std::move(name);
      x.order = order;
      x.hidden_dim = hidden;
      x.nominal_params = nominal;
      v.push_back(x);
    };
    add("nano", 2, 16, 1e3);
    add("tiny", 3, 32, 1e4);
    add("small", 4, 48, 1e5);
    add("base", 5, 64, 1e6);
    return v;
  }();
  return s;
}

inline std::optional<ScaleSpec> find_desk_scale(const std::string& name) {
  for (const auto& s : desk_scales()) {
    if (s.name == name) return s;
  }
  return std::nullopt;
}

/// "180M" -> 1.8e8, "1.7B" -> 1.7e9; nullopt if the label is not a size.
inline std::optional<double> parse_size_label(const std::string& label) {
  if (label.size() < 2) return std::nullopt;
  const char unit = static_cast<char>(std::toupper(static_cast<unsigned char>(label.back())));
  double mult = unit == 'K' ? 1e3 : unit == 'M' ? 1e6 : unit == 'B' ? 1e9 : 0.0;
  if (mult == 0.0) return std::nullopt;
  const std::string num = label.substr(0, label.size() - 1);
  try {
    std::size_t used = 0;
    const double v = std::stod(num, &used);
    if (used != num.size()) return std::nullopt;
    return v * mult;
  } catch (...) {
    return std::nullopt;
  }
}

/// Orders scale names ascending: explicit nominal size, then desk registry,
/// then size labels, then name.
inline double scale_size(const std::string& name, const std::vector<ScaleSpec>& known = {}) {
  for (const auto& s : known) {
    if (s.name == name && s.nominal_params > 0) return s.nominal_params;
  }
  if (auto d = find_desk_scale(name)) return d->nominal_params;
  if (auto v = parse_size_label(name)) return *v;
  return 1e300;
}

inline void sort_scales(std::vector<std::string>& names, const std::vector<ScaleSpec>& known = {}) {
  std::stable_sort(names.begin(), names.end(), [&](const std::string& a, const std::string& b) {
    const double sa = scale_size(a, known), sb = scale_size(b, known);
    if (sa != sb) return sa < sb;
    return a < b;
  });
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

using ModelFactory = std::function<std::shared_ptr<LanguageModel>(const ScaleSpec&, std::uint64_t seed,
                                                                  std::span<const std::string> fit_texts)>;

class BackendRegistry {
 public:
  static BackendRegistry& instance() {
    static BackendRegistry r;
    return r;
  }
  void register_backend(const std::string& name, ModelFactory f) {
    std::lock_guard lock(mu_);
    factories_[name] = std::move(f);
  }
  bool contains(const std::string& name) const {
    std::lock_guard lock(mu_);
    return factories_.count(name) > 0;
  }
  std::shared_ptr<LanguageModel> make(const ScaleSpec& spec, std::uint64_t seed,
                                      std::span<const std::string> fit_texts) const {
    ModelFactory f;
    {
      std::lock_guard lock(mu_);
      auto it = factories_.find(spec.backend);
      if (it == factories_.end()) {
        throw StageError("backend '" + spec.backend + "' unavailable for scale '" + spec.name + "'" +
                         (spec.model_id.empty() ? "" : " (" + spec.model_id + ")"));
      }
      f = it->second;
    }
    return f(spec, seed, fit_texts);
  }

 private:
  BackendRegistry() {
    factories_["tinychar"] = [](const ScaleSpec& s, std::uint64_t seed, std::span<const std::string> texts) {
      TinyCharLMConfig c;
      c.order = s.order;
      c.hidden_dim = s.hidden_dim;
      c.context_limit = s.context_limit;
      c.seed = seed;
      c.scale = s.name;
      return std::make_shared<TinyCharLM>(c, texts);
    };
  }
  mutable std::mutex mu_;
  std::map<std::string, ModelFactory> factories_;
};

}  // namespace palign::harness

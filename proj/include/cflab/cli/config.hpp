#ifndef CFLAB_CLI_CONFIG_HPP
#define CFLAB_CLI_CONFIG_HPP

#include <yaml-cpp/yaml.h>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cflab/diffcore/error.hpp"

namespace cflab::cli {

enum class Kind { text, choice, integer, real, flag, reals, integers, texts };

struct KeySpec {
  std::string key;
  Kind kind;
  std::string fallback;  // YAML text of the default
  std::string help;
  std::vector<std::string> choices{};
  double min = -std::numeric_limits<double>::infinity();
  double max = std::numeric_limits<double>::infinity();
};

/// Every key a run config may contain, in echo order.
inline const std::vector<KeySpec>& schema() {
  constexpr double inf = std::numeric_limits<double>::infinity();
  static const std::vector<KeySpec> keys{
      {"out", Kind::text, "run", "workspace directory for every artifact"},
      {"seed", Kind::integer, "0", "seed for generation and experiments", {}, 0},

      {"data.modality", Kind::choice, "fundus", "image family", {"fundus", "oct"}},
      {"data.task", Kind::choice, "binary", "label task", {"binary", "multiclass"}},
      {"data.n_train", Kind::integer, "2000", "training images", {}, 1},
      {"data.n_validation", Kind::integer, "200", "validation images", {}, 1},
      {"data.n_test", Kind::integer, "400", "test images", {}, 1},
      {"data.seed", Kind::integer, "1", "dataset seed", {}, 0},
      {"data.class_fractions", Kind::reals, "[]", "share per generator class; empty is uniform", {}, 0},
      {"data.balance", Kind::choice, "as-is", "classifier training balance", {"as-is", "oversample-diseased"}},
      {"data.export_png", Kind::flag, "false", "write every image and lesion mask as PNG"},

      {"diffusion.steps", Kind::integer, "200", "diffusion steps T", {}, 2},
      {"diffusion.base_channels", Kind::integer, "16", "U-Net base width", {}, 2},
      {"diffusion.iterations", Kind::integer, "4000", "training iterations", {}, 1},
      {"diffusion.batch", Kind::integer, "16", "training batch", {}, 1},
      {"diffusion.lr", Kind::real, "0.002", "Adam learning rate", {}, 0, inf},
      {"diffusion.warmup", Kind::integer, "200", "linear warmup iterations", {}, 0},
      {"diffusion.ema_decay", Kind::real, "0.995", "EMA decay", {}, 0, 1},
      {"diffusion.lambda_vlb", Kind::real, "0.001", "weight of the variational term", {}, 0},
      {"diffusion.checkpoint_every", Kind::integer, "500", "iterations between checkpoints", {}, 1},
      {"diffusion.seed", Kind::integer, "0", "training seed", {}, 0},

      {"classifier.widths", Kind::integers, "[16, 32, 64, 64]", "channels per conv block", {}, 1},
      {"classifier.seed", Kind::integer, "0", "initialization and shuffling seed", {}, 0},

      {"train.models", Kind::texts, "[diffusion, plain, robust]", "models to train", {"diffusion", "plain", "robust"}},
      {"train.plain_epochs", Kind::integer, "60", "plain classifier epochs", {}, 1},
      {"train.robust_epochs", Kind::integer, "20", "robust classifier epochs", {}, 1},
      {"train.lr", Kind::real, "0.01", "SGD learning rate", {}, 0},
      {"train.batch", Kind::integer, "32", "SGD batch", {}, 1},
      {"train.momentum", Kind::real, "0.9", "SGD momentum", {}, 0, 1},
      {"train.weight_decay", Kind::real, "0.0005", "SGD weight decay", {}, 0},
      {"train.resume", Kind::flag, "false", "continue from existing checkpoints"},
      {"trades.beta", Kind::real, "6", "TRADES weight of the KL term", {}, 0},

      {"attack.eps", Kind::real, "0.25", "l2 radius for TRADES and PGD evaluation", {}, 0},
      {"attack.steps", Kind::integer, "10", "PGD steps", {}, 1},
      {"attack.step_size", Kind::real, "0.05", "PGD step size", {}, 0},
      {"attack.seed", Kind::integer, "7", "PGD evaluation seed", {}, 0},

      {"guidance.lambda_c", Kind::real, "0.6", "classifier guidance strength", {}, 0},
      {"guidance.lambda_d", Kind::real, "0.5", "distance regularization strength", {}, 0},
      {"guidance.cone_angle", Kind::real, "30", "cone angle in degrees", {}, 0, 90},
      {"guidance.start_fraction", Kind::real, "0.5", "fraction of T where reverse sampling starts", {}, 0, 1},
      {"guidance.distance_norm", Kind::real, "2", "p of the distance regularizer", {}, 1},
      {"guidance.mode", Kind::choice, "cone", "guidance mode", {"plain-only", "robust-only", "cone"}},

      {"svc.eps", Kind::real, "0.3", "ball radius", {}, 0},
      {"svc.p", Kind::real, "4", "ball norm order", {}, 1},
      {"svc.iterations", Kind::integer, "100", "Frank-Wolfe iterations", {}, 1},
      {"svc.momentum", Kind::real, "0.9", "gradient averaging weight", {}, 0, 1},

      {"generate.optimizer", Kind::choice, "dvc", "counterfactual method", {"dvc", "svc", "both"}},
      {"generate.split", Kind::choice, "test", "split to draw inputs from", {"train", "validation", "test"}},
      {"generate.ids", Kind::texts, "[]", "image ids (manifest seeds); when set, replaces generate.count"},
      {"generate.count", Kind::integer, "8", "first images of the split when ids are not set", {}, 0},
      {"generate.target", Kind::text, "flip", "target class, or flip for the other binary class"},
      {"generate.panels", Kind::flag, "true", "write original | counterfactual | difference PNGs"},

      {"experiment.kind", Kind::choice, "sweep", "experiment to run", {"sweep", "comparison", "metrics"}},
      {"experiment.lambda_grid", Kind::reals, "[0.7, 0.5, 0.3, 0.2]", "lambda_d values of the sweep", {}, 0},
      {"experiment.n_per_cell", Kind::integer, "50", "label-correct images per direction", {}, 1},
      {"experiment.split", Kind::choice, "test", "split the images come from", {"train", "validation", "test"}},

      {"export.what", Kind::choice, "samples", "artifact to export", {"samples", "dataset"}},
      {"export.count", Kind::integer, "16", "samples or images to export", {}, 1},
  };
  return keys;
}

inline const KeySpec* find_key(const std::string& key) {
  for (const auto& k : schema())
    if (k.key == key) return &k;
  return nullptr;
}

namespace detail {

inline void flatten(const YAML::Node& node, const std::string& prefix, std::map<std::string, YAML::Node>& out) {
  if (node.IsMap()) {
    for (const auto& kv : node) {
      const auto name = kv.first.as<std::string>();
      flatten(kv.second, prefix.empty() ? name : prefix + "." + name, out);
    }
    return;
  }
  if (prefix.empty()) throw ConfigError("config must be a mapping of keys to values");
  out[prefix] = node;
}

inline YAML::Node load_yaml(const std::string& text, const std::string& what) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace detail

/// A validated run configuration: explicit values over schema defaults.
class Config {
 public:
  Config() = default;

  /// Keys from a YAML document; nested maps become dotted keys.
  static Config from_yaml(const std::string& text, const std::string& origin = "config") {
    Config c;
    const auto root = detail::load_yaml(text, origin);
    if (root.IsNull()) return c;
    detail::flatten(root, "", c.values_);
    return c;
  }

  static Config from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw MissingArtifact("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return from_yaml(ss.str(), path);
  }

  /// "key=value", value in YAML syntax.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq);
    values_[key] = detail::load_yaml(assignment.substr(eq + 1), "override " + key);
  }

  /// Rejects unknown keys and values of the wrong type or range.
  void validate() const {
    for (const auto& [key, node] : values_) {
      const auto* spec = find_key(key);
      if (!spec) throw ConfigError("unknown config key: " + key);
      check(*spec, node);
    }
  }

  bool is_set(const std::string& key) const { return values_.count(key) > 0; }

  std::string text(const std::string& key) const { return node(key).as<std::string>(); }
  std::int64_t integer(const std::string& key) const { return node(key).as<std::int64_t>(); }
  std::size_t count(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }
  std::uint64_t seed(const std::string& key) const { return static_cast<std::uint64_t>(integer(key)); }
  double real(const std::string& key) const { return node(key).as<double>(); }
  bool flag(const std::string& key) const { return node(key).as<bool>(); }
  std::vector<double> reals(const std::string& key) const { return list<double>(key); }
  std::vector<std::size_t> counts(const std::string& key) const {
    std::vector<std::size_t> out;
    for (auto v : list<std::int64_t>(key)) out.push_back(static_cast<std::size_t>(v));
    return out;
  }
  std::vector<std::string> texts(const std::string& key) const { return list<std::string>(key); }

  /// Effective configuration (defaults filled in) as flat YAML in schema order.
  std::string dump() const {
    YAML::Emitter e;
    e << YAML::BeginMap;
    for (const auto& k : schema()) {
      e << YAML::Key << k.key << YAML::Value;
      const auto n = node(k.key);
      if (n.IsSequence()) {
        e << YAML::Flow << YAML::BeginSeq;
        for (const auto& item : n) e << item.as<std::string>();
        e << YAML::EndSeq;
      } else if (n.IsNull()) {
        e << YAML::Null;
      } else {
        e << n.as<std::string>();
      }
    }
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
  }

 private:
  YAML::Node node(const std::string& key) const {
    const auto it = values_.find(key);
    if (it != values_.end()) return it->second;
    const auto* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key: " + key);
    return YAML::Load(spec->fallback);
  }

  template <typename V>
  std::vector<V> list(const std::string& key) const {
    const auto n = node(key);
    std::vector<V> out;
    if (n.IsNull()) return out;
    for (const auto& item : n) out.push_back(item.as<V>());
    return out;
  }

  static void check_range(const KeySpec& s, double v) {
    if (!std::isfinite(v) || v < s.min || v > s.max) {
      std::ostringstream os;
      os << s.key << ": value " << v << " outside [" << s.min << ", " << s.max << "]";
      throw ConfigError(os.str());
    }
  }

  static void check_choice(const KeySpec& s, const std::string& v) {
    if (s.choices.empty()) return;
    if (std::find(s.choices.begin(), s.choices.end(), v) == s.choices.end()) {
      std::string all;
      for (const auto& c : s.choices) all += (all.empty() ? "" : ", ") + c;
      throw ConfigError(s.key + ": '" + v + "' is not one of " + all);
    }
  }

  static void check(const KeySpec& s, const YAML::Node& n) {
    const bool list_kind = s.kind == Kind::reals || s.kind == Kind::integers || s.kind == Kind::texts;
    try {
      if (list_kind) {
        if (n.IsNull()) return;
        if (!n.IsSequence()) throw ConfigError(s.key + ": expected a list");
        for (const auto& item : n) {
          if (!item.IsScalar()) throw ConfigError(s.key + ": list items must be scalars");
          if (s.kind == Kind::reals) check_range(s, item.as<double>());
          if (s.kind == Kind::integers) check_range(s, static_cast<double>(item.as<std::int64_t>()));
          if (s.kind == Kind::texts) check_choice(s, item.as<std::string>());
        }
        return;
      }
      if (!n.IsScalar()) throw ConfigError(s.key + ": expected a single value");
      switch (s.kind) {
        case Kind::text: (void)n.as<std::string>(); break;
        case Kind::choice: check_choice(s, n.as<std::string>()); break;
        case Kind::integer: check_range(s, static_cast<double>(n.as<std::int64_t>())); break;
        case Kind::real: check_range(s, n.as<double>()); break;
        case Kind::flag: (void)n.as<bool>(); break;
        default: break;
      }
    } catch (const YAML::Exception&) {
      throw ConfigError(s.key + ": cannot read value '" + YAML::Dump(n) + "'");
    }
  }

  std::map<std::string, YAML::Node> values_;
};

}  // namespace cflab::cli

#endif  // CFLAB_CLI_CONFIG_HPP

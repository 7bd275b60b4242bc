#pragma once

// Flat key=value pipeline configuration with a typed schema.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rali/error.hpp"

namespace rali {

enum class ValueType { Count, Real, Flag, Text, List };

struct ConfigKey {
  std::string name;
  ValueType type;
  std::string default_value;
  std::string help;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"train_path", ValueType::Text, "train.rqe1", "training dataset (RQE1 or .jsonl)"},
      {"test_path", ValueType::Text, "test.rqe1", "held-out dataset (RQE1 or .jsonl)"},
      {"out_dir", ValueType::Text, "rali_out", "directory for stage artifacts"},
      {"seed", ValueType::Count, "7", "base seed; stages use named substreams"},
      // synthetic corpus
      {"n", ValueType::Count, "2000", "synthetic training records"},
      {"holdout", ValueType::Count, "500", "synthetic held-out records"},
      {"dim", ValueType::Count, "64", "synthetic embedding dimension D"},
      {"noise_sigma", ValueType::Real, "0.05", "synthetic noise scale"},
      {"n_text_seeds", ValueType::Count, "4", "text embeddings per synthetic record"},
      // alignment
      {"align_lr", ValueType::Real, "1e-5", "contrastive alignment learning rate"},
      {"align_epochs", ValueType::Count, "10", "contrastive alignment epochs"},
      {"align_batch", ValueType::Count, "256", "contrastive batch size"},
      {"align_temperature", ValueType::Real, "0.07", "initial softmax temperature"},
      {"align_weight_decay", ValueType::Real, "0", "adapter weight decay"},
      // compression
      {"pca_dim", ValueType::Count, "512", "PCA target dimension M"},
      {"n_basis", ValueType::Count, "250", "number of basis vectors K"},
      {"n_buckets", ValueType::Count, "240", "number of score buckets N"},
      {"kmeans_max_iters", ValueType::Count, "300", "Lloyd iteration cap"},
      {"kmeans_tol", ValueType::Real, "1e-6", "centroid-shift stopping tolerance"},
      {"kmeans_n_init", ValueType::Count, "10", "k-means++ restarts per bucket"},
      // scoring fine-tune
      {"fit_lr", ValueType::Real, "3e-2", "scoring fine-tune learning rate"},
      {"fit_epochs", ValueType::Count, "100", "scoring fine-tune epochs"},
      {"fit_batch", ValueType::Count, "32", "scoring fine-tune batch size"},
      {"fit_targets", ValueType::List, "centroids,scores", "subset of centroids,scores,pca,scale"},
      // component switches
      {"use_alignment", ValueType::Flag, "true", "train the contrastive adapter"},
      {"use_pca", ValueType::Flag, "true", "reduce with PCA (false: raw D-dim features)"},
      {"bucketed", ValueType::Flag, "true", "bucketed k-means (false: one global k-means)"},
      {"seed_augmentation", ValueType::Flag, "true", "sample one of several text seeds per epoch"},
      {"scoring_definition", ValueType::Flag, "true", "fine-tune basis vectors and scores"},
      // evaluation
      {"logistic_plcc", ValueType::Flag, "false", "PLCC after a 4-parameter logistic remap"},
      {"sweep_m", ValueType::List, "", "PCA dimensions for the hyperparameter sweep"},
      {"sweep_kn", ValueType::List, "", "K:N pairs for the hyperparameter sweep"},
  };
  return schema;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline const ConfigKey& schema_entry(const std::string& key) {
  for (const auto& k : config_schema()) {
    if (k.name == key) return k;
  }
  throw Error(ErrorKind::Validation, "unknown config key '" + key + "'");
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end || v.empty()) {
    throw Error(ErrorKind::Validation, "config key '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw Error(ErrorKind::Validation, "config key '" + key + "' expects a finite number, got '" + v + "'");
  }
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(ErrorKind::Validation, "config key '" + key + "' expects true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace detail

class PipelineConfig {
 public:
  PipelineConfig() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  /// Sets a key after checking it against the schema.
  void set(const std::string& key, const std::string& raw) {
    const auto& entry = detail::schema_entry(key);
    const std::string value = detail::trim(raw);
    switch (entry.type) {
      case ValueType::Count: detail::parse_count(key, value); break;
      case ValueType::Real: detail::parse_real(key, value); break;
      case ValueType::Flag: detail::parse_flag(key, value); break;
      case ValueType::Text: break;
      case ValueType::List: break;
    }
    values_[key] = value;
  }

  /// "key=value" override.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::Validation, "override '" + assignment + "' is not key=value");
    set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
  }

  /// Lines of key=value; '#' starts a comment.
  void load_text(std::istream& in, const std::string& origin = "config") {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      try {
        apply_override(line);
      } catch (const Error& e) {
        throw Error(ErrorKind::Validation, origin + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }

  void load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::Io, "cannot open config " + path.string());
    load_text(in, path.string());
  }

  std::uint64_t count(const std::string& key) const { return detail::parse_count(key, raw(key, ValueType::Count)); }
  double real(const std::string& key) const { return detail::parse_real(key, raw(key, ValueType::Real)); }
  bool flag(const std::string& key) const { return detail::parse_flag(key, raw(key, ValueType::Flag)); }
  std::string text(const std::string& key) const { return raw(key, ValueType::Text); }
  std::vector<std::string> list(const std::string& key) const { return detail::split_list(raw(key, ValueType::List)); }

  /// Canonical "key=value\n" text in sorted key order; the config hash input.
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

 private:
  const std::string& raw(const std::string& key, ValueType type) const {
    if (detail::schema_entry(key).type != type) throw Error(ErrorKind::Param, "config key '" + key + "' read with the wrong type");
    return values_.at(key);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace rali

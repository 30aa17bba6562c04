#pragma once

#include <cstdlib>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "lowbit/data.hpp"
#include "lowbit/models.hpp"
#include "lowbit/train.hpp"

namespace lowbit {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DatasetSpec {
  enum class Type { Cifar10, Synthetic };
  Type type = Type::Synthetic;
  std::string dir;         // cifar10 batch-file directory
  int64_t subset = 0;      // keep first n training records (0 = all)
  int64_t n_per_class = 10;
  int64_t test_per_class = 10;
  int classes = 10;
};

/// One experiment: model, quantization, optimizer, data, seeding, outputs.
/// Every field has a materialized default so the resolved echo alone can
/// reproduce the run.
struct RunConfig {
  ModelKind kind = ModelKind::FCNN1;
  int n_values = kFullPrecision;  // 0 = "full"
  float beta = 1.4f;
  MeanMode mean_mode = MeanMode::Abs;
  int conv_filter_size = 3;
  float lr = 0.0f;  // 0 = model-family default (0.001 FC/conv, 0.01 transformer)
  float momentum = 0.92f;
  int64_t batch_size = 256;
  int64_t epochs = 1;
  bool augment = false;
  AugmentConfig aug;
  DatasetSpec dataset;
  uint64_t seed = 0;
  std::string output_dir = "run";
  bool log_timing = true;  // false writes 0.000 in the epoch_time_s column

  ModelConfig model_config() const {
    return ModelConfig{kind, n_values, beta, mean_mode, conv_filter_size, seed};
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.lr = lr;
    t.momentum = momentum;
    t.batch_size = batch_size;
    t.epochs = epochs;
    t.augment = augment;
    t.aug = aug;
    t.seed = seed;
    return t;
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j,
                                const std::set<std::string>& known,
                                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

inline float default_lr(ModelKind k) {
  return (k == ModelKind::VIT1 || k == ModelKind::VIT2) ? 0.01f : 0.001f;
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using nlohmann::json;
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::reject_unknown_keys(
      j,
      {"model", "n_values", "beta", "mean_mode", "conv_filter_size", "lr",
       "momentum", "batch_size", "epochs", "augment", "augmentation", "dataset",
       "seed", "output_dir", "log_timing"},
      "run config");
  RunConfig c;
  try {
    if (!j.contains("model")) throw ConfigError("config: 'model' is required");
    c.kind = kind_from_name(j.at("model").get<std::string>());
    if (j.contains("n_values")) {
      const auto& nv = j.at("n_values");
      if (nv.is_string()) {
        if (nv.get<std::string>() != "full")
          throw ConfigError("config: n_values must be an integer >= 2 or \"full\"");
        c.n_values = kFullPrecision;
      } else {
        c.n_values = nv.get<int>();
        if (c.n_values < 2)
          throw ConfigError("config: n_values must be an integer >= 2 or \"full\"");
        if (c.n_values > 256)
          throw ConfigError("config: n_values above 256 cannot be packed");
      }
    }
    if (j.contains("beta")) {
      c.beta = j.at("beta").get<float>();
      if (c.beta <= 0.0f) throw ConfigError("config: beta must be > 0");
    }
    if (j.contains("mean_mode")) {
      const std::string m = j.at("mean_mode").get<std::string>();
      if (m == "abs")
        c.mean_mode = MeanMode::Abs;
      else if (m == "signed")
        c.mean_mode = MeanMode::Signed;
      else
        throw ConfigError("config: mean_mode must be \"abs\" or \"signed\"");
    }
    if (j.contains("conv_filter_size")) {
      c.conv_filter_size = j.at("conv_filter_size").get<int>();
      if (c.conv_filter_size != 3 && c.conv_filter_size != 5)
        throw ConfigError("config: conv_filter_size must be 3 or 5");
    }
    if (j.contains("lr")) {
      c.lr = j.at("lr").get<float>();
      if (c.lr <= 0.0f) throw ConfigError("config: lr must be > 0");
    }
    if (j.contains("momentum")) {
      c.momentum = j.at("momentum").get<float>();
      if (c.momentum < 0.0f || c.momentum >= 1.0f)
        throw ConfigError("config: momentum must be in [0, 1)");
    }
    if (j.contains("batch_size")) {
      c.batch_size = j.at("batch_size").get<int64_t>();
      if (c.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    }
    if (j.contains("epochs")) {
      c.epochs = j.at("epochs").get<int64_t>();
      if (c.epochs < 0) throw ConfigError("config: epochs must be >= 0");
    }
    if (j.contains("augment")) c.augment = j.at("augment").get<bool>();
    if (j.contains("augmentation")) {
      const auto& a = j.at("augmentation");
      detail::reject_unknown_keys(
          a, {"h_shift_frac", "v_shift_frac", "zoom_frac", "hflip", "rot_deg"},
          "augmentation");
      if (a.contains("h_shift_frac")) c.aug.h_shift_frac = a.at("h_shift_frac").get<float>();
      if (a.contains("v_shift_frac")) c.aug.v_shift_frac = a.at("v_shift_frac").get<float>();
      if (a.contains("zoom_frac")) c.aug.zoom_frac = a.at("zoom_frac").get<float>();
      if (a.contains("hflip")) c.aug.hflip = a.at("hflip").get<bool>();
      if (a.contains("rot_deg")) c.aug.rot_deg = a.at("rot_deg").get<float>();
      if (c.aug.h_shift_frac < 0 || c.aug.v_shift_frac < 0 || c.aug.zoom_frac < 0 ||
          c.aug.rot_deg < 0)
        throw ConfigError("config: augmentation magnitudes must be >= 0");
      if (c.aug.zoom_frac >= 1.0f)
        throw ConfigError("config: zoom_frac must be < 1");
    }
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::reject_unknown_keys(
          d, {"type", "dir", "subset", "n_per_class", "test_per_class", "classes"},
          "dataset");
      const std::string type = d.contains("type")
                                   ? d.at("type").get<std::string>()
                                   : "synthetic";
      if (type == "cifar10") {
        c.dataset.type = DatasetSpec::Type::Cifar10;
        if (d.contains("dir")) c.dataset.dir = d.at("dir").get<std::string>();
        if (d.contains("subset")) {
          c.dataset.subset = d.at("subset").get<int64_t>();
          if (c.dataset.subset < 0)
            throw ConfigError("config: dataset.subset must be >= 0");
        }
      } else if (type == "synthetic") {
        c.dataset.type = DatasetSpec::Type::Synthetic;
        if (d.contains("n_per_class")) {
          c.dataset.n_per_class = d.at("n_per_class").get<int64_t>();
          if (c.dataset.n_per_class < 1)
            throw ConfigError("config: dataset.n_per_class must be >= 1");
        }
        if (d.contains("test_per_class")) {
          c.dataset.test_per_class = d.at("test_per_class").get<int64_t>();
          if (c.dataset.test_per_class < 1)
            throw ConfigError("config: dataset.test_per_class must be >= 1");
        }
        if (d.contains("classes")) {
          c.dataset.classes = d.at("classes").get<int>();
          if (c.dataset.classes < 2 || c.dataset.classes > 10)
            throw ConfigError("config: dataset.classes must be in [2, 10]");
        }
      } else {
        throw ConfigError("config: dataset.type must be \"cifar10\" or \"synthetic\"");
      }
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("log_timing")) c.log_timing = j.at("log_timing").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.lr == 0.0f) c.lr = detail::default_lr(c.kind);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("config: cannot read " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON in ") + path + ": " + e.what());
  }
  return parse_run_config(j);
}

/// Fully materialized echo of a run configuration.
inline nlohmann::json resolved_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = kind_name(c.kind);
  if (c.n_values == kFullPrecision)
    j["n_values"] = "full";
  else
    j["n_values"] = c.n_values;
  j["beta"] = c.beta;
  j["mean_mode"] = c.mean_mode == MeanMode::Abs ? "abs" : "signed";
  j["conv_filter_size"] = c.conv_filter_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["augment"] = c.augment;
  j["augmentation"] = {{"h_shift_frac", c.aug.h_shift_frac},
                       {"v_shift_frac", c.aug.v_shift_frac},
                       {"zoom_frac", c.aug.zoom_frac},
                       {"hflip", c.aug.hflip},
                       {"rot_deg", c.aug.rot_deg}};
  if (c.dataset.type == DatasetSpec::Type::Cifar10) {
    j["dataset"] = {{"type", "cifar10"}, {"dir", c.dataset.dir},
                    {"subset", c.dataset.subset}};
  } else {
    j["dataset"] = {{"type", "synthetic"},
                    {"n_per_class", c.dataset.n_per_class},
                    {"test_per_class", c.dataset.test_per_class},
                    {"classes", c.dataset.classes}};
  }
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["log_timing"] = c.log_timing;
  return j;
}

/// Resolves the dataset spec to (train, test), honoring the
/// LOWBIT_DATA_DIR fallback for cifar10 runs with no directory.
inline std::pair<Dataset, Dataset> load_datasets(const DatasetSpec& spec,
                                                 uint64_t seed) {
  if (spec.type == DatasetSpec::Type::Cifar10) {
    std::string dir = spec.dir;
    if (dir.empty()) {
      if (const char* env = std::getenv("LOWBIT_DATA_DIR")) dir = env;
      if (dir.empty())
        throw ConfigError(
            "config: dataset.dir is empty and LOWBIT_DATA_DIR is not set");
    }
    auto [train, test] = load_cifar10(dir);
    if (spec.subset > 0) train = dataset_prefix(train, spec.subset);
    return {std::move(train), std::move(test)};
  }
  Dataset train = make_synthetic(spec.n_per_class, spec.classes, seed, "train");
  Dataset test = make_synthetic(spec.test_per_class, spec.classes, seed, "test");
  return {std::move(train), std::move(test)};
}

}  // namespace lowbit

// lowbit command-line runner: train / eval / pack / inspect over JSON run
// configs. Exit codes: 0 success, 2 configuration error, 3 training aborted
// on a non-finite loss, 4 model-container format error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lowbit/lowbit.hpp"

namespace fs = std::filesystem;
using namespace lowbit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNanAbort = 3;
constexpr int kExitFormat = 4;

struct CommonArgs {
  std::string config_path;
  std::string data_dir;
  std::string out_dir;
  int64_t seed = -1;
  bool has_seed = false;
};

RunConfig resolve_config(const CommonArgs& args) {
  RunConfig cfg = load_run_config(args.config_path);
  if (!args.data_dir.empty()) cfg.dataset.dir = args.data_dir;
  if (!args.out_dir.empty()) cfg.output_dir = args.out_dir;
  if (args.has_seed) cfg.seed = static_cast<uint64_t>(args.seed);
  return cfg;
}

void write_resolved(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream f(dir / "config.resolved.json", std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + (dir / "config.resolved.json").string());
  f << resolved_json(cfg).dump(2) << "\n";
}

int cmd_train(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);
  write_resolved(cfg, out_dir);

  auto [train_set, val_set] = load_datasets(cfg.dataset, cfg.seed);
  std::unique_ptr<Model> model = build_model(cfg.model_config());
  TrainConfig tc = cfg.train_config();
  tc.validate();

  SgdMomentum opt;
  std::vector<MetricsRow> rows;
  int exit_code = kExitOk;
  try {
    for (int64_t epoch = 1; epoch <= tc.epochs; ++epoch) {
      MetricsRow row = train_epoch(*model, train_set, val_set, tc, opt, epoch);
      if (!cfg.log_timing) row.epoch_time_s = 0.0;
      rows.push_back(row);
      std::fprintf(stderr,
                   "epoch %lld/%lld  train_loss=%.4f train_acc=%.4f "
                   "val_loss=%.4f val_acc=%.4f (%.2fs)\n",
                   static_cast<long long>(epoch),
                   static_cast<long long>(tc.epochs), row.train_loss,
                   row.train_acc, row.val_loss, row.val_acc, row.epoch_time_s);
    }
  } catch (const NanAbortError& e) {
    std::cerr << "error: " << e.what() << "\n";
    exit_code = kExitNanAbort;
  }
  write_metrics_csv((out_dir / "metrics.csv").string(), rows);
  if (exit_code == kExitOk) save_model(*model, (out_dir / "model.lbq").string());
  return exit_code;
}

int cmd_pack(const CommonArgs& args) {
  RunConfig cfg = resolve_config(args);
  const fs::path out_dir(cfg.output_dir);
  fs::create_directories(out_dir);
  write_resolved(cfg, out_dir);
  std::unique_ptr<Model> model = build_model(cfg.model_config());
  const std::string path = (out_dir / "model.lbq").string();
  save_model(*model, path);
  std::cout << "wrote " << path << " (" << fs::file_size(path) << " bytes)\n";
  return kExitOk;
}

int cmd_eval(const std::string& model_path, const CommonArgs& args) {
  std::unique_ptr<Model> model = load_model(model_path);
  Dataset test;
  if (!args.config_path.empty()) {
    RunConfig cfg = resolve_config(args);
    auto [train_set, test_set] = load_datasets(cfg.dataset, cfg.seed);
    test = std::move(test_set);
  } else if (!args.data_dir.empty()) {
    auto [train_set, test_set] = load_cifar10(args.data_dir);
    test = std::move(test_set);
  } else {
    throw ConfigError("eval: pass --config or --data to pick a dataset");
  }
  auto [loss, acc] = evaluate(*model, test);
  std::printf("loss=%.6f accuracy=%.6f\n", loss, acc);
  return kExitOk;
}

int cmd_inspect(const std::string& model_path) {
  LbqFile file = read_lbq(model_path);
  std::printf("model: %s\n", kind_name(file.kind));
  if (file.n_values == kFullPrecision) {
    std::printf("n_values: full (32-bit weights)\n");
  } else {
    std::printf("n_values: %d\n", file.n_values);
    std::printf("bits_per_weight: %.2f\n",
                std::log2(static_cast<double>(file.n_values)));
  }
  std::printf("layers: %zu\n\n", file.records.size());
  std::printf("%-18s %-22s %12s %8s %12s %7s\n", "name", "shape", "weights",
              "bias", "payload_B", "packed");
  int64_t total_params = 0, quantized_weights = 0, packed_bytes = 0;
  for (const LbqRecord& r : file.records) {
    const int64_t count = shape_numel(r.dims);
    const int64_t bias_n = r.has_bias ? static_cast<int64_t>(r.bias.size()) : 0;
    const bool packed = file.n_values != kFullPrecision &&
                        static_cast<int64_t>(r.payload.size()) != count * 4;
    total_params += count + bias_n;
    if (packed) {
      quantized_weights += count;
      packed_bytes += static_cast<int64_t>(r.payload.size());
    }
    std::printf("%-18s %-22s %12lld %8lld %12zu %7s\n", r.name.c_str(),
                shape_str(r.dims).c_str(), static_cast<long long>(count),
                static_cast<long long>(bias_n), r.payload.size(),
                packed ? "yes" : "no");
  }
  std::printf("\ntotal parameters: %lld\n", static_cast<long long>(total_params));
  if (file.n_values != kFullPrecision) {
    std::printf("quantized weights: %lld\n",
                static_cast<long long>(quantized_weights));
    std::printf("packed weight bytes: %lld (32-bit equivalent: %lld)\n",
                static_cast<long long>(packed_bytes),
                static_cast<long long>(quantized_weights * 4));
    std::printf("memory reduction (weights, vs 32-bit): %dx\n",
                memory_reduction(file.n_values));
  } else {
    std::printf("memory reduction (weights, vs 32-bit): 1x\n");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lowbit: train and package image classifiers with 1-4 bit weights"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string model_path;

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* opt = sub->add_option("--config", args.config_path, "run config (JSON)");
    if (config_required) opt->required();
    sub->add_option("--data", args.data_dir, "dataset directory override");
    sub->add_option("--out", args.out_dir, "output directory override");
    sub->add_option("--seed", args.seed, "seed override")
        ->each([&](const std::string&) { args.has_seed = true; });
  };

  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  add_common(train, true);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a packed model");
  eval->add_option("model", model_path, "model.lbq file")->required();
  add_common(eval, false);
  CLI::App* pack = app.add_subcommand("pack", "build a model and write its container");
  add_common(pack, true);
  CLI::App* inspect = app.add_subcommand("inspect", "describe a packed model");
  inspect->add_option("model", model_path, "model.lbq file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(args);
    if (eval->parsed()) return cmd_eval(model_path, args);
    if (pack->parsed()) return cmd_pack(args);
    if (inspect->parsed()) return cmd_inspect(model_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NanAbortError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNanAbort;
  } catch (const PackError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFormat;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}

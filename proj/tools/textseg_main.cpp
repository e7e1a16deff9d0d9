// textseg: text-guided volumetric segmentation workbench.
//
// Subcommands: gen-data, train, eval, ablate, gradcheck, defaults.
// Exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error,
// 4 numeric error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "textseg/config.hpp"
#include "textseg/dataset.hpp"
#include "textseg/gradcheck_suite.hpp"
#include "textseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace textseg;

namespace {

RunConfig build_config(const std::string& config_file,
                       const std::vector<std::string>& sets) {
  RunConfig cfg = RunConfig::defaults();
  if (!config_file.empty()) cfg.load_file(config_file);
  for (const auto& s : sets) cfg.set_assignment(s);
  return cfg;
}

std::string derived_out_dir(const RunConfig& cfg, const std::string& command,
                            const std::string& tag) {
  std::string dir = cfg.get_string("out.dir");
  if (!dir.empty()) return dir;
  std::string name = command;
  if (!tag.empty()) name += "-" + tag;
  name += "-s" + std::to_string(cfg.get_int("train.seed"));
  return (fs::path(cfg.get_string("out.root")) / name).string();
}

void echo_config(const RunConfig& cfg) {
  std::cout << "resolved config:\n" << cfg.echo();
}

int cmd_gen_data(const RunConfig& cfg) {
  echo_config(cfg);
  SynthConfig s = synth_config_from(cfg);
  const std::string dir = cfg.get_string("data.dir");
  DatasetManifest m = generate_synthetic(s, dir);
  std::size_t train = 0, val = 0, test = 0;
  for (const auto& c : m.cases) {
    train += c.split == "train";
    val += c.split == "val";
    test += c.split == "test";
  }
  std::cout << "dataset written to " << dir << " (" << m.cases.size()
            << " cases: " << train << " train / " << val << " val / " << test
            << " test)\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  echo_config(cfg);
  const std::string data_dir = cfg.get_string("data.dir");
  const auto tmpl = template_variant_from(cfg.get_string("text.template"));
  PreparedDataset ds =
      prepare_dataset(data_dir, cfg.get_size("data.size"), tmpl);
  const std::string run_dir =
      derived_out_dir(cfg, "train", cfg.get_string("fusion.variant"));
  TrainResult tr = run_training(cfg, ds, run_dir);
  std::cout << "run dir: " << tr.run_dir << "\n"
            << "best val dice: " << tr.best_val_dice << " (epoch "
            << tr.best_epoch << ")\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint_dir,
             const std::vector<std::string>& sets) {
  // The run directory's config is the source of truth for rebuilding the
  // model; command-line overrides apply on top (eval.split, data.dir).
  const std::string cfg_path =
      (fs::path(checkpoint_dir) / "config.txt").string();
  if (!fs::exists(cfg_path) ||
      !fs::exists(fs::path(checkpoint_dir) / "checkpoint.bin")) {
    throw IoError("checkpoint not found in: " + checkpoint_dir);
  }
  RunConfig cfg = RunConfig::defaults();
  cfg.load_file(cfg_path);
  for (const auto& s : sets) cfg.set_assignment(s);
  echo_config(cfg);

  const std::string split = cfg.get_string("eval.split");
  const auto tmpl = template_variant_from(cfg.get_string("text.template"));
  Vocabulary vocab =
      Vocabulary::load((fs::path(checkpoint_dir) / "vocab.txt").string());
  PreparedDataset ds = prepare_dataset(cfg.get_string("data.dir"),
                                       cfg.get_size("data.size"), tmpl,
                                       &vocab);
  MetricsReport rep = evaluate_run(cfg, checkpoint_dir, ds, split);
  const std::string out_dir =
      (fs::path(checkpoint_dir) / ("eval-" + split)).string();
  write_metrics_outputs(rep, out_dir);
  std::cout << "evaluated " << rep.cases.size() << " " << split
            << " cases; reports in " << out_dir << "\n"
            << metrics_summary_table(rep);
  return 0;
}

int cmd_ablate(const RunConfig& cfg, const std::string& axis) {
  echo_config(cfg);
  const std::string data_dir = cfg.get_string("data.dir");
  const std::string out_root = derived_out_dir(cfg, "ablate", axis);
  auto rows = run_ablation(cfg, data_dir, axis, out_root);
  const std::string table = ablation_table(rows);
  std::error_code ec;
  fs::create_directories(out_root, ec);
  iodetail::write_file((fs::path(out_root) / "table.txt").string(),
                       table.data(), table.size());
  std::cout << table << "table written to " << out_root << "/table.txt\n";
  return 0;
}

int cmd_gradcheck() {
  auto report = run_gradcheck_suite(true);
  print_gradcheck_report(report, stdout);
  return report.all_pass ? 0 : 1;
}

int cmd_defaults() {
  for (const auto& k : RunConfig::schema()) {
    std::printf("%-28s %-14s %s\n", k.key,
                *k.def ? k.def : "(empty)", k.doc);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-guided volumetric segmentation workbench"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> sets;
  std::string checkpoint_dir;
  std::string axis = "fusion";

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key = value config file");
    sub->add_option("--set", sets, "override: key=value (repeatable)");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  CLI::App* train = app.add_subcommand("train", "train one configuration");
  add_common(train);
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "evaluate a trained checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint_dir,
                       "run directory with checkpoint.bin (defaults to "
                       "eval.checkpoint)");
  CLI::App* ablate =
      app.add_subcommand("ablate", "train and compare one ablation axis");
  add_common(ablate);
  ablate->add_option("--axis", axis, "fusion | template");
  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference gradient suite");
  app.add_subcommand("defaults", "list config keys, defaults and docs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(build_config(config_file, sets));
    if (train->parsed()) return cmd_train(build_config(config_file, sets));
    if (eval_cmd->parsed()) {
      if (checkpoint_dir.empty()) {
        RunConfig cfg = build_config(config_file, sets);
        checkpoint_dir = cfg.get_string("eval.checkpoint");
        if (checkpoint_dir.empty()) {
          throw ConfigError("eval needs --checkpoint or eval.checkpoint");
        }
      }
      return cmd_eval(checkpoint_dir, sets);
    }
    if (ablate->parsed())
      return cmd_ablate(build_config(config_file, sets), axis);
    if (gradcheck->parsed()) return cmd_gradcheck();
    return cmd_defaults();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "report parse error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

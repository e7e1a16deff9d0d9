#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "textseg/checkpoint.hpp"
#include "textseg/config.hpp"
#include "textseg/dataset.hpp"
#include "textseg/metrics.hpp"
#include "textseg/optim.hpp"
#include "textseg/segnet.hpp"
#include "textseg/tensor.hpp"
#include "textseg/text.hpp"

#include <json.hpp>

namespace textseg {

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

inline SynthConfig synth_config_from(const RunConfig& cfg) {
  SynthConfig s;
  s.cases = cfg.get_size("data.cases");
  s.size = cfg.get_size("data.size");
  s.lesion_min = static_cast<int>(cfg.get_int("data.lesion_min"));
  s.lesion_max = static_cast<int>(cfg.get_int("data.lesion_max"));
  s.radius_min = cfg.get_double("data.radius_min");
  s.radius_max = cfg.get_double("data.radius_max");
  s.noise = cfg.get_double("data.noise");
  s.attenuation = cfg.get_double("data.attenuation");
  s.decoys = static_cast<int>(cfg.get_int("data.decoys"));
  s.seed = static_cast<std::uint64_t>(cfg.get_int("data.seed"));
  s.split_ratios = {cfg.get_double("data.ratio_train"),
                    cfg.get_double("data.ratio_val"),
                    cfg.get_double("data.ratio_test")};
  s.validate();
  return s;
}

inline SegModelConfig model_config_from(const RunConfig& cfg) {
  SegModelConfig m;
  m.input_size = cfg.get_size("data.size");
  m.depth = cfg.get_size("model.depth");
  m.embed_dim = cfg.get_size("model.embed_dim");
  m.channels = cfg.get_size_list("model.channels");
  m.validate();
  return m;
}

inline TextEncoderConfig text_config_from(const RunConfig& cfg,
                                          std::size_t vocab_size) {
  TextEncoderConfig t;
  t.vocab_size = vocab_size;
  t.embed_dim = cfg.get_size("model.text_embed_dim");
  t.hidden_dim = cfg.get_size("model.text_hidden_dim");
  t.out_dim = cfg.get_size("model.embed_dim");
  t.frozen_embedding = cfg.get_bool("model.frozen_text_embedding");
  return t;
}

// ---------------------------------------------------------------------------
// In-memory dataset with per-variant tokenization
// ---------------------------------------------------------------------------

struct PreparedCase {
  VolumeSample sample;
  TokenSequence tokens;
};

struct PreparedDataset {
  std::vector<PreparedCase> train, val, test;
  Vocabulary vocab;
  std::size_t size = 0;

  const std::vector<PreparedCase>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split: " + name);
  }
};

// Renders the stored report through the requested template variant.
inline std::string variant_text(const std::string& report,
                                TemplateVariant tmpl) {
  return render_template(parse_report(report), tmpl);
}

// Loads every case of the manifest, renders reports through the template
// variant, builds the vocabulary from the train split only (or reuses the
// given one, e.g. the vocabulary saved with a checkpoint), and tokenizes.
inline PreparedDataset prepare_dataset(const std::string& data_dir,
                                       std::size_t target_size,
                                       TemplateVariant tmpl,
                                       const Vocabulary* vocab = nullptr) {
  namespace fs = std::filesystem;
  const std::string manifest_path =
      (fs::path(data_dir) / "manifest.json").string();
  DatasetManifest manifest = DatasetManifest::load(manifest_path);

  PreparedDataset ds;
  ds.size = target_size;
  std::vector<std::string> train_texts;
  std::vector<std::pair<VolumeSample, std::string>> loaded;
  loaded.reserve(manifest.cases.size());
  for (const auto& mc : manifest.cases) {
    VolumeSample s = load_case(data_dir, mc, target_size);
    std::string text = variant_text(s.report, tmpl);
    if (!vocab && mc.split == "train") train_texts.push_back(text);
    loaded.emplace_back(std::move(s), std::move(text));
  }
  ds.vocab = vocab ? *vocab : Vocabulary::build(train_texts);
  for (std::size_t i = 0; i < manifest.cases.size(); ++i) {
    PreparedCase pc{std::move(loaded[i].first),
                    tokenize(loaded[i].second, ds.vocab)};
    const std::string& split = manifest.cases[i].split;
    if (split == "train") ds.train.push_back(std::move(pc));
    else if (split == "val") ds.val.push_back(std::move(pc));
    else if (split == "test") ds.test.push_back(std::move(pc));
    else throw IoError("case " + manifest.cases[i].id + " has no split");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

struct Batch {
  Tensor images;   // [B, 4, S, S, S]
  Tensor targets;  // [B, 3, S, S, S]
  std::vector<TokenSequence> tokens;
};

inline Batch make_batch(const std::vector<PreparedCase>& cases,
                        const std::vector<std::size_t>& ids) {
  if (ids.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t S = cases[ids[0]].sample.size;
  const std::size_t S3 = S * S * S;
  Batch b;
  b.images = Tensor::zeros({ids.size(), kNumModalities, S, S, S});
  b.targets = Tensor::zeros({ids.size(), kNumRegions, S, S, S});
  auto& iv = b.images.mutable_values();
  auto& tv = b.targets.mutable_values();
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& pc = cases[ids[k]];
    for (std::size_t i = 0; i < kNumModalities * S3; ++i)
      iv[k * kNumModalities * S3 + i] = static_cast<double>(pc.sample.image[i]);
    for (std::size_t r = 0; r < kNumRegions; ++r)
      for (std::size_t i = 0; i < S3; ++i)
        tv[(k * kNumRegions + r) * S3 + i] =
            pc.sample.regions[r][i] ? 1.0 : 0.0;
    b.tokens.push_back(pc.tokens);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One optimizer step on one batch; returns the loss value. Aborts with
// NumericError diagnostics when the loss goes non-finite.
inline double train_step(SegModel& model, AdamW& opt, const Batch& batch,
                         double lr) {
  double loss_value = 0.0;
  {
    Tape tape;
    Tensor loss = soft_dice_loss(forward(model, batch.images, batch.tokens),
                                 batch.targets);
    loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw NumericError("train_step: non-finite loss at optimizer step " +
                         std::to_string(opt.step_count() + 1));
    }
    tape.backward(loss);
  }
  opt.step(lr);
  opt.zero_grad();
  return loss_value;
}

// Mean over cases of the region-averaged Dice at threshold 0.5 (logit > 0).
inline double mean_dice_at_threshold(const SegModel& model,
                                     const std::vector<PreparedCase>& cases) {
  if (cases.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Batch b = make_batch(cases, {i});
    Tensor logits = forward(model, b.images, b.tokens);
    const std::size_t S = cases[i].sample.size;
    const std::size_t S3 = S * S * S;
    double case_acc = 0.0;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
      BinaryMask pred{{S, S, S}, std::vector<std::uint8_t>(S3)};
      BinaryMask gt{{S, S, S}, std::vector<std::uint8_t>(S3)};
      for (std::size_t v = 0; v < S3; ++v) {
        pred.v[v] = logits.values()[r * S3 + v] > 0.0 ? 1 : 0;
        gt.v[v] = cases[i].sample.regions[r][v];
      }
      case_acc += dice(pred, gt) / static_cast<double>(kNumRegions);
    }
    acc += case_acc;
  }
  return acc / static_cast<double>(cases.size());
}

struct TrainResult {
  double best_val_dice = 0.0;
  std::size_t best_epoch = 0;
  double final_loss = 0.0;
  std::string run_dir;
};

// Full training run: warm-up schedule, per-step JSONL log, best-validation
// checkpointing. Everything written under run_dir; deterministic for a
// fixed config.
inline TrainResult run_training(const RunConfig& cfg,
                                const PreparedDataset& ds,
                                const std::string& run_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory: " + run_dir);

  const FusionMode mode = fusion_mode_from(cfg.get_string("fusion.variant"));
  const std::uint64_t seed =
      static_cast<std::uint64_t>(cfg.get_int("train.seed"));
  const std::size_t epochs = cfg.get_size("train.epochs");
  const std::size_t batch_size = std::max<std::size_t>(
      1, cfg.get_size("train.batch"));
  const double base_lr = cfg.get_double("train.lr");
  const double warmup_frac = cfg.get_double("train.warmup_frac");
  const std::size_t val_every =
      std::max<std::size_t>(1, cfg.get_size("train.val_every"));

  if (ds.train.empty()) throw ContractError("run_training: empty train split");

  SegModelConfig mcfg = model_config_from(cfg);
  TextEncoderConfig tcfg = text_config_from(cfg, ds.vocab.size());
  Rng init_rng(seed);
  SegModel model = SegModel::init(mcfg, tcfg, mode, init_rng);

  AdamWConfig ocfg;
  ocfg.weight_decay = cfg.get_double("train.weight_decay");
  AdamW opt(model.named_params(), ocfg);

  const std::size_t steps_per_epoch =
      (ds.train.size() + batch_size - 1) / batch_size;
  const std::size_t total_steps = epochs * steps_per_epoch;

  std::ofstream log((fs::path(run_dir) / "train_log.jsonl").string(),
                    std::ios::trunc);
  if (!log) throw IoError("cannot write train log in " + run_dir);
  {
    std::ofstream cf((fs::path(run_dir) / "config.txt").string(),
                     std::ios::trunc);
    cf << cfg.echo();
  }
  ds.vocab.save((fs::path(run_dir) / "vocab.txt").string());

  TrainResult result;
  result.run_dir = run_dir;
  const std::string ckpt_base = (fs::path(run_dir) / "checkpoint").string();

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(Rng::mix(seed, epoch + 1));
    shuffle_rng.shuffle(order);

    for (std::size_t pos = 0; pos < order.size(); pos += batch_size) {
      std::vector<std::size_t> ids(
          order.begin() + static_cast<std::ptrdiff_t>(pos),
          order.begin() + static_cast<std::ptrdiff_t>(
                              std::min(pos + batch_size, order.size())));
      Batch batch = make_batch(ds.train, ids);
      const double lr = warmup_lr(base_lr, step, total_steps, warmup_frac);
      const double loss = train_step(model, opt, batch, lr);
      result.final_loss = loss;
      nlohmann::ordered_json rec;
      rec["step"] = step;
      rec["epoch"] = epoch;
      rec["loss"] = loss;
      rec["lr"] = lr;
      rec["seed"] = seed;
      log << rec.dump() << "\n";
      ++step;
    }

    if ((epoch + 1) % val_every == 0 || epoch + 1 == epochs) {
      const double val_dice = mean_dice_at_threshold(model, ds.val);
      const bool best = val_dice > result.best_val_dice || epoch == 0;
      if (best) {
        result.best_val_dice = val_dice;
        result.best_epoch = epoch;
        save_checkpoint(ckpt_base, model.named_params());
      }
      nlohmann::ordered_json rec;
      rec["epoch"] = epoch;
      rec["val_dice"] = val_dice;
      rec["best"] = best;
      log << rec.dump() << "\n";
    }
  }

  nlohmann::ordered_json meta;
  meta["fusion"] = fusion_mode_name(mode);
  meta["template"] = cfg.get_string("text.template");
  meta["seed"] = seed;
  meta["best_val_dice"] = result.best_val_dice;
  meta["best_epoch"] = result.best_epoch;
  meta["epochs"] = epochs;
  meta["vocab_size"] = ds.vocab.size();
  const std::string meta_text = meta.dump(2) + "\n";
  iodetail::write_file((fs::path(run_dir) / "meta.json").string(),
                       meta_text.data(), meta_text.size());
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

// Rebuilds the model from a run directory (vocab + checkpoint) and scores a
// split with the full metric set.
inline MetricsReport evaluate_run(const RunConfig& cfg,
                                  const std::string& run_dir,
                                  const PreparedDataset& ds,
                                  const std::string& split_name) {
  namespace fs = std::filesystem;
  const FusionMode mode = fusion_mode_from(cfg.get_string("fusion.variant"));
  SegModelConfig mcfg = model_config_from(cfg);
  TextEncoderConfig tcfg = text_config_from(cfg, ds.vocab.size());
  Rng rng(0);
  SegModel model = SegModel::init(mcfg, tcfg, mode, rng);
  load_checkpoint((fs::path(run_dir) / "checkpoint").string(),
                  model.named_params());

  const auto& cases = ds.split(split_name);
  std::vector<CaseMetrics> rows;
  rows.reserve(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    Batch b = make_batch(cases, {i});
    Tensor logits = forward(model, b.images, b.tokens);
    const std::size_t S = cases[i].sample.size;
    const std::size_t S3 = S * S * S;
    std::array<BinaryMask, 3> pred, gt;
    for (std::size_t r = 0; r < kNumRegions; ++r) {
      pred[r] = BinaryMask{{S, S, S}, std::vector<std::uint8_t>(S3)};
      gt[r] = BinaryMask{{S, S, S}, std::vector<std::uint8_t>(S3)};
      for (std::size_t v = 0; v < S3; ++v) {
        pred[r].v[v] = logits.values()[r * S3 + v] > 0.0 ? 1 : 0;
        gt[r].v[v] = cases[i].sample.regions[r][v];
      }
    }
    rows.push_back(
        evaluate_case(pred, gt, {1.0, 1.0, 1.0}, cases[i].sample.id));
  }
  return MetricsReport::aggregate(std::move(rows));
}

inline void write_metrics_outputs(const MetricsReport& rep,
                                  const std::string& out_dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  const std::string jsonl = metrics_jsonl(rep);
  iodetail::write_file((fs::path(out_dir) / "per_case.jsonl").string(),
                       jsonl.data(), jsonl.size());
  const std::string table = metrics_summary_table(rep);
  iodetail::write_file((fs::path(out_dir) / "summary.txt").string(),
                       table.data(), table.size());
}

// ---------------------------------------------------------------------------
// Ablation driver
// ---------------------------------------------------------------------------

struct AblationRow {
  std::string variant;
  MetricsReport report;
  double best_val_dice = 0.0;
};

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out =
      "variant          dice_ET  dice_WT  dice_TC  dice_avg  hd95_ET  "
      "hd95_WT  hd95_TC  hd95_avg\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf),
                  "%-15s %8.4f %8.4f %8.4f %9.4f %8.3f %8.3f %8.3f %9.3f\n",
                  r.variant.c_str(), r.report.mean_regions[0].dice,
                  r.report.mean_regions[1].dice, r.report.mean_regions[2].dice,
                  r.report.mean_avg.dice, r.report.mean_regions[0].hd95,
                  r.report.mean_regions[1].hd95, r.report.mean_regions[2].hd95,
                  r.report.mean_avg.hd95);
    out += buf;
  }
  return out;
}

// Trains and evaluates every variant along one ablation axis with a shared
// seed and dataset. axis: "fusion" (4 modes) or "template" (4 variants).
inline std::vector<AblationRow> run_ablation(const RunConfig& base_cfg,
                                             const std::string& data_dir,
                                             const std::string& axis,
                                             const std::string& out_root) {
  std::vector<std::pair<std::string, std::string>> settings;
  if (axis == "fusion") {
    for (const char* v :
         {"dot_sum", "t2i_once", "bidirectional", "image_only"})
      settings.emplace_back("fusion.variant", v);
  } else if (axis == "template") {
    for (const char* v : {"raw", "location_only", "feature_only", "full"})
      settings.emplace_back("text.template", v);
  } else {
    throw ConfigError("ablate axis must be fusion or template, got " + axis);
  }

  std::vector<AblationRow> rows;
  for (const auto& [key, value] : settings) {
    RunConfig cfg = base_cfg;
    cfg.set(key, value);
    PreparedDataset ds = prepare_dataset(
        data_dir, cfg.get_size("data.size"),
        template_variant_from(cfg.get_string("text.template")));
    const std::string run_dir =
        (std::filesystem::path(out_root) / (axis + "-" + value)).string();
    TrainResult tr = run_training(cfg, ds, run_dir);
    MetricsReport rep = evaluate_run(cfg, run_dir, ds, "test");
    write_metrics_outputs(rep, run_dir);
    rows.push_back(AblationRow{value, std::move(rep), tr.best_val_dice});
  }
  return rows;
}

}  // namespace textseg

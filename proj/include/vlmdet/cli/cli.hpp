#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlmdet/data/ppm.hpp"
#include "vlmdet/eval/experiments.hpp"
#include "vlmdet/io/checkpoint.hpp"
#include "vlmdet/io/config.hpp"
#include "vlmdet/io/report.hpp"
#include "vlmdet/model/pretrain.hpp"

namespace vlmdet::cli {

inline constexpr const char* kRunRootEnv = "VLMDET_RUN_ROOT";

enum ExitCode : int { kOk = 0, kUsage = 1, kRuntime = 2 };

using Model = float;

// Options shared by every subcommand plus flag overrides of config keys.
struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out_dir;
  std::vector<std::pair<std::string, std::string>> flag_values;  // key, value (filled by callbacks)
};

namespace detail {

inline void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_file, "key=value config file");
  sub->add_option("--set", c.sets, "override one config key (key=value), repeatable");
  sub->add_option("--out", c.out_dir, "run directory (default: $" + std::string(kRunRootEnv) + "/<command>-<digest>)");
}

// Flag bound to a config key; the value is applied after --config/--set.
inline void add_key(CLI::App* sub, Common& c, const std::string& flag, const std::string& key, const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&c, key](const std::string& v) { c.flag_values.emplace_back(key, v); }, help + " [" + key + "]");
}

inline void add_strategy_flags(CLI::App* sub, Common& c) {
  add_key(sub, c, "--strategy", "strategy.kind", "linear | finetune | prompt | adapter");
  add_key(sub, c, "--m", "strategy.m", "prompt context tokens");
  add_key(sub, c, "--alpha", "strategy.alpha", "adapter blend");
  add_key(sub, c, "--reduction", "strategy.reduction", "adapter reduction");
  add_key(sub, c, "--lr", "strategy.lr", "learning rate");
  add_key(sub, c, "--epochs", "train.epochs", "training epochs");
  add_key(sub, c, "--batch", "train.batch", "batch size");
  add_key(sub, c, "--seed", "train.seed", "training seed");
  add_key(sub, c, "--augment", "train.augment", "train-time augmentation (true/false)");
}

inline void add_data_flags(CLI::App* sub, Common& c) {
  add_key(sub, c, "--train-size", "data.train_size", "training samples");
  add_key(sub, c, "--eval-size", "data.eval_size", "samples per eval family");
  add_key(sub, c, "--data-seed", "data.seed", "split seed");
  add_key(sub, c, "--families", "data.families", "comma-separated eval families");
}

inline ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config_file.empty()) cfg = ExperimentConfig::parse(fsio::read_file(c.config_file));
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : c.flag_values) cfg.set(k, v);
  return cfg;
}

inline std::string run_dir(const Common& c, const std::string& command, const ExperimentConfig& cfg,
                           const std::string& extra = "") {
  if (!c.out_dir.empty()) return c.out_dir;
  const char* root = std::getenv(kRunRootEnv);
  const std::string base = root && *root ? root : "runs";
  const std::string tag = sha256_hex(cfg.canonical() + extra).substr(0, 12);
  return (std::filesystem::path(base) / (command + "-" + tag)).string();
}

inline RunWriter make_writer(const Common& c, const std::string& command, const ExperimentConfig& cfg,
                             std::uint64_t seed, const std::string& extra = "") {
  RunManifest m;
  m.command = command;
  m.config_digest = cfg.digest();
  m.seed = seed;
  RunWriter w(run_dir(c, command, cfg, extra), m);
  w.write("config.txt", cfg.canonical());
  return w;
}

inline std::map<std::string, std::string> ckpt_meta(const ExperimentConfig& cfg) {
  return {{"experiment.digest", cfg.digest()}, {"train.seed", cfg.raw("train.seed")}};
}

inline DualEncoder<Model> load_backbone_file(const std::string& path) {
  if (path.empty()) throw PreconditionError("a --backbone checkpoint is required");
  return load_backbone<Model>(read_checkpoint(path));
}

inline AdaptedModel<Model> load_adapted_file(const std::string& path) {
  if (path.empty()) throw PreconditionError("a --checkpoint is required");
  return load_adapted<Model>(read_checkpoint(path));
}

inline void stamp(MetricsReport& r, const ExperimentConfig& cfg) {
  r.metadata["seed"] = cfg.raw("train.seed");
  r.metadata["config_digest"] = cfg.digest();
}

}  // namespace detail

// ---- pipeline stages ----------------------------------------------------------

inline DualEncoder<Model> pretrain_backbone(const ExperimentConfig& cfg, std::vector<double>* curve = nullptr) {
  const auto keys = pretrain_corpus(cfg.size("pretrain.size"), cfg.u64("pretrain.corpus_seed"), cfg.size("data.categories"),
                                    cfg.families("pretrain.families"));
  std::vector<SampleRecord> recs;
  recs.reserve(keys.size());
  const auto sc = cfg.synth();
  for (const auto& k : keys) recs.push_back(materialize(k, sc));
  DualEncoder<Model> model(cfg.encoder(), synth::default_vocabulary(), cfg.u64("model.seed"));
  auto c = pretrain_toy(model, std::span<const SampleRecord>(recs), cfg.pretrain());
  if (curve) *curve = std::move(c);
  return model;
}

// ---- command entry point ------------------------------------------------------

inline int run_command(const std::vector<std::string>& args, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  CLI::App app{"Toy vision-language real/fake detector: pre-training, adaptation and evaluation"};
  app.require_subcommand(1);
  Common c;
  std::string backbone, checkpoint;
  std::size_t images = 0;

  auto* gen = app.add_subcommand("gen-data", "write split manifests, vocabulary and sample PPM images");
  auto* pre = app.add_subcommand("pretrain", "contrastive pre-training of the dual encoder");
  auto* adapt = app.add_subcommand("adapt", "train one adaptation strategy on REAL vs GAN_LIKE");
  auto* eval = app.add_subcommand("eval", "AP / accuracy of an adapted checkpoint on every eval family");
  auto* rob = app.add_subcommand("robustness", "JPEG / blur robustness sweep of an adapted checkpoint");
  auto* few = app.add_subcommand("fewshot", "train on k real + k fake samples per category, then evaluate");
  auto* abl = app.add_subcommand("ablate", "training-set size ablation");
  auto* exp = app.add_subcommand("export-features", "dump image embeddings of the eval sets");
  for (auto* s : {gen, pre, adapt, eval, rob, few, abl, exp}) detail::add_common(s, c);

  detail::add_data_flags(gen, c);
  gen->add_option("--images", images, "PPM samples to write per family");

  detail::add_key(pre, c, "--epochs", "pretrain.epochs", "pre-training epochs");
  detail::add_key(pre, c, "--size", "pretrain.size", "pre-training samples");
  detail::add_key(pre, c, "--seed", "pretrain.seed", "pre-training seed");
  detail::add_key(pre, c, "--batch", "pretrain.batch", "pre-training batch");
  detail::add_key(pre, c, "--lr", "pretrain.lr", "pre-training learning rate");

  for (auto* s : {adapt, few, abl}) {
    s->add_option("--backbone", backbone, "pre-trained backbone checkpoint")->required();
    detail::add_strategy_flags(s, c);
    detail::add_data_flags(s, c);
  }
  detail::add_key(few, c, "--k", "eval.kshot", "samples per class per category");
  detail::add_key(abl, c, "--sizes", "eval.ablation_sizes", "comma-separated base sizes (scaled by data.scale_factor)");
  detail::add_key(abl, c, "--scale-factor", "data.scale_factor", "ablation size scale");
  for (auto* s : {eval, rob, exp}) {
    s->add_option("--checkpoint", checkpoint, "adapted checkpoint (export-features also takes a backbone)")->required();
    detail::add_data_flags(s, c);
  }
  detail::add_key(rob, c, "--qualities", "eval.qualities", "JPEG qualities");
  detail::add_key(rob, c, "--sigmas", "eval.sigmas", "blur sigmas");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    CLI::App* active = &app;
    for (auto* s : app.get_subcommands()) active = s;
    err << active->help();
    return kUsage;
  }

  try {
    const ExperimentConfig cfg = detail::resolve_config(c);
    const auto sc = cfg.synth();

    if (*gen) {
      const Splits splits = build_splits(cfg.split());
      auto w = detail::make_writer(c, "gen-data", cfg, cfg.u64("data.seed"));
      w.write("train_manifest.csv", manifest_text(splits.train));
      for (const auto& e : splits.eval) w.write("eval_" + dataset_name(e.family) + "_manifest.csv", manifest_text(e.items));
      w.write("vocab.txt", synth::default_vocabulary().to_text());
      for (Family f : {Family::Real, Family::GanLike, Family::DiffusionLike, Family::CommercialLike})
        for (std::size_t i = 0; i < images; ++i) {
          const auto rec = synth::generate_sample(f, i % sc.categories, cfg.u64("data.seed") * 1000003ull + i, sc);
          w.write("images/" + dataset_name(f) + "_" + std::to_string(i) + ".ppm", encode_ppm(rec.image));
        }
      out << "wrote " << w.finish() << "\n";
    } else if (*pre) {
      std::vector<double> curve;
      const DualEncoder<Model> model = pretrain_backbone(cfg, &curve);
      auto w = detail::make_writer(c, "pretrain", cfg, cfg.u64("pretrain.seed"));
      w.write("backbone.ckpt", encode_checkpoint(backbone_checkpoint(model, detail::ckpt_meta(cfg))));
      w.write("pretrain_loss.csv", loss_curve_csv(curve));
      w.write("vocab.txt", model.vocab().to_text());
      out << "wrote " << w.finish() << "\n";
    } else if (*adapt || *few) {
      const auto bb = detail::load_backbone_file(backbone);
      const Splits splits = build_splits(cfg.split());
      std::vector<SampleKey> keys = splits.train;
      const std::string cmd = *adapt ? "adapt" : "fewshot";
      if (*few) keys = kshot_subset(splits.train, cfg.size("eval.kshot"), cfg.size("data.categories"), cfg.u64("train.seed"));
      auto trained = train_adaptation(bb, cfg.strategy(), std::span<const SampleKey>(keys), sc, cfg.train());
      auto w = detail::make_writer(c, cmd, cfg, cfg.u64("train.seed"), sha256_hex(fsio::read_file(backbone)));
      w.write("adapted.ckpt", encode_checkpoint(adapted_checkpoint(trained.model, detail::ckpt_meta(cfg))));
      w.write("loss_curve.csv", loss_curve_csv(trained.loss_curve));
      if (*few) {
        MetricsReport rep = evaluate(trained.model, splits.eval, sc, "fewshot_k" + cfg.raw("eval.kshot"));
        detail::stamp(rep, cfg);
        w.write("report.csv", report_csv(rep));
        w.write("report.json", report_json(rep));
      }
      out << "wrote " << w.finish() << "\n";
    } else if (*eval || *rob) {
      const auto model = detail::load_adapted_file(checkpoint);
      const Splits splits = build_splits(cfg.split());
      EvalFeatureCache<Model> cache(model.backbone(), splits.eval, sc);
      const std::string cmd = *eval ? "eval" : "robustness";
      auto w = detail::make_writer(c, cmd, cfg, cfg.u64("train.seed"), sha256_hex(fsio::read_file(checkpoint)));
      if (*eval) {
        MetricsReport rep = evaluate(model, cache, "eval");
        detail::stamp(rep, cfg);
        w.write("report.csv", report_csv(rep));
        w.write("report.json", report_json(rep));
      } else {
        std::vector<int> qs;
        for (auto q : cfg.sizes("eval.qualities")) qs.push_back(static_cast<int>(q));
        SweepResult s = robustness_sweep(model, cache, qs, cfg.reals("eval.sigmas"));
        s.metadata["config_digest"] = cfg.digest();
        w.write("sweep.csv", sweep_csv(s));
        w.write("sweep.json", sweep_json(s));
        w.write("sweep_plot.csv", sweep_plot_data(s));
      }
      out << "wrote " << w.finish() << "\n";
    } else if (*abl) {
      const auto bb = detail::load_backbone_file(backbone);
      AblationOptions opt;
      opt.sizes = cfg.ablation_sizes();
      opt.split = cfg.split();
      opt.train = cfg.train();
      auto reps = size_ablation(bb, cfg.strategy(), opt, sc);
      for (auto& r : reps) detail::stamp(r, cfg);
      auto w = detail::make_writer(c, "ablate", cfg, cfg.u64("train.seed"), sha256_hex(fsio::read_file(backbone)));
      w.write("ablation.csv", reports_csv(reps));
      w.write("ablation.json", reports_json(reps));
      out << "wrote " << w.finish() << "\n";
    } else if (*exp) {
      const RawCheckpoint ck = read_checkpoint(checkpoint);
      std::optional<AdaptedModel<Model>> adapted;
      std::optional<DualEncoder<Model>> plain;
      if (checkpoint_kind(ck) == "adapted") adapted = load_adapted<Model>(ck);
      else plain = load_backbone<Model>(ck);
      const DualEncoder<Model>& enc = adapted ? adapted->backbone() : *plain;
      const Splits splits = build_splits(cfg.split());
      std::string csv = "source_id,label,family";
      for (std::size_t j = 0; j < enc.config().d_embed; ++j) csv += ",e" + std::to_string(j);
      csv += "\n";
      std::size_t id = 0;
      for (const auto& set : splits.eval) {
        const auto bank = compute_features(enc, std::span<const SampleKey>(set.items), sc);
        Tensor<Model> emb = bank.embedding;
        if (adapted && adapted->spec().kind == StrategyKind::Adapter) emb = adapted->adapt_embedding(emb);
        for (std::size_t i = 0; i < set.items.size(); ++i, ++id) {
          csv += std::to_string(id) + "," + std::to_string(set.items[i].label) + "," + family_name(set.items[i].family);
          for (std::size_t j = 0; j < emb.cols(); ++j) csv += "," + report_detail::num(emb[i * emb.cols() + j]);
          csv += "\n";
        }
      }
      auto w = detail::make_writer(c, "export-features", cfg, cfg.u64("data.seed"), sha256_hex(fsio::read_file(checkpoint)));
      w.write("features.csv", csv);
      out << "wrote " << w.finish() << "\n";
    }
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

inline int run_command(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_command(args);
}

}  // namespace vlmdet::cli

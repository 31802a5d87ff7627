#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "apam/evalcli/sweep.hpp"

namespace apam::cli {

inline constexpr int kOk = 0;
inline constexpr int kInternal = 1;
inline constexpr int kUsage = 2;
inline constexpr int kData = 3;
inline constexpr int kNumeric = 4;

namespace detail {

template <class T>
void apply(const std::optional<T>& flag, T& target) {
  if (flag) target = *flag;
}

inline text::ModelConfig model_from_file(const std::optional<std::string>& path) {
  if (!path) return {};
  std::ifstream in(*path);
  if (!in) throw IngestError("cannot open model config '" + *path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("model config '" + *path + "' is not valid JSON: " + e.what());
  }
  return eval::detail::parse_model(j);
}

/// A number or one of the named presets.
inline double parse_imbalance(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  return data::imbalance_preset(s);
}

}  // namespace detail

struct PretrainArgs {
  std::string corpus, out;
  std::optional<std::string> model, loss_trace;
  pretrain::PretrainConfig cfg;
  std::uint64_t init_seed = 1;
};

inline int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  const auto model = detail::model_from_file(a.model);
  const auto corpus = pretrain::read_corpus(a.corpus);
  auto init = text::init_encoder<float>(model, a.init_seed);
  const auto r = pretrain::pretrain(corpus, std::move(init), a.cfg, [&](std::size_t epoch, double loss) {
    out << "epoch " << epoch << " mean_loss " << loss << "\n";
  });
  ckpt::write_file(a.out, text::to_records(r.encoder));
  if (a.loss_trace) pretrain::write_loss_trace(*a.loss_trace, r.epoch_loss);
  out << "wrote " << a.out << " (" << corpus.size() << " texts, " << r.steps << " steps)\n";
  return kOk;
}

struct SynthArgs {
  std::string in, out, imbalance = "1";
  data::SynthOptions opt;
};

inline int cmd_synth(SynthArgs a, std::ostream& out) {
  a.opt.imbalance = detail::parse_imbalance(a.imbalance);
  const auto split = data::synthesize(data::ingest(a.in), a.opt);
  data::write_split(a.out, split);
  std::size_t corrupted = 0;
  for (const auto& e : split.train.examples) corrupted += e.corrupted;
  out << "train " << split.train.size() << " (corrupted " << corrupted << ", imbalance factor "
      << data::imbalance_factor(split.train) << "), meta " << split.meta.size() << ", test " << split.test.size()
      << " -> " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data, pipeline, out;
  std::optional<std::string> ckpt, config;
  std::optional<double> alpha, beta_meta, lr, epsilon;
  std::optional<std::size_t> steps, bs, meta_bs, pretrain_epochs;
  std::optional<std::string> loss;
  std::optional<std::uint64_t> seed;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out) {
  eval::ExperimentConfig c;
  if (a.config) c = eval::load_config(*a.config);
  if (a.seed) {
    c.seed = *a.seed;
    c.train.seed = c.pretrain.seed = c.data.split.seed = *a.seed;
  }
  c.data = {};
  c.data.split_dir = a.data;
  c.pipeline = eval::parse_pipeline(a.pipeline);
  detail::apply(a.alpha, c.train.alpha);
  detail::apply(a.beta_meta, c.train.beta_meta);
  if (a.lr) c.train.lr = *a.lr;
  detail::apply(a.epsilon, c.train.loss.epsilon);
  detail::apply(a.steps, c.train.steps);
  detail::apply(a.bs, c.train.batch_size);
  detail::apply(a.meta_bs, c.train.meta_batch_size);
  detail::apply(a.pretrain_epochs, c.pretrain.epochs);
  if (a.loss) c.train.loss.kind = loss::parse_kind(*a.loss);

  const auto split = eval::load_data(c);
  std::optional<eval::Prepared> prepared;
  if (a.ckpt) {
    auto W = text::from_records<float>(ckpt::read_file(*a.ckpt));
    c.model = W.config;
    prepared = eval::Prepared{std::move(W), {}};
  }
  c.validate();
  auto r = eval::run_pipeline(c, split, prepared ? &*prepared : nullptr);
  r.report["init_checkpoint"] = a.ckpt ? nlohmann::ordered_json(*a.ckpt) : nlohmann::ordered_json(nullptr);
  eval::write_outputs(r, split.train.classes, a.out);
  out << eval::pipeline_name(c.pipeline) << ": accuracy " << r.metrics.accuracy << ", weighted F1 "
      << r.metrics.weighted.f1;
  if (r.weights && r.weights->clean && r.weights->noisy) {
    out << ", mean weight clean " << *r.weights->clean << " / corrupted " << *r.weights->noisy;
  }
  out << " -> " << a.out << "\n";
  return kOk;
}

struct EvalArgs {
  std::string model, test, out;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto m = eval::load_model(a.model);
  if (m.classes.empty()) throw DataError("checkpoint '" + a.model + "' carries no label map");
  const auto test = data::ingest(a.test, &m.classes);
  const auto metrics = eval::compute_metrics(eval::predict(m.W, test), eval::golds(test), m.classes.size());
  nlohmann::ordered_json j;
  j["version"] = eval::version();
  j["model"] = a.model;
  j["test"] = a.test;
  j["metrics"] = eval::metrics_json(metrics, m.classes);
  eval::write_text(a.out, eval::dump(j));
  out << "accuracy " << metrics.accuracy << ", weighted F1 " << metrics.weighted.f1 << " on " << test.size()
      << " examples -> " << a.out << "\n";
  return kOk;
}

struct SweepArgs {
  std::string config, out = "sweep";
  std::vector<double> rhos;
  std::vector<std::string> pipelines;
};

inline int cmd_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  const auto c = eval::load_config(a.config);
  std::vector<eval::Pipeline> pipelines;
  for (const auto& p : a.pipelines) pipelines.push_back(eval::parse_pipeline(p));
  if (pipelines.empty()) pipelines = eval::kSweepPipelines;
  const auto t = eval::sensitivity_sweep(c, a.rhos, pipelines);
  std::filesystem::create_directories(a.out);
  const auto csv = eval::sweep_csv(t);
  eval::write_text((std::filesystem::path(a.out) / "sweep.csv").string(), csv);
  eval::write_text((std::filesystem::path(a.out) / "sweep.json").string(), eval::dump(eval::sweep_json(t, c)));
  out << csv;
  for (std::size_t p = 0; p < t.pipelines.size(); ++p)
    for (std::size_t k = 0; k < t.rhos.size(); ++k)
      if (!t.cells[p][k].error.empty()) {
        err << "warning: " << eval::pipeline_name(t.pipelines[p]) << " at rho " << t.rhos[k]
            << " failed: " << t.cells[p][k].error << "\n";
      }
  return kOk;
}

inline int cmd_run(const std::string& config, const std::string& out_dir, std::ostream& out) {
  const auto r = eval::run_experiment(eval::load_config(config), out_dir);
  out << r.report["pipeline"].get<std::string>() << ": accuracy " << r.metrics.accuracy << " -> " << out_dir << "\n";
  return kOk;
}

struct GenArgs {
  std::string out;
  data::SyntheticSpec spec;
};

inline int cmd_gen(const GenArgs& a, std::ostream& out) {
  const auto ds = data::make_synthetic(a.spec);
  data::write_jsonl(a.out, ds);
  out << "wrote " << ds.size() << " examples over " << ds.num_classes() << " classes -> " << a.out << "\n";
  return kOk;
}

/// Parses argv and dispatches; returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"APAM: contrastive pre-training and meta-learned reweighting for noisy long-tailed text classification"};
  app.set_version_flag("--version", eval::version());
  app.require_subcommand(1);

  PretrainArgs pa;
  auto* pre = app.add_subcommand("pretrain", "contrastive dropout-pair pre-training of the encoder");
  pre->add_option("--corpus", pa.corpus, "text file (one sentence per line) or .jsonl with a text field")->required();
  pre->add_option("--out", pa.out, "checkpoint to write")->required();
  pre->add_option("--epochs", pa.cfg.epochs)->capture_default_str();
  pre->add_option("--tau", pa.cfg.tau)->capture_default_str();
  pre->add_option("--dropout", pa.cfg.dropout_p, "dropout rate of the two views (default: the model's)");
  pre->add_option("--lr", pa.cfg.lr)->capture_default_str();
  pre->add_option("--batch-size", pa.cfg.batch_size)->capture_default_str();
  pre->add_option("--seed", pa.cfg.seed)->capture_default_str();
  pre->add_option("--init-seed", pa.init_seed, "encoder initialisation seed")->capture_default_str();
  pre->add_option("--model", pa.model, "model config JSON");
  pre->add_option("--loss-trace", pa.loss_trace, "CSV of the per-epoch mean loss");

  SynthArgs sa;
  auto* syn = app.add_subcommand("synth", "long-tail, noise and meta/test split of a labeled JSONL file");
  syn->add_option("--in", sa.in, "labeled JSONL")->required();
  syn->add_option("--out", sa.out, "output directory (train/meta/test.jsonl, labels.json)")->required();
  syn->add_option("--imbalance", sa.imbalance, "imbalance factor or preset (amazon_review, amazon_annotation)")
      ->capture_default_str();
  syn->add_option("--cap", sa.opt.cap, "cap on the largest class (0 = none)")->capture_default_str();
  syn->add_option("--rho", sa.opt.rho, "uniform noise rate")->capture_default_str();
  syn->add_option("--meta-frac", sa.opt.meta_fraction)->capture_default_str();
  syn->add_flag("--balanced-meta", sa.opt.balanced_meta, "equal meta examples per class");
  syn->add_option("--test-frac", sa.opt.test_fraction)->capture_default_str();
  syn->add_option("--test-per-class", sa.opt.test_per_class, "fixed test examples per class (overrides --test-frac)");
  syn->add_option("--seed", sa.opt.seed)->capture_default_str();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train one pipeline on a prepared split and evaluate it");
  tr->add_option("--data", ta.data, "split directory written by synth")->required();
  tr->add_option("--pipeline", ta.pipeline, "ce_baseline, focal, class_balanced, mwn, simcse_only or apam")->required();
  tr->add_option("--ckpt", ta.ckpt, "initial encoder (e.g. from pretrain); skips in-run pre-training");
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--config", ta.config, "experiment config JSON supplying the remaining settings");
  tr->add_option("--alpha", ta.alpha);
  tr->add_option("--beta-meta", ta.beta_meta);
  tr->add_option("--lr", ta.lr, "step size of the real update (default: alpha)");
  tr->add_option("--steps", ta.steps);
  tr->add_option("--bs", ta.bs);
  tr->add_option("--meta-bs", ta.meta_bs);
  tr->add_option("--epsilon", ta.epsilon);
  tr->add_option("--loss", ta.loss, "cross_entropy, poly, focal or class_balanced");
  tr->add_option("--pretrain-epochs", ta.pretrain_epochs);
  tr->add_option("--seed", ta.seed);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a labeled JSONL file");
  ev->add_option("--model", ea.model)->required();
  ev->add_option("--test", ea.test)->required();
  ev->add_option("--out", ea.out, "report JSON")->required();

  SweepArgs wa;
  auto* sw = app.add_subcommand("sweep", "noise sensitivity sweep");
  sw->add_option("--config", wa.config)->required();
  sw->add_option("--rhos", wa.rhos, "comma-separated noise rates")->required()->delimiter(',');
  sw->add_option("--pipelines", wa.pipelines, "comma-separated (default ce_baseline,mwn,apam)")->delimiter(',');
  sw->add_option("--out", wa.out, "output directory")->capture_default_str();

  std::string run_config, run_out;
  auto* rn = app.add_subcommand("run", "full experiment from a config file");
  rn->add_option("--config", run_config)->required();
  rn->add_option("--out", run_out)->required();

  GenArgs ga;
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic labeled corpus as JSONL");
  gen->add_option("--out", ga.out)->required();
  gen->add_option("--classes", ga.spec.classes)->capture_default_str();
  gen->add_option("--per-class", ga.spec.per_class)->capture_default_str();
  gen->add_option("--signal", ga.spec.signal)->capture_default_str();
  gen->add_option("--confusion", ga.spec.confusion)->capture_default_str();
  gen->add_option("--seed", ga.spec.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  }

  try {
    if (*pre) return cmd_pretrain(pa, out);
    if (*syn) return cmd_synth(sa, out);
    if (*tr) return cmd_train(ta, out);
    if (*ev) return cmd_eval(ea, out);
    if (*sw) return cmd_sweep(wa, out, err);
    if (*rn) return cmd_run(run_config, run_out, out);
    if (*gen) return cmd_gen(ga, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}

}  // namespace apam::cli

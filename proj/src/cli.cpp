// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mqlrec/checkpoint.hpp"
#include "mqlrec/error.hpp"
#include "mqlrec/evaluate.hpp"
#include "mqlrec/pipeline.hpp"

namespace mqlrec {
namespace {

namespace fs = std::filesystem;

struct Context {
  PipelineConfig config;
  fs::path work;
  std::string config_hash;

  fs::path at(const std::string& name) const { return work / name; }
  fs::path text_embeddings() const {
    return config.text_embeddings.empty() ? at("text.emb") : config.text_embeddings;
  }
  fs::path image_embeddings() const {
    return config.image_embeddings.empty() ? at("image.emb") : config.image_embeddings;
  }
  fs::path interactions() const { return config.interactions.empty() ? at("interactions.tsv") : config.interactions; }
  fs::path pretrain_interactions() const {
    return config.pretrain_interactions.empty() ? at("pretrain_interactions.tsv") : config.pretrain_interactions;
  }
};

/// Which command produces a work-dir artifact, for actionable messages.
std::string producer_hint(const fs::path& path) {
  const std::string name = path.filename().string();
  static const std::vector<std::pair<std::string, std::string>> hints = {
      {"text.emb", "mqlrec synth"},
      {"image.emb", "mqlrec synth"},
      {"interactions.tsv", "mqlrec synth"},
      {"pretrain_interactions.tsv", "mqlrec synth (with source_domains > 0)"},
      {"rqvae_", "mqlrec train-translator"},
      {"vocab.txt", "mqlrec tokenize"},
      {"codes.tsv", "mqlrec tokenize"},
      {"corpus_pretrain", "mqlrec build-corpus --stage pretrain"},
      {"corpus_finetune", "mqlrec build-corpus --stage finetune"},
      {"model_pretrain", "mqlrec train --stage pretrain"},
      {"model_finetune", "mqlrec train --stage finetune"},
      {"report_", "mqlrec evaluate"}};
  for (const auto& [prefix, command] : hints) {
    if (name.starts_with(prefix)) return "; run `" + command + "` first";
  }
  return "";
}

std::string relative_name(const Context& ctx, const fs::path& path) {
  const fs::path rel = path.lexically_normal().lexically_relative(ctx.work.lexically_normal());
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return path.generic_string();
}

class Manifest {
 public:
  Manifest(const Context& ctx, std::string command, std::string variant)
      : ctx_(ctx), command_(std::move(command)), variant_(std::move(variant)) {
    json_ = {{"command", command_},
             {"variant", variant_},
             {"profile", profile_name(ctx.config.profile)},
             {"seed", ctx.config.seed},
             {"config_hash", ctx.config_hash},
             {"inputs", nlohmann::json::object()},
             {"outputs", nlohmann::json::object()}};
  }

  /// Requires `path` to exist and to match any manifest that produced it.
  void input(const fs::path& path) {
    if (!fs::exists(path)) {
      throw PipelineError("MissingInput", "required input " + path.string() + " does not exist" +
                                              producer_hint(path));
    }
    const std::string name = relative_name(ctx_, path);
    const std::string hash = sha256_file(path);
    const fs::path dir = ctx_.at("manifests");
    if (fs::exists(dir)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        if (f.extension() != ".json") continue;
        std::ifstream in(f);
        const auto m = nlohmann::json::parse(in, nullptr, false);
        if (m.is_discarded() || !m.contains("outputs")) continue;
        const auto& outs = m["outputs"];
        if (outs.contains(name) && outs[name].get<std::string>() != hash) {
          throw PipelineError("HashMismatch", "input " + path.string() + " differs from the version recorded in " +
                                                  f.string() + "; rerun `mqlrec " +
                                                  m.value("command", std::string("?")) + "`");
        }
      }
    }
    json_["inputs"][name] = hash;
  }

  void output(const fs::path& path) { json_["outputs"][relative_name(ctx_, path)] = sha256_file(path); }

  void write() const {
    const fs::path dir = ctx_.at("manifests");
    fs::create_directories(dir);
    const std::string stem = variant_.empty() ? command_ : command_ + "_" + variant_;
    std::ofstream out(dir / (stem + ".json"));
    if (!out) throw Error("IoError", "cannot write manifest for " + stem);
    out << json_.dump(2) << '\n';
  }

 private:
  const Context& ctx_;
  std::string command_;
  std::string variant_;
  nlohmann::json json_;
};

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const Context& ctx) {
  Manifest manifest(ctx, "synth", "");
  const auto domains = make_synthetic_domains(ctx.config);
  std::vector<EmbeddingMatrix> text{domains.target.text}, image{domains.target.image};
  std::vector<InteractionDataset> sources;
  for (const auto& s : domains.sources) {
    text.push_back(s.text);
    image.push_back(s.image);
    sources.push_back(s.interactions);
  }
  const auto write = [&](const fs::path& p, auto&& fn) {
    fn(p);
    manifest.output(p);
  };
  write(ctx.at("text.emb"), [&](const fs::path& p) { write_embeddings(concat_embeddings(text), p); });
  write(ctx.at("image.emb"), [&](const fs::path& p) { write_embeddings(concat_embeddings(image), p); });
  write(ctx.at("interactions.tsv"), [&](const fs::path& p) { write_interactions(domains.target.interactions, p); });
  if (!sources.empty()) {
    write(ctx.at("pretrain_interactions.tsv"),
          [&](const fs::path& p) { write_interactions(concat_interactions(sources), p); });
  }
  manifest.write();
  spdlog::info("synthetic target domain: {} items, {} users; {} source domains", ctx.config.synth.n_items,
               domains.target.interactions.users.size(), domains.sources.size());
}

void write_translator_log(const QuantTranslator& t, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("IoError", "cannot write " + path.string());
  out.precision(17);
  out << "epoch,recon,rq,total\n";
  for (const auto& e : t.log()) out << e.epoch << ',' << e.recon << ',' << e.rq << ',' << e.total << '\n';
}

void cmd_train_translator(const Context& ctx, Modality modality) {
  const std::string name(modality_name(modality));
  Manifest manifest(ctx, "train-translator", name);
  const fs::path input = modality == Modality::Text ? ctx.text_embeddings() : ctx.image_embeddings();
  manifest.input(input);
  const auto embeddings = load_embeddings(input, modality);
  const auto& config = modality == Modality::Text ? ctx.config.text_rqvae : ctx.config.image_rqvae;
  const fs::path ckpt = ctx.at("rqvae_" + name + ".ckpt");
  QuantTranslator translator;
  try {
    translator = train_translator(embeddings, config);
  } catch (const TranslatorDiverged& e) {
    e.last_good().save(ctx.at("rqvae_" + name + ".diverged.ckpt"));
    throw;
  }
  translator.save(ckpt);
  manifest.output(ckpt);
  const fs::path log = ctx.at("rqvae_" + name + "_log.csv");
  write_translator_log(translator, log);
  manifest.output(log);
  manifest.write();
  if (!translator.log().empty()) {
    const auto& last = translator.log().back();
    spdlog::info("{} translator: recon {:.5f} rq {:.5f}", name, last.recon, last.rq);
  }
}

void cmd_tokenize(const Context& ctx) {
  Manifest manifest(ctx, "tokenize", "");
  const fs::path te = ctx.text_embeddings(), ie = ctx.image_embeddings();
  const fs::path tc = ctx.at("rqvae_text.ckpt"), ic = ctx.at("rqvae_image.ckpt");
  for (const auto& p : {te, ie, tc, ic}) manifest.input(p);
  const auto text = load_embeddings(te, Modality::Text);
  const auto image = load_embeddings(ie, Modality::Image);
  const auto text_tr = QuantTranslator::load(tc);
  const auto image_tr = QuantTranslator::load(ic);
  if (text_tr.modality() != Modality::Text || image_tr.modality() != Modality::Image) {
    throw PipelineError("IncompatibleArtifacts", "translator checkpoints carry the wrong modality");
  }
  if (text_tr.input_dim() != text.dim() || image_tr.input_dim() != image.dim()) {
    throw DimensionMismatch("translator input dimension differs from the embedding dimension");
  }
  const auto tokens = tokenize_items(text_tr, image_tr, text, image);
  tokens.vocab.save(ctx.at("vocab.txt"));
  write_code_table(tokens.codes, ctx.at("codes.tsv"));
  manifest.output(ctx.at("vocab.txt"));
  manifest.output(ctx.at("codes.tsv"));
  manifest.write();
}

Tokenization load_tokens(const Context& ctx, Manifest& manifest) {
  manifest.input(ctx.at("vocab.txt"));
  manifest.input(ctx.at("codes.tsv"));
  Tokenization t;
  t.vocab = Vocabulary::load(ctx.at("vocab.txt"));
  t.codes = read_code_table(ctx.at("codes.tsv"), t.vocab);
  return t;
}

InteractionDataset load_dataset(const Context& ctx, const fs::path& path, Manifest& manifest,
                                const Tokenization& tokens) {
  manifest.input(path);
  auto loaded = load_interactions(path, ctx.config.load);
  for (const auto& u : loaded.dataset.users) {
    for (const auto& item : u.items) {
      if (!tokens.codes.text.contains(item) || !tokens.codes.image.contains(item)) {
        throw MissingEmbeddingError(item);
      }
    }
  }
  return std::move(loaded.dataset);
}

void cmd_build_corpus(const Context& ctx, Stage stage) {
  const std::string name(stage_name(stage));
  Manifest manifest(ctx, "build-corpus", name);
  const auto tokens = load_tokens(ctx, manifest);
  const fs::path source = stage == Stage::Pretrain ? ctx.pretrain_interactions() : ctx.interactions();
  const auto dataset = load_dataset(ctx, source, manifest, tokens);
  const auto& tasks = stage == Stage::Pretrain ? ctx.config.pretrain_tasks : ctx.config.finetune_tasks;
  const auto examples = build_tasks(dataset, tokens, tasks, ctx.config.max_history);
  const auto split = assemble_stage(stage, examples, ctx.config.seed);
  for (const auto& [part, rows] : {std::pair{"train", &split.train}, {"valid", &split.valid}, {"test", &split.test}}) {
    const fs::path p = ctx.at("corpus_" + name + "_" + part + ".tsv");
    write_examples(*rows, p);
    manifest.output(p);
  }
  manifest.write();
}

void check_vocab(const Seq2SeqModel& model, const Vocabulary& vocab, const fs::path& ckpt) {
  if (model.config().vocab_size != static_cast<int>(vocab.size())) {
    throw PipelineError("IncompatibleVocabulary", "checkpoint " + ckpt.string() + " has a vocabulary of " +
                                                      std::to_string(model.config().vocab_size) +
                                                      " tokens but vocab.txt has " + std::to_string(vocab.size()) +
                                                      "; retrain after `mqlrec tokenize`");
  }
}

void cmd_train(const Context& ctx, Stage stage) {
  const std::string name(stage_name(stage));
  Manifest manifest(ctx, "train", name);
  const auto tokens = load_tokens(ctx, manifest);
  const fs::path corpus = ctx.at("corpus_" + name + "_train.tsv");
  const fs::path pretrained = ctx.at("model_pretrain.ckpt");
  if (stage == Stage::Finetune && ctx.config.finetune_from_pretrain && !fs::exists(pretrained)) {
    throw PipelineError("MissingPretrainCheckpoint",
                        "the config sets [tasks] finetune_from_pretrain = true but " + pretrained.string() +
                            " does not exist; run `mqlrec build-corpus --stage pretrain` and `mqlrec train --stage "
                            "pretrain` first, or set finetune_from_pretrain = false");
  }
  manifest.input(corpus);
  const auto examples = read_examples(corpus, tokens.vocab, tokens.codes);

  Seq2SeqModel model;
  if (stage == Stage::Finetune && ctx.config.finetune_from_pretrain) {
    manifest.input(pretrained);
    model = Seq2SeqModel::load(pretrained);
    check_vocab(model, tokens.vocab, pretrained);
  } else {
    model = Seq2SeqModel(model_config_for(ctx.config, tokens.vocab));
  }
  TrainSchedule schedule = stage == Stage::Pretrain ? ctx.config.pretrain : ctx.config.finetune;
  const fs::path ckpt = ctx.at("model_" + name + ".ckpt");
  schedule.checkpoint_path = ckpt;
  TrainResult result;
  try {
    result = train(model, examples, schedule);
  } catch (const Seq2SeqDiverged& e) {
    e.last_good().save(ctx.at("model_" + name + ".diverged.ckpt"));
    throw;
  }
  model.save(ckpt);
  manifest.output(ckpt);
  const fs::path log = ctx.at("train_log_" + name + ".csv");
  write_train_log(result, log);
  manifest.output(log);
  manifest.write();
  if (!result.epoch_loss.empty()) spdlog::info("{}: final epoch loss {:.5f}", name, result.epoch_loss.back());
}

void cmd_evaluate(const Context& ctx, const std::optional<fs::path>& checkpoint, const std::string& label) {
  const std::string variant = label + "_seed" + std::to_string(ctx.config.seed);
  Manifest manifest(ctx, "evaluate", variant);
  const auto tokens = load_tokens(ctx, manifest);
  const fs::path ckpt = checkpoint.value_or(ctx.at("model_finetune.ckpt"));
  manifest.input(ckpt);
  const auto model = Seq2SeqModel::load(ckpt);
  check_vocab(model, tokens.vocab, ckpt);
  const fs::path corpus = ctx.at("corpus_finetune_test.tsv");
  manifest.input(corpus);
  const auto test = read_examples(corpus, tokens.vocab, tokens.codes);
  const auto dataset = load_dataset(ctx, ctx.interactions(), manifest, tokens);
  const auto items = dataset_items(dataset);
  const auto text_trie = build_trie(tokens.codes.text, tokens.vocab, items);
  const auto image_trie = build_trie(tokens.codes.image, tokens.vocab, items);

  std::vector<UserRanking> rankings;
  auto report = evaluate_run(ModelScorer(model), text_trie, image_trie, test, ctx.config.eval, &rankings);
  report.label = label;
  report.seed = ctx.config.seed;
  report.config = {{"eval", report.config},
                   {"checkpoint", relative_name(ctx, ckpt)},
                   {"checkpoint_stage", model.stage_tag()},
                   {"pipeline", ctx.config.to_json()}};
  const fs::path json = ctx.at("report_" + variant + ".json");
  const fs::path tsv = ctx.at("report_" + variant + ".tsv");
  const fs::path ranks = ctx.at("rankings_" + variant + ".tsv");
  write_report_json(report, json);
  write_report_tsv(std::span(&report, 1), tsv);
  write_rankings(rankings, ranks);
  for (const auto& p : {json, tsv, ranks}) manifest.output(p);
  manifest.write();
  for (const auto& r : report.rows) {
    spdlog::info("{:<16} users {:>5}  R@10 {:.4f}  N@10 {:.4f}", r.task, r.users, r.recall[2], r.ndcg[2]);
  }
}

void cmd_report(const Context& ctx, std::vector<fs::path> inputs) {
  Manifest manifest(ctx, "report", "");
  if (inputs.empty()) {
    if (fs::exists(ctx.work)) {
      for (const auto& e : fs::directory_iterator(ctx.work)) {
        const auto name = e.path().filename().string();
        if (name.starts_with("report_") && e.path().extension() == ".json") inputs.push_back(e.path());
      }
    }
    std::sort(inputs.begin(), inputs.end());
  }
  if (inputs.empty()) {
    throw PipelineError("MissingInput", "no report_*.json in " + ctx.work.string() + "; run `mqlrec evaluate` first");
  }
  std::vector<MetricsReport> reports;
  for (const auto& p : inputs) {
    manifest.input(p);
    reports.push_back(read_report_json(p));
  }
  const auto rows = aggregate_reports(reports);
  write_report_tsv(reports, ctx.at("summary.tsv"));
  write_aggregate_tsv(rows, ctx.at("aggregate.tsv"));
  manifest.output(ctx.at("summary.tsv"));
  manifest.output(ctx.at("aggregate.tsv"));
  manifest.write();
  std::cout << "label\ttask\truns\trecall@10\tndcg@10\n";
  for (const auto& r : rows) {
    std::cout << r.label << '\t' << r.task << '\t' << r.runs << '\t' << r.recall_mean[2] << " +- " << r.recall_std[2]
              << '\t' << r.ndcg_mean[2] << " +- " << r.ndcg_std[2] << '\n';
  }
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multimodal quantitative-language generative recommendation pipeline", "mqlrec"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string profile = "desk";
  std::string work_dir;
  std::string log_level = "info";
  app.add_option("--config", config_path, "INI config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Seed for every stochastic component");
  app.add_option("--profile", profile, "Default profile")->check(CLI::IsMember({"paper", "desk"}));
  app.add_option("--work-dir", work_dir, "Artifact directory (overrides [paths] work_dir)");
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));
  app.fallthrough();

  auto* synth = app.add_subcommand("synth", "Generate a synthetic target domain and source domains");
  auto* translator = app.add_subcommand("train-translator", "Train the RQ-VAE translator of one or both modalities");
  std::string modality = "both";
  translator->add_option("--modality", modality)->check(CLI::IsMember({"text", "image", "both"}));
  auto* tokenize = app.add_subcommand("tokenize", "Quantize items and resolve code collisions");
  auto* corpus = app.add_subcommand("build-corpus", "Build task examples for a training stage");
  std::string corpus_stage = "finetune";
  corpus->add_option("--stage", corpus_stage)->check(CLI::IsMember({"pretrain", "finetune", "all"}));
  auto* trainer = app.add_subcommand("train", "Train the encoder-decoder for one stage");
  std::string train_stage = "finetune";
  trainer->add_option("--stage", train_stage)->check(CLI::IsMember({"pretrain", "finetune"}));
  auto* evaluate = app.add_subcommand("evaluate", "Beam-search the test split and write metric reports");
  std::string checkpoint;
  std::string label = "run";
  evaluate->add_option("--checkpoint", checkpoint, "Model checkpoint (default model_finetune.ckpt)");
  evaluate->add_option("--label", label, "Run label used in report names and tables");
  auto* report = app.add_subcommand("report", "Aggregate evaluation reports into summary tables");
  std::vector<std::string> report_inputs;
  report->add_option("inputs", report_inputs, "report_*.json files (default: all in the work dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("UsageError", e.what());
    return 2;
  }

  try {
    auto logger = spdlog::get("mqlrec");
    if (!logger) logger = spdlog::stderr_color_mt("mqlrec");
    spdlog::set_default_logger(logger);
    spdlog::set_level(spdlog::level::from_str(log_level));

    Context ctx;
    ctx.config = load_pipeline_config(config_path, parse_profile(profile));
    if (seed) ctx.config.apply_seed(*seed);
    if (!work_dir.empty()) ctx.config.work_dir = work_dir;
    ctx.config.validate();
    ctx.work = ctx.config.work_dir;
    fs::create_directories(ctx.work);
    ctx.config_hash = [&] {
      const std::string dump = ctx.config.to_json().dump();
      return sha256_hex(dump.data(), dump.size());
    }();

    if (synth->parsed()) {
      cmd_synth(ctx);
    } else if (translator->parsed()) {
      if (modality != "image") cmd_train_translator(ctx, Modality::Text);
      if (modality != "text") cmd_train_translator(ctx, Modality::Image);
    } else if (tokenize->parsed()) {
      cmd_tokenize(ctx);
    } else if (corpus->parsed()) {
      if (corpus_stage != "finetune") cmd_build_corpus(ctx, Stage::Pretrain);
      if (corpus_stage != "pretrain") cmd_build_corpus(ctx, Stage::Finetune);
    } else if (trainer->parsed()) {
      cmd_train(ctx, parse_stage(train_stage));
    } else if (evaluate->parsed()) {
      cmd_evaluate(ctx, checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint), label);
    } else if (report->parsed()) {
      cmd_report(ctx, {report_inputs.begin(), report_inputs.end()});
    }
    return 0;
  } catch (const Error& e) {
    print_error(e.kind(), e.what());
  } catch (const std::exception& e) {
    print_error("InternalError", e.what());
  }
  return 1;
}

}  // namespace mqlrec

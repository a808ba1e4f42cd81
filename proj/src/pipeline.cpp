// Copyright 2026 The mqlrec Authors
// SPDX-License-Identifier: Apache-2.0

#include "mqlrec/pipeline.hpp"

#include <functional>
#include <map>
#include <set>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <spdlog/spdlog.h>

#include "mqlrec/error.hpp"
#include "mqlrec/text_io.hpp"

namespace mqlrec {

Profile parse_profile(std::string_view name) {
  if (name == "paper") return Profile::Paper;
  if (name == "desk") return Profile::Desk;
  throw InvalidArgument("unknown profile '" + std::string(name) + "' (expected paper or desk)");
}

std::string_view profile_name(Profile profile) { return profile == Profile::Paper ? "paper" : "desk"; }

// ---------------------------------------------------------------------------
// Defaults

PipelineConfig PipelineConfig::defaults(Profile profile) {
  PipelineConfig c;
  c.profile = profile;
  if (profile == Profile::Paper) {
    c.text_rqvae = RqVaeConfig{};
    c.model = ModelConfig::paper(0);
    c.pretrain = TrainSchedule::paper_pretrain();
    c.pretrain.epochs = 25;
    c.finetune = TrainSchedule::paper_finetune();
  } else {
    RqVaeConfig r;
    r.levels = 3;
    r.codebook_size = 16;
    r.code_dim = 16;
    r.encoder_hidden = {64};
    r.decoder_hidden = {64};
    r.batch_size = 256;
    r.epochs = 100;
    c.text_rqvae = r;
    c.model = ModelConfig::desk(0);
    c.pretrain.stage = Stage::Pretrain;
    c.pretrain.learning_rate = 1e-3;
    c.pretrain.batch_size = 128;
    c.pretrain.epochs = 6;
    c.pretrain.schedule = LrSchedule::Constant;
    c.finetune.stage = Stage::Finetune;
    c.finetune.learning_rate = 1e-3;
    c.finetune.batch_size = 64;
    c.finetune.epochs = 8;
    c.finetune.warmup_steps = 100;
    c.finetune.schedule = LrSchedule::WarmupCosine;
  }
  c.image_rqvae = c.text_rqvae;
  c.eval.rerank = true;
  c.apply_seed(0);
  return c;
}

void PipelineConfig::apply_seed(std::uint64_t s) {
  seed = s;
  synth.seed = s;
  synth.center_seed = s;
  text_rqvae.seed = s * 4 + 1;
  image_rqvae.seed = s * 4 + 2;
  model.seed = s * 4 + 3;
  pretrain.seed = s * 4 + 1;
  finetune.seed = s * 4 + 2;
}

void PipelineConfig::validate() const {
  for (TaskKind t : pretrain_tasks) {
    if (!stage_allows(Stage::Pretrain, t)) {
      throw InvalidArgument("task " + std::string(task_name(t)) + " cannot be used for pre-training");
    }
  }
  if (pretrain_tasks.empty() && finetune_from_pretrain) {
    throw InvalidArgument("finetune_from_pretrain needs at least one pre-training task");
  }
  if (finetune_tasks.empty()) throw InvalidArgument("at least one fine-tuning task is required");
  if (pretrain.stage != Stage::Pretrain || finetune.stage != Stage::Finetune) {
    throw InvalidArgument("schedule stages are fixed: [pretrain] and [finetune]");
  }
  if (eval.beam_size < 1) throw InvalidArgument("beam_size must be >= 1");
  if (eval.tasks.empty()) throw InvalidArgument("at least one evaluation task is required");
  if (text_rqvae.levels != image_rqvae.levels || text_rqvae.codebook_size != image_rqvae.codebook_size) {
    throw InvalidArgument("text and image translators must share levels and codebook_size");
  }
  if (source_domains < 0) throw InvalidArgument("source_domains must be >= 0");
}

namespace {

nlohmann::json schedule_json(const TrainSchedule& s) {
  return {{"stage", stage_name(s.stage)},
          {"learning_rate", s.learning_rate},
          {"weight_decay", s.weight_decay},
          {"batch_size", s.batch_size},
          {"epochs", s.epochs},
          {"warmup_steps", s.warmup_steps},
          {"schedule", s.schedule == LrSchedule::Constant ? "constant" : "warmup_cosine"},
          {"checkpoint_every", s.checkpoint_every},
          {"seed", s.seed}};
}

nlohmann::json task_list_json(std::span<const TaskKind> tasks) {
  nlohmann::json out = nlohmann::json::array();
  for (TaskKind t : tasks) out.push_back(task_name(t));
  return out;
}

}  // namespace

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json rt, rv;
  mqlrec::to_json(rt, text_rqvae);
  mqlrec::to_json(rv, image_rqvae);
  return {
      {"profile", profile_name(profile)},
      {"paths",
       {{"work_dir", work_dir.string()},
        {"text_embeddings", text_embeddings.string()},
        {"image_embeddings", image_embeddings.string()},
        {"interactions", interactions.string()},
        {"pretrain_interactions", pretrain_interactions.string()}}},
      {"synth",
       {{"n_items", synth.n_items},
        {"n_users", synth.n_users},
        {"dim", synth.dim},
        {"n_clusters", synth.n_clusters},
        {"cross_modal_correlation", synth.cross_modal_correlation},
        {"min_sequence_length", synth.min_sequence_length},
        {"max_sequence_length", synth.max_sequence_length},
        {"stay_probability", synth.stay_probability},
        {"noise_scale", synth.noise_scale},
        {"source_domains", source_domains},
        {"source_users", source_users},
        {"source_items", source_items}}},
      {"data",
       {{"max_history", max_history},
        {"max_sequence_length", load.max_sequence_length},
        {"min_interactions", load.min_interactions}}},
      {"rqvae_text", rt},
      {"rqvae_image", rv},
      {"model", config_to_json(model)},
      {"pretrain", schedule_json(pretrain)},
      {"finetune", schedule_json(finetune)},
      {"tasks",
       {{"pretrain", task_list_json(pretrain_tasks)},
        {"finetune", task_list_json(finetune_tasks)},
        {"finetune_from_pretrain", finetune_from_pretrain}}},
      {"eval",
       {{"beam_size", eval.beam_size},
        {"constrained", eval.constrained},
        {"rerank", eval.rerank},
        {"tasks", task_list_json(eval.tasks)}}},
      {"seed", seed}};
}

// ---------------------------------------------------------------------------
// INI loading

namespace {

using Setter = std::function<void(PipelineConfig&, const std::string&)>;

template <typename T>
T parse_value(const std::string& v) {
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw InvalidArgument("expected a boolean, got '" + v + "'");
  } else if constexpr (std::is_floating_point_v<T>) {
    double d = 0.0;
    if (!parse_double(v, d)) throw InvalidArgument("expected a number, got '" + v + "'");
    return d;
  } else {
    T out{};
    if (!parse_int(v, out)) throw InvalidArgument("expected an integer, got '" + v + "'");
    return out;
  }
}

std::vector<Eigen::Index> parse_dims(const std::string& v) {
  std::vector<Eigen::Index> out;
  for (auto part : split(v, ',')) {
    Eigen::Index d = 0;
    if (!parse_int(part, d) || d < 1) throw InvalidArgument("expected a comma-separated size list, got '" + v + "'");
    out.push_back(d);
  }
  return out;
}

std::vector<TaskKind> parse_tasks(const std::string& v) {
  std::vector<TaskKind> out;
  if (v.empty()) return out;
  for (auto part : split(v, ',')) out.push_back(parse_task(part));
  return out;
}

template <typename T, typename Field>
Setter set(Field field) {
  return [field](PipelineConfig& c, const std::string& v) { std::invoke(field, c) = parse_value<T>(v); };
}

void add_rqvae_keys(std::map<std::string, Setter>& keys, const std::string& section,
                    std::vector<RqVaeConfig PipelineConfig::*> targets) {
  auto each = [targets](auto apply) {
    return [targets, apply](PipelineConfig& c, const std::string& v) {
      for (auto t : targets) apply(c.*t, v);
    };
  };
  keys[section + ".levels"] = each([](RqVaeConfig& r, const std::string& v) { r.levels = parse_value<int>(v); });
  keys[section + ".codebook_size"] =
      each([](RqVaeConfig& r, const std::string& v) { r.codebook_size = parse_value<int>(v); });
  keys[section + ".code_dim"] = each([](RqVaeConfig& r, const std::string& v) { r.code_dim = parse_value<int>(v); });
  keys[section + ".encoder_hidden"] =
      each([](RqVaeConfig& r, const std::string& v) { r.encoder_hidden = parse_dims(v); });
  keys[section + ".decoder_hidden"] =
      each([](RqVaeConfig& r, const std::string& v) { r.decoder_hidden = parse_dims(v); });
  keys[section + ".beta"] = each([](RqVaeConfig& r, const std::string& v) { r.beta = parse_value<double>(v); });
  keys[section + ".learning_rate"] =
      each([](RqVaeConfig& r, const std::string& v) { r.learning_rate = parse_value<double>(v); });
  keys[section + ".weight_decay"] =
      each([](RqVaeConfig& r, const std::string& v) { r.weight_decay = parse_value<double>(v); });
  keys[section + ".batch_size"] =
      each([](RqVaeConfig& r, const std::string& v) { r.batch_size = parse_value<int>(v); });
  keys[section + ".epochs"] = each([](RqVaeConfig& r, const std::string& v) { r.epochs = parse_value<int>(v); });
  keys[section + ".kmeans_init_iters"] =
      each([](RqVaeConfig& r, const std::string& v) { r.kmeans_init_iters = parse_value<int>(v); });
}

void add_schedule_keys(std::map<std::string, Setter>& keys, const std::string& section,
                       TrainSchedule PipelineConfig::*target) {
  keys[section + ".learning_rate"] = [target](PipelineConfig& c, const std::string& v) {
    (c.*target).learning_rate = parse_value<double>(v);
  };
  keys[section + ".weight_decay"] = [target](PipelineConfig& c, const std::string& v) {
    (c.*target).weight_decay = parse_value<double>(v);
  };
  keys[section + ".batch_size"] = [target](PipelineConfig& c, const std::string& v) {
    (c.*target).batch_size = parse_value<int>(v);
  };
  keys[section + ".epochs"] = [target](PipelineConfig& c, const std::string& v) {
    (c.*target).epochs = parse_value<int>(v);
  };
  keys[section + ".warmup_steps"] = [target](PipelineConfig& c, const std::string& v) {
    (c.*target).warmup_steps = parse_value<long>(v);
  };
  keys[section + ".checkpoint_every"] = [target](PipelineConfig& c, const std::string& v) {
    (c.*target).checkpoint_every = parse_value<long>(v);
  };
  keys[section + ".schedule"] = [target](PipelineConfig& c, const std::string& v) {
    if (v == "constant") {
      (c.*target).schedule = LrSchedule::Constant;
    } else if (v == "warmup_cosine") {
      (c.*target).schedule = LrSchedule::WarmupCosine;
    } else {
      throw InvalidArgument("schedule must be constant or warmup_cosine, got '" + v + "'");
    }
  };
}

std::map<std::string, Setter> config_keys() {
  std::map<std::string, Setter> k;
  k["run.seed"] = [](PipelineConfig& c, const std::string& v) { c.apply_seed(parse_value<std::uint64_t>(v)); };
  k["paths.work_dir"] = [](PipelineConfig& c, const std::string& v) { c.work_dir = v; };
  k["paths.text_embeddings"] = [](PipelineConfig& c, const std::string& v) { c.text_embeddings = v; };
  k["paths.image_embeddings"] = [](PipelineConfig& c, const std::string& v) { c.image_embeddings = v; };
  k["paths.interactions"] = [](PipelineConfig& c, const std::string& v) { c.interactions = v; };
  k["paths.pretrain_interactions"] = [](PipelineConfig& c, const std::string& v) { c.pretrain_interactions = v; };

  k["synth.n_items"] = [](PipelineConfig& c, const std::string& v) { c.synth.n_items = parse_value<std::size_t>(v); };
  k["synth.n_users"] = [](PipelineConfig& c, const std::string& v) { c.synth.n_users = parse_value<std::size_t>(v); };
  k["synth.dim"] = [](PipelineConfig& c, const std::string& v) { c.synth.dim = parse_value<std::size_t>(v); };
  k["synth.n_clusters"] = [](PipelineConfig& c, const std::string& v) {
    c.synth.n_clusters = parse_value<std::size_t>(v);
  };
  k["synth.cross_modal_correlation"] = [](PipelineConfig& c, const std::string& v) {
    c.synth.cross_modal_correlation = parse_value<double>(v);
  };
  k["synth.min_sequence_length"] = [](PipelineConfig& c, const std::string& v) {
    c.synth.min_sequence_length = parse_value<std::size_t>(v);
  };
  k["synth.max_sequence_length"] = [](PipelineConfig& c, const std::string& v) {
    c.synth.max_sequence_length = parse_value<std::size_t>(v);
  };
  k["synth.stay_probability"] = [](PipelineConfig& c, const std::string& v) {
    c.synth.stay_probability = parse_value<double>(v);
  };
  k["synth.noise_scale"] = [](PipelineConfig& c, const std::string& v) {
    c.synth.noise_scale = parse_value<double>(v);
  };
  k["synth.source_domains"] = set<int>(&PipelineConfig::source_domains);
  k["synth.source_users"] = set<std::size_t>(&PipelineConfig::source_users);
  k["synth.source_items"] = set<std::size_t>(&PipelineConfig::source_items);

  k["data.max_history"] = set<std::size_t>(&PipelineConfig::max_history);
  k["data.max_sequence_length"] = [](PipelineConfig& c, const std::string& v) {
    c.load.max_sequence_length = parse_value<std::size_t>(v);
  };
  k["data.min_interactions"] = [](PipelineConfig& c, const std::string& v) {
    c.load.min_interactions = parse_value<std::size_t>(v);
  };

  add_rqvae_keys(k, "rqvae", {&PipelineConfig::text_rqvae, &PipelineConfig::image_rqvae});
  add_rqvae_keys(k, "rqvae_text", {&PipelineConfig::text_rqvae});
  add_rqvae_keys(k, "rqvae_image", {&PipelineConfig::image_rqvae});

  k["model.model_dim"] = [](PipelineConfig& c, const std::string& v) { c.model.model_dim = parse_value<int>(v); };
  k["model.enc_layers"] = [](PipelineConfig& c, const std::string& v) { c.model.enc_layers = parse_value<int>(v); };
  k["model.dec_layers"] = [](PipelineConfig& c, const std::string& v) { c.model.dec_layers = parse_value<int>(v); };
  k["model.heads"] = [](PipelineConfig& c, const std::string& v) { c.model.heads = parse_value<int>(v); };
  k["model.head_dim"] = [](PipelineConfig& c, const std::string& v) { c.model.head_dim = parse_value<int>(v); };
  k["model.ffn_dim"] = [](PipelineConfig& c, const std::string& v) { c.model.ffn_dim = parse_value<int>(v); };
  k["model.dropout"] = [](PipelineConfig& c, const std::string& v) { c.model.dropout = parse_value<double>(v); };
  k["model.max_positions"] = [](PipelineConfig& c, const std::string& v) {
    c.model.max_positions = parse_value<int>(v);
  };
  k["model.tie_embeddings"] = [](PipelineConfig& c, const std::string& v) {
    c.model.tie_embeddings = parse_value<bool>(v);
  };
  k["model.positions"] = [](PipelineConfig&, const std::string& v) {
    if (v != "learned_absolute") throw InvalidArgument("only learned_absolute positions are implemented");
  };

  add_schedule_keys(k, "pretrain", &PipelineConfig::pretrain);
  add_schedule_keys(k, "finetune", &PipelineConfig::finetune);

  k["tasks.pretrain"] = [](PipelineConfig& c, const std::string& v) { c.pretrain_tasks = parse_tasks(v); };
  k["tasks.finetune"] = [](PipelineConfig& c, const std::string& v) { c.finetune_tasks = parse_tasks(v); };
  k["tasks.finetune_from_pretrain"] = set<bool>(&PipelineConfig::finetune_from_pretrain);

  k["eval.beam_size"] = [](PipelineConfig& c, const std::string& v) { c.eval.beam_size = parse_value<int>(v); };
  k["eval.constrained"] = [](PipelineConfig& c, const std::string& v) {
    c.eval.constrained = parse_value<bool>(v);
  };
  k["eval.rerank"] = [](PipelineConfig& c, const std::string& v) { c.eval.rerank = parse_value<bool>(v); };
  k["eval.tasks"] = [](PipelineConfig& c, const std::string& v) { c.eval.tasks = parse_tasks(v); };
  return k;
}

}  // namespace

PipelineConfig load_pipeline_config(const std::filesystem::path& path, Profile profile) {
  PipelineConfig config = PipelineConfig::defaults(profile);
  if (path.empty()) return config;
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ParseError(path.string(), e.line(), e.message());
  }
  const auto keys = config_keys();
  // [run] seed is applied first so explicit per-component seeds could follow it.
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ParseError(path.string(), 0, "key '" + section + "' outside any section");
    }
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      if (full == "run.seed") {
        entries.insert(entries.begin(), {full, value.data()});
      } else {
        entries.emplace_back(full, value.data());
      }
    }
  }
  for (const auto& [full, value] : entries) {
    const auto it = keys.find(full);
    if (it == keys.end()) throw ParseError(path.string(), 0, "unknown config key '" + full + "'");
    try {
      it->second(config, value);
    } catch (const Error& e) {
      throw ParseError(path.string(), 0, full + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

// ---------------------------------------------------------------------------
// Stages

SyntheticDomains make_synthetic_domains(const PipelineConfig& config) {
  SyntheticDomains out;
  SynthConfig target = config.synth;
  target.center_seed = config.synth.center_seed.value_or(config.synth.seed);
  out.target = generate_synthetic(target);
  for (int d = 0; d < config.source_domains; ++d) {
    SynthConfig src = target;
    src.id_prefix = config.synth.id_prefix + "src" + std::to_string(d + 1) + "_";
    src.n_users = config.source_users;
    src.n_items = config.source_items;
    src.seed = target.seed * 1000003ULL + static_cast<std::uint64_t>(d + 1);
    out.sources.push_back(generate_synthetic(src));
  }
  return out;
}

EmbeddingMatrix concat_embeddings(std::span<const EmbeddingMatrix> parts) {
  if (parts.empty()) throw InvalidArgument("nothing to concatenate");
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.modality() != parts[0].modality() || p.dim() != parts[0].dim()) {
      throw InvalidArgument("embedding matrices differ in modality or dimension");
    }
    rows += p.size();
  }
  Matrix vectors(rows, parts[0].dim());
  std::vector<ItemId> ids;
  ids.reserve(rows);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    vectors.middleRows(r, p.size()) = p.vectors();
    r += p.size();
    ids.insert(ids.end(), p.item_ids().begin(), p.item_ids().end());
  }
  return EmbeddingMatrix(parts[0].modality(), std::move(ids), std::move(vectors));
}

InteractionDataset concat_interactions(std::span<const InteractionDataset> parts) {
  InteractionDataset out;
  std::set<UserId> seen;
  for (const auto& p : parts) {
    for (const auto& u : p.users) {
      if (!seen.insert(u.user).second) throw InvalidArgument("user '" + u.user + "' appears in two datasets");
      out.users.push_back(u);
    }
  }
  return out;
}

Tokenization tokenize_items(const QuantTranslator& text, const QuantTranslator& image,
                            const EmbeddingMatrix& text_embeddings, const EmbeddingMatrix& image_embeddings) {
  if (text.modality() != Modality::Text || image.modality() != Modality::Image) {
    throw InvalidArgument("translators must be (text, image)");
  }
  if (text.levels() != image.levels() || text.codebook_size() != image.codebook_size()) {
    throw InvalidArgument("text and image translators must share levels and codebook size");
  }
  const int levels = text.levels();
  const int k = text.codebook_size();
  Tokenization out;
  out.vocab = build_vocabulary(levels, k, kTaskCount);
  auto text_q = quantize_all(text, text_embeddings);
  auto image_q = quantize_all(image, image_embeddings);
  out.text_usage = text_q.usage;
  out.image_usage = image_q.usage;
  spdlog::info("text codes: {} colliding items in {} groups; image codes: {} in {}", text_q.usage.colliding_items,
               text_q.usage.colliding_groups, image_q.usage.colliding_items, image_q.usage.colliding_groups);
  out.codes = merge_modalities(resolve_collisions(text_q.results, k, levels, Modality::Text),
                               resolve_collisions(image_q.results, k, levels, Modality::Image));
  return out;
}

std::vector<TaskExamples> build_tasks(const InteractionDataset& dataset, const Tokenization& tokens,
                                      std::span<const TaskKind> tasks, std::size_t max_history) {
  const auto split = split_leave_one_out(dataset);
  CorpusOptions options;
  options.max_history = max_history;
  std::vector<TaskExamples> out;
  for (TaskKind t : tasks) out.push_back(build_task(t, split, tokens.codes, tokens.vocab, options));
  return out;
}

std::vector<ItemId> dataset_items(const InteractionDataset& dataset) {
  std::set<ItemId> items;
  for (const auto& u : dataset.users) items.insert(u.items.begin(), u.items.end());
  return {items.begin(), items.end()};
}

ModelConfig model_config_for(const PipelineConfig& config, const Vocabulary& vocab) {
  ModelConfig m = config.model;
  m.vocab_size = static_cast<int>(vocab.size());
  const int needed = static_cast<int>(kPromptTokensPerTask + config.max_history * vocab.levels());
  if (m.max_positions < needed) m.max_positions = needed;
  return m;
}

}  // namespace mqlrec

// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// murtree gen | train | eval | score
//
// Diagnostics go to stderr; results go to files under --out. `score` also
// prints the selected cell indices on stdout.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "murtree/murtree.hpp"

namespace fs = std::filesystem;
using namespace murtree;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  std::optional<std::size_t> sample;
  std::optional<std::size_t> change_patches;
};

RunConfig resolve(const Options& o, std::optional<RunConfig> base = std::nullopt) {
  RunConfig c = base.value_or(RunConfig{});
  if (!o.config.empty()) load_config_file(c, o.config);
  for (const auto& kv : o.sets) apply_override(c, kv);
  if (o.seed) c.seed = *o.seed;
  if (o.change_patches) c.data.change_cells = *o.change_patches;
  if (!o.data.empty()) c.data_dir = o.data;
  if (!o.out.empty()) c.out_dir = o.out;
  c.validate();
  return c;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

int cmd_gen(const Options& o) {
  const RunConfig c = resolve(o);
  synth::SceneSpec spec;
  spec.size = c.data.size;
  spec.patch = c.data.patch;
  spec.tree_min = c.data.tree_min;
  spec.tree_max = c.data.tree_max;
  spec.radius_min = c.data.radius_min;
  spec.radius_max = c.data.radius_max;
  spec.lawn_min = c.data.lawn_min;
  spec.lawn_max = c.data.lawn_max;
  spec.change_cells = c.data.change_cells;
  spec.tree_height = c.data.tree_height;
  spec.noise = c.data.noise;
  spec.speckle = c.data.speckle;
  spec.seed = c.seed;
  const auto entries =
      synth::write_dataset(c.out_dir, spec, c.data.count, {c.data.train, c.data.val, c.data.test});
  std::size_t tr = 0, va = 0, te = 0, changed = 0;
  for (const auto& e : entries) {
    tr += e.split == "train";
    va += e.split == "val";
    te += e.split == "test";
    changed += e.changed_cells.size();
  }
  std::cerr << "gen: " << entries.size() << " scenes (train " << tr << ", val " << va << ", test " << te << "), "
            << changed << " changed cells, written to " << c.out_dir << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  std::optional<Checkpoint> resume;
  if (!o.checkpoint.empty()) resume = load_checkpoint(o.checkpoint);
  const RunConfig c = resolve(o, resume ? std::optional(resume->config) : std::nullopt);
  auto train = load_split(c.data_dir, "train");
  const auto val = load_split(c.data_dir, "val");
  if (train.empty()) throw std::runtime_error("dataset " + c.data_dir + " has no training samples");
  fs::create_directories(c.out_dir);
  write_json(fs::path(c.out_dir) / "config.json", portable_config(c));

  ParamStore params = resume ? resume->params : model::init(c, train[0].primary.dim(0), train[0].auxiliary.dim(0));
  Trainer trainer(c, std::move(train), std::move(params), resume ? resume->velocity : ParamStore{},
                  resume ? resume->epoch : 0);
  std::ofstream log(fs::path(c.out_dir) / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
  const fs::path ck = fs::path(c.out_dir) / "checkpoint.mtc";
  while (trainer.epoch() < c.train.epochs) {
    const StepStats s = trainer.run_epoch();
    nlohmann::json line = {{"epoch", trainer.epoch()}, {"loss", s.total}, {"seg", s.seg},
                           {"edge", s.edge},           {"mse", s.mse},    {"kl", s.kl},
                           {"cdm", s.cdm},             {"calibration", s.calibration}};
    if (!val.empty()) line["val"] = to_json(evaluate(val, model_predictor(trainer.params(), c), thread_count(c)), "val");
    log << line.dump() << '\n' << std::flush;
    save_checkpoint(ck, trainer.checkpoint());
    std::cerr << "epoch " << trainer.epoch() << "/" << c.train.epochs << " loss " << s.total << '\n';
  }
  if (trainer.epoch() == 0 || c.train.epochs == 0) save_checkpoint(ck, trainer.checkpoint());
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw std::runtime_error("eval needs --checkpoint");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const RunConfig c = resolve(o, ck.config);
  const auto samples = load_split(c.data_dir, o.split);
  if (samples.empty()) throw std::runtime_error("split '" + o.split + "' of " + c.data_dir + " is empty");
  const EvalReport r = evaluate(samples, model_predictor(ck.params, c), thread_count(c));
  fs::create_directories(c.out_dir);
  write_json(fs::path(c.out_dir) / ("metrics_" + o.split + ".json"), to_json(r, o.split));
  std::cerr << "eval " << o.split << ": miou " << r.metrics.miou << ", iou " << r.metrics.iou << '\n';
  return 0;
}

int cmd_score(const Options& o) {
  if (o.checkpoint.empty()) throw std::runtime_error("score needs --checkpoint");
  if (!o.sample) throw std::runtime_error("score needs --sample");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const RunConfig c = resolve(o, ck.config);
  std::optional<model::Sample> sample;
  for (const auto& e : synth::read_manifest(c.data_dir))
    if (e.id == *o.sample) sample = load_sample(c.data_dir, e);
  if (!sample) throw std::runtime_error("no sample with id " + std::to_string(*o.sample) + " in " + c.data_dir);
  const Detail d = predict_detail(ck.params, c, *sample);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  const std::string id = std::to_string(*o.sample);
  mtf::save(out / ("score_" + id + ".mtf"), d.score);
  pgm::save(out / ("uncertainty_" + id + ".pgm"), d.score);
  pgm::save(out / ("attention_" + id + ".pgm"), d.attention);
  pgm::save(out / ("seg_" + id + ".pgm"), d.prediction.seg_prob);
  pgm::save(out / ("edge_" + id + ".pgm"), d.edge_prob);
  write_json(out / ("selected_" + id + ".json"), nlohmann::json(d.prediction.selected));
  if (d.degenerate_luminance) std::cerr << "warning: sample " << id << " has zero luminance; attention is zero\n";
  for (std::size_t i = 0; i < d.prediction.selected.size(); ++i)
    std::cout << (i ? " " : "") << d.prediction.selected[i];
  std::cout << '\n';
  return 0;
}

void common(CLI::App* app, Options& o) {
  app->add_option("--config", o.config, "JSON config with dotted keys");
  app->add_option("--set", o.sets, "override a config key: key=value")->take_all();
  app->add_option("--seed", o.seed, "random seed");
  app->add_option("--out", o.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"murtree: uncertainty-guided multimodal tree-cover segmentation"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  common(gen, o);
  gen->add_option("--change-patches", o.change_patches, "changed cells per scene");

  auto* train = app.add_subcommand("train", "train a model");
  common(train, o);
  train->add_option("--data", o.data, "dataset directory");
  train->add_option("--checkpoint", o.checkpoint, "resume from this checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  common(eval, o);
  eval->add_option("--data", o.data, "dataset directory");
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--split", o.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));

  auto* score = app.add_subcommand("score", "export uncertainty and attention maps for one sample");
  common(score, o);
  score->add_option("--data", o.data, "dataset directory");
  score->add_option("--checkpoint", o.checkpoint, "checkpoint to use")->required();
  score->add_option("--sample", o.sample, "sample id")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen(o);
    if (train->parsed()) return cmd_train(o);
    if (eval->parsed()) return cmd_eval(o);
    return cmd_score(o);
  } catch (const std::exception& e) {
    std::cerr << "murtree: " << e.what() << '\n';
    return 1;
  }
}

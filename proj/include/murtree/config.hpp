// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration. Serialised as one flat JSON object with dotted keys,
// e.g. {"surm.k": 20, "train.lr": 0.01}. Unknown keys are rejected.
//
// Precedence, lowest first: built-in defaults, the config stored in a
// checkpoint (eval/score only), --config file, --set key=value, dedicated
// flags such as --seed.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

#include "murtree/losses.hpp"
#include "murtree/patch_grid.hpp"

namespace murtree {

struct DataConfig {
  std::size_t count = 200;
  std::size_t size = 64;
  std::size_t patch = 4;
  std::size_t change_cells = 20;
  std::size_t tree_min = 3, tree_max = 6;
  float radius_min = 5.0f, radius_max = 12.0f;
  std::size_t lawn_min = 1, lawn_max = 3;
  float tree_height = 1.0f;
  float noise = 0.05f;
  bool speckle = false;
  double train = 0.7, val = 0.15, test = 0.15;
};

struct ModelConfig {
  std::size_t embed_dim = 32;
  std::size_t latent_dim = 8;
  std::size_t le_hidden = 16;
  std::size_t recon_hidden = 32;
  std::size_t score_hidden = 8;
  std::string score_init = "magnitude";  // or "identity", "negated"
  std::vector<std::size_t> channels{16, 32, 64, 128};
  std::size_t se_ratio = 4;
  std::size_t head_width = 8;
  std::size_t proj_dim = 16;
  std::size_t cdm_stage = 1;  // 1-based encoder stage
  std::size_t gma_units = 2;  // highest-resolution decoder units that receive attention
  float gamma = 2.0f;
};

struct SurmSettings {
  std::size_t k = 20;
  std::size_t samples = 4;
};

struct TrainConfig {
  float lr = 0.01f;
  float momentum = 0.0f;
  std::size_t epochs = 30;
  std::size_t batch = 4;
  float clip_norm = 10.0f;  // global gradient-norm cap before each update; 0 disables
  std::size_t threads = 0;  // 0: MURTREE_THREADS or hardware concurrency
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;
  SurmSettings surm;
  LossWeights loss;
  float calibration = 0.2f;  // weight of the dense KL(A||P) calibration term
  TrainConfig train;
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::string out_dir = "out";

  void validate() const;
};

namespace detail {

using FieldRef = std::variant<std::size_t*, float*, double*, bool*, std::string*, std::vector<std::size_t>*>;

inline std::vector<std::pair<std::string, FieldRef>> fields(RunConfig& c) {
  return {
      {"data.count", &c.data.count},
      {"data.size", &c.data.size},
      {"data.patch", &c.data.patch},
      {"data.change_cells", &c.data.change_cells},
      {"data.tree_min", &c.data.tree_min},
      {"data.tree_max", &c.data.tree_max},
      {"data.radius_min", &c.data.radius_min},
      {"data.radius_max", &c.data.radius_max},
      {"data.lawn_min", &c.data.lawn_min},
      {"data.lawn_max", &c.data.lawn_max},
      {"data.tree_height", &c.data.tree_height},
      {"data.noise", &c.data.noise},
      {"data.speckle", &c.data.speckle},
      {"data.split.train", &c.data.train},
      {"data.split.val", &c.data.val},
      {"data.split.test", &c.data.test},
      {"model.embed_dim", &c.model.embed_dim},
      {"model.latent_dim", &c.model.latent_dim},
      {"model.le_hidden", &c.model.le_hidden},
      {"model.recon_hidden", &c.model.recon_hidden},
      {"model.score_hidden", &c.model.score_hidden},
      {"model.score_init", &c.model.score_init},
      {"model.channels", &c.model.channels},
      {"model.se_ratio", &c.model.se_ratio},
      {"model.head_width", &c.model.head_width},
      {"model.proj_dim", &c.model.proj_dim},
      {"model.cdm_stage", &c.model.cdm_stage},
      {"model.gma_units", &c.model.gma_units},
      {"model.gamma", &c.model.gamma},
      {"surm.k", &c.surm.k},
      {"surm.samples", &c.surm.samples},
      {"loss.seg", &c.loss.seg},
      {"loss.edge", &c.loss.edge},
      {"loss.mse", &c.loss.mse},
      {"loss.kl", &c.loss.kl},
      {"loss.cdm", &c.loss.cdm},
      {"loss.calibration", &c.calibration},
      {"train.lr", &c.train.lr},
      {"train.momentum", &c.train.momentum},
      {"train.epochs", &c.train.epochs},
      {"train.batch", &c.train.batch},
      {"train.clip_norm", &c.train.clip_norm},
      {"train.threads", &c.train.threads},
      {"seed", &c.seed},
      {"paths.data", &c.data_dir},
      {"paths.out", &c.out_dir},
  };
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  nlohmann::json j = nlohmann::json::object();
  for (auto& [key, ref] : detail::fields(copy)) std::visit([&](auto* p) { j[key] = *p; }, ref);
  return j;
}

/// Applies every key of a flat object; throws on unknown keys or wrong types.
inline void apply_config(RunConfig& cfg, const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object with dotted keys");
  auto table = detail::fields(cfg);
  for (const auto& [key, value] : j.items()) {
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    try {
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::size_t>) {
              if (!value.is_number_unsigned()) throw std::invalid_argument("expected a nonnegative integer");
            } else if constexpr (std::is_floating_point_v<T>) {
              if (!value.is_number()) throw std::invalid_argument("expected a number");
            } else if constexpr (std::is_same_v<T, bool>) {
              if (!value.is_boolean()) throw std::invalid_argument("expected true or false");
            } else if constexpr (std::is_same_v<T, std::string>) {
              if (!value.is_string()) throw std::invalid_argument("expected a string");
            }
            *p = value.get<T>();
          },
          it->second);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config key '" + key + "': " + e.what());
    }
  }
}

/// "key=value"; value is parsed as JSON, falling back to a bare string.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override '" + kv + "' is not key=value");
  const std::string key = kv.substr(0, eq), text = kv.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json obj = nlohmann::json::object();
  obj[key] = std::move(value);
  apply_config(cfg, obj);
}

inline void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  apply_config(cfg, j);
}

inline void RunConfig::validate() const {
  const PatchGrid grid(data.size, data.size, data.patch);
  if (data.change_cells > grid.count()) throw std::invalid_argument("data.change_cells exceeds the patch count");
  if (surm.k > grid.count()) throw std::invalid_argument("surm.k exceeds the patch count");
  if (surm.samples == 0) throw std::invalid_argument("surm.samples must be >= 1");
  const auto& ch = model.channels;
  if (ch.empty()) throw std::invalid_argument("model.channels is empty");
  for (std::size_t s = 1; s < ch.size(); ++s)
    if (ch[s] != 2 * ch[s - 1]) throw std::invalid_argument("model.channels must double at every stage");
  const std::size_t down = std::size_t{1} << (ch.size() - 1);
  if (grid.rows() % down != 0) {
    throw std::invalid_argument("patch grid of " + std::to_string(grid.rows()) + " rows cannot be halved " +
                                std::to_string(ch.size() - 1) + " times");
  }
  if (model.cdm_stage < 1 || model.cdm_stage > ch.size()) throw std::invalid_argument("model.cdm_stage out of range");
  if (model.gma_units > ch.size() - 1) throw std::invalid_argument("model.gma_units exceeds the decoder depth");
  if (model.score_init != "magnitude" && model.score_init != "identity" && model.score_init != "negated") {
    throw std::invalid_argument("model.score_init must be 'magnitude', 'identity' or 'negated'");
  }
  if (!(model.gamma > 1.0f)) throw std::invalid_argument("model.gamma must exceed 1");
  if (!(train.lr > 0.0f)) throw std::invalid_argument("train.lr must be positive");
  if (!(train.clip_norm >= 0.0f)) throw std::invalid_argument("train.clip_norm must be >= 0");
  if (train.batch == 0) throw std::invalid_argument("train.batch must be >= 1");
  if (!(calibration >= 0.0f)) throw std::invalid_argument("loss.calibration must be >= 0");
  loss.validate();
}

}  // namespace murtree

// SPDX-FileCopyrightText: 2026 The murtree Authors
// SPDX-License-Identifier: Apache-2.0

// Training, evaluation and checkpoints.
//
// Per-sample gradients are computed on separate graphs (in parallel when
// threads allow) and summed in sample order, so results do not depend on
// the thread count.

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "murtree/config.hpp"
#include "murtree/losses.hpp"
#include "murtree/model.hpp"
#include "murtree/mtf.hpp"
#include "murtree/synth.hpp"

namespace murtree {

// ------------------------------------------------------------ data

inline model::Sample load_sample(const std::filesystem::path& dir, const synth::ManifestEntry& e) {
  return {e.id,
          mtf::load(dir / e.primary_path),
          mtf::load(dir / e.auxiliary_path),
          mtf::load(dir / e.label_path),
          mtf::load(dir / e.edge_path),
          e.changed_cells};
}

/// Samples of one split ("train", "val", "test") in manifest order.
inline std::vector<model::Sample> load_split(const std::filesystem::path& dir, const std::string& split) {
  std::vector<model::Sample> out;
  for (const auto& e : synth::read_manifest(dir))
    if (e.split == split) out.push_back(load_sample(dir, e));
  return out;
}

// ------------------------------------------------------------ threads

inline std::size_t thread_count(const RunConfig& c) {
  if (c.train.threads > 0) return c.train.threads;
  if (const char* env = std::getenv("MURTREE_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return v;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// fn(i) for i in [0, n); the first exception is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ------------------------------------------------------------ training

struct StepStats {
  double total = 0, seg = 0, edge = 0, mse = 0, kl = 0, cdm = 0, calibration = 0;

  StepStats& operator+=(const StepStats& o) {
    total += o.total;
    seg += o.seg;
    edge += o.edge;
    mse += o.mse;
    kl += o.kl;
    cdm += o.cdm;
    calibration += o.calibration;
    return *this;
  }
  [[nodiscard]] StepStats scaled(double s) const {
    return {total * s, seg * s, edge * s, mse * s, kl * s, cdm * s, calibration * s};
  }
};

struct SampleGrad {
  ParamStore grads;
  StepStats stats;
};

inline SampleGrad sample_gradient(const ParamStore& params, const RunConfig& c, const model::Sample& s,
                                  std::uint64_t noise_seed) {
  Graph g;
  ParamBinder p(g, params);
  const model::Output o = model::forward(g, p, c, s.primary, s.auxiliary, noise_seed);
  const model::Losses l = model::losses(g, o, s, c);
  g.backward(l.total);
  SampleGrad r{p.gradients(),
               {g.value(l.total).item(), g.value(l.terms.seg).item(), g.value(l.terms.edge).item(),
                g.value(l.terms.mse).item(), g.value(l.terms.kl).item(), g.value(l.terms.cdm).item(),
                g.value(o.calibration).item()}};
  return r;
}

struct Checkpoint {
  RunConfig config;
  std::size_t epoch = 0;  // completed epochs
  ParamStore params;
  ParamStore velocity;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<model::Sample> train, ParamStore params, ParamStore velocity = {},
          std::size_t epoch = 0)
      : cfg_(std::move(cfg)),
        train_(std::move(train)),
        params_(std::move(params)),
        velocity_(std::move(velocity)),
        epoch_(epoch) {
    if (train_.empty()) throw std::invalid_argument("training split is empty");
  }

  /// Sample order of an epoch: a seeded shuffle of the training split.
  [[nodiscard]] std::vector<std::size_t> order(std::size_t epoch) const {
    std::vector<std::size_t> o(train_.size());
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = i;
    const Stream s = Stream(cfg_.seed).sub("order").sub(epoch);
    for (std::size_t i = o.size(); i > 1; --i) std::swap(o[i - 1], o[s.below(i, i)]);
    return o;
  }

  [[nodiscard]] std::size_t batches() const { return (train_.size() + cfg_.train.batch - 1) / cfg_.train.batch; }

  /// One SGD update on batch `b` of the current epoch; returns the batch-mean losses.
  StepStats step(std::size_t b) {
    const auto ord = order(epoch_);
    const std::size_t lo = b * cfg_.train.batch, hi = std::min(lo + cfg_.train.batch, ord.size());
    if (lo >= hi) throw std::out_of_range("batch index past the end of the epoch");
    std::vector<SampleGrad> parts(hi - lo);
    const Stream noise = Stream(cfg_.seed).sub("noise").sub(epoch_);
    parallel_for(parts.size(), thread_count(cfg_), [&](std::size_t i) {
      const model::Sample& s = train_[ord[lo + i]];
      parts[i] = sample_gradient(params_, cfg_, s, noise.bits(s.id));
    });
    ParamStore sum = std::move(parts[0].grads);
    StepStats stats = parts[0].stats;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      for (auto& [name, t] : sum) t += parts[i].grads.at(name);
      stats += parts[i].stats;
    }
    const float inv = 1.0f / static_cast<float>(parts.size());
    for (auto& [name, t] : sum)
      for (float& v : t.data()) v *= inv;
    clip_grad_norm(sum, cfg_.train.clip_norm);
    sgd_step(params_, sum, cfg_.train.lr, cfg_.train.momentum, &velocity_);
    return stats.scaled(1.0 / static_cast<double>(parts.size()));
  }

  /// Runs every batch of the current epoch; returns sample-weighted mean losses.
  StepStats run_epoch() {
    StepStats acc;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < batches(); ++b) {
      const std::size_t n = std::min(cfg_.train.batch, train_.size() - b * cfg_.train.batch);
      acc += step(b).scaled(static_cast<double>(n));
      seen += n;
    }
    ++epoch_;
    return acc.scaled(1.0 / static_cast<double>(seen));
  }

  [[nodiscard]] std::size_t epoch() const noexcept { return epoch_; }
  [[nodiscard]] const ParamStore& params() const noexcept { return params_; }
  [[nodiscard]] const RunConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] Checkpoint checkpoint() const { return {cfg_, epoch_, params_, velocity_}; }

 private:
  RunConfig cfg_;
  std::vector<model::Sample> train_;
  ParamStore params_;
  ParamStore velocity_;
  std::size_t epoch_;
};

// ------------------------------------------------------------ evaluation

struct Prediction {
  Tensor seg_prob;                    // [1,H,W]
  std::vector<std::size_t> selected;  // uncertain cells
};

using Predictor = std::function<Prediction(const model::Sample&)>;

struct Detail {
  Prediction prediction;
  Tensor score;      // ScoreMap over the grid, [rows, cols]
  Tensor attention;  // [1,H,W]
  Tensor edge_prob;  // [1,H,W]
  bool degenerate_luminance = false;
};

inline std::uint64_t eval_seed(const RunConfig& c, std::size_t id) { return Stream(c.seed).sub("eval").bits(id); }

inline Detail predict_detail(const ParamStore& params, const RunConfig& c, const model::Sample& s) {
  Graph g;
  ParamBinder p(g, params, false);
  const model::Output o = model::forward(g, p, c, s.primary, s.auxiliary, eval_seed(c, s.id));
  const PatchGrid& grid = o.surm.primary.grid;
  return {{g.value(o.seg.seg_prob), o.surm.selection.selected},
          o.surm.selection.score.reshaped(Shape{grid.rows(), grid.cols()}),
          g.value(o.attention.map),
          g.value(o.seg.edge_prob),
          o.attention.degenerate};
}

inline Predictor model_predictor(const ParamStore& params, const RunConfig& c) {
  return [&params, c](const model::Sample& s) { return predict_detail(params, c, s).prediction; };
}

struct EvalReport {
  std::size_t scenes = 0;
  ConfusionCounts counts;
  Metrics metrics;
  std::optional<double> detection_recall;     // mean over scenes with changed cells
  std::optional<double> detection_precision;  // mean over scenes with a nonempty selection
};

inline EvalReport evaluate(const std::vector<model::Sample>& samples, const Predictor& predict, std::size_t threads) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty split");
  std::vector<Prediction> preds(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) { preds[i] = predict(samples[i]); });
  EvalReport r;
  r.scenes = samples.size();
  double rec = 0, prec = 0;
  std::size_t nrec = 0, nprec = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    r.counts += confusion(preds[i].seg_prob, s.label);
    std::size_t hit = 0;
    for (std::size_t cell : preds[i].selected)
      hit += std::binary_search(s.changed.begin(), s.changed.end(), cell) ? 1 : 0;
    if (!s.changed.empty()) {
      rec += static_cast<double>(hit) / static_cast<double>(s.changed.size());
      ++nrec;
    }
    if (!preds[i].selected.empty()) {
      prec += static_cast<double>(hit) / static_cast<double>(preds[i].selected.size());
      ++nprec;
    }
  }
  r.metrics = metrics(r.counts);
  if (nrec) r.detection_recall = rec / static_cast<double>(nrec);
  if (nprec) r.detection_precision = prec / static_cast<double>(nprec);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r, const std::string& split) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"split", split},
          {"scenes", r.scenes},
          {"miou", r.metrics.miou},
          {"iou", r.metrics.iou},
          {"f1", r.metrics.f1},
          {"precision", r.metrics.precision},
          {"recall", r.metrics.recall},
          {"detection_recall", opt(r.detection_recall)},
          {"detection_precision", opt(r.detection_precision)},
          {"confusion", {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}}}};
}

// ------------------------------------------------------------ checkpoints
//
// "MTC1", u32 completed epochs, u32 config length, config JSON (paths
// omitted), u32 entry count, then per entry: u32 name length, name, MTF1
// tensor. Velocity buffers are stored under "velocity/<name>".

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw std::runtime_error("checkpoint truncated");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::string get_string(std::istream& is, std::uint32_t n) {
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint truncated");
  return s;
}

inline constexpr const char* kVelocityPrefix = "velocity/";

}  // namespace detail

inline nlohmann::json portable_config(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j.erase("paths.data");
  j.erase("paths.out");
  return j;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
  f.write("MTC1", 4);
  detail::put_u32(f, static_cast<std::uint32_t>(ck.epoch));
  const std::string cfg = portable_config(ck.config).dump();
  detail::put_u32(f, static_cast<std::uint32_t>(cfg.size()));
  f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  detail::put_u32(f, static_cast<std::uint32_t>(ck.params.count() + ck.velocity.count()));
  auto entry = [&](const std::string& name, const Tensor& t) {
    detail::put_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    mtf::write(f, t);
  };
  for (const auto& [name, t] : ck.params) entry(name, t);
  for (const auto& [name, t] : ck.velocity) entry(detail::kVelocityPrefix + name, t);
  if (!f) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  if (detail::get_string(f, 4) != "MTC1") throw std::runtime_error(path.string() + " is not a murtree checkpoint");
  Checkpoint ck;
  ck.epoch = detail::get_u32(f);
  apply_config(ck.config, nlohmann::json::parse(detail::get_string(f, detail::get_u32(f))));
  const std::uint32_t n = detail::get_u32(f);
  const std::string prefix = detail::kVelocityPrefix;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = detail::get_string(f, detail::get_u32(f));
    Tensor t = mtf::read(f);
    if (name.rfind(prefix, 0) == 0) ck.velocity.set(name.substr(prefix.size()), std::move(t));
    else ck.params.set(name, std::move(t));
  }
  return ck;
}

}  // namespace murtree

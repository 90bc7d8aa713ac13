#pragma once

// Training protocol: mini-batch Adam with rotation augmentation, early
// stopping on validation loss, k-fold cross-validation and grid search.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "colony/adam.hpp"
#include "colony/augment.hpp"
#include "colony/dishgen.hpp"
#include "colony/evalkit.hpp"
#include "colony/losses.hpp"
#include "colony/unet.hpp"

namespace colony {

enum class LossKind { weighted_ce, ce_soft_dice };

inline const char* to_string(LossKind k) {
  return k == LossKind::weighted_ce ? "weighted_ce" : "ce_soft_dice";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "weighted_ce") return LossKind::weighted_ce;
  if (s == "ce_soft_dice") return LossKind::ce_soft_dice;
  throw ConfigError("loss", "must be 'weighted_ce' or 'ce_soft_dice' (got '" + s + "')");
}

struct RunConfig {
  UNetConfig unet;
  LossKind loss = LossKind::weighted_ce;
  ClassWeights weights;  // weighted_ce
  double alpha = 1.0;    // ce_soft_dice: CE share
  double beta = 1.0;     // ce_soft_dice: DICE share
  double lr = 1e-3;
  int batch_size = 8;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 1;
  int image_size = 128;
  bool augment = true;
  bool shuffle_labels = false;  // sanity control: train against permuted masks

  void validate() const {
    unet.validate();
    if (loss == LossKind::weighted_ce) weights.validate();
    if (!(alpha >= 0) || !(beta >= 0) || (alpha == 0 && beta == 0)) {
      throw ConfigError("alpha", "alpha and beta must be >= 0 and not both zero");
    }
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("lr", "must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs", "must be >= 1");
    if (patience < 1) throw ConfigError("patience", "must be >= 1");
    if (image_size < 1 || image_size % unet.required_multiple() != 0) {
      throw ConfigError("image_size", "must be a positive multiple of " +
                                          std::to_string(unet.required_multiple()) +
                                          " for depth " + std::to_string(unet.depth));
    }
  }

  std::string label() const {
    std::ostringstream os;
    os << "depth=" << unet.depth << " bn=" << (unet.batchnorm ? "on" : "off")
       << " loss=" << to_string(loss) << " lr=" << lr;
    return os.str();
  }
};

struct Sample {
  std::string id;
  RgbImage image;
  LabelMask mask;
};

template <typename T>
LossResult<T> compute_loss(const RunConfig& cfg, const Tensor<T>& probs,
                           std::span<const LabelMask> labels) {
  if (cfg.loss == LossKind::weighted_ce) return weighted_ce(probs, labels, cfg.weights);
  return ce_soft_dice(probs, labels, cfg.alpha, cfg.beta);
}

// ---------------------------------------------------------------------------
// Early stopping

/// Tracks the best (lowest) monitored value; signals a stop once `patience`
/// consecutive updates fail to improve on it.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience", "must be >= 1");
  }

  /// Returns true when training should stop after this epoch.
  bool update(double value) {
    if (value < best_) {
      best_ = value;
      best_epoch_ = epoch_;
      bad_epochs_ = 0;
    } else {
      ++bad_epochs_;
    }
    ++epoch_;
    return bad_epochs_ >= patience_;
  }

  bool improved_last() const { return bad_epochs_ == 0; }
  int best_epoch() const { return best_epoch_; }
  double best() const { return best_; }
  int bad_epochs() const { return bad_epochs_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
  int epoch_ = 0;
  int bad_epochs_ = 0;
};

// ---------------------------------------------------------------------------
// History

enum class StopReason { max_epochs, early_stopping, diverged, requested };

inline const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::max_epochs: return "max_epochs";
    case StopReason::early_stopping: return "early_stopping";
    case StopReason::diverged: return "diverged";
    case StopReason::requested: return "requested";
  }
  return "?";
}

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_map = std::numeric_limits<double>::quiet_NaN();
  friend bool operator==(const EpochRecord& a, const EpochRecord& b) {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return a.epoch == b.epoch && same(a.train_loss, b.train_loss) &&
           same(a.val_loss, b.val_loss) && same(a.val_map, b.val_map);
  }
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  StopReason stop_reason = StopReason::max_epochs;

  const EpochRecord& best() const { return epochs.at(static_cast<std::size_t>(best_epoch)); }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "epoch,train_loss,val_loss,val_map\n";
    for (const auto& e : epochs) {
      os << e.epoch << "," << e.train_loss << ",";
      if (!std::isnan(e.val_loss)) os << e.val_loss;
      os << ",";
      if (!std::isnan(e.val_map)) os << e.val_map;
      os << "\n";
    }
    return os.str();
  }

  friend bool operator==(const TrainingHistory&, const TrainingHistory&) = default;
};

// ---------------------------------------------------------------------------
// Inference helpers

using Log = std::function<void(const std::string&)>;
/// Called after every completed epoch; returning true ends training.
using EpochCallback = std::function<bool(const EpochRecord&)>;

/// Runs the model in infer mode over `samples` in chunks of `batch_size`.
inline std::vector<LabelMask> predict(UNet<float>& model, std::span<const RgbImage* const> images,
                                      int batch_size = 8) {
  std::vector<LabelMask> out;
  for (std::size_t i = 0; i < images.size(); i += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min<std::size_t>(batch_size, images.size() - i);
    const auto x = images_to_tensor<float>(images.subspan(i, n));
    auto masks = predict_mask(model.forward(x, Mode::infer));
    for (auto& m : masks) out.push_back(std::move(m));
  }
  return out;
}

inline std::vector<LabelMask> predict(UNet<float>& model, std::span<const Sample> samples,
                                      int batch_size = 8) {
  std::vector<const RgbImage*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s.image);
  return predict(model, std::span<const RgbImage* const>(ptrs), batch_size);
}

struct Validation {
  double loss = 0;
  double map = 0;
  double pixel_accuracy = 0;
};

inline Validation validate_model(UNet<float>& model, std::span<const Sample> samples,
                                 const RunConfig& cfg) {
  Validation v;
  double loss_sum = 0;
  std::size_t correct = 0, total = 0;
  std::vector<InstanceSet> pred_inst, gt_inst;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t i = 0; i < samples.size(); i += bs) {
    const std::size_t n = std::min(bs, samples.size() - i);
    std::vector<const RgbImage*> imgs;
    std::vector<LabelMask> masks;
    for (std::size_t k = 0; k < n; ++k) {
      imgs.push_back(&samples[i + k].image);
      masks.push_back(samples[i + k].mask);
    }
    const auto x = images_to_tensor<float>(imgs);
    const auto& probs = model.forward(x, Mode::infer);
    loss_sum += compute_loss<float>(cfg, probs, masks).loss * static_cast<double>(n);
    const auto pred = predict_mask(probs);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t p = 0; p < pred[k].size(); ++p) {
        correct += pred[k].data()[p] == masks[k].data()[p];
      }
      total += pred[k].size();
      pred_inst.push_back(extract_instances(pred[k]));
      gt_inst.push_back(extract_instances(masks[k]));
    }
  }
  if (!samples.empty()) {
    v.loss = loss_sum / static_cast<double>(samples.size());
    v.map = map_over_thresholds(pred_inst, gt_inst);
    v.pixel_accuracy = static_cast<double>(correct) / static_cast<double>(total);
  }
  return v;
}

inline MetricsReport evaluate_model(UNet<float>& model, std::span<const Sample> samples,
                                    std::string dataset, int batch_size = 8) {
  const auto pred = predict(model, samples, batch_size);
  std::vector<LabelMask> gt;
  std::vector<std::string> ids;
  for (const auto& s : samples) {
    gt.push_back(s.mask);
    ids.push_back(s.id);
  }
  return evaluate_masks(pred, gt, ids, std::move(dataset));
}

// ---------------------------------------------------------------------------
// Training loop

/// Trains `model` in place. With a non-empty validation set, training stops
/// after `patience` epochs without a lower validation loss and the model is
/// restored to the best epoch's weights. With an empty validation set it runs
/// `max_epochs` and keeps the final weights.
inline TrainingHistory train(UNet<float>& model, std::span<const Sample> train_set,
                             std::span<const Sample> val_set, const RunConfig& cfg,
                             const Log& log = {}, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  for (const auto& s : train_set) {
    model.check_input(Shape{1, 3, s.image.height(), s.image.width()});
  }

  std::mt19937_64 rng(derive_seed(cfg.seed, 0x7EA1ull));
  std::vector<const LabelMask*> targets;
  for (const auto& s : train_set) targets.push_back(&s.mask);
  if (cfg.shuffle_labels) {
    std::mt19937_64 perm_rng(derive_seed(cfg.seed, 0x5F1Full));
    std::vector<std::size_t> perm(targets.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), perm_rng);
    // Rotate by one so no image keeps its own mask when n > 1.
    if (perm.size() > 1) std::rotate(perm.begin(), perm.begin() + 1, perm.end());
    std::vector<const LabelMask*> shuffled;
    for (auto p : perm) shuffled.push_back(&train_set[p].mask);
    targets = std::move(shuffled);
  }

  Adam<float> adam(AdamOptions{cfg.lr});
  EarlyStopping stopper(cfg.patience);
  TrainingHistory history;
  std::vector<Tensor<float>> best_state = model.state();
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    bool diverged = false;
    for (std::size_t i = 0; i < order.size() && !diverged; i += bs) {
      const std::size_t n = std::min(bs, order.size() - i);
      std::vector<RgbImage> images;
      std::vector<LabelMask> masks;
      for (std::size_t k = 0; k < n; ++k) {
        const auto idx = order[i + k];
        if (cfg.augment) {
          auto [img, m] = random_rotate(train_set[idx].image, *targets[idx], rng);
          images.push_back(std::move(img));
          masks.push_back(std::move(m));
        } else {
          images.push_back(train_set[idx].image);
          masks.push_back(*targets[idx]);
        }
      }
      std::vector<const RgbImage*> ptrs;
      for (const auto& im : images) ptrs.push_back(&im);
      const auto x = images_to_tensor<float>(ptrs);
      const auto& probs = model.forward(x, Mode::train);
      const auto loss = compute_loss<float>(cfg, probs, masks);
      if (!std::isfinite(loss.loss)) {
        diverged = true;
        break;
      }
      model.graph().zero_grad();
      model.backward_from_logits(loss.grad);
      adam.step(model.graph());
      loss_sum += loss.loss * static_cast<double>(n);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = diverged ? std::numeric_limits<double>::quiet_NaN()
                              : loss_sum / static_cast<double>(order.size());
    if (diverged) {
      history.epochs.push_back(rec);
      history.stop_reason = StopReason::diverged;
      if (log) log("epoch " + std::to_string(epoch) + ": non-finite loss, aborting");
      break;
    }

    bool stop = false;
    if (!val_set.empty()) {
      const Validation v = validate_model(model, val_set, cfg);
      rec.val_loss = v.loss;
      rec.val_map = v.map;
      if (!std::isfinite(v.loss)) {
        history.epochs.push_back(rec);
        history.stop_reason = StopReason::diverged;
        break;
      }
      stop = stopper.update(v.loss);
      if (stopper.improved_last()) {
        best_state = model.state();
        history.best_epoch = epoch;
      }
    } else {
      best_state = model.state();
      history.best_epoch = epoch;
    }
    history.epochs.push_back(rec);
    if (log) {
      std::ostringstream os;
      os << "epoch " << epoch << " train_loss=" << rec.train_loss;
      if (!val_set.empty()) os << " val_loss=" << rec.val_loss << " val_map=" << rec.val_map;
      log(os.str());
    }
    if (stop) {
      history.stop_reason = StopReason::early_stopping;
      break;
    }
    if (on_epoch && on_epoch(rec)) {
      history.stop_reason = StopReason::requested;
      break;
    }
  }
  model.set_state(best_state);
  return history;
}

// ---------------------------------------------------------------------------
// Cross-validation and grid search

template <typename Id>
struct Fold {
  std::vector<Id> train;
  std::vector<Id> val;
};

/// Deterministic shuffle, then k contiguous folds whose sizes differ by at
/// most one. Fold i validates on chunk i and trains on the rest.
template <typename Id>
std::vector<Fold<Id>> kfold_split(std::vector<Id> ids, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("k", "must be >= 2");
  if (ids.size() < static_cast<std::size_t>(k)) {
    throw ConfigError("k", "dataset has " + std::to_string(ids.size()) +
                               " items, fewer than k=" + std::to_string(k));
  }
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t n = ids.size(), ku = static_cast<std::size_t>(k);
  std::vector<Fold<Id>> folds(ku);
  std::size_t start = 0;
  for (std::size_t f = 0; f < ku; ++f) {
    const std::size_t len = n / ku + (f < n % ku ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (i >= start && i < start + len) {
        folds[f].val.push_back(ids[i]);
      } else {
        folds[f].train.push_back(ids[i]);
      }
    }
    start += len;
  }
  return folds;
}

/// depth {2,4,6} x batchnorm {off,on} x loss {weighted_ce, ce_soft_dice} x
/// lr {1e-3, 1e-4, 1e-5}, other fields copied from `base`.
inline std::vector<RunConfig> default_grid(const RunConfig& base) {
  std::vector<RunConfig> grid;
  for (int depth : {2, 4, 6}) {
    for (bool bn : {false, true}) {
      for (LossKind loss : {LossKind::weighted_ce, LossKind::ce_soft_dice}) {
        for (double lr : {1e-3, 1e-4, 1e-5}) {
          RunConfig c = base;
          c.unet.depth = depth;
          c.unet.batchnorm = bn;
          c.loss = loss;
          c.lr = lr;
          grid.push_back(c);
        }
      }
    }
  }
  return grid;
}

struct GridEntry {
  std::size_t index = 0;  // position in the input grid
  RunConfig config;
  double mean_map = 0;
  std::vector<double> fold_maps;
  std::vector<int> fold_best_epochs;
  int diverged_folds = 0;
};

struct SearchResult {
  std::vector<GridEntry> ranked;  // descending mean validation mAP
  int retrain_epochs = 0;
  TrainingHistory final_history;
};

/// Seed for one (config, fold) job; fold index k means the final retrain.
inline std::uint64_t job_seed(std::uint64_t seed, std::size_t config_index, std::size_t fold) {
  return derive_seed(derive_seed(seed, config_index), fold);
}

/// Runs k-fold CV for every config, ranks by mean validation mAP (at each
/// fold's best epoch), then retrains the winner on the full set for the mean
/// of its folds' best-epoch counts. The retrained model is written to
/// `winner`.
inline SearchResult grid_search(std::span<const RunConfig> grid, std::span<const Sample> dataset,
                                int k, std::uint64_t seed, UNet<float>* winner = nullptr,
                                const Log& log = {}) {
  if (grid.empty()) throw ConfigError("grid", "must contain at least one config");
  std::vector<std::size_t> ids(dataset.size());
  std::iota(ids.begin(), ids.end(), 0);
  const auto folds = kfold_split(ids, k, seed);

  SearchResult result;
  for (std::size_t ci = 0; ci < grid.size(); ++ci) {
    GridEntry entry;
    entry.index = ci;
    entry.config = grid[ci];
    for (std::size_t f = 0; f < folds.size(); ++f) {
      std::vector<Sample> tr, va;
      for (auto i : folds[f].train) tr.push_back(dataset[i]);
      for (auto i : folds[f].val) va.push_back(dataset[i]);
      RunConfig cfg = grid[ci];
      cfg.seed = job_seed(seed, ci, f);
      UNet<float> model(cfg.unet, cfg.seed);
      const auto hist = train(model, tr, va, cfg);
      double fold_map = 0;
      int best = 0;
      if (hist.best_epoch >= 0) {
        fold_map = hist.best().val_map;
        best = hist.best_epoch;
      }
      if (hist.stop_reason == StopReason::diverged) ++entry.diverged_folds;
      entry.fold_maps.push_back(fold_map);
      entry.fold_best_epochs.push_back(best);
      if (log) {
        std::ostringstream os;
        os << "config " << ci << " [" << grid[ci].label() << "] fold " << f
           << ": val mAP " << fold_map << " (best epoch " << best << ", "
           << to_string(hist.stop_reason) << ")";
        log(os.str());
      }
    }
    entry.mean_map = std::accumulate(entry.fold_maps.begin(), entry.fold_maps.end(), 0.0) /
                     static_cast<double>(entry.fold_maps.size());
    result.ranked.push_back(std::move(entry));
  }
  std::stable_sort(result.ranked.begin(), result.ranked.end(),
                   [](const GridEntry& a, const GridEntry& b) { return a.mean_map > b.mean_map; });

  if (winner) {
    const GridEntry& top = result.ranked.front();
    double mean_best = 0;
    for (int e : top.fold_best_epochs) mean_best += e + 1;
    mean_best /= static_cast<double>(top.fold_best_epochs.size());
    RunConfig cfg = top.config;
    cfg.seed = job_seed(seed, top.index, folds.size());
    cfg.max_epochs = std::max(1, static_cast<int>(std::lround(mean_best)));
    result.retrain_epochs = cfg.max_epochs;
    *winner = UNet<float>(cfg.unet, cfg.seed);
    result.final_history = train(*winner, dataset, {}, cfg);
    if (log) {
      log("retrained winner [" + cfg.label() + "] on " + std::to_string(dataset.size()) +
          " images for " + std::to_string(cfg.max_epochs) + " epochs");
    }
  }
  return result;
}

}  // namespace colony

#pragma once

// Instance extraction, colony counting and segmentation/detection metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "colony/mask.hpp"

namespace colony {

/// One colony instance: a 4-connected set of same-kind pixels.
struct Instance {
  PixelClass kind = PixelClass::bvg_plus;
  std::vector<std::size_t> pixels;  // flat indices y*w + x, ascending
  int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
};

struct InstanceSet {
  int height = 0, width = 0;
  std::vector<Instance> instances;

  std::size_t count(PixelClass kind) const {
    return static_cast<std::size_t>(std::count_if(
        instances.begin(), instances.end(),
        [&](const Instance& i) { return i.kind == kind; }));
  }
};

/// 4-connected components over pixels labeled `kind`. Every other label
/// (including border) separates components. Instances are ordered by their
/// first pixel in raster order.
inline InstanceSet connected_components(const LabelMask& mask, PixelClass kind) {
  const int h = mask.height(), w = mask.width();
  InstanceSet set{h, w, {}};
  const auto target = static_cast<std::uint8_t>(kind);
  std::vector<bool> seen(mask.size(), false);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (seen[start] || mask.data()[start] != target) continue;
    Instance inst;
    inst.kind = kind;
    inst.min_x = w;
    inst.min_y = h;
    seen[start] = true;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      inst.pixels.push_back(p);
      const int y = static_cast<int>(p / w), x = static_cast<int>(p % w);
      inst.min_x = std::min(inst.min_x, x);
      inst.max_x = std::max(inst.max_x, x);
      inst.min_y = std::min(inst.min_y, y);
      inst.max_y = std::max(inst.max_y, y);
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (!mask.inside(ny[k], nx[k])) continue;
        const std::size_t q = static_cast<std::size_t>(ny[k]) * w + nx[k];
        if (!seen[q] && mask.data()[q] == target) {
          seen[q] = true;
          stack.push_back(q);
        }
      }
    }
    std::sort(inst.pixels.begin(), inst.pixels.end());
    set.instances.push_back(std::move(inst));
  }
  return set;
}

/// bvg+ instances followed by bvg- instances.
inline InstanceSet extract_instances(const LabelMask& mask) {
  InstanceSet all = connected_components(mask, PixelClass::bvg_plus);
  InstanceSet minus = connected_components(mask, PixelClass::bvg_minus);
  for (auto& i : minus.instances) all.instances.push_back(std::move(i));
  return all;
}

struct ColonyCounts {
  int bvg_plus = 0;
  int bvg_minus = 0;
  friend bool operator==(const ColonyCounts&, const ColonyCounts&) = default;
};

inline ColonyCounts count_colonies(const LabelMask& mask) {
  return {static_cast<int>(connected_components(mask, PixelClass::bvg_plus).instances.size()),
          static_cast<int>(connected_components(mask, PixelClass::bvg_minus).instances.size())};
}

/// Mean absolute difference between per-image counts.
inline double mae(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("mae: " + std::to_string(pred.size()) +
                                " predictions vs " + std::to_string(gt.size()) +
                                " ground-truth counts");
  }
  if (pred.empty()) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred[i] - gt[i]);
  return sum / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Pixel precision / recall

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  /// Empty denominators give nullopt (undefined), not 0.
  std::optional<double> precision() const {
    if (tp + fp == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  std::optional<double> recall() const {
    if (tp + fn == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  }
};

inline Confusion pixel_confusion(const LabelMask& pred, const LabelMask& gt,
                                 PixelClass kind) {
  if (pred.height() != gt.height() || pred.width() != gt.width()) {
    throw ShapeError("pixel_pr: mask dimensions differ");
  }
  const auto k = static_cast<std::uint8_t>(kind);
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data()[i] == k, g = gt.data()[i] == k;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  return c;
}

struct PrecisionRecall {
  std::optional<double> precision;
  std::optional<double> recall;
};

inline PrecisionRecall pixel_pr(const LabelMask& pred, const LabelMask& gt,
                                PixelClass kind) {
  const Confusion c = pixel_confusion(pred, gt, kind);
  return {c.precision(), c.recall()};
}

// ---------------------------------------------------------------------------
// Instance matching

inline double instance_iou(std::span<const std::size_t> a,
                           std::span<const std::size_t> b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t inter = 0;
  auto i = a.begin();
  auto j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++inter;
      ++i;
      ++j;
    }
  }
  return static_cast<double>(inter) /
         static_cast<double>(a.size() + b.size() - inter);
}

struct IouPair {
  std::size_t pred = 0, gt = 0;
  double iou = 0;
};

/// All same-kind (pred, gt) pairs with non-zero overlap, sorted by descending
/// IoU, ties by (gt index, pred index).
inline std::vector<IouPair> overlapping_pairs(const InstanceSet& pred,
                                              const InstanceSet& gt) {
  std::vector<IouPair> pairs;
  if (pred.instances.empty() || gt.instances.empty()) return pairs;
  const std::size_t npx = static_cast<std::size_t>(gt.height) * gt.width;
  constexpr std::size_t kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> owner(npx, kNone);
  for (std::size_t g = 0; g < gt.instances.size(); ++g) {
    for (auto p : gt.instances[g].pixels) owner[p] = g;
  }
  for (std::size_t p = 0; p < pred.instances.size(); ++p) {
    const auto& pi = pred.instances[p];
    std::vector<std::size_t> touched;
    for (auto px : pi.pixels) {
      if (px < npx && owner[px] != kNone) touched.push_back(owner[px]);
    }
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
    for (auto g : touched) {
      if (gt.instances[g].kind != pi.kind) continue;
      pairs.push_back({p, g, instance_iou(pi.pixels, gt.instances[g].pixels)});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const IouPair& a, const IouPair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.gt != b.gt) return a.gt < b.gt;
    return a.pred < b.pred;
  });
  return pairs;
}

struct MatchCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
  friend bool operator==(const MatchCounts&, const MatchCounts&) = default;
};

inline MatchCounts match_pairs(const std::vector<IouPair>& pairs, std::size_t n_pred,
                               std::size_t n_gt, double threshold) {
  std::vector<bool> pred_used(n_pred, false), gt_used(n_gt, false);
  MatchCounts m;
  for (const auto& pr : pairs) {
    if (pr.iou < threshold) break;
    if (pred_used[pr.pred] || gt_used[pr.gt]) continue;
    pred_used[pr.pred] = gt_used[pr.gt] = true;
    ++m.tp;
  }
  m.fp = n_pred - m.tp;
  m.fn = n_gt - m.tp;
  return m;
}

/// Greedy descending-IoU matching of same-kind instances with IoU >= t.
inline MatchCounts match_at_threshold(const InstanceSet& pred, const InstanceSet& gt,
                                      double threshold) {
  return match_pairs(overlapping_pairs(pred, gt), pred.instances.size(),
                     gt.instances.size(), threshold);
}

/// 0.50, 0.55, ..., 0.95
inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

/// Mean over thresholds of TP / (TP + FP + FN) for one image (1 when the
/// image has neither predictions nor ground truth).
inline double image_map_score(const InstanceSet& pred, const InstanceSet& gt,
                              std::span<const double> thresholds) {
  const auto pairs = overlapping_pairs(pred, gt);
  double sum = 0;
  for (double t : thresholds) {
    const auto m = match_pairs(pairs, pred.instances.size(), gt.instances.size(), t);
    const std::size_t denom = m.tp + m.fp + m.fn;
    sum += denom == 0 ? 1.0 : static_cast<double>(m.tp) / static_cast<double>(denom);
  }
  return thresholds.empty() ? 0.0 : sum / static_cast<double>(thresholds.size());
}

inline double map_over_thresholds(std::span<const InstanceSet> pred,
                                  std::span<const InstanceSet> gt,
                                  std::span<const double> thresholds) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("map_over_thresholds: prediction/ground-truth count mismatch");
  }
  if (pred.empty()) return 0.0;
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    sum += image_map_score(pred[i], gt[i], thresholds);
  }
  return sum / static_cast<double>(pred.size());
}

inline double map_over_thresholds(std::span<const InstanceSet> pred,
                                  std::span<const InstanceSet> gt) {
  const auto t = default_iou_thresholds();
  return map_over_thresholds(pred, gt, t);
}

// ---------------------------------------------------------------------------
// Reports

struct ClassStats {
  std::optional<double> mae;  // absent for the border class
  std::optional<double> precision;
  std::optional<double> recall;
};

struct ImageResult {
  std::string id;
  ColonyCounts gt;
  ColonyCounts pred;
  double map = 0;
};

struct MetricsReport {
  std::string dataset;
  ClassStats bvg_plus, bvg_minus, border;
  double map = 0;
  std::vector<ImageResult> images;
};

/// Pixel precision/recall are pooled over all images; MAE and mAP average
/// per-image values.
inline MetricsReport evaluate_masks(std::span<const LabelMask> pred,
                                    std::span<const LabelMask> gt,
                                    std::span<const std::string> ids,
                                    std::string dataset) {
  if (pred.size() != gt.size() || ids.size() != gt.size()) {
    throw std::invalid_argument("evaluate_masks: list lengths differ");
  }
  MetricsReport r;
  r.dataset = std::move(dataset);
  Confusion plus, minus, border;
  std::vector<int> pp, gp, pm, gm;
  std::vector<InstanceSet> pinst, ginst;
  const auto thresholds = default_iou_thresholds();
  for (std::size_t i = 0; i < gt.size(); ++i) {
    plus += pixel_confusion(pred[i], gt[i], PixelClass::bvg_plus);
    minus += pixel_confusion(pred[i], gt[i], PixelClass::bvg_minus);
    border += pixel_confusion(pred[i], gt[i], PixelClass::border);
    ImageResult ir;
    ir.id = ids[i];
    ir.gt = count_colonies(gt[i]);
    ir.pred = count_colonies(pred[i]);
    const InstanceSet pi = extract_instances(pred[i]);
    const InstanceSet gi = extract_instances(gt[i]);
    ir.map = image_map_score(pi, gi, thresholds);
    r.map += ir.map;
    pp.push_back(ir.pred.bvg_plus);
    gp.push_back(ir.gt.bvg_plus);
    pm.push_back(ir.pred.bvg_minus);
    gm.push_back(ir.gt.bvg_minus);
    r.images.push_back(std::move(ir));
  }
  if (!gt.empty()) r.map /= static_cast<double>(gt.size());
  r.bvg_plus = {mae(pp, gp), plus.precision(), plus.recall()};
  r.bvg_minus = {mae(pm, gm), minus.precision(), minus.recall()};
  r.border = {std::nullopt, border.precision(), border.recall()};
  return r;
}

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
inline nlohmann::json class_json(const ClassStats& s) {
  nlohmann::json j;
  if (s.mae) j["mae"] = *s.mae;
  j["precision"] = opt_json(s.precision);
  j["recall"] = opt_json(s.recall);
  return j;
}
inline std::string fmt_opt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", *v);
  return buf;
}
}  // namespace detail

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["dataset"] = r.dataset;
  j["classes"]["bvg+"] = detail::class_json(r.bvg_plus);
  j["classes"]["bvg-"] = detail::class_json(r.bvg_minus);
  j["classes"]["border"] = detail::class_json(r.border);
  j["map"] = r.map;
  j["iou_thresholds"] = default_iou_thresholds();
  auto& imgs = j["images"] = nlohmann::json::array();
  for (const auto& i : r.images) {
    imgs.push_back({{"id", i.id},
                    {"gt", {{"bvg+", i.gt.bvg_plus}, {"bvg-", i.gt.bvg_minus}}},
                    {"pred", {{"bvg+", i.pred.bvg_plus}, {"bvg-", i.pred.bvg_minus}}},
                    {"map", i.map}});
  }
  return j;
}

/// Plain-text table: one row per (class, dataset) with MAE, precision and
/// recall, then one mAP line per dataset.
inline std::string format_table(std::span<const MetricsReport> reports) {
  std::ostringstream os;
  os << std::left << std::setw(8) << "Class" << "| " << std::setw(10) << "Dataset"
     << "| " << std::setw(7) << "MAE" << "| " << std::setw(10) << "Precision"
     << "| " << "Recall\n";
  os << std::string(52, '-') << "\n";
  auto row = [&](const char* cls, const MetricsReport& r, const ClassStats& s) {
    os << std::setw(8) << cls << "| " << std::setw(10) << r.dataset << "| "
       << std::setw(7) << (s.mae ? detail::fmt_opt(s.mae) : "") << "| "
       << std::setw(10) << detail::fmt_opt(s.precision) << "| "
       << detail::fmt_opt(s.recall) << "\n";
  };
  for (const auto& r : reports) row("bvg+", r, r.bvg_plus);
  for (const auto& r : reports) row("bvg-", r, r.bvg_minus);
  for (const auto& r : reports) row("border", r, r.border);
  os << "\n";
  for (const auto& r : reports) {
    os << "mAP@[0.50:0.95] " << r.dataset << ": " << detail::fmt_opt(r.map) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Overlay rendering

namespace detail {

// 3x5 bitmap digits, one row per byte (3 low bits, MSB = leftmost column).
inline constexpr std::array<std::array<std::uint8_t, 5>, 10> kDigits = {{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7},
    {5, 5, 7, 1, 1}, {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1},
    {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
}};

inline void put_px(RgbImage& img, int y, int x, std::array<std::uint8_t, 3> c) {
  if (y < 0 || x < 0 || y >= img.height() || x >= img.width()) return;
  auto* p = img.px(y, x);
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

inline void draw_number(RgbImage& img, int y0, int x0, int value,
                        std::array<std::uint8_t, 3> c) {
  const std::string s = std::to_string(value);
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto& glyph = kDigits[s[k] - '0'];
    for (int r = 0; r < 5; ++r) {
      for (int col = 0; col < 3; ++col) {
        if (glyph[r] & (4 >> col)) put_px(img, y0 + r, x0 + static_cast<int>(k) * 4 + col, c);
      }
    }
  }
}

}  // namespace detail

struct OverlayPalette {
  std::array<std::uint8_t, 3> bvg_plus{60, 220, 60};
  std::array<std::uint8_t, 3> bvg_minus{240, 220, 40};
  std::array<std::uint8_t, 3> border{255, 0, 0};
  std::array<std::uint8_t, 3> box{0, 80, 255};
  std::array<std::uint8_t, 3> label{255, 255, 255};
};

/// Tints colony pixels by kind, paints border pixels, and draws a numbered
/// bounding box around every instance.
inline RgbImage render_overlay(const RgbImage& image, const LabelMask& mask,
                               const OverlayPalette& pal = {}) {
  if (image.height() != mask.height() || image.width() != mask.width()) {
    throw ShapeError("render_overlay: image and mask sizes differ");
  }
  RgbImage out = image;
  for (int y = 0; y < mask.height(); ++y) {
    for (int x = 0; x < mask.width(); ++x) {
      const PixelClass c = mask.at(y, x);
      if (c == PixelClass::background) continue;
      auto* p = out.px(y, x);
      if (c == PixelClass::border) {
        detail::put_px(out, y, x, pal.border);
        continue;
      }
      const auto& tint = c == PixelClass::bvg_plus ? pal.bvg_plus : pal.bvg_minus;
      for (int k = 0; k < 3; ++k) p[k] = static_cast<std::uint8_t>((p[k] + tint[k]) / 2);
    }
  }
  const InstanceSet inst = extract_instances(mask);
  for (std::size_t i = 0; i < inst.instances.size(); ++i) {
    const auto& b = inst.instances[i];
    for (int x = b.min_x; x <= b.max_x; ++x) {
      detail::put_px(out, b.min_y, x, pal.box);
      detail::put_px(out, b.max_y, x, pal.box);
    }
    for (int y = b.min_y; y <= b.max_y; ++y) {
      detail::put_px(out, y, b.min_x, pal.box);
      detail::put_px(out, y, b.max_x, pal.box);
    }
  }
  // Index labels sit above the box, or below it at the top edge.
  for (std::size_t i = 0; i < inst.instances.size(); ++i) {
    const auto& b = inst.instances[i];
    const int y0 = b.min_y >= 6 ? b.min_y - 6 : b.max_y + 2;
    detail::draw_number(out, y0, b.min_x, static_cast<int>(i + 1), pal.label);
  }
  return out;
}

}  // namespace colony

#include <gtest/gtest.h>

#include <random>
#include <set>

#include "colony/dishgen.hpp"
#include "colony/evalkit.hpp"
#include "oracles.hpp"

using namespace colony;

namespace {

LabelMask random_mask(int h, int w, std::mt19937_64& rng) {
  // Skewed towards few labels so components of every size show up.
  std::discrete_distribution<int> d({4, 3, 2, 1});
  LabelMask m(h, w);
  for (auto& v : m.storage()) v = static_cast<std::uint8_t>(d(rng));
  return m;
}

void fill_rect(LabelMask& m, int y0, int x0, int y1, int x1, PixelClass c) {
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) m.set(y, x, c);
}

InstanceSet single(const LabelMask& m) { return extract_instances(m); }

}  // namespace

// --- connected components ------------------------------------------------------------

TEST(ConnectedComponents, MatchesFloodFillOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto m = random_mask(16, 16, rng);
    for (auto kind : {PixelClass::bvg_plus, PixelClass::bvg_minus}) {
      std::vector<int> comp;
      const int n = oracle::flood_fill_components(m, kind, comp);
      const auto set = connected_components(m, kind);
      ASSERT_EQ(static_cast<int>(set.instances.size()), n) << "trial " << trial;
      // Same partition: every instance maps to exactly one oracle id and back.
      std::set<int> used;
      for (const auto& inst : set.instances) {
        const int id = comp[inst.pixels.front()];
        ASSERT_GE(id, 0);
        for (auto p : inst.pixels) ASSERT_EQ(comp[p], id);
        ASSERT_TRUE(used.insert(id).second);
        ASSERT_EQ(static_cast<std::size_t>(std::count(comp.begin(), comp.end(), id)),
                  inst.pixels.size());
      }
    }
  }
}

TEST(ConnectedComponents, DiagonalTouchIsTwoInstances) {
  LabelMask m(4, 4);
  m.set(1, 1, PixelClass::bvg_plus);
  m.set(2, 2, PixelClass::bvg_plus);
  EXPECT_EQ(connected_components(m, PixelClass::bvg_plus).instances.size(), 2u);
}

TEST(ConnectedComponents, DiagonalBorderSeamSplitsBlob) {
  LabelMask m(8, 8);
  fill_rect(m, 0, 0, 7, 7, PixelClass::bvg_plus);
  for (int i = 0; i < 8; ++i) m.set(i, 7 - i, PixelClass::border);  // 8-connected seam
  const auto set = connected_components(m, PixelClass::bvg_plus);
  ASSERT_EQ(set.instances.size(), 2u);
  for (const auto& inst : set.instances)
    for (auto p : inst.pixels) EXPECT_NE(m.data()[p], static_cast<std::uint8_t>(PixelClass::border));
}

TEST(ConnectedComponents, BoundingBoxesAndOrder) {
  LabelMask m(10, 10);
  fill_rect(m, 5, 1, 7, 3, PixelClass::bvg_minus);
  fill_rect(m, 1, 6, 2, 8, PixelClass::bvg_plus);
  const auto set = extract_instances(m);
  ASSERT_EQ(set.instances.size(), 2u);
  EXPECT_EQ(set.instances[0].kind, PixelClass::bvg_plus);
  EXPECT_EQ(set.instances[1].kind, PixelClass::bvg_minus);
  const auto& b = set.instances[1];
  EXPECT_EQ(std::tie(b.min_y, b.min_x, b.max_y, b.max_x), std::make_tuple(5, 1, 7, 3));
  EXPECT_EQ(b.pixels.size(), 9u);
}

// --- counting and MAE --------------------------------------------------------------

TEST(Counting, EmptyAndFusedColonies) {
  EXPECT_EQ(count_colonies(LabelMask(8, 8)), (ColonyCounts{0, 0}));
  LabelMask fused(8, 12);
  fill_rect(fused, 2, 1, 5, 5, PixelClass::bvg_plus);
  fill_rect(fused, 2, 6, 5, 10, PixelClass::bvg_plus);
  EXPECT_EQ(count_colonies(fused).bvg_plus, 1);
  for (int y = 2; y <= 5; ++y) fused.set(y, 6, PixelClass::border);
  EXPECT_EQ(count_colonies(fused).bvg_plus, 2);
}

TEST(Mae, Basics) {
  const std::vector<int> a{21}, b{20};
  EXPECT_EQ(mae(a, b), 1.0);
  const std::vector<int> x{3, 0, 7, 2}, y{1, 4, 7, 2};
  EXPECT_EQ(mae(x, x), 0.0);
  EXPECT_EQ(mae(x, y), mae(y, x));
  EXPECT_EQ(mae(x, y), 1.5);
  EXPECT_THROW(mae(a, x), std::invalid_argument);
}

// --- pixel precision / recall --------------------------------------------------------

TEST(PixelPr, PerfectAndUndefined) {
  LabelMask gt(6, 6);
  fill_rect(gt, 1, 1, 3, 3, PixelClass::bvg_plus);
  const auto same = pixel_pr(gt, gt, PixelClass::bvg_plus);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  const auto none = pixel_pr(LabelMask(6, 6), gt, PixelClass::bvg_plus);
  EXPECT_FALSE(none.precision.has_value());
  EXPECT_EQ(none.recall, 0.0);
  const auto absent = pixel_pr(gt, gt, PixelClass::border);
  EXPECT_FALSE(absent.precision.has_value());
  EXPECT_FALSE(absent.recall.has_value());
  EXPECT_THROW(pixel_pr(LabelMask(5, 6), gt, PixelClass::bvg_plus), ShapeError);
}

TEST(PixelPr, MatchesLoopOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_mask(8, 8, rng), g = random_mask(8, 8, rng);
    for (int k = 1; k <= 3; ++k) {
      const auto kind = static_cast<PixelClass>(k);
      int tp = 0, fp = 0, fn = 0;
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
          const bool a = p.at(y, x) == kind, b = g.at(y, x) == kind;
          tp += a && b;
          fp += a && !b;
          fn += !a && b;
        }
      const auto pr = pixel_pr(p, g, kind);
      if (tp + fp) {
        ASSERT_NEAR(*pr.precision, double(tp) / (tp + fp), 1e-15);
      } else {
        ASSERT_FALSE(pr.precision);
      }
      if (tp + fn) {
        ASSERT_NEAR(*pr.recall, double(tp) / (tp + fn), 1e-15);
      } else {
        ASSERT_FALSE(pr.recall);
      }
    }
  }
}

// --- IoU and matching --------------------------------------------------------------

TEST(InstanceIou, SquaresSharingAStrip) {
  // Two 2x2 squares overlapping in a 1x2 strip on a 4-wide canvas.
  const std::vector<std::size_t> a{0, 1, 4, 5}, b{1, 2, 5, 6};
  EXPECT_NEAR(instance_iou(a, b), 1.0 / 3.0, 1e-12);
  EXPECT_EQ(instance_iou(a, b), instance_iou(b, a));
  EXPECT_EQ(instance_iou(a, a), 1.0);
  const std::vector<std::size_t> c{8, 9};
  EXPECT_EQ(instance_iou(a, c), 0.0);
}

TEST(InstanceIou, OneOnlyForEqualSets) {
  std::mt19937_64 rng(9);
  std::bernoulli_distribution coin(0.5);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::size_t> a, b;
    for (std::size_t i = 0; i < 12; ++i) {
      if (coin(rng)) a.push_back(i);
      if (coin(rng)) b.push_back(i);
    }
    if (a.empty() || b.empty()) continue;
    EXPECT_EQ(instance_iou(a, b) == 1.0, a == b);
    EXPECT_EQ(instance_iou(a, b), instance_iou(b, a));
  }
}

namespace {

// GT: 10x10 bvg+ square. Prediction: 62 of its pixels, so IoU = 0.62.
std::pair<LabelMask, LabelMask> iou_062_fixture(PixelClass pred_kind = PixelClass::bvg_plus) {
  LabelMask gt(12, 12), pred(12, 12);
  fill_rect(gt, 1, 1, 10, 10, PixelClass::bvg_plus);
  fill_rect(pred, 1, 1, 6, 10, pred_kind);  // 60 pixels
  pred.set(7, 1, pred_kind);
  pred.set(7, 2, pred_kind);
  return {pred, gt};
}

}  // namespace

TEST(Matching, IouFixtureAcrossThresholds) {
  const auto [pred, gt] = iou_062_fixture();
  const auto p = single(pred), g = single(gt);
  ASSERT_EQ(p.instances.size(), 1u);
  EXPECT_NEAR(instance_iou(p.instances[0].pixels, g.instances[0].pixels), 0.62, 1e-12);
  EXPECT_EQ(match_at_threshold(p, g, 0.5), (MatchCounts{1, 0, 0}));
  EXPECT_EQ(match_at_threshold(p, g, 0.65), (MatchCounts{0, 1, 1}));
  const std::vector<InstanceSet> ps{p}, gs{g};
  EXPECT_NEAR(map_over_thresholds(ps, gs), 0.3, 1e-12);
}

TEST(Matching, KindMismatchIsAMiss) {
  LabelMask gt(12, 12), pred(12, 12);
  fill_rect(gt, 1, 1, 10, 10, PixelClass::bvg_plus);
  fill_rect(pred, 1, 1, 9, 10, PixelClass::bvg_minus);  // IoU 0.9 if kinds agreed
  EXPECT_EQ(match_at_threshold(single(pred), single(gt), 0.5), (MatchCounts{0, 1, 1}));
}

TEST(Matching, PerfectAndEmpty) {
  LabelMask gt(16, 16);
  fill_rect(gt, 1, 1, 4, 4, PixelClass::bvg_plus);
  fill_rect(gt, 8, 8, 12, 10, PixelClass::bvg_minus);
  fill_rect(gt, 1, 8, 2, 14, PixelClass::bvg_plus);
  const auto g = single(gt);
  EXPECT_EQ(match_at_threshold(g, g, 0.95), (MatchCounts{3, 0, 0}));
  const std::vector<InstanceSet> gs{g}, empty{single(LabelMask(16, 16))};
  EXPECT_EQ(map_over_thresholds(gs, gs), 1.0);
  EXPECT_EQ(map_over_thresholds(empty, gs), 0.0);
  EXPECT_EQ(map_over_thresholds(empty, empty), 1.0);
  EXPECT_THROW(map_over_thresholds(gs, std::vector<InstanceSet>{}), std::invalid_argument);
}

TEST(Matching, GreedyPrefersHighestIou) {
  // One GT, two predictions overlapping it; only the better one matches.
  LabelMask gt(12, 12);
  fill_rect(gt, 1, 1, 6, 6, PixelClass::bvg_plus);
  LabelMask pred(12, 12);
  fill_rect(pred, 1, 1, 6, 4, PixelClass::bvg_plus);  // 24 px inside GT
  fill_rect(pred, 1, 6, 6, 6, PixelClass::bvg_plus);  // 6 px, separated by column 5
  const auto p = single(pred), g = single(gt);
  ASSERT_EQ(p.instances.size(), 2u);
  const auto pairs = overlapping_pairs(p, g);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].pred, 0u);
  EXPECT_EQ(match_at_threshold(p, g, 0.1), (MatchCounts{1, 1, 0}));
}

TEST(Matching, CountsAreConserved) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 300; ++trial) {
    const auto p = single(random_mask(16, 16, rng)), g = single(random_mask(16, 16, rng));
    for (double t : {0.05, 0.3, 0.5, 0.9}) {
      const auto m = match_at_threshold(p, g, t);
      ASSERT_EQ(m.tp + m.fp, p.instances.size());
      ASSERT_EQ(m.tp + m.fn, g.instances.size());
    }
  }
}

TEST(Matching, DroppingAnUnreachedThresholdNeverLowersScore) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<InstanceSet> ps, gs;
    for (int i = 0; i < 3; ++i) {
      ps.push_back(single(random_mask(16, 16, rng)));
      gs.push_back(single(random_mask(16, 16, rng)));
    }
    // Ten thresholds, then the same list without the strictest one.
    auto t = default_iou_thresholds();
    const double all = map_over_thresholds(ps, gs, t);
    t.pop_back();
    EXPECT_GE(map_over_thresholds(ps, gs, t) + 1e-12, all);
  }
}

// --- reports ----------------------------------------------------------------------

TEST(Report, PerfectPredictionAndSchema) {
  GeneratorParams gp;
  gp.height = gp.width = 96;
  std::vector<LabelMask> masks;
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) {
    masks.push_back(render_mask(sample_scene(gp, static_cast<std::uint64_t>(i))));
    ids.push_back(std::to_string(i));
  }
  const auto r = evaluate_masks(masks, masks, ids, "test");
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.bvg_plus.mae, 0.0);
  EXPECT_EQ(r.bvg_plus.precision, 1.0);
  EXPECT_EQ(r.bvg_minus.recall, 1.0);
  EXPECT_FALSE(r.border.mae.has_value());
  ASSERT_EQ(r.images.size(), 3u);
  EXPECT_EQ(r.images[1].gt, r.images[1].pred);

  const auto j = to_json(r);
  EXPECT_EQ(j.at("dataset"), "test");
  EXPECT_TRUE(j.at("classes").contains("bvg+"));
  EXPECT_FALSE(j.at("classes").at("border").contains("mae"));
  const std::vector<MetricsReport> both{r, r};
  const auto table = format_table(both);
  EXPECT_NE(table.find("bvg+"), std::string::npos);
  EXPECT_NE(table.find("mAP"), std::string::npos);
}

TEST(Report, UndefinedPrecisionIsNotZero) {
  std::vector<LabelMask> gt{LabelMask(8, 8)}, pred{LabelMask(8, 8)};
  fill_rect(gt[0], 2, 2, 4, 4, PixelClass::bvg_minus);
  const std::vector<std::string> ids{"a"};
  const auto r = evaluate_masks(pred, gt, ids, "x");
  EXPECT_FALSE(r.bvg_minus.precision.has_value());
  EXPECT_EQ(r.bvg_minus.recall, 0.0);
  EXPECT_EQ(r.bvg_minus.mae, 1.0);
  EXPECT_TRUE(to_json(r).at("classes").at("bvg-").at("precision").is_null());
}

// --- overlay ------------------------------------------------------------------------

TEST(Overlay, EmptyMaskLeavesImageUnchanged) {
  RgbImage img(16, 16, {10, 20, 30});
  img.px(3, 4)[1] = 200;
  EXPECT_EQ(render_overlay(img, LabelMask(16, 16)), img);
  EXPECT_THROW(render_overlay(img, LabelMask(8, 16)), ShapeError);
}

TEST(Overlay, OneInstanceGetsOneMatchingBox) {
  RgbImage img(24, 24, {0, 0, 0});
  LabelMask m(24, 24);
  fill_rect(m, 10, 5, 15, 12, PixelClass::bvg_plus);
  const OverlayPalette pal;
  const auto out = render_overlay(img, m, pal);
  int y0 = 99, x0 = 99, y1 = -1, x1 = -1, n = 0;
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x) {
      const auto* p = out.px(y, x);
      if (p[0] == pal.box[0] && p[1] == pal.box[1] && p[2] == pal.box[2]) {
        y0 = std::min(y0, y);
        x0 = std::min(x0, x);
        y1 = std::max(y1, y);
        x1 = std::max(x1, x);
        ++n;
      }
    }
  EXPECT_EQ(std::tie(y0, x0, y1, x1), std::make_tuple(10, 5, 15, 12));
  EXPECT_EQ(n, 2 * 8 + 2 * 6 - 4);  // perimeter only
  // The index label is drawn in the label color above the box.
  bool label = false;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 24; ++x) label |= out.px(y, x)[0] == pal.label[0];
  EXPECT_TRUE(label);
}

TEST(Overlay, BorderPixelsUseBorderColor) {
  RgbImage img(12, 12, {0, 0, 0});
  LabelMask m(12, 12);
  fill_rect(m, 2, 2, 8, 8, PixelClass::bvg_minus);
  for (int y = 2; y <= 8; ++y) m.set(y, 5, PixelClass::border);
  const OverlayPalette pal;
  const auto out = render_overlay(img, m, pal);
  EXPECT_EQ(out.px(5, 5)[0], pal.border[0]);
  EXPECT_EQ(out.px(5, 5)[1], pal.border[1]);
  EXPECT_EQ(extract_instances(m).instances.size(), 2u);
}

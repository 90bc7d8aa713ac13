#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "colony/dishgen.hpp"
#include "colony/evalkit.hpp"
#include "colony/pnm.hpp"

using namespace colony;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("colony_dishgen_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

GeneratorParams small(Preset preset, int size = 128) {
  GeneratorParams gp;
  gp.preset = preset;
  gp.height = gp.width = size;
  return gp;
}

DishScene blank_scene(int size) {
  DishScene s;
  s.height = s.width = size;
  s.dish_x = s.dish_y = size / 2.0;
  s.dish_radius = 0.47 * size;
  return s;
}

Colony colony_at(double x, double y, double r, PixelClass kind = PixelClass::bvg_minus) {
  Colony c;
  c.x = x;
  c.y = y;
  c.radius = r;
  c.kind = kind;
  if (kind == PixelClass::bvg_plus) c.halo_radius = 1.7 * r;
  return c;
}

}  // namespace

TEST(SampleScene, SameSeedSameScene) {
  const auto gp = small(Preset::realistic);
  EXPECT_EQ(to_json(sample_scene(gp, 5)).dump(), to_json(sample_scene(gp, 5)).dump());
  EXPECT_NE(to_json(sample_scene(gp, 5)).dump(), to_json(sample_scene(gp, 6)).dump());
  const auto s = sample_scene(gp, 5);
  EXPECT_EQ(render_image(s), render_image(sample_scene(gp, 5)));
  EXPECT_EQ(render_mask(s), render_mask(sample_scene(gp, 5)));
}

TEST(SampleScene, CountMeansMatchPriors) {
  const GeneratorParams gp;  // 480x480, default priors
  double plus = 0, minus = 0;
  int skipped = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = sample_scene(gp, derive_seed(100, static_cast<std::uint64_t>(i)));
    plus += static_cast<double>(s.count(PixelClass::bvg_plus));
    minus += static_cast<double>(s.count(PixelClass::bvg_minus));
    skipped += s.skipped;
  }
  plus /= 1000;
  minus /= 1000;
  EXPECT_NEAR(plus, 20.357, 0.05 * 20.357);
  EXPECT_NEAR(minus, 4.726, 0.05 * 4.726);
  EXPECT_EQ(skipped, 0);
}

TEST(SampleScene, ColoniesStayInsideDishAndHalosAreLarger) {
  for (auto preset : {Preset::easy, Preset::realistic}) {
    for (int i = 0; i < 50; ++i) {
      const auto s = sample_scene(small(preset), static_cast<std::uint64_t>(i));
      for (const auto& c : s.colonies) {
        EXPECT_LE(std::hypot(c.x - s.dish_x, c.y - s.dish_y) + c.radius, s.dish_radius);
        if (c.kind == PixelClass::bvg_plus) {
          EXPECT_GT(c.halo_radius, c.radius);
        } else {
          EXPECT_EQ(c.halo_radius, 0.0);
        }
      }
      for (const auto& r : s.reflections) {
        EXPECT_GE(r.radius, 0.85 * s.dish_radius);
        EXPECT_LE(r.radius, s.dish_radius);
      }
    }
  }
}

TEST(SampleScene, EasyPresetHasNoTouchingAndNoReflections) {
  int touching_realistic = 0;
  for (int i = 0; i < 100; ++i) {
    const auto e = sample_scene(small(Preset::easy), static_cast<std::uint64_t>(i));
    EXPECT_TRUE(e.reflections.empty());
    for (std::size_t a = 0; a < e.colonies.size(); ++a)
      for (std::size_t b = a + 1; b < e.colonies.size(); ++b) {
        const auto &p = e.colonies[a], &q = e.colonies[b];
        EXPECT_GT(std::hypot(p.x - q.x, p.y - q.y), p.radius + q.radius + kClearance);
      }
    const auto r = sample_scene(small(Preset::realistic), static_cast<std::uint64_t>(i));
    EXPECT_GE(r.reflections.size(), 2u);
    EXPECT_LE(r.reflections.size(), 4u);
    for (std::size_t a = 0; a < r.colonies.size(); ++a)
      for (std::size_t b = a + 1; b < r.colonies.size(); ++b) {
        const auto &p = r.colonies[a], &q = r.colonies[b];
        touching_realistic += std::hypot(p.x - q.x, p.y - q.y) <= 1.1 * (p.radius + q.radius);
      }
  }
  EXPECT_GT(touching_realistic, 100);
}

TEST(SampleScene, CrowdedDishSkipsInsteadOfLooping) {
  auto gp = small(Preset::easy, 32);
  gp.lambda_plus = 200;
  const auto s = sample_scene(gp, 1);
  EXPECT_GT(s.skipped, 0);
  EXPECT_FALSE(s.colonies.empty());
}

TEST(SampleScene, RejectsBadParams) {
  auto gp = small(Preset::easy);
  gp.lambda_minus = 0;
  EXPECT_THROW(sample_scene(gp, 1), ConfigError);
  gp = small(Preset::easy);
  gp.radius_max = 1;
  EXPECT_THROW(sample_scene(gp, 1), ConfigError);
}

TEST(RenderImage, DefaultSizeAndEmptyScene) {
  const auto img = render_image(sample_scene(GeneratorParams{}, 3));
  EXPECT_EQ(img.height(), 480);
  EXPECT_EQ(img.width(), 480);

  auto s = blank_scene(64);
  const auto clean = render_image(s);
  // Interior pixels are exactly the agar tone without noise.
  for (int y = 20; y < 44; ++y)
    for (int x = 20; x < 44; ++x)
      for (int k = 0; k < 3; ++k) ASSERT_EQ(clean.px(y, x)[k], s.agar_color[k]);
  EXPECT_EQ(clean.px(0, 0)[0], kOutsideColor[0]);

  s.noise_sigma = 4;
  const auto noisy = render_image(s);
  double dev = 0;
  for (int y = 20; y < 44; ++y)
    for (int x = 20; x < 44; ++x) dev += std::abs(noisy.px(y, x)[0] - s.agar_color[0]);
  dev /= 24 * 24;
  EXPECT_GT(dev, 1.0);
  EXPECT_LT(dev, 6.0);
}

TEST(RenderImage, HaloDarkerThanAgarDarkerThanColony) {
  double halo = 0, agar = 0, body = 0;
  long nh = 0, na = 0, nb = 0;
  auto lum = [](const std::uint8_t* p) { return (p[0] + p[1] + p[2]) / 3.0; };
  for (int i = 0; i < 20; ++i) {
    const auto s = sample_scene(small(Preset::easy), static_cast<std::uint64_t>(i));
    const auto img = render_image(s);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        if (std::hypot(px - s.dish_x, py - s.dish_y) > 0.8 * s.dish_radius) continue;
        int inside = 0;
        bool in_halo = false, in_body = false;
        for (const auto& c : s.colonies) {
          const double d = std::hypot(px - c.x, py - c.y);
          const double outer = std::max(c.radius, c.halo_radius);
          if (d <= outer + 2) ++inside;
          if (d < c.radius - 1) in_body = true;
          if (c.kind == PixelClass::bvg_plus && d > c.radius + 1 && d < c.halo_radius - 1)
            in_halo = true;
        }
        if (in_body) {
          body += lum(img.px(y, x));
          ++nb;
        } else if (in_halo && inside == 1) {
          halo += lum(img.px(y, x));
          ++nh;
        } else if (inside == 0) {
          agar += lum(img.px(y, x));
          ++na;
        }
      }
  }
  ASSERT_GT(nh, 100);
  ASSERT_GT(na, 100);
  ASSERT_GT(nb, 100);
  EXPECT_LT(halo / nh, agar / na);
  EXPECT_LT(agar / na, body / nb);
}

TEST(RenderMask, EmptySceneIsBackground) {
  const auto m = render_mask(blank_scene(48));
  EXPECT_EQ(m.histogram()[0], 48u * 48u);
}

TEST(RenderMask, SeparatedDiscsHaveNoBorder) {
  auto s = blank_scene(64);
  s.colonies = {colony_at(22, 32, 5), colony_at(22 + 5 + 5 + 3.01, 32, 5)};
  const auto m = render_mask(s);
  const auto h = m.histogram();
  EXPECT_EQ(h[3], 0u);
  EXPECT_GT(h[2], 0u);
  EXPECT_EQ(count_colonies(m), (ColonyCounts{0, 2}));
}

TEST(RenderMask, HaloPixelsStayBackground) {
  auto s = blank_scene(64);
  s.colonies = {colony_at(32, 32, 5, PixelClass::bvg_plus)};
  const auto m = render_mask(s);
  EXPECT_EQ(m.at(32, 32), PixelClass::bvg_plus);
  EXPECT_EQ(m.at(32, 32 + 7), PixelClass::background);  // inside the halo
}

TEST(RenderMask, OverlappingDiscsAreSplitBySeam) {
  for (double gap : {0.8, 0.9, 1.0, 1.05, 1.1}) {
    for (int rot = 0; rot < 8; ++rot) {
      auto s = blank_scene(96);
      const double r1 = 6.3, r2 = 4.7, a = rot * 0.41;
      const double d = gap * (r1 + r2);
      s.colonies = {colony_at(45.2, 47.9, r1, PixelClass::bvg_plus),
                    colony_at(45.2 + d * std::cos(a), 47.9 + d * std::sin(a), r2,
                              PixelClass::bvg_plus)};
      const auto m = render_mask(s);
      EXPECT_EQ(count_colonies(m).bvg_plus, 2) << "gap " << gap << " rot " << rot;
    }
  }
}

TEST(RenderMask, LabelsMatchDiscsAndEveryColonyShows) {
  for (int i = 0; i < 30; ++i) {
    const auto s = sample_scene(small(Preset::realistic), static_cast<std::uint64_t>(i));
    const auto m = render_mask(s);
    std::vector<int> seen(s.colonies.size(), 0);
    for (int y = 0; y < m.height(); ++y)
      for (int x = 0; x < m.width(); ++x) {
        const auto c = m.at(y, x);
        if (c != PixelClass::bvg_plus && c != PixelClass::bvg_minus) continue;
        bool ok = false;
        for (std::size_t j = 0; j < s.colonies.size(); ++j) {
          if (s.colonies[j].kind == c &&
              std::hypot(x + 0.5 - s.colonies[j].x, y + 0.5 - s.colonies[j].y) <=
                  s.colonies[j].radius) {
            ok = true;
            seen[j] = 1;
          }
        }
        ASSERT_TRUE(ok) << y << "," << x;
      }
    for (int v : seen) EXPECT_EQ(v, 1);
  }
}

TEST(RenderMask, CountsMatchSceneWhenNothingSkipped) {
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    const auto s = sample_scene(small(Preset::realistic, 480), static_cast<std::uint64_t>(i));
    if (s.skipped) continue;
    const auto counts = count_colonies(render_mask(s));
    EXPECT_EQ(counts.bvg_plus, static_cast<int>(s.count(PixelClass::bvg_plus))) << i;
    EXPECT_EQ(counts.bvg_minus, static_cast<int>(s.count(PixelClass::bvg_minus))) << i;
    ++checked;
  }
  EXPECT_GT(checked, 90);
}

TEST(GenerateDataset, WritesFilesAndIsByteIdentical) {
  const auto a = temp_dir("a"), b = temp_dir("b");
  const auto gp = small(Preset::realistic, 64);
  const auto ma = generate_dataset(gp, 5, 7, a);
  generate_dataset(gp, 5, 7, b);
  ASSERT_EQ(ma.entries.size(), 5u);
  for (const auto& name : {"manifest.json", "image_0.ppm", "mask_4.pgm", "scene_2.json"}) {
    ASSERT_TRUE(fs::exists(a / name)) << name;
    EXPECT_EQ(slurp(a / name), slurp(b / name)) << name;
  }
  for (const auto& e : ma.entries) {
    EXPECT_EQ(count_colonies(read_pgm_mask(a / e.mask)), e.counts);
  }
  const auto back = read_manifest(a);
  EXPECT_EQ(to_json(back).dump(), to_json(ma).dump());
  EXPECT_THROW(generate_dataset(gp, 0, 7, a), ConfigError);
}

TEST(GenerateDataset, UnwritableDirectoryNamesPath) {
  const auto base = temp_dir("blocked");
  std::ofstream(base / "file") << "x";
  try {
    generate_dataset(small(Preset::easy, 32), 1, 1, base / "file" / "sub");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("file"), std::string::npos);
  }
}

TEST(GenerateDataset, BackgroundDominates) {
  // Default 480 canvas, 108 images as in the original dataset size.
  const GeneratorParams gp;
  std::size_t bg = 0, total = 0;
  for (int i = 0; i < 108; ++i) {
    const auto m = render_mask(sample_scene(gp, derive_seed(1, static_cast<std::uint64_t>(i))));
    bg += m.histogram()[0];
    total += m.size();
  }
  EXPECT_GT(static_cast<double>(bg) / static_cast<double>(total), 0.97);
}

TEST(Pnm, RoundTripAndHeader) {
  const auto dir = temp_dir("pnm");
  const auto s = sample_scene(small(Preset::realistic, 48), 9);
  const auto img = render_image(s);
  const auto mask = render_mask(s);
  write_ppm(dir / "x.ppm", img);
  write_pgm(dir / "x.pgm", mask);
  EXPECT_EQ(read_ppm(dir / "x.ppm"), img);
  EXPECT_EQ(read_pgm_mask(dir / "x.pgm"), mask);
  EXPECT_EQ(slurp(dir / "x.ppm").substr(0, 13), "P6\n48 48\n255\n");
  EXPECT_EQ(slurp(dir / "x.pgm").size(), 13u + 48 * 48);
}

TEST(Pnm, RejectsBadFiles) {
  const auto dir = temp_dir("badpnm");
  std::ofstream(dir / "short.ppm", std::ios::binary) << "P6\n4 4\n255\nabc";
  std::ofstream(dir / "wrong.pgm", std::ios::binary) << "P6\n1 1\n255\nabc";
  std::ofstream(dir / "label.pgm", std::ios::binary) << "P5\n1 1\n255\n\x09";
  EXPECT_THROW(read_ppm(dir / "short.ppm"), IoError);
  EXPECT_THROW(read_pgm_mask(dir / "wrong.pgm"), IoError);
  EXPECT_THROW(read_pgm_mask(dir / "label.pgm"), std::exception);
  EXPECT_THROW(read_ppm(dir / "missing.ppm"), IoError);
}

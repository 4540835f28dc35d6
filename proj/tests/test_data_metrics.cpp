#include "doctest.h"
#include "hsia/data.hpp"
#include "hsia/metrics.hpp"
#include "hsia/params.hpp"

#include <cmath>
#include <cstdio>
#include <set>

using namespace hsia;

TEST_CASE("cube serialization round trips") {
  SynthConfig cfg = default_synth(7, 4, 12, 16, 5);
  cfg.ignore_fraction = 0.05f;
  auto cube = synth_scene(cfg, 3);
  auto bytes = cube_serialize(cube);
  auto back = cube_parse(bytes);
  CHECK(back.bands == cube.bands);
  CHECK(back.height == cube.height);
  CHECK(back.width == cube.width);
  CHECK(back.data == cube.data);
  CHECK(back.labels == cube.labels);
  CHECK(back.wavelengths == cube.wavelengths);
}

TEST_CASE("cube parser reports truncation with a byte offset") {
  auto cube = synth_scene(default_synth(4, 3, 8, 8, 1), 0);
  auto bytes = cube_serialize(cube);
  auto clipped = bytes.substr(0, bytes.size() / 2);
  try {
    cube_parse(clipped);
    FAIL("expected a parse failure");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }
  CHECK_THROWS_AS(cube_parse(bytes + "x"), DataError);  // trailing garbage
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(cube_parse(bad), DataError);
}

TEST_CASE("synthetic scenes are deterministic per seed and index") {
  auto cfg = default_synth(6, 4, 20, 24, 99);
  auto a = synth_scene(cfg, 5);
  auto b = synth_scene(cfg, 5);
  CHECK(a.data == b.data);
  CHECK(a.labels == b.labels);
  auto c = synth_scene(cfg, 6);
  CHECK(a.labels != c.labels);
  auto cfg2 = default_synth(6, 4, 20, 24, 100);
  auto d = synth_scene(cfg2, 5);
  CHECK(a.labels != d.labels);
}

TEST_CASE("scenes contain several classes and valid label range") {
  auto cfg = default_synth(8, 5, 40, 60, 11);
  auto cube = synth_scene(cfg, 0);
  std::set<int> seen;
  for (auto l : cube.labels) {
    CHECK((l < 5 || l == 255));
    if (l != 255) seen.insert(l);
  }
  CHECK(seen.size() >= 3);
}

TEST_CASE("random crop keeps band spectra aligned with labels") {
  auto cfg = default_synth(5, 3, 16, 20, 2);
  auto cube = synth_scene(cfg, 1);
  Rng rng(7);
  auto crop = random_crop(cube, 8, 10, rng);
  CHECK(crop.bands == 5);
  CHECK(crop.height == 8);
  CHECK(crop.width == 10);
  // locate the crop origin by matching the label patch, then check spectra
  bool found = false;
  for (int oy = 0; oy + 8 <= 16 && !found; ++oy)
    for (int ox = 0; ox + 10 <= 20 && !found; ++ox) {
      bool ok = true;
      for (int y = 0; y < 8 && ok; ++y)
        for (int x = 0; x < 10 && ok; ++x)
          ok = crop.labels[y * 10 + x] == cube.labels[(oy + y) * 20 + (ox + x)];
      if (!ok) continue;
      for (int b = 0; b < 5 && ok; ++b)
        for (int y = 0; y < 8 && ok; ++y)
          for (int x = 0; x < 10 && ok; ++x)
            ok = crop.data[(b * 8 + y) * 10 + x] == cube.data[(b * 16 + oy + y) * 20 + (ox + x)];
      found = ok;
    }
  CHECK(found);
}

TEST_CASE("band-coded scenes zero the dead band range everywhere") {
  auto cfg = band_coded_synth(16, 4, 24, 24, 3, 1, 5);
  auto cube = synth_scene(cfg, 0);
  int dead_from = 16 - 16 / 4;
  for (int b = dead_from; b < 16; ++b)
    for (int p = 0; p < 24 * 24; ++p) CHECK(cube.data[b * 24 * 24 + p] == 0.0f);
  CHECK_THROWS_AS(band_coded_synth(16, 4, 24, 24, 3, 1, 14), ConfigError);
}

TEST_CASE("confusion matrix hand case: cm=[[3,1],[1,3]]") {
  std::vector<std::uint8_t> gt{0, 0, 0, 0, 1, 1, 1, 1};
  std::vector<std::uint8_t> pr{0, 0, 0, 1, 1, 1, 1, 0};
  auto cm = confusion(pr, gt, 2);
  CHECK(cm.at(0, 0) == 3);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 1);
  CHECK(cm.at(1, 1) == 3);
  auto m = metrics(cm);
  CHECK(m.iou[0] == doctest::Approx(0.6));
  CHECK(m.iou[1] == doctest::Approx(0.6));
  CHECK(m.miou == doctest::Approx(0.6));
  CHECK(m.aacc == doctest::Approx(0.75));
  CHECK(m.macc == doctest::Approx(0.75));
}

TEST_CASE("metrics match a brute-force recount on random maps") {
  Rng rng(123);
  for (int trial = 0; trial < 20; ++trial) {
    int classes = 2 + static_cast<int>(rng.below(5));
    int n = 50 + static_cast<int>(rng.below(200));
    std::vector<std::uint8_t> gt(n), pr(n);
    for (int i = 0; i < n; ++i) {
      gt[i] = static_cast<std::uint8_t>(rng.below(8) == 7 ? 255 : rng.below(classes));
      pr[i] = static_cast<std::uint8_t>(rng.below(classes));
    }
    auto m = metrics(confusion(pr, gt, classes));
    // independent recount
    std::vector<std::int64_t> tp(classes, 0), fp(classes, 0), fn(classes, 0), gtc(classes, 0);
    std::int64_t correct = 0, valid = 0;
    for (int i = 0; i < n; ++i) {
      if (gt[i] == 255) continue;
      ++valid;
      ++gtc[gt[i]];
      if (pr[i] == gt[i]) {
        ++correct;
        ++tp[gt[i]];
      } else {
        ++fn[gt[i]];
        ++fp[pr[i]];
      }
    }
    double siou = 0, sacc = 0;
    int niou = 0, nacc = 0;
    for (int c = 0; c < classes; ++c) {
      std::int64_t uni = tp[c] + fp[c] + fn[c];
      if (uni > 0) {
        double iou = static_cast<double>(tp[c]) / uni;
        CHECK(m.iou[c] == doctest::Approx(iou).epsilon(1e-12));
        siou += iou;
        ++niou;
      } else {
        CHECK(std::isnan(m.iou[c]));
      }
      if (gtc[c] > 0) {
        double acc = static_cast<double>(tp[c]) / gtc[c];
        CHECK(m.acc[c] == doctest::Approx(acc).epsilon(1e-12));
        sacc += acc;
        ++nacc;
      }
    }
    CHECK(m.miou == doctest::Approx(siou / niou).epsilon(1e-12));
    CHECK(m.macc == doctest::Approx(sacc / nacc).epsilon(1e-12));
    CHECK(m.aacc == doctest::Approx(static_cast<double>(correct) / valid).epsilon(1e-12));
  }
}

TEST_CASE("metrics reject empty and out-of-range input") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(metrics(cm), DataError);
  std::vector<std::uint8_t> gt{0, 5}, pr{0, 0};
  CHECK_THROWS_AS(confusion(pr, gt, 3), DataError);
}

TEST_CASE("confusion matrices merge by addition") {
  std::vector<std::uint8_t> gt1{0, 1}, pr1{0, 0}, gt2{1, 255}, pr2{1, 1};
  auto a = confusion(pr1, gt1, 2);
  auto b = confusion(pr2, gt2, 2);
  a += b;
  CHECK(a.at(0, 0) == 1);
  CHECK(a.at(1, 0) == 1);
  CHECK(a.at(1, 1) == 1);
  CHECK(a.ignored == 1);
}

TEST_CASE("improvement map colors the four pixel states") {
  std::vector<std::uint8_t> gt{0, 0, 0, 255};
  std::vector<std::uint8_t> ours{0, 1, 0, 0};
  std::vector<std::uint8_t> base{1, 0, 0, 0};
  auto rgb = improvement_error_map(ours, base, gt);
  // ours right, base wrong -> green
  CHECK(rgb[0] == 40);
  CHECK(rgb[1] == 180);
  // ours wrong -> red
  CHECK(rgb[3] == 220);
  // both right -> grey
  CHECK(rgb[6] == 180);
  // ignored -> black
  CHECK(rgb[9] == 0);
}

TEST_CASE("csv schemas are stable") {
  auto m = metrics(confusion({0, 1}, {0, 1}, 2));
  auto csv = metrics_csv(m);
  CHECK(csv.rfind("class,iou,acc\n", 0) == 0);
  CHECK(csv.find("__overall__,") != std::string::npos);
  auto acsv = ablation_csv({{0, 1, 0.25}});
  CHECK(acsv == "band,class,delta_iou\n0,1,0.250000\n");
}

TEST_CASE("fnv1a64 matches known vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ull);
}

TEST_CASE("ppm writer emits a valid P6 header") {
  std::vector<std::uint8_t> rgb(2 * 3 * 3, 7);
  std::string path = "/tmp/hsia_test_ppm.ppm";
  write_ppm(path, rgb, 2, 3);
  auto bytes = read_file_bytes(path);
  CHECK(bytes.rfind("P6\n3 2\n255\n", 0) == 0);
  CHECK(bytes.size() == 11 + rgb.size());
  std::remove(path.c_str());
}

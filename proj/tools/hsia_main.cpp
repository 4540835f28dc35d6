#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hsia/gradcheck.hpp"
#include "hsia/train.hpp"

namespace fs = std::filesystem;
using namespace hsia;

namespace {

RunConfig load_run_config(const std::string& profile, const std::string& config_path,
                          std::uint64_t seed, bool seed_given) {
  RunConfig rc = RunConfig::from_profile(profile);
  if (!config_path.empty()) rc.apply(parse_kv(read_file_bytes(config_path)));
  if (seed_given) rc.seed = seed;
  return rc;
}

std::vector<std::string> list_cubes(const std::string& dir) {
  std::vector<std::string> paths;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".hsc1") paths.push_back(e.path().string());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw DataError("no .hsc1 files in " + dir);
  return paths;
}

// fixed palette for prediction images
std::vector<std::uint8_t> class_rgb(const std::vector<std::uint8_t>& labels) {
  static const std::uint8_t pal[][3] = {
      {60, 60, 60},   {230, 80, 60},  {80, 170, 60}, {60, 110, 220}, {230, 200, 60},
      {170, 70, 200}, {80, 210, 210}, {240, 140, 40}, {150, 150, 150}, {110, 60, 30}};
  std::vector<std::uint8_t> rgb(labels.size() * 3);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::uint8_t* c = labels[i] == 255 ? pal[8] : pal[labels[i] % 10];
    if (labels[i] == 255) {
      rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = 0;
    } else {
      rgb[3 * i] = c[0];
      rgb[3 * i + 1] = c[1];
      rgb[3 * i + 2] = c[2];
    }
  }
  return rgb;
}

int cmd_train(const RunConfig& rc, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto scfg = default_synth(rc.data.bands, rc.data.classes, rc.data.height, rc.data.width, rc.seed);
  scfg.noise_std = rc.data.noise_std;
  scfg.ignore_fraction = rc.data.ignore_fraction;
  auto train_set = make_dataset(scfg, rc.data.train_scenes, 0);
  HsiAdapter model(rc.model_config(), rc.seed);
  std::fprintf(stderr, "train: %lld trainable parameters, %d steps\n",
               static_cast<long long>(model.params().count_trainable()), rc.optim.steps);
  auto csv = train_model(model, train_set, rc.optim, rc.data.crop_h, rc.data.crop_w, rc.seed);
  write_file_bytes(out_dir + "/loss.csv", csv);
  checkpoint_save(out_dir + "/checkpoint.ntw", model);
  std::fprintf(stderr, "train: wrote %s/loss.csv and %s/checkpoint.ntw\n", out_dir.c_str(),
               out_dir.c_str());
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& ckpt, const std::string& data_dir,
             const std::string& out_dir) {
  fs::create_directories(out_dir);
  HsiAdapter model(rc.model_config(), rc.seed);
  checkpoint_load(ckpt, model);
  ConfusionMatrix cm(rc.data.classes);
  int idx = 0;
  for (const auto& path : list_cubes(data_dir)) {
    auto cube = load_cube(path);
    auto pred = predict(model, cube);
    cm += confusion(pred, cube.labels, rc.data.classes);
    char name[64];
    std::snprintf(name, sizeof name, "/pred_%04d.ppm", idx++);
    write_ppm(out_dir + name, class_rgb(pred), cube.height, cube.width);
  }
  auto m = metrics(cm);
  write_file_bytes(out_dir + "/metrics.csv", metrics_csv(m));
  std::printf("miou %.4f aacc %.4f macc %.4f\n", m.miou, m.aacc, m.macc);
  return 0;
}

int cmd_ablate(const RunConfig& rc, const std::string& ckpt, const std::string& data_dir,
               const std::string& out_dir) {
  fs::create_directories(out_dir);
  HsiAdapter model(rc.model_config(), rc.seed);
  checkpoint_load(ckpt, model);
  std::vector<HyperCube> scenes;
  for (const auto& path : list_cubes(data_dir)) scenes.push_back(load_cube(path));
  auto rows = band_ablation(model, scenes, rc.data.classes);
  write_file_bytes(out_dir + "/ablation.csv", ablation_csv(rows));
  std::fprintf(stderr, "ablate-bands: wrote %zu rows\n", rows.size());
  return 0;
}

int cmd_gradcheck(bool ops, bool full) {
  if (!ops && !full) ops = full = true;
  int failures = 0;
  auto report = [&](const FdResult& r, const char* lane) {
    std::string status = r.pass ? "ok" : "FAIL " + r.detail;
    std::printf("%-22s %-6s checked=%d max_rel=%.3g %s\n", r.name.c_str(), lane, r.checked,
                r.max_rel, status.c_str());
    if (!r.pass) ++failures;
  };
  if (ops) {
    for (const auto& r : run_op_gradchecks<float>(1e-3)) report(r, "f32");
    for (const auto& r : run_op_gradchecks<double>(1e-6)) report(r, "f64");
  }
  if (full) {
    report(run_full_gradcheck<float>(1e-3), "f32");
    report(run_full_gradcheck<double>(1e-6), "f64");
  }
  if (failures) {
    std::fprintf(stderr, "gradcheck: %d check(s) failed\n", failures);
    return 3;
  }
  return 0;
}

int cmd_synth_data(const RunConfig& rc, const std::string& out_dir) {
  fs::create_directories(out_dir);
  auto scfg = default_synth(rc.data.bands, rc.data.classes, rc.data.height, rc.data.width, rc.seed);
  scfg.noise_std = rc.data.noise_std;
  scfg.ignore_fraction = rc.data.ignore_fraction;
  int count = rc.data.train_scenes + rc.data.val_scenes;
  std::string manifest;
  for (int i = 0; i < count; ++i) {
    auto cube = synth_scene(scfg, i);
    char name[64];
    std::snprintf(name, sizeof name, "scene_%04d.hsc1", i);
    auto bytes = cube_serialize(cube);
    write_file_bytes(out_dir + "/" + name, bytes);
    char line[128];
    std::snprintf(line, sizeof line, "%s\t%016llx\n", name,
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    manifest += line;
  }
  write_file_bytes(out_dir + "/manifest.txt", manifest);
  std::fprintf(stderr, "synth-data: wrote %d scenes + manifest\n", count);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hsia: hyperspectral segmentation adapter"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out", profile = "desk", ckpt, data_dir;
  std::uint64_t seed = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* sub, bool with_out = true) {
    sub->add_option("--config", config_path, "flat key = value config file");
    sub->add_option("--profile", profile)->check(CLI::IsMember({"desk", "full"}));
    sub->add_option("--seed", seed)->each([&](const std::string&) { seed_given = true; });
    if (with_out) sub->add_option("--out", out_dir, "output directory");
  };

  auto* tr = app.add_subcommand("train", "train on synthetic scenes");
  add_common(tr);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev);
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--data", data_dir, "directory of .hsc1 cubes")->required();
  auto* ab = app.add_subcommand("ablate-bands", "per-band sensitivity sweep");
  add_common(ab);
  ab->add_option("--checkpoint", ckpt)->required();
  ab->add_option("--data", data_dir)->required();
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  bool gc_ops = false, gc_full = false;
  gc->add_flag("--ops", gc_ops, "check individual operations");
  gc->add_flag("--full", gc_full, "check the end-to-end loss");
  auto* sd = app.add_subcommand("synth-data", "write synthetic cubes + manifest");
  add_common(sd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gc->parsed()) return cmd_gradcheck(gc_ops, gc_full);
    RunConfig rc = load_run_config(profile, config_path, seed, seed_given);
    if (tr->parsed()) return cmd_train(rc, out_dir);
    if (ev->parsed()) return cmd_eval(rc, ckpt, data_dir, out_dir);
    if (ab->parsed()) return cmd_ablate(rc, ckpt, data_dir, out_dir);
    if (sd->parsed()) return cmd_synth_data(rc, out_dir);
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DataError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

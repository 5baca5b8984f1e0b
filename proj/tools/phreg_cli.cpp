// phreg: bench generation, denoising, distillation, evaluation and ablation sweeps.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "phreg/config.hpp"
#include "phreg/container.hpp"
#include "phreg/pipeline.hpp"
#include "phreg/tta.hpp"

namespace fs = std::filesystem;
using namespace phreg;

namespace {

// Relative output paths land under $PHREG_OUTPUT_DIR when it is set.
fs::path output_path(const std::string& p) {
  fs::path path(p);
  if (path.is_relative())
    if (const char* dir = std::getenv("PHREG_OUTPUT_DIR"); dir && *dir) path = fs::path(dir) / path;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  return path;
}

RunConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  RunConfig cfg = path.empty() ? desk_preset() : RunConfig::load(path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

std::vector<std::int32_t> text_to_ints(const std::string& s) { return {s.begin(), s.end()}; }
std::string ints_to_text(const std::vector<std::int32_t>& v) {
  std::string s;
  for (auto c : v) s.push_back(static_cast<char>(c));
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::vector<std::int32_t> encode_params(const std::vector<AugmentationParams>& params) {
  std::vector<std::int32_t> out;
  for (const auto& p : params) out.insert(out.end(), {p.shift_x, p.shift_y, p.flip ? 1 : 0});
  return out;
}

std::vector<AugmentationParams> decode_params(const ContainerEntry& e) {
  const auto& v = e.i32();
  if (e.extents.size() != 2 || e.extents[1] != 3) throw std::invalid_argument("aug_params must be an n x 3 int32 table");
  std::vector<AugmentationParams> out;
  for (std::size_t i = 0; i < e.extents[0]; ++i) out.push_back({v[3 * i], v[3 * i + 1], v[3 * i + 2] != 0});
  return out;
}

// Accepts the bench-gen output directory or the bench.phrg file inside it.
Bench load_bench(const std::string& where, std::uint64_t* hash) {
  const fs::path p(where);
  const Container c = read_container(fs::is_directory(p) ? p / "bench.phrg" : p);
  if (hash) *hash = c.config_hash();
  return bench_from_container(c);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Register distillation and test-time-augmentation denoising for toy vision transformers"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON run configuration (defaults to the desk preset)")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the run seed");

  auto* bench_cmd = app.add_subcommand("bench-gen", "Generate the synthetic benchmark");
  std::string bench_out = "bench";
  bench_cmd->add_option("--out", bench_out, "Output directory");

  auto* denoise_cmd = app.add_subcommand("denoise", "Denoise teacher features by test-time augmentation");
  std::string image_in, features_in, denoise_out = "denoised.phrg";
  std::optional<std::size_t> views;
  auto* img_opt = denoise_cmd->add_option("--image", image_in, "Input PPM image")->check(CLI::ExistingFile);
  auto* feat_opt = denoise_cmd->add_option("--features", features_in,
                                           "Container with views.<i>.values and aug_params")
                       ->check(CLI::ExistingFile);
  img_opt->excludes(feat_opt);
  denoise_cmd->add_option("--views", views, "Number of augmented views (image mode)");
  denoise_cmd->add_option("--out", denoise_out, "Output container");

  auto* distill_cmd = app.add_subcommand("distill", "Distill registers into a student");
  std::string distill_bench, ckpt_out = "student.phrg", log_out;
  DistillConfig ov;  // holds flag values; only flags given on the command line are applied
  std::string crop, unlock;
  distill_cmd->add_option("--bench", distill_bench, "Benchmark directory or bench.phrg")->required();
  distill_cmd->add_option("--out", ckpt_out, "Checkpoint output");
  distill_cmd->add_option("--log", log_out, "Training log CSV");
  auto* o_aug = distill_cmd->add_option("--augmentations", ov.n_augmentations);
  auto* o_reg = distill_cmd->add_option("--registers", ov.num_registers);
  auto* o_lr0 = distill_cmd->add_option("--initial-lr", ov.initial_lr);
  auto* o_lr1 = distill_cmd->add_option("--final-lr", ov.final_lr);
  auto* o_wd = distill_cmd->add_option("--weight-decay", ov.weight_decay);
  auto* o_b1 = distill_cmd->add_option("--beta1", ov.beta1);
  auto* o_b2 = distill_cmd->add_option("--beta2", ov.beta2);
  auto* o_bs = distill_cmd->add_option("--batch-size", ov.batch_size);
  auto* o_ep = distill_cmd->add_option("--epochs", ov.epochs);
  auto* o_st = distill_cmd->add_option("--steps", ov.steps);
  auto* o_cr = distill_cmd->add_option("--crop", crop)->check(CLI::IsMember({"none", "random_square"}));
  auto* o_res = distill_cmd->add_option("--resolution", ov.resolution);
  auto* o_ct = distill_cmd->add_option("--cache-targets", ov.cache_targets);
  auto* o_ev = distill_cmd->add_option("--eval-every", ov.eval_every);
  auto* o_un = distill_cmd->add_option("--unlock", unlock, "Comma-separated unlock groups");
  auto* o_ds = distill_cmd->add_option("--distill-seed", ov.seed);

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a benchmark");
  std::string model_in, eval_bench, report_out = "report.csv", dump_out;
  bool force = false;
  eval_cmd->add_option("--model", model_in, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--bench", eval_bench, "Benchmark directory or bench.phrg")->required();
  eval_cmd->add_option("--out", report_out, "Metrics CSV");
  eval_cmd->add_option("--dump", dump_out, "Per-token dump container");
  eval_cmd->add_flag("--force", force, "Evaluate even if the checkpoint was trained on another bench");

  auto* ablate_cmd = app.add_subcommand("ablate", "Register-count or augmentation-count sweep");
  std::string sweep, ablate_bench, ablate_out = "ablation.csv";
  ablate_cmd->add_option("--sweep", sweep)->required()->check(CLI::IsMember({"registers", "augmentations"}));
  ablate_cmd->add_option("--bench", ablate_bench, "Benchmark directory or bench.phrg (generated from the config if omitted)");
  ablate_cmd->add_option("--out", ablate_out, "Output CSV");

  if (argc <= 1) {
    std::cerr << app.help();
    return 2;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*bench_cmd) {
      const RunConfig cfg = load_config(config_path, seed);
      const Bench bench = generate_bench(cfg);
      const fs::path dir = output_path(bench_out);
      fs::create_directories(dir / "images");
      write_container(dir / "bench.phrg", bench_to_container(bench, cfg));
      write_text(dir / "config.json", cfg.to_json() + "\n");
      auto dump = [&](const char* split, const std::vector<Scene>& scenes) {
        for (std::size_t i = 0; i < scenes.size(); ++i) {
          std::ostringstream name;
          name << split << '_' << std::setw(3) << std::setfill('0') << i << ".ppm";
          write_ppm(dir / "images" / name.str(), scenes[i].image);
        }
      };
      dump("train", bench.train);
      dump("test", bench.test);
      std::cout << "wrote " << bench.train.size() << " train and " << bench.test.size() << " test scenes to "
                << dir.string() << " (config " << hash_hex(cfg.hash()) << ")\n";
    } else if (*denoise_cmd) {
      RunConfig cfg = load_config(config_path, seed);
      if (views) cfg.distill.n_augmentations = *views;
      cfg.validate();
      Container out;
      const std::size_t k = cfg.vit.patch_size;
      if (!image_in.empty()) {
        const Image image = read_ppm(image_in);
        const Model clean = make_teacher_model(cfg);
        const FeatureFn teacher = make_teacher(cfg, clean);
        Rng rng = make_stream(cfg.seed, "denoise.augment");
        const auto params = sample_aug_params(rng, cfg.distill.n_augmentations, cfg.distill.tta.max_shift_frac,
                                              cfg.distill.tta.flip_prob, k, image.height, image.width);
        put_feature_grid(out, "denoised", denoise_with_params(teacher, image, params, k, cfg.distill.tta.pad_color()));
        out.add_i32("aug_params", {params.size(), 3}, encode_params(params));
      } else if (!features_in.empty()) {
        const Container in = read_container(features_in);
        const auto params = decode_params(in.get("aug_params"));
        std::vector<FeatureGrid> grids;
        for (std::size_t i = 0; i < params.size(); ++i) grids.push_back(get_feature_grid(in, "views." + std::to_string(i)));
        put_feature_grid(out, "denoised", denoise_precomputed(grids, params, k));
        out.add_i32("aug_params", {params.size(), 3}, encode_params(params));
      } else {
        throw std::invalid_argument("denoise needs --image or --features");
      }
      out.set_config_hash(cfg.hash());
      write_container(output_path(denoise_out), out);
    } else if (*distill_cmd) {
      RunConfig cfg = load_config(config_path, seed);
      auto& d = cfg.distill;
      if (*o_aug) d.n_augmentations = ov.n_augmentations;
      if (*o_reg) d.num_registers = ov.num_registers;
      if (*o_lr0) d.initial_lr = ov.initial_lr;
      if (*o_lr1) d.final_lr = ov.final_lr;
      if (*o_wd) d.weight_decay = ov.weight_decay;
      if (*o_b1) d.beta1 = ov.beta1;
      if (*o_b2) d.beta2 = ov.beta2;
      if (*o_bs) d.batch_size = ov.batch_size;
      if (*o_ep) d.epochs = ov.epochs;
      if (*o_st) d.steps = ov.steps;
      if (*o_cr) d.crop = crop == "none" ? CropPolicy::none : CropPolicy::random_square;
      if (*o_res) d.resolution = ov.resolution;
      if (*o_ct) d.cache_targets = ov.cache_targets;
      if (*o_ev) d.eval_every = ov.eval_every;
      if (*o_ds) d.seed = ov.seed;
      if (*o_un) {
        d.unlock_groups.clear();
        std::stringstream ss(unlock);
        for (std::string g; std::getline(ss, g, ',');)
          if (!g.empty()) d.unlock_groups.push_back(g);
      }
      cfg.validate();
      std::uint64_t bench_hash = 0;
      const Bench bench = load_bench(distill_bench, &bench_hash);
      const DistillRun run = distill_from_config(cfg, bench);
      Container ckpt;
      put_model(ckpt, run.student);
      ckpt.add_i32("meta.config_json", {cfg.canonical().size()}, text_to_ints(cfg.canonical()));
      ckpt.add_i32("meta.bench_hash", {2},
                   {static_cast<std::int32_t>(static_cast<std::uint32_t>(bench_hash)),
                    static_cast<std::int32_t>(static_cast<std::uint32_t>(bench_hash >> 32))});
      ckpt.set_config_hash(cfg.hash());
      write_container(output_path(ckpt_out), ckpt);
      if (!log_out.empty()) {
        std::ostringstream csv;
        csv << log_csv_header() << '\n';
        for (const auto& e : run.result.log) csv << log_csv_row(e) << '\n';
        write_text(output_path(log_out), csv.str());
      }
      std::cout << "unlocked " << run.result.mask.unlocked_count << " of " << run.result.mask.total_count
                << " parameters; " << run.result.log.size() << " steps";
      if (!run.result.log.empty()) std::cout << "; final loss " << run.result.log.back().loss;
      std::cout << '\n';
    } else if (*eval_cmd) {
      const Container ckpt = read_container(model_in);
      const RunConfig cfg = RunConfig::from_json(ints_to_text(ckpt.get("meta.config_json").i32()));
      std::uint64_t bench_hash = 0;
      const Bench bench = load_bench(eval_bench, &bench_hash);
      const auto& bh = ckpt.get("meta.bench_hash").i32();
      const std::uint64_t trained_on = static_cast<std::uint64_t>(static_cast<std::uint32_t>(bh.at(0))) |
                                       (static_cast<std::uint64_t>(static_cast<std::uint32_t>(bh.at(1))) << 32);
      if (trained_on != bench_hash && !force) {
        std::cerr << "error: checkpoint was trained on bench " << hash_hex(trained_on) << " but " << eval_bench
                  << " has config " << hash_hex(bench_hash) << " (pass --force to evaluate anyway)\n";
        return 3;
      }
      const Model student = get_model(ckpt);
      const Model clean = make_teacher_model(cfg);
      const MetricsReport report = evaluate_model(cfg, student, bench, make_teacher(cfg, clean));
      write_text(output_path(report_out), MetricsReport::csv_header() + "\n" + report.csv_row() + "\n");
      if (!dump_out.empty()) {
        Container dump;
        for (std::size_t i = 0; i < bench.test.size(); ++i) {
          const FeatureGrid f = forward_features(student, bench.test[i].image);
          const auto norms = token_norms(f);
          const std::string p = "test." + std::to_string(i);
          dump.add_f32(p + ".norms", {f.rows, f.cols}, {norms.begin(), norms.end()});
          put_feature_grid(dump, p + ".features", f);
        }
        dump.set_config_hash(cfg.hash());
        write_container(output_path(dump_out), dump);
      }
      std::cout << MetricsReport::csv_header() << '\n' << report.csv_row() << '\n';
    } else if (*ablate_cmd) {
      const RunConfig cfg = load_config(config_path, seed);
      const Bench bench = ablate_bench.empty() ? generate_bench(cfg) : load_bench(ablate_bench, nullptr);
      const auto rows = sweep == "registers" ? ablate_registers(cfg, bench) : ablate_augmentations(cfg, bench);
      std::ostringstream csv;
      csv << ablation_csv_header() << '\n';
      for (const auto& r : rows) csv << ablation_csv_row(r) << '\n';
      write_text(output_path(ablate_out), csv.str());
      std::cout << csv.str();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

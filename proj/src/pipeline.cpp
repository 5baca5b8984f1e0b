#include "phreg/pipeline.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "phreg/rng.hpp"

namespace phreg {

std::vector<Image> Bench::train_images() const {
  std::vector<Image> out;
  for (const auto& s : train) out.push_back(s.image);
  return out;
}

std::vector<Image> Bench::test_images() const {
  std::vector<Image> out;
  for (const auto& s : test) out.push_back(s.image);
  return out;
}

Bench generate_bench(const RunConfig& cfg) {
  Bench b;
  auto split = [&](const char* name, std::size_t n, std::vector<Scene>& out) {
    for (std::size_t i = 0; i < n; ++i) {
      SceneSpec spec = cfg.scene;
      spec.seed = derive_seed(cfg.seed, name, i, cfg.scene.seed);
      out.push_back(gen_scene(spec));
    }
  };
  split("bench.train", cfg.bench.num_train, b.train);
  split("bench.test", cfg.bench.num_test, b.test);
  b.prototypes = class_prototypes(cfg.scene.num_classes, cfg.scene.prototype_dim, cfg.scene.palette_seed);
  return b;
}

Container bench_to_container(const Bench& bench, const RunConfig& cfg) {
  Container c;
  c.add_i32("bench.counts", {2},
            {static_cast<std::int32_t>(bench.train.size()), static_cast<std::int32_t>(bench.test.size())});
  std::vector<float> protos;
  for (const auto& p : bench.prototypes) protos.insert(protos.end(), p.begin(), p.end());
  const std::uint64_t dim = bench.prototypes.empty() ? 0 : bench.prototypes.front().size();
  c.add_f32("prototypes", {bench.prototypes.size(), dim}, protos);
  auto put = [&](const std::string& split, const std::vector<Scene>& scenes) {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const std::string p = split + "." + std::to_string(i);
      put_image(c, p, scenes[i].image);
      c.add_i32(p + ".labels", {scenes[i].rows, scenes[i].cols}, scenes[i].labels);
    }
  };
  put("train", bench.train);
  put("test", bench.test);
  c.set_config_hash(cfg.hash());
  return c;
}

Bench bench_from_container(const Container& c) {
  Bench b;
  const auto& counts = c.get("bench.counts").i32();
  const auto& pe = c.get("prototypes");
  for (std::uint64_t i = 0; i < pe.extents.at(0); ++i) {
    const auto& v = pe.f32();
    b.prototypes.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(i * pe.extents[1]),
                              v.begin() + static_cast<std::ptrdiff_t>((i + 1) * pe.extents[1]));
  }
  auto get = [&](const std::string& split, std::int32_t n, std::vector<Scene>& out) {
    for (std::int32_t i = 0; i < n; ++i) {
      const std::string p = split + "." + std::to_string(i);
      Scene s;
      s.image = get_image(c, p);
      const auto& le = c.get(p + ".labels");
      s.rows = le.extents.at(0);
      s.cols = le.extents.at(1);
      s.labels = le.i32();
      s.prototypes = b.prototypes;
      out.push_back(std::move(s));
    }
  };
  get("train", counts.at(0), b.train);
  get("test", counts.at(1), b.test);
  return b;
}

Model make_teacher_model(const RunConfig& cfg) {
  ViTConfig vc = cfg.vit;
  vc.num_registers = 0;
  return Model::random(vc, derive_seed(cfg.seed, "teacher.init"));
}

FeatureFn make_teacher(const RunConfig& cfg, const Model& clean) { return noisy_teacher(clean, cfg.artifact); }

DistillRun distill_from_config(const RunConfig& cfg, const Bench& bench) {
  const Model clean = make_teacher_model(cfg);
  const FeatureFn teacher = make_teacher(cfg, clean);
  DistillConfig dc = cfg.distill;
  dc.seed = derive_seed(cfg.seed, "distill", cfg.distill.seed);
  DistillRun run{init_student_from_teacher(clean, dc.num_registers, derive_seed(dc.seed, "student.init")), {}};
  run.result = run_distillation(teacher, run.student, bench.train_images(), dc);
  return run;
}

MetricsReport evaluate_model(const RunConfig& cfg, const Model& model, const Bench& bench,
                             const FeatureFn& teacher) {
  MetricsReport r;
  r.seed = cfg.seed;
  r.config_hash = cfg.hash();
  const EvalSet eval = make_eval_set(teacher, bench.test_images(), cfg.vit.patch_size, cfg.distill.tta,
                                     cfg.distill.n_augmentations, derive_seed(cfg.seed, "eval"));
  std::vector<FeatureGrid> test_feats;
  for (const auto& img : eval.images) test_feats.push_back(forward_features(model, img));
  r.cosine = cosine_percentiles(test_feats, eval.targets);
  r.norms = token_norm_stats(test_feats);

  std::vector<FeatureGrid> train_feats;
  std::vector<std::vector<std::int32_t>> train_labels, test_labels;
  for (const auto& s : bench.train) {
    train_feats.push_back(forward_features(model, s.image));
    train_labels.push_back(s.labels);
  }
  for (const auto& s : bench.test) test_labels.push_back(s.labels);
  const std::size_t classes = cfg.scene.num_classes;
  if (!train_feats.empty() && !test_feats.empty()) {
    const auto probe = linear_probe(train_feats, train_labels, test_feats, test_labels, classes);
    r.miou = probe.scores.miou;
    r.macc = probe.scores.macc;

    const std::size_t d = train_feats.front().dim;
    std::vector<std::vector<double>> mean(classes, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < train_feats.size(); ++i)
      for (std::size_t t = 0; t < train_feats[i].tokens(); ++t) {
        const auto tok = train_feats[i].token(t);
        auto& m = mean[static_cast<std::size_t>(train_labels[i][t])];
        for (std::size_t j = 0; j < d; ++j) m[j] += tok[j];
      }
    std::vector<std::vector<float>> queries(classes, std::vector<float>(d, 0.0f));
    for (std::size_t c = 0; c < classes; ++c) {
      double n2 = 0.0;
      for (double x : mean[c]) n2 += x * x;
      const double inv = n2 > 0.0 ? 1.0 / std::sqrt(n2) : 0.0;
      for (std::size_t j = 0; j < d; ++j) queries[c][j] = static_cast<float>(mean[c][j] * inv);
    }
    std::vector<std::vector<std::vector<double>>> heatmaps;
    for (const auto& f : test_feats) {
      std::vector<std::vector<double>> per_class;
      for (const auto& q : queries) per_class.push_back(zero_shot_heatmap(f, q));
      heatmaps.push_back(std::move(per_class));
    }
    r.pearson = pearson_zero_shot(heatmaps, test_labels);
  }
  return r;
}

namespace {

EvalSet ablation_eval_set(const RunConfig& cfg, const Bench& bench) {
  const Model clean = make_teacher_model(cfg);
  return make_eval_set(make_teacher(cfg, clean), bench.test_images(), cfg.vit.patch_size, cfg.distill.tta,
                       cfg.distill.n_augmentations, derive_seed(cfg.seed, "eval"));
}

AblationRow ablation_run(const RunConfig& cfg, const Bench& bench, const EvalSet& eval, const std::string& sweep,
                         std::size_t value) {
  const DistillRun run = distill_from_config(cfg, bench);
  AblationRow row;
  row.sweep = sweep;
  row.value = value;
  row.cosine = evaluate_student(run.student, eval);
  row.final_loss = run.result.log.empty() ? 0.0 : run.result.log.back().loss;
  return row;
}

}  // namespace

std::vector<AblationRow> ablate_registers(const RunConfig& cfg, const Bench& bench,
                                          const std::vector<std::size_t>& counts) {
  const EvalSet eval = ablation_eval_set(cfg, bench);
  std::vector<AblationRow> rows;
  for (auto m : counts) {
    RunConfig c = cfg;
    c.distill.num_registers = m;
    rows.push_back(ablation_run(c, bench, eval, "registers", m));
  }
  return rows;
}

std::vector<AblationRow> ablate_augmentations(const RunConfig& cfg, const Bench& bench, std::size_t max_views) {
  // Every row is scored against the same targets, built with the base view count.
  const EvalSet eval = ablation_eval_set(cfg, bench);
  std::vector<AblationRow> rows;
  for (std::size_t n = 1; n <= max_views; ++n) {
    RunConfig c = cfg;
    c.distill.n_augmentations = n;
    rows.push_back(ablation_run(c, bench, eval, "augmentations", n));
  }
  return rows;
}

std::string ablation_csv_header() {
  return "sweep,value,cos_mean,cos_p50,cos_p70,cos_p90,cos_p95,cos_p99,final_loss";
}

std::string ablation_csv_row(const AblationRow& row) {
  std::ostringstream os;
  os << std::setprecision(9) << row.sweep << ',' << row.value << ',' << row.cosine.mean;
  for (double v : row.cosine.values) os << ',' << v;
  os << ',' << row.final_loss;
  return os.str();
}

}  // namespace phreg

#include "phreg/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "phreg/rng.hpp"

namespace phreg {

using json = nlohmann::json;

namespace {

// Reads declared keys from one JSON object and rejects anything else.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }
  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw std::invalid_argument(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

const char* crop_name(CropPolicy p) { return p == CropPolicy::none ? "none" : "random_square"; }
CropPolicy crop_from(const std::string& s) {
  if (s == "none") return CropPolicy::none;
  if (s == "random_square") return CropPolicy::random_square;
  throw std::invalid_argument("unknown crop policy '" + s + "'");
}
const char* pad_name(PadMode p) { return p == PadMode::mean_color ? "mean_color" : "white"; }
PadMode pad_from(const std::string& s) {
  if (s == "mean_color") return PadMode::mean_color;
  if (s == "white") return PadMode::white;
  throw std::invalid_argument("unknown pad mode '" + s + "'");
}
const char* kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::disk: return "disk";
    case ShapeKind::stripe: return "stripe";
  }
  return "?";
}
ShapeKind kind_from(const std::string& s) {
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "disk") return ShapeKind::disk;
  if (s == "stripe") return ShapeKind::stripe;
  throw std::invalid_argument("unknown shape kind '" + s + "'");
}

json to_j(const RunConfig& c) {
  json j;
  j["schema_version"] = kConfigSchemaVersion;
  j["seed"] = c.seed;
  const auto& v = c.vit;
  j["vit"] = {{"image_height", v.image_height}, {"image_width", v.image_width}, {"patch_size", v.patch_size},
              {"embed_dim", v.embed_dim},       {"depth", v.depth},             {"heads", v.heads},
              {"mlp_ratio", v.mlp_ratio},       {"head_mode", to_string(v.head_mode)}};
  j["vit"]["neighborhood_sigma"] = v.neighborhood_sigma ? json(*v.neighborhood_sigma) : json(nullptr);
  const auto& d = c.distill;
  j["distill"] = {{"n_augmentations", d.n_augmentations},
                  {"num_registers", d.num_registers},
                  {"initial_lr", d.initial_lr},
                  {"final_lr", d.final_lr},
                  {"weight_decay", d.weight_decay},
                  {"betas", {d.beta1, d.beta2}},
                  {"adam_eps", d.adam_eps},
                  {"batch_size", d.batch_size},
                  {"epochs", d.epochs},
                  {"steps", d.steps},
                  {"crop", crop_name(d.crop)},
                  {"resolution", d.resolution},
                  {"cache_targets", d.cache_targets},
                  {"eval_every", d.eval_every},
                  {"unlock_groups", d.unlock_groups},
                  {"seed", d.seed}};
  j["distill"]["tta"] = {{"max_shift_frac", d.tta.max_shift_frac},
                         {"flip_prob", d.tta.flip_prob},
                         {"pad_mode", pad_name(d.tta.pad_mode)},
                         {"mean_color", d.tta.mean_color}};
  const auto& a = c.artifact;
  j["artifact"] = {{"mode", to_string(a.mode)},
                   {"density", a.density},
                   {"amplitude", a.amplitude},
                   {"anchor", "token_grid"},
                   {"zero_mean", a.zero_mean},
                   {"seed", a.seed}};
  const auto& s = c.scene;
  std::vector<std::string> kinds;
  for (auto k : s.kinds) kinds.emplace_back(kind_name(k));
  j["scene"] = {{"height", s.height},
                {"width", s.width},
                {"patch_size", s.patch_size},
                {"num_shapes", s.num_shapes},
                {"kinds", kinds},
                {"num_classes", s.num_classes},
                {"prototype_dim", s.prototype_dim},
                {"palette_seed", s.palette_seed},
                {"seed", s.seed}};
  j["bench"] = {{"num_train", c.bench.num_train}, {"num_test", c.bench.num_test}};
  return j;
}

}  // namespace

std::string RunConfig::canonical() const { return to_j(*this).dump(); }

std::uint64_t RunConfig::hash() const { return fnv1a64(canonical()); }

std::string RunConfig::to_json(int indent) const { return to_j(*this).dump(indent); }

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  ObjectReader root(j, "config");
  int version = -1;
  root.get("schema_version", version);
  if (version != kConfigSchemaVersion)
    throw std::invalid_argument("config schema_version must be " + std::to_string(kConfigSchemaVersion));
  root.get("seed", c.seed);

  if (const json* v = root.child("vit")) {
    ObjectReader r(*v, "vit");
    r.get("image_height", c.vit.image_height);
    r.get("image_width", c.vit.image_width);
    r.get("patch_size", c.vit.patch_size);
    r.get("embed_dim", c.vit.embed_dim);
    r.get("depth", c.vit.depth);
    r.get("heads", c.vit.heads);
    r.get("mlp_ratio", c.vit.mlp_ratio);
    std::string head = to_string(c.vit.head_mode);
    r.get("head_mode", head);
    c.vit.head_mode = head_mode_from_string(head);
    if (const json* s = r.child("neighborhood_sigma"); s && !s->is_null()) c.vit.neighborhood_sigma = s->get<double>();
    r.finish();
  }
  if (const json* v = root.child("distill")) {
    auto& d = c.distill;
    ObjectReader r(*v, "distill");
    r.get("n_augmentations", d.n_augmentations);
    r.get("num_registers", d.num_registers);
    r.get("initial_lr", d.initial_lr);
    r.get("final_lr", d.final_lr);
    r.get("weight_decay", d.weight_decay);
    std::vector<double> betas{d.beta1, d.beta2};
    r.get("betas", betas);
    if (betas.size() != 2) throw std::invalid_argument("distill.betas: expected two values");
    d.beta1 = betas[0];
    d.beta2 = betas[1];
    r.get("adam_eps", d.adam_eps);
    r.get("batch_size", d.batch_size);
    r.get("epochs", d.epochs);
    r.get("steps", d.steps);
    std::string crop = crop_name(d.crop);
    r.get("crop", crop);
    d.crop = crop_from(crop);
    r.get("resolution", d.resolution);
    r.get("cache_targets", d.cache_targets);
    r.get("eval_every", d.eval_every);
    r.get("unlock_groups", d.unlock_groups);
    r.get("seed", d.seed);
    if (const json* t = r.child("tta")) {
      ObjectReader tr(*t, "distill.tta");
      tr.get("max_shift_frac", d.tta.max_shift_frac);
      tr.get("flip_prob", d.tta.flip_prob);
      std::string pad = pad_name(d.tta.pad_mode);
      tr.get("pad_mode", pad);
      d.tta.pad_mode = pad_from(pad);
      tr.get("mean_color", d.tta.mean_color);
      tr.finish();
    }
    r.finish();
  }
  if (const json* v = root.child("artifact")) {
    auto& a = c.artifact;
    ObjectReader r(*v, "artifact");
    std::string mode = to_string(a.mode);
    r.get("mode", mode);
    a.mode = artifact_mode_from_string(mode);
    r.get("density", a.density);
    r.get("amplitude", a.amplitude);
    std::string anchor = "token_grid";
    r.get("anchor", anchor);
    if (anchor != "token_grid") throw std::invalid_argument("artifact.anchor: only token_grid is supported");
    r.get("zero_mean", a.zero_mean);
    r.get("seed", a.seed);
    r.finish();
  }
  if (const json* v = root.child("scene")) {
    auto& s = c.scene;
    ObjectReader r(*v, "scene");
    r.get("height", s.height);
    r.get("width", s.width);
    r.get("patch_size", s.patch_size);
    r.get("num_shapes", s.num_shapes);
    if (const json* k = r.child("kinds")) {
      s.kinds.clear();
      for (const auto& name : k->get<std::vector<std::string>>()) s.kinds.push_back(kind_from(name));
    }
    r.get("num_classes", s.num_classes);
    r.get("prototype_dim", s.prototype_dim);
    r.get("palette_seed", s.palette_seed);
    r.get("seed", s.seed);
    r.finish();
  }
  if (const json* v = root.child("bench")) {
    ObjectReader r(*v, "bench");
    r.get("num_train", c.bench.num_train);
    r.get("num_test", c.bench.num_test);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return from_json(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << to_json() << '\n';
}

void RunConfig::validate() const {
  vit.validate();
  distill.validate();
  if (scene.patch_size != vit.patch_size)
    throw std::invalid_argument("scene.patch_size must equal vit.patch_size");
  if (scene.height % scene.patch_size || scene.width % scene.patch_size)
    throw std::invalid_argument("scene extents must be divisible by the patch size");
  if (scene.num_classes > scene.prototype_dim)
    throw std::invalid_argument("scene.num_classes exceeds scene.prototype_dim");
  if (!(artifact.density > 0.0 && artifact.density < 1.0))
    throw std::invalid_argument("artifact.density must lie in (0, 1)");
  if (artifact.amplitude < 0.0) throw std::invalid_argument("artifact.amplitude must be non-negative");
}

RunConfig desk_preset() {
  RunConfig c;
  c.seed = 0;
  c.vit.image_height = c.vit.image_width = 32;
  c.vit.patch_size = 4;
  c.vit.embed_dim = 32;
  c.vit.depth = 2;
  c.vit.heads = 4;
  c.vit.mlp_ratio = 2.0;
  c.scene.height = c.scene.width = 32;
  c.scene.patch_size = 4;
  c.scene.num_shapes = 3;
  c.scene.num_classes = 4;
  c.scene.prototype_dim = 32;
  c.distill.steps = 200;
  c.distill.batch_size = 4;
  c.distill.cache_targets = true;
  c.bench.num_train = 16;
  c.bench.num_test = 4;
  return c;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

}  // namespace phreg

#include "phreg/distill.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace phreg {

bool UnlockMask::unlocks(const ParameterRef<float>& param, std::size_t depth) const {
  switch (param.group) {
    case ParamGroup::registers: return registers;
    case ParamGroup::positional_embeddings: return positional_embeddings;
    case ParamGroup::patch_embedding: return patch_embedding;
    case ParamGroup::class_token: return class_token;
    case ParamGroup::final_norm: return final_norm;
    case ParamGroup::block: {
      const auto b = static_cast<std::size_t>(param.block);
      if (final_block && b + 1 == depth) return true;
      return std::find(blocks.begin(), blocks.end(), b) != blocks.end();
    }
  }
  return false;
}

std::vector<std::string> UnlockMask::groups() const {
  std::vector<std::string> out;
  if (registers) out.push_back("registers");
  if (positional_embeddings) out.push_back("positional_embeddings");
  if (patch_embedding) out.push_back("patch_embedding");
  if (final_block) out.push_back("final_block");
  if (class_token) out.push_back("class_token");
  if (final_norm) out.push_back("final_norm");
  for (auto b : blocks) out.push_back("block." + std::to_string(b));
  return out;
}

std::vector<std::string> default_unlock_groups() {
  return {"registers", "positional_embeddings", "patch_embedding", "final_block"};
}

UnlockMask build_unlock_mask(Model& model, const std::vector<std::string>& groups) {
  UnlockMask mask;
  const std::size_t depth = model.config.depth;
  for (const auto& g : groups) {
    if (g == "registers") {
      mask.registers = true;
    } else if (g == "positional_embeddings") {
      mask.positional_embeddings = true;
    } else if (g == "patch_embedding") {
      mask.patch_embedding = true;
    } else if (g == "final_block") {
      mask.final_block = true;
    } else if (g == "class_token") {
      mask.class_token = true;
    } else if (g == "final_norm") {
      mask.final_norm = true;
    } else if (g.rfind("block.", 0) == 0) {
      std::size_t idx = 0, used = 0;
      try {
        idx = std::stoul(g.substr(6), &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != g.size() - 6 || idx >= depth)
        throw std::invalid_argument("unknown unlock group '" + g + "' (model has " + std::to_string(depth) +
                                    " blocks)");
      if (std::find(mask.blocks.begin(), mask.blocks.end(), idx) == mask.blocks.end()) mask.blocks.push_back(idx);
    } else {
      throw std::invalid_argument("unknown unlock group '" + g + "'");
    }
  }
  std::sort(mask.blocks.begin(), mask.blocks.end());
  // Registers always train when the student has them.
  if (model.registers) mask.registers = true;

  for (auto& p : model.parameters()) {
    const bool on = mask.unlocks(p, depth);
    p.tensor.set_requires_grad(on);
    p.tensor.zero_grad();
    mask.total_count += p.tensor.numel();
    if (on) mask.unlocked_count += p.tensor.numel();
  }
  return mask;
}

void DistillConfig::validate() const {
  if (!(initial_lr > 0.0) || !(final_lr > 0.0) || final_lr > initial_lr)
    throw std::invalid_argument("learning rates must satisfy 0 < final_lr <= initial_lr");
  if (n_augmentations == 0) throw std::invalid_argument("n_augmentations must be at least 1");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("Adam betas must lie in [0, 1)");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (crop == CropPolicy::random_square && resolution == 0)
    throw std::invalid_argument("random_square crop needs a positive resolution");
}

double lr_schedule(std::size_t step, std::size_t total_steps, const DistillConfig& cfg) {
  if (total_steps == 0) throw std::invalid_argument("lr_schedule: total_steps must be at least 1");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return cfg.initial_lr * std::pow(cfg.final_lr / cfg.initial_lr, frac);
}

template <typename T>
BasicTensor<T> distill_loss(const BasicTensor<T>& target, const BasicTensor<T>& predicted) {
  if (target.shape() != predicted.shape() || target.rank() != 2)
    throw ShapeError("distill_loss: target " + shape_str(target.shape()) + " vs predicted " +
                     shape_str(predicted.shape()));
  const BasicTensor<T> t = target.detach();
  const auto cos = mean_all(cosine_rows(predicted, t, T(1e-8)));
  const auto diff = sub(predicted, t);
  const auto mse = mean_all(mul(diff, diff));
  return add(add_scalar(scale(cos, T(-1)), T(1)), mse);
}

double distill_loss(const FeatureGrid& target, const FeatureGrid& predicted) {
  if (!target.same_extents(predicted)) throw std::invalid_argument("distill_loss: extents differ");
  const auto cos = patch_cosines(predicted, target);
  double mse = 0.0;
  for (std::size_t i = 0; i < target.values.size(); ++i) {
    const double d = double(predicted.values[i]) - target.values[i];
    mse += d * d;
  }
  mse /= static_cast<double>(std::max<std::size_t>(1, target.values.size()));
  const double mean_cos = std::accumulate(cos.begin(), cos.end(), 0.0) / static_cast<double>(cos.size());
  return 1.0 - mean_cos + mse;
}

Image random_square_crop(const Image& image, std::size_t side, Rng& rng) {
  if (side == 0) throw std::invalid_argument("random_square_crop: side must be positive");
  const Image resized = std::min(image.height, image.width) == side ? image : resize_shorter_side(image, side);
  if (side > resized.height || side > resized.width)
    throw std::invalid_argument("random_square_crop: side " + std::to_string(side) + " exceeds image extents");
  std::uniform_int_distribution<std::size_t> top(0, resized.height - side), left(0, resized.width - side);
  const std::size_t y = top(rng);
  const std::size_t x = left(rng);
  return crop(resized, y, x, side, side);
}

AdamW::AdamW(const Model& model, const UnlockMask& mask, const DistillConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
  for (const auto& p : model.parameters()) {
    if (!mask.unlocks(p, model.config.depth)) continue;
    const bool decay = p.group != ParamGroup::registers && p.group != ParamGroup::positional_embeddings && !p.is_norm;
    slots_.push_back({p.tensor, std::vector<float>(p.tensor.numel(), 0.0f),
                      std::vector<float>(p.tensor.numel(), 0.0f), decay});
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    auto data = s.param.mutable_data();
    if (!s.param.has_grad()) continue;
    const auto g = s.param.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      s.m[i] = static_cast<float>(beta1_ * s.m[i] + (1.0 - beta1_) * g[i]);
      s.v[i] = static_cast<float>(beta2_ * s.v[i] + (1.0 - beta2_) * double(g[i]) * g[i]);
      const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
      double p = data[i];
      if (s.decay) p -= lr * weight_decay_ * p;
      p -= lr * mhat / (std::sqrt(vhat) + eps_);
      data[i] = static_cast<float>(p);
    }
    s.param.zero_grad();
  }
}

double train_step(Model& student, AdamW& optimizer, const std::vector<Image>& images,
                  const std::vector<FeatureGrid>& targets, double lr) {
  if (images.empty() || images.size() != targets.size())
    throw std::invalid_argument("train_step: need one target per image");
  std::vector<Tensor> losses;
  losses.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i)
    losses.push_back(reshape(distill_loss(from_feature_grid(targets[i]), forward_dense(student, images[i])), {1}));
  const Tensor loss = mean_all(concat(losses, 0));
  const double value = loss.item();
  if (!std::isfinite(value))
    throw std::runtime_error("train_step: non-finite loss " + std::to_string(value) + " at optimizer step " +
                             std::to_string(optimizer.steps_taken() + 1));
  backward(loss);
  optimizer.step(lr);
  return value;
}

EvalSet make_eval_set(const FeatureFn& teacher, const std::vector<Image>& images, std::size_t patch_size,
                      const TtaConfig& tta, std::size_t n_augmentations, std::uint64_t seed) {
  EvalSet set;
  TtaConfig cfg = tta;
  cfg.num_views = n_augmentations;
  for (std::size_t i = 0; i < images.size(); ++i) {
    Rng rng = make_stream(seed, "eval.augment", i);
    set.images.push_back(images[i]);
    set.targets.push_back(denoise(teacher, images[i], patch_size, cfg, rng));
  }
  return set;
}

CosinePercentiles evaluate_student(const Model& student, const EvalSet& eval) {
  std::vector<FeatureGrid> preds;
  preds.reserve(eval.images.size());
  for (const auto& img : eval.images) preds.push_back(forward_features(student, img));
  return cosine_percentiles(preds, eval.targets);
}

DistillResult run_distillation(const FeatureFn& teacher, Model& student, const std::vector<Image>& dataset,
                               const DistillConfig& cfg, const EvalSet* eval) {
  cfg.validate();
  DistillResult result;
  result.mask = build_unlock_mask(student, cfg.unlock_groups);
  if (dataset.empty() || cfg.epochs == 0) return result;

  const std::size_t k = student.config.patch_size;
  const std::size_t batch = std::min(cfg.batch_size, dataset.size());
  const std::size_t per_epoch = (dataset.size() + batch - 1) / batch;
  const std::size_t total = cfg.steps > 0 ? cfg.steps : cfg.epochs * per_epoch;
  TtaConfig tta = cfg.tta;
  tta.num_views = cfg.n_augmentations;

  auto prepare = [&](std::size_t epoch, std::size_t index) {
    Image img = dataset[index];
    if (cfg.crop == CropPolicy::random_square) {
      Rng crop_rng = make_stream(cfg.seed, "distill.crop", epoch, index);
      img = random_square_crop(img, cfg.resolution, crop_rng);
    }
    return img;
  };
  auto target_for = [&](const Image& img, std::size_t epoch, std::size_t index) {
    Rng aug_rng = make_stream(cfg.seed, "distill.augment", epoch, index);
    return denoise(teacher, img, k, tta, aug_rng);
  };

  std::vector<std::optional<std::pair<Image, FeatureGrid>>> cache(cfg.cache_targets ? dataset.size() : 0);
  AdamW optimizer(student, result.mask, cfg);
  std::vector<std::size_t> order(dataset.size());
  std::size_t epoch = static_cast<std::size_t>(-1);

  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t e = step / per_epoch, b = step % per_epoch;
    if (e != epoch) {
      epoch = e;
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle = make_stream(cfg.seed, "distill.shuffle", epoch);
      std::shuffle(order.begin(), order.end(), shuffle);
    }
    std::vector<Image> images;
    std::vector<FeatureGrid> targets;
    for (std::size_t j = b * batch; j < std::min(dataset.size(), (b + 1) * batch); ++j) {
      const std::size_t idx = order[j];
      if (cfg.cache_targets) {
        if (!cache[idx]) {
          Image img = prepare(0, idx);
          FeatureGrid tgt = target_for(img, 0, idx);
          cache[idx].emplace(std::move(img), std::move(tgt));
        }
        images.push_back(cache[idx]->first);
        targets.push_back(cache[idx]->second);
      } else {
        images.push_back(prepare(epoch, idx));
        targets.push_back(target_for(images.back(), epoch, idx));
      }
    }
    LogEntry entry;
    entry.step = step;
    entry.epoch = epoch;
    entry.lr = lr_schedule(step, total, cfg);
    entry.loss = train_step(student, optimizer, images, targets, entry.lr);
    if (eval && cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == total))
      entry.eval = evaluate_student(student, *eval);
    result.log.push_back(std::move(entry));
  }
  return result;
}

std::string log_csv_header() { return "step,epoch,loss,lr,eval_cos_mean,eval_cos_p50,eval_cos_p99"; }

std::string log_csv_row(const LogEntry& e) {
  std::ostringstream os;
  os << std::setprecision(9) << e.step << ',' << e.epoch << ',' << e.loss << ',' << e.lr;
  if (e.eval)
    os << ',' << e.eval->mean << ',' << e.eval->at(50) << ',' << e.eval->at(99);
  else
    os << ",,,";
  return os.str();
}

template BasicTensor<float> distill_loss<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template BasicTensor<double> distill_loss<double>(const BasicTensor<double>&, const BasicTensor<double>&);

}  // namespace phreg

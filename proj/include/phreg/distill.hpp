#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "phreg/metrics.hpp"
#include "phreg/rng.hpp"
#include "phreg/tta.hpp"
#include "phreg/vit.hpp"

namespace phreg {

/// Which student parameter groups receive updates.
struct UnlockMask {
  bool registers = false;
  bool positional_embeddings = false;
  bool patch_embedding = false;
  bool final_block = false;
  bool class_token = false;
  bool final_norm = false;
  std::vector<std::size_t> blocks;  // extra blocks unlocked by index

  std::size_t unlocked_count = 0;
  std::size_t total_count = 0;

  bool unlocks(const ParameterRef<float>& param, std::size_t depth) const;
  /// Group names in canonical order, e.g. {"registers", "block.3"}.
  std::vector<std::string> groups() const;
};

/// The default set: registers, positional embeddings, patch embedding, final block.
std::vector<std::string> default_unlock_groups();

/// Accepts registers, positional_embeddings, patch_embedding, final_block,
/// class_token, final_norm and block.N. Sets requires_grad on the model's
/// parameters to match and fills in the parameter counts.
UnlockMask build_unlock_mask(Model& model, const std::vector<std::string>& groups);

enum class CropPolicy { none, random_square };

struct DistillConfig {
  std::size_t n_augmentations = 10;
  std::size_t num_registers = 16;
  double initial_lr = 3e-4;
  double final_lr = 1e-5;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  std::size_t steps = 2000;  // when nonzero, overrides epochs
  CropPolicy crop = CropPolicy::none;
  std::size_t resolution = 0;  // shorter side after resize and square side for cropping
  bool cache_targets = false;  // reuse one denoised target per image
  std::size_t eval_every = 0;  // 0 disables periodic evaluation
  std::vector<std::string> unlock_groups = default_unlock_groups();
  TtaConfig tta;
  std::uint64_t seed = 0;

  void validate() const;
};

double lr_schedule(std::size_t step, std::size_t total_steps, const DistillConfig& cfg);

/// 1 - mean per-patch cosine + mean squared error, differentiable in `predicted`.
template <typename T>
BasicTensor<T> distill_loss(const BasicTensor<T>& target, const BasicTensor<T>& predicted);
double distill_loss(const FeatureGrid& target, const FeatureGrid& predicted);

/// Resizes the shorter side to `side` (bicubic) and takes a uniformly placed side x side window.
Image random_square_crop(const Image& image, std::size_t side, Rng& rng);

/// Adam with decoupled weight decay over the unlocked parameters of one model.
class AdamW {
 public:
  AdamW(const Model& model, const UnlockMask& mask, const DistillConfig& cfg);
  void step(double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor param;
    std::vector<float> m, v;
    bool decay = true;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

/// One optimizer update on a batch of (image, target) pairs. Throws on a non-finite loss.
double train_step(Model& student, AdamW& optimizer, const std::vector<Image>& images,
                  const std::vector<FeatureGrid>& targets, double lr);

struct LogEntry {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::optional<CosinePercentiles> eval;
};

struct DistillResult {
  std::vector<LogEntry> log;
  UnlockMask mask;
};

/// Images and fixed targets used for the periodic cosine evaluation.
struct EvalSet {
  std::vector<Image> images;
  std::vector<FeatureGrid> targets;
};

/// Denoised teacher targets for evaluation, one fixed augmentation stream per image.
EvalSet make_eval_set(const FeatureFn& teacher, const std::vector<Image>& images, std::size_t patch_size,
                      const TtaConfig& tta, std::size_t n_augmentations, std::uint64_t seed);

CosinePercentiles evaluate_student(const Model& student, const EvalSet& eval);

DistillResult run_distillation(const FeatureFn& teacher, Model& student, const std::vector<Image>& dataset,
                               const DistillConfig& cfg, const EvalSet* eval = nullptr);

std::string log_csv_header();
std::string log_csv_row(const LogEntry& entry);

}  // namespace phreg

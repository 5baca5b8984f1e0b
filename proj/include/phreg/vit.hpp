#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "phreg/image.hpp"
#include "phreg/tensor.hpp"

namespace phreg {

enum class HeadMode { plain, value_head };

const char* to_string(HeadMode mode);
HeadMode head_mode_from_string(const std::string& name);

struct ViTConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  double mlp_ratio = 4.0;
  std::size_t num_registers = 0;
  HeadMode head_mode = HeadMode::plain;
  // Gaussian locality bias on final-block patch attention; unset disables it.
  std::optional<double> neighborhood_sigma;

  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
  std::size_t grid_rows() const { return image_height / patch_size; }
  std::size_t grid_cols() const { return image_width / patch_size; }
  std::size_t hidden_dim() const;
  /// m + 1 + (H/k)(W/k) for an image of the given extents.
  std::size_t sequence_length(std::size_t height, std::size_t width) const;
  bool operator==(const ViTConfig&) const = default;
};

// Parameter groups addressable by the unlock mask.
enum class ParamGroup { class_token, positional_embeddings, registers, patch_embedding, block, final_norm };

template <typename T>
struct BlockParams {
  BasicTensor<T> ln1_gamma, ln1_beta;
  BasicTensor<T> qkv_weight, qkv_bias;    // [d x 3d], [3d]
  BasicTensor<T> proj_weight, proj_bias;  // [d x d], [d]
  BasicTensor<T> ln2_gamma, ln2_beta;
  BasicTensor<T> fc1_weight, fc1_bias;    // [d x hidden], [hidden]
  BasicTensor<T> fc2_weight, fc2_bias;    // [hidden x d], [d]
};

template <typename T>
struct ParameterRef {
  std::string name;
  BasicTensor<T> tensor;  // shares storage with the model
  ParamGroup group;
  int block = -1;          // block index for ParamGroup::block
  bool is_norm = false;    // layer-norm affine parameters
};

/// Tiny pre-norm ViT: patch embedding, class token, m position-free register
/// tokens, L blocks, final layer norm.
template <typename T>
struct ViTModel {
  ViTConfig config;
  BasicTensor<T> patch_weight;  // [k*k*3 x d]
  BasicTensor<T> patch_bias;    // [d]
  BasicTensor<T> class_token;   // [1 x d]
  BasicTensor<T> pos_embed;     // [1 + rows*cols x d], class row first
  std::optional<BasicTensor<T>> registers;  // [m x d], absent when m = 0
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> norm_gamma, norm_beta;

  /// Deterministic random weights standing in for a pretrained backbone.
  static ViTModel random(const ViTConfig& config, std::uint64_t seed);

  std::vector<ParameterRef<T>> parameters() const;
  std::size_t parameter_count() const;
  ViTModel clone() const;

  template <typename U>
  ViTModel<U> cast() const;
};

using Model = ViTModel<float>;

/// Flattens non-overlapping k x k patches, row-major over the token grid;
/// each row is the patch's pixels in (y, x, channel) order.
template <typename T>
BasicTensor<T> patchify(const Image& image, std::size_t patch_size);

/// Linear patch embedding; returns [rows*cols x d].
template <typename T>
BasicTensor<T> patchify_embed(const Image& image, const ViTModel<T>& model);

/// Corner-aligned Catmull-Rom interpolation matrix [dst x src] for one axis.
std::vector<double> bicubic_axis_matrix(std::size_t src, std::size_t dst);

/// Bicubic resize of the positional table's grid rows; the class row passes through.
template <typename T>
BasicTensor<T> resize_pos_embed(const BasicTensor<T>& pos, std::size_t base_rows,
                                std::size_t base_cols, std::size_t target_rows,
                                std::size_t target_cols);

/// [class, registers..., patches (row-major)]; positions added to class and patches only.
template <typename T>
BasicTensor<T> assemble_tokens(const BasicTensor<T>& patch_tokens, const ViTModel<T>& model,
                               std::size_t grid_rows, std::size_t grid_cols);

/// bias(p, q) = -|coord(p) - coord(q)|^2 / (2 sigma^2) over patch pairs, [P x P].
std::vector<double> neighborhood_bias(std::size_t rows, std::size_t cols, double sigma);

/// Runs the network and returns the dense patch output [rows*cols x d] as a
/// differentiable tensor. Class and register rows are dropped.
template <typename T>
BasicTensor<T> forward_dense(const ViTModel<T>& model, const Image& image);

/// Full final-layer sequence before the head ([m + 1 + P] x d); plain head only.
template <typename T>
BasicTensor<T> forward_sequence(const ViTModel<T>& model, const Image& image);

FeatureGrid to_feature_grid(const Tensor& dense, std::size_t rows, std::size_t cols);
Tensor from_feature_grid(const FeatureGrid& grid);

/// Non-differentiable inference entry point.
FeatureGrid forward_features(const Model& model, const Image& image);

/// Deep copy of shared weights plus m fresh registers ~ N(0, 0.02^2) drawn from `seed`.
template <typename T>
ViTModel<T> init_student_from_teacher(const ViTModel<T>& teacher, std::size_t num_registers,
                                      std::uint64_t seed);

using FeatureFn = std::function<FeatureGrid(const Image&)>;

extern template struct ViTModel<float>;
extern template struct ViTModel<double>;

}  // namespace phreg

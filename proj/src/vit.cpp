#include "phreg/vit.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "phreg/rng.hpp"

namespace phreg {

const char* to_string(HeadMode mode) { return mode == HeadMode::plain ? "plain" : "value_head"; }

HeadMode head_mode_from_string(const std::string& name) {
  if (name == "plain") return HeadMode::plain;
  if (name == "value_head") return HeadMode::value_head;
  throw std::invalid_argument("unknown head mode '" + name + "' (expected plain or value_head)");
}

void ViTConfig::validate() const {
  if (patch_size == 0 || image_height == 0 || image_width == 0)
    throw std::invalid_argument("image extents and patch size must be positive");
  if (image_height % patch_size || image_width % patch_size)
    throw std::invalid_argument("image " + std::to_string(image_height) + "x" + std::to_string(image_width) +
                                " is not divisible by patch size " + std::to_string(patch_size));
  if (embed_dim == 0 || heads == 0 || embed_dim % heads)
    throw std::invalid_argument("embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                                std::to_string(heads));
  if (depth == 0) throw std::invalid_argument("depth must be at least 1");
  if (!(mlp_ratio > 0.0)) throw std::invalid_argument("mlp_ratio must be positive");
  if (neighborhood_sigma && !(*neighborhood_sigma > 0.0))
    throw std::invalid_argument("neighborhood_sigma must be positive");
}

std::size_t ViTConfig::hidden_dim() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(mlp_ratio * embed_dim)));
}

std::size_t ViTConfig::sequence_length(std::size_t height, std::size_t width) const {
  return num_registers + 1 + (height / patch_size) * (width / patch_size);
}

namespace {

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(values));
}

template <typename T>
BasicTensor<T> constant(Shape shape, T value) {
  return BasicTensor<T>::full(std::move(shape), value);
}

template <typename T>
BasicTensor<T> constant_from(Shape shape, const std::vector<double>& values) {
  return BasicTensor<T>(std::move(shape), std::vector<T>(values.begin(), values.end()));
}

template <typename T, typename U>
BasicTensor<U> cast_param(const BasicTensor<T>& t) {
  auto out = t.template cast<U>();
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model construction

template <typename T>
ViTModel<T> ViTModel<T>::random(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  ViTModel m;
  m.config = config;
  const std::size_t d = config.embed_dim, k = config.patch_size, hid = config.hidden_dim();
  const std::size_t grid = config.grid_rows() * config.grid_cols();
  Rng rng = make_stream(seed, "vit.init");
  const double patch_in = static_cast<double>(k * k * 3);
  m.patch_weight = normal_tensor<T>({k * k * 3, d}, 1.0 / std::sqrt(patch_in), rng);
  m.patch_bias = normal_tensor<T>({d}, 0.02, rng);
  m.class_token = normal_tensor<T>({1, d}, 0.2, rng);
  m.pos_embed = normal_tensor<T>({1 + grid, d}, 0.2, rng);
  if (config.num_registers > 0) m.registers = normal_tensor<T>({config.num_registers, d}, 0.02, rng);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t b = 0; b < config.depth; ++b) {
    BlockParams<T> blk;
    blk.ln1_gamma = constant<T>({d}, T(1));
    blk.ln1_beta = constant<T>({d}, T(0));
    blk.qkv_weight = normal_tensor<T>({d, 3 * d}, inv_sqrt_d, rng);
    blk.qkv_bias = constant<T>({3 * d}, T(0));
    blk.proj_weight = normal_tensor<T>({d, d}, inv_sqrt_d, rng);
    blk.proj_bias = constant<T>({d}, T(0));
    blk.ln2_gamma = constant<T>({d}, T(1));
    blk.ln2_beta = constant<T>({d}, T(0));
    blk.fc1_weight = normal_tensor<T>({d, hid}, inv_sqrt_d, rng);
    blk.fc1_bias = constant<T>({hid}, T(0));
    blk.fc2_weight = normal_tensor<T>({hid, d}, 1.0 / std::sqrt(static_cast<double>(hid)), rng);
    blk.fc2_bias = constant<T>({d}, T(0));
    m.blocks.push_back(std::move(blk));
  }
  // Non-trivial final affine so token norms carry content, as in trained backbones.
  m.norm_gamma = add_scalar(normal_tensor<T>({d}, 0.2, rng), T(1));
  m.norm_beta = normal_tensor<T>({d}, 0.2, rng);
  return m;
}

template <typename T>
std::vector<ParameterRef<T>> ViTModel<T>::parameters() const {
  std::vector<ParameterRef<T>> out;
  out.push_back({"cls_token", class_token, ParamGroup::class_token});
  out.push_back({"pos_embed", pos_embed, ParamGroup::positional_embeddings});
  if (registers) out.push_back({"registers", *registers, ParamGroup::registers});
  out.push_back({"patch_embed.weight", patch_weight, ParamGroup::patch_embedding});
  out.push_back({"patch_embed.bias", patch_bias, ParamGroup::patch_embedding});
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const std::string p = "blocks." + std::to_string(b) + ".";
    const int i = static_cast<int>(b);
    out.push_back({p + "ln1.gamma", blk.ln1_gamma, ParamGroup::block, i, true});
    out.push_back({p + "ln1.beta", blk.ln1_beta, ParamGroup::block, i, true});
    out.push_back({p + "attn.qkv.weight", blk.qkv_weight, ParamGroup::block, i});
    out.push_back({p + "attn.qkv.bias", blk.qkv_bias, ParamGroup::block, i});
    out.push_back({p + "attn.proj.weight", blk.proj_weight, ParamGroup::block, i});
    out.push_back({p + "attn.proj.bias", blk.proj_bias, ParamGroup::block, i});
    out.push_back({p + "ln2.gamma", blk.ln2_gamma, ParamGroup::block, i, true});
    out.push_back({p + "ln2.beta", blk.ln2_beta, ParamGroup::block, i, true});
    out.push_back({p + "mlp.fc1.weight", blk.fc1_weight, ParamGroup::block, i});
    out.push_back({p + "mlp.fc1.bias", blk.fc1_bias, ParamGroup::block, i});
    out.push_back({p + "mlp.fc2.weight", blk.fc2_weight, ParamGroup::block, i});
    out.push_back({p + "mlp.fc2.bias", blk.fc2_bias, ParamGroup::block, i});
  }
  out.push_back({"norm.gamma", norm_gamma, ParamGroup::final_norm, -1, true});
  out.push_back({"norm.beta", norm_beta, ParamGroup::final_norm, -1, true});
  return out;
}

template <typename T>
std::size_t ViTModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

template <typename T>
ViTModel<T> ViTModel<T>::clone() const {
  return cast<T>();
}

template <typename T>
template <typename U>
ViTModel<U> ViTModel<T>::cast() const {
  ViTModel<U> m;
  m.config = config;
  m.patch_weight = cast_param<T, U>(patch_weight);
  m.patch_bias = cast_param<T, U>(patch_bias);
  m.class_token = cast_param<T, U>(class_token);
  m.pos_embed = cast_param<T, U>(pos_embed);
  if (registers) m.registers = cast_param<T, U>(*registers);
  for (const auto& blk : blocks) {
    BlockParams<U> o;
    o.ln1_gamma = cast_param<T, U>(blk.ln1_gamma);
    o.ln1_beta = cast_param<T, U>(blk.ln1_beta);
    o.qkv_weight = cast_param<T, U>(blk.qkv_weight);
    o.qkv_bias = cast_param<T, U>(blk.qkv_bias);
    o.proj_weight = cast_param<T, U>(blk.proj_weight);
    o.proj_bias = cast_param<T, U>(blk.proj_bias);
    o.ln2_gamma = cast_param<T, U>(blk.ln2_gamma);
    o.ln2_beta = cast_param<T, U>(blk.ln2_beta);
    o.fc1_weight = cast_param<T, U>(blk.fc1_weight);
    o.fc1_bias = cast_param<T, U>(blk.fc1_bias);
    o.fc2_weight = cast_param<T, U>(blk.fc2_weight);
    o.fc2_bias = cast_param<T, U>(blk.fc2_bias);
    m.blocks.push_back(std::move(o));
  }
  m.norm_gamma = cast_param<T, U>(norm_gamma);
  m.norm_beta = cast_param<T, U>(norm_beta);
  return m;
}

template <typename T>
ViTModel<T> init_student_from_teacher(const ViTModel<T>& teacher, std::size_t num_registers,
                                      std::uint64_t seed) {
  ViTModel<T> student = teacher.clone();
  student.config.num_registers = num_registers;
  student.registers.reset();
  if (num_registers > 0) {
    Rng rng = make_stream(seed, "student.registers");
    student.registers = normal_tensor<T>({num_registers, teacher.config.embed_dim}, 0.02, rng);
  }
  return student;
}

// ---------------------------------------------------------------------------
// Tokenization

template <typename T>
BasicTensor<T> patchify(const Image& image, std::size_t k) {
  if (k == 0 || image.height % k || image.width % k)
    throw std::invalid_argument("image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " is not divisible by patch size " +
                                std::to_string(k));
  const std::size_t rows = image.height / k, cols = image.width / k, len = k * k * 3;
  std::vector<T> out(rows * cols * len);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      T* dst = out.data() + (r * cols + c) * len;
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            *dst++ = static_cast<T>(image.at(r * k + y, c * k + x, ch));
    }
  return BasicTensor<T>({rows * cols, len}, std::move(out));
}

template <typename T>
BasicTensor<T> patchify_embed(const Image& image, const ViTModel<T>& model) {
  return add_bias(matmul(patchify<T>(image, model.config.patch_size), model.patch_weight), model.patch_bias);
}

std::vector<double> bicubic_axis_matrix(std::size_t src, std::size_t dst) {
  std::vector<double> m(dst * src, 0.0);
  for (std::size_t i = 0; i < dst; ++i) {
    const double pos = dst == 1 ? 0.0 : static_cast<double>(i) * (src - 1) / (dst - 1);
    const double base = std::floor(pos);
    double w[4];
    cubic_weights(pos - base, w);
    for (int t = 0; t < 4; ++t) {
      const long idx = std::clamp<long>(static_cast<long>(base) - 1 + t, 0, static_cast<long>(src) - 1);
      m[i * src + static_cast<std::size_t>(idx)] += w[t];
    }
  }
  return m;
}

template <typename T>
BasicTensor<T> resize_pos_embed(const BasicTensor<T>& pos, std::size_t base_rows, std::size_t base_cols,
                                std::size_t target_rows, std::size_t target_cols) {
  if (base_rows == 0 || base_cols == 0 || target_rows == 0 || target_cols == 0)
    throw std::invalid_argument("resize_pos_embed: empty grid");
  if (pos.rank() != 2 || pos.extent(0) != 1 + base_rows * base_cols)
    throw ShapeError("resize_pos_embed: table " + shape_str(pos.shape()) + " does not match a " +
                     std::to_string(base_rows) + "x" + std::to_string(base_cols) + " grid");
  if (base_rows == target_rows && base_cols == target_cols) return pos;
  const auto ry = bicubic_axis_matrix(base_rows, target_rows);
  const auto rx = bicubic_axis_matrix(base_cols, target_cols);
  const std::size_t src = base_rows * base_cols, dst = target_rows * target_cols;
  // Kronecker product of the two axis matrices acting on the flattened grid.
  std::vector<double> kron(dst * src, 0.0);
  for (std::size_t ty = 0; ty < target_rows; ++ty)
    for (std::size_t tx = 0; tx < target_cols; ++tx)
      for (std::size_t sy = 0; sy < base_rows; ++sy) {
        const double wy = ry[ty * base_rows + sy];
        if (wy == 0.0) continue;
        for (std::size_t sx = 0; sx < base_cols; ++sx)
          kron[(ty * target_cols + tx) * src + sy * base_cols + sx] = wy * rx[tx * base_cols + sx];
      }
  auto cls = slice(pos, 0, 0, 1);
  auto grid = slice(pos, 0, 1, src);
  auto resized = matmul(constant_from<T>({dst, src}, kron), grid);
  return concat<T>({cls, resized}, 0);
}

template <typename T>
BasicTensor<T> assemble_tokens(const BasicTensor<T>& patch_tokens, const ViTModel<T>& model,
                               std::size_t grid_rows, std::size_t grid_cols) {
  const auto& cfg = model.config;
  if (patch_tokens.rank() != 2 || patch_tokens.extent(0) != grid_rows * grid_cols)
    throw ShapeError("assemble_tokens: patch tokens " + shape_str(patch_tokens.shape()) +
                     " do not cover a " + std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
  auto pos = resize_pos_embed(model.pos_embed, cfg.grid_rows(), cfg.grid_cols(), grid_rows, grid_cols);
  auto cls = add(model.class_token, slice(pos, 0, 0, 1));
  auto patches = add(patch_tokens, slice(pos, 0, 1, grid_rows * grid_cols));
  std::vector<BasicTensor<T>> parts{cls};
  if (model.registers) parts.push_back(*model.registers);
  parts.push_back(patches);
  return concat(parts, 0);
}

std::vector<double> neighborhood_bias(std::size_t rows, std::size_t cols, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("neighborhood_bias: sigma must be positive");
  const std::size_t n = rows * cols;
  std::vector<double> bias(n * n);
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t q = 0; q < n; ++q) {
      const double dy = double(p / cols) - double(q / cols);
      const double dx = double(p % cols) - double(q % cols);
      bias[p * n + q] = -(dy * dy + dx * dx) / denom;
    }
  return bias;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& h, const BlockParams<T>& blk, std::size_t heads,
                         const std::optional<BasicTensor<T>>& logit_bias) {
  const std::size_t d = h.extent(1), dh = d / heads;
  auto qkv = linear(h, blk.qkv_weight, blk.qkv_bias);
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<BasicTensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t j = 0; j < heads; ++j) {
    auto q = slice(qkv, 1, j * dh, dh);
    auto k = slice(qkv, 1, d + j * dh, dh);
    auto v = slice(qkv, 1, 2 * d + j * dh, dh);
    auto logits = scale(matmul(q, transpose(k)), inv_scale);
    if (logit_bias) logits = add(logits, *logit_bias);
    outs.push_back(matmul(softmax_rows(logits), v));
  }
  auto merged = heads == 1 ? outs.front() : concat(outs, 1);
  return linear(merged, blk.proj_weight, blk.proj_bias);
}

template <typename T>
BasicTensor<T> full_attention_bias(std::size_t prefix, std::size_t rows, std::size_t cols, double sigma) {
  const std::size_t p = rows * cols, n = prefix + p;
  const auto local = neighborhood_bias(rows, cols, sigma);
  std::vector<T> bias(n * n, T(0));
  for (std::size_t a = 0; a < p; ++a)
    for (std::size_t b = 0; b < p; ++b) bias[(prefix + a) * n + prefix + b] = static_cast<T>(local[a * p + b]);
  return BasicTensor<T>({n, n}, std::move(bias));
}

// Runs the encoder; returns the final sequence before the final norm.
template <typename T>
BasicTensor<T> encode(const ViTModel<T>& model, const Image& image, bool value_head_exit) {
  const auto& cfg = model.config;
  const std::size_t k = cfg.patch_size;
  if (k == 0 || image.height % k || image.width % k || image.height == 0 || image.width == 0)
    throw std::invalid_argument("forward: image " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " is not divisible by patch size " +
                                std::to_string(k));
  const std::size_t rows = image.height / k, cols = image.width / k;
  const std::size_t prefix = 1 + cfg.num_registers;
  auto x = assemble_tokens(patchify_embed(image, model), model, rows, cols);
  std::optional<BasicTensor<T>> final_bias;
  if (cfg.neighborhood_sigma) final_bias = full_attention_bias<T>(prefix, rows, cols, *cfg.neighborhood_sigma);

  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& blk = model.blocks[b];
    const bool last = b + 1 == model.blocks.size();
    auto h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta);
    if (last && value_head_exit) {
      // Value projection of the final block, bypassing attention mixing and the MLP.
      const std::size_t d = cfg.embed_dim;
      auto v = linear(h, slice(blk.qkv_weight, 1, 2 * d, d), slice(blk.qkv_bias, 0, 2 * d, d));
      return linear(v, blk.proj_weight, blk.proj_bias);
    }
    x = add(x, attention(h, blk, cfg.heads, last ? final_bias : std::nullopt));
    auto h2 = layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
    x = add(x, linear(gelu(linear(h2, blk.fc1_weight, blk.fc1_bias)), blk.fc2_weight, blk.fc2_bias));
  }
  return x;
}

}  // namespace

template <typename T>
BasicTensor<T> forward_sequence(const ViTModel<T>& model, const Image& image) {
  auto x = encode(model, image, false);
  return layer_norm(x, model.norm_gamma, model.norm_beta);
}

template <typename T>
BasicTensor<T> forward_dense(const ViTModel<T>& model, const Image& image) {
  const auto& cfg = model.config;
  auto x = encode(model, image, cfg.head_mode == HeadMode::value_head);
  const std::size_t prefix = 1 + cfg.num_registers;
  auto patches = slice(x, 0, prefix, x.extent(0) - prefix);
  return layer_norm(patches, model.norm_gamma, model.norm_beta);
}

FeatureGrid to_feature_grid(const Tensor& dense, std::size_t rows, std::size_t cols) {
  if (dense.rank() != 2 || dense.extent(0) != rows * cols)
    throw ShapeError("to_feature_grid: " + shape_str(dense.shape()) + " is not a " + std::to_string(rows) +
                     "x" + std::to_string(cols) + " grid");
  FeatureGrid g(rows, cols, dense.extent(1));
  std::copy(dense.data().begin(), dense.data().end(), g.values.begin());
  return g;
}

Tensor from_feature_grid(const FeatureGrid& grid) {
  return Tensor({grid.rows * grid.cols, grid.dim}, grid.values);
}

FeatureGrid forward_features(const Model& model, const Image& image) {
  auto dense = forward_dense(model, image);
  const std::size_t k = model.config.patch_size;
  return to_feature_grid(dense, image.height / k, image.width / k);
}

template struct ViTModel<float>;
template struct ViTModel<double>;
template ViTModel<double> ViTModel<float>::cast<double>() const;
template ViTModel<float> ViTModel<double>::cast<float>() const;

#define PHREG_INSTANTIATE_VIT(T)                                                                  \
  template BasicTensor<T> patchify<T>(const Image&, std::size_t);                                 \
  template BasicTensor<T> patchify_embed<T>(const Image&, const ViTModel<T>&);                    \
  template BasicTensor<T> resize_pos_embed<T>(const BasicTensor<T>&, std::size_t, std::size_t,    \
                                              std::size_t, std::size_t);                          \
  template BasicTensor<T> assemble_tokens<T>(const BasicTensor<T>&, const ViTModel<T>&,           \
                                             std::size_t, std::size_t);                           \
  template BasicTensor<T> forward_dense<T>(const ViTModel<T>&, const Image&);                     \
  template BasicTensor<T> forward_sequence<T>(const ViTModel<T>&, const Image&);                  \
  template ViTModel<T> init_student_from_teacher<T>(const ViTModel<T>&, std::size_t, std::uint64_t);

PHREG_INSTANTIATE_VIT(float)
PHREG_INSTANTIATE_VIT(double)

#undef PHREG_INSTANTIATE_VIT

}  // namespace phreg

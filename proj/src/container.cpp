#include "phreg/container.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace phreg {

std::size_t ContainerEntry::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

const std::vector<float>& ContainerEntry::f32() const {
  if (const auto* v = std::get_if<std::vector<float>>(&data)) return *v;
  throw std::invalid_argument("entry '" + name + "' is not float32");
}

const std::vector<std::int32_t>& ContainerEntry::i32() const {
  if (const auto* v = std::get_if<std::vector<std::int32_t>>(&data)) return *v;
  throw std::invalid_argument("entry '" + name + "' is not int32");
}

void Container::add(ContainerEntry entry) {
  if (contains(entry.name)) throw std::invalid_argument("duplicate container entry '" + entry.name + "'");
  std::uint64_t n = 1;
  for (auto e : entry.extents) n *= e;
  if (n != entry.numel())
    throw std::invalid_argument("entry '" + entry.name + "' has " + std::to_string(entry.numel()) +
                                " values but its extents describe " + std::to_string(n));
  entries_.push_back(std::move(entry));
}

void Container::add_f32(std::string name, std::vector<std::uint64_t> extents, std::vector<float> values) {
  add({std::move(name), std::move(extents), std::move(values)});
}

void Container::add_i32(std::string name, std::vector<std::uint64_t> extents, std::vector<std::int32_t> values) {
  add({std::move(name), std::move(extents), std::move(values)});
}

bool Container::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.name == name; });
}

const ContainerEntry& Container::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw std::out_of_range("container has no entry '" + name + "'");
}

void Container::set_config_hash(std::uint64_t hash) {
  const std::vector<std::int32_t> halves{static_cast<std::int32_t>(static_cast<std::uint32_t>(hash & 0xffffffffu)),
                                         static_cast<std::int32_t>(static_cast<std::uint32_t>(hash >> 32))};
  for (auto& e : entries_)
    if (e.name == "__config_hash") {
      e.data = halves;
      return;
    }
  add_i32("__config_hash", {2}, halves);
}

std::uint64_t Container::config_hash() const {
  const auto& v = get("__config_hash").i32();
  if (v.size() != 2) throw std::invalid_argument("malformed __config_hash entry");
  return static_cast<std::uint64_t>(static_cast<std::uint32_t>(v[0])) |
         (static_cast<std::uint64_t>(static_cast<std::uint32_t>(v[1])) << 32);
}

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U value) {
    using Raw = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    Raw raw = std::bit_cast<Raw>(value);
    for (std::size_t i = 0; i < sizeof(Raw); ++i) out.push_back(static_cast<std::uint8_t>(raw >> (8 * i)));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : buf(b) {}
  void need(std::size_t n) const {
    if (pos + n > buf.size() || pos + n < pos) throw std::runtime_error("container is truncated");
  }
  template <typename U>
  U le() {
    using Raw = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    need(sizeof(Raw));
    Raw raw = 0;
    for (std::size_t i = 0; i < sizeof(Raw); ++i) raw |= static_cast<Raw>(buf[pos + i]) << (8 * i);
    pos += sizeof(Raw);
    return std::bit_cast<U>(raw);
  }
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_container(const Container& c) {
  Writer header;
  header.bytes(kContainerMagic, 4);
  header.le<std::uint32_t>(kContainerVersion);
  header.le<std::uint32_t>(static_cast<std::uint32_t>(c.entries().size()));
  std::size_t table_size = header.out.size();
  for (const auto& e : c.entries()) table_size += 4 + e.name.size() + 4 + 4 + 8 * e.extents.size() + 8;

  std::uint64_t offset = table_size;
  for (const auto& e : c.entries()) {
    header.le<std::uint32_t>(static_cast<std::uint32_t>(e.name.size()));
    header.bytes(e.name.data(), e.name.size());
    header.le<std::uint32_t>(static_cast<std::uint32_t>(e.dtype()));
    header.le<std::uint32_t>(static_cast<std::uint32_t>(e.extents.size()));
    for (auto x : e.extents) header.le<std::uint64_t>(x);
    header.le<std::uint64_t>(offset);
    offset += 4 * e.numel();
  }
  for (const auto& e : c.entries())
    std::visit([&](const auto& v) { for (auto x : v) header.le(x); }, e.data);
  return std::move(header.out);
}

Container decode_container(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(4);
  if (std::memcmp(bytes.data(), kContainerMagic, 4) != 0) throw std::runtime_error("not a PHRG container (bad magic)");
  r.pos = 4;
  const auto version = r.le<std::uint32_t>();
  if (version != kContainerVersion)
    throw std::runtime_error("unsupported container version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>();
  Container c;
  struct Pending {
    ContainerEntry entry;
    DType dtype;
    std::uint64_t offset;
  };
  std::vector<Pending> pending;
  for (std::uint32_t i = 0; i < count; ++i) {
    Pending p;
    const auto len = r.le<std::uint32_t>();
    r.need(len);
    p.entry.name.assign(reinterpret_cast<const char*>(bytes.data() + r.pos), len);
    r.pos += len;
    const auto dtype = r.le<std::uint32_t>();
    if (dtype > 1) throw std::runtime_error("entry '" + p.entry.name + "' has unknown dtype " + std::to_string(dtype));
    p.dtype = static_cast<DType>(dtype);
    const auto rank = r.le<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) p.entry.extents.push_back(r.le<std::uint64_t>());
    p.offset = r.le<std::uint64_t>();
    pending.push_back(std::move(p));
  }
  for (auto& p : pending) {
    std::uint64_t n = 1;
    for (auto e : p.entry.extents) n *= e;
    Reader pr(bytes);
    pr.pos = p.offset;
    pr.need(4 * n);
    if (p.dtype == DType::f32) {
      std::vector<float> v(n);
      for (auto& x : v) x = pr.le<float>();
      p.entry.data = std::move(v);
    } else {
      std::vector<std::int32_t> v(n);
      for (auto& x : v) x = pr.le<std::int32_t>();
      p.entry.data = std::move(v);
    }
    c.add(std::move(p.entry));
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void put_feature_grid(Container& c, const std::string& prefix, const FeatureGrid& grid) {
  c.add_f32(prefix + ".values", {grid.rows, grid.cols, grid.dim}, grid.values);
  if (!grid.coverage.empty()) c.add_i32(prefix + ".coverage", {grid.rows, grid.cols}, grid.coverage);
}

FeatureGrid get_feature_grid(const Container& c, const std::string& prefix) {
  const auto& e = c.get(prefix + ".values");
  if (e.extents.size() != 3) throw std::invalid_argument("entry '" + e.name + "' is not a rank-3 feature grid");
  FeatureGrid g(e.extents[0], e.extents[1], e.extents[2]);
  g.values = e.f32();
  if (c.contains(prefix + ".coverage")) g.coverage = c.get(prefix + ".coverage").i32();
  return g;
}

void put_image(Container& c, const std::string& prefix, const Image& image) {
  c.add_f32(prefix + ".pixels", {image.height, image.width, 3}, image.pixels);
}

Image get_image(const Container& c, const std::string& prefix) {
  const auto& e = c.get(prefix + ".pixels");
  if (e.extents.size() != 3 || e.extents[2] != 3) throw std::invalid_argument("entry '" + e.name + "' is not an RGB image");
  Image img(e.extents[0], e.extents[1]);
  img.pixels = e.f32();
  return img;
}

namespace {

std::vector<std::uint64_t> extents_of(const Tensor& t) { return {t.shape().begin(), t.shape().end()}; }

}  // namespace

void put_model(Container& c, const Model& model) {
  const auto& cfg = model.config;
  c.add_i32("meta.vit_int", {8},
            {static_cast<std::int32_t>(cfg.image_height), static_cast<std::int32_t>(cfg.image_width),
             static_cast<std::int32_t>(cfg.patch_size), static_cast<std::int32_t>(cfg.embed_dim),
             static_cast<std::int32_t>(cfg.depth), static_cast<std::int32_t>(cfg.heads),
             static_cast<std::int32_t>(cfg.num_registers), static_cast<std::int32_t>(cfg.head_mode)});
  c.add_f32("meta.vit_float", {3},
            {static_cast<float>(cfg.mlp_ratio), cfg.neighborhood_sigma ? 1.0f : 0.0f,
             static_cast<float>(cfg.neighborhood_sigma.value_or(0.0))});
  for (const auto& p : model.parameters()) {
    const auto d = p.tensor.data();
    c.add_f32("param." + p.name, extents_of(p.tensor), {d.begin(), d.end()});
  }
}

Model get_model(const Container& c) {
  const auto& mi = c.get("meta.vit_int").i32();
  const auto& mf = c.get("meta.vit_float").f32();
  if (mi.size() != 8 || mf.size() != 3) throw std::invalid_argument("malformed model metadata");
  ViTConfig cfg;
  cfg.image_height = static_cast<std::size_t>(mi[0]);
  cfg.image_width = static_cast<std::size_t>(mi[1]);
  cfg.patch_size = static_cast<std::size_t>(mi[2]);
  cfg.embed_dim = static_cast<std::size_t>(mi[3]);
  cfg.depth = static_cast<std::size_t>(mi[4]);
  cfg.heads = static_cast<std::size_t>(mi[5]);
  cfg.num_registers = static_cast<std::size_t>(mi[6]);
  cfg.head_mode = static_cast<HeadMode>(mi[7]);
  cfg.mlp_ratio = mf[0];
  if (mf[1] != 0.0f) cfg.neighborhood_sigma = mf[2];
  cfg.validate();
  Model model = Model::random(cfg, 0);
  if (cfg.num_registers > 0 && !model.registers)
    model.registers = Tensor::zeros({cfg.num_registers, cfg.embed_dim});
  for (auto& p : model.parameters()) {
    const auto& e = c.get("param." + p.name);
    if (e.extents != extents_of(p.tensor))
      throw std::invalid_argument("parameter '" + p.name + "' has the wrong shape in the container");
    const auto& v = e.f32();
    auto dst = p.tensor.mutable_data();
    std::copy(v.begin(), v.end(), dst.begin());
  }
  return model;
}

}  // namespace phreg

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "phreg/image.hpp"
#include "phreg/vit.hpp"

namespace phreg {

inline constexpr char kContainerMagic[4] = {'P', 'H', 'R', 'G'};
inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint32_t { f32 = 0, i32 = 1 };

struct ContainerEntry {
  std::string name;
  std::vector<std::uint64_t> extents;
  std::variant<std::vector<float>, std::vector<std::int32_t>> data;

  DType dtype() const { return data.index() == 0 ? DType::f32 : DType::i32; }
  std::size_t numel() const;
  const std::vector<float>& f32() const;
  const std::vector<std::int32_t>& i32() const;
  bool operator==(const ContainerEntry&) const = default;
};

/// Ordered entry list; names are unique.
class Container {
 public:
  void add(ContainerEntry entry);
  void add_f32(std::string name, std::vector<std::uint64_t> extents, std::vector<float> values);
  void add_i32(std::string name, std::vector<std::uint64_t> extents, std::vector<std::int32_t> values);

  bool contains(const std::string& name) const;
  const ContainerEntry& get(const std::string& name) const;
  const std::vector<ContainerEntry>& entries() const { return entries_; }

  void set_config_hash(std::uint64_t hash);
  /// Throws if the entry is absent.
  std::uint64_t config_hash() const;

  bool operator==(const Container&) const = default;

 private:
  std::vector<ContainerEntry> entries_;
};

/// Layout: magic, u32 version, u32 entry count, then per entry
/// {u32 name length, name bytes, u32 dtype, u32 rank, u64 extents[rank], u64 byte offset},
/// followed by the payload. All integers and scalars are little-endian.
std::vector<std::uint8_t> encode_container(const Container& c);
Container decode_container(const std::vector<std::uint8_t>& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Typed packing helpers. Prefix names entries as "<prefix>.values" and so on.
void put_feature_grid(Container& c, const std::string& prefix, const FeatureGrid& grid);
FeatureGrid get_feature_grid(const Container& c, const std::string& prefix);
void put_image(Container& c, const std::string& prefix, const Image& image);
Image get_image(const Container& c, const std::string& prefix);
void put_model(Container& c, const Model& model);
Model get_model(const Container& c);

}  // namespace phreg

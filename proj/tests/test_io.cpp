#include <gtest/gtest.h>

#include <filesystem>
#include <json.hpp>

#include "phreg/config.hpp"
#include "phreg/container.hpp"
#include "phreg/pipeline.hpp"

using namespace phreg;

namespace {

Container sample_container() {
  Container c;
  c.add_f32("a.values", {2, 3}, {1.5f, -2.0f, 0.0f, 3.25f, 1e-20f, -0.0f});
  c.add_i32("b.labels", {4}, {0, -1, 7, 2147483647});
  c.add_f32("empty", {0}, {});
  c.set_config_hash(0xfedcba9876543210ULL);
  return c;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("phreg_test_" + name);
}

}  // namespace

TEST(Container, RoundTripInMemoryAndOnDisk) {
  const auto c = sample_container();
  const auto bytes = encode_container(c);
  EXPECT_EQ(decode_container(bytes), c);
  EXPECT_EQ(encode_container(decode_container(bytes)), bytes);
  const auto path = temp_file("roundtrip.phrg");
  write_container(path, c);
  const auto back = read_container(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back, c);
  EXPECT_EQ(back.config_hash(), 0xfedcba9876543210ULL);
}

TEST(Container, HeaderLayoutIsLittleEndian) {
  Container c;
  c.add_i32("x", {1}, {0x01020304});
  const auto bytes = encode_container(c);
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PHRG");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[8], 1);
  // Payload is the last four bytes.
  EXPECT_EQ(bytes[bytes.size() - 4], 0x04);
  EXPECT_EQ(bytes.back(), 0x01);
}

TEST(Container, EmptyContainerRoundTrips) {
  const Container empty;
  EXPECT_EQ(decode_container(encode_container(empty)), empty);
  EXPECT_THROW(empty.config_hash(), std::out_of_range);
}

TEST(Container, RejectsDuplicatesAndSizeMismatch) {
  Container c;
  c.add_f32("x", {2}, {1, 2});
  EXPECT_THROW(c.add_f32("x", {1}, {1}), std::invalid_argument);
  EXPECT_THROW(c.add_f32("y", {3}, {1, 2}), std::invalid_argument);
  EXPECT_THROW(c.get("x").i32(), std::invalid_argument);
}

TEST(Container, RejectsCorruptInput) {
  auto bytes = encode_container(sample_container());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_container(bad), std::runtime_error);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_container(bad), std::runtime_error);
  for (std::size_t cut : {std::size_t(3), std::size_t(11), bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + std::ptrdiff_t(cut));
    EXPECT_THROW(decode_container(truncated), std::runtime_error) << cut;
  }
  EXPECT_THROW(read_container(temp_file("does_not_exist.phrg")), std::runtime_error);
}

TEST(Container, TypedHelpersRoundTrip) {
  Container c;
  FeatureGrid g(2, 3, 4);
  for (std::size_t i = 0; i < g.values.size(); ++i) g.values[i] = float(i) * 0.25f;
  g.coverage = {1, 2, 3, 4, 5, 6};
  put_feature_grid(c, "grid", g);
  Image img(3, 2);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = float(i) / 17.0f;
  put_image(c, "img", img);
  const auto back = decode_container(encode_container(c));
  EXPECT_EQ(get_feature_grid(back, "grid"), g);
  EXPECT_EQ(get_image(back, "img"), img);
}

TEST(Container, ModelRoundTripPreservesOutputs) {
  auto cfg = desk_preset();
  const auto teacher = make_teacher_model(cfg);
  const auto student = init_student_from_teacher(teacher, 3, 9);
  Container c;
  put_model(c, student);
  const auto back = get_model(decode_container(encode_container(c)));
  EXPECT_EQ(back.config, student.config);
  const auto bench = generate_bench(cfg);
  const auto& img = bench.test.front().image;
  EXPECT_EQ(forward_features(back, img), forward_features(student, img));
}

TEST(Config, JsonRoundTripAndStableHash) {
  auto cfg = desk_preset();
  cfg.seed = 42;
  cfg.distill.unlock_groups = {"registers", "block.0"};
  cfg.artifact.mode = ArtifactMode::low_norm;
  const auto back = RunConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.canonical(), cfg.canonical());
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_EQ(RunConfig::from_json(cfg.to_json(0)).hash(), cfg.hash());
  auto other = cfg;
  other.distill.initial_lr = 1e-3;
  EXPECT_NE(other.hash(), cfg.hash());
  EXPECT_EQ(hash_hex(0x1234).size(), 16u);
}

TEST(Config, RejectsUnknownKeysAndWrongSchema) {
  auto j = nlohmann::json::parse(desk_preset().to_json());
  auto extra = j;
  extra["distill"]["momentum"] = 0.5;
  EXPECT_THROW(RunConfig::from_json(extra.dump()), std::invalid_argument);
  auto top = j;
  top["surprise"] = true;
  EXPECT_THROW(RunConfig::from_json(top.dump()), std::invalid_argument);
  auto schema = j;
  schema["schema_version"] = 2;
  EXPECT_THROW(RunConfig::from_json(schema.dump()), std::invalid_argument);
  EXPECT_THROW(RunConfig::from_json("{not json"), std::invalid_argument);
}

TEST(Config, SaveLoadFile) {
  const auto cfg = desk_preset();
  const auto path = temp_file("config.json");
  cfg.save(path);
  const auto back = RunConfig::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(back.hash(), cfg.hash());
  EXPECT_NO_THROW(back.validate());
}

TEST(Bench, ContainerRoundTripAndDeterminism) {
  const auto cfg = desk_preset();
  const auto a = generate_bench(cfg), b = generate_bench(cfg);
  const auto ca = bench_to_container(a, cfg), cb = bench_to_container(b, cfg);
  EXPECT_EQ(encode_container(ca), encode_container(cb));
  const auto back = bench_from_container(ca);
  ASSERT_EQ(back.train.size(), a.train.size());
  EXPECT_EQ(back.train[0].image, a.train[0].image);
  EXPECT_EQ(back.test.back().labels, a.test.back().labels);
  EXPECT_EQ(ca.config_hash(), cfg.hash());
}

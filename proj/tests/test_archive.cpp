#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "histocap/archive.hpp"
#include "histocap/rng.hpp"

using namespace histocap;

namespace {

TensorMap sample_tensors() {
  Rng rng(3);
  TensorMap m;
  for (const auto& [name, shape] : std::vector<std::pair<std::string, Shape>>{
           {"decoder.embed", {7, 3}}, {"alpha", {4}}, {"zeta.w", {2, 2, 2}}}) {
    std::vector<float> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    m.emplace(name, Tensorf(shape, v));
  }
  return m;
}

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "histocap_archive_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Archive, LayoutIsBitExact) {
  TensorMap m;
  m.emplace("b", Tensorf::of({2}, {1.0f, -2.0f}));
  m.emplace("a", Tensorf::of({1}, {0.5f}));
  const std::string bytes = archive::encode(m);
  ASSERT_EQ(bytes.substr(0, 4), "HCT1");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 8);
  const auto header = nlohmann::json::parse(bytes.substr(12, len));
  EXPECT_EQ(header["a"]["offset"], 0);
  EXPECT_EQ(header["b"]["offset"], 4);
  EXPECT_EQ(header["b"]["dtype"], "f32");
  EXPECT_EQ(header["b"]["shape"], nlohmann::json::array({2}));
  ASSERT_EQ(bytes.size(), 12 + len + 12);
  float payload[3];
  std::memcpy(payload, bytes.data() + 12 + len, 12);
  EXPECT_EQ(payload[0], 0.5f);
  EXPECT_EQ(payload[1], 1.0f);
  EXPECT_EQ(payload[2], -2.0f);
}

TEST(Archive, RoundTripIsBitIdentical) {
  const auto m = sample_tensors();
  const auto path = temp_path("roundtrip.hct");
  archive::save(path, m);
  const auto back = archive::load(path);
  ASSERT_EQ(back.size(), m.size());
  for (const auto& [name, t] : m) {
    ASSERT_EQ(back.at(name).shape(), t.shape());
    EXPECT_EQ(std::memcmp(back.at(name).data().data(), t.data().data(), t.numel() * 4), 0);
  }
  EXPECT_EQ(archive::encode(back), archive::encode(m));
}

TEST(Archive, MissingTensorIsNamed) {
  auto m = sample_tensors();
  m.erase("alpha");
  try {
    archive::require(m, "alpha", {4});
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("'alpha'"), std::string::npos);
  }
}

TEST(Archive, ShapeMismatchReportsBothShapes) {
  const auto m = sample_tensors();
  try {
    archive::require(m, "decoder.embed", {3, 7});
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[7x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3x7]"), std::string::npos) << msg;
  }
}

TEST(Archive, TruncatedPayloadFailsWithoutPartialLoad) {
  const std::string bytes = archive::encode(sample_tensors());
  for (std::size_t cut : {bytes.size() - 1, bytes.size() - 20, std::size_t{11}, std::size_t{20}}) {
    EXPECT_THROW(archive::decode(bytes.substr(0, cut)), DataError) << cut;
  }
}

TEST(Archive, BadMagicAndVersion) {
  std::string bytes = archive::encode(sample_tensors());
  std::string wrong_version = bytes;
  wrong_version[3] = '2';
  EXPECT_THROW(archive::decode(wrong_version), DataError);
  std::string garbage = bytes;
  garbage[0] = 'X';
  EXPECT_THROW(archive::decode(garbage), DataError);
  EXPECT_THROW(archive::decode(bytes + "extra"), DataError);
}

#include "cmrhead/export_format.hpp"
#include "cmrhead/harness.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <random>

using namespace cmrhead;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("cmrhead_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ExportManifest small_export(const fs::path& dir) {
  return export_toy(make_toy("q-composition"), toy_prompt(10, 3), "toy", dir);
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary | std::ios::trunc) << s; }

}  // namespace

TEST(Blob, RoundTripIsBitExactForFloats) {
  TempDir d("blob");
  std::mt19937 rng(5);
  std::normal_distribution<float> n(0.0f, 100.0f);
  Matrix m(7, 5);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  write_blob(d.path / "x.f32", m);
  EXPECT_EQ(fs::file_size(d.path / "x.f32"), 4u * 35u);
  const auto back = read_blob(d.path / "x.f32", {7, 5});
  for (Eigen::Index r = 0; r < 7; ++r)
    for (Eigen::Index c = 0; c < 5; ++c) {
      const float a = static_cast<float>(m(r, c));
      const float b = static_cast<float>(back(r, c));
      EXPECT_EQ(std::memcmp(&a, &b, sizeof a), 0);
    }
  // Row-major little-endian layout: element (0, 1) is the second float on disk.
  const auto raw = slurp(d.path / "x.f32");
  float second;
  std::memcpy(&second, raw.data() + 4, 4);
  EXPECT_EQ(second, static_cast<float>(m(0, 1)));
}

TEST(Blob, RejectsWrongLengthAndShape) {
  TempDir d("blob_bad");
  write_blob(d.path / "x.f32", Matrix::Ones(3, 3));
  EXPECT_THROW(read_blob(d.path / "x.f32", {3, 4}), data_error);
  EXPECT_THROW(read_blob(d.path / "x.f32", {9}), data_error);
  EXPECT_THROW(read_blob(d.path / "missing.f32", {3, 3}), data_error);
}

TEST(Export, ToyExportValidatesAndLoads) {
  TempDir d("toy");
  const auto m = small_export(d.path);
  EXPECT_EQ(m.n_repeat(), 10u);
  const auto ex = load_export(d.path);
  EXPECT_EQ(ex.manifest.heads.size(), 2u);
  EXPECT_EQ(ex.manifest.extraction_timestamp, "1970-01-01T00:00:00Z");
  for (const auto& h : ex.heads) {
    EXPECT_EQ(h.scores.values.rows(), 21);
    ASSERT_TRUE(h.kernel.has_value());
    EXPECT_EQ(h.kernel->matrix.rows(), m.d_head);
  }
  EXPECT_FALSE(fs::exists(d.path / "manifest.json.tmp"));
}

TEST(Export, ManifestRoundTrip) {
  TempDir d("manifest");
  const auto m = small_export(d.path);
  const auto back = parse_manifest(manifest_to_string(m));
  EXPECT_EQ(manifest_to_string(back), manifest_to_string(m));
  EXPECT_EQ(back.prompt_tokens, m.prompt_tokens);
}

TEST(Export, IsDeterministic) {
  TempDir a("det_a"), b("det_b");
  small_export(a.path);
  small_export(b.path);
  for (const auto& e : fs::directory_iterator(a.path))
    EXPECT_EQ(slurp(e.path()), slurp(b.path / e.path().filename())) << e.path();
}

TEST(Export, MissingFieldIsNamed) {
  TempDir d("missing_field");
  small_export(d.path);
  auto j = nlohmann::json::parse(slurp(d.path / kManifestName));
  j["heads"][1].erase("scores_shape");
  try {
    parse_manifest(j.dump());
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    EXPECT_NE(std::string(e.what()).find("heads[1].scores_shape"), std::string::npos) << e.what();
  }
  j = nlohmann::json::parse(slurp(d.path / kManifestName));
  j.erase("prompt_tokens");
  try {
    parse_manifest(j.dump());
    FAIL() << "expected data_error";
  } catch (const data_error& e) {
    EXPECT_NE(std::string(e.what()).find("prompt_tokens"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_manifest("{not json"), data_error);
  j = nlohmann::json::parse(slurp(d.path / kManifestName));
  j["format_version"] = 99;
  EXPECT_THROW(parse_manifest(j.dump()), data_error);
}

TEST(Export, StructuralViolationsAreRejected) {
  TempDir d("structure");
  const auto good = small_export(d.path);
  auto expect_bad = [&](auto mutate) {
    auto m = good;
    mutate(m);
    EXPECT_THROW(validate_export(d.path, m), data_error);
  };
  expect_bad([](ExportManifest& m) { m.prompt_tokens.pop_back(); });
  expect_bad([](ExportManifest& m) { m.prompt_tokens[1] = 63; });
  expect_bad([](ExportManifest& m) { m.heads.clear(); });
  expect_bad([](ExportManifest& m) { m.heads[0].layer = 5; });
  expect_bad([](ExportManifest& m) { m.heads[1] = m.heads[0]; });
  expect_bad([](ExportManifest& m) { m.heads[0].scores_shape = {21, 20}; });
  expect_bad([](ExportManifest& m) { m.heads[0].kernel_shape = {2, 2}; });
  expect_bad([](ExportManifest& m) { m.heads[0].scores_file = "nope.f32"; });
  EXPECT_NO_THROW(validate_export(d.path, good));

  // Truncated blob on disk.
  fs::resize_file(d.path / good.heads[0].scores_file, 40);
  EXPECT_THROW(load_export(d.path), data_error);
}

TEST(Export, NoManifestMeansNoExport) {
  TempDir d("empty");
  EXPECT_THROW(load_export(d.path), data_error);
  EXPECT_THROW(load_export(d.path / "absent"), data_error);
  // A rerun that fails midway leaves no stale manifest behind.
  small_export(d.path);
  spit(d.path / kManifestName, "{}");
  EXPECT_THROW(load_export(d.path), data_error);
  small_export(d.path);
  EXPECT_NO_THROW(load_export(d.path));
}

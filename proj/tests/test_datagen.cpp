#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "doprompt/analysis.hpp"
#include "doprompt/datagen.hpp"
#include "doprompt/errors.hpp"

using namespace doprompt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("doprompt_datagen_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Render, NeutralStyleIsGrayOnBlack) {
  DomainStyleSpec neutral{"neutral", 0.0, 0.0, 0.0, false, 0.0};
  for (int cls = 0; cls < 5; ++cls) {
    std::mt19937_64 rng(cls);
    auto img = render_image(cls, neutral, rng);
    const std::size_t plane = kImageSize * kImageSize;
    std::size_t lit = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      EXPECT_EQ(img[i], img[plane + i]);
      EXPECT_EQ(img[i], img[2 * plane + i]);
      EXPECT_TRUE(img[i] == 0.0f || img[i] == 1.0f);
      lit += img[i] > 0.5f;
    }
    EXPECT_GT(lit, 20u) << cls;
  }
}

TEST(Render, OutlineInteriorIsBackground) {
  DomainStyleSpec filled{"f", 0.0, 0.3, 0.0, false, 0.0};
  DomainStyleSpec outline{"o", 0.0, 0.3, 0.0, true, 0.0};
  std::mt19937_64 a(5), b(5);
  auto fi = render_image(0, filled, a);
  auto oi = render_image(0, outline, b);
  // Centre of the disk: foreground when filled, background when outlined.
  const std::size_t c = (kImageSize / 2) * kImageSize + kImageSize / 2;
  EXPECT_EQ(fi[c], 1.0f);
  EXPECT_FLOAT_EQ(oi[c], 0.3f);
  std::size_t on_f = 0, on_o = 0;
  for (std::size_t i = 0; i < kImageSize * kImageSize; ++i) {
    on_f += fi[i] == 1.0f;
    on_o += oi[i] == 1.0f;
  }
  EXPECT_LT(on_o, on_f);
  EXPECT_GT(on_o, 0u);
}

TEST(Render, ValuesInUnitRangeAndBadInputs) {
  for (const auto& style : builtin_styles(8)) {
    std::mt19937_64 rng(1);
    for (int cls = 0; cls < 5; ++cls)
      for (float v : render_image(cls, style, rng)) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  std::mt19937_64 rng(1);
  EXPECT_THROW(render_image(5, builtin_styles(2)[0], rng), IndexError);
  DomainStyleSpec bad{"bad", 0.0, 1.5, 0.0, false, 0.0};
  EXPECT_THROW(render_image(0, bad, rng), ConfigError);
}

TEST(Styles, DistinctNamesAndPolarity) {
  auto styles = builtin_styles(10);
  ASSERT_EQ(styles.size(), 10u);
  std::map<std::string, int> names;
  for (const auto& s : styles) {
    ++names[s.name];
    EXPECT_LT(s.background, 0.5);
  }
  EXPECT_EQ(names.size(), 10u);
  EXPECT_GT(styles[2].hue_rotation, styles[0].hue_rotation);
  EXPECT_LT(styles[2].hue_rotation, styles[1].hue_rotation);
}

TEST(Dataset, BalancedAndDeterministic) {
  auto a = generate_dataset(3, 20, 9);
  auto b = generate_dataset(3, 20, 9);
  EXPECT_EQ(a.size(), 60u);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_TRUE(a.warnings.empty());
  for (int d = 0; d < 3; ++d) {
    std::map<int, int> per_class;
    for (std::size_t i : a.indices_of_domain(d)) ++per_class[a.labels[i]];
    EXPECT_EQ(per_class.size(), 5u);
    for (auto [cls, n] : per_class) EXPECT_EQ(n, 4);
  }
  EXPECT_NE(generate_dataset(3, 20, 10).pixels, a.pixels);
  // Each image has its own stream, so a larger set extends a smaller one.
  auto big = generate_dataset(3, 25, 9);
  auto first = a.image(0), same = big.image(0);
  EXPECT_TRUE(std::equal(first.begin(), first.end(), same.begin()));
}

TEST(Dataset, RoundingWarningAndErrors) {
  auto d = generate_dataset(2, 12, 0);
  EXPECT_EQ(d.size(), 20u);
  ASSERT_EQ(d.warnings.size(), 1u);
  EXPECT_NE(d.warnings[0].find("rounded down to 10"), std::string::npos);
  EXPECT_THROW(generate_dataset(1, 10, 0), ConfigError);
  EXPECT_THROW(generate_dataset(2, 3, 0), ConfigError);
}

TEST(Dataset, CacheRoundTripAndTruncation) {
  auto d = generate_dataset(2, 10, 4);
  const fs::path p = scratch("cache.dpd");
  save_dataset(p, d);
  auto back = load_dataset(p);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.domains, d.domains);
  EXPECT_EQ(back.seed, 4u);

  const auto size = fs::file_size(p);
  fs::resize_file(p, size - 7);
  EXPECT_THROW(load_dataset(p), FormatError);
  {
    std::ofstream out(p, std::ios::binary);
    out << "NOPE";
  }
  EXPECT_THROW(load_dataset(p), FormatError);
  fs::remove(p);
  EXPECT_THROW(load_dataset(p), FormatError);
}

TEST(Dataset, RawDirectoryRoundTrip) {
  auto d = generate_dataset(2, 10, 5);
  const fs::path dir = scratch("raw");
  export_raw_directory(dir, d);
  auto back = import_raw_directory(dir);
  EXPECT_EQ(back.pixels, d.pixels);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.domain_names, d.domain_names);
  fs::resize_file(dir / "labels.i32", 8);
  EXPECT_THROW(import_raw_directory(dir), FormatError);
  fs::remove_all(dir);
  EXPECT_THROW(import_raw_directory(dir), FormatError);
}

TEST(Dataset, DomainsAreFartherApartThanWithin) {
  auto d = generate_dataset(4, 100, 0);
  auto report = domain_distance(raw_pixel_features(d));
  EXPECT_GT(report.cross_in_ratio, 1.0);
}

TEST(Dataset, DeriveSeedSeparatesStreams) {
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
  EXPECT_EQ(derive_seed(7, 1, 1), derive_seed(7, 1, 1));
}

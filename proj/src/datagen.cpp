#include "doprompt/datagen.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include "binary_io.hpp"
#include "doprompt/errors.hpp"

namespace doprompt {

namespace {

constexpr std::array<char, 4> kDatasetMagic{'D', 'P', 'D', '1'};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

std::array<double, 3> hsv_to_rgb(double hue, double sat, double val) {
  const double h = std::fmod(hue, 360.0) / 60.0;
  const double c = val * sat;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = val - c;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h)) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  for (double& v : rgb) v += m;
  return rgb;
}

bool inside_shape(ShapeClass shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeClass::disk:
      return dx * dx + dy * dy <= r * r;
    case ShapeClass::square:
      return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeClass::cross:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    case ShapeClass::triangle: {
      // Apex at (0, -r), base at dy = 0.8 r spanning [-r, r].
      if (dy < -r || dy > 0.8 * r) return false;
      return std::abs(dx) <= (dy + r) / 1.8;
    }
    case ShapeClass::stripes: {
      if (std::abs(dx) > r || std::abs(dy) > r) return false;
      const int band = static_cast<int>(std::floor((dy + r) / (0.4 * r)));
      return band % 2 == 0;
    }
  }
  return false;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::vector<T> read_raw_array(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("dataset: cannot open " + path.string());
  std::vector<unsigned char> raw(count * 4);
  binary::read_exact(in, reinterpret_cast<char*>(raw.data()), raw.size(), path.string());
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("dataset: trailing bytes in " + path.string());
  }
  std::vector<T> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = std::bit_cast<T>(binary::decode_u32(&raw[4 * i]));
  return out;
}

}  // namespace

void DomainStyleSpec::validate() const {
  auto fail = [this](const std::string& what) {
    throw ConfigError("style '" + name + "': " + what);
  };
  if (!(hue_rotation >= 0.0 && hue_rotation < 360.0)) fail("hue rotation must lie in [0, 360)");
  if (!(background >= 0.0 && background <= 1.0)) fail("background must lie in [0, 1]");
  if (!(noise >= 0.0 && noise <= 1.0)) fail("noise must lie in [0, 1]");
  if (!(texture_frequency >= 0.0)) fail("texture frequency must be non-negative");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ (b + 0x632be59bd9b4e019ull));
}

std::vector<float> render_image(int class_index, const DomainStyleSpec& style,
                                std::mt19937_64& rng, std::size_t size) {
  if (class_index < 0 || static_cast<std::size_t>(class_index) >= kNumShapeClasses) {
    throw IndexError("render_image: class " + std::to_string(class_index) + " outside [0, " +
                     std::to_string(kNumShapeClasses) + ")");
  }
  style.validate();
  const auto shape = static_cast<ShapeClass>(class_index);
  const double s = static_cast<double>(size);
  const double cx = s / 2 + uniform(rng, -0.0625, 0.0625) * s;
  const double cy = s / 2 + uniform(rng, -0.0625, 0.0625) * s;
  const double radius = uniform(rng, 0.26, 0.36) * s;
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  std::vector<unsigned char> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      mask[y * size + x] = inside_shape(shape, x + 0.5 - cx, y + 0.5 - cy, radius) ? 1 : 0;
    }
  }
  if (style.outline_only) {
    std::vector<unsigned char> edge(mask.size(), 0);
    auto at = [&](long long x, long long y) -> int {
      if (x < 0 || y < 0 || x >= static_cast<long long>(size) || y >= static_cast<long long>(size)) {
        return 0;
      }
      return mask[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)];
    };
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        if (!mask[y * size + x]) continue;
        const long long ix = static_cast<long long>(x), iy = static_cast<long long>(y);
        const bool boundary = !at(ix - 1, iy) || !at(ix + 1, iy) || !at(ix, iy - 1) || !at(ix, iy + 1);
        edge[y * size + x] = boundary ? 1 : 0;
      }
    }
    mask = std::move(edge);
  }

  // Foreground contrasts with the background: bright on dark, dark on light.
  const double value = style.background < 0.5 ? 1.0 : 0.15;
  const std::array<double, 3> fg = style.hue_rotation == 0.0
                                       ? std::array<double, 3>{value, value, value}
                                       : hsv_to_rgb(style.hue_rotation, 0.7, value);
  std::vector<float> img(kImageChannels * size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const bool on = mask[y * size + x] != 0;
      double texture = 1.0;
      if (on && style.texture_frequency > 0.0) {
        const double u = (static_cast<double>(x) + static_cast<double>(y)) / (2.0 * s);
        texture = 0.6 + 0.4 * std::cos(2.0 * std::numbers::pi * style.texture_frequency * u + phase);
      }
      for (std::size_t c = 0; c < kImageChannels; ++c) {
        double v = on ? fg[c] * texture + (1.0 - texture) * style.background : style.background;
        if (style.noise > 0.0) v += style.noise * uniform(rng, -1.0, 1.0);
        img[(c * size + y) * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

std::vector<DomainStyleSpec> builtin_styles(std::size_t num_domains) {
  std::vector<DomainStyleSpec> table{
      {"warm", 30.0, 0.05, 0.04, false, 0.0},
      {"cool", 210.0, 0.35, 0.12, false, 4.0},
      {"blend", 120.0, 0.20, 0.08, false, 2.0},
      {"sketch", 0.0, 0.15, 0.04, true, 0.0},
      {"neon", 300.0, 0.25, 0.15, false, 6.0},
      {"chalk", 60.0, 0.40, 0.06, true, 3.0},
  };
  for (std::size_t k = table.size(); k < num_domains; ++k) {
    DomainStyleSpec extra;
    extra.name = "style" + std::to_string(k);
    extra.hue_rotation = std::fmod(37.0 + 137.5 * static_cast<double>(k), 360.0);
    extra.background = std::fmod(0.13 * static_cast<double>(k), 0.45);
    extra.noise = 0.05 + 0.03 * static_cast<double>(k % 5);
    extra.outline_only = k % 3 == 0;
    extra.texture_frequency = static_cast<double>(k % 4) * 1.5;
    table.push_back(extra);
  }
  table.resize(num_domains);
  return table;
}

std::span<const float> SyntheticDataset::image(std::size_t index) const {
  if (index >= size()) throw IndexError("dataset: image index " + std::to_string(index) + " out of range");
  return std::span<const float>(pixels).subspan(index * image_numel(), image_numel());
}

std::vector<std::size_t> SyntheticDataset::indices_of_domain(int domain) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (domains[i] == domain) out.push_back(i);
  }
  return out;
}

Tensor SyntheticDataset::images(std::span<const std::size_t> indices) const {
  const std::size_t n = image_numel();
  std::vector<Real> values(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    auto img = image(indices[r]);
    std::copy(img.begin(), img.end(), values.begin() + r * n);
  }
  return Tensor({indices.size(), channels, height, width}, std::move(values));
}

std::vector<int> SyntheticDataset::labels_of(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

void SyntheticDataset::validate() const {
  if (num_domains == 0 || num_classes == 0 || channels == 0 || height == 0 || width == 0) {
    throw FormatError("dataset: sizes must be positive");
  }
  if (pixels.size() != size() * image_numel() || domains.size() != size()) {
    throw FormatError("dataset: pixel/label/domain arrays disagree in length");
  }
  for (std::size_t i = 0; i < size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw FormatError("dataset: label " + std::to_string(labels[i]) + " out of range");
    }
    if (domains[i] < 0 || static_cast<std::size_t>(domains[i]) >= num_domains) {
      throw FormatError("dataset: domain " + std::to_string(domains[i]) + " out of range");
    }
  }
  if (!domain_names.empty() && domain_names.size() != num_domains) {
    throw FormatError("dataset: expected " + std::to_string(num_domains) + " domain names");
  }
}

SyntheticDataset generate_dataset(std::size_t num_domains, std::size_t per_domain_count,
                                  std::uint64_t seed) {
  if (num_domains < 2) throw ConfigError("generate_dataset: need at least 2 domains");
  const std::size_t per_class = per_domain_count / kNumShapeClasses;
  if (per_class == 0) {
    throw ConfigError("generate_dataset: per-domain count " + std::to_string(per_domain_count) +
                      " is below the number of classes");
  }
  SyntheticDataset data;
  data.num_domains = num_domains;
  data.num_classes = kNumShapeClasses;
  data.seed = seed;
  const std::size_t count = per_class * kNumShapeClasses;
  if (count != per_domain_count) {
    data.warnings.push_back("per-domain count " + std::to_string(per_domain_count) +
                            " not divisible by " + std::to_string(kNumShapeClasses) +
                            " classes; rounded down to " + std::to_string(count));
  }
  const auto styles = builtin_styles(num_domains);
  data.pixels.reserve(num_domains * count * data.image_numel());
  for (std::size_t d = 0; d < num_domains; ++d) {
    data.domain_names.push_back(styles[d].name);
    for (std::size_t i = 0; i < count; ++i) {
      const int cls = static_cast<int>(i % kNumShapeClasses);
      std::mt19937_64 rng(derive_seed(seed, d, i));
      const auto img = render_image(cls, styles[d], rng);
      data.pixels.insert(data.pixels.end(), img.begin(), img.end());
      data.labels.push_back(cls);
      data.domains.push_back(static_cast<int>(d));
    }
  }
  return data;
}

void save_dataset(const std::filesystem::path& path, const SyntheticDataset& data) {
  data.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("dataset: cannot open " + path.string() + " for writing");
  out.write(kDatasetMagic.data(), kDatasetMagic.size());
  for (std::uint64_t v : {static_cast<std::uint64_t>(data.size()),
                          static_cast<std::uint64_t>(data.num_domains),
                          static_cast<std::uint64_t>(data.num_classes),
                          static_cast<std::uint64_t>(data.channels),
                          static_cast<std::uint64_t>(data.height),
                          static_cast<std::uint64_t>(data.width), data.seed}) {
    binary::put_u64(out, v);
  }
  for (float p : data.pixels) binary::put_f32(out, p);
  for (int l : data.labels) binary::put_i32(out, l);
  for (int d : data.domains) binary::put_i32(out, d);
  if (!out) throw FormatError("dataset: write failed for " + path.string());
}

SyntheticDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("dataset: cannot open " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != 4 || magic != kDatasetMagic) {
    throw FormatError("dataset: bad magic in " + path.string());
  }
  SyntheticDataset data;
  const std::uint64_t n = binary::get_u64(in, "dataset header");
  data.num_domains = binary::get_u64(in, "dataset header");
  data.num_classes = binary::get_u64(in, "dataset header");
  data.channels = binary::get_u64(in, "dataset header");
  data.height = binary::get_u64(in, "dataset header");
  data.width = binary::get_u64(in, "dataset header");
  data.seed = binary::get_u64(in, "dataset header");
  const std::uint64_t limit = 1ull << 32;
  if (n > limit || data.channels * data.height * data.width > limit ||
      n * data.channels * data.height * data.width > limit) {
    throw FormatError("dataset: implausible header in " + path.string());
  }
  const std::size_t px = n * data.image_numel();
  std::vector<unsigned char> raw(4 * (px + 2 * n));
  binary::read_exact(in, reinterpret_cast<char*>(raw.data()), raw.size(), "dataset arrays");
  data.pixels.resize(px);
  for (std::size_t i = 0; i < px; ++i) data.pixels[i] = std::bit_cast<float>(binary::decode_u32(&raw[4 * i]));
  data.labels.resize(n);
  data.domains.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    data.labels[i] = static_cast<int>(binary::decode_u32(&raw[4 * (px + i)]));
    data.domains[i] = static_cast<int>(binary::decode_u32(&raw[4 * (px + n + i)]));
  }
  for (std::size_t d = 0; d < data.num_domains; ++d) data.domain_names.push_back("domain" + std::to_string(d));
  data.validate();
  return data;
}

SyntheticDataset import_raw_directory(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "meta.txt");
  if (!meta) throw FormatError("dataset: missing " + (dir / "meta.txt").string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(meta, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("dataset: malformed meta line '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto number = [&](const std::string& key) -> std::size_t {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError("dataset: meta.txt lacks " + key);
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
      throw FormatError("dataset: meta.txt key " + key + " is not a number");
    }
  };
  SyntheticDataset data;
  const std::size_t n = number("num_images");
  data.num_domains = number("num_domains");
  data.num_classes = number("num_classes");
  data.channels = number("channels");
  data.height = number("height");
  data.width = number("width");
  if (kv.count("seed")) data.seed = number("seed");
  data.pixels = read_raw_array<float>(dir / "pixels.f32", n * data.image_numel());
  data.labels = read_raw_array<std::int32_t>(dir / "labels.i32", n);
  data.domains = read_raw_array<std::int32_t>(dir / "domains.i32", n);
  if (auto it = kv.find("domain_names"); it != kv.end()) {
    std::stringstream ss(it->second);
    std::string name;
    while (std::getline(ss, name, ',')) data.domain_names.push_back(trim(name));
  } else {
    for (std::size_t d = 0; d < data.num_domains; ++d) data.domain_names.push_back("domain" + std::to_string(d));
  }
  data.validate();
  return data;
}

void export_raw_directory(const std::filesystem::path& dir, const SyntheticDataset& data) {
  data.validate();
  std::filesystem::create_directories(dir);
  {
    std::ofstream meta(dir / "meta.txt");
    meta << "num_images=" << data.size() << "\nnum_domains=" << data.num_domains
         << "\nnum_classes=" << data.num_classes << "\nchannels=" << data.channels
         << "\nheight=" << data.height << "\nwidth=" << data.width << "\nseed=" << data.seed << '\n';
    if (!data.domain_names.empty()) {
      meta << "domain_names=";
      for (std::size_t d = 0; d < data.domain_names.size(); ++d) meta << (d ? "," : "") << data.domain_names[d];
      meta << '\n';
    }
  }
  std::ofstream px(dir / "pixels.f32", std::ios::binary | std::ios::trunc);
  for (float p : data.pixels) binary::put_f32(px, p);
  std::ofstream lb(dir / "labels.i32", std::ios::binary | std::ios::trunc);
  for (int l : data.labels) binary::put_i32(lb, l);
  std::ofstream dm(dir / "domains.i32", std::ios::binary | std::ios::trunc);
  for (int d : data.domains) binary::put_i32(dm, d);
  if (!px || !lb || !dm) throw FormatError("dataset: write failed under " + dir.string());
}

}  // namespace doprompt

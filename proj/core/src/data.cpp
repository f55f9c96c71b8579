#include "dcaunet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "dcaunet/errors.hpp"
#include "dcaunet/random.hpp"

namespace dcaunet {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kGenerateStream = 0x67656e;
constexpr std::uint64_t kAugmentStream = 0x617567;
constexpr std::uint64_t kShuffleStream = 0x736875;

const char* kManifestMagic = "#dcaunet-manifest v1";

void require_image(const Tensor& image, const LabelMask& mask) {
  if (image.rank() != 3) throw DimensionError("expected an (H,W,C) image, got " + to_string(image.shape()));
  if (image.dim(0) != mask.height || image.dim(1) != mask.width) {
    throw DimensionError("image " + to_string(image.shape()) + " and mask " +
                         std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " disagree");
  }
}

// Generic gather: out(y, x) = in(src(y, x)).
template <typename Src>
std::pair<Tensor, LabelMask> remap(const Tensor& image, const LabelMask& mask, std::size_t out_h,
                                   std::size_t out_w, Src src) {
  const std::size_t c = image.dim(2), w = image.dim(1);
  const auto in = image.values();
  std::vector<double> out(out_h * out_w * c);
  LabelMask m(out_h, out_w);
  m.spacing = mask.spacing;
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      const auto [sy, sx] = src(y, x);
      m.at(y, x) = mask.at(sy, sx);
      for (std::size_t k = 0; k < c; ++k) out[(y * out_w + x) * c + k] = in[(sy * w + sx) * c + k];
    }
  return {Tensor({out_h, out_w, c}, std::move(out)), std::move(m)};
}

std::string read_file_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

double SynthSpec::class_intensity(std::size_t class_id) const {
  if (num_classes < 2) return background;
  return background + (foreground_max - background) * static_cast<double>(class_id) /
                          static_cast<double>(num_classes - 1);
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  if (num_classes > 256) throw ConfigError("synth: num_classes must fit an 8-bit mask");
  if (size < 8) throw ConfigError("synth: canvas size must be >= 8");
  if (families.empty()) throw ConfigError("synth: at least one shape family is required");
  if (!(noise_std >= 0.0)) throw ConfigError("synth: noise_std must be non-negative");
  if (!(background >= 0.0 && foreground_max <= 1.0 && background < foreground_max)) {
    throw ConfigError("synth: need 0 <= background < foreground_max <= 1");
  }
  if (min_count > max_count || max_count == 0) throw ConfigError("synth: invalid instance count range");
  if (!(min_extent > 0.0 && min_extent <= max_extent && max_extent < 0.45)) {
    throw ConfigError("synth: need 0 < min_extent <= max_extent < 0.45");
  }
  const double gap = (foreground_max - background) / static_cast<double>(num_classes - 1);
  const double needed = std::max(4.0 * noise_std, 4.0 / 255.0);
  if (gap < needed) {
    std::ostringstream os;
    os << "synth: " << num_classes << " classes leave an intensity gap of " << gap
       << ", below the distinguishable minimum " << needed;
    throw ConfigError(os.str());
  }
}

bool shape_contains(const ShapeInstance& s, double y, double x) {
  const double dy = y - s.cy, dx = x - s.cx;
  if (s.family == ShapeFamily::annulus) {
    const double r2 = dy * dy + dx * dx;
    const double ri = s.inner * s.ry;
    return r2 <= s.ry * s.ry && r2 >= ri * ri;
  }
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  const double u = c * dy + sn * dx, v = -sn * dy + c * dx;
  if (s.family == ShapeFamily::rectangle) return std::abs(u) <= s.ry && std::abs(v) <= s.rx;
  return (u * u) / (s.ry * s.ry) + (v * v) / (s.rx * s.rx) <= 1.0;
}

GeneratedSample generate(const SynthSpec& spec, std::size_t index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, kGenerateStream, index));
  const std::size_t n = spec.size;
  const double sz = static_cast<double>(n);
  GeneratedSample out;
  LabelMask& mask = out.sample.mask;
  mask = LabelMask(n, n);
  std::vector<bool> blocked(n * n, false);  // placed pixels plus a 1 px margin

  for (std::size_t cls = 1; cls < spec.num_classes; ++cls) {
    const auto family = spec.families[(cls - 1) % spec.families.size()];
    const auto count = rng.uniform_int(static_cast<std::int64_t>(spec.min_count),
                                       static_cast<std::int64_t>(spec.max_count));
    for (std::int64_t inst = 0; inst < count; ++inst) {
      for (std::size_t attempt = 0; attempt < spec.max_attempts; ++attempt) {
        ShapeInstance s;
        s.class_id = static_cast<std::int32_t>(cls);
        s.family = family;
        const double r = rng.uniform(spec.min_extent, spec.max_extent) * sz;
        const double aspect = rng.uniform(0.5, 1.0);
        s.angle = rng.uniform(0.0, std::numbers::pi);
        s.ry = r;
        s.rx = family == ShapeFamily::annulus ? r : r * aspect;
        s.inner = family == ShapeFamily::annulus ? rng.uniform(0.5, 0.7) : 0.0;
        const double bound = std::max(s.ry, s.rx);
        s.cy = rng.uniform(bound, sz - 1.0 - bound);
        s.cx = rng.uniform(bound, sz - 1.0 - bound);

        std::vector<std::size_t> pixels;
        bool clash = false;
        const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(s.cy - bound)));
        const auto y1 = static_cast<std::size_t>(std::min(sz - 1.0, std::ceil(s.cy + bound)));
        const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(s.cx - bound)));
        const auto x1 = static_cast<std::size_t>(std::min(sz - 1.0, std::ceil(s.cx + bound)));
        for (std::size_t y = y0; y <= y1 && !clash; ++y)
          for (std::size_t x = x0; x <= x1; ++x) {
            if (!shape_contains(s, static_cast<double>(y), static_cast<double>(x))) continue;
            if (blocked[y * n + x]) {
              clash = true;
              break;
            }
            pixels.push_back(y * n + x);
          }
        if (clash || pixels.empty()) continue;
        for (auto p : pixels) {
          mask.labels[p] = s.class_id;
          const std::size_t y = p / n, x = p % n;
          blocked[p] = true;
          if (y > 0) blocked[p - n] = true;
          if (y + 1 < n) blocked[p + n] = true;
          if (x > 0) blocked[p - 1] = true;
          if (x + 1 < n) blocked[p + 1] = true;
        }
        out.shapes.push_back(s);
        break;
      }
    }
  }

  std::vector<double> img(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    double v = spec.class_intensity(static_cast<std::size_t>(mask.labels[i]));
    if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
    img[i] = std::clamp(v, 0.0, 1.0);
  }
  out.sample.image = Tensor({n, n, 1}, std::move(img));
  std::ostringstream id;
  id << "synth_" << spec.seed << "_" << index;
  out.sample.id = id.str();
  return out;
}

std::vector<Sample> generate_dataset(const SynthSpec& spec, std::size_t count, std::size_t first_index) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(spec, first_index + i).sample);
  return out;
}

SampleBatch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw UsageError("make_batch: no indices");
  const Shape one = samples.at(indices.front()).image.shape();
  if (one.size() != 3) throw DimensionError("make_batch: samples must be (H,W,C)");
  SampleBatch b;
  std::vector<double> data;
  data.reserve(indices.size() * numel(one));
  for (auto i : indices) {
    const Sample& s = samples.at(i);
    if (s.image.shape() != one) {
      throw DimensionError("make_batch: sample " + s.id + " has shape " + to_string(s.image.shape()) +
                           ", expected " + to_string(one));
    }
    require_image(s.image, s.mask);
    const auto v = s.image.values();
    data.insert(data.end(), v.begin(), v.end());
    b.masks.push_back(s.mask);
    b.ids.push_back(s.id);
  }
  b.images = Tensor({indices.size(), one[0], one[1], one[2]}, std::move(data));
  return b;
}

std::pair<Tensor, LabelMask> rotate90(const Tensor& image, const LabelMask& mask, int quarter_turns) {
  require_image(image, mask);
  const int k = ((quarter_turns % 4) + 4) % 4;
  const std::size_t h = mask.height, w = mask.width;
  switch (k) {
    case 0:
      return {image, mask};
    case 1:  // counter-clockwise
      return remap(image, mask, w, h, [&](std::size_t y, std::size_t x) {
        return std::pair{x, w - 1 - y};
      });
    case 2:
      return remap(image, mask, h, w, [&](std::size_t y, std::size_t x) {
        return std::pair{h - 1 - y, w - 1 - x};
      });
    default:
      return remap(image, mask, w, h, [&](std::size_t y, std::size_t x) {
        return std::pair{h - 1 - x, y};
      });
  }
}

std::pair<Tensor, LabelMask> flip(const Tensor& image, const LabelMask& mask, bool horizontal) {
  require_image(image, mask);
  const std::size_t h = mask.height, w = mask.width;
  return remap(image, mask, h, w, [&](std::size_t y, std::size_t x) {
    return horizontal ? std::pair{y, w - 1 - x} : std::pair{h - 1 - y, x};
  });
}

std::pair<Tensor, LabelMask> rotate_small(const Tensor& image, const LabelMask& mask, double degrees) {
  require_image(image, mask);
  const std::size_t h = mask.height, w = mask.width, c = image.dim(2);
  const double th = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  const double cy = (static_cast<double>(h) - 1.0) / 2.0, cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double maxy = static_cast<double>(h - 1), maxx = static_cast<double>(w - 1);
  const auto in = image.values();
  std::vector<double> out(h * w * c);
  LabelMask m(h, w);
  m.spacing = mask.spacing;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      const double sy = std::clamp(cy + cs * dy + sn * dx, 0.0, maxy);
      const double sx = std::clamp(cx - sn * dy + cs * dx, 0.0, maxx);
      m.at(y, x) = mask.at(static_cast<std::size_t>(std::lround(sy)), static_cast<std::size_t>(std::lround(sx)));
      const auto y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
      for (std::size_t k = 0; k < c; ++k) {
        auto px = [&](std::size_t yy, std::size_t xx) { return in[(yy * w + xx) * c + k]; };
        out[(y * w + x) * c + k] = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
                                   fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
      }
    }
  return {Tensor({h, w, c}, std::move(out)), std::move(m)};
}

std::pair<Tensor, LabelMask> augment(const Tensor& image, const LabelMask& mask, std::uint64_t seed,
                                     const AugmentConfig& cfg) {
  require_image(image, mask);
  if (!cfg.enabled) return {image, mask};
  // Every draw happens regardless of the flags so toggling one transform
  // leaves the others unchanged for a given seed.
  Rng rng(derive_seed(seed, kAugmentStream));
  const auto turns = static_cast<int>(rng.uniform_int(0, 3));
  const bool tilt = rng.bernoulli(0.5);
  const double angle = rng.uniform(-cfg.max_angle_deg, cfg.max_angle_deg);
  const bool fh = rng.bernoulli(0.5), fv = rng.bernoulli(0.5);
  std::pair<Tensor, LabelMask> cur{image, mask};
  if (cfg.rotate90 && turns != 0) cur = rotate90(cur.first, cur.second, turns);
  if (tilt && cfg.max_angle_deg > 0.0) cur = rotate_small(cur.first, cur.second, angle);
  if (cfg.flips && fh) cur = flip(cur.first, cur.second, true);
  if (cfg.flips && fv) cur = flip(cur.first, cur.second, false);
  return cur;
}

std::vector<std::size_t> shuffle_order(std::size_t n, std::uint64_t epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, kShuffleStream, epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

// --- graymap I/O -----------------------------------------------------------

void write_pgm(const fs::path& path, const Graymap& g) {
  if (g.maxval != 255 && g.maxval != 65535) throw FormatError("pgm: maxval must be 255 or 65535");
  if (g.pixels.size() != g.width * g.height) throw FormatError("pgm: pixel count does not match extents");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P5\n" << g.width << ' ' << g.height << '\n' << g.maxval << '\n';
  std::string bytes;
  bytes.reserve(g.pixels.size() * (g.maxval > 255 ? 2 : 1));
  for (auto p : g.pixels) {
    if (p > g.maxval) throw FormatError("pgm: pixel exceeds maxval");
    if (g.maxval > 255) bytes.push_back(static_cast<char>(p >> 8));  // big-endian
    bytes.push_back(static_cast<char>(p & 0xff));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

Graymap read_pgm(const fs::path& path) {
  const std::string text = read_file_text(path);
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) { return FormatError(path.string() + ": " + why); };
  auto skip_space = [&] {
    while (pos < text.size()) {
      if (text[pos] == '#') {
        while (pos < text.size() && text[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(text[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::uint64_t {
    skip_space();
    if (pos >= text.size() || !std::isdigit(static_cast<unsigned char>(text[pos]))) {
      throw fail("malformed graymap header");
    }
    std::uint64_t v = 0;
    while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
      v = v * 10 + static_cast<std::uint64_t>(text[pos++] - '0');
      if (v > (1u << 30)) throw fail("header value too large");
    }
    return v;
  };
  if (text.size() < 2 || text[0] != 'P' || text[1] != '5') throw fail("not a binary graymap (P5)");
  pos = 2;
  Graymap g;
  g.width = number();
  g.height = number();
  const auto maxval = number();
  if (g.width == 0 || g.height == 0) throw fail("zero image extent");
  if (maxval == 0 || maxval > 65535) throw fail("maxval out of range");
  g.maxval = static_cast<std::uint32_t>(maxval);
  if (pos >= text.size() || !std::isspace(static_cast<unsigned char>(text[pos]))) {
    throw fail("malformed graymap header");
  }
  ++pos;
  const std::size_t bpp = g.maxval > 255 ? 2 : 1;
  const std::size_t need = g.width * g.height * bpp;
  if (text.size() - pos < need) throw fail("truncated pixel data");
  g.pixels.resize(g.width * g.height);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    const auto* p = reinterpret_cast<const unsigned char*>(text.data() + pos + i * bpp);
    const std::uint16_t v = bpp == 2 ? static_cast<std::uint16_t>((p[0] << 8) | p[1]) : p[0];
    if (v > g.maxval) throw fail("pixel exceeds maxval");
    g.pixels[i] = v;
  }
  return g;
}

void write_image(const fs::path& path, const Tensor& image, int bits) {
  if (bits != 8 && bits != 16) throw UsageError("write_image: bits must be 8 or 16");
  if (image.rank() != 3 || image.dim(2) != 1) {
    throw DimensionError("write_image expects (H,W,1), got " + to_string(image.shape()));
  }
  Graymap g;
  g.height = image.dim(0);
  g.width = image.dim(1);
  g.maxval = bits == 16 ? 65535 : 255;
  g.pixels.reserve(image.numel());
  for (double v : image.values()) {
    const double q = std::round(std::clamp(v, 0.0, 1.0) * g.maxval);
    g.pixels.push_back(static_cast<std::uint16_t>(q));
  }
  write_pgm(path, g);
}

Tensor read_image(const fs::path& path) {
  const Graymap g = read_pgm(path);
  std::vector<double> v(g.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(g.pixels[i]) / g.maxval;
  return Tensor({g.height, g.width, 1}, std::move(v));
}

void write_mask(const fs::path& path, const LabelMask& mask) {
  Graymap g;
  g.height = mask.height;
  g.width = mask.width;
  g.maxval = 255;
  g.pixels.reserve(mask.labels.size());
  for (auto l : mask.labels) {
    if (l < 0 || l > 255) throw FormatError("write_mask: label " + std::to_string(l) + " does not fit 8 bits");
    g.pixels.push_back(static_cast<std::uint16_t>(l));
  }
  write_pgm(path, g);
}

LabelMask read_mask(const fs::path& path, std::size_t num_classes) {
  const Graymap g = read_pgm(path);
  if (g.maxval > 255) throw FormatError(path.string() + ": label masks must be 8-bit");
  LabelMask m(g.height, g.width);
  for (std::size_t i = 0; i < g.pixels.size(); ++i) {
    if (g.pixels[i] >= num_classes) {
      throw FormatError(path.string() + ": label " + std::to_string(g.pixels[i]) + " >= num_classes " +
                        std::to_string(num_classes));
    }
    m.labels[i] = g.pixels[i];
  }
  return m;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << kManifestMagic << "\nimage\tmask\tsplit\n";
  for (const auto& e : entries) {
    for (const auto* f : {&e.image, &e.mask, &e.split}) {
      if (f->empty() || f->find_first_of("\t\n\r") != std::string::npos) {
        throw FormatError("manifest fields must be non-empty and free of tabs/newlines");
      }
    }
    out << e.image << '\t' << e.mask << '\t' << e.split << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw FormatError("manifest not found: " + path.string());
  std::istringstream in(read_file_text(path));
  std::string line;
  if (!std::getline(in, line) || line != kManifestMagic) {
    throw FormatError(path.string() + ": missing '" + std::string(kManifestMagic) + "' header");
  }
  if (!std::getline(in, line) || line != "image\tmask\tsplit") {
    throw FormatError(path.string() + ": expected column header 'image<TAB>mask<TAB>split'");
  }
  std::vector<ManifestEntry> out;
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      f.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (f.size() != 3) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    out.push_back({f[0], f[1], f[2]});
  }
  return out;
}

std::vector<Sample> load_split(const fs::path& manifest, const std::string& split, std::size_t num_classes) {
  const auto entries = read_manifest(manifest);
  const fs::path base = manifest.parent_path();
  std::vector<Sample> out;
  for (const auto& e : entries) {
    if (!split.empty() && e.split != split) continue;
    const fs::path ip = base / e.image, mp = base / e.mask;
    for (const auto& p : {ip, mp}) {
      if (!fs::exists(p)) throw FormatError("manifest " + manifest.string() + " references missing file " + p.string());
    }
    Sample s;
    s.id = fs::path(e.image).stem().string();
    s.image = read_image(ip);
    s.mask = read_mask(mp, num_classes);
    require_image(s.image, s.mask);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dcaunet

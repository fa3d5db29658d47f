#include "blab/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "blab/rng.hpp"

namespace blab {

std::vector<const Tensor*> Dataset::image_ptrs() const {
  std::vector<const Tensor*> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(&it.pixels);
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.label);
  return out;
}

namespace {

void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

bool in_shape(int shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:  // disk
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::fabs(dx) <= 0.9 * r && std::fabs(dy) <= 0.9 * r;
    case 2: {  // triangle, apex up
      if (dy < -r || dy > 0.7 * r) return false;
      double t = (dy + r) / (1.7 * r);  // 0 at apex, 1 at base
      return std::fabs(dx) <= 0.9 * r * t;
    }
    case 3: {  // ring
      double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.55 * r * 0.55 * r;
    }
    default: {  // bar at angle (shape-4) * 30 degrees
      double theta = (shape - 4) * (3.141592653589793 / 6.0);
      double ct = std::cos(theta), st = std::sin(theta);
      double along = dx * ct + dy * st;
      double across = -dx * st + dy * ct;
      return std::fabs(along) <= 1.2 * r && std::fabs(across) <= 0.35 * r;
    }
  }
}

LabeledImage render_sample(int cls, const SynthConfig& cfg, Rng& rng) {
  const int h = cfg.height, w = cfg.width, c = cfg.channels;
  double fg[3];
  hsv_to_rgb(static_cast<double>(cls) / cfg.num_classes, 0.85, 0.9, fg);
  const int shape = cls % 10;
  double cx = w / 2.0 + rng.uniform(-4.0, 4.0);
  double cy = h / 2.0 + rng.uniform(-4.0, 4.0);
  double radius = 9.0 * (1.0 + rng.uniform(-0.2, 0.2));
  double fg_jitter = rng.uniform(-0.08, 0.08);
  double bg = 0.2 + rng.uniform(-0.05, 0.05);
  LabeledImage img;
  img.pixels = Tensor({c, h, w});
  img.label = cls;
  img.origin_label = cls;
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      bool inside = in_shape(shape, j - cx, i - cy, radius);
      for (int ch = 0; ch < c; ++ch) {
        double base = inside ? std::min(1.0, std::max(0.0, fg[ch % 3] + fg_jitter)) : bg;
        double v = base + 0.05 * rng.normal();
        img.pixels.at3(ch, i, j) = std::min(1.0, std::max(0.0, v));
      }
    }
  return img;
}

}  // namespace

std::pair<Dataset, Dataset> synth_dataset(const SynthConfig& cfg) {
  if (cfg.num_classes < 2) fail("synth_dataset: need at least 2 classes");
  Dataset train, test;
  for (Dataset* d : {&train, &test}) {
    d->num_classes = cfg.num_classes;
    d->height = cfg.height;
    d->width = cfg.width;
    d->channels = cfg.channels;
  }
  const int n_test = cfg.n_per_class / 6;
  const int n_train = cfg.n_per_class - n_test;
  for (int cls = 0; cls < cfg.num_classes; ++cls) {
    Rng rng(derive_seed(cfg.seed, "synth-class", static_cast<uint64_t>(cls)));
    for (int i = 0; i < cfg.n_per_class; ++i) {
      LabeledImage img = render_sample(cls, cfg, rng);
      (i < n_train ? train : test).items.push_back(std::move(img));
    }
  }
  return {std::move(train), std::move(test)};
}

std::vector<LabeledImage> synth_class_samples(uint64_t seed, int cls, int count,
                                              const SynthConfig& proto) {
  Rng rng(derive_seed(seed, "synth-pool-class", static_cast<uint64_t>(cls)));
  std::vector<LabeledImage> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(render_sample(cls, proto, rng));
  return out;
}

TriggerKind trigger_kind_from_string(const std::string& s) {
  if (s == "patched") return TriggerKind::Patched;
  if (s == "blended") return TriggerKind::Blended;
  if (s == "sig") return TriggerKind::Sig;
  if (s == "warped") return TriggerKind::Warped;
  fail("unknown attack kind: " + s);
}

std::string to_string(TriggerKind k) {
  switch (k) {
    case TriggerKind::Patched: return "patched";
    case TriggerKind::Blended: return "blended";
    case TriggerKind::Sig: return "sig";
    case TriggerKind::Warped: return "warped";
  }
  return "?";
}

TriggerSpec TriggerSpec::make(TriggerKind kind, int h, int w, int c, uint64_t seed,
                              const Params& p) {
  TriggerSpec spec;
  spec.kind = kind;
  Rng rng(derive_seed(seed, "trigger"));
  switch (kind) {
    case TriggerKind::Patched: {
      spec.mask = Tensor::zeros({h, w});
      spec.patch = Tensor::zeros({c, h, w});
      int sz = std::min({p.patch_size, h, w});
      for (int i = 0; i < sz; ++i)
        for (int j = 0; j < sz; ++j) {
          spec.mask.at2(i, j) = 1.0;
          for (int ch = 0; ch < c; ++ch) spec.patch.at3(ch, i, j) = 1.0;
        }
      break;
    }
    case TriggerKind::Blended: {
      spec.alpha = p.alpha;
      spec.blend = Tensor({c, h, w});
      for (int i = 0; i < spec.blend.numel(); ++i)
        spec.blend[static_cast<size_t>(i)] = rng.uniform();
      break;
    }
    case TriggerKind::Sig:
      spec.sig_delta = p.sig_delta;
      spec.sig_freq = p.sig_freq;
      break;
    case TriggerKind::Warped: {
      const int k = p.warp_grid;
      if (k < 2) fail("TriggerSpec: warp grid must be at least 2");
      // Control offsets in pixels, bounded by strength * grid cell, then
      // bilinearly upsampled to a dense flow field.
      const double cell_y = static_cast<double>(h - 1) / (k - 1);
      const double cell_x = static_cast<double>(w - 1) / (k - 1);
      std::vector<double> gy(static_cast<size_t>(k) * k), gx(static_cast<size_t>(k) * k);
      for (int i = 0; i < k * k; ++i) {
        gy[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0) * p.warp_strength * cell_y;
        gx[static_cast<size_t>(i)] = rng.uniform(-1.0, 1.0) * p.warp_strength * cell_x;
      }
      spec.warp_flow = Tensor({2, h, w});
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double fi = (k - 1) * static_cast<double>(i) / (h - 1);
          double fj = (k - 1) * static_cast<double>(j) / (w - 1);
          int i0 = std::min(static_cast<int>(fi), k - 2);
          int j0 = std::min(static_cast<int>(fj), k - 2);
          double ti = fi - i0, tj = fj - j0;
          auto lerp2 = [&](const std::vector<double>& g) {
            double a = g[static_cast<size_t>(i0) * k + j0];
            double b = g[static_cast<size_t>(i0) * k + j0 + 1];
            double cc = g[(static_cast<size_t>(i0) + 1) * k + j0];
            double d = g[(static_cast<size_t>(i0) + 1) * k + j0 + 1];
            return (1 - ti) * ((1 - tj) * a + tj * b) + ti * ((1 - tj) * cc + tj * d);
          };
          spec.warp_flow.at3(0, i, j) = lerp2(gy);
          spec.warp_flow.at3(1, i, j) = lerp2(gx);
        }
      break;
    }
  }
  return spec;
}

void TriggerSpec::validate(int h, int w, int c) const {
  switch (kind) {
    case TriggerKind::Patched:
      if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w)
        fail("trigger: mask shape mismatch " + mask.shape_str());
      if (patch.rank() != 3 || patch.dim(0) != c || patch.dim(1) != h || patch.dim(2) != w)
        fail("trigger: patch shape mismatch " + patch.shape_str());
      for (int i = 0; i < mask.numel(); ++i)
        if (mask[static_cast<size_t>(i)] != 0.0 && mask[static_cast<size_t>(i)] != 1.0)
          fail("trigger: patched mask must be binary");
      break;
    case TriggerKind::Blended:
      if (blend.rank() != 3 || blend.dim(0) != c || blend.dim(1) != h || blend.dim(2) != w)
        fail("trigger: blend image shape mismatch " + blend.shape_str());
      if (alpha <= 0.0 || alpha >= 1.0) fail("trigger: alpha must lie in (0,1)");
      break;
    case TriggerKind::Sig:
      break;
    case TriggerKind::Warped:
      if (warp_flow.rank() != 3 || warp_flow.dim(0) != 2 || warp_flow.dim(1) != h ||
          warp_flow.dim(2) != w)
        fail("trigger: warp flow shape mismatch " + warp_flow.shape_str());
      break;
  }
}

Tensor apply_trigger(const Tensor& pixels, const TriggerSpec& spec) {
  if (pixels.rank() != 3) fail("apply_trigger: expected (C,H,W) image");
  const int c = pixels.dim(0), h = pixels.dim(1), w = pixels.dim(2);
  spec.validate(h, w, c);
  Tensor out(pixels.shape());
  auto clamp01 = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
  switch (spec.kind) {
    case TriggerKind::Patched:
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            double m = spec.mask.at2(i, j);
            out.at3(ch, i, j) =
                clamp01((1.0 - m) * pixels.at3(ch, i, j) + m * spec.patch.at3(ch, i, j));
          }
      break;
    case TriggerKind::Blended:
      for (int i = 0; i < out.numel(); ++i)
        out[static_cast<size_t>(i)] = clamp01((1.0 - spec.alpha) * pixels[static_cast<size_t>(i)] +
                                              spec.alpha * spec.blend[static_cast<size_t>(i)]);
      break;
    case TriggerKind::Sig:
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            double b = spec.sig_delta *
                       std::sin(2.0 * 3.141592653589793 * j * spec.sig_freq / w);
            out.at3(ch, i, j) = clamp01(pixels.at3(ch, i, j) + b);
          }
      break;
    case TriggerKind::Warped:
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j) {
            double si = i + spec.warp_flow.at3(0, i, j);
            double sj = j + spec.warp_flow.at3(1, i, j);
            si = std::min(static_cast<double>(h - 1), std::max(0.0, si));
            sj = std::min(static_cast<double>(w - 1), std::max(0.0, sj));
            int i0 = std::min(static_cast<int>(si), h - 2 >= 0 ? h - 2 : 0);
            int j0 = std::min(static_cast<int>(sj), w - 2 >= 0 ? w - 2 : 0);
            double ti = si - i0, tj = sj - j0;
            double a = pixels.at3(ch, i0, j0);
            double b = pixels.at3(ch, i0, std::min(j0 + 1, w - 1));
            double cc = pixels.at3(ch, std::min(i0 + 1, h - 1), j0);
            double d = pixels.at3(ch, std::min(i0 + 1, h - 1), std::min(j0 + 1, w - 1));
            out.at3(ch, i, j) =
                clamp01((1 - ti) * ((1 - tj) * a + tj * b) + ti * ((1 - tj) * cc + tj * d));
          }
      break;
  }
  return out;
}

PoisonSplit poison_split(const Dataset& train, const TriggerSpec& spec, int target,
                         double ratio, uint64_t seed) {
  if (ratio <= 0.0 || ratio >= 1.0) fail("poison_split: ratio must lie in (0,1)");
  const int n_poison = static_cast<int>(std::lround(ratio * static_cast<double>(train.items.size())));
  if (n_poison < 1) fail("poison_split: ratio * |D| is below one sample");
  std::vector<int> candidates;
  for (size_t i = 0; i < train.items.size(); ++i)
    if (train.items[i].origin_label != target) candidates.push_back(static_cast<int>(i));
  if (static_cast<int>(candidates.size()) < n_poison)
    fail("poison_split: not enough non-target samples to poison");
  Rng rng(derive_seed(seed, "poison"));
  std::vector<int> chosen = rng.sample_without_replacement(
      static_cast<int>(candidates.size()), n_poison);
  PoisonSplit out;
  out.benign = train;
  out.malicious.num_classes = train.num_classes;
  out.malicious.height = train.height;
  out.malicious.width = train.width;
  out.malicious.channels = train.channels;
  std::sort(chosen.begin(), chosen.end());
  for (int idx : chosen) {
    const LabeledImage& src = train.items[static_cast<size_t>(candidates[static_cast<size_t>(idx)])];
    LabeledImage mal;
    mal.pixels = apply_trigger(src.pixels, spec);
    mal.label = target;
    mal.origin_label = src.origin_label;
    mal.malicious = true;
    out.malicious.items.push_back(std::move(mal));
  }
  out.ratio = static_cast<double>(n_poison) / static_cast<double>(train.items.size());
  return out;
}

Dataset build_asr_testset(const Dataset& test, const TriggerSpec& spec, int target) {
  Dataset v;
  v.num_classes = test.num_classes;
  v.height = test.height;
  v.width = test.width;
  v.channels = test.channels;
  for (const auto& item : test.items) {
    if (item.origin_label == target) continue;
    LabeledImage mal;
    mal.pixels = apply_trigger(item.pixels, spec);
    mal.label = target;
    mal.origin_label = item.origin_label;
    mal.malicious = true;
    v.items.push_back(std::move(mal));
  }
  return v;
}

namespace {

constexpr char kDataMagic[4] = {'B', 'D', 'A', 'T'};
constexpr uint32_t kDataVersion = 1;

template <class T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) fail("dataset: truncated file");
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("dataset: cannot open for writing: " + path);
  os.write(kDataMagic, 4);
  write_pod<uint32_t>(os, kDataVersion);
  write_pod<uint32_t>(os, static_cast<uint32_t>(ds.items.size()));
  write_pod<uint16_t>(os, static_cast<uint16_t>(ds.height));
  write_pod<uint16_t>(os, static_cast<uint16_t>(ds.width));
  write_pod<uint8_t>(os, static_cast<uint8_t>(ds.channels));
  write_pod<uint8_t>(os, static_cast<uint8_t>(ds.num_classes));
  std::vector<uint8_t> buf(static_cast<size_t>(ds.height) * ds.width * ds.channels);
  for (const auto& item : ds.items) {
    write_pod<uint8_t>(os, static_cast<uint8_t>(item.label));
    write_pod<uint8_t>(os, item.malicious ? 1 : 0);
    size_t k = 0;
    for (int i = 0; i < ds.height; ++i)
      for (int j = 0; j < ds.width; ++j)
        for (int ch = 0; ch < ds.channels; ++ch) {
          double v = item.pixels.at3(ch, i, j);
          int q = static_cast<int>(std::lround(v * 255.0));
          buf[k++] = static_cast<uint8_t>(std::min(255, std::max(0, q)));
        }
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size()));
  }
  if (!os) fail("dataset: write failed: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("dataset: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kDataMagic, 4) != 0) fail("dataset: bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(is);
  if (version != kDataVersion) fail("dataset: unsupported version in " + path);
  uint32_t count = read_pod<uint32_t>(is);
  Dataset ds;
  ds.height = read_pod<uint16_t>(is);
  ds.width = read_pod<uint16_t>(is);
  ds.channels = read_pod<uint8_t>(is);
  ds.num_classes = read_pod<uint8_t>(is);
  std::vector<uint8_t> buf(static_cast<size_t>(ds.height) * ds.width * ds.channels);
  for (uint32_t n = 0; n < count; ++n) {
    LabeledImage item;
    item.label = read_pod<uint8_t>(is);
    item.origin_label = item.label;
    item.malicious = read_pod<uint8_t>(is) != 0;
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!is) fail("dataset: truncated pixels in " + path);
    item.pixels = Tensor({ds.channels, ds.height, ds.width});
    size_t k = 0;
    for (int i = 0; i < ds.height; ++i)
      for (int j = 0; j < ds.width; ++j)
        for (int ch = 0; ch < ds.channels; ++ch)
          item.pixels.at3(ch, i, j) = buf[k++] / 255.0;
    ds.items.push_back(std::move(item));
  }
  return ds;
}

Dataset load_cifar10(const std::vector<std::string>& batch_paths) {
  Dataset ds;
  ds.num_classes = 10;
  ds.height = 32;
  ds.width = 32;
  ds.channels = 3;
  std::vector<uint8_t> rec(3073);
  for (const auto& path : batch_paths) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cifar10: cannot open: " + path);
    while (is.read(reinterpret_cast<char*>(rec.data()), 3073)) {
      LabeledImage item;
      item.label = rec[0];
      item.origin_label = item.label;
      item.pixels = Tensor({3, 32, 32});
      for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 32; ++i)
          for (int j = 0; j < 32; ++j)
            item.pixels.at3(ch, i, j) =
                rec[1 + static_cast<size_t>(ch) * 1024 + static_cast<size_t>(i) * 32 + j] / 255.0;
      ds.items.push_back(std::move(item));
    }
  }
  if (ds.items.empty()) fail("cifar10: no records read");
  return ds;
}

}  // namespace blab

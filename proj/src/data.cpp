#include "ddrn/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

namespace ddrn {

namespace {

using Rgb = std::array<float, 3>;

Rgb random_color(Rng& rng) {
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  return {u(rng), u(rng), u(rng)};
}

struct Signature {
  Rgb head, shirt, stripe, pants, mark;
  int stripe_period;
  bool vertical_stripes;
  bool has_mark;
  bool mark_left;
  double width_frac;
};

Signature make_signature(Rng& rng) {
  Signature s;
  s.head = random_color(rng);
  s.shirt = random_color(rng);
  s.stripe = random_color(rng);
  s.pants = random_color(rng);
  s.mark = random_color(rng);
  s.stripe_period = std::uniform_int_distribution<int>(3, 8)(rng);
  s.vertical_stripes = std::bernoulli_distribution(0.5)(rng);
  s.has_mark = std::bernoulli_distribution(0.5)(rng);
  s.mark_left = std::bernoulli_distribution(0.5)(rng);
  s.width_frac = std::uniform_real_distribution<double>(0.3, 0.42)(rng);
  return s;
}

struct Canvas {
  std::size_t h, w;
  std::vector<float> px;  // [3 × h × w]

  Canvas(std::size_t height, std::size_t width) : h(height), w(width), px(3 * height * width, 0.0f) {}

  void set(long y, long x, const Rgb& c) {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return;
    for (std::size_t ch = 0; ch < 3; ++ch) px[(ch * h + y) * w + x] = c[ch];
  }
};

std::vector<float> make_background(std::size_t h, std::size_t w, Rng& rng) {
  const Rgb top = random_color(rng), bottom = random_color(rng);
  std::vector<float> bg(3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const float t = static_cast<float>(y) / static_cast<float>(h - 1);
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) bg[(ch * h + y) * w + x] = (1 - t) * top[ch] + t * bottom[ch];
    }
  }
  std::uniform_int_distribution<long> uy(0, static_cast<long>(h) - 1), ux(0, static_cast<long>(w) - 1);
  const int blobs = std::uniform_int_distribution<int>(2, 5)(rng);
  for (int b = 0; b < blobs; ++b) {
    const Rgb c = random_color(rng);
    const long cy = uy(rng), cx = ux(rng);
    const long r = std::uniform_int_distribution<long>(3, static_cast<long>(std::max<std::size_t>(4, w / 6)))(rng);
    for (long y = cy - r; y <= cy + r; ++y) {
      for (long x = cx - r; x <= cx + r; ++x) {
        if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
        if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r) continue;
        for (std::size_t ch = 0; ch < 3; ++ch) bg[(ch * h + y) * w + x] = c[ch];
      }
    }
  }
  return bg;
}

void fill_rect(Canvas& cv, double y0, double y1, double x0, double x1, const auto& color_at) {
  const long ya = std::lround(y0), yb = std::lround(y1), xa = std::lround(x0), xb = std::lround(x1);
  for (long y = ya; y < yb; ++y) {
    for (long x = xa; x < xb; ++x) cv.set(y, x, color_at(y - ya, x - xa));
  }
}

void draw_figure(Canvas& cv, const Signature& s, double dy, double dx, double scale) {
  const double h = static_cast<double>(cv.h), w = static_cast<double>(cv.w);
  const double fw = s.width_frac * w * scale;
  const double cx = w / 2.0 + dx;
  auto solid = [](const Rgb& c) { return [c](long, long) { return c; }; };
  const double head_w = fw * 0.45;
  fill_rect(cv, 0.06 * h + dy, 0.2 * h + dy, cx - head_w / 2, cx + head_w / 2, solid(s.head));
  fill_rect(cv, 0.2 * h + dy, 0.55 * h + dy, cx - fw / 2, cx + fw / 2, [&](long y, long x) {
    const long k = s.vertical_stripes ? x : y;
    return (k / s.stripe_period) % 2 == 0 ? s.shirt : s.stripe;
  });
  const double leg_w = fw * 0.4;
  fill_rect(cv, 0.55 * h + dy, 0.94 * h + dy, cx - fw / 2 + 0.04 * fw, cx - fw / 2 + 0.04 * fw + leg_w, solid(s.pants));
  fill_rect(cv, 0.55 * h + dy, 0.94 * h + dy, cx + fw / 2 - 0.04 * fw - leg_w, cx + fw / 2 - 0.04 * fw, solid(s.pants));
  if (s.has_mark) {
    const double mw = fw * 0.3;
    const double mx = s.mark_left ? cx - fw / 2 - mw * 0.6 : cx + fw / 2 - mw * 0.4;
    fill_rect(cv, 0.3 * h + dy, 0.45 * h + dy, mx, mx + mw, solid(s.mark));
  }
}

// Rectangle whose area fraction lies in [min_area, max_area] exactly.
ErasingRect occluder_rect(std::size_t h, std::size_t w, double min_area, double max_area, Rng& rng) {
  const double total = static_cast<double>(h * w);
  const auto lo = static_cast<std::size_t>(std::ceil(min_area * total));
  const auto hi = static_cast<std::size_t>(std::floor(max_area * total));
  const std::size_t h_min = std::max<std::size_t>(1, (lo + w - 1) / w);
  for (int attempt = 0; attempt < 64; ++attempt) {
    const std::size_t rh = std::uniform_int_distribution<std::size_t>(h_min, h)(rng);
    const std::size_t w_lo = (lo + rh - 1) / rh, w_hi = std::min(w, hi / rh);
    if (w_lo > w_hi) continue;
    const std::size_t rw = std::uniform_int_distribution<std::size_t>(w_lo, w_hi)(rng);
    ErasingRect r;
    r.h = rh;
    r.w = rw;
    r.y = std::uniform_int_distribution<std::size_t>(0, h - rh)(rng);
    r.x = std::uniform_int_distribution<std::size_t>(0, w - rw)(rng);
    return r;
  }
  ErasingRect r;
  r.h = h;
  r.w = std::clamp<std::size_t>((lo + hi) / 2 / h, 1, w);
  r.x = std::uniform_int_distribution<std::size_t>(0, w - r.w)(rng);
  return r;
}

struct RenderRequest {
  int id;
  int camera;
  std::uint64_t seed;
  bool occlude;
};

Sample render(const Signature& sig, const std::vector<std::vector<float>>& backgrounds, const SynthSpec& spec,
              std::size_t h, std::size_t w, const RenderRequest& req, double occlusion_prob) {
  Rng pose(req.seed);
  Rng occ(splitmix64(req.seed ^ 0x6f6363ULL));
  Canvas cv(h, w);
  cv.px = backgrounds[std::uniform_int_distribution<std::size_t>(0, backgrounds.size() - 1)(pose)];
  std::uniform_real_distribution<double> shift(-0.06, 0.06);
  const double dy = shift(pose) * static_cast<double>(h), dx = shift(pose) * static_cast<double>(w);
  const double scale = std::uniform_real_distribution<double>(0.9, 1.1)(pose);
  draw_figure(cv, sig, dy, dx, scale);

  Sample s;
  s.id = req.id;
  s.camera = req.camera;
  s.mask.assign(h * w, 0);
  const bool draw_occluder = req.occlude && std::bernoulli_distribution(occlusion_prob)(occ);
  if (draw_occluder) {
    const ErasingRect r = occluder_rect(h, w, spec.occluder_min_area, spec.occluder_max_area, occ);
    const Rgb a = random_color(occ), b = random_color(occ);
    const bool textured = std::bernoulli_distribution(0.5)(occ);
    const long period = std::uniform_int_distribution<long>(2, 6)(occ);
    for (std::size_t y = r.y; y < r.y + r.h; ++y) {
      for (std::size_t x = r.x; x < r.x + r.w; ++x) {
        const bool alt = textured && ((static_cast<long>(x + y) / period) % 2 == 1);
        cv.set(static_cast<long>(y), static_cast<long>(x), alt ? b : a);
        s.mask[y * w + x] = 1;
      }
    }
  }
  s.occluded_fraction =
      static_cast<double>(std::count(s.mask.begin(), s.mask.end(), std::uint8_t{1})) / static_cast<double>(h * w);

  // Camera response: per-channel gain and offset, then sensor noise.
  static constexpr std::array<Rgb, 2> kGain = {{{1.04f, 1.0f, 0.96f}, {0.96f, 1.0f, 1.04f}}};
  static constexpr std::array<float, 2> kOffset = {0.02f, -0.02f};
  std::normal_distribution<float> noise(0.0f, 0.03f);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) {
      float& v = cv.px[ch * h * w + i];
      v = std::clamp(v * kGain[req.camera][ch] + kOffset[req.camera] + noise(pose), 0.0f, 1.0f);
    }
  }
  s.image = Tensor<float>({3, h, w}, std::move(cv.px));
  return s;
}

}  // namespace

SynthDataset synth_dataset(const SynthSpec& spec, std::size_t height, std::size_t width, std::uint64_t seed) {
  spec.validate();
  if (height < 8 || width < 8) throw ConfigError("synthetic images must be at least 8x8");
  Rng bg_rng(derive_seed(seed, "backgrounds"));
  std::vector<std::vector<float>> backgrounds;
  for (std::size_t i = 0; i < spec.background_pool; ++i) backgrounds.push_back(make_background(height, width, bg_rng));

  const auto n_test = static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(spec.images_per_id)));
  const std::size_t n_query = n_test / 2;
  SynthDataset ds;
  for (std::size_t id = 0; id < spec.num_ids; ++id) {
    Rng sig_rng(derive_seed(seed, "identity." + std::to_string(id)));
    const Signature sig = make_signature(sig_rng);
    Rng img_rng(derive_seed(seed, "images." + std::to_string(id)));
    for (std::size_t k = 0; k < spec.images_per_id; ++k) {
      RenderRequest req{static_cast<int>(id), 0, img_rng(), true};
      if (k < spec.images_per_id - n_test) {
        req.camera = static_cast<int>(k % 2);
        ds.train.push_back(render(sig, backgrounds, spec, height, width, req, spec.train_occlusion_prob));
      } else if (k < spec.images_per_id - n_test + n_query) {
        ds.query.push_back(render(sig, backgrounds, spec, height, width, req, spec.test_occlusion_prob));
        req.occlude = false;
        ds.query_holistic.push_back(render(sig, backgrounds, spec, height, width, req, 0.0));
      } else {
        req.camera = 1;
        req.occlude = false;
        ds.gallery.push_back(render(sig, backgrounds, spec, height, width, req, 0.0));
      }
    }
  }
  return ds;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == height && w == width) return image;
  Tensor<float> out({c, height, width});
  const double sy = static_cast<double>(h) / static_cast<double>(height);
  const double sx = static_cast<double>(w) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = image.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - tx) + p[y0 * w + x1] * tx;
        const double bot = p[y1 * w + x0] * (1 - tx) + p[y1 * w + x1] * tx;
        out[(ch * height + y) * width + x] = static_cast<float>(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentOptions& opt, AugmentTrace* trace) {
  if (image.rank() != 3) throw ShapeError("augment: expected [C × H × W], got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  AugmentTrace tr;
  tr.crop_y = std::uniform_int_distribution<std::size_t>(0, 2 * opt.pad)(rng);
  tr.crop_x = std::uniform_int_distribution<std::size_t>(0, 2 * opt.pad)(rng);
  Tensor<float> cropped({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y + tr.crop_y) - static_cast<long>(opt.pad);
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x + tr.crop_x) - static_cast<long>(opt.pad);
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        cropped[(ch * h + y) * w + x] = image[(ch * h + sy) * w + sx];
      }
    }
  }
  const std::size_t oh = opt.out_height == 0 ? h : opt.out_height, ow = opt.out_width == 0 ? w : opt.out_width;
  Tensor<float> out = resize_bilinear(cropped, oh, ow);

  if (std::bernoulli_distribution(opt.erasing_prob)(rng)) {
    const double area = static_cast<double>(oh * ow);
    std::uniform_real_distribution<double> target(opt.erasing_min_area, opt.erasing_max_area);
    std::uniform_real_distribution<double> log_aspect(std::log(opt.erasing_min_aspect), -std::log(opt.erasing_min_aspect));
    for (int attempt = 0; attempt < 100 && !tr.erased; ++attempt) {
      const double a = target(rng) * area, r = std::exp(log_aspect(rng));
      const auto rh = static_cast<std::size_t>(std::lround(std::sqrt(a * r)));
      const auto rw = static_cast<std::size_t>(std::lround(std::sqrt(a / r)));
      if (rh == 0 || rw == 0 || rh >= oh || rw >= ow) continue;
      tr.rect = {std::uniform_int_distribution<std::size_t>(0, oh - rh)(rng),
                 std::uniform_int_distribution<std::size_t>(0, ow - rw)(rng), rh, rw};
      tr.erased = true;
    }
    if (!tr.erased) {
      tr.rect = {0, 0, std::max<std::size_t>(1, oh / 2), std::max<std::size_t>(1, ow / 2)};
      tr.erased = true;
    }
    std::uniform_real_distribution<float> fill(0.0f, 1.0f);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = tr.rect.y; y < tr.rect.y + tr.rect.h; ++y) {
        for (std::size_t x = tr.rect.x; x < tr.rect.x + tr.rect.w; ++x) out[(ch * oh + y) * ow + x] = fill(rng);
      }
    }
  }
  if (trace != nullptr) *trace = tr;
  return out;
}

std::vector<std::vector<std::size_t>> pk_batches(const std::vector<int>& labels, std::size_t ids_per_batch,
                                                 std::size_t instances, Rng& rng) {
  if (ids_per_batch < 2 || instances < 2) throw ConfigError("PK sampling needs P >= 2 and A >= 2");
  std::vector<int> ids(labels.begin(), labels.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.size() < ids_per_batch) {
    throw ConfigError("PK sampling needs " + std::to_string(ids_per_batch) + " identities, dataset has " +
                      std::to_string(ids.size()));
  }
  // Chunks of `instances` indices per identity, in shuffled order.
  std::vector<std::vector<std::vector<std::size_t>>> chunks(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == ids[k]) idx.push_back(i);
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t n = idx.size(), padded = (n + instances - 1) / instances * instances;
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    for (std::size_t i = n; i < padded; ++i) idx.push_back(idx[pick(rng)]);
    for (std::size_t start = 0; start < padded; start += instances) {
      chunks[k].emplace_back(idx.begin() + start, idx.begin() + start + instances);
    }
  }
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> next(ids.size(), 0);
  for (;;) {
    std::vector<std::size_t> available;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (next[k] < chunks[k].size()) available.push_back(k);
    }
    if (available.size() < ids_per_batch) break;
    std::shuffle(available.begin(), available.end(), rng);
    // Draining the fullest ids first keeps every id in play until the end.
    std::stable_sort(available.begin(), available.end(), [&](std::size_t a, std::size_t b) {
      return chunks[a].size() - next[a] > chunks[b].size() - next[b];
    });
    std::vector<std::size_t> batch;
    for (std::size_t j = 0; j < ids_per_batch; ++j) {
      const std::size_t k = available[j];
      const auto& chunk = chunks[k][next[k]++];
      batch.insert(batch.end(), chunk.begin(), chunk.end());
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  Shape shape{images.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor<float> out(shape);
  float* dst = out.data().data();
  for (const Tensor<float>* img : images) {
    if (img->shape() != s) throw ShapeError("stack_images: mixed image shapes");
    for (float v : img->data()) *dst++ = (v - 0.5f) / 0.25f;
  }
  return out;
}

}  // namespace ddrn

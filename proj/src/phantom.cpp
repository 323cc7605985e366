#include "cpgg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <stdexcept>

namespace cpgg {

Cine::Cine(Tensor<float> v) : voxels(std::move(v)) {
  if (voxels.rank() != 4 || voxels.dim(0) != 1) {
    throw ShapeError("cine must have shape (1,T,H,W), got " + shape_str(voxels.shape()));
  }
  if (voxels.dim(1) < 2) throw ShapeError("cine needs at least two frames");
}

bool PhantomParams::fits(const FrameSize& size) const {
  const double outer = r_ed + wall;
  return r_es < r_ed && wall >= 1.0 && cx - outer >= 0 && cy - outer >= 0 &&
         cx + outer <= static_cast<double>(size.w) && cy + outer <= static_cast<double>(size.h);
}

PhantomParams sample_params(Rng& rng, const FrameSize& size) {
  const double m = static_cast<double>(std::min(size.h, size.w));
  for (int attempt = 0; attempt < 100; ++attempt) {
    PhantomParams p;
    p.r_ed = rng.uniform(0.20, 0.35) * m;
    const double ef = rng.uniform(0.15, 0.75);
    p.r_es = p.r_ed * std::sqrt(1.0 - ef);
    p.wall = rng.uniform(0.0625, 0.1) * m;
    p.cx = 0.5 * static_cast<double>(size.w) + rng.uniform(-0.05, 0.05) * m;
    p.cy = 0.5 * static_cast<double>(size.h) + rng.uniform(-0.05, 0.05) * m;
    p.blood = rng.uniform(0.45, 0.55);
    p.myocardium = rng.uniform(0.85, 0.95);
    p.noise = rng.uniform(0.0, 0.04);
    p.phase = rng.uniform(-0.5, 0.5);
    if (p.fits(size)) return p;
  }
  throw std::runtime_error("sample_params: no phantom fits a " + std::to_string(size.h) + "x" +
                           std::to_string(size.w) + " frame after 100 draws");
}

double blood_pool_radius(const PhantomParams& p, Index t, Index frames) {
  const double theta = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(frames) + p.phase;
  return p.r_ed - (p.r_ed - p.r_es) * (1.0 - std::cos(theta)) / 2.0;
}

Cine render_cine(const PhantomParams& p, const FrameSize& size, Rng& noise_rng) {
  constexpr int kSuper = 4;
  Tensor<float> v({1, size.t, size.h, size.w});
  for (Index t = 0; t < size.t; ++t) {
    const double r = blood_pool_radius(p, t, size.t);
    const double outer = r + p.wall;
    for (Index y = 0; y < size.h; ++y)
      for (Index x = 0; x < size.w; ++x) {
        double acc = 0;
        for (int sy = 0; sy < kSuper; ++sy)
          for (int sx = 0; sx < kSuper; ++sx) {
            const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
            const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
            const double d = std::hypot(px - p.cx, py - p.cy);
            acc += d <= r ? p.blood : (d <= outer ? p.myocardium : kBackgroundIntensity);
          }
        double value = acc / (kSuper * kSuper);
        if (p.noise > 0) value += p.noise * noise_rng.normal();
        v[(t * size.h + y) * size.w + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
  }
  return Cine(std::move(v));
}

const std::array<std::string, kPhenotypeCount>& phenotype_names() {
  static const std::array<std::string, kPhenotypeCount> names = {"eda", "esa",   "ef_area", "wall",
                                                                 "cx",  "cy",    "noise",   "phase"};
  return names;
}

namespace {

struct FrameSegmentation {
  Index area = 0;
  Index ring = 0;
  double cx = 0, cy = 0;
};

bool in_band(float v) { return v >= kBloodBandLow && v < kBloodBandHigh; }

FrameSegmentation segment_frame(const Cine& c, Index t) {
  const Index h = c.height(), w = c.width();
  FrameSegmentation seg;
  double bx = 0, by = 0;
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      if (c.at(t, y, x) >= kBloodBandHigh) {
        ++seg.ring;
        bx += static_cast<double>(x) + 0.5;
        by += static_cast<double>(y) + 0.5;
      }
  if (seg.ring == 0) return seg;
  bx /= static_cast<double>(seg.ring);
  by /= static_cast<double>(seg.ring);

  // Nearest band pixel to the ring centroid seeds the fill.
  Index seed = -1;
  double best = 9.0;  // search radius 3 px, squared
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - bx, dy = static_cast<double>(y) + 0.5 - by;
      const double d2 = dx * dx + dy * dy;
      if (d2 < best && in_band(c.at(t, y, x))) {
        best = d2;
        seed = y * w + x;
      }
    }
  if (seed < 0) return seg;

  std::vector<char> seen(static_cast<size_t>(h * w), 0);
  std::deque<Index> queue{seed};
  seen[static_cast<size_t>(seed)] = 1;
  double sx = 0, sy = 0;
  while (!queue.empty()) {
    const Index p = queue.front();
    queue.pop_front();
    const Index y = p / w, x = p % w;
    ++seg.area;
    sx += static_cast<double>(x) + 0.5;
    sy += static_cast<double>(y) + 0.5;
    const Index nbr[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
    for (const auto& n : nbr) {
      if (n[0] < 0 || n[1] < 0 || n[0] >= h || n[1] >= w) continue;
      const Index q = n[0] * w + n[1];
      if (!seen[static_cast<size_t>(q)] && in_band(c.at(t, n[0], n[1]))) {
        seen[static_cast<size_t>(q)] = 1;
        queue.push_back(q);
      }
    }
  }
  seg.cx = sx / static_cast<double>(seg.area);
  seg.cy = sy / static_cast<double>(seg.area);
  return seg;
}

double background_noise(const Cine& c) {
  const Index h = c.height(), w = c.width();
  double s = 0, s2 = 0;
  Index n = 0;
  for (Index t = 0; t < c.frames(); ++t)
    for (Index y = 1; y + 1 < h; ++y)
      for (Index x = 1; x + 1 < w; ++x) {
        bool interior = true;
        for (Index dy = -1; dy <= 1 && interior; ++dy)
          for (Index dx = -1; dx <= 1; ++dx)
            if (c.at(t, y + dy, x + dx) >= kBloodBandLow) {
              interior = false;
              break;
            }
        if (!interior) continue;
        const double v = c.at(t, y, x);
        s += v;
        s2 += v * v;
        ++n;
      }
  if (n < 2) return 0.0;
  const double m = s / static_cast<double>(n);
  return std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - m * m));
}

}  // namespace

Measurement measure_phenotypes(const Cine& cine) {
  Measurement out;
  const Index frames = cine.frames();
  std::vector<FrameSegmentation> segs;
  for (Index t = 0; t < frames; ++t) {
    segs.push_back(segment_frame(cine, t));
    out.frame_areas.push_back(segs.back().area);
  }
  out.values.assign(kPhenotypeCount, 0.0);
  const auto ed = std::max_element(segs.begin(), segs.end(), [](auto& a, auto& b) { return a.area < b.area; });
  const auto es = std::min_element(segs.begin(), segs.end(), [](auto& a, auto& b) { return a.area < b.area; });
  if (es->area == 0) return out;

  const double eda = static_cast<double>(ed->area);
  const double esa = static_cast<double>(es->area);
  out.values[kEda] = eda;
  out.values[kEsa] = esa;
  out.values[kEfArea] = (eda - esa) / eda;
  out.values[kWall] =
      std::sqrt((eda + static_cast<double>(ed->ring)) / std::numbers::pi) - std::sqrt(eda / std::numbers::pi);
  out.values[kCenterX] = ed->cx;
  out.values[kCenterY] = ed->cy;
  out.values[kNoise] = background_noise(cine);
  // Phase of the fundamental of the area curve.
  double re = 0, im = 0;
  for (Index t = 0; t < frames; ++t) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(t) / static_cast<double>(frames);
    re += static_cast<double>(segs[static_cast<size_t>(t)].area) * std::cos(theta);
    im -= static_cast<double>(segs[static_cast<size_t>(t)].area) * std::sin(theta);
  }
  out.values[kPhase] = std::atan2(im, re);
  out.valid = true;
  return out;
}

Normalization Normalization::fit(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("Normalization::fit: no rows");
  const size_t d = rows[0].size();
  Normalization n;
  n.mean.assign(d, 0.0);
  n.std.assign(d, 0.0);
  for (const auto& r : rows)
    for (size_t j = 0; j < d; ++j) n.mean[j] += r[j];
  for (auto& m : n.mean) m /= static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (size_t j = 0; j < d; ++j) n.std[j] += (r[j] - n.mean[j]) * (r[j] - n.mean[j]);
  for (size_t j = 0; j < d; ++j) {
    n.std[j] = std::sqrt(n.std[j] / static_cast<double>(rows.size()));
    if (!(n.std[j] > 0)) throw std::runtime_error("Normalization::fit: dimension " + std::to_string(j) + " has zero variance");
  }
  return n;
}

std::vector<double> Normalization::normalize(const std::vector<double>& x) const {
  std::vector<double> z(x.size());
  for (size_t j = 0; j < x.size(); ++j) z[j] = (x[j] - mean[j]) / std[j];
  return z;
}

std::vector<double> Normalization::denormalize(const std::vector<double>& z) const {
  std::vector<double> x(z.size());
  for (size_t j = 0; j < z.size(); ++j) x[j] = z[j] * std[j] + mean[j];
  return x;
}

}  // namespace cpgg

#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "capf/ops.hpp"
#include "capf/tape.hpp"
#include "capf/tensor.hpp"

namespace capf {

// Dense multi-resolution feature map, the serialized / interchange form.
// Storage is 32-bit; values are promoted to doubles at sampling time.
struct FeatureMap {
  int h = 0, w = 0, c = 0;
  std::vector<float> data;  // row-major [h][w][c]

  float at(int y, int x, int ch) const {
    return data[(static_cast<std::size_t>(y) * w + x) * c + ch];
  }
};

struct FeaturePyramid {
  std::vector<FeatureMap> levels;
  std::vector<int> downsample_factors;  // strictly increasing, e.g. 4, 8, 16, 32

  void validate() const {
    require(!levels.empty(), "FeaturePyramid: at least one level");
    require(downsample_factors.size() == levels.size(),
            "FeaturePyramid: factor per level");
    for (std::size_t l = 0; l < levels.size(); ++l) {
      require(levels[l].h >= 1 && levels[l].w >= 1 && levels[l].c >= 1,
              "FeaturePyramid: empty level");
      if (l > 0) {
        require(levels[l].h <= levels[l - 1].h && levels[l].w <= levels[l - 1].w,
                "FeaturePyramid: resolutions must be non-increasing");
        require(downsample_factors[l] > downsample_factors[l - 1],
                "FeaturePyramid: factors must be strictly increasing");
      }
    }
  }
};

// Procedural pyramid. Position channels are separable Gaussians stored as
// per-joint row/column factors (doubles, so ratios like depth/position hold
// to full precision); depth channels scale the position blob by the joint's
// normalized depth; noise channels are recomputed from a seed on access.
// ~25 KB per sample instead of ~770 KB dense, which is what makes the
// 20k-sample training protocols fit in memory.
struct CompactLevel {
  int h = 0, w = 0, c = 0;
  std::vector<double> rowf;  // [J][h]
  std::vector<double> colf;  // [J][w]
  std::uint64_t noise_stream = 0;
};

struct CompactPyramid {
  int joints = 0;
  double noise_std = 0.1;
  std::vector<double> depths;  // [J], normalized
  std::vector<CompactLevel> levels;
  std::vector<int> downsample_factors;

  void validate() const {
    require(!levels.empty() && depths.size() == static_cast<std::size_t>(joints),
            "CompactPyramid: malformed");
    for (const CompactLevel& lv : levels)
      require(lv.c >= 2 * joints, "CompactPyramid: need position+depth channels");
  }
};

namespace detail {

inline double compact_value(const CompactLevel& lv, const double* depths, int joints,
                            double noise_std, int y, int x, int ch) {
  if (ch < joints) return lv.rowf[static_cast<std::size_t>(ch) * lv.h + y] *
                          lv.colf[static_cast<std::size_t>(ch) * lv.w + x];
  if (ch < 2 * joints) {
    int j = ch - joints;
    return depths[j] * (lv.rowf[static_cast<std::size_t>(j) * lv.h + y] *
                        lv.colf[static_cast<std::size_t>(j) * lv.w + x]);
  }
  int nc = lv.c - 2 * joints;
  std::uint64_t idx =
      (static_cast<std::uint64_t>(y) * lv.w + static_cast<std::uint64_t>(x)) * nc +
      static_cast<std::uint64_t>(ch - 2 * joints);
  return noise_std * static_cast<double>(hashed_normal(lv.noise_stream, idx));
}

}  // namespace detail

// Uniform read access over dense or compact storage for one level.
struct LevelView {
  int h = 0, w = 0, c = 0;
  const FeatureMap* dense = nullptr;
  const CompactLevel* compact = nullptr;
  const double* depths = nullptr;
  int joints = 0;
  double noise_std = 0.0;

  double value(int y, int x, int ch) const {
    if (dense) return static_cast<double>(dense->at(y, x, ch));
    return detail::compact_value(*compact, depths, joints, noise_std, y, x, ch);
  }

  void fetch_pixel(int y, int x, double* out) const {
    if (dense) {
      const float* p = dense->data.data() + (static_cast<std::size_t>(y) * w + x) * c;
      for (int ch = 0; ch < c; ++ch) out[ch] = static_cast<double>(p[ch]);
    } else {
      for (int ch = 0; ch < c; ++ch)
        out[ch] = detail::compact_value(*compact, depths, joints, noise_std, y, x, ch);
    }
  }
};

struct PyramidView {
  std::vector<LevelView> levels;
};

inline PyramidView view_of(const FeaturePyramid& p) {
  PyramidView v;
  for (const FeatureMap& m : p.levels) v.levels.push_back(LevelView{m.h, m.w, m.c, &m});
  return v;
}

inline PyramidView view_of(const CompactPyramid& p) {
  PyramidView v;
  for (const CompactLevel& lv : p.levels) {
    LevelView view;
    view.h = lv.h;
    view.w = lv.w;
    view.c = lv.c;
    view.compact = &lv;
    view.depths = p.depths.data();
    view.joints = p.joints;
    view.noise_std = p.noise_std;
    v.levels.push_back(view);
  }
  return v;
}

// Dense materialization of a compact pyramid (used when serializing).
inline FeaturePyramid materialize(const CompactPyramid& p) {
  FeaturePyramid out;
  out.downsample_factors = p.downsample_factors;
  for (const CompactLevel& lv : p.levels) {
    FeatureMap m;
    m.h = lv.h;
    m.w = lv.w;
    m.c = lv.c;
    m.data.resize(static_cast<std::size_t>(lv.h) * lv.w * lv.c);
    std::size_t i = 0;
    for (int y = 0; y < lv.h; ++y)
      for (int x = 0; x < lv.w; ++x)
        for (int ch = 0; ch < lv.c; ++ch)
          m.data[i++] = static_cast<float>(detail::compact_value(
              lv, p.depths.data(), p.joints, p.noise_std, y, x, ch));
    out.levels.push_back(std::move(m));
  }
  return out;
}

// Batched bilinear sampling of per-sample maps at taped points. points is
// [N x 2] in normalized units; maps_of_row[i] names the map point i reads.
// Maps are inputs (no gradient); points get coordinate gradients unless the
// point was clamped at a border. All maps in one call share a channel count.
inline Value sample_maps(Value points,
                         std::shared_ptr<const std::vector<LevelView>> maps,
                         std::shared_ptr<const std::vector<int>> map_of_row) {
  const Tensor& pv = points.val();
  require(pv.rank() == 2 && pv.dim(1) == 2, "sample_maps: points must be [N x 2]");
  int n = pv.dim(0);
  require(static_cast<int>(map_of_row->size()) == n, "sample_maps: row map mismatch");
  require(!maps->empty(), "sample_maps: no maps");
  int c = (*maps)[0].c;
  for (const LevelView& m : *maps)
    require(m.c == c, "sample_maps: channel counts must agree within a call");
  Tape& t = *points.tape;
  Tensor out({n, c});
  auto cells = std::make_shared<std::vector<detail::BilinearCell>>(
      static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static) if (n > 512)
  for (int i = 0; i < n; ++i) {
    const LevelView& mv = (*maps)[static_cast<std::size_t>((*map_of_row)[i])];
    auto cell = detail::bilinear_cell(pv.at(i, 0), pv.at(i, 1), mv.h, mv.w);
    (*cells)[static_cast<std::size_t>(i)] = cell;
    std::vector<double> buf(static_cast<std::size_t>(4) * c);
    double* c00 = buf.data();
    double* c01 = buf.data() + c;
    double* c10 = buf.data() + 2 * c;
    double* c11 = buf.data() + 3 * c;
    mv.fetch_pixel(cell.y0, cell.x0, c00);
    mv.fetch_pixel(cell.y0, cell.x1, c01);
    mv.fetch_pixel(cell.y1, cell.x0, c10);
    mv.fetch_pixel(cell.y1, cell.x1, c11);
    double w00 = (1 - cell.wx) * (1 - cell.wy), w01 = cell.wx * (1 - cell.wy),
           w10 = (1 - cell.wx) * cell.wy, w11 = cell.wx * cell.wy;
    double* o = out.data() + static_cast<std::int64_t>(i) * c;
    for (int ch = 0; ch < c; ++ch)
      o[ch] = w00 * c00[ch] + w01 * c01[ch] + w10 * c10[ch] + w11 * c11[ch];
  }
  bool ng = points.needs_grad();
  Tape::Vjp vjp;
  if (ng)
    vjp = [points, maps, map_of_row, cells, n, c](Tape& t, int self) {
      const Tensor& g = t.grad_or_zeros(self);
      Tensor& dp = t.grad_buffer(points.id);
#pragma omp parallel for schedule(static) if (n > 512)
      for (int i = 0; i < n; ++i) {
        const auto& cell = (*cells)[static_cast<std::size_t>(i)];
        if (!cell.x_live && !cell.y_live) continue;
        const LevelView& mv = (*maps)[static_cast<std::size_t>((*map_of_row)[i])];
        std::vector<double> buf(static_cast<std::size_t>(4) * c);
        double* c00 = buf.data();
        double* c01 = buf.data() + c;
        double* c10 = buf.data() + 2 * c;
        double* c11 = buf.data() + 3 * c;
        mv.fetch_pixel(cell.y0, cell.x0, c00);
        mv.fetch_pixel(cell.y0, cell.x1, c01);
        mv.fetch_pixel(cell.y1, cell.x0, c10);
        mv.fetch_pixel(cell.y1, cell.x1, c11);
        const double* gr = g.data() + static_cast<std::int64_t>(i) * c;
        double du = 0.0, dv = 0.0;
        for (int ch = 0; ch < c; ++ch) {
          du += gr[ch] * ((1 - cell.wy) * (c01[ch] - c00[ch]) +
                          cell.wy * (c11[ch] - c10[ch]));
          dv += gr[ch] * ((1 - cell.wx) * (c10[ch] - c00[ch]) +
                          cell.wx * (c11[ch] - c01[ch]));
        }
        if (cell.x_live) dp.at(i, 0) += du * (mv.w - 1);
        if (cell.y_live) dp.at(i, 1) += dv * (mv.h - 1);
      }
    };
  return Value{&t, t.add(std::move(out), ng, std::move(vjp))};
}

}  // namespace capf

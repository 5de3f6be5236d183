#pragma once

// Synthetic oracle data. Ground-truth 3D poses come from forward kinematics
// over a fixed 17-joint tree; 2D poses are exact pinhole projections;
// detections add Gaussian noise plus occasional outliers. Feature pyramids
// are rendered from the TRUE joint positions and depths (never from the
// detections), so image context carries information the noisy coordinates
// lack: Gaussian position blobs per joint, the same blobs scaled by
// normalized depth as a depth cue, and pure-noise filler channels.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "capf/common.hpp"
#include "capf/geometry.hpp"
#include "capf/pyramid.hpp"
#include "capf/serialize.hpp"

namespace capf {

struct SkeletonTopology {
  int joints = 17;
  std::vector<int> parent;       // -1 for the root
  std::vector<double> bone_mm;   // distance to parent; 0 for the root

  static SkeletonTopology human17() {
    SkeletonTopology t;
    t.parent = {-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15};
    t.bone_mm = {0,   130, 450, 440, 130, 450, 440, 230, 250,
                 120, 115, 150, 280, 250, 150, 280, 250};
    return t;
  }

  void validate() const {
    require(joints >= 2 && static_cast<int>(parent.size()) == joints &&
                static_cast<int>(bone_mm.size()) == joints,
            "SkeletonTopology: malformed");
    int roots = 0;
    for (int j = 0; j < joints; ++j) {
      if (parent[static_cast<std::size_t>(j)] < 0) {
        ++roots;
      } else {
        // Parents precede children, which rules out cycles.
        require(parent[static_cast<std::size_t>(j)] < j, "SkeletonTopology: parent order");
        require(bone_mm[static_cast<std::size_t>(j)] > 0, "SkeletonTopology: bone length");
      }
    }
    require(roots == 1, "SkeletonTopology: exactly one root");
  }

  double max_reach_mm() const {
    std::vector<double> reach(static_cast<std::size_t>(joints), 0.0);
    double best = 0.0;
    for (int j = 1; j < joints; ++j) {
      reach[static_cast<std::size_t>(j)] =
          reach[static_cast<std::size_t>(parent[static_cast<std::size_t>(j)])] +
          bone_mm[static_cast<std::size_t>(j)];
      best = std::max(best, reach[static_cast<std::size_t>(j)]);
    }
    return best;
  }
};

struct NoiseSpec {
  double gaussian_sigma = 0.02;  // normalized units
  double outlier_prob = 0.05;
  double outlier_radius = 0.2;

  void validate() const {
    require(gaussian_sigma >= 0, "NoiseSpec: sigma >= 0");
    require(outlier_prob >= 0 && outlier_prob <= 1, "NoiseSpec: prob in [0,1]");
    require(outlier_radius >= 0, "NoiseSpec: radius >= 0");
  }
};

// Pinhole camera on the +z axis; the subject's root sits at distance_mm.
struct Camera {
  double distance_mm = 4000.0;
  double focal = 0.9;            // u = 0.5 + focal * X / Z
  double depth_lo_mm = 2700.0;   // normalized depth 0 at this camera distance
  double depth_range_mm = 2600.0;
};

struct Projection {
  Pose2D pose2d;                // normalized (u, v)
  std::vector<double> depths;  // per-joint normalized depth, invertible
};

inline Projection project_camera(const Pose3D& p, const Camera& cam) {
  int j = p.joint_count();
  Projection out;
  out.pose2d.joints = Tensor({j, 2});
  out.depths.resize(static_cast<std::size_t>(j));
  for (int i = 0; i < j; ++i) {
    double z = p.joints.at(i, 2) + cam.distance_mm;
    if (z <= 1.0) throw NumericError("project_camera: joint behind camera");
    out.pose2d.joints.at(i, 0) = 0.5 + cam.focal * p.joints.at(i, 0) / z;
    out.pose2d.joints.at(i, 1) = 0.5 + cam.focal * p.joints.at(i, 1) / z;
    out.depths[static_cast<std::size_t>(i)] = (z - cam.depth_lo_mm) / cam.depth_range_mm;
  }
  return out;
}

// Smoothly random poses: each bone direction does a bounded random walk in
// spherical angles across frames; bone lengths are constant by construction
// and the root stays at the origin.
inline std::vector<Pose3D> gen_skeleton_sequence(const SkeletonTopology& topo, int frames,
                                                 Rng& rng) {
  require(frames >= 1, "gen_skeleton_sequence: frames >= 1");
  topo.validate();
  int j = topo.joints;
  std::vector<double> theta(static_cast<std::size_t>(j)), phi(static_cast<std::size_t>(j));
  for (int b = 1; b < j; ++b) {
    theta[static_cast<std::size_t>(b)] = std::acos(rng.uniform(-1.0, 1.0));
    phi[static_cast<std::size_t>(b)] = rng.uniform(0.0, 6.283185307179586);
  }
  const double step_sigma = 0.08, step_cap = 0.2;
  std::vector<Pose3D> out;
  out.reserve(static_cast<std::size_t>(frames));
  for (int f = 0; f < frames; ++f) {
    if (f > 0) {
      for (int b = 1; b < j; ++b) {
        theta[static_cast<std::size_t>(b)] +=
            std::clamp(rng.normal(0.0, step_sigma), -step_cap, step_cap);
        phi[static_cast<std::size_t>(b)] +=
            std::clamp(rng.normal(0.0, step_sigma), -step_cap, step_cap);
      }
    }
    Pose3D pose{Tensor({j, 3})};
    for (int b = 1; b < j; ++b) {
      int pa = topo.parent[static_cast<std::size_t>(b)];
      double len = topo.bone_mm[static_cast<std::size_t>(b)];
      double st = std::sin(theta[static_cast<std::size_t>(b)]);
      double dx = st * std::cos(phi[static_cast<std::size_t>(b)]);
      double dy = st * std::sin(phi[static_cast<std::size_t>(b)]);
      double dz = std::cos(theta[static_cast<std::size_t>(b)]);
      pose.joints.at(b, 0) = pose.joints.at(pa, 0) + len * dx;
      pose.joints.at(b, 1) = pose.joints.at(pa, 1) + len * dy;
      pose.joints.at(b, 2) = pose.joints.at(pa, 2) + len * dz;
    }
    out.push_back(std::move(pose));
  }
  return out;
}

inline Pose2D corrupt_pose(const Pose2D& gt2d, const NoiseSpec& spec, Rng& rng) {
  spec.validate();
  Pose2D out = gt2d;
  for (int j = 0; j < gt2d.joint_count(); ++j) {
    if (rng.uniform() < spec.outlier_prob) {
      double ang = rng.uniform(0.0, 6.283185307179586);
      double mag = rng.uniform(0.0, spec.outlier_radius);
      out.joints.at(j, 0) += mag * std::cos(ang);
      out.joints.at(j, 1) += mag * std::sin(ang);
    } else {
      out.joints.at(j, 0) += rng.normal(0.0, spec.gaussian_sigma);
      out.joints.at(j, 1) += rng.normal(0.0, spec.gaussian_sigma);
    }
  }
  return out;
}

// Pyramid recipe: resolutions mirror a 256x192 backbone at 4/8/16/32x
// downsampling, 48 channels at every level, blob bandwidth 2 px at each
// level's own grid. Channels [0, J) are unit Gaussians at the true joints,
// [J, 2J) the same blobs scaled by normalized depth, the rest pixel noise.
struct PyramidRecipe {
  std::vector<std::array<int, 2>> level_hw = {{64, 48}, {32, 24}, {16, 12}, {8, 6}};
  std::vector<int> downsample_factors = {4, 8, 16, 32};
  int channels = 48;
  double sigma_px = 2.0;
  double noise_std = 0.1;
};

inline CompactPyramid render_pyramid(const Pose2D& gt2d, const std::vector<double>& depths,
                                     std::uint64_t noise_seed,
                                     const PyramidRecipe& recipe = PyramidRecipe{}) {
  int j = gt2d.joint_count();
  require(static_cast<int>(depths.size()) == j, "render_pyramid: depth per joint");
  require(recipe.channels >= 2 * j, "render_pyramid: not enough channels for 2J cues");
  CompactPyramid out;
  out.joints = j;
  out.noise_std = recipe.noise_std;
  out.depths = depths;
  out.downsample_factors = recipe.downsample_factors;
  double inv2s2 = 1.0 / (2.0 * recipe.sigma_px * recipe.sigma_px);
  for (std::size_t l = 0; l < recipe.level_hw.size(); ++l) {
    CompactLevel lv;
    lv.h = recipe.level_hw[l][0];
    lv.w = recipe.level_hw[l][1];
    lv.c = recipe.channels;
    lv.noise_stream = derive_seed(noise_seed, hash_str("pyramid-noise"), l);
    lv.rowf.resize(static_cast<std::size_t>(j) * lv.h);
    lv.colf.resize(static_cast<std::size_t>(j) * lv.w);
    for (int b = 0; b < j; ++b) {
      double cx = gt2d.joints.at(b, 0) * (lv.w - 1);
      double cy = gt2d.joints.at(b, 1) * (lv.h - 1);
      for (int y = 0; y < lv.h; ++y)
        lv.rowf[static_cast<std::size_t>(b) * lv.h + y] =
            std::exp(-(y - cy) * (y - cy) * inv2s2);
      for (int x = 0; x < lv.w; ++x)
        lv.colf[static_cast<std::size_t>(b) * lv.w + x] =
            std::exp(-(x - cx) * (x - cx) * inv2s2);
    }
    out.levels.push_back(std::move(lv));
  }
  return out;
}

// --- samples and datasets ------------------------------------------------------

struct SyntheticSample {
  Pose3D gt3d;   // root-relative mm
  Pose2D gt2d;   // exact projection
  Pose2D det2d;  // corrupted
  std::vector<double> depths;
  std::uint64_t seed_record = 0;
  CompactPyramid compact;  // generated form
  FeaturePyramid dense;    // loaded-from-file form
  bool has_compact = false;

  PyramidView pyramid_view() const {
    return has_compact ? view_of(compact) : view_of(dense);
  }
};

struct Dataset {
  int frames_per_sample = 1;
  double frame_interval = 1.0 / 50.0;
  std::vector<SyntheticSample> frames;  // sample s occupies [s*F, (s+1)*F)

  std::int64_t sample_count() const {
    return static_cast<std::int64_t>(frames.size()) / frames_per_sample;
  }

  const SyntheticSample& frame(std::int64_t sample, int f) const {
    return frames[static_cast<std::size_t>(sample * frames_per_sample + f)];
  }
};

struct GeneratorConfig {
  std::uint64_t seed = 1;
  int samples = 128;
  int frames_per_sample = 1;
  NoiseSpec noise;
  Camera camera;
  SkeletonTopology topology = SkeletonTopology::human17();
  PyramidRecipe recipe;
};

namespace detail {

// One sample = one smooth F-frame sequence, fully determined by its streams.
inline void generate_sample(const GeneratorConfig& cfg, std::int64_t index,
                            std::vector<SyntheticSample>& out_frames,
                            std::size_t out_base) {
  std::uint64_t base = derive_seed(cfg.seed, hash_str("sample"), static_cast<std::uint64_t>(index));
  Rng pose_rng(derive_seed(base, hash_str("pose")));
  int F = cfg.frames_per_sample;
  std::vector<Pose3D> seq;
  std::vector<Projection> projs(static_cast<std::size_t>(F));
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 1000)
      throw NumericError("generate_sample: could not frame subject in view");
    seq = gen_skeleton_sequence(cfg.topology, F, pose_rng);
    bool ok = true;
    for (int f = 0; f < F && ok; ++f) {
      try {
        projs[static_cast<std::size_t>(f)] = project_camera(seq[static_cast<std::size_t>(f)], cfg.camera);
      } catch (const NumericError&) {
        ok = false;
        break;
      }
      const Pose2D& p2 = projs[static_cast<std::size_t>(f)].pose2d;
      for (int j = 0; j < p2.joint_count(); ++j) {
        double u = p2.joints.at(j, 0), v = p2.joints.at(j, 1);
        if (u < 0.1 || u > 0.9 || v < 0.1 || v > 0.9) {
          ok = false;
          break;
        }
      }
      double nd_lo = 0.0, nd_hi = 1.0;
      for (double d : projs[static_cast<std::size_t>(f)].depths)
        if (d < nd_lo || d > nd_hi) ok = false;
    }
    if (ok) break;
  }
  for (int f = 0; f < F; ++f) {
    SyntheticSample s;
    s.seed_record = base;
    s.gt3d = seq[static_cast<std::size_t>(f)];
    s.gt2d = projs[static_cast<std::size_t>(f)].pose2d;
    s.depths = projs[static_cast<std::size_t>(f)].depths;
    Rng det_rng(derive_seed(base, hash_str("detector"), static_cast<std::uint64_t>(f)));
    s.det2d = corrupt_pose(s.gt2d, cfg.noise, det_rng);
    s.compact = render_pyramid(s.gt2d, s.depths,
                               derive_seed(base, hash_str("noise"), static_cast<std::uint64_t>(f)),
                               cfg.recipe);
    s.has_compact = true;
    out_frames[out_base + static_cast<std::size_t>(f)] = std::move(s);
  }
}

}  // namespace detail

inline Dataset generate_dataset(const GeneratorConfig& cfg) {
  require(cfg.samples >= 0, "generate_dataset: samples >= 0");
  require(cfg.frames_per_sample >= 1, "generate_dataset: frames >= 1");
  cfg.noise.validate();
  Dataset ds;
  ds.frames_per_sample = cfg.frames_per_sample;
  ds.frames.resize(static_cast<std::size_t>(cfg.samples) *
                   static_cast<std::size_t>(cfg.frames_per_sample));
#pragma omp parallel for schedule(dynamic, 16) if (cfg.samples > 64)
  for (std::int64_t i = 0; i < cfg.samples; ++i)
    detail::generate_sample(cfg, i, ds.frames,
                            static_cast<std::size_t>(i) *
                                static_cast<std::size_t>(cfg.frames_per_sample));
  return ds;
}

// --- CAPD container --------------------------------------------------------------
//
// Header: magic "CAPD", u32 version, u32 frames_per_sample, u64 sample
// count, u32 joints, u32 levels, f64 frame_interval, u32 factor per level.
// Then per frame: u64 seed record; gt3d (J*3), gt2d (J*2), det2d (J*2),
// depths (J) as f64; per level u32 h, w, c then h*w*c f32 values. All
// little-endian. Poses round-trip bit-exactly; pyramids at 32-bit precision.

inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(const Dataset& ds, const std::string& path) {
  BinWriter w(path);
  w.put_magic("CAPD");
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.frames_per_sample));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(ds.sample_count()));
  int joints = ds.frames.empty() ? 17 : ds.frames[0].gt3d.joint_count();
  std::vector<int> factors =
      ds.frames.empty() ? PyramidRecipe{}.downsample_factors
      : ds.frames[0].has_compact ? ds.frames[0].compact.downsample_factors
                                 : ds.frames[0].dense.downsample_factors;
  w.put<std::uint32_t>(static_cast<std::uint32_t>(joints));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(factors.size()));
  w.put<double>(ds.frame_interval);
  for (int f : factors) w.put<std::uint32_t>(static_cast<std::uint32_t>(f));
  for (const SyntheticSample& s : ds.frames) {
    w.put<std::uint64_t>(s.seed_record);
    w.put_bytes(s.gt3d.joints.data(), sizeof(double) * static_cast<std::size_t>(joints) * 3);
    w.put_bytes(s.gt2d.joints.data(), sizeof(double) * static_cast<std::size_t>(joints) * 2);
    w.put_bytes(s.det2d.joints.data(), sizeof(double) * static_cast<std::size_t>(joints) * 2);
    w.put_bytes(s.depths.data(), sizeof(double) * static_cast<std::size_t>(joints));
    FeaturePyramid dense = s.has_compact ? materialize(s.compact) : s.dense;
    for (const FeatureMap& m : dense.levels) {
      w.put<std::uint32_t>(static_cast<std::uint32_t>(m.h));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(m.w));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(m.c));
      w.put_bytes(m.data.data(), sizeof(float) * m.data.size());
    }
  }
  w.finish();
}

inline Dataset read_dataset(const std::string& path) {
  BinReader r(path);
  r.expect_magic("CAPD", "dataset");
  std::uint32_t version = r.get<std::uint32_t>();
  if (version != kDatasetVersion)
    throw FormatError("unsupported dataset version " + std::to_string(version),
                      r.offset() - 4);
  Dataset ds;
  ds.frames_per_sample = static_cast<int>(r.get<std::uint32_t>());
  std::uint64_t samples = r.get<std::uint64_t>();
  std::uint32_t joints = r.get<std::uint32_t>();
  std::uint32_t levels = r.get<std::uint32_t>();
  ds.frame_interval = r.get<double>();
  if (ds.frames_per_sample < 1 || joints < 1 || joints > 1024 || levels < 1 ||
      levels > 64 || samples > (1ULL << 32))
    throw FormatError("dataset header out of bounds", r.offset());
  std::vector<int> factors;
  for (std::uint32_t l = 0; l < levels; ++l)
    factors.push_back(static_cast<int>(r.get<std::uint32_t>()));
  std::uint64_t total_frames = samples * static_cast<std::uint64_t>(ds.frames_per_sample);
  ds.frames.reserve(total_frames);
  for (std::uint64_t i = 0; i < total_frames; ++i) {
    SyntheticSample s;
    s.seed_record = r.get<std::uint64_t>();
    s.gt3d.joints = Tensor({static_cast<int>(joints), 3});
    r.get_bytes(s.gt3d.joints.data(), sizeof(double) * joints * 3);
    s.gt2d.joints = Tensor({static_cast<int>(joints), 2});
    r.get_bytes(s.gt2d.joints.data(), sizeof(double) * joints * 2);
    s.det2d.joints = Tensor({static_cast<int>(joints), 2});
    r.get_bytes(s.det2d.joints.data(), sizeof(double) * joints * 2);
    s.depths.resize(joints);
    r.get_bytes(s.depths.data(), sizeof(double) * joints);
    s.dense.downsample_factors = factors;
    for (std::uint32_t l = 0; l < levels; ++l) {
      FeatureMap m;
      m.h = static_cast<int>(r.get<std::uint32_t>());
      m.w = static_cast<int>(r.get<std::uint32_t>());
      m.c = static_cast<int>(r.get<std::uint32_t>());
      if (m.h < 1 || m.w < 1 || m.c < 1 || m.h > 65536 || m.w > 65536 || m.c > 4096)
        throw FormatError("level extents out of bounds", r.offset());
      m.data.resize(static_cast<std::size_t>(m.h) * m.w * m.c);
      r.get_bytes(m.data.data(), sizeof(float) * m.data.size());
      s.dense.levels.push_back(std::move(m));
    }
    s.has_compact = false;
    if (!s.gt3d.joints.all_finite() || !s.det2d.joints.all_finite())
      throw FormatError("non-finite pose data", r.offset());
    ds.frames.push_back(std::move(s));
  }
  return ds;
}

}  // namespace capf

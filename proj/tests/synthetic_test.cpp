#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "capf/gradcheck.hpp"
#include "capf/synthetic.hpp"
#include "gtest/gtest.h"

namespace capf {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

TEST(Skeleton, SingleFrameHasExactNominalBoneLengths) {
  SkeletonTopology topo = SkeletonTopology::human17();
  Rng rng(derive_seed(1, hash_str("pose")));
  std::vector<Pose3D> seq = gen_skeleton_sequence(topo, 1, rng);
  ASSERT_EQ(seq.size(), 1u);
  for (int j = 1; j < topo.joints; ++j) {
    int pa = topo.parent[static_cast<std::size_t>(j)];
    double dx = seq[0].joints.at(j, 0) - seq[0].joints.at(pa, 0);
    double dy = seq[0].joints.at(j, 1) - seq[0].joints.at(pa, 1);
    double dz = seq[0].joints.at(j, 2) - seq[0].joints.at(pa, 2);
    EXPECT_NEAR(std::sqrt(dx * dx + dy * dy + dz * dz),
                topo.bone_mm[static_cast<std::size_t>(j)], 1e-9);
  }
  EXPECT_EQ(seq[0].joints.at(0, 0), 0.0);
}

TEST(Skeleton, BoneLengthsConstantAcrossFrames) {
  SkeletonTopology topo = SkeletonTopology::human17();
  Rng rng(77);
  std::vector<Pose3D> seq = gen_skeleton_sequence(topo, 9, rng);
  for (const Pose3D& pose : seq)
    for (int j = 1; j < topo.joints; ++j) {
      int pa = topo.parent[static_cast<std::size_t>(j)];
      double dx = pose.joints.at(j, 0) - pose.joints.at(pa, 0);
      double dy = pose.joints.at(j, 1) - pose.joints.at(pa, 1);
      double dz = pose.joints.at(j, 2) - pose.joints.at(pa, 2);
      EXPECT_NEAR(std::sqrt(dx * dx + dy * dy + dz * dz),
                  topo.bone_mm[static_cast<std::size_t>(j)], 1e-9);
    }
}

TEST(Skeleton, EqualSeedsGiveBitwiseEqualSequences) {
  SkeletonTopology topo = SkeletonTopology::human17();
  Rng a(123), b(123);
  std::vector<Pose3D> s1 = gen_skeleton_sequence(topo, 5, a);
  std::vector<Pose3D> s2 = gen_skeleton_sequence(topo, 5, b);
  for (std::size_t f = 0; f < s1.size(); ++f)
    for (std::int64_t i = 0; i < s1[f].joints.numel(); ++i)
      EXPECT_EQ(s1[f].joints[i], s2[f].joints[i]);
}

TEST(Camera, OpticalAxisProjectsToImageCenter) {
  Pose3D p{Tensor({1, 3})};  // root at origin = on the axis
  Projection proj = project_camera(p, Camera{});
  EXPECT_DOUBLE_EQ(proj.pose2d.joints.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(proj.pose2d.joints.at(0, 1), 0.5);
}

TEST(Camera, DoublingDistanceHalvesOffsets) {
  Pose3D p{Tensor({1, 3})};
  p.joints.at(0, 0) = 300.0;
  p.joints.at(0, 1) = -150.0;  // z = 0 so Z equals camera distance
  Camera near_cam, far_cam;
  far_cam.distance_mm = 2.0 * near_cam.distance_mm;
  Projection np = project_camera(p, near_cam), fp = project_camera(p, far_cam);
  EXPECT_NEAR(fp.pose2d.joints.at(0, 0) - 0.5, (np.pose2d.joints.at(0, 0) - 0.5) / 2, 1e-15);
  EXPECT_NEAR(fp.pose2d.joints.at(0, 1) - 0.5, (np.pose2d.joints.at(0, 1) - 0.5) / 2, 1e-15);
}

TEST(Camera, MatchesScalarProjectionOracle) {
  SkeletonTopology topo = SkeletonTopology::human17();
  Rng rng(5);
  Pose3D p = gen_skeleton_sequence(topo, 1, rng)[0];
  Camera cam;
  Projection proj = project_camera(p, cam);
  for (int j = 0; j < topo.joints; ++j) {
    double z = p.joints.at(j, 2) + cam.distance_mm;
    EXPECT_NEAR(proj.pose2d.joints.at(j, 0), 0.5 + cam.focal * p.joints.at(j, 0) / z, 1e-12);
    EXPECT_NEAR(proj.pose2d.joints.at(j, 1), 0.5 + cam.focal * p.joints.at(j, 1) / z, 1e-12);
    EXPECT_NEAR(proj.depths[static_cast<std::size_t>(j)],
                (z - cam.depth_lo_mm) / cam.depth_range_mm, 1e-12);
  }
}

TEST(Camera, JointBehindCameraThrows) {
  Pose3D p{Tensor({1, 3})};
  p.joints.at(0, 2) = -5000.0;
  EXPECT_THROW(project_camera(p, Camera{}), NumericError);
}

TEST(CorruptPose, NoNoiseIsIdentity) {
  Rng rng(9);
  Pose2D gt{Tensor::randn({17, 2}, rng, 0.1)};
  NoiseSpec spec;
  spec.gaussian_sigma = 0.0;
  spec.outlier_prob = 0.0;
  Rng nrng(10);
  Pose2D out = corrupt_pose(gt, spec, nrng);
  for (std::int64_t i = 0; i < gt.joints.numel(); ++i)
    EXPECT_EQ(out.joints[i], gt.joints[i]);
}

TEST(CorruptPose, EmpiricalStdWithinTwoPercent) {
  Pose2D gt{Tensor({1, 2})};
  NoiseSpec spec;
  spec.gaussian_sigma = 0.02;
  spec.outlier_prob = 0.0;
  Rng rng(11);
  double sum = 0.0, sumsq = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) {
    Pose2D out = corrupt_pose(gt, spec, rng);
    for (int a = 0; a < 2; ++a) {
      sum += out.joints[a];
      sumsq += out.joints[a] * out.joints[a];
    }
  }
  double n = 2.0 * draws;
  double var = sumsq / n - (sum / n) * (sum / n);
  EXPECT_NEAR(std::sqrt(var), spec.gaussian_sigma, 0.02 * spec.gaussian_sigma);
}

TEST(CorruptPose, OutlierFractionWithinOnePercentAbsolute) {
  Pose2D gt{Tensor({1, 2})};
  NoiseSpec spec;
  spec.gaussian_sigma = 0.0;  // any displacement is an outlier
  spec.outlier_prob = 0.05;
  Rng rng(12);
  const int draws = 100000;
  int outliers = 0;
  for (int i = 0; i < draws; ++i) {
    Pose2D out = corrupt_pose(gt, spec, rng);
    if (out.joints[0] != 0.0 || out.joints[1] != 0.0) ++outliers;
  }
  EXPECT_NEAR(static_cast<double>(outliers) / draws, spec.outlier_prob, 0.01);
}

CompactPyramid test_pyramid(std::uint64_t seed, std::vector<double>* depths_out = nullptr) {
  Rng rng(seed);
  Pose2D gt{Tensor({17, 2})};
  std::vector<double> depths;
  for (int j = 0; j < 17; ++j) {
    gt.joints.at(j, 0) = rng.uniform(0.15, 0.85);
    gt.joints.at(j, 1) = rng.uniform(0.15, 0.85);
    depths.push_back(rng.uniform(0.1, 0.9));
  }
  if (depths_out) *depths_out = depths;
  return render_pyramid(gt, depths, derive_seed(seed, hash_str("noise")));
}

TEST(RenderPyramid, PositionChannelPeaksAtTrueJoint) {
  Rng rng(21);
  Pose2D gt{Tensor({17, 2})};
  std::vector<double> depths(17, 0.5);
  for (int j = 0; j < 17; ++j) {
    gt.joints.at(j, 0) = rng.uniform(0.15, 0.85);
    gt.joints.at(j, 1) = rng.uniform(0.15, 0.85);
  }
  CompactPyramid pyr = render_pyramid(gt, depths, 99);
  for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
    const CompactLevel& lv = pyr.levels[l];
    for (int j = 0; j < 17; ++j) {
      int cx = static_cast<int>(std::lround(gt.joints.at(j, 0) * (lv.w - 1)));
      int cy = static_cast<int>(std::lround(gt.joints.at(j, 1) * (lv.h - 1)));
      double peak = detail::compact_value(lv, depths.data(), 17, pyr.noise_std, cy, cx, j);
      for (int y = 0; y < lv.h; ++y)
        for (int x = 0; x < lv.w; ++x)
          EXPECT_GE(peak + 1e-15,
                    detail::compact_value(lv, depths.data(), 17, pyr.noise_std, y, x, j));
    }
  }
}

TEST(RenderPyramid, DepthOverPositionRatioEqualsNormalizedDepth) {
  std::vector<double> depths;
  CompactPyramid pyr = test_pyramid(31, &depths);
  for (const CompactLevel& lv : pyr.levels)
    for (int j = 0; j < 17; ++j) {
      // Probe the peak pixel and a flank pixel.
      for (int probe = 0; probe < 2; ++probe) {
        int y = std::min(lv.h - 1, probe * (lv.h / 2) + 1);
        int x = std::min(lv.w - 1, probe * (lv.w / 3) + 1);
        double pos = detail::compact_value(lv, depths.data(), 17, pyr.noise_std, y, x, j);
        double dep =
            detail::compact_value(lv, depths.data(), 17, pyr.noise_std, y, x, 17 + j);
        if (pos > 1e-30)
          EXPECT_NEAR(dep / pos, depths[static_cast<std::size_t>(j)], 1e-9);
      }
    }
}

TEST(RenderPyramid, ZeroDepthJointHasFlatZeroDepthChannel) {
  Rng rng(41);
  Pose2D gt{Tensor({17, 2})};
  std::vector<double> depths(17, 0.4);
  depths[3] = 0.0;
  for (int j = 0; j < 17; ++j) {
    gt.joints.at(j, 0) = rng.uniform(0.2, 0.8);
    gt.joints.at(j, 1) = rng.uniform(0.2, 0.8);
  }
  CompactPyramid pyr = render_pyramid(gt, depths, 7);
  const CompactLevel& lv = pyr.levels[0];
  for (int y = 0; y < lv.h; ++y)
    for (int x = 0; x < lv.w; ++x)
      EXPECT_EQ(detail::compact_value(lv, depths.data(), 17, pyr.noise_std, y, x, 17 + 3),
                0.0);
}

TEST(RenderPyramid, MaterializedDenseMatchesCompactAt32BitPrecision) {
  std::vector<double> depths;
  CompactPyramid pyr = test_pyramid(51, &depths);
  FeaturePyramid dense = materialize(pyr);
  dense.validate();
  ASSERT_EQ(dense.levels.size(), pyr.levels.size());
  for (std::size_t l = 0; l < dense.levels.size(); ++l) {
    const FeatureMap& m = dense.levels[l];
    const CompactLevel& lv = pyr.levels[l];
    for (int y = 0; y < m.h; y += 3)
      for (int x = 0; x < m.w; x += 2)
        for (int ch = 0; ch < m.c; ch += 5) {
          double v = detail::compact_value(lv, depths.data(), 17, pyr.noise_std, y, x, ch);
          EXPECT_EQ(m.at(y, x, ch), static_cast<float>(v));
        }
  }
}

TEST(SampleMaps, AgreesWithSingleSampleOpOnDenseMaps) {
  CompactPyramid pyr = test_pyramid(61);
  FeaturePyramid dense = materialize(pyr);
  const FeatureMap& m = dense.levels[1];
  // Promote the dense level to a tensor for the reference op.
  Tensor map_t({m.h, m.w, m.c});
  for (std::int64_t i = 0; i < map_t.numel(); ++i)
    map_t[i] = static_cast<double>(m.data[static_cast<std::size_t>(i)]);

  auto maps = std::make_shared<std::vector<LevelView>>();
  maps->push_back(view_of(dense).levels[1]);
  auto rows = std::make_shared<std::vector<int>>(std::vector<int>{0, 0, 0});
  Tensor pts({3, 2}, {0.31, 0.62, 0.05, 0.95, 1.3, -0.2});

  Tape t;
  Value batched = sample_maps(make_constant(t, pts), maps, rows);
  for (int i = 0; i < 3; ++i) {
    Value single = bilinear_sample(
        make_constant(t, map_t),
        make_constant(t, Tensor({2}, {pts.at(i, 0), pts.at(i, 1)})));
    for (int ch = 0; ch < m.c; ++ch)
      EXPECT_EQ(batched.val().at(i, ch), single.val()[ch]);
  }
}

TEST(SampleMaps, CompactAndDenseViewsAgreeTo32BitPrecision) {
  CompactPyramid pyr = test_pyramid(71);
  FeaturePyramid dense = materialize(pyr);
  auto cmaps = std::make_shared<std::vector<LevelView>>();
  cmaps->push_back(view_of(pyr).levels[0]);
  auto dmaps = std::make_shared<std::vector<LevelView>>();
  dmaps->push_back(view_of(dense).levels[0]);
  auto rows = std::make_shared<std::vector<int>>(std::vector<int>{0, 0});
  Tensor pts({2, 2}, {0.4, 0.55, 0.72, 0.18});
  Tape t;
  Value a = sample_maps(make_constant(t, pts), cmaps, rows);
  Value b = sample_maps(make_constant(t, pts), dmaps, rows);
  for (std::int64_t i = 0; i < a.val().numel(); ++i)
    EXPECT_NEAR(a.val()[i], b.val()[i], 1e-6);
}

TEST(SampleMaps, PointGradientsMatchFiniteDifferences) {
  CompactPyramid pyr = test_pyramid(81);
  auto maps = std::make_shared<std::vector<LevelView>>();
  maps->push_back(view_of(pyr).levels[2]);
  auto rows = std::make_shared<std::vector<int>>(std::vector<int>{0, 0});
  std::vector<Tensor> params{Tensor({2, 2}, {0.33, 0.57, 0.61, 0.42})};
  auto forward = [&](Tape&, const std::vector<Value>& v) {
    return sample_maps(v[0], maps, rows);
  };
  auto report = check_gradients(params, forward, 91);
  EXPECT_LT(report.max_rel_err, 1e-4) << report.worst;
}

TEST(GenerateDataset, DeterministicAndFramedInView) {
  GeneratorConfig cfg;
  cfg.seed = 1234;
  cfg.samples = 12;
  Dataset a = generate_dataset(cfg);
  Dataset b = generate_dataset(cfg);
  ASSERT_EQ(a.frames.size(), 12u);
  for (std::size_t i = 0; i < a.frames.size(); ++i) {
    for (std::int64_t k = 0; k < a.frames[i].gt3d.joints.numel(); ++k)
      EXPECT_EQ(a.frames[i].gt3d.joints[k], b.frames[i].gt3d.joints[k]);
    for (std::int64_t k = 0; k < a.frames[i].det2d.joints.numel(); ++k)
      EXPECT_EQ(a.frames[i].det2d.joints[k], b.frames[i].det2d.joints[k]);
    for (std::size_t l = 0; l < a.frames[i].compact.levels.size(); ++l)
      for (std::size_t k = 0; k < a.frames[i].compact.levels[l].rowf.size(); ++k)
        EXPECT_EQ(a.frames[i].compact.levels[l].rowf[k],
                  b.frames[i].compact.levels[l].rowf[k]);
    // Subject framed in view by construction.
    for (int j = 0; j < 17; ++j) {
      EXPECT_GE(a.frames[i].gt2d.joints.at(j, 0), 0.1);
      EXPECT_LE(a.frames[i].gt2d.joints.at(j, 0), 0.9);
      EXPECT_GE(a.frames[i].gt2d.joints.at(j, 1), 0.1);
      EXPECT_LE(a.frames[i].gt2d.joints.at(j, 1), 0.9);
    }
    // Exact projection invariant: gt2d == project(gt3d).
    Projection proj = project_camera(a.frames[i].gt3d, cfg.camera);
    for (std::int64_t k = 0; k < proj.pose2d.joints.numel(); ++k)
      EXPECT_EQ(a.frames[i].gt2d.joints[k], proj.pose2d.joints[k]);
  }
}

TEST(DatasetIo, EmptyDatasetRoundTrips) {
  std::string path = temp_path("capf_empty.capd");
  Dataset ds;
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  EXPECT_EQ(back.sample_count(), 0);
  EXPECT_EQ(back.frames_per_sample, 1);
  std::filesystem::remove(path);
}

TEST(DatasetIo, PosesRoundTripBitExactly) {
  GeneratorConfig cfg;
  cfg.seed = 5;
  cfg.samples = 3;
  Dataset ds = generate_dataset(cfg);
  std::string path = temp_path("capf_small.capd");
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  ASSERT_EQ(back.frames.size(), ds.frames.size());
  for (std::size_t i = 0; i < ds.frames.size(); ++i) {
    EXPECT_EQ(back.frames[i].seed_record, ds.frames[i].seed_record);
    for (std::int64_t k = 0; k < ds.frames[i].gt3d.joints.numel(); ++k)
      EXPECT_EQ(back.frames[i].gt3d.joints[k], ds.frames[i].gt3d.joints[k]);
    for (std::int64_t k = 0; k < ds.frames[i].det2d.joints.numel(); ++k)
      EXPECT_EQ(back.frames[i].det2d.joints[k], ds.frames[i].det2d.joints[k]);
    // Pyramids round-trip at 32-bit precision: the loaded dense values must
    // equal the float cast of the compact values.
    FeaturePyramid dense = materialize(ds.frames[i].compact);
    for (std::size_t l = 0; l < dense.levels.size(); ++l)
      for (std::size_t k = 0; k < dense.levels[l].data.size(); k += 97)
        EXPECT_EQ(back.frames[i].dense.levels[l].data[k], dense.levels[l].data[k]);
  }
  std::filesystem::remove(path);
}

TEST(DatasetIo, CorruptedHeaderIsFormatErrorNotCrash) {
  GeneratorConfig cfg;
  cfg.samples = 1;
  Dataset ds = generate_dataset(cfg);
  std::string path = temp_path("capf_corrupt.capd");
  write_dataset(ds, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(2);
    f.put('X');  // damage the magic
  }
  EXPECT_THROW(read_dataset(path), FormatError);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('C');
    f.put('A');
    f.put('P');
    f.put('D');
    f.seekp(4);
    std::uint32_t bad_version = 99;
    f.write(reinterpret_cast<char*>(&bad_version), 4);
  }
  EXPECT_THROW(read_dataset(path), FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(read_dataset(path), FormatError);  // missing file
}

TEST(DatasetIo, TruncationReportsByteOffset) {
  GeneratorConfig cfg;
  cfg.samples = 2;
  Dataset ds = generate_dataset(cfg);
  std::string path = temp_path("capf_trunc.capd");
  write_dataset(ds, path);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
  try {
    read_dataset(path);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_GT(e.byte_offset, 0u);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace capf

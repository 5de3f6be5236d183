#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <optional>
#include <vector>

#include "capf/tensor.hpp"

namespace capf {

// Per-frame joint coordinates, normalized image units. Detector noise may
// push values slightly outside [0,1]; sampling clamps later.
struct Pose2D {
  Tensor joints;  // [J x 2]

  int joint_count() const { return joints.dim(0); }

  void validate() const {
    require(joints.rank() == 2 && joints.dim(1) == 2, "Pose2D: joints must be [J x 2]");
    require_finite(joints, "Pose2D");
  }
};

// Root-relative millimeters; joint 0 is the pelvis.
struct Pose3D {
  Tensor joints;  // [J x 3]

  int joint_count() const { return joints.dim(0); }

  void validate() const {
    require(joints.rank() == 2 && joints.dim(1) == 3, "Pose3D: joints must be [J x 3]");
    require_finite(joints, "Pose3D");
  }
};

struct PoseSequence3D {
  std::vector<Pose3D> frames;
  double frame_interval = 1.0 / 50.0;  // seconds

  void validate() const {
    require(!frames.empty(), "PoseSequence3D: at least one frame");
    for (const Pose3D& f : frames)
      require(f.joint_count() == frames[0].joint_count(),
              "PoseSequence3D: joint count must be constant");
  }
};

struct MetricsReport {
  double mpjpe_mm = 0.0;
  double pa_mpjpe_mm = 0.0;
  double pck_percent = 0.0;
  double auc_percent = 0.0;
  std::optional<double> mpjve_mm;
  std::int64_t sample_count = 0;
  std::int64_t alignment_warnings = 0;  // degenerate predictions excluded from PA-MPJPE
};

// --- basic geometry -----------------------------------------------------------

inline Pose3D root_center(const Pose3D& p) {
  require(p.joint_count() >= 1, "root_center: empty pose");
  Pose3D out = p;
  double rx = p.joints.at(0, 0), ry = p.joints.at(0, 1), rz = p.joints.at(0, 2);
  for (int j = 0; j < p.joint_count(); ++j) {
    out.joints.at(j, 0) -= rx;
    out.joints.at(j, 1) -= ry;
    out.joints.at(j, 2) -= rz;
  }
  return out;
}

inline double mpjpe(const Pose3D& pred, const Pose3D& gt) {
  require(pred.joint_count() == gt.joint_count(), "mpjpe: joint count mismatch");
  double total = 0.0;
  for (int j = 0; j < pred.joint_count(); ++j) {
    double dx = pred.joints.at(j, 0) - gt.joints.at(j, 0);
    double dy = pred.joints.at(j, 1) - gt.joints.at(j, 1);
    double dz = pred.joints.at(j, 2) - gt.joints.at(j, 2);
    total += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return total / pred.joint_count();
}

// --- Procrustes ------------------------------------------------------------------

struct SimilarityTransform {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

struct AlignmentError : NumericError {
  using NumericError::NumericError;
};

// Closed-form similarity alignment (covariance/SVD with reflection
// correction): returns the transform minimizing sum ||s R p + t - g||^2
// over rotations with det(R) = +1, scale > 0 and translation.
inline SimilarityTransform procrustes_transform(const Pose3D& pred, const Pose3D& gt) {
  int j = pred.joint_count();
  require(j >= 3 && gt.joint_count() == j, "procrustes: need >= 3 matched joints");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> P(
      pred.joints.data(), j, 3);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> G(
      gt.joints.data(), j, 3);
  Eigen::RowVector3d mu_p = P.colwise().mean();
  Eigen::RowVector3d mu_g = G.colwise().mean();
  Eigen::MatrixXd Pc = P.rowwise() - mu_p;
  Eigen::MatrixXd Gc = G.rowwise() - mu_g;
  double var_p = Pc.squaredNorm() / j;
  if (var_p <= 0.0)
    throw AlignmentError("procrustes: degenerate prediction (zero variance)");
  Eigen::Matrix3d cov = (Gc.transpose() * Pc) / j;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Vector3d d = Eigen::Vector3d::Ones();
  // Poses are chiral: flip the smallest singular direction rather than
  // permit a reflection.
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2) = -1.0;
  SimilarityTransform tf;
  tf.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  tf.scale = svd.singularValues().dot(d) / var_p;
  tf.translation = mu_g.transpose() - tf.scale * tf.rotation * mu_p.transpose();
  return tf;
}

inline Pose3D apply_similarity(const SimilarityTransform& tf, const Pose3D& p) {
  Pose3D out = p;
  for (int j = 0; j < p.joint_count(); ++j) {
    Eigen::Vector3d v(p.joints.at(j, 0), p.joints.at(j, 1), p.joints.at(j, 2));
    Eigen::Vector3d w = tf.scale * (tf.rotation * v) + tf.translation;
    out.joints.at(j, 0) = w(0);
    out.joints.at(j, 1) = w(1);
    out.joints.at(j, 2) = w(2);
  }
  return out;
}

inline Pose3D procrustes_align(const Pose3D& pred, const Pose3D& gt) {
  return apply_similarity(procrustes_transform(pred, gt), pred);
}

inline double pa_mpjpe(const Pose3D& pred, const Pose3D& gt) {
  return mpjpe(procrustes_align(pred, gt), gt);
}

// --- batch metrics ------------------------------------------------------------------

inline double pck(const std::vector<Pose3D>& preds, const std::vector<Pose3D>& gts,
                  double threshold_mm = 150.0) {
  require(!preds.empty() && preds.size() == gts.size(), "pck: empty or mismatched batch");
  std::int64_t correct = 0, total = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    require(preds[s].joint_count() == gts[s].joint_count(), "pck: joint count mismatch");
    for (int j = 0; j < preds[s].joint_count(); ++j) {
      double dx = preds[s].joints.at(j, 0) - gts[s].joints.at(j, 0);
      double dy = preds[s].joints.at(j, 1) - gts[s].joints.at(j, 1);
      double dz = preds[s].joints.at(j, 2) - gts[s].joints.at(j, 2);
      if (std::sqrt(dx * dx + dy * dy + dz * dz) < threshold_mm) ++correct;
      ++total;
    }
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

// Mean of PCK over thresholds 5, 10, ..., 150 mm (30 thresholds).
inline double auc(const std::vector<Pose3D>& preds, const std::vector<Pose3D>& gts) {
  double sum = 0.0;
  for (int k = 1; k <= 30; ++k) sum += pck(preds, gts, 5.0 * k);
  return sum / 30.0;
}

// MPJPE between first temporal differences (millimeters of velocity error).
inline double mpjve(const PoseSequence3D& pred_seq, const PoseSequence3D& gt_seq) {
  require(pred_seq.frames.size() == gt_seq.frames.size(), "mpjve: length mismatch");
  require(pred_seq.frames.size() >= 2, "mpjve: need at least 2 frames");
  double total = 0.0;
  std::int64_t count = 0;
  for (std::size_t f = 0; f + 1 < pred_seq.frames.size(); ++f) {
    const Pose3D &p0 = pred_seq.frames[f], &p1 = pred_seq.frames[f + 1];
    const Pose3D &g0 = gt_seq.frames[f], &g1 = gt_seq.frames[f + 1];
    require(p0.joint_count() == g0.joint_count(), "mpjve: joint count mismatch");
    for (int j = 0; j < p0.joint_count(); ++j) {
      double dx = (p1.joints.at(j, 0) - p0.joints.at(j, 0)) -
                  (g1.joints.at(j, 0) - g0.joints.at(j, 0));
      double dy = (p1.joints.at(j, 1) - p0.joints.at(j, 1)) -
                  (g1.joints.at(j, 1) - g0.joints.at(j, 1));
      double dz = (p1.joints.at(j, 2) - p0.joints.at(j, 2)) -
                  (g1.joints.at(j, 2) - g0.joints.at(j, 2));
      total += std::sqrt(dx * dx + dy * dy + dz * dz);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// Full report over matched batches. PA-MPJPE alignment is per sample;
// degenerate samples are skipped and counted as warnings.
inline MetricsReport evaluate_batch(const std::vector<Pose3D>& preds,
                                    const std::vector<Pose3D>& gts) {
  require(!preds.empty() && preds.size() == gts.size(),
          "evaluate_batch: empty or mismatched batch");
  MetricsReport rep;
  rep.sample_count = static_cast<std::int64_t>(preds.size());
  double mp = 0.0, pa = 0.0;
  std::int64_t pa_count = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    mp += mpjpe(preds[s], gts[s]);
    try {
      pa += pa_mpjpe(preds[s], gts[s]);
      ++pa_count;
    } catch (const AlignmentError&) {
      ++rep.alignment_warnings;
    }
  }
  rep.mpjpe_mm = mp / static_cast<double>(preds.size());
  rep.pa_mpjpe_mm = pa_count ? pa / static_cast<double>(pa_count) : 0.0;
  rep.pck_percent = pck(preds, gts);
  rep.auc_percent = auc(preds, gts);
  return rep;
}

}  // namespace capf

#include "clipcl/gfk.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace clipcl {

namespace {

// 1 - sin(x)/x, stable near zero.
double one_minus_sinc(double x) {
  if (std::abs(x) < 1e-3) {
    double x2 = x * x;
    return x2 / 6.0 - x2 * x2 / 120.0;
  }
  return 1.0 - std::sin(x) / x;
}

}  // namespace

Mat GeodesicFlow::at(double nu) const {
  Vec c = (nu * angles.array()).cos();
  Vec s = (nu * angles.array()).sin();
  Mat out = p_old * u1 * c.asDiagonal();
  if (r.cols() > 0) out -= r * u2 * s.asDiagonal();
  return out;
}

Mat principal_subspace(const Mat& features, int k) {
  if (k < 1) throw InvalidInput("subspace_dim must be at least 1");
  if (k > std::min(features.rows(), features.cols()))
    throw InvalidInput("subspace_dim " + std::to_string(k) + " exceeds min(batch, d)");
  Eigen::JacobiSVD<Mat> svd(features, Eigen::ComputeThinU);
  const Vec& sv = svd.singularValues();
  double tol = std::max(1e-12, 1e-10 * sv(0));
  if (!(sv(k - 1) > tol))
    throw RankDeficient("feature matrix rank is below subspace_dim " + std::to_string(k));
  return svd.matrixU().leftCols(k);
}

GeodesicFlow geodesic_flow(const Mat& p_old, const Mat& p_new) {
  if (p_old.rows() != p_new.rows() || p_old.cols() != p_new.cols())
    throw InvalidInput("subspace shapes differ");
  const Eigen::Index d = p_old.rows();
  const Eigen::Index k = p_old.cols();
  GeodesicFlow flow;
  flow.p_old = p_old;
  flow.p_new = p_new;
  Eigen::HouseholderQR<Mat> qr(p_old);
  Mat full_q = qr.householderQ() * Mat::Identity(d, d);
  flow.r = full_q.rightCols(d - k);

  Eigen::JacobiSVD<Mat> svd(p_old.transpose() * p_new, Eigen::ComputeFullU | Eigen::ComputeFullV);
  flow.u1 = svd.matrixU();
  const Mat& v = svd.matrixV();
  Mat b = flow.r.transpose() * p_new * v;  // columns have norm sin(theta_i)
  flow.angles.resize(k);
  flow.u2 = Mat::Zero(d - k, k);
  for (Eigen::Index i = 0; i < k; ++i) {
    double cos_t = std::min(1.0, svd.singularValues()(i));
    double sin_t = b.rows() > 0 ? b.col(i).norm() : 0.0;
    flow.angles(i) = std::atan2(sin_t, cos_t);
    if (sin_t > 1e-12) flow.u2.col(i) = -b.col(i) / sin_t;
  }
  return flow;
}

GeodesicFlowKernel flow_kernel(const GeodesicFlow& flow) {
  const Eigen::Index k = flow.angles.size();
  Vec l1(k), l2(k), l3(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    double t = flow.angles(i);
    double x = 2.0 * t;
    double omc = one_minus_sinc(x);
    // theta -> 0 limits: (1, 0, 0)
    l1(i) = 0.5 * (2.0 - omc);
    l2(i) = t > 0.0 ? -std::sin(t) * std::sin(t) / x : 0.0;  // (cos 2t - 1) / (2 * 2t)
    l3(i) = 0.5 * omc;
  }
  Mat a = flow.p_old * flow.u1;
  Mat q = a * l1.asDiagonal() * a.transpose();
  if (flow.r.cols() > 0) {
    Mat b = flow.r * flow.u2;
    Mat cross = a * l2.asDiagonal() * b.transpose();
    q += cross + cross.transpose() + b * l3.asDiagonal() * b.transpose();
  }
  q = 0.5 * (q + q.transpose());

  Eigen::SelfAdjointEigenSolver<Mat> eig(q);
  Vec ev = eig.eigenvalues().cwiseMax(0.0);
  const Mat& vecs = eig.eigenvectors();

  GeodesicFlowKernel out;
  out.q = vecs * ev.asDiagonal() * vecs.transpose();
  out.q_sqrt = vecs * ev.cwiseSqrt().asDiagonal() * vecs.transpose();
  out.subspace_dim = static_cast<int>(k);
  out.principal_angles.assign(flow.angles.data(), flow.angles.data() + k);
  return out;
}

GeodesicFlowKernel geodesic_flow_kernel(const Mat& z_old, const Mat& z_new, int subspace_dim) {
  if (z_old.rows() != z_new.rows()) throw InvalidInput("feature dimension mismatch between old and new");
  return flow_kernel(geodesic_flow(principal_subspace(z_old, subspace_dim),
                                   principal_subspace(z_new, subspace_dim)));
}

int default_subspace_dim(Eigen::Index batch, Eigen::Index dim) {
  auto k = std::min<Eigen::Index>({8, batch - 1, dim});
  return static_cast<int>(std::max<Eigen::Index>(k, 1));
}

}  // namespace clipcl

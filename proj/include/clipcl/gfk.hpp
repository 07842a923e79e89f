#pragma once

#include "clipcl/common.hpp"

#include <vector>

namespace clipcl {

/// Geodesic flow between two k-dim subspaces of R^d:
///   Pi(nu) = P_old U1 Gamma(nu) - R U2 Sigma(nu),
/// Gamma = diag(cos(nu theta)), Sigma = diag(sin(nu theta)).
struct GeodesicFlow {
  Mat p_old;   // d x k, orthonormal
  Mat p_new;   // d x k, orthonormal
  Mat r;       // d x (d - k), orthonormal complement of p_old
  Mat u1;      // k x k
  Mat u2;      // (d - k) x k; columns with theta = 0 are zero
  Vec angles;  // principal angles in [0, pi/2]

  [[nodiscard]] Mat at(double nu) const;
};

struct GeodesicFlowKernel {
  Mat q;       // d x d, symmetric PSD (negative eigenvalues clamped)
  Mat q_sqrt;  // symmetric square root of q
  int subspace_dim = 0;
  std::vector<double> principal_angles;
};

/// Top-k left singular vectors of `features` (d x n, one sample per column).
/// Throws RankDeficient when the k-th singular value vanishes.
Mat principal_subspace(const Mat& features, int k);

GeodesicFlow geodesic_flow(const Mat& p_old, const Mat& p_new);

/// Closed-form Q = int_0^1 Pi(nu) Pi(nu)^T dnu.
GeodesicFlowKernel flow_kernel(const GeodesicFlow& flow);

/// Builds Q from old/new feature matrices (d x n, samples in columns).
GeodesicFlowKernel geodesic_flow_kernel(const Mat& z_old, const Mat& z_new, int subspace_dim);

/// min(8, n - 1) capped at d.
int default_subspace_dim(Eigen::Index batch, Eigen::Index dim);

}  // namespace clipcl

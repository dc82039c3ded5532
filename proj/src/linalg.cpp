#include "kif/linalg.hpp"

#include <Eigen/SVD>

namespace kif {

SvdResult svd(const Mat& a) {
  require(a.rows() >= 1 && a.cols() >= 1, "svd: empty matrix");
  check_finite(a, "svd input");
  Eigen::JacobiSVD<Mat> dec(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SvdResult r;
  r.u = dec.matrixU();
  r.singular_values = dec.singularValues();
  r.v_transpose = dec.matrixV().transpose();
  check_finite(r.u, "svd U (decomposition did not converge)");
  return r;
}

}  // namespace kif

#ifndef KIF_LINALG_HPP
#define KIF_LINALG_HPP

#include "kif/common.hpp"

namespace kif {

struct SvdResult {
  Mat u;                // m x k, orthonormal columns
  Vec singular_values;  // k, non-negative, descending
  Mat v_transpose;      // k x n
};

/// Thin SVD of a rank-2 matrix. Singular values come back sorted descending.
SvdResult svd(const Mat& a);

}  // namespace kif

#endif

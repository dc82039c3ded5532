#ifndef KIF_AUTODIFF_HPP
#define KIF_AUTODIFF_HPP

#include "kif/common.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace kif::ad {

/// A named trainable (or frozen) matrix. Gradients accumulate into `grad`
/// across backward passes until zero_grad() is called.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

Param make_param(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                 double init_std, Rng& rng);
Param make_zero_param(const std::string& name, Eigen::Index rows, Eigen::Index cols);

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Mat val;
  Mat grad;
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backfn;  // propagates this->grad into parents

  void ensure_grad() {
    if (grad.rows() != val.rows() || grad.cols() != val.cols())
      grad.setZero(val.rows(), val.cols());
  }
};

/// Whether newly built ops record the backward graph. Generation and metric
/// paths run inside NoGradGuard to avoid tape overhead.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Value handle into the computation DAG.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  const Mat& val() const { return n_->val; }
  const NodePtr& node() const { return n_; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Eigen::Index rows() const { return n_->val.rows(); }
  Eigen::Index cols() const { return n_->val.cols(); }
  double scalar() const;

 private:
  NodePtr n_;
};

Var constant(Mat m);
Var constant_scalar(double v);
/// Leaf view of a Param; backward accumulates into p.grad. The Param must
/// outlive the graph.
Var leaf(Param& p);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var neg(const Var& a);
Var mul(const Var& a, const Var& b);  // elementwise
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var add_rowwise(const Var& m, const Var& bias);   // bias: 1 x C
Var mul_rowwise(const Var& m, const Var& gain);   // gain: 1 x C
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var log_elem(const Var& a);
/// log(1 - min(a, 1 - 1e-6)), elementwise; gradient follows the clamped value.
Var log1m_clamped(const Var& a);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var rowwise_sum(const Var& a);                     // T x C -> T x 1
Var sum_cols_subset(const Var& a, const std::vector<int>& cols);  // -> T x 1
Var gather_rows(const Var& m, const std::vector<int>& rows);
Var slice_cols(const Var& m, Eigen::Index start, Eigen::Index n);
Var concat_cols(const std::vector<Var>& parts);
/// Picks m(rows[i], cols[i]) into an n x 1 vector.
Var gather_entries(const Var& m, const std::vector<int>& rows, const std::vector<int>& cols);
Var rmsnorm_rows(const Var& x, const Var& gain, double eps = 1e-6);
Var dropout(const Var& a, double rate, Rng& rng);

/// Reverse-mode sweep from a scalar loss. Gradients land in Param::grad for
/// every reachable leaf. Calling twice on the same loss node is an error.
void backward(const Var& loss);

/// Convenience wrapper matching the "map from parameter id to gradient"
/// contract: zeroes the listed params' grads, runs backward, returns copies.
std::map<std::string, Mat> backward_collect(const Var& loss, const std::vector<Param*>& params);

/// Adam with bias correction; steps only trainable params.
class Adam {
 public:
  Adam(std::vector<Param*> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void zero_grad();
  void set_lr(double lr) { lr_ = lr; }
  const std::vector<Param*>& params() const { return params_; }

 private:
  std::vector<Param*> params_;
  std::vector<Mat> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace kif::ad

#endif

#include "kif/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace kif::ad {

namespace {

thread_local bool g_grad_enabled = true;

NodePtr make_node(Mat val, std::vector<NodePtr> parents, std::function<void(Node&)> backfn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  if (rg) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
  }
  return n;
}

void accum(Node& p, const Mat& g) {
  p.ensure_grad();
  p.grad += g;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

double Var::scalar() const {
  require(n_ && n_->val.size() == 1, "Var::scalar on non-scalar value");
  return n_->val(0, 0);
}

Param make_param(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                 double init_std, Rng& rng) {
  Param p;
  p.name = name;
  p.value.resize(rows, cols);
  std::normal_distribution<double> dist(0.0, init_std);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) p.value(i, j) = dist(rng);
  p.zero_grad();
  return p;
}

Param make_zero_param(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  Param p;
  p.name = name;
  p.value.setZero(rows, cols);
  p.zero_grad();
  return p;
}

Var constant(Mat m) {
  auto n = std::make_shared<Node>();
  n->val = std::move(m);
  return Var(n);
}

Var constant_scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var leaf(Param& p) {
  auto n = std::make_shared<Node>();
  n->val = p.value;
  if (g_grad_enabled && p.trainable) {
    n->requires_grad = true;
    Param* pp = &p;
    n->backfn = [pp](Node& self) {
      if (pp->grad.rows() != pp->value.rows() || pp->grad.cols() != pp->value.cols())
        pp->zero_grad();
      pp->grad += self.grad;
    };
  }
  return Var(n);
}

Var add(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  return Var(make_node(a.val() + b.val(), {a.node(), b.node()}, [](Node& self) {
    accum(*self.parents[0], self.grad);
    accum(*self.parents[1], self.grad);
  }));
}

Var sub(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
  return Var(make_node(a.val() - b.val(), {a.node(), b.node()}, [](Node& self) {
    accum(*self.parents[0], self.grad);
    accum(*self.parents[1], -self.grad);
  }));
}

Var neg(const Var& a) {
  return Var(make_node(-a.val(), {a.node()},
                       [](Node& self) { accum(*self.parents[0], -self.grad); }));
}

Var mul(const Var& a, const Var& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: shape mismatch");
  return Var(make_node(a.val().cwiseProduct(b.val()), {a.node(), b.node()}, [](Node& self) {
    accum(*self.parents[0], self.grad.cwiseProduct(self.parents[1]->val));
    accum(*self.parents[1], self.grad.cwiseProduct(self.parents[0]->val));
  }));
}

Var matmul(const Var& a, const Var& b) {
  require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  return Var(make_node(a.val() * b.val(), {a.node(), b.node()}, [](Node& self) {
    accum(*self.parents[0], self.grad * self.parents[1]->val.transpose());
    accum(*self.parents[1], self.parents[0]->val.transpose() * self.grad);
  }));
}

Var transpose(const Var& a) {
  return Var(make_node(a.val().transpose(), {a.node()},
                       [](Node& self) { accum(*self.parents[0], self.grad.transpose()); }));
}

Var scale(const Var& a, double c) {
  return Var(make_node(a.val() * c, {a.node()},
                       [c](Node& self) { accum(*self.parents[0], self.grad * c); }));
}

Var add_scalar(const Var& a, double c) {
  return Var(make_node(Mat((a.val().array() + c).matrix()), {a.node()},
                       [](Node& self) { accum(*self.parents[0], self.grad); }));
}

Var add_rowwise(const Var& m, const Var& bias) {
  require(bias.rows() == 1 && bias.cols() == m.cols(), "add_rowwise: bias shape");
  Mat out = m.val();
  out.rowwise() += bias.val().row(0);
  return Var(make_node(std::move(out), {m.node(), bias.node()}, [](Node& self) {
    accum(*self.parents[0], self.grad);
    accum(*self.parents[1], self.grad.colwise().sum());
  }));
}

Var mul_rowwise(const Var& m, const Var& gain) {
  require(gain.rows() == 1 && gain.cols() == m.cols(), "mul_rowwise: gain shape");
  Mat out = (m.val().array().rowwise() * gain.val().row(0).array()).matrix();
  return Var(make_node(std::move(out), {m.node(), gain.node()}, [](Node& self) {
    const Mat& x = self.parents[0]->val;
    const Mat& g = self.parents[1]->val;
    accum(*self.parents[0], Mat((self.grad.array().rowwise() * g.row(0).array()).matrix()));
    accum(*self.parents[1], (self.grad.cwiseProduct(x)).colwise().sum());
  }));
}

Var silu(const Var& a) {
  Mat s = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
  Mat out = a.val().cwiseProduct(s);
  return Var(make_node(std::move(out), {a.node()}, [s](Node& self) {
    const Mat& x = self.parents[0]->val;
    Mat d = (s.array() * (1.0 + x.array() * (1.0 - s.array()))).matrix();
    accum(*self.parents[0], self.grad.cwiseProduct(d));
  }));
}

Var sigmoid(const Var& a) {
  Mat s = (1.0 / (1.0 + (-a.val().array()).exp())).matrix();
  return Var(make_node(s, {a.node()}, [s](Node& self) {
    Mat d = (s.array() * (1.0 - s.array())).matrix();
    accum(*self.parents[0], self.grad.cwiseProduct(d));
  }));
}

Var log_elem(const Var& a) {
  return Var(make_node(Mat(a.val().array().log().matrix()), {a.node()}, [](Node& self) {
    accum(*self.parents[0], self.grad.cwiseQuotient(self.parents[0]->val));
  }));
}

Var log1m_clamped(const Var& a) {
  constexpr double kCap = 1.0 - 1e-6;
  Mat c = a.val().cwiseMin(kCap);
  Mat out = (1.0 - c.array()).log().matrix();
  return Var(make_node(std::move(out), {a.node()}, [c](Node& self) {
    Mat d = (-1.0 / (1.0 - c.array())).matrix();
    accum(*self.parents[0], self.grad.cwiseProduct(d));
  }));
}

namespace {
Mat softmax_rows_val(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::RowVectorXd r = x.row(i);
    double m = r.maxCoeff();
    Eigen::RowVectorXd e = (r.array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}
}  // namespace

Var softmax_rows(const Var& a) {
  Mat p = softmax_rows_val(a.val());
  return Var(make_node(p, {a.node()}, [p](Node& self) {
    Mat dx(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double dot = self.grad.row(i).cwiseProduct(p.row(i)).sum();
      dx.row(i) = p.row(i).cwiseProduct((self.grad.row(i).array() - dot).matrix());
    }
    accum(*self.parents[0], dx);
  }));
}

Var log_softmax_rows(const Var& a) {
  Mat p = softmax_rows_val(a.val());
  Mat out(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::RowVectorXd r = a.val().row(i);
    double m = r.maxCoeff();
    double lse = m + std::log((r.array() - m).exp().sum());
    out.row(i) = (r.array() - lse).matrix();
  }
  return Var(make_node(std::move(out), {a.node()}, [p](Node& self) {
    Mat dx(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      double rs = self.grad.row(i).sum();
      dx.row(i) = self.grad.row(i) - rs * p.row(i);
    }
    accum(*self.parents[0], dx);
  }));
}

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.val().sum();
  return Var(make_node(std::move(out), {a.node()}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    p.grad.array() += self.grad(0, 0);
  }));
}

Var mean(const Var& a) {
  double n = static_cast<double>(a.val().size());
  Mat out(1, 1);
  out(0, 0) = a.val().sum() / n;
  return Var(make_node(std::move(out), {a.node()}, [n](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    p.grad.array() += self.grad(0, 0) / n;
  }));
}

Var rowwise_sum(const Var& a) {
  Mat out = a.val().rowwise().sum();
  return Var(make_node(std::move(out), {a.node()}, [](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    p.grad.colwise() += self.grad.col(0);
  }));
}

Var sum_cols_subset(const Var& a, const std::vector<int>& cols) {
  Mat out = Mat::Zero(a.rows(), 1);
  for (int c : cols) {
    require(c >= 0 && c < a.cols(), "sum_cols_subset: column out of range");
    out.col(0) += a.val().col(c);
  }
  return Var(make_node(std::move(out), {a.node()}, [cols](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (int c : cols) p.grad.col(c) += self.grad.col(0);
  }));
}

Var gather_rows(const Var& m, const std::vector<int>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < m.rows(), "gather_rows: row out of range");
    out.row(static_cast<Eigen::Index>(i)) = m.val().row(rows[i]);
  }
  return Var(make_node(std::move(out), {m.node()}, [rows](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      p.grad.row(rows[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  }));
}

Var slice_cols(const Var& m, Eigen::Index start, Eigen::Index n) {
  require(start >= 0 && start + n <= m.cols(), "slice_cols: out of range");
  Mat out = m.val().middleCols(start, n);
  return Var(make_node(std::move(out), {m.node()}, [start, n](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    p.grad.middleCols(start, n) += self.grad;
  }));
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: empty");
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    parents.push_back(p.node());
  }
  Mat out(rows, cols);
  Eigen::Index off = 0;
  std::vector<Eigen::Index> offs, widths;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.val();
    offs.push_back(off);
    widths.push_back(p.cols());
    off += p.cols();
  }
  return Var(make_node(std::move(out), std::move(parents), [offs, widths](Node& self) {
    for (std::size_t i = 0; i < offs.size(); ++i)
      accum(*self.parents[i], self.grad.middleCols(offs[i], widths[i]));
  }));
}

Var gather_entries(const Var& m, const std::vector<int>& rows, const std::vector<int>& cols) {
  require(rows.size() == cols.size(), "gather_entries: index size mismatch");
  Mat out(static_cast<Eigen::Index>(rows.size()), 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < m.rows() && cols[i] >= 0 && cols[i] < m.cols(),
            "gather_entries: index out of range");
    out(static_cast<Eigen::Index>(i), 0) = m.val()(rows[i], cols[i]);
  }
  return Var(make_node(std::move(out), {m.node()}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    p.ensure_grad();
    for (std::size_t i = 0; i < rows.size(); ++i)
      p.grad(rows[i], cols[i]) += self.grad(static_cast<Eigen::Index>(i), 0);
  }));
}

Var rmsnorm_rows(const Var& x, const Var& gain, double eps) {
  require(gain.rows() == 1 && gain.cols() == x.cols(), "rmsnorm_rows: gain shape");
  Eigen::Index T = x.rows(), C = x.cols();
  Vec r(T);
  for (Eigen::Index i = 0; i < T; ++i)
    r(i) = 1.0 / std::sqrt(x.val().row(i).squaredNorm() / static_cast<double>(C) + eps);
  Mat out = ((x.val().array().colwise() * r.array()).rowwise() * gain.val().row(0).array()).matrix();
  return Var(make_node(std::move(out), {x.node(), gain.node()}, [r, eps](Node& self) {
    const Mat& xv = self.parents[0]->val;
    const Eigen::RowVectorXd g = self.parents[1]->val.row(0);
    Eigen::Index T = xv.rows(), C = xv.cols();
    Mat dx(T, C);
    Eigen::RowVectorXd dg = Eigen::RowVectorXd::Zero(C);
    for (Eigen::Index i = 0; i < T; ++i) {
      Eigen::RowVectorXd ug = self.grad.row(i).cwiseProduct(g);
      double inner = ug.cwiseProduct(xv.row(i)).sum();
      dx.row(i) = r(i) * (ug - (r(i) * r(i) / static_cast<double>(C)) * inner * xv.row(i));
      dg += self.grad.row(i).cwiseProduct(xv.row(i)) * r(i);
    }
    accum(*self.parents[0], dx);
    accum(*self.parents[1], dg);
  }));
}

Var dropout(const Var& a, double rate, Rng& rng) {
  require(rate >= 0.0 && rate < 1.0, "dropout: rate out of range");
  if (rate == 0.0) return a;
  std::bernoulli_distribution keep(1.0 - rate);
  Mat mask(a.rows(), a.cols());
  double inv = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) mask(i, j) = keep(rng) ? inv : 0.0;
  return Var(make_node(a.val().cwiseProduct(mask), {a.node()}, [mask](Node& self) {
    accum(*self.parents[0], self.grad.cwiseProduct(mask));
  }));
}

void backward(const Var& loss) {
  require(loss.node() != nullptr, "backward: empty loss");
  require(loss.val().size() == 1, "backward: loss must be scalar");
  check_finite(loss.val(), "loss value");
  Node* root = loss.node().get();
  require(!root->backward_done, "backward: graph already consumed, rebuild before calling again");
  root->backward_done = true;
  if (!root->requires_grad) return;  // constant loss: all gradients are zero

  // Iterative post-order DFS for a reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad(0, 0) = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->backfn) continue;
    n->ensure_grad();
    if (!n->grad.allFinite()) throw Error("NaN encountered during backward");
    n->backfn(*n);
  }
}

std::map<std::string, Mat> backward_collect(const Var& loss, const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
  backward(loss);
  std::map<std::string, Mat> out;
  for (Param* p : params) out[p->name] = p->grad;
  return out;
}

Adam::Adam(std::vector<Param*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Param* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param* p = params_[i];
    if (!p->trainable) continue;
    if (p->grad.size() != p->value.size()) p->zero_grad();
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p->grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    Mat mh = m_[i] / bc1;
    Mat vh = v_[i] / bc2;
    if (lr_ != 0.0)
      p->value -= lr_ * mh.cwiseQuotient((vh.cwiseSqrt().array() + eps_).matrix());
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->zero_grad();
}

}  // namespace kif::ad

#include "mmpc/socp.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace mmpc {

const char* to_string(SolverStatus s) {
  switch (s) {
    case SolverStatus::optimal: return "optimal";
    case SolverStatus::infeasible: return "infeasible";
    case SolverStatus::unbounded: return "unbounded";
    case SolverStatus::max_iter: return "max_iter";
  }
  return "?";
}

void ConicProgram::validate() const {
  const Eigen::Index n = cost.size();
  if (n <= 0) throw std::invalid_argument("ConicProgram: empty cost");
  if (cones.empty()) {
    throw std::invalid_argument("ConicProgram: at least one cone required");
  }
  if (G_eq.rows() != h_eq.size() || (G_eq.rows() > 0 && G_eq.cols() != n)) {
    throw std::invalid_argument("ConicProgram: equality block dimensions");
  }
  for (const auto& cone : cones) {
    if (cone.A.rows() != cone.b.size() ||
        (cone.A.rows() > 0 && cone.A.cols() != n) || cone.c.size() != n) {
      throw std::invalid_argument("ConicProgram: cone dimensions");
    }
    if (!cone.b.allFinite() || !std::isfinite(cone.d)) {
      throw std::invalid_argument("ConicProgram: non-finite cone data");
    }
  }
  if (!var_groups.empty() &&
      var_groups.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("ConicProgram: var_groups size");
  }
}

namespace {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Eigen::VectorXd;

struct ConeInfo {
  int offset = 0;  // row offset into the stacked cone block
  int dim = 0;     // 1 + norm rows
  std::vector<int> support;  // sorted unique variable indices
};

// Jordan-algebra helpers on second-order cones (dim 1 degenerates to R+).

double cone_residual(const double* u, int dim) {
  double n1 = 0.0;
  for (int i = 1; i < dim; ++i) n1 += u[i] * u[i];
  return u[0] * u[0] - n1;
}

// Largest alpha >= 0 with u + alpha du in the cone; inf when unbounded.
double max_step(const double* u, const double* du, int dim) {
  const double inf = std::numeric_limits<double>::infinity();
  if (dim == 1) {
    return du[0] >= 0.0 ? inf : -u[0] / du[0];
  }
  double a = du[0] * du[0];
  double b = 2.0 * u[0] * du[0];
  double c = u[0] * u[0];
  for (int i = 1; i < dim; ++i) {
    a -= du[i] * du[i];
    b -= 2.0 * u[i] * du[i];
    c -= u[i] * u[i];
  }
  c = std::max(c, 0.0);
  double alpha = inf;
  if (std::abs(a) < 1e-300) {
    if (b < 0.0) alpha = -c / b;
  } else {
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      // numerically stable pair of roots
      const double q = -0.5 * (b + (b >= 0.0 ? sq : -sq));
      double r1 = q / a;
      double r2 = (std::abs(q) > 0.0) ? c / q : r1;
      if (r1 > r2) std::swap(r1, r2);
      if (a > 0.0) {
        if (r2 > 0.0) alpha = std::max(r1, 0.0);
        // if r2 <= 0 the negative interval lies behind us
        if (r2 <= 0.0) alpha = inf;
      } else {
        alpha = std::max(r2, 0.0);
      }
    } else if (a < 0.0) {
      alpha = 0.0;  // should not happen: f(0) >= 0 forces real roots
    }
  }
  if (du[0] < 0.0) alpha = std::min(alpha, -u[0] / du[0]);
  return alpha;
}

struct Scaling {
  // Per-cone NT scaling. For dim 1 only eta2 is used (W^2 = eta2).
  double eta2 = 1.0;          // eta^2
  VectorXd wbar;              // dim
  VectorXd lambda;            // scaled point, dim
};

// W u with W = eta [wbar0, wbar1'; wbar1, I + wbar1 wbar1'/(1+wbar0)].
void apply_w(const Scaling& sc, const double* u, double* out, int dim) {
  const double eta = std::sqrt(sc.eta2);
  if (dim == 1) {
    out[0] = eta * u[0];
    return;
  }
  const VectorXd& w = sc.wbar;
  double dot1 = 0.0;
  for (int i = 1; i < dim; ++i) dot1 += w[i] * u[i];
  out[0] = eta * (w[0] * u[0] + dot1);
  const double coef = dot1 / (1.0 + w[0]);
  for (int i = 1; i < dim; ++i) {
    out[i] = eta * (u[0] * w[i] + u[i] + coef * w[i]);
  }
}

void apply_w_inv(const Scaling& sc, const double* u, double* out, int dim) {
  const double eta = std::sqrt(sc.eta2);
  if (dim == 1) {
    out[0] = u[0] / eta;
    return;
  }
  const VectorXd& w = sc.wbar;
  double dot1 = 0.0;
  for (int i = 1; i < dim; ++i) dot1 += w[i] * u[i];
  out[0] = (w[0] * u[0] - dot1) / eta;
  const double coef = dot1 / (1.0 + w[0]);
  for (int i = 1; i < dim; ++i) {
    out[i] = (-u[0] * w[i] + u[i] + coef * w[i]) / eta;
  }
}

// W^2 u = eta^2 (2 wbar (wbar'u) - J u).
void apply_w2(const Scaling& sc, const double* u, double* out, int dim) {
  if (dim == 1) {
    out[0] = sc.eta2 * u[0];
    return;
  }
  const VectorXd& w = sc.wbar;
  double dot = 0.0;
  for (int i = 0; i < dim; ++i) dot += w[i] * u[i];
  out[0] = sc.eta2 * (2.0 * w[0] * dot - u[0]);
  for (int i = 1; i < dim; ++i) {
    out[i] = sc.eta2 * (2.0 * w[i] * dot + u[i]);
  }
}

// W^-2 u = eta^-2 (2 v (v'u) - J u), v = J wbar.
void apply_w2_inv(const Scaling& sc, const double* u, double* out, int dim) {
  if (dim == 1) {
    out[0] = u[0] / sc.eta2;
    return;
  }
  const VectorXd& w = sc.wbar;
  double dot = w[0] * u[0];
  for (int i = 1; i < dim; ++i) dot -= w[i] * u[i];
  out[0] = (2.0 * w[0] * dot - u[0]) / sc.eta2;
  for (int i = 1; i < dim; ++i) {
    out[i] = (-2.0 * w[i] * dot + u[i]) / sc.eta2;
  }
}

// u o v (Jordan product).
void jprod(const double* u, const double* v, double* out, int dim) {
  if (dim == 1) {
    out[0] = u[0] * v[0];
    return;
  }
  double dot = 0.0;
  for (int i = 0; i < dim; ++i) dot += u[i] * v[i];
  const double u0 = u[0], v0 = v[0];
  out[0] = dot;
  for (int i = 1; i < dim; ++i) out[i] = u0 * v[i] + v0 * u[i];
}

// Solve lambda o x = d.
void jsolve(const double* lam, const double* d, double* out, int dim) {
  if (dim == 1) {
    out[0] = d[0] / lam[0];
    return;
  }
  double n1 = 0.0, dot1 = 0.0;
  for (int i = 1; i < dim; ++i) {
    n1 += lam[i] * lam[i];
    dot1 += lam[i] * d[i];
  }
  const double det = lam[0] * lam[0] - n1;
  const double x0 = (lam[0] * d[0] - dot1) / det;
  out[0] = x0;
  for (int i = 1; i < dim; ++i) out[i] = (d[i] - x0 * lam[i]) / lam[0];
}

bool compute_scaling(const double* s, const double* z, Scaling& sc, int dim) {
  if (dim == 1) {
    if (s[0] <= 0.0 || z[0] <= 0.0) return false;
    sc.eta2 = s[0] / z[0];
    sc.lambda.resize(1);
    sc.lambda[0] = std::sqrt(s[0] * z[0]);
    return true;
  }
  const double res_s = cone_residual(s, dim);
  const double res_z = cone_residual(z, dim);
  if (res_s <= 0.0 || res_z <= 0.0 || s[0] <= 0.0 || z[0] <= 0.0) return false;
  const double beta_s = std::sqrt(res_s);
  const double beta_z = std::sqrt(res_z);
  double dot = 0.0;
  for (int i = 1; i < dim; ++i) dot -= s[i] * z[i];
  dot += s[0] * z[0];
  // dot = sbar' J zbar * beta_s * beta_z ... use plain inner product instead:
  double inner = 0.0;
  for (int i = 0; i < dim; ++i) inner += s[i] * z[i];
  const double gamma = std::sqrt((1.0 + inner / (beta_s * beta_z)) / 2.0);
  sc.eta2 = beta_s / beta_z;
  sc.wbar.resize(dim);
  sc.wbar[0] = (s[0] / beta_s + z[0] / beta_z) / (2.0 * gamma);
  for (int i = 1; i < dim; ++i) {
    sc.wbar[i] = (s[i] / beta_s - z[i] / beta_z) / (2.0 * gamma);
  }
  sc.lambda.resize(dim);
  apply_w(sc, z, sc.lambda.data(), dim);
  return true;
}

// Block-arrow (or dense) Cholesky of the Schur matrix S.
class SchurSolver {
 public:
  // boundaries: group start offsets in permuted coordinates; group 0 (shared)
  // spans [0, boundaries[0]), group g spans [boundaries[g-1], boundaries[g]).
  void init(int n, std::vector<int> boundaries) {
    n_ = n;
    bounds_ = std::move(boundaries);
    S_.resize(n, n);
  }

  Eigen::MatrixXd& matrix() { return S_; }

  bool factor() {
    // mirror the lower triangle (assembly fills lower only)
    S_.triangularView<Eigen::StrictlyUpper>() =
        S_.triangularView<Eigen::StrictlyLower>().transpose();
    if (bounds_.empty()) {
      llt_dense_.compute(S_);
      return llt_dense_.info() == Eigen::Success;
    }
    const int n0 = bounds_[0];
    Eigen::MatrixXd sc = S_.topLeftCorner(n0, n0);
    group_llt_.clear();
    group_x_.clear();
    for (std::size_t g = 1; g < bounds_.size(); ++g) {
      const int lo = bounds_[g - 1];
      const int ng = bounds_[g] - lo;
      if (ng == 0) {
        group_llt_.emplace_back();
        group_x_.emplace_back();
        continue;
      }
      Eigen::LLT<Eigen::MatrixXd> llt(S_.block(lo, lo, ng, ng));
      if (llt.info() != Eigen::Success) return false;
      Eigen::MatrixXd x = llt.solve(S_.block(lo, 0, ng, n0));
      sc.noalias() -= S_.block(lo, 0, ng, n0).transpose() * x;
      group_llt_.push_back(std::move(llt));
      group_x_.push_back(std::move(x));
    }
    llt_dense_.compute(sc);
    return llt_dense_.info() == Eigen::Success;
  }

  VectorXd solve(const VectorXd& rhs) const {
    if (bounds_.empty()) return llt_dense_.solve(rhs);
    const int n0 = bounds_[0];
    VectorXd r0 = rhs.head(n0);
    std::vector<VectorXd> tg(bounds_.size() - 1);
    for (std::size_t g = 1; g < bounds_.size(); ++g) {
      const int lo = bounds_[g - 1];
      const int ng = bounds_[g] - lo;
      if (ng == 0) continue;
      tg[g - 1] = group_llt_[g - 1].solve(rhs.segment(lo, ng));
      r0.noalias() -= S_.block(lo, 0, ng, n0).transpose() * tg[g - 1];
    }
    VectorXd out(n_);
    out.head(n0) = llt_dense_.solve(r0);
    for (std::size_t g = 1; g < bounds_.size(); ++g) {
      const int lo = bounds_[g - 1];
      const int ng = bounds_[g] - lo;
      if (ng == 0) continue;
      out.segment(lo, ng) = tg[g - 1] - group_x_[g - 1] * out.head(n0);
    }
    return out;
  }

 private:
  int n_ = 0;
  std::vector<int> bounds_;
  Eigen::MatrixXd S_;
  Eigen::LLT<Eigen::MatrixXd> llt_dense_;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> group_llt_;
  std::vector<Eigen::MatrixXd> group_x_;
};

struct Workspace {
  int n = 0, p = 0, m = 0;
  SpMat G;       // stacked cone rows, m x n (permuted columns)
  VectorXd h;    // m
  SpMat A;       // p x n
  VectorXd b;    // p
  VectorXd c;    // n
  std::vector<ConeInfo> cones;
  std::vector<int> perm;      // permuted index -> original index
  std::vector<int> inv_perm;  // original -> permuted
  std::vector<int> bounds;    // group boundaries, empty => dense
  double reg = 0.0;
  VectorXd col_scale;  // Ruiz equilibration, permuted column order
  VectorXd row_scale;  // cone rows, uniform within each cone
  VectorXd eq_scale;   // equality rows
};

// Permute variables so shared-group columns come first, then each group.
void build_permutation(const ConicProgram& prog, Workspace& ws) {
  const int n = static_cast<int>(prog.num_vars());
  ws.perm.resize(n);
  ws.inv_perm.resize(n);
  if (prog.var_groups.empty()) {
    std::iota(ws.perm.begin(), ws.perm.end(), 0);
    std::iota(ws.inv_perm.begin(), ws.inv_perm.end(), 0);
    ws.bounds.clear();
    return;
  }
  int max_group = 0;
  for (int g : prog.var_groups) max_group = std::max(max_group, g);
  std::vector<std::vector<int>> buckets(max_group + 1);
  for (int i = 0; i < n; ++i) buckets[prog.var_groups[i]].push_back(i);
  int pos = 0;
  ws.bounds.clear();
  for (int g = 0; g <= max_group; ++g) {
    for (int i : buckets[g]) {
      ws.perm[pos] = i;
      ws.inv_perm[i] = pos;
      ++pos;
    }
    ws.bounds.push_back(pos);
  }
  if (max_group == 0) ws.bounds.clear();  // single group: plain dense
}

void assemble(const ConicProgram& prog, const SolverSettings& settings,
              Workspace& ws) {
  ws.n = static_cast<int>(prog.num_vars());
  ws.p = static_cast<int>(prog.G_eq.rows());
  build_permutation(prog, ws);

  int m = 0;
  ws.cones.reserve(prog.cones.size());
  for (const auto& cone : prog.cones) {
    ConeInfo info;
    info.offset = m;
    info.dim = 1 + static_cast<int>(cone.A.rows());
    m += info.dim;
    ws.cones.push_back(info);
  }
  ws.m = m;

  std::vector<Eigen::Triplet<double>> trips;
  ws.h.resize(m);
  for (std::size_t ci = 0; ci < prog.cones.size(); ++ci) {
    const auto& cone = prog.cones[ci];
    const int off = ws.cones[ci].offset;
    // row 0: -c'z, rhs d
    for (Eigen::SparseVector<double>::InnerIterator it(cone.c); it; ++it) {
      trips.emplace_back(off, ws.inv_perm[it.index()], -it.value());
    }
    ws.h(off) = cone.d;
    for (int r = 0; r < cone.A.rows(); ++r) {
      for (SpMat::InnerIterator it(cone.A, r); it; ++it) {
        trips.emplace_back(off + 1 + r, ws.inv_perm[it.col()], -it.value());
      }
      ws.h(off + 1 + r) = cone.b(r);
    }
  }
  ws.G.resize(m, ws.n);
  ws.G.setFromTriplets(trips.begin(), trips.end());
  ws.G.makeCompressed();

  // per-cone variable support
  for (std::size_t ci = 0; ci < prog.cones.size(); ++ci) {
    auto& info = ws.cones[ci];
    std::vector<char> seen(ws.n, 0);
    for (int r = 0; r < info.dim; ++r) {
      for (SpMat::InnerIterator it(ws.G, info.offset + r); it; ++it) {
        if (!seen[it.col()]) {
          seen[it.col()] = 1;
          info.support.push_back(static_cast<int>(it.col()));
        }
      }
    }
    std::sort(info.support.begin(), info.support.end());
  }

  // validate block hints against actual support; fall back to dense on clash
  if (!ws.bounds.empty()) {
    const int n0 = ws.bounds[0];
    bool ok = true;
    for (std::size_t ci = 0; ci < prog.cones.size() && ok; ++ci) {
      const int g = prog.cones[ci].group;
      if (g < 0) {
        // unhinted cone must be shared-only
        for (int col : ws.cones[ci].support) {
          if (col >= n0) { ok = false; break; }
        }
        continue;
      }
      const int lo = g == 0 ? 0 : ws.bounds[g - 1];
      const int hi = g == 0 ? n0 : ws.bounds[g];
      for (int col : ws.cones[ci].support) {
        if (col >= n0 && (col < lo || col >= hi)) { ok = false; break; }
      }
    }
    if (ws.p > 0) ok = false;  // keep the equality path simple: dense only
    if (!ok) ws.bounds.clear();
  }

  trips.clear();
  for (int r = 0; r < prog.G_eq.rows(); ++r) {
    for (SpMat::InnerIterator it(prog.G_eq, r); it; ++it) {
      trips.emplace_back(r, ws.inv_perm[it.col()], it.value());
    }
  }
  ws.A.resize(ws.p, ws.n);
  ws.A.setFromTriplets(trips.begin(), trips.end());
  ws.b = prog.h_eq;

  ws.c.resize(ws.n);
  for (int i = 0; i < ws.n; ++i) ws.c(i) = prog.cost(ws.perm[i]);

  // Ruiz equilibration. All rows of one cone share a scale so the cone
  // geometry is preserved; equality rows scale individually.
  ws.col_scale = VectorXd::Ones(ws.n);
  ws.row_scale = VectorXd::Ones(ws.m);
  ws.eq_scale = VectorXd::Ones(ws.p);
  for (int pass = 0; pass < 10; ++pass) {
    VectorXd cmax = VectorXd::Zero(ws.n);
    std::vector<double> cone_max(ws.cones.size(), 0.0);
    VectorXd amax = VectorXd::Zero(ws.p);
    for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
      const auto& info = ws.cones[ci];
      for (int r = 0; r < info.dim; ++r) {
        const int row = info.offset + r;
        for (SpMat::InnerIterator it(ws.G, row); it; ++it) {
          const double a =
              std::abs(it.value()) * ws.row_scale(row) * ws.col_scale(it.col());
          cmax(it.col()) = std::max(cmax(it.col()), a);
          cone_max[ci] = std::max(cone_max[ci], a);
        }
      }
    }
    for (int r = 0; r < ws.p; ++r) {
      for (SpMat::InnerIterator it(ws.A, r); it; ++it) {
        const double a =
            std::abs(it.value()) * ws.eq_scale(r) * ws.col_scale(it.col());
        cmax(it.col()) = std::max(cmax(it.col()), a);
        amax(r) = std::max(amax(r), a);
      }
    }
    for (int j = 0; j < ws.n; ++j) {
      if (cmax(j) > 0.0) ws.col_scale(j) /= std::sqrt(cmax(j));
    }
    for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
      if (cone_max[ci] > 0.0) {
        const double rs = 1.0 / std::sqrt(cone_max[ci]);
        for (int r = 0; r < ws.cones[ci].dim; ++r) {
          ws.row_scale(ws.cones[ci].offset + r) *= rs;
        }
      }
    }
    for (int r = 0; r < ws.p; ++r) {
      if (amax(r) > 0.0) ws.eq_scale(r) /= std::sqrt(amax(r));
    }
  }
  for (int row = 0; row < ws.m; ++row) {
    for (SpMat::InnerIterator it(ws.G, row); it; ++it) {
      it.valueRef() *= ws.row_scale(row) * ws.col_scale(it.col());
    }
  }
  ws.h.array() *= ws.row_scale.array();
  for (int row = 0; row < ws.p; ++row) {
    for (SpMat::InnerIterator it(ws.A, row); it; ++it) {
      it.valueRef() *= ws.eq_scale(row) * ws.col_scale(it.col());
    }
  }
  if (ws.p > 0) ws.b.array() *= ws.eq_scale.array();
  ws.c.array() *= ws.col_scale.array();
  ws.reg = settings.static_reg;
}

class KktSolver {
 public:
  KktSolver(const Workspace& ws) : ws_(ws) {
    schur_.init(ws.n, ws.bounds);
  }

  // Rebuild and factor S = G' W^-2 G + reg I (and the equality Schur piece).
  bool factor(const std::vector<Scaling>& scalings) {
    Eigen::MatrixXd& S = schur_.matrix();
    S.setZero();
    VectorXd u(ws_.n);
    for (std::size_t ci = 0; ci < ws_.cones.size(); ++ci) {
      const ConeInfo& info = ws_.cones[ci];
      const Scaling& sc = scalings[ci];
      const double w2 = 1.0 / sc.eta2;
      if (info.dim == 1) {
        // W^-2 = 1/eta2 on the single row
        for (SpMat::InnerIterator it(ws_.G, info.offset); it; ++it) {
          for (SpMat::InnerIterator jt(ws_.G, info.offset); jt; ++jt) {
            if (jt.col() > it.col()) break;
            S(it.col(), jt.col()) += w2 * it.value() * jt.value();
          }
        }
        continue;
      }
      // row outer products with J signs: -row0, +rest
      for (int r = 0; r < info.dim; ++r) {
        const double sign = (r == 0) ? -w2 : w2;
        for (SpMat::InnerIterator it(ws_.G, info.offset + r); it; ++it) {
          for (SpMat::InnerIterator jt(ws_.G, info.offset + r); jt; ++jt) {
            if (jt.col() > it.col()) break;
            S(it.col(), jt.col()) += sign * it.value() * jt.value();
          }
        }
      }
      // +2 w2 (G_c' v)(G_c' v)', v = J wbar
      for (int col : info.support) u(col) = 0.0;
      for (int r = 0; r < info.dim; ++r) {
        const double vr = (r == 0) ? sc.wbar[0] : -sc.wbar[r];
        for (SpMat::InnerIterator it(ws_.G, info.offset + r); it; ++it) {
          u(it.col()) += vr * it.value();
        }
      }
      const double two_w2 = 2.0 * w2;
      for (std::size_t a = 0; a < info.support.size(); ++a) {
        const int ia = info.support[a];
        const double ua = u(ia);
        if (ua == 0.0) continue;
        for (std::size_t bidx = 0; bidx <= a; ++bidx) {
          const int ib = info.support[bidx];
          S(ia, ib) += two_w2 * ua * u(ib);
        }
      }
    }
    const double scale = std::max(1.0, S.diagonal().cwiseAbs().maxCoeff());
    S.diagonal().array() += ws_.reg * scale;
    if (!schur_.factor()) return false;
    if (ws_.p > 0) {
      Eigen::MatrixXd At = Eigen::MatrixXd(ws_.A).transpose();
      sa_ = Eigen::MatrixXd(ws_.n, ws_.p);
      for (int j = 0; j < ws_.p; ++j) sa_.col(j) = schur_.solve(At.col(j));
      Eigen::MatrixXd asa = Eigen::MatrixXd(ws_.A) * sa_;
      asa.diagonal().array() += ws_.reg;
      eq_llt_.compute(asa);
      if (eq_llt_.info() != Eigen::Success) return false;
    }
    return true;
  }

  // Solve [0 A' G'; A 0 0; G 0 -W^2] [dx; dy; dz] = [d1; d2; d3] with a few
  // iterative-refinement passes to undo the static regularization and the
  // cancellation in the scaled normal equations.
  void solve(const std::vector<Scaling>& scalings, const VectorXd& d1,
             const VectorXd& d2, const VectorXd& d3, VectorXd& dx,
             VectorXd& dy, VectorXd& dz) const {
    solve_once(scalings, d1, d2, d3, dx, dy, dz);
    // Refine rows 1 and 2 only. Their residuals are computable to machine
    // precision, while the W^2 row cannot be measured without O(eps/mu)
    // noise; a correction with zero rhs in that row fixes rows 1 and 2 and
    // leaves row 3 untouched in exact arithmetic.
    const double scale = 1.0 + d1.norm() + d2.norm() + d3.norm();
    const VectorXd zero3 = VectorXd::Zero(ws_.m);
    VectorXd ex, ey, ez;
    VectorXd bx = dx, by = dy, bz = dz;
    double best_err = std::numeric_limits<double>::infinity();
    for (int pass = 0; pass < 10; ++pass) {
      VectorXd r1 = d1 - ws_.G.transpose() * dz;
      VectorXd r2;
      if (ws_.p > 0) {
        r1 -= ws_.A.transpose() * dy;
        r2 = d2 - ws_.A * dx;
      } else {
        r2.resize(0);
      }
      const double err = r1.norm() + r2.norm();
      if (err < best_err) {
        best_err = err;
        bx = dx;
        by = dy;
        bz = dz;
      } else {
        break;  // stagnated or diverging
      }
      if (err < 1e-14 * scale) break;
      solve_once(scalings, r1, r2, zero3, ex, ey, ez);
      dx += ex;
      if (ws_.p > 0) dy += ey;
      dz += ez;
    }
    dx = bx;
    dy = by;
    dz = bz;
  }

 private:
  void solve_once(const std::vector<Scaling>& scalings, const VectorXd& d1,
                  const VectorXd& d2, const VectorXd& d3, VectorXd& dx,
                  VectorXd& dy, VectorXd& dz) const {
    VectorXd w2d3(ws_.m);
    for (std::size_t ci = 0; ci < ws_.cones.size(); ++ci) {
      const ConeInfo& info = ws_.cones[ci];
      apply_w2_inv(scalings[ci], d3.data() + info.offset,
                   w2d3.data() + info.offset, info.dim);
    }
    VectorXd r = d1 + ws_.G.transpose() * w2d3;
    if (ws_.p > 0) {
      VectorXd sr = schur_.solve(r);
      dy = eq_llt_.solve(Eigen::MatrixXd(ws_.A) * sr - d2);
      dx = sr - sa_ * dy;
    } else {
      dy.resize(0);
      dx = schur_.solve(r);
    }
    VectorXd gx = ws_.G * dx - d3;
    dz.resize(ws_.m);
    for (std::size_t ci = 0; ci < ws_.cones.size(); ++ci) {
      const ConeInfo& info = ws_.cones[ci];
      apply_w2_inv(scalings[ci], gx.data() + info.offset,
                   dz.data() + info.offset, info.dim);
    }
  }

  const Workspace& ws_;
  SchurSolver schur_;
  Eigen::MatrixXd sa_;
  Eigen::LLT<Eigen::MatrixXd> eq_llt_;
};

}  // namespace

SolverResult solve(const ConicProgram& program, const SolverSettings& settings) {
  program.validate();
  Workspace ws;
  assemble(program, settings, ws);
  const int n = ws.n, p = ws.p, m = ws.m;
  const double deg = static_cast<double>(ws.cones.size()) + 1.0;

  VectorXd x = VectorXd::Zero(n), y = VectorXd::Zero(p);
  VectorXd s(m), z(m);
  double tau = 1.0, kappa = 1.0;

  std::vector<Scaling> scalings(ws.cones.size());
  KktSolver kkt(ws);

  // Initialization: least-squares style start from an identity scaling.
  {
    for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
      scalings[ci].eta2 = 1.0;
      scalings[ci].wbar = VectorXd::Zero(ws.cones[ci].dim);
      scalings[ci].wbar[0] = 1.0;
    }
    bool ok = kkt.factor(scalings);
    if (ok) {
      VectorXd dx, dy, dz;
      kkt.solve(scalings, VectorXd::Zero(n), ws.b, ws.h, dx, dy, dz);
      x = dx;
      if (p > 0) y = dy;
      VectorXd shat = ws.h - ws.G * x;
      // push into the cone interior
      double alpha = 0.0;
      for (const auto& info : ws.cones) {
        const double* u = shat.data() + info.offset;
        double viol;
        if (info.dim == 1) {
          viol = -u[0];
        } else {
          double n1 = 0.0;
          for (int i = 1; i < info.dim; ++i) n1 += u[i] * u[i];
          viol = std::sqrt(n1) - u[0];
        }
        alpha = std::max(alpha, viol);
      }
      s = shat;
      for (const auto& info : ws.cones) s(info.offset) += 1.0 + alpha;

      kkt.solve(scalings, -ws.c, VectorXd::Zero(p), VectorXd::Zero(m), dx, dy,
                dz);
      if (p > 0) y = dy;
      VectorXd zhat = dz;
      alpha = 0.0;
      for (const auto& info : ws.cones) {
        const double* u = zhat.data() + info.offset;
        double viol;
        if (info.dim == 1) {
          viol = -u[0];
        } else {
          double n1 = 0.0;
          for (int i = 1; i < info.dim; ++i) n1 += u[i] * u[i];
          viol = std::sqrt(n1) - u[0];
        }
        alpha = std::max(alpha, viol);
      }
      z = zhat;
      for (const auto& info : ws.cones) z(info.offset) += 1.0 + alpha;
    } else {
      s.setZero();
      z.setZero();
      for (const auto& info : ws.cones) {
        s(info.offset) = 1.0;
        z(info.offset) = 1.0;
      }
    }
  }

  SolverResult result;
  const double norm_c = std::max(1.0, ws.c.norm());
  const double norm_h = std::max(1.0, ws.h.norm() + ws.b.norm());

  auto finalize = [&](SolverStatus status) {
    result.status = status;
    const double t = (status == SolverStatus::optimal) ? tau : 1.0;
    result.primal.resize(n);
    for (int i = 0; i < n; ++i) {
      result.primal(ws.perm[i]) = ws.col_scale(i) * x(i) / t;
    }
    result.dual_eq = (ws.eq_scale.array() * y.array()) / t;
    result.dual_cones.clear();
    for (const auto& info : ws.cones) {
      result.dual_cones.push_back(
          (ws.row_scale.segment(info.offset, info.dim).array() *
           z.segment(info.offset, info.dim).array()) /
          t);
    }
    result.objective = ws.c.dot(x) / t;
    result.dual_objective = -(ws.h.dot(z) + ws.b.dot(y)) / t;
    result.gap = s.dot(z) / (t * t);
  };

  VectorXd dsa(m), dza_scaled(m), corr(m), tmp(m);

  // best iterate seen, restored when the iteration stalls past its floor
  double best_merit = std::numeric_limits<double>::infinity();
  VectorXd best_x = x, best_y = y, best_z = z, best_s = s;
  double best_tau = tau, best_kappa = kappa;
  double best_pres = 1.0, best_dres = 1.0;

  for (int iter = 0; iter < settings.max_iter; ++iter) {
    result.iterations = iter;
    // residuals of the homogeneous model
    VectorXd F1 = ws.A.transpose() * y + ws.G.transpose() * z + ws.c * tau;
    VectorXd F2 = ws.A * x - ws.b * tau;
    VectorXd F3 = ws.G * x + s - ws.h * tau;
    double F4 = ws.c.dot(x) + ws.b.dot(y) + ws.h.dot(z) + kappa;
    const double mu = (s.dot(z) + tau * kappa) / deg;

    // convergence checks on the de-homogenized iterate
    {
      const double pres = std::max(F3.norm(), F2.norm()) / (tau * norm_h);
      const double dres = F1.norm() / (tau * norm_c);
      const double pobj = ws.c.dot(x) / tau;
      const double dobj = -(ws.h.dot(z) + ws.b.dot(y)) / tau;
      const double gap_abs = s.dot(z) / (tau * tau);
      const double rel_gap =
          gap_abs / std::max(1.0, std::min(std::abs(pobj), std::abs(dobj)));
      result.primal_residual = pres;
      result.dual_residual = dres;
      if (std::getenv("MMPC_SOCP_TRACE")) {
        std::fprintf(stderr,
                     "it %3d tau=%9.2e kap=%9.2e mu=%9.2e pres=%9.2e "
                     "dres=%9.2e pobj=%12.5e dobj=%12.5e\n",
                     iter, tau, kappa, mu, pres, dres, pobj, dobj);
      }
      if (pres < settings.feas_tol && dres < settings.feas_tol &&
          (gap_abs < settings.gap_tol || rel_gap < settings.gap_tol)) {
        finalize(SolverStatus::optimal);
        return result;
      }
      const double merit = std::max({pres, dres, rel_gap});
      if (merit < best_merit) {
        best_merit = merit;
        best_x = x;
        best_y = y;
        best_z = z;
        best_s = s;
        best_tau = tau;
        best_kappa = kappa;
        best_pres = pres;
        best_dres = dres;
      }
      // infeasibility certificates
      const double rho = -(ws.h.dot(z) + ws.b.dot(y));
      if (rho > 0.0) {
        const double cert_res =
            (ws.A.transpose() * y + ws.G.transpose() * z).norm() / rho;
        if (cert_res * norm_h / norm_c < settings.feas_tol) {
          finalize(SolverStatus::infeasible);
          return result;
        }
      }
      if (ws.c.dot(x) < 0.0) {
        const double scale_u = -ws.c.dot(x);
        const double cert_res =
            std::max((ws.G * x + s).norm(), (ws.A * x).norm()) / scale_u;
        if (cert_res * norm_c / norm_h < settings.feas_tol) {
          finalize(SolverStatus::unbounded);
          return result;
        }
      }
    }

    // NT scaling
    bool scale_ok = true;
    for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
      const ConeInfo& info = ws.cones[ci];
      if (!compute_scaling(s.data() + info.offset, z.data() + info.offset,
                           scalings[ci], info.dim)) {
        scale_ok = false;
        break;
      }
    }
    if (!scale_ok || !kkt.factor(scalings)) break;

    // tau column: K [x2; y2; z2] = [-c; b; h]
    VectorXd x2, y2, z2;
    kkt.solve(scalings, -ws.c, ws.b, ws.h, x2, y2, z2);

    auto direction = [&](double sigma, bool corrector, const VectorXd& ds_rhs,
                         double dk_rhs, VectorXd& dx, VectorXd& dy,
                         VectorXd& dz, VectorXd& ds, double& dtau,
                         double& dkappa) {
      const double f = 1.0 - sigma;
      VectorXd e1 = -f * F1;
      VectorXd e2 = -f * F2;
      VectorXd e3 = -f * F3;
      const double e4 = -f * F4;
      // e3' = e3 - W (lambda \ ds_rhs)
      for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
        const ConeInfo& info = ws.cones[ci];
        jsolve(scalings[ci].lambda.data(), ds_rhs.data() + info.offset,
               tmp.data() + info.offset, info.dim);
        apply_w(scalings[ci], tmp.data() + info.offset,
                corr.data() + info.offset, info.dim);
      }
      VectorXd e3p = e3 - corr;
      VectorXd x1, y1, z1;
      kkt.solve(scalings, e1, e2, e3p, x1, y1, z1);
      const double num = e4 - dk_rhs / tau -
                         (ws.c.dot(x1) + ws.b.dot(y1) + ws.h.dot(z1));
      const double den =
          ws.c.dot(x2) + ws.b.dot(y2) + ws.h.dot(z2) - kappa / tau;
      dtau = num / den;
      dx = x1 + dtau * x2;
      dy = p > 0 ? VectorXd(y1 + dtau * y2) : VectorXd();
      dz = z1 + dtau * z2;
      dkappa = (dk_rhs - kappa * dtau) / tau;
      // Refine the combined direction against the homogeneous system. The
      // tau column (x2, y2, z2) grows like 1/mu near convergence, so its
      // solve error enters the direction at first order; re-solving with the
      // combined residuals makes that error second order.
      VectorXd bx = dx, by = dy, bz = dz;
      double btau = dtau, bkappa = dkappa;
      double best_err = std::numeric_limits<double>::infinity();
      for (int pass = 0; pass < 10; ++pass) {
        VectorXd R1 = e1 - ws.G.transpose() * dz - ws.c * dtau;
        VectorXd R2;
        if (p > 0) {
          R1 -= ws.A.transpose() * dy;
          R2 = e2 - ws.A * dx + ws.b * dtau;
        } else {
          R2.resize(0);
        }
        const double R4 =
            e4 - (ws.c.dot(dx) + ws.b.dot(dy) + ws.h.dot(dz) + dkappa);
        const double err = R1.norm() + R2.norm() + std::abs(R4);
        if (err < best_err) {
          best_err = err;
          bx = dx;
          by = dy;
          bz = dz;
          btau = dtau;
          bkappa = dkappa;
        } else {
          break;
        }
        if (err < 1e-12 * (1.0 + e1.norm())) break;
        VectorXd cx, cy, cz;
        kkt.solve(scalings, R1, R2, VectorXd::Zero(m), cx, cy, cz);
        const double dt2 =
            (R4 - (ws.c.dot(cx) + ws.b.dot(cy) + ws.h.dot(cz))) / den;
        dx += cx + dt2 * x2;
        if (p > 0) dy += cy + dt2 * y2;
        dz += cz + dt2 * z2;
        dtau += dt2;
        dkappa += -kappa * dt2 / tau;
      }
      dx = bx;
      dy = by;
      dz = bz;
      dtau = btau;
      dkappa = bkappa;
      ds = e3 + ws.h * dtau - ws.G * dx;
      (void)corrector;
    };

    auto step_length = [&](const VectorXd& ds, const VectorXd& dz, double dtau,
                           double dkappa) {
      double alpha = std::numeric_limits<double>::infinity();
      for (const auto& info : ws.cones) {
        alpha = std::min(alpha, max_step(s.data() + info.offset,
                                         ds.data() + info.offset, info.dim));
        alpha = std::min(alpha, max_step(z.data() + info.offset,
                                         dz.data() + info.offset, info.dim));
      }
      if (dtau < 0.0) alpha = std::min(alpha, -tau / dtau);
      if (dkappa < 0.0) alpha = std::min(alpha, -kappa / dkappa);
      return alpha;
    };

    // affine (predictor) direction: ds_rhs = -lambda o lambda, dk = -tau*kappa
    VectorXd ds_rhs(m);
    for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
      const ConeInfo& info = ws.cones[ci];
      jprod(scalings[ci].lambda.data(), scalings[ci].lambda.data(),
            ds_rhs.data() + info.offset, info.dim);
    }
    ds_rhs = -ds_rhs;
    VectorXd dxa, dya, dza, dsa_v;
    double dtaua, dkappaa;
    direction(0.0, false, ds_rhs, -tau * kappa, dxa, dya, dza, dsa_v, dtaua,
              dkappaa);
    double alpha_aff = std::min(1.0, step_length(dsa_v, dza, dtaua, dkappaa));
    const double mu_aff =
        ((s + alpha_aff * dsa_v).dot(z + alpha_aff * dza) +
         (tau + alpha_aff * dtaua) * (kappa + alpha_aff * dkappaa)) /
        deg;
    double sigma = std::pow(std::max(0.0, mu_aff / mu), 3.0);
    sigma = std::min(1.0, sigma);

    // corrector: ds_rhs = sigma mu e - lambda o lambda
    //                     - (W^-1 dsa) o (W dza)
    for (std::size_t ci = 0; ci < ws.cones.size(); ++ci) {
      const ConeInfo& info = ws.cones[ci];
      apply_w_inv(scalings[ci], dsa_v.data() + info.offset,
                  dsa.data() + info.offset, info.dim);
      apply_w(scalings[ci], dza.data() + info.offset,
              dza_scaled.data() + info.offset, info.dim);
      jprod(dsa.data() + info.offset, dza_scaled.data() + info.offset,
            tmp.data() + info.offset, info.dim);
      jprod(scalings[ci].lambda.data(), scalings[ci].lambda.data(),
            corr.data() + info.offset, info.dim);
      for (int r = 0; r < info.dim; ++r) {
        const int i = info.offset + r;
        ds_rhs(i) = -corr(i) - tmp(i);
      }
      ds_rhs(info.offset) += sigma * mu;
    }
    const double dk_rhs = sigma * mu - tau * kappa - dtaua * dkappaa;

    VectorXd dx, dy, dz_v, ds_v;
    double dtau, dkappa;
    direction(sigma, true, ds_rhs, dk_rhs, dx, dy, dz_v, ds_v, dtau, dkappa);
    double alpha = std::min(1.0, 0.99 * step_length(ds_v, dz_v, dtau, dkappa));
    if (!(alpha > 1e-12)) break;

    x += alpha * dx;
    if (p > 0) y += alpha * dy;
    z += alpha * dz_v;
    s += alpha * ds_v;
    tau += alpha * dtau;
    kappa += alpha * dkappa;
    if (!(tau > 1e-14)) break;
  }

  // evaluate the final, never-checked iterate before falling back to the best
  {
    const double pres = std::max((ws.G * x + s - ws.h * tau).norm(),
                                 (ws.A * x - ws.b * tau).norm()) /
                        (tau * norm_h);
    const double dres =
        (ws.A.transpose() * y + ws.G.transpose() * z + ws.c * tau).norm() /
        (tau * norm_c);
    const double pobj = ws.c.dot(x) / tau;
    const double dobj = -(ws.h.dot(z) + ws.b.dot(y)) / tau;
    const double gap_abs = s.dot(z) / (tau * tau);
    const double rel_gap =
        gap_abs / std::max(1.0, std::min(std::abs(pobj), std::abs(dobj)));
    const double merit = std::max({pres, dres, rel_gap});
    if (merit < best_merit) {
      best_merit = merit;
      best_x = x;
      best_y = y;
      best_z = z;
      best_s = s;
      best_tau = tau;
      best_kappa = kappa;
      best_pres = pres;
      best_dres = dres;
    }
  }
  x = best_x;
  y = best_y;
  z = best_z;
  s = best_s;
  tau = best_tau;
  kappa = best_kappa;
  result.primal_residual = best_pres;
  result.dual_residual = best_dres;
  {
    const double gap_abs = s.dot(z) / (tau * tau);
    const double pobj = ws.c.dot(x) / tau;
    const double dobj = -(ws.h.dot(z) + ws.b.dot(y)) / tau;
    const double rel_gap =
        gap_abs / std::max(1.0, std::min(std::abs(pobj), std::abs(dobj)));
    if (best_pres < settings.feas_tol && best_dres < settings.feas_tol &&
        (gap_abs < settings.gap_tol || rel_gap < settings.gap_tol)) {
      finalize(SolverStatus::optimal);
      return result;
    }
  }
  finalize(SolverStatus::max_iter);
  return result;
}

Residuals residuals(const ConicProgram& program, const SolverResult& result) {
  program.validate();
  Residuals res;
  const VectorXd& zv = result.primal;
  VectorXd stat = program.cost;
  if (program.G_eq.rows() > 0) {
    stat += program.G_eq.transpose() * result.dual_eq;
    res.primal = std::max(res.primal, (program.G_eq * zv - program.h_eq).norm());
  }
  for (std::size_t ci = 0; ci < program.cones.size(); ++ci) {
    const auto& cone = program.cones[ci];
    const VectorXd& dual = result.dual_cones[ci];
    const double slack0 = cone.c.dot(zv) + cone.d;
    VectorXd slack1 = cone.A * zv + cone.b;
    res.primal = std::max(res.primal, slack1.norm() - slack0);
    // stationarity: cost - sum_i (c_i dual0 + A_i' dual1)
    for (Eigen::SparseVector<double>::InnerIterator it(cone.c); it; ++it) {
      stat(it.index()) -= dual(0) * it.value();
    }
    if (cone.A.rows() > 0) {
      stat -= cone.A.transpose() * dual.tail(cone.A.rows());
    }
    res.gap += slack0 * dual(0) + slack1.dot(dual.tail(slack1.size()));
  }
  res.primal = std::max(res.primal, 0.0);
  res.dual = stat.norm();
  res.gap = std::abs(res.gap);
  return res;
}

std::string program_to_json(const ConicProgram& program) {
  nlohmann::json root;
  root["n"] = program.num_vars();
  root["cost"] = std::vector<double>(program.cost.data(),
                                     program.cost.data() + program.cost.size());
  auto sparse_rows = [](const SpMat& mat) {
    nlohmann::json rows = nlohmann::json::array();
    for (int r = 0; r < mat.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (SpMat::InnerIterator it(mat, r); it; ++it) {
        row.push_back({it.col(), it.value()});
      }
      rows.push_back(std::move(row));
    }
    return rows;
  };
  root["eq"]["G"] = sparse_rows(program.G_eq);
  root["eq"]["h"] = std::vector<double>(
      program.h_eq.data(), program.h_eq.data() + program.h_eq.size());
  for (const auto& cone : program.cones) {
    nlohmann::json c;
    c["A"] = sparse_rows(cone.A);
    c["b"] = std::vector<double>(cone.b.data(), cone.b.data() + cone.b.size());
    nlohmann::json cvec = nlohmann::json::array();
    for (Eigen::SparseVector<double>::InnerIterator it(cone.c); it; ++it) {
      cvec.push_back({it.index(), it.value()});
    }
    c["c"] = std::move(cvec);
    c["d"] = cone.d;
    c["group"] = cone.group;
    root["cones"].push_back(std::move(c));
  }
  root["var_groups"] = program.var_groups;
  root["var_names"] = program.var_names;
  return root.dump();
}

ConicProgram program_from_json(const std::string& text) {
  nlohmann::json root = nlohmann::json::parse(text);
  ConicProgram prog;
  const int n = root.at("n").get<int>();
  auto cost = root.at("cost").get<std::vector<double>>();
  prog.cost = Eigen::Map<const VectorXd>(cost.data(), cost.size());
  auto parse_rows = [n](const nlohmann::json& rows) {
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (const auto& entry : rows[r]) {
        trips.emplace_back(static_cast<int>(r), entry[0].get<int>(),
                           entry[1].get<double>());
      }
    }
    SpMat mat(static_cast<int>(rows.size()), n);
    mat.setFromTriplets(trips.begin(), trips.end());
    return mat;
  };
  prog.G_eq = parse_rows(root.at("eq").at("G"));
  auto heq = root.at("eq").at("h").get<std::vector<double>>();
  prog.h_eq = Eigen::Map<const VectorXd>(heq.data(), heq.size());
  for (const auto& c : root.at("cones")) {
    SocConstraint cone;
    cone.A = parse_rows(c.at("A"));
    auto b = c.at("b").get<std::vector<double>>();
    cone.b = Eigen::Map<const VectorXd>(b.data(), b.size());
    cone.c.resize(n);
    for (const auto& entry : c.at("c")) {
      cone.c.coeffRef(entry[0].get<int>()) = entry[1].get<double>();
    }
    cone.d = c.at("d").get<double>();
    cone.group = c.value("group", -1);
    prog.cones.push_back(std::move(cone));
  }
  prog.var_groups = root.value("var_groups", std::vector<int>{});
  prog.var_names = root.value("var_names", std::vector<std::string>{});
  return prog;
}

void save_program(const ConicProgram& program, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << program_to_json(program);
}

ConicProgram load_program(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return program_from_json(text);
}

}  // namespace mmpc

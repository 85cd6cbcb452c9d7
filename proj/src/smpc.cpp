#include "mmpc/smpc.hpp"

#include <cmath>
#include <stdexcept>

#include "mmpc/stats.hpp"

namespace mmpc {

void SmpcConfig::validate() const {
  if (horizon < 1) throw std::invalid_argument("SmpcConfig: horizon < 1");
  if (!(risk > 0.0 && risk < 0.5)) {
    throw std::invalid_argument("SmpcConfig: risk must lie in (0, 1/2)");
  }
  if (num_modes < 1) throw std::invalid_argument("SmpcConfig: num_modes < 1");
  Eigen::LLT<Eigen::Matrix4d> lq(state_weight);
  Eigen::LLT<Eigen::Matrix2d> lr(input_weight);
  if (lq.info() != Eigen::Success || lr.info() != Eigen::Success) {
    throw std::invalid_argument("SmpcConfig: Q and R must be positive definite");
  }
  vehicle.validate();
  geometry.validate();
}

// ---------------------------------------------------------------------------
// layout

namespace {
// h(2) + M(8k) + K(4). The k = 0 block carries no K: o_0 = o_t is known at
// solve time, so feedback on it is indistinguishable from h_0 and would only
// add a degenerate direction to the program.
int step_block_size(int k) { return k == 0 ? 2 : 6 + 8 * k; }
}  // namespace

int PolicyLayout::aux_index(int j) const {
  if (variant != SmpcVariant::policy) {
    throw std::logic_error("aux_index: open_loop layout has no slack");
  }
  return 1 + j;
}

int PolicyLayout::block_offset(int j, int k) const {
  if (variant != SmpcVariant::policy) {
    throw std::logic_error("block_offset: policy layout only");
  }
  const int shared_start = 1 + num_modes;
  auto span = [](int lo, int hi) {  // sum of block sizes over [lo, hi)
    int s = 0;
    for (int l = lo; l < hi; ++l) s += step_block_size(l);
    return s;
  };
  if (k < k_bar_eff) return shared_start + span(0, k);
  const int shared_size = span(0, k_bar_eff);
  const int suffix_size = span(k_bar_eff, horizon);
  return shared_start + shared_size + j * suffix_size + span(k_bar_eff, k);
}

int PolicyLayout::h_index(int j, int k) const {
  if (variant == SmpcVariant::open_loop) return 1 + 2 * k;
  return block_offset(j, k);
}

int PolicyLayout::m_index(int j, int l, int k) const {
  return block_offset(j, k) + 2 + 8 * l;
}

int PolicyLayout::k_index(int j, int k) const {
  if (k == 0) throw std::logic_error("k_index: step 0 has no feedback block");
  return block_offset(j, k) + 2 + 8 * k;
}

int PolicyLayout::num_vars() const {
  if (variant == SmpcVariant::open_loop) return 1 + 2 * horizon;
  int shared = 0, suffix = 0;
  for (int k = 0; k < k_bar_eff; ++k) shared += step_block_size(k);
  for (int k = k_bar_eff; k < horizon; ++k) suffix += step_block_size(k);
  return 1 + num_modes + shared + num_modes * suffix;
}

int PolicyLayout::group_of_step(int j, int k) const {
  if (variant == SmpcVariant::open_loop) return 0;
  if (k_bar_eff >= horizon || num_modes < 2) return 0;
  return k < k_bar_eff ? 0 : j + 1;
}

std::vector<int> PolicyLayout::var_groups() const {
  if (variant == SmpcVariant::open_loop || k_bar_eff >= horizon ||
      num_modes < 2) {
    return {};
  }
  std::vector<int> groups(num_vars(), 0);
  for (int j = 0; j < num_modes; ++j) {
    for (int k = k_bar_eff; k < horizon; ++k) {
      const int off = block_offset(j, k);
      for (int i = 0; i < step_block_size(k); ++i) groups[off + i] = j + 1;
    }
  }
  return groups;
}

std::vector<std::string> PolicyLayout::var_names() const {
  std::vector<std::string> names(num_vars());
  names[0] = "s";
  if (variant == SmpcVariant::open_loop) {
    for (int k = 0; k < horizon; ++k) {
      names[1 + 2 * k] = "h[" + std::to_string(k) + "][0]";
      names[2 + 2 * k] = "h[" + std::to_string(k) + "][1]";
    }
    return names;
  }
  for (int j = 0; j < num_modes; ++j) {
    names[aux_index(j)] = "s_" + std::to_string(j);
  }
  for (int j = 0; j < num_modes; ++j) {
    for (int k = 0; k < horizon; ++k) {
      if (k < k_bar_eff && j > 0) continue;  // shared block named once
      const std::string tag =
          k < k_bar_eff ? std::to_string(k) : std::to_string(j) + "," +
                                                  std::to_string(k);
      for (int i = 0; i < 2; ++i) {
        names[h_index(j, k) + i] = "h[" + tag + "][" + std::to_string(i) + "]";
      }
      for (int l = 0; l < k; ++l) {
        for (int i = 0; i < 8; ++i) {
          names[m_index(j, l, k) + i] = "M[" + tag + "," + std::to_string(l) +
                                        "][" + std::to_string(i) + "]";
        }
      }
      if (k > 0) {
        for (int i = 0; i < 4; ++i) {
          names[k_index(j, k) + i] =
              "K[" + tag + "][" + std::to_string(i) + "]";
        }
      }
    }
  }
  return names;
}

// ---------------------------------------------------------------------------
// stacked matrices

StackedEvMatrices stack_ev_matrices(const LtvModel& ltv,
                                    const SmpcConfig& config) {
  const int N = config.horizon;
  if (static_cast<int>(ltv.horizon()) != N) {
    throw std::invalid_argument("stack_ev_matrices: horizon mismatch");
  }
  StackedEvMatrices ev;
  ev.A_stack = Eigen::MatrixXd::Zero(4 * (N + 1), 4);
  ev.B_stack = Eigen::MatrixXd::Zero(4 * (N + 1), 2 * N);
  ev.E_stack = Eigen::MatrixXd::Zero(4 * (N + 1), 4 * N);
  ev.A_stack.topRows<4>() = Eigen::Matrix4d::Identity();
  for (int k = 1; k <= N; ++k) {
    const Eigen::Matrix4d& Ak = ltv.A_seq[k - 1];
    ev.A_stack.block<4, 4>(4 * k, 0) = Ak * ev.A_stack.block<4, 4>(4 * (k - 1), 0);
    ev.B_stack.middleRows<4>(4 * k) = Ak * ev.B_stack.middleRows<4>(4 * (k - 1));
    ev.B_stack.block<4, 2>(4 * k, 2 * (k - 1)) = ltv.B_seq[k - 1];
    ev.E_stack.middleRows<4>(4 * k) = Ak * ev.E_stack.middleRows<4>(4 * (k - 1));
    ev.E_stack.block<4, 4>(4 * k, 4 * (k - 1)) = Eigen::Matrix4d::Identity();
  }
  ev.sigma_w_stack = Eigen::MatrixXd::Zero(4 * N, 4 * N);
  ev.Q_stack = Eigen::MatrixXd::Zero(4 * (N + 1), 4 * (N + 1));
  ev.R_stack = Eigen::MatrixXd::Zero(2 * N, 2 * N);
  for (int k = 0; k < N; ++k) {
    ev.sigma_w_stack.block<4, 4>(4 * k, 4 * k) = config.sigma_w;
    ev.R_stack.block<2, 2>(2 * k, 2 * k) = config.input_weight;
  }
  for (int k = 0; k <= N; ++k) {
    ev.Q_stack.block<4, 4>(4 * k, 4 * k) = config.state_weight;
  }
  return ev;
}

std::vector<StackedTvMatrices> stack_tv_matrices(
    const ConditionalTvDynamics& dyn) {
  const int J = static_cast<int>(dyn.num_modes());
  const int N = static_cast<int>(dyn.horizon());
  std::vector<StackedTvMatrices> out(J);
  for (int j = 0; j < J; ++j) {
    StackedTvMatrices& tv = out[j];
    tv.T_stack = Eigen::MatrixXd::Zero(2 * (N + 1), 2);
    tv.C_stack = Eigen::VectorXd::Zero(2 * (N + 1));
    tv.L_stack = Eigen::MatrixXd::Zero(2 * (N + 1), 2 * N);
    tv.T_stack.topRows<2>() = Eigen::Matrix2d::Identity();
    for (int k = 1; k <= N; ++k) {
      const Eigen::Matrix2d& Tk = dyn.transition[j][k - 1];
      tv.T_stack.middleRows<2>(2 * k) = Tk * tv.T_stack.middleRows<2>(2 * (k - 1));
      tv.C_stack.segment<2>(2 * k) =
          Tk * tv.C_stack.segment<2>(2 * (k - 1)) + dyn.offset[j][k - 1];
      tv.L_stack.middleRows<2>(2 * k) = Tk * tv.L_stack.middleRows<2>(2 * (k - 1));
      tv.L_stack.block<2, 2>(2 * k, 2 * (k - 1)) = Eigen::Matrix2d::Identity();
    }
    tv.sigma_n_stack = Eigen::MatrixXd::Zero(2 * N, 2 * N);
    for (int k = 0; k < N; ++k) {
      tv.sigma_n_stack.block<2, 2>(2 * k, 2 * k) = dyn.step_cov[j][k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// constraint assembly helpers

namespace {

using Triplet = Eigen::Triplet<double>;

struct ConeBuf {
  std::vector<std::vector<std::pair<int, double>>> rows;
  std::vector<double> consts;
  std::vector<std::pair<int, double>> c_entries;
  double d = 0.0;
  int group = -1;

  std::vector<std::pair<int, double>>& new_row() {
    rows.emplace_back();
    consts.push_back(0.0);
    return rows.back();
  }
};

// Scales the norm side by gamma, drops structurally empty rows, and folds a
// fully constant norm into the linear bound.
SocConstraint finalize_cone(ConeBuf& buf, double gamma, int num_vars) {
  SocConstraint cone;
  cone.group = buf.group;
  std::vector<int> keep;
  bool any_coeff = false;
  for (std::size_t r = 0; r < buf.rows.size(); ++r) {
    if (!buf.rows[r].empty() || buf.consts[r] != 0.0) keep.push_back(r);
    if (!buf.rows[r].empty()) any_coeff = true;
  }
  cone.c.resize(num_vars);
  for (const auto& [idx, val] : buf.c_entries) cone.c.coeffRef(idx) += val;
  cone.d = buf.d;
  if (!any_coeff) {
    double norm2 = 0.0;
    for (int r : keep) norm2 += buf.consts[r] * buf.consts[r];
    cone.A.resize(0, num_vars);
    cone.b.resize(0);
    cone.d -= gamma * std::sqrt(norm2);
    return cone;
  }
  std::vector<Triplet> trips;
  cone.b.resize(static_cast<int>(keep.size()));
  for (std::size_t r = 0; r < keep.size(); ++r) {
    for (const auto& [idx, val] : buf.rows[keep[r]]) {
      trips.emplace_back(static_cast<int>(r), idx, gamma * val);
    }
    cone.b(r) = gamma * buf.consts[keep[r]];
  }
  cone.A.resize(static_cast<int>(keep.size()), num_vars);
  cone.A.setFromTriplets(trips.begin(), trips.end());
  cone.A.makeCompressed();
  return cone;
}

struct ModeData {
  Eigen::VectorXd q;                       // o-chain head, 2N
  std::vector<Eigen::Matrix2d> sn_half;    // per step
  // Z[l][m] = Lu(l, m) * sn_half[m], valid for m < l
  std::vector<std::vector<Eigen::Matrix2d>> Z;
};

ModeData mode_data(const StackedTvMatrices& tv, const Eigen::Vector2d& o_t,
                   int N) {
  ModeData md;
  md.q = tv.T_stack.topRows(2 * N) * o_t + tv.C_stack.head(2 * N);
  md.sn_half.resize(N);
  for (int m = 0; m < N; ++m) {
    md.sn_half[m] = sqrt_psd_2x2(tv.sigma_n_stack.block<2, 2>(2 * m, 2 * m));
  }
  md.Z.assign(N, std::vector<Eigen::Matrix2d>(N, Eigen::Matrix2d::Zero()));
  for (int l = 1; l < N; ++l) {
    for (int m = 0; m < l; ++m) {
      md.Z[l][m] = tv.L_stack.block<2, 2>(2 * l, 2 * m) * md.sn_half[m];
    }
  }
  return md;
}

// Appends the noise rows of a constraint whose stacked-state row restricted to
// inputs is ab[l] (1x2, l = 0..last_input) and whose process-noise row is
// ae[m] (1x4, m = 0..last_input). Policy variant only.
void add_policy_noise_rows(ConeBuf& buf, const PolicyLayout& layout, int j,
                           const std::vector<Eigen::RowVector2d>& ab,
                           const std::vector<Eigen::RowVector4d>& ae,
                           const Eigen::Matrix4d& sw_half, const ModeData& md,
                           const std::vector<Eigen::RowVector2d>& extra_n) {
  const int last = static_cast<int>(ab.size()) - 1;  // highest input index
  // w_m rows: constant ae[m] sw_half plus M_{m,l} coefficients
  for (int m = 0; m <= last; ++m) {
    for (int col = 0; col < 4; ++col) {
      auto& row = buf.new_row();
      if (m < static_cast<int>(ae.size())) {
        buf.consts.back() = ae[m].dot(sw_half.col(col));
      }
      for (int l = m + 1; l <= last; ++l) {
        for (int i = 0; i < 2; ++i) {
          for (int c = 0; c < 4; ++c) {
            const double v = ab[l](i) * sw_half(c, col);
            if (v != 0.0) {
              row.emplace_back(layout.m_index(j, m, l) + 4 * i + c, v);
            }
          }
        }
      }
    }
  }
  // n_m rows: K_l coefficients plus an optional constant head term
  for (int m = 0; m <= last; ++m) {
    for (int col = 0; col < 2; ++col) {
      auto& row = buf.new_row();
      if (m < static_cast<int>(extra_n.size())) {
        buf.consts.back() = extra_n[m](col);
      }
      for (int l = m + 1; l <= last; ++l) {
        for (int i = 0; i < 2; ++i) {
          for (int c = 0; c < 2; ++c) {
            const double v = ab[l](i) * md.Z[l][m](c, col);
            if (v != 0.0) {
              row.emplace_back(layout.k_index(j, l) + 2 * i + c, v);
            }
          }
        }
      }
    }
  }
}

// Mean contribution of the input channel: sum_l ab[l] (h_l + K_l q_l), as
// entries of the linear side with the given sign.
void add_mean_entries(ConeBuf& buf, const PolicyLayout& layout, int j,
                      const std::vector<Eigen::RowVector2d>& ab,
                      const ModeData* md, double sign) {
  for (std::size_t l = 0; l < ab.size(); ++l) {
    for (int i = 0; i < 2; ++i) {
      if (ab[l](i) != 0.0) {
        buf.c_entries.emplace_back(layout.h_index(j, static_cast<int>(l)) + i,
                                   sign * ab[l](i));
      }
    }
    if (layout.variant == SmpcVariant::policy && md != nullptr && l > 0) {
      const Eigen::Vector2d ql = md->q.segment<2>(2 * l);
      for (int i = 0; i < 2; ++i) {
        for (int c = 0; c < 2; ++c) {
          const double v = ab[l](i) * ql(c);
          if (v != 0.0) {
            buf.c_entries.emplace_back(
                layout.k_index(j, static_cast<int>(l)) + 2 * i + c, sign * v);
          }
        }
      }
    }
  }
}

}  // namespace

std::vector<SocConstraint> soc_state_input_constraints(
    const StackedEvMatrices& ev, const std::vector<StackedTvMatrices>& tv,
    const PolicyLayout& layout, const EvConstraintSets& sets,
    const Eigen::Vector4d& dx0, const Eigen::Vector2d& o_t,
    const SmpcConfig& config) {
  config.validate();
  const int N = config.horizon;
  const int J = static_cast<int>(tv.size());
  const int n = layout.num_vars();
  const bool policy = layout.variant == SmpcVariant::policy;
  const Eigen::Matrix4d sw_half = sqrt_psd(config.sigma_w);

  std::vector<ModeData> md;
  md.reserve(J);
  for (const auto& t : tv) md.push_back(mode_data(t, o_t, N));

  std::vector<SocConstraint> out;
  for (int j = 0; j < J; ++j) {
    for (int k = 0; k < N; ++k) {
      const auto& st = sets.state[k];
      const auto& in = sets.input[k];
      double eps = config.risk;
      if (config.allocation == RiskAllocation::union_bound) {
        eps /= static_cast<double>(st.F.rows() + in.F.rows());
      }
      const double gamma = norm_inv(1.0 - eps);
      const int group = layout.group_of_step(j, k);

      // state rows act on dx_{k+1}
      for (int f = 0; f < st.F.rows(); ++f) {
        const Eigen::RowVector4d a = st.F.row(f);
        ConeBuf buf;
        buf.group = group;
        std::vector<Eigen::RowVector2d> ab(k + 1);
        std::vector<Eigen::RowVector4d> ae(k + 1);
        for (int l = 0; l <= k; ++l) {
          ab[l] = a * ev.B_stack.block<4, 2>(4 * (k + 1), 2 * l);
          ae[l] = a * ev.E_stack.block<4, 4>(4 * (k + 1), 4 * l);
        }
        const Eigen::RowVector4d aA = a * ev.A_stack.block<4, 4>(4 * (k + 1), 0);
        buf.d = st.f(f) - aA.dot(dx0);
        add_mean_entries(buf, layout, j, ab, policy ? &md[j] : nullptr, -1.0);
        if (policy) {
          add_policy_noise_rows(buf, layout, j, ab, ae, sw_half, md[j], {});
        } else {
          for (int m = 0; m <= k; ++m) {
            for (int col = 0; col < 4; ++col) {
              buf.new_row();
              buf.consts.back() = ae[m].dot(sw_half.col(col));
            }
          }
        }
        out.push_back(finalize_cone(buf, gamma, n));
      }

      // input rows act on du_k
      for (int f = 0; f < in.F.rows(); ++f) {
        const Eigen::RowVector2d a = in.F.row(f);
        ConeBuf buf;
        buf.group = group;
        std::vector<Eigen::RowVector2d> ab(k + 1, Eigen::RowVector2d::Zero());
        ab[k] = a;
        buf.d = in.f(f);
        add_mean_entries(buf, layout, j, ab, policy ? &md[j] : nullptr, -1.0);
        if (policy) {
          // only w_m, n_m with m < k reach u_k; pass empty ae
          add_policy_noise_rows(buf, layout, j, ab, {}, sw_half, md[j], {});
        }
        out.push_back(finalize_cone(buf, gamma, n));
      }
    }
    if (!policy) break;  // open loop: single shared sequence, constraints
                         // identical across modes
  }
  return out;
}

std::vector<SocConstraint> soc_collision_constraints(
    const std::vector<std::vector<AffineCaConstraint>>& ca,
    const std::vector<Eigen::Vector2d>& p_ref, const StackedEvMatrices& ev,
    const std::vector<StackedTvMatrices>& tv, const PolicyLayout& layout,
    const Eigen::Vector4d& dx0, const Eigen::Vector2d& o_t,
    const std::vector<std::vector<Eigen::Matrix2d>>& marginal_covs,
    const SmpcConfig& config) {
  config.validate();
  const int N = config.horizon;
  const int J = static_cast<int>(tv.size());
  const int n = layout.num_vars();
  const bool policy = layout.variant == SmpcVariant::policy;
  const Eigen::Matrix4d sw_half = sqrt_psd(config.sigma_w);
  const double gamma = norm_inv(1.0 - config.risk);

  std::vector<ModeData> md;
  md.reserve(J);
  for (const auto& t : tv) md.push_back(mode_data(t, o_t, N));

  std::vector<SocConstraint> out;
  for (int j = 0; j < J; ++j) {
    for (int k = 1; k <= N; ++k) {
      const AffineCaConstraint& cc = ca[j][k - 1];
      const Eigen::RowVector2d gx = cc.grad_p;
      const Eigen::RowVector2d go = cc.grad_o;
      ConeBuf buf;
      buf.group = layout.group_of_step(j, k - 1);

      std::vector<Eigen::RowVector2d> ab(k);
      std::vector<Eigen::RowVector4d> ae(k);
      for (int l = 0; l < k; ++l) {
        ab[l] = gx * ev.B_stack.block<2, 2>(4 * k, 2 * l);
        ae[l] = gx * ev.E_stack.block<2, 4>(4 * k, 4 * l);
      }
      const Eigen::Vector2d om =
          tv[j].T_stack.middleRows<2>(2 * k) * o_t + tv[j].C_stack.segment<2>(2 * k);
      const double g_tilde = cc.rhs - gx.dot(p_ref[k - 1]);
      const Eigen::RowVector4d gA = gx * ev.A_stack.block<2, 4>(4 * k, 0);
      const double mean_const = gA.dot(dx0) + go.dot(om);
      buf.d = mean_const - g_tilde;
      add_mean_entries(buf, layout, j, ab, policy ? &md[j] : nullptr, 1.0);

      if (policy) {
        // TV-noise constant heads: go L_stack(k, m) sn_half[m]
        std::vector<Eigen::RowVector2d> extra(k);
        for (int m = 0; m < k; ++m) {
          extra[m] = go * tv[j].L_stack.block<2, 2>(2 * k, 2 * m) *
                     md[j].sn_half[m];
        }
        add_policy_noise_rows(buf, layout, j, ab, ae, sw_half, md[j], extra);
      } else {
        for (int m = 0; m < k; ++m) {
          for (int col = 0; col < 4; ++col) {
            buf.new_row();
            buf.consts.back() = ae[m].dot(sw_half.col(col));
          }
        }
        const Eigen::RowVector2d gn =
            go * sqrt_psd_2x2(marginal_covs[j][k - 1]);
        for (int col = 0; col < 2; ++col) {
          buf.new_row();
          buf.consts.back() = gn(col);
        }
      }
      out.push_back(finalize_cone(buf, gamma, n));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// cost

CostTerms cost_terms(const StackedEvMatrices& ev, const Eigen::Vector4d& dx0,
                     const SmpcConfig& config) {
  CostTerms ct;
  const Eigen::MatrixXd BtQ = ev.B_stack.transpose() * ev.Q_stack;
  ct.P = BtQ * ev.B_stack + ev.R_stack;
  Eigen::LLT<Eigen::MatrixXd> llt(ct.P);
  if (llt.info() != Eigen::Success) {
    throw std::invalid_argument("cost_terms: B'QB + R not positive definite");
  }
  ct.chol_lt = Eigen::MatrixXd(llt.matrixU());
  ct.a_lin = BtQ * ev.A_stack * dx0;
  const Eigen::MatrixXd EtQE =
      ev.E_stack.transpose() * ev.Q_stack * ev.E_stack;
  ct.r_t = -(dx0.dot((ev.A_stack.transpose() * ev.Q_stack * ev.A_stack -
                      config.state_weight)
                         .eval() *
                     dx0) +
             (ev.sigma_w_stack * EtQE).trace());
  const Eigen::VectorXd la = llt.matrixL().solve(ct.a_lin);
  ct.c0 = la.squaredNorm();
  if (config.variant == SmpcVariant::policy) {
    const Eigen::MatrixXd W0 = llt.matrixL().solve(BtQ * ev.E_stack);
    ct.c0 += (W0 * ev.sigma_w_stack * W0.transpose()).trace();
  }
  return ct;
}

double CostTerms::value(const PolicyParameters& params,
                        const std::vector<Eigen::VectorXd>& q,
                        const Eigen::VectorXd& probs,
                        const StackedEvMatrices& ev,
                        const std::vector<StackedTvMatrices>& tv,
                        SmpcVariant variant) const {
  const int J = static_cast<int>(params.h.size());
  const int N2 = static_cast<int>(params.h[0].size());
  const Eigen::MatrixXd BtQE =
      ev.B_stack.transpose() * ev.Q_stack * ev.E_stack;
  double total = 0.0;
  for (int j = 0; j < J; ++j) {
    Eigen::VectorXd v = params.h[j];
    if (variant == SmpcVariant::policy) v += params.K[j] * q[j];
    total += probs(j) * (v.dot(P * v) + 2.0 * a_lin.dot(v));
    if (variant == SmpcVariant::policy) {
      const Eigen::MatrixXd& M = params.M[j];
      total += probs(j) * ((ev.sigma_w_stack *
                            (M.transpose() * P * M + 2.0 * BtQE.transpose() * M))
                               .trace());
      const Eigen::MatrixXd KL =
          params.K[j] * tv[j].L_stack.topRows(N2);
      total += probs(j) *
               (tv[j].sigma_n_stack * KL.transpose() * P * KL).trace();
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// program assembly

namespace {

// Cost epigraph cone for mode j: || [2 sqrt(p_j) u; s_j - 1] || <= s_j + 1
// with u = U(v + P^-1 a) stacked with the scaled M and K noise maps.
SocConstraint cost_cone_policy(const PolicyLayout& layout, int j, double prob,
                               const CostTerms& ct,
                               const Eigen::MatrixXd& const2,
                               const Eigen::VectorXd& l_inv_a,
                               const Eigen::Matrix4d& sw_half,
                               const ModeData& md, int n) {
  const int N = layout.horizon;
  const int N2 = 2 * N;
  const Eigen::MatrixXd& U = ct.chol_lt;
  const double sp = 2.0 * std::sqrt(prob);
  ConeBuf buf;
  buf.group = layout.group_of_step(j, N - 1);
  // mean rows: U (h + K q) + l_inv_a
  for (int r = 0; r < N2; ++r) {
    auto& row = buf.new_row();
    buf.consts.back() = sp * l_inv_a(r);
    for (int l = r; l < N2; ++l) {
      const double u = U(r, l);
      if (u == 0.0) continue;
      const int step = l / 2, i = l % 2;
      row.emplace_back(layout.h_index(j, step) + i, sp * u);
      if (step == 0) continue;
      const Eigen::Vector2d ql = md.q.segment<2>(2 * step);
      for (int c = 0; c < 2; ++c) {
        if (ql(c) != 0.0) {
          row.emplace_back(layout.k_index(j, step) + 2 * i + c, sp * u * ql(c));
        }
      }
    }
  }
  // M rows: U (M + P^-1 B'QE) SwH, one row per (r, noise column m)
  for (int r = 0; r < N2; ++r) {
    for (int m = 0; m < 4 * N; ++m) {
      auto& row = buf.new_row();
      buf.consts.back() = sp * const2(r, m);
      const int mb = m / 4, mc = m % 4;
      for (int l = std::max(r, 2 * (mb + 1)); l < N2; ++l) {
        const double u = U(r, l);
        if (u == 0.0) continue;
        const int step = l / 2, i = l % 2;
        for (int c = 0; c < 4; ++c) {
          const double v = u * sw_half(c, mc);
          if (v != 0.0) {
            row.emplace_back(layout.m_index(j, mb, step) + 4 * i + c, sp * v);
          }
        }
      }
    }
  }
  // K rows: U K Lu SnH, one row per (r, noise column m2)
  for (int r = 0; r < N2; ++r) {
    for (int m2 = 0; m2 < N2; ++m2) {
      const int mb = m2 / 2, mc = m2 % 2;
      if (std::max(r, 2 * (mb + 1)) >= N2) continue;
      auto& row = buf.new_row();
      for (int l = std::max(r, 2 * (mb + 1)); l < N2; ++l) {
        const double u = U(r, l);
        if (u == 0.0) continue;
        const int step = l / 2, i = l % 2;
        for (int c = 0; c < 2; ++c) {
          const double v = u * md.Z[step][mb](c, mc);
          if (v != 0.0) {
            row.emplace_back(layout.k_index(j, step) + 2 * i + c, sp * v);
          }
        }
      }
    }
  }
  // closing row s_j - 1 and the linear side s_j + 1
  auto& last = buf.new_row();
  last.emplace_back(layout.aux_index(j), 1.0);
  buf.consts.back() = -1.0;
  buf.c_entries.emplace_back(layout.aux_index(j), 1.0);
  buf.d = 1.0;
  return finalize_cone(buf, 1.0, n);
}

SocConstraint cost_cone_open_loop(const PolicyLayout& layout,
                                  const CostTerms& ct,
                                  const Eigen::VectorXd& l_inv_a, int n) {
  const int N2 = 2 * layout.horizon;
  const double d0 = ct.r_t + ct.c0;
  ConeBuf buf;
  for (int r = 0; r < N2; ++r) {
    auto& row = buf.new_row();
    buf.consts.back() = 2.0 * l_inv_a(r);
    for (int l = r; l < N2; ++l) {
      const double u = ct.chol_lt(r, l);
      if (u != 0.0) row.emplace_back(layout.h_index(0, l / 2) + l % 2, 2.0 * u);
    }
  }
  auto& last = buf.new_row();
  last.emplace_back(layout.s_index(), 1.0);
  buf.consts.back() = d0 - 1.0;
  buf.c_entries.emplace_back(layout.s_index(), 1.0);
  buf.d = d0 + 1.0;
  return finalize_cone(buf, 1.0, n);
}

}  // namespace

SmpcProblem build_socp(const EvState& x_t, const Eigen::Vector2d& o_t,
                       const ReferenceTrajectory& reference,
                       std::size_t start_index, const GmmPrediction& gmm,
                       const SmpcConfig& config) {
  config.validate();
  gmm.validate();
  const int N = config.horizon;
  const int J = static_cast<int>(gmm.num_modes());
  if (static_cast<int>(gmm.horizon()) != N) {
    throw std::invalid_argument("build_socp: prediction horizon mismatch");
  }
  if (start_index + N > reference.horizon()) {
    throw std::invalid_argument("build_socp: reference window too short");
  }

  SmpcProblem prob;
  prob.dx0 = x_t.vec() - reference.states[start_index].vec();
  prob.dx0(2) = wrap_angle(prob.dx0(2));

  const LtvModel ltv =
      ltv_sequence(reference, config.vehicle, start_index, N, config.sigma_w);
  const StackedEvMatrices ev = stack_ev_matrices(ltv, config);
  const EvConstraintSets sets =
      ev_constraint_sets(config.vehicle, reference, start_index, N);
  const ConditionalTvDynamics dyn =
      conditional_dynamics(gmm, o_t, config.sigma_n);
  const std::vector<StackedTvMatrices> tv = stack_tv_matrices(dyn);

  prob.k_bar = compute_k_bar(gmm, config.confidence);
  PolicyLayout& layout = prob.layout;
  layout.variant = config.variant;
  layout.horizon = N;
  layout.num_modes = J;
  layout.k_bar_eff =
      static_cast<int>(std::min<std::size_t>(prob.k_bar.value_or(N), N));
  const int n = layout.num_vars();

  for (int j = 0; j < J; ++j) {
    prob.q.push_back(tv[j].T_stack.topRows(2 * N) * o_t +
                     tv[j].C_stack.head(2 * N));
  }

  // collision linearization about the reference positions
  const RotationSchedule rot = infer_rotations(gmm);
  std::vector<Eigen::Vector2d> p_ref(N);
  for (int k = 1; k <= N; ++k) {
    const EvState& s = reference.states[start_index + k];
    p_ref[k - 1] = Eigen::Vector2d(s.x_pos, s.y_pos);
  }
  std::vector<std::vector<AffineCaConstraint>> ca(J);
  for (int j = 0; j < J; ++j) {
    ca[j].resize(N);
    for (int k = 1; k <= N; ++k) {
      const Eigen::Vector2d& mu = gmm.means[j][k - 1];
      const double psi = reference.states[start_index + k].heading;
      const Eigen::Vector2d hint(std::cos(psi), std::sin(psi));
      const Eigen::Vector2d p_ca = ca_linearization_point(
          p_ref[k - 1], mu, rot.rotations[j][k - 1], config.geometry, hint);
      ca[j][k - 1] =
          g_affine_coeffs(p_ca, mu, rot.rotations[j][k - 1], config.geometry);
    }
  }

  const CostTerms ct = cost_terms(ev, prob.dx0, config);
  prob.r_t = ct.r_t;
  prob.c0 = ct.c0;

  ConicProgram& prog = prob.program;
  prog.cost = Eigen::VectorXd::Zero(n);
  prog.cost(layout.s_index()) = 1.0;
  prog.G_eq.resize(0, n);
  prog.h_eq.resize(0);
  prog.var_groups = layout.var_groups();
  prog.var_names = layout.var_names();

  const Eigen::Matrix4d sw_half = sqrt_psd(config.sigma_w);
  Eigen::LLT<Eigen::MatrixXd> llt(ct.P);
  const Eigen::VectorXd l_inv_a = llt.matrixL().solve(ct.a_lin);

  if (config.variant == SmpcVariant::policy) {
    const Eigen::MatrixXd const2 =
        llt.matrixL().solve(ev.B_stack.transpose() * ev.Q_stack * ev.E_stack) *
        sqrt_psd(ev.sigma_w_stack);
    for (int j = 0; j < J; ++j) {
      const ModeData md = mode_data(tv[j], o_t, N);
      prog.cones.push_back(cost_cone_policy(layout, j, gmm.mode_probs(j), ct,
                                            const2, l_inv_a, sw_half, md, n));
    }
    // s + r_t + c0 - sum_j s_j >= 0
    ConeBuf link;
    link.group = 0;
    link.c_entries.emplace_back(layout.s_index(), 1.0);
    for (int j = 0; j < J; ++j) {
      link.c_entries.emplace_back(layout.aux_index(j), -1.0);
    }
    link.d = ct.r_t + ct.c0;
    prog.cones.push_back(finalize_cone(link, 1.0, n));
  } else {
    prog.cones.push_back(cost_cone_open_loop(layout, ct, l_inv_a, n));
  }

  auto si = soc_state_input_constraints(ev, tv, layout, sets, prob.dx0, o_t,
                                        config);
  for (auto& cone : si) prog.cones.push_back(std::move(cone));
  auto cca = soc_collision_constraints(ca, p_ref, ev, tv, layout, prob.dx0,
                                       o_t, gmm.covs, config);
  for (auto& cone : cca) prog.cones.push_back(std::move(cone));
  return prob;
}

PolicyParameters extract_parameters(const PolicyLayout& layout,
                                    const Eigen::VectorXd& z) {
  const int N = layout.horizon;
  const int J = layout.num_modes;
  PolicyParameters params;
  for (int j = 0; j < J; ++j) {
    Eigen::VectorXd h = Eigen::VectorXd::Zero(2 * N);
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(2 * N, 4 * N);
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(2 * N, 2 * N);
    for (int k = 0; k < N; ++k) {
      for (int i = 0; i < 2; ++i) h(2 * k + i) = z(layout.h_index(j, k) + i);
      if (layout.variant == SmpcVariant::policy) {
        for (int l = 0; l < k; ++l) {
          for (int i = 0; i < 2; ++i) {
            for (int c = 0; c < 4; ++c) {
              M(2 * k + i, 4 * l + c) = z(layout.m_index(j, l, k) + 4 * i + c);
            }
          }
        }
        if (k > 0) {
          for (int i = 0; i < 2; ++i) {
            for (int c = 0; c < 2; ++c) {
              K(2 * k + i, 2 * k + c) = z(layout.k_index(j, k) + 2 * i + c);
            }
          }
        }
      }
    }
    params.h.push_back(std::move(h));
    params.M.push_back(std::move(M));
    params.K.push_back(std::move(K));
  }
  return params;
}

SmpcSolution extract_control(const SmpcProblem& problem,
                             const SolverResult& result,
                             const ReferenceTrajectory& reference,
                             std::size_t start_index,
                             const SmpcConfig& config) {
  SmpcSolution sol;
  EvState x_now = reference.states[start_index];
  x_now.speed += problem.dx0(3);  // actual EV speed, not the reference one
  if (result.status == SolverStatus::optimal) {
    sol.params = extract_parameters(problem.layout, result.primal);
    const EvInput& u_ref = reference.inputs[start_index];
    sol.control.accel = u_ref.accel + sol.params.h[0](0);
    sol.control.steer = u_ref.steer + sol.params.h[0](1);
    sol.objective = result.objective;
    sol.status = SmpcStatus::optimal;
    return sol;
  }
  sol.control = fallback_brake(x_now, config.vehicle);
  sol.status = result.status == SolverStatus::infeasible
                   ? SmpcStatus::infeasible
                   : SmpcStatus::fallback;
  return sol;
}

EvInput fallback_brake(const EvState& state, const VehicleParams& params) {
  EvInput u;
  u.steer = 0.0;
  u.accel = state.speed > 1e-9 ? params.accel_min : 0.0;
  return u;
}

}  // namespace mmpc

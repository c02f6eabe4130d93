#include "sae/sfh.hpp"

#include "sae/error.hpp"

#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace sae::sfh {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

using Sparse = Eigen::SparseMatrix<double>;

Sparse identity(Eigen::Index n) {
    Sparse m(n, n);
    m.setIdentity();
    return m;
}

using Ldlt = Eigen::SimplicialLDLT<Sparse>;

// Entries of M^-1 on the filled pattern of M's LDL' factor, by the Takahashi
// recursion Z_ij = delta_ij / d_j - sum_{k > j} L_kj Z_ik.
class SelectedInverse {
public:
    explicit SelectedInverse(const Ldlt& f)
        : z_(f.matrixL().nestedExpression()), perm_(f.permutationP().indices()) {
        const Sparse& l = f.matrixL().nestedExpression();
        const Vector& d = f.vectorD();
        const Eigen::Index n = l.cols();
        diag_.resize(n);
        const int* outer = l.outerIndexPtr();
        const int* inner = l.innerIndexPtr();
        const double* lx = l.valuePtr();
        double* zx = z_.valuePtr();
        for (Eigen::Index j = n - 1; j >= 0; --j) {
            const int begin = outer[j], end = outer[j + 1];
            for (int a = begin; a < end; ++a) {
                double s = 0.0;
                for (int b = begin; b < end; ++b) s += lx[b] * permuted(inner[a], inner[b]);
                zx[a] = -s;
            }
            double s = 0.0;
            for (int a = begin; a < end; ++a) s += lx[a] * zx[a];
            diag_[j] = 1.0 / d[j] - s;
        }
    }

    // Original ordering; (i, j) must lie on the pattern of M.
    double operator()(Eigen::Index i, Eigen::Index j) const { return permuted(perm_[i], perm_[j]); }
    double diagonal(Eigen::Index i) const { return diag_[perm_[i]]; }
    double trace() const { return diag_.sum(); }

private:
    double permuted(Eigen::Index a, Eigen::Index b) const {
        if (a == b) return diag_[a];
        if (a < b) std::swap(a, b);
        const int* begin = z_.innerIndexPtr() + z_.outerIndexPtr()[b];
        const int* end = z_.innerIndexPtr() + z_.outerIndexPtr()[b + 1];
        const int* it = std::lower_bound(begin, end, static_cast<int>(a));
        if (it == end || *it != a) throw Error(Errc::InvalidInput, "selected inverse: entry off the factor pattern");
        return z_.valuePtr()[it - z_.innerIndexPtr()];
    }

    Sparse z_;
    Eigen::VectorXi perm_;
    Vector diag_;
};

double log_det(const Ldlt& f) {
    const Vector& d = f.vectorD();
    if ((d.array() <= 0.0).any()) throw Error(Errc::SingularAtRho, "matrix is not positive definite");
    return d.array().log().sum();
}

Sparse sar_operator(const spatial::SpatialWeights& w, double rho) {
    return identity(static_cast<Eigen::Index>(w.size())) - rho * w.matrix();
}

void check_rho(double rho, const char* where) {
    if (!(std::abs(rho) < 1.0)) {
        throw Error(Errc::SingularAtRho, std::string(where) + ": I - rho W may be singular at rho=" + std::to_string(rho));
    }
}

double sample_variance(const Vector& y) {
    const double m = y.mean();
    return (y.array() - m).square().sum() / static_cast<double>(std::max<Eigen::Index>(1, y.size() - 1));
}

}  // namespace

void SfhInput::validate() const {
    base.validate();
    if (static_cast<Eigen::Index>(w.size()) != base.areas()) {
        throw Error(Errc::InvalidInput, "weights cover " + std::to_string(w.size()) + " areas, data has " +
                                            std::to_string(base.areas()));
    }
    if ((base.sigma2_e.array() <= 0.0).any()) {
        throw Error(Errc::InvalidInput, "spatial model requires strictly positive sampling variances");
    }
    if (!(rho_bounds.lower < rho_bounds.upper) || rho_bounds.lower <= -1.0 || rho_bounds.upper >= 1.0) {
        throw Error(Errc::InvalidInput, "rho bounds must be an interval inside (-1, 1)");
    }
}

Matrix omega(double sigma2_eps, double rho, const spatial::SpatialWeights& w) {
    const auto n = static_cast<Eigen::Index>(w.size());
    if (sigma2_eps < 0.0) throw Error(Errc::InvalidInput, "sigma2_eps must be nonnegative");
    check_rho(rho, "omega");
    if (sigma2_eps == 0.0) return Matrix::Zero(n, n);
    const Sparse a = sar_operator(w, rho);
    const Sparse ata = Sparse(a.transpose()) * a;
    Eigen::SimplicialLLT<Sparse> llt(ata);
    if (llt.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "(I - rho W)'(I - rho W) is singular");
    Matrix out = llt.solve(Matrix::Identity(n, n));
    out = 0.5 * (out + out.transpose()).eval();
    return sigma2_eps * out;
}

SarLikelihood::SarLikelihood(const SfhInput& input, fh::Method method)
    : method_(method), y_(input.base.y), x_(input.base.x), s_(input.base.sigma2_e.cwiseSqrt()) {
    if (method != fh::Method::ML && method != fh::Method::REML) {
        throw Error(Errc::InvalidInput, "spatial FH is fitted by ML or REML");
    }
    input.validate();
    w_ = input.w.matrix();
    const Sparse wt = w_.transpose();
    sym_ = w_ + wt;
    wtw_ = wt * w_;

    const Eigen::Index n = y_.size();
    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index i = 0; i < n; ++i) trips.emplace_back(i, i, 1.0);
    for (const Sparse* m : {&sym_, &wtw_}) {
        for (Eigen::Index k = 0; k < m->outerSize(); ++k) {
            for (Sparse::InnerIterator it(*m, k); it; ++it) trips.emplace_back(it.row(), it.col(), 1.0);
        }
    }
    pattern_.resize(n, n);
    pattern_.setFromTriplets(trips.begin(), trips.end());
    pattern_.makeCompressed();

    const auto nnz = static_cast<std::size_t>(pattern_.nonZeros());
    id_vals_.assign(nnz, 0.0);
    sym_vals_.assign(nnz, 0.0);
    wtw_vals_.assign(nnz, 0.0);
    auto slot = [&](Eigen::Index row, Eigen::Index col) {
        const int* begin = pattern_.innerIndexPtr() + pattern_.outerIndexPtr()[col];
        const int* end = pattern_.innerIndexPtr() + pattern_.outerIndexPtr()[col + 1];
        const int* it = std::lower_bound(begin, end, static_cast<int>(row));
        return static_cast<std::size_t>(it - pattern_.innerIndexPtr());
    };
    for (Eigen::Index i = 0; i < n; ++i) id_vals_[slot(i, i)] = 1.0;
    for (Eigen::Index k = 0; k < sym_.outerSize(); ++k) {
        for (Sparse::InnerIterator it(sym_, k); it; ++it) sym_vals_[slot(it.row(), it.col())] = it.value();
    }
    for (Eigen::Index k = 0; k < wtw_.outerSize(); ++k) {
        for (Sparse::InnerIterator it(wtw_, k); it; ++it) wtw_vals_[slot(it.row(), it.col())] = it.value();
    }

    symmetric_links_ = true;
    for (std::size_t i = 0; i < input.w.size() && symmetric_links_; ++i) {
        for (auto j : input.w.neighbors(i)) {
            if (!input.w.contains(j, i)) {
                symmetric_links_ = false;
                break;
            }
        }
    }
    if (symmetric_links_) {
        degrees_.resize(n);
        std::vector<Eigen::Triplet<double>> c;
        for (std::size_t i = 0; i < input.w.size(); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            degrees_[ii] = static_cast<double>(input.w.degree(i));
            c.emplace_back(ii, ii, 0.0);
            for (auto j : input.w.neighbors(i)) c.emplace_back(ii, static_cast<Eigen::Index>(j), 1.0);
        }
        links_.resize(n, n);
        links_.setFromTriplets(c.begin(), c.end());
        links_.makeCompressed();
    }
}

Eigen::SparseMatrix<double> SarLikelihood::precision_system(double sigma2, double rho) const {
    // I + K on the fixed pattern.
    const Eigen::Index n = y_.size();
    Sparse m = pattern_;
    double* val = m.valuePtr();
    const int* inner = m.innerIndexPtr();
    const int* outer = m.outerIndexPtr();
    for (Eigen::Index col = 0; col < n; ++col) {
        for (int k = outer[col]; k < outer[col + 1]; ++k) {
            const auto row = inner[k];
            const auto kk = static_cast<std::size_t>(k);
            const double q = id_vals_[kk] - rho * sym_vals_[kk] + rho * rho * wtw_vals_[kk];
            val[k] = s_[row] * s_[col] * q / sigma2 + (row == col ? 1.0 : 0.0);
        }
    }
    return m;
}

SarLikelihood::Smoothed SarLikelihood::smooth(double sigma2, double rho, const Vector& resid,
                                              bool with_self_weight) const {
    if (!(sigma2 > 0.0)) {
        Smoothed out{Vector::Zero(resid.size()), Vector::Zero(resid.size())};
        return out;
    }
    check_rho(rho, "smooth");
    Ldlt llt(precision_system(sigma2, rho));
    if (llt.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "I + K is not positive definite");
    Smoothed out;
    out.u = s_.cwiseProduct(llt.solve(Vector(resid.cwiseQuotient(s_))));
    if (with_self_weight) {
        const SelectedInverse minv(llt);
        out.self_weight.resize(resid.size());
        for (Eigen::Index i = 0; i < resid.size(); ++i) out.self_weight[i] = minv.diagonal(i);
    }
    return out;
}

SarLikelihood::Point SarLikelihood::evaluate(double sigma2, double rho, bool with_gradient) const {
    if (!(sigma2 > 0.0)) throw Error(Errc::InvalidInput, "sigma2_eps must be positive inside the likelihood");
    check_rho(rho, "likelihood");
    const Eigen::Index n = y_.size();
    const Eigen::Index p = x_.cols();

    const Sparse m = precision_system(sigma2, rho);
    Ldlt llt(m);
    if (llt.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "I + K is not positive definite");
    const double log_det_m = log_det(llt);

    double log_det_a = 0.0;
    double tr_ainv_w = 0.0;
    if (rho != 0.0 && symmetric_links_) {
        // Islands are unit rows of I - rho W; unit diagonal slots keep B SPD there.
        Sparse b = links_;
        for (Eigen::Index col = 0; col < n; ++col) {
            for (Sparse::InnerIterator it(b, col); it; ++it) {
                if (it.row() == col) {
                    it.valueRef() = degrees_[col] > 0.0 ? degrees_[col] : 1.0;
                } else {
                    it.valueRef() = -rho;
                }
            }
        }
        Ldlt bf(b);
        if (bf.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "D - rho C is singular");
        log_det_a = log_det(bf);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (degrees_[i] > 0.0) log_det_a -= std::log(degrees_[i]);
        }
        if (with_gradient) {
            // tr((I - rho W)^-1 W) = tr(B^-1 C)
            const SelectedInverse bi(bf);
            for (Eigen::Index col = 0; col < n; ++col) {
                for (Sparse::InnerIterator it(links_, col); it; ++it) {
                    if (it.row() != col) tr_ainv_w += bi(it.row(), col);
                }
            }
        }
    } else if (rho != 0.0) {
        Sparse a = identity(n) - rho * w_;
        a.makeCompressed();
        Eigen::SparseLU<Sparse> lu;
        lu.compute(a);
        if (lu.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "I - rho W is singular");
        log_det_a = lu.logAbsDeterminant();
        if (with_gradient) {
            const Matrix sol = lu.solve(Matrix(w_));
            tr_ainv_w = sol.trace();
        }
    }
    // log|G| = log|I + K| - log|Q|,  log|Q| = 2 log|det A| - n log sigma2
    const double log_det_g = log_det_m - 2.0 * log_det_a + static_cast<double>(n) * std::log(sigma2);

    auto q_times = [&](const Vector& v) -> Vector {
        return (v - rho * (sym_ * v) + rho * rho * (wtw_ * v)) / sigma2;
    };
    auto k_times = [&](const Vector& v) -> Vector { return s_.cwiseProduct(q_times(s_.cwiseProduct(v))); };

    const Matrix x_t = x_.array().colwise() / s_.array();
    const Vector y_t = y_.cwiseQuotient(s_);
    const Matrix b_t = llt.solve(x_t);  // (I+K)^-1 X~
    Matrix kx(n, p);
    for (Eigen::Index j = 0; j < p; ++j) kx.col(j) = k_times(x_t.col(j));
    Matrix h = kx.transpose() * b_t;  // X' G^-1 X
    h = 0.5 * (h + h.transpose()).eval();
    Eigen::LLT<Matrix> h_llt(h);
    if (h_llt.info() != Eigen::Success) throw Error(Errc::SingularDesign, "X' G^-1 X is not positive definite");
    const Vector xgy = kx.transpose() * llt.solve(y_t);

    Point pt;
    pt.beta = h_llt.solve(xgy);
    pt.beta_cov = h_llt.solve(Matrix::Identity(p, p));
    const Vector r = y_ - x_ * pt.beta;
    const Vector z = r.cwiseQuotient(s_);
    const Vector w = llt.solve(z);
    const Vector kz = k_times(z);
    const double quad = kz.dot(w);
    pt.u_hat = s_.cwiseProduct(w);

    const double log_det_h = 2.0 * h_llt.matrixLLT().diagonal().array().log().sum();
    if (method_ == fh::Method::ML) {
        pt.value = -0.5 * static_cast<double>(n) * kLog2Pi - 0.5 * log_det_g - 0.5 * quad;
    } else {
        pt.value = -0.5 * static_cast<double>(n - p) * kLog2Pi - 0.5 * log_det_g - 0.5 * log_det_h - 0.5 * quad;
    }
    if (!with_gradient) return pt;

    // dK/d sigma2 = -K / sigma2;  dK/d rho = S (-(W+W') + 2 rho W'W) S / sigma2.
    const SelectedInverse minv(llt);
    pt.self_weight.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) pt.self_weight[i] = minv.diagonal(i);
    double tr_m_dk_rho = 0.0;
    {
        const int* inner = pattern_.innerIndexPtr();
        const int* outer = pattern_.outerIndexPtr();
        for (Eigen::Index col = 0; col < n; ++col) {
            for (int k = outer[col]; k < outer[col + 1]; ++k) {
                const auto row = inner[k];
                const auto kk = static_cast<std::size_t>(k);
                const double dq = -sym_vals_[kk] + 2.0 * rho * wtw_vals_[kk];
                if (dq != 0.0) tr_m_dk_rho += minv(row, col) * s_[row] * s_[col] * dq;
            }
        }
        tr_m_dk_rho /= sigma2;
    }
    const double dn = static_cast<double>(n);
    const double tr_m_dk_sigma = -(dn - minv.trace()) / sigma2;
    const double dlogg_sigma = tr_m_dk_sigma + dn / sigma2;
    const double dlogg_rho = tr_m_dk_rho + 2.0 * tr_ainv_w;

    auto dq_rho_times = [&](const Vector& v) -> Vector {
        return (-(sym_ * v) + 2.0 * rho * (wtw_ * v)) / sigma2;
    };
    const Vector sw = s_.cwiseProduct(w);
    const double quad_rho = sw.dot(dq_rho_times(sw));
    const double wkw = w.dot(k_times(w));
    const double dquad_sigma = -wkw / sigma2;

    double g_sigma = -0.5 * dlogg_sigma - 0.5 * dquad_sigma;
    double g_rho = -0.5 * dlogg_rho - 0.5 * quad_rho;
    if (method_ == fh::Method::REML) {
        Matrix kb(n, p), db(n, p);
        for (Eigen::Index j = 0; j < p; ++j) {
            kb.col(j) = k_times(b_t.col(j));
            db.col(j) = s_.cwiseProduct(dq_rho_times(s_.cwiseProduct(b_t.col(j))));
        }
        const Matrix bkb = b_t.transpose() * kb;
        const Matrix bdb = b_t.transpose() * db;
        g_sigma -= 0.5 * (-h_llt.solve(bkb).trace() / sigma2);
        g_rho -= 0.5 * h_llt.solve(bdb).trace();
    }
    pt.gradient = {g_sigma, g_rho};
    return pt;
}

namespace {

struct Transform {
    double center, half;
    std::optional<double> fixed;
    double rho(double t) const { return fixed ? *fixed : center + half * std::tanh(t); }
    double drho(double t) const {
        if (fixed) return 0.0;
        const double th = std::tanh(t);
        return half * (1.0 - th * th);
    }
    double inverse(double rho) const { return std::atanh(std::clamp((rho - center) / half, -0.999999, 0.999999)); }
};

struct Optimum {
    Eigen::Vector2d theta;
    double value = -INFINITY;
    int iterations = 0;
    bool converged = false;
};

// Projected BFGS minimizing -loglik over theta = (log sigma2, t), with
// rho = center + half * tanh(t) and log sigma2 boxed.
Optimum bfgs(const SarLikelihood& lik, const Transform& tr, Eigen::Vector2d theta, double log_lo, double log_hi,
             const SfhOptions& opt) {
    auto clamp = [&](Eigen::Vector2d t) {
        t[0] = std::clamp(t[0], log_lo, log_hi);
        t[1] = std::clamp(t[1], -12.0, 12.0);
        return t;
    };
    auto value_at = [&](const Eigen::Vector2d& t) {
        return -lik.evaluate(std::exp(t[0]), tr.rho(t[1]), false).value;
    };
    auto grad_at = [&](const Eigen::Vector2d& t, double& f) {
        const double s2 = std::exp(t[0]);
        const auto pt = lik.evaluate(s2, tr.rho(t[1]), true);
        f = -pt.value;
        return Eigen::Vector2d(-pt.gradient[0] * s2, -pt.gradient[1] * tr.drho(t[1]));
    };

    theta = clamp(theta);
    double f = 0.0;
    Eigen::Vector2d g = grad_at(theta, f);
    Eigen::Matrix2d hinv = Eigen::Matrix2d::Identity();
    Optimum out;
    for (int iter = 1; iter <= opt.max_iter; ++iter) {
        out.iterations = iter;
        Eigen::Vector2d pg = g;
        std::array<bool, 2> active{false, false};
        if ((theta[0] <= log_lo && g[0] > 0.0) || (theta[0] >= log_hi && g[0] < 0.0)) {
            pg[0] = 0.0;
            active[0] = true;
        }
        if (tr.fixed || (theta[1] <= -12.0 && g[1] > 0.0) || (theta[1] >= 12.0 && g[1] < 0.0)) {
            pg[1] = 0.0;
            active[1] = true;
        }
        if (pg.cwiseAbs().maxCoeff() <= opt.gradient_tolerance) {
            out.converged = true;
            break;
        }
        Eigen::Vector2d dir = -(hinv * pg);
        for (int k = 0; k < 2; ++k) {
            if (active[static_cast<std::size_t>(k)]) dir[k] = 0.0;
        }
        if (dir.dot(pg) >= 0.0) {
            hinv.setIdentity();
            dir = -pg;
        }
        double step = 1.0;
        if (iter == 1) step = std::min(1.0, 1.0 / dir.norm());
        Eigen::Vector2d next;
        double f_next = INFINITY;
        bool accepted = false;
        for (int bt = 0; bt < 50; ++bt) {
            next = clamp(theta + step * dir);
            try {
                f_next = value_at(next);
            } catch (const Error&) {
                f_next = INFINITY;
            }
            if (std::isfinite(f_next) && f_next <= f + 1e-4 * g.dot(next - theta)) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            // no descent along the quasi-Newton direction; a stationary point
            // up to rounding counts as converged
            if (!hinv.isIdentity()) {
                hinv.setIdentity();
                continue;
            }
            out.converged = pg.cwiseAbs().maxCoeff() <= 1e3 * opt.gradient_tolerance;
            break;
        }
        double f_new = 0.0;
        const Eigen::Vector2d g_new = grad_at(next, f_new);
        const Eigen::Vector2d s = next - theta;
        const Eigen::Vector2d yv = g_new - g;
        const double sy = s.dot(yv);
        if (sy > 1e-12 * s.norm() * yv.norm()) {
            const double rho_k = 1.0 / sy;
            const Eigen::Matrix2d ident = Eigen::Matrix2d::Identity();
            hinv = (ident - rho_k * s * yv.transpose()) * hinv * (ident - rho_k * yv * s.transpose()) +
                   rho_k * s * s.transpose();
        }
        const double df = f - f_new;
        theta = next;
        f = f_new;
        g = g_new;
        if (s.cwiseAbs().maxCoeff() < 1e-10 && df < 1e-14 * (1.0 + std::abs(f))) {
            out.converged = true;
            break;
        }
    }
    out.theta = theta;
    out.value = -f;
    return out;
}

// Newton steps on (sigma2, rho) from the BFGS optimum, with the Hessian
// differenced from the analytic gradient. Steps that lower the objective or
// leave the box are rejected.
void polish(const SarLikelihood& lik, double& s2, double& rho, bool fixed_rho, double s2_lo, double s2_hi,
            const RhoBounds& bounds) {
    double value = lik.evaluate(s2, rho, false).value;
    for (int it = 0; it < 6; ++it) {
        const auto g = lik.evaluate(s2, rho, true).gradient;
        const double hs = 1e-5 * s2;
        const auto gs1 = lik.evaluate(s2 + hs, rho, true).gradient;
        const auto gs0 = lik.evaluate(s2 - hs, rho, true).gradient;
        Eigen::Vector2d step = Eigen::Vector2d::Zero();
        if (fixed_rho) {
            const double h = (gs1[0] - gs0[0]) / (2.0 * hs);
            if (!(h < 0.0)) return;
            step[0] = -g[0] / h;
        } else {
            const double hr = 1e-6;
            const auto gr1 = lik.evaluate(s2, rho + hr, true).gradient;
            const auto gr0 = lik.evaluate(s2, rho - hr, true).gradient;
            Eigen::Matrix2d hess;
            hess.col(0) = (gs1 - gs0) / (2.0 * hs);
            hess.col(1) = (gr1 - gr0) / (2.0 * hr);
            hess = 0.5 * (hess + hess.transpose()).eval();
            Eigen::LLT<Eigen::Matrix2d> llt(-hess);
            if (llt.info() != Eigen::Success) return;
            step = llt.solve(g);
        }
        const double s_new = s2 + step[0], r_new = rho + step[1];
        if (!(s_new > s2_lo && s_new < s2_hi && r_new > bounds.lower && r_new < bounds.upper)) return;
        double v_new = 0.0;
        try {
            v_new = lik.evaluate(s_new, r_new, false).value;
        } catch (const Error&) {
            return;
        }
        if (!(v_new >= value - 1e-12 * std::abs(value))) return;
        s2 = s_new;
        rho = r_new;
        value = v_new;
        if (std::abs(step[0]) <= 1e-13 * s2 && std::abs(step[1]) <= 1e-13) return;
    }
}

}  // namespace

SfhFit fit_sfh(const SfhInput& input, fh::Method method, const SfhOptions& options) {
    input.validate();
    const SarLikelihood lik(input, method);
    if (options.fixed_rho && !(*options.fixed_rho > input.rho_bounds.lower && *options.fixed_rho < input.rho_bounds.upper)) {
        throw Error(Errc::InvalidInput, "fixed rho lies outside the rho bounds");
    }
    const Transform tr{0.5 * (input.rho_bounds.lower + input.rho_bounds.upper),
                       0.5 * (input.rho_bounds.upper - input.rho_bounds.lower), options.fixed_rho};

    const double scale = std::max(sample_variance(input.base.y), input.base.sigma2_e.mean());
    const double log_lo = std::log(1e-8 * scale);
    const double log_hi = std::log(1e3 * scale);

    const bool warm = options.start && options.start->first > 0.0;
    double sigma0 = 0.0;
    if (!warm) {
        try {
            sigma0 = fh::fit_reml(input.base).sigma2_u;
        } catch (const Error&) {
            sigma0 = 0.0;
        }
        if (!(sigma0 > 1e-6 * scale)) sigma0 = 0.5 * scale;
    }

    std::vector<std::pair<double, double>> seeds{{1.0, 0.0}, {1.0, 0.5}, {1.0, -0.5}, {0.5, 0.85}, {2.0, 0.25}};
    if (warm) {
        sigma0 = options.start->first;
        seeds = {{1.0, options.fixed_rho ? 0.0 : options.start->second}};
    }

    SfhFit fit;
    fit.method = method;
    Optimum best;
    for (const auto& [factor, rho0_raw] : seeds) {
        if (options.fixed_rho && factor == 1.0 && rho0_raw != 0.0) continue;
        const double rho0 = std::clamp(rho0_raw, tr.center - 0.95 * tr.half, tr.center + 0.95 * tr.half);
        const double s0 = factor * sigma0;
        Optimum o;
        try {
            o = bfgs(lik, tr, Eigen::Vector2d(std::log(s0), tr.inverse(rho0)), log_lo, log_hi, options);
        } catch (const Error&) {
            o = Optimum{};
        }
        StartResult sr;
        sr.sigma2_start = s0;
        sr.rho_start = rho0;
        sr.iterations = o.iterations;
        sr.converged = o.converged;
        if (std::isfinite(o.value)) {
            sr.sigma2 = std::exp(o.theta[0]);
            sr.rho = tr.rho(o.theta[1]);
            sr.loglik = o.value;
        }
        fit.starts.push_back(sr);
        fit.iterations += o.iterations;
        if (std::isfinite(o.value) && (o.value > best.value || (!best.converged && o.converged &&
                                                                 o.value >= best.value - 1e-9))) {
            best = o;
        }
    }
    if (!std::isfinite(best.value)) throw Error(Errc::NoConvergence, "spatial FH: no start produced a finite objective");
    if (!best.converged) throw Error(Errc::NoConvergence, "spatial FH: optimizer did not converge");

    fit.sigma2_eps = std::exp(best.theta[0]);
    fit.rho = tr.rho(best.theta[1]);
    fit.converged = true;
    fit.boundary_sigma2 = best.theta[0] <= log_lo + 1e-9;
    const double margin = 1e-3 * (input.rho_bounds.upper - input.rho_bounds.lower);
    fit.boundary_rho = !options.fixed_rho && (fit.rho <= input.rho_bounds.lower + margin || fit.rho >= input.rho_bounds.upper - margin);
    if (options.refine && !fit.boundary_sigma2 && !fit.boundary_rho) {
        polish(lik, fit.sigma2_eps, fit.rho, options.fixed_rho.has_value(), std::exp(log_lo), std::exp(log_hi),
               input.rho_bounds);
    }
    if (!fit.boundary_sigma2 && fit.sigma2_eps <= 1e-3 * scale) {
        // Stalled just above the floor with the likelihood still falling.
        fit.boundary_sigma2 = lik.evaluate(fit.sigma2_eps, fit.rho, true).gradient[0] < -1e-6;
    }

    const auto pt = lik.evaluate(fit.sigma2_eps, fit.rho, true);
    fit.loglik = pt.value;
    fit.beta = pt.beta;
    fit.beta_cov = pt.beta_cov;
    if (fit.boundary_sigma2 && (input.base.sigma2_e.array() > 0.0).all()) {
        // Truncate to zero as in the non-spatial fit: G = diag(sigma2_e) and
        // rho drops out of the model.
        const auto at_zero = fh::profile_loglik(input.base, 0.0, method);
        const Matrix xw = input.base.x.array().colwise() / input.base.sigma2_e.array();
        fit.sigma2_eps = 0.0;
        fit.loglik = at_zero.value;
        fit.beta = at_zero.beta;
        fit.beta_cov = (input.base.x.transpose() * xw).llt().solve(Matrix::Identity(fit.beta.size(), fit.beta.size()));
    }
    fit.beta_se = fit.beta_cov.diagonal().cwiseSqrt();

    // Observed information by central differences of the analytic gradient.
    fit.sigma2_eps_se = std::nan("");
    fit.rho_se = std::nan("");
    if (!options.refine) {
    } else if (options.fixed_rho && !fit.boundary_sigma2) {
        try {
            const double hs = 1e-4 * fit.sigma2_eps;
            const double d2 = (lik.evaluate(fit.sigma2_eps + hs, fit.rho, true).gradient[0] -
                               lik.evaluate(fit.sigma2_eps - hs, fit.rho, true).gradient[0]) /
                              (2.0 * hs);
            if (d2 < 0.0) fit.sigma2_eps_se = std::sqrt(-1.0 / d2);
        } catch (const Error&) {
        }
    } else if (!fit.boundary_rho && !fit.boundary_sigma2) {
        try {
            const double hs = 1e-4 * fit.sigma2_eps;
            const double hr = 1e-4;
            Eigen::Matrix2d hess;
            const auto gs1 = lik.evaluate(fit.sigma2_eps + hs, fit.rho, true).gradient;
            const auto gs0 = lik.evaluate(fit.sigma2_eps - hs, fit.rho, true).gradient;
            const auto gr1 = lik.evaluate(fit.sigma2_eps, fit.rho + hr, true).gradient;
            const auto gr0 = lik.evaluate(fit.sigma2_eps, fit.rho - hr, true).gradient;
            hess.col(0) = (gs1 - gs0) / (2.0 * hs);
            hess.col(1) = (gr1 - gr0) / (2.0 * hr);
            hess = 0.5 * (hess + hess.transpose()).eval();
            const Eigen::Matrix2d info = -hess;
            Eigen::LLT<Eigen::Matrix2d> info_llt(info);
            if (info_llt.info() == Eigen::Success) {
                const Eigen::Matrix2d cov = info_llt.solve(Eigen::Matrix2d::Identity());
                fit.sigma2_eps_se = std::sqrt(cov(0, 0));
                fit.rho_se = std::sqrt(cov(1, 1));
            }
        } catch (const Error&) {
        }
    }
    return fit;
}

std::vector<Prediction> seblup(const SfhInput& input, const SfhFit& fit) {
    const SarLikelihood lik(input, fit.method);
    const Vector resid = input.base.y - input.base.x * fit.beta;
    const auto sm = lik.smooth(fit.sigma2_eps, fit.rho, resid, true);
    std::vector<Prediction> out;
    out.reserve(static_cast<std::size_t>(input.base.areas()));
    for (Eigen::Index i = 0; i < input.base.areas(); ++i) {
        Prediction p;
        p.index = static_cast<std::size_t>(i);
        p.kind = EstimatorKind::Seblup;
        p.value = input.base.x.row(i).dot(fit.beta) + sm.u[i];
        p.gamma = sm.self_weight[i];
        if (input.w.is_island(static_cast<std::size_t>(i))) p.flags |= kFlagIsland;
        if (fit.boundary_rho) p.flags |= kFlagBoundaryRho;
        out.push_back(p);
    }
    return out;
}

std::vector<Prediction> seblup_out_of_sample(const spatial::SpatialWeights& full_w,
                                             std::span<const std::string> out_ids, const Matrix& x_out,
                                             const SfhInput& input, const SfhFit& fit) {
    if (x_out.cols() != fit.beta.size()) {
        throw Error(Errc::ColumnMismatch, "x_out columns do not match the fitted model");
    }
    if (static_cast<Eigen::Index>(out_ids.size()) != x_out.rows()) {
        throw Error(Errc::InvalidInput, "out_ids and x_out disagree on the number of areas");
    }
    std::vector<std::size_t> idx_s;
    idx_s.reserve(input.w.size());
    for (const auto& id : input.w.ids()) idx_s.push_back(full_w.index_of(id));
    std::vector<std::size_t> idx_o;
    idx_o.reserve(out_ids.size());
    for (const auto& id : out_ids) idx_o.push_back(full_w.index_of(id));

    // The in-sample weights must be the full-domain weights restricted to the sample.
    const auto restricted = full_w.restrict_to(idx_s);
    for (std::size_t i = 0; i < restricted.size(); ++i) {
        if (restricted.neighbors(i) != input.w.neighbors(i)) {
            throw Error(Errc::InvalidInput, "in-sample weights are not the restriction of the full-domain weights (area " +
                                                input.w.ids()[i] + ")");
        }
    }

    const auto n_s = static_cast<Eigen::Index>(idx_s.size());
    const auto n_f = static_cast<Eigen::Index>(full_w.size());
    std::vector<Prediction> out;
    out.reserve(out_ids.size());
    const Vector resid = input.base.y - input.base.x * fit.beta;

    Vector u_o = Vector::Zero(static_cast<Eigen::Index>(idx_o.size()));
    const bool exact_zero = (input.base.sigma2_e.array() == 0.0).any();
    if (fit.sigma2_eps > 0.0 && fit.rho != 0.0 && !idx_o.empty() && !exact_zero) {
        // E[u | y_s] over the full domain from the joint precision
        // A'A / sigma2 + P' Sigma_e^-1 P, one sparse solve.
        check_rho(fit.rho, "out-of-sample");
        const Sparse a = sar_operator(full_w, fit.rho);
        Sparse m = Sparse(a.transpose()) * a / fit.sigma2_eps;
        Vector rhs = Vector::Zero(n_f);
        for (Eigen::Index k = 0; k < n_s; ++k) {
            const auto j = static_cast<Eigen::Index>(idx_s[static_cast<std::size_t>(k)]);
            m.coeffRef(j, j) += 1.0 / input.base.sigma2_e[k];
            rhs[j] = resid[k] / input.base.sigma2_e[k];
        }
        Eigen::SimplicialLLT<Sparse> llt(m);
        if (llt.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "full-domain SAR precision is singular");
        const Vector u = llt.solve(rhs);
        for (std::size_t k = 0; k < idx_o.size(); ++k) u_o[static_cast<Eigen::Index>(k)] = u[static_cast<Eigen::Index>(idx_o[k])];
    } else if (fit.sigma2_eps > 0.0 && fit.rho != 0.0 && !idx_o.empty()) {
        check_rho(fit.rho, "out-of-sample");
        const Sparse a = sar_operator(full_w, fit.rho);
        const Sparse ata = Sparse(a.transpose()) * a;
        Eigen::SimplicialLLT<Sparse> llt(ata);
        if (llt.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "full-domain SAR operator is singular");
        Matrix e_s = Matrix::Zero(n_f, n_s);
        for (Eigen::Index k = 0; k < n_s; ++k) e_s(static_cast<Eigen::Index>(idx_s[static_cast<std::size_t>(k)]), k) = 1.0;
        const Matrix cols = fit.sigma2_eps * llt.solve(e_s);  // Omega_full(:, s)
        Matrix g_ss(n_s, n_s);
        for (Eigen::Index k = 0; k < n_s; ++k) g_ss.row(k) = cols.row(static_cast<Eigen::Index>(idx_s[static_cast<std::size_t>(k)]));
        g_ss = 0.5 * (g_ss + g_ss.transpose()).eval();
        g_ss.diagonal() += input.base.sigma2_e;
        Eigen::LLT<Matrix> g_llt(g_ss);
        if (g_llt.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "G_ss is not positive definite");
        const Vector alpha = g_llt.solve(resid);
        for (std::size_t k = 0; k < idx_o.size(); ++k) {
            u_o[static_cast<Eigen::Index>(k)] = cols.row(static_cast<Eigen::Index>(idx_o[k])).dot(alpha);
        }
    }

    for (std::size_t k = 0; k < idx_o.size(); ++k) {
        const auto row = static_cast<Eigen::Index>(k);
        Prediction p;
        p.index = k;
        p.gamma = 0.0;
        const double synth = x_out.row(row).dot(fit.beta);
        if (full_w.is_island(idx_o[k])) {
            p.kind = EstimatorKind::Synthetic;
            p.value = synth;
            p.flags = kFlagOutOfSample | kFlagIsland | kFlagDisconnected;
        } else {
            p.kind = EstimatorKind::Seblup;
            p.value = synth + u_o[row];
            p.flags = kFlagOutOfSample;
        }
        if (fit.boundary_rho) p.flags |= kFlagBoundaryRho;
        out.push_back(p);
    }
    return out;
}

}  // namespace sae::sfh

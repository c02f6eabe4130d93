#include "sae/fh.hpp"

#include "sae/error.hpp"

#include <boost/math/tools/minima.hpp>
#include <boost/math/tools/roots.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace sae::fh {

std::string_view to_string(Method method) noexcept {
    switch (method) {
        case Method::ML: return "ML";
        case Method::REML: return "REML";
        case Method::Moments: return "MOMENTS";
        case Method::FhIterative: return "FH_ITERATIVE";
    }
    return "?";
}

Method parse_method(std::string_view name) {
    std::string s(name);
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
    if (s == "ML") return Method::ML;
    if (s == "REML") return Method::REML;
    if (s == "MOMENTS" || s == "PR" || s == "PRASAD_RAO") return Method::Moments;
    if (s == "FH_ITERATIVE" || s == "FH") return Method::FhIterative;
    throw Error(Errc::InvalidInput, "unknown estimation method '" + std::string(name) + "'");
}

void FhInput::validate() const {
    const auto d = y.size();
    const auto p = x.cols();
    if (p == 0) throw Error(Errc::SingularDesign, "design matrix has no columns");
    if (x.rows() != d || sigma2_e.size() != d) {
        throw Error(Errc::InvalidInput, "y, x and sigma2_e disagree on the number of areas");
    }
    if (d <= p) {
        throw Error(Errc::SingularDesign,
                    "need more areas than covariates (D=" + std::to_string(d) + ", p=" + std::to_string(p) + ")");
    }
    if (!y.allFinite() || !x.allFinite() || !sigma2_e.allFinite()) {
        throw Error(Errc::InvalidInput, "non-finite values in FH input");
    }
    std::size_t zeros = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
        if (sigma2_e[i] < 0.0) throw Error(Errc::InvalidInput, "negative sampling variance");
        if (sigma2_e[i] == 0.0) ++zeros;
    }
    if (zeros > max_zero_var) {
        throw Error(Errc::InvalidInput, std::to_string(zeros) + " areas have zero sampling variance (allowed " +
                                            std::to_string(max_zero_var) + ")");
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(x);
    if (qr.rank() < p) throw Error(Errc::SingularDesign, "design matrix is rank deficient");
}

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Weighted normal equations for V = diag(v); everything is O(D p^2).
struct Gls {
    Vector v;
    Matrix h;  // X' V^-1 X
    Eigen::LLT<Matrix> h_llt;
    Vector beta;
    Vector resid;
};

Gls solve_gls(const FhInput& in, double sigma2_u) {
    Gls g;
    g.v = in.sigma2_e.array() + sigma2_u;
    if ((g.v.array() <= 0.0).any()) {
        throw Error(Errc::ZeroTotalVariance, "sigma2_u + sigma2_i is zero for some area");
    }
    const Vector inv = g.v.cwiseInverse();
    const Matrix xw = in.x.array().colwise() * inv.array();
    g.h = in.x.transpose() * xw;
    g.h_llt.compute(g.h);
    if (g.h_llt.info() != Eigen::Success) throw Error(Errc::SingularDesign, "X'V^-1X is not positive definite");
    g.beta = g.h_llt.solve(xw.transpose() * in.y);
    g.resid = in.y - in.x * g.beta;
    return g;
}

double log_det_llt(const Eigen::LLT<Matrix>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

double sample_variance(const Vector& y) {
    const double m = y.mean();
    return (y.array() - m).square().sum() / static_cast<double>(std::max<Eigen::Index>(1, y.size() - 1));
}

// Expected information for sigma2_u: ML 0.5*tr(V^-2), REML 0.5*tr(P^2).
double expected_information(const FhInput& in, const Gls& g, Method method) {
    const Vector inv = g.v.cwiseInverse();
    const double tr_v2 = inv.array().square().sum();
    if (method == Method::ML) return 0.5 * tr_v2;
    const Matrix c2 = in.x.transpose() * (in.x.array().colwise() * inv.array().square()).matrix();
    const Matrix c3 = in.x.transpose() * (in.x.array().colwise() * inv.array().cube()).matrix();
    const Matrix hinv_c2 = g.h_llt.solve(c2);
    const double tr_p2 = tr_v2 - 2.0 * g.h_llt.solve(c3).trace() + (hinv_c2 * hinv_c2).trace();
    return 0.5 * tr_p2;
}

double lower_bound(const FhInput& in) {
    // With census-complete areas sigma2_u = 0 would make V singular.
    if ((in.sigma2_e.array() == 0.0).any()) {
        const double scale = std::max(sample_variance(in.y), in.sigma2_e.maxCoeff());
        return std::max(1e-12 * scale, 1e-300);
    }
    return 0.0;
}

double initial_upper(const FhInput& in) {
    double upper = 10.0 * sample_variance(in.y);
    if (!(upper > 0.0)) upper = 10.0 * std::max(in.sigma2_e.mean(), 1e-8);
    return upper;
}

FhFit finish(const FhInput& in, Method method, double sigma2_u) {
    FhFit f;
    f.method = method;
    f.sigma2_u = sigma2_u;
    const Gls g = solve_gls(in, sigma2_u);
    f.beta = g.beta;
    f.beta_cov = g.h_llt.solve(Matrix::Identity(g.h.rows(), g.h.cols()));
    f.beta_se = f.beta_cov.diagonal().cwiseSqrt();
    const double info = expected_information(in, g, method == Method::ML ? Method::ML : Method::REML);
    f.sigma2_u_se = info > 0.0 ? std::sqrt(1.0 / info) : std::nan("");
    f.gamma.resize(in.areas());
    for (Eigen::Index i = 0; i < in.areas(); ++i) f.gamma[i] = shrinkage(sigma2_u, in.sigma2_e[i]);
    if (method == Method::ML || method == Method::REML) f.loglik = profile_loglik(in, sigma2_u, method).value;
    return f;
}

// Maximizes the 1-D profile likelihood on [lo, inf): a coarse grid locates the
// basin, then the score is root-bracketed (TOMS 748) or, failing a sign
// change, the objective is searched with Brent's method.
FhFit maximize_profile(const FhInput& in, Method method, const FitOptions& opt) {
    in.validate();
    const double lo = lower_bound(in);
    double upper = std::max(initial_upper(in), 10.0 * lo);
    std::vector<TraceStep> trace;
    int evals = 0;
    auto eval = [&](double s) {
        auto pt = profile_loglik(in, s, method);
        trace.push_back({++evals, s, pt.value, pt.score});
        return pt;
    };

    constexpr int kGrid = 40;
    std::vector<double> grid(kGrid + 1);
    std::size_t best = 0;
    for (int expansion = 0;; ++expansion) {
        double best_val = -INFINITY;
        for (int k = 0; k <= kGrid; ++k) {
            const double t = static_cast<double>(k) / kGrid;
            grid[k] = lo + (upper - lo) * t * t;
            const double v = profile_loglik(in, grid[k], method).value;
            if (v > best_val) {
                best_val = v;
                best = static_cast<std::size_t>(k);
            }
        }
        if (best < static_cast<std::size_t>(kGrid)) break;
        if (expansion >= 12) throw Error(Errc::NoConvergence, "profile likelihood still increasing at sigma2_u=" +
                                                                  std::to_string(upper));
        upper *= 10.0;
    }

    FhFit result;
    double estimate = 0.0;
    bool converged = false;
    bool boundary = false;
    const auto floor_tol = 1e-14 * upper;
    auto close_enough = [&](double a, double b) {
        return std::abs(b - a) <= opt.tolerance * std::max(std::abs(a), std::abs(b)) || std::abs(b - a) <= floor_tol;
    };

    double a = best == 0 ? lo : grid[best - 1];
    double b = grid[std::min<std::size_t>(best + 1, kGrid)];
    const auto pa = eval(a);
    if (best == 0 && pa.score <= 0.0) {
        estimate = lo;
        converged = true;
        boundary = true;
    } else {
        const auto pb = eval(b);
        if (pa.score > 0.0 && pb.score < 0.0) {
            std::uintmax_t iters = static_cast<std::uintmax_t>(opt.max_iter);
            auto root = boost::math::tools::toms748_solve([&](double s) { return eval(s).score; }, a, b, pa.score,
                                                          pb.score, close_enough, iters);
            estimate = 0.5 * (root.first + root.second);
            converged = close_enough(root.first, root.second);
        } else {
            std::uintmax_t iters = static_cast<std::uintmax_t>(opt.max_iter);
            auto m = boost::math::tools::brent_find_minima([&](double s) { return -eval(s).value; }, a, b,
                                                           std::numeric_limits<double>::digits / 2, iters);
            estimate = m.first;
            converged = iters < static_cast<std::uintmax_t>(opt.max_iter);
        }
        const auto pe = eval(estimate);
        if (estimate <= lo && pe.score <= 0.0) boundary = true;
    }
    if (!converged) {
        throw Error(Errc::NoConvergence, std::string(to_string(method)) + " did not converge in " +
                                             std::to_string(opt.max_iter) + " iterations");
    }
    result = finish(in, method, estimate);
    result.converged = true;
    result.at_boundary = boundary;
    result.iterations = evals;
    result.trace = std::move(trace);
    return result;
}

}  // namespace

Vector gls_beta(const FhInput& input, double sigma2_u) {
    if (input.x.cols() == 0) throw Error(Errc::SingularDesign, "design matrix has no columns");
    if (input.x.rows() != input.y.size() || input.sigma2_e.size() != input.y.size()) {
        throw Error(Errc::InvalidInput, "y, x and sigma2_e disagree on the number of areas");
    }
    return solve_gls(input, sigma2_u).beta;
}

ProfilePoint profile_loglik(const FhInput& in, double sigma2_u, Method method) {
    if (method != Method::ML && method != Method::REML) {
        throw Error(Errc::InvalidInput, "profile likelihood is defined for ML and REML only");
    }
    const Gls g = solve_gls(in, sigma2_u);
    const auto d = static_cast<double>(in.areas());
    const auto p = static_cast<double>(in.covariates());
    const Vector inv = g.v.cwiseInverse();
    const double log_det_v = g.v.array().log().sum();
    const double quad = (g.resid.array().square() * inv.array()).sum();  // Y'PY
    const double quad2 = (g.resid.array().square() * inv.array().square()).sum();  // Y'PPY
    ProfilePoint pt;
    pt.beta = g.beta;
    if (method == Method::ML) {
        pt.value = -0.5 * d * kLog2Pi - 0.5 * log_det_v - 0.5 * quad;
        pt.score = -0.5 * inv.sum() + 0.5 * quad2;
    } else {
        const Matrix c2 = in.x.transpose() * (in.x.array().colwise() * inv.array().square()).matrix();
        const double tr_p = inv.sum() - g.h_llt.solve(c2).trace();
        pt.value = -0.5 * (d - p) * kLog2Pi - 0.5 * log_det_v - 0.5 * log_det_llt(g.h_llt) - 0.5 * quad;
        pt.score = -0.5 * tr_p + 0.5 * quad2;
    }
    return pt;
}

double fh_moment_equation(const FhInput& input, double sigma2_u) {
    const Gls g = solve_gls(input, sigma2_u);
    return (g.resid.array().square() / g.v.array()).sum() - static_cast<double>(input.areas() - input.covariates());
}

FhFit fit_ml(const FhInput& input, const FitOptions& options) {
    return maximize_profile(input, Method::ML, options);
}

FhFit fit_reml(const FhInput& input, const FitOptions& options) {
    return maximize_profile(input, Method::REML, options);
}

FhFit fit_moments(const FhInput& input, const FitOptions&) {
    input.validate();
    const auto d = input.areas();
    const auto p = input.covariates();
    Eigen::ColPivHouseholderQR<Matrix> qr(input.x);
    const Vector beta_ols = qr.solve(input.y);
    const Vector resid = input.y - input.x * beta_ols;
    // Leverages h_i = x_i (X'X)^-1 x_i' from the thin Q factor.
    const Matrix q = qr.householderQ() * Matrix::Identity(d, p);
    const Vector h = q.rowwise().squaredNorm();
    double raw = 0.0;
    for (Eigen::Index i = 0; i < d; ++i) raw += resid[i] * resid[i] - input.sigma2_e[i] * (1.0 - h[i]);
    raw /= static_cast<double>(d - p);
    const double estimate = std::max(lower_bound(input), std::max(0.0, raw));
    FhFit f = finish(input, Method::Moments, estimate);
    f.converged = true;
    f.at_boundary = raw <= 0.0;
    f.iterations = 1;
    f.trace.push_back({1, estimate, raw, 0.0});
    return f;
}

FhFit fit_fh_iterative(const FhInput& input, const FitOptions& options) {
    input.validate();
    const double lo = lower_bound(input);
    std::vector<TraceStep> trace;
    int evals = 0;
    auto equation = [&](double s) {
        const double r = fh_moment_equation(input, s);
        trace.push_back({++evals, s, r, 0.0});
        return r;
    };
    const double f_lo = equation(lo);
    double estimate = lo;
    bool boundary = true;
    if (f_lo > 0.0) {
        boundary = false;
        double hi = std::max(initial_upper(input), 10.0 * lo);
        double f_hi = equation(hi);
        for (int k = 0; f_hi > 0.0; ++k) {
            if (k > 60) throw Error(Errc::NoConvergence, "FH moment equation has no sign change");
            hi *= 4.0;
            f_hi = equation(hi);
        }
        std::uintmax_t iters = static_cast<std::uintmax_t>(options.max_iter);
        auto root = boost::math::tools::toms748_solve(equation, lo, hi, f_lo, f_hi,
                                                      boost::math::tools::eps_tolerance<double>(), iters);
        if (iters >= static_cast<std::uintmax_t>(options.max_iter)) {
            throw Error(Errc::NoConvergence, "FH iterative estimator did not converge");
        }
        estimate = 0.5 * (root.first + root.second);
        // pick whichever end has the smaller residual
        for (double cand : {root.first, root.second}) {
            if (std::abs(fh_moment_equation(input, cand)) < std::abs(fh_moment_equation(input, estimate))) {
                estimate = cand;
            }
        }
    }
    FhFit f = finish(input, Method::FhIterative, estimate);
    f.converged = true;
    f.at_boundary = boundary;
    f.iterations = evals;
    f.trace = std::move(trace);
    return f;
}

FhFit fit(const FhInput& input, Method method, const FitOptions& options) {
    switch (method) {
        case Method::ML: return fit_ml(input, options);
        case Method::REML: return fit_reml(input, options);
        case Method::Moments: return fit_moments(input, options);
        case Method::FhIterative: return fit_fh_iterative(input, options);
    }
    throw Error(Errc::InvalidInput, "unknown method");
}

std::vector<Prediction> eblup(const FhInput& input, const FhFit& fit) {
    if (fit.beta.size() != input.covariates()) {
        throw Error(Errc::ColumnMismatch, "fit and input disagree on the number of covariates");
    }
    std::vector<Prediction> out;
    out.reserve(static_cast<std::size_t>(input.areas()));
    for (Eigen::Index i = 0; i < input.areas(); ++i) {
        const auto xi = input.x.row(i);
        const double synth = xi.dot(fit.beta);
        const double gamma = shrinkage(fit.sigma2_u, input.sigma2_e[i]);
        Prediction p;
        p.index = static_cast<std::size_t>(i);
        p.kind = EstimatorKind::Eblup;
        p.gamma = gamma;
        p.value = gamma * input.y[i] + (1.0 - gamma) * synth;
        const double g1 = gamma * input.sigma2_e[i];
        const double g2 = (1.0 - gamma) * (1.0 - gamma) * xi.dot(fit.beta_cov * xi.transpose());
        p.mse = g1 + g2;
        out.push_back(p);
    }
    return out;
}

std::vector<Prediction> synthetic_predict(const Matrix& x_out, const FhFit& fit) {
    if (x_out.cols() != fit.beta.size()) {
        throw Error(Errc::ColumnMismatch, "x_out has " + std::to_string(x_out.cols()) + " columns, model has " +
                                              std::to_string(fit.beta.size()));
    }
    std::vector<Prediction> out;
    out.reserve(static_cast<std::size_t>(x_out.rows()));
    for (Eigen::Index i = 0; i < x_out.rows(); ++i) {
        const auto xi = x_out.row(i);
        Prediction p;
        p.index = static_cast<std::size_t>(i);
        p.kind = EstimatorKind::Synthetic;
        p.gamma = 0.0;
        p.flags = kFlagOutOfSample;
        p.value = xi.dot(fit.beta);
        if (fit.beta_cov.size() > 0) p.mse = fit.sigma2_u + xi.dot(fit.beta_cov * xi.transpose());
        out.push_back(p);
    }
    return out;
}

}  // namespace sae::fh

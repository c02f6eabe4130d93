#pragma once

#include "sae/prediction.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string_view>
#include <vector>

namespace sae::fh {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Method { ML, REML, Moments, FhIterative };

std::string_view to_string(Method method) noexcept;
Method parse_method(std::string_view name);

// Area-level data for the sampled areas: direct estimates, design matrix
// (intercept included by the caller) and known sampling variances.
struct FhInput {
    Vector y;
    Matrix x;
    Vector sigma2_e;
    // Areas allowed to carry a zero sampling variance (census-complete).
    std::size_t max_zero_var = 0;

    Eigen::Index areas() const noexcept { return y.size(); }
    Eigen::Index covariates() const noexcept { return x.cols(); }

    // Throws SingularDesign / InvalidInput.
    void validate() const;
};

struct FitOptions {
    double tolerance = 1e-8;  // relative, on sigma2_u
    int max_iter = 200;
};

struct TraceStep {
    int iteration = 0;
    double sigma2 = 0.0;
    double objective = 0.0;  // log-likelihood, or the moment-equation residual
    double gradient = 0.0;
};

struct FhFit {
    Method method = Method::REML;
    Vector beta;
    Matrix beta_cov;  // (X' V^-1 X)^-1 at the estimate
    Vector beta_se;
    double sigma2_u = 0.0;
    double sigma2_u_se = 0.0;  // from expected information
    std::optional<double> loglik;  // ML/REML only
    Vector gamma;
    bool converged = false;
    bool at_boundary = false;  // sigma2_u truncated to zero
    int iterations = 0;
    std::vector<TraceStep> trace;
};

// gamma_i = s2u / (s2u + s2i); an area with zero sampling variance is
// observed exactly and gets gamma = 1.
inline double shrinkage(double sigma2_u, double sigma2_i) noexcept {
    return sigma2_i > 0.0 ? sigma2_u / (sigma2_u + sigma2_i) : 1.0;
}

// GLS coefficients with V = diag(sigma2_u + sigma2_i).
Vector gls_beta(const FhInput& input, double sigma2_u);

// Log-likelihood with beta profiled out, plus its derivative in sigma2_u.
// Only ML and REML are meaningful here.
struct ProfilePoint {
    double value = 0.0;
    double score = 0.0;
    Vector beta;
};
ProfilePoint profile_loglik(const FhInput& input, double sigma2_u, Method method);

// sum (y_i - x_i b*)^2 / (s2 + s2_i) - (D - p), with b* the GLS fit at s2.
double fh_moment_equation(const FhInput& input, double sigma2_u);

FhFit fit_ml(const FhInput& input, const FitOptions& options = {});
FhFit fit_reml(const FhInput& input, const FitOptions& options = {});
FhFit fit_moments(const FhInput& input, const FitOptions& options = {});
FhFit fit_fh_iterative(const FhInput& input, const FitOptions& options = {});
FhFit fit(const FhInput& input, Method method, const FitOptions& options = {});

// Composite predictor gamma*y + (1-gamma)*x*beta for the sampled areas, with
// the first-order Prasad-Rao MSE g1 + g2.
std::vector<Prediction> eblup(const FhInput& input, const FhFit& fit);

// x_out * beta for areas without a sample; MSE = sigma2_u + x cov(beta) x'.
std::vector<Prediction> synthetic_predict(const Matrix& x_out, const FhFit& fit);

}  // namespace sae::fh

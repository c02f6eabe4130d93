#pragma once

#include "sae/fh.hpp"
#include "sae/prediction.hpp"
#include "sae/weights.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sae::sfh {

using fh::Matrix;
using fh::Vector;

struct RhoBounds {
    double lower = -0.999;
    double upper = 0.999;
};

// Fay-Herriot data whose random effects follow u = rho W u + eps, with W the
// row-stochastic weights over the sampled areas (same order as base.y).
struct SfhInput {
    fh::FhInput base;
    spatial::SpatialWeights w;
    RhoBounds rho_bounds;

    void validate() const;
};

struct SfhOptions {
    double gradient_tolerance = 1e-6;  // on the transformed-parameter gradient
    int max_iter = 200;                // per start
    // Holds rho at this value and estimates sigma2_eps alone.
    std::optional<double> fixed_rho;
    // Single start at (sigma2_eps, rho) in place of the default start set.
    std::optional<std::pair<double, double>> start;
    // Newton polish of the optimum and observed-information standard errors.
    bool refine = true;
};

struct StartResult {
    double sigma2_start = 0.0;
    double rho_start = 0.0;
    double sigma2 = 0.0;
    double rho = 0.0;
    double loglik = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct SfhFit {
    fh::Method method = fh::Method::REML;
    Vector beta;
    Matrix beta_cov;
    Vector beta_se;
    double sigma2_eps = 0.0;
    double rho = 0.0;
    double sigma2_eps_se = 0.0;  // observed information; NaN on a boundary
    double rho_se = 0.0;
    double loglik = 0.0;
    bool converged = false;
    bool boundary_rho = false;
    bool boundary_sigma2 = false;
    int iterations = 0;
    std::vector<StartResult> starts;
};

// Omega = sigma2 [(I - rho W)'(I - rho W)]^-1, dense.
Matrix omega(double sigma2_eps, double rho, const spatial::SpatialWeights& w);

// Profile (beta concentrated out) ML/REML log-likelihood with covariance
// G = Omega + diag(sigma2_e). Works through the sparse precision of the SAR
// effects: with S = diag(sigma_e), K = S Q S and Q = (I-rho W)'(I-rho W)/sigma2,
//   log|G| = log|I + K| - log|Q|,  G^-1 = S^-1 K (I + K)^-1 S^-1,
// so only the sparse matrix I + K is ever factorized.
class SarLikelihood {
public:
    SarLikelihood(const SfhInput& input, fh::Method method);

    struct Point {
        double value = 0.0;
        Eigen::Vector2d gradient = Eigen::Vector2d::Zero();  // d/d sigma2, d/d rho
        Vector beta;
        Matrix beta_cov;
        Vector u_hat;       // Omega G^-1 (y - X beta)
        Vector self_weight; // diag(Omega G^-1), only with gradient
    };

    Point evaluate(double sigma2, double rho, bool with_gradient) const;

    // Omega G^-1 r for an arbitrary residual vector; self_weight holds
    // diag(Omega G^-1) when requested.
    struct Smoothed {
        Vector u;
        Vector self_weight;
    };
    Smoothed smooth(double sigma2, double rho, const Vector& resid, bool with_self_weight) const;

    fh::Method method() const noexcept { return method_; }
    Eigen::Index areas() const noexcept { return y_.size(); }

private:
    Eigen::SparseMatrix<double> precision_system(double sigma2, double rho) const;

    fh::Method method_;
    Vector y_;
    Matrix x_;
    Vector s_;  // sqrt(sigma2_e)
    Eigen::SparseMatrix<double> w_;
    Eigen::SparseMatrix<double> sym_;  // W + W'
    Eigen::SparseMatrix<double> wtw_;  // W'W
    // I, W + W' and W'W scattered onto the pattern of I + (W + W') + W'W.
    Eigen::SparseMatrix<double> pattern_;
    std::vector<double> id_vals_, sym_vals_, wtw_vals_;
    // With a symmetric neighbour relation C and degrees D, I - rho W equals
    // D^-1 (D - rho C) off the islands, so its determinant and the trace of
    // (I - rho W)^-1 W come from a sparse factor of the SPD matrix D - rho C.
    bool symmetric_links_ = false;
    Eigen::SparseMatrix<double> links_;  // C over the linked areas, unit diagonal slots
    Vector degrees_;
};

SfhFit fit_sfh(const SfhInput& input, fh::Method method, const SfhOptions& options = {});

// theta_i = x_i beta + [Omega G^-1 (y - X beta)]_i for the sampled areas.
std::vector<Prediction> seblup(const SfhInput& input, const SfhFit& fit);

// Out-of-sample areas: x_o beta + Omega_os G_ss^-1 (y - X beta), the blocks
// taken from the SAR covariance over the full domain. Islands fall back to
// x_o beta and are flagged.
std::vector<Prediction> seblup_out_of_sample(const spatial::SpatialWeights& full_w,
                                             std::span<const std::string> out_ids, const Matrix& x_out,
                                             const SfhInput& input, const SfhFit& fit);

}  // namespace sae::sfh

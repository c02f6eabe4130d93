#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "instances.hpp"
#include "oracle.hpp"
#include "sae/bootstrap.hpp"
#include "sae/error.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

using namespace sae;
using namespace sae::bootstrap;

namespace {

fh::FhFit known_fh(const fh::FhInput& in, double sigma2_u) {
    fh::FhFit f;
    f.beta = fh::Vector::Zero(in.covariates());
    f.beta[0] = 0.4;
    f.beta_cov = fh::Matrix::Zero(in.covariates(), in.covariates());
    f.sigma2_u = sigma2_u;
    f.converged = true;
    return f;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("known-parameter FH bootstrap recovers gamma * sigma2_e") {
    std::mt19937_64 gen(1);
    const auto in = inst::random_fh(gen, 10, 2, 0.01);
    const auto fit = known_fh(in, 0.01);
    BootstrapSpec spec;
    spec.replicates = 5000;
    spec.seed = 42;
    spec.refit = false;
    const auto t = bootstrap_mse_fh(in, fit, spec);
    REQUIRE(t.mse.size() == 10);
    CHECK(t.b_effective == 5000);
    for (Eigen::Index i = 0; i < 10; ++i) {
        const double analytic = fh::shrinkage(0.01, in.sigma2_e[i]) * in.sigma2_e[i];
        CHECK(t.mse[static_cast<std::size_t>(i)] == doctest::Approx(analytic).epsilon(0.05));
    }
}

TEST_CASE("no area effect in known mode gives exactly zero MSE") {
    std::mt19937_64 gen(2);
    const auto in = inst::random_fh(gen, 6, 1, 0.0);
    BootstrapSpec spec;
    spec.replicates = 100;
    spec.refit = false;
    const auto t = bootstrap_mse_fh(in, known_fh(in, 0.0), spec);
    for (double m : t.mse) CHECK(m == 0.0);
}

TEST_CASE("results depend only on the seed, not on the thread count") {
    std::mt19937_64 gen(3);
    const auto in = inst::random_fh(gen, 12, 2, 0.02);
    const auto fit = fh::fit_reml(in);
    BootstrapSpec spec;
    spec.replicates = 120;
    spec.seed = 7;
    const auto a = bootstrap_mse_fh(in, fit, spec);
    spec.threads = 4;
    const auto b = bootstrap_mse_fh(in, fit, spec);
    CHECK(a.mse == b.mse);
    std::vector<std::string> ids;
    for (int i = 0; i < 12; ++i) ids.push_back("r" + std::to_string(i));
    const auto dir = std::filesystem::temp_directory_path();
    write_mse_csv(dir / "sae_mse_a.csv", ids, a);
    write_mse_csv(dir / "sae_mse_b.csv", ids, b);
    CHECK(slurp(dir / "sae_mse_a.csv") == slurp(dir / "sae_mse_b.csv"));
    CHECK(slurp(dir / "sae_mse_a.csv").rfind("area_id,prediction,mse,rrmse,b_effective\n", 0) == 0);
    spec.seed = 8;
    CHECK(bootstrap_mse_fh(in, fit, spec).mse != a.mse);
}

TEST_CASE("refit bootstrap exceeds the leading term and covers unsampled areas") {
    std::mt19937_64 gen(4);
    const auto in = inst::random_fh(gen, 30, 2, 0.01);
    const auto fit = fh::fit_reml(in);
    OutOfSample oos;
    oos.ids = {"o1", "o2"};
    oos.x = fh::Matrix{{1.0, 0.1}, {1.0, 0.9}};
    BootstrapSpec spec;
    spec.replicates = 400;
    const auto t = bootstrap_mse_fh(in, fit, spec, &oos);
    REQUIRE(t.mse.size() == 32);
    const auto syn = fh::synthetic_predict(oos.x, fit);
    CHECK(t.prediction[30] == syn[0].value);
    for (double m : t.mse) CHECK(m > 0.0);
    CHECK(t.mse[30] > 0.5 * fit.sigma2_u);
    CHECK_FALSE(t.below_reporting_minimum);
    spec.replicates = 20;
    CHECK(bootstrap_mse_fh(in, fit, spec).below_reporting_minimum);
    spec.replicates = 0;
    CHECK_THROWS_AS(bootstrap_mse_fh(in, fit, spec), Error);
    OutOfSample bad = oos;
    bad.x = fh::Matrix::Ones(2, 3);
    spec.replicates = 10;
    CHECK_THROWS_AS(bootstrap_mse_fh(in, fit, spec, &bad), Error);
}

TEST_CASE("SAR draws have the SAR covariance") {
    std::mt19937_64 gen(5);
    const auto w = inst::random_graph(gen, 5, 2);
    const double s2 = 0.5, rho = 0.7;
    const SarSampler sampler(w, s2, rho);
    auto eng = make_stream(11, 0);
    const int n = 100000;
    fh::Matrix acc = fh::Matrix::Zero(5, 5);
    fh::Vector mean = fh::Vector::Zero(5);
    for (int k = 0; k < n; ++k) {
        const fh::Vector u = sampler.draw(eng);
        acc += u * u.transpose();
        mean += u;
    }
    acc /= n;
    mean /= n;
    const auto om = oracle::sar_omega(s2, rho, inst::weights_mat(w));
    for (int i = 0; i < 5; ++i) {
        CHECK(std::abs(mean[i]) <= 5.0 * std::sqrt(om[i][i] / n));
        for (int j = 0; j < 5; ++j) {
            const double se = std::sqrt((om[i][i] * om[j][j] + om[i][j] * om[i][j]) / n);
            CHECK(std::abs(acc(i, j) - om[i][j]) <= 5.0 * se);
        }
    }
    CHECK_THROWS_AS(SarSampler(w, s2, 1.0), Error);
}

TEST_CASE("known-parameter SFH bootstrap recovers the SBLUP MSE") {
    std::mt19937_64 gen(6);
    auto in = inst::random_sfh(gen, 10, 2, 0.01, 0.6, 3);
    sfh::SfhFit fit;
    fit.method = fh::Method::REML;
    fit.beta = fh::Vector{{0.4, 0.1}};
    fit.sigma2_eps = 0.01;
    fit.rho = 0.6;
    fit.converged = true;
    BootstrapSpec spec;
    spec.model = Model::SFH;
    spec.replicates = 5000;
    spec.refit = false;
    const auto t = bootstrap_mse_sfh(in, fit, spec);
    const auto wm = inst::weights_mat(in.w);
    const auto om = oracle::sar_omega(fit.sigma2_eps, fit.rho, wm);
    const auto gi = oracle::gauss_jordan(oracle::sar_cov(fit.sigma2_eps, fit.rho, wm, inst::to_vec(in.base.sigma2_e))).inv;
    const auto og = oracle::mul(oracle::mul(om, gi), om);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(t.mse[i] == doctest::Approx(om[i][i] - og[i][i]).epsilon(0.05));
    }
    // Spatial borrowing lowers the MSE below the non-spatial analogue.
    double sum_sfh = 0.0, sum_fh = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
        sum_sfh += t.mse[i];
        const double marginal = om[i][i];
        sum_fh += marginal * in.base.sigma2_e[static_cast<Eigen::Index>(i)] /
                  (marginal + in.base.sigma2_e[static_cast<Eigen::Index>(i)]);
    }
    CHECK(sum_sfh < sum_fh);
}

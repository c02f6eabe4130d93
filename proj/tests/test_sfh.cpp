#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "instances.hpp"
#include "oracle.hpp"
#include "sae/error.hpp"
#include "sae/sfh.hpp"

#include <random>

using namespace sae;
using namespace sae::sfh;

namespace {

double oracle_loglik(const SfhInput& in, double s, double r, bool reml) {
    return oracle::profile_loglik(inst::to_vec(in.base.y), inst::to_mat(in.base.x),
                                  oracle::sar_cov(s, r, inst::weights_mat(in.w), inst::to_vec(in.base.sigma2_e)), reml);
}

// Omega G^-1 (y - X beta) by the dense oracle.
oracle::Vec oracle_smooth(const SfhInput& in, double s, double r, const Vector& beta) {
    const auto w = inst::weights_mat(in.w);
    const auto om = oracle::sar_omega(s, r, w);
    const auto g = oracle::sar_cov(s, r, w, inst::to_vec(in.base.sigma2_e));
    const Vector resid = in.base.y - in.base.x * beta;
    return oracle::mul(om, oracle::mul(oracle::gauss_jordan(g).inv, inst::to_vec(resid)));
}

template <class F>
Errc error_code(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an sae::Error");
    return Errc::InvalidInput;
}

}  // namespace

TEST_CASE("Omega at rho = 0, at sigma2 = 0 and on a 5-chain") {
    std::mt19937_64 gen(1);
    const auto w = inst::random_graph(gen, 5, 0);
    const Matrix o0 = omega(0.3, 0.0, w);
    CHECK((o0 - 0.3 * Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(omega(0.0, 0.6, w).cwiseAbs().maxCoeff() == 0.0);
    for (double rho : {-0.8, 0.3, 0.9}) {
        const Matrix o = omega(0.7, rho, w);
        const auto ref = oracle::sar_omega(0.7, rho, inst::weights_mat(w));
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 5; ++j) CHECK(o(i, j) == doctest::Approx(ref[i][j]).epsilon(1e-12));
        }
        Eigen::LLT<Matrix> llt(o);
        CHECK(llt.info() == Eigen::Success);
    }
}

TEST_CASE("profile likelihood, coefficients and smoother match the dense oracle") {
    std::mt19937_64 gen(2);
    std::uniform_real_distribution<double> rr(-0.95, 0.95), ss(0.001, 0.1);
    for (int rep = 0; rep < 30; ++rep) {
        const auto in = inst::random_sfh(gen, 5 + rep % 6, 1 + rep % 3, 0.01, 0.5, rep % 4);
        const double s = ss(gen), r = rr(gen);
        for (auto m : {fh::Method::ML, fh::Method::REML}) {
            const SarLikelihood lik(in, m);
            const auto pt = lik.evaluate(s, r, true);
            CHECK(pt.value == doctest::Approx(oracle_loglik(in, s, r, m == fh::Method::REML)).epsilon(1e-10));
            const auto g = oracle::gls(inst::to_vec(in.base.y), inst::to_mat(in.base.x),
                                       oracle::sar_cov(s, r, inst::weights_mat(in.w), inst::to_vec(in.base.sigma2_e)));
            for (std::size_t j = 0; j < g.beta.size(); ++j) {
                CHECK(pt.beta[static_cast<Eigen::Index>(j)] == doctest::Approx(g.beta[j]).epsilon(1e-9));
                CHECK(pt.beta_cov(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) ==
                      doctest::Approx(g.cov[j][j]).epsilon(1e-9));
            }
            const auto u = oracle_smooth(in, s, r, pt.beta);
            for (std::size_t i = 0; i < u.size(); ++i) {
                CHECK(pt.u_hat[static_cast<Eigen::Index>(i)] == doctest::Approx(u[i]).epsilon(1e-9).scale(1e-3));
            }
        }
    }
}

TEST_CASE("analytic gradient matches central differences") {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> rr(-0.9, 0.9), ss(0.002, 0.08);
    for (int rep = 0; rep < 100; ++rep) {
        const auto in = inst::random_sfh(gen, 6 + rep % 5, 1 + rep % 2, 0.01, 0.4, rep % 3);
        const SarLikelihood lik(in, rep % 2 ? fh::Method::ML : fh::Method::REML);
        const double s = ss(gen), r = rr(gen);
        const auto g = lik.evaluate(s, r, true).gradient;
        const double hs = 1e-5 * s, hr = 1e-5;
        const double fs = (lik.evaluate(s + hs, r, false).value - lik.evaluate(s - hs, r, false).value) / (2 * hs);
        const double fr = (lik.evaluate(s, r + hr, false).value - lik.evaluate(s, r - hr, false).value) / (2 * hr);
        CHECK(std::abs(g[0] - fs) <= 1e-5 * std::max(1.0, std::abs(g[0])));
        CHECK(std::abs(g[1] - fr) <= 1e-5 * std::max(1.0, std::abs(g[1])));
    }
}

TEST_CASE("at rho = 0 the spatial model reduces to Fay-Herriot") {
    std::mt19937_64 gen(4);
    for (int rep = 0; rep < 20; ++rep) {
        const auto in = inst::random_sfh(gen, 8, 2, 0.02, 0.0, 2);
        for (auto m : {fh::Method::ML, fh::Method::REML}) {
            const SarLikelihood lik(in, m);
            for (double s : {0.001, 0.01, 0.05}) {
                const auto a = lik.evaluate(s, 0.0, true);
                const auto b = fh::profile_loglik(in.base, s, m);
                CHECK(std::abs(a.value - b.value) <= 1e-10 * std::max(1.0, std::abs(b.value)));
                CHECK(std::abs(a.gradient[0] - b.score) <= 1e-8 * std::max(1.0, std::abs(b.score)));
            }
            SfhOptions opt;
            opt.fixed_rho = 0.0;
            const auto sf = fit_sfh(in, m, opt);
            const auto ff = fh::fit(in.base, m);
            CHECK(sf.rho == 0.0);
            CHECK(std::abs(sf.sigma2_eps - ff.sigma2_u) <= 1e-8);
            const auto ps = seblup(in, sf);
            const auto pf = fh::eblup(in.base, ff);
            for (std::size_t i = 0; i < ps.size(); ++i) CHECK(std::abs(ps[i].value - pf[i].value) <= 1e-8);
        }
    }
}

TEST_CASE("fit matches the 2-D grid oracle") {
    std::mt19937_64 gen(5);
    int matched = 0, discarded = 0;
    while (matched < 8) {
        const std::size_t d = 6 + static_cast<std::size_t>(matched % 3);
        const auto in = inst::random_sfh(gen, d, 1, 0.03, 0.6, 3);
        const auto oracle_fit = oracle::grid_argmax_2d(
            [&](double s, double r) { return oracle_loglik(in, s, r, true); }, 1e-5, 1.0, -0.99, 0.99);
        if (std::abs(oracle_fit.rho) > 0.95 || oracle_fit.sigma2 < 1e-4) {
            ++discarded;
            REQUIRE(discarded < 50);
            continue;
        }
        const auto f = fit_sfh(in, fh::Method::REML);
        CHECK(std::abs(f.rho - oracle_fit.rho) <= 1e-2);
        CHECK(std::abs(f.sigma2_eps - oracle_fit.sigma2) <= 1e-2 * oracle_fit.sigma2);
        CHECK(f.loglik >= oracle_fit.value - 1e-6);
        ++matched;
    }
}

TEST_CASE("SEBLUP is x beta plus the smoothed residual") {
    std::mt19937_64 gen(6);
    const auto in = inst::random_sfh(gen, 9, 2, 0.02, 0.7, 4);
    const auto f = fit_sfh(in, fh::Method::REML);
    const auto preds = seblup(in, f);
    const auto u = oracle_smooth(in, f.sigma2_eps, f.rho, f.beta);
    REQUIRE(preds.size() == 9);
    for (std::size_t i = 0; i < 9; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        CHECK(preds[i].kind == EstimatorKind::Seblup);
        CHECK(preds[i].value == doctest::Approx(in.base.x.row(ii).dot(f.beta) + u[i]).epsilon(1e-10));
        CHECK(preds[i].gamma > 0.0);
        CHECK(preds[i].gamma < 1.0);
    }
}

TEST_CASE("out-of-sample prediction uses the full-domain covariance") {
    // Eight areas: a 7-chain with a cross link, plus an island. Areas 1, 3
    // and 7 (the island) are unsampled.
    std::vector<std::vector<std::size_t>> nb{{1}, {0, 2, 5}, {1, 3}, {2, 4}, {3, 5}, {4, 6, 1}, {5}, {}};
    std::vector<std::string> ids;
    for (int i = 0; i < 8; ++i) ids.push_back("z" + std::to_string(i));
    const spatial::SpatialWeights full(ids, nb, "test");
    const std::vector<std::size_t> in_idx{0, 2, 4, 5, 6}, out_idx{1, 3, 7};

    std::mt19937_64 gen(7);
    SfhInput in;
    in.w = full.restrict_to(in_idx);
    in.base = inst::random_fh(gen, 5, 2, 0.01);
    SfhFit fit;
    fit.method = fh::Method::REML;
    fit.beta = Vector{{0.3, 0.1}};
    fit.sigma2_eps = 0.015;
    fit.rho = 0.6;
    Matrix x_out{{1.0, 0.2}, {1.0, 0.4}, {1.0, 0.9}};
    std::vector<std::string> out_ids{"z1", "z3", "z7"};
    const auto preds = seblup_out_of_sample(full, out_ids, x_out, in, fit);
    REQUIRE(preds.size() == 3);

    const auto om = oracle::sar_omega(fit.sigma2_eps, fit.rho, oracle::dense_weights(nb));
    oracle::Mat g(5, oracle::Vec(5));
    for (std::size_t a = 0; a < 5; ++a) {
        for (std::size_t b = 0; b < 5; ++b) g[a][b] = om[in_idx[a]][in_idx[b]] + (a == b ? in.base.sigma2_e[static_cast<Eigen::Index>(a)] : 0.0);
    }
    const Vector resid = in.base.y - in.base.x * fit.beta;
    const auto alpha = oracle::mul(oracle::gauss_jordan(g).inv, inst::to_vec(resid));
    for (std::size_t k = 0; k < 3; ++k) {
        double u = 0.0;
        for (std::size_t a = 0; a < 5; ++a) u += om[out_idx[k]][in_idx[a]] * alpha[a];
        const double synth = x_out.row(static_cast<Eigen::Index>(k)).dot(fit.beta);
        CHECK(preds[k].value == doctest::Approx(synth + u).epsilon(1e-10));
        CHECK((preds[k].flags & kFlagOutOfSample) != 0);
    }
    CHECK(preds[0].kind == EstimatorKind::Seblup);
    CHECK(preds[2].kind == EstimatorKind::Synthetic);
    CHECK((preds[2].flags & kFlagIsland) != 0);
    CHECK(preds[2].value == doctest::Approx(0.3 + 0.09));

    SfhInput wrong = in;
    wrong.w = inst::random_graph(gen, 5, 0);
    CHECK_THROWS_AS(seblup_out_of_sample(full, out_ids, x_out, wrong, fit), Error);
}

TEST_CASE("relabelling the areas permutes the fit's predictions") {
    std::mt19937_64 gen(8);
    const auto in = inst::random_sfh(gen, 10, 2, 0.02, 0.6, 5);
    const std::vector<std::size_t> perm{3, 7, 0, 9, 1, 5, 2, 8, 6, 4};
    SfhInput p = in;
    std::vector<std::string> ids;
    for (std::size_t k = 0; k < perm.size(); ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        const auto src = static_cast<Eigen::Index>(perm[k]);
        p.base.y[kk] = in.base.y[src];
        p.base.x.row(kk) = in.base.x.row(src);
        p.base.sigma2_e[kk] = in.base.sigma2_e[src];
        ids.push_back(in.w.ids()[perm[k]]);
    }
    p.w = in.w.reorder(ids);
    const auto f0 = fit_sfh(in, fh::Method::REML), f1 = fit_sfh(p, fh::Method::REML);
    CHECK(f1.rho == doctest::Approx(f0.rho).epsilon(1e-6));
    CHECK(f1.sigma2_eps == doctest::Approx(f0.sigma2_eps).epsilon(1e-6));
    const auto a = seblup(in, f0), b = seblup(p, f1);
    for (std::size_t k = 0; k < perm.size(); ++k) CHECK(b[k].value == doctest::Approx(a[perm[k]].value).epsilon(1e-6));
}

TEST_CASE("estimates are invariant to shifting y along the design") {
    std::mt19937_64 gen(9);
    std::normal_distribution<double> nd;
    for (int rep = 0; rep < 10; ++rep) {
        const auto in = inst::random_sfh(gen, 12, 2, 0.02, 0.5, 4);
        Vector a{{nd(gen), nd(gen)}};
        SfhInput shifted = in;
        shifted.base.y = in.base.y - in.base.x * a;
        const auto f0 = fit_sfh(in, fh::Method::REML), f1 = fit_sfh(shifted, fh::Method::REML);
        CHECK(std::abs(f0.sigma2_eps - f1.sigma2_eps) <= 1e-8);
        CHECK(std::abs(f0.rho - f1.rho) <= 1e-6);
    }
}

TEST_CASE("fixed rho and argument checks") {
    std::mt19937_64 gen(10);
    const auto in = inst::random_sfh(gen, 12, 2, 0.02, 0.5, 4);
    SfhOptions opt;
    opt.fixed_rho = 0.4;
    const auto f = fit_sfh(in, fh::Method::REML, opt);
    CHECK(f.rho == 0.4);
    CHECK(std::isnan(f.rho_se));
    const auto best = oracle::grid_argmax(
        [&](double s) { return oracle_loglik(in, s, 0.4, true); }, 0.0, 0.5, 0.5 / 4000.0);
    CHECK(std::abs(f.sigma2_eps - best) <= 1e-5);
    opt.fixed_rho = 1.5;
    CHECK(error_code([&] { fit_sfh(in, fh::Method::REML, opt); }) == Errc::InvalidInput);
    SfhInput bad = in;
    bad.w = inst::random_graph(gen, 5, 0);
    CHECK_THROWS_AS(fit_sfh(bad, fh::Method::REML), Error);
    CHECK_THROWS_AS(fit_sfh(in, fh::Method::Moments), Error);
}

TEST_CASE("asymmetric (k-nearest) weights: likelihood and gradient") {
    std::mt19937_64 gen(11);
    std::uniform_real_distribution<double> lat(-15.0, -5.0), lon(-80.0, -70.0);
    std::vector<spatial::AreaGeo> g(9);
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i].area_id = "k" + std::to_string(i);
        g[i].latitude = lat(gen);
        g[i].longitude = lon(gen);
    }
    SfhInput in;
    in.w = spatial::neighbors_knn(g, 2);
    in.base = inst::random_fh(gen, 9, 2, 0.02);
    for (auto m : {fh::Method::ML, fh::Method::REML}) {
        const SarLikelihood lik(in, m);
        for (double r : {-0.6, 0.2, 0.8}) {
            const double s = 0.015;
            const auto pt = lik.evaluate(s, r, true);
            CHECK(pt.value == doctest::Approx(oracle_loglik(in, s, r, m == fh::Method::REML)).epsilon(1e-10));
            const double h = 1e-5;
            const double fr = (lik.evaluate(s, r + h, false).value - lik.evaluate(s, r - h, false).value) / (2 * h);
            CHECK(std::abs(pt.gradient[1] - fr) <= 1e-5 * std::max(1.0, std::abs(fr)));
        }
    }
}

TEST_CASE("islands in the weights: likelihood and gradient") {
    std::vector<std::vector<std::size_t>> nb{{1}, {0, 2}, {1}, {}, {5}, {4}, {}};
    std::vector<std::string> ids;
    for (int i = 0; i < 7; ++i) ids.push_back("i" + std::to_string(i));
    std::mt19937_64 gen(12);
    SfhInput in;
    in.w = spatial::SpatialWeights(ids, nb, "test");
    in.base = inst::random_fh(gen, 7, 1, 0.02);
    const SarLikelihood lik(in, fh::Method::REML);
    for (double r : {-0.7, 0.5}) {
        const auto pt = lik.evaluate(0.01, r, true);
        CHECK(pt.value == doctest::Approx(oracle_loglik(in, 0.01, r, true)).epsilon(1e-10));
        const double h = 1e-5;
        const double fr = (lik.evaluate(0.01, r + h, false).value - lik.evaluate(0.01, r - h, false).value) / (2 * h);
        CHECK(std::abs(pt.gradient[1] - fr) <= 1e-5 * std::max(1.0, std::abs(fr)));
        const auto g = oracle::sar_cov(0.01, r, inst::weights_mat(in.w), inst::to_vec(in.base.sigma2_e));
        const auto om = oracle::sar_omega(0.01, r, inst::weights_mat(in.w));
        const auto sw = oracle::mul(om, oracle::gauss_jordan(g).inv);
        for (int i = 0; i < 7; ++i) CHECK(pt.self_weight[i] == doctest::Approx(sw[i][i]).epsilon(1e-10));
    }
}

TEST_CASE("on SAR data the spatial residual variance is below the FH one") {
    const auto w = simulate::rook_lattice(10, 12);
    std::mt19937_64 gen(13);
    const auto d = static_cast<Eigen::Index>(w.size());
    const auto base = inst::random_fh(gen, d, 2, 0.0);
    double sum_sfh = 0.0, sum_fh = 0.0;
    const int reps = 30;
    for (int r = 0; r < reps; ++r) {
        auto eng = make_stream(1300, static_cast<std::uint64_t>(r));
        SfhInput in;
        in.w = w;
        in.base = base;
        in.base.y = simulate::draw_sfh(base.x, Vector{{0.4, 0.2}}, 0.00401, 0.742, w, base.sigma2_e, eng).y;
        sum_sfh += fit_sfh(in, fh::Method::REML).sigma2_eps;
        sum_fh += fh::fit_reml(in.base).sigma2_u;
    }
    CHECK(sum_sfh < sum_fh);
}

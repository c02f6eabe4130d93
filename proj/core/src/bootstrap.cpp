#include "sae/bootstrap.hpp"

#include "sae/csv.hpp"
#include "sae/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <thread>

namespace sae::bootstrap {

using fh::Matrix;
using fh::Vector;

SarSampler::SarSampler(const spatial::SpatialWeights& w, double sigma2, double rho)
    : sigma_(std::sqrt(std::max(0.0, sigma2))), n_(static_cast<Eigen::Index>(w.size())) {
    if (!(std::abs(rho) < 1.0)) throw Error(Errc::SingularAtRho, "SAR sampler needs |rho| < 1");
    Eigen::SparseMatrix<double> a(n_, n_);
    a.setIdentity();
    a = a - rho * w.matrix();
    a.makeCompressed();
    lu_.compute(a);
    if (lu_.info() != Eigen::Success) throw Error(Errc::SingularAtRho, "I - rho W is singular");
}

Vector SarSampler::draw(Engine& eng) const {
    Vector eps(n_);
    for (Eigen::Index i = 0; i < n_; ++i) eps[i] = sigma_ * standard_normal(eng);
    return lu_.solve(eps);
}

namespace {

// Squared errors of one replicate, or nothing when the refit failed.
using Replicate = std::optional<Vector>;

template <class Fn>
std::vector<Replicate> run_replicates(int replicates, unsigned threads, Fn&& one) {
    std::vector<Replicate> out(static_cast<std::size_t>(replicates));
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(replicates)));
    if (workers == 1) {
        for (int b = 0; b < replicates; ++b) out[static_cast<std::size_t>(b)] = one(b);
        return out;
    }
    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (unsigned t = 0; t < workers; ++t) {
            pool.emplace_back([&, t] {
                for (int b = static_cast<int>(t); b < replicates; b += static_cast<int>(workers)) {
                    out[static_cast<std::size_t>(b)] = one(b);
                }
            });
        }
    }
    return out;
}

MseTable reduce(const std::vector<Replicate>& reps, const Vector& prediction, int replicates) {
    const auto n = prediction.size();
    Vector sum = Vector::Zero(n);
    Vector comp = Vector::Zero(n);  // Kahan compensation
    int effective = 0;
    for (const auto& r : reps) {
        if (!r) continue;
        ++effective;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double y = (*r)[i] - comp[i];
            const double t = sum[i] + y;
            comp[i] = (t - sum[i]) - y;
            sum[i] = t;
        }
    }
    if (static_cast<double>(effective) < 0.8 * static_cast<double>(replicates)) {
        throw Error(Errc::TooFewSuccessfulReplicates, std::to_string(effective) + " of " +
                                                          std::to_string(replicates) + " replicates converged");
    }
    MseTable t;
    t.replicates = replicates;
    t.b_effective = effective;
    t.below_reporting_minimum = replicates < kMinReportedReplicates;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mse = sum[i] / static_cast<double>(effective);
        t.prediction.push_back(prediction[i]);
        t.mse.push_back(mse);
        t.rrmse.push_back(prediction[i] != 0.0 ? std::sqrt(mse) / std::abs(prediction[i]) : std::nan(""));
    }
    return t;
}

void check_spec(const BootstrapSpec& spec) {
    if (spec.replicates < 1) throw Error(Errc::InvalidInput, "bootstrap needs at least one replicate");
}

Vector values_of(const std::vector<Prediction>& preds) {
    Vector v(static_cast<Eigen::Index>(preds.size()));
    for (std::size_t i = 0; i < preds.size(); ++i) v[static_cast<Eigen::Index>(i)] = preds[i].value;
    return v;
}

}  // namespace

MseTable bootstrap_mse_fh(const fh::FhInput& input, const fh::FhFit& fit, const BootstrapSpec& spec,
                          const OutOfSample* oos) {
    check_spec(spec);
    if (!fit.converged) throw Error(Errc::InvalidInput, "bootstrap needs a converged fit");
    const auto d = input.areas();
    const Eigen::Index n_out = oos != nullptr ? oos->x.rows() : 0;
    if (oos != nullptr && oos->x.cols() != input.covariates()) {
        throw Error(Errc::ColumnMismatch, "out-of-sample design does not match the model");
    }
    const Vector mean_in = input.x * fit.beta;
    const Vector mean_out = n_out > 0 ? Vector(oos->x * fit.beta) : Vector();
    const double sd_u = std::sqrt(std::max(0.0, fit.sigma2_u));
    const Vector sd_e = input.sigma2_e.cwiseSqrt();

    auto one = [&](int b) -> Replicate {
        Engine eng = make_stream(spec.seed, static_cast<std::uint64_t>(b));
        Vector theta(d + n_out);
        for (Eigen::Index i = 0; i < d; ++i) theta[i] = mean_in[i] + sd_u * standard_normal(eng);
        fh::FhInput star = input;
        for (Eigen::Index i = 0; i < d; ++i) star.y[i] = theta[i] + sd_e[i] * standard_normal(eng);
        for (Eigen::Index o = 0; o < n_out; ++o) theta[d + o] = mean_out[o] + sd_u * standard_normal(eng);

        Vector pred(d + n_out);
        if (spec.refit) {
            fh::FhFit refit;
            try {
                refit = fh::fit(star, spec.refit_method, spec.fh_options);
            } catch (const Error&) {
                return std::nullopt;
            }
            pred.head(d) = values_of(fh::eblup(star, refit));
            if (n_out > 0) pred.tail(n_out) = values_of(fh::synthetic_predict(oos->x, refit));
        } else {
            for (Eigen::Index i = 0; i < d; ++i) {
                const double g = fh::shrinkage(fit.sigma2_u, input.sigma2_e[i]);
                pred[i] = g * star.y[i] + (1.0 - g) * mean_in[i];
            }
            if (n_out > 0) pred.tail(n_out) = mean_out;
        }
        return Vector((pred - theta).array().square());
    };

    Vector prediction(d + n_out);
    prediction.head(d) = values_of(fh::eblup(input, fit));
    if (n_out > 0) prediction.tail(n_out) = values_of(fh::synthetic_predict(oos->x, fit));
    const auto reps = run_replicates(spec.replicates, spec.threads, one);
    return reduce(reps, prediction, spec.replicates);
}

MseTable bootstrap_mse_sfh(const sfh::SfhInput& input, const sfh::SfhFit& fit, const BootstrapSpec& spec,
                           const OutOfSample* oos) {
    check_spec(spec);
    input.validate();
    if (!fit.converged) throw Error(Errc::InvalidInput, "bootstrap needs a converged fit");
    const auto d = input.base.areas();
    const bool with_out = oos != nullptr && oos->x.rows() > 0;
    if (with_out && oos->full_w == nullptr) {
        throw Error(Errc::InvalidInput, "spatial out-of-sample bootstrap needs full-domain weights");
    }
    const Eigen::Index n_out = with_out ? oos->x.rows() : 0;

    // Random effects are drawn over the full domain when out-of-sample areas
    // are requested, otherwise over the sample with the in-sample weights.
    std::vector<Eigen::Index> idx_s, idx_o;
    const spatial::SpatialWeights& gen_w = with_out ? *oos->full_w : input.w;
    if (with_out) {
        for (const auto& id : input.w.ids()) idx_s.push_back(static_cast<Eigen::Index>(gen_w.index_of(id)));
        for (const auto& id : oos->ids) idx_o.push_back(static_cast<Eigen::Index>(gen_w.index_of(id)));
    } else {
        for (Eigen::Index i = 0; i < d; ++i) idx_s.push_back(i);
    }
    const SarSampler sampler(gen_w, fit.sigma2_eps, fit.rho);
    const Vector mean_in = input.base.x * fit.beta;
    const Vector mean_out = with_out ? Vector(oos->x * fit.beta) : Vector();
    const Vector sd_e = input.base.sigma2_e.cwiseSqrt();
    const sfh::SarLikelihood known(input, fit.method);
    // Replicates are drawn from the fitted model, so its estimates start each refit.
    sfh::SfhOptions refit_options = spec.sfh_options;
    if (!refit_options.start) refit_options.start = std::pair{fit.sigma2_eps, fit.rho};
    refit_options.refine = false;

    auto one = [&](int b) -> Replicate {
        Engine eng = make_stream(spec.seed, static_cast<std::uint64_t>(b));
        const Vector u = sampler.draw(eng);
        Vector theta(d + n_out);
        for (Eigen::Index i = 0; i < d; ++i) theta[i] = mean_in[i] + u[idx_s[static_cast<std::size_t>(i)]];
        for (Eigen::Index o = 0; o < n_out; ++o) theta[d + o] = mean_out[o] + u[idx_o[static_cast<std::size_t>(o)]];
        sfh::SfhInput star = input;
        for (Eigen::Index i = 0; i < d; ++i) star.base.y[i] = theta[i] + sd_e[i] * standard_normal(eng);

        Vector pred(d + n_out);
        try {
            if (spec.refit) {
                const auto refit = sfh::fit_sfh(star, spec.refit_method, refit_options);
                const sfh::SarLikelihood lik(star, spec.refit_method);
                const Vector mean_star = star.base.x * refit.beta;
                pred.head(d) = mean_star + lik.smooth(refit.sigma2_eps, refit.rho, Vector(star.base.y - mean_star), false).u;
                if (with_out) {
                    pred.tail(n_out) = values_of(sfh::seblup_out_of_sample(*oos->full_w, oos->ids, oos->x, star, refit));
                }
            } else {
                const auto sm = known.smooth(fit.sigma2_eps, fit.rho, Vector(star.base.y - mean_in), false);
                pred.head(d) = mean_in + sm.u;
                if (with_out) {
                    pred.tail(n_out) = values_of(sfh::seblup_out_of_sample(*oos->full_w, oos->ids, oos->x, star, fit));
                }
            }
        } catch (const Error&) {
            return std::nullopt;
        }
        return Vector((pred - theta).array().square());
    };

    Vector prediction(d + n_out);
    prediction.head(d) = values_of(sfh::seblup(input, fit));
    if (with_out) prediction.tail(n_out) = values_of(sfh::seblup_out_of_sample(*oos->full_w, oos->ids, oos->x, input, fit));
    const auto reps = run_replicates(spec.replicates, spec.threads, one);
    return reduce(reps, prediction, spec.replicates);
}

void write_mse_csv(const std::filesystem::path& path, std::span<const std::string> area_ids, const MseTable& table) {
    if (area_ids.size() != table.mse.size()) throw Error(Errc::InvalidInput, "id count does not match MSE table");
    std::ofstream out(path);
    if (!out) throw Error(Errc::Io, "cannot write " + path.string());
    out << "area_id,prediction,mse,rrmse,b_effective\n";
    for (std::size_t i = 0; i < area_ids.size(); ++i) {
        out << csv::quote(area_ids[i]) << ',' << csv::format_double(table.prediction[i]) << ','
            << csv::format_double(table.mse[i]) << ',' << csv::format_double(table.rrmse[i]) << ','
            << table.b_effective << '\n';
    }
}

}  // namespace sae::bootstrap

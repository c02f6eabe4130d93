#include "sae/bootstrap.hpp"
#include "sae/fh.hpp"
#include "sae/sfh.hpp"
#include "sae/simulate.hpp"
#include "sae/weights.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace sae;

namespace {

struct Lattice {
    sfh::SfhInput input;
};

// Square lattice with an intercept and one covariate, SAR effects at rho = 0.7.
Lattice make_lattice(std::size_t side) {
    const auto d = static_cast<Eigen::Index>(side * side);
    std::mt19937_64 gen(side);
    std::uniform_real_distribution<double> u(0.0, 1.0), v(0.002, 0.02);
    fh::Matrix x = fh::Matrix::Ones(d, 2);
    fh::Vector s2e(d);
    for (Eigen::Index i = 0; i < d; ++i) {
        x(i, 1) = u(gen);
        s2e[i] = v(gen);
    }
    Lattice out;
    out.input.w = simulate::rook_lattice(side, side);
    auto eng = make_stream(7, side);
    const auto draw = simulate::draw_sfh(x, fh::Vector{{0.4, 0.1}}, 0.004, 0.7, out.input.w, s2e, eng);
    out.input.base = {draw.y, x, s2e};
    return out;
}

void BM_FhRemlFit(benchmark::State& state) {
    const auto lat = make_lattice(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(fh::fit_reml(lat.input.base));
    state.SetComplexityN(state.range(0) * state.range(0));
}
BENCHMARK(BM_FhRemlFit)->Arg(10)->Arg(20)->Arg(40)->Unit(benchmark::kMicrosecond);

void BM_SfhEvaluate(benchmark::State& state) {
    const auto lat = make_lattice(static_cast<std::size_t>(state.range(0)));
    const sfh::SarLikelihood lik(lat.input, fh::Method::REML);
    const bool grad = state.range(1) != 0;
    for (auto _ : state) benchmark::DoNotOptimize(lik.evaluate(0.004, 0.7, grad));
}
BENCHMARK(BM_SfhEvaluate)->ArgsProduct({{10, 20, 40}, {0, 1}})->Unit(benchmark::kMicrosecond);

void BM_SfhFit(benchmark::State& state) {
    const auto lat = make_lattice(static_cast<std::size_t>(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(sfh::fit_sfh(lat.input, fh::Method::REML));
}
BENCHMARK(BM_SfhFit)->Arg(10)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_ContiguityWeights(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    const auto geos = simulate::lattice(side, side);
    for (auto _ : state) benchmark::DoNotOptimize(spatial::neighbors_contiguity(geos));
}
BENCHMARK(BM_ContiguityWeights)->Arg(20)->Arg(44)->Unit(benchmark::kMillisecond);

void BM_KnnWeights(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    const auto geos = simulate::lattice(side, side);
    for (auto _ : state) benchmark::DoNotOptimize(spatial::neighbors_knn(geos, 5));
}
BENCHMARK(BM_KnnWeights)->Arg(20)->Arg(44)->Unit(benchmark::kMillisecond);

void BM_FhBootstrap(benchmark::State& state) {
    const auto lat = make_lattice(20);
    const auto fit = fh::fit_reml(lat.input.base);
    bootstrap::BootstrapSpec spec;
    spec.replicates = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(bootstrap::bootstrap_mse_fh(lat.input.base, fit, spec));
}
BENCHMARK(BM_FhBootstrap)->Arg(100)->Arg(400)->Unit(benchmark::kMillisecond);

void BM_SfhBootstrap(benchmark::State& state) {
    const auto lat = make_lattice(15);
    const auto fit = sfh::fit_sfh(lat.input, fh::Method::REML);
    bootstrap::BootstrapSpec spec;
    spec.model = bootstrap::Model::SFH;
    spec.replicates = static_cast<int>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(bootstrap::bootstrap_mse_sfh(lat.input, fit, spec));
}
BENCHMARK(BM_SfhBootstrap)->Arg(100)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();

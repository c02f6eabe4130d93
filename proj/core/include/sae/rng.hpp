#pragma once

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>

#include <cstdint>

namespace sae {

using Engine = boost::random::mt19937_64;

// Independent, reproducible stream for (seed, stream index). The index is
// mixed through splitmix64 so neighbouring indices give unrelated states.
inline Engine make_stream(std::uint64_t seed, std::uint64_t index) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    return Engine(mix(mix(seed) ^ mix(index + 0x632be59bd9b4e019ULL)));
}

// boost's normal_distribution is implementation-fixed (ziggurat), so draws are
// identical across standard libraries.
inline double standard_normal(Engine& eng) {
    boost::random::normal_distribution<double> dist(0.0, 1.0);
    return dist(eng);
}

}  // namespace sae

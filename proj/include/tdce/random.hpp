#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace tdce {

/// SplitMix64 finalizer; used to derive independent stream seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
    return mix_seed(mix_seed(base) ^ (stream * 0xD1B54A32D192ED03ULL + 1));
}

/// Seeded random source. All stochastic routines take one of these (or an
/// explicit noise array) so results are reproducible bit for bit.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(mix_seed(seed)) {}

    std::uint64_t bits() { return engine_(); }

    /// Uniform on the open interval (0, 1).
    double uniform_open() {
        return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal() { return normal_(engine_); }

    /// Standard Gumbel(0, 1) variate.
    double gumbel() { return -std::log(-std::log(uniform_open())); }

    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform_open() * static_cast<double>(n)) % n;
    }

    Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Eigen::MatrixXd m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
        return m;
    }

    Eigen::VectorXd normal_vector(Eigen::Index n) { return normal_matrix(n, 1); }

    Eigen::VectorXd gumbel_vector(Eigen::Index n) {
        Eigen::VectorXd v(n);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = gumbel();
        return v;
    }

    /// Uniform draw from the probability simplex (flat Dirichlet).
    Eigen::VectorXd simplex_uniform(Eigen::Index k) {
        Eigen::VectorXd v(k);
        for (Eigen::Index i = 0; i < k; ++i) v(i) = -std::log(uniform_open());
        return v / v.sum();
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace tdce

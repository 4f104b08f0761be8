#pragma once

// Gaussian + Gumbel-softmax diffusion over the encoded tabular layout:
// schedules, forward samplers, categorical posteriors, the unguided reverse
// step, and joint training of the denoiser.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tdce/data.hpp"
#include "tdce/error.hpp"
#include "tdce/nn.hpp"
#include "tdce/random.hpp"

namespace tdce::diffusion {

enum class ScheduleKind { linear };

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{i<=t} alpha_i for
/// t = 1..T. alpha_bar(0) is defined as 1.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    static NoiseSchedule from_betas(std::vector<double> betas) {
        if (betas.size() < 2) throw DomainError("noise schedule needs T >= 2");
        NoiseSchedule s;
        s.beta_.assign(1, 0.0);
        s.alpha_bar_.assign(1, 1.0);
        for (double b : betas) {
            if (!(b > 0.0 && b < 1.0)) throw DomainError("noise schedule: beta must lie in (0, 1)");
            s.beta_.push_back(b);
            s.alpha_bar_.push_back(s.alpha_bar_.back() * (1.0 - b));
        }
        return s;
    }

    int steps() const { return static_cast<int>(beta_.size()) - 1; }
    double beta(int t) const { return beta_.at(check(t, 1)); }
    double alpha(int t) const { return 1.0 - beta(t); }
    double alpha_bar(int t) const { return alpha_bar_.at(check(t, 0)); }

    /// Variance of q(x_{t-1} | x_t, x_0); zero at t = 1.
    double posterior_variance(int t) const { return beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)); }

    const std::vector<double>& betas() const { return beta_; }

private:
    std::size_t check(int t, int lo) const {
        if (t < lo || t > steps())
            throw DomainError("time step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                              std::to_string(steps()) + "]");
        return static_cast<std::size_t>(t);
    }

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
};

/// Linear betas from 1e-4 to 0.02 over T steps.
/// Default chain length; with the linear schedule alpha_bar_T is just under 0.05.
inline constexpr int kDefaultSteps = 300;

inline NoiseSchedule build_schedule(int steps, ScheduleKind kind = ScheduleKind::linear) {
    if (steps < 2) throw DomainError("build_schedule: T must be at least 2");
    std::vector<double> b(static_cast<std::size_t>(steps));
    switch (kind) {
        case ScheduleKind::linear:
            for (int i = 0; i < steps; ++i) b[static_cast<std::size_t>(i)] = 1e-4 + (0.02 - 1e-4) * i / (steps - 1);
            break;
    }
    return NoiseSchedule::from_betas(std::move(b));
}

// ---------------------------------------------------------------------------
// Continuous chain

/// sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps for an explicit alpha_bar.
template <class A, class B>
typename A::PlainObject q_sample_at(const Eigen::MatrixBase<A>& x0, double alpha_bar, const Eigen::MatrixBase<B>& eps) {
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw ShapeError("q_sample: noise shape mismatch");
    return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

template <class A, class B>
typename A::PlainObject q_sample_continuous(const Eigen::MatrixBase<A>& x0, int t, const NoiseSchedule& s,
                                            const Eigen::MatrixBase<B>& eps) {
    if (t < 1 || t > s.steps()) throw DomainError("q_sample_continuous: t outside [1, T]");
    return q_sample_at(x0, s.alpha_bar(t), eps);
}

/// Mean of the reverse step given a noise prediction.
template <class A, class B>
typename A::PlainObject reverse_mean(const Eigen::MatrixBase<A>& x_t, int t, const NoiseSchedule& s,
                                     const Eigen::MatrixBase<B>& eps_hat) {
    const double b = s.beta(t);
    return (x_t - (b / std::sqrt(1.0 - s.alpha_bar(t))) * eps_hat) / std::sqrt(1.0 - b);
}

/// x_{t-1} = mean + sqrt(posterior variance) * noise; the noise is dropped at t = 1.
template <class A, class B, class C>
typename A::PlainObject p_sample_continuous_unguided(const Eigen::MatrixBase<A>& x_t, int t, const NoiseSchedule& s,
                                                     const Eigen::MatrixBase<B>& eps_hat,
                                                     const Eigen::MatrixBase<C>& noise) {
    if (t < 1 || t > s.steps()) throw DomainError("p_sample: t outside [1, T]");
    typename A::PlainObject mu = reverse_mean(x_t, t, s, eps_hat);
    if (t > 1) mu += std::sqrt(s.posterior_variance(t)) * noise;
    return mu;
}

// ---------------------------------------------------------------------------
// Categorical chain (Gumbel-softmax relaxation)

/// softmax((g + log_pi) / tau), max-subtracted.
inline Eigen::VectorXd gumbel_softmax_sample(const Eigen::Ref<const Eigen::VectorXd>& log_pi, double tau,
                                             const Eigen::Ref<const Eigen::VectorXd>& gumbel) {
    if (!(tau > 0.0)) throw DomainError("gumbel_softmax_sample: temperature must be positive");
    if (log_pi.size() != gumbel.size()) throw ShapeError("gumbel_softmax_sample: noise length mismatch");
    Eigen::VectorXd z = (gumbel + log_pi) / tau;
    z.array() -= z.maxCoeff();
    z = z.array().exp().matrix();
    return z / z.sum();
}

/// Mixing distribution alpha_bar x0 + (1 - alpha_bar) / K.
inline Eigen::VectorXd mix_uniform(const Eigen::Ref<const Eigen::VectorXd>& x0, double alpha_bar) {
    const double k = static_cast<double>(x0.size());
    return (alpha_bar * x0.array() + (1.0 - alpha_bar) / k).matrix();
}

inline Eigen::VectorXd q_sample_categorical(const Eigen::Ref<const Eigen::VectorXd>& x0, int t, const NoiseSchedule& s,
                                            double tau, const Eigen::Ref<const Eigen::VectorXd>& gumbel) {
    if (t < 1 || t > s.steps()) throw DomainError("q_sample_categorical: t outside [1, T]");
    return gumbel_softmax_sample(mix_uniform(x0, s.alpha_bar(t)).array().log().matrix(), tau, gumbel);
}

/// Normalised [alpha_t x_t + (1 - alpha_t)/K] * [alpha_bar_{t-1} x0 + (1 - alpha_bar_{t-1})/K].
inline Eigen::VectorXd categorical_posterior(const Eigen::Ref<const Eigen::VectorXd>& x_t,
                                             const Eigen::Ref<const Eigen::VectorXd>& x0, int t,
                                             const NoiseSchedule& s) {
    if (t < 1 || t > s.steps()) throw DomainError("categorical_posterior: t must lie in [1, T]");
    if (x_t.size() != x0.size()) throw ShapeError("categorical_posterior: block width mismatch");
    Eigen::VectorXd p = mix_uniform(x_t, s.alpha(t)).cwiseProduct(mix_uniform(x0, s.alpha_bar(t - 1)));
    return p / p.sum();
}

/// KL(q || p) between categorical parameter vectors; terms with q = 0 vanish.
inline double categorical_kl(const Eigen::Ref<const Eigen::VectorXd>& q, const Eigen::Ref<const Eigen::VectorXd>& p) {
    double kl = 0.0;
    for (Eigen::Index i = 0; i < q.size(); ++i)
        if (q(i) > 0.0) kl += q(i) * (std::log(q(i)) - std::log(p(i)));
    return kl;
}

// ---------------------------------------------------------------------------
// Denoiser

inline Eigen::VectorXd time_embedding(int t, Eigen::Index dim) {
    Eigen::VectorXd e(dim);
    const Eigen::Index half = dim / 2;
    for (Eigen::Index i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e(i) = std::sin(t * freq);
        e(i + half) = std::cos(t * freq);
    }
    if (dim % 2) e(dim - 1) = 0.0;
    return e;
}

/// Noise-prediction network over the encoded layout. Output uses the same
/// layout as its input: predicted noise on continuous coordinates and a
/// softmax estimate of x0 on every categorical block.
struct Denoiser {
    nn::DenseNetwork net;
    data::Layout layout;
    NoiseSchedule schedule;
    Eigen::Index time_dim = 32;

    Eigen::MatrixXd embed(const std::vector<int>& t) const {
        Eigen::MatrixXd e(time_dim, static_cast<Eigen::Index>(t.size()));
        for (std::size_t j = 0; j < t.size(); ++j) e.col(static_cast<Eigen::Index>(j)) = time_embedding(t[j], time_dim);
        return e;
    }

    nn::ForwardResult run(const Eigen::MatrixXd& x_t, const std::vector<int>& t) const {
        if (x_t.rows() != layout.dim) throw ShapeError("denoiser: state has wrong dimension");
        if (static_cast<Eigen::Index>(t.size()) != x_t.cols()) throw ShapeError("denoiser: one time step per column");
        return nn::forward(net, x_t, embed(t));
    }

    nn::ForwardResult run(const Eigen::MatrixXd& x_t, int t) const {
        return run(x_t, std::vector<int>(static_cast<std::size_t>(x_t.cols()), t));
    }
};

/// Reconstructs x0 from a denoiser output: continuous part by inverting the
/// noise prediction, categorical blocks copied from the softmax heads.
inline Eigen::MatrixXd x0_from_output(const Denoiser& d, const Eigen::MatrixXd& x_t, const Eigen::MatrixXd& out,
                                      const std::vector<int>& t) {
    Eigen::MatrixXd x0 = out;
    const auto n = d.layout.num_dim;
    for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
        const double ab = d.schedule.alpha_bar(t[static_cast<std::size_t>(j)]);
        x0.col(j).head(n) = (x_t.col(j).head(n) - std::sqrt(1.0 - ab) * out.col(j).head(n)) / std::sqrt(ab);
    }
    return x0;
}

inline Eigen::MatrixXd predict_x0(const Denoiser& d, const Eigen::MatrixXd& x_t, int t) {
    const std::vector<int> ts(static_cast<std::size_t>(x_t.cols()), t);
    return x0_from_output(d, x_t, d.run(x_t, ts).output, ts);
}

/// Unguided reverse step for the continuous block of a full encoded state.
inline Eigen::VectorXd p_sample_continuous_unguided(const Eigen::VectorXd& x_t, int t, const Denoiser& d,
                                                    const Eigen::VectorXd& noise) {
    const Eigen::VectorXd out = d.run(x_t, t).output.col(0);
    const auto n = d.layout.num_dim;
    return p_sample_continuous_unguided(x_t.head(n), t, d.schedule, out.head(n), noise);
}

inline Denoiser make_denoiser(const data::Layout& layout, NoiseSchedule schedule, const std::vector<Eigen::Index>& hidden,
                              Eigen::Index time_dim, Rng& rng) {
    std::vector<nn::LayerSpec> specs;
    for (auto h : hidden) specs.push_back({h, nn::Activation::relu});
    std::vector<nn::Group> groups;
    for (const auto& b : layout.blocks) groups.push_back({b.offset, b.width});
    specs.push_back({layout.dim, nn::Activation::softmax_groups, groups});
    return {nn::make_mlp(layout.dim + time_dim, specs, rng), layout, std::move(schedule), time_dim};
}

// ---------------------------------------------------------------------------
// Training

struct DiffusionTrainConfig {
    std::vector<Eigen::Index> hidden{128, 128, 128};
    Eigen::Index time_dim = 32;
    int epochs = 300;
    Eigen::Index batch_size = 256;
    double learning_rate = 1e-3;
    double tau = 0.5;  // temperature of the categorical forward sampler
    std::uint64_t seed = 0;
};

struct LossRecord {
    long step = 0;
    int epoch = 0;
    double continuous = 0.0;
    double categorical = 0.0;
};

struct DiffusionTrainResult {
    Denoiser denoiser;
    std::vector<LossRecord> steps;
    std::vector<double> epoch_loss;  // mean total loss per epoch
};

struct BatchLoss {
    double continuous = 0.0;
    double categorical = 0.0;
    Eigen::MatrixXd output_grad;
};

/// Loss and dLoss/d(output) for one noised batch: mean over the batch of the
/// per-example noise MSE plus the summed categorical posterior KL terms.
inline BatchLoss diffusion_loss(const Denoiser& d, const Eigen::MatrixXd& x0, const Eigen::MatrixXd& x_t,
                                const Eigen::MatrixXd& eps, const std::vector<int>& t, const Eigen::MatrixXd& out) {
    const auto& l = d.layout;
    const auto n = l.num_dim;
    const double batch = static_cast<double>(x0.cols());
    BatchLoss r;
    r.output_grad = Eigen::MatrixXd::Zero(out.rows(), out.cols());
    if (n > 0) {
        const Eigen::MatrixXd diff = out.topRows(n) - eps;
        r.continuous = diff.squaredNorm() / (static_cast<double>(n) * batch);
        r.output_grad.topRows(n) = 2.0 * diff / (static_cast<double>(n) * batch);
    }
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        const int tj = t[static_cast<std::size_t>(j)];
        const double at = d.schedule.alpha(tj);
        const double ab_prev = d.schedule.alpha_bar(tj - 1);
        for (const auto& b : l.blocks) {
            const double k = static_cast<double>(b.width);
            const Eigen::VectorXd q = categorical_posterior(x_t.col(j).segment(b.offset, b.width),
                                                            x0.col(j).segment(b.offset, b.width), tj, d.schedule);
            const Eigen::VectorXd a = (at * x_t.col(j).segment(b.offset, b.width).array() + (1.0 - at) / k).matrix();
            const Eigen::VectorXd u =
                a.cwiseProduct((ab_prev * out.col(j).segment(b.offset, b.width).array() + (1.0 - ab_prev) / k).matrix());
            const double su = u.sum();
            r.categorical += categorical_kl(q, u / su) / batch;
            for (Eigen::Index i = 0; i < b.width; ++i)
                r.output_grad(b.offset + i, j) = ab_prev * a(i) * (1.0 / su - q(i) / u(i)) / batch;
        }
    }
    return r;
}

/// Draws t ~ U{1..T}, Gaussian and Gumbel noise for a clean batch and forms x_t.
inline Eigen::MatrixXd noise_batch(const Denoiser& d, const Eigen::MatrixXd& x0, double tau, Rng& rng,
                                   std::vector<int>& t, Eigen::MatrixXd& eps) {
    const auto& l = d.layout;
    const int T = d.schedule.steps();
    t.resize(static_cast<std::size_t>(x0.cols()));
    eps = rng.normal_matrix(l.num_dim, x0.cols());
    Eigen::MatrixXd x_t(x0.rows(), x0.cols());
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        const int tj = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(T)));
        t[static_cast<std::size_t>(j)] = tj;
        x_t.col(j).head(l.num_dim) = q_sample_continuous(x0.col(j).head(l.num_dim), tj, d.schedule, eps.col(j));
        for (const auto& b : l.blocks)
            x_t.col(j).segment(b.offset, b.width) =
                q_sample_categorical(x0.col(j).segment(b.offset, b.width), tj, d.schedule, tau, rng.gumbel_vector(b.width));
    }
    return x_t;
}

/// Fits the denoiser with Adam on shuffled minibatches of `train` (encoded
/// columns). The terminal KL term is constant and omitted.
inline DiffusionTrainResult train_diffusion(const Eigen::MatrixXd& train, const data::Layout& layout,
                                            NoiseSchedule schedule, const DiffusionTrainConfig& cfg) {
    if (train.rows() != layout.dim) throw ShapeError("train_diffusion: data does not match layout");
    if (train.cols() == 0) throw TrainingError("train_diffusion: no training rows");
    Rng rng(cfg.seed);
    DiffusionTrainResult r{make_denoiser(layout, std::move(schedule), cfg.hidden, cfg.time_dim, rng), {}, {}};
    auto& d = r.denoiser;
    auto adam = nn::AdamState::for_network(d.net, cfg.learning_rate);
    const auto n = train.cols();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double epoch_sum = 0.0;
        int batches = 0;
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const auto m = std::min(cfg.batch_size, n - start);
            Eigen::MatrixXd x0(layout.dim, m);
            for (Eigen::Index j = 0; j < m; ++j) x0.col(j) = train.col(order[static_cast<std::size_t>(start + j)]);
            std::vector<int> t;
            Eigen::MatrixXd eps;
            const Eigen::MatrixXd x_t = noise_batch(d, x0, cfg.tau, rng, t, eps);
            const auto fw = d.run(x_t, t);
            auto loss = diffusion_loss(d, x0, x_t, eps, t, fw.output);
            ++step;
            if (!std::isfinite(loss.continuous) || !std::isfinite(loss.categorical))
                throw TrainingError("train_diffusion: non-finite loss at step " + std::to_string(step) + " (epoch " +
                                    std::to_string(epoch) + ", continuous " + std::to_string(loss.continuous) +
                                    ", categorical " + std::to_string(loss.categorical) + ")");
            const auto grads = nn::backward(d.net, fw.cache, loss.output_grad);
            nn::optimizer_step(d.net, grads, adam);
            r.steps.push_back({step, epoch, loss.continuous, loss.categorical});
            epoch_sum += loss.continuous + loss.categorical;
            ++batches;
        }
        r.epoch_loss.push_back(epoch_sum / batches);
    }
    return r;
}

inline void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& steps) {
    out << "step,continuous_loss,categorical_loss\n";
    for (const auto& s : steps)
        out << s.step << ',' << data::format_double(s.continuous) << ',' << data::format_double(s.categorical) << '\n';
}

inline nlohmann::json to_json(const Denoiser& d, const std::string& schema_hash) {
    return {{"format", "tdce-denoiser"},
            {"version", 1},
            {"schema_hash", schema_hash},
            {"schedule", {{"kind", "linear"}, {"steps", d.schedule.steps()}}},
            {"time_dim", d.time_dim},
            {"network", nn::to_json(d.net)}};
}

inline Denoiser denoiser_from_json(const nlohmann::json& j, const data::Layout& layout) {
    if (j.value("format", "") != "tdce-denoiser" || j.value("version", 0) != 1)
        throw ShapeError("denoiser json: unsupported format or version");
    Denoiser d{nn::network_from_json(j.at("network")), layout,
               build_schedule(j.at("schedule").at("steps").get<int>()), j.at("time_dim").get<Eigen::Index>()};
    if (d.net.input_dim() != layout.dim + d.time_dim || d.net.output_dim() != layout.dim)
        throw ShapeError("denoiser json: network does not match the schema layout");
    return d;
}

}  // namespace tdce::diffusion

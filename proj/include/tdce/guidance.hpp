#pragma once

// Classifier-guided counterfactual generation: the classifier under
// explanation, gradient guidance for continuous (adaptive, normalised) and
// categorical (Gumbel-softmax logit shift) coordinates, immutable-feature
// blending, and a Wachter-style gradient baseline.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tdce/data.hpp"
#include "tdce/diffusion.hpp"
#include "tdce/error.hpp"
#include "tdce/nn.hpp"
#include "tdce/random.hpp"

namespace tdce::guidance {

// ---------------------------------------------------------------------------
// Classifier

/// Binary classifier with a two-logit output head.
struct Classifier {
    nn::DenseNetwork net;

    Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const { return nn::forward(net, x).output; }

    Eigen::MatrixXd probabilities(const Eigen::MatrixXd& x) const {
        Eigen::MatrixXd z = logits(x);
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            z.col(j).array() -= z.col(j).maxCoeff();
            z.col(j) = z.col(j).array().exp().matrix();
            z.col(j) /= z.col(j).sum();
        }
        return z;
    }

    double probability(const Eigen::VectorXd& x, int label) const { return probabilities(x)(label, 0); }

    std::vector<int> predict(const Eigen::MatrixXd& x) const {
        const Eigen::MatrixXd z = logits(x);
        std::vector<int> out;
        for (Eigen::Index j = 0; j < z.cols(); ++j) out.push_back(z(1, j) > z(0, j) ? 1 : 0);
        return out;
    }

    int predict(const Eigen::VectorXd& x) const { return predict(Eigen::MatrixXd(x)).front(); }
};

struct ClassifierTrainConfig {
    std::vector<Eigen::Index> hidden{64, 64, 64};
    int epochs = 40;
    Eigen::Index batch_size = 128;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
    Classifier classifier;
    double validation_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

inline double accuracy(const Classifier& c, const data::EncodedBatch& b) {
    if (b.size() == 0) return 0.0;
    const auto pred = c.predict(b.features);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == b.labels[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Cross-entropy training with Adam. Validation accuracy is measured once at the end.
inline ClassifierTrainResult train_classifier(const data::EncodedBatch& train, const data::EncodedBatch& val,
                                              const ClassifierTrainConfig& cfg) {
    if (train.size() == 0 || static_cast<Eigen::Index>(train.labels.size()) != train.size())
        throw TrainingError("train_classifier: training batch needs one label per row");
    Rng rng(cfg.seed);
    std::vector<nn::LayerSpec> specs;
    for (auto h : cfg.hidden) specs.push_back({h, nn::Activation::relu});
    specs.push_back({2, nn::Activation::identity});
    ClassifierTrainResult r{{nn::make_mlp(train.features.rows(), specs, rng)}, 0.0, {}};
    auto& net = r.classifier.net;
    auto adam = nn::AdamState::for_network(net, cfg.learning_rate);
    const auto n = train.size();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double total = 0.0;
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const auto m = std::min(cfg.batch_size, n - start);
            Eigen::MatrixXd x(train.features.rows(), m);
            std::vector<int> y(static_cast<std::size_t>(m));
            for (Eigen::Index j = 0; j < m; ++j) {
                const auto src = order[static_cast<std::size_t>(start + j)];
                x.col(j) = train.features.col(src);
                y[static_cast<std::size_t>(j)] = train.labels[static_cast<std::size_t>(src)];
            }
            const auto fw = nn::forward(net, x);
            Eigen::MatrixXd grad(2, m);
            double loss = 0.0;
            for (Eigen::Index j = 0; j < m; ++j) {
                const Eigen::Vector2d z = fw.output.col(j);
                const double mx = z.maxCoeff();
                const double lse = mx + std::log((z.array() - mx).exp().sum());
                const int label = y[static_cast<std::size_t>(j)];
                loss += lse - z(label);
                const Eigen::Vector2d p = (z.array() - lse).exp();
                grad.col(j) = p / static_cast<double>(m);
                grad(label, j) -= 1.0 / static_cast<double>(m);
            }
            if (!std::isfinite(loss))
                throw TrainingError("train_classifier: loss diverged in epoch " + std::to_string(epoch));
            nn::optimizer_step(net, nn::backward(net, fw.cache, grad), adam);
            total += loss;
        }
        r.epoch_loss.push_back(total / static_cast<double>(n));
    }
    if (val.size() > 0) r.validation_accuracy = accuracy(r.classifier, val);
    return r;
}

/// d log p(target | x) / dx for every column of `x`.
inline Eigen::MatrixXd classifier_grad(const Classifier& c, const Eigen::MatrixXd& x, int target) {
    const auto fw = nn::forward(c.net, x);
    Eigen::MatrixXd g(2, x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        const Eigen::Vector2d z = fw.output.col(j);
        const double mx = z.maxCoeff();
        Eigen::Vector2d p = (z.array() - mx).exp();
        p /= p.sum();
        g.col(j) = -p;
        g(target, j) += 1.0;
    }
    return nn::backward(c.net, fw.cache, g, nn::BackwardMode::input_only).input;
}

inline Eigen::VectorXd classifier_grad(const Classifier& c, const Eigen::VectorXd& x, int target) {
    return classifier_grad(c, Eigen::MatrixXd(x), target).col(0);
}

// ---------------------------------------------------------------------------
// Guided updates

inline constexpr double kZeroNorm = 1e-12;

/// mu + Sigma * ||mu|| * (c * g_cls/||g_cls|| - w * g_dist/||g_dist||) with a
/// diagonal Sigma. A gradient whose norm is below 1e-12 contributes nothing.
inline Eigen::VectorXd continuous_guided_mean(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                                              const Eigen::VectorXd& grad_cls, const Eigen::VectorXd& grad_dist,
                                              double distance_weight = 1.0, double classifier_weight = 1.0) {
    if (sigma.size() != mu.size() || grad_cls.size() != mu.size() || grad_dist.size() != mu.size())
        throw ShapeError("continuous_guided_mean: length mismatch");
    Eigen::VectorXd g = Eigen::VectorXd::Zero(mu.size());
    const double nc = grad_cls.norm();
    const double nd = grad_dist.norm();
    if (nc >= kZeroNorm) g += classifier_weight * grad_cls / nc;
    if (nd >= kZeroNorm) g -= distance_weight * grad_dist / nd;
    return mu + mu.norm() * sigma.cwiseProduct(g);
}

inline Eigen::VectorXd categorical_guided_logits(const Eigen::VectorXd& log_pi, const Eigen::VectorXd& g_cat,
                                                 double lambda) {
    if (log_pi.size() != g_cat.size()) throw ShapeError("categorical_guided_logits: block width mismatch");
    return log_pi + lambda * g_cat;
}

// ---------------------------------------------------------------------------
// Configuration and results

struct GuidanceConfig {
    int target = 1;
    std::optional<data::ImmutableMask> mask;  // defaults to the schema's immutable flags
    double lambda = 0.1;
    double tau_start = 1.0;
    double tau_end = 0.3;
    int t_start = 0;  // 0 means T / 2
    double distance_weight = 0.1;
    double guidance_scale = 60.0;     // multiplies Sigma in the continuous update
    bool confidence_weighting = true;  // scale the unit classifier direction by 1 - p(target)
    std::uint64_t seed = 0;
    bool record_trajectory = false;

    int resolved_t_start(int T) const { return t_start > 0 ? t_start : std::max(1, T / 2); }

    void validate(int T) const {
        if (target != 0 && target != 1) throw DomainError("guidance: target label must be 0 or 1");
        if (!(tau_end > 0.0) || tau_end > tau_start) throw DomainError("guidance: need 0 < tau_end <= tau_start");
        if (lambda < 0.0) throw DomainError("guidance: lambda must be nonnegative");
        if (!(guidance_scale > 0.0)) throw DomainError("guidance: guidance_scale must be positive");
        if (distance_weight < 0.0) throw DomainError("guidance: distance_weight must be nonnegative");
        const int ts = resolved_t_start(T);
        if (ts < 1 || ts > T) throw DomainError("guidance: t_start must lie in [1, T]");
    }
};

inline nlohmann::json to_json(const GuidanceConfig& c) {
    nlohmann::json j{{"target", c.target},       {"lambda", c.lambda},   {"tau_start", c.tau_start},
                     {"tau_end", c.tau_end},     {"t_start", c.t_start}, {"distance_weight", c.distance_weight},
                     {"guidance_scale", c.guidance_scale},
                     {"confidence_weighting", c.confidence_weighting},
                     {"seed", c.seed},           {"record_trajectory", c.record_trajectory}};
    if (c.mask) j["mutable_columns"] = c.mask->mutable_columns;
    return j;
}

inline GuidanceConfig guidance_from_json(const nlohmann::json& j) {
    GuidanceConfig c;
    c.target = j.value("target", c.target);
    c.lambda = j.value("lambda", c.lambda);
    c.tau_start = j.value("tau_start", c.tau_start);
    c.tau_end = j.value("tau_end", c.tau_end);
    c.t_start = j.value("t_start", c.t_start);
    c.distance_weight = j.value("distance_weight", c.distance_weight);
    c.guidance_scale = j.value("guidance_scale", c.guidance_scale);
    c.confidence_weighting = j.value("confidence_weighting", c.confidence_weighting);
    c.seed = j.value("seed", c.seed);
    c.record_trajectory = j.value("record_trajectory", c.record_trajectory);
    if (j.contains("mutable_columns")) c.mask = data::ImmutableMask{j.at("mutable_columns").get<std::vector<bool>>()};
    return c;
}

/// Linear in the step index: tau_start at t = t_start, tau_end at t = 0.
inline double temperature_at(int t, const GuidanceConfig& cfg, int T) {
    const int ts = cfg.resolved_t_start(T);
    if (t < 0 || t > ts) throw DomainError("temperature_at: step outside [0, t_start]");
    return cfg.tau_end + (cfg.tau_start - cfg.tau_end) * static_cast<double>(t) / static_cast<double>(ts);
}

struct FeatureDelta {
    std::string column;
    data::Cell from;
    data::Cell to;
    std::optional<double> delta;  // continuous columns only
    bool changed = false;
};

struct TrajectoryStep {
    int step = 0;
    Eigen::VectorXd state;
};

struct CounterfactualResult {
    data::FeatureRow row;
    Eigen::VectorXd encoded;  // encoding of `row` (categorical blocks one-hot)
    Eigen::VectorXd relaxed;  // final reverse-process state before decoding
    int target = 1;
    double probability = 0.0;  // classifier probability of `target` at `encoded`
    bool valid = false;
    std::vector<FeatureDelta> deltas;
    std::vector<TrajectoryStep> trajectory;
    int iterations = 0;  // Wachter only
};

inline std::vector<FeatureDelta> feature_deltas(const data::TabularSchema& s, const data::FeatureRow& query,
                                                const data::FeatureRow& cf) {
    std::vector<FeatureDelta> out;
    for (std::size_t i = 0; i < s.columns.size(); ++i) {
        FeatureDelta d{s.columns[i].name, query[i], cf[i], std::nullopt, query[i] != cf[i]};
        if (s.columns[i].kind == data::ColumnKind::continuous) d.delta = std::get<double>(cf[i]) - std::get<double>(query[i]);
        out.push_back(std::move(d));
    }
    return out;
}

/// Decodes a final state; immutable columns are copied from the query verbatim.
inline CounterfactualResult make_result(const data::TabularSchema& s, const data::FeatureRow& query,
                                        const Eigen::VectorXd& state, const data::ImmutableMask& mask,
                                        const Classifier& clf, int target) {
    const auto l = s.layout();
    CounterfactualResult r;
    r.row = data::decode_row(s, l, state);
    for (std::size_t i = 0; i < s.columns.size(); ++i)
        if (!mask.mutable_columns[i]) r.row[i] = query[i];
    // An untouched continuous coordinate keeps the query's exact value rather
    // than the standardise/unstandardise round trip.
    const Eigen::VectorXd xq = data::encode_row(s, l, query);
    for (Eigen::Index k = 0; k < l.num_dim; ++k)
        if (state(k) == xq(k)) r.row[l.num_columns[static_cast<std::size_t>(k)]] = query[l.num_columns[static_cast<std::size_t>(k)]];
    r.encoded = data::encode_row(s, l, r.row);
    r.relaxed = state;
    r.target = target;
    r.probability = clf.probability(r.encoded, target);
    r.valid = clf.predict(r.encoded) == target;
    r.deltas = feature_deltas(s, query, r.row);
    return r;
}

// ---------------------------------------------------------------------------
// Reverse process

/// Everything the reverse loop needs besides the models.
struct ReverseInputs {
    Eigen::MatrixXd state;    // x_{t_from}, one column per sample
    Eigen::MatrixXd anchors;  // encoded queries (clean), used for blending and distance
    Eigen::VectorXd mask;     // 1 = mutable coordinate
    int t_from = 0;
};

namespace detail {

// Pulls a gradient w.r.t. x0_hat (continuous part) back to x_t through the
// noise-inversion formula and the denoiser network.
inline Eigen::MatrixXd pull_back_num(const diffusion::Denoiser& d, const nn::ForwardCache& cache,
                                     const Eigen::MatrixXd& grad_x0_num, int t) {
    const auto n = d.layout.num_dim;
    const double ab = d.schedule.alpha_bar(t);
    Eigen::MatrixXd out_grad = Eigen::MatrixXd::Zero(d.layout.dim, grad_x0_num.cols());
    out_grad.topRows(n) = -std::sqrt((1.0 - ab) / ab) * grad_x0_num;
    const auto g = nn::backward(d.net, cache, out_grad, nn::BackwardMode::input_only);
    return grad_x0_num / std::sqrt(ab) + g.input.topRows(n);
}

}  // namespace detail

/// Runs x_{t_from} -> x_0. With a classifier the step is guided toward
/// `cfg.target`; without one it is the plain reverse process. One Rng per
/// column keeps each sample's noise independent of the batch composition.
inline Eigen::MatrixXd reverse_process(const diffusion::Denoiser& d, const Classifier* clf, const ReverseInputs& in,
                                       const GuidanceConfig& cfg, std::vector<Rng>& rngs,
                                       std::vector<std::vector<TrajectoryStep>>* trajectories = nullptr) {
    const auto& l = d.layout;
    const auto& sched = d.schedule;
    const int T = sched.steps();
    const auto n = l.num_dim;
    const auto batch = in.state.cols();
    if (static_cast<Eigen::Index>(rngs.size()) != batch) throw ShapeError("reverse_process: one Rng per column");
    const bool blend = in.anchors.size() > 0;
    GuidanceConfig tcfg = cfg;
    tcfg.t_start = in.t_from;
    Eigen::MatrixXd x = in.state;
    if (trajectories) {
        trajectories->assign(static_cast<std::size_t>(batch), {});
        for (Eigen::Index j = 0; j < batch; ++j) (*trajectories)[static_cast<std::size_t>(j)].push_back({in.t_from, x.col(j)});
    }
    for (int t = in.t_from; t >= 1; --t) {
        const std::vector<int> ts(static_cast<std::size_t>(batch), t);
        const auto fw = d.run(x, ts);
        const Eigen::MatrixXd x0 = diffusion::x0_from_output(d, x, fw.output, ts);
        const double tau = temperature_at(t - 1, tcfg, T);

        Eigen::MatrixXd g_num = Eigen::MatrixXd::Zero(n, batch);
        Eigen::MatrixXd g_dist = Eigen::MatrixXd::Zero(n, batch);
        Eigen::MatrixXd g_cat = Eigen::MatrixXd::Zero(l.dim, batch);
        Eigen::VectorXd cls_weight = Eigen::VectorXd::Ones(batch);
        if (clf) {
            Eigen::MatrixXd point = x;
            point.topRows(n) = x0.topRows(n);
            const Eigen::MatrixXd gz = classifier_grad(*clf, point, cfg.target);
            g_cat = gz;
            if (cfg.confidence_weighting) {
                const Eigen::MatrixXd pr = clf->probabilities(point);
                for (Eigen::Index j = 0; j < batch; ++j) cls_weight(j) = 1.0 - pr(cfg.target, j);
            }
            if (n > 0) {
                g_num = detail::pull_back_num(d, fw.cache, gz.topRows(n), t);

                if (blend) g_dist = detail::pull_back_num(d, fw.cache, 2.0 * (x0.topRows(n) - in.anchors.topRows(n)), t);
            }
        }

        const double var = sched.posterior_variance(t);
        const Eigen::VectorXd sigma = Eigen::VectorXd::Constant(n, cfg.guidance_scale * var);
        Eigen::MatrixXd next(l.dim, batch);
        for (Eigen::Index j = 0; j < batch; ++j) {
            auto& rng = rngs[static_cast<std::size_t>(j)];
            const Eigen::VectorXd mu = diffusion::reverse_mean(x.col(j).head(n), t, sched, fw.output.col(j).head(n));
            Eigen::VectorXd gn = g_num.col(j), gd = g_dist.col(j);
            if (blend) {
                gn.array() *= in.mask.head(n).array();
                gd.array() *= in.mask.head(n).array();
            }
            Eigen::VectorXd xn =
                clf ? continuous_guided_mean(mu, sigma, gn, gd, cfg.distance_weight, cls_weight(j)) : mu;
            const Eigen::VectorXd noise = rng.normal_vector(n);
            if (t > 1) xn += std::sqrt(var) * noise;
            next.col(j).head(n) = xn;
            for (const auto& b : l.blocks) {
                const Eigen::VectorXd pi = diffusion::categorical_posterior(x.col(j).segment(b.offset, b.width),
                                                                            x0.col(j).segment(b.offset, b.width), t, sched);
                Eigen::VectorXd logits = pi.array().log().matrix();
                if (clf) logits = categorical_guided_logits(logits, g_cat.col(j).segment(b.offset, b.width), cfg.lambda);
                next.col(j).segment(b.offset, b.width) =
                    diffusion::gumbel_softmax_sample(logits, tau, rng.gumbel_vector(b.width));
            }
            if (blend) {
                Eigen::VectorXd noisy = in.anchors.col(j);
                if (t > 1) {
                    noisy.head(n) = diffusion::q_sample_continuous(in.anchors.col(j).head(n), t - 1, sched,
                                                                   rng.normal_vector(n));
                    for (const auto& b : l.blocks)
                        noisy.segment(b.offset, b.width) = diffusion::q_sample_categorical(
                            in.anchors.col(j).segment(b.offset, b.width), t - 1, sched, tau, rng.gumbel_vector(b.width));
                }
                next.col(j) = in.mask.cwiseProduct(next.col(j)) + (1.0 - in.mask.array()).matrix().cwiseProduct(noisy);
            }
            if (!next.col(j).allFinite())
                throw GenerationError("reverse_process: non-finite state at step " + std::to_string(t) + ", sample " +
                                      std::to_string(j));
            if (trajectories) (*trajectories)[static_cast<std::size_t>(j)].push_back({t - 1, next.col(j)});
        }
        x = std::move(next);
    }
    return x;
}

/// Batch counterfactual generation. Query i draws its noise from
/// derive_seed(cfg.seed, i), so a single-query call with that seed reproduces
/// the same result.
inline std::vector<CounterfactualResult> generate_counterfactuals(const std::vector<data::FeatureRow>& queries,
                                                                  const data::TabularSchema& schema,
                                                                  const Classifier& clf,
                                                                  const diffusion::Denoiser& d,
                                                                  const GuidanceConfig& cfg,
                                                                  const std::vector<std::uint64_t>& seeds = {}) {
    const auto l = schema.layout();
    if (l.dim != d.layout.dim || l.num_dim != d.layout.num_dim || clf.net.input_dim() != l.dim)
        throw ShapeError("generate_counterfactual: models do not match the query schema");
    const int T = d.schedule.steps();
    cfg.validate(T);
    const auto mask = cfg.mask.value_or(data::ImmutableMask::from_defaults(schema));
    if (queries.empty()) return {};
    ReverseInputs in;
    in.anchors = data::encode(schema, queries).features;
    in.mask = mask.expand(schema);
    in.t_from = cfg.resolved_t_start(T);
    const auto batch = in.anchors.cols();
    std::vector<Rng> rngs;
    for (Eigen::Index j = 0; j < batch; ++j)
        rngs.emplace_back(seeds.empty() ? derive_seed(cfg.seed, static_cast<std::uint64_t>(j))
                                        : seeds.at(static_cast<std::size_t>(j)));
    GuidanceConfig tcfg = cfg;
    tcfg.t_start = in.t_from;
    const double tau0 = temperature_at(in.t_from, tcfg, T);
    in.state.resize(l.dim, batch);
    for (Eigen::Index j = 0; j < batch; ++j) {
        auto& rng = rngs[static_cast<std::size_t>(j)];
        in.state.col(j).head(l.num_dim) =
            diffusion::q_sample_continuous(in.anchors.col(j).head(l.num_dim), in.t_from, d.schedule, rng.normal_vector(l.num_dim));
        for (const auto& b : l.blocks)
            in.state.col(j).segment(b.offset, b.width) = diffusion::q_sample_categorical(
                in.anchors.col(j).segment(b.offset, b.width), in.t_from, d.schedule, tau0, rng.gumbel_vector(b.width));
    }
    // One query at a time: a batched matrix product rounds differently from a
    // single-column one, and results must not depend on the batch composition.
    std::vector<CounterfactualResult> out;
    for (Eigen::Index j = 0; j < batch; ++j) {
        ReverseInputs one{in.state.col(j), in.anchors.col(j), in.mask, in.t_from};
        std::vector<Rng> rng{rngs[static_cast<std::size_t>(j)]};
        std::vector<std::vector<TrajectoryStep>> traj;
        Eigen::VectorXd s = reverse_process(d, &clf, one, tcfg, rng, cfg.record_trajectory ? &traj : nullptr).col(0);
        for (Eigen::Index k = 0; k < l.dim; ++k)
            if (in.mask(k) == 0.0) s(k) = in.anchors(k, j);
        auto r = make_result(schema, queries[static_cast<std::size_t>(j)], s, mask, clf, cfg.target);
        if (cfg.record_trajectory) r.trajectory = std::move(traj.front());
        out.push_back(std::move(r));
    }
    return out;
}

inline CounterfactualResult generate_counterfactual(const data::FeatureRow& query, const data::TabularSchema& schema,
                                                    const Classifier& clf, const diffusion::Denoiser& d,
                                                    const GuidanceConfig& cfg) {
    return generate_counterfactuals({query}, schema, clf, d, cfg, {cfg.seed}).front();
}

/// Unguided samples from the prior (x_T ~ N(0, I) and Gumbel-softmax over a
/// uniform mixing distribution), run through the full reverse chain. Low
/// temperatures keep the relaxed chain close to the categorical one; at 0.5 the
/// minority level of a three-level column is visibly under-sampled.
inline Eigen::MatrixXd sample_unconditional(const diffusion::Denoiser& d, Eigen::Index count, std::uint64_t seed,
                                            double tau = 0.1, const Classifier* clf = nullptr, int target = 1,
                                            double lambda = 5.0,
                                            std::vector<std::vector<TrajectoryStep>>* trajectories = nullptr) {
    const auto& l = d.layout;
    ReverseInputs in;
    in.t_from = d.schedule.steps();
    in.state.resize(l.dim, count);
    std::vector<Rng> rngs;
    for (Eigen::Index j = 0; j < count; ++j) {
        rngs.emplace_back(derive_seed(seed, static_cast<std::uint64_t>(j)));
        auto& rng = rngs.back();
        in.state.col(j).head(l.num_dim) = rng.normal_vector(l.num_dim);
        for (const auto& b : l.blocks)
            in.state.col(j).segment(b.offset, b.width) = diffusion::gumbel_softmax_sample(
                Eigen::VectorXd::Constant(b.width, -std::log(static_cast<double>(b.width))), tau, rng.gumbel_vector(b.width));
    }
    GuidanceConfig cfg;
    cfg.tau_start = cfg.tau_end = tau;
    cfg.target = target;
    cfg.lambda = lambda;
    return reverse_process(d, clf, in, cfg, rngs, trajectories);
}

// ---------------------------------------------------------------------------
// Wachter-style baseline

struct WachterConfig {
    int target = 1;
    int max_iterations = 1000;
    double step_size = 0.05;
    double gamma = 0.05;  // weight of the squared distance penalty
};

/// Gradient ascent on log p(target|x) - gamma ||x - x_query||^2 over mutable
/// continuous coordinates; categorical blocks stay at the query's one-hot.
inline CounterfactualResult wachter_baseline(const data::FeatureRow& query, const data::TabularSchema& schema,
                                             const Classifier& clf, const data::ImmutableMask& mask,
                                             const WachterConfig& cfg) {
    const auto l = schema.layout();
    const Eigen::VectorXd xq = data::encode_row(schema, l, query);
    Eigen::VectorXd m = mask.expand(schema);
    m.tail(l.cat_dim()).setZero();
    Eigen::VectorXd x = xq;
    int it = 0;
    while (clf.predict(x) != cfg.target && it < cfg.max_iterations) {
        const Eigen::VectorXd g = classifier_grad(clf, x, cfg.target) - 2.0 * cfg.gamma * (x - xq);
        x += cfg.step_size * m.cwiseProduct(g);
        ++it;
    }
    auto r = make_result(schema, query, x, mask, clf, cfg.target);
    r.iterations = it;
    return r;
}

// ---------------------------------------------------------------------------
// Output

inline nlohmann::json cell_json(const data::Cell& c) {
    if (std::holds_alternative<double>(c)) return std::get<double>(c);
    return std::get<std::string>(c);
}

inline nlohmann::json to_json(const CounterfactualResult& r, const data::TabularSchema& s, bool with_trajectory) {
    nlohmann::json row = nlohmann::json::object();
    for (std::size_t i = 0; i < s.columns.size(); ++i) row[s.columns[i].name] = cell_json(r.row[i]);
    nlohmann::json deltas = nlohmann::json::array();
    for (const auto& d : r.deltas)
        deltas.push_back({{"column", d.column},
                          {"from", cell_json(d.from)},
                          {"to", cell_json(d.to)},
                          {"delta", d.delta ? nlohmann::json(*d.delta) : nlohmann::json(nullptr)},
                          {"changed", d.changed}});
    nlohmann::json j{{"row", row},
                     {"encoded", std::vector<double>(r.encoded.data(), r.encoded.data() + r.encoded.size())},
                     {"target", r.target},
                     {"probability", r.probability},
                     {"valid", r.valid},
                     {"deltas", deltas}};
    if (with_trajectory) {
        nlohmann::json tr = nlohmann::json::array();
        for (const auto& st : r.trajectory)
            tr.push_back({{"step", st.step}, {"state", std::vector<double>(st.state.data(), st.state.data() + st.state.size())}});
        j["trajectory"] = tr;
    }
    return j;
}

/// query,step,coordinate,value
inline void write_trajectory_csv(std::ostream& out, const std::vector<CounterfactualResult>& results) {
    out << "query,step,coordinate,value\n";
    for (std::size_t q = 0; q < results.size(); ++q)
        for (const auto& st : results[q].trajectory)
            for (Eigen::Index k = 0; k < st.state.size(); ++k)
                out << q << ',' << st.step << ',' << k << ',' << data::format_double(st.state(k)) << '\n';
}

inline nlohmann::json to_json(const Classifier& c, const std::string& schema_hash) {
    return {{"format", "tdce-classifier"}, {"version", 1}, {"schema_hash", schema_hash}, {"network", nn::to_json(c.net)}};
}

inline Classifier classifier_from_json(const nlohmann::json& j, Eigen::Index input_dim) {
    if (j.value("format", "") != "tdce-classifier" || j.value("version", 0) != 1)
        throw ShapeError("classifier json: unsupported format or version");
    Classifier c{nn::network_from_json(j.at("network"))};
    if (c.net.input_dim() != input_dim || c.net.output_dim() != 2)
        throw ShapeError("classifier json: network does not match the schema layout");
    return c;
}

}  // namespace tdce::guidance

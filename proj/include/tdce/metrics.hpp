#pragma once

// Counterfactual evaluation: proximity, diversity, validity, instability,
// categorical JS divergence and autoencoder-based interpretability scores.
// Sample matrices hold one encoded row per column.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tdce/data.hpp"
#include "tdce/error.hpp"
#include "tdce/guidance.hpp"
#include "tdce/nn.hpp"
#include "tdce/random.hpp"

namespace tdce::metrics {

inline constexpr double kImEpsilon = 1e-6;
inline constexpr double kJsSmoothing = 1e-9;

inline void require_same_shape(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(what) + ": shape mismatch");
}

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

/// Standard error of the mean of per-sample values.
inline double standard_error(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

/// Jackknife standard error of a statistic over the columns of `x`.
inline double jackknife_se(const Eigen::MatrixXd& x, const std::function<double(const Eigen::MatrixXd&)>& stat) {
    const auto n = x.cols();
    if (n < 3) return 0.0;
    std::vector<double> loo;
    Eigen::MatrixXd sub(x.rows(), n - 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        sub.leftCols(i) = x.leftCols(i);
        sub.rightCols(n - 1 - i) = x.rightCols(n - 1 - i);
        loo.push_back(stat(sub));
    }
    const double m = mean_of(loo);
    double ss = 0.0;
    for (double v : loo) ss += (v - m) * (v - m);
    return std::sqrt(ss * static_cast<double>(n - 1) / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// Proximity and diversity

inline std::vector<double> l2_values(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& cfs) {
    require_same_shape(queries, cfs, "l2_metric");
    std::vector<double> v;
    for (Eigen::Index j = 0; j < cfs.cols(); ++j) v.push_back((queries.col(j) - cfs.col(j)).squaredNorm());
    return v;
}

/// Mean squared Euclidean distance between paired rows.
inline double l2_metric(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& cfs) {
    return mean_of(l2_values(queries, cfs));
}

/// Mean Euclidean distance over unordered pairs; 0 for fewer than two rows.
inline double diversity(const Eigen::MatrixXd& cfs) {
    const auto n = cfs.cols();
    if (n < 2) return 0.0;
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) s += (cfs.col(i) - cfs.col(j)).norm();
    return 2.0 * s / (static_cast<double>(n) * static_cast<double>(n - 1));
}

// ---------------------------------------------------------------------------
// Validity

inline std::vector<double> validity_values(const Eigen::MatrixXd& cfs, const guidance::Classifier& clf, int target) {
    std::vector<double> v;
    for (int p : clf.predict(cfs)) v.push_back(p == target ? 1.0 : 0.0);
    return v;
}

inline double validity(const Eigen::MatrixXd& cfs, const guidance::Classifier& clf, int target) {
    return mean_of(validity_values(cfs, clf, target));
}

// ---------------------------------------------------------------------------
// Instability

/// Index of the nearest pool column with the same predicted label, skipping
/// columns identical to the query. Returns -1 when there is none.
inline Eigen::Index nearest_same_label(const Eigen::VectorXd& x, int label, const Eigen::MatrixXd& pool,
                                       const std::vector<int>& pool_labels) {
    Eigen::Index best = -1;
    double best_d = 0.0;
    for (Eigen::Index j = 0; j < pool.cols(); ++j) {
        if (pool_labels[static_cast<std::size_t>(j)] != label) continue;
        const double d = (pool.col(j) - x).squaredNorm();
        if (d == 0.0) continue;
        if (best < 0 || d < best_d) best = j, best_d = d;
    }
    return best;
}

/// Neighbour search uses full encoded rows; the two distances in the ratio use
/// the leading `distance_rows` coordinates (the continuous block).
struct InstabilityInputs {
    Eigen::MatrixXd queries;
    Eigen::MatrixXd cfs;
    std::vector<int> query_labels;
    Eigen::MatrixXd pool;
    std::vector<int> pool_labels;
    Eigen::Index distance_rows = 0;
};

using Generator = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& neighbours, const std::vector<std::size_t>& query_index)>;

inline std::vector<double> instability_values(const InstabilityInputs& in, const Generator& generate) {
    require_same_shape(in.queries, in.cfs, "instability");
    if (in.query_labels.size() != static_cast<std::size_t>(in.queries.cols()) ||
        in.pool_labels.size() != static_cast<std::size_t>(in.pool.cols()))
        throw ShapeError("instability: one label per row required");
    std::vector<std::size_t> which;
    std::vector<Eigen::Index> nb;
    for (Eigen::Index i = 0; i < in.queries.cols(); ++i) {
        const auto j = nearest_same_label(in.queries.col(i), in.query_labels[static_cast<std::size_t>(i)], in.pool, in.pool_labels);
        if (j < 0) continue;
        which.push_back(static_cast<std::size_t>(i));
        nb.push_back(j);
    }
    Eigen::MatrixXd neighbours(in.pool.rows(), static_cast<Eigen::Index>(nb.size()));
    for (std::size_t k = 0; k < nb.size(); ++k) neighbours.col(static_cast<Eigen::Index>(k)) = in.pool.col(nb[k]);
    const Eigen::MatrixXd ncf = generate(neighbours, which);
    const auto r = in.distance_rows;
    std::vector<double> v;
    for (std::size_t k = 0; k < which.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(which[k]);
        const auto kk = static_cast<Eigen::Index>(k);
        const double num = (in.cfs.col(i).head(r) - ncf.col(kk).head(r)).norm();
        const double den = 1.0 + (in.queries.col(i).head(r) - neighbours.col(kk).head(r)).norm();
        v.push_back(num / den);
    }
    return v;
}

inline double instability(const InstabilityInputs& in, const Generator& generate) {
    return mean_of(instability_values(in, generate));
}

// ---------------------------------------------------------------------------
// JS divergence over categorical marginals

/// Natural-log JS divergence between two count vectors; each is normalised,
/// smoothed by 1e-9 per entry and renormalised.
inline double js_divergence(const Eigen::VectorXd& p_counts, const Eigen::VectorXd& q_counts) {
    if (p_counts.size() != q_counts.size()) throw ShapeError("js_divergence: length mismatch");
    auto norm = [](const Eigen::VectorXd& c) {
        const double s = c.sum();
        Eigen::VectorXd p = s > 0.0 ? Eigen::VectorXd(c / s) : Eigen::VectorXd::Constant(c.size(), 1.0 / c.size());
        p.array() += kJsSmoothing;
        return Eigen::VectorXd(p / p.sum());
    };
    const Eigen::VectorXd p = norm(p_counts), q = norm(q_counts);
    const Eigen::VectorXd m = 0.5 * (p + q);
    auto kl = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        return (a.array() * (a.array() / b.array()).log()).sum();
    };
    return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

/// Per-block category counts from argmax decoding.
inline Eigen::VectorXd block_counts(const Eigen::MatrixXd& rows, const data::Block& b) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(b.width);
    for (Eigen::Index j = 0; j < rows.cols(); ++j) c(data::argmax_lowest(rows.col(j).segment(b.offset, b.width))) += 1.0;
    return c;
}

/// Mean JS divergence between target-class and counterfactual categorical
/// marginals, over categorical columns. 0 if the layout has none.
inline double js_metric(const Eigen::MatrixXd& cfs, const Eigen::MatrixXd& target_rows, const data::Layout& l) {
    if (l.blocks.empty()) return 0.0;
    double s = 0.0;
    for (const auto& b : l.blocks) s += js_divergence(block_counts(target_rows, b), block_counts(cfs, b));
    return s / static_cast<double>(l.blocks.size());
}

// ---------------------------------------------------------------------------
// Autoencoders and interpretability

struct AutoencoderTrainConfig {
    Eigen::Index hidden = 32;
    int epochs = 60;
    Eigen::Index batch_size = 128;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
};

struct Autoencoder {
    nn::DenseNetwork net;
    std::vector<double> epoch_loss;

    Eigen::MatrixXd operator()(const Eigen::MatrixXd& x) const { return nn::forward(net, x).output; }
};

inline Eigen::Index bottleneck_width(Eigen::Index d) { return std::max<Eigen::Index>(2, d / 2); }

/// d -> 32 -> max(2, d/2) -> 32 -> d with an MSE reconstruction objective.
inline nn::DenseNetwork make_autoencoder(Eigen::Index d, Eigen::Index hidden, Rng& rng) {
    return nn::make_mlp(d, {{hidden, nn::Activation::relu},
                            {bottleneck_width(d), nn::Activation::identity},
                            {hidden, nn::Activation::relu},
                            {d, nn::Activation::identity}},
                        rng);
}

inline Autoencoder train_autoencoder(const Eigen::MatrixXd& x, const AutoencoderTrainConfig& cfg) {
    if (x.cols() == 0) throw TrainingError("train_autoencoder: empty training set");
    Rng rng(cfg.seed);
    Autoencoder ae{make_autoencoder(x.rows(), cfg.hidden, rng), {}};
    auto adam = nn::AdamState::for_network(ae.net, cfg.learning_rate);
    const auto n = x.cols();
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
        double total = 0.0;
        for (Eigen::Index start = 0; start < n; start += cfg.batch_size) {
            const auto m = std::min(cfg.batch_size, n - start);
            Eigen::MatrixXd b(x.rows(), m);
            for (Eigen::Index j = 0; j < m; ++j) b.col(j) = x.col(order[static_cast<std::size_t>(start + j)]);
            const auto fw = nn::forward(ae.net, b);
            const Eigen::MatrixXd diff = fw.output - b;
            const double loss = diff.squaredNorm();
            if (!std::isfinite(loss)) throw TrainingError("train_autoencoder: loss diverged in epoch " + std::to_string(epoch));
            nn::optimizer_step(ae.net, nn::backward(ae.net, fw.cache, 2.0 * diff / static_cast<double>(m)), adam);
            total += loss;
        }
        ae.epoch_loss.push_back(total / static_cast<double>(n));
    }
    return ae;
}

struct InterpretabilityModels {
    Autoencoder original;  // trained on the query class
    Autoencoder target;    // trained on the target class
    Autoencoder full;      // trained on every row
};

inline InterpretabilityModels train_interpretability_autoencoders(const data::EncodedBatch& data, int original_label,
                                                                  int target_label, AutoencoderTrainConfig cfg) {
    auto rows_with = [&](int label) {
        std::vector<Eigen::Index> idx;
        for (std::size_t i = 0; i < data.labels.size(); ++i)
            if (data.labels[i] == label) idx.push_back(static_cast<Eigen::Index>(i));
        Eigen::MatrixXd m(data.features.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t k = 0; k < idx.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = data.features.col(idx[k]);
        return m;
    };
    const auto base = cfg.seed;
    InterpretabilityModels r;
    cfg.seed = derive_seed(base, 0);
    r.original = train_autoencoder(rows_with(original_label), cfg);
    cfg.seed = derive_seed(base, 1);
    r.target = train_autoencoder(rows_with(target_label), cfg);
    cfg.seed = derive_seed(base, 2);
    r.full = train_autoencoder(data.features, cfg);
    return r;
}

struct InterpretabilityValues {
    std::vector<double> im1;
    std::vector<double> im2;
};

/// Per-sample IM1 and IM2 terms, for autoencoders given as callables.
template <class AeO, class AeT, class Ae>
InterpretabilityValues interpretability_values(const Eigen::MatrixXd& cfs, const AeO& ae_o, const AeT& ae_t, const Ae& ae,
                                               double eps = kImEpsilon) {
    const Eigen::MatrixXd ro = ae_o(cfs), rt = ae_t(cfs), rf = ae(cfs);
    InterpretabilityValues v;
    for (Eigen::Index j = 0; j < cfs.cols(); ++j) {
        v.im1.push_back((cfs.col(j) - rt.col(j)).squaredNorm() / ((cfs.col(j) - ro.col(j)).squaredNorm() + eps));
        v.im2.push_back((rt.col(j) - rf.col(j)).squaredNorm() / (cfs.col(j).lpNorm<1>() + eps));
    }
    return v;
}

struct Interpretability {
    double im1 = 0.0;
    double im2 = 0.0;
};

template <class AeO, class AeT, class Ae>
Interpretability interpretability(const Eigen::MatrixXd& cfs, const AeO& ae_o, const AeT& ae_t, const Ae& ae,
                                  double eps = kImEpsilon) {
    const auto v = interpretability_values(cfs, ae_o, ae_t, ae, eps);
    return {mean_of(v.im1), mean_of(v.im2)};
}

inline nlohmann::json to_json(const InterpretabilityModels& m, const std::string& schema_hash) {
    auto one = [](const Autoencoder& a) { return nlohmann::json{{"network", nn::to_json(a.net)}, {"epoch_loss", a.epoch_loss}}; };
    return {{"format", "tdce-autoencoders"},
            {"version", 1},
            {"schema_hash", schema_hash},
            {"original", one(m.original)},
            {"target", one(m.target)},
            {"full", one(m.full)}};
}

inline InterpretabilityModels autoencoders_from_json(const nlohmann::json& j, Eigen::Index dim) {
    if (j.value("format", "") != "tdce-autoencoders" || j.value("version", 0) != 1)
        throw ShapeError("autoencoder json: unsupported format or version");
    auto one = [&](const char* key) {
        Autoencoder a{nn::network_from_json(j.at(key).at("network")), j.at(key).value("epoch_loss", std::vector<double>{})};
        if (a.net.input_dim() != dim || a.net.output_dim() != dim)
            throw ShapeError(std::string("autoencoder json: '") + key + "' does not match the schema layout");
        return a;
    };
    return {one("original"), one("target"), one("full")};
}

// ---------------------------------------------------------------------------
// Report

inline const std::vector<std::string>& metric_order() {
    static const std::vector<std::string> names{"l2", "diversity", "instability", "js", "im1", "im2", "validity"};
    return names;
}

struct EvaluationReport {
    std::string method;
    std::map<std::string, double> value;  // keys from metric_order(), plus "l2_raw"
    std::map<std::string, double> se;
    std::size_t count = 0;
    std::size_t seeds = 1;
    std::string fingerprint;
    nlohmann::json config;
};

/// 64-bit FNV-1a of a JSON dump, as 16 hex digits.
inline std::string fingerprint(const nlohmann::json& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

/// Averages per-seed reports; `se` becomes the standard deviation across seeds.
inline EvaluationReport combine_seeds(const std::vector<EvaluationReport>& runs) {
    if (runs.empty()) throw DomainError("combine_seeds: no runs");
    if (runs.size() == 1) return runs.front();
    EvaluationReport r = runs.front();
    r.seeds = runs.size();
    r.count = 0;
    for (const auto& [k, unused] : runs.front().value) {
        std::vector<double> v;
        for (const auto& run : runs) v.push_back(run.value.at(k));
        const double m = mean_of(v);
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        r.value[k] = m;
        r.se[k] = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
    for (const auto& run : runs) r.count += run.count;
    return r;
}

inline nlohmann::json to_json(const EvaluationReport& r) {
    nlohmann::json metrics = nlohmann::json::object();
    for (const auto& [k, v] : r.value) metrics[k] = {{"value", v}, {"se", r.se.count(k) ? r.se.at(k) : 0.0}};
    return {{"method", r.method},
            {"metrics", metrics},
            {"count", r.count},
            {"seeds", r.seeds},
            {"js_log_base", "e"},
            {"im_epsilon", kImEpsilon},
            {"fingerprint", r.fingerprint},
            {"config", r.config}};
}

inline std::string to_markdown(const std::vector<EvaluationReport>& reports) {
    std::ostringstream out;
    out << "| Method | L2 | Diversity | Instability | JS | IM1 | IM2 | Validity |\n";
    out << "|---|---|---|---|---|---|---|---|\n";
    char buf[64];
    for (const auto& r : reports) {
        out << "| " << r.method;
        for (const auto& k : metric_order()) {
            const double se = r.se.count(k) ? r.se.at(k) : 0.0;
            std::snprintf(buf, sizeof buf, " | %.4f ± %.4f", r.value.count(k) ? r.value.at(k) : 0.0, se);
            out << buf;
        }
        out << " |\n";
    }
    return out.str();
}

}  // namespace tdce::metrics

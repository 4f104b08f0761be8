#pragma once

// End-to-end commands: training a checkpoint directory, explaining queries,
// evaluating a method, the theory grid, and the temperature sweep. Every
// command records a run manifest in its output directory.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tdce/data.hpp"
#include "tdce/diffusion.hpp"
#include "tdce/error.hpp"
#include "tdce/guidance.hpp"
#include "tdce/metrics.hpp"
#include "tdce/random.hpp"
#include "tdce/theory.hpp"

namespace tdce::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// File helpers

inline nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw CheckpointError("cannot open " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(p.string() + ": " + e.what());
    }
}

inline void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + p.string());
    out << text;
}

inline void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Run manifest

struct RunManifest {
    std::string command;
    nlohmann::json inputs = nlohmann::json::object();  // dataset path or synthetic spec, checkpoint dir, ...
    nlohmann::json config = nlohmann::json::object();  // seeds, schedule, guidance, ...
    std::string output_dir;
};

inline nlohmann::json to_json(const RunManifest& m) {
    return {{"format", "tdce-run-manifest"},
            {"version", 1},
            {"command", m.command},
            {"inputs", m.inputs},
            {"config", m.config},
            {"output_dir", m.output_dir},
            {"artifact_versions",
             {{"tdce", kVersion}, {"network", 1}, {"schema", 1}, {"denoiser", 1}, {"classifier", 1}, {"autoencoders", 1}}}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "tdce-run-manifest") throw CheckpointError("not a run manifest");
    return {j.at("command").get<std::string>(), j.at("inputs"), j.at("config"), j.value("output_dir", "")};
}

inline void write_manifest(const RunManifest& m) { write_json(fs::path(m.output_dir) / "run_manifest.json", to_json(m)); }

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
    std::optional<std::string> dataset;   // CSV path; synthetic data when empty
    std::optional<std::string> manifest;  // dataset manifest JSON (column kinds, immutable flags)
    std::string target = "y";
    std::size_t synthetic_rows = 3000;
    std::uint64_t synthetic_seed = 7;
    std::array<double, 3> fractions{0.7, 0.1, 0.2};
    std::uint64_t seed = 7;
    int steps = diffusion::kDefaultSteps;
    diffusion::DiffusionTrainConfig diffusion;
    guidance::ClassifierTrainConfig classifier;
    metrics::AutoencoderTrainConfig autoencoder;
};

inline nlohmann::json to_json(const TrainOptions& o) {
    return {{"dataset", o.dataset ? nlohmann::json(*o.dataset) : nlohmann::json(nullptr)},
            {"manifest", o.manifest ? nlohmann::json(*o.manifest) : nlohmann::json(nullptr)},
            {"target", o.target},
            {"synthetic_rows", o.synthetic_rows},
            {"synthetic_seed", o.synthetic_seed},
            {"fractions", o.fractions},
            {"seed", o.seed},
            {"steps", o.steps},
            {"diffusion",
             {{"hidden", o.diffusion.hidden},
              {"time_dim", o.diffusion.time_dim},
              {"epochs", o.diffusion.epochs},
              {"batch_size", o.diffusion.batch_size},
              {"learning_rate", o.diffusion.learning_rate},
              {"tau", o.diffusion.tau}}},
            {"classifier",
             {{"hidden", o.classifier.hidden},
              {"epochs", o.classifier.epochs},
              {"batch_size", o.classifier.batch_size},
              {"learning_rate", o.classifier.learning_rate}}},
            {"autoencoder",
             {{"hidden", o.autoencoder.hidden},
              {"epochs", o.autoencoder.epochs},
              {"batch_size", o.autoencoder.batch_size},
              {"learning_rate", o.autoencoder.learning_rate}}}};
}

inline TrainOptions train_options_from_json(const nlohmann::json& j) {
    TrainOptions o;
    if (j.contains("dataset") && !j["dataset"].is_null()) o.dataset = j["dataset"].get<std::string>();
    if (j.contains("manifest") && !j["manifest"].is_null()) o.manifest = j["manifest"].get<std::string>();
    o.target = j.value("target", o.target);
    o.synthetic_rows = j.value("synthetic_rows", o.synthetic_rows);
    o.synthetic_seed = j.value("synthetic_seed", o.synthetic_seed);
    if (j.contains("fractions")) o.fractions = j["fractions"].get<std::array<double, 3>>();
    o.seed = j.value("seed", o.seed);
    o.steps = j.value("steps", o.steps);
    if (j.contains("diffusion")) {
        const auto& d = j["diffusion"];
        o.diffusion.hidden = d.value("hidden", o.diffusion.hidden);
        o.diffusion.time_dim = d.value("time_dim", o.diffusion.time_dim);
        o.diffusion.epochs = d.value("epochs", o.diffusion.epochs);
        o.diffusion.batch_size = d.value("batch_size", o.diffusion.batch_size);
        o.diffusion.learning_rate = d.value("learning_rate", o.diffusion.learning_rate);
        o.diffusion.tau = d.value("tau", o.diffusion.tau);
    }
    if (j.contains("classifier")) {
        const auto& c = j["classifier"];
        o.classifier.hidden = c.value("hidden", o.classifier.hidden);
        o.classifier.epochs = c.value("epochs", o.classifier.epochs);
        o.classifier.batch_size = c.value("batch_size", o.classifier.batch_size);
        o.classifier.learning_rate = c.value("learning_rate", o.classifier.learning_rate);
    }
    if (j.contains("autoencoder")) {
        const auto& a = j["autoencoder"];
        o.autoencoder.hidden = a.value("hidden", o.autoencoder.hidden);
        o.autoencoder.epochs = a.value("epochs", o.autoencoder.epochs);
        o.autoencoder.batch_size = a.value("batch_size", o.autoencoder.batch_size);
        o.autoencoder.learning_rate = a.value("learning_rate", o.autoencoder.learning_rate);
    }
    return o;
}

/// Everything a checkpoint directory holds, loaded and cross-checked.
struct Bundle {
    data::TabularSchema schema;
    guidance::Classifier classifier;
    diffusion::Denoiser denoiser;
    metrics::InterpretabilityModels autoencoders;  // original = class 0, target = class 1
    data::Dataset train, val, test;
    double validation_accuracy = 0.0;
};

inline void check_hash(const nlohmann::json& j, const std::string& expected, const std::string& what) {
    const auto got = j.value("schema_hash", std::string{});
    if (got != expected)
        throw CheckpointError(what + " was trained on schema " + (got.empty() ? "<none>" : got) + ", expected " + expected);
}

inline Bundle load_bundle(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw CheckpointError("checkpoint directory not found: " + dir.string());
    Bundle b;
    const auto sj = read_json(dir / "schema.json");
    b.schema = data::schema_from_json(sj);
    const auto hash = b.schema.hash();
    if (sj.value("schema_hash", hash) != hash) throw CheckpointError("schema.json: stored hash does not match its content");
    const auto l = b.schema.layout();
    const auto cj = read_json(dir / "classifier.json");
    check_hash(cj, hash, "classifier.json");
    b.classifier = guidance::classifier_from_json(cj, l.dim);
    b.validation_accuracy = cj.value("validation_accuracy", 0.0);
    const auto dj = read_json(dir / "denoiser.json");
    check_hash(dj, hash, "denoiser.json");
    b.denoiser = diffusion::denoiser_from_json(dj, l);
    const auto aj = read_json(dir / "autoencoders.json");
    check_hash(aj, hash, "autoencoders.json");
    b.autoencoders = metrics::autoencoders_from_json(aj, l.dim);
    b.train = data::to_dataset(b.schema, data::read_csv_file((dir / "train.csv").string()));
    b.val = data::to_dataset(b.schema, data::read_csv_file((dir / "val.csv").string()));
    b.test = data::to_dataset(b.schema, data::read_csv_file((dir / "test.csv").string()));
    return b;
}

struct TrainSummary {
    std::string schema_hash;
    double validation_accuracy = 0.0;
    std::vector<double> diffusion_epoch_loss;
    std::vector<double> classifier_epoch_loss;
    double seconds = 0.0;
};

inline data::RawTable load_training_table(const TrainOptions& o) {
    if (!o.dataset) return data::make_synthetic(o.synthetic_seed, o.synthetic_rows);
    if (!fs::exists(*o.dataset)) throw DataError("dataset not found: " + *o.dataset);
    return data::read_csv_file(*o.dataset);
}

inline data::DatasetManifest load_dataset_manifest(const TrainOptions& o, const data::RawTable& t) {
    if (o.manifest) return data::manifest_from_json(read_json(*o.manifest));
    if (!o.dataset) return data::synthetic_manifest();
    return data::infer_manifest(t, o.target);
}

/// Fits schema, classifier, denoiser and the three autoencoders, then writes
/// them (all stamped with the schema hash) plus splits and loss curves.
inline TrainSummary cmd_train(const TrainOptions& o, const fs::path& out) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto table = load_training_table(o);
    const auto manifest = load_dataset_manifest(o, table);
    const auto sp = data::split(table.rows.size(), o.fractions, derive_seed(o.seed, 0));
    const auto train_t = data::select_rows(table, sp.train);
    const auto val_t = data::select_rows(table, sp.val);
    const auto test_t = data::select_rows(table, sp.test);
    const auto schema = data::fit_schema(train_t, manifest);
    const auto hash = schema.hash();
    const auto train = data::encode(schema, data::to_dataset(schema, train_t));
    const auto val = data::encode(schema, data::to_dataset(schema, val_t));

    auto ccfg = o.classifier;
    ccfg.seed = derive_seed(o.seed, 1);
    auto cres = guidance::train_classifier(train, val, ccfg);
    auto dcfg = o.diffusion;
    dcfg.seed = derive_seed(o.seed, 2);
    auto dres = diffusion::train_diffusion(train.features, schema.layout(), diffusion::build_schedule(o.steps), dcfg);
    auto acfg = o.autoencoder;
    acfg.seed = derive_seed(o.seed, 3);
    const auto aes = metrics::train_interpretability_autoencoders(train, 0, 1, acfg);

    fs::create_directories(out);
    auto sj = data::to_json(schema);
    write_json(out / "schema.json", sj);
    auto cj = guidance::to_json(cres.classifier, hash);
    cj["validation_accuracy"] = cres.validation_accuracy;
    write_json(out / "classifier.json", cj);
    write_json(out / "denoiser.json", diffusion::to_json(dres.denoiser, hash));
    write_json(out / "autoencoders.json", metrics::to_json(aes, hash));
    for (const auto& [name, t] : {std::pair{"train.csv", &train_t}, {"val.csv", &val_t}, {"test.csv", &test_t}})
        data::write_csv_file((out / name).string(), *t);
    {
        std::ostringstream s;
        diffusion::write_loss_csv(s, dres.steps);
        write_text(out / "loss_diffusion.csv", s.str());
    }
    {
        std::ostringstream s;
        s << "epoch,classifier_loss,ae_original_loss,ae_target_loss,ae_full_loss\n";
        const auto n = std::max(cres.epoch_loss.size(), aes.full.epoch_loss.size());
        auto at = [](const std::vector<double>& v, std::size_t i) { return i < v.size() ? data::format_double(v[i]) : ""; };
        for (std::size_t i = 0; i < n; ++i)
            s << i + 1 << ',' << at(cres.epoch_loss, i) << ',' << at(aes.original.epoch_loss, i) << ','
              << at(aes.target.epoch_loss, i) << ',' << at(aes.full.epoch_loss, i) << '\n';
        write_text(out / "loss_models.csv", s.str());
    }
    write_json(out / "dataset_manifest.json", data::to_json(manifest));
    RunManifest m{"train", {{"dataset", o.dataset ? nlohmann::json(*o.dataset) : nlohmann::json("synthetic")}},
                  to_json(o), out.string()};
    write_manifest(m);
    const auto t1 = std::chrono::steady_clock::now();
    return {hash, cres.validation_accuracy, dres.epoch_loss, cres.epoch_loss,
            std::chrono::duration<double>(t1 - t0).count()};
}

// ---------------------------------------------------------------------------
// Explain

inline std::vector<data::FeatureRow> read_queries(const data::TabularSchema& s, const fs::path& csv) {
    if (!fs::exists(csv)) throw DataError("queries file not found: " + csv.string());
    return data::to_dataset(s, data::read_csv_file(csv.string())).rows;
}

/// Counterfactual rows as a table: the schema columns followed by target,
/// probability and validity.
inline data::RawTable counterfactual_table(const data::TabularSchema& s,
                                           const std::vector<guidance::CounterfactualResult>& results) {
    data::RawTable t;
    t.header.push_back("query");
    for (const auto& c : s.columns) t.header.push_back(c.name);
    t.header.insert(t.header.end(), {"target", "probability", "valid"});
    for (std::size_t i = 0; i < results.size(); ++i) {
        std::vector<std::string> row{std::to_string(i)};
        for (const auto& c : results[i].row) row.push_back(data::cell_text(c));
        row.push_back(std::to_string(results[i].target));
        row.push_back(data::format_double(results[i].probability));
        row.push_back(results[i].valid ? "1" : "0");
        t.rows.push_back(std::move(row));
    }
    return t;
}

inline std::vector<guidance::CounterfactualResult> cmd_explain(const fs::path& ckpt, const fs::path& queries_csv,
                                                              const guidance::GuidanceConfig& cfg, const fs::path& out) {
    const auto b = load_bundle(ckpt);
    const auto queries = read_queries(b.schema, queries_csv);
    const auto results = guidance::generate_counterfactuals(queries, b.schema, b.classifier, b.denoiser, cfg);
    fs::create_directories(out);
    data::write_csv_file((out / "counterfactuals.csv").string(), counterfactual_table(b.schema, results));
    if (cfg.record_trajectory) {
        std::ostringstream s;
        guidance::write_trajectory_csv(s, results);
        write_text(out / "trajectories.csv", s.str());
    }
    write_manifest({"explain", {{"checkpoint", ckpt.string()}, {"queries", queries_csv.string()}}, guidance::to_json(cfg),
                    out.string()});
    return results;
}

// ---------------------------------------------------------------------------
// Evaluate

enum class Method { tdce, wachter };

inline std::string to_string(Method m) { return m == Method::tdce ? "tdce" : "wachter"; }

inline Method method_from_string(const std::string& s) {
    if (s == "tdce") return Method::tdce;
    if (s == "wachter") return Method::wachter;
    throw DomainError("unknown method '" + s + "' (expected tdce or wachter)");
}

struct EvaluateOptions {
    Method method = Method::tdce;
    guidance::GuidanceConfig guidance;  // target, mask, seed, ...
    guidance::WachterConfig wachter;
    std::size_t queries = 200;
    std::vector<std::uint64_t> seeds{7};
};

inline nlohmann::json to_json(const EvaluateOptions& o) {
    return {{"method", to_string(o.method)},
            {"guidance", guidance::to_json(o.guidance)},
            {"wachter",
             {{"max_iterations", o.wachter.max_iterations},
              {"step_size", o.wachter.step_size},
              {"gamma", o.wachter.gamma}}},
            {"queries", o.queries},
            {"seeds", o.seeds}};
}

/// Test rows the classifier assigns to the non-target class, in file order.
inline std::vector<data::FeatureRow> select_queries(const Bundle& b, int target, std::size_t limit) {
    const auto enc = data::encode(b.schema, b.test.rows);
    const auto pred = b.classifier.predict(enc.features);
    std::vector<data::FeatureRow> q;
    for (std::size_t i = 0; i < pred.size() && q.size() < limit; ++i)
        if (pred[i] != target) q.push_back(b.test.rows[i]);
    return q;
}

inline Eigen::MatrixXd rows_with_label(const data::EncodedBatch& e, int label) {
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < e.labels.size(); ++i)
        if (e.labels[i] == label) idx.push_back(static_cast<Eigen::Index>(i));
    Eigen::MatrixXd m(e.features.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = e.features.col(idx[k]);
    return m;
}

/// Squared distance over continuous columns in original units.
inline double raw_l2(const data::TabularSchema& s, const data::FeatureRow& a, const data::FeatureRow& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < s.columns.size(); ++i)
        if (s.columns[i].kind == data::ColumnKind::continuous) {
            const double diff = std::get<double>(a[i]) - std::get<double>(b[i]);
            d += diff * diff;
        }
    return d;
}

/// Generates counterfactuals for `queries` with one method; query i uses
/// derive_seed(seed, i) (TDCE only).
inline std::vector<guidance::CounterfactualResult> run_method(const Bundle& b, Method m,
                                                             const std::vector<data::FeatureRow>& queries,
                                                             const guidance::GuidanceConfig& g,
                                                             const guidance::WachterConfig& w,
                                                             const std::vector<std::uint64_t>& seeds = {}) {
    if (m == Method::tdce) return guidance::generate_counterfactuals(queries, b.schema, b.classifier, b.denoiser, g, seeds);
    const auto mask = g.mask.value_or(data::ImmutableMask::from_defaults(b.schema));
    auto wc = w;
    wc.target = g.target;
    std::vector<guidance::CounterfactualResult> out;
    for (const auto& q : queries) out.push_back(guidance::wachter_baseline(q, b.schema, b.classifier, mask, wc));
    return out;
}

inline metrics::EvaluationReport evaluate_once(const Bundle& b, const EvaluateOptions& o, std::uint64_t seed) {
    auto g = o.guidance;
    g.seed = seed;
    const auto l = b.schema.layout();
    const auto queries = select_queries(b, g.target, o.queries);
    if (queries.empty()) throw DataError("evaluate: no test rows are predicted as the non-target class");
    const auto results = run_method(b, o.method, queries, g, o.wachter);
    const auto qenc = data::encode(b.schema, queries).features;
    Eigen::MatrixXd cf(l.dim, static_cast<Eigen::Index>(results.size()));
    std::vector<double> raw;
    for (std::size_t i = 0; i < results.size(); ++i) {
        cf.col(static_cast<Eigen::Index>(i)) = results[i].encoded;
        raw.push_back(raw_l2(b.schema, queries[i], results[i].row));
    }
    const auto n = l.num_dim;
    metrics::EvaluationReport r;
    r.method = to_string(o.method);
    r.count = results.size();

    const auto l2v = metrics::l2_values(qenc.topRows(n), cf.topRows(n));
    r.value["l2"] = metrics::mean_of(l2v);
    r.se["l2"] = metrics::standard_error(l2v);
    r.value["l2_raw"] = metrics::mean_of(raw);
    r.se["l2_raw"] = metrics::standard_error(raw);

    const Eigen::MatrixXd cf_num = cf.topRows(n);
    r.value["diversity"] = metrics::diversity(cf_num);
    r.se["diversity"] = metrics::jackknife_se(cf_num, [](const Eigen::MatrixXd& x) { return metrics::diversity(x); });

    const auto train_enc = data::encode(b.schema, b.train);
    metrics::InstabilityInputs in{qenc, cf, b.classifier.predict(qenc), train_enc.features,
                                  b.classifier.predict(train_enc.features), n};
    const auto inst = metrics::instability_values(in, [&](const Eigen::MatrixXd& nb, const std::vector<std::size_t>& idx) {
        const auto rows = data::decode(b.schema, nb);
        std::vector<std::uint64_t> seeds;
        for (auto i : idx) seeds.push_back(derive_seed(seed, i));
        const auto res = run_method(b, o.method, rows, g, o.wachter, seeds);
        Eigen::MatrixXd m(l.dim, static_cast<Eigen::Index>(res.size()));
        for (std::size_t k = 0; k < res.size(); ++k) m.col(static_cast<Eigen::Index>(k)) = res[k].encoded;
        return m;
    });
    r.value["instability"] = metrics::mean_of(inst);
    r.se["instability"] = metrics::standard_error(inst);

    const Eigen::MatrixXd target_rows = rows_with_label(train_enc, g.target);
    r.value["js"] = metrics::js_metric(cf, target_rows, l);
    r.se["js"] = metrics::jackknife_se(cf, [&](const Eigen::MatrixXd& x) { return metrics::js_metric(x, target_rows, l); });

    const auto& ae_o = g.target == 1 ? b.autoencoders.original : b.autoencoders.target;
    const auto& ae_t = g.target == 1 ? b.autoencoders.target : b.autoencoders.original;
    const auto im = metrics::interpretability_values(cf, ae_o, ae_t, b.autoencoders.full);
    r.value["im1"] = metrics::mean_of(im.im1);
    r.se["im1"] = metrics::standard_error(im.im1);
    r.value["im2"] = metrics::mean_of(im.im2);
    r.se["im2"] = metrics::standard_error(im.im2);

    const auto val = metrics::validity_values(cf, b.classifier, g.target);
    r.value["validity"] = metrics::mean_of(val);
    r.se["validity"] = metrics::standard_error(val);

    r.config = to_json(o);
    r.config["seed"] = seed;
    r.config["schema_hash"] = b.schema.hash();
    r.fingerprint = metrics::fingerprint(r.config);
    return r;
}

inline metrics::EvaluationReport evaluate(const Bundle& b, const EvaluateOptions& o) {
    if (o.seeds.empty()) throw DomainError("evaluate: at least one seed is required");
    std::vector<metrics::EvaluationReport> runs;
    for (auto s : o.seeds) runs.push_back(evaluate_once(b, o, s));
    auto r = metrics::combine_seeds(runs);
    if (runs.size() > 1) {
        r.config = to_json(o);
        r.config["schema_hash"] = b.schema.hash();
        r.fingerprint = metrics::fingerprint(r.config);
    }
    return r;
}

inline std::vector<metrics::EvaluationReport> cmd_evaluate(const fs::path& ckpt, const std::vector<Method>& methods,
                                                          EvaluateOptions o, const fs::path& out) {
    const auto b = load_bundle(ckpt);
    std::vector<metrics::EvaluationReport> reports;
    nlohmann::json all = nlohmann::json::array();
    for (auto m : methods) {
        o.method = m;
        reports.push_back(evaluate(b, o));
        all.push_back(metrics::to_json(reports.back()));
    }
    fs::create_directories(out);
    write_json(out / "report.json", {{"reports", all}});
    write_text(out / "report.md", metrics::to_markdown(reports));
    auto cfg = to_json(o);
    cfg.erase("method");
    nlohmann::json names = nlohmann::json::array();
    for (auto m : methods) names.push_back(to_string(m));
    cfg["methods"] = names;
    write_manifest({"evaluate", {{"checkpoint", ckpt.string()}}, cfg, out.string()});
    return reports;
}

// ---------------------------------------------------------------------------
// Temperature sweep

struct SweepPoint {
    double tau = 0.0;
    metrics::EvaluationReport report;
};

/// tau_end = tau and tau_start = max(1, tau) for every swept value.
inline std::vector<SweepPoint> tau_sweep(const Bundle& b, const std::vector<double>& taus, EvaluateOptions o) {
    o.method = Method::tdce;
    std::vector<SweepPoint> out;
    for (double tau : taus) {
        o.guidance.tau_end = tau;
        o.guidance.tau_start = std::max(1.0, tau);
        out.push_back({tau, evaluate(b, o)});
    }
    return out;
}

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
    std::ostringstream s;
    s << "tau";
    for (const auto& k : metrics::metric_order()) s << ',' << k << ',' << k << "_se";
    s << '\n';
    for (const auto& p : pts) {
        s << data::format_double(p.tau);
        for (const auto& k : metrics::metric_order())
            s << ',' << data::format_double(p.report.value.at(k)) << ',' << data::format_double(p.report.se.at(k));
        s << '\n';
    }
    return s.str();
}

inline std::vector<SweepPoint> cmd_tau_sweep(const fs::path& ckpt, const std::vector<double>& taus,
                                             const EvaluateOptions& o, const fs::path& out) {
    if (taus.empty()) throw DomainError("tau-sweep: empty tau list");
    const auto b = load_bundle(ckpt);
    const auto pts = tau_sweep(b, taus, o);
    fs::create_directories(out);
    write_text(out / "tau_sweep.csv", sweep_csv(pts));
    nlohmann::json all = nlohmann::json::array();
    std::vector<metrics::EvaluationReport> reps;
    for (const auto& p : pts) {
        auto j = metrics::to_json(p.report);
        j["tau"] = p.tau;
        all.push_back(j);
        reps.push_back(p.report);
        reps.back().method = "tdce tau=" + data::format_double(p.tau);
    }
    write_json(out / "tau_sweep.json", {{"points", all}});
    write_text(out / "tau_sweep.md", metrics::to_markdown(reps));
    auto cfg = to_json(o);
    cfg["taus"] = taus;
    write_manifest({"tau-sweep", {{"checkpoint", ckpt.string()}}, cfg, out.string()});
    return pts;
}

// ---------------------------------------------------------------------------
// Theory

struct TheoryOptions {
    std::vector<int> ks{2, 3, 5};
    std::vector<double> taus{0.3, 0.5, 1.0, 2.0};
    double x_min = 1e-4;
    std::size_t samples = 100000;
    std::size_t logz_samples = 1000000;
    std::vector<double> grad_taus{0.1, 0.3, 1.0};
    std::size_t grad_samples = 100000;
    std::size_t simplex_points = 200;  // 0 skips the toy-model simulation
    std::uint64_t seed = 7;
};

inline nlohmann::json to_json(const TheoryOptions& o) {
    return {{"ks", o.ks},           {"taus", o.taus},
            {"x_min", o.x_min},     {"samples", o.samples},
            {"logz_samples", o.logz_samples}, {"grad_taus", o.grad_taus},
            {"grad_samples", o.grad_samples}, {"simplex_points", o.simplex_points},
            {"seed", o.seed}};
}

struct TheoryResult {
    std::vector<theory::BoundReport> bounds;   // uniform pi on the (K, tau) grid
    std::vector<theory::GradBoundReport> grad;
};

inline TheoryResult cmd_theory(const TheoryOptions& o, const fs::path& out) {
    TheoryResult r;
    std::uint64_t cell = 0;
    for (int k : o.ks)
        for (double tau : o.taus)
            r.bounds.push_back(theory::bound_report(Eigen::VectorXd::Constant(k, 1.0 / k), tau, o.x_min, o.samples,
                                                    derive_seed(o.seed, cell++), o.logz_samples));
    for (double tau : o.grad_taus)
        r.grad.push_back(theory::softmax_grad_bound_check(tau, o.grad_samples, derive_seed(o.seed, 1000 + cell++)));
    fs::create_directories(out);
    {
        std::ostringstream s;
        theory::write_bound_csv(s, r.bounds);
        write_text(out / "kl_bounds.csv", s.str());
    }
    {
        std::ostringstream s;
        s << "tau,kl,se,lower,upper\n";
        for (const auto& b : r.bounds)
            if (b.k == 3)
                s << data::format_double(b.tau) << ',' << data::format_double(b.estimate.kl) << ','
                  << data::format_double(b.estimate.se) << ',' << data::format_double(b.appendix.effective_lower()) << ','
                  << data::format_double(b.appendix.upper) << '\n';
        write_text(out / "kl_vs_tau.csv", s.str());
    }
    {
        std::ostringstream s;
        s << "tau,samples,max_abs_entry,entry_bound,max_variance,variance_bound,max_row_sum,entry_ok,variance_ok\n";
        for (const auto& g : r.grad)
            s << data::format_double(g.tau) << ',' << g.samples << ',' << data::format_double(g.max_abs_entry) << ','
              << data::format_double(g.entry_bound) << ',' << data::format_double(g.max_variance) << ','
              << data::format_double(g.variance_bound) << ',' << data::format_double(g.max_row_sum) << ','
              << g.entry_ok() << ',' << g.variance_ok() << '\n';
        write_text(out / "softmax_grad_bounds.csv", s.str());
    }
    if (o.simplex_points > 0) {
        const auto toy = theory::train_toy_simplex_models(derive_seed(o.seed, 2000));
        std::ostringstream s;
        theory::write_simplex_csv(s, theory::simplex_trajectory_sim(toy.denoiser, nullptr, o.seed, o.simplex_points),
                                  "unguided");
        std::ostringstream g;
        theory::write_simplex_csv(g, theory::simplex_trajectory_sim(toy.denoiser, &toy.classifier, o.seed, o.simplex_points),
                                  "guided");
        const auto guided = g.str();
        write_text(out / "simplex_trajectories.csv", s.str() + guided.substr(guided.find('\n') + 1));
    }
    write_manifest({"theory", nlohmann::json::object(), to_json(o), out.string()});
    return r;
}

}  // namespace tdce::pipeline

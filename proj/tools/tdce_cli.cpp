// tdce: train, explain, evaluate, theory, tau-sweep, serve.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tdce/service.hpp"
#include "tdce/tdce.hpp"

namespace {

using namespace tdce;
namespace fs = std::filesystem;

struct GuidanceFlags {
    guidance::GuidanceConfig cfg;
    std::vector<std::string> freeze;
    bool all_mutable = false;
    bool no_confidence = false;

    void add(CLI::App* app) {
        app->add_option("--target", cfg.target, "Desired class label (0 or 1)")->check(CLI::IsMember({0, 1}));
        app->add_option("--lambda", cfg.lambda, "Categorical guidance strength")->check(CLI::NonNegativeNumber);
        app->add_option("--tau-start", cfg.tau_start, "Gumbel-softmax temperature at the first reverse step");
        app->add_option("--tau-end", cfg.tau_end, "Gumbel-softmax temperature at the last reverse step");
        app->add_option("--t-start", cfg.t_start, "Reverse start step (0 = T/2)");
        app->add_option("--distance-weight", cfg.distance_weight, "Weight of the distance gradient");
        app->add_option("--guidance-scale", cfg.guidance_scale, "Multiplier on the posterior variance in the guided mean");
        app->add_flag("--no-confidence-weighting", no_confidence, "Do not scale the classifier term by 1 - p(target)");
        app->add_option("--seed", cfg.seed, "Generation seed");
        app->add_option("--immutable", freeze, "Columns to hold fixed (replaces the schema defaults)");
        app->add_flag("--all-mutable", all_mutable, "Let every column change");
    }

    guidance::GuidanceConfig resolve(const fs::path& ckpt) const {
        auto c = cfg;
        c.confidence_weighting = !no_confidence;
        if (!freeze.empty() || all_mutable) {
            const auto s = data::schema_from_json(pipeline::read_json(ckpt / "schema.json"));
            c.mask = all_mutable ? data::ImmutableMask::all_mutable(s) : data::ImmutableMask::freeze(s, freeze);
        }
        return c;
    }
};

struct EvalFlags {
    std::size_t queries = 200;
    std::vector<std::uint64_t> seeds{7};

    void add(CLI::App* app) {
        app->add_option("--queries", queries, "Number of test queries (rows predicted as the non-target class)");
        app->add_option("--seeds", seeds, "Generation seeds; several seeds give mean and spread");
    }
};

void print_report(const metrics::EvaluationReport& r) {
    std::cout << r.method << ":";
    for (const auto& k : metrics::metric_order()) std::cout << ' ' << k << '=' << data::format_double(r.value.at(k));
    std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tabular diffusion counterfactual explanations"};
    app.require_subcommand(1);

    // train
    pipeline::TrainOptions topt;
    std::string train_out = "runs/ckpt", train_config;
    auto* train = app.add_subcommand("train", "Fit schema, classifier, denoiser and autoencoders into a checkpoint directory");
    train->add_option("--dataset", topt.dataset, "CSV with header row (synthetic data when omitted)");
    train->add_option("--manifest", topt.manifest, "Dataset manifest JSON (column kinds and immutable flags)");
    train->add_option("--target-column", topt.target, "Label column for inferred manifests");
    train->add_option("--rows", topt.synthetic_rows, "Synthetic row count");
    train->add_option("--data-seed", topt.synthetic_seed, "Synthetic data seed");
    train->add_option("--seed", topt.seed, "Training seed");
    train->add_option("--steps", topt.steps, "Diffusion steps T")->check(CLI::Range(2, 100000));
    train->add_option("--epochs", topt.diffusion.epochs, "Denoiser epochs");
    train->add_option("--classifier-epochs", topt.classifier.epochs, "Classifier epochs");
    train->add_option("--ae-epochs", topt.autoencoder.epochs, "Autoencoder epochs");
    train->add_option("--config", train_config, "Re-run from a run_manifest.json written by a previous train")
        ->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "Checkpoint directory");

    // explain
    std::string ckpt = "runs/ckpt", queries_csv, explain_out = "runs/explain";
    GuidanceFlags explain_flags;
    bool trajectory = false;
    auto* explain = app.add_subcommand("explain", "Generate counterfactuals for each row of a queries CSV");
    explain->add_option("--checkpoint", ckpt, "Checkpoint directory");
    explain->add_option("--queries", queries_csv, "CSV of query rows")->required();
    explain->add_flag("--trajectory", trajectory, "Write reverse-process trajectories");
    explain->add_option("--out", explain_out, "Output directory");
    explain_flags.add(explain);

    // evaluate
    std::vector<std::string> methods{"tdce", "wachter"};
    std::string eval_out = "runs/eval";
    GuidanceFlags eval_flags;
    EvalFlags eval_opts;
    auto* evaluate = app.add_subcommand("evaluate", "Score tdce and/or the Wachter baseline on the test split");
    evaluate->add_option("--checkpoint", ckpt, "Checkpoint directory");
    evaluate->add_option("--method", methods, "Methods to evaluate")->check(CLI::IsMember({"tdce", "wachter"}));
    evaluate->add_option("--out", eval_out, "Output directory");
    eval_flags.add(evaluate);
    eval_opts.add(evaluate);

    // theory
    pipeline::TheoryOptions th;
    std::string theory_out = "runs/theory";
    auto* theory = app.add_subcommand("theory", "KL bound grid, softmax Jacobian bounds and simplex trajectories");
    theory->add_option("--k", th.ks, "Category counts");
    theory->add_option("--tau", th.taus, "Temperatures for the KL grid");
    theory->add_option("--x-min", th.x_min, "Interior clamp for the KL estimator");
    theory->add_option("--samples", th.samples, "Monte Carlo samples per KL cell");
    theory->add_option("--logz-samples", th.logz_samples, "Monte Carlo samples for log Z");
    theory->add_option("--grad-tau", th.grad_taus, "Temperatures for the Jacobian bound check");
    theory->add_option("--simplex-points", th.simplex_points, "Toy trajectories per mode (0 skips)");
    theory->add_option("--seed", th.seed, "Seed");
    theory->add_option("--out", theory_out, "Output directory");

    // tau-sweep
    std::vector<double> taus{0.1, 0.3, 1.0, 2.0, 5.0};
    std::string sweep_out = "runs/tau_sweep";
    GuidanceFlags sweep_flags;
    EvalFlags sweep_opts;
    auto* sweep = app.add_subcommand("tau-sweep", "Evaluate tdce across final Gumbel-softmax temperatures");
    sweep->add_option("--checkpoint", ckpt, "Checkpoint directory");
    sweep->add_option("--taus", taus, "Final temperatures");
    sweep->add_option("--out", sweep_out, "Output directory");
    sweep_flags.add(sweep);
    sweep_opts.add(sweep);

    // serve
    std::string host = "127.0.0.1";
    int port = 8080;
    auto* serve = app.add_subcommand("serve", "HTTP JSON service over one checkpoint");
    serve->add_option("--checkpoint", ckpt, "Checkpoint directory");
    serve->add_option("--host", host, "Bind address");
    serve->add_option("--port", port, "Port")->check(CLI::Range(1, 65535));

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            if (!train_config.empty()) {
                const auto m = pipeline::manifest_from_json(pipeline::read_json(train_config));
                if (m.command != "train") throw CheckpointError(train_config + " is not a train manifest");
                topt = pipeline::train_options_from_json(m.config);
            }
            const auto s = pipeline::cmd_train(topt, train_out);
            std::cout << "checkpoint " << train_out << " schema " << s.schema_hash << " val_acc "
                      << data::format_double(s.validation_accuracy) << " final_loss "
                      << data::format_double(s.diffusion_epoch_loss.back()) << " (" << data::format_double(s.seconds)
                      << " s)\n";
        } else if (*explain) {
            auto cfg = explain_flags.resolve(ckpt);
            cfg.record_trajectory = trajectory;
            const auto res = pipeline::cmd_explain(ckpt, queries_csv, cfg, explain_out);
            std::size_t valid = 0;
            for (const auto& r : res) valid += r.valid;
            std::cout << res.size() << " counterfactuals, " << valid << " valid -> " << explain_out << '\n';
        } else if (*evaluate) {
            pipeline::EvaluateOptions o;
            o.guidance = eval_flags.resolve(ckpt);
            o.queries = eval_opts.queries;
            o.seeds = eval_opts.seeds;
            std::vector<pipeline::Method> ms;
            for (const auto& m : methods) ms.push_back(pipeline::method_from_string(m));
            for (const auto& r : pipeline::cmd_evaluate(ckpt, ms, o, eval_out)) print_report(r);
        } else if (*theory) {
            const auto r = pipeline::cmd_theory(th, theory_out);
            std::size_t inside = 0;
            for (const auto& b : r.bounds) inside += b.appendix_satisfied();
            std::cout << inside << '/' << r.bounds.size() << " KL cells inside the bounds -> " << theory_out << '\n';
        } else if (*sweep) {
            pipeline::EvaluateOptions o;
            o.guidance = sweep_flags.resolve(ckpt);
            o.queries = sweep_opts.queries;
            o.seeds = sweep_opts.seeds;
            for (const auto& p : pipeline::cmd_tau_sweep(ckpt, taus, o, sweep_out))
                std::cout << "tau " << data::format_double(p.tau) << " js " << data::format_double(p.report.value.at("js"))
                          << " validity " << data::format_double(p.report.value.at("validity")) << '\n';
        } else if (*serve) {
            std::cout << "serving " << ckpt << " on http://" << host << ':' << port << std::endl;
            service::serve(ckpt, host, port);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

#pragma once

// JSON-over-HTTP front end for a checkpoint directory. The handlers are plain
// functions of (service, request) so tests can call them without a socket;
// serve() binds them to an httplib server.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>

// Eigen must come before httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "tdce/pipeline.hpp"

#include <httplib.h>
#include <json.hpp>

namespace tdce::service {

inline constexpr const char* kApiVersion = "1";

struct Response {
    int status = 200;
    nlohmann::json body;

    std::string text() const { return body.dump() + "\n"; }
};

/// Request validation failure tied to one body field.
class FieldError : public Error {
public:
    FieldError(std::string field, const std::string& msg) : Error(field + ": " + msg), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

inline Response ok(nlohmann::json body) {
    body["api_version"] = kApiVersion;
    return {200, std::move(body)};
}

inline Response fail(int status, const std::string& message, const std::string& field = "") {
    nlohmann::json e{{"message", message}};
    if (!field.empty()) e["field"] = field;
    return {status, {{"api_version", kApiVersion}, {"error", e}}};
}

class Service {
public:
    explicit Service(pipeline::Bundle b) : bundle_(std::move(b)), hash_(bundle_.schema.hash()) {}

    const pipeline::Bundle& bundle() const { return bundle_; }
    const std::string& schema_hash() const { return hash_; }

    Response schema() const {
        auto j = data::to_json(bundle_.schema);
        nlohmann::json immutable = nlohmann::json::array();
        for (const auto& c : bundle_.schema.columns)
            if (c.immutable) immutable.push_back(c.name);
        j["immutable_defaults"] = immutable;
        j["test_rows"] = bundle_.test.rows.size();
        j["validation_accuracy"] = bundle_.validation_accuracy;
        return ok(j);
    }

    Response sample(const std::string& index_text) const {
        std::size_t idx = 0;
        try {
            const auto v = std::stoll(index_text);
            if (v < 0) throw std::out_of_range("negative");
            idx = static_cast<std::size_t>(v);
        } catch (const std::exception&) {
            return fail(400, "index must be a non-negative integer", "index");
        }
        if (idx >= bundle_.test.rows.size())
            return fail(400, "index out of range (test split has " + std::to_string(bundle_.test.rows.size()) + " rows)",
                        "index");
        const auto& row = bundle_.test.rows[idx];
        const auto x = data::encode_row(bundle_.schema, bundle_.schema.layout(), row);
        const auto p = bundle_.classifier.probabilities(x);
        nlohmann::json r = nlohmann::json::object();
        for (std::size_t i = 0; i < row.size(); ++i) r[bundle_.schema.columns[i].name] = guidance::cell_json(row[i]);
        nlohmann::json j{{"index", idx},
                         {"row", r},
                         {"probabilities", {p(0, 0), p(1, 0)}},
                         {"predicted", p(1, 0) > p(0, 0) ? 1 : 0}};
        if (idx < bundle_.test.labels.size()) j["label"] = bundle_.test.labels[idx];
        return ok(j);
    }

    /// Body: {"query": {column: value} | "index": n, "immutable": {column: bool},
    /// "target", "tau_end", "lambda", "t_start", "seed", "trajectory", "schema_hash"}.
    Response counterfactual(const std::string& body, bool trajectory_flag = false) const {
        return guarded([&] {
            const auto j = parse_body(body);
            if (auto r = hash_conflict(j)) return *r;
            const auto query = query_row(j);
            auto cfg = guidance_config(j);
            cfg.record_trajectory = trajectory_flag || field<bool>(j, "trajectory", false);
            const auto res = guidance::generate_counterfactual(query, bundle_.schema, bundle_.classifier, bundle_.denoiser, cfg);
            auto out = guidance::to_json(res, bundle_.schema, cfg.record_trajectory);
            out["seed"] = cfg.seed;
            out["schema_hash"] = hash_;
            return ok(out);
        });
    }

    /// Body: {"method": "tdce"|"wachter", "queries", "seeds", plus guidance fields}.
    Response evaluate(const std::string& body) const {
        return guarded([&] {
            const auto j = parse_body(body);
            if (auto r = hash_conflict(j)) return *r;
            pipeline::EvaluateOptions o;
            try {
                o.method = pipeline::method_from_string(field<std::string>(j, "method", "tdce"));
            } catch (const DomainError& e) {
                throw FieldError("method", e.what());
            }
            o.guidance = guidance_config(j);
            const auto n = field<long long>(j, "queries", 200);
            if (n <= 0) throw FieldError("queries", "must be positive");
            o.queries = static_cast<std::size_t>(n);
            if (j.contains("seeds")) {
                if (!j["seeds"].is_array() || j["seeds"].empty()) throw FieldError("seeds", "must be a non-empty array");
                o.seeds.clear();
                for (const auto& s : j["seeds"]) {
                    if (!s.is_number_unsigned()) throw FieldError("seeds", "entries must be non-negative integers");
                    o.seeds.push_back(s.get<std::uint64_t>());
                }
            } else {
                o.seeds = {o.guidance.seed};
            }
            auto out = metrics::to_json(pipeline::evaluate(bundle_, o));
            out["schema_hash"] = hash_;
            return ok(out);
        });
    }

private:
    template <class F>
    Response guarded(F&& f) const {
        try {
            return f();
        } catch (const FieldError& e) {
            return fail(400, e.what(), e.field());
        } catch (const GenerationError& e) {
            return fail(500, e.what());
        } catch (const Error& e) {
            return fail(400, e.what());
        }
    }

    static nlohmann::json parse_body(const std::string& body) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception&) {
            throw FieldError("body", "not valid JSON");
        }
        if (!j.is_object()) throw FieldError("body", "must be a JSON object");
        return j;
    }

    template <class T>
    static T field(const nlohmann::json& j, const std::string& name, T fallback) {
        if (!j.contains(name) || j[name].is_null()) return fallback;
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!j[name].is_boolean()) throw FieldError(name, "must be a boolean");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!j[name].is_string()) throw FieldError(name, "must be a string");
            } else if constexpr (std::is_integral_v<T>) {
                if (!j[name].is_number_integer()) throw FieldError(name, "must be an integer");
            } else {
                if (!j[name].is_number()) throw FieldError(name, "must be a number");
            }
            return j[name].get<T>();
        } catch (const nlohmann::json::exception&) {
            throw FieldError(name, "has the wrong type");
        }
    }

    std::optional<Response> hash_conflict(const nlohmann::json& j) const {
        const auto h = field<std::string>(j, "schema_hash", "");
        if (!h.empty() && h != hash_) return fail(409, "schema hash " + h + " does not match the served checkpoint " + hash_, "schema_hash");
        return std::nullopt;
    }

    data::FeatureRow query_row(const nlohmann::json& j) const {
        const bool has_q = j.contains("query"), has_i = j.contains("index");
        if (has_q == has_i) throw FieldError("query", "give exactly one of 'query' or 'index'");
        if (has_i) {
            const auto i = field<long long>(j, "index", -1);
            if (i < 0 || static_cast<std::size_t>(i) >= bundle_.test.rows.size())
                throw FieldError("index", "out of range");
            return bundle_.test.rows[static_cast<std::size_t>(i)];
        }
        const auto& q = j["query"];
        if (!q.is_object()) throw FieldError("query", "must be an object keyed by column name");
        std::vector<std::string> cells;
        for (const auto& c : bundle_.schema.columns) {
            const std::string f = "query." + c.name;
            if (!q.contains(c.name)) throw FieldError(f, "missing");
            const auto& v = q[c.name];
            if (c.kind == data::ColumnKind::continuous) {
                if (!v.is_number()) throw FieldError(f, "must be a number");
                const double d = v.get<double>();
                if (!std::isfinite(d)) throw FieldError(f, "must be finite");
                cells.push_back(data::format_double(d));
            } else {
                if (!v.is_string()) throw FieldError(f, "must be a string");
                const auto s = v.get<std::string>();
                if (!std::binary_search(c.categories.begin(), c.categories.end(), s))
                    throw FieldError(f, "unknown category '" + s + "'");
                cells.push_back(s);
            }
        }
        for (const auto& [k, _] : q.items())
            if (std::none_of(bundle_.schema.columns.begin(), bundle_.schema.columns.end(),
                             [&](const data::Column& c) { return c.name == k; }))
                throw FieldError("query." + k, "unknown column");
        return data::parse_row(bundle_.schema, cells);
    }

    data::ImmutableMask mask(const nlohmann::json& j) const {
        auto m = data::ImmutableMask::from_defaults(bundle_.schema);
        if (!j.contains("immutable")) return m;
        const auto& im = j["immutable"];
        if (!im.is_object()) throw FieldError("immutable", "must be an object of column -> bool");
        for (const auto& [k, v] : im.items()) {
            const std::string f = "immutable." + k;
            if (!v.is_boolean()) throw FieldError(f, "must be a boolean");
            const auto it = std::find_if(bundle_.schema.columns.begin(), bundle_.schema.columns.end(),
                                         [&](const data::Column& c) { return c.name == k; });
            if (it == bundle_.schema.columns.end()) throw FieldError(f, "unknown column");
            m.mutable_columns[static_cast<std::size_t>(it - bundle_.schema.columns.begin())] = !v.get<bool>();
        }
        return m;
    }

    guidance::GuidanceConfig guidance_config(const nlohmann::json& j) const {
        guidance::GuidanceConfig c;
        c.target = field<int>(j, "target", c.target);
        if (c.target != 0 && c.target != 1) throw FieldError("target", "must be 0 or 1");
        c.tau_end = field<double>(j, "tau_end", c.tau_end);
        if (!(c.tau_end > 0.0)) throw FieldError("tau_end", "must be positive");
        c.tau_start = std::max(c.tau_start, c.tau_end);
        c.lambda = field<double>(j, "lambda", c.lambda);
        if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw FieldError("lambda", "must be finite and non-negative");
        c.t_start = field<int>(j, "t_start", c.t_start);
        const int T = bundle_.denoiser.schedule.steps();
        if (c.t_start < 0 || c.t_start > T) throw FieldError("t_start", "must lie in [0, " + std::to_string(T) + "]");
        const auto seed = field<long long>(j, "seed", static_cast<long long>(c.seed));
        if (seed < 0) throw FieldError("seed", "must be non-negative");
        c.seed = static_cast<std::uint64_t>(seed);
        c.mask = mask(j);
        return c;
    }

    pipeline::Bundle bundle_;
    std::string hash_;
};

inline void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.text(), "application/json");
}

/// Registers the routes on `server`. The Service must outlive it.
inline void bind(httplib::Server& server, const Service& svc) {
    server.Get("/schema", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.schema()); });
    server.Get("/sample", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, req.has_param("index") ? svc.sample(req.get_param_value("index")) : fail(400, "missing", "index"));
    });
    server.Post("/counterfactual", [&svc](const httplib::Request& req, httplib::Response& res) {
        const auto flag = req.has_param("trajectory") && req.get_param_value("trajectory") != "0" &&
                          req.get_param_value("trajectory") != "false";
        send(res, svc.counterfactual(req.body, flag));
    });
    server.Post("/evaluate", [&svc](const httplib::Request& req, httplib::Response& res) { send(res, svc.evaluate(req.body)); });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (res.body.empty()) send(res, fail(res.status, "no such endpoint"));
    });
}

/// Blocks serving `checkpoint` on host:port.
inline void serve(const std::string& checkpoint, const std::string& host, int port) {
    Service svc(pipeline::load_bundle(checkpoint));
    httplib::Server server;
    bind(server, svc);
    if (!server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace tdce::service

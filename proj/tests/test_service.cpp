#include <catch_amalgamated.hpp>

#include <future>
#include <thread>

#include "tdce/service.hpp"

using namespace tdce;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const service::Service& svc() {
    static const service::Service s = [] {
        const auto dir = fs::temp_directory_path() / "tdce_test_service_ckpt";
        fs::remove_all(dir);
        pipeline::TrainOptions o;
        o.synthetic_rows = 1000;
        o.seed = 8;
        o.steps = 60;
        o.diffusion.hidden = {64, 64};
        o.diffusion.epochs = 30;
        o.classifier.epochs = 15;
        o.autoencoder.epochs = 5;
        pipeline::cmd_train(o, dir);
        return service::Service(pipeline::load_bundle(dir));
    }();
    return s;
}

// Index of a test row the classifier rejects.
std::size_t rejected_index() {
    const auto& b = svc().bundle();
    for (std::size_t i = 0; i < b.test.rows.size(); ++i)
        if (b.classifier.predict(data::encode_row(b.schema, b.schema.layout(), b.test.rows[i])) == 0) return i;
    FAIL("no rejected test row");
    return 0;
}

json query_object(const data::FeatureRow& row) {
    json q = json::object();
    const auto& s = svc().bundle().schema;
    for (std::size_t i = 0; i < row.size(); ++i) q[s.columns[i].name] = guidance::cell_json(row[i]);
    return q;
}

void check_field_error(const service::Response& r, int status, const std::string& field) {
    INFO(r.body.dump());
    CHECK(r.status == status);
    CHECK(r.body.at("api_version") == service::kApiVersion);
    CHECK(r.body.at("error").at("field") == field);
    CHECK_FALSE(r.body.at("error").at("message").get<std::string>().empty());
}

}  // namespace

TEST_CASE("GET /schema", "[service]") {
    const auto r = svc().schema();
    CHECK(r.status == 200);
    CHECK(r.body.at("api_version") == "1");
    CHECK(r.body.at("columns").size() == 3);
    CHECK(r.body.at("immutable_defaults").is_array());
    CHECK(r.body.at("test_rows") == svc().bundle().test.rows.size());
}

TEST_CASE("GET /sample", "[service]") {
    const auto r = svc().sample("0");
    REQUIRE(r.status == 200);
    const auto& p = r.body.at("probabilities");
    CHECK(std::abs(p[0].get<double>() + p[1].get<double>() - 1.0) < 1e-12);
    CHECK(r.body.at("predicted") == (p[1].get<double>() > p[0].get<double>() ? 1 : 0));
    CHECK(r.body.at("row").contains("x1"));
    CHECK(r.body.contains("label"));
    for (const char* bad : {"x", "-1", "", "999999"}) check_field_error(svc().sample(bad), 400, "index");
}

TEST_CASE("POST /counterfactual re-scores and round-trips", "[service]") {
    const auto idx = rejected_index();
    const auto& b = svc().bundle();
    const json body{{"query", query_object(b.test.rows[idx])}, {"seed", 4}, {"tau_end", 0.5}, {"lambda", 0.2}};
    const auto r = svc().counterfactual(body.dump());
    REQUIRE(r.status == 200);
    CHECK(r.body.at("api_version") == "1");
    CHECK(r.body.at("schema_hash") == svc().schema_hash());
    CHECK(r.body.at("deltas").size() == 3);
    CHECK_FALSE(r.body.contains("trajectory"));

    // Independent re-score of the returned row.
    std::vector<std::string> cells;
    for (const auto& c : b.schema.columns) {
        const auto& v = r.body.at("row").at(c.name);
        cells.push_back(v.is_string() ? v.get<std::string>() : data::format_double(v.get<double>()));
    }
    const Eigen::VectorXd x = data::encode_row(b.schema, b.schema.layout(), data::parse_row(b.schema, cells));
    CHECK(std::abs(r.body.at("probability").get<double>() - b.classifier.probability(x, 1)) < 1e-9);
    CHECK(r.body.at("valid") == (b.classifier.predict(x) == 1));

    // Same request and seed, same bytes; by index and by value agree.
    CHECK(svc().counterfactual(body.dump()).text() == r.text());
    json by_index = body;
    by_index.erase("query");
    by_index["index"] = idx;
    CHECK(svc().counterfactual(by_index.dump()).body.at("row") == r.body.at("row"));

    json traj = body;
    traj["trajectory"] = true;
    CHECK(svc().counterfactual(traj.dump()).body.at("trajectory").size() == 31);
    CHECK(svc().counterfactual(body.dump(), true).body.contains("trajectory"));
}

TEST_CASE("POST /counterfactual with every column immutable returns the query", "[service]") {
    const auto& b = svc().bundle();
    const auto row = b.test.rows[rejected_index()];
    json im = json::object();
    for (const auto& c : b.schema.columns) im[c.name] = true;
    const auto r = svc().counterfactual(json{{"query", query_object(row)}, {"immutable", im}}.dump());
    REQUIRE(r.status == 200);
    CHECK(r.body.at("row") == query_object(row));
    for (const auto& d : r.body.at("deltas")) CHECK(d.at("changed") == false);
}

TEST_CASE("POST /counterfactual validation", "[service][errors]") {
    const auto row = query_object(svc().bundle().test.rows[0]);
    auto with = [&](const std::string& key, const json& v) {
        json j{{"query", row}};
        j[key] = v;
        return j.dump();
    };
    check_field_error(svc().counterfactual("{not json"), 400, "body");
    check_field_error(svc().counterfactual("[1,2]"), 400, "body");
    check_field_error(svc().counterfactual("{}"), 400, "query");
    check_field_error(svc().counterfactual(json{{"query", row}, {"index", 0}}.dump()), 400, "query");
    check_field_error(svc().counterfactual(json{{"index", "x"}}.dump()), 400, "index");
    check_field_error(svc().counterfactual(json{{"index", 1 << 30}}.dump()), 400, "index");
    json missing = row;
    missing.erase("x1");
    check_field_error(svc().counterfactual(json{{"query", missing}}.dump()), 400, "query.x1");
    json bad_cat = row;
    bad_cat["c"] = "zzz";
    check_field_error(svc().counterfactual(json{{"query", bad_cat}}.dump()), 400, "query.c");
    json bad_num = row;
    bad_num["x2"] = "1.0";
    check_field_error(svc().counterfactual(json{{"query", bad_num}}.dump()), 400, "query.x2");
    json extra = row;
    extra["x9"] = 1.0;
    check_field_error(svc().counterfactual(json{{"query", extra}}.dump()), 400, "query.x9");
    check_field_error(svc().counterfactual(with("tau_end", 0.0)), 400, "tau_end");
    check_field_error(svc().counterfactual(with("tau_end", "hot")), 400, "tau_end");
    check_field_error(svc().counterfactual(with("lambda", -1.0)), 400, "lambda");
    check_field_error(svc().counterfactual(with("target", 2)), 400, "target");
    check_field_error(svc().counterfactual(with("t_start", 61)), 400, "t_start");
    check_field_error(svc().counterfactual(with("seed", -3)), 400, "seed");
    check_field_error(svc().counterfactual(with("trajectory", 1)), 400, "trajectory");
    check_field_error(svc().counterfactual(with("immutable", json{{"nope", true}})), 400, "immutable.nope");
    check_field_error(svc().counterfactual(with("immutable", json{{"x1", "yes"}})), 400, "immutable.x1");
    check_field_error(svc().counterfactual(with("schema_hash", "0123456789abcdef")), 409, "schema_hash");
    CHECK(svc().counterfactual(with("schema_hash", svc().schema_hash())).status == 200);
}

TEST_CASE("POST /evaluate", "[service]") {
    const auto r = svc().evaluate(json{{"method", "wachter"}, {"queries", 8}, {"seeds", {1}}}.dump());
    REQUIRE(r.status == 200);
    CHECK(r.body.at("method") == "wachter");
    CHECK(r.body.at("count") == 8);
    for (const auto& k : metrics::metric_order()) CHECK(r.body.at("metrics").contains(k));
    CHECK(r.body.at("api_version") == "1");
    check_field_error(svc().evaluate(json{{"method", "dice"}}.dump()), 400, "method");
    check_field_error(svc().evaluate(json{{"queries", 0}}.dump()), 400, "queries");
    check_field_error(svc().evaluate(json{{"seeds", json::array()}}.dump()), 400, "seeds");
    check_field_error(svc().evaluate(json{{"seeds", {-1}}}.dump()), 400, "seeds");
    check_field_error(svc().evaluate(json{{"schema_hash", "ffff"}}.dump()), 409, "schema_hash");
}

TEST_CASE("HTTP round trip", "[service][http]") {
    httplib::Server server;
    service::bind(server, svc());
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    httplib::Client client("127.0.0.1", port);

    const auto s = client.Get("/schema");
    REQUIRE(s);
    CHECK(s->status == 200);
    CHECK(s->get_header_value("Content-Type") == "application/json");
    CHECK(s->body == svc().schema().text());

    const auto bad = client.Get("/sample?index=abc");
    REQUIRE(bad);
    CHECK(bad->status == 400);
    CHECK(json::parse(bad->body).at("error").at("field") == "index");
    const auto nosuch = client.Get("/nope");
    REQUIRE(nosuch);
    CHECK(nosuch->status == 404);
    CHECK(json::parse(nosuch->body).at("api_version") == "1");

    // Sequential answers, then the same requests concurrently.
    std::vector<std::string> bodies;
    for (int i = 0; i < 4; ++i)
        bodies.push_back(json{{"index", static_cast<int>(rejected_index())}, {"seed", 20 + i}}.dump());
    std::vector<std::string> sequential;
    for (const auto& b : bodies) {
        const auto r = client.Post("/counterfactual", b, "application/json");
        REQUIRE(r);
        CHECK(r->status == 200);
        CHECK(r->body == svc().counterfactual(b).text());
        sequential.push_back(r->body);
    }
    std::vector<std::future<std::string>> futures;
    for (const auto& b : bodies)
        futures.push_back(std::async(std::launch::async, [&, b] {
            httplib::Client c("127.0.0.1", port);
            const auto r = c.Post("/counterfactual", b, "application/json");
            return r ? r->body : std::string{};
        }));
    for (std::size_t i = 0; i < futures.size(); ++i) CHECK(futures[i].get() == sequential[i]);

    const auto traj = client.Post("/counterfactual?trajectory=1", bodies[0], "application/json");
    REQUIRE(traj);
    CHECK(json::parse(traj->body).contains("trajectory"));
    const auto conflict =
        client.Post("/counterfactual", json{{"index", 0}, {"schema_hash", "x"}}.dump(), "application/json");
    REQUIRE(conflict);
    CHECK(conflict->status == 409);

    server.stop();
    th.join();
}

#include <filesystem>
#include <fstream>
#include <future>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "saerec/pipeline/run.hpp"
#include "saerec/service.hpp"

using namespace saerec;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Planted data with a model trained long enough for steering to show.
const fs::path& bundle_dir() {
  static const fs::path dir = [] {
    const auto out = fs::temp_directory_path() / "saerec_service_run";
    auto cfg = pipeline::config_from_json(json::parse(R"({
      "seed": 3,
      "data": {"synthetic": {"n_users": 500, "n_items": 60, "n_attributes": 4, "min_length": 10, "max_length": 20}},
      "model": {"n_layers": 2, "n_heads": 2, "hidden": 16, "max_len": 20},
      "train": {"epochs": 25, "batch_size": 32, "lr": 0.003},
      "sae": {"dict_size": 32, "l1_weight": 0.01, "epochs": 20, "batch_size": 64},
      "sae_table": {"l1_weights": []},
      "sae_sweep": {"l1_weights": [], "dict_sizes": [], "repeats": 1},
      "steer": {"grid": [0], "k": 10},
      "probe": {"epochs": 1},
      "demo_users": 12
    })"));
    cfg.output_dir = out;
    pipeline::run(cfg, "bundle");
    return out / "bundle";
  }();
  return dir;
}

const service::Bundle& bundle() {
  static const service::Bundle b = service::Bundle::load(bundle_dir());
  return b;
}

json first_history() { return bundle().users.at(0).at("history"); }

}  // namespace

TEST_CASE("features are sorted with ordered quantiles") {
  const auto r = service::features(bundle());
  CHECK(r.status == 200);
  REQUIRE(r.body.size() == bundle().catalog.n_attributes());
  for (std::size_t i = 0; i < r.body.size(); ++i) {
    const auto& f = r.body[i];
    const auto& q = f.at("quantiles");
    CHECK(q.at("p50").get<double>() <= q.at("p90").get<double>());
    CHECK(q.at("p90").get<double>() <= q.at("p99").get<double>());
    if (i > 0) CHECK(r.body[i - 1].at("correlation").get<double>() >= f.at("correlation").get<double>());
    for (const char* key : {"feature_id", "attribute", "roc_auc", "sensitivity"}) CHECK(f.contains(key));
  }
}

TEST_CASE("no interventions gives the baseline and requests are deterministic") {
  const json req{{"history", first_history()}, {"k", 5}, {"interventions", json::array()}};
  const auto a = service::recommend(bundle(), req);
  REQUIRE(a.status == 200);
  CHECK(a.body.at("items") == a.body.at("baseline").at("items"));
  CHECK(a.body.at("items").size() == 5);
  CHECK(service::recommend(bundle(), req).body == a.body);

  // exclude_seen defaults to true
  std::set<std::int64_t> seen;
  for (const auto& v : first_history()) seen.insert(v.get<std::int64_t>());
  for (const auto& item : a.body.at("items")) CHECK(seen.count(item.at("item_id").get<std::int64_t>()) == 0);

  const json by_user{{"user_id", bundle().users.at(0).at("user_id")}, {"k", 5}};
  CHECK(service::recommend(bundle(), by_user).body == a.body);
}

TEST_CASE("request validation") {
  const auto h = first_history();
  auto status = [](const json& req) { return service::recommend(bundle(), req).status; };
  CHECK(status({{"history", json::array()}}) == 422);
  CHECK(status({{"history", {999999999}}}) == 400);
  CHECK(status({{"history", h}, {"interventions", {{{"feature_id", 9999}, {"value", 1.0}}}}}) == 400);
  CHECK(status({{"history", h}, {"interventions", {{{"feature_id", 1}, {"value", 1.0}}, {{"feature_id", 1}, {"value", 2.0}}}}}) ==
        400);
  CHECK(status({{"history", h}, {"k", 0}}) == 400);
  CHECK(status({{"history", h}, {"k", "ten"}}) == 400);
  CHECK(status({{"user_id", -12345}}) == 400);
  CHECK(status({{"k", 3}}) == 400);
  CHECK(status(json::array()) == 400);
}

TEST_CASE("a large positive value raises the target attribute share") {
  const auto feats = service::features(bundle()).body;
  for (const auto& f : feats) {
    const auto name = f.at("attribute").get<std::string>();
    double steered = 0.0, base = 0.0;
    for (const auto& u : bundle().users) {
      const json req{{"history", u.at("history")},
                     {"interventions", {{{"feature_id", f.at("feature_id")}, {"value", 10.0}}}}};
      const auto r = service::recommend(bundle(), req);
      REQUIRE(r.status == 200);
      steered += r.body.at("attribute_proportions").at(name).get<double>();
      base += r.body.at("baseline").at("attribute_proportions").at(name).get<double>();
    }
    CHECK_MESSAGE(steered > base, name);
  }
}

TEST_CASE("http endpoints, loading state and CORS") {
  service::Server server(bundle_dir());
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  std::thread serving([&] { server.listen(); });
  httplib::Client client("127.0.0.1", port);
  for (int i = 0; i < 100 && !client.Get("/api/v1/health"); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));

  auto health = client.Get("/api/v1/health");
  REQUIRE(health);
  CHECK(health->status == 503);
  CHECK(client.Get("/api/v1/features")->status == 503);
  CHECK(health->get_header_value("Access-Control-Allow-Origin") == "*");

  server.start_loading();
  REQUIRE(server.wait_loaded());
  health = client.Get("/api/v1/health");
  REQUIRE(health->status == 200);
  const json h = json::parse(health->body);
  std::ifstream meta(bundle_dir() / "bundle.json");
  CHECK(h.at("checksums") == json::parse(meta).at("files"));

  auto users = client.Get("/api/v1/users");
  REQUIRE(users->status == 200);
  CHECK(json::parse(users->body).size() == bundle().users.size());

  const json req{{"history", first_history()},
                 {"k", 4},
                 {"interventions", {{{"feature_id", bundle().features.at(0).at("feature_id")}, {"value", 3.0}}}}};
  std::vector<std::future<std::string>> replies;
  for (int i = 0; i < 4; ++i) {
    replies.push_back(std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", port);
      auto r = c.Post("/api/v1/recommend", req.dump(), "application/json");
      return r && r->status == 200 ? r->body : std::string();
    }));
  }
  std::string first;
  for (auto& f : replies) {
    const auto body = f.get();
    CHECK_FALSE(body.empty());
    if (first.empty()) first = body;
    CHECK(body == first);
  }
  CHECK(json::parse(client.Get("/api/v1/health")->body).at("checksums") == h.at("checksums"));

  CHECK(client.Post("/api/v1/recommend", "{not json", "application/json")->status == 400);
  CHECK(client.Post("/api/v1/recommend", R"({"history": []})", "application/json")->status == 422);
  auto pre = client.Options("/api/v1/recommend");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  CHECK(pre->get_header_value("Access-Control-Allow-Methods").find("POST") != std::string::npos);

  server.stop();
  serving.join();
}

TEST_CASE("a tampered bundle fails to load") {
  const auto copy = fs::temp_directory_path() / "saerec_service_tampered";
  fs::remove_all(copy);
  fs::copy(bundle_dir(), copy);
  { std::ofstream(copy / "users.json", std::ios::app) << " "; }
  CHECK_THROWS(service::Bundle::load(copy));
  service::Server server(copy);
  server.start_loading();
  CHECK_FALSE(server.wait_loaded());
  const auto r = service::health(nullptr, "checksum mismatch");
  CHECK(r.status == 503);
  fs::remove_all(copy);
}

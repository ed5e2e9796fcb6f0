#include "saerec/service.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "httplib.h"
#include "saerec/io/checksum.hpp"
#include "saerec/steer.hpp"

namespace saerec::service {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing " + path.string());
  return json::parse(in);
}

Reply error(int status, const std::string& message) { return {status, json{{"error", message}}}; }

json list_json(const Bundle& b, const std::vector<rec::ScoredItem>& items) {
  json out = json::array();
  eval::RecList list;
  for (const auto& s : items) {
    const auto i = static_cast<std::size_t>(s.item);
    json attrs = json::array();
    for (int a : b.catalog.attributes[i]) attrs.push_back(b.catalog.attribute_names[static_cast<std::size_t>(a)]);
    out.push_back({{"item_id", b.catalog.original_item_ids[i]},
                   {"title", b.catalog.titles[i]},
                   {"attributes", attrs},
                   {"score", s.score}});
    list.items.push_back(s.item);
  }
  const auto p = steer::attribute_proportions(std::span<const eval::RecList>(&list, 1), b.catalog);
  json props = json::object();
  for (std::size_t a = 0; a < p.size(); ++a) props[b.catalog.attribute_names[a]] = p[a];
  return json{{"items", out}, {"attribute_proportions", props}};
}

}  // namespace

Bundle Bundle::load(const fs::path& dir) {
  const json meta = read_json(dir / "bundle.json");
  Bundle b;
  for (const auto& [name, sha] : meta.at("files").items()) {
    const auto actual = io::sha256_file(dir / name);
    if (actual != sha.get<std::string>()) throw std::runtime_error("checksum mismatch for " + name);
    b.checksums[name] = actual;
  }
  b.stages = meta.value("stages", json::object());
  b.tap_layer = meta.at("tap_layer").get<std::size_t>();
  b.model = rec::load_model(dir / "model.bin");
  b.sae = sae::load_sae(dir / "sae.bin");
  b.catalog = data::load_items(dir / "items.csv");
  b.features = read_json(dir / "features.json");
  b.users = read_json(dir / "users.json");
  if (b.catalog.n_items() != b.model.config.n_items) throw std::runtime_error("item table does not match the model");
  if (b.sae.model.input_dim() != b.model.config.hidden) throw std::runtime_error("SAE does not match the model");
  return b;
}

Reply health(const Bundle* bundle, const std::string& load_error) {
  if (!bundle) {
    json body{{"status", load_error.empty() ? "loading" : "error"}};
    if (!load_error.empty()) body["error"] = load_error;
    return {503, body};
  }
  return {200, json{{"status", "ok"}, {"checksums", bundle->checksums}, {"stages", bundle->stages}}};
}

Reply features(const Bundle& bundle) { return {200, bundle.features}; }

Reply users(const Bundle& bundle) {
  json out = json::array();
  for (const auto& u : bundle.users) {
    const auto& h = u.at("history");
    json preview = json::array();
    for (std::size_t i = h.size() > 5 ? h.size() - 5 : 0; i < h.size(); ++i) {
      const auto dense = bundle.catalog.find_item(h[i].get<std::int64_t>());
      if (dense >= 0) preview.push_back(bundle.catalog.titles[static_cast<std::size_t>(dense)]);
    }
    out.push_back({{"user_id", u.at("user_id")}, {"history", h}, {"history_length", h.size()}, {"preview", preview}});
  }
  return {200, out};
}

Reply recommend(const Bundle& b, const json& req) {
  if (!req.is_object()) return error(400, "body must be a JSON object");

  std::size_t k = 10;
  if (req.contains("k")) {
    const auto& jk = req.at("k");
    if (!jk.is_number_integer() || jk.get<std::int64_t>() < 1 ||
        jk.get<std::int64_t>() > static_cast<std::int64_t>(b.catalog.n_items())) {
      return error(400, "k must be an integer in [1, number of items]");
    }
    k = jk.get<std::size_t>();
  }
  bool exclude_seen = true;
  if (req.contains("exclude_seen")) {
    if (!req.at("exclude_seen").is_boolean()) return error(400, "exclude_seen must be a boolean");
    exclude_seen = req.at("exclude_seen").get<bool>();
  }

  json source;
  if (req.contains("history")) {
    source = req.at("history");
  } else if (req.contains("user_id")) {
    const auto& uid = req.at("user_id");
    for (const auto& u : b.users) {
      if (u.at("user_id") == uid) source = u.at("history");
    }
    if (source.is_null()) return error(400, "unknown user_id " + uid.dump());
  } else {
    return error(400, "history or user_id is required");
  }
  if (!source.is_array()) return error(400, "history must be an array of item ids");
  if (source.empty()) return error(422, "history is empty");
  std::vector<std::int64_t> history;
  for (const auto& v : source) {
    if (!v.is_number_integer()) return error(400, "history must contain integer item ids");
    const auto dense = b.catalog.find_item(v.get<std::int64_t>());
    if (dense < 0) return error(400, "unknown item " + v.dump());
    history.push_back(dense);
  }

  steer::Intervention steered;
  steered.tap_layer = b.tap_layer;
  if (req.contains("interventions")) {
    const auto& list = req.at("interventions");
    if (!list.is_array()) return error(400, "interventions must be an array");
    std::set<std::size_t> seen;
    for (const auto& i : list) {
      if (!i.is_object() || !i.contains("feature_id") || !i.contains("value") || !i.at("feature_id").is_number_integer() ||
          !i.at("value").is_number()) {
        return error(400, "each intervention needs an integer feature_id and a numeric value");
      }
      const auto f = i.at("feature_id").get<std::int64_t>();
      if (f < 0 || f >= static_cast<std::int64_t>(b.sae.model.dict_size())) {
        return error(400, "unknown feature " + std::to_string(f));
      }
      const double v = i.at("value").get<double>();
      if (!std::isfinite(v)) return error(400, "intervention value must be finite");
      if (!seen.insert(static_cast<std::size_t>(f)).second) {
        return error(400, "duplicate feature_id " + std::to_string(f));
      }
      steered.features.push_back({static_cast<std::size_t>(f), v});
    }
  }
  steer::Intervention plain;
  plain.tap_layer = b.tap_layer;

  const auto& stats = b.sae.stats;
  const auto base = rec::recommend(b.model, history, k, exclude_seen, steer::steered_edit(b.sae.model, stats, plain),
                                   b.tap_layer);
  const auto edited = steered.features.empty()
                          ? base
                          : rec::recommend(b.model, history, k, exclude_seen,
                                           steer::steered_edit(b.sae.model, stats, steered), b.tap_layer);
  json body = list_json(b, edited);
  body["baseline"] = list_json(b, base);
  return {200, body};
}

Server::Server(fs::path bundle_dir) : dir_(std::move(bundle_dir)), http_(std::make_unique<httplib::Server>()) {
  routes();
}

Server::~Server() {
  stop();
  if (loader_.joinable()) loader_.join();
}

void Server::start_loading() {
  loader_ = std::thread([this] {
    try {
      auto b = std::make_shared<const Bundle>(Bundle::load(dir_));
      std::lock_guard lock(mutex_);
      bundle_ = std::move(b);
    } catch (const std::exception& e) {
      std::lock_guard lock(mutex_);
      load_error_ = e.what();
    }
  });
}

bool Server::wait_loaded() {
  if (loader_.joinable()) loader_.join();
  return current() != nullptr;
}

std::shared_ptr<const Bundle> Server::current() const {
  std::lock_guard lock(mutex_);
  return bundle_;
}

int Server::bind(const std::string& host, int port) {
  if (port == 0) return http_->bind_to_any_port(host);
  return http_->bind_to_port(host, port) ? port : -1;
}

bool Server::listen() { return http_->listen_after_bind(); }

void Server::stop() {
  if (http_) http_->stop();
}

void Server::routes() {
  http_->set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  auto send = [](httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  auto not_ready = [this]() {
    std::lock_guard lock(mutex_);
    return health(nullptr, load_error_);
  };

  http_->Options(R"(/api/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  http_->Get("/api/v1/health", [=, this](const httplib::Request&, httplib::Response& res) {
    auto b = current();
    send(res, b ? health(b.get()) : not_ready());
  });
  http_->Get("/api/v1/features", [=, this](const httplib::Request&, httplib::Response& res) {
    auto b = current();
    send(res, b ? features(*b) : not_ready());
  });
  http_->Get("/api/v1/users", [=, this](const httplib::Request&, httplib::Response& res) {
    auto b = current();
    send(res, b ? users(*b) : not_ready());
  });
  http_->Post("/api/v1/recommend", [=, this](const httplib::Request& req, httplib::Response& res) {
    auto b = current();
    if (!b) return send(res, not_ready());
    const json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded()) return send(res, error(400, "body is not valid JSON"));
    try {
      send(res, recommend(*b, body));
    } catch (const std::exception& e) {
      send(res, error(500, e.what()));
    }
  });
}

}  // namespace saerec::service

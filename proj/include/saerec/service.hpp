#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "json.hpp"
#include "saerec/dataset.hpp"
#include "saerec/recmodel.hpp"
#include "saerec/sae.hpp"

namespace httplib {
class Server;
}

namespace saerec::service {

/// Frozen model, SAE, feature table and demo users from a run's bundle/.
struct Bundle {
  rec::RecModel<float> model;
  sae::LoadedSae sae;
  data::ItemCatalog catalog;
  nlohmann::json features;  // sorted by correlation, descending
  nlohmann::json users;
  std::size_t tap_layer = 1;
  /// File name -> SHA-256, verified against bundle.json at load.
  std::map<std::string, std::string> checksums;
  nlohmann::json stages;

  static Bundle load(const std::filesystem::path& dir);
};

struct Reply {
  int status = 200;
  nlohmann::json body;
};

Reply health(const Bundle* bundle, const std::string& load_error = {});
Reply features(const Bundle& bundle);
Reply users(const Bundle& bundle);
/// Steered and baseline top-k for a history (source item ids) or a demo
/// user. The baseline is the SAE-reconstructed model without interventions,
/// so an empty intervention list reproduces it exactly.
Reply recommend(const Bundle& bundle, const nlohmann::json& request);

/// HTTP front end. The bundle loads on a background thread; until it is
/// ready every endpoint answers 503.
class Server {
 public:
  explicit Server(std::filesystem::path bundle_dir);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  void start_loading();
  /// Blocks until loading finished; false when it failed.
  bool wait_loaded();
  /// Binds to `port` (0 picks a free one) and returns the bound port, or -1.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  bool listen();
  void stop();

 private:
  std::shared_ptr<const Bundle> current() const;
  void routes();

  std::filesystem::path dir_;
  std::unique_ptr<httplib::Server> http_;
  mutable std::mutex mutex_;
  std::shared_ptr<const Bundle> bundle_;
  std::string load_error_;
  std::thread loader_;
};

}  // namespace saerec::service

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace saerec::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One interaction. Ids are dense and 0-based.
struct Event {
  std::int64_t user = 0;
  std::int64_t item = 0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

/// Timestamped user -> item events, sorted by (user, timestamp, input order).
struct InteractionLog {
  std::vector<Event> events;
  std::size_t n_users = 0;
  /// Dense user id -> id used in the source data.
  std::vector<std::int64_t> original_user_ids;

  friend bool operator==(const InteractionLog&, const InteractionLog&) = default;
};

struct ItemCatalog {
  /// Per dense item id, sorted attribute ids.
  std::vector<std::vector<int>> attributes;
  std::vector<std::string> attribute_names;
  std::vector<std::string> titles;
  /// Dense item id -> id used in the source data.
  std::vector<std::int64_t> original_item_ids;

  std::size_t n_items() const { return attributes.size(); }
  std::size_t n_attributes() const { return attribute_names.size(); }
  bool has_attribute(std::int64_t item, int attribute) const;
  /// Dense item id for a source id, or -1.
  std::int64_t find_item(std::int64_t original_id) const;
  std::vector<std::vector<std::int64_t>> items_by_attribute() const;

  friend bool operator==(const ItemCatalog&, const ItemCatalog&) = default;
};

struct SyntheticSpec {
  std::size_t n_users = 2000;
  std::size_t n_items = 500;
  std::size_t n_attributes = 12;
  std::size_t min_attributes_per_item = 1;
  std::size_t max_attributes_per_item = 2;
  /// Symmetric Dirichlet concentration of each user's attribute preferences.
  double preference_concentration = 0.3;
  std::size_t min_length = 20;
  std::size_t max_length = 80;
  /// Probability that the latent attribute carries over to the next step.
  double persistence = 0.8;
  /// Probability that an item is drawn from the whole catalog instead.
  double noise_rate = 0.05;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Generated corpus plus the planted ground truth used by tests.
struct SyntheticData {
  InteractionLog log;
  ItemCatalog catalog;
  /// Per user, the attribute preference distribution.
  std::vector<std::vector<double>> preferences;
  /// Per event (aligned with log.events), the latent attribute of the chain.
  std::vector<int> latent_attributes;
  /// Per event, whether the item was a uniform noise draw.
  std::vector<bool> noise;
};

/// Items get their primary attribute round-robin (item i -> i mod n_attributes)
/// plus extra distinct attributes. Each user follows a latent attribute chain:
/// with probability `persistence` the attribute repeats, otherwise it is
/// redrawn from the user's preferences. Deterministic in the spec.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

struct SplitSpec {
  double test_user_fraction = 0.10;
  double sae_user_fraction = 0.40;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SplitResult {
  std::vector<std::int64_t> model_users;
  std::vector<std::int64_t> sae_users;
  std::vector<std::int64_t> test_users;
  InteractionLog model_log;
  InteractionLog sae_log;
  InteractionLog test_log;
};

/// Test users are the most recent ones by last interaction (ties: lower user
/// id counts as more recent); the rest are shuffled under the seed and split
/// into SAE and model users.
SplitResult split(const InteractionLog& log, const SplitSpec& spec);

/// Events of the given users only (ids stay global).
InteractionLog restrict_to_users(const InteractionLog& log, const std::vector<std::int64_t>& users);

struct UserSequence {
  std::int64_t user = 0;
  std::vector<std::int64_t> items;

  friend bool operator==(const UserSequence&, const UserSequence&) = default;
};

/// Per-user item sequences, keeping the most recent max_len items.
std::vector<UserSequence> sequences(const InteractionLog& log, std::size_t max_len);

/// interactions CSV: `user_id,item_id,timestamp`; items CSV:
/// `item_id,attributes,title`, attributes `|`-separated.
struct LoadedData {
  InteractionLog log;
  ItemCatalog catalog;
};
/// Item table only (item_id,attributes,title).
ItemCatalog load_items(const std::filesystem::path& items_path);
LoadedData load_csv(const std::filesystem::path& interactions_path, const std::filesystem::path& items_path);

void save_csv(const InteractionLog& log, const ItemCatalog& catalog, const std::filesystem::path& interactions_path,
              const std::filesystem::path& items_path);

/// Splits one CSV line into fields, honoring double quotes.
std::vector<std::string> split_csv_line(const std::string& line);

}  // namespace saerec::data

#include "saerec/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

namespace saerec::data {

bool ItemCatalog::has_attribute(std::int64_t item, int attribute) const {
  const auto& attrs = attributes.at(static_cast<std::size_t>(item));
  return std::binary_search(attrs.begin(), attrs.end(), attribute);
}

std::int64_t ItemCatalog::find_item(std::int64_t original_id) const {
  auto it = std::lower_bound(original_item_ids.begin(), original_item_ids.end(), original_id);
  if (it == original_item_ids.end() || *it != original_id) return -1;
  return it - original_item_ids.begin();
}

std::vector<std::vector<std::int64_t>> ItemCatalog::items_by_attribute() const {
  std::vector<std::vector<std::int64_t>> out(n_attributes());
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    for (int a : attributes[i]) out[static_cast<std::size_t>(a)].push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (n_users == 0 || n_items == 0 || n_attributes == 0) throw DataError("synthetic spec: counts must be positive");
  if (min_attributes_per_item == 0 || min_attributes_per_item > max_attributes_per_item ||
      max_attributes_per_item > n_attributes) {
    throw DataError("synthetic spec: attributes_per_item range must lie in [1, n_attributes]");
  }
  if (min_length == 0 || min_length > max_length) throw DataError("synthetic spec: bad sequence length range");
  if (!(preference_concentration > 0.0)) throw DataError("synthetic spec: preference_concentration must be > 0");
  if (persistence < 0.0 || persistence >= 1.0) throw DataError("synthetic spec: persistence must be in [0, 1)");
  if (noise_rate < 0.0 || noise_rate >= 1.0) throw DataError("synthetic spec: noise_rate must be in [0, 1)");
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  SyntheticData out;

  ItemCatalog& catalog = out.catalog;
  const int n_attr = static_cast<int>(spec.n_attributes);
  for (int a = 0; a < n_attr; ++a) {
    char name[32];
    std::snprintf(name, sizeof(name), "attr%02d", a);
    catalog.attribute_names.emplace_back(name);
  }
  std::uniform_int_distribution<std::size_t> extra_count(spec.min_attributes_per_item, spec.max_attributes_per_item);
  std::uniform_int_distribution<int> any_attr(0, n_attr - 1);
  for (std::size_t i = 0; i < spec.n_items; ++i) {
    std::set<int> attrs{static_cast<int>(i % spec.n_attributes)};
    const std::size_t want = extra_count(rng);
    while (attrs.size() < want) attrs.insert(any_attr(rng));
    catalog.attributes.emplace_back(attrs.begin(), attrs.end());
    char title[32];
    std::snprintf(title, sizeof(title), "item %04zu", i);
    catalog.titles.emplace_back(title);
    catalog.original_item_ids.push_back(static_cast<std::int64_t>(i));
  }
  const auto by_attr = catalog.items_by_attribute();
  for (std::size_t a = 0; a < by_attr.size(); ++a) {
    if (by_attr[a].empty()) throw DataError("synthetic spec: attribute " + catalog.attribute_names[a] + " has no items");
  }

  std::gamma_distribution<double> gamma(spec.preference_concentration, 1.0);
  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::int64_t> start(0, 100'000'000);
  std::uniform_int_distribution<std::int64_t> gap(60, 86'400);
  std::uniform_int_distribution<std::size_t> any_item(0, spec.n_items - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  out.log.n_users = spec.n_users;
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    out.log.original_user_ids.push_back(static_cast<std::int64_t>(u));
    std::vector<double> pref(spec.n_attributes);
    double total = 0.0;
    for (double& p : pref) total += (p = gamma(rng));
    if (total <= 0.0) {
      std::fill(pref.begin(), pref.end(), 1.0 / static_cast<double>(pref.size()));
    } else {
      for (double& p : pref) p /= total;
    }
    std::discrete_distribution<int> draw_attr(pref.begin(), pref.end());

    const std::size_t len = length(rng);
    std::int64_t ts = start(rng);
    int latent = draw_attr(rng);
    for (std::size_t t = 0; t < len; ++t) {
      if (t > 0 && unit(rng) >= spec.persistence) latent = draw_attr(rng);
      const bool noisy = unit(rng) < spec.noise_rate;
      std::int64_t item;
      if (noisy) {
        item = static_cast<std::int64_t>(any_item(rng));
      } else {
        const auto& pool = by_attr[static_cast<std::size_t>(latent)];
        item = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      }
      out.log.events.push_back(Event{static_cast<std::int64_t>(u), item, ts});
      out.latent_attributes.push_back(latent);
      out.noise.push_back(noisy);
      ts += gap(rng);
    }
    out.preferences.push_back(std::move(pref));
  }
  return out;
}

void SplitSpec::validate() const {
  auto in_open_unit = [](double f) { return f > 0.0 && f < 1.0; };
  if (!in_open_unit(test_user_fraction) || !in_open_unit(sae_user_fraction)) {
    throw DataError("split spec: fractions must lie in (0, 1)");
  }
}

InteractionLog restrict_to_users(const InteractionLog& log, const std::vector<std::int64_t>& users) {
  std::vector<bool> keep(log.n_users, false);
  for (auto u : users) keep.at(static_cast<std::size_t>(u)) = true;
  InteractionLog out;
  out.n_users = log.n_users;
  out.original_user_ids = log.original_user_ids;
  for (const Event& e : log.events) {
    if (keep[static_cast<std::size_t>(e.user)]) out.events.push_back(e);
  }
  return out;
}

SplitResult split(const InteractionLog& log, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::int64_t> last(log.n_users, std::numeric_limits<std::int64_t>::min());
  std::vector<bool> active(log.n_users, false);
  for (const Event& e : log.events) {
    auto u = static_cast<std::size_t>(e.user);
    last[u] = std::max(last[u], e.timestamp);
    active[u] = true;
  }
  std::vector<std::int64_t> users;
  for (std::size_t u = 0; u < log.n_users; ++u) {
    if (active[u]) users.push_back(static_cast<std::int64_t>(u));
  }
  if (users.size() < 10) throw DataError("split: need at least 10 users, got " + std::to_string(users.size()));

  const auto n = static_cast<double>(users.size());
  const auto n_test = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.test_user_fraction * n)));
  const std::size_t rest = users.size() - std::min(n_test, users.size());
  const auto n_sae = static_cast<std::size_t>(std::llround(spec.sae_user_fraction * static_cast<double>(rest)));
  if (n_test >= users.size() || n_sae == 0 || n_sae >= rest) {
    throw DataError("split: too few users (" + std::to_string(users.size()) + ") to fill every partition");
  }

  std::vector<std::int64_t> by_recency = users;
  std::stable_sort(by_recency.begin(), by_recency.end(), [&](std::int64_t a, std::int64_t b) {
    return last[static_cast<std::size_t>(a)] > last[static_cast<std::size_t>(b)];
  });
  SplitResult out;
  out.test_users.assign(by_recency.begin(), by_recency.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::int64_t> remaining(by_recency.begin() + static_cast<std::ptrdiff_t>(n_test), by_recency.end());
  std::sort(remaining.begin(), remaining.end());
  std::mt19937_64 rng(spec.seed);
  std::shuffle(remaining.begin(), remaining.end(), rng);
  out.sae_users.assign(remaining.begin(), remaining.begin() + static_cast<std::ptrdiff_t>(n_sae));
  out.model_users.assign(remaining.begin() + static_cast<std::ptrdiff_t>(n_sae), remaining.end());
  for (auto* set : {&out.test_users, &out.sae_users, &out.model_users}) std::sort(set->begin(), set->end());
  out.model_log = restrict_to_users(log, out.model_users);
  out.sae_log = restrict_to_users(log, out.sae_users);
  out.test_log = restrict_to_users(log, out.test_users);
  return out;
}

std::vector<UserSequence> sequences(const InteractionLog& log, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("sequences: max_len must be at least 2");
  std::map<std::int64_t, std::vector<std::int64_t>> per_user;
  for (const Event& e : log.events) per_user[e.user].push_back(e.item);
  std::vector<UserSequence> out;
  out.reserve(per_user.size());
  for (auto& [user, items] : per_user) {
    if (items.size() > max_len) items.erase(items.begin(), items.end() - static_cast<std::ptrdiff_t>(max_len));
    out.push_back(UserSequence{user, std::move(items)});
  }
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) throw DataError("unterminated quoted field");
  fields.push_back(std::move(cur));
  return fields;
}

namespace {

struct CsvReader {
  std::ifstream in;
  std::filesystem::path path;
  std::size_t line_no = 0;

  explicit CsvReader(const std::filesystem::path& p) : in(p, std::ios::binary), path(p) {
    if (!in) throw DataError("cannot open " + p.string());
  }

  bool next(std::vector<std::string>& fields) {
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      try {
        fields = split_csv_line(line);
      } catch (const DataError& e) {
        fail(e.what());
      }
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw DataError(path.filename().string() + ":" + std::to_string(line_no) + ": " + what);
  }

  std::int64_t to_int(const std::string& field, const char* column) const {
    std::size_t used = 0;
    std::int64_t value = 0;
    try {
      value = std::stoll(field, &used);
    } catch (const std::exception&) {
      fail(std::string("column ") + column + " is not an integer: '" + field + "'");
    }
    if (used != field.size()) fail(std::string("column ") + column + " is not an integer: '" + field + "'");
    return value;
  }

  void expect_header(const std::vector<std::string>& expected) {
    std::vector<std::string> fields;
    if (!next(fields)) fail("empty file");
    if (!fields.empty() && fields[0].rfind("\xEF\xBB\xBF", 0) == 0) fields[0].erase(0, 3);
    if (fields != expected) {
      std::string want;
      for (const auto& e : expected) want += (want.empty() ? "" : ",") + e;
      fail("expected header '" + want + "'");
    }
  }
};

std::string quote_csv(const std::string& field) {
  if (field.find_first_of(",\"\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace

ItemCatalog load_items(const std::filesystem::path& items_path) {
  struct RawItem {
    std::int64_t id;
    std::vector<std::string> attrs;
    std::string title;
  };
  std::vector<RawItem> raw_items;
  std::set<std::string> names;
  {
    CsvReader reader(items_path);
    reader.expect_header({"item_id", "attributes", "title"});
    std::vector<std::string> f;
    std::set<std::int64_t> seen;
    while (reader.next(f)) {
      if (f.size() != 3) reader.fail("expected 3 fields, got " + std::to_string(f.size()));
      RawItem item{reader.to_int(f[0], "item_id"), {}, f[2]};
      if (!seen.insert(item.id).second) reader.fail("duplicate item_id " + f[0]);
      std::stringstream ss(f[1]);
      std::string name;
      while (std::getline(ss, name, '|')) {
        if (name.empty() || name == "(no genres listed)") continue;
        item.attrs.push_back(name);
        names.insert(name);
      }
      raw_items.push_back(std::move(item));
    }
  }
  std::sort(raw_items.begin(), raw_items.end(), [](const RawItem& a, const RawItem& b) { return a.id < b.id; });

  ItemCatalog catalog;
  catalog.attribute_names.assign(names.begin(), names.end());
  std::unordered_map<std::string, int> attr_index;
  for (std::size_t i = 0; i < catalog.attribute_names.size(); ++i) attr_index[catalog.attribute_names[i]] = static_cast<int>(i);
  for (const RawItem& item : raw_items) {
    std::set<int> ids;
    for (const auto& a : item.attrs) ids.insert(attr_index.at(a));
    catalog.attributes.emplace_back(ids.begin(), ids.end());
    catalog.titles.push_back(item.title);
    catalog.original_item_ids.push_back(item.id);
  }
  return catalog;
}

LoadedData load_csv(const std::filesystem::path& interactions_path, const std::filesystem::path& items_path) {
  LoadedData out;
  out.catalog = load_items(items_path);
  const ItemCatalog& catalog = out.catalog;

  struct RawEvent {
    std::int64_t user, item, ts;
    std::size_t order;
  };
  std::vector<RawEvent> raw_events;
  {
    CsvReader reader(interactions_path);
    reader.expect_header({"user_id", "item_id", "timestamp"});
    std::vector<std::string> f;
    while (reader.next(f)) {
      if (f.size() != 3) reader.fail("expected 3 fields, got " + std::to_string(f.size()));
      const auto item_id = reader.to_int(f[1], "item_id");
      const auto dense = catalog.find_item(item_id);
      if (dense < 0) reader.fail("interaction references unknown item " + f[1]);
      raw_events.push_back(RawEvent{reader.to_int(f[0], "user_id"), dense, reader.to_int(f[2], "timestamp"),
                                    raw_events.size()});
    }
  }
  std::vector<std::int64_t> user_ids;
  for (const auto& e : raw_events) user_ids.push_back(e.user);
  std::sort(user_ids.begin(), user_ids.end());
  user_ids.erase(std::unique(user_ids.begin(), user_ids.end()), user_ids.end());
  auto dense_user = [&](std::int64_t u) {
    return std::lower_bound(user_ids.begin(), user_ids.end(), u) - user_ids.begin();
  };
  std::sort(raw_events.begin(), raw_events.end(), [&](const RawEvent& a, const RawEvent& b) {
    if (a.user != b.user) return a.user < b.user;
    if (a.ts != b.ts) return a.ts < b.ts;
    return a.order < b.order;
  });
  out.log.n_users = user_ids.size();
  out.log.original_user_ids = user_ids;
  for (const auto& e : raw_events) out.log.events.push_back(Event{dense_user(e.user), e.item, e.ts});
  return out;
}

void save_csv(const InteractionLog& log, const ItemCatalog& catalog, const std::filesystem::path& interactions_path,
              const std::filesystem::path& items_path) {
  for (const auto& p : {interactions_path, items_path}) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  }
  {
    std::ofstream out(items_path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + items_path.string());
    out << "item_id,attributes,title\n";
    for (std::size_t i = 0; i < catalog.n_items(); ++i) {
      std::string attrs;
      for (int a : catalog.attributes[i]) {
        attrs += (attrs.empty() ? "" : "|") + catalog.attribute_names[static_cast<std::size_t>(a)];
      }
      out << catalog.original_item_ids[i] << ',' << quote_csv(attrs) << ',' << quote_csv(catalog.titles[i]) << '\n';
    }
  }
  std::ofstream out(interactions_path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + interactions_path.string());
  out << "user_id,item_id,timestamp\n";
  for (const Event& e : log.events) {
    out << log.original_user_ids[static_cast<std::size_t>(e.user)] << ','
        << catalog.original_item_ids[static_cast<std::size_t>(e.item)] << ',' << e.timestamp << '\n';
  }
}

}  // namespace saerec::data

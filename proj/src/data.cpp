#include "onepiece/data.hpp"

#include "onepiece/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_set>

namespace onepiece {

using nlohmann::json;

ItemCatalog::ItemCatalog(std::vector<ItemRecord> items) : items_(std::move(items)) {
  index_.reserve(items_.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& rec = items_[i];
    if (rec.item_id < 0) throw DataError("negative item_id " + std::to_string(rec.item_id));
    if (!index_.emplace(rec.item_id, i).second)
      throw DataError("duplicate item_id " + std::to_string(rec.item_id));
    for (const auto& [m, v] : rec.modality_embeddings) {
      auto [it, inserted] = modality_dims_.emplace(m, v.size());
      if (!inserted && it->second != v.size())
        throw DataError("modality " + std::to_string(m) + " has inconsistent dimension at item " +
                        std::to_string(rec.item_id));
    }
  }
}

std::size_t ItemCatalog::position(ItemId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DataError("unknown item_id " + std::to_string(id));
  return it->second;
}

std::vector<ModalityId> ItemCatalog::modalities() const {
  std::vector<ModalityId> out;
  for (const auto& [m, d] : modality_dims_) out.push_back(m);
  return out;
}

std::size_t ItemCatalog::modality_dim(ModalityId m) const {
  auto it = modality_dims_.find(m);
  return it == modality_dims_.end() ? 0 : it->second;
}

std::size_t ItemCatalog::static_dim() const {
  std::size_t d = 0;
  for (const auto& rec : items_) d = std::max(d, rec.static_features.size());
  return d;
}

void ItemCatalog::set_popularity(const std::unordered_map<ItemId, std::uint64_t>& counts) {
  for (auto& rec : items_) {
    auto it = counts.find(rec.item_id);
    rec.popularity_count = it == counts.end() ? 0 : it->second;
  }
}

// ---------------------------------------------------------------------------
// JSON-lines

namespace {

template <typename Fn>
void for_each_line(const std::string& text, Fn&& fn) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(json::parse(line), line_no);
    } catch (const json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

ItemCatalog parse_catalog(const std::string& text) {
  std::vector<ItemRecord> items;
  for_each_line(text, [&](const json& j, std::size_t line_no) {
    if (!j.is_object() || !j.contains("item_id"))
      throw DataError("line " + std::to_string(line_no) + ": expected object with item_id");
    ItemRecord rec;
    rec.item_id = j.at("item_id").get<ItemId>();
    if (j.contains("static")) rec.static_features = j.at("static").get<std::vector<float>>();
    if (j.contains("mm")) {
      for (const auto& [key, value] : j.at("mm").items()) {
        if (value.is_null()) continue;
        ModalityId m = 0;
        try {
          m = std::stoi(key);
        } catch (const std::exception&) {
          throw DataError("line " + std::to_string(line_no) + ": bad modality key '" + key + "'");
        }
        rec.modality_embeddings[m] = value.get<std::vector<float>>();
      }
    }
    items.push_back(std::move(rec));
  });
  try {
    return ItemCatalog(std::move(items));
  } catch (const DataError& e) {
    throw DataError(std::string("catalog: ") + e.what());
  }
}

ItemCatalog load_catalog(const std::filesystem::path& path) {
  return parse_catalog(read_file(path));
}

std::string serialize_catalog(const ItemCatalog& catalog) {
  std::string out;
  for (const auto& rec : catalog.items()) {
    json j;
    j["item_id"] = rec.item_id;
    j["static"] = rec.static_features;
    json mm = json::object();
    for (const auto& [m, v] : rec.modality_embeddings) mm[std::to_string(m)] = v;
    j["mm"] = std::move(mm);
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_catalog(const std::filesystem::path& path, const ItemCatalog& catalog) {
  write_file(path, serialize_catalog(catalog));
}

std::vector<UserSequence> parse_sequences(const std::string& text) {
  std::vector<UserSequence> seqs;
  for_each_line(text, [&](const json& j, std::size_t line_no) {
    if (!j.is_object() || !j.contains("user_id") || !j.contains("history"))
      throw DataError("line " + std::to_string(line_no) + ": expected user_id and history");
    UserSequence s;
    s.user_id = j.at("user_id").get<std::int64_t>();
    s.history = j.at("history").get<std::vector<ItemId>>();
    if (j.contains("target") && !j.at("target").is_null()) s.target = j.at("target").get<ItemId>();
    seqs.push_back(std::move(s));
  });
  return seqs;
}

std::vector<UserSequence> load_sequences(const std::filesystem::path& path) {
  return parse_sequences(read_file(path));
}

std::string serialize_sequences(const std::vector<UserSequence>& seqs) {
  std::string out;
  for (const auto& s : seqs) {
    json j;
    j["user_id"] = s.user_id;
    j["history"] = s.history;
    if (s.target) j["target"] = *s.target;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_sequences(const std::filesystem::path& path, const std::vector<UserSequence>& seqs) {
  write_file(path, serialize_sequences(seqs));
}

// ---------------------------------------------------------------------------
// Coverage

CoverageRow coverage_row(ModalityId modality, std::uint64_t covered, std::uint64_t total) {
  if (total == 0) throw DataError("coverage of an empty catalog");
  if (covered > total) throw DataError("covered items exceed total items");
  return {modality, covered, total,
          100.0 * static_cast<double>(covered) / static_cast<double>(total)};
}

std::vector<CoverageRow> coverage_report(const ItemCatalog& catalog) {
  if (catalog.empty()) throw DataError("coverage_report: empty catalog");
  std::vector<CoverageRow> rows;
  for (ModalityId m : catalog.modalities()) {
    std::uint64_t covered = 0;
    for (const auto& rec : catalog.items()) covered += rec.has_modality(m) ? 1 : 0;
    rows.push_back(coverage_row(m, covered, catalog.total_items()));
  }
  return rows;
}

std::string format_rate(double percent) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f%%", percent);
  return buf;
}

// ---------------------------------------------------------------------------
// Synthetic data

std::vector<ModalityId> synthetic_modality_ids(std::size_t n) {
  static constexpr ModalityId kBase[] = {81, 82, 83, 85, 86};
  std::vector<ModalityId> ids;
  for (std::size_t i = 0; i < n; ++i)
    ids.push_back(i < 5 ? kBase[i] : static_cast<ModalityId>(87 + (i - 5)));
  return ids;
}

namespace {

enum StreamTag : std::uint64_t {
  kCentroids = 1,
  kItems,
  kModalities,
  kDropout,
  kUsers,
  kStatic,
};

std::vector<double> gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  std::vector<double> m(rows * cols);
  for (auto& v : m) v = scale * rng.normal();
  return m;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_items == 0) throw DataError("n_items must be positive");
  if (cfg.n_users == 0) throw DataError("n_users must be positive");
  if (cfg.dim == 0) throw DataError("dim must be positive");
  if (cfg.n_latent_clusters == 0 || cfg.n_latent_clusters > cfg.n_items)
    throw DataError("n_latent_clusters must be in [1, n_items]");
  if (cfg.seq_len_min < 2) throw DataError("seq_len_range.min must be >= 2");
  if (cfg.seq_len_max < cfg.seq_len_min) throw DataError("seq_len_range max < min");
  std::vector<double> missing = cfg.missing_rate_per_modality;
  if (missing.empty()) missing.assign(cfg.n_modalities, 0.0);
  if (missing.size() != cfg.n_modalities)
    throw DataError("missing_rate_per_modality needs one entry per modality");
  for (double p : missing)
    if (!(p >= 0.0 && p <= 1.0)) throw DataError("missing rate outside [0,1]");

  const std::size_t d = cfg.dim;
  const std::size_t n = cfg.n_items;
  const std::size_t n_clusters = cfg.n_latent_clusters;

  Rng centroid_rng = Rng::derive(cfg.seed, kCentroids);
  const auto centroids = gaussian_matrix(centroid_rng, n_clusters, d, 1.0);

  // Every cluster gets at least one member: round-robin then shuffle.
  Rng item_rng = Rng::derive(cfg.seed, kItems);
  std::vector<std::size_t> cluster_of(n);
  for (std::size_t i = 0; i < n; ++i) cluster_of[i] = i % n_clusters;
  item_rng.shuffle(std::span<std::size_t>(cluster_of));

  std::vector<double> latent(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k)
      latent[i * d + k] = centroids[cluster_of[i] * d + k] + 0.35 * item_rng.normal();

  // Per-modality linear distortion A_m = I + noise.
  const auto modality_ids = synthetic_modality_ids(cfg.n_modalities);
  Rng modality_rng = Rng::derive(cfg.seed, kModalities);
  std::vector<std::vector<double>> distortions;
  for (std::size_t m = 0; m < cfg.n_modalities; ++m) {
    auto a = gaussian_matrix(modality_rng, d, d, 0.3 / std::sqrt(static_cast<double>(d)));
    for (std::size_t k = 0; k < d; ++k) a[k * d + k] += 1.0;
    distortions.push_back(std::move(a));
  }

  Rng static_rng = Rng::derive(cfg.seed, kStatic);
  const auto projection =
      gaussian_matrix(static_rng, cfg.static_dim, d, 1.0 / std::sqrt(static_cast<double>(d)));

  Rng dropout_rng = Rng::derive(cfg.seed, kDropout);
  std::vector<ItemRecord> items(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& rec = items[i];
    rec.item_id = static_cast<ItemId>(i);
    const double* z = &latent[i * d];
    for (std::size_t m = 0; m < cfg.n_modalities; ++m) {
      std::vector<float> v(d);
      const auto& a = distortions[m];
      for (std::size_t r = 0; r < d; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += a[r * d + c] * z[c];
        v[r] = static_cast<float>(acc + 0.05 * modality_rng.normal());
      }
      // Draw the dropout decision unconditionally so rates do not shift the stream.
      const bool drop = dropout_rng.bernoulli(missing[m]);
      if (!drop) rec.modality_embeddings[modality_ids[m]] = std::move(v);
    }
    rec.static_features.resize(cfg.static_dim);
    for (std::size_t r = 0; r < cfg.static_dim; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < d; ++c) acc += projection[r * d + c] * z[c];
      rec.static_features[r] = static_cast<float>(acc + 0.1 * static_rng.normal());
    }
  }

  // Latent nearest neighbours within each cluster drive the user walks.
  std::vector<std::vector<std::size_t>> members(n_clusters);
  for (std::size_t i = 0; i < n; ++i) members[cluster_of[i]].push_back(i);
  std::vector<std::vector<std::size_t>> neighbours(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& group = members[cluster_of[i]];
    std::vector<std::pair<double, std::size_t>> dist;
    dist.reserve(group.size());
    for (std::size_t j : group) {
      if (j == i) continue;
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = latent[i * d + k] - latent[j * d + k];
        s += diff * diff;
      }
      dist.emplace_back(s, j);
    }
    const std::size_t keep = std::min(cfg.walk_neighbors, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep), dist.end());
    for (std::size_t k = 0; k < keep; ++k) neighbours[i].push_back(dist[k].second);
  }

  Rng user_rng = Rng::derive(cfg.seed, kUsers);
  std::vector<UserSequence> seqs;
  seqs.reserve(cfg.n_users);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const std::size_t home = user_rng.uniform_int(n_clusters);
    std::size_t away = home;
    if (n_clusters > 1 && user_rng.bernoulli(0.5)) {
      away = user_rng.uniform_int(n_clusters - 1);
      if (away >= home) ++away;
    }
    const std::size_t len =
        cfg.seq_len_min + user_rng.uniform_int(cfg.seq_len_max - cfg.seq_len_min + 1);
    std::vector<ItemId> walk;
    std::unordered_set<std::size_t> visited;
    std::size_t cluster = home;
    std::size_t current = members[home][user_rng.uniform_int(members[home].size())];
    auto visit = [&](std::size_t item) {
      walk.push_back(static_cast<ItemId>(item));
      visited.insert(item);
      current = item;
    };
    auto random_unvisited = [&](std::size_t c) {
      const auto& group = members[c];
      std::vector<std::size_t> free;
      for (std::size_t j : group)
        if (!visited.count(j)) free.push_back(j);
      if (free.empty()) return group[user_rng.uniform_int(group.size())];
      return free[user_rng.uniform_int(free.size())];
    };
    visit(current);
    while (walk.size() < len) {
      if (away != home && user_rng.bernoulli(cfg.cluster_switch_prob)) {
        cluster = cluster == home ? away : home;
        visit(random_unvisited(cluster));
        continue;
      }
      std::vector<std::size_t> options;
      for (std::size_t j : neighbours[current])
        if (!visited.count(j)) options.push_back(j);
      if (options.empty()) {
        visit(random_unvisited(cluster));
      } else {
        visit(options[user_rng.uniform_int(options.size())]);
      }
    }
    UserSequence s;
    s.user_id = static_cast<std::int64_t>(u);
    s.target = walk.back();
    walk.pop_back();
    s.history = std::move(walk);
    seqs.push_back(std::move(s));
  }

  return {ItemCatalog(std::move(items)), std::move(seqs)};
}

// ---------------------------------------------------------------------------
// Padding, splits, counts

PaddedRow pad_truncate(const std::vector<ItemId>& history, std::size_t L_max, ItemId pad_id) {
  if (L_max == 0) throw DataError("L_max must be >= 1");
  for (ItemId id : history)
    if (id == pad_id) throw DataError("pad id collides with item " + std::to_string(id));
  PaddedRow row;
  row.n_valid = std::min(history.size(), L_max);
  row.tokens.assign(L_max, pad_id);
  row.valid.assign(L_max, 0);
  const std::size_t offset = L_max - row.n_valid;
  const std::size_t skip = history.size() - row.n_valid;
  for (std::size_t i = 0; i < row.n_valid; ++i) {
    row.tokens[offset + i] = history[skip + i];
    row.valid[offset + i] = 1;
  }
  return row;
}

PaddedRow pad_truncate(const UserSequence& seq, std::size_t L_max, ItemId pad_id) {
  return pad_truncate(seq.history, L_max, pad_id);
}

DatasetSplits split_users(const std::vector<UserSequence>& sequences, std::uint64_t seed) {
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, 0x5EED5u);
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t n = sequences.size();
  const std::size_t n_train = n * 8 / 10;
  const std::size_t n_valid = n / 10;
  DatasetSplits out;
  for (std::size_t k = 0; k < n; ++k) {
    const auto& s = sequences[order[k]];
    if (k < n_train) out.train.push_back(s);
    else if (k < n_train + n_valid) out.valid.push_back(s);
    else out.test.push_back(s);
  }
  auto by_user = [](const UserSequence& a, const UserSequence& b) { return a.user_id < b.user_id; };
  std::sort(out.train.begin(), out.train.end(), by_user);
  std::sort(out.valid.begin(), out.valid.end(), by_user);
  std::sort(out.test.begin(), out.test.end(), by_user);
  return out;
}

std::unordered_map<ItemId, std::uint64_t> count_interactions(
    const std::vector<UserSequence>& sequences, bool targets_only) {
  std::unordered_map<ItemId, std::uint64_t> counts;
  for (const auto& s : sequences) {
    if (!targets_only)
      for (ItemId id : s.history) ++counts[id];
    if (s.target) ++counts[*s.target];
  }
  return counts;
}

}  // namespace onepiece

#pragma once

// MovieLens ingestion, dense id remapping and per-user k-fold splitting.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mcad/error.hpp"
#include "mcad/log.hpp"

namespace mcad {

struct Rating {
  int user = 0;
  int item = 0;
  double value = 0.0;
  std::int64_t timestamp = 0;

  friend bool operator==(const Rating&, const Rating&) = default;
};

// Observed entries of the m x n rating matrix, in dense 0-based index space.
struct RatingTriples {
  std::vector<Rating> entries;
  int num_users = 0;
  int num_items = 0;

  std::size_t size() const noexcept { return entries.size(); }
  bool empty() const noexcept { return entries.empty(); }

  double mean() const {
    if (entries.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : entries) s += r.value;
    return s / static_cast<double>(entries.size());
  }

  // Throws ValidationError on out-of-range indices, non-integral ratings
  // outside 1..5, or a repeated (user, item) pair.
  void validate() const {
    std::unordered_set<std::int64_t> seen;
    seen.reserve(entries.size() * 2);
    for (const auto& r : entries) {
      if (r.user < 0 || r.user >= num_users || r.item < 0 || r.item >= num_items)
        throw ValidationError("rating index (" + std::to_string(r.user) + ", " +
                              std::to_string(r.item) + ") outside " + std::to_string(num_users) +
                              "x" + std::to_string(num_items));
      if (r.value < 1.0 || r.value > 5.0 || r.value != static_cast<double>(static_cast<int>(r.value)))
        throw ValidationError("rating " + std::to_string(r.value) + " not in {1,2,3,4,5}");
      auto key = static_cast<std::int64_t>(r.user) * num_items + r.item;
      if (!seen.insert(key).second)
        throw ValidationError("duplicate rating for (" + std::to_string(r.user) + ", " +
                              std::to_string(r.item) + ")");
    }
  }

  // Entry indices grouped by user, each group in entry order.
  std::vector<std::vector<std::size_t>> by_user() const {
    std::vector<std::vector<std::size_t>> out(static_cast<std::size_t>(num_users));
    for (std::size_t k = 0; k < entries.size(); ++k) out[entries[k].user].push_back(k);
    return out;
  }

  std::vector<int> item_counts() const {
    std::vector<int> c(static_cast<std::size_t>(num_items), 0);
    for (const auto& r : entries) ++c[r.item];
    return c;
  }
};

// Original MovieLens ids for each dense index, plus the reverse lookup.
struct IdMap {
  std::vector<long> user_ids;
  std::vector<long> item_ids;

  long user_id(int index) const { return user_ids.at(static_cast<std::size_t>(index)); }
  long item_id(int index) const { return item_ids.at(static_cast<std::size_t>(index)); }

  int user_index(long id) const { return lookup(user_ids, id, "user"); }
  int item_index(long id) const { return lookup(item_ids, id, "item"); }

 private:
  static int lookup(const std::vector<long>& ids, long id, const char* what) {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id)
      throw ValidationError(std::string("unknown ") + what + " id " + std::to_string(id));
    return static_cast<int>(it - ids.begin());
  }
};

// n x d binary item-genre membership.
struct GenreMatrix {
  Eigen::MatrixXd G;
  std::vector<std::string> names;
  Eigen::VectorXd mu;  // movies per genre (column sums)

  int num_items() const noexcept { return static_cast<int>(G.rows()); }
  int num_genres() const noexcept { return static_cast<int>(G.cols()); }

  void recount() { mu = G.colwise().sum().transpose(); }

  // Removes columns with no member movie so every retained mu_g >= 1.
  void drop_empty_genres() {
    recount();
    std::vector<int> keep;
    for (int g = 0; g < num_genres(); ++g)
      if (mu(g) > 0.0) keep.push_back(g);
    if (static_cast<int>(keep.size()) == num_genres()) return;
    Eigen::MatrixXd kept(G.rows(), static_cast<Eigen::Index>(keep.size()));
    std::vector<std::string> kept_names;
    for (std::size_t j = 0; j < keep.size(); ++j) {
      kept.col(static_cast<Eigen::Index>(j)) = G.col(keep[j]);
      kept_names.push_back(names[keep[j]]);
    }
    G = std::move(kept);
    names = std::move(kept_names);
    recount();
  }

  // Items with no genre at all. They carry no weight in the diversity term.
  int count_genreless() const {
    int c = 0;
    for (Eigen::Index i = 0; i < G.rows(); ++i)
      if (G.row(i).sum() == 0.0) ++c;
    return c;
  }
};

struct Dataset {
  RatingTriples ratings;
  GenreMatrix genres;
  IdMap ids;
};

inline const std::array<std::string_view, 18>& movielens_genres() {
  static const std::array<std::string_view, 18> names = {
      "Action",  "Adventure", "Animation", "Children's", "Comedy",  "Crime",
      "Documentary", "Drama", "Fantasy",  "Film-Noir",  "Horror",  "Musical",
      "Mystery", "Romance",   "Sci-Fi",   "Thriller",   "War",     "Western"};
  return names;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split(std::string_view line, std::string_view sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + sep.size();
  }
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  s = trim(s);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return in;
}

inline void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

struct RawRating {
  long user;
  long item;
  double value;
  std::int64_t timestamp;
};

inline std::vector<RawRating> read_raw_ratings(const std::filesystem::path& path,
                                               std::string_view sep) {
  auto in = open_input(path);
  std::vector<RawRating> out;
  std::string line;
  std::size_t lineno = 0;
  const std::string file = path.string();
  while (std::getline(in, line)) {
    ++lineno;
    strip_cr(line);
    if (trim(line).empty()) continue;
    auto f = split(line, sep);
    RawRating r{};
    if (f.size() != 4 || !parse_number(f[0], r.user) || !parse_number(f[1], r.item) ||
        !parse_number(f[2], r.value) || !parse_number(f[3], r.timestamp))
      throw ParseError(file, lineno, "malformed rating record");
    if (r.value < 1.0 || r.value > 5.0 || r.value != static_cast<double>(static_cast<int>(r.value)))
      throw ValidationError(file + ":" + std::to_string(lineno) + ": rating " +
                            std::string(trim(f[2])) + " not in {1,2,3,4,5}");
    out.push_back(r);
  }
  if (out.empty()) throw ParseError("no ratings parsed from " + file);
  return out;
}

// Item ids in file order with their 18-wide genre rows.
struct RawItems {
  std::vector<long> ids;
  std::vector<std::array<double, 18>> rows;
};

inline Dataset assemble(const std::vector<RawRating>& raw, RawItems items,
                        const std::string& item_file) {
  Dataset ds;
  std::vector<long> user_ids;
  user_ids.reserve(raw.size());
  for (const auto& r : raw) user_ids.push_back(r.user);
  std::sort(user_ids.begin(), user_ids.end());
  user_ids.erase(std::unique(user_ids.begin(), user_ids.end()), user_ids.end());

  // Items are indexed in ascending id order; every item in the item file gets an index.
  std::vector<std::size_t> order(items.ids.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return items.ids[a] < items.ids[b]; });
  std::vector<long> item_ids;
  for (auto k : order) item_ids.push_back(items.ids[k]);
  for (std::size_t k = 1; k < item_ids.size(); ++k)
    if (item_ids[k] == item_ids[k - 1])
      throw ValidationError(item_file + ": duplicate item id " + std::to_string(item_ids[k]));

  ds.ids.user_ids = std::move(user_ids);
  ds.ids.item_ids = std::move(item_ids);

  const auto n = static_cast<Eigen::Index>(order.size());
  ds.genres.G = Eigen::MatrixXd::Zero(n, 18);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index g = 0; g < 18; ++g)
      ds.genres.G(i, g) = items.rows[order[static_cast<std::size_t>(i)]][static_cast<std::size_t>(g)];
  for (auto name : movielens_genres()) ds.genres.names.emplace_back(name);
  ds.genres.drop_empty_genres();

  ds.ratings.num_users = static_cast<int>(ds.ids.user_ids.size());
  ds.ratings.num_items = static_cast<int>(n);
  ds.ratings.entries.reserve(raw.size());
  for (const auto& r : raw) {
    auto it = std::lower_bound(ds.ids.item_ids.begin(), ds.ids.item_ids.end(), r.item);
    if (it == ds.ids.item_ids.end() || *it != r.item)
      throw ValidationError("item " + std::to_string(r.item) + " rated but missing from " +
                            item_file);
    ds.ratings.entries.push_back({ds.ids.user_index(r.user),
                                  static_cast<int>(it - ds.ids.item_ids.begin()), r.value,
                                  r.timestamp});
  }
  ds.ratings.validate();
  return ds;
}

}  // namespace detail

// u.data (user<TAB>item<TAB>rating<TAB>timestamp) plus u.item (pipe-separated,
// 19 trailing genre flags, the first being "unknown" which is discarded).
inline Dataset parse_movielens_100k(const std::filesystem::path& data_path,
                                    const std::filesystem::path& item_path) {
  auto raw = detail::read_raw_ratings(data_path, "\t");

  detail::RawItems items;
  auto in = detail::open_input(item_path);
  std::string line;
  std::size_t lineno = 0;
  const std::string file = item_path.string();
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (detail::trim(line).empty()) continue;
    auto f = detail::split(line, "|");
    long id = 0;
    if (f.size() < 20 || !detail::parse_number(f[0], id))
      throw ParseError(file, lineno, "malformed item record");
    std::array<double, 18> row{};
    // The last 19 fields are flags; titles never contain '|', but be tolerant of extras.
    const std::size_t first_flag = f.size() - 19;
    for (std::size_t g = 0; g < 19; ++g) {
      int flag = 0;
      if (!detail::parse_number(f[first_flag + g], flag) || (flag != 0 && flag != 1))
        throw ParseError(file, lineno, "genre flag must be 0 or 1");
      if (g > 0) row[g - 1] = flag;
    }
    items.ids.push_back(id);
    items.rows.push_back(row);
  }
  if (items.ids.empty()) throw ParseError("no items parsed from " + file);
  return detail::assemble(raw, std::move(items), file);
}

// ratings.dat (user::item::rating::timestamp) plus movies.dat (id::title::A|B|C).
inline Dataset parse_movielens_1m(const std::filesystem::path& ratings_path,
                                  const std::filesystem::path& movies_path) {
  auto raw = detail::read_raw_ratings(ratings_path, "::");

  std::unordered_map<std::string, std::size_t> genre_index;
  const auto& names = movielens_genres();
  for (std::size_t g = 0; g < names.size(); ++g) genre_index[detail::lower(names[g])] = g;

  detail::RawItems items;
  auto in = detail::open_input(movies_path);
  std::string line;
  std::size_t lineno = 0;
  const std::string file = movies_path.string();
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    std::string_view sv = line;
    if (detail::trim(sv).empty()) continue;
    auto first = sv.find("::");
    auto last = sv.rfind("::");
    long id = 0;
    if (first == std::string_view::npos || first == last ||
        !detail::parse_number(sv.substr(0, first), id))
      throw ParseError(file, lineno, "malformed movie record");
    std::array<double, 18> row{};
    for (auto token : detail::split(sv.substr(last + 2), "|")) {
      auto name = detail::lower(detail::trim(token));
      if (name.empty()) continue;
      auto it = genre_index.find(name);
      if (it == genre_index.end())
        throw ValidationError(file + ":" + std::to_string(lineno) + ": unknown genre '" +
                              std::string(token) + "'");
      row[it->second] = 1.0;
    }
    items.ids.push_back(id);
    items.rows.push_back(row);
  }
  if (items.ids.empty()) throw ParseError("no items parsed from " + file);
  return detail::assemble(raw, std::move(items), file);
}

struct FoldSplit {
  int fold_id = 0;
  std::uint64_t seed = 0;
  RatingTriples train;
  RatingTriples test;
};

namespace detail {

// Fisher-Yates on a fixed engine so splits are identical across standard libraries.
inline void portable_shuffle(std::vector<std::size_t>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

// Per-user stratified k-fold split. Each user's ratings are shuffled once and
// dealt round-robin into k shares; fold f tests on share f. Users with fewer
// than k ratings stay entirely in train.
inline std::vector<FoldSplit> make_folds(const RatingTriples& data, int k, std::uint64_t seed) {
  if (k < 2) throw ValidationError("make_folds: k must be >= 2");
  std::vector<int> share(data.entries.size(), -1);
  std::mt19937_64 rng(seed);
  int sparse_users = 0;
  for (auto& idx : data.by_user()) {
    if (idx.empty()) continue;
    if (static_cast<int>(idx.size()) < k) {
      ++sparse_users;
      continue;
    }
    detail::portable_shuffle(idx, rng);
    for (std::size_t p = 0; p < idx.size(); ++p) share[idx[p]] = static_cast<int>(p % k);
  }
  if (sparse_users > 0)
    log::warn(std::to_string(sparse_users) + " user(s) with fewer than " + std::to_string(k) +
              " ratings kept in every training fold");

  std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    auto& fs = folds[static_cast<std::size_t>(f)];
    fs.fold_id = f;
    fs.seed = seed;
    fs.train.num_users = fs.test.num_users = data.num_users;
    fs.train.num_items = fs.test.num_items = data.num_items;
    for (std::size_t e = 0; e < data.entries.size(); ++e)
      (share[e] == f ? fs.test : fs.train).entries.push_back(data.entries[e]);
  }
  return folds;
}

// ---------------------------------------------------------------------------
// On-disk fold cache: tab-separated dense-index triples plus a JSON manifest.

inline void write_triples(const std::filesystem::path& path, const RatingTriples& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "# users=" << t.num_users << " items=" << t.num_items << '\n';
  char buf[64];
  for (const auto& r : t.entries) {
    auto res = std::to_chars(buf, buf + sizeof buf, r.value);
    out << r.user << '\t' << r.item << '\t' << std::string_view(buf, res.ptr - buf) << '\t'
        << r.timestamp << '\n';
  }
}

inline RatingTriples read_triples(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  RatingTriples t;
  std::string line;
  std::size_t lineno = 0;
  const std::string file = path.string();
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (std::sscanf(line.c_str(), "# users=%d items=%d", &t.num_users, &t.num_items) != 2)
        throw ParseError(file, lineno, "bad triple header");
      have_header = true;
      continue;
    }
    auto f = detail::split(line, "\t");
    Rating r;
    if (f.size() != 4 || !detail::parse_number(f[0], r.user) ||
        !detail::parse_number(f[1], r.item) || !detail::parse_number(f[2], r.value) ||
        !detail::parse_number(f[3], r.timestamp))
      throw ParseError(file, lineno, "malformed triple");
    t.entries.push_back(r);
  }
  if (!have_header) throw ParseError(file, 1, "missing '# users=.. items=..' header");
  t.validate();
  return t;
}

inline void write_id_map(const std::filesystem::path& dir, const IdMap& ids) {
  auto dump = [&](const char* name, const std::vector<long>& v) {
    std::ofstream out(dir / name);
    out << "index\tid\n";
    for (std::size_t k = 0; k < v.size(); ++k) out << k << '\t' << v[k] << '\n';
  };
  dump("users.tsv", ids.user_ids);
  dump("items.tsv", ids.item_ids);
}

inline IdMap read_id_map(const std::filesystem::path& dir) {
  auto load = [&](const char* name) {
    auto in = detail::open_input(dir / name);
    std::vector<long> v;
    std::string line;
    std::getline(in, line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      detail::strip_cr(line);
      auto f = detail::split(line, "\t");
      long id = 0;
      std::size_t idx = 0;
      if (f.size() != 2 || !detail::parse_number(f[0], idx) || !detail::parse_number(f[1], id) ||
          idx != v.size())
        throw ParseError((dir / name).string(), lineno, "malformed id map row");
      v.push_back(id);
    }
    return v;
  };
  return {load("users.tsv"), load("items.tsv")};
}

inline void write_genres(const std::filesystem::path& path, const GenreMatrix& g) {
  std::ofstream out(path);
  out << "item";
  for (const auto& n : g.names) out << '\t' << n;
  out << '\n';
  for (Eigen::Index i = 0; i < g.G.rows(); ++i) {
    out << i;
    for (Eigen::Index j = 0; j < g.G.cols(); ++j) out << '\t' << static_cast<int>(g.G(i, j));
    out << '\n';
  }
}

inline GenreMatrix read_genres(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  GenreMatrix g;
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "empty genre file");
  detail::strip_cr(line);
  auto head = detail::split(line, "\t");
  for (std::size_t k = 1; k < head.size(); ++k) g.names.emplace_back(head[k]);
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    detail::strip_cr(line);
    if (line.empty()) continue;
    auto f = detail::split(line, "\t");
    if (f.size() != head.size()) throw ParseError(path.string(), lineno, "wrong column count");
    std::vector<double> row;
    for (std::size_t k = 1; k < f.size(); ++k) {
      int v = 0;
      if (!detail::parse_number(f[k], v) || (v != 0 && v != 1))
        throw ParseError(path.string(), lineno, "genre flag must be 0 or 1");
      row.push_back(v);
    }
    rows.push_back(std::move(row));
  }
  g.G.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(g.names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < g.names.size(); ++j)
      g.G(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  g.recount();
  return g;
}

// Layout: <dir>/manifest.json, users.tsv, items.tsv, genres.tsv,
// fold<k>_train.tsv, fold<k>_test.tsv.
inline void write_fold_cache(const std::filesystem::path& dir, const Dataset& ds,
                             const std::vector<FoldSplit>& folds) {
  std::filesystem::create_directories(dir);
  write_id_map(dir, ds.ids);
  write_genres(dir / "genres.tsv", ds.genres);
  nlohmann::ordered_json manifest;
  manifest["num_users"] = ds.ratings.num_users;
  manifest["num_items"] = ds.ratings.num_items;
  manifest["num_ratings"] = ds.ratings.size();
  manifest["num_genres"] = ds.genres.num_genres();
  manifest["folds"] = nlohmann::ordered_json::array();
  for (const auto& f : folds) {
    auto stem = "fold" + std::to_string(f.fold_id);
    write_triples(dir / (stem + "_train.tsv"), f.train);
    write_triples(dir / (stem + "_test.tsv"), f.test);
    manifest["folds"].push_back({{"fold", f.fold_id},
                                 {"seed", f.seed},
                                 {"train", f.train.size()},
                                 {"test", f.test.size()}});
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

struct FoldCache {
  IdMap ids;
  GenreMatrix genres;
  std::vector<FoldSplit> folds;
};

inline FoldCache read_fold_cache(const std::filesystem::path& dir) {
  auto in = detail::open_input(dir / "manifest.json");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "manifest.json").string() + ": " + e.what());
  }
  FoldCache cache;
  cache.ids = read_id_map(dir);
  cache.genres = read_genres(dir / "genres.tsv");
  for (const auto& entry : manifest.at("folds")) {
    FoldSplit f;
    f.fold_id = entry.at("fold").get<int>();
    f.seed = entry.at("seed").get<std::uint64_t>();
    auto stem = "fold" + std::to_string(f.fold_id);
    f.train = read_triples(dir / (stem + "_train.tsv"));
    f.test = read_triples(dir / (stem + "_test.tsv"));
    if (f.train.size() != entry.at("train").get<std::size_t>() ||
        f.test.size() != entry.at("test").get<std::size_t>())
      throw ValidationError("fold cache " + stem + " counts disagree with manifest");
    cache.folds.push_back(std::move(f));
  }
  return cache;
}

}  // namespace mcad

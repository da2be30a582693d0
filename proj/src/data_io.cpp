#include "sparse_moe/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

namespace sparse_moe {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_number(const std::string& text, double& value) {
  if (text.empty()) return false;
  const char* begin = text.data();
  const char* end = begin + text.size();
  if (*begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  return ec == std::errc() && ptr == end;
}

struct RawRow {
  long line_no;
  std::vector<std::string> fields;
};

// Non-empty rows split into trimmed fields. The first row is dropped as a
// header when any cell other than the last one is non-numeric.
std::vector<RawRow> read_rows(std::istream& in) {
  std::vector<RawRow> rows;
  std::string line;
  long line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (first) {
      first = false;
      double ignored = 0;
      bool header = false;
      for (std::size_t c = 0; c + 1 < fields.size(); ++c)
        if (!parse_number(fields[c], ignored)) header = true;
      if (header) continue;
    }
    rows.push_back({line_no, std::move(fields)});
  }
  return rows;
}

std::string where(const std::string& source, long line_no) {
  return source + ":" + std::to_string(line_no) + ": ";
}

// Parses `count` leading cells of a row into `out`.
void parse_features(const RawRow& row, std::size_t count, const std::string& source,
                    double* out) {
  for (std::size_t c = 0; c < count; ++c) {
    if (!parse_number(row.fields[c], out[c]))
      throw DataError(where(source, row.line_no) + "non-numeric feature in column " +
                      std::to_string(c + 1) + " ('" + row.fields[c] + "')");
    if (!std::isfinite(out[c]))
      throw DataError(where(source, row.line_no) + "non-finite feature in column " +
                      std::to_string(c + 1));
  }
}

// Shared body of the labeled loaders. With `vocabulary` null, ids are
// assigned by first appearance.
DatasetD parse_labeled(std::istream& in, const std::vector<std::string>* vocabulary,
                       const std::string& source) {
  const auto rows = read_rows(in);
  if (rows.empty()) throw DataError(source + ": no data rows");
  const std::size_t width = rows.front().fields.size();
  if (width < 2)
    throw DataError(where(source, rows.front().line_no) +
                    "need at least one feature column and a label column");

  DatasetD data;
  data.features.resize(static_cast<Index>(rows.size()), static_cast<Index>(width - 1));
  std::map<std::string, int> ids;
  if (vocabulary) {
    data.label_names = *vocabulary;
    for (std::size_t c = 0; c < vocabulary->size(); ++c) ids.emplace((*vocabulary)[c], static_cast<int>(c));
  }
  std::vector<double> values(width - 1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != width)
      throw DataError(where(source, row.line_no) + "ragged row (expected " + std::to_string(width) +
                      " columns, found " + std::to_string(row.fields.size()) + ")");
    parse_features(row, width - 1, source, values.data());
    for (std::size_t c = 0; c + 1 < width; ++c)
      data.features(static_cast<Index>(r), static_cast<Index>(c)) = values[c];
    const std::string& token = row.fields.back();
    if (token.empty()) throw DataError(where(source, row.line_no) + "empty class label");
    auto it = ids.find(token);
    if (it == ids.end()) {
      if (vocabulary) throw DataError(where(source, row.line_no) + "unknown class label '" + token + "'");
      it = ids.emplace(token, static_cast<int>(data.label_names.size())).first;
      data.label_names.push_back(token);
    }
    data.labels.push_back(it->second);
  }
  data.q = static_cast<int>(data.label_names.size());
  if (data.q < 2) throw DataError(source + ": need at least 2 classes, found " + std::to_string(data.q));
  data.validate();
  return data;
}

}  // namespace

DatasetD parse_dataset(std::istream& in, const std::string& source) {
  return parse_labeled(in, nullptr, source);
}

DatasetD load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return parse_dataset(in, path);
}

DatasetD parse_dataset_with_labels(std::istream& in, const std::vector<std::string>& label_names,
                                   const std::string& source) {
  return parse_labeled(in, &label_names, source);
}

DatasetD load_dataset_with_labels(const std::string& path,
                                  const std::vector<std::string>& label_names) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  return parse_dataset_with_labels(in, label_names, path);
}

Matrix<double> load_features(const std::string& path, Index d) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  const auto rows = read_rows(in);
  if (rows.empty()) throw DataError(path + ": no data rows");
  Matrix<double> features(static_cast<Index>(rows.size()), d);
  std::vector<double> values(static_cast<std::size_t>(d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    const auto cells = static_cast<Index>(row.fields.size());
    if (cells != d && cells != d + 1)
      throw DataError(where(path, row.line_no) + "expected " + std::to_string(d) + " features, found " +
                      std::to_string(cells) + " columns");
    parse_features(row, static_cast<std::size_t>(d), path, values.data());
    for (Index c = 0; c < d; ++c) features(static_cast<Index>(r), c) = values[static_cast<std::size_t>(c)];
  }
  return features;
}

void write_dataset(std::ostream& out, const DatasetD& data) {
  std::ostringstream buf;
  buf << std::setprecision(17);
  for (Index n = 0; n < data.n(); ++n) {
    for (Index j = 0; j < data.d(); ++j) buf << data.features(n, j) << ',';
    const int y = data.labels[static_cast<std::size_t>(n)];
    if (static_cast<std::size_t>(y) < data.label_names.size())
      buf << data.label_names[static_cast<std::size_t>(y)];
    else
      buf << y;
    buf << '\n';
  }
  out << buf.str();
}

void save_dataset(const std::string& path, const DatasetD& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset '" + path + "'");
  write_dataset(out, data);
  if (!out) throw DataError("failed writing dataset '" + path + "'");
}

Scaler<double> fit_scaler(const DatasetD& data) { return fit_scaler(data.features); }

DatasetD apply_scaler(const DatasetD& data, const Scaler<double>& scaler) {
  DatasetD out = data;
  out.features = apply_scaler(data.features, scaler);
  return out;
}

DatasetD subset(const DatasetD& data, const std::vector<Index>& indices) {
  DatasetD out;
  out.q = data.q;
  out.label_names = data.label_names;
  out.features = data.features(indices, Eigen::all);
  out.labels.reserve(indices.size());
  for (Index i : indices) out.labels.push_back(data.labels[static_cast<std::size_t>(i)]);
  return out;
}

std::pair<std::vector<Index>, std::vector<Index>> split_indices(const DatasetD& data,
                                                                double fraction,
                                                                std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw ConfigError("split fraction must lie in (0, 1)");
  std::vector<std::vector<Index>> by_class(static_cast<std::size_t>(data.q));
  for (Index n = 0; n < data.n(); ++n)
    by_class[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(n)])].push_back(n);

  std::mt19937_64 rng(seed);
  std::vector<Index> first;
  std::vector<Index> second;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    if (members.empty()) continue;
    if (members.size() < 2)
      throw DataError("class " + std::to_string(c) + " has fewer than 2 instances; cannot split");
    std::shuffle(members.begin(), members.end(), rng);
    auto take = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    take = std::clamp<std::size_t>(take, 1, members.size() - 1);
    first.insert(first.end(), members.begin(), members.begin() + static_cast<long>(take));
    second.insert(second.end(), members.begin() + static_cast<long>(take), members.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {std::move(first), std::move(second)};
}

std::pair<DatasetD, DatasetD> train_test_split(const DatasetD& data, double fraction,
                                               std::uint64_t seed) {
  const auto [a, b] = split_indices(data, fraction, seed);
  return {subset(data, a), subset(data, b)};
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

int SynthSpec::base_dims() const {
  return clusters.empty() ? 0 : static_cast<int>(clusters.front().mean.size());
}

void SynthSpec::validate() const {
  if (n_per_cluster < 1) throw ConfigError("n_per_cluster must be >= 1");
  if (clusters.empty()) throw ConfigError("synthetic spec needs at least one cluster");
  if (noise_dims < 0) throw ConfigError("noise_dims must be >= 0");
  if (!(noise_sigma >= 0) || !std::isfinite(noise_sigma))
    throw ConfigError("noise_sigma must be finite and >= 0");
  const int d = base_dims();
  for (const auto& c : clusters) {
    if (static_cast<int>(c.mean.size()) != d) throw ConfigError("cluster means differ in length");
    for (double m : c.mean)
      if (!std::isfinite(m)) throw ConfigError("cluster mean must be finite");
    for (int j : c.informative_dims)
      if (j < 0 || j >= d) throw ConfigError("informative dim out of range");
    if (c.label < 0) throw ConfigError("cluster label must be >= 0");
  }
}

DatasetD generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const int base = spec.base_dims();
  const int d = base + spec.noise_dims;
  const auto n_total = static_cast<Index>(spec.n_per_cluster) * static_cast<Index>(spec.clusters.size());

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> standard(0.0, 1.0);

  DatasetD data;
  data.features.resize(n_total, d);
  data.labels.reserve(static_cast<std::size_t>(n_total));
  int max_label = 0;
  Index row = 0;
  for (const auto& cluster : spec.clusters) {
    std::vector<bool> informative(static_cast<std::size_t>(base), false);
    for (int j : cluster.informative_dims) informative[static_cast<std::size_t>(j)] = true;
    max_label = std::max(max_label, cluster.label);
    for (int s = 0; s < spec.n_per_cluster; ++s, ++row) {
      for (int j = 0; j < base; ++j) {
        const double z = standard(rng);
        data.features(row, j) = informative[static_cast<std::size_t>(j)]
                                    ? cluster.mean[static_cast<std::size_t>(j)] + z
                                    : spec.noise_sigma * z;
      }
      for (int j = base; j < d; ++j) data.features(row, j) = spec.noise_sigma * standard(rng);
      data.labels.push_back(cluster.label);
    }
  }
  data.q = max_label + 1;
  for (int c = 0; c < data.q; ++c) data.label_names.push_back(std::to_string(c));
  return data;
}

std::vector<int> synthetic_cluster_ids(const SynthSpec& spec) {
  std::vector<int> ids;
  for (std::size_t c = 0; c < spec.clusters.size(); ++c)
    ids.insert(ids.end(), static_cast<std::size_t>(spec.n_per_cluster), static_cast<int>(c));
  return ids;
}

SynthSpec synth_preset(const std::string& name, int n_per_cluster, int noise_dims,
                       std::uint64_t seed) {
  SynthSpec spec;
  spec.n_per_cluster = n_per_cluster;
  spec.noise_dims = noise_dims;
  spec.noise_sigma = 1.0;
  spec.seed = seed;
  if (name == "two-cluster-xor") {
    // Four Gaussians at (+-2, +-2); label is the XOR of the two signs.
    spec.clusters = {{{2, 2}, {0, 1}, 0},
                     {{-2, -2}, {0, 1}, 0},
                     {{2, -2}, {0, 1}, 1},
                     {{-2, 2}, {0, 1}, 1}};
  } else if (name == "grouped-four") {
    // Cluster c is elevated on its own pair of dims {2c, 2c+1}; label c.
    for (int c = 0; c < 4; ++c) {
      ClusterSpec cluster;
      cluster.mean.assign(8, 0.0);
      cluster.mean[static_cast<std::size_t>(2 * c)] = 3.0;
      cluster.mean[static_cast<std::size_t>(2 * c + 1)] = 3.0;
      cluster.informative_dims = {2 * c, 2 * c + 1};
      cluster.label = c;
      spec.clusters.push_back(cluster);
    }
  } else if (name == "noisy-subspace") {
    // Two overlapping classes separated only along dims 0 and 1.
    spec.clusters = {{{0.5, 0.5}, {0, 1}, 0}, {{-0.5, -0.5}, {0, 1}, 1}};
  } else {
    throw ConfigError("unknown preset '" + name + "'");
  }
  spec.validate();
  return spec;
}

}  // namespace sparse_moe

#pragma once

// Dataset ingestion and persistence, standardization, stratified splits and
// the synthetic generators used by the demos and acceptance suite.

#include "sparse_moe/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace sparse_moe {

using DatasetD = Dataset<double>;

/// Parses comma-delimited text. The last column is the class token; a first
/// row with any non-numeric feature cell is treated as a header. Class ids
/// are assigned in order of first appearance.
DatasetD parse_dataset(std::istream& in, const std::string& source = "<stream>");
DatasetD load_dataset(const std::string& path);

/// Same format, but class tokens are mapped through a fixed vocabulary
/// (e.g. the one stored in a model). Unknown tokens are a DataError; the
/// file may contain any subset of the classes.
DatasetD parse_dataset_with_labels(std::istream& in, const std::vector<std::string>& label_names,
                                   const std::string& source = "<stream>");
DatasetD load_dataset_with_labels(const std::string& path,
                                  const std::vector<std::string>& label_names);

/// Feature rows for prediction: each row has either d cells, or d + 1 cells
/// whose last (label) cell is ignored.
Matrix<double> load_features(const std::string& path, Index d);

/// Writes features with 17 significant digits and the class token per row.
void write_dataset(std::ostream& out, const DatasetD& data);
void save_dataset(const std::string& path, const DatasetD& data);

Scaler<double> fit_scaler(const DatasetD& data);
DatasetD apply_scaler(const DatasetD& data, const Scaler<double>& scaler);

/// Rows `indices` of `data`, in the given order; class metadata is kept.
DatasetD subset(const DatasetD& data, const std::vector<Index>& indices);

/// Stratified split; each class contributes round(fraction * count) rows to
/// the first part. Index lists come back sorted.
std::pair<std::vector<Index>, std::vector<Index>> split_indices(const DatasetD& data,
                                                                double fraction,
                                                                std::uint64_t seed);
std::pair<DatasetD, DatasetD> train_test_split(const DatasetD& data, double fraction,
                                               std::uint64_t seed);

struct ClusterSpec {
  std::vector<double> mean;          // length D
  std::vector<int> informative_dims;  // dims drawn around `mean`, sd 1
  int label = 0;
};

struct SynthSpec {
  int n_per_cluster = 100;
  std::vector<ClusterSpec> clusters;
  int noise_dims = 0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;

  int base_dims() const;
  void validate() const;
};

/// Rows are emitted cluster by cluster; see synthetic_cluster_ids.
DatasetD generate_synthetic(const SynthSpec& spec);
std::vector<int> synthetic_cluster_ids(const SynthSpec& spec);

/// Named presets: "two-cluster-xor", "grouped-four", "noisy-subspace".
SynthSpec synth_preset(const std::string& name, int n_per_cluster, int noise_dims,
                       std::uint64_t seed);

}  // namespace sparse_moe

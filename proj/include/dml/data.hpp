#pragma once

#include "dml/core.hpp"
#include "dml/sampling.hpp"

#include <string>

namespace dml {

struct Dataset {
  Matrix features;          // M x D_in
  std::vector<int> labels;  // contiguous class ids 0..C-1
  DatasetIndex class_index;
  std::string name;
  std::map<int, int> original_labels;  // contiguous id -> id as loaded

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
  int n_classes() const { return static_cast<int>(class_index.size()); }
  void validate() const;
};

enum class SplitMode { FirstHalfClasses, ExplicitClassLists, Fraction };

struct SplitSpec {
  SplitMode mode = SplitMode::FirstHalfClasses;
  std::vector<int> train_classes;  // explicit mode
  std::vector<int> test_classes;   // explicit mode
  double train_fraction = 0.5;     // fraction mode, over classes
};

struct SyntheticSpec {
  int n_classes = 16;
  int samples_per_class = 20;
  int input_dim = 32;
  double center_spread = 5.0;  // inter-class center scale
  double noise_sigma = 1.0;    // intra-class std
  std::uint64_t seed = 0;
  void validate() const;
};

/// Header `label,f0,...,f{D-1}`, one row per sample; a `.gz` path is
/// transparently decompressed. Class ids are remapped to contiguous
/// integers; originals kept in `original_labels`.
Dataset load_feature_csv(const std::string& path);

Dataset gen_synthetic(const SyntheticSpec& spec);

std::pair<Dataset, Dataset> split_disjoint_classes(const Dataset& ds, const SplitSpec& spec);

}  // namespace dml

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "dml/data.hpp"
#include "dml/clustering_eval.hpp"

#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <string>

using namespace dml;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name, const std::string& contents)
      : path("/tmp/dml_test_" + name) {
    std::ofstream f(path);
    f << contents;
  }
  ~TempFile() { std::remove(path.c_str()); }
};

const char* kTinyCsv =
    "label,f0,f1\n"
    "5,0.5,1.0\n"
    "9,-1.5,2.25\n";

}  // namespace

TEST_CASE("csv loading, remapping, and shape") {
  TempFile f("tiny.csv", kTinyCsv);
  auto ds = load_feature_csv(f.path);
  CHECK(ds.size() == 2);
  CHECK(ds.dim() == 2);
  CHECK(ds.n_classes() == 2);
  CHECK(ds.labels == std::vector<int>{0, 1});
  CHECK(ds.original_labels.at(0) == 5);
  CHECK(ds.original_labels.at(1) == 9);
  CHECK(ds.features(0, 0) == doctest::Approx(0.5));
  CHECK(ds.features(1, 1) == doctest::Approx(2.25));
  CHECK(ds.class_index.at(0) == std::vector<int>{0});
  CHECK(ds.class_index.at(1) == std::vector<int>{1});
}

TEST_CASE("gz csv loads identically") {
  TempFile plain("plain.csv", kTinyCsv);
  std::string gz_path = "/tmp/dml_test_tiny.csv.gz";
  gzFile g = gzopen(gz_path.c_str(), "wb");
  REQUIRE(g != nullptr);
  gzwrite(g, kTinyCsv, static_cast<unsigned>(std::string(kTinyCsv).size()));
  gzclose(g);

  auto a = load_feature_csv(plain.path);
  auto b = load_feature_csv(gz_path);
  CHECK(a.labels == b.labels);
  CHECK((a.features - b.features).cwiseAbs().maxCoeff() == 0.0);
  std::remove(gz_path.c_str());
}

TEST_CASE("csv error paths carry line numbers") {
  TempFile ragged("ragged.csv", "label,f0,f1\n1,0.5\n");
  CHECK_THROWS_WITH_AS(load_feature_csv(ragged.path),
                       doctest::Contains("line 2"), std::runtime_error);

  TempFile bad_cell("badcell.csv", "label,f0\n1,0.5\n2,abc\n");
  CHECK_THROWS_WITH_AS(load_feature_csv(bad_cell.path),
                       doctest::Contains("line 3"), std::runtime_error);

  TempFile empty("empty.csv", "");
  CHECK_THROWS_AS(load_feature_csv(empty.path), std::runtime_error);

  TempFile bad_header("badheader.csv", "id,f0\n1,0.5\n");
  CHECK_THROWS_AS(load_feature_csv(bad_header.path), std::runtime_error);

  CHECK_THROWS_AS(load_feature_csv("/tmp/does_not_exist_dml.csv"), std::runtime_error);
}

TEST_CASE("synthetic generation") {
  SyntheticSpec spec;
  spec.n_classes = 4;
  spec.samples_per_class = 5;
  spec.input_dim = 6;
  spec.seed = 12;

  auto a = gen_synthetic(spec);
  CHECK(a.size() == 20);
  CHECK(a.dim() == 6);
  CHECK(a.n_classes() == 4);
  for (const auto& [cls, ids] : a.class_index) CHECK(ids.size() == 5);

  auto b = gen_synthetic(spec);
  CHECK((a.features - b.features).cwiseAbs().maxCoeff() == 0.0);

  spec.seed = 13;
  auto c = gen_synthetic(spec);
  CHECK((a.features - c.features).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("synthetic noise limit collapses classes") {
  SyntheticSpec spec;
  spec.n_classes = 3;
  spec.samples_per_class = 4;
  spec.input_dim = 5;
  spec.noise_sigma = 1e-12;
  auto ds = gen_synthetic(spec);
  for (const auto& [cls, ids] : ds.class_index)
    for (size_t i = 1; i < ids.size(); ++i)
      CHECK((ds.features.row(ids[i]) - ds.features.row(ids[0])).norm() < 1e-9);
}

TEST_CASE("highly separable synthetic data is retrievable from raw features") {
  SyntheticSpec spec;
  spec.n_classes = 8;
  spec.samples_per_class = 10;
  spec.input_dim = 16;
  spec.center_spread = 20.0;
  spec.noise_sigma = 1.0;
  spec.seed = 3;
  auto ds = gen_synthetic(spec);
  EmbeddingBatch b{ds.features, ds.labels, false};
  auto rep = recall_at_k(b, b, {1}, true);
  CHECK(rep.recall_at.at(1) == doctest::Approx(1.0));
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec bad;
  bad.noise_sigma = 0.0;
  CHECK_THROWS_AS(gen_synthetic(bad), std::invalid_argument);
}

TEST_CASE("disjoint class splits") {
  SyntheticSpec spec;
  spec.n_classes = 8;
  spec.samples_per_class = 3;
  spec.input_dim = 4;
  auto ds = gen_synthetic(spec);

  auto [train, test] = split_disjoint_classes(ds, {});
  CHECK(train.n_classes() == 4);
  CHECK(test.n_classes() == 4);
  CHECK(train.size() == 12);
  CHECK(test.size() == 12);
  // both sides remap to contiguous ids starting at 0
  CHECK(train.class_index.begin()->first == 0);
  CHECK(test.class_index.begin()->first == 0);
  // original ids are disjoint
  for (const auto& [id, orig] : train.original_labels)
    for (const auto& [id2, orig2] : test.original_labels) CHECK(orig != orig2);

  SplitSpec frac;
  frac.mode = SplitMode::Fraction;
  frac.train_fraction = 0.25;
  auto [t2, e2] = split_disjoint_classes(ds, frac);
  CHECK(t2.n_classes() == 2);
  CHECK(e2.n_classes() == 6);

  SplitSpec expl;
  expl.mode = SplitMode::ExplicitClassLists;
  expl.train_classes = {0, 2};
  expl.test_classes = {1, 3};
  auto [t3, e3] = split_disjoint_classes(ds, expl);
  CHECK(t3.n_classes() == 2);
  CHECK(e3.size() == 6);

  expl.test_classes = {0, 3};
  CHECK_THROWS_AS(split_disjoint_classes(ds, expl), std::runtime_error);
}

TEST_CASE("dataset validation catches a broken index") {
  SyntheticSpec spec;
  spec.n_classes = 2;
  spec.samples_per_class = 2;
  spec.input_dim = 2;
  auto ds = gen_synthetic(spec);
  ds.class_index[0].push_back(3);  // sample 3 belongs to class 1
  CHECK_THROWS_AS(ds.validate(), std::invalid_argument);
}

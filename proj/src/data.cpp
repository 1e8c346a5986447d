#include "dml/data.hpp"

#include <zlib.h>

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dml {

void Dataset::validate() const {
  if (static_cast<Eigen::Index>(labels.size()) != features.rows())
    throw std::invalid_argument("Dataset: labels length mismatch");
  size_t total = 0;
  std::set<int> seen;
  for (const auto& [cls, ids] : class_index) {
    total += ids.size();
    for (int id : ids) {
      if (id < 0 || id >= static_cast<int>(labels.size()) || labels[id] != cls)
        throw std::invalid_argument("Dataset: class_index entry disagrees with labels");
      if (!seen.insert(id).second)
        throw std::invalid_argument("Dataset: sample " + std::to_string(id) +
                                    " indexed more than once");
    }
  }
  if (total != labels.size())
    throw std::invalid_argument("Dataset: class_index does not partition the samples");
}

void SyntheticSpec::validate() const {
  if (n_classes < 1 || samples_per_class < 1 || input_dim < 1)
    throw std::invalid_argument("SyntheticSpec: counts must be positive");
  if (center_spread <= 0.0 || noise_sigma <= 0.0)
    throw std::invalid_argument("SyntheticSpec: spread and sigma must be positive");
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> lines;
  const bool gz = path.size() > 3 && path.substr(path.size() - 3) == ".gz";
  if (gz) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("load_feature_csv: cannot open " + path);
    std::string current;
    char buf[1 << 16];
    int got;
    while ((got = gzread(f, buf, sizeof(buf))) > 0) {
      for (int i = 0; i < got; ++i) {
        if (buf[i] == '\n') {
          lines.push_back(std::move(current));
          current.clear();
        } else if (buf[i] != '\r') {
          current.push_back(buf[i]);
        }
      }
    }
    gzclose(f);
    if (!current.empty()) lines.push_back(std::move(current));
  } else {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_feature_csv: cannot open " + path);
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(line);
    }
  }
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_real(const std::string& cell, int line_no) {
  double v;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size())
    throw std::runtime_error("load_feature_csv: non-numeric cell '" + cell + "' at line " +
                             std::to_string(line_no));
  return v;
}

void index_labels(Dataset& ds) {
  ds.class_index.clear();
  for (size_t i = 0; i < ds.labels.size(); ++i)
    ds.class_index[ds.labels[i]].push_back(static_cast<int>(i));
}

}  // namespace

Dataset load_feature_csv(const std::string& path) {
  std::vector<std::string> lines = read_lines(path);
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.size() < 2)
    throw std::runtime_error("load_feature_csv: " + path + " has no data rows");

  std::vector<std::string> header = split_csv(lines[0]);
  if (header.size() < 2 || header[0] != "label")
    throw std::runtime_error("load_feature_csv: expected header label,f0,... at line 1");
  const size_t dim = header.size() - 1;

  Dataset ds;
  ds.name = path;
  ds.features.resize(static_cast<Eigen::Index>(lines.size() - 1), static_cast<Eigen::Index>(dim));
  std::vector<int> raw_labels;

  for (size_t r = 1; r < lines.size(); ++r) {
    std::vector<std::string> cells = split_csv(lines[r]);
    if (cells.size() != header.size())
      throw std::runtime_error("load_feature_csv: row with " + std::to_string(cells.size() - 1) +
                               " features (expected " + std::to_string(dim) + ") at line " +
                               std::to_string(r + 1));
    double label = parse_real(cells[0], static_cast<int>(r + 1));
    raw_labels.push_back(static_cast<int>(label));
    for (size_t c = 1; c < cells.size(); ++c)
      ds.features(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c - 1)) =
          parse_real(cells[c], static_cast<int>(r + 1));
  }

  // remap class ids to contiguous integers, ascending original order
  std::set<int> distinct(raw_labels.begin(), raw_labels.end());
  std::map<int, int> remap;
  for (int original : distinct) {
    int next = static_cast<int>(remap.size());
    remap[original] = next;
    ds.original_labels[next] = original;
  }
  for (int raw : raw_labels) ds.labels.push_back(remap[raw]);
  index_labels(ds);
  ds.validate();
  return ds;
}

Dataset gen_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SamplerRng rng(spec.seed);

  Matrix centers(spec.n_classes, spec.input_dim);
  for (Eigen::Index i = 0; i < centers.rows(); ++i)
    for (Eigen::Index j = 0; j < centers.cols(); ++j)
      centers(i, j) = spec.center_spread * rng.normal();

  Dataset ds;
  {
    std::ostringstream name;
    name << "synthetic(c=" << spec.n_classes << ",n=" << spec.samples_per_class
         << ",d=" << spec.input_dim << ",spread/sigma=" << spec.center_spread / spec.noise_sigma
         << ",seed=" << spec.seed << ")";
    ds.name = name.str();
  }
  const int total = spec.n_classes * spec.samples_per_class;
  ds.features.resize(total, spec.input_dim);
  int row = 0;
  for (int c = 0; c < spec.n_classes; ++c) {
    for (int s = 0; s < spec.samples_per_class; ++s, ++row) {
      for (Eigen::Index j = 0; j < spec.input_dim; ++j)
        ds.features(row, j) = centers(c, j) + spec.noise_sigma * rng.normal();
      ds.labels.push_back(c);
      ds.original_labels[c] = c;
    }
  }
  index_labels(ds);
  ds.validate();
  return ds;
}

namespace {

Dataset subset_by_classes(const Dataset& ds, const std::vector<int>& classes,
                          const std::string& suffix) {
  std::set<int> keep(classes.begin(), classes.end());
  std::vector<int> rows;
  for (size_t i = 0; i < ds.labels.size(); ++i)
    if (keep.count(ds.labels[i])) rows.push_back(static_cast<int>(i));

  Dataset out;
  out.name = ds.name + suffix;
  out.features.resize(static_cast<Eigen::Index>(rows.size()), ds.features.cols());
  std::map<int, int> remap;
  for (int cls : classes) {
    int next = static_cast<int>(remap.size());
    remap[cls] = next;
    auto it = ds.original_labels.find(cls);
    out.original_labels[next] = it != ds.original_labels.end() ? it->second : cls;
  }
  for (size_t r = 0; r < rows.size(); ++r) {
    out.features.row(static_cast<Eigen::Index>(r)) = ds.features.row(rows[r]);
    out.labels.push_back(remap.at(ds.labels[rows[r]]));
  }
  for (size_t i = 0; i < out.labels.size(); ++i)
    out.class_index[out.labels[i]].push_back(static_cast<int>(i));
  out.validate();
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> split_disjoint_classes(const Dataset& ds, const SplitSpec& spec) {
  ds.validate();
  if (ds.n_classes() < 2)
    throw std::runtime_error("split_disjoint_classes: need at least 2 classes");

  std::vector<int> all_classes;
  for (const auto& [cls, ids] : ds.class_index) all_classes.push_back(cls);

  std::vector<int> train, test;
  switch (spec.mode) {
    case SplitMode::FirstHalfClasses: {
      size_t half = all_classes.size() / 2;
      train.assign(all_classes.begin(), all_classes.begin() + half);
      test.assign(all_classes.begin() + half, all_classes.end());
      break;
    }
    case SplitMode::Fraction: {
      if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0))
        throw std::runtime_error("split_disjoint_classes: train_fraction must be in (0,1)");
      size_t count = static_cast<size_t>(spec.train_fraction * all_classes.size());
      count = std::clamp<size_t>(count, 1, all_classes.size() - 1);
      train.assign(all_classes.begin(), all_classes.begin() + count);
      test.assign(all_classes.begin() + count, all_classes.end());
      break;
    }
    case SplitMode::ExplicitClassLists: {
      train = spec.train_classes;
      test = spec.test_classes;
      std::set<int> t(train.begin(), train.end());
      for (int cls : test)
        if (t.count(cls))
          throw std::runtime_error("split_disjoint_classes: class " + std::to_string(cls) +
                                   " appears on both sides");
      break;
    }
  }
  if (train.empty() || test.empty())
    throw std::runtime_error("split_disjoint_classes: a side ended up empty");
  return {subset_by_classes(ds, train, "/train"), subset_by_classes(ds, test, "/test")};
}

}  // namespace dml

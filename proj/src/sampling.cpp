#include "dml/sampling.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dml {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

SamplerRng::SamplerRng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

std::uint64_t SamplerRng::next_u64() { return engine_(); }

std::size_t SamplerRng::uniform_index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("SamplerRng::uniform_index: n must be positive");
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::size_t>(v % n);
}

double SamplerRng::uniform_real() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SamplerRng::normal() {
  if (have_spare_normal_) {
    have_spare_normal_ = false;
    return spare_normal_;
  }
  double u1, u2;
  do {
    u1 = uniform_real();
  } while (u1 <= 0.0);
  u2 = uniform_real();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * 3.14159265358979323846 * u2;
  spare_normal_ = r * std::sin(theta);
  have_spare_normal_ = true;
  return r * std::cos(theta);
}

SamplerRng SamplerRng::split(std::uint64_t stream_id) const {
  return SamplerRng(splitmix64(seed_ ^ splitmix64(stream_id + 0x517cc1b727220a95ULL)));
}

std::string SamplerRng::serialize_state() const {
  std::ostringstream os;
  os << seed_ << ' ' << (have_spare_normal_ ? 1 : 0) << ' ';
  os.precision(17);
  os << spare_normal_ << ' ' << engine_;
  return os.str();
}

void SamplerRng::restore_state(const std::string& state) {
  std::istringstream is(state);
  int spare_flag = 0;
  is >> seed_ >> spare_flag >> spare_normal_ >> engine_;
  if (!is) throw std::invalid_argument("SamplerRng: malformed serialized state");
  have_spare_normal_ = spare_flag != 0;
}

BatchPlan semi_hard_mine(const EmbeddingBatch& batch, const DistanceMatrix& distances,
                         double /*margin*/) {
  batch.validate();
  const Eigen::Index n = batch.size();
  if (distances.values.rows() != n || distances.values.cols() != n)
    throw std::invalid_argument("semi_hard_mine: distance matrix shape mismatch");

  BatchPlan plan;
  plan.kind = PlanKind::Triplets;

  for (Eigen::Index a = 0; a < n; ++a) {
    std::vector<int> positives, negatives;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      (batch.labels[j] == batch.labels[a] ? positives : negatives).push_back(static_cast<int>(j));
    }
    if (positives.empty() || negatives.empty()) continue;  // anchor skipped

    for (int p : positives) {
      double dap = distances.values(a, p);
      int semi_hard = -1, fallback = -1;
      double best_semi = std::numeric_limits<double>::infinity();
      double best_far = -std::numeric_limits<double>::infinity();
      for (int neg : negatives) {
        double dan = distances.values(a, neg);
        if (dan > dap && dan < best_semi) {  // strict: ties keep the lower index
          best_semi = dan;
          semi_hard = neg;
        }
        if (dan > best_far) {
          best_far = dan;
          fallback = neg;
        }
      }
      int chosen = semi_hard >= 0 ? semi_hard : fallback;
      plan.triplets.triplets.push_back({static_cast<int>(a), p, chosen});
    }
  }
  if (plan.triplets.triplets.empty())
    throw std::domain_error("semi_hard_mine: every anchor lacks a positive or a negative");
  return plan;
}

std::vector<double> distance_weighted_weights(const std::vector<double>& dists, int dim,
                                              const DistanceWeightedClip& clip) {
  std::vector<double> w(dists.size());
  for (size_t i = 0; i < dists.size(); ++i) {
    double d = std::clamp(dists[i], 1e-8, 2.0 - 1e-8);
    double log_q = (dim - 2) * std::log(d) + 0.5 * (dim - 3) * std::log(1.0 - d * d / 4.0);
    w[i] = std::exp(-log_q);  // q^-1 up to a constant factor
  }
  double lambda_max = clip.lambda_max;
  if (lambda_max <= 0.0) {
    double wmin = *std::min_element(w.begin(), w.end());
    lambda_max = 1e4 * wmin;
  }
  for (double& v : w) v = std::min(lambda_max, std::max(clip.lambda_min, v));
  return w;
}

DistanceWeightedDraw distance_weighted_sample(const EmbeddingBatch& batch,
                                              const DistanceMatrix& distances, int anchor,
                                              SamplerRng& rng,
                                              const DistanceWeightedClip& clip) {
  batch.validate();
  const Eigen::Index n = batch.size();
  if (anchor < 0 || anchor >= n)
    throw std::invalid_argument("distance_weighted_sample: anchor out of range");

  std::vector<int> negatives;
  std::vector<double> dists;
  for (Eigen::Index j = 0; j < n; ++j) {
    if (j == anchor || batch.labels[j] == batch.labels[anchor]) continue;
    negatives.push_back(static_cast<int>(j));
    dists.push_back(distances.values(anchor, j));
  }
  if (negatives.empty())
    throw std::domain_error("distance_weighted_sample: anchor " + std::to_string(anchor) +
                            " has no negative");

  DistanceWeightedDraw draw;
  std::vector<double> weights;
  if (batch.dim() < 3) {
    draw.uniform_fallback = true;
    weights.assign(negatives.size(), 1.0);
  } else {
    weights = distance_weighted_weights(dists, static_cast<int>(batch.dim()), clip);
  }

  double total = 0.0;
  for (double w : weights) total += w;
  double u = rng.uniform_real() * total;
  double acc = 0.0;
  draw.index = negatives.back();
  for (size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) {
      draw.index = negatives[i];
      break;
    }
  }
  return draw;
}

namespace {

std::vector<int> eligible_classes(const DatasetIndex& index, size_t min_samples) {
  std::vector<int> out;
  for (const auto& [cls, ids] : index)
    if (ids.size() >= min_samples) out.push_back(cls);
  return out;
}

std::vector<int> draw_without_replacement(const std::vector<int>& pool, size_t count,
                                          SamplerRng& rng) {
  std::vector<int> shuffled = pool;
  rng.shuffle(shuffled);
  shuffled.resize(count);
  return shuffled;
}

}  // namespace

ComposedBatch npairs_compose(const DatasetIndex& index, int n_classes, SamplerRng& rng) {
  if (n_classes < 2) throw std::invalid_argument("npairs_compose: need n_classes >= 2");
  std::vector<int> eligible = eligible_classes(index, 2);
  if (static_cast<int>(eligible.size()) < n_classes)
    throw std::domain_error("npairs_compose: need " + std::to_string(n_classes) +
                            " classes with >= 2 samples, only " +
                            std::to_string(eligible.size()) + " available");

  std::vector<int> classes = draw_without_replacement(eligible, n_classes, rng);
  ComposedBatch out;
  out.plan.kind = PlanKind::NPairs;
  for (int cls : classes) {
    std::vector<int> picked = draw_without_replacement(index.at(cls), 2, rng);
    int base = static_cast<int>(out.dataset_indices.size());
    out.dataset_indices.push_back(picked[0]);
    out.dataset_indices.push_back(picked[1]);
    out.plan.npairs_layout.pairs.emplace_back(base, base + 1);
  }
  return out;
}

ComposedBatch episodic_compose(const DatasetIndex& index, const EpisodeSpec& spec,
                               int episodes_per_batch, SamplerRng& rng) {
  spec.validate();
  if (episodes_per_batch < 1)
    throw std::invalid_argument("episodic_compose: episodes_per_batch must be >= 1");
  const size_t need = static_cast<size_t>(spec.support_per_class + spec.query_per_class);
  std::vector<int> eligible = eligible_classes(index, need);
  if (static_cast<int>(eligible.size()) < spec.classes_per_episode)
    throw std::domain_error("episodic_compose: need " +
                            std::to_string(spec.classes_per_episode) + " classes with >= " +
                            std::to_string(need) + " samples, only " +
                            std::to_string(eligible.size()) + " available");

  ComposedBatch out;
  out.plan.kind = PlanKind::Episode;
  for (int e = 0; e < episodes_per_batch; ++e) {
    std::vector<int> classes = draw_without_replacement(eligible, spec.classes_per_episode, rng);
    EpisodeLayout layout;
    for (int cls : classes) {
      std::vector<int> picked = draw_without_replacement(index.at(cls), need, rng);
      EpisodeLayout::ClassGroup group;
      group.label = cls;
      for (int i = 0; i < spec.support_per_class; ++i) {
        group.support.push_back(static_cast<int>(out.dataset_indices.size()));
        out.dataset_indices.push_back(picked[i]);
      }
      for (int i = 0; i < spec.query_per_class; ++i) {
        group.query.push_back(static_cast<int>(out.dataset_indices.size()));
        out.dataset_indices.push_back(picked[spec.support_per_class + i]);
      }
      layout.classes.push_back(std::move(group));
    }
    out.plan.episodes.push_back(std::move(layout));
  }
  return out;
}

std::vector<int> class_balanced_compose(const DatasetIndex& index, int n_classes, int per_class,
                                        SamplerRng& rng) {
  if (n_classes < 1 || per_class < 1)
    throw std::invalid_argument("class_balanced_compose: counts must be positive");
  std::vector<int> eligible = eligible_classes(index, per_class);
  if (static_cast<int>(eligible.size()) < n_classes)
    throw std::domain_error("class_balanced_compose: need " + std::to_string(n_classes) +
                            " classes with >= " + std::to_string(per_class) +
                            " samples, only " + std::to_string(eligible.size()) + " available");

  std::vector<int> classes = draw_without_replacement(eligible, n_classes, rng);
  std::vector<int> out;
  for (int cls : classes) {
    std::vector<int> picked = draw_without_replacement(index.at(cls), per_class, rng);
    out.insert(out.end(), picked.begin(), picked.end());
  }
  return out;
}

PairIndexSet all_pairs(const EmbeddingBatch& batch) {
  batch.validate();
  PairIndexSet out;
  const Eigen::Index n = batch.size();
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      auto pair = std::make_pair(static_cast<int>(i), static_cast<int>(j));
      (batch.labels[i] == batch.labels[j] ? out.positives : out.negatives).push_back(pair);
    }
  return out;
}

PairIndexSet distance_weighted_pairs(const EmbeddingBatch& batch, const DistanceMatrix& distances,
                                     SamplerRng& rng, const DistanceWeightedClip& clip) {
  batch.validate();
  PairIndexSet out;
  const Eigen::Index n = batch.size();
  for (Eigen::Index a = 0; a < n; ++a) {
    std::vector<int> positives;
    bool has_negative = false;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == a) continue;
      if (batch.labels[j] == batch.labels[a])
        positives.push_back(static_cast<int>(j));
      else
        has_negative = true;
    }
    if (positives.empty() || !has_negative) continue;
    int pos = positives[rng.uniform_index(positives.size())];
    DistanceWeightedDraw neg = distance_weighted_sample(batch, distances, static_cast<int>(a),
                                                        rng, clip);
    out.positives.emplace_back(static_cast<int>(a), pos);
    out.negatives.emplace_back(static_cast<int>(a), neg.index);
  }
  if (out.positives.empty())
    throw std::domain_error("distance_weighted_pairs: no eligible anchor");
  return out;
}

}  // namespace dml

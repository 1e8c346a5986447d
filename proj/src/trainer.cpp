#include "dml/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <set>
#include <stdexcept>

namespace dml {

using nlohmann::json;

void EncoderSpec::validate() const {
  if (input_dim < 1 || output_dim < 1)
    throw std::invalid_argument("EncoderSpec: dims must be >= 1");
  for (int h : hidden_dims)
    if (h < 1) throw std::invalid_argument("EncoderSpec: hidden dims must be >= 1");
  if (kind == EncoderKind::Identity && input_dim != output_dim)
    throw std::invalid_argument("EncoderSpec: identity encoder requires input_dim == output_dim");
  if (kind != EncoderKind::Mlp && !hidden_dims.empty())
    throw std::invalid_argument("EncoderSpec: hidden_dims only apply to the mlp encoder");
}

void OptimizerConfig::validate() const {
  if (learning_rate < 0.0) throw std::invalid_argument("OptimizerConfig: negative learning rate");
  if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0))
    throw std::invalid_argument("OptimizerConfig: adam betas must lie in (0,1)");
  if (!(rmsprop_gamma > 0.0 && rmsprop_gamma < 1.0))
    throw std::invalid_argument("OptimizerConfig: rmsprop gamma must lie in (0,1)");
  if (!(rmsprop_lr_decay > 0.0 && rmsprop_lr_decay <= 1.0))
    throw std::invalid_argument("OptimizerConfig: rmsprop lr decay must lie in (0,1]");
  if (epsilon <= 0.0 || weight_decay < 0.0)
    throw std::invalid_argument("OptimizerConfig: bad epsilon or weight decay");
}

namespace {

const std::pair<LossKind, const char*> kLossNames[] = {
    {LossKind::TripletSemihard, "triplet-semihard"},
    {LossKind::Lifted, "lifted"},
    {LossKind::NPairs, "npairs"},
    {LossKind::Angular, "angular"},
    {LossKind::Margin, "margin"},
    {LossKind::RankedList, "rll"},
    {LossKind::StructClust, "struct-clust"},
    {LossKind::Proto, "proto"},
    {LossKind::ProxyTriplet, "proxy-triplet"},
    {LossKind::ProxyNca, "proxy-nca"},
    {LossKind::ProxySoftmax, "proxy-softmax"},
    {LossKind::Dreml, "dreml"},
};

bool needs_proxies(LossKind kind) {
  return kind == LossKind::ProxyTriplet || kind == LossKind::ProxyNca ||
         kind == LossKind::ProxySoftmax;
}

bool needs_positives_in_batch(LossKind kind) {
  switch (kind) {
    case LossKind::TripletSemihard:
    case LossKind::Lifted:
    case LossKind::Margin:
    case LossKind::RankedList:
      return true;
    default:
      return false;
  }
}

}  // namespace

const char* loss_name(LossKind kind) {
  for (const auto& [k, n] : kLossNames)
    if (k == kind) return n;
  return "unknown";
}

LossKind loss_from_name(const std::string& name) {
  for (const auto& [k, n] : kLossNames)
    if (name == n) return k;
  throw std::invalid_argument("unknown loss name: " + name);
}

bool default_normalize_eval(LossKind kind) {
  switch (kind) {
    case LossKind::StructClust:
    case LossKind::Margin:
    case LossKind::ProxyTriplet:
    case LossKind::ProxyNca:
    case LossKind::ProxySoftmax:
    case LossKind::RankedList:
      return true;
    default:
      return false;
  }
}

int MethodConfig::batch_size() const {
  switch (loss) {
    case LossKind::NPairs:
    case LossKind::Angular:
      return 2 * batch_classes;
    case LossKind::Proto:
      return episodes_per_batch * episode.classes_per_episode *
             (episode.support_per_class + episode.query_per_class);
    default:
      return batch_classes * per_class;
  }
}

void MethodConfig::validate(int available_train_classes) const {
  if (batch_classes < 2 || per_class < 1)
    throw std::invalid_argument("MethodConfig: batch shape must span >= 2 classes");
  if (needs_positives_in_batch(loss) && per_class < 2)
    throw std::invalid_argument(std::string("MethodConfig: loss ") + loss_name(loss) +
                                " needs >= 2 samples per class in each batch");
  if (loss == LossKind::Proto) {
    episode.validate();
    if (episode.classes_per_episode > available_train_classes)
      throw std::invalid_argument("MethodConfig: episode spans more classes than available");
  } else if (batch_classes > available_train_classes) {
    throw std::invalid_argument("MethodConfig: batch_classes " + std::to_string(batch_classes) +
                                " exceeds available classes " +
                                std::to_string(available_train_classes));
  }
  if (loss == LossKind::RankedList) ranked_list.validate();
  if (loss == LossKind::Dreml && ensemble_size < 1)
    throw std::invalid_argument("MethodConfig: ensemble_size must be >= 1");
  if (loss == LossKind::Dreml && needs_proxies(ensemble_base) == false &&
      ensemble_base == LossKind::Dreml)
    throw std::invalid_argument("MethodConfig: dreml cannot nest itself");
}

std::optional<ProxyBank> TrainState::proxy_bank() const {
  auto it = params.find("proxies");
  if (it == params.end()) return std::nullopt;
  ProxyBank bank;
  bank.proxies = it->second;
  for (Eigen::Index c = 0; c < bank.proxies.rows(); ++c)
    bank.assignment[static_cast<int>(c)] = static_cast<int>(c);
  bank.trainable = method.proxy_trainable;
  bank.scale = method.proxy_scale;
  bank.normalize = true;
  return bank;
}

namespace {

struct LayerShape {
  int in, out;
};

std::vector<LayerShape> layer_shapes(const EncoderSpec& spec) {
  std::vector<LayerShape> shapes;
  if (spec.kind == EncoderKind::Identity) return shapes;
  int prev = spec.input_dim;
  if (spec.kind == EncoderKind::Mlp) {
    for (int h : spec.hidden_dims) {
      shapes.push_back({prev, h});
      prev = h;
    }
  }
  shapes.push_back({prev, spec.output_dim});
  return shapes;
}

}  // namespace

TrainState init_state(const EncoderSpec& spec, const MethodConfig& method,
                      const OptimizerConfig& opt, int n_train_classes,
                      std::uint64_t run_seed) {
  spec.validate();
  opt.validate();
  method.validate(n_train_classes);
  if (method.loss == LossKind::Dreml)
    throw std::invalid_argument("init_state: dreml is a wrapper, use dreml_train");

  TrainState state;
  state.encoder = spec;
  state.method = method;
  state.optimizer = opt;
  state.rng = SamplerRng(run_seed);

  SamplerRng init_rng = SamplerRng(spec.seed).split(0x696e6974ULL);
  int layer = 0;
  for (const LayerShape& s : layer_shapes(spec)) {
    double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
    Matrix w(s.in, s.out);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        w(i, j) = bound * (2.0 * init_rng.uniform_real() - 1.0);
    std::string wn = "enc_w" + std::to_string(layer);
    std::string bn = "enc_b" + std::to_string(layer);
    state.param_names.push_back(wn);
    state.param_names.push_back(bn);
    state.params[wn] = w;
    state.params[bn] = Matrix::Zero(1, s.out);
    ++layer;
  }

  if (needs_proxies(method.loss)) {
    SamplerRng proxy_rng = SamplerRng(run_seed).split(0x70727879ULL);
    Matrix proxies(n_train_classes, spec.output_dim);
    for (Eigen::Index i = 0; i < proxies.rows(); ++i) {
      Vector v(spec.output_dim);
      for (Eigen::Index j = 0; j < v.size(); ++j) v(j) = proxy_rng.normal();
      proxies.row(i) = v.transpose() / v.norm();
    }
    state.param_names.push_back("proxies");
    state.params["proxies"] = proxies;
  }
  if (method.loss == LossKind::Margin && method.trainable_beta) {
    state.param_names.push_back("beta");
    state.params["beta"] = Matrix::Constant(n_train_classes, 1, method.beta_init);
  }

  for (const std::string& name : state.param_names) {
    state.adam_m[name] = Matrix::Zero(state.params.at(name).rows(), state.params.at(name).cols());
    state.adam_v[name] = Matrix::Zero(state.params.at(name).rows(), state.params.at(name).cols());
  }
  return state;
}

namespace {

struct ForwardCache {
  std::vector<Matrix> acts;  // acts[0] = input, acts[i] = output of layer i
  std::vector<Matrix> pre;   // pre-activation of each layer
};

Matrix forward(const TrainState& state, const Matrix& x, ForwardCache* cache) {
  if (x.cols() != state.encoder.input_dim)
    throw std::invalid_argument("encoder: input has " + std::to_string(x.cols()) +
                                " columns, expected " + std::to_string(state.encoder.input_dim));
  if (cache) cache->acts.push_back(x);
  if (state.encoder.kind == EncoderKind::Identity) return x;

  Matrix h = x;
  const size_t layers = layer_shapes(state.encoder).size();
  for (size_t l = 0; l < layers; ++l) {
    const Matrix& w = state.params.at("enc_w" + std::to_string(l));
    const Matrix& b = state.params.at("enc_b" + std::to_string(l));
    Matrix z = (h * w).rowwise() + b.row(0);
    if (cache) cache->pre.push_back(z);
    h = (l + 1 < layers) ? z.cwiseMax(0.0) : z;
    if (cache) cache->acts.push_back(h);
  }
  return h;
}

void backward(const TrainState& state, const ForwardCache& cache, const Matrix& grad_out,
              std::map<std::string, Matrix>& grads) {
  if (state.encoder.kind == EncoderKind::Identity) return;
  const size_t layers = layer_shapes(state.encoder).size();
  Matrix g = grad_out;
  for (size_t l = layers; l-- > 0;) {
    grads["enc_w" + std::to_string(l)] = cache.acts[l].transpose() * g;
    grads["enc_b" + std::to_string(l)] = g.colwise().sum();
    if (l > 0) {
      const Matrix& w = state.params.at("enc_w" + std::to_string(l));
      g = (g * w.transpose()).cwiseProduct(
          (cache.pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
}

MarginLossParams margin_params_from_state(const TrainState& state) {
  MarginLossParams p;
  p.alpha = state.method.margin_alpha;
  p.trainable_beta = state.method.trainable_beta;
  auto it = state.params.find("beta");
  if (it != state.params.end())
    p.beta = it->second.col(0);
  else
    p.beta = Vector::Constant(1024, state.method.beta_init);
  return p;
}

/// Loss value + gradients w.r.t. embeddings and trainable params for
/// the configured method, building the default within-batch plan when
/// none was supplied.
DifferentiableResult dispatch_loss(TrainState& state, const EmbeddingBatch& emb,
                                   const BatchPlan* plan) {
  const MethodConfig& m = state.method;
  switch (m.loss) {
    case LossKind::TripletSemihard: {
      BatchPlan mined;
      if (!plan) {
        DistanceMatrix d = pairwise_distances(l2_normalize(emb), Metric::SquaredEuclidean);
        mined = semi_hard_mine(emb, d, m.triplet_margin);
        plan = &mined;
      }
      return triplet_loss(emb, plan->triplets, m.triplet_margin);
    }
    case LossKind::Lifted: {
      BatchPlan pairs;
      if (!plan) {
        pairs.kind = PlanKind::Pairs;
        pairs.pairs = all_pairs(emb);
        plan = &pairs;
      }
      return lifted_struct_loss(emb, plan->pairs, m.lifted_margin);
    }
    case LossKind::NPairs: {
      if (!plan) throw std::invalid_argument("npairs loss requires an npairs batch plan");
      NPairsConfig cfg;
      cfg.average_reversed = m.npairs_reversed;
      return npairs_loss(emb, plan->npairs_layout, m.npairs_l2_reg, cfg);
    }
    case LossKind::Angular: {
      if (!plan) throw std::invalid_argument("angular loss requires an npairs batch plan");
      return angular_loss(emb, plan->npairs_layout, m.angular);
    }
    case LossKind::Margin: {
      BatchPlan pairs;
      if (!plan) {
        pairs.kind = PlanKind::Pairs;
        DistanceMatrix d = pairwise_distances(l2_normalize(emb), Metric::Euclidean);
        pairs.pairs = distance_weighted_pairs(l2_normalize(emb), d, state.rng);
        plan = &pairs;
      }
      return margin_loss(emb, plan->pairs, margin_params_from_state(state));
    }
    case LossKind::RankedList:
      return ranked_list_loss(emb, m.ranked_list);
    case LossKind::StructClust:
      return struct_clust_loss(emb, m.struct_clust);
    case LossKind::Proto: {
      if (!plan) throw std::invalid_argument("prototypical loss requires an episodic batch plan");
      return prototypical_loss(emb, plan->episodes);
    }
    case LossKind::ProxyTriplet:
      return proxy_triplet_loss(emb, *state.proxy_bank(), m.triplet_margin);
    case LossKind::ProxyNca: {
      ProxyNcaConfig cfg;
      cfg.include_positive_in_denominator = m.proxy_include_positive;
      return proxy_nca_loss(emb, *state.proxy_bank(), cfg);
    }
    case LossKind::ProxySoftmax:
      return proxy_softmax_loss(emb, *state.proxy_bank(), m.softmax_temperature);
    case LossKind::Dreml:
      throw std::invalid_argument("dreml is a wrapper, use dreml_train");
  }
  throw std::logic_error("dispatch_loss: unreachable");
}

struct StepGradients {
  double loss = 0.0;
  std::map<std::string, Matrix> grads;
};

StepGradients compute_gradients(TrainState& state, const Matrix& features,
                                const std::vector<int>& labels, const BatchPlan* plan) {
  ForwardCache cache;
  Matrix encoded = forward(state, features, &cache);
  EmbeddingBatch emb;
  emb.vectors = encoded;
  emb.labels = labels;

  DifferentiableResult res = dispatch_loss(state, emb, plan);
  if (!std::isfinite(res.value))
    throw std::runtime_error("train_step: non-finite loss from " +
                             std::string(loss_name(state.method.loss)) + " at step " +
                             std::to_string(state.step));

  StepGradients out;
  out.loss = res.value;
  backward(state, cache, res.grad_embeddings, out.grads);
  if (res.grad_params.count("proxies")) out.grads["proxies"] = res.grad_params.at("proxies");
  if (res.grad_params.count("beta")) out.grads["beta"] = res.grad_params.at("beta");
  return out;
}

void apply_update(TrainState& state, const std::map<std::string, Matrix>& grads) {
  const OptimizerConfig& opt = state.optimizer;
  state.step += 1;
  const double t = static_cast<double>(state.step);

  for (const std::string& name : state.param_names) {
    Matrix& p = state.params.at(name);
    auto it = grads.find(name);
    Matrix g = it != grads.end() ? it->second : Matrix::Zero(p.rows(), p.cols());
    if (opt.weight_decay > 0.0) g += opt.weight_decay * p;

    if (opt.kind == OptimizerKind::Adam) {
      Matrix& m = state.adam_m.at(name);
      Matrix& v = state.adam_v.at(name);
      m = opt.beta1 * m + (1.0 - opt.beta1) * g;
      v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
      double c1 = 1.0 - std::pow(opt.beta1, t);
      double c2 = 1.0 - std::pow(opt.beta2, t);
      p -= (opt.learning_rate / c1) *
           (m.array() / ((v.array() / c2).sqrt() + opt.epsilon)).matrix();
    } else {
      Matrix& cachev = state.adam_v.at(name);
      cachev = opt.rmsprop_gamma * cachev + (1.0 - opt.rmsprop_gamma) * g.cwiseProduct(g);
      double lr_t = opt.learning_rate * std::pow(opt.rmsprop_lr_decay, t - 1.0);
      p -= lr_t * (g.array() / (cachev.array().sqrt() + opt.epsilon)).matrix();
    }
  }

  // normalized proxy banks stay on the unit sphere
  if (state.params.count("proxies")) {
    Matrix& proxies = state.params.at("proxies");
    for (Eigen::Index i = 0; i < proxies.rows(); ++i) {
      double n = proxies.row(i).norm();
      // skip rows already unit to the last bit (e.g. a zero-lr step)
      if (n > 0.0 && std::abs(n - 1.0) > 1e-14) proxies.row(i) /= n;
    }
  }
}

}  // namespace

Matrix encode(const TrainState& state, const Matrix& features) {
  return forward(state, features, nullptr);
}

double train_step(TrainState& state, const Matrix& features, const std::vector<int>& labels,
                  const BatchPlan* plan) {
  StepGradients sg = compute_gradients(state, features, labels, plan);
  apply_update(state, sg.grads);
  return sg.loss;
}

double train_step_aggregate(TrainState& state,
                            const std::vector<std::pair<Matrix, std::vector<int>>>& sub_batches) {
  if (sub_batches.empty()) throw std::invalid_argument("train_step_aggregate: no sub-batches");
  double total_rows = 0.0;
  for (const auto& [f, l] : sub_batches) total_rows += static_cast<double>(f.rows());

  std::map<std::string, Matrix> acc;
  double loss = 0.0;
  for (const auto& [f, l] : sub_batches) {
    StepGradients sg = compute_gradients(state, f, l, nullptr);
    double w = static_cast<double>(f.rows()) / total_rows;
    loss += w * sg.loss;
    for (const auto& [name, g] : sg.grads) {
      auto [it, inserted] = acc.emplace(name, w * g);
      if (!inserted) it->second += w * g;
    }
  }
  apply_update(state, acc);
  return loss;
}

EmbeddingBatch embed_dataset(const TrainState& state, const Dataset& ds) {
  EmbeddingBatch emb;
  emb.vectors = encode(state, ds.features);
  emb.labels = ds.labels;
  if (state.encoder.normalize_output || default_normalize_eval(state.method.loss))
    emb = l2_normalize(emb);
  return emb;
}

EvalReport evaluate(const EmbeddingBatch& embeddings, const std::vector<int>& recall_ks) {
  EvalReport report = recall_at_k(embeddings, embeddings, recall_ks, true);
  std::set<int> classes(embeddings.labels.begin(), embeddings.labels.end());
  InferenceResult clusters = loss_augmented_inference(embeddings, 0.0,
                                                      static_cast<int>(classes.size()),
                                                      ClustInference::Greedy);
  ClusterAssignment pred = assign_to_facilities(embeddings, clusters.facilities);
  report.nmi = nmi(pred, ClusterAssignment{embeddings.labels});
  report.check_monotone();
  return report;
}

namespace {

ComposedBatch compose_batch(TrainState& state, const Dataset& train) {
  const MethodConfig& m = state.method;
  switch (m.loss) {
    case LossKind::NPairs:
    case LossKind::Angular:
      return npairs_compose(train.class_index, m.batch_classes, state.rng);
    case LossKind::Proto:
      return episodic_compose(train.class_index, m.episode, m.episodes_per_batch, state.rng);
    default: {
      ComposedBatch out;
      out.dataset_indices =
          class_balanced_compose(train.class_index, m.batch_classes, m.per_class, state.rng);
      out.plan.kind = PlanKind::Triplets;  // plan built per-step from embeddings
      return out;
    }
  }
}

bool has_own_plan(LossKind kind) {
  return kind == LossKind::NPairs || kind == LossKind::Angular || kind == LossKind::Proto;
}

}  // namespace

RunHistory train_run(TrainState& state, const Dataset& train, const Dataset& test,
                     const TrainSchedule& schedule) {
  train.validate();
  test.validate();
  state.method.validate(train.n_classes());
  if (schedule.steps < 0 || schedule.eval_every < 1)
    throw std::invalid_argument("train_run: bad schedule");

  RunHistory history;
  history.entries.push_back({state.step, evaluate(embed_dataset(state, test), schedule.recall_ks)});

  for (int s = 1; s <= schedule.steps; ++s) {
    ComposedBatch batch = compose_batch(state, train);
    Matrix features(batch.dataset_indices.size(), train.dim());
    std::vector<int> labels;
    for (size_t i = 0; i < batch.dataset_indices.size(); ++i) {
      features.row(static_cast<Eigen::Index>(i)) = train.features.row(batch.dataset_indices[i]);
      labels.push_back(train.labels[batch.dataset_indices[i]]);
    }
    train_step(state, features, labels, has_own_plan(state.method.loss) ? &batch.plan : nullptr);

    if (s % schedule.eval_every == 0 || s == schedule.steps)
      history.entries.push_back(
          {state.step, evaluate(embed_dataset(state, test), schedule.recall_ks)});
  }
  return history;
}

BinaryCodes binarize(const EmbeddingBatch& batch) {
  BinaryCodes codes;
  codes.labels = batch.labels;
  codes.bits.resize(batch.size(), batch.dim());
  for (Eigen::Index i = 0; i < batch.size(); ++i)
    for (Eigen::Index d = 0; d < batch.dim(); ++d)
      codes.bits(i, d) = batch.vectors(i, d) > 0.0 ? 1 : 0;
  return codes;
}

// ---- checkpoint serialization ----

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  if (j.empty()) return Matrix(0, 0);
  Matrix m(j.size(), j[0].size());
  for (size_t i = 0; i < j.size(); ++i)
    for (size_t c = 0; c < j[i].size(); ++c) m(i, c) = j[i][c].get<double>();
  return m;
}

json method_to_json(const MethodConfig& m) {
  return json{{"loss", loss_name(m.loss)},
              {"triplet_margin", m.triplet_margin},
              {"lifted_margin", m.lifted_margin},
              {"npairs_l2_reg", m.npairs_l2_reg},
              {"npairs_reversed", m.npairs_reversed},
              {"angular_alpha_degrees", m.angular.alpha_degrees},
              {"angular_combine", m.angular.combine_with_npairs},
              {"angular_lambda", m.angular.combination_weight},
              {"margin_alpha", m.margin_alpha},
              {"beta_init", m.beta_init},
              {"trainable_beta", m.trainable_beta},
              {"rll_alpha", m.ranked_list.alpha},
              {"rll_m", m.ranked_list.m},
              {"rll_lambda", m.ranked_list.lambda},
              {"rll_temperature", m.ranked_list.temperature},
              {"struct_gamma", m.struct_clust.gamma},
              {"struct_inference", static_cast<int>(m.struct_clust.inference)},
              {"episode_classes", m.episode.classes_per_episode},
              {"episode_support", m.episode.support_per_class},
              {"episode_query", m.episode.query_per_class},
              {"episodes_per_batch", m.episodes_per_batch},
              {"proxy_scale", m.proxy_scale},
              {"proxy_trainable", m.proxy_trainable},
              {"softmax_temperature", m.softmax_temperature},
              {"proxy_include_positive", m.proxy_include_positive},
              {"batch_classes", m.batch_classes},
              {"per_class", m.per_class},
              {"ensemble_size", m.ensemble_size},
              {"ensemble_base", loss_name(m.ensemble_base)}};
}

MethodConfig method_from_json(const json& j) {
  MethodConfig m;
  m.loss = loss_from_name(j.at("loss"));
  m.triplet_margin = j.at("triplet_margin");
  m.lifted_margin = j.at("lifted_margin");
  m.npairs_l2_reg = j.at("npairs_l2_reg");
  m.npairs_reversed = j.at("npairs_reversed");
  m.angular.alpha_degrees = j.at("angular_alpha_degrees");
  m.angular.combine_with_npairs = j.at("angular_combine");
  m.angular.combination_weight = j.at("angular_lambda");
  m.margin_alpha = j.at("margin_alpha");
  m.beta_init = j.at("beta_init");
  m.trainable_beta = j.at("trainable_beta");
  m.ranked_list.alpha = j.at("rll_alpha");
  m.ranked_list.m = j.at("rll_m");
  m.ranked_list.lambda = j.at("rll_lambda");
  m.ranked_list.temperature = j.at("rll_temperature");
  m.struct_clust.gamma = j.at("struct_gamma");
  m.struct_clust.inference = static_cast<ClustInference>(j.at("struct_inference").get<int>());
  m.episode.classes_per_episode = j.at("episode_classes");
  m.episode.support_per_class = j.at("episode_support");
  m.episode.query_per_class = j.at("episode_query");
  m.episodes_per_batch = j.at("episodes_per_batch");
  m.proxy_scale = j.at("proxy_scale");
  m.proxy_trainable = j.at("proxy_trainable");
  m.softmax_temperature = j.at("softmax_temperature");
  m.proxy_include_positive = j.at("proxy_include_positive");
  m.batch_classes = j.at("batch_classes");
  m.per_class = j.at("per_class");
  m.ensemble_size = j.at("ensemble_size");
  m.ensemble_base = loss_from_name(j.at("ensemble_base"));
  return m;
}

}  // namespace

std::string serialize_checkpoint(const TrainState& state) {
  json j;
  j["format_version"] = 1;
  j["encoder"] = {{"kind", static_cast<int>(state.encoder.kind)},
                  {"input_dim", state.encoder.input_dim},
                  {"hidden_dims", state.encoder.hidden_dims},
                  {"output_dim", state.encoder.output_dim},
                  {"normalize_output", state.encoder.normalize_output},
                  {"seed", state.encoder.seed}};
  j["method"] = method_to_json(state.method);
  j["optimizer"] = {{"kind", static_cast<int>(state.optimizer.kind)},
                    {"learning_rate", state.optimizer.learning_rate},
                    {"beta1", state.optimizer.beta1},
                    {"beta2", state.optimizer.beta2},
                    {"epsilon", state.optimizer.epsilon},
                    {"rmsprop_gamma", state.optimizer.rmsprop_gamma},
                    {"rmsprop_lr_decay", state.optimizer.rmsprop_lr_decay},
                    {"weight_decay", state.optimizer.weight_decay}};
  j["step"] = state.step;
  j["rng_state"] = state.rng.serialize_state();
  j["param_names"] = state.param_names;
  for (const std::string& name : state.param_names) {
    j["params"][name] = matrix_to_json(state.params.at(name));
    j["adam_m"][name] = matrix_to_json(state.adam_m.at(name));
    j["adam_v"][name] = matrix_to_json(state.adam_v.at(name));
  }
  return j.dump(2);
}

TrainState deserialize_checkpoint(const std::string& json_text) {
  json j = json::parse(json_text);
  if (j.at("format_version").get<int>() != 1)
    throw std::runtime_error("checkpoint: unsupported format version");

  TrainState state;
  const json& e = j.at("encoder");
  state.encoder.kind = static_cast<EncoderKind>(e.at("kind").get<int>());
  state.encoder.input_dim = e.at("input_dim");
  state.encoder.hidden_dims = e.at("hidden_dims").get<std::vector<int>>();
  state.encoder.output_dim = e.at("output_dim");
  state.encoder.normalize_output = e.at("normalize_output");
  state.encoder.seed = e.at("seed");
  state.method = method_from_json(j.at("method"));
  const json& o = j.at("optimizer");
  state.optimizer.kind = static_cast<OptimizerKind>(o.at("kind").get<int>());
  state.optimizer.learning_rate = o.at("learning_rate");
  state.optimizer.beta1 = o.at("beta1");
  state.optimizer.beta2 = o.at("beta2");
  state.optimizer.epsilon = o.at("epsilon");
  state.optimizer.rmsprop_gamma = o.at("rmsprop_gamma");
  state.optimizer.rmsprop_lr_decay = o.at("rmsprop_lr_decay");
  state.optimizer.weight_decay = o.at("weight_decay");
  state.step = j.at("step");
  state.rng.restore_state(j.at("rng_state"));
  state.param_names = j.at("param_names").get<std::vector<std::string>>();
  for (const std::string& name : state.param_names) {
    state.params[name] = matrix_from_json(j.at("params").at(name));
    state.adam_m[name] = matrix_from_json(j.at("adam_m").at(name));
    state.adam_v[name] = matrix_from_json(j.at("adam_v").at(name));
  }
  return state;
}

// ---- DREML ensemble ----

namespace {

/// Classes shuffled and grouped into meta-classes for one ensemble
/// member; samples keep their rows, labels collapse to the groups.
Dataset meta_partition(const Dataset& train, int n_meta, SamplerRng& rng) {
  std::vector<int> classes;
  for (const auto& [cls, ids] : train.class_index) classes.push_back(cls);
  rng.shuffle(classes);

  std::map<int, int> to_meta;
  for (size_t i = 0; i < classes.size(); ++i)
    to_meta[classes[i]] = static_cast<int>(i % static_cast<size_t>(n_meta));

  Dataset out;
  out.name = train.name + "/meta";
  out.features = train.features;
  for (int label : train.labels) out.labels.push_back(to_meta.at(label));
  for (size_t i = 0; i < out.labels.size(); ++i)
    out.class_index[out.labels[i]].push_back(static_cast<int>(i));
  for (const auto& [meta, ids] : out.class_index) out.original_labels[meta] = meta;
  out.validate();
  return out;
}

}  // namespace

DremlModel dreml_train(const Dataset& train, const Dataset& test, const EncoderSpec& member_spec,
                       const MethodConfig& method, const OptimizerConfig& opt,
                       const TrainSchedule& schedule, std::uint64_t run_seed) {
  if (method.ensemble_size < 1) throw std::invalid_argument("dreml_train: ensemble_size >= 1");

  DremlModel model;
  const int n_members = method.ensemble_size;

  for (int l = 0; l < n_members; ++l) {
    MethodConfig member_method = method;
    member_method.loss = n_members == 1 ? method.ensemble_base : method.ensemble_base;
    member_method.ensemble_size = 1;

    std::uint64_t member_seed = n_members == 1 ? run_seed : SamplerRng(run_seed).split(l).seed();
    EncoderSpec spec = member_spec;
    spec.seed = member_seed;

    Dataset member_train = train;
    if (n_members > 1) {
      int n_meta = std::max(2, std::min(member_spec.output_dim, train.n_classes()));
      SamplerRng part_rng = SamplerRng(run_seed).split(0xd7e31ULL + static_cast<std::uint64_t>(l));
      member_train = meta_partition(train, n_meta, part_rng);
      // repartition if a meta-class came out single-classed is impossible
      // here: every meta group holds >= 1 class and n_meta >= 2
    }

    TrainState state =
        init_state(spec, member_method, opt, member_train.n_classes(), member_seed);
    RunHistory member_history = train_run(state, member_train, test, schedule);
    if (n_members == 1) model.history = member_history;
    model.members.push_back(std::move(state));
  }

  if (n_members > 1) {
    EmbeddingBatch combined = dreml_embed(model, test);
    RunHistory::Entry final_entry{model.members.front().step,
                                  evaluate(combined, schedule.recall_ks)};
    model.history.entries.push_back(final_entry);
  }
  return model;
}

EmbeddingBatch dreml_embed(const DremlModel& model, const Dataset& ds) {
  if (model.members.empty()) throw std::invalid_argument("dreml_embed: empty ensemble");
  Eigen::Index total_dim = 0;
  for (const TrainState& s : model.members) total_dim += s.encoder.output_dim;

  EmbeddingBatch out;
  out.labels = ds.labels;
  out.vectors.resize(ds.size(), total_dim);
  Eigen::Index col = 0;
  for (const TrainState& s : model.members) {
    EmbeddingBatch part = embed_dataset(s, ds);
    part = l2_normalize(part);  // members contribute on equal scale
    out.vectors.middleCols(col, s.encoder.output_dim) = part.vectors;
    col += s.encoder.output_dim;
  }
  return out;
}

}  // namespace dml

#pragma once

#include "dml/clustering_eval.hpp"
#include "dml/core.hpp"
#include "dml/data.hpp"
#include "dml/losses.hpp"
#include "dml/sampling.hpp"

#include <optional>
#include <string>

namespace dml {

enum class EncoderKind { Identity, Linear, Mlp };

struct EncoderSpec {
  EncoderKind kind = EncoderKind::Linear;
  int input_dim = 32;
  std::vector<int> hidden_dims;  // mlp only
  int output_dim = 64;
  bool normalize_output = false;  // applied at evaluation time
  std::uint64_t seed = 0;
  void validate() const;
};

enum class OptimizerKind { Adam, Rmsprop };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  double rmsprop_gamma = 0.9;
  double rmsprop_lr_decay = 1.0;  // per-step exponential learning-rate factor
  double weight_decay = 0.0;
  void validate() const;
};

enum class LossKind {
  TripletSemihard,
  Lifted,
  NPairs,
  Angular,
  Margin,
  RankedList,
  StructClust,
  Proto,
  ProxyTriplet,
  ProxyNca,
  ProxySoftmax,
  Dreml,
};

const char* loss_name(LossKind kind);
LossKind loss_from_name(const std::string& name);  // throws on unknown name
/// Last-layer normalization default per method.
bool default_normalize_eval(LossKind kind);

/// Loss + sampler hyperparameters for one training method.
struct MethodConfig {
  LossKind loss = LossKind::NPairs;

  double triplet_margin = 0.2;
  double lifted_margin = 1.0;
  double npairs_l2_reg = 1e-3;
  bool npairs_reversed = false;
  AngularParams angular;
  double margin_alpha = 0.2;
  double beta_init = 1.2;
  bool trainable_beta = true;
  RankedListParams ranked_list;
  StructClustParams struct_clust;
  EpisodeSpec episode;
  int episodes_per_batch = 1;
  double proxy_scale = 3.0;
  bool proxy_trainable = true;
  double softmax_temperature = 0.05;
  bool proxy_include_positive = false;

  // batch composition (class-balanced unless the loss dictates a shape)
  int batch_classes = 30;
  int per_class = 4;

  // dreml wrapper
  int ensemble_size = 4;   // L
  LossKind ensemble_base = LossKind::ProxyNca;

  int batch_size() const;
  void validate(int available_train_classes) const;
};

struct TrainSchedule {
  int steps = 500;
  int eval_every = 100;
  std::vector<int> recall_ks = {1, 2, 4, 8, 16};
};

struct TrainState {
  EncoderSpec encoder;
  MethodConfig method;
  OptimizerConfig optimizer;

  std::vector<std::string> param_names;  // stable update order
  std::map<std::string, Matrix> params;
  std::map<std::string, Matrix> adam_m, adam_v;  // rmsprop reuses adam_v as cache
  long step = 0;
  SamplerRng rng{0};

  std::optional<ProxyBank> proxy_bank() const;  // view assembled from params
};

TrainState init_state(const EncoderSpec& spec, const MethodConfig& method,
                      const OptimizerConfig& opt, int n_train_classes,
                      std::uint64_t run_seed);

/// Encoder forward pass on raw features.
Matrix encode(const TrainState& state, const Matrix& features);

/// One optimizer update on an explicit raw batch. When `plan` is null
/// the method's default within-batch plan is built (mining, all-pairs,
/// distance-weighted pairs) from the current embeddings.
double train_step(TrainState& state, const Matrix& features, const std::vector<int>& labels,
                  const BatchPlan* plan = nullptr);

/// Averages gradients over several sub-batches before a single update;
/// equals one step on the concatenation for batch-mean losses.
double train_step_aggregate(TrainState& state,
                            const std::vector<std::pair<Matrix, std::vector<int>>>& sub_batches);

/// Encoded (and, per config, normalized) embeddings of a dataset.
EmbeddingBatch embed_dataset(const TrainState& state, const Dataset& ds);

/// Retrieval + clustering evaluation on held-out data: exact self-query
/// Recall@K plus NMI of greedy facility-location clustering.
EvalReport evaluate(const EmbeddingBatch& embeddings, const std::vector<int>& recall_ks);

struct RunHistory {
  struct Entry {
    long step;
    EvalReport report;
  };
  std::vector<Entry> entries;
};

RunHistory train_run(TrainState& state, const Dataset& train, const Dataset& test,
                     const TrainSchedule& schedule);

/// Sign threshold at 0: bit = 1 iff coordinate > 0.
BinaryCodes binarize(const EmbeddingBatch& batch);

// Checkpointing: JSON container with every TrainState field; a restored
// state continues the training trajectory bit-identically.
std::string serialize_checkpoint(const TrainState& state);
TrainState deserialize_checkpoint(const std::string& json_text);

struct DremlModel {
  std::vector<TrainState> members;
  RunHistory history;  // evaluation of the concatenated embedding
};

DremlModel dreml_train(const Dataset& train, const Dataset& test, const EncoderSpec& member_spec,
                       const MethodConfig& method, const OptimizerConfig& opt,
                       const TrainSchedule& schedule, std::uint64_t run_seed);

EmbeddingBatch dreml_embed(const DremlModel& model, const Dataset& ds);

}  // namespace dml

#pragma once

#include "dml/trainer.hpp"

#include <string>
#include <vector>

namespace dml {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Random batch with roughly balanced random labels; rows are unit
/// Gaussian draws.
EmbeddingBatch random_batch(std::uint64_t seed, int n, int d, int n_classes);

struct LossFixture {
  EmbeddingBatch batch;
  LossEvaluator evaluator;
};

/// Batch of the right shape plus an evaluator with fixed
/// hyperparameters for the given loss; trainable parameters (proxies,
/// beta) are exposed through the evaluator.
LossFixture make_loss_fixture(LossKind kind, std::uint64_t seed, int n_hint, int d);

/// The 11 single-model losses (everything except the dreml wrapper).
std::vector<LossKind> single_model_losses();

/// Chi-square goodness-of-fit p-value for observed counts against
/// expected probabilities.
double chi_square_p_value(const std::vector<long>& observed,
                          const std::vector<double>& probabilities);

/// Runs the oracle/gradient/invariant suite. `only` filters checks by
/// substring; empty runs everything.
std::vector<CheckResult> run_verification(const std::string& only = "");

}  // namespace dml

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miw/autodiff.hpp"
#include "miw/dataset.hpp"
#include "miw/optim.hpp"

namespace miw {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool weight_matrix = false;  // L2 applies to weight matrices, never biases
};

struct TrainConfig {
  std::size_t batch_size = 128;
  std::size_t max_epochs = 250;
  std::size_t patience = 10;
  double learning_rate = 1e-4;
  double l2_coeff = 0.0;
  double dropout_rate = 0.0;
  double validation_fraction = 0.1;
  double clip_norm = 0.0;  // global-norm gradient clip; 0 disables
  std::uint64_t seed = 42;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;     // epoch whose weights were kept
  std::size_t stopped_epoch = 0;  // last epoch that ran
  double best_val_loss = 0.0;
  bool aborted = false;
  std::string abort_reason;
};

// Graph-building interface the mini-batch trainer drives. Implementations
// own their parameters; forward() consumes the leaf Values the trainer
// created for them (same order as parameters()).
class NeuralNet {
 public:
  virtual ~NeuralNet() = default;
  virtual std::vector<NamedTensor>& parameters() = 0;
  virtual const std::vector<NamedTensor>& parameters() const = 0;
  // x: [B, n_features] flattened epochs; returns class probabilities [B, k].
  virtual Value forward(Tape& tape, const std::vector<Value>& params, const Tensor& x,
                        Mode mode, double dropout_rate, Rng& rng) = 0;
  virtual int n_classes() const { return kNumClasses; }
};

// Mini-batch Adam on cross-entropy plus L2, with a seeded stratified
// validation holdout and early stopping. Weights from the best validation
// epoch are restored before returning. Training stops once the count of
// consecutive epochs without improvement exceeds `patience`. A non-finite
// loss or gradient aborts training with the best checkpoint restored.
TrainResult train(NeuralNet& net, const FeatureMatrix& data, const TrainConfig& cfg);

// L2 penalty term: coeff * sum of squares over the given weight values.
Value l2_penalty(Tape& tape, const std::vector<Value>& weights, double coeff);

// Eval-mode class probabilities, batched; rows align with data rows.
std::vector<double> predict_probabilities(NeuralNet& net, const FeatureMatrix& data,
                                          std::size_t batch_size = 128);

double accuracy_of(const std::vector<double>& probs, const std::vector<int>& labels,
                   int n_classes);

}  // namespace miw

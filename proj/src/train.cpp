#include "miw/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "miw/preprocess.hpp"

namespace miw {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train: patience must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
  if (l2_coeff < 0.0) throw ConfigError("train: l2 coefficient must be >= 0");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw ConfigError("train: dropout rate must be in [0,1)");
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
    throw ConfigError("train: validation fraction must be in (0,1)");
  if (clip_norm < 0.0) throw ConfigError("train: clip norm must be >= 0");
}

Value l2_penalty(Tape& tape, const std::vector<Value>& weights, double coeff) {
  if (coeff < 0.0) throw ConfigError("l2_penalty: coefficient must be >= 0");
  Value total = tape.leaf(Tensor::scalar(0.0));
  for (Value w : weights) total = tape.add(total, tape.scale(tape.sumsq(w), coeff));
  return total;
}

namespace {

struct EvalStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

EvalStats evaluate(NeuralNet& net, const FeatureMatrix& data, std::size_t batch_size,
                   Rng& rng) {
  EvalStats stats;
  const int k = net.n_classes();
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.n_rows(); start += batch_size) {
    const std::size_t stop = std::min(data.n_rows(), start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor x = data.batch_tensor(idx);
    std::vector<int> labels(data.y.begin() + start, data.y.begin() + stop);

    Tape tape;
    std::vector<Value> params;
    for (NamedTensor& p : net.parameters()) params.push_back(tape.leaf(p.tensor));
    Value probs = net.forward(tape, params, x, Mode::kEval, 0.0, rng);
    const Tensor& pt = tape.val(probs);
    for (std::size_t r = 0; r < labels.size(); ++r) {
      const double* row = pt.data() + r * k;
      if (argmax_row(row, k) == labels[r]) ++correct;
      loss_sum -= std::log(std::max(row[labels[r]], Tape::kProbFloor));
    }
  }
  stats.loss = loss_sum / static_cast<double>(data.n_rows());
  stats.accuracy = static_cast<double>(correct) / static_cast<double>(data.n_rows());
  return stats;
}

std::vector<Tensor> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<Tensor> copy;
  copy.reserve(params.size());
  for (const NamedTensor& p : params) copy.push_back(p.tensor);
  return copy;
}

void restore(std::vector<NamedTensor>& params, const std::vector<Tensor>& saved) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor = saved[i];
}

}  // namespace

TrainResult train(NeuralNet& net, const FeatureMatrix& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.n_rows() == 0) throw DataError("train: empty dataset");

  for (int c = 0; c < net.n_classes(); ++c)
    if (std::none_of(data.y.begin(), data.y.end(), [c](int y) { return y == c; }))
      throw StratificationError("train: class " + std::to_string(c) +
                                " missing from training data");

  SplitResult split = split_train_test(data, cfg.validation_fraction,
                                       derive_seed(cfg.seed, "validation-split"),
                                       /*stratified=*/true);
  const FeatureMatrix& train_data = split.train;
  const FeatureMatrix& val_data = split.test;
  if (train_data.n_rows() == 0 || val_data.n_rows() == 0)
    throw DataError("train: validation split left an empty side");

  std::vector<NamedTensor>& params = net.parameters();
  std::vector<Tensor> initial;
  for (const NamedTensor& p : params) initial.push_back(p.tensor);
  AdamState adam(AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8}, initial);
  initial.clear();

  Rng shuffle_rng(cfg.seed, "batch-shuffle");
  Rng dropout_rng(cfg.seed, "dropout");
  Rng eval_rng(cfg.seed, "eval");  // eval path draws nothing; kept for symmetry

  TrainResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_params = snapshot(params);
  std::size_t bad_epochs = 0;
  const int k = net.n_classes();

  std::vector<std::size_t> order(train_data.n_rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    result.stopped_epoch = epoch;
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    std::size_t correct = 0;
    bool failed = false;
    for (std::size_t start = 0; start < order.size() && !failed;
         start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      Tensor x = train_data.batch_tensor(idx);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(train_data.y[i]);

      Tape tape;
      std::vector<Value> leaves;
      std::vector<Value> weight_leaves;
      for (NamedTensor& p : params) {
        Value v = tape.leaf(p.tensor, /*requires_grad=*/true);
        leaves.push_back(v);
        if (p.weight_matrix) weight_leaves.push_back(v);
      }
      Value probs =
          net.forward(tape, leaves, x, Mode::kTrain, cfg.dropout_rate, dropout_rng);
      Value loss = tape.cross_entropy(probs, labels, k);
      if (cfg.l2_coeff > 0.0)
        loss = tape.add(loss, l2_penalty(tape, weight_leaves, cfg.l2_coeff));

      const double batch_loss = tape.val(loss)[0];
      if (!std::isfinite(batch_loss)) {
        result.aborted = true;
        result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch);
        failed = true;
        break;
      }
      loss_sum += batch_loss * static_cast<double>(idx.size());
      const Tensor& pt = tape.val(probs);
      for (std::size_t r = 0; r < labels.size(); ++r)
        if (argmax_row(pt.data() + r * k, k) == labels[r]) ++correct;

      tape.backward(loss);
      std::vector<Tensor> grads;
      grads.reserve(leaves.size());
      for (Value v : leaves) grads.push_back(tape.grad_of(v));
      if (cfg.clip_norm > 0.0) clip_global_norm(grads, cfg.clip_norm);

      std::vector<Tensor*> targets;
      targets.reserve(params.size());
      for (NamedTensor& p : params) targets.push_back(&p.tensor);
      try {
        adam.step(targets, grads);
      } catch (const TrainingError& e) {
        result.aborted = true;
        result.abort_reason = e.what();
        failed = true;
      }
    }
    if (failed) break;

    EvalStats val = evaluate(net, val_data, cfg.batch_size, eval_rng);
    EpochStats row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_data.n_rows());
    row.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(train_data.n_rows());
    row.val_loss = val.loss;
    row.val_accuracy = val.accuracy;
    result.history.push_back(row);

    if (val.loss < result.best_val_loss) {
      result.best_val_loss = val.loss;
      result.best_epoch = epoch;
      best_params = snapshot(params);
      bad_epochs = 0;
    } else {
      ++bad_epochs;
      if (bad_epochs > cfg.patience) break;
    }
  }

  restore(params, best_params);
  return result;
}

std::vector<double> predict_probabilities(NeuralNet& net, const FeatureMatrix& data,
                                          std::size_t batch_size) {
  const int k = net.n_classes();
  std::vector<double> out;
  out.reserve(data.n_rows() * static_cast<std::size_t>(k));
  Rng rng(0, "predict");  // unused in eval mode
  for (std::size_t start = 0; start < data.n_rows(); start += batch_size) {
    const std::size_t stop = std::min(data.n_rows(), start + batch_size);
    std::vector<std::size_t> idx(stop - start);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor x = data.batch_tensor(idx);
    Tape tape;
    std::vector<Value> params;
    for (NamedTensor& p : net.parameters()) params.push_back(tape.leaf(p.tensor));
    Value probs = net.forward(tape, params, x, Mode::kEval, 0.0, rng);
    const Tensor& pt = tape.val(probs);
    out.insert(out.end(), pt.data(), pt.data() + pt.numel());
  }
  return out;
}

double accuracy_of(const std::vector<double>& probs, const std::vector<int>& labels,
                   int n_classes) {
  if (labels.empty()) throw DataError("accuracy: empty label set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (argmax_row(probs.data() + i * static_cast<std::size_t>(n_classes), n_classes) ==
        labels[i])
      ++correct;
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace miw

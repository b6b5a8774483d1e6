#include "calikd/nn_engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "calikd/losses.hpp"

namespace calikd {
namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

// out = a * w + bias, row by row. Zero inputs (dead ReLUs) are skipped.
void affine(const Matrix& a, const Matrix& w, const std::vector<double>& bias, Matrix& out) {
  const std::size_t n_out = w.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.row(i).data();
    std::copy(bias.begin(), bias.end(), o);
    auto in = a.row(i);
    for (std::size_t k = 0; k < in.size(); ++k) {
      const double x = in[k];
      if (x == 0.0) continue;
      const double* wr = w.row(k).data();
      for (std::size_t j = 0; j < n_out; ++j) o[j] += x * wr[j];
    }
  }
}

void relu_inplace(Matrix& m) {
  for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
}

void transpose_into(const Matrix& m, Matrix& out) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  }
}

// Per-batch scratch space reused across steps.
struct Workspace {
  std::vector<Matrix> activations;  // activations[0] = input, activations[l] = layer l output
  std::vector<Matrix> transposed;   // W^T per layer, for input gradients
  Matrix delta;
  Matrix delta_prev;
};

void run_forward(const MlpModel& model, const Matrix& features, Workspace& ws) {
  const std::size_t layers = model.weights.size();
  ws.activations.resize(layers + 1);
  ws.activations[0] = features;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix& out = ws.activations[l + 1];
    if (out.rows() != features.rows() || out.cols() != model.layer_dims[l + 1]) {
      out = Matrix(features.rows(), model.layer_dims[l + 1]);
    }
    affine(ws.activations[l], model.weights[l], model.biases[l], out);
    if (l + 1 < layers) relu_inplace(out);
  }
}

// Accumulates parameter gradients given dL/dlogits in `grad_logits`.
void run_backward(const MlpModel& model, const Matrix& grad_logits, Workspace& ws,
                  Gradients& grads) {
  const std::size_t layers = model.weights.size();
  ws.delta = grad_logits;
  for (std::size_t li = layers; li-- > 0;) {
    const Matrix& a = ws.activations[li];
    Matrix& dw = grads.weights[li];
    auto& db = grads.biases[li];
    const std::size_t n_out = dw.cols();
    std::fill(dw.data().begin(), dw.data().end(), 0.0);
    std::fill(db.begin(), db.end(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      const double* d = ws.delta.row(i).data();
      for (std::size_t j = 0; j < n_out; ++j) db[j] += d[j];
      auto in = a.row(i);
      for (std::size_t k = 0; k < in.size(); ++k) {
        const double x = in[k];
        if (x == 0.0) continue;
        double* g = dw.row(k).data();
        for (std::size_t j = 0; j < n_out; ++j) g[j] += x * d[j];
      }
    }
    if (li == 0) break;
    // delta_prev = (delta * W^T) masked by the ReLU of layer li's input.
    Matrix& wt = ws.transposed[li];
    if (wt.rows() != model.weights[li].cols() || wt.cols() != model.weights[li].rows()) {
      wt = Matrix(model.weights[li].cols(), model.weights[li].rows());
    }
    transpose_into(model.weights[li], wt);
    const std::size_t n_in = wt.cols();
    if (ws.delta_prev.rows() != a.rows() || ws.delta_prev.cols() != n_in) {
      ws.delta_prev = Matrix(a.rows(), n_in);
    }
    for (std::size_t i = 0; i < a.rows(); ++i) {
      double* out = ws.delta_prev.row(i).data();
      std::fill(out, out + n_in, 0.0);
      const double* d = ws.delta.row(i).data();
      for (std::size_t j = 0; j < n_out; ++j) {
        const double dj = d[j];
        if (dj == 0.0) continue;
        const double* wr = wt.row(j).data();
        for (std::size_t k = 0; k < n_in; ++k) out[k] += dj * wr[k];
      }
      const double* act = a.row(i).data();
      for (std::size_t k = 0; k < n_in; ++k) {
        if (!(act[k] > 0.0)) out[k] = 0.0;
      }
    }
    std::swap(ws.delta, ws.delta_prev);
  }
}

// Adds 0.5 * wd * ||theta||^2 to the loss and wd * theta to the gradients.
double add_weight_decay(const MlpModel& model, double wd, Gradients& grads) {
  if (wd == 0.0) return 0.0;
  double sq = 0.0;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    auto w = model.weights[l].data();
    auto g = grads.weights[l].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      sq += w[i] * w[i];
      g[i] += wd * w[i];
    }
    const auto& b = model.biases[l];
    auto& gb = grads.biases[l];
    for (std::size_t i = 0; i < b.size(); ++i) {
      sq += b[i] * b[i];
      gb[i] += wd * b[i];
    }
  }
  return 0.5 * wd * sq;
}

bool gradients_finite(const Gradients& g) {
  for (const auto& w : g.weights) {
    if (!w.all_finite()) return false;
  }
  for (const auto& b : g.biases) {
    for (double v : b) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

void check_features(const MlpModel& model, const Matrix& features) {
  if (features.cols() != model.input_dim()) {
    throw Error(ErrorKind::ShapeError, "feature dimension " + std::to_string(features.cols()) +
                                           " does not match model input " +
                                           std::to_string(model.input_dim()));
  }
}

LogitLoss batch_loss(const Matrix& logits, std::span<const std::size_t> batch_rows,
                     const Dataset& data, const TrainObjective& objective,
                     const Matrix* mixed_targets) {
  if (mixed_targets != nullptr) return soft_ce_loss(logits, *mixed_targets);
  return std::visit(
      overloaded{
          [&](const HardLabelObjective&) {
            std::vector<std::size_t> y;
            y.reserve(batch_rows.size());
            for (auto r : batch_rows) y.push_back(data.labels[r]);
            return hard_ce_loss(logits, y);
          },
          [&](const SoftTargetObjective& o) {
            return soft_ce_loss(logits, o.targets.gather_rows(batch_rows));
          },
          [&](const DistillObjective& o) {
            std::vector<std::size_t> y;
            y.reserve(batch_rows.size());
            for (auto r : batch_rows) y.push_back(data.labels[r]);
            return kd_composite_loss(logits, o.teacher_probs.gather_rows(batch_rows), y, o.lambda,
                                     o.t_kd, o.scale_kd_by_t_squared);
          },
      },
      objective);
}

}  // namespace

std::size_t MlpModel::num_parameters() const {
  std::size_t total = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) total += weights[l].size() + biases[l].size();
  return total;
}

void MlpModel::validate() const {
  if (layer_dims.size() < 2) throw Error(ErrorKind::InvalidConfig, "model needs at least two layer dims");
  if (layer_dims.back() < 2) throw Error(ErrorKind::InvalidConfig, "model needs K >= 2 outputs");
  if (weights.size() + 1 != layer_dims.size() || biases.size() != weights.size()) {
    throw Error(ErrorKind::InvalidConfig, "layer count does not match layer_dims");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (layer_dims[l] == 0 || weights[l].rows() != layer_dims[l] ||
        weights[l].cols() != layer_dims[l + 1] || biases[l].size() != layer_dims[l + 1]) {
      throw Error(ErrorKind::InvalidConfig, "layer " + std::to_string(l) + " shape mismatch");
    }
    if (!weights[l].all_finite() ||
        !std::all_of(biases[l].begin(), biases[l].end(), [](double v) { return std::isfinite(v); })) {
      throw Error(ErrorKind::InvalidConfig, "layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
}

Gradients Gradients::zeros_like(const MlpModel& model) {
  Gradients g;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    g.weights.emplace_back(model.weights[l].rows(), model.weights[l].cols());
    g.biases.emplace_back(model.biases[l].size(), 0.0);
  }
  return g;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch_size must be positive");
  if (!(lr0 > 0.0) || !std::isfinite(lr0)) throw Error(ErrorKind::InvalidConfig, "lr0 must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error(ErrorKind::InvalidConfig, "momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw Error(ErrorKind::InvalidConfig, "weight_decay must be >= 0");
  if (!(lr_decay_factor > 0.0)) throw Error(ErrorKind::InvalidConfig, "lr_decay_factor must be positive");
  if (!(mixup_alpha >= 0.0)) throw Error(ErrorKind::InvalidConfig, "mixup_alpha must be >= 0");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (lr_decay_epochs[i] >= epochs || (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1])) {
      throw Error(ErrorKind::InvalidConfig,
                  "lr_decay_epochs must be strictly increasing and below epochs");
    }
  }
}

double TrainConfig::learning_rate(std::size_t epoch) const {
  double lr = lr0;
  for (auto e : lr_decay_epochs) {
    if (epoch >= e) lr *= lr_decay_factor;
  }
  return lr;
}

std::string_view to_string(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "unknown";
}

std::size_t Dataset::num_classes() const {
  std::size_t k = 2;
  for (auto v : labels.values()) k = std::max(k, v + 1);
  return k;
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

Matrix Dataset::features_of(Split split) const { return features.gather_rows(indices(split)); }

LabelVec Dataset::labels_of(Split split) const { return labels.gather(indices(split)); }

void Dataset::validate(std::size_t num_classes) const {
  labels.check_against(features.rows(), num_classes);
  if (splits.size() != features.rows()) {
    throw Error(ErrorKind::ShapeError, "every dataset row needs exactly one split tag");
  }
  if (!clean_labels.empty() && clean_labels.size() != features.rows()) {
    throw Error(ErrorKind::ShapeError, "clean label count does not match dataset rows");
  }
}

MlpModel init_model(const std::vector<std::size_t>& layer_dims, std::uint64_t seed) {
  if (layer_dims.size() < 2) throw Error(ErrorKind::InvalidConfig, "model needs at least two layer dims");
  MlpModel model;
  model.layer_dims = layer_dims;
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const std::size_t fan_in = layer_dims[l];
    if (fan_in == 0 || layer_dims[l + 1] == 0) throw Error(ErrorKind::InvalidConfig, "zero layer width");
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Matrix w(fan_in, layer_dims[l + 1]);
    for (double& v : w.data()) v = dist(rng);
    model.weights.push_back(std::move(w));
    model.biases.emplace_back(layer_dims[l + 1], 0.0);
  }
  model.validate();
  return model;
}

LogitMatrix forward(const MlpModel& model, const Matrix& features) {
  check_features(model, features);
  Workspace ws;
  run_forward(model, features, ws);
  return LogitMatrix(std::move(ws.activations.back()));
}

LossAndGrads loss_and_grads(const MlpModel& model, const Matrix& features, const LabelVec& labels,
                            const LossSpec& spec, double weight_decay) {
  check_features(model, features);
  Workspace ws;
  ws.transposed.resize(model.weights.size());
  run_forward(model, features, ws);
  const Matrix& logits = ws.activations.back();
  if (!logits.all_finite()) throw Error(ErrorKind::NumericalError, "non-finite logits in forward pass");
  labels.check_against(features.rows(), model.num_classes());

  LogitLoss ll = std::visit(
      overloaded{
          [&](const HardCE&) { return hard_ce_loss(logits, labels.values()); },
          [&](const SoftCE& s) { return soft_ce_loss(logits, s.targets.values()); },
          [&](const KdComposite& kd) {
            kd.cfg.validate();
            if (kd.teacher_logits.n() != logits.rows() || kd.teacher_logits.k() != logits.cols()) {
              throw Error(ErrorKind::ShapeError, "teacher logits shape does not match the batch");
            }
            const auto p = tempered_softmax(kd.teacher_logits, Temperature{kd.cfg.t_cal * kd.cfg.t_kd});
            return kd_composite_loss(logits, p.values(), labels.values(), kd.cfg.lambda, kd.cfg.t_kd,
                                     kd.cfg.scale_kd_by_t_squared);
          },
      },
      spec);

  LossAndGrads out{ll.loss, Gradients::zeros_like(model)};
  run_backward(model, ll.grad, ws, out.grads);
  out.loss += add_weight_decay(model, weight_decay, out.grads);
  if (!std::isfinite(out.loss)) throw Error(ErrorKind::NumericalError, "non-finite loss");
  return out;
}

Matrix one_hot(std::span<const std::size_t> labels, std::size_t k) {
  Matrix out(labels.size(), k);
  for (std::size_t i = 0; i < labels.size(); ++i) out(i, labels[i]) = 1.0;
  return out;
}

MixupResult mixup_combine(const Matrix& features, const Matrix& soft_labels, double lam,
                          std::span<const std::size_t> partners) {
  if (features.rows() != soft_labels.rows() || partners.size() != features.rows()) {
    throw Error(ErrorKind::ShapeError, "mixup inputs disagree on batch size");
  }
  MixupResult out{Matrix(features.rows(), features.cols()),
                  Matrix(soft_labels.rows(), soft_labels.cols())};
  const double other = 1.0 - lam;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const std::size_t p = partners[i];
    for (std::size_t j = 0; j < features.cols(); ++j) {
      out.features(i, j) = lam * features(i, j) + other * features(p, j);
    }
    for (std::size_t j = 0; j < soft_labels.cols(); ++j) {
      out.soft_labels(i, j) = lam * soft_labels(i, j) + other * soft_labels(p, j);
    }
  }
  return out;
}

MixupResult mixup_batch(const Matrix& features, const Matrix& labels_onehot, double alpha,
                        std::mt19937_64& rng) {
  if (!(alpha > 0.0)) throw Error(ErrorKind::InvalidConfig, "mixup alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double x = gamma(rng);
  const double y = gamma(rng);
  const double lam = (x + y) > 0.0 ? x / (x + y) : 0.5;
  std::uniform_int_distribution<std::size_t> pick(0, features.rows() - 1);
  std::vector<std::size_t> partners(features.rows());
  for (auto& p : partners) p = pick(rng);
  return mixup_combine(features, labels_onehot, lam, partners);
}

TrainResult train(const MlpModel& init, const Dataset& data, const TrainConfig& config,
                  const TrainObjective& objective) {
  init.validate();
  config.validate();
  data.validate(init.num_classes());
  check_features(init, data.features);
  const bool mixup = config.mixup_alpha > 0.0;
  std::visit(overloaded{
                 [](const HardLabelObjective&) {},
                 [&](const SoftTargetObjective& o) {
                   if (o.targets.rows() != data.size() || o.targets.cols() != init.num_classes()) {
                     throw Error(ErrorKind::ShapeError, "soft targets must cover every dataset row");
                   }
                 },
                 [&](const DistillObjective& o) {
                   if (o.teacher_probs.rows() != data.size() ||
                       o.teacher_probs.cols() != init.num_classes()) {
                     throw Error(ErrorKind::ShapeError, "teacher probabilities must cover every dataset row");
                   }
                   if (mixup) throw Error(ErrorKind::InvalidConfig, "mixup is a teacher-training option");
                 },
             },
             objective);

  TrainResult result{init, {}};
  if (config.epochs == 0) return result;

  auto order = data.indices(Split::Train);
  if (order.empty()) throw Error(ErrorKind::InvalidConfig, "dataset has no training rows");
  const auto val_rows = data.indices(Split::Val);
  const Matrix val_features = data.features.gather_rows(val_rows);
  const LabelVec val_labels = data.labels.gather(val_rows);

  MlpModel& model = result.model;
  Gradients grads = Gradients::zeros_like(model);
  Gradients velocity = Gradients::zeros_like(model);
  Workspace ws;
  ws.transposed.resize(model.weights.size());
  std::mt19937_64 rng(config.seed);
  const std::size_t k = model.num_classes();

  // Start-of-epoch snapshot, returned on abort if the live parameters went non-finite.
  MlpModel checkpoint = model;
  auto fail = [&](const std::string& what) {
    bool finite = true;
    try {
      model.validate();
    } catch (const Error&) {
      finite = false;
    }
    throw TrainingAborted(what, finite ? model : checkpoint, result.log);
  };

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.learning_rate(epoch);
    checkpoint = model;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      std::span<const std::size_t> rows(order.data() + start, stop - start);
      Matrix batch = data.features.gather_rows(rows);

      std::optional<Matrix> mixed_targets;
      if (mixup) {
        Matrix targets;
        if (const auto* soft = std::get_if<SoftTargetObjective>(&objective)) {
          targets = soft->targets.gather_rows(rows);
        } else {
          std::vector<std::size_t> y;
          for (auto r : rows) y.push_back(data.labels[r]);
          targets = one_hot(y, k);
        }
        auto mixed = mixup_batch(batch, targets, config.mixup_alpha, rng);
        batch = std::move(mixed.features);
        mixed_targets = std::move(mixed.soft_labels);
      }

      run_forward(model, batch, ws);
      const Matrix& logits = ws.activations.back();
      if (!logits.all_finite()) {
        fail("non-finite logits at epoch " + std::to_string(epoch));
      }
      LogitLoss ll = batch_loss(logits, rows, data, objective,
                                mixed_targets ? &*mixed_targets : nullptr);
      run_backward(model, ll.grad, ws, grads);
      const double loss = ll.loss + add_weight_decay(model, config.weight_decay, grads);
      if (!std::isfinite(loss) || !gradients_finite(grads)) {
        fail("non-finite loss at epoch " + std::to_string(epoch));
      }
      epoch_loss += loss * static_cast<double>(rows.size());

      for (std::size_t l = 0; l < model.weights.size(); ++l) {
        auto w = model.weights[l].data();
        auto g = grads.weights[l].data();
        auto v = velocity.weights[l].data();
        for (std::size_t i = 0; i < w.size(); ++i) {
          v[i] = config.momentum * v[i] + g[i];
          w[i] -= lr * v[i];
        }
        auto& b = model.biases[l];
        auto& gb = grads.biases[l];
        auto& vb = velocity.biases[l];
        for (std::size_t i = 0; i < b.size(); ++i) {
          vb[i] = config.momentum * vb[i] + gb[i];
          b[i] -= lr * vb[i];
        }
      }
    }
    result.log.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    if (!val_rows.empty()) {
      run_forward(model, val_features, ws);
      const auto pred = argmax_rows(ws.activations.back());
      std::size_t correct = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == val_labels[i] ? 1 : 0;
      result.log.val_accuracy.push_back(static_cast<double>(correct) /
                                        static_cast<double>(pred.size()));
    }
  }
  return result;
}

}  // namespace calikd

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdhnode/data.hpp"
#include "tdhnode/errors.hpp"
#include "tdhnode/metrics.hpp"
#include "tdhnode/model.hpp"

namespace tdhnode {

/// Optimization settings plus the architecture they train.
struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 1;
  int max_epochs = 200;
  int early_stop_patience = 5;
  double grad_clip = 5.0;
  // Loss weight on positive (onset) entries; 1 is plain BCE.
  double positive_weight = 1.0;
  double threshold = 0.5;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  ModelConfig model;

  void validate() const {
    auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigInvalid, m); };
    if (!(learning_rate >= 0.0)) fail("learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0,1)");
    if (batch_size != 1) fail("only batch_size 1 is supported");
    if (max_epochs < 1) fail("max_epochs must be >= 1");
    if (early_stop_patience < 1) fail("early_stop_patience must be >= 1");
    if (!(grad_clip > 0.0)) fail("grad_clip must be positive");
    if (!(positive_weight > 0.0)) fail("positive_weight must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) fail("threshold must lie in (0,1)");
    if (!(train_fraction > 0.0 && val_fraction > 0.0 && train_fraction + val_fraction < 1.0)) {
      fail("split fractions must be positive and leave room for a test split");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},                 {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},           {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},       {"early_stop_patience", c.early_stop_patience},
       {"grad_clip", c.grad_clip},         {"positive_weight", c.positive_weight},
       {"threshold", c.threshold},         {"seed", c.seed},
       {"train_fraction", c.train_fraction}, {"val_fraction", c.val_fraction},
       {"model", c.model}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.positive_weight = j.value("positive_weight", d.positive_weight);
  c.threshold = j.value("threshold", d.threshold);
  c.seed = j.value("seed", d.seed);
  c.train_fraction = j.value("train_fraction", d.train_fraction);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open train config " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j.get<TrainConfig>();
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::ConfigInvalid, path + ": " + ex.what());
  }
}

/// Mean masked BCE on probabilities clamped to [1e-7, 1 - 1e-7]. Returns 0
/// when nothing is masked in.
template <class T>
double bce_loss(const Matrix<T>& probs, const Matrix<T>& targets, const Matrix<T>& mask) {
  if (probs.rows() != targets.rows() || probs.cols() != targets.cols() || mask.rows() != probs.rows() ||
      mask.cols() != probs.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "bce_loss operands differ in shape");
  }
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    if (mask(i) == T(0)) continue;
    const double p = std::clamp(static_cast<double>(probs(i)), 1e-7, 1.0 - 1e-7);
    const double y = static_cast<double>(targets(i));
    total -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    ++count;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Adam with decoupled weight decay.
template <class T>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(ParameterStore<T>& params) {
    ++steps_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const T c1 = static_cast<T>(1.0 - std::pow(b1, static_cast<double>(steps_)));
    const T c2 = static_cast<T>(1.0 - std::pow(b2, static_cast<double>(steps_)));
    const T lr = static_cast<T>(cfg_.learning_rate);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T eps = static_cast<T>(cfg_.adam_eps);
    for (auto& [name, p] : params) {
      auto [mit, fresh] = m_.try_emplace(name, Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      auto [vit, _] = v_.try_emplace(name, Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      Matrix<T>& m = mit->second;
      Matrix<T>& v = vit->second;
      const Matrix<T> g = p.grad.size() ? p.grad : Matrix<T>::Zero(p.value.rows(), p.value.cols());
      m = static_cast<T>(b1) * m + static_cast<T>(1.0 - b1) * g;
      v = static_cast<T>(b2) * v + static_cast<T>(1.0 - b2) * g.cwiseProduct(g);
      const Matrix<T> update =
          ((m.array() / c1) / ((v.array() / c2).sqrt() + eps)).matrix() + wd * p.value;
      p.value -= lr * update;
    }
  }

  std::uint64_t steps() const { return steps_; }
  std::map<std::string, Matrix<T>>& first_moments() { return m_; }
  std::map<std::string, Matrix<T>>& second_moments() { return v_; }
  const std::map<std::string, Matrix<T>>& first_moments() const { return m_; }
  const std::map<std::string, Matrix<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t s) { steps_ = s; }

 private:
  TrainConfig cfg_;
  std::uint64_t steps_ = 0;
  std::map<std::string, Matrix<T>> m_, v_;
};

/// Stops after `patience` consecutive epochs without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records one epoch's validation loss; true means stop now.
  bool update(double val_loss, int epoch) {
    if (val_loss < best_) {
      best_ = val_loss;
      best_epoch_ = epoch;
      wait_ = 0;
      improved_ = true;
    } else {
      ++wait_;
      improved_ = false;
    }
    return wait_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int wait() const { return wait_; }
  void restore(double best, int best_epoch, int wait) {
    best_ = best;
    best_epoch_ = best_epoch;
    wait_ = wait;
  }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int wait_ = 0;
  bool improved_ = false;
};

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
template <class T>
T clip_grad_norm(ParameterStore<T>& params, T max_norm) {
  const T norm = params.grad_norm();
  if (norm > max_norm) params.scale_grad(max_norm / norm);
  return norm;
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_recall = 0.0;
  double val_f1 = 0.0;
  double seconds = 0.0;
  std::size_t clipped = 0;  // patients whose gradient was clipped
};

/// Per-epoch losses and validation metrics. Wall-clock time is left out
/// unless asked for, so two runs with the same seed give the same bytes.
inline std::string training_log_csv(const std::vector<EpochLog>& history, bool with_seconds = false) {
  std::ostringstream out;
  out.precision(9);
  out << "epoch,train_loss,val_loss,val_recall,val_f1" << (with_seconds ? ",seconds" : "") << "\n";
  for (const auto& e : history) {
    out << e.epoch << "," << e.train_loss << "," << e.val_loss << "," << e.val_recall << "," << e.val_f1;
    if (with_seconds) out << "," << e.seconds;
    out << "\n";
  }
  return out.str();
}

/// Loss and confusion counts of a cohort without gradient recording.
struct CohortEvaluation {
  double loss = 0.0;  // mean over patients with at least one evaluated pair
  ConfusionCounts counts;
  std::size_t patients = 0;
};

template <class T>
CohortEvaluation evaluate_cohort(const Model<T>& model, const std::vector<PatientSequence>& seqs, double threshold) {
  CohortEvaluation out;
  const std::size_t n = model.hypergraph().num_markers();
  double total = 0.0;
  for (const auto& seq : seqs) {
    const OnsetLabels labels = onset_labels(seq, n);
    if (labels.evaluated() == 0) continue;
    const Matrix<T> probs = model.predict(seq);
    Matrix<T> target(probs.rows(), probs.cols()), mask(probs.rows(), probs.cols());
    for (Eigen::Index k = 0; k < probs.rows(); ++k)
      for (Eigen::Index i = 0; i < probs.cols(); ++i) {
        const auto uk = static_cast<std::size_t>(k), ui = static_cast<std::size_t>(i);
        target(k, i) = labels.target_at(uk, ui);
        mask(k, i) = labels.mask_at(uk, ui);
        if (labels.mask_at(uk, ui)) {
          out.counts.add(static_cast<double>(probs(k, i)) >= threshold, labels.target_at(uk, ui) != 0);
        }
      }
    total += bce_loss<T>(probs, target, mask);
    ++out.patients;
  }
  out.loss = out.patients ? total / static_cast<double>(out.patients) : 0.0;
  return out;
}

/// Everything needed to continue a run exactly where it stopped.
template <class T>
struct TrainState {
  int epoch = 0;  // completed epochs
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int wait = 0;
  bool finished = false;
  std::vector<EpochLog> history;
  std::string rng_state;
  std::uint64_t adam_steps = 0;
  std::map<std::string, Matrix<T>> adam_m, adam_v;
  std::map<std::string, Matrix<T>> best_params;
  std::map<std::string, Matrix<T>> current_params;  // live values, which may differ from the best
};

inline nlohmann::json history_to_json(const std::vector<EpochLog>& h) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : h)
    arr.push_back({{"epoch", e.epoch},
                   {"train_loss", e.train_loss},
                   {"val_loss", e.val_loss},
                   {"val_recall", e.val_recall},
                   {"val_f1", e.val_f1},
                   {"seconds", e.seconds},
                   {"clipped", e.clipped}});
  return arr;
}

inline std::vector<EpochLog> history_from_json(const nlohmann::json& arr) {
  std::vector<EpochLog> h;
  for (const auto& j : arr) {
    EpochLog e;
    e.epoch = j.at("epoch").get<int>();
    e.train_loss = j.at("train_loss").get<double>();
    e.val_loss = j.at("val_loss").get<double>();
    e.val_recall = j.at("val_recall").get<double>();
    e.val_f1 = j.at("val_f1").get<double>();
    e.seconds = j.at("seconds").get<double>();
    e.clipped = j.value("clipped", std::size_t{0});
    h.push_back(e);
  }
  return h;
}

/// Per-patient Adam updates, epoch-end validation and early stopping. After
/// `run` returns, the model holds the best-validation parameters.
template <class T>
class Trainer {
 public:
  using EpochCallback = std::function<void(const EpochLog&, const Trainer&)>;

  Trainer(Model<T>& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg), adam_(cfg), stopper_(cfg.early_stop_patience), rng_(cfg.seed) {
    cfg_.validate();
  }

  /// Continue from a saved state; the model takes the state's live values.
  void restore(const TrainState<T>& s) {
    state_ = s;
    for (auto& [name, p] : model_.params()) {
      auto it = s.current_params.find(name);
      if (it == s.current_params.end()) throw Error(ErrorCode::CorruptFile, "training state lacks parameter " + name);
      p.value = it->second;
    }
    stopper_.restore(s.best_val, s.best_epoch, s.wait);
    adam_.set_steps(s.adam_steps);
    adam_.first_moments() = s.adam_m;
    adam_.second_moments() = s.adam_v;
    std::istringstream in(s.rng_state);
    in >> rng_;
  }

  /// State after the last completed epoch, with the current RNG and moments.
  TrainState<T> snapshot() const {
    TrainState<T> s = state_;
    s.best_val = stopper_.best();
    s.best_epoch = stopper_.best_epoch();
    s.wait = stopper_.wait();
    s.adam_steps = adam_.steps();
    s.adam_m = adam_.first_moments();
    s.adam_v = adam_.second_moments();
    s.current_params.clear();
    for (const auto& [name, p] : model_.params()) s.current_params[name] = p.value;
    std::ostringstream out;
    out << rng_;
    s.rng_state = out.str();
    return s;
  }

  const std::vector<EpochLog>& history() const { return state_.history; }
  const TrainConfig& config() const { return cfg_; }
  int best_epoch() const { return stopper_.best_epoch(); }
  double best_val_loss() const { return stopper_.best(); }

  void run(const std::vector<PatientSequence>& train, const std::vector<PatientSequence>& val,
           const EpochCallback& on_epoch = {}) {
    if (train.empty()) throw Error(ErrorCode::EmptyCohort, "training cohort is empty");
    if (val.empty()) throw Error(ErrorCode::EmptyCohort, "validation cohort is empty");
    const std::size_t n = model_.hypergraph().num_markers();
    std::vector<OnsetLabels> labels;
    labels.reserve(train.size());
    for (const auto& s : train) labels.push_back(onset_labels(s, n));
    std::vector<std::size_t> order(train.size());

    while (!state_.finished && state_.epoch < cfg_.max_epochs) {
      const auto start = std::chrono::steady_clock::now();
      const int epoch = state_.epoch + 1;
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng_);
      EpochLog log;
      log.epoch = epoch;
      double total = 0.0;
      std::size_t counted = 0;
      for (std::size_t idx : order) {
        if (labels[idx].evaluated() == 0) continue;
        model_.params().zero_grad();
        ad::Tape<T> tape;
        const DropoutContext drop{&rng_, model_.config().dropout};
        auto [loss, count] =
            model_.patient_loss(tape, train[idx], labels[idx], drop, static_cast<T>(cfg_.positive_weight));
        const double mean = static_cast<double>(loss.scalar()) / static_cast<double>(count);
        if (!std::isfinite(mean)) {
          throw Error(ErrorCode::NonFiniteLoss,
                      "epoch " + std::to_string(epoch) + ", patient " + train[idx].patient_id);
        }
        tape.backward(loss, T(1) / static_cast<T>(count));
        if (clip_grad_norm(model_.params(), static_cast<T>(cfg_.grad_clip)) > static_cast<T>(cfg_.grad_clip)) {
          ++log.clipped;
        }
        adam_.step(model_.params());
        total += mean;
        ++counted;
      }
      log.train_loss = counted ? total / static_cast<double>(counted) : 0.0;
      const CohortEvaluation ev = evaluate_cohort(model_, val, cfg_.threshold);
      log.val_loss = ev.loss;
      if (ev.counts.total() > 0) {
        const MetricsReport rep = MetricsReport::from_counts(ev.counts);
        log.val_recall = rep.recall;
        log.val_f1 = rep.f1;
      }
      log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

      const bool stop = stopper_.update(log.val_loss, epoch);
      if (stopper_.improved()) {
        state_.best_params.clear();
        for (const auto& [name, p] : model_.params()) state_.best_params[name] = p.value;
      }
      state_.epoch = epoch;
      state_.finished = stop;
      state_.history.push_back(log);
      if (on_epoch) on_epoch(log, *this);
    }
    restore_best();
  }

  void restore_best() {
    for (auto& [name, p] : model_.params()) {
      auto it = state_.best_params.find(name);
      if (it != state_.best_params.end()) p.value = it->second;
    }
  }

 private:
  Model<T>& model_;
  TrainConfig cfg_;
  Adam<T> adam_;
  EarlyStopping stopper_;
  std::mt19937_64 rng_;
  TrainState<T> state_;
};

/// Seeded split of [0, n) into train/val/test index lists.
struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

inline SplitIndices split_indices(std::size_t n, std::uint64_t seed, double train_fraction = 0.8,
                                  double val_fraction = 0.1) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed ^ 0x5eed5a1177ULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  SplitIndices s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)));
  const std::size_t v_end = std::min(n, n_train + n_val);
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, n)),
               idx.begin() + static_cast<std::ptrdiff_t>(v_end));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(v_end), idx.end());
  return s;
}

template <class Item>
std::vector<Item> select(const std::vector<Item>& items, const std::vector<std::size_t>& idx) {
  std::vector<Item> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items.at(i));
  return out;
}

}  // namespace tdhnode

#include "dpmpb/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

namespace dpmpb::trainer {

using nlohmann::json;

namespace {
constexpr double kLn2Pi = 1.8378770664093453;
}

std::vector<std::string> Dataset::class_names() const {
  std::vector<std::string> names;
  for (const auto& ep : episodes)
    if (std::find(names.begin(), names.end(), ep.class_name) == names.end())
      names.push_back(ep.class_name);
  return names;
}

int Dataset::total_transitions() const {
  int n = 0;
  for (const auto& ep : episodes) n += std::max(0, ep.length() - 1);
  return n;
}

void Dataset::validate(const model::SignalRegistry& signals) const {
  if (episodes.empty()) throw DataError("dataset: no episodes");
  for (const auto& ep : episodes) {
    if (ep.class_name.empty()) throw DataError("dataset: episode with empty class name");
    if (ep.length() < 2)
      throw DataError("dataset: episode of class '" + ep.class_name +
                      "' has fewer than 2 steps");
    if (ep.u.size() != ep.s.size())
      throw DataError("dataset: episode of class '" + ep.class_name +
                      "' has mismatched s/u lengths");
    for (const auto& v : ep.s)
      if (v.size() != signals.sensor_dim())
        throw DataError("dataset: sensor step dimension mismatch in class '" +
                        ep.class_name + "'");
    for (const auto& v : ep.u)
      if (v.size() != signals.control_dim())
        throw DataError("dataset: control step dimension mismatch in class '" +
                        ep.class_name + "'");
  }
}

namespace {

Eigen::VectorXd block_from_json(const json& obj, const model::SignalRegistry& signals,
                                model::SignalKind kind, const std::string& ctx) {
  const int dim =
      kind == model::SignalKind::kSensor ? signals.sensor_dim() : signals.control_dim();
  Eigen::VectorXd out(dim);
  for (const auto& spec : signals.specs()) {
    if (spec.kind != kind) continue;
    auto it = obj.find(spec.name);
    if (it == obj.end()) throw DataError(ctx + ": missing signal '" + spec.name + "'");
    if (!it->is_array() || static_cast<int>(it->size()) != spec.dim)
      throw DataError(ctx + ": signal '" + spec.name + "' has wrong dimension");
    for (int i = 0; i < spec.dim; ++i)
      out(signals.block_offset(spec.name) + i) = (*it)[i].get<double>();
  }
  return out;
}

json block_to_json(const Eigen::VectorXd& block, const model::SignalRegistry& signals,
                   model::SignalKind kind) {
  json obj;
  for (const auto& spec : signals.specs()) {
    if (spec.kind != kind) continue;
    json arr = json::array();
    for (int i = 0; i < spec.dim; ++i) arr.push_back(block(signals.block_offset(spec.name) + i));
    obj[spec.name] = std::move(arr);
  }
  return obj;
}

}  // namespace

Dataset load_dataset_jsonl(const std::string& path, const model::SignalRegistry& signals) {
  std::ifstream in(path);
  if (!in) throw DataError("dataset: cannot open '" + path + "'");
  Dataset dataset;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("dataset: line " + std::to_string(line_no) + ": " + e.what());
    }
    Episode ep;
    if (!j.contains("class")) throw DataError("dataset: line lacks 'class'");
    ep.class_name = j["class"].get<std::string>();
    if (!j.contains("steps") || !j["steps"].is_array())
      throw DataError("dataset: line lacks 'steps' array");
    const std::string ctx = "dataset line " + std::to_string(line_no);
    for (const auto& step : j["steps"]) {
      ep.s.push_back(block_from_json(step.at("s"), signals, model::SignalKind::kSensor, ctx));
      ep.u.push_back(block_from_json(step.at("u"), signals, model::SignalKind::kControl, ctx));
    }
    dataset.episodes.push_back(std::move(ep));
  }
  dataset.validate(signals);
  return dataset;
}

void save_dataset_jsonl(const Dataset& dataset, const std::string& path,
                        const model::SignalRegistry& signals) {
  std::ofstream out(path);
  if (!out) throw DataError("dataset: cannot open '" + path + "' for writing");
  for (const auto& ep : dataset.episodes) {
    json steps = json::array();
    for (int t = 0; t < ep.length(); ++t)
      steps.push_back(json{{"s", block_to_json(ep.s[t], signals, model::SignalKind::kSensor)},
                           {"u", block_to_json(ep.u[t], signals, model::SignalKind::kControl)}});
    out << json{{"class", ep.class_name}, {"steps", std::move(steps)}}.dump() << "\n";
  }
}

void TrainConfig::validate() const {
  if (n_train_step < 2) throw ConfigError("train config: n_train_step must be >= 2");
  if (n_train_batch < 1) throw ConfigError("train config: n_train_batch must be >= 1");
  if (n_train_epoch < 1) throw ConfigError("train config: n_train_epoch must be >= 1");
  if (!(l_thre > 0.0)) throw ConfigError("train config: l_thre must be > 0");
  if (holdout_fraction < 0.0 || holdout_fraction >= 1.0)
    throw ConfigError("train config: holdout_fraction must be in [0, 1)");
}

TrainerSession::TrainerSession(const Dataset& dataset, const model::SignalRegistry& signals,
                               const ModelSpec& spec, const TrainConfig& cfg,
                               std::vector<std::string> dropped_outputs)
    : dataset_(dataset),
      signals_(signals),
      spec_(spec),
      cfg_(cfg),
      dropped_(std::move(dropped_outputs)),
      rng_(cfg.seed) {
  cfg_.validate();
  dataset_.validate(signals_);
  if (spec_.pb_dim < 1) throw ConfigError("model spec: pb_dim must be >= 1");

  layout_ = model::OutputLayout::build(signals_, dropped_);
  if (layout_.kept_sensors.empty())
    throw ModelUnusableError("trainer: all sensor outputs dropped");
  const bool variance = cfg_.loss_kind == netcore::LossKind::kNll;
  if (variance && !layout_.kept_controls.empty())
    throw ConfigError("trainer: nll training is supported for STM outputs only");
  shape_.input_dim = signals_.sensor_dim() + signals_.control_dim() + spec_.pb_dim;
  shape_.output_dim = variance ? 2 * layout_.dim : layout_.dim;
  shape_.hidden = spec_.hidden;
  shape_.variance_mode = variance;
  shape_.validate();

  // Normalization statistics over the full dataset, fixed before training.
  for (const auto& sig : signals_.specs()) {
    std::vector<Eigen::VectorXd> samples;
    for (const auto& ep : dataset_.episodes) {
      const auto& src = sig.kind == model::SignalKind::kSensor ? ep.s : ep.u;
      const int off = signals_.block_offset(sig.name);
      for (const auto& v : src) samples.push_back(v.segment(off, sig.dim));
    }
    norm_stats_[sig.name] = model::NormStats::fit(samples);
  }
  for (const auto& ep : dataset_.episodes) {
    std::vector<Eigen::VectorXd> sn(ep.length()), un(ep.length());
    for (int t = 0; t < ep.length(); ++t) {
      Eigen::VectorXd s(signals_.sensor_dim()), u(signals_.control_dim());
      for (const auto& sig : signals_.specs()) {
        const int off = signals_.block_offset(sig.name);
        if (sig.kind == model::SignalKind::kSensor)
          s.segment(off, sig.dim) = norm_stats_[sig.name].normalize(ep.s[t].segment(off, sig.dim));
        else
          u.segment(off, sig.dim) = norm_stats_[sig.name].normalize(ep.u[t].segment(off, sig.dim));
      }
      sn[t] = std::move(s);
      un[t] = std::move(u);
    }
    s_norm_.push_back(std::move(sn));
    u_norm_.push_back(std::move(un));
  }

  params_ = netcore::NetworkParams::glorot(shape_, rng_.next_u64());
  w_opt_ = netcore::AdamState::zero(params_.size());
  for (const auto& name : dataset_.class_names()) {
    pb_[name] = Eigen::VectorXd::Zero(spec_.pb_dim);
    pb_opt_[name] = netcore::AdamState::zero(spec_.pb_dim);
  }

  // Non-overlapping tiles of n_train_step transitions per episode; episodes
  // shorter than one window contribute a single reduced window.
  std::vector<Window> windows;
  for (int e = 0; e < static_cast<int>(dataset_.episodes.size()); ++e) {
    const int transitions = dataset_.episodes[e].length() - 1;
    if (transitions < cfg_.n_train_step) {
      windows.push_back({e, 0, transitions});
      warnings_.push_back("episode " + std::to_string(e) + " (class '" +
                          dataset_.episodes[e].class_name + "') shorter than window: using " +
                          std::to_string(transitions) + " transitions");
      continue;
    }
    for (int start = 0; start + cfg_.n_train_step <= transitions; start += cfg_.n_train_step)
      windows.push_back({e, start, cfg_.n_train_step});
  }

  Rng split_rng = rng_.fork(1);
  for (int i = static_cast<int>(windows.size()) - 1; i > 0; --i)
    std::swap(windows[i], windows[split_rng.uniform_int(i + 1)]);
  int n_holdout = static_cast<int>(std::floor(cfg_.holdout_fraction *
                                              static_cast<double>(windows.size())));
  if (cfg_.holdout_fraction > 0.0 && n_holdout == 0 && windows.size() >= 2) n_holdout = 1;
  holdout_windows_.assign(windows.begin(), windows.begin() + n_holdout);
  train_windows_.assign(windows.begin() + n_holdout, windows.end());
  if (train_windows_.empty()) throw DataError("trainer: no training windows");
  batches_per_epoch_ = std::max(
      1, static_cast<int>((train_windows_.size() + cfg_.n_train_batch - 1) / cfg_.n_train_batch));
}

Eigen::VectorXd TrainerSession::window_input(const Window& w, int t,
                                             const Eigen::VectorXd& pb) const {
  Eigen::VectorXd input(shape_.input_dim);
  input.segment(0, signals_.sensor_dim()) = s_norm_[w.episode][t];
  input.segment(signals_.sensor_dim(), signals_.control_dim()) = u_norm_[w.episode][t];
  input.segment(signals_.sensor_dim() + signals_.control_dim(), pb.size()) = pb;
  return input;
}

Eigen::VectorXd TrainerSession::window_target(const Window& w, int t) const {
  Eigen::VectorXd target(layout_.dim);
  int at = 0;
  for (const auto& name : layout_.kept_sensors) {
    const auto& spec = signals_.at(name);
    target.segment(at, spec.dim) =
        s_norm_[w.episode][t + 1].segment(signals_.block_offset(name), spec.dim);
    at += spec.dim;
  }
  for (const auto& name : layout_.kept_controls) {
    const auto& spec = signals_.at(name);
    target.segment(at, spec.dim) =
        u_norm_[w.episode][t + 1].segment(signals_.block_offset(name), spec.dim);
    at += spec.dim;
  }
  return target;
}

double TrainerSession::run_batch() {
  const int pb_offset = signals_.sensor_dim() + signals_.control_dim();
  Eigen::VectorXd grad_w = Eigen::VectorXd::Zero(params_.size());
  std::map<std::string, Eigen::VectorXd> grad_pb;
  double batch_loss = 0.0;

  for (int b = 0; b < cfg_.n_train_batch; ++b) {
    const Window& w = train_windows_[rng_.uniform_int(static_cast<int>(train_windows_.size()))];
    const std::string& cls = dataset_.episodes[w.episode].class_name;
    const Eigen::VectorXd& pb = pb_.at(cls);

    std::vector<Eigen::VectorXd> inputs(w.len), targets(w.len);
    for (int t = 0; t < w.len; ++t) {
      inputs[t] = window_input(w, w.start + t, pb);
      targets[t] = window_target(w, w.start + t);
    }
    auto res = netcore::bptt(params_, inputs, targets, cfg_.loss_kind);
    batch_loss += res.loss;
    grad_w += res.grad_params.flatten();
    Eigen::VectorXd g = Eigen::VectorXd::Zero(spec_.pb_dim);
    for (const auto& gi : res.grad_inputs) g += gi.segment(pb_offset, spec_.pb_dim);
    auto it = grad_pb.find(cls);
    if (it == grad_pb.end())
      grad_pb.emplace(cls, std::move(g));
    else
      it->second += g;
  }

  const double inv_batch = 1.0 / static_cast<double>(cfg_.n_train_batch);
  grad_w *= inv_batch;
  Eigen::VectorXd flat = params_.flatten();
  netcore::adam_step(flat, grad_w, w_opt_, cfg_.adam);
  params_.assign_flat(flat);
  for (auto& [cls, g] : grad_pb) {
    g *= inv_batch;
    netcore::adam_step(pb_[cls], g, pb_opt_[cls], cfg_.adam);
  }
  return batch_loss * inv_batch;
}

double TrainerSession::run_epoch() {
  double total = 0.0;
  for (int i = 0; i < batches_per_epoch_; ++i) total += run_batch();
  const double mean = total / batches_per_epoch_;
  loss_history_.push_back(mean);
  return mean;
}

std::map<std::string, double> TrainerSession::signal_losses_over(
    const std::vector<Window>& windows) const {
  std::map<std::string, double> sums;
  std::map<std::string, long> counts;
  for (const auto& sig : signals_.specs()) {
    sums[sig.name] = 0.0;
    counts[sig.name] = 0;
  }
  for (const auto& w : windows) {
    const std::string& cls = dataset_.episodes[w.episode].class_name;
    const Eigen::VectorXd& pb = pb_.at(cls);
    auto state = netcore::RecurrentState::zero(shape_.hidden);
    for (int t = 0; t < w.len; ++t) {
      auto step = netcore::forward_step(params_, window_input(w, w.start + t, pb), state);
      state = std::move(step.state);
      const Eigen::VectorXd target = window_target(w, w.start + t);
      int at = 0;
      auto tally = [&](const std::vector<std::string>& names) {
        for (const auto& name : names) {
          const int dim = signals_.at(name).dim;
          for (int i = 0; i < dim; ++i) {
            const double err = step.output(at + i) - target(at + i);
            if (shape_.variance_mode) {
              const double var = netcore::variance_from_raw(step.output(layout_.dim + at + i));
              sums[name] += 0.5 * (kLn2Pi + std::log(var)) + err * err / (2.0 * var);
            } else {
              sums[name] += err * err;
            }
          }
          counts[name] += dim;
          at += dim;
        }
      };
      tally(layout_.kept_sensors);
      tally(layout_.kept_controls);
    }
  }
  std::map<std::string, double> losses;
  for (const auto& [name, sum] : sums)
    if (counts[name] > 0) losses[name] = sum / static_cast<double>(counts[name]);
  return losses;
}

FitResult TrainerSession::finish() {
  FitResult result;
  result.loss_history = loss_history_;
  result.warnings = warnings_;
  result.per_signal_losses =
      signal_losses_over(holdout_windows_.empty() ? train_windows_ : holdout_windows_);
  if (holdout_windows_.empty())
    result.warnings.push_back("holdout empty: per-signal losses computed on training windows");

  model::ModelBundle bundle;
  bundle.signals = signals_;
  bundle.shape = shape_;
  bundle.params = params_;
  bundle.norm_stats = norm_stats_;
  bundle.pb_table = pb_;
  bundle.current_pb = Eigen::VectorXd::Zero(spec_.pb_dim);
  bundle.dropped_outputs = dropped_;
  bundle.structure =
      layout_.kept_controls.empty() ? model::Structure::kStm : model::Structure::kCtm;
  bundle.training_losses["fit"] = result.per_signal_losses;
  bundle.validate();
  result.bundle = std::move(bundle);
  return result;
}

FitResult fit(const Dataset& dataset, const model::SignalRegistry& signals,
              const ModelSpec& spec, const TrainConfig& cfg,
              const std::vector<std::string>& dropped_outputs) {
  TrainerSession session(dataset, signals, spec, cfg, dropped_outputs);
  for (int epoch = 0; epoch < cfg.n_train_epoch; ++epoch) session.run_epoch();
  return session.finish();
}

AutoFitResult auto_fit(const Dataset& dataset, const model::SignalRegistry& signals,
                       const ModelSpec& spec, const TrainConfig& cfg) {
  AutoFitResult result;
  FitResult phase1 = fit(dataset, signals, spec, cfg, {});
  result.phase1_losses = phase1.per_signal_losses;
  result.choice = model::select_structure(signals, phase1.per_signal_losses, cfg.l_thre);
  result.warnings = phase1.warnings;

  if (result.choice.dropped_outputs.empty()) {
    result.bundle = std::move(phase1.bundle);
    result.loss_history = std::move(phase1.loss_history);
    result.bundle.training_losses.clear();
    result.bundle.training_losses["phase1"] = result.phase1_losses;
    result.bundle.training_losses["phase2"] = result.phase1_losses;
    return result;
  }

  if (cfg.loss_kind == netcore::LossKind::kNll &&
      result.choice.structure == model::Structure::kCtm)
    throw ConfigError("auto_fit: nll mode selected a CTM structure; variance mode is STM-only");

  TrainConfig cfg2 = cfg;
  cfg2.seed = cfg.seed + 1;  // fresh initialization for the retrain
  FitResult phase2 = fit(dataset, signals, spec, cfg2, result.choice.dropped_outputs);
  result.bundle = std::move(phase2.bundle);
  result.loss_history = std::move(phase2.loss_history);
  result.bundle.training_losses.clear();
  result.bundle.training_losses["phase1"] = result.phase1_losses;
  result.bundle.training_losses["phase2"] = phase2.per_signal_losses;
  for (const auto& w : phase2.warnings) result.warnings.push_back(w);
  return result;
}

std::map<std::string, double> compute_signal_losses(const model::ModelBundle& bundle,
                                                    const Dataset& dataset) {
  dataset.validate(bundle.signals);
  const auto layout = bundle.output_layout();
  std::map<std::string, double> sums;
  std::map<std::string, long> counts;

  for (const auto& ep : dataset.episodes) {
    auto it = bundle.pb_table.find(ep.class_name);
    const Eigen::VectorXd pb = it != bundle.pb_table.end() ? it->second : bundle.current_pb;
    auto state = netcore::RecurrentState::zero(bundle.shape.hidden);
    for (int t = 0; t + 1 < ep.length(); ++t) {
      const Eigen::VectorXd input = bundle.assemble_input(ep.s[t], ep.u[t], pb);
      auto step = netcore::forward_step(bundle.params, input, state);
      state = std::move(step.state);
      int at = 0;
      auto tally = [&](const std::vector<std::string>& names, bool sensor) {
        for (const auto& name : names) {
          const auto& spec = bundle.signals.at(name);
          const auto& stats = bundle.norm_stats.at(name);
          const Eigen::VectorXd actual = stats.normalize(
              (sensor ? ep.s[t + 1] : ep.u[t + 1])
                  .segment(bundle.signals.block_offset(name), spec.dim));
          for (int i = 0; i < spec.dim; ++i) {
            const double err = step.output(at + i) - actual(i);
            if (bundle.shape.variance_mode) {
              const double var =
                  netcore::variance_from_raw(step.output(layout.dim + at + i));
              sums[name] += 0.5 * (kLn2Pi + std::log(var)) + err * err / (2.0 * var);
            } else {
              sums[name] += err * err;
            }
          }
          counts[name] += spec.dim;
          at += spec.dim;
        }
      };
      tally(layout.kept_sensors, true);
      tally(layout.kept_controls, false);
    }
  }
  std::map<std::string, double> losses;
  for (const auto& [name, sum] : sums) losses[name] = sum / static_cast<double>(counts[name]);
  return losses;
}

}  // namespace dpmpb::trainer

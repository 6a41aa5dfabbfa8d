#pragma once

#include <Eigen/Core>
#include <map>
#include <string>
#include <vector>

#include "dpmpb/model.hpp"
#include "dpmpb/netcore.hpp"

namespace dpmpb::trainer {

// One contiguous rollout collected under a fixed dynamics class. Episodes
// sharing a class name share one parametric-bias vector during training.
struct Episode {
  std::string class_name;
  std::vector<Eigen::VectorXd> s;  // physical units, one entry per step
  std::vector<Eigen::VectorXd> u;

  int length() const { return static_cast<int>(s.size()); }
};

struct Dataset {
  std::vector<Episode> episodes;

  std::vector<std::string> class_names() const;  // unique, first-appearance order
  int total_transitions() const;
  void validate(const model::SignalRegistry& signals) const;
};

Dataset load_dataset_jsonl(const std::string& path, const model::SignalRegistry& signals);
void save_dataset_jsonl(const Dataset& dataset, const std::string& path,
                        const model::SignalRegistry& signals);

struct ModelSpec {
  int hidden = 64;
  int pb_dim = 2;
};

struct TrainConfig {
  int n_train_step = 20;   // transitions per window
  int n_train_batch = 32;  // windows per batch
  int n_train_epoch = 300;
  double l_thre = 0.3;
  netcore::LossKind loss_kind = netcore::LossKind::kMse;
  std::uint64_t seed = 0;
  netcore::AdamHyper adam;
  double holdout_fraction = 0.1;

  void validate() const;
};

struct FitResult {
  model::ModelBundle bundle;
  std::map<std::string, double> per_signal_losses;  // held-out L_n
  std::vector<double> loss_history;                 // mean training loss per epoch
  std::vector<std::string> warnings;
};

// Joint optimization of network weights and per-class PB vectors over
// windowed truncated BPTT. Exposed stepwise so tests can drive single batches.
class TrainerSession {
 public:
  TrainerSession(const Dataset& dataset, const model::SignalRegistry& signals,
                 const ModelSpec& spec, const TrainConfig& cfg,
                 std::vector<std::string> dropped_outputs = {});

  double run_batch();  // returns mean window loss of the batch
  double run_epoch();  // returns mean batch loss
  FitResult finish();

  const netcore::NetworkParams& params() const { return params_; }
  const model::PBTable& pb_table() const { return pb_; }
  int batches_per_epoch() const { return batches_per_epoch_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  struct Window {
    int episode;
    int start;
    int len;  // transitions
  };

  Eigen::VectorXd window_input(const Window& w, int t, const Eigen::VectorXd& pb) const;
  Eigen::VectorXd window_target(const Window& w, int t) const;
  std::map<std::string, double> signal_losses_over(const std::vector<Window>& windows) const;

  const Dataset& dataset_;
  model::SignalRegistry signals_;
  ModelSpec spec_;
  TrainConfig cfg_;
  std::vector<std::string> dropped_;
  model::OutputLayout layout_;
  netcore::NetworkShape shape_;

  std::map<std::string, model::NormStats> norm_stats_;
  std::vector<std::vector<Eigen::VectorXd>> s_norm_;  // per episode
  std::vector<std::vector<Eigen::VectorXd>> u_norm_;

  netcore::NetworkParams params_;
  model::PBTable pb_;
  netcore::AdamState w_opt_;
  std::map<std::string, netcore::AdamState> pb_opt_;

  std::vector<Window> train_windows_;
  std::vector<Window> holdout_windows_;
  int batches_per_epoch_ = 1;
  std::vector<double> loss_history_;
  std::vector<std::string> warnings_;
  Rng rng_;
};

FitResult fit(const Dataset& dataset, const model::SignalRegistry& signals,
              const ModelSpec& spec, const TrainConfig& cfg,
              const std::vector<std::string>& dropped_outputs = {});

struct AutoFitResult {
  model::ModelBundle bundle;
  std::map<std::string, double> phase1_losses;
  model::StructureChoice choice;
  std::vector<double> loss_history;  // phase 2 (or phase 1 when nothing dropped)
  std::vector<std::string> warnings;
};

// Two-phase training: full output first, structure selection at l_thre, then
// retraining from a fresh initialization with the reduced output.
AutoFitResult auto_fit(const Dataset& dataset, const model::SignalRegistry& signals,
                       const ModelSpec& spec, const TrainConfig& cfg);

// Teacher-forced one-step losses per signal, normalized space. Episodes whose
// class is missing from the PB table are evaluated at the bundle's current PB.
std::map<std::string, double> compute_signal_losses(const model::ModelBundle& bundle,
                                                    const Dataset& dataset);

}  // namespace dpmpb::trainer

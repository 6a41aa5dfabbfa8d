#pragma once

#include <Eigen/Core>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dpmpb/anomaly_stats.hpp"
#include "dpmpb/netcore.hpp"

namespace dpmpb::model {

enum class SignalKind { kSensor, kControl };

struct SignalSpec {
  std::string name;
  SignalKind kind = SignalKind::kSensor;
  int dim = 1;
  // Physical-unit bounds per dim; empty means unbounded.
  std::vector<std::pair<double, double>> bounds;
};

// Ordered registry; sensors form the first input block, controls the second.
class SignalRegistry {
 public:
  SignalRegistry() = default;
  explicit SignalRegistry(std::vector<SignalSpec> specs);

  const std::vector<SignalSpec>& specs() const { return specs_; }
  const SignalSpec& at(const std::string& name) const;
  bool has(const std::string& name) const;

  int sensor_dim() const { return sensor_dim_; }
  int control_dim() const { return control_dim_; }
  std::vector<std::string> sensor_names() const;
  std::vector<std::string> control_names() const;
  // Offset of a signal inside its own (sensor or control) block.
  int block_offset(const std::string& name) const;

 private:
  std::vector<SignalSpec> specs_;
  int sensor_dim_ = 0;
  int control_dim_ = 0;
  std::map<std::string, int> index_;
};

struct NormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // floored at 1e-6 when fitted

  Eigen::VectorXd normalize(const Eigen::VectorXd& x) const;
  Eigen::VectorXd denormalize(const Eigen::VectorXd& x_hat) const;

  static NormStats fit(const std::vector<Eigen::VectorXd>& samples);
};

using PBTable = std::map<std::string, Eigen::VectorXd>;

enum class Structure { kStm, kCtm };

std::string to_string(Structure s);

// Layout of network outputs for a given registry + dropped set: kept sensor
// signals in declaration order, then kept control signals.
struct OutputLayout {
  std::vector<std::string> kept_sensors;
  std::vector<std::string> kept_controls;
  int dim = 0;  // without the variance half

  static OutputLayout build(const SignalRegistry& signals,
                            const std::vector<std::string>& dropped);
};

struct Prediction {
  std::map<std::string, Eigen::VectorXd> sensors;            // physical units
  std::map<std::string, Eigen::VectorXd> controls;           // CTM only
  std::map<std::string, Eigen::VectorXd> sensor_variances;   // variance mode only
};

struct ModelBundle {
  int schema_version = 1;
  SignalRegistry signals;
  netcore::NetworkShape shape;
  netcore::NetworkParams params;
  std::map<std::string, NormStats> norm_stats;
  PBTable pb_table;
  Eigen::VectorXd current_pb;
  Structure structure = Structure::kCtm;
  std::vector<std::string> dropped_outputs;
  std::optional<anomaly::AnomalyStats> anomaly;
  std::map<std::string, std::map<std::string, double>> training_losses;

  int pb_dim() const { return static_cast<int>(current_pb.size()); }
  OutputLayout output_layout() const;

  // Input vector in network units: [norm(s); norm(u); pb].
  Eigen::VectorXd assemble_input(const Eigen::VectorXd& s_phys, const Eigen::VectorXd& u_phys,
                                 const Eigen::VectorXd& pb) const;
  Eigen::VectorXd normalize_block(SignalKind kind, const Eigen::VectorXd& x_phys) const;
  Eigen::VectorXd denormalize_block_sensors(const Eigen::VectorXd& x_norm,
                                            const OutputLayout& layout) const;

  void validate() const;
};

struct PredictResult {
  Prediction prediction;
  netcore::RecurrentState state;
};

PredictResult predict(const ModelBundle& bundle, const Eigen::VectorXd& s_phys,
                      const Eigen::VectorXd& u_phys, const Eigen::VectorXd& pb,
                      const netcore::RecurrentState& state);

struct StructureChoice {
  Structure structure;
  std::vector<std::string> dropped_outputs;
};

// Drop every signal with L_n >= threshold; CTM iff any control signal kept.
StructureChoice select_structure(const SignalRegistry& signals,
                                 const std::map<std::string, double>& per_signal_losses,
                                 double l_thre);

void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

std::string bundle_to_json(const ModelBundle& bundle);
ModelBundle bundle_from_json(const std::string& text);

}  // namespace dpmpb::model

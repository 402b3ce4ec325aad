#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fedwsidd/archive.hpp"
#include "fedwsidd/core.hpp"

namespace fedwsidd {

enum class MilKind { abmil, clam_lite, mean_pool };

const char* mil_kind_name(MilKind kind);
/// Throws ConfigInvalid on unknown names.
MilKind parse_mil_kind(const std::string& name);

struct MilSpec {
  MilKind name = MilKind::abmil;
  int input_dim = 64;
  int hidden_dim = 128;
  int attention_dim = 64;
  int num_classes = 2;
  int clam_instance_k = 8;
  double clam_instance_weight = 0.3;

  void validate() const;
  bool operator==(const MilSpec&) const = default;
};

struct BagFeatures {
  Eigen::MatrixXd embeddings;  // T x d
  std::string slide_id;
  int label = 0;
};

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 0.0003;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// All architectures share an instance encoder h = relu(W e + b) followed by
/// their pooling and a linear head. Parameters live in one flat vector.
class MilModel {
 public:
  struct Segment {
    std::string name;
    int rows = 0;
    int cols = 0;  // 1 for vectors
    std::size_t offset = 0;
  };

  struct Forward {
    Eigen::VectorXd probabilities;
    Eigen::VectorXd attention;  // empty for mean_pool
  };

  explicit MilModel(MilSpec spec);

  const MilSpec& spec() const { return spec_; }
  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  const std::vector<Segment>& segments() const { return segments_; }

  Forward forward(const BagFeatures& bag) const;
  /// Loss for one bag; accumulates d loss / d params into grad when given.
  double loss(const BagFeatures& bag, std::vector<double>* grad = nullptr) const;

  /// Fixed input standardization (e - mean) / scale. Not a trained parameter;
  /// train_mil fits it on the training instances (per-dimension mean, one
  /// shared rms scale).
  void set_input_standardization(Eigen::VectorXd mean, Eigen::VectorXd scale);
  void fit_input_standardization(const std::vector<BagFeatures>& bags);
  const Eigen::VectorXd& input_mean() const { return input_mean_; }
  const Eigen::VectorXd& input_scale() const { return input_scale_; }

  std::vector<NamedTensor> to_tensors() const;
  static MilModel from_tensors(const MilSpec& spec, const std::vector<NamedTensor>& tensors);

 private:
  using MapM = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using MapV = Eigen::Map<const Eigen::VectorXd>;

  const Segment& segment(const std::string& name) const;
  MapM mat(const std::string& name) const;
  MapV vec(const std::string& name) const;
  void add_segment(const std::string& name, int rows, int cols);
  void check_bag(const BagFeatures& bag) const;
  Eigen::MatrixXd standardized(const BagFeatures& bag) const;

  MilSpec spec_;
  std::vector<Segment> segments_;
  std::vector<double> params_;
  Eigen::VectorXd input_mean_;
  Eigen::VectorXd input_scale_;
};

MilModel build_mil(const MilSpec& spec, RngStream& rng);

double mil_loss(const MilModel& model, const BagFeatures& bag);

struct TrainResult {
  MilModel model;
  std::vector<double> loss_curve;  // mean loss per epoch

  std::string loss_csv() const;
};

/// Throws EmptyDataset, ConfigInvalid.
TrainResult train_mil(const MilModel& model, const std::vector<BagFeatures>& bags, const TrainConfig& cfg,
                      RngStream& rng);

/// Throws EmptyBag.
Eigen::VectorXd predict(const MilModel& model, const BagFeatures& bag);
int predict_label(const MilModel& model, const BagFeatures& bag);

}  // namespace fedwsidd

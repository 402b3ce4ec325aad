#include "fedwsidd/mil.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace fedwsidd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::VectorXd softmax(const Eigen::VectorXd& x) {
  const double m = x.maxCoeff();
  Eigen::VectorXd e = (x.array() - m).exp();
  return e / e.sum();
}

bool uses_attention(MilKind k) { return k != MilKind::mean_pool; }

}  // namespace

const char* mil_kind_name(MilKind kind) {
  switch (kind) {
    case MilKind::abmil: return "abmil";
    case MilKind::clam_lite: return "clam_lite";
    case MilKind::mean_pool: return "mean_pool";
  }
  return "?";
}

MilKind parse_mil_kind(const std::string& name) {
  if (name == "abmil") return MilKind::abmil;
  if (name == "clam_lite") return MilKind::clam_lite;
  if (name == "mean_pool") return MilKind::mean_pool;
  throw Error(Errc::ConfigInvalid, "unknown MIL model '" + name + "'");
}

void MilSpec::validate() const {
  if (input_dim < 1 || hidden_dim < 1 || attention_dim < 1) throw Error(Errc::ConfigInvalid, "MIL dims must be >= 1");
  if (num_classes < 2) throw Error(Errc::ConfigInvalid, "MIL needs at least two classes");
  if (name == MilKind::clam_lite && (clam_instance_k < 0 || clam_instance_weight < 0.0)) {
    throw Error(Errc::ConfigInvalid, "clam instance k and weight must be nonnegative");
  }
}

void TrainConfig::validate() const {
  if (epochs < 1) throw Error(Errc::ConfigInvalid, "epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw Error(Errc::ConfigInvalid, "learning_rate must be > 0");
}

MilModel::MilModel(MilSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  input_mean_ = Eigen::VectorXd::Zero(spec_.input_dim);
  input_scale_ = Eigen::VectorXd::Ones(spec_.input_dim);
  add_segment("encoder.weight", spec_.hidden_dim, spec_.input_dim);
  add_segment("encoder.bias", spec_.hidden_dim, 1);
  if (uses_attention(spec_.name)) {
    add_segment("attention.V", spec_.attention_dim, spec_.hidden_dim);
    add_segment("attention.w", spec_.attention_dim, 1);
  }
  add_segment("head.weight", spec_.num_classes, spec_.hidden_dim);
  add_segment("head.bias", spec_.num_classes, 1);
  if (spec_.name == MilKind::clam_lite) {
    add_segment("instance.weight", 2, spec_.hidden_dim);
    add_segment("instance.bias", 2, 1);
  }
}

void MilModel::add_segment(const std::string& name, int rows, int cols) {
  segments_.push_back({name, rows, cols, params_.size()});
  params_.resize(params_.size() + static_cast<std::size_t>(rows) * cols, 0.0);
}

const MilModel::Segment& MilModel::segment(const std::string& name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  throw Error(Errc::ConfigInvalid, "no parameter " + name);
}

MilModel::MapM MilModel::mat(const std::string& name) const {
  const auto& s = segment(name);
  return MapM(params_.data() + s.offset, s.rows, s.cols);
}

MilModel::MapV MilModel::vec(const std::string& name) const {
  const auto& s = segment(name);
  return MapV(params_.data() + s.offset, s.rows);
}

void MilModel::check_bag(const BagFeatures& bag) const {
  if (bag.embeddings.rows() < 1) throw Error(Errc::EmptyBag, "bag " + bag.slide_id + " has no instances");
  if (bag.embeddings.cols() != spec_.input_dim) {
    throw Error(Errc::ShapeMismatch, "bag " + bag.slide_id + " embedding width differs from the model input");
  }
}

void MilModel::set_input_standardization(Eigen::VectorXd mean, Eigen::VectorXd scale) {
  if (mean.size() != spec_.input_dim || scale.size() != spec_.input_dim) {
    throw Error(Errc::ShapeMismatch, "standardization vectors must have input_dim entries");
  }
  if ((scale.array() <= 0.0).any()) throw Error(Errc::ConfigInvalid, "standardization scale must be positive");
  input_mean_ = std::move(mean);
  input_scale_ = std::move(scale);
}

void MilModel::fit_input_standardization(const std::vector<BagFeatures>& bags) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(spec_.input_dim), sq = sum;
  double n = 0.0;
  for (const auto& bag : bags) {
    check_bag(bag);
    sum += bag.embeddings.colwise().sum().transpose();
    n += static_cast<double>(bag.embeddings.rows());
  }
  if (n == 0.0) throw Error(Errc::EmptyDataset, "no instances to fit the input standardization");
  const Eigen::VectorXd mean = sum / n;
  for (const auto& bag : bags) sq += (bag.embeddings.rowwise() - mean.transpose()).colwise().squaredNorm().transpose();
  // one shared scale keeps the embedding geometry; per-dimension scaling blows up
  // small synthetic errors along low-variance directions
  const double rms = std::max(std::sqrt((sq / n).mean()), 1e-8);
  set_input_standardization(mean, Eigen::VectorXd::Constant(spec_.input_dim, rms));
}

Eigen::MatrixXd MilModel::standardized(const BagFeatures& bag) const {
  return (bag.embeddings.rowwise() - input_mean_.transpose()).array().rowwise() / input_scale_.transpose().array();
}

MilModel::Forward MilModel::forward(const BagFeatures& bag) const {
  check_bag(bag);
  const RowMat pre = (standardized(bag) * mat("encoder.weight").transpose()).rowwise() + vec("encoder.bias").transpose();
  const RowMat h = pre.cwiseMax(0.0);
  Forward f;
  Eigen::VectorXd z;
  if (uses_attention(spec_.name)) {
    const RowMat u = (h * mat("attention.V").transpose()).array().tanh();
    f.attention = softmax(u * vec("attention.w"));
    z = h.transpose() * f.attention;
  } else {
    z = h.colwise().mean().transpose();
  }
  f.probabilities = softmax(mat("head.weight") * z + vec("head.bias"));
  return f;
}

double MilModel::loss(const BagFeatures& bag, std::vector<double>* grad) const {
  check_bag(bag);
  if (bag.label < 0 || bag.label >= spec_.num_classes) {
    throw Error(Errc::ConfigInvalid, "bag " + bag.slide_id + " label out of range");
  }
  const auto T = bag.embeddings.rows();
  const Eigen::MatrixXd E = standardized(bag);
  const RowMat pre = (E * mat("encoder.weight").transpose()).rowwise() + vec("encoder.bias").transpose();
  const RowMat h = pre.cwiseMax(0.0);

  RowMat u;
  Eigen::VectorXd a, z;
  const bool attn = uses_attention(spec_.name);
  if (attn) {
    u = (h * mat("attention.V").transpose()).array().tanh();
    a = softmax(u * vec("attention.w"));
    z = h.transpose() * a;
  } else {
    z = h.colwise().mean().transpose();
  }
  const Eigen::VectorXd p = softmax(mat("head.weight") * z + vec("head.bias"));
  double loss = -std::log(std::max(p(bag.label), 1e-300));

  // instance branch on the top-k / bottom-k attended instances
  std::vector<std::pair<Eigen::Index, int>> inst;
  if (spec_.name == MilKind::clam_lite) {
    const auto k = static_cast<Eigen::Index>(std::min<Eigen::Index>(spec_.clam_instance_k, T / 2));
    if (k > 0) {
      std::vector<Eigen::Index> order(static_cast<std::size_t>(T));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return a(i) > a(j); });
      const int top_label = bag.label != 0 ? 1 : 0;
      for (Eigen::Index i = 0; i < k; ++i) inst.emplace_back(order[static_cast<std::size_t>(i)], top_label);
      for (Eigen::Index i = 0; i < k; ++i) inst.emplace_back(order[static_cast<std::size_t>(T - 1 - i)], 0);
    }
  }
  const double wi = spec_.clam_instance_weight;
  std::vector<Eigen::VectorXd> inst_p;
  if (!inst.empty()) {
    double li = 0.0;
    for (const auto& [t, y] : inst) {
      inst_p.push_back(softmax(mat("instance.weight") * h.row(t).transpose() + vec("instance.bias")));
      li -= std::log(std::max(inst_p.back()(y), 1e-300));
    }
    loss += wi * li / static_cast<double>(inst.size());
  }
  if (!grad) return loss;

  grad->resize(params_.size(), 0.0);
  auto gmat = [&](const std::string& name) {
    const auto& s = segment(name);
    return Eigen::Map<RowMat>(grad->data() + s.offset, s.rows, s.cols);
  };
  auto gvec = [&](const std::string& name) {
    const auto& s = segment(name);
    return Eigen::Map<Eigen::VectorXd>(grad->data() + s.offset, s.rows);
  };

  Eigen::VectorXd dlogits = p;
  dlogits(bag.label) -= 1.0;
  gmat("head.weight") += dlogits * z.transpose();
  gvec("head.bias") += dlogits;
  const Eigen::VectorXd dz = mat("head.weight").transpose() * dlogits;

  RowMat dh(T, h.cols());
  if (attn) {
    dh = a * dz.transpose();
    const Eigen::VectorXd da = h * dz;
    const Eigen::VectorXd ds = a.array() * (da.array() - a.dot(da));
    gvec("attention.w") += u.transpose() * ds;
    const RowMat du = ds * vec("attention.w").transpose();
    const RowMat dp = du.array() * (1.0 - u.array().square());
    gmat("attention.V") += dp.transpose() * h;
    dh += dp * mat("attention.V");
  } else {
    dh = Eigen::VectorXd::Constant(T, 1.0 / static_cast<double>(T)) * dz.transpose();
  }

  if (!inst.empty()) {
    const double scale = wi / static_cast<double>(inst.size());
    for (std::size_t i = 0; i < inst.size(); ++i) {
      const auto [t, y] = inst[i];
      Eigen::VectorXd dl = inst_p[i];
      dl(y) -= 1.0;
      dl *= scale;
      gmat("instance.weight") += dl * h.row(t);
      gvec("instance.bias") += dl;
      dh.row(t) += (mat("instance.weight").transpose() * dl).transpose();
    }
  }

  const RowMat dpre = (pre.array() > 0.0).cast<double>() * dh.array();
  gmat("encoder.weight") += dpre.transpose() * E;
  gvec("encoder.bias") += dpre.colwise().sum().transpose();
  return loss;
}

std::vector<NamedTensor> MilModel::to_tensors() const {
  std::vector<NamedTensor> out;
  const auto d = static_cast<std::uint64_t>(spec_.input_dim);
  out.push_back(NamedTensor::from_double("input.mean", {d}, std::span<const double>(input_mean_.data(), d)));
  out.push_back(NamedTensor::from_double("input.scale", {d}, std::span<const double>(input_scale_.data(), d)));
  for (const auto& s : segments_) {
    std::vector<std::uint64_t> shape{static_cast<std::uint64_t>(s.rows)};
    if (s.cols != 1) shape.push_back(static_cast<std::uint64_t>(s.cols));
    out.push_back(NamedTensor::from_double(
        s.name, shape, std::span<const double>(params_.data() + s.offset, static_cast<std::size_t>(s.rows) * s.cols)));
  }
  return out;
}

MilModel MilModel::from_tensors(const MilSpec& spec, const std::vector<NamedTensor>& tensors) {
  MilModel model(spec);
  for (const auto& s : model.segments_) {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == s.name; });
    if (it == tensors.end()) throw Error(Errc::ManifestSchema, "checkpoint lacks " + s.name);
    if (it->data.size() != static_cast<std::size_t>(s.rows) * s.cols) {
      throw Error(Errc::ShapeMismatch, "checkpoint tensor " + s.name + " has the wrong size");
    }
    std::copy(it->data.begin(), it->data.end(), model.params_.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }
  auto buffer = [&](const char* name) {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const NamedTensor& t) { return t.name == name; });
    if (it == tensors.end()) throw Error(Errc::ManifestSchema, std::string("checkpoint lacks ") + name);
    const auto v = it->to_double();
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  model.set_input_standardization(buffer("input.mean"), buffer("input.scale"));
  return model;
}

MilModel build_mil(const MilSpec& spec, RngStream& rng) {
  MilModel model(spec);
  auto& p = model.parameters();
  for (const auto& s : model.segments()) {
    if (s.name.ends_with(".bias")) continue;  // biases start at zero
    const double fan_in = s.name == "attention.w" ? s.rows : s.cols;
    const double sd = std::sqrt((s.name == "encoder.weight" ? 2.0 : 1.0) / fan_in);
    for (std::size_t i = 0; i < static_cast<std::size_t>(s.rows) * s.cols; ++i) p[s.offset + i] = rng.normal(0.0, sd);
  }
  return model;
}

double mil_loss(const MilModel& model, const BagFeatures& bag) { return model.loss(bag); }

std::string TrainResult::loss_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < loss_curve.size(); ++e) os << e << ',' << loss_curve[e] << '\n';
  return os.str();
}

TrainResult train_mil(const MilModel& model, const std::vector<BagFeatures>& bags, const TrainConfig& cfg,
                      RngStream& rng) {
  cfg.validate();
  if (bags.empty()) throw Error(Errc::EmptyDataset, "no bags to train on");
  TrainResult result{model, {}};
  result.model.fit_input_standardization(bags);
  auto& w = result.model.parameters();
  std::vector<double> m(w.size(), 0.0), v(w.size(), 0.0), g(w.size());
  std::vector<std::size_t> order(bags.size());
  std::iota(order.begin(), order.end(), 0);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (auto i : order) {
      std::fill(g.begin(), g.end(), 0.0);
      total += result.model.loss(bags[i], &g);
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
        v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
        w[k] -= cfg.learning_rate * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
      }
    }
    result.loss_curve.push_back(total / static_cast<double>(bags.size()));
  }
  return result;
}

Eigen::VectorXd predict(const MilModel& model, const BagFeatures& bag) { return model.forward(bag).probabilities; }

int predict_label(const MilModel& model, const BagFeatures& bag) {
  Eigen::Index best = 0;
  predict(model, bag).maxCoeff(&best);
  return static_cast<int>(best);
}

}  // namespace fedwsidd

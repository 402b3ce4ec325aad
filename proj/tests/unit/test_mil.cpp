#include "doctest.h"

#include <cmath>

#include "fedwsidd/mil.hpp"
#include "helpers.hpp"

using namespace fedwsidd;

namespace {

MilSpec small_spec(MilKind kind) {
  MilSpec s;
  s.name = kind;
  s.input_dim = 5;
  s.hidden_dim = 6;
  s.attention_dim = 4;
  s.clam_instance_k = 2;
  return s;
}

BagFeatures random_bag(RngStream& rng, int t, int d, int label) {
  BagFeatures b;
  b.embeddings.resize(t, d);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < d; ++j) b.embeddings(i, j) = rng.normal();
  b.label = label;
  b.slide_id = "bag";
  return b;
}

}  // namespace

TEST_CASE("mil kinds parse and print") {
  for (auto k : {MilKind::abmil, MilKind::clam_lite, MilKind::mean_pool}) CHECK(parse_mil_kind(mil_kind_name(k)) == k);
  CHECK_THROWS_AS(parse_mil_kind("transmil"), Error);
}

TEST_CASE("mil loss gradients match finite differences") {
  auto rng = derive_stream(1, "mil");
  for (auto kind : {MilKind::abmil, MilKind::clam_lite, MilKind::mean_pool}) {
    CAPTURE(std::string(mil_kind_name(kind)));
    auto model = build_mil(small_spec(kind), rng);
    const auto bag = random_bag(rng, 7, 5, 1);
    std::vector<double> grad(model.parameters().size(), 0.0);
    model.loss(bag, &grad);
    auto f = [&](const std::vector<double>& p) {
      MilModel m = model;
      m.parameters() = p;
      return m.loss(bag);
    };
    const auto fd = testing::numeric_gradient(f, model.parameters(), 1e-6);
    CHECK(testing::relative_error(grad, fd) < 1e-5);
  }
}

TEST_CASE("predictions are permutation invariant and attention is a distribution") {
  auto rng = derive_stream(2, "mil");
  for (auto kind : {MilKind::abmil, MilKind::clam_lite, MilKind::mean_pool}) {
    auto model = build_mil(small_spec(kind), rng);
    const auto bag = random_bag(rng, 9, 5, 0);
    auto shuffled = bag;
    std::vector<int> order = {3, 0, 8, 1, 7, 2, 6, 4, 5};
    for (int i = 0; i < 9; ++i) shuffled.embeddings.row(i) = bag.embeddings.row(order[i]);
    const auto a = model.forward(bag), b = model.forward(shuffled);
    CHECK((a.probabilities - b.probabilities).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(std::fabs(a.probabilities.sum() - 1.0) <= 1e-12);
    if (kind != MilKind::mean_pool) {
      CHECK(std::fabs(a.attention.sum() - 1.0) <= 1e-12);
      CHECK(a.attention.minCoeff() >= 0.0);
      for (int i = 0; i < 9; ++i) CHECK(b.attention(i) == doctest::Approx(a.attention(order[i])));
    }
  }
}

TEST_CASE("clam_lite with zero instance weight is abmil") {
  auto rng = derive_stream(3, "mil");
  auto spec = small_spec(MilKind::clam_lite);
  spec.clam_instance_weight = 0.0;
  auto clam = build_mil(spec, rng);
  MilModel ab(small_spec(MilKind::abmil));
  for (const auto& seg : ab.segments()) {
    const auto& src = *std::find_if(clam.segments().begin(), clam.segments().end(),
                                    [&](const auto& s) { return s.name == seg.name; });
    std::copy_n(clam.parameters().begin() + src.offset, seg.rows * seg.cols, ab.parameters().begin() + seg.offset);
  }
  for (int label : {0, 1}) {
    const auto bag = random_bag(rng, 6, 5, label);
    CHECK(clam.loss(bag) == doctest::Approx(ab.loss(bag)).epsilon(1e-12));
  }
  spec.clam_instance_weight = 0.5;
  MilModel weighted(spec);
  weighted.parameters() = clam.parameters();
  const auto bag = random_bag(rng, 6, 5, 1);
  CHECK(weighted.loss(bag) > clam.loss(bag));
}

TEST_CASE("four separable bags are learned within 50 epochs") {
  auto rng = derive_stream(4, "mil");
  for (auto kind : {MilKind::abmil, MilKind::clam_lite, MilKind::mean_pool}) {
    CAPTURE(std::string(mil_kind_name(kind)));
    std::vector<BagFeatures> bags;
    for (int i = 0; i < 4; ++i) {
      auto b = random_bag(rng, 8, 5, i % 2);
      // label-1 bags hold two instances shifted along the first axis
      if (b.label == 1) b.embeddings.block(0, 0, 2, 1).array() += 6.0;
      b.slide_id = "b" + std::to_string(i);
      bags.push_back(b);
    }
    auto model = build_mil(small_spec(kind), rng);
    TrainConfig cfg;
    cfg.epochs = 50;
    cfg.learning_rate = 0.01;
    auto trng = derive_stream(5, "train");
    const auto result = train_mil(model, bags, cfg, trng);
    int correct = 0;
    for (const auto& b : bags) correct += predict_label(result.model, b) == b.label;
    CHECK(correct == 4);
    CHECK(result.loss_curve.size() == 50u);
    CHECK(result.loss_curve.back() < result.loss_curve.front());
  }
}

TEST_CASE("input standardization uses one shared scale") {
  auto rng = derive_stream(6, "mil");
  MilModel model(small_spec(MilKind::abmil));
  auto bag = random_bag(rng, 50, 5, 0);
  bag.embeddings.col(1) *= 10.0;
  model.fit_input_standardization({bag});
  const Eigen::RowVectorXd mean = bag.embeddings.colwise().mean();
  CHECK((model.input_mean().transpose() - mean).norm() < 1e-12);
  const double rms = std::sqrt((bag.embeddings.rowwise() - mean).squaredNorm() / (50.0 * 5.0));
  for (int j = 0; j < 5; ++j) CHECK(model.input_scale()(j) == doctest::Approx(rms));
}

TEST_CASE("models round trip through tensors") {
  auto rng = derive_stream(7, "mil");
  auto model = build_mil(small_spec(MilKind::clam_lite), rng);
  model.set_input_standardization(Eigen::VectorXd::Constant(5, 0.25), Eigen::VectorXd::Constant(5, 2.0));
  const auto back = MilModel::from_tensors(model.spec(), model.to_tensors());
  const auto bag = random_bag(rng, 4, 5, 1);
  CHECK((predict(back, bag) - predict(model, bag)).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("mil input errors") {
  auto rng = derive_stream(8, "mil");
  auto model = build_mil(small_spec(MilKind::abmil), rng);
  BagFeatures empty;
  empty.embeddings.resize(0, 5);
  CHECK_THROWS_AS(predict(model, empty), Error);
  CHECK_THROWS_AS(model.forward(random_bag(rng, 3, 4, 0)), Error);
  TrainConfig cfg;
  CHECK_THROWS_AS(train_mil(model, {}, cfg, rng), Error);
  auto bad = small_spec(MilKind::abmil);
  bad.hidden_dim = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

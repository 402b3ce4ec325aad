#include "doctest.h"

#include <filesystem>

#include "fedwsidd/features.hpp"
#include "helpers.hpp"

using namespace fedwsidd;

TEST_CASE("small conv pullback matches finite differences") {
  auto rng = derive_stream(1, "features");
  SmallConvExtractor f(8, 8, 6, rng);
  const auto x = testing::random_pixels(rng, f.input_size());
  const auto cot = testing::random_pixels(rng, 6, -1.0, 1.0);
  std::vector<double> out(6), grad(x.size());
  auto tape = f.embed_recorded(x, out);
  f.pullback(*tape, cot, grad);
  auto fn = [&](const std::vector<double>& px) {
    std::vector<double> e(6);
    f.embed(px, e);
    double s = 0;
    for (int i = 0; i < 6; ++i) s += cot[i] * e[i];
    return s;
  };
  CHECK(testing::relative_error(grad, testing::numeric_gradient(fn, x, 1e-5)) < 1e-6);
}

TEST_CASE("recorded and plain forward agree") {
  auto rng = derive_stream(2, "features");
  SmallConvExtractor f(16, 16, 8, rng);
  const auto x = testing::random_pixels(rng, f.input_size());
  std::vector<double> a(8), b(8);
  f.embed(x, a);
  auto tape = f.make_tape();
  f.embed_into(x, b, *tape);
  for (int i = 0; i < 8; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("extractor construction is deterministic in the stream") {
  auto r1 = derive_stream(3, "features");
  auto r2 = derive_stream(3, "features");
  SmallConvExtractor a(8, 8, 4, r1), b(8, 8, 4, r2);
  CHECK(a.head_weights() == b.head_weights());
  CHECK(a.layers()[0].weights == b.layers()[0].weights);
}

TEST_CASE("weights round trip through an external extractor") {
  auto rng = derive_stream(4, "features");
  SmallConvExtractor f(8, 8, 5, rng);
  const auto path = (std::filesystem::temp_directory_path() / "fedwsidd_weights_test.fwsa").string();
  f.save_weights(path);

  FeatureExtractorSpec spec;
  spec.name = ExtractorKind::external;
  spec.embed_dim = 5;
  spec.input_height = 8;
  spec.input_width = 8;
  spec.weights_ref = path;
  auto g = build_extractor(spec, rng);
  const auto x = testing::random_pixels(rng, f.input_size());
  std::vector<double> a(5), b(5);
  f.embed(x, a);
  g->embed(x, b);
  // float32 storage
  for (int i = 0; i < 5; ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));
  std::filesystem::remove(path);
}

TEST_CASE("external extractor without weights is rejected") {
  auto rng = derive_stream(5, "features");
  FeatureExtractorSpec spec;
  spec.name = ExtractorKind::external;
  CHECK_THROWS_AS(build_extractor(spec, rng), Error);
  spec.weights_ref = "/nonexistent/weights.fwsa";
  CHECK_THROWS_AS(build_extractor(spec, rng), Error);
}

TEST_CASE("mean feature averages patch embeddings") {
  IdentityExtractor f(1, 1, 2);
  std::vector<PatchTensor> bag(2, PatchTensor(1, 1, 2));
  bag[0].data = {0.0f, 1.0f};
  bag[1].data = {0.5f, 0.5f};
  const auto m = mean_feature(f, bag);
  CHECK(m[0] == doctest::Approx(0.25));
  CHECK(m[1] == doctest::Approx(0.75));
  CHECK_THROWS_AS(mean_feature(f, std::span<const PatchTensor>()), Error);
  PatchTensor wrong(1, 2, 2);
  CHECK_THROWS_AS(f.check_input(wrong), Error);
}

TEST_CASE("backprop to pixels spreads the cotangent over the bag") {
  IdentityExtractor f(1, 1, 2);
  std::vector<PatchTensor> bag(4, PatchTensor(1, 1, 2, 0.3f));
  const std::vector<double> cot = {1.0, -2.0};
  const auto g = backprop_to_pixels(f, bag, cot);
  REQUIRE(g.size() == 4u);
  CHECK(g[2][0] == doctest::Approx(0.25));
  CHECK(g[2][1] == doctest::Approx(-0.5));
}

#include "doctest.h"

#include "fedwsidd/core.hpp"
#include "fedwsidd/numeric.hpp"

using namespace fedwsidd;

TEST_CASE("rng streams are keyed by seed and label") {
  auto a = derive_stream(7, "distill/C1");
  auto b = derive_stream(7, "distill/C1");
  auto c = derive_stream(7, "distill/C2");
  auto d = derive_stream(8, "distill/C1");
  const auto va = a.next_u64();
  CHECK(va == b.next_u64());
  CHECK(va != c.next_u64());
  CHECK(va != d.next_u64());
}

TEST_CASE("child streams extend the label") {
  auto root = derive_stream(3, "fed");
  auto child = root.child("seed1");
  CHECK(child.label() == "fed/seed1");
  auto direct = derive_stream(3, "fed/seed1");
  CHECK(child.next_u64() == direct.next_u64());
}

TEST_CASE("rng index stays in range") {
  auto rng = derive_stream(1, "idx");
  for (int i = 0; i < 1000; ++i) CHECK(rng.index(5) < 5u);
}

TEST_CASE("error carries its code") {
  try {
    throw Error(Errc::EmptyBag, "nothing");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::EmptyBag);
    CHECK(std::string(e.what()).find("nothing") != std::string::npos);
  }
}

TEST_CASE("patch from_double clamps") {
  auto p = PatchTensor::from_double(1, 1, 3, {-0.5, 0.25, 1.5});
  CHECK(p.data[0] == 0.0f);
  CHECK(p.data[1] == 0.25f);
  CHECK(p.data[2] == 1.0f);
}

TEST_CASE("percentile uses linear interpolation") {
  // numpy.percentile([1, 2, 3, 4], q) values
  std::vector<double> v = {4, 1, 3, 2};
  CHECK(numeric::percentile(v, 0) == doctest::Approx(1.0));
  CHECK(numeric::percentile(v, 50) == doctest::Approx(2.5));
  CHECK(numeric::percentile(v, 99) == doctest::Approx(3.97));
  CHECK(numeric::percentile(v, 100) == doctest::Approx(4.0));
  std::vector<double> one = {5};
  CHECK(numeric::percentile(one, 37) == doctest::Approx(5.0));
}

TEST_CASE("validate_client_dataset reports problems") {
  ClientDataset ds;
  ds.centre_id = "C1";
  Slide s;
  s.id = "a";
  s.centre_id = "C1";
  s.patches.emplace_back(3, 4, 4, 0.5f);
  ds.train_slides = {s};
  s.id = "b";
  s.label.index = 1;
  ds.train_slides.push_back(s);
  CHECK(validate_client_dataset(ds).empty());

  ds.test_slides = {ds.train_slides[0]};
  CHECK(validate_client_dataset(ds).size() == 1);  // split overlap
  ds.test_slides.clear();
  ds.train_slides[1].label.index = 2;
  CHECK(validate_client_dataset(ds).size() == 1);
  ds.train_slides[1].label.index = 1;
  ds.train_slides[1].patches.emplace_back(3, 5, 4, 0.5f);
  CHECK(validate_client_dataset(ds).size() == 1);
}

#include <doctest.h>

#include <deque>

#include "oracles.hpp"
#include "ucseg/feature_bank.hpp"

using namespace ucseg;

TEST_CASE("threshold schedule and should_update") {
  ThresholdSchedule sched = ThresholdSchedule::for_rank(2, 100);
  auto [up0, th0] = should_update(0.5, 0, sched);
  CHECK(up0);
  CHECK(th0 == doctest::Approx(0.4).epsilon(1e-15));

  auto [up1, th1] = should_update(0.39, 0, sched);
  CHECK(!up1);
  CHECK(th1 == doctest::Approx(0.4).epsilon(1e-15));

  auto [up2, th2] = should_update(0.95, 100, sched);
  CHECK(!up2);
  CHECK(th2 == doctest::Approx(0.96).epsilon(1e-12));

  ThresholdSchedule s3 = ThresholdSchedule::for_rank(3, 10);
  CHECK(s3.base == 0.2);

  CHECK_THROWS_AS(should_update(1.5, 0, sched), DomainError);
}

TEST_CASE("should_update monotonicity property") {
  ThresholdSchedule sched = ThresholdSchedule::for_rank(2, 50);
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const double dice = rng.uniform();
    const std::size_t t = rng.uniform_index(51);
    if (!should_update(dice, t, sched).first) {
      const double lower = dice * rng.uniform();
      const std::size_t later = t + rng.uniform_index(51 - t);
      CHECK(!should_update(lower, later, sched).first);
    }
  }
}

TEST_CASE("push semantics") {
  auto unit = [](std::size_t i, std::size_t d) {
    std::vector<double> v(d, 0.0);
    v[i] = 1.0;
    return v;
  };
  FeatureBank bank(2, 4, 3);

  SUBCASE("FIFO eviction keeps the newest K_f") {
    for (std::size_t i = 0; i < 4; ++i) bank.push(0, unit(i, 4));
    REQUIRE(bank.size(0) == 3);
    CHECK(bank.slots(0)[0][1] == 1.0);  // v2
    CHECK(bank.slots(0)[1][2] == 1.0);  // v3
    CHECK(bank.slots(0)[2][3] == 1.0);  // v4
  }

  SUBCASE("bounds and dimension checks") {
    CHECK_THROWS_AS(bank.push(2, unit(0, 4)), IndexError);
    CHECK_THROWS_AS(bank.push(0, unit(0, 5)), ShapeError);
  }

  SUBCASE("capacity clamps") {
    for (std::size_t i = 0; i < 3; ++i) bank.push(1, unit(i, 4));
    CHECK(bank.size(1) == 3);
    bank.push(1, unit(3, 4));
    CHECK(bank.size(1) == 3);
  }

  SUBCASE("stored vectors are L2-normalized") {
    bank.push(0, {3.0, 0.0, 4.0, 0.0});
    CHECK(bank.slots(0)[0][0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(bank.slots(0)[0][2] == doctest::Approx(0.8).epsilon(1e-15));
  }
}

TEST_CASE("positive and negative keys") {
  FeatureBank bank(2, 2, 8);
  bank.push(0, {1.0, 0.0});
  bank.push(0, {0.0, 1.0});
  auto pos = bank.positive_key(0);
  CHECK(pos[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(pos[1] == doctest::Approx(0.5).epsilon(1e-15));

  bank.push(1, {1.0, 0.0});
  bank.push(1, {0.0, 1.0});
  bank.push(1, {1.0, 1.0});
  Tensor negs = bank.negative_keys(0);
  CHECK(negs.shape() == Shape{3, 2});

  FeatureBank empty(2, 2, 4);
  CHECK_THROWS_AS(empty.positive_key(0), EmptyBankError);
  CHECK_THROWS_AS(empty.negative_keys(0), EmptyBankError);
}

TEST_CASE("positive_key equals a brute-force mean") {
  Rng rng(77);
  FeatureBank bank(3, 6, 5);
  std::deque<std::vector<double>> model;
  for (int i = 0; i < 12; ++i) {
    std::vector<double> v(6);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    std::vector<double> vn = v;
    for (auto& x : vn) x /= n;
    bank.push(1, v);
    model.push_back(vn);
    while (model.size() > 5) model.pop_front();
  }
  auto pos = bank.positive_key(1);
  for (std::size_t j = 0; j < 6; ++j) {
    double mean = 0.0;
    for (const auto& v : model) mean += v[j];
    mean /= static_cast<double>(model.size());
    CHECK(pos[j] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("FIFO order preserved under interleaved pushes") {
  Rng rng(123);
  const std::size_t classes = 3, dim = 2, cap = 4;
  FeatureBank bank(classes, dim, cap);
  std::vector<std::deque<std::vector<double>>> model(classes);
  for (int step = 0; step < 500; ++step) {
    const std::size_t cls = rng.uniform_index(classes);
    std::vector<double> v = {rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)};
    bank.push(cls, v);
    double n = std::sqrt(v[0] * v[0] + v[1] * v[1]);
    model[cls].push_back({v[0] / n, v[1] / n});
    while (model[cls].size() > cap) model[cls].pop_front();
    for (std::size_t c = 0; c < classes; ++c) {
      REQUIRE(bank.size(c) == model[c].size());
      for (std::size_t i = 0; i < model[c].size(); ++i)
        for (std::size_t j = 0; j < dim; ++j)
          CHECK(bank.slots(c)[i][j] == doctest::Approx(model[c][i][j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("extract_prototypes") {
  SUBCASE("constant field with a full mask for class 0") {
    const std::size_t d = 3;
    Tensor feats({d, 4, 4});
    const double vec[3] = {1.0, 2.0, -2.0};  // norm 3
    for (std::size_t c = 0; c < d; ++c)
      for (std::size_t s = 0; s < 16; ++s) feats[c * 16 + s] = vec[c];
    Tensor labels({2, 8, 8});
    for (std::size_t s = 0; s < 64; ++s) labels[s] = 1.0;  // class 0 everywhere
    auto protos = extract_prototypes(constant(feats), constant(labels));
    REQUIRE(protos.count(0) == 1);
    CHECK(protos.count(1) == 0);  // empty mask omitted
    CHECK(protos.at(0)->value[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(protos.at(0)->value[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(protos.at(0)->value[2] == doctest::Approx(-2.0 / 3.0).epsilon(1e-12));
  }

  SUBCASE("half-image mask matches the brute-force masked mean oracle") {
    Rng rng(31);
    const std::size_t d = 4, hs = 4, full = 8;
    Tensor feats = oracle::random_tensor({d, hs, hs}, rng);
    Tensor labels({2, full, full});
    for (std::size_t y = 0; y < full; ++y)
      for (std::size_t x = 0; x < full; ++x) {
        labels[y * full + x] = x < full / 2 ? 1.0 : 0.0;
        labels[64 + y * full + x] = x < full / 2 ? 0.0 : 1.0;
      }
    auto protos = extract_prototypes(constant(feats), constant(labels));
    REQUIRE(protos.count(0) == 1);

    // independent path: downsample the mask with the bilinear oracle, masked
    // mean of features, L2-normalize
    std::vector<double> mask0(labels.vec().begin(), labels.vec().begin() + 64);
    auto small = oracle::resize_linear_2d_oracle(mask0, full, full, hs, hs);
    std::vector<double> mean(d, 0.0);
    double mass = 0.0;
    for (std::size_t s = 0; s < hs * hs; ++s) {
      mass += small[s];
      for (std::size_t c = 0; c < d; ++c) mean[c] += small[s] * feats[c * hs * hs + s];
    }
    for (auto& m : mean) m /= mass;
    double nrm = 0.0;
    for (double m : mean) nrm += m * m;
    nrm = std::sqrt(nrm);
    for (std::size_t c = 0; c < d; ++c)
      CHECK(protos.at(0)->value[c] == doctest::Approx(mean[c] / nrm).epsilon(1e-6));
  }

  SUBCASE("rank mismatch is a shape error") {
    Tensor feats({3, 4, 4});
    Tensor labels({2, 8, 8, 8});
    CHECK_THROWS_AS(extract_prototypes(constant(feats), constant(labels)), ShapeError);
  }
}

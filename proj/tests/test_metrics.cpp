#include "clipcl/metrics.hpp"
#include "clipcl/training.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <random>

using namespace clipcl;

TEST_SUITE("evaluation") {
  TEST_CASE("predictions and accuracy match brute force") {
    std::mt19937_64 rng(1);
    std::uniform_int_distribution<int> coarse(-2, 2);
    std::uniform_int_distribution<int> size(1, 9);
    for (int trial = 0; trial < 40; ++trial) {
      int k = size(rng) + 1;
      int n = size(rng);
      Mat classes(3, k);
      Mat images(3, n);
      for (Eigen::Index i = 0; i < classes.size(); ++i) classes.data()[i] = coarse(rng);
      for (Eigen::Index i = 0; i < images.size(); ++i) images.data()[i] = coarse(rng);
      std::vector<int> truth;
      for (int i = 0; i < n; ++i) truth.push_back(std::uniform_int_distribution<int>(0, k - 1)(rng));
      auto predicted = predict(images, classes);
      CHECK(predicted == oracle::predict(images, classes));
      CHECK(accuracy(predicted, truth) == oracle::accuracy(predicted, truth));
    }
    CHECK_THROWS_AS(accuracy(std::vector<int>{}, std::vector<int>{}), InvalidInput);
    CHECK_THROWS_AS(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), InvalidInput);
  }

  TEST_CASE("recall@k matches brute force on random instances with ties") {
    std::mt19937_64 rng(2);
    std::vector<int> ks = {1, 2, 3};
    for (int trial = 0; trial < 40; ++trial) {
      auto inst = oracle::random_retrieval(rng);
      for (bool tr : {true, false}) {
        auto dir = tr ? RetrievalDirection::TextRetrieval : RetrievalDirection::ImageRetrieval;
        auto got = recall_from_embeddings(inst.images, inst.captions, inst.set, ks, dir);
        CHECK(got == oracle::recall(inst.images, inst.captions, inst.set, ks, tr));
      }
    }
  }

  TEST_CASE("recall ties go to the lower index") {
    RetrievalSet set;
    set.fold_count = 1;
    set.images.features = Mat::Zero(1, 2);
    set.images.class_ids = {0, 0};
    set.captions = {TextSequence{{0}}, TextSequence{{0}}};
    set.caption_image = {0, 1};
    Mat images = Mat::Ones(2, 2);
    Mat captions = Mat::Ones(2, 2);
    std::vector<int> k1 = {1};
    auto tr = recall_from_embeddings(images, captions, set, k1, RetrievalDirection::TextRetrieval);
    auto ir = recall_from_embeddings(images, captions, set, k1, RetrievalDirection::ImageRetrieval);
    CHECK(tr.at(1) == 0.5);
    CHECK(ir.at(1) == 0.5);
    std::vector<int> too_big = {3};
    CHECK_THROWS_AS(recall_from_embeddings(images, captions, set, too_big, RetrievalDirection::TextRetrieval),
                    InvalidInput);
  }

  TEST_CASE("backward transfer") {
    AccuracyMatrix m;
    m.add_row({0.50});
    m.add_row({0.45, 0.65});
    m.add_row({0.40, 0.60, 0.70});
    CHECK(backward_transfer(m) == doctest::Approx(-0.075).epsilon(1e-14));
    AccuracyMatrix one;
    one.add_row({0.5});
    CHECK_THROWS_AS(backward_transfer(one), UndefinedMetric);
    CHECK_THROWS_AS(m.add_row({0.1, 0.2}), InvalidInput);
    AccuracyMatrix bad;
    CHECK_THROWS_AS(bad.add_row({1.2}), InvalidInput);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
      int s = 2 + trial % 5;
      AccuracyMatrix r;
      for (int row = 0; row < s; ++row) {
        std::vector<double> v;
        for (int i = 0; i <= row; ++i) v.push_back(u(rng));
        r.add_row(v);
      }
      CHECK(backward_transfer(r) == oracle::bwt(r.acc));
      CHECK(session_average_ut_acc(r.acc.back()) == oracle::mean(r.acc.back()));
    }
  }

  TEST_CASE("A-Acc arithmetic") {
    CHECK(to_percent(a_acc(0.7421, 0.4417)) == 59.19);
    CHECK(to_percent(a_acc(0.2536, 0.6262)) == 43.99);
    CHECK(a_acc(0.5, 1.0) == 0.75);
    CHECK_THROWS_AS(a_acc(1.5, 0.5), InvalidInput);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
      double ut = u(rng);
      double zs = u(rng);
      CHECK(a_acc(ut, zs) == (ut + zs) / 2.0);
    }
  }

  TEST_CASE("overall and session-averaged accuracy differ on unbalanced sessions") {
    std::vector<int> truth;
    std::vector<int> predicted;
    for (int i = 0; i < 100; ++i) {
      truth.push_back(0);
      predicted.push_back(i < 90 ? 0 : 1);
    }
    for (int i = 0; i < 10; ++i) {
      truth.push_back(1);
      predicted.push_back(i < 1 ? 1 : 0);
    }
    double s1 = subset_accuracy(predicted, truth, {0});
    double s2 = subset_accuracy(predicted, truth, {1});
    CHECK(s1 == doctest::Approx(0.9));
    CHECK(s2 == doctest::Approx(0.1));
    std::vector<double> row = {s1, s2};
    CHECK(accuracy(predicted, truth) == doctest::Approx(91.0 / 110.0).epsilon(1e-15));
    CHECK(session_average_ut_acc(row) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(subset_accuracy(predicted, truth, {7}), InvalidInput);
  }

  TEST_CASE("metrics serialize in percent and back") {
    MetricsReport m;
    m.ut_acc = 0.61234;
    m.ut_acc_overall = 0.6;
    m.zs_acc = 0.9;
    m.a_acc = a_acc(m.ut_acc, m.zs_acc);
    m.tr_at = {{1, 0.5}, {5, 0.75}};
    m.ir_at = {{1, 0.25}};
    m.bwt = -0.07512;
    auto pct = to_json(m, true);
    CHECK(pct.at("ut_acc") == 61.23);
    CHECK(pct.at("bwt") == -7.51);
    auto exact = metrics_from_json(to_json(m, false));
    CHECK(exact.ut_acc == m.ut_acc);
    CHECK(exact.tr_at == m.tr_at);
    CHECK(exact.bwt == m.bwt);
  }

  TEST_CASE("shuffle probe bookkeeping") {
    auto cfg = testing::small_lab_config();
    auto lab = make_lab(cfg, 0);
    const auto& enc = lab.encoder;
    auto params = enc.init_parameters(0);
    std::vector<int> ks = {1, 5};
    auto probe = shuffle_probe(enc, params, lab.splits.retrieval, 7, ks);
    CHECK(probe.chance == doctest::Approx(1.0 / 24.0));
    CHECK(probe.tr_delta.at(1) == probe.shuffled.tr_at.at(1) - probe.original.tr_at.at(1));
    auto direct = recall_at_k(enc, params, lab.splits.retrieval, ks, RetrievalDirection::TextRetrieval);
    CHECK(direct == probe.original.tr_at);
  }
}

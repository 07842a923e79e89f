#include "clipcl/distill.hpp"
#include "clipcl/gfk.hpp"
#include "clipcl/imm.hpp"
#include "clipcl/replay.hpp"
#include "clipcl/rkr.hpp"
#include "clipcl/similarity.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

using namespace clipcl;

namespace {

ModelConfig small_model() {
  ModelConfig m;
  m.input_dim = 6;
  m.embed_dim = 5;
  m.hidden_dim = 7;
  m.token_dim = 4;
  m.max_seq_len = 8;
  m.vocab_size = 9;
  return m;
}

Mat gaussian(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Mat orthonormal(Eigen::Index d, Eigen::Index k, std::mt19937_64& rng) {
  Eigen::HouseholderQR<Mat> qr(gaussian(d, k, rng));
  return qr.householderQ() * Mat::Identity(d, k);
}

ParameterSet perturbed(const ParameterSet& p, double sigma, std::uint64_t seed) {
  ParameterSet out = p;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& [name, t] : out.tensors())
    if (t.partition != Partition::LogitScale)
      for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] += g(rng);
  return out;
}

std::vector<TextSequence> random_sequences(int count, int len, int vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> pick(0, vocab - 1);
  std::vector<TextSequence> out(static_cast<std::size_t>(count));
  for (auto& s : out)
    for (int i = 0; i < len; ++i) s.ids.push_back(pick(rng));
  return out;
}

double entropy(const Vec& p) { return -(p.array() * p.array().log()).sum(); }

// Geodesic between span(a) and span(b) built directly from the SVD of a^T b:
// Pi(nu) = a U cos(nu theta) + H sin(nu theta) with H the unit directions
// from span(a) towards span(b).
Mat integrated_projection(const Mat& a, const Mat& b, int points) {
  Eigen::JacobiSVD<Mat> svd(a.transpose() * b, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Vec cosines = svd.singularValues().cwiseMin(1.0);
  Eigen::Index k = a.cols();
  Vec theta(k);
  Mat h = Mat::Zero(a.rows(), k);
  Mat start = a * svd.matrixU();
  Mat end = b * svd.matrixV();
  for (Eigen::Index i = 0; i < k; ++i) {
    theta(i) = std::acos(cosines(i));
    Vec dir = end.col(i) - start.col(i) * cosines(i);
    if (dir.norm() > 1e-14) h.col(i) = dir.normalized();
  }
  Mat q = Mat::Zero(a.rows(), a.rows());
  double step = 1.0 / (points - 1);
  for (int j = 0; j < points; ++j) {
    double nu = j * step;
    Mat pi = start * (nu * theta).array().cos().matrix().asDiagonal();
    pi += h * (nu * theta).array().sin().matrix().asDiagonal();
    double w = (j == 0 || j == points - 1) ? 0.5 : 1.0;
    q += w * step * pi * pi.transpose();
  }
  return q;
}

}  // namespace

TEST_SUITE("cl-methods") {
  TEST_CASE("lwf_loss examples") {
    Vec u = Vec::Constant(4, 0.25);
    for (auto dir : {DistillDirection::AsPrinted, DistillDirection::Conventional})
      CHECK(lwf_loss(u, u, dir) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    Vec old(3);
    old << 0.2, 0.5, 0.3;
    Vec onehot = Vec::Zero(3);
    onehot(1) = 1.0;
    CHECK(lwf_loss(onehot, old, DistillDirection::AsPrinted) == doctest::Approx(-std::log(0.5)).epsilon(1e-14));
    CHECK(lwf_loss(old, onehot, DistillDirection::Conventional) == doctest::Approx(-std::log(0.5)).epsilon(1e-14));
    Vec zero_old(3);
    zero_old << 0.0, 0.5, 0.5;
    Vec first = Vec::Zero(3);
    first(0) = 1.0;
    CHECK(lwf_loss(first, zero_old, DistillDirection::AsPrinted) == doctest::Approx(-std::log(1e-12)));
    CHECK_THROWS_AS(lwf_loss(u, old), InvalidInput);
  }

  TEST_CASE("distillation losses equal the teacher entropy for identical models") {
    std::mt19937_64 rng(2);
    Mat f = gaussian(5, 4, rng);
    f.colwise().normalize();
    Mat c = gaussian(5, 6, rng);
    c.colwise().normalize();
    Mat p = class_probabilities(f, c, 8.0);
    double expected = 0.0;
    for (Eigen::Index j = 0; j < p.cols(); ++j) expected += entropy(p.col(j));
    expected /= static_cast<double>(p.cols());
    for (auto dir : {DistillDirection::AsPrinted, DistillDirection::Conventional})
      CHECK(distill_loss(f, c, 8.0, p, dir).loss == doctest::Approx(expected).epsilon(1e-12));
    CHECK_THROWS_AS(distill_loss(f, c, 8.0, p.topRows(3), DistillDirection::AsPrinted), InvalidInput);
  }

  TEST_CASE("LwF distillation gradient matches finite differences") {
    DualEncoder enc(small_model());
    auto teacher = enc.init_parameters(1);
    auto student = perturbed(teacher, 0.3, 2);
    std::mt19937_64 rng(3);
    Mat x = gaussian(6, 5, rng);
    auto prompts = random_sequences(4, 3, 9, rng);
    Mat probs = class_probabilities(enc.encode_images(teacher, x), enc.encode_texts(teacher, prompts), teacher.tau());
    for (auto dir : {DistillDirection::AsPrinted, DistillDirection::Conventional}) {
      auto loss_of = [&](const ParameterSet& p) {
        return distill_loss(enc.encode_images(p, x), enc.encode_texts(p, prompts), p.tau(), probs, dir).loss;
      };
      Gradients g = Gradients::full(student);
      g.trainable.erase(kLogitScaleName);
      ImageCache ic;
      TextCache tc;
      auto d = distill_loss(enc.encode_images(student, x, &ic), enc.encode_texts(student, prompts, &tc),
                            student.tau(), probs, dir);
      enc.backward_images(student, ic, d.d_images, g);
      enc.backward_texts(student, tc, d.d_classes, g);
      auto report = testing::finite_difference_check(student, g, loss_of, 30, 5);
      CHECK(report.checked >= 10);
      CHECK_MESSAGE(report.max_rel_error <= 1e-4, to_string(dir), " ", report.worst);
    }
  }

  TEST_CASE("GFK closed form matches trapezoidal integration") {
    std::mt19937_64 rng(7);
    struct Case {
      int d, k;
      double tilt;  // < 0: independent random subspace
    };
    std::vector<Case> cases = {{4, 2, -1}, {4, 2, -1}, {4, 1, -1}, {5, 2, -1}, {5, 3, -1}, {6, 2, -1}, {6, 4, -1},
                               {7, 3, -1}, {8, 4, -1}, {8, 1, -1}, {9, 4, -1}, {10, 2, -1}, {10, 4, -1},
                               {6, 3, -1}, {4, 2, 0.0},  {6, 1, 0.0},  {5, 2, 1e-9}, {8, 4, 1e-6},
                               {6, 2, 1e-3}, {4, 4, -1}};
    REQUIRE(cases.size() == 20);
    for (const auto& tc : cases) {
      Mat a = orthonormal(tc.d, tc.k, rng);
      Mat b;
      if (tc.tilt < 0) {
        b = orthonormal(tc.d, tc.k, rng);
      } else {
        b = a + tc.tilt * gaussian(tc.d, tc.k, rng);
        Eigen::HouseholderQR<Mat> qr(b);
        b = qr.householderQ() * Mat::Identity(tc.d, tc.k);
      }
      auto kernel = flow_kernel(geodesic_flow(a, b));
      Mat oracle = integrated_projection(a, b, 10001);
      CAPTURE(tc.d);
      CAPTURE(tc.k);
      CAPTURE(tc.tilt);
      CHECK((kernel.q - oracle).cwiseAbs().maxCoeff() <= 1e-6);
      CHECK((kernel.q - kernel.q.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
      Eigen::SelfAdjointEigenSolver<Mat> es(kernel.q);
      CHECK(es.eigenvalues().minCoeff() >= -1e-12);
      CHECK((kernel.q_sqrt * kernel.q_sqrt - kernel.q).cwiseAbs().maxCoeff() <= 1e-10);
    }
  }

  TEST_CASE("geodesic flow endpoints span the two subspaces") {
    std::mt19937_64 rng(8);
    Mat a = orthonormal(6, 2, rng);
    Mat b = orthonormal(6, 2, rng);
    auto flow = geodesic_flow(a, b);
    Mat p0 = flow.at(0.0);
    Mat p1 = flow.at(1.0);
    CHECK((p0 * p0.transpose() - a * a.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((p1 * p1.transpose() - b * b.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
    for (double angle : flow.angles) {
      CHECK(angle >= 0.0);
      CHECK(angle <= std::numbers::pi / 2 + 1e-12);
    }
  }

  TEST_CASE("identical feature matrices give the projector of their subspace") {
    std::mt19937_64 rng(9);
    Mat z = gaussian(6, 10, rng);
    auto kernel = geodesic_flow_kernel(z, z, 3);
    Mat p = principal_subspace(z, 3);
    CHECK((kernel.q - p * p.transpose()).cwiseAbs().maxCoeff() <= 1e-8);
    Mat rank1 = gaussian(6, 1, rng) * gaussian(1, 10, rng);
    CHECK_THROWS_AS(geodesic_flow_kernel(rank1, rank1, 2), RankDeficient);
    CHECK_THROWS_AS(geodesic_flow_kernel(z, z, 11), InvalidInput);
    CHECK_THROWS_AS(geodesic_flow_kernel(z, gaussian(5, 10, rng), 2), InvalidInput);
    CHECK(default_subspace_dim(32, 12) == 8);
    CHECK(default_subspace_dim(5, 12) == 4);
    CHECK(default_subspace_dim(32, 6) == 6);
  }

  TEST_CASE("geodl_loss examples") {
    GeodesicFlowKernel identity;
    identity.q = Mat::Identity(3, 3);
    identity.q_sqrt = Mat::Identity(3, 3);
    Vec e0 = Vec::Unit(3, 0);
    Vec e1 = Vec::Unit(3, 1);
    CHECK(geodl_loss(e0, e0, identity) == doctest::Approx(-1.0).epsilon(1e-15));
    CHECK(std::abs(geodl_loss(e0, e1, identity)) <= 1e-15);

    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
      Mat a = gaussian(5, 5, rng);
      GeodesicFlowKernel k;
      k.q = a * a.transpose();
      Eigen::SelfAdjointEigenSolver<Mat> es(k.q);
      k.q_sqrt = es.operatorSqrt();
      Vec zo = gaussian(5, 1, rng).col(0);
      Vec zn = gaussian(5, 1, rng).col(0);
      Vec po = k.q_sqrt * zo;
      Vec pn = k.q_sqrt * zn;
      double cosine = pn.dot(po) / (pn.norm() * po.norm());
      CHECK(std::abs(geodl_loss(zo, zn, k) + cosine) <= 1e-8);
    }

    GeodesicFlowKernel proj;
    proj.q = Mat::Zero(3, 3);
    proj.q(0, 0) = 1.0;
    proj.q_sqrt = proj.q;
    CHECK_THROWS_AS(geodl_loss(e1, e0, proj), DegenerateProjection);
  }

  TEST_CASE("GeoDL gradient matches finite differences") {
    DualEncoder enc(small_model());
    auto teacher = enc.init_parameters(3);
    auto student = perturbed(teacher, 0.3, 4);
    std::mt19937_64 rng(5);
    Mat x = gaussian(6, 6, rng);
    Mat z_old = enc.encode_images(teacher, x);
    auto kernel = geodesic_flow_kernel(z_old, enc.encode_images(student, x), 3);
    auto loss_of = [&](const ParameterSet& p) { return geodl_batch(z_old, enc.encode_images(p, x), kernel).loss; };
    Gradients g = Gradients::for_params(student, student.names_in(Partition::Image));
    ImageCache ic;
    auto l = geodl_batch(z_old, enc.encode_images(student, x, &ic), kernel);
    enc.backward_images(student, ic, l.d_new, g);
    auto report = testing::finite_difference_check(student, g, loss_of, 30, 6);
    CHECK(report.checked >= 10);
    CHECK_MESSAGE(report.max_rel_error <= 1e-4, report.worst);
  }

  TEST_CASE("IMM merge endpoints, mean and affinity") {
    DualEncoder enc(small_model());
    auto a = enc.init_parameters(1);
    auto b = perturbed(a, 0.5, 9);
    CHECK(imm_merge(a, b, 0.0) == a);
    CHECK(imm_merge(a, b, 1.0) == b);
    for (double alpha : {0.1, 0.37, 0.5}) {
      auto m1 = imm_merge(a, b, alpha);
      auto m2 = imm_merge(a, b, 1.0 - alpha);
      for (const auto& name : a.names())
        CHECK((m1.at(name) + m2.at(name) - a.at(name) - b.at(name)).cwiseAbs().maxCoeff() <= 1e-12);
    }
    ParameterSet p2;
    p2.add("w", Partition::Image, Mat::Constant(1, 1, 2.0));
    ParameterSet p4;
    p4.add("w", Partition::Image, Mat::Constant(1, 1, 4.0));
    CHECK(imm_merge(p2, p4, 0.5).at("w")(0, 0) == 3.0);

    auto io = imm_merge(a, b, 0.5, UpdateOption::IO);
    for (const auto& name : a.names_in(Partition::Text)) CHECK(io.at(name) == a.at(name));
    CHECK(io.at(kImageFc1 + ".weight") != a.at(kImageFc1 + ".weight"));
    auto to = imm_merge(a, b, 0.5, UpdateOption::TO);
    for (const auto& name : a.names_in(Partition::Image)) CHECK(to.at(name) == a.at(name));
    b.at(kLogitScaleName)(0, 0) += 1.0;
    CHECK(imm_merge(a, b, 0.5).at(kLogitScaleName) == a.at(kLogitScaleName));

    CHECK_THROWS_AS(imm_merge(a, b, 1.5), InvalidInput);
    CHECK_THROWS_AS(imm_merge(a, b, -0.1), InvalidInput);
    ParameterSet wide;
    wide.add("w", Partition::Image, Mat::Zero(1, 2));
    CHECK_THROWS_AS(imm_merge(p2, wide, 0.5), InvalidInput);
  }

  TEST_CASE("RKR scaling") {
    ParameterSet p;
    p.add(kImageFc1 + ".weight", Partition::Image, Mat::Ones(3, 2));
    p.add(kImageFc1 + ".bias", Partition::Image, Mat::Zero(3, 1));
    p.add(kImageFc2 + ".weight", Partition::Image, Mat::Ones(4, 3));
    p.add(kImageFc2 + ".bias", Partition::Image, Mat::Zero(4, 1));
    install_rkr_adapters(p, {true, false, false});
    Mat out(3, 2);
    out << 1, 2, 3, 4, 5, 6;
    CHECK(rkr_apply(out, p, kImageFc1) == out);
    p.at(rkr_scale_name(kImageFc1)).setZero();
    CHECK(rkr_apply(out, p, kImageFc1).isZero(0.0));
    p.at(rkr_scale_name(kImageFc1)) << 2, 0, -1;
    Mat expected(3, 2);
    expected << 2, 4, 0, 0, -5, -6;
    CHECK(rkr_apply(out, p, kImageFc1) == expected);
    CHECK(rkr_apply(out, p, kTextFc1) == out);
    CHECK_THROWS_AS(rkr_apply(out, p, kImageFc2), InvalidInput);
  }

  TEST_CASE("replayed vocabulary shape and errors") {
    std::mt19937_64 rng(1);
    auto r = build_replayed_vocabulary(50, 10, 100, rng);
    CHECK(r.size() == 100);
    for (const auto& s : r.sequences) {
      CHECK(s.size() == 10);
      for (auto id : s.ids) CHECK((id >= 0 && id < 50));
    }
    auto tiny = build_replayed_vocabulary(1, 1, 2, rng);
    REQUIRE(tiny.size() == 2);
    CHECK(tiny.sequences[0] == tiny.sequences[1]);
    CHECK_THROWS_AS(build_replayed_vocabulary(10, 3, 1, rng), InvalidInput);
    CHECK_THROWS_AS(build_replayed_vocabulary(10, 0, 5, rng), InvalidInput);
    std::mt19937_64 a(42), b(42);
    CHECK(build_replayed_vocabulary(30, 4, 8, a).sequences == build_replayed_vocabulary(30, 4, 8, b).sequences);

    std::vector<TextSequence> corpus = {{{1, 2}}, {{3}}, {{4, 5, 6}}};
    auto cap = sample_caption_replay(corpus, 12, rng);
    CHECK(cap.size() == 12);
    CHECK(cap.source == ReplaySource::CaptionCorpus);
    for (const auto& s : cap.sequences) CHECK(std::find(corpus.begin(), corpus.end(), s) != corpus.end());
    CHECK_THROWS_AS(sample_caption_replay({}, 4, rng), InvalidInput);

    Vocabulary v({"a", "b", "c"});
    ReplayedVocabulary dump;
    dump.sequences = {{{0, 2}}, {{1}}};
    std::ostringstream os;
    write_replay_dump(os, dump, v);
    CHECK(os.str() == "a c\nb\n");
  }

  TEST_CASE("replayed tokens are uniform over the vocabulary") {
    std::mt19937_64 rng(2024);
    const int vocab = 10;
    auto r = build_replayed_vocabulary(vocab, 10, 10000, rng);
    std::vector<double> counts(vocab, 0.0);
    for (const auto& s : r.sequences)
      for (auto id : s.ids) counts[static_cast<std::size_t>(id)] += 1.0;
    const double n = 1e5;
    const double p = 1.0 / vocab;
    const double mean = n * p;
    const double sigma = std::sqrt(n * p * (1 - p));
    double chi2 = 0.0;
    for (double c : counts) {
      CHECK(std::abs(c - mean) <= 3.0 * sigma);
      chi2 += (c - mean) * (c - mean) / mean;
    }
    CHECK(chi2 < 27.88);  // 0.999 quantile, 9 degrees of freedom
  }

  TEST_CASE("VR-LwF examples") {
    DualEncoder enc(small_model());
    auto params = enc.init_parameters(4);
    std::mt19937_64 rng(6);
    Mat x = gaussian(6, 5, rng);
    Mat f = enc.encode_images(params, x);
    auto pseudo = random_sequences(7, 4, 9, rng);
    auto l = vr_lwf_loss(enc, f, f, pseudo, params, params, params.tau(), params.tau(), nullptr);
    Mat t = enc.encode_texts(params, pseudo);
    double expected = 0.0;
    for (Eigen::Index j = 0; j < f.cols(); ++j) expected += entropy(classify(f.col(j), t, params.tau()));
    CHECK(l.loss == doctest::Approx(expected / 5.0).epsilon(1e-12));
    CHECK(l.teacher_probs.rows() == 7);

    std::vector<TextSequence> twice = {pseudo[0], pseudo[0]};
    auto sym = vr_lwf_loss(enc, f, f, twice, params, perturbed(params, 0.2, 1), 10.0, 10.0,
                           nullptr);
    CHECK(sym.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    std::vector<TextSequence> one = {pseudo[0]};
    CHECK_THROWS_AS(vr_lwf_loss(enc, f, f, one, params, params, 10.0, 10.0, nullptr), InvalidInput);
  }

  TEST_CASE("VR-LwF gradient matches finite differences") {
    DualEncoder enc(small_model());
    auto teacher = enc.init_parameters(5);
    auto student = perturbed(teacher, 0.3, 6);
    std::mt19937_64 rng(7);
    Mat x = gaussian(6, 4, rng);
    auto pseudo = random_sequences(6, 5, 9, rng);
    Mat f_old = enc.encode_images(teacher, x);
    for (auto dir : {DistillDirection::AsPrinted, DistillDirection::Conventional}) {
      auto loss_of = [&](const ParameterSet& p) {
        return vr_lwf_loss(enc, f_old, enc.encode_images(p, x), pseudo, teacher, p, teacher.tau(), p.tau(), nullptr,
                           dir)
            .loss;
      };
      Gradients g = Gradients::full(student);
      g.trainable.erase(kLogitScaleName);
      ImageCache ic;
      Mat f_new = enc.encode_images(student, x, &ic);
      auto l = vr_lwf_loss(enc, f_old, f_new, pseudo, teacher, student, teacher.tau(), student.tau(), &g, dir);
      enc.backward_images(student, ic, l.d_images, g);
      auto report = testing::finite_difference_check(student, g, loss_of, 30, 8);
      CHECK(report.checked >= 10);
      CHECK_MESSAGE(report.max_rel_error <= 1e-4, to_string(dir), " ", report.worst);
      CHECK(g.buffers.at(kLogitScaleName).isZero(0.0));
    }
  }

  TEST_CASE("multi-session VR-LwF terms") {
    DualEncoder enc(small_model());
    auto params = enc.init_parameters(6);
    auto student = perturbed(params, 0.2, 3);
    std::mt19937_64 rng(8);
    Mat x = gaussian(6, 4, rng);
    Mat f_old = enc.encode_images(params, x);
    Mat f_new = enc.encode_images(student, x);
    auto pseudo = random_sequences(5, 3, 9, rng);
    auto single = vr_lwf_loss(enc, f_old, f_new, pseudo, params, student, 10.0, 10.0, nullptr);
    auto first = vr_lwf_mst_loss(enc, f_old, f_new, pseudo, {}, params, params, student, 10.0, 10.0, nullptr);
    CHECK(first.previous_term == 0.0);
    CHECK(first.previous_classes == 0);
    CHECK(first.loss == doctest::Approx(single.loss).epsilon(1e-14));

    auto prompts = random_sequences(10, 4, 9, rng);
    auto same = vr_lwf_mst_loss(enc, f_old, f_old, pseudo, prompts, params, params, params, 10.0, 10.0, nullptr);
    CHECK(same.previous_classes == 10);
    Mat t = enc.encode_texts(params, prompts);
    double expected = 0.0;
    for (Eigen::Index j = 0; j < f_old.cols(); ++j) expected += entropy(classify(f_old.col(j), t, 10.0));
    CHECK(same.previous_term == doctest::Approx(expected / 4.0).epsilon(1e-12));
    CHECK(same.loss == doctest::Approx(same.replay_term + same.previous_term).epsilon(1e-14));
  }

  TEST_CASE("snapshot teachers are immune to later parameter changes") {
    DualEncoder enc(small_model());
    auto teacher = enc.init_parameters(7);
    auto student = perturbed(teacher, 0.2, 8);
    std::mt19937_64 rng(9);
    Mat x = gaussian(6, 4, rng);
    auto pseudo = random_sequences(5, 3, 9, rng);
    Mat f_old = enc.encode_images(teacher, x);
    auto snap = snapshot(teacher);
    Gradients g1 = Gradients::full(student);
    double l1 = vr_lwf_loss(enc, f_old, enc.encode_images(student, x), pseudo, *snap, student, 10.0, 10.0, &g1).loss;
    teacher = perturbed(teacher, 1.0, 10);
    Gradients g2 = Gradients::full(student);
    double l2 = vr_lwf_loss(enc, f_old, enc.encode_images(student, x), pseudo, *snap, student, 10.0, 10.0, &g2).loss;
    CHECK(l1 == l2);
    CHECK(g1.buffers == g2.buffers);
    CHECK(!(*snap == teacher));
  }
}

#include "clipcl/model.hpp"
#include "clipcl/parameters.hpp"
#include "clipcl/rkr.hpp"
#include "clipcl/similarity.hpp"
#include "clipcl/vocabulary.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace clipcl;

namespace {

Vocabulary toy_vocab() {
  return Vocabulary({"this", "is", "a", "photo", "of", ".", "dog", "cat", "red", "fox", "sky", "tree"});
}

ModelConfig toy_model(int vocab) {
  ModelConfig m;
  m.input_dim = 6;
  m.embed_dim = 5;
  m.hidden_dim = 7;
  m.token_dim = 4;
  m.max_seq_len = 8;
  m.vocab_size = vocab;
  return m;
}

Mat random_unit_columns(Eigen::Index d, Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Mat m(d, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  m.colwise().normalize();
  return m;
}

std::vector<TextSequence> toy_texts() {
  return {{{0, 1, 6}}, {{7}}, {{2, 3, 4, 8, 9, 5}}, {{10, 11, 10}}};
}

}  // namespace

TEST_SUITE("core-model") {
  TEST_CASE("vocabulary tokenizes known words and rejects unknown ones") {
    auto v = toy_vocab();
    CHECK(v.tokenize("this is  a dog") == std::vector<TokenId>{0, 1, 2, 6});
    CHECK_THROWS_AS((void)v.tokenize("this is a wolf"), InvalidInput);
    CHECK_THROWS_AS((void)v.id("wolf"), InvalidInput);
    CHECK(v.add("dog") == 6);
    CHECK(v.add("wolf") == 12);
  }

  TEST_CASE("render_prompt fills the class slot of the template") {
    auto v = toy_vocab();
    auto seq = render_prompt("dog", PromptTemplate::photo_of(), v);
    CHECK(seq.ids == v.tokenize("this is a photo of dog ."));
    CHECK(render_prompt("dog", PromptTemplate::empty(), v).ids == std::vector<TokenId>{6});
    auto other = render_prompt("red fox", PromptTemplate::photo_of(), v);
    REQUIRE(other.ids.size() == seq.ids.size() + 1);
    CHECK(std::equal(seq.ids.begin(), seq.ids.begin() + 5, other.ids.begin()));
    CHECK(other.ids.back() == seq.ids.back());
    CHECK_THROWS_AS(render_prompt("wolf", PromptTemplate::photo_of(), v), InvalidInput);
  }

  TEST_CASE("classify examples") {
    Mat t(2, 2);
    t << 1, 0, 0, 1;
    Vec f(2);
    f << std::sqrt(0.5), std::sqrt(0.5);
    Vec p = classify(f, t, 10.0);
    CHECK(p(0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p(1) == doctest::Approx(0.5).epsilon(1e-15));

    std::mt19937_64 rng(3);
    Mat many = random_unit_columns(4, 7, rng);
    Vec g = random_unit_columns(4, 1, rng).col(0);
    Vec q = classify(g, many, 1e-8);
    CHECK((q.array() - 1.0 / 7.0).abs().maxCoeff() <= 1e-6);

    f << 1, 0;
    Vec sharp = classify(f, t, 100.0);
    double expected = std::exp(100.0) / (std::exp(100.0) + std::exp(0.0));
    CHECK(sharp(0) > 1.0 - 1e-10);
    CHECK(sharp(0) == doctest::Approx(expected).epsilon(1e-15));

    CHECK_THROWS_AS(classify(f, Mat(2, 0), 1.0), InvalidInput);
    CHECK_THROWS_AS(classify(f, t, 0.0), InvalidInput);
    CHECK_THROWS_AS(classify(f, t, -1.0), InvalidInput);
  }

  TEST_CASE("classify is a distribution and its argmax ignores tau") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      Mat t = random_unit_columns(6, 9, rng);
      Vec f = random_unit_columns(6, 1, rng).col(0);
      Vec a = classify(f, t, 3.0);
      Vec b = classify(f, t, 97.0);
      CHECK(std::abs(a.sum() - 1.0) <= 1e-6);
      CHECK((a.array() >= 0.0).all());
      CHECK(argmax(a) == argmax(b));
      Vec logits = 3.0 * (t.transpose() * f);
      Vec shifted = softmax((logits.array() + 41.0).matrix());
      CHECK((shifted - a).cwiseAbs().maxCoeff() <= 1e-12);
    }
    Vec tie(3);
    tie << 0.2, 0.7, 0.7;
    CHECK(argmax(tie) == 1);
  }

  TEST_CASE("encoders emit deterministic unit-norm embeddings") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(5);
    std::mt19937_64 rng(1);
    Mat x = random_unit_columns(6, 5, rng);
    Mat f1 = enc.encode_images(params, x);
    Mat f2 = enc.encode_images(params, x);
    CHECK(f1 == f2);
    CHECK(((f1.colwise().norm().array() - 1.0).abs() <= 1e-6).all());
    auto texts = toy_texts();
    Mat t1 = enc.encode_texts(params, texts);
    CHECK(t1 == enc.encode_texts(params, texts));
    CHECK(((t1.colwise().norm().array() - 1.0).abs() <= 1e-6).all());
    CHECK((enc.encode_text(texts[1], params) - t1.col(1)).norm() == 0.0);
  }

  TEST_CASE("encoder input errors") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(5);
    CHECK_THROWS_AS(enc.encode_images(params, Mat::Ones(5, 2)), InvalidInput);
    std::vector<TextSequence> bad = {{{0, 99}}};
    CHECK_THROWS_AS(enc.encode_texts(params, bad), InvalidInput);
    std::vector<TextSequence> empty = {{}};
    CHECK_THROWS_AS(enc.encode_texts(params, empty), InvalidInput);
  }

  TEST_CASE("zero input with nonzero default biases embeds; all-zero biases raise") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(2);
    Mat zero = Mat::Zero(6, 1);
    Mat f = enc.encode_images(params, zero);
    CHECK(std::abs(f.col(0).norm() - 1.0) <= 1e-6);
    params.at(std::string(kImageFc1) + ".bias").setZero();
    params.at(std::string(kImageFc2) + ".bias").setZero();
    CHECK_THROWS_AS(enc.encode_images(params, zero), DegenerateEmbedding);
  }

  TEST_CASE("word order changes the text embedding only mildly at initialization") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(9);
    std::vector<TextSequence> seqs = {{{2, 3, 4, 8, 9}}, {{9, 8, 4, 3, 2}}};
    Mat t = enc.encode_texts(params, seqs);
    double cos = t.col(0).dot(t.col(1));
    CHECK(cos < 1.0 - 1e-9);
    CHECK(cos > 0.9);
  }

  TEST_CASE("contrastive loss limits") {
    Mat eye = Mat::Identity(4, 4);
    CHECK(contrastive_loss(eye, eye, 100.0).loss < 1e-12);
    Mat same = Mat::Zero(4, 5);
    same.row(0).setOnes();
    CHECK(contrastive_loss(same, same, 10.0).loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK_THROWS_AS(contrastive_loss(eye.leftCols(1), eye.leftCols(1), 1.0), InvalidInput);
  }

  TEST_CASE("contrastive loss gradient matches finite differences") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(21);
    std::mt19937_64 rng(4);
    Mat x = random_unit_columns(6, 4, rng) * 2.0;
    auto texts = toy_texts();
    auto loss_of = [&](const ParameterSet& p) {
      return contrastive_loss(enc.encode_images(p, x), enc.encode_texts(p, texts), p.tau()).loss;
    };
    auto trainable = params.names();
    trainable.erase(kLogitScaleName);
    Gradients g = Gradients::for_params(params, trainable);
    ImageCache ic;
    TextCache tc;
    Mat f = enc.encode_images(params, x, &ic);
    Mat t = enc.encode_texts(params, texts, &tc);
    auto l = contrastive_loss(f, t, params.tau());
    enc.backward_images(params, ic, l.d_images, g);
    enc.backward_texts(params, tc, l.d_texts, g);
    auto report = testing::finite_difference_check(params, g, loss_of, 30, 7);
    CHECK(report.checked >= 10);
    CHECK_MESSAGE(report.max_rel_error <= 1e-4, report.worst);

    const double tau = 7.0;
    const double h = 1e-5;
    double numeric = (contrastive_loss(f, t, tau + h).loss - contrastive_loss(f, t, tau - h).loss) / (2 * h);
    double exact = contrastive_loss(f, t, tau).d_tau;
    CHECK(std::abs(numeric - exact) / std::abs(exact) <= 1e-4);
  }

  TEST_CASE("classification cross-entropy gradient matches finite differences") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(8);
    std::mt19937_64 rng(6);
    Mat x = random_unit_columns(6, 5, rng);
    auto prompts = toy_texts();
    std::vector<int> labels = {0, 3, 1, 1, 2};
    auto loss_of = [&](const ParameterSet& p) {
      return cross_entropy_loss(enc.encode_images(p, x), enc.encode_texts(p, prompts), labels, p.tau()).loss;
    };
    Gradients g = Gradients::full(params);
    g.trainable.erase(kLogitScaleName);
    ImageCache ic;
    TextCache tc;
    auto ce = cross_entropy_loss(enc.encode_images(params, x, &ic), enc.encode_texts(params, prompts, &tc), labels,
                                 params.tau());
    enc.backward_images(params, ic, ce.d_images, g);
    enc.backward_texts(params, tc, ce.d_classes, g);
    auto report = testing::finite_difference_check(params, g, loss_of, 30, 9);
    CHECK(report.checked >= 10);
    CHECK_MESSAGE(report.max_rel_error <= 1e-4, report.worst);
    std::vector<int> out_of_range = {0, 4, 1, 1, 2};
    CHECK_THROWS_AS(cross_entropy_loss(ce.d_images, enc.encode_texts(params, prompts), out_of_range, 1.0),
                    InvalidInput);
  }

  TEST_CASE("logit scale is clamped to [1, 100]") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(1);
    CHECK(params.tau() == doctest::Approx(10.0));
    params.at(kLogitScaleName)(0, 0) = 9.0;
    CHECK(params.tau() == doctest::Approx(100.0).epsilon(1e-12));
    params.at(kLogitScaleName)(0, 0) = -3.0;
    CHECK(params.tau() == doctest::Approx(1.0).epsilon(1e-12));
  }

  TEST_CASE("checkpoint round trip is lossless") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(31);
    install_rkr_adapters(params, {true, true, true});
    params.at(rkr_rect_name(std::string(kTextFc2)))(0, 0) = 1.0 / 3.0;
    auto bytes = serialize_checkpoint(params);
    auto back = deserialize_checkpoint(bytes);
    CHECK(back == params);
    CHECK(back.partition(rkr_scale_name(std::string(kImageFc1))) == Partition::ImageAdapter);
    CHECK_THROWS_AS(deserialize_checkpoint("XXXX" + bytes.substr(4)), InvalidInput);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), InvalidInput);
  }

  TEST_CASE("fresh RKR adapters leave outputs bitwise unchanged") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(12);
    std::mt19937_64 rng(2);
    Mat x = random_unit_columns(6, 6, rng);
    auto texts = toy_texts();
    Mat f = enc.encode_images(params, x);
    Mat t = enc.encode_texts(params, texts);
    for (bool rect : {false, true}) {
      ParameterSet with = params;
      install_rkr_adapters(with, {true, true, rect});
      CHECK(rkr_layers(with).size() == 4);
      CHECK(enc.encode_images(with, x) == f);
      CHECK(enc.encode_texts(with, texts) == t);
    }
    Mat out = Mat::Ones(3, 2);
    ParameterSet wrong = params;
    install_rkr_adapters(wrong, {true, false, false});
    CHECK_THROWS_AS(rkr_apply(out, wrong, std::string(kImageFc1)), InvalidInput);
  }

  TEST_CASE("RKR adapter gradients match finite differences") {
    auto v = toy_vocab();
    DualEncoder enc(toy_model(static_cast<int>(v.size())));
    auto params = enc.init_parameters(13);
    install_rkr_adapters(params, {true, true, true});
    std::mt19937_64 rng(5);
    for (const auto& name : params.names())
      if (name.rfind("rkr.", 0) == 0) {
        std::normal_distribution<double> g(0.0, 0.2);
        for (Eigen::Index i = 0; i < params.at(name).size(); ++i) params.at(name).data()[i] += g(rng);
      }
    Mat x = random_unit_columns(6, 4, rng);
    auto texts = toy_texts();
    std::set<std::string> adapters;
    for (const auto& name : params.names())
      if (name.rfind("rkr.", 0) == 0) adapters.insert(name);
    Gradients g = Gradients::for_params(params, adapters);
    ImageCache ic;
    TextCache tc;
    auto l = contrastive_loss(enc.encode_images(params, x, &ic), enc.encode_texts(params, texts, &tc), 5.0);
    enc.backward_images(params, ic, l.d_images, g);
    enc.backward_texts(params, tc, l.d_texts, g);
    auto loss_of = [&](const ParameterSet& p) {
      return contrastive_loss(enc.encode_images(p, x), enc.encode_texts(p, texts), 5.0).loss;
    };
    auto report = testing::finite_difference_check(params, g, loss_of, 20, 3);
    CHECK(report.checked >= 10);
    CHECK_MESSAGE(report.max_rel_error <= 1e-4, report.worst);
    for (const auto& name : params.names())
      if (!adapters.count(name)) CHECK(g.buffers.at(name).isZero(0.0));
  }
}

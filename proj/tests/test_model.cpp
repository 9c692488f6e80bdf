#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "ddrn/gradcheck.hpp"
#include "ddrn/model.hpp"
#include "ddrn/trainer.hpp"
#include "test_util.hpp"

namespace ddrn {
namespace {

using testing::random_normal;

ModelConfig small_config(std::size_t blocks = 2) {
  ModelConfig m;
  m.num_blocks = blocks;
  m.embed_dim = 8;
  m.heads = 2;
  m.mlp_ratio = 2;
  m.patch_size = 8;
  m.stride = 4;
  m.image_height = 16;
  m.image_width = 16;
  m.codebook_size = 6;
  m.levels = 2;
  m.num_ids = 3;
  return m;
}

// Gives every parameter a non-trivial value so that zero biases or unit gains
// cannot hide indexing mistakes.
template <typename T>
void randomize(Model<T>& model, std::uint64_t seed, double std = 0.3) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, std);
  for (auto& p : model.params()) {
    for (auto& v : p.value.data()) v += static_cast<T>(n(rng));
  }
}

TEST(PatchEmbedTest, PatchCounts) {
  ModelConfig c = small_config();
  c.image_height = c.image_width = c.patch_size = c.stride = 16;
  EXPECT_EQ(c.num_patches(), 1u);
  c = small_config();
  c.image_height = c.image_width = 32;
  c.patch_size = 16;
  c.stride = 8;
  EXPECT_EQ(c.num_patches(), 9u);
  Rng rng(1);
  Model<double> model(c, rng);
  Tape<double> tape;
  auto p = model.bind(tape);
  auto seq = model.patch_embed(p, random_normal<double>({2, 3, 32, 32}, rng));
  EXPECT_EQ(seq.length, 11u);
  EXPECT_EQ(seq.tokens.shape(), (Shape{22, c.embed_dim}));
}

TEST(PatchEmbedTest, ZeroImageGivesPositionEmbeddings) {
  const ModelConfig c = small_config();
  Rng rng(2);
  Model<double> model(c, rng);
  Tape<double> tape;
  auto p = model.bind(tape);
  auto seq = model.patch_embed(p, Tensor<double>({2, 3, 16, 16}));
  const Tensor<double>& pos = model.param("pos").value;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 2; t < seq.length; ++t) {
      for (std::size_t k = 0; k < c.embed_dim; ++k) {
        EXPECT_EQ(seq.tokens.value()[(b * seq.length + t) * c.embed_dim + k], pos.at(t, k));
      }
    }
    for (std::size_t k = 0; k < c.embed_dim; ++k) {
      EXPECT_EQ(seq.tokens.value()[(b * seq.length) * c.embed_dim + k],
                model.param("cls.global").value.data()[k] + pos.at(0, k));
      EXPECT_EQ(seq.tokens.value()[(b * seq.length + 1) * c.embed_dim + k],
                model.param("cls.local").value.data()[k] + pos.at(1, k));
    }
  }
}

TEST(PatchEmbedTest, Im2colMatchesPixelLookup) {
  const ModelConfig c = small_config();
  Rng rng(3);
  const auto images = random_normal<double>({2, 3, 16, 16}, rng);
  const auto cols = im2col(images, c);
  ASSERT_EQ(cols.shape(), (Shape{2 * 9, 3 * 64}));
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t py = 0; py < 3; ++py) {
      for (std::size_t px = 0; px < 3; ++px) {
        const std::size_t row = b * 9 + py * 3 + px;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          for (std::size_t i = 0; i < 8; ++i) {
            for (std::size_t j = 0; j < 8; ++j) {
              const double want = images.data()[((b * 3 + ch) * 16 + py * 4 + i) * 16 + px * 4 + j];
              EXPECT_EQ(cols.at(row, ch * 64 + i * 8 + j), want);
            }
          }
        }
      }
    }
  }
  EXPECT_THROW(im2col(Tensor<double>({1, 3, 16, 12}), c), ShapeError);
}

// ---- blocks ----

struct Mat {
  std::size_t r, c;
  std::vector<double> v;
  double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

Mat from_tensor(const Tensor<double>& t) { return {t.dim(0), t.numel() / t.dim(0), t.storage()}; }
Mat from_span(std::span<const double> s, std::size_t r, std::size_t c) { return {r, c, {s.begin(), s.end()}}; }

Mat oracle_layer_norm(const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
  Mat y = x;
  for (std::size_t i = 0; i < x.r; ++i) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < x.c; ++j) mu += x.at(i, j) / static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j) var += (x.at(i, j) - mu) * (x.at(i, j) - mu) / static_cast<double>(x.c);
    for (std::size_t j = 0; j < x.c; ++j) y.at(i, j) = (x.at(i, j) - mu) / std::sqrt(var + 1e-5) * g.data()[j] + b.data()[j];
  }
  return y;
}

Mat oracle_linear(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  Mat y{x.r, w.dim(0), std::vector<double>(x.r * w.dim(0))};
  for (std::size_t i = 0; i < x.r; ++i) {
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      double s = b.data()[o];
      for (std::size_t k = 0; k < x.c; ++k) s += x.at(i, k) * w.at(o, k);
      y.at(i, o) = s;
    }
  }
  return y;
}

Mat oracle_block(const Model<double>& m, std::size_t index, const Mat& x, std::size_t batch, std::size_t len) {
  const std::string pre = "blocks." + std::to_string(index) + ".";
  auto P = [&](const std::string& n) -> const Tensor<double>& { return m.param(pre + n).value; };
  const std::size_t d = x.c, heads = m.config().heads, dh = d / heads;
  const Mat h = oracle_layer_norm(x, P("ln1.gain"), P("ln1.bias"));
  const Mat q = oracle_linear(h, P("attn.q.weight"), P("attn.q.bias"));
  const Mat k = oracle_linear(h, P("attn.k.weight"), P("attn.k.bias"));
  const Mat v = oracle_linear(h, P("attn.v.weight"), P("attn.v.bias"));
  Mat att{x.r, d, std::vector<double>(x.r * d, 0.0)};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < heads; ++hd) {
      for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> s(len);
        double mx = -1e300;
        for (std::size_t j = 0; j < len; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q.at(b * len + i, hd * dh + c) * k.at(b * len + j, hd * dh + c);
          s[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t j = 0; j < len; ++j) {
          for (std::size_t c = 0; c < dh; ++c) att.at(b * len + i, hd * dh + c) += s[j] / z * v.at(b * len + j, hd * dh + c);
        }
      }
    }
  }
  Mat y = oracle_linear(att, P("attn.proj.weight"), P("attn.proj.bias"));
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
  Mat f = oracle_linear(oracle_layer_norm(y, P("ln2.gain"), P("ln2.bias")), P("mlp.fc1.weight"), P("mlp.fc1.bias"));
  for (auto& e : f.v) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
  Mat out = oracle_linear(f, P("mlp.fc2.weight"), P("mlp.fc2.bias"));
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += y.v[i];
  return out;
}

TokenSequence<double> constant_sequence(Tape<double>& tape, const Tensor<double>& t, std::size_t batch) {
  TokenSequence<double> s;
  s.tokens = tape.constant(t);
  s.batch = batch;
  s.length = t.dim(0) / batch;
  return s;
}

TEST(EncoderTest, SingleBlockModelHasIdentityEncoder) {
  Rng rng(4);
  Model<double> model(small_config(1), rng);
  Tape<double> tape;
  auto p = model.bind(tape);
  const auto x = random_normal<double>({2 * 11, 8}, rng);
  auto out = model.encode(p, constant_sequence(tape, x, 2));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), out.tokens.value().begin()));
}

TEST(EncoderTest, ChainedBlocksMatchOracle) {
  Rng rng(5);
  Model<double> model(small_config(3), rng);
  randomize(model, 6);
  Tape<double> tape;
  auto p = model.bind(tape);
  const auto x = random_normal<double>({2 * 11, 8}, rng);
  auto seq = constant_sequence(tape, x, 2);

  Mat want = oracle_block(model, 1, oracle_block(model, 0, from_tensor(x), 2, 11), 2, 11);
  auto enc = model.encode(p, seq);
  for (std::size_t i = 0; i < want.v.size(); ++i) EXPECT_NEAR(enc.tokens.value()[i], want.v[i], 1e-6);

  Mat want_dec = oracle_block(model, 2, from_span(enc.tokens.value(), 22, 8), 2, 11);
  auto dec = model.decode(p, enc);
  for (std::size_t i = 0; i < want_dec.v.size(); ++i) EXPECT_NEAR(dec.tokens.value()[i], want_dec.v[i], 1e-6);
}

TEST(EncoderTest, IdenticalPatchesStayIdentical) {
  Rng rng(7);
  Model<double> model(small_config(3), rng);
  randomize(model, 8);
  Tape<double> tape;
  auto p = model.bind(tape);
  auto x = random_normal<double>({11, 8}, rng);
  for (std::size_t t = 3; t < 11; ++t) {
    for (std::size_t k = 0; k < 8; ++k) x.at(t, k) = x.at(2, k);
  }
  auto enc = model.encode(p, constant_sequence(tape, x, 1));
  auto dec = model.decode(p, enc);
  for (const auto* s : {&enc, &dec}) {
    auto v = s->tokens.value();
    for (std::size_t t = 3; t < 11; ++t) {
      for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(v[t * 8 + k], v[2 * 8 + k]);
    }
  }
}

// ---- reconstruction ----

TEST(ReconstructTest, ClsBypassAndMembership) {
  Rng rng(9);
  Model<double> model(small_config(), rng);
  Tape<double> tape;
  auto p = model.bind(tape);
  const auto x = random_normal<double>({3 * 11, 8}, rng);
  GumbelNoise noise = GumbelNoise::sampled(3);
  QuantizeResult<double> q;
  auto out = model.reconstruct(p, constant_sequence(tape, x, 3), noise, &q);
  auto v = out.tokens.value();
  const Tensor<double>& cb = model.codebook();
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t t = 0; t < 11; ++t) {
      const std::size_t row = b * 11 + t;
      if (t < 2) {
        for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(v[row * 8 + k], x.at(row, k));
        continue;
      }
      bool member = false;
      for (std::size_t e = 0; e < cb.dim(0) && !member; ++e) {
        member = std::equal(cb.row(e).begin(), cb.row(e).end(), v.begin() + row * 8);
      }
      EXPECT_TRUE(member) << "row " << row;
    }
  }
}

TEST(ReconstructTest, CodebookPatchesAreFixedPoints) {
  Rng rng(10);
  Model<double> model(small_config(), rng);
  // An orthogonal-ish codebook scaled up so that each row is its own argmax.
  Tensor<double>& cb = model.codebook();
  for (std::size_t e = 0; e < cb.dim(0); ++e) {
    for (std::size_t k = 0; k < 8; ++k) cb.at(e, k) = (k == e) ? 3.0 : 0.0;
  }
  Tape<double> tape;
  auto p = model.bind(tape);
  auto x = random_normal<double>({11, 8}, rng);
  for (std::size_t t = 2; t < 11; ++t) {
    for (std::size_t k = 0; k < 8; ++k) x.at(t, k) = cb.at((t * 5) % 6, k);
  }
  GumbelNoise noise = GumbelNoise::zero();
  auto out = model.reconstruct(p, constant_sequence(tape, x, 1), noise);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), out.tokens.value().begin()));
}

// ---- heads ----

TEST(HeadsTest, ConstantPatchesReduceLocalPathToClsLocal) {
  Rng rng(11);
  Model<double> model(small_config(), rng);
  Tape<double> tape;
  auto p = model.bind(tape);
  auto x = random_normal<double>({2 * 11, 8}, rng);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t t = 2; t < 11; ++t) {
      for (std::size_t k = 0; k < 8; ++k) x.at(b * 11 + t, k) = 1.5;
    }
  }
  auto seq = constant_sequence(tape, x, 2);
  auto h = model.heads(p, seq, false);
  // LayerNorm maps a constant row to the (zero) bias, so the fusion adds nothing.
  Mat cls = oracle_layer_norm(from_tensor(x), model.param("norm.gain").value, model.param("norm.bias").value);
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(h.local_pre.value()[b * 8 + k], cls.at(b * 11 + 1, k), 1e-12);
  }
  EXPECT_EQ(h.id_logits.shape(), (Shape{2, 3}));
}

TEST(HeadsTest, EvalNeckIsAffine) {
  Rng rng(12);
  Model<double> model(small_config(), rng);
  randomize(model, 13);
  auto& stats = model.neck_stats(true);
  for (std::size_t k = 0; k < 8; ++k) {
    stats.running_mean[k] = 0.1 * static_cast<double>(k);
    stats.running_var[k] = 0.5 + 0.2 * static_cast<double>(k);
  }
  Tape<double> tape;
  auto p = model.bind(tape);
  auto seq = constant_sequence(tape, random_normal<double>({2 * 11, 8}, rng), 2);
  auto h = model.heads(p, seq, false);
  const Tensor<double>& g = model.param("neck.global.gain").value;
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t k = 0; k < 8; ++k) {
      const double pre = h.global_pre.value()[b * 8 + k];
      const double want = (pre - stats.running_mean[k]) / std::sqrt(stats.running_var[k] + 1e-5) * g.data()[k];
      EXPECT_NEAR(h.global_feat.value()[b * 8 + k], want, 1e-12);
    }
  }
}

TEST(HeadsTest, TrainingModeUpdatesRunningStats) {
  Rng rng(14);
  Model<double> model(small_config(), rng);
  const auto before = model.neck_stats(true).running_mean;
  Tape<double> tape;
  auto p = model.bind(tape);
  auto seq = constant_sequence(tape, random_normal<double>({4 * 11, 8}, rng), 4);
  model.heads(p, seq, false);
  EXPECT_EQ(model.neck_stats(true).running_mean, before);
  model.heads(p, seq, true);
  EXPECT_NE(model.neck_stats(true).running_mean, before);
}

// ---- whole model ----

TEST(ModelTest, DescriptorIsUnitNormAndDeterministic) {
  Rng rng(15);
  Model<float> model(small_config(), rng);
  const auto images = testing::random_tensor<float>({5, 3, 16, 16}, rng);
  const auto a = model.inference_embedding(images);
  const auto b = model.inference_embedding(images);
  EXPECT_EQ(a.storage(), b.storage());
  ASSERT_EQ(a.shape(), (Shape{5, 16}));
  for (std::size_t i = 0; i < 5; ++i) {
    double n = 0.0;
    for (float v : a.row(i)) n += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
  }
}

TEST(ModelTest, DescriptorDoesNotDependOnBatchComposition) {
  Rng rng(16);
  Model<float> model(small_config(), rng);
  const auto images = testing::random_tensor<float>({70, 3, 16, 16}, rng);
  const auto all = model.inference_embedding(images);
  Tensor<float> one({1, 3, 16, 16}, std::vector<float>(images.data().begin() + 67 * 768, images.data().begin() + 68 * 768));
  const auto single = model.inference_embedding(one);
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(single.at(0, k), all.at(67, k), 1e-6);
}

TEST(ModelTest, DefaultConfigForwardIsFinite) {
  Rng rng(17);
  Model<float> model(ModelConfig{}, rng);
  std::normal_distribution<float> n(0.0f, 3.0f);
  for (int rep = 0; rep < 4; ++rep) {
    Tensor<float> images({250, 3, 64, 64});
    for (auto& v : images.data()) v = n(rng);
    const auto d = model.inference_embedding(images);
    for (float v : d.data()) ASSERT_TRUE(std::isfinite(v));
  }
  Tape<float> tape;
  auto p = model.bind(tape);
  Tensor<float> batch({16, 3, 64, 64});
  for (auto& v : batch.data()) v = n(rng);
  GumbelNoise noise = GumbelNoise::sampled(1);
  auto f = model.forward(p, batch, true, noise);
  for (float v : f.heads.id_logits.value()) ASSERT_TRUE(std::isfinite(v));
}

TEST(ModelTest, DisabledEmbeddingSpaceIsPlainViT) {
  ModelConfig c = small_config(3);
  c.embedding_space = false;
  Rng rng(18);
  Model<double> model(c, rng);
  randomize(model, 19);
  Tape<double> tape;
  auto p = model.bind(tape);
  const auto images = random_normal<double>({2, 3, 16, 16}, rng);
  GumbelNoise noise = GumbelNoise::sampled(2);
  auto f = model.forward(p, images, false, noise);
  auto plain = model.run_blocks(p, model.patch_embed(p, images), 0, 3);
  EXPECT_TRUE(std::equal(plain.tokens.value().begin(), plain.tokens.value().end(), f.decoded.tokens.value().begin()));
  EXPECT_TRUE(f.quant.indices.empty());
}

// Every parameter that the configured losses touch receives a gradient, and
// the switched-off branches receive none.
void audit_gradients(bool embedding_space, bool hs_arcface, bool orthogonal) {
  ModelConfig c = small_config();
  c.embedding_space = embedding_space;
  c.num_ids = 4;
  TrainConfig tc;
  tc.hs_arcface = hs_arcface;
  tc.orthogonal_loss = orthogonal;
  Rng rng(20);
  Model<double> model(c, rng);
  model.set_requires_grad(true);
  Tape<double> tape;
  auto p = model.bind(tape);
  const auto images = random_normal<double>({8, 3, 16, 16}, rng);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
  GumbelNoise noise = GumbelNoise::sampled(4);
  auto f = model.forward(p, images, true, noise);
  auto loss = total_loss(model, p, f, labels, tc);
  tape.backward(loss.total);

  std::set<std::string> unused;
  if (!embedding_space) unused.insert("codebook");
  if (hs_arcface) unused.insert("head.global.weight");
  if (!hs_arcface) unused.insert("hs.centers");
  for (const auto& prm : model.params()) {
    const bool any = prm.value.has_grad() &&
                     std::any_of(prm.value.grad().begin(), prm.value.grad().end(), [](double g) { return g != 0.0; });
    if (unused.count(prm.name)) {
      EXPECT_FALSE(any) << prm.name;
    } else {
      EXPECT_TRUE(any) << prm.name;
    }
    for (double g : prm.value.grad()) ASSERT_TRUE(std::isfinite(g)) << prm.name;
  }
}

TEST(GradientFlowTest, FullModel) { audit_gradients(true, true, true); }
TEST(GradientFlowTest, Baseline) { audit_gradients(false, false, false); }
TEST(GradientFlowTest, EmbeddingSpaceWithoutOrthogonalLoss) { audit_gradients(true, false, false); }

TEST(GradientFlowTest, WholeModelMatchesFiniteDifferences) {
  // Frozen noise and eval-mode necks keep the forward deterministic; the
  // patch projection is perturbed as a representative deep leaf.
  ModelConfig c = small_config();
  c.embedding_space = false;
  Rng rng(21);
  Model<double> model(c, rng);
  randomize(model, 22, 0.2);
  const auto images = random_normal<double>({4, 3, 16, 16}, rng);
  const std::size_t idx = model.index_of("blocks.0.attn.q.weight");
  const std::vector<int> labels{0, 1, 2, 0};
  auto f = [&](Tape<double>& tape, const Var<double>& w) {
    std::vector<Var<double>> p;
    for (std::size_t i = 0; i < model.params().size(); ++i) {
      p.push_back(i == idx ? w : tape.constant(model.params()[i].value));
    }
    GumbelNoise noise = GumbelNoise::zero();
    auto out = model.forward(p, images, false, noise);
    return add(id_loss(out.heads.id_logits, labels, 0.1), testing::weighted_sum(out.heads.global_feat));
  };
  auto r = finite_diff_check(f, model.params()[idx].value, 1e-5, 1e-6);
  EXPECT_TRUE(r.pass) << r.max_rel_error;
}

}  // namespace
}  // namespace ddrn

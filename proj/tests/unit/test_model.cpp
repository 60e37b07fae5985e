#include <cmath>

#include "doctest.h"

#include "cvaet/error.hpp"
#include "cvaet/model.hpp"

using namespace cvaet;
using ad::Matrix;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.n_enc_layers = 1;
  c.n_dec_layers = 2;
  c.n_heads = 2;
  c.d_ffn = 16;
  c.d_z = 4;
  c.k_queries = 2;
  c.n_latent_vectors = 3;
  c.max_context_len = 10;
  c.max_response_len = 6;
  c.max_turn_id = 4;
  c.dropout = 0.0;
  return c;
}

SequenceInput seq(std::vector<int> tokens) {
  SequenceInput s;
  s.tokens = std::move(tokens);
  s.turns.assign(s.tokens.size(), 1);
  s.roles.assign(s.tokens.size(), 0);
  s.valid.assign(s.tokens.size(), 1);
  return s;
}

TrainingExample example() {
  TrainingExample ex;
  ex.context_ids = {6, 7, Vocab::kDelimiterId, 8, 9};
  ex.context_turn_ids = {2, 2, 2, 1, 1};
  ex.context_role_ids = {0, 0, 0, 1, 1};
  ex.response_ids = {Vocab::kStartId, 10, 11, 12, Vocab::kEndId};
  ex.response_role_id = 0;
  ex.negatives = {{Vocab::kStartId, 10, 13, 12, Vocab::kEndId}};
  return ex;
}

Matrix row(std::initializer_list<double> xs) {
  Matrix m(1, static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) m(0, i++) = x;
  return m;
}

void zero(CvaeModel& m, ParamId id) {
  if (id >= 0) m.parameters()[id].value.setZero();
}

}  // namespace

TEST_CASE("embedding is the sum of word, position, turn and role tables") {
  CvaeModel m(tiny(), 1);
  for (ParamId id : {m.word_embedding(), m.position_embedding(), m.turn_embedding(), m.role_embedding()}) {
    zero(m, id);
  }
  ad::Tape t(false);
  CHECK(m.embed(t, seq({6, 7, 8})).value().isZero());

  CvaeModel n(tiny(), 2);
  ad::Tape u(false);
  const Matrix e = n.embed(u, seq({9, 9})).value();
  const Matrix& pos = n.parameters()[n.position_embedding()].value;
  CHECK((e.row(0) - e.row(1)).isApprox(pos.row(0) - pos.row(1), 1e-12));
  // Swapping two tokens changes each row only through the word table.
  const Matrix f = n.embed(u, seq({6, 7})).value();
  const Matrix g = n.embed(u, seq({7, 6})).value();
  const Matrix& w = n.parameters()[n.word_embedding()].value;
  CHECK((f.row(0) - g.row(0)).isApprox(w.row(6) - w.row(7), 1e-12));
}

TEST_CASE("encoder, pooling and bridge shapes") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 3);
  ad::Tape t(false);
  const auto in = seq({6});
  const ad::Var e = m.encode(t, m.embed(t, in), in.valid);
  CHECK(e.rows() == 1);
  CHECK(e.cols() == c.d_model);
  const ad::Var p = m.pool(t, e, in.valid, PoolSide::prior);
  CHECK(p.rows() == 1);
  CHECK(p.cols() == c.d_model);
  const ad::Var h = m.bridge(t, t.constant(Matrix::Ones(1, c.d_z)));
  CHECK(h.rows() == c.n_latent_vectors);
  CHECK(h.cols() == c.d_model);
  CHECK_THROWS_AS(m.bridge(t, t.constant(Matrix::Ones(1, c.d_z + 1))), Error);
}

TEST_CASE("the bridge is linear without bias") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 4);
  ad::Tape t(false);
  CHECK(m.bridge(t, t.constant(Matrix::Zero(1, c.d_z))).value().isZero());
  const Matrix a = row({0.3, -1.0, 2.0, 0.5});
  const Matrix b = row({-0.7, 0.1, 0.4, 1.5});
  const Matrix ha = m.bridge(t, t.constant(a)).value();
  const Matrix hb = m.bridge(t, t.constant(b)).value();
  const Matrix hab = m.bridge(t, t.constant(2.0 * a + b)).value();
  CHECK(hab.isApprox(2.0 * ha + hb, 1e-12));
}

TEST_CASE("padding never changes the encoding of real tokens") {
  CvaeModel m(tiny(), 5);
  ad::Tape t(false);
  const auto plain = seq({6, 7, 8});
  auto padded = seq({6, 7, 8, 0, 0, 0});
  padded.valid = {1, 1, 1, 0, 0, 0};
  // Arbitrary junk in the padded slots.
  padded.tokens[4] = 15;
  padded.turns[5] = 3;
  const Matrix e1 = m.encode(t, m.embed(t, plain), plain.valid).value();
  const ad::Var e2v = m.encode(t, m.embed(t, padded), padded.valid);
  CHECK(e2v.value().topRows(3).isApprox(e1, 1e-12));
  const Matrix p1 = m.pool(t, t.constant(e1), plain.valid, PoolSide::prior).value();
  const Matrix p2 = m.pool(t, e2v, padded.valid, PoolSide::prior).value();
  CHECK(p2.isApprox(p1, 1e-12));
}

TEST_CASE("attention rows are distributions that ignore padding") {
  CvaeModel m(tiny(), 6);
  ad::Tape t(false);
  auto in = seq({6, 7, 8, 0});
  in.valid = {1, 1, 1, 0};
  std::vector<std::vector<Matrix>> attention;
  m.encode(t, m.embed(t, in), in.valid, nullptr, &attention);
  REQUIRE(attention.size() == 1);
  REQUIRE(attention[0].size() == 2);
  for (const Matrix& head : attention[0]) {
    for (Eigen::Index r = 0; r < head.rows(); ++r) {
      CHECK(head.row(r).sum() == doctest::Approx(1.0));
      CHECK(head(r, 3) == 0.0);
      CHECK(head.row(r).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("pooling over one valid row copies it; zero queries average") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 7);
  ad::Tape t(false);
  Matrix enc = Matrix::Random(4, c.d_model);
  PoolTrace trace;
  m.pool(t, t.constant(enc), std::vector<std::uint8_t>{0, 1, 0, 0}, PoolSide::prior, &trace);
  for (Eigen::Index q = 0; q < c.k_queries; ++q) CHECK(trace.attended.value().row(q).isApprox(enc.row(1), 1e-12));

  zero(m, m.pooling(PoolSide::recognition).queries);
  PoolTrace uniform;
  m.pool(t, t.constant(enc), std::vector<std::uint8_t>{1, 1, 1, 0}, PoolSide::recognition, &uniform);
  const Matrix mean = enc.topRows(3).colwise().mean();
  for (Eigen::Index q = 0; q < c.k_queries; ++q) CHECK(uniform.attended.value().row(q).isApprox(mean, 1e-12));

  CHECK_THROWS_AS(m.pool(t, t.constant(enc), std::vector<std::uint8_t>{0, 0, 0, 0}, PoolSide::prior), Error);
}

TEST_CASE("prior and recognition pooling use separate queries") {
  CvaeModel m(tiny(), 8);
  CHECK(m.pooling(PoolSide::prior).queries != m.pooling(PoolSide::recognition).queries);
}

TEST_CASE("heads with zero weights give the standard normal; the recognition head is linear") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 9);
  for (const LinearLayer& l : {m.prior_mlp().hidden, m.prior_mlp().out, m.posterior_head()}) {
    zero(m, l.weight);
    zero(m, l.bias);
  }
  ad::Tape t(false);
  const ad::Var x = t.constant(Matrix::Random(1, c.d_model));
  const GaussianParams pr = m.prior(t, x);
  const GaussianParams po = m.posterior(t, x);
  CHECK(pr.mean.value().isZero());
  CHECK(pr.log_variance.value().isZero());
  CHECK(po.mean.value().isZero());
  CHECK(po.log_variance.value().isZero());

  CvaeModel n(c, 10);
  zero(n, n.posterior_head().bias);
  const Matrix a = Matrix::Random(1, c.d_model);
  const Matrix b = Matrix::Random(1, c.d_model);
  const GaussianParams qa = n.posterior(t, t.constant(a));
  const GaussianParams qb = n.posterior(t, t.constant(b));
  const GaussianParams qab = n.posterior(t, t.constant(a - 3.0 * b));
  CHECK(qab.mean.value().isApprox(qa.mean.value() - 3.0 * qb.mean.value(), 1e-12));
  CHECK(qab.log_variance.value().isApprox(qa.log_variance.value() - 3.0 * qb.log_variance.value(), 1e-12));
  CHECK(qa.mean.cols() == c.d_z);
}

TEST_CASE("the decoder is causal") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 11);
  ad::Tape t(false);
  const auto mem = seq({6, 7, 8});
  const ad::Var enc = m.encode(t, m.embed(t, mem), mem.valid);
  const ad::Var lat = m.bridge(t, t.constant(Matrix::Random(1, c.d_z)));
  const Matrix a = m.decode(t, seq({1, 10, 11, 12}), enc, mem.valid, lat).value();
  const Matrix b = m.decode(t, seq({1, 10, 15, 3}), enc, mem.valid, lat).value();
  CHECK(a.topRows(2).isApprox(b.topRows(2), 1e-12));
  CHECK_FALSE(a.row(2).isApprox(b.row(2), 1e-6));
}

TEST_CASE("latent attention reuses the encoder-decoder attention parameters") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 12);
  ad::Tape t(false);
  const auto mem = seq({6, 7, 8});
  const ad::Var enc = m.encode(t, m.embed(t, mem), mem.valid);
  const ad::Var lat = m.bridge(t, t.constant(Matrix::Random(1, c.d_z)));
  const ad::Var x = m.embed(t, seq({1, 10}));
  DecoderTrace trace;
  m.decoder_block(t, 0, x, enc, mem.valid, lat, nullptr, &trace);

  const AttentionLayer& att = m.decoder_block_params(0).memory_attention;
  auto lin = [&](const LinearLayer& l, ad::Var in) {
    return ad::linear(in, m.parameters().on(t, l.weight), m.parameters().on(t, l.bias));
  };
  const ad::Var ctx = t.constant(trace.context_out.value());
  const ad::Var expect = lin(att.output, ad::multi_head_attention(lin(att.query, ctx), lin(att.key, lat),
                                                                  lin(att.value, lat), c.n_heads, nullptr));
  CHECK(expect.value().isApprox(trace.latent_attention.value(), 1e-12));
  // No separately named latent attention exists.
  for (const auto& p : m.parameters().all()) CHECK(p.name.find("latent_attention") == std::string::npos);
}

TEST_CASE("a one-token response gives two rows of logits") {
  const ModelConfig c = tiny();
  CvaeModel m(c, 13);
  TrainingExample ex = example();
  ex.response_ids = {Vocab::kStartId, 10, Vocab::kEndId};
  ad::Tape t(false);
  const ContextEncoding ctx = m.encode_context(t, ex);
  const ad::Var logits = m.forward_teacher_forced(t, ex, ctx, t.constant(Matrix::Zero(1, c.d_z)));
  CHECK(logits.rows() == 2);
  CHECK(logits.cols() == c.vocab_size);
  CHECK(decoder_targets(ex.response_ids) == std::vector<int>{10, Vocab::kEndId});
  CHECK(bow_targets(ex.response_ids) == std::vector<int>{10});
}

TEST_CASE("reparameterization") {
  ad::Tape t(false);
  GaussianParams g{t.constant(row({1.0, -2.0})), t.constant(row({std::log(4.0), 0.0}))};
  CHECK(CvaeModel::reparameterize(t, g, Matrix::Zero(1, 2)).value().isApprox(row({1.0, -2.0})));
  CHECK(CvaeModel::reparameterize(t, g, row({1.0, 1.0})).value().isApprox(row({3.0, -1.0})));

  Rng rng(5);
  std::normal_distribution<double> nd;
  Matrix sum = Matrix::Zero(1, 2), sq = Matrix::Zero(1, 2);
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const Matrix z = CvaeModel::reparameterize(t, g, row({nd(rng), nd(rng)})).value();
    sum += z;
    sq += z.cwiseProduct(z);
  }
  const Matrix mean = sum / n;
  CHECK(mean(0, 0) == doctest::Approx(1.0).epsilon(0.03));
  CHECK(mean(0, 1) == doctest::Approx(-2.0).epsilon(0.03));
  CHECK(sq(0, 0) / n - mean(0, 0) * mean(0, 0) == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("construction and forward passes are deterministic") {
  const ModelConfig c = tiny();
  CvaeModel a(c, 14), b(c, 14), other(c, 15);
  const TrainingExample ex = example();
  const Matrix noise = row({0.1, -0.2, 0.3, 0.0});
  ad::Tape ta, tb;
  const ExampleTerms x = a.forward_example(ta, ex, &ex.negatives[0], noise);
  const ExampleTerms y = b.forward_example(tb, ex, &ex.negatives[0], noise);
  CHECK(x.nll.scalar() == y.nll.scalar());
  CHECK(x.kl_plus.scalar() == y.kl_plus.scalar());
  CHECK(x.kl_minus.scalar() == y.kl_minus.scalar());
  CHECK(x.bow.scalar() == y.bow.scalar());
  CHECK(x.target_tokens == 4);
  CHECK(a.parameters()[a.word_embedding()].value != other.parameters()[other.word_embedding()].value);
  ad::Tape tn;
  CHECK_FALSE(a.forward_example(tn, ex, nullptr, noise).kl_minus.valid());
}

TEST_CASE("input builders frame context, joint and decoder sequences") {
  const ModelConfig c = tiny();
  TrainingExample ex = example();
  ex.context_turn_ids = {9, 9, 9, 1, 1};
  const SequenceInput ctx = context_input(ex, c);
  CHECK(ctx.tokens == ex.context_ids);
  CHECK(ctx.turns == std::vector<int>{4, 4, 4, 1, 1});
  const SequenceInput joint = joint_input(ex, ex.response_ids, c);
  CHECK(joint.size() == ex.context_ids.size() + ex.response_ids.size());
  CHECK(joint.tokens.back() == Vocab::kEndId);
  CHECK(joint.roles.back() == ex.response_role_id);
  CHECK(decoder_input(ex, ex.response_ids).tokens == std::vector<int>{1, 10, 11, 12});
  TrainingExample empty = ex;
  empty.context_ids.clear();
  empty.context_turn_ids.clear();
  empty.context_role_ids.clear();
  CHECK(context_input(empty, c).tokens == std::vector<int>{Vocab::kDelimiterId});
}

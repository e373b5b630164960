#include "icl/constructions.hpp"
#include "icl/errors.hpp"
#include "icl/model.hpp"
#include "icl/taskgen.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

using namespace icl;

namespace {

HeadWeights random_head(SeedStream& s, Index d, double scale) {
  auto m = [&] { return Matrix(sample(s, Distribution::standard_normal(), d, d) * scale); };
  return {m(), m(), m(), m()};
}

Task tiny_task() {
  Task t;
  t.inputs = Matrix(2, 1);
  t.inputs << 1.0, 0.0;
  t.targets = Matrix::Constant(1, 1, 2.0);
  t.query_input = Vector(2);
  t.query_input << 0.5, -1.0;
  return t;
}

}  // namespace

// --- task generation ------------------------------------------------------------

TEST_CASE("linear tasks have the documented shapes and scale") {
  SeedStream s{Seed{1}};
  const Task t = sample_linear_task(s, 10, 10, 1);
  CHECK(t.inputs.rows() == 10);
  CHECK(t.inputs.cols() == 10);
  CHECK(t.targets.rows() == 1);
  CHECK(t.targets.cols() == 10);
  CHECK(t.query_input.size() == 10);
  CHECK(t.inputs.cwiseAbs().maxCoeff() <= 1.0);
  REQUIRE(t.teacher);
  CHECK(oracle::max_abs_diff(*t.teacher * t.inputs, t.targets) < 1e-14);

  const std::vector<Task> tasks = sample_tasks(SeedStream(Seed{2}), TaskSpec{}, 10000);
  double second_moment = 0.0;
  for (const Task& task : tasks) second_moment += task.query_target.squaredNorm();
  second_moment /= 10000.0;
  // E (w . x)^2 = N_x Var(x) = 10 / 3.
  CHECK(std::abs(second_moment - 10.0 / 3.0) < 0.1);
}

TEST_CASE("out-of-distribution variants") {
  TaskSpec spec;
  spec.ood = OodSpec{0.0, OodMode::teacher_scale, std::nullopt};
  for (const Task& t : sample_tasks(SeedStream(Seed{3}), spec, 20)) {
    CHECK(t.targets.isZero(0.0));
    CHECK(t.query_target.isZero(0.0));
  }
  spec.ood = OodSpec{2.0, OodMode::input_range, std::nullopt};
  double widest = 0.0;
  for (const Task& t : sample_tasks(SeedStream(Seed{3}), spec, 50)) widest = std::max(widest, t.inputs.cwiseAbs().maxCoeff());
  CHECK(widest <= 2.0);
  CHECK(widest > 1.5);

  spec.ood = OodSpec{1.0, OodMode::alt_dist_scale, DistKind::exponential};
  for (const Task& t : sample_tasks(SeedStream(Seed{3}), spec, 20)) CHECK(t.inputs.minCoeff() >= 0.0);

  SeedStream s{Seed{4}};
  CHECK_THROWS_AS(sample_linear_task(s, 10, 10, 1, OodSpec{-1.0}), ConfigError);
  CHECK_THROWS_AS(sample_linear_task(s, 0, 10, 1), ConfigError);
}

TEST_CASE("same seed gives the same tasks") {
  const auto a = sample_tasks(SeedStream(Seed{77}), TaskSpec{}, 5);
  const auto b = sample_tasks(SeedStream(Seed{77}), TaskSpec{}, 5);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a[k].inputs == b[k].inputs);
    CHECK(a[k].query_target == b[k].query_target);
  }
}

TEST_CASE("sine tasks") {
  SeedStream s{Seed{5}};
  for (int k = 0; k < 2000; ++k) {
    const Task t = sample_sine_task(s, 10);
    CHECK(t.inputs.rows() == 1);
    CHECK(t.inputs.cwiseAbs().maxCoeff() <= 5.0);
    CHECK(t.targets.cwiseAbs().maxCoeff() <= 5.0);
  }
  CHECK(make_sine_task(1.0, 0.0, Vector::Zero(1), 0.0).targets(0, 0) == 0.0);
  CHECK(make_sine_task(2.0, std::numbers::pi / 2, Vector::Zero(1), 0.0).targets(0, 0) == doctest::Approx(2.0));
  CHECK(make_sine_task(2.0, std::numbers::pi / 2, Vector::Zero(1), 0.0).query_target(0) == doctest::Approx(2.0));
}

TEST_CASE("sine amplitude and phase ranges") {
  // y = a sin(x + p) = (a cos p) sin x + (a sin p) cos x; recover (a, p) by least squares.
  SeedStream s{Seed{6}};
  for (int k = 0; k < 1000; ++k) {
    const Task t = sample_sine_task(s, 10);
    Matrix basis(10, 2);
    basis.col(0) = t.inputs.row(0).transpose().array().sin();
    basis.col(1) = t.inputs.row(0).transpose().array().cos();
    const Vector c = basis.colPivHouseholderQr().solve(t.targets.row(0).transpose());
    const double amplitude = std::hypot(c(0), c(1));
    const double phase = std::atan2(c(1), c(0));
    CHECK(amplitude >= 0.1 - 1e-9);
    CHECK(amplitude <= 5.0 + 1e-9);
    CHECK(phase >= -1e-9);
    CHECK(phase <= std::numbers::pi + 1e-9);
  }
}

TEST_CASE("concatenated tokens") {
  const TokenSeq seq = build_tokens_concat(tiny_task());
  REQUIRE(seq.tokens.rows() == 3);
  REQUIRE(seq.tokens.cols() == 2);
  Matrix expect(3, 2);
  expect << 1.0, 0.5, 0.0, -1.0, 2.0, 0.0;
  CHECK(seq.tokens == expect);
  CHECK(seq.query_index == 1);

  for (const Task& t : sample_tasks(SeedStream(Seed{7}), TaskSpec{}, 50)) {
    const TokenSeq q = build_tokens_concat(t);
    CHECK(q.tokens.col(q.query_index).tail(1).isZero(0.0));
    const Task back = strip_tokens(q);
    CHECK(back.inputs == t.inputs);
    CHECK(back.targets == t.targets);
    CHECK(back.query_input == t.query_input);
  }
}

TEST_CASE("alternating tokens") {
  const std::vector<Task> tasks = sample_tasks(SeedStream(Seed{8}), TaskSpec{2, 3, 1}, 3);
  const TokenSeq seq = build_tokens_alternating(tasks[0], 5, PosEncoding::unit);
  CHECK(seq.length() == 5);
  CHECK(seq.dim() == 3 + 1 + 5);
  CHECK(seq.query_index == 4);
  for (Index j = 0; j < 2; ++j) {
    CHECK(seq.tokens.col(2 * j).segment(3, 1).isZero(0.0));
    CHECK(seq.tokens.col(2 * j + 1).head(3).isZero(0.0));
    CHECK(seq.tokens.col(2 * j).head(3) == tasks[0].inputs.col(j));
    CHECK(seq.tokens.col(2 * j + 1)(3) == tasks[0].targets(0, j));
  }
  CHECK(seq.tokens.bottomRows(5) == Matrix::Identity(5, 5));

  const TokenSeq sin_seq = build_tokens_alternating(tasks[1], 4);
  CHECK(sin_seq.tokens.bottomRows(4) == sinusoidal_encoding(4, 5));
  const Task back = strip_tokens(sin_seq);
  CHECK(back.inputs == tasks[1].inputs);
  CHECK(back.targets == tasks[1].targets);

  CHECK_THROWS_AS(build_tokens_alternating(tasks[0], 4, PosEncoding::unit), ConfigError);
  CHECK_THROWS_AS(build_tokens_alternating(tasks[0], 0), ConfigError);

  const TokenBatch batch = build_batch(tasks, LayoutSpec{Layout::alternating, 5, PosEncoding::unit});
  CHECK(batch.tokens.cols() == 15);
  CHECK(batch.tokens.middleCols(5, 5) == build_tokens_alternating(tasks[1], 5, PosEncoding::unit).tokens);
  CHECK(batch.targets(0, 2) == tasks[2].query_target(0));
}

// --- model ------------------------------------------------------------------------

TEST_CASE("initialization statistics") {
  for (Index depth : {1, 2}) {
    ModelConfig cfg;
    cfg.depth = depth;
    cfg.heads = 8;
    cfg.token_dim = cfg.input_dim = 11;
    const ModelParams p = init_params(cfg, Seed{9});
    const double sigma = 0.002 / static_cast<double>(depth);
    double sum_sq = 0.0, max_abs = 0.0;
    Index count = 0;
    for_each_param(p, [&](const std::string&, const Matrix& m) {
      sum_sq += m.squaredNorm();
      max_abs = std::max(max_abs, m.cwiseAbs().maxCoeff());
      count += m.size();
    });
    CHECK(count == depth * 8 * 4 * 121);
    CHECK(max_abs <= 2.0 * sigma);
    // Standard deviation of N(0, sigma^2) truncated at +-2 sigma.
    const double phi2 = std::exp(-2.0) / std::sqrt(2.0 * std::numbers::pi);
    const double mass = std::erf(2.0 / std::sqrt(2.0));
    const double truncated = sigma * std::sqrt(1.0 - 4.0 * phi2 / mass);
    CHECK(std::abs(std::sqrt(sum_sq / static_cast<double>(count)) - truncated) < 0.1 * truncated);
  }
  ModelConfig sine;
  sine.nx = sine.ny = 1;
  sine.input_dim = 2;
  sine.token_dim = 40;
  sine.embed = EmbedMode::full;
  sine.input_mlp = true;
  const ModelParams ps = init_params(sine, Seed{10});
  REQUIRE(ps.input_mlp);
  CHECK(ps.input_mlp->w1.rows() == 160);
  CHECK(ps.embedding->rows() == 40);
  CHECK(ps.embedding->cols() == 2);
}

TEST_CASE("linear self-attention matches the explicit sum") {
  SeedStream s{Seed{11}};
  for (bool full : {true, false}) {
    LayerWeights layer;
    layer.full_self_attn = full;
    layer.heads = {random_head(s, 5, 0.3), random_head(s, 5, 0.3)};
    const Task t = sample_tasks(SeedStream(Seed{12}), TaskSpec{6, 4, 1}, 1)[0];
    const TokenSeq seq = build_tokens_concat(t);
    const TokenSeq out = lsa_forward(layer, seq);
    CHECK(oracle::max_abs_diff(out.tokens, oracle::lsa_layer(layer, seq.tokens, seq.query_index)) < 1e-12);
  }
}

TEST_CASE("zero weights leave tokens unchanged") {
  LayerWeights layer;
  layer.heads = {{Matrix::Zero(11, 11), Matrix::Zero(11, 11), Matrix::Zero(11, 11), Matrix::Zero(11, 11)}};
  const TokenSeq seq = build_tokens_concat(sample_tasks(SeedStream(Seed{13}), TaskSpec{}, 1)[0]);
  CHECK(lsa_forward(layer, seq).tokens == seq.tokens);

  MlpWeights mlp{Matrix::Zero(44, 11), Matrix::Zero(44, 1), Matrix::Zero(11, 44), Matrix::Zero(11, 1)};
  CHECK(mlp_forward(mlp, seq).tokens == seq.tokens);

  ModelConfig cfg;
  ModelParams zero = init_params(cfg, Seed{1});
  for (LayerWeights& l : zero.layers)
    for (HeadWeights& h : l.heads) h.key.setZero(), h.query.setZero(), h.value.setZero(), h.proj.setZero();
  CHECK(transformer_forward(cfg, zero, seq).prediction.isZero(0.0));
}

TEST_CASE("hand-evaluated gradient step through one layer") {
  // One context point x = e_1, y = 2, eta = 1, N = 1, query x: prediction 2.
  const Index nx = 3;
  Task t;
  t.inputs = Vector::Unit(nx, 0);
  t.targets = Matrix::Constant(1, 1, 2.0);
  t.query_input = Vector::Unit(nx, 0);
  const Model m = stacked_gd_model({1.0}, {}, 1, nx, 1);
  CHECK(transformer_forward(m.config, m.params, build_tokens_concat(t)).prediction(0) == doctest::Approx(2.0));
}

TEST_CASE("softmax attention") {
  SeedStream s{Seed{14}};
  LayerWeights layer;
  layer.attn = AttnKind::softmax;
  layer.heads = {random_head(s, 4, 0.5), random_head(s, 4, 0.5)};
  const TokenSeq seq = build_tokens_concat(sample_tasks(SeedStream(Seed{15}), TaskSpec{5, 3, 1}, 1)[0]);
  for (bool full : {true, false}) {
    layer.full_self_attn = full;
    CHECK(oracle::max_abs_diff(softmax_sa_forward(layer, seq).tokens,
                               oracle::softmax_layer(layer, seq.tokens, seq.query_index)) < 1e-12);
  }

  SUBCASE("single visible key takes all the weight") {
    LayerWeights one = layer;
    one.full_self_attn = false;
    one.heads.resize(1);
    const TokenSeq small = build_tokens_concat(sample_tasks(SeedStream(Seed{16}), TaskSpec{1, 3, 1}, 1)[0]);
    const Matrix out = softmax_sa_forward(one, small).tokens;
    const Vector v1 = one.heads[0].proj * one.heads[0].value * small.tokens.col(0);
    CHECK(oracle::max_abs_diff(out - small.tokens, v1.replicate(1, 2)) < 1e-14);
  }
  SUBCASE("equal scores give the mean value") {
    LayerWeights flat = layer;
    flat.heads.resize(1);
    flat.heads[0].key.setZero();
    flat.full_self_attn = false;
    const Matrix out = softmax_sa_forward(flat, seq).tokens;
    const Vector mean =
        flat.heads[0].proj * flat.heads[0].value * seq.tokens.leftCols(seq.length() - 1).rowwise().mean();
    CHECK(oracle::max_abs_diff(out - seq.tokens, mean.replicate(1, seq.length())) < 1e-14);
  }
  SUBCASE("small scores follow the first-order expansion") {
    // softmax(s)_i ~ (1 + s_i - mean(s)) / T; the remainder is quadratic in the scale.
    auto expansion_error = [&](double eps) {
      LayerWeights w = layer;
      w.heads.resize(1);
      w.full_self_attn = true;
      w.heads[0].query *= eps;
      const HeadWeights& h = w.heads[0];
      const Matrix& e = seq.tokens;
      const Index t_len = e.cols();
      Matrix approx = e;
      for (Index j = 0; j < t_len; ++j) {
        Vector scores(t_len);
        for (Index i = 0; i < t_len; ++i) scores(i) = (h.key * e.col(i)).dot(h.query * e.col(j));
        const Vector weights = (Vector::Ones(t_len) + scores - Vector::Constant(t_len, scores.mean())) / double(t_len);
        approx.col(j) += h.proj * h.value * e * weights;
      }
      return oracle::max_abs_diff(softmax_sa_forward(w, seq).tokens, approx);
    };
    const double e1 = expansion_error(1e-2), e2 = expansion_error(5e-3);
    CHECK(e1 < 1e-4);
    CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.1));
  }
}

TEST_CASE("layer norm with affine parameters") {
  NormWeights norm{Vector::Constant(5, 2.0), Vector::LinSpaced(5, -1.0, 1.0)};
  TokenSeq seq;
  seq.tokens = Matrix::Constant(5, 3, 7.0);
  const TokenSeq out = layer_norm(norm, seq);
  for (Index c = 0; c < 3; ++c) CHECK(oracle::max_abs_diff(out.tokens.col(c), norm.bias) < 1e-12);
}

TEST_CASE("prediction is invariant to the order of context pairs") {
  for (AttnKind kind : {AttnKind::linear, AttnKind::softmax}) {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.attn = kind;
    cfg.mlp = true;
    cfg.init_std_scale = 0.5;
    const ModelParams p = init_params(cfg, Seed{17});
    Task t = sample_tasks(SeedStream(Seed{18}), TaskSpec{}, 1)[0];
    const Vector before = transformer_forward(cfg, p, build_tokens_concat(t)).prediction;
    std::vector<Index> perm{3, 9, 0, 1, 7, 2, 8, 4, 6, 5};
    Task shuffled = t;
    for (Index k = 0; k < 10; ++k) {
      shuffled.inputs.col(k) = t.inputs.col(perm[k]);
      shuffled.targets.col(k) = t.targets.col(perm[k]);
    }
    const Vector after = transformer_forward(cfg, p, build_tokens_concat(shuffled)).prediction;
    CHECK(oracle::max_abs_diff(before, after) < 1e-12 * std::max(1.0, before.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("batched forward equals per-sequence forward") {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.heads = 2;
  cfg.layernorm = NormMode::skip_first;
  cfg.init_std_scale = 0.5;
  cfg.clip_tokens = std::make_pair(-1.0, 1.0);
  const ModelParams p = init_params(cfg, Seed{19});
  const std::vector<Task> tasks = sample_tasks(SeedStream(Seed{20}), TaskSpec{}, 4);
  const Matrix batch = predict_batch(cfg, p, build_batch(tasks, LayoutSpec{}));
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const Vector one = transformer_forward(cfg, p, build_tokens_concat(tasks[k])).prediction;
    CHECK(oracle::max_abs_diff(batch.col(static_cast<Index>(k)), one) < 1e-12);
  }
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.token_dim = 12;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.depth = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.embed = EmbedMode::full;
  cfg.token_dim = 20;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.readout_row() == 19);
  CHECK(ModelConfig{}.readout_row() == 10);
  CHECK(default_clip(2) == std::nullopt);
  CHECK(default_clip(5) == std::make_pair(-10.0, 10.0));
}

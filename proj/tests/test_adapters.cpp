// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "mlora/attach.hpp"
#include "mlora/svd.hpp"
#include "mlora/trainer.hpp"
#include "oracles.hpp"
#include "toy.hpp"

using namespace mlora;

TEST_SUITE("adapters") {

TEST_CASE("lora initialization") {
  Rng rng(1);
  const auto ad = make_lora<double>(10, 6, 4, 8.0, rng, "s");
  CHECK(ad.a.value.rows() == 10);
  CHECK(ad.a.value.cols() == 4);
  CHECK(max_abs(ad.b.value) == 0.0);
  CHECK(max_abs(ad.a.value) < 1.0 / std::sqrt(10.0));
  CHECK(max_abs(ad.a.value) > 0.0);
  CHECK(ad.static_scale() == 2.0);
  CHECK(ad.a.name == "s.lora_a");
  CHECK(make_lora<double>(64, 64, 64, 64.0, rng).static_scale() == 1.0);
  CHECK_THROWS_AS(make_lora<double>(10, 6, 7, 1.0, rng), ArgumentError);
  CHECK_THROWS_AS(make_lora<double>(10, 6, 0, 1.0, rng), ArgumentError);
}

TEST_CASE("multilora initialization") {
  Rng rng(2);
  const auto ad = make_multilora<double>(12, 8, 3, 4, rng, "s");
  REQUIRE(ad.n() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(max_abs(ad.scaling[i].value) == 0.0);
    CHECK(ad.scaling[i].value.cols() == 8);
    CHECK(max_abs(ad.a[i].value) < 1.0 / std::sqrt(12.0));
    CHECK(max_abs(ad.b[i].value) < 1.0 / std::sqrt(4.0));
    CHECK(max_abs(ad.b[i].value) > 0.0);
  }
  CHECK(ad.scaling[2].name == "s.multilora.2.scaling");
  CHECK_THROWS_AS(make_multilora<double>(12, 8, 0, 4, rng), ArgumentError);
  CHECK_THROWS_AS(make_multilora<double>(12, 8, 2, 9, rng), ArgumentError);
}

TEST_CASE("lora forward") {
  Rng rng(3);
  auto ad = make_lora<double>(5, 7, 3, 6.0, rng);
  const MatrixD x = oracle::random_matrix(4, 5, 1);
  CHECK(max_abs(lora_delta_forward(x, ad)) == 0.0);
  ad.b.value = oracle::random_matrix(3, 7, 2);
  const MatrixD expect = scaled(oracle::naive_matmul(x, oracle::naive_matmul(ad.a.value, ad.b.value)), 2.0);
  CHECK(oracle::max_diff(lora_delta_forward(x, ad), expect) < 1e-12);
  CHECK_THROWS_AS(lora_delta_forward(MatrixD(2, 4), ad), ShapeError);
}

TEST_CASE("lora with identity factors is a truncating identity") {
  LoraAdapter<double> ad;
  ad.rank = 3;
  ad.alpha = 3.0;
  ad.a = Param<double>("a", MatrixD(5, 3));
  ad.b = Param<double>("b", MatrixD(3, 4));
  for (std::size_t i = 0; i < 3; ++i) ad.a.value(i, i) = ad.b.value(i, i) = 1.0;
  const MatrixD x = oracle::random_matrix(2, 5, 3);
  const MatrixD y = lora_delta_forward(x, ad);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(y(r, c) == (c < 3 ? x(r, c) : 0.0));
}

TEST_CASE("multilora forward") {
  Rng rng(4);
  auto ad = make_multilora<double>(6, 5, 3, 2, rng);
  const MatrixD x = oracle::random_matrix(3, 6, 5);
  CHECK(max_abs(multilora_delta_forward(x, ad)) == 0.0);
  for (auto& s : ad.scaling) s.value = oracle::random_matrix(1, 5, 6 + s.name.size());
  CHECK(oracle::max_diff(multilora_delta_forward(x, ad),
                         oracle::naive_matmul(x, materialize_delta(ad))) < 1e-10);

  // A zero second module drops out.
  auto two = make_multilora<double>(6, 5, 2, 2, rng);
  two.scaling[0].value = oracle::random_matrix(1, 5, 7);
  MultiLoraAdapter<double> one;
  one.rank = 2;
  one.a = {two.a[0]};
  one.b = {two.b[0]};
  one.scaling = {two.scaling[0]};
  CHECK(multilora_delta_forward(x, two) == multilora_delta_forward(x, one));
}

TEST_CASE("n = 1 with unit scaling collapses to lora") {
  Rng rng(5);
  auto ml = make_multilora<double>(6, 5, 1, 3, rng);
  ml.scaling[0].value.fill(1.0);
  LoraAdapter<double> lo;
  lo.rank = 3;
  lo.alpha = 3.0;
  lo.a = ml.a[0];
  lo.b = ml.b[0];
  const MatrixD x = oracle::random_matrix(4, 6, 8);
  CHECK(oracle::max_diff(multilora_delta_forward(x, ml), lora_delta_forward(x, lo)) < 1e-12);
}

TEST_CASE("materialized updates") {
  Rng rng(6);
  auto ml = make_multilora<double>(9, 7, 2, 2, rng);
  CHECK(max_abs(materialize_delta(ml)) == 0.0);
  ml.scaling[1].value = oracle::random_matrix(1, 7, 9);
  MatrixD m1 = oracle::naive_matmul(ml.a[1].value, ml.b[1].value);
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t c = 0; c < 7; ++c) m1(r, c) *= ml.scaling[1].value(0, c);
  CHECK(oracle::max_diff(materialize_module_delta(ml, 1), m1) < 1e-14);
  CHECK(oracle::max_diff(materialize_delta(ml), m1) < 1e-14);
  CHECK_THROWS_AS(materialize_module_delta(ml, 2), ArgumentError);

  const MatrixD base = oracle::random_matrix(3, 3, 1), tuned = oracle::random_matrix(3, 3, 2);
  const MatrixD d = materialize_delta(base, tuned);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(d(r, c) == tuned(r, c) - base(r, c));
}

TEST_CASE("budgets") {
  CHECK(lora_budget(64, 64, 24) == AdapterBudget{24 * 128, 24 * 128});
  CHECK(multilora_budget(64, 64, 3, 8) == AdapterBudget{3 * 8 * 128, 3 * (8 * 128 + 64)});
  CHECK(lora_budget(64, 172, 24).matmul == multilora_budget(64, 172, 3, 8).matmul);

  Rng rng(7);
  Model<double> m(toy::small_config(), rng);
  attach_lora(m, parse_targets("all"), 4, 4.0, rng);
  std::size_t expect = 0, counted = 0;
  for (Projection p : kAllProjections) {
    const auto [din, dout] = m.config().projection_shape(p);
    expect += 2 * 4 * (din + dout);
  }
  for (const Param<double>* p : m.trainable_parameters()) counted += p->value.size();
  CHECK(model_budget(m).trainable == expect);
  CHECK(counted == expect);

  Model<double> mm(toy::small_config(), rng);
  attach_multilora(mm, parse_targets("q_proj,down_proj"), 3, 2, rng);
  std::size_t ml_expect = 0, ml_counted = 0;
  for (Projection p : {Projection::q_proj, Projection::down_proj}) {
    const auto [din, dout] = mm.config().projection_shape(p);
    ml_expect += 2 * 3 * (2 * (din + dout) + dout);
  }
  for (const Param<double>* p : mm.trainable_parameters()) ml_counted += p->value.size();
  CHECK(ml_counted == ml_expect);
  CHECK(model_budget(mm).trainable == ml_expect);
}

TEST_CASE("attach freezes the base and validates arguments") {
  Rng rng(8);
  Model<float> m(toy::small_config(), rng);
  attach_multilora(m, parse_targets("v_proj"), 2, 3, rng);
  CHECK(m.adapter_state() == AdapterState::attached);
  CHECK(m.method() == Method::multilora);
  for (const Param<float>* p : m.trainable_parameters())
    CHECK(p->name.find("multilora") != std::string::npos);
  CHECK_THROWS_AS(attach_lora(m, parse_targets("q_proj"), 2, 2.0, rng), StateError);

  Model<float> fresh(toy::small_config(), rng);
  CHECK_THROWS_AS(parse_targets("q_proj,w_proj"), ArgumentError);
  CHECK_THROWS_AS(attach_lora(fresh, parse_targets("q_proj"), 17, 2.0, rng), ArgumentError);
  CHECK_THROWS_AS(attach_multilora(fresh, parse_targets("q_proj"), 0, 2, rng), ArgumentError);
  CHECK(parse_targets("all").size() == 7);
}

TEST_CASE("starting point is bit-exact") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    Model<float> base(toy::small_config(), rng);
    const TokenBatch b = toy::sample_batch(2, seed, 30);
    const MatrixF ref = base.logits(b);
    Model<float> lo = base, ml = base;
    attach_lora(lo, parse_targets("all"), 4, 8.0, rng);
    attach_multilora(ml, parse_targets("all"), 3, 2, rng);
    CHECK(lo.logits(b) == ref);
    CHECK(ml.logits(b) == ref);
  }
}

TEST_CASE("rank bounds") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    auto lo = make_lora<double>(20, 30, 3, 3.0, rng);
    lo.b.value = oracle::random_matrix(3, 30, seed);
    CHECK(numerical_rank(materialize_delta(lo)) == 3);
    auto ml = make_multilora<double>(20, 30, 3, 2, rng);
    for (auto& s : ml.scaling) s.value = oracle::random_matrix(1, 30, seed + s.name.size());
    CHECK(numerical_rank(materialize_delta(ml)) <= 6);
  }
}

TEST_CASE("merge") {
  Rng rng(9);
  Model<double> base(toy::small_config(), rng);
  Model<double> ml = base;
  attach_multilora(ml, parse_targets("all"), 2, 2, rng);
  Model<double> zero = ml;
  merge(zero);
  for (std::size_t l = 0; l < 2; ++l)
    for (Projection p : kAllProjections)
      CHECK(zero.weights().layers[l][p].value == base.weights().layers[l][p].value);
  CHECK(zero.adapter_state() == AdapterState::merged);
  CHECK_THROWS_AS(merge(zero), StateError);
  CHECK_THROWS_AS(merge(base), StateError);

  toy::perturb_adapters(ml, rng);
  const TokenBatch b = toy::sample_batch(2, 4, 30);
  const MatrixD adapted = ml.logits(b);
  merge(ml);
  CHECK(max_abs_diff(adapted, ml.logits(b)) < 1e-10);
}

TEST_CASE("adapter gradients") {
  Rng rng(10);
  const TokenBatch b = toy::sample_batch(1, 5, 20);
  SUBCASE("lora at a generic point") {
    Model<double> m(toy::small_config(), rng);
    attach_lora(m, parse_targets("all"), 3, 6.0, rng);
    toy::perturb_adapters(m, rng);
    CHECK(toy::model_grad_check(m, b, 2).max_rel_error < 1e-4);
  }
  SUBCASE("multilora at a generic point") {
    Model<double> m(toy::small_config(), rng);
    attach_multilora(m, parse_targets("all"), 2, 2, rng);
    toy::perturb_adapters(m, rng);
    CHECK(toy::model_grad_check(m, b, 3).max_rel_error < 1e-4);
  }
  SUBCASE("zero scaling blocks A and B") {
    Model<double> m(toy::small_config(), rng);
    attach_multilora(m, parse_targets("all"), 2, 2, rng);
    for (Param<double>* p : m.trainable_parameters()) p->zero_grad();
    Graph<double> g;
    g.backward(m.forward_loss(g, b));
    double scaling_grad = 0.0;
    for (const Param<double>* p : m.trainable_parameters()) {
      if (p->name.ends_with(".scaling")) {
        scaling_grad = std::max(scaling_grad, max_abs(p->grad));
      } else {
        CHECK(max_abs(p->grad) == 0.0);
      }
    }
    CHECK(scaling_grad > 0.0);
  }
}

TEST_CASE("short training lowers the loss and keeps the base frozen") {
  Rng rng(11);
  Model<float> m(toy::small_config(), rng);
  const Model<float> base = m;
  attach_lora(m, parse_targets("all"), 4, 4.0, rng);
  MixtureSpec spec;
  spec.seed = 1;
  for (TaskTag t : kAllTasks) spec.count(t) = 16;
  TrainOptions o;
  o.lr = 5e-3;
  o.steps = 60;
  const auto log = train(m, gen_mixture(spec), o);
  CHECK(log.size() == 60);
  CHECK(mean_loss(log, 50, 10) < mean_loss(log, 0, 10));
  for (std::size_t l = 0; l < 2; ++l)
    for (Projection p : kAllProjections)
      CHECK(m.weights().layers[l][p].value == base.weights().layers[l][p].value);
  CHECK(m.weights().tok_emb.value == base.weights().tok_emb.value);
}

TEST_CASE("training is deterministic") {
  auto run = [] {
    Rng rng(12);
    Model<float> m(toy::small_config(), rng);
    attach_multilora(m, parse_targets("all"), 2, 2, rng);
    MixtureSpec spec;
    spec.seed = 2;
    for (TaskTag t : kAllTasks) spec.count(t) = 8;
    TrainOptions o;
    o.lr = 1e-3;
    o.epochs = 3;
    o.seed = 4;
    train(m, gen_mixture(spec), o);
    return m;
  };
  const Model<float> a = run(), b = run();
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
}

TEST_CASE("gradient clipping") {
  Param<double> a("a", {{3.0, 0.0}}), b("b", {{4.0}});
  a.grad = a.value;
  b.grad = b.value;
  std::vector<Param<double>*> ps = {&a, &b};
  CHECK(clip_grad_norm<double>(ps, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad(0, 0) == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(b.grad(0, 0) == doctest::Approx(0.8).epsilon(1e-6));
  CHECK(clip_grad_norm<double>(ps, 10.0) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(b.grad(0, 0) == doctest::Approx(0.8).epsilon(1e-6));
}

}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "grqo/grqo.hpp"
#include "grqo/rng.hpp"

using namespace grqo;

namespace {

using NodeD = Ptr<double>;

CostMatrix cm_from(int nq, int ng, std::vector<double> v) {
  CostMatrix c;
  c.values = MatD::from(nq, ng, std::move(v));
  return c;
}

void fd_check(std::vector<MatD> inputs,
              const std::function<NodeD(const std::vector<NodeD>&)>& build,
              double h = 1e-6, double tol = 1e-5) {
  std::vector<NodeD> leaves;
  for (auto& m : inputs) leaves.push_back(leaf(m));
  NodeD root = build(leaves);
  backward(root);
  for (std::size_t li = 0; li < inputs.size(); ++li) {
    REQUIRE_FALSE(leaves[li]->grad.d.empty());
    for (std::size_t k = 0; k < inputs[li].d.size(); ++k) {
      const double orig = inputs[li].d[k];
      auto eval = [&](double v) {
        inputs[li].d[k] = v;
        std::vector<NodeD> fresh;
        for (auto& m : inputs) fresh.push_back(constant(m));
        return build(fresh)->value.d[0];
      };
      const double fd = (eval(orig + h) - eval(orig - h)) / (2 * h);
      inputs[li].d[k] = orig;
      const double an = leaves[li]->grad.d[k];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      INFO("leaf " << li << " elem " << k << " fd=" << fd << " an=" << an);
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("query rewards are negated row minima", "[grqo]") {
  const auto r = query_rewards(cm_from(2, 2, {0.2, 0.7, 0.9, 0.4}));
  REQUIRE(r.size() == 2);
  CHECK(r[0] == Catch::Approx(-0.2).margin(1e-15));
  CHECK(r[1] == Catch::Approx(-0.4).margin(1e-15));

  // Single column: reward is just the negated column.
  const auto s = query_rewards(cm_from(3, 1, {0.5, 0.1, 0.3}));
  CHECK(s[0] == Catch::Approx(-0.5));
  CHECK(s[1] == Catch::Approx(-0.1));
  CHECK(s[2] == Catch::Approx(-0.3));

  // A strictly dominated extra column changes nothing.
  const auto base = query_rewards(cm_from(2, 1, {0.3, 0.6}));
  const auto dom = query_rewards(cm_from(2, 2, {0.3, 5.0, 0.6, 5.0}));
  CHECK(base == dom);

  CostMatrix empty;
  empty.values = MatD(2, 0);
  CHECK_THROWS_AS(query_rewards(empty), std::invalid_argument);
}

TEST_CASE("group advantages normalization", "[grqo]") {
  const auto a = group_advantages({-1.0, -2.0, -3.0});
  REQUIRE(a.size() == 3);
  CHECK(a[0] == Catch::Approx(1.224745).margin(1e-6));
  CHECK(a[1] == Catch::Approx(0.0).margin(1e-12));
  CHECK(a[2] == Catch::Approx(-1.224745).margin(1e-6));

  const auto zeros = group_advantages({5.0, 5.0, 5.0});
  for (double v : zeros) CHECK(v == 0.0);

  CHECK(group_advantages({3.0}).size() == 1);
  CHECK(group_advantages({3.0})[0] == 0.0);
  CHECK(group_advantages({}).empty());

  Rng rng(31);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<double> r(16);
    for (auto& v : r) v = rng.uniform(-3.0, 1.0);
    const auto adv = group_advantages(r);

    double mean = 0, var = 0;
    for (double v : adv) mean += v;
    mean /= double(adv.size());
    for (double v : adv) var += (v - mean) * (v - mean);
    var /= double(adv.size());
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::sqrt(var) == Catch::Approx(1.0).margin(1e-6));

    // Shift and positive-scale invariance.
    const double c = rng.uniform(-5.0, 5.0);
    const double s = rng.uniform(0.1, 4.0);
    std::vector<double> shifted = r, scaled = r;
    for (auto& v : shifted) v += c;
    for (auto& v : scaled) v *= s;
    const auto adv_shift = group_advantages(shifted);
    const auto adv_scale = group_advantages(scaled);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      CHECK(adv_shift[i] == Catch::Approx(adv[i]).margin(1e-9));
      CHECK(adv_scale[i] == Catch::Approx(adv[i]).margin(1e-9));
    }
  }
}

TEST_CASE("alpha mask thresholds on objectness", "[grqo]") {
  const std::vector<double> uniform(8, 1.0 / 8);
  for (double v : alpha_mask(uniform, 1000.0)) CHECK(v == 1000.0);

  const auto m = alpha_mask({0.7, 0.29, 0.01}, 1000.0, 0.5);
  REQUIRE(m.size() == 3);
  CHECK(m[0] == 1000.0);
  CHECK(m[1] == 1000.0);
  CHECK(m[2] == 0.0);

  for (double v : alpha_mask({0.7, 0.29, 0.01}, 0.0)) CHECK(v == 0.0);
  CHECK_THROWS_AS(alpha_mask({}, 1.0), std::invalid_argument);
}

TEST_CASE("kl k3 closed form", "[grqo]") {
  CHECK(kl_k3(0.25, 0.25) == 0.0);
  CHECK(kl_k3(0.2, 0.4) == Catch::Approx(2.0 - std::log(2.0) - 1.0).margin(1e-12));
  CHECK(kl_k3(0.2, 0.4) == Catch::Approx(0.306853).margin(1e-6));
  CHECK(kl_k3(0.4, 0.2) == Catch::Approx(0.5 - std::log(0.5) - 1.0).margin(1e-12));
  CHECK(kl_k3(0.4, 0.2) == Catch::Approx(0.193147).margin(1e-6));
  CHECK(kl_k3(0.2, 0.4) > 0.0);
  CHECK(kl_k3(0.4, 0.2) > 0.0);

  // Second-order Taylor: ratio 1 + d gives d^2/2 to within 10%.
  for (double d : {-0.05, -0.02, 0.01, 0.03, 0.05}) {
    const double v = kl_k3(1.0, 1.0 + d);  // ratio = 1 + d
    CHECK(v == Catch::Approx(d * d / 2).epsilon(0.10));
  }

  // Vector form with validation.
  ObjectnessPair pair;
  pair.current = {0.5, 0.25, 0.25};
  pair.reference = {0.25, 0.5, 0.25};
  const auto terms = kl_k3(pair);
  CHECK(terms[0] == Catch::Approx(0.193147).margin(1e-6));
  CHECK(terms[1] == Catch::Approx(0.306853).margin(1e-6));
  CHECK(terms[2] == 0.0);
  for (double t : terms) CHECK(t >= 0.0);

  ObjectnessPair bad_sum;
  bad_sum.current = {0.5, 0.4};
  bad_sum.reference = {0.5, 0.5};
  CHECK_THROWS_AS(kl_k3(bad_sum), std::invalid_argument);
  ObjectnessPair bad_len;
  bad_len.current = {0.5, 0.5};
  bad_len.reference = {1.0};
  CHECK_THROWS_AS(kl_k3(bad_len), std::invalid_argument);
}

TEST_CASE("kl k3 graph matches scalar form and differentiates current only", "[grqo]") {
  MatD cur = MatD::from(1, 4, {0.4, 0.3, 0.2, 0.1});
  MatD ref = MatD::from(1, 4, {0.25, 0.25, 0.25, 0.25});
  auto node = kl_k3_graph(leaf(cur), ref);
  for (int i = 0; i < 4; ++i)
    CHECK(node->value.at(0, i) == Catch::Approx(kl_k3(cur.at(0, i), ref.at(0, i))).margin(1e-12));

  fd_check({cur}, [&](const std::vector<NodeD>& v) {
    return sum_all(kl_k3_graph(v[0], ref));
  });
}

TEST_CASE("grqo loss values", "[grqo]") {
  // Zero advantages and matched distributions: loss exactly 0.
  MatD adv0 = MatD::zeros(1, 4);
  MatD obj = MatD::from(1, 4, {0.25, 0.25, 0.25, 0.25});
  auto log_obj = log_(constant(obj));
  auto kl0 = kl_k3_graph(constant(obj), obj);
  auto l0 = grqo_loss(constant(adv0), {1e3, 1e3, 1e3, 1e3}, log_obj, kl0, 0.04,
                      GradMode::kScoreWeighted);
  CHECK(l0->value.d[0] == Catch::Approx(0.0).margin(1e-12));

  // Two-query hand expansion at beta = 0.
  MatD adv = MatD::from(1, 2, {0.6, -0.6});
  MatD probs = MatD::from(1, 2, {0.7, 0.3});
  auto lo = log_(constant(probs));
  auto kl = kl_k3_graph(constant(probs), probs);
  const double alpha = 1e3;
  auto l = grqo_loss(constant(adv), {alpha, alpha}, lo, kl, 0.0, GradMode::kScoreWeighted);
  const double expect =
      -0.5 * (alpha * 0.6 * std::log(0.7) + alpha * (-0.6) * std::log(0.3));
  CHECK(l->value.d[0] == Catch::Approx(expect).margin(1e-9));

  CHECK_THROWS_AS(
      grqo_loss(constant(adv), {alpha}, lo, kl, 0.0, GradMode::kScoreWeighted),
      std::invalid_argument);
}

TEST_CASE("grqo loss gradients in both modes", "[grqo]") {
  // Score-weighted: differentiate through log O and KL, advantages constant.
  MatD logits = MatD::from(1, 4, {1.2, -0.3, 0.4, 0.1});
  MatD ref = MatD::from(1, 4, {0.4, 0.2, 0.2, 0.2});
  const std::vector<double> adv = {1.3, -0.2, -0.4, -0.7};
  const std::vector<double> alpha = {1e3, 1e3, 0.0, 1e3};

  fd_check({logits}, [&](const std::vector<NodeD>& v) {
    auto p = softmax_rows(v[0]);
    auto lo = log_softmax_rows(v[0]);
    auto kl = kl_k3_graph(p, ref);
    MatD am = MatD::from(1, 4, std::vector<double>(adv));
    return grqo_loss(constant(am), alpha, lo, kl, 0.04, GradMode::kScoreWeighted);
  });

  // Direct: differentiate through the rewards with fixed group statistics.
  // The statistics are frozen at the unperturbed values, exactly as the
  // optimizer sees them, so the finite difference must not retrace them.
  MatD raw = MatD::from(1, 4, {0.3, -0.8, 0.9, 0.2});
  double mu = 0, sd = 0;
  for (double x : raw.d) mu += 1.0 / (1.0 + std::exp(-x));
  mu /= 4;
  for (double x : raw.d) {
    const double d = 1.0 / (1.0 + std::exp(-x)) - mu;
    sd += d * d;
  }
  sd = std::sqrt(sd / 4);
  fd_check(
      {raw, logits},
      [&, mu, sd](const std::vector<NodeD>& v) {
        auto r = sigmoid(v[0]);  // rewards via a smooth parameterization
        auto advn = scale(add_const(r, -mu), 1.0 / sd);
        auto p = softmax_rows(v[1]);
        auto lo = log_softmax_rows(v[1]);
        auto kl = kl_k3_graph(p, ref);
        return grqo_loss(advn, alpha, lo, kl, 0.04, GradMode::kDirect);
      },
      1e-5, 1e-4);
}

TEST_CASE("grqo loss gradient at single precision", "[grqo]") {
  // The float instantiation must track central differences to 1e-3 relative
  // error measured over the whole gradient vector.
  MatT<float> logits = MatT<float>::from(1, 4, {0.9f, -0.2f, 0.35f, -0.6f});
  MatT<float> ref = MatT<float>::from(1, 4, {0.4f, 0.2f, 0.2f, 0.2f});
  const std::vector<double> adv = {0.9, -0.3, -0.2, -0.4};
  const std::vector<double> alpha = {1e3, 1e3, 1e3, 1e3};

  auto build = [&](const Ptr<float>& x) {
    auto p = softmax_rows(x);
    auto lo = log_softmax_rows(x);
    auto kl = kl_k3_graph(p, ref);
    MatT<float> am(1, 4);
    for (int i = 0; i < 4; ++i) am.d[static_cast<std::size_t>(i)] = float(adv[static_cast<std::size_t>(i)]);
    return grqo_loss(constant(am), alpha, lo, kl, 0.04, GradMode::kScoreWeighted);
  };
  auto x = leaf(logits);
  backward(build(x));

  double num = 0, den = 0;
  const float h = 3e-3f;
  for (int i = 0; i < 4; ++i) {
    MatT<float> plus = logits, minus = logits;
    plus.d[static_cast<std::size_t>(i)] += h;
    minus.d[static_cast<std::size_t>(i)] -= h;
    const double fd =
        (double(build(constant(plus))->value.d[0]) - double(build(constant(minus))->value.d[0])) /
        (2.0 * double(h));
    const double an = double(x->grad.d[static_cast<std::size_t>(i)]);
    num += (fd - an) * (fd - an);
    den += fd * fd;
  }
  CHECK(std::sqrt(num / den) < 1e-3);
}

TEST_CASE("differentiable group statistics make the advantage term vanish", "[grqo]") {
  // If mean and std stay inside the graph, sum_i A_i is constant (== 0), so
  // its gradient w.r.t. any parameterization must be ~0.
  MatD theta = MatD::from(3, 1, {0.4, -1.1, 0.7});
  auto t = leaf(theta);
  auto r = mul(t, t);  // toy parameterization of rewards
  auto mu = mean_all(r);
  auto dev = sub(r, tile_rows(mu, 3));
  auto var = mean_all(mul(dev, dev));
  auto sigma = sqrt_(add_const(var, 1e-12));
  auto adv = div(dev, tile_rows(sigma, 3));
  backward(sum_all(adv));
  REQUIRE_FALSE(t->grad.d.empty());
  for (double g : t->grad.d) CHECK(std::abs(g) <= 1e-6);
}

TEST_CASE("layerwise advantages", "[grqo]") {
  const auto l1 = cm_from(3, 1, {0.2, 0.4, 0.9});
  const auto l2 = cm_from(3, 1, {0.1, 0.1, 0.4});

  // Single layer reduces to the plain pipeline.
  const auto single = layerwise_advantages({l1});
  const auto plain = group_advantages(query_rewards(l1));
  REQUIRE(single.size() == plain.size());
  for (std::size_t i = 0; i < single.size(); ++i)
    CHECK(single[i] == Catch::Approx(plain[i]).margin(1e-12));

  // Identical layers collapse to the single-layer value.
  const auto dup = layerwise_advantages({l1, l1, l1});
  for (std::size_t i = 0; i < dup.size(); ++i)
    CHECK(dup[i] == Catch::Approx(plain[i]).margin(1e-12));

  // Hand-computed two-layer mean:
  //   layer 1 rewards (-.2,-.4,-.9): mu -.5, sigma sqrt(.26/3)
  //     -> (1.0190493, 0.3396831, -1.3587324)
  //   layer 2 rewards (-.1,-.1,-.4): mu -.2, sigma sqrt(.02)
  //     -> (0.7071068, 0.7071068, -1.4142136)
  const auto mean2 = layerwise_advantages({l1, l2});
  CHECK(mean2[0] == Catch::Approx(0.8630780561).margin(1e-9));
  CHECK(mean2[1] == Catch::Approx(0.5233949457).margin(1e-9));
  CHECK(mean2[2] == Catch::Approx(-1.3864730019).margin(1e-9));

  CHECK_THROWS_AS(layerwise_advantages({}), std::invalid_argument);
  CHECK_THROWS_AS(layerwise_advantages({l1, cm_from(2, 1, {0.1, 0.2})}),
                  std::invalid_argument);
}

TEST_CASE("reward group bundles statistics and mask", "[grqo]") {
  const auto costs = cm_from(3, 1, {0.2, 0.4, 0.9});
  const std::vector<double> obj = {0.7, 0.29, 0.01};
  const auto g = make_reward_group({costs}, obj, 1e3, 0.5);
  CHECK(g.rewards == std::vector<double>{-0.2, -0.4, -0.9});
  CHECK(g.mean == Catch::Approx(-0.5).margin(1e-12));
  CHECK(g.stddev == Catch::Approx(std::sqrt(0.26 / 3)).margin(1e-12));
  CHECK(g.advantages[0] == Catch::Approx(1.0190493).margin(1e-6));
  CHECK(g.alpha == std::vector<double>{1e3, 1e3, 0.0});
}

TEST_CASE("differentiable rewards match the plain cost pipeline", "[grqo]") {
  Rng rng(33);
  const int nq = 5;
  std::vector<Box> boxes;
  MatD probs(nq, 2);
  for (int i = 0; i < nq; ++i) {
    const double w = rng.uniform(0.1, 0.4), h = rng.uniform(0.1, 0.4);
    boxes.emplace_back(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h);
    probs.at(i, 0) = rng.uniform(0.05, 0.95);
    probs.at(i, 1) = rng.uniform(0.05, 0.95);
  }
  std::vector<Instance> gts = {{7, Box(0.3, 0.4, 0.2, 0.25)}, {2, Box(0.7, 0.6, 0.3, 0.2)}};
  const std::vector<int> prompted = {7, 2};

  const auto plain = query_rewards(cost_matrix(probs, boxes, gts, prompted));
  auto node = differentiable_rewards(constant(probs), constant(boxes_to_mat<double>(boxes)),
                                     gts, prompted);
  REQUIRE(node->rows() == nq);
  for (int i = 0; i < nq; ++i)
    CHECK(node->value.at(i, 0) == Catch::Approx(plain[static_cast<std::size_t>(i)]).margin(1e-9));

  MatD boxmat = boxes_to_mat<double>(boxes);
  fd_check({probs, boxmat}, [&](const std::vector<NodeD>& v) {
    Rng r(34);
    MatD w(nq, 1);
    for (auto& x : w.d) x = r.uniform(0.5, 1.5);
    return sum_all(mul(differentiable_rewards(v[0], v[1], gts, prompted), constant(w)));
  });
}

#include <catch2/catch.hpp>

#include <cmath>
#include <vector>

#include "dwmr/gradcheck.hpp"
#include "dwmr/losses.hpp"
#include "dwmr/rng.hpp"

using namespace dwmr;
using Catch::Matchers::Contains;

namespace {

Tensor<double> rand_probs(int n, int k, Rng& rng) {
  auto t = Tensor<double>::zeros({n, k});
  for (auto& v : t.data()) v = rng.uniform(0.02, 0.98);
  return t;
}

Tensor<double> rand_bits(int n, int k, Rng& rng) {
  auto t = Tensor<double>::zeros({n, k});
  for (auto& v : t.data()) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  return t;
}

// standardization oracle: population std + eps, matching the documented choice
std::vector<double> standardize_oracle(const Tensor<double>& p, double eps) {
  const int n = p.shape[0], k = p.shape[1];
  std::vector<double> out(p.size());
  for (int j = 0; j < k; ++j) {
    double mean = 0;
    for (int i = 0; i < n; ++i) mean += p.data()[i * k + j];
    mean /= n;
    double var = 0;
    for (int i = 0; i < n; ++i) {
      const double d = p.data()[i * k + j] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / n);
    for (int i = 0; i < n; ++i) out[i * k + j] = (p.data()[i * k + j] - mean) / (sd + eps);
  }
  return out;
}

double cor_oracle(const Tensor<double>& p) {
  const int n = p.shape[0], k = p.shape[1];
  if (k < 2) return 0;
  auto pt = standardize_oracle(p, 1e-6);
  double acc = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      double c = 0;
      for (int r = 0; r < n; ++r) c += pt[r * k + i] * pt[r * k + j];
      acc += std::abs(c / (n - 1));
    }
  return acc / (double(k) * (k - 1));
}

double cos_oracle(const Tensor<double>& p, double eps = 1e-6) {
  const int n = p.shape[0], k = p.shape[1];
  if (k < 3) return 0;
  auto pt = standardize_oracle(p, eps);
  double acc = 0;
  size_t count = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      for (int l = 0; l < k; ++l) {
        if (i == j || j == l || i == l) continue;
        double m = 0;
        for (int r = 0; r < n; ++r) m += pt[r * k + i] * pt[r * k + j] * pt[r * k + l];
        acc += std::abs(m / n);
        ++count;
      }
  return acc / double(count);
}

// 4-row truth table with the third column the XOR of the first two
Tensor<double> xor_batch() {
  return Tensor<double>::from({4, 3}, {0, 0, 0,  //
                                       0, 1, 1,  //
                                       1, 0, 1,  //
                                       1, 1, 0});
}

// draw |p - b| away from the 0.5 indicator boundary so finite differences of
// the locality loss stay smooth
Tensor<double> probs_off_boundary(const Tensor<double>& bits, Rng& rng) {
  auto p = Tensor<double>::zeros(bits.shape);
  for (size_t i = 0; i < p.size(); ++i) {
    const double u = rng.uniform();
    const double d = u < 0.5 ? u * 0.88 : 0.56 + (u - 0.5) * 0.87;
    p.data()[i] = bits.data()[i] > 0.5 ? 1.0 - d : d;
  }
  return p;
}

}  // namespace

TEST_CASE("normalize_batch standardizes columns") {
  Tape<double> tape;

  SECTION("constant column maps to zeros") {
    auto p = Tensor<double>::from({4, 2}, {0.7, 0.1, 0.7, 0.9, 0.7, 0.4, 0.7, 0.6});
    auto y = normalize_batch(tape, p);
    for (int i = 0; i < 4; ++i) REQUIRE(y.data()[i * 2] == Approx(0.0).margin(1e-12));
  }

  SECTION("balanced binary column maps to +/-1") {
    auto p = Tensor<double>::from({4, 1}, {0, 1, 0, 1});
    auto y = normalize_batch(tape, p);
    for (int i = 0; i < 4; ++i)
      REQUIRE(std::abs(y.data()[i]) == Approx(1.0).margin(1e-5));
  }

  SECTION("output columns are centered") {
    Rng rng(3);
    auto p = rand_probs(16, 5, rng);
    auto y = normalize_batch(tape, p);
    for (int j = 0; j < 5; ++j) {
      double mean = 0;
      for (int i = 0; i < 16; ++i) mean += y.data()[i * 5 + j];
      REQUIRE(mean / 16 == Approx(0.0).margin(1e-9));
    }
  }

  SECTION("a single row is rejected") {
    auto p = Tensor<double>::from({1, 3}, {0.1, 0.2, 0.3});
    REQUIRE_THROWS_WITH(normalize_batch(tape, p), Contains("normalize_batch"));
  }
}

TEST_CASE("var_loss hinge values") {
  Tape<double> tape;

  SECTION("identical rows pay the full hinge") {
    auto p = Tensor<double>::from({4, 2}, {0.3, 0.8, 0.3, 0.8, 0.3, 0.8, 0.3, 0.8});
    // zero variance: per-bit cost gamma - sqrt(1e-6)
    REQUIRE(var_loss(tape, p, 0.45).item() == Approx(0.449).margin(1e-9));
  }

  SECTION("balanced binary columns are free") {
    auto p = Tensor<double>::from({4, 2}, {0, 1, 1, 0, 0, 1, 1, 0});
    REQUIRE(var_loss(tape, p, 0.45).item() == Approx(0.0).margin(1e-12));
  }

  SECTION("gamma zero disables the term") {
    Rng rng(4);
    auto p = rand_probs(8, 4, rng);
    REQUIRE(var_loss(tape, p, 0.0).item() == Approx(0.0).margin(1e-12));
  }

  SECTION("invariant under column complement and row permutation") {
    Rng rng(5);
    auto p = rand_probs(10, 4, rng);
    const double base = var_loss(tape, p, 0.45).item();

    auto comp = p.clone();
    for (int i = 0; i < 10; ++i) comp.data()[i * 4 + 2] = 1.0 - comp.data()[i * 4 + 2];
    REQUIRE(var_loss(tape, comp, 0.45).item() == Approx(base).margin(1e-12));

    auto perm = Tensor<double>::zeros({10, 4});
    const int order[10] = {7, 3, 9, 0, 5, 1, 8, 2, 6, 4};
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 4; ++j) perm.data()[i * 4 + j] = p.data()[order[i] * 4 + j];
    REQUIRE(var_loss(tape, perm, 0.45).item() == Approx(base).margin(1e-12));
  }
}

TEST_CASE("cor_loss matches the brute-force pairwise loop") {
  Tape<double> tape;
  Rng rng(6);
  for (auto [n, k] : std::vector<std::pair<int, int>>{{8, 2}, {16, 5}, {64, 16}, {5, 9}}) {
    auto p = rand_probs(n, k, rng);
    REQUIRE(cor_loss(tape, p).item() == Approx(cor_oracle(p)).margin(1e-10));
  }
}

TEST_CASE("cor_loss structural values") {
  Tape<double> tape;

  SECTION("two identical balanced columns correlate fully") {
    // N/(N-1) inflation from the sample normalization shrinks with batch size
    const int n = 4000;
    auto p = Tensor<double>::zeros({n, 2});
    for (int i = 0; i < n; ++i) p.data()[i * 2] = p.data()[i * 2 + 1] = double(i % 2);
    REQUIRE(cor_loss(tape, p).item() == Approx(1.0).margin(1e-3));
  }

  SECTION("a column and its complement look the same") {
    auto p = Tensor<double>::from({4, 2}, {0, 1, 1, 0, 0, 1, 1, 0});
    auto q = Tensor<double>::from({4, 2}, {0, 0, 1, 1, 0, 0, 1, 1});
    REQUIRE(cor_loss(tape, p).item() == Approx(cor_loss(tape, q).item()).margin(1e-12));
  }

  SECTION("independent balanced columns stay small") {
    Rng rng(7);
    auto p = rand_bits(10000, 2, rng);
    REQUIRE(cor_loss(tape, p).item() < 0.05);
  }

  SECTION("a single column has no pairs") {
    auto p = Tensor<double>::from({4, 1}, {0, 1, 0, 1});
    REQUIRE(cor_loss(tape, p).item() == 0.0);
  }

  SECTION("invariant under column permutation") {
    Rng rng(8);
    auto p = rand_probs(12, 5, rng);
    auto q = Tensor<double>::zeros({12, 5});
    const int order[5] = {3, 0, 4, 1, 2};
    for (int i = 0; i < 12; ++i)
      for (int j = 0; j < 5; ++j) q.data()[i * 5 + j] = p.data()[i * 5 + order[j]];
    REQUIRE(cor_loss(tape, q).item() == Approx(cor_loss(tape, p).item()).margin(1e-12));
  }
}

TEST_CASE("cos_loss matches the brute-force triple loop") {
  Tape<double> tape;
  Rng rng(9);
  for (auto [n, k] : std::vector<std::pair<int, int>>{{8, 3}, {16, 5}, {64, 8}, {6, 7}}) {
    auto p = rand_probs(n, k, rng);
    REQUIRE(cos_loss(tape, p).item() == Approx(cos_oracle(p)).margin(1e-10));
  }
}

TEST_CASE("cos_loss flags the XOR construction") {
  Tape<double> tape;
  auto p = xor_batch();

  // population-std oracle without the eps: the coskewness signal is exactly 1
  REQUIRE(cos_oracle(p, 0.0) == Approx(1.0).margin(1e-6));
  // implementation (eps in the denominator) lands close, well within the band
  REQUIRE(cos_loss(tape, p).item() == Approx(1.0).margin(0.35));
  // while every pairwise correlation vanishes
  REQUIRE(cor_loss(tape, p).item() <= 0.35);
  REQUIRE(cor_oracle(p) == Approx(0.0).margin(1e-12));
}

TEST_CASE("cos_loss small-index and sampling behavior") {
  Tape<double> tape;

  SECTION("fewer than three columns is defined as zero") {
    auto p = Tensor<double>::from({4, 2}, {0, 1, 1, 0, 0.3, 0.7, 0.8, 0.2});
    REQUIRE(cos_loss(tape, p).item() == 0.0);
  }

  SECTION("independent balanced columns stay small") {
    Rng rng(10);
    auto p = rand_bits(10000, 6, rng);
    REQUIRE(cos_loss(tape, p).item() < 0.05);
  }

  SECTION("the sampled estimator is unbiased") {
    Rng rng(11);
    auto p = rand_probs(32, 8, rng);
    const double full = cos_loss(tape, p).item();
    std::vector<double> est;
    for (int s = 0; s < 100; ++s) {
      Rng draw(1000 + s);
      est.push_back(cos_loss(tape, p, 64, &draw).item());
    }
    double mean = 0;
    for (double e : est) mean += e;
    mean /= est.size();
    double var = 0;
    for (double e : est) var += (e - mean) * (e - mean);
    const double se = std::sqrt(var / (est.size() - 1)) / std::sqrt(double(est.size()));
    REQUIRE(std::abs(mean - full) <= 2 * se + 1e-12);
  }
}

TEST_CASE("loc_loss hand-computed fixtures") {
  Tape<double> tape;
  const int K = 64, N = 4, L = 1, U = 6;
  const double m = double(L + U) / (2.0 * K), w = double(U - L) / (2.0 * K);

  SECTION("no movement at all still pays the window floor") {
    Rng rng(12);
    auto b = rand_bits(N, K, rng);
    // p equal to the target bits: d = 0, loss = (m - w)^2 = (1/64)^2
    REQUIRE(loc_loss(tape, b, b, L, U).item() == Approx((m - w) * (m - w)).margin(1e-9));
    REQUIRE((m - w) * (m - w) == Approx(2.441e-4).margin(1e-7));
  }

  SECTION("three hard flips sit inside the window") {
    Rng rng(13);
    auto b = rand_bits(N, K, rng);
    auto p = b.clone();
    for (int i = 0; i < N; ++i)
      for (int j : {5, 21, 40}) p.data()[i * K + j] = 1.0 - p.data()[i * K + j];
    REQUIRE(loc_loss(tape, p, b, L, U).item() == Approx(0.0).margin(1e-9));
  }

  SECTION("the half-point gate is strictly greater-than") {
    Rng rng(14);
    auto b = rand_bits(N, K, rng);
    auto p = b.clone();
    for (auto& v : p.data()) v = v > 0.5 ? v - 0.5 : v + 0.5;  // |p - b| = 0.5 everywhere
    // every term excluded: d = 0, so the loss equals the d=0 floor exactly
    REQUIRE(loc_loss(tape, p, b, L, U).item() == Approx((m - w) * (m - w)).margin(1e-9));
  }
}

TEST_CASE("kl_loss against the Bernoulli(0.5) prior") {
  Tape<double> tape;

  SECTION("matching the prior costs nothing") {
    auto p = Tensor<double>::full({4, 3}, 0.5);
    REQUIRE(kl_loss(tape, p).item() == Approx(0.0).margin(1e-12));
  }

  SECTION("saturated bits pay ln 2") {
    auto p = Tensor<double>::full({2, 2}, 1.0);
    REQUIRE(kl_loss(tape, p).item() == Approx(std::log(2.0)).margin(1e-5));
  }

  SECTION("symmetric under complement") {
    Rng rng(15);
    auto p = rand_probs(6, 4, rng);
    auto q = p.clone();
    for (auto& v : q.data()) v = 1.0 - v;
    REQUIRE(kl_loss(tape, p).item() == Approx(kl_loss(tape, q).item()).margin(1e-12));
  }
}

TEST_CASE("reconstruction error is a plain MSE") {
  Tape<double> tape;
  Rng rng(16);
  auto x = rand_probs(3, 8, rng);
  REQUIRE(mse_loss(tape, x, x).item() == Approx(0.0).margin(1e-12));

  auto shifted = x.clone();
  for (auto& v : shifted.data()) v += 0.1;
  REQUIRE(mse_loss(tape, shifted, x).item() == Approx(0.01).margin(1e-12));

  auto down = x.clone();
  for (auto& v : down.data()) v -= 0.1;
  REQUIRE(mse_loss(tape, down, x).item() == Approx(0.01).margin(1e-12));
}

TEST_CASE("binary_concrete_sample noise behavior") {
  SECTION("binarized samples at logit zero are balanced") {
    Tape<double> tape;
    tape.recording = false;
    Rng rng(17);
    auto logits = Tensor<double>::zeros({100000});
    auto p = binary_concrete_sample(tape, logits, rng);
    double ones = 0;
    for (double v : p.data()) {
      REQUIRE(v > 0.0);
      REQUIRE(v < 1.0);
      if (v >= 0.5) ones += 1;
    }
    REQUIRE(ones / 100000 == Approx(0.5).margin(0.01));
  }

  SECTION("gradient with frozen noise matches finite differences") {
    Rng init(18);
    auto logits = Tensor<double>::zeros({12});
    for (auto& v : logits.data()) v = init.normal();
    logits.set_requires_grad(true);
    std::vector<Tensor<double>> params = {logits};
    auto res = gradcheck<double>(params, [&](Tape<double>& t) {
      Rng frozen(99);  // identical noise for every probe
      auto p = binary_concrete_sample(t, logits, frozen, 0.7);
      return mean_all(t, mul(t, p, p));
    });
    REQUIRE(res.max_rel_err < 1e-5);
  }
}

TEST_CASE("bit_round_pred_loss stop-gradient placement") {
  SECTION("already-binary agreement is free") {
    Tape<double> tape;
    auto p = Tensor<double>::from({2, 2}, {0, 1, 1, 0});
    REQUIRE(bit_round_pred_loss(tape, p, p).item() == Approx(0.0).margin(1e-12));
  }

  SECTION("each side only sees its own term") {
    Tape<double> tape;
    auto pprime = Tensor<double>::from({1, 1}, {0.3});
    auto phat = Tensor<double>::from({1, 1}, {0.9});
    pprime.set_requires_grad(true);
    phat.set_requires_grad(true);
    auto loss = bit_round_pred_loss(tape, pprime, phat);
    // r(p') = 0 vs sg r(phat) = 1 -> 0.5*1; phat 0.9 vs sg r(p') = 0 -> 0.5*0.81
    REQUIRE(loss.item() == Approx(0.905).margin(1e-12));
    tape.backward(loss);
    // straight-through: d(0.5*(r - 1)^2)/dp' = (0 - 1) = -1
    REQUIRE(pprime.grad()[0] == Approx(-1.0).margin(1e-12));
    // direct term: d(0.5*(0.9 - 0)^2)/dphat = 0.9
    REQUIRE(phat.grad()[0] == Approx(0.9).margin(1e-12));
  }
}

TEST_CASE("objective is additive in its weighted terms") {
  Tape<double> tape;
  Rng rng(19);
  const int N = 8, K = 6;
  auto p = rand_probs(N, K, rng);
  auto phat = rand_probs(N, K, rng);
  auto b = rand_bits(N, K, rng);

  const double lv = 25, lc = 5, ls = 5, ll = 1;
  auto total = bce_loss(tape, phat, b);
  total = add(tape, total, scale(tape, var_loss(tape, p, 0.45), lv));
  total = add(tape, total, scale(tape, cor_loss(tape, p), lc));
  total = add(tape, total, scale(tape, cos_loss(tape, p), ls));
  total = add(tape, total, scale(tape, loc_loss(tape, p, b, 1, 3), ll));

  const double by_hand = bce_loss(tape, phat, b).item() +
                         lv * var_loss(tape, p, 0.45).item() + lc * cor_loss(tape, p).item() +
                         ls * cos_loss(tape, p).item() + ll * loc_loss(tape, p, b, 1, 3).item();
  REQUIRE(total.item() == Approx(by_hand).margin(1e-12));

  // every term individually non-negative, so the total dominates prediction
  REQUIRE(total.item() >= bce_loss(tape, phat, b).item() - 1e-12);
}

TEST_CASE("loss gradients agree with finite differences over 20 seeds") {
  const int N = 8, K = 6;
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    auto bits = rand_bits(N, K, rng);

    auto p = rand_probs(N, K, rng);
    p.set_requires_grad(true);
    std::vector<Tensor<double>> pv = {p};

    auto r1 = gradcheck<double>(
        pv, [&](Tape<double>& t) { return var_loss(t, p, 0.45); });
    INFO("var seed " << seed);
    REQUIRE(r1.max_rel_err < 1e-3);

    auto r2 = gradcheck<double>(pv, [&](Tape<double>& t) { return cor_loss(t, p); });
    INFO("cor seed " << seed);
    REQUIRE(r2.max_rel_err < 1e-3);

    auto r3 = gradcheck<double>(pv, [&](Tape<double>& t) { return cos_loss(t, p); });
    INFO("cos seed " << seed);
    REQUIRE(r3.max_rel_err < 1e-3);

    auto r4 = gradcheck<double>(pv, [&](Tape<double>& t) {
      Rng draw(7);
      return cos_loss(t, p, 40, &draw);
    });
    INFO("cos sampled seed " << seed);
    REQUIRE(r4.max_rel_err < 1e-3);

    auto r5 = gradcheck<double>(pv, [&](Tape<double>& t) { return kl_loss(t, p); });
    INFO("kl seed " << seed);
    REQUIRE(r5.max_rel_err < 1e-3);

    auto pb = probs_off_boundary(bits, rng);
    pb.set_requires_grad(true);
    std::vector<Tensor<double>> pbv = {pb};
    auto r6 = gradcheck<double>(
        pbv, [&](Tape<double>& t) { return loc_loss(t, pb, bits, 1, 3); });
    INFO("loc seed " << seed);
    REQUIRE(r6.max_rel_err < 1e-3);

    auto phat = rand_probs(N, K, rng);
    phat.set_requires_grad(true);
    std::vector<Tensor<double>> both = {p, phat};
    auto r7 = gradcheck<double>(both, [&](Tape<double>& t) {
      auto total = bce_loss(t, phat, bits);
      total = add(t, total, scale(t, var_loss(t, p, 0.45), 25.0));
      total = add(t, total, scale(t, cor_loss(t, p), 5.0));
      total = add(t, total, scale(t, cos_loss(t, p), 5.0));
      return total;
    });
    INFO("total seed " << seed);
    REQUIRE(r7.max_rel_err < 1e-3);
  }
}

TEST_CASE("every loss term is non-negative on random input") {
  Tape<double> tape;
  Rng rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    auto p = rand_probs(10, 5, rng);
    auto b = rand_bits(10, 5, rng);
    REQUIRE(var_loss(tape, p, 0.45).item() >= 0.0);
    REQUIRE(cor_loss(tape, p).item() >= 0.0);
    REQUIRE(cos_loss(tape, p).item() >= 0.0);
    REQUIRE(loc_loss(tape, p, b, 1, 3).item() >= 0.0);
    REQUIRE(kl_loss(tape, p).item() >= 0.0);
    REQUIRE(bce_loss(tape, p, b).item() >= 0.0);
  }
}

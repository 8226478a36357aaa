#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "relformer/errors.hpp"
#include "relformer/relformer.hpp"
#include "test_support.hpp"

using namespace relformer;
using relformer::testing::finite_difference_check;
using relformer::testing::random_parameter;
using relformer::testing::random_tensor;
using relformer::testing::tiny_model_config;

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

// Exact bin-average oracle on continuous frame coordinates [u0, u1] of a
// tracklet: bin k spans an equal share and weighs each frame by its overlap.
std::vector<double> roi_oracle(const std::vector<std::vector<double>>& frames, double u0, double u1,
                               std::size_t bins) {
  const std::size_t d = frames[0].size();
  std::vector<double> out(bins * d, 0.0);
  const double w = (u1 - u0) / static_cast<double>(bins);
  for (std::size_t k = 0; k < bins; ++k) {
    const double a = u0 + w * static_cast<double>(k);
    const double b = u0 + w * static_cast<double>(k + 1);
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const double lo = std::max(a, static_cast<double>(t));
      const double hi = std::min(b, static_cast<double>(t) + 1.0);
      if (hi <= lo) continue;
      for (std::size_t c = 0; c < d; ++c) out[k * d + c] += (hi - lo) / w * frames[t][c];
    }
  }
  return out;
}

std::vector<std::vector<double>> rows_of(const Tensor& t) {
  std::vector<std::vector<double>> r(t.size(0), std::vector<double>(t.size(1)));
  for (std::size_t i = 0; i < t.size(0); ++i)
    for (std::size_t j = 0; j < t.size(1); ++j) r[i][j] = t.at(i, j);
  return r;
}

double softmax_at(const std::vector<double>& xs, std::size_t i) {
  double mx = *std::max_element(xs.begin(), xs.end());
  double z = 0.0;
  for (double x : xs) z += std::exp(x - mx);
  return std::exp(xs[i] - mx) / z;
}

struct DecoderFixture {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  std::vector<Tracklet> tracklets;
  int F = 16;

  explicit DecoderFixture(std::uint64_t seed, std::size_t n = 3) {
    Rng rng(seed);
    init_feature_params(store, rng, cfg);
    init_encoder_params(store, rng, cfg);
    init_decoder_params(store, rng, cfg);
    std::uniform_int_distribution<int> start(0, F - 4);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (std::size_t i = 0; i < n; ++i) {
      const int a = start(rng);
      std::uniform_int_distribution<int> len(2, F - a);
      Tracklet t = relformer::testing::make_tracklet(static_cast<int>(i), a, a + len(rng), F, 0, cfg.d_a, 5);
      for (float& x : t.appearance) x = u(rng);
      tracklets.push_back(std::move(t));
    }
  }

  DecoderOutput run(const std::vector<Tracklet>& ts) const {
    const TrackletFeatures f = compute_tracklet_features(ts, ParamScope(store, "feat"), cfg);
    const Tensor enc = encode_tracklets(f.pooled, store, cfg);
    return decoder_forward(f, make_layout(ts, F), enc, build_anchors(cfg.m_c, cfg.m_d), store, cfg);
  }
};

}  // namespace

// ---- anchors ------------------------------------------------------------------

TEST(Anchors, DefaultGridHas192ValidSlots) {
  const AnchorSet a = build_anchors(16, 12);
  ASSERT_EQ(a.size(), 192u);
  for (const auto& s : a.slots) {
    EXPECT_GE(s.start, 0.0);
    EXPECT_LT(s.start, s.end);
    EXPECT_LE(s.end, 1.0);
  }
}

TEST(Anchors, SingleAnchorClampsToSecondHalf) {
  const AnchorSet a = build_anchors(1, 1);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_DOUBLE_EQ(a.slots[0].start, 0.5);
  EXPECT_DOUBLE_EQ(a.slots[0].end, 1.0);
}

TEST(Anchors, CenterMajorIndexing) {
  const AnchorSet a = build_anchors(4, 2);
  // j = ci * m_d + di: center 2/4 with durations 1/2 and 1.
  EXPECT_DOUBLE_EQ(a.slots[2].start, 0.25);
  EXPECT_DOUBLE_EQ(a.slots[2].end, 0.75);
  EXPECT_DOUBLE_EQ(a.slots[3].start, 0.0);
  EXPECT_DOUBLE_EQ(a.slots[3].end, 1.0);
  EXPECT_THROW(build_anchors(0, 3), ConfigError);
}

// ---- encoder ------------------------------------------------------------------

TEST(Encoder, SingleTrackletAndPermutationEquivariance) {
  ModelConfig cfg = tiny_model_config();
  cfg.encoder_layers = 2;
  ParamStore store;
  Rng rng(1);
  init_encoder_params(store, rng, cfg);
  EXPECT_EQ(encode_tracklets(random_tensor({1, cfg.d}, rng), store, cfg).shape(), (Shape{1, cfg.d}));

  const Tensor h = random_tensor({5, cfg.d}, rng);
  const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
  const Tensor out = encode_tracklets(h, store, cfg);
  const Tensor out_p = encode_tracklets(gather_rows(h, perm), store, cfg);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < cfg.d; ++c) EXPECT_NEAR(out_p.at(i, c), out.at(perm[i], c), 1e-12);
}

TEST(Encoder, ZeroOutputProjectionsGiveIdentity) {
  ModelConfig cfg = tiny_model_config();
  cfg.encoder_layers = 3;
  ParamStore store;
  Rng rng(2);
  init_encoder_params(store, rng, cfg);
  for (auto& [name, t] : store)
    if (name.find(".attn.o.") != std::string::npos || name.find(".ffn.fc2") != std::string::npos)
      for (double& v : t.mutable_data()) v = 0.0;
  const Tensor h = random_tensor({4, cfg.d}, rng);
  EXPECT_EQ(to_vec(encode_tracklets(h, store, cfg)), to_vec(h));
}

TEST(Encoder, EmptyVideoRejected) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(3);
  init_encoder_params(store, rng, cfg);
  EXPECT_THROW(encode_tracklets(Tensor(Shape{0, cfg.d}), store, cfg), ShapeError);
}

// ---- RoI pooling ----------------------------------------------------------------

TEST(RoiPool, FullSlotWithEqualBinsIsIdentity) {
  Rng rng(4);
  const int F = 20;
  const Tensor x = random_tensor({7, 5}, rng);
  const TimeSlot slot = slot_from_frames(6, 13, F);
  const Tensor out = temporal_roi_pool(x, slot, slot, F, 7);
  ASSERT_EQ(out.shape(), (Shape{7, 5}));
  for (std::size_t i = 0; i < 35; ++i) EXPECT_NEAR(out.data()[i], x.data()[i], 1e-12);
}

TEST(RoiPool, DisjointSlotsGiveExactZeros) {
  Rng rng(5);
  const Tensor x = random_tensor({6, 4}, rng);
  const Tensor out = temporal_roi_pool(x, slot_from_frames(0, 6, 20), slot_from_frames(10, 16, 20), 20, 7);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(RoiPool, FirstHalfOfFourteenFramesMatchesOracle) {
  Rng rng(6);
  const int F = 30;
  const Tensor x = random_tensor({14, 3}, rng);
  const TimeSlot track = slot_from_frames(5, 19, F);
  const TimeSlot query = slot_from_frames(5, 12, F);
  const auto want = roi_oracle(rows_of(x), 0.0, 7.0, 7);
  const auto got = to_vec(temporal_roi_pool(x, track, query, F, 7));
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(RoiPool, FractionalIntersectionMatchesOracle) {
  Rng rng(7);
  const int F = 30;
  const Tensor x = random_tensor({14, 3}, rng);
  const TimeSlot track = slot_from_frames(5, 19, F);
  const TimeSlot query{0.21, 0.47};
  const double u0 = 0.21 * F - 5, u1 = 0.47 * F - 5;
  const auto want = roi_oracle(rows_of(x), u0, u1, 4);
  const auto got = to_vec(temporal_roi_pool(x, track, query, F, 4));
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(RoiPool, TranslationConsistent) {
  Rng rng(8);
  const int F = 40;
  const Tensor x = random_tensor({10, 4}, rng);
  const Tensor a = temporal_roi_pool(x, slot_from_frames(2, 12, F), {7.3 / F, 15.1 / F}, F, 7);
  const Tensor b = temporal_roi_pool(x, slot_from_frames(20, 30, F), {25.3 / F, 33.1 / F}, F, 7);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(RoiPool, ZeroPaddingOnlyForDisjointPairs) {
  Rng rng(9);
  const int F = 24;
  std::uniform_int_distribution<int> frame(0, F - 2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int a = frame(rng);
    std::uniform_int_distribution<int> len(2, F - a);
    const int b = a + len(rng);
    double s = u(rng), e = u(rng);
    if (s > e) std::swap(s, e);
    if (e - s < 1e-3) continue;
    const TimeSlot track = slot_from_frames(a, b, F);
    const Tensor x = random_tensor({static_cast<std::size_t>(b - a), 3}, rng, 1.0);
    const Tensor shifted = add(x, Tensor(x.shape(), std::vector<double>(x.numel(), 2.0)));
    const Tensor out = temporal_roi_pool(shifted, track, {s, e}, F, 7);
    const bool disjoint = !intersect(track, {s, e}).has_value();
    bool all_zero = true;
    for (double v : out.data()) all_zero &= v == 0.0;
    EXPECT_EQ(all_zero, disjoint) << a << ".." << b << " vs " << s << "," << e;
  }
}

TEST(RoiPool, GradientWrtFeaturesAndSlots) {
  Rng rng(10);
  const int F = 16;
  std::vector<Tracklet> ts = {relformer::testing::make_tracklet(0, 0, 9, F),
                              relformer::testing::make_tracklet(1, 5, 16, F)};
  const TrackletLayout layout = make_layout(ts, F);
  ParamStore store;
  store.add("frames", random_parameter({20, 3}, rng));
  store.add("slots", Tensor::parameter({3, 2}, {0.11, 0.52, 0.33, 0.91, 0.05, 0.27}));
  const Tensor target = random_tensor({6, 12}, rng);
  auto loss = [&] { return sum(mul(temporal_roi_pool(store.get("frames"), layout, store.get("slots"), 4), target)); };
  const auto r = finite_difference_check(store, loss, 40, 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(ValueMatrix, DisjointTrackletsShareConstantRow) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(11);
  init_decoder_params(store, rng, cfg);
  for (double& v : store.get("decoder.layer0.roi.fc2.b").mutable_data()) v = 0.3;
  const int F = 20;
  std::vector<Tracklet> ts = {relformer::testing::make_tracklet(0, 0, 5, F),
                              relformer::testing::make_tracklet(1, 2, 7, F),
                              relformer::testing::make_tracklet(2, 1, 4, F)};
  const Tensor frames = random_tensor({13, cfg.d}, rng);
  const Tensor q({1, 2}, {0.5, 0.9});
  const Tensor v = build_value_matrix(frames, make_layout(ts, F), q, ParamScope(store, "decoder.layer0"), cfg);
  ASSERT_EQ(v.shape(), (Shape{3, cfg.d_v}));
  const Tensor zero_row = mlp_forward({cfg.l_roi * cfg.d, cfg.mlp_hidden, cfg.d_v},
                                      ParamScope(store, "decoder.layer0.roi"), Tensor(Shape{1, cfg.l_roi * cfg.d}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < cfg.d_v; ++c) EXPECT_EQ(v.at(i, c), zero_row.at(0, c));
}

TEST(ValueMatrix, ComposesPoolAndMlp) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(12);
  init_decoder_params(store, rng, cfg);
  const int F = 20;
  std::vector<Tracklet> ts = {relformer::testing::make_tracklet(0, 3, 15, F)};
  const Tensor frames = random_tensor({12, cfg.d}, rng);
  const TimeSlot q{0.2, 0.6};
  const Tensor v = build_value_matrix(frames, make_layout(ts, F), Tensor({1, 2}, {q.start, q.end}),
                                      ParamScope(store, "decoder.layer0"), cfg);
  const Tensor pooled = temporal_roi_pool(frames, ts[0].slot, q, F, cfg.l_roi);
  const Tensor manual = mlp_forward({cfg.l_roi * cfg.d, cfg.mlp_hidden, cfg.d_v},
                                    ParamScope(store, "decoder.layer0.roi"),
                                    reshape(pooled, {1, cfg.l_roi * cfg.d}));
  for (std::size_t c = 0; c < cfg.d_v; ++c) EXPECT_NEAR(v.at(0, c), manual.at(0, c), 1e-12);
}

// ---- role attention -----------------------------------------------------------------

TEST(RoleAttention, ScalarCase) {
  ModelConfig cfg;
  cfg.d = 1;
  ParamStore store;
  for (const char* n : {"l.wq_s", "l.wk_s", "l.wq_o", "l.wk_o"}) store.add(n, Tensor::parameter({1, 1}, {1.0}));
  const Tensor a = role_attention(Tensor({1, 1}, {2.0}), Tensor({1, 1}, {3.0}), ParamScope(store, "l"), cfg);
  EXPECT_EQ(to_vec(a), (std::vector<double>{6.0, 6.0}));
}

TEST(RoleAttention, ZeroKeysGiveZeroLogits) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(13);
  init_decoder_params(store, rng, cfg);
  for (const char* n : {"decoder.layer0.wk_s", "decoder.layer0.wk_o"})
    for (double& v : store.get(n).mutable_data()) v = 0.0;
  const Tensor a = role_attention(random_tensor({3, cfg.d_q}, rng), random_tensor({4, cfg.d}, rng),
                                  ParamScope(store, "decoder.layer0"), cfg);
  for (double v : a.data()) EXPECT_EQ(v, 0.0);
}

TEST(RoleAttention, MatchesLoopOracle) {
  ModelConfig cfg = tiny_model_config();
  cfg.d = 6;
  cfg.d_q = 5;
  ParamStore store;
  Rng rng(14);
  store.add("l.wq_s", random_parameter({5, 6}, rng));
  store.add("l.wk_s", random_parameter({6, 6}, rng));
  store.add("l.wq_o", random_parameter({5, 6}, rng));
  store.add("l.wk_o", random_parameter({6, 6}, rng));
  const Tensor q = random_tensor({3, 5}, rng), h = random_tensor({4, 6}, rng);
  const Tensor a = role_attention(q, h, ParamScope(store, "l"), cfg);
  ASSERT_EQ(a.shape(), (Shape{2, 3, 4}));
  const char* roles[2][2] = {{"l.wq_s", "l.wk_s"}, {"l.wq_o", "l.wk_o"}};
  for (std::size_t r = 0; r < 2; ++r) {
    const Tensor& wq = store.get(roles[r][0]);
    const Tensor& wk = store.get(roles[r][1]);
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t i = 0; i < 4; ++i) {
        long double acc = 0.0L;
        for (std::size_t c = 0; c < 6; ++c) {
          long double qc = 0.0L, kc = 0.0L;
          for (std::size_t t = 0; t < 5; ++t) qc += q.at(j, t) * wq.at(t, c);
          for (std::size_t t = 0; t < 6; ++t) kc += h.at(i, t) * wk.at(t, c);
          acc += qc * kc;
        }
        EXPECT_NEAR(a.at(r, j, i), static_cast<double>(acc / std::sqrt(6.0L)), 1e-12);
      }
  }
}

// ---- attention normalization -------------------------------------------------------

TEST(NormalizeAttention, ZerosGiveQuarter) {
  const Tensor a = normalize_attention(Tensor(Shape{2, 3, 2}));
  for (double v : a.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(NormalizeAttention, SingleTrackletIsRoleSoftmax) {
  const Tensor a = normalize_attention(Tensor({2, 2, 1}, {1.0, -0.5, 3.0, 0.25}));
  EXPECT_NEAR(a.at(0, 0, 0), softmax_at({1.0, 3.0}, 0), 1e-15);
  EXPECT_NEAR(a.at(1, 0, 0), softmax_at({1.0, 3.0}, 1), 1e-15);
  EXPECT_NEAR(a.at(0, 1, 0), softmax_at({-0.5, 0.25}, 0), 1e-15);
}

TEST(NormalizeAttention, MatchesTwoPassOracle) {
  Rng rng(15);
  const Tensor x = random_tensor({2, 2, 3}, rng, 3.0);
  const Tensor a = normalize_attention(x);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t i = 0; i < 3; ++i) {
        const double over_i = softmax_at({x.at(r, j, 0), x.at(r, j, 1), x.at(r, j, 2)}, i);
        const double over_r = softmax_at({x.at(0, j, i), x.at(1, j, i)}, r);
        EXPECT_NEAR(a.at(r, j, i), over_i * over_r, 1e-12);
      }
}

TEST(NormalizeAttention, ProductBoundsHoldOnRandomTensors) {
  Rng rng(16);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = dim(rng), n = dim(rng);
    const Tensor x = random_tensor({2, m, n}, rng, 5.0);
    const Tensor a = normalize_attention(x);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t j = 0; j < m; ++j) {
        std::vector<double> row(n);
        for (std::size_t i = 0; i < n; ++i) row[i] = x.at(r, j, i);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double fi = softmax_at(row, i);
          const double fr = softmax_at({x.at(0, j, i), x.at(1, j, i)}, r);
          total += fi;
          EXPECT_GT(a.at(r, j, i), 0.0);
          EXPECT_LT(a.at(r, j, i), 1.0);
          EXPECT_LE(a.at(r, j, i), std::min(fi, fr) + 1e-15);
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
  }
}

TEST(NormalizeAttention, GradientMatchesFiniteDifferences) {
  Rng rng(17);
  ParamStore store;
  store.add("logits", random_parameter({2, 3, 4}, rng, 2.0));
  const Tensor target = random_tensor({2, 3, 4}, rng);
  const auto r = finite_difference_check(store, [&] { return sum(mul(normalize_attention(store.get("logits")), target)); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

// ---- cross attention ------------------------------------------------------------------

TEST(CrossAttend, MatchesExplicitSum) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(18);
  init_decoder_params(store, rng, cfg);
  const ParamScope layer(store, "decoder.layer0");
  const std::size_t m = 2, n = 3;
  const Tensor att = normalize_attention(random_tensor({2, m, n}, rng));
  const Tensor values = random_tensor({m * n, cfg.d_v}, rng);
  const Tensor out = cross_attend(att, values, layer, cfg);
  const MlpSpec spec{cfg.d_v, cfg.mlp_hidden, cfg.d_q};
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<double> vs(cfg.d_v, 0.0), vo(cfg.d_v, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < cfg.d_v; ++c) {
        vs[c] += att.at(0, j, i) * values.at(j * n + i, c);
        vo[c] += att.at(1, j, i) * values.at(j * n + i, c);
      }
    const Tensor fs = mlp_forward(spec, layer.sub("f_s"), Tensor({1, cfg.d_v}, vs));
    const Tensor fo = mlp_forward(spec, layer.sub("f_o"), Tensor({1, cfg.d_v}, vo));
    for (std::size_t c = 0; c < cfg.d_q; ++c) EXPECT_NEAR(out.at(j, c), fs.at(0, c) + fo.at(0, c), 1e-12);
  }
}

TEST(CrossAttend, ZeroObjectBranchIsolatesSubjectChannel) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(19);
  init_decoder_params(store, rng, cfg);
  for (auto& [name, t] : store)
    if (name.rfind("decoder.layer0.f_o.", 0) == 0)
      for (double& v : t.mutable_data()) v = 0.0;
  const ParamScope layer(store, "decoder.layer0");
  Tensor att = normalize_attention(random_tensor({2, 1, 2}, rng));
  const Tensor values = random_tensor({2, cfg.d_v}, rng);
  const Tensor base = cross_attend(att, values, layer, cfg);
  std::vector<double> changed = to_vec(att);
  changed[2] = 0.9;
  changed[3] = 0.05;
  const Tensor out = cross_attend(Tensor(att.shape(), changed), values, layer, cfg);
  EXPECT_EQ(to_vec(out), to_vec(base));
}

TEST(CrossAttend, SingleTrackletHalfWeights) {
  ModelConfig cfg = tiny_model_config();
  ParamStore store;
  Rng rng(20);
  init_decoder_params(store, rng, cfg);
  const ParamScope layer(store, "decoder.layer0");
  const Tensor v = random_tensor({1, cfg.d_v}, rng);
  const Tensor out = cross_attend(Tensor({2, 1, 1}, {0.5, 0.5}), v, layer, cfg);
  const MlpSpec spec{cfg.d_v, cfg.mlp_hidden, cfg.d_q};
  const Tensor want = add(mlp_forward(spec, layer.sub("f_s"), scale(v, 0.5)),
                          mlp_forward(spec, layer.sub("f_o"), scale(v, 0.5)));
  for (std::size_t c = 0; c < cfg.d_q; ++c) EXPECT_NEAR(out.at(0, c), want.at(0, c), 1e-12);
}

// ---- slot regression ---------------------------------------------------------------

TEST(SlotOffsets, ZeroOffsetsKeepReference) {
  const AnchorSet a = build_anchors(16, 12);
  const Tensor out = apply_slot_offsets(Tensor({a.size(), 2}), a.slots);
  const auto slots = slots_from_tensor(out);
  for (std::size_t j = 0; j < a.size(); ++j) {
    EXPECT_NEAR(slots[j].start, a.slots[j].start, 1e-15);
    EXPECT_NEAR(slots[j].end, a.slots[j].end, 1e-15);
  }
}

TEST(SlotOffsets, DoublingWidthClampsToFullVideo) {
  const std::vector<TimeSlot> ref = {{0.25, 0.75}};
  const auto s = slots_from_tensor(apply_slot_offsets(Tensor({1, 2}, {0.0, std::log(2.0)}), ref));
  EXPECT_NEAR(s[0].start, 0.0, 1e-15);
  EXPECT_NEAR(s[0].end, 1.0, 1e-15);
}

TEST(SlotOffsets, RandomOffsetsAlwaysValid) {
  Rng rng(21);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> big(0.0, 20.0);
  std::vector<TimeSlot> ref;
  std::vector<double> off;
  for (int k = 0; k < 10000; ++k) {
    double s = u(rng), e = u(rng);
    if (s > e) std::swap(s, e);
    if (e - s < 1e-3) e = std::min(1.0, s + 1e-3), s = e - 1e-3;
    ref.push_back({s, e});
    off.push_back(big(rng));
    off.push_back(big(rng));
  }
  const auto out = slots_from_tensor(apply_slot_offsets(Tensor({ref.size(), 2}, off), ref));
  for (const auto& s : out) {
    EXPECT_TRUE(s.valid()) << s.start << "," << s.end;
    EXPECT_GE(s.end - s.start, kMinSlotWidth - 1e-12);
  }
}

TEST(SlotOffsets, GradientMatchesFiniteDifferences) {
  Rng rng(22);
  ParamStore store;
  store.add("off", Tensor::parameter({3, 2}, {0.1, -0.3, -0.05, 0.2, 0.02, 0.4}));
  const std::vector<TimeSlot> ref = {{0.2, 0.5}, {0.4, 0.6}, {0.1, 0.9}};
  const Tensor target = random_tensor({3, 2}, rng);
  const auto r = finite_difference_check(store, [&] { return sum(mul(apply_slot_offsets(store.get("off"), ref), target)); });
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

// ---- decoder -----------------------------------------------------------------------

TEST(Decoder, ShapesAndAnchorSlotsWithZeroRegression) {
  DecoderFixture fx(23);
  fx.cfg.decoder_layers = 1;
  const DecoderOutput out = fx.run(fx.tracklets);
  const std::size_t m = fx.cfg.num_queries();
  EXPECT_EQ(out.queries.shape(), (Shape{m, fx.cfg.d_q}));
  EXPECT_EQ(out.attention.shape(), (Shape{2, m, 3}));
  ASSERT_EQ(out.slots.size(), 2u);
  const AnchorSet a = build_anchors(fx.cfg.m_c, fx.cfg.m_d);
  for (const auto& layer : out.slots)
    for (std::size_t j = 0; j < m; ++j) {
      EXPECT_NEAR(layer[j].start, a.slots[j].start, 1e-15);
      EXPECT_NEAR(layer[j].end, a.slots[j].end, 1e-15);
    }
}

TEST(Decoder, DeterministicAndPermutationEquivariant) {
  DecoderFixture fx(24, 4);
  const DecoderOutput a = fx.run(fx.tracklets);
  const DecoderOutput b = fx.run(fx.tracklets);
  EXPECT_EQ(to_vec(a.queries), to_vec(b.queries));
  EXPECT_EQ(to_vec(a.attention), to_vec(b.attention));

  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<Tracklet> permuted;
  for (std::size_t p : perm) permuted.push_back(fx.tracklets[p]);
  const DecoderOutput c = fx.run(permuted);
  const std::size_t m = fx.cfg.num_queries();
  for (std::size_t k = 0; k < a.queries.numel(); ++k) EXPECT_NEAR(c.queries.data()[k], a.queries.data()[k], 1e-9);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c.attention.at(r, j, i), a.attention.at(r, j, perm[i]), 1e-9);
}

TEST(Decoder, GradientWrtSubjectQueryProjection) {
  DecoderFixture fx(25);
  Rng rng(26);
  // Non-zero regression so every layer sees its own slots.
  for (double& v : fx.store.get("decoder.layer0.offset.fc2.w").mutable_data()) v = 0.05;
  const std::size_t m = fx.cfg.num_queries();
  const Tensor ta = random_tensor({2, m, 3}, rng);
  const Tensor tq = random_tensor({m, fx.cfg.d_q}, rng);
  ParamStore sub;
  sub.add("decoder.layer1.wq_s", fx.store.get("decoder.layer1.wq_s"));
  sub.add("decoder.layer0.wq_s", fx.store.get("decoder.layer0.wq_s"));
  auto loss = [&] {
    const DecoderOutput out = fx.run(fx.tracklets);
    return add(sum(mul(out.attention, ta)), scale(sum(mul(out.queries, tq)), 0.1));
  };
  const auto r = finite_difference_check(sub, loss, 30);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(Decoder, EmptyVideoRejected) {
  DecoderFixture fx(27);
  TrackletFeatures f;
  EXPECT_THROW(decoder_forward(f, TrackletLayout{}, Tensor(Shape{0, fx.cfg.d}), build_anchors(fx.cfg.m_c, fx.cfg.m_d),
                               fx.store, fx.cfg),
               ShapeError);
}

#include "relformer/relformer.hpp"

#include <algorithm>
#include <cmath>

#include "relformer/errors.hpp"

namespace relformer {

namespace {

std::string layer_name(const char* stack, std::size_t k) {
  return std::string(stack) + ".layer" + std::to_string(k);
}

void init_matrix(ParamStore& store, Rng& rng, const std::string& name, std::size_t rows, std::size_t cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(rows * cols);
  for (double& v : w) v = dist(rng);
  store.add(name, Tensor::parameter({rows, cols}, std::move(w)));
}

constexpr double kMaxLogWidthStep = 8.0;

}  // namespace

// ---- anchors -----------------------------------------------------------------

Tensor AnchorSet::as_tensor() const {
  std::vector<double> v;
  v.reserve(slots.size() * 2);
  for (const auto& s : slots) {
    v.push_back(s.start);
    v.push_back(s.end);
  }
  return Tensor({slots.size(), 2}, std::move(v));
}

AnchorSet build_anchors(std::size_t m_c, std::size_t m_d) {
  if (m_c == 0 || m_d == 0) throw ConfigError("build_anchors: m_c and m_d must be >= 1");
  AnchorSet a{m_c, m_d, {}};
  a.slots.reserve(m_c * m_d);
  for (std::size_t ci = 1; ci <= m_c; ++ci) {
    const double c = static_cast<double>(ci) / static_cast<double>(m_c);
    for (std::size_t di = 1; di <= m_d; ++di) {
      const double w = static_cast<double>(di) / static_cast<double>(m_d);
      a.slots.push_back({std::max(0.0, c - w / 2.0), std::min(1.0, c + w / 2.0)});
    }
  }
  return a;
}

TrackletLayout make_layout(std::span<const Tracklet> tracklets, int frame_count) {
  TrackletLayout layout;
  layout.frame_count = frame_count;
  std::size_t off = 0;
  for (const auto& t : tracklets) {
    layout.offsets.push_back(off);
    layout.lengths.push_back(t.boxes.size());
    layout.first_frames.push_back(frame_range(t.slot, frame_count).first);
    layout.slots.push_back(t.slot);
    off += t.boxes.size();
  }
  return layout;
}

// ---- encoder -------------------------------------------------------------------

void init_encoder_params(ParamStore& store, Rng& rng, const ModelConfig& cfg) {
  for (std::size_t k = 0; k < cfg.encoder_layers; ++k)
    init_self_attention_block(store, rng, layer_name("encoder", k), cfg.d, cfg.mlp_hidden);
}

Tensor encode_tracklets(const Tensor& h, const ParamStore& params, const ModelConfig& cfg) {
  if (h.rank() != 2 || h.size(0) == 0) {
    throw ShapeError("encode_tracklets: empty video (no tracklets)");
  }
  Tensor x = h;
  for (std::size_t k = 0; k < cfg.encoder_layers; ++k)
    x = self_attention_block(x, ParamScope(params, layer_name("encoder", k)), cfg.heads);
  return x;
}

// ---- RoI pooling -----------------------------------------------------------------

RoiWeights roi_weights(const TimeSlot& tracklet_slot, int first_frame, std::size_t length,
                       const TimeSlot& query_slot, int frame_count, std::size_t l_roi) {
  RoiWeights r;
  const double s = std::max(tracklet_slot.start, query_slot.start);
  const double e = std::min(tracklet_slot.end, query_slot.end);
  if (!(e > s) || length == 0 || l_roi == 0) return r;
  r.empty = false;
  const std::size_t L = length;
  r.weights.assign(l_roi * L, 0.0);
  r.d_start.assign(l_roi * L, 0.0);
  r.d_end.assign(l_roi * L, 0.0);

  const double F = static_cast<double>(frame_count);
  const double len = static_cast<double>(L);
  double u0 = s * F - first_frame;
  double u1 = e * F - first_frame;
  double du0 = query_slot.start > tracklet_slot.start ? F : 0.0;
  double du1 = query_slot.end < tracklet_slot.end ? F : 0.0;
  if (u0 < 0.0 || u0 > len) {
    u0 = std::clamp(u0, 0.0, len);
    du0 = 0.0;
  }
  if (u1 < 0.0 || u1 > len) {
    u1 = std::clamp(u1, 0.0, len);
    du1 = 0.0;
  }
  const double width = u1 - u0;
  if (width <= 1e-12) {
    // Degenerate intersection: every bin takes the nearest frame.
    const auto t = static_cast<std::size_t>(std::clamp(std::floor(u0), 0.0, len - 1.0));
    for (std::size_t k = 0; k < l_roi; ++k) r.weights[k * L + t] = 1.0;
    return r;
  }
  const double bins = static_cast<double>(l_roi);
  const double bw = width / bins;
  for (std::size_t k = 0; k < l_roi; ++k) {
    const double fa = static_cast<double>(k) / bins;
    const double fb = static_cast<double>(k + 1) / bins;
    const double a = u0 + width * fa;
    const double b = u0 + width * fb;
    const auto t0 = static_cast<std::size_t>(std::max(0.0, std::floor(a)));
    const auto t1 = static_cast<std::size_t>(std::min(len, std::ceil(b)));
    for (std::size_t t = t0; t < t1; ++t) {
      const double td = static_cast<double>(t);
      const double ov = std::min(b, td + 1.0) - std::max(a, td);
      if (ov <= 0.0) continue;
      const double dov_da = a > td ? -1.0 : 0.0;
      const double dov_db = b < td + 1.0 ? 1.0 : 0.0;
      const double dov_du0 = dov_da * (1.0 - fa) + dov_db * (1.0 - fb);
      const double dov_du1 = dov_da * fa + dov_db * fb;
      const double dw_du0 = (dov_du0 + ov / bw / bins) / bw;
      const double dw_du1 = (dov_du1 - ov / bw / bins) / bw;
      r.weights[k * L + t] = ov / bw;
      r.d_start[k * L + t] = dw_du0 * du0;
      r.d_end[k * L + t] = dw_du1 * du1;
    }
  }
  return r;
}

Tensor temporal_roi_pool(const Tensor& per_frame, const TrackletLayout& layout, const Tensor& query_slots,
                         std::size_t l_roi) {
  if (per_frame.rank() != 2) throw ShapeError("temporal_roi_pool: per_frame must be [frames, d]");
  if (query_slots.rank() != 2 || query_slots.size(1) != 2) {
    throw ShapeError("temporal_roi_pool: query_slots must be [m, 2], got " + shape_str(query_slots.shape()));
  }
  const std::size_t n = layout.size();
  const std::size_t m = query_slots.size(0);
  const std::size_t d = per_frame.size(1);
  const std::size_t width = l_roi * d;
  auto q = query_slots.data();
  auto f = per_frame.data();

  std::vector<RoiWeights> saved(m * n);
  std::vector<double> out(m * n * width, 0.0);
  for (std::size_t j = 0; j < m; ++j) {
    const TimeSlot qs{q[2 * j], q[2 * j + 1]};
    for (std::size_t i = 0; i < n; ++i) {
      RoiWeights rw = roi_weights(layout.slots[i], layout.first_frames[i], layout.lengths[i], qs,
                                  layout.frame_count, l_roi);
      if (!rw.empty) {
        const std::size_t L = layout.lengths[i];
        double* o = out.data() + (j * n + i) * width;
        for (std::size_t k = 0; k < l_roi; ++k)
          for (std::size_t t = 0; t < L; ++t) {
            const double w = rw.weights[k * L + t];
            if (w == 0.0) continue;
            const double* row = f.data() + (layout.offsets[i] + t) * d;
            for (std::size_t c = 0; c < d; ++c) o[k * d + c] += w * row[c];
          }
      }
      saved[j * n + i] = std::move(rw);
    }
  }
  return record_op(
      {m * n, width}, std::move(out), {per_frame, query_slots},
      [per_frame, query_slots, layout, saved = std::move(saved), m, n, d, width,
       l_roi](std::span<const double> g) mutable {
        const bool want_f = per_frame.requires_grad();
        const bool want_q = query_slots.requires_grad();
        std::span<double> gf = want_f ? per_frame.mutable_grad() : std::span<double>();
        std::span<double> gq = want_q ? query_slots.mutable_grad() : std::span<double>();
        auto f = per_frame.data();
        for (std::size_t j = 0; j < m; ++j)
          for (std::size_t i = 0; i < n; ++i) {
            const RoiWeights& rw = saved[j * n + i];
            if (rw.empty) continue;
            const std::size_t L = layout.lengths[i];
            const double* gr = g.data() + (j * n + i) * width;
            for (std::size_t k = 0; k < l_roi; ++k)
              for (std::size_t t = 0; t < L; ++t) {
                const std::size_t idx = k * L + t;
                const std::size_t frow = (layout.offsets[i] + t) * d;
                if (want_f && rw.weights[idx] != 0.0) {
                  const double w = rw.weights[idx];
                  for (std::size_t c = 0; c < d; ++c) gf[frow + c] += w * gr[k * d + c];
                }
                if (want_q && (rw.d_start[idx] != 0.0 || rw.d_end[idx] != 0.0)) {
                  double dot = 0.0;
                  for (std::size_t c = 0; c < d; ++c) dot += gr[k * d + c] * f[frow + c];
                  gq[2 * j] += rw.d_start[idx] * dot;
                  gq[2 * j + 1] += rw.d_end[idx] * dot;
                }
              }
          }
      });
}

Tensor temporal_roi_pool(const Tensor& per_frame, const TimeSlot& tracklet_slot, const TimeSlot& query_slot,
                         int frame_count, std::size_t l_roi) {
  TrackletLayout layout;
  layout.offsets = {0};
  layout.lengths = {per_frame.size(0)};
  layout.first_frames = {frame_range(tracklet_slot, frame_count).first};
  layout.slots = {tracklet_slot};
  layout.frame_count = frame_count;
  Tensor q({1, 2}, {query_slot.start, query_slot.end});
  return reshape(temporal_roi_pool(per_frame, layout, q, l_roi), {l_roi, per_frame.size(1)});
}

Tensor build_value_matrix(const Tensor& per_frame, const TrackletLayout& layout, const Tensor& query_slots,
                          const ParamScope& layer, const ModelConfig& cfg) {
  Tensor roi = temporal_roi_pool(per_frame, layout, query_slots, cfg.l_roi);
  return mlp_forward({cfg.l_roi * cfg.d, cfg.mlp_hidden, cfg.d_v}, layer.sub("roi"), roi);
}

// ---- role attention ----------------------------------------------------------------

Tensor role_attention(const Tensor& queries, const Tensor& keys, const ParamScope& layer,
                      const ModelConfig& cfg) {
  const std::size_t m = queries.size(0), n = keys.size(0);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  Tensor a_s = scale(matmul_nt(matmul(queries, layer["wq_s"]), matmul(keys, layer["wk_s"])), inv_sqrt_d);
  Tensor a_o = scale(matmul_nt(matmul(queries, layer["wq_o"]), matmul(keys, layer["wk_o"])), inv_sqrt_d);
  return reshape(concat_rows({a_s, a_o}), {2, m, n});
}

Tensor normalize_attention(const Tensor& logits) {
  if (logits.rank() != 3 || logits.size(0) != 2) {
    throw ShapeError("normalize_attention: expected [2, m, n], got " + shape_str(logits.shape()));
  }
  const std::size_t m = logits.size(1), n = logits.size(2);
  auto a = logits.data();
  std::vector<double> over_tracklets(2 * m * n), over_roles(2 * m * n), out(2 * m * n);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t base = (r * m + j) * n;
      double mx = a[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, a[base + i]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += (over_tracklets[base + i] = std::exp(a[base + i] - mx));
      for (std::size_t i = 0; i < n; ++i) over_tracklets[base + i] /= z;
    }
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t s = j * n + i, o = (m + j) * n + i;
      const double mx = std::max(a[s], a[o]);
      const double es = std::exp(a[s] - mx), eo = std::exp(a[o] - mx);
      over_roles[s] = es / (es + eo);
      over_roles[o] = eo / (es + eo);
    }
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = over_tracklets[k] * over_roles[k];
  return record_op(logits.shape(), std::move(out), {logits},
                   [logits, p = std::move(over_tracklets), q = std::move(over_roles), m,
                    n](std::span<const double> g) mutable {
                     auto ga = logits.mutable_grad();
                     for (std::size_t r = 0; r < 2; ++r)
                       for (std::size_t j = 0; j < m; ++j) {
                         const std::size_t base = (r * m + j) * n;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < n; ++i) dot += p[base + i] * g[base + i] * q[base + i];
                         for (std::size_t i = 0; i < n; ++i)
                           ga[base + i] += p[base + i] * (g[base + i] * q[base + i] - dot);
                       }
                     for (std::size_t j = 0; j < m; ++j)
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t s = j * n + i, o = (m + j) * n + i;
                         const double gs = g[s] * p[s], go = g[o] * p[o];
                         const double dot = q[s] * gs + q[o] * go;
                         ga[s] += q[s] * (gs - dot);
                         ga[o] += q[o] * (go - dot);
                       }
                   });
}

Tensor attend_values(const Tensor& attention, const Tensor& values) {
  if (attention.rank() != 3 || attention.size(0) != 2) {
    throw ShapeError("attend_values: attention must be [2, m, n], got " + shape_str(attention.shape()));
  }
  const std::size_t m = attention.size(1), n = attention.size(2);
  if (values.rank() != 2 || values.size(0) != m * n) {
    throw ShapeError("attend_values: values must be [m * n, d_v], got " + shape_str(values.shape()));
  }
  const std::size_t dv = values.size(1);
  auto a = attention.data();
  auto v = values.data();
  std::vector<double> out(2 * m * dv, 0.0);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t i = 0; i < n; ++i) {
        const double w = a[(r * m + j) * n + i];
        const double* row = v.data() + (j * n + i) * dv;
        double* o = out.data() + (r * m + j) * dv;
        for (std::size_t c = 0; c < dv; ++c) o[c] += w * row[c];
      }
  return record_op({2 * m, dv}, std::move(out), {attention, values},
                   [attention, values, m, n, dv](std::span<const double> g) mutable {
                     auto a = attention.data();
                     auto v = values.data();
                     std::span<double> ga = attention.requires_grad() ? attention.mutable_grad() : std::span<double>();
                     std::span<double> gv = values.requires_grad() ? values.mutable_grad() : std::span<double>();
                     for (std::size_t r = 0; r < 2; ++r)
                       for (std::size_t j = 0; j < m; ++j) {
                         const double* gr = g.data() + (r * m + j) * dv;
                         for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t ai = (r * m + j) * n + i;
                           const std::size_t vrow = (j * n + i) * dv;
                           if (!ga.empty()) {
                             double dot = 0.0;
                             for (std::size_t c = 0; c < dv; ++c) dot += gr[c] * v[vrow + c];
                             ga[ai] += dot;
                           }
                           if (!gv.empty()) {
                             const double w = a[ai];
                             for (std::size_t c = 0; c < dv; ++c) gv[vrow + c] += w * gr[c];
                           }
                         }
                       }
                   });
}

Tensor cross_attend(const Tensor& attention, const Tensor& values, const ParamScope& layer,
                    const ModelConfig& cfg) {
  const std::size_t m = attention.size(1);
  Tensor pooled = attend_values(attention, values);
  const MlpSpec spec{cfg.d_v, cfg.mlp_hidden, cfg.d_q};
  Tensor subj = mlp_forward(spec, layer.sub("f_s"), slice_rows(pooled, 0, m));
  Tensor obj = mlp_forward(spec, layer.sub("f_o"), slice_rows(pooled, m, m));
  return add(subj, obj);
}

// ---- time-slot regression --------------------------------------------------------------

Tensor apply_slot_offsets(const Tensor& offsets, std::span<const TimeSlot> reference) {
  if (offsets.rank() != 2 || offsets.size(1) != 2 || offsets.size(0) != reference.size()) {
    throw ShapeError("apply_slot_offsets: offsets must be [m, 2] matching the reference slots");
  }
  const std::size_t m = reference.size();
  auto o = offsets.data();
  struct Local {
    double w, w_new;
    bool dw_active, s_free, e_free, e_lower;
  };
  std::vector<Local> saved(m);
  std::vector<double> out(2 * m);
  for (std::size_t j = 0; j < m; ++j) {
    const double c = (reference[j].start + reference[j].end) / 2.0;
    const double w = reference[j].end - reference[j].start;
    const double raw_dw = o[2 * j + 1];
    const double dw = std::clamp(raw_dw, -kMaxLogWidthStep, kMaxLogWidthStep);
    const double c_new = c + o[2 * j] * w;
    const double w_new = w * std::exp(dw);
    const double s_raw = c_new - w_new / 2.0;
    const double e_raw = c_new + w_new / 2.0;
    const double s = std::clamp(s_raw, 0.0, 1.0 - kMinSlotWidth);
    const double e = std::clamp(e_raw, s + kMinSlotWidth, 1.0);
    saved[j] = {w, w_new, raw_dw == dw, s == s_raw, e == e_raw && e_raw >= s + kMinSlotWidth,
                e_raw < s + kMinSlotWidth};
    out[2 * j] = s;
    out[2 * j + 1] = e;
  }
  return record_op({m, 2}, std::move(out), {offsets},
                   [offsets, saved = std::move(saved), m](std::span<const double> g) mutable {
                     auto go = offsets.mutable_grad();
                     for (std::size_t j = 0; j < m; ++j) {
                       const Local& l = saved[j];
                       double g_s = g[2 * j] + (l.e_lower ? g[2 * j + 1] : 0.0);
                       const double g_sraw = l.s_free ? g_s : 0.0;
                       const double g_eraw = l.e_free ? g[2 * j + 1] : 0.0;
                       go[2 * j] += (g_sraw + g_eraw) * l.w;
                       if (l.dw_active) go[2 * j + 1] += (g_eraw - g_sraw) * l.w_new / 2.0;
                     }
                   });
}

Tensor regress_time_slots(const Tensor& queries, std::span<const TimeSlot> reference,
                          const ParamScope& layer, const ModelConfig& cfg) {
  Tensor offsets = mlp_forward({cfg.d_q, cfg.mlp_hidden, 2}, layer.sub("offset"), queries);
  return apply_slot_offsets(offsets, reference);
}

std::vector<TimeSlot> slots_from_tensor(const Tensor& slots) {
  std::vector<TimeSlot> out;
  for (std::size_t j = 0; j < slots.size(0); ++j) out.push_back({slots.at(j, 0), slots.at(j, 1)});
  return out;
}

// ---- decoder ---------------------------------------------------------------------

void init_decoder_params(ParamStore& store, Rng& rng, const ModelConfig& cfg) {
  const std::size_t m = cfg.num_queries();
  {
    std::normal_distribution<double> nd(0.0, 0.1);
    std::vector<double> q(m * cfg.d_q);
    for (double& v : q) v = nd(rng);
    store.add("decoder.query_embed", Tensor::parameter({m, cfg.d_q}, std::move(q)));
  }
  init_linear(store, rng, "decoder.pos", 2, cfg.d_q);
  for (std::size_t k = 0; k < cfg.decoder_layers; ++k) {
    const std::string p = layer_name("decoder", k);
    init_layer_norm(store, p + ".ln_sa", cfg.d_q);
    init_attention(store, rng, p + ".sa", cfg.d_q);
    init_layer_norm(store, p + ".ln_ca", cfg.d_q);
    init_mlp(store, rng, p + ".roi", {cfg.l_roi * cfg.d, cfg.mlp_hidden, cfg.d_v});
    init_matrix(store, rng, p + ".wq_s", cfg.d_q, cfg.d);
    init_matrix(store, rng, p + ".wk_s", cfg.d, cfg.d);
    init_matrix(store, rng, p + ".wq_o", cfg.d_q, cfg.d);
    init_matrix(store, rng, p + ".wk_o", cfg.d, cfg.d);
    init_mlp(store, rng, p + ".f_s", {cfg.d_v, cfg.mlp_hidden, cfg.d_q});
    init_mlp(store, rng, p + ".f_o", {cfg.d_v, cfg.mlp_hidden, cfg.d_q});
    init_layer_norm(store, p + ".ln_ffn", cfg.d_q);
    init_mlp(store, rng, p + ".ffn", {cfg.d_q, cfg.mlp_hidden, cfg.d_q});
    init_mlp(store, rng, p + ".offset", {cfg.d_q, cfg.mlp_hidden, 2});
    // Offsets start at zero so the first regression reproduces the anchors.
    for (double& v : store.get(p + ".offset.fc2.w").mutable_data()) v = 0.0;
  }
}

DecoderOutput decoder_forward(const TrackletFeatures& features, const TrackletLayout& layout,
                              const Tensor& encoded, const AnchorSet& anchors, const ParamStore& params,
                              const ModelConfig& cfg) {
  if (layout.size() == 0) throw ShapeError("decoder_forward: empty video (no tracklets)");
  if (anchors.size() != cfg.num_queries()) throw ConfigError("decoder_forward: anchor count != m_c * m_d");
  const ParamScope dec(params, "decoder");
  const Tensor anchor_tensor = anchors.as_tensor();
  const Tensor pos = linear_forward(dec.sub("pos"), anchor_tensor);

  DecoderOutput out;
  Tensor x = dec["query_embed"];
  Tensor slots = anchor_tensor;
  out.slots.push_back(anchors.slots);
  for (std::size_t k = 0; k < cfg.decoder_layers; ++k) {
    const ParamScope layer(params, layer_name("decoder", k));
    Tensor h = layer_norm_forward(layer.sub("ln_sa"), x);
    Tensor qk = add(h, pos);
    x = add(x, multi_head_attention(layer.sub("sa"), qk, qk, h, cfg.heads));

    Tensor q_tilde = layer_norm_forward(layer.sub("ln_ca"), x);
    Tensor attention = normalize_attention(role_attention(q_tilde, encoded, layer, cfg));
    Tensor values = build_value_matrix(features.per_frame, layout, slots, layer, cfg);
    x = add(x, cross_attend(attention, values, layer, cfg));
    x = add(x, mlp_forward({cfg.d_q, cfg.mlp_hidden, cfg.d_q}, layer.sub("ffn"),
                           layer_norm_forward(layer.sub("ln_ffn"), x)));

    slots = regress_time_slots(x, anchors.slots, layer, cfg);
    out.slots.push_back(slots_from_tensor(slots));
    out.attention = attention;
  }
  out.queries = x;
  return out;
}

}  // namespace relformer

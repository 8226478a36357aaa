#include "relformer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "relformer/errors.hpp"

namespace relformer {

namespace {

using Rng = std::mt19937_64;

const std::vector<std::string> kObjectNames = {
    "person", "dog", "car", "ball", "bicycle", "cat", "horse", "bird",
    "bus", "chair", "toy", "sheep", "cup", "kite", "train", "baby"};

struct Vec2 {
  double x = 0.0, y = 0.0;
};

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

Vec2 unit(double angle) { return {std::cos(angle), std::sin(angle)}; }

Vec2 center(const Box& b) { return {(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0}; }

double dist(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

double mean_speed(std::span<const Box> boxes) {
  if (boxes.size() < 2) return 0.0;
  double total = 0.0;
  for (std::size_t f = 1; f < boxes.size(); ++f) total += dist(center(boxes[f]), center(boxes[f - 1]));
  return total / static_cast<double>(boxes.size() - 1);
}

// Linear motion of one object over its lifetime [first, last).
struct Motion {
  int first = 0;
  int last = 0;
  Vec2 pos;        // center at frame `anchor`
  Vec2 vel;        // per frame
  int anchor = 0;  // reference frame for `pos`
  double w = 0.1, h = 0.1;

  Box box_at(int f) const {
    const double t = f - anchor;
    const double cx = pos.x + vel.x * t, cy = pos.y + vel.y * t;
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  }
  bool in_bounds() const {
    for (int f = first; f < last; ++f) {
      const Box b = box_at(f);
      if (b[0] < 0.01 || b[1] < 0.01 || b[2] > 0.99 || b[3] > 0.99) return false;
    }
    return true;
  }
  std::vector<Box> boxes(int from, int to) const {
    std::vector<Box> out;
    for (int f = from; f < to; ++f) out.push_back(box_at(f));
    return out;
  }
};

// Proposes subject/object motions for `pred` over an overlap of `len` frames.
void propose(SynthPredicate pred, int len, Rng& rng, Motion& s, Motion& o) {
  const double L = static_cast<double>(std::max(len, 1));
  o.pos = {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
  o.vel = {0.0, 0.0};
  const Vec2 drift = unit(uniform(rng, 0.0, 2 * M_PI));
  const double drift_speed = uniform(rng, 0.0, 0.15) / L;
  switch (pred) {
    case SynthPredicate::kTowards: {
      const Vec2 u = unit(uniform(rng, 0.0, 2 * M_PI));
      const double d = uniform(rng, 0.35, 0.5);
      s.pos = {o.pos.x + d * u.x, o.pos.y + d * u.y};
      s.vel = {-u.x * 0.6 * d / L, -u.y * 0.6 * d / L};
      break;
    }
    case SynthPredicate::kAway: {
      const Vec2 u = unit(uniform(rng, 0.0, 2 * M_PI));
      const double d = uniform(rng, 0.1, 0.15);
      s.pos = {o.pos.x + d * u.x, o.pos.y + d * u.y};
      s.vel = {u.x * 0.35 / L, u.y * 0.35 / L};
      break;
    }
    case SynthPredicate::kAbove:
    case SynthPredicate::kBelow:
    case SynthPredicate::kLeftOf:
    case SynthPredicate::kRightOf: {
      const double gap = uniform(rng, 0.25, 0.35);
      const double side = uniform(rng, -0.08, 0.08);
      Vec2 off;
      if (pred == SynthPredicate::kAbove) off = {side, -gap};
      if (pred == SynthPredicate::kBelow) off = {side, gap};
      if (pred == SynthPredicate::kLeftOf) off = {-gap, side};
      if (pred == SynthPredicate::kRightOf) off = {gap, side};
      s.pos = {o.pos.x + off.x, o.pos.y + off.y};
      o.vel = {drift.x * drift_speed, drift.y * drift_speed};
      s.vel = o.vel;
      break;
    }
    case SynthPredicate::kFaster:
    case SynthPredicate::kSlower: {
      const Vec2 fast_dir = unit(uniform(rng, 0.0, 2 * M_PI));
      const Vec2 slow_dir = unit(uniform(rng, 0.0, 2 * M_PI));
      const double fast = uniform(rng, 0.3, 0.45) / L;
      const double slow = uniform(rng, 0.0, 0.06) / L;
      s.pos = {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
      Vec2 vs{fast_dir.x * fast, fast_dir.y * fast}, vo{slow_dir.x * slow, slow_dir.y * slow};
      if (pred == SynthPredicate::kSlower) std::swap(vs, vo);
      s.vel = vs;
      o.vel = vo;
      break;
    }
  }
}

std::vector<double> noisy_probs(int category, int num_categories, double alpha, Rng& rng) {
  std::vector<double> p(static_cast<std::size_t>(num_categories), 0.0);
  if (alpha > 0.0) {
    double total = 0.0;
    for (double& v : p) {
      v = uniform(rng, 0.0, 1.0);
      total += v;
    }
    for (double& v : p) v = alpha * v / total;
  }
  p[static_cast<std::size_t>(category)] += 1.0 - alpha;
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  for (double& v : p) v /= total;
  return p;
}

std::vector<float> features_for(const std::vector<float>& prototype, std::size_t frames, double sigma,
                                Rng& rng) {
  std::vector<float> out;
  out.reserve(frames * prototype.size());
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t f = 0; f < frames; ++f)
    for (float v : prototype) out.push_back(static_cast<float>(v + (sigma > 0.0 ? sigma * noise(rng) : 0.0)));
  return out;
}

}  // namespace

const std::vector<std::string>& synth_predicate_names() {
  static const std::vector<std::string> names = {"towards", "away",     "above",  "below",
                                                 "left_of", "right_of", "faster", "slower"};
  return names;
}

void validate(const SynthConfig& cfg) {
  if (cfg.videos < 0) throw ConfigError("synth: videos must be >= 0");
  if (cfg.frame_count < 8) throw ConfigError("synth: frame_count must be >= 8");
  if (cfg.min_objects < 1) throw ConfigError("synth: at least one object per video is required");
  if (cfg.max_objects < cfg.min_objects) throw ConfigError("synth: max_objects < min_objects");
  if (cfg.num_object_categories < 1) throw ConfigError("synth: num_object_categories must be >= 1");
  if (cfg.num_predicates < 1 || static_cast<std::size_t>(cfg.num_predicates) > kSynthPredicateCount) {
    throw ConfigError("synth: num_predicates must be in [1, " + std::to_string(kSynthPredicateCount) + "]");
  }
  if (cfg.feature_dim < 1) throw ConfigError("synth: feature_dim must be >= 1");
  if (cfg.distractors < 0) throw ConfigError("synth: distractors must be >= 0");
  if (!(cfg.noise >= 0.0) || cfg.noise > 1.0) throw ConfigError("synth: noise must be in [0, 1]");
}

bool synth_rule_holds(SynthPredicate predicate, std::span<const Box> subject, std::span<const Box> object) {
  if (subject.size() != object.size() || subject.size() < 2) return false;
  const std::size_t n = subject.size();
  switch (predicate) {
    case SynthPredicate::kTowards:
    case SynthPredicate::kAway: {
      for (std::size_t f = 1; f < n; ++f) {
        const double prev = dist(center(subject[f - 1]), center(object[f - 1]));
        const double cur = dist(center(subject[f]), center(object[f]));
        if (predicate == SynthPredicate::kTowards ? !(cur < prev) : !(cur > prev)) return false;
      }
      return true;
    }
    case SynthPredicate::kAbove:
    case SynthPredicate::kBelow:
    case SynthPredicate::kLeftOf:
    case SynthPredicate::kRightOf: {
      for (std::size_t f = 0; f < n; ++f) {
        const Vec2 a = center(subject[f]), b = center(object[f]);
        bool ok = false;
        if (predicate == SynthPredicate::kAbove) ok = a.y < b.y - 0.1;
        if (predicate == SynthPredicate::kBelow) ok = a.y > b.y + 0.1;
        if (predicate == SynthPredicate::kLeftOf) ok = a.x < b.x - 0.1;
        if (predicate == SynthPredicate::kRightOf) ok = a.x > b.x + 0.1;
        if (!ok) return false;
      }
      return true;
    }
    case SynthPredicate::kFaster:
      return mean_speed(subject) > 2.0 * mean_speed(object);
    case SynthPredicate::kSlower:
      return mean_speed(subject) < 0.5 * mean_speed(object);
  }
  return false;
}

Dataset synth_generate(const SynthConfig& cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  const int F = cfg.frame_count;
  const int C = cfg.num_object_categories;
  const int R = cfg.num_predicates;

  Dataset ds;
  for (int c = 0; c < C; ++c) {
    ds.vocab.objects.push_back(static_cast<std::size_t>(c) < kObjectNames.size()
                                   ? kObjectNames[static_cast<std::size_t>(c)]
                                   : "category_" + std::to_string(c));
  }
  ds.vocab.predicates.assign(synth_predicate_names().begin(), synth_predicate_names().begin() + R);

  std::vector<std::vector<float>> prototypes(static_cast<std::size_t>(C));
  {
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& p : prototypes)
      for (int k = 0; k < cfg.feature_dim; ++k) p.push_back(static_cast<float>(nd(rng)));
  }
  // Preferred predicate per (subject category, object category).
  std::vector<int> preferred(static_cast<std::size_t>(C * C));
  for (int& v : preferred) v = uniform_int(rng, 0, R - 1);

  const double box_sigma = 0.01 * cfg.noise;
  const int slot_jitter = static_cast<int>(std::lround(2.0 * cfg.noise));
  const double prob_alpha = 0.3 * cfg.noise;
  const double feature_sigma = 0.5 * cfg.noise;
  const int min_len = std::max(4, F / 3);

  for (int vi = 0; vi < cfg.videos; ++vi) {
    char id_buf[16];
    std::snprintf(id_buf, sizeof(id_buf), "%04d", vi);
    VideoSample v;
    v.video_id = id_buf;
    v.frame_count = F;

    const int k = uniform_int(rng, cfg.min_objects, cfg.max_objects);
    std::vector<int> categories;
    if (k <= C) {
      std::vector<int> all(static_cast<std::size_t>(C));
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      categories.assign(all.begin(), all.begin() + k);
    } else {
      for (int i = 0; i < k; ++i) categories.push_back(uniform_int(rng, 0, C - 1));
    }

    std::vector<Motion> motions(static_cast<std::size_t>(k));
    for (auto& m : motions) {
      m.w = uniform(rng, 0.08, 0.16);
      m.h = uniform(rng, 0.08, 0.16);
    }

    // Pair consecutive objects; an odd one out moves freely.
    for (int a = 0; a + 1 < k; a += 2) {
      Motion& s = motions[static_cast<std::size_t>(a)];
      Motion& o = motions[static_cast<std::size_t>(a + 1)];
      int pred = preferred[static_cast<std::size_t>(categories[a] * C + categories[a + 1])];
      if (uniform(rng, 0.0, 1.0) > 0.75) pred = uniform_int(rng, 0, R - 1);
      bool planted = false;
      for (int attempt = 0; attempt < 400 && !planted; ++attempt) {
        const int o0 = uniform_int(rng, 0, F - min_len);
        const int o1 = uniform_int(rng, o0 + min_len, F);
        s.first = std::max(0, o0 - uniform_int(rng, 0, F / 4));
        s.last = std::min(F, o1 + uniform_int(rng, 0, F / 4));
        o.first = std::max(0, o0 - uniform_int(rng, 0, F / 4));
        o.last = std::min(F, o1 + uniform_int(rng, 0, F / 4));
        s.anchor = o.anchor = o0;
        propose(static_cast<SynthPredicate>(pred), o1 - o0, rng, s, o);
        if (!s.in_bounds() || !o.in_bounds()) continue;
        const auto sb = s.boxes(o0, o1), ob = o.boxes(o0, o1);
        if (!synth_rule_holds(static_cast<SynthPredicate>(pred), sb, ob)) continue;
        planted = true;
        v.gt_relations.push_back({a, a + 1, pred, slot_from_frames(o0, o1, F)});
      }
      if (!planted) {
        // Fall back to two unrelated static objects.
        for (Motion* m : {&s, &o}) {
          m->first = 0;
          m->last = F;
          m->anchor = 0;
          m->pos = {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
          m->vel = {0.0, 0.0};
        }
      }
    }
    if (k % 2 == 1) {
      Motion& m = motions.back();
      do {
        m.first = uniform_int(rng, 0, F - min_len);
        m.last = uniform_int(rng, m.first + min_len, F);
        m.anchor = m.first;
        m.pos = {uniform(rng, 0.2, 0.8), uniform(rng, 0.2, 0.8)};
        const Vec2 u = unit(uniform(rng, 0.0, 2 * M_PI));
        const double sp = uniform(rng, 0.0, 0.2) / (m.last - m.first);
        m.vel = {u.x * sp, u.y * sp};
      } while (!m.in_bounds());
    }

    for (int i = 0; i < k; ++i) {
      const Motion& m = motions[static_cast<std::size_t>(i)];
      Tracklet g;
      g.id = i;
      g.slot = slot_from_frames(m.first, m.last, F);
      g.boxes = m.boxes(m.first, m.last);
      g.category = categories[static_cast<std::size_t>(i)];
      v.gt_objects.push_back(std::move(g));
    }

    std::vector<Tracklet> detected;
    std::normal_distribution<double> box_noise(0.0, 1.0);
    for (int i = 0; i < k; ++i) {
      const Motion& m = motions[static_cast<std::size_t>(i)];
      int first = m.first, last = m.last;
      if (slot_jitter > 0) {
        first += uniform_int(rng, 0, slot_jitter);
        last -= uniform_int(rng, 0, slot_jitter);
        if (last - first < 2) {
          first = m.first;
          last = m.last;
        }
      }
      Tracklet t;
      t.slot = slot_from_frames(first, last, F);
      for (int f = first; f < last; ++f) {
        Box b = m.box_at(f);
        if (box_sigma > 0.0) {
          Box j = b;
          for (double& c : j) c = std::clamp(c + box_sigma * box_noise(rng), 0.0, 1.0);
          if (j[0] < j[2] && j[1] < j[3]) b = j;
        }
        t.boxes.push_back(b);
      }
      t.category = categories[static_cast<std::size_t>(i)];
      t.probs = noisy_probs(t.category, C, prob_alpha, rng);
      t.feature_dim = static_cast<std::size_t>(cfg.feature_dim);
      t.appearance = features_for(prototypes[static_cast<std::size_t>(t.category)], t.boxes.size(), feature_sigma, rng);
      detected.push_back(std::move(t));
    }
    for (int d = 0; d < cfg.distractors; ++d) {
      Motion m;
      m.w = uniform(rng, 0.05, 0.12);
      m.h = uniform(rng, 0.05, 0.12);
      const int len = uniform_int(rng, std::max(2, F / 8), std::max(2, F / 4));
      do {
        m.first = uniform_int(rng, 0, F - len);
        m.last = m.first + len;
        m.anchor = m.first;
        m.pos = {uniform(rng, 0.1, 0.9), uniform(rng, 0.1, 0.9)};
        const Vec2 u = unit(uniform(rng, 0.0, 2 * M_PI));
        const double sp = uniform(rng, 0.0, 0.1) / len;
        m.vel = {u.x * sp, u.y * sp};
      } while (!m.in_bounds());
      Tracklet t;
      t.slot = slot_from_frames(m.first, m.last, F);
      t.boxes = m.boxes(m.first, m.last);
      t.category = uniform_int(rng, 0, C - 1);
      t.probs = noisy_probs(t.category, C, 0.5, rng);
      t.feature_dim = static_cast<std::size_t>(cfg.feature_dim);
      t.appearance = features_for(prototypes[static_cast<std::size_t>(t.category)], t.boxes.size(),
                                  std::max(feature_sigma, 0.5), rng);
      detected.push_back(std::move(t));
    }
    if (cfg.distractors > 0 || cfg.noise > 0.0) std::shuffle(detected.begin(), detected.end(), rng);
    for (std::size_t i = 0; i < detected.size(); ++i) detected[i].id = static_cast<int>(i);
    v.tracklets = std::move(detected);
    ds.videos.push_back(std::move(v));
  }
  return ds;
}

}  // namespace relformer

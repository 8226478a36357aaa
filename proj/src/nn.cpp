#include "relformer/nn.hpp"

#include <cmath>

#include "relformer/errors.hpp"

namespace relformer {

void ParamStore::add(const std::string& name, Tensor value) {
  if (!value.requires_grad()) value = Tensor::parameter(value.shape(), {value.data().begin(), value.data().end()});
  if (!params_.emplace(name, std::move(value)).second) {
    throw UsageError("duplicate parameter name '" + name + "'");
  }
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw UsageError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) {
    auto g = t.mutable_grad();
    std::fill(g.begin(), g.end(), 0.0);
  }
}

void ParamStore::clear_grads() {
  for (auto& [_, t] : params_) t.clear_grad();
}

void init_linear(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
                 std::size_t out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> w(in * out);
  for (double& v : w) v = dist(rng);
  store.add(prefix + ".w", Tensor::parameter({in, out}, std::move(w)));
  store.add(prefix + ".b", Tensor::parameter({out}, std::vector<double>(out, 0.0)));
}

void init_mlp(ParamStore& store, Rng& rng, const std::string& prefix, const MlpSpec& spec) {
  if (spec.in_dim == 0 || spec.hidden_dim == 0 || spec.out_dim == 0) {
    throw ConfigError("MLP '" + prefix + "' has a zero dimension");
  }
  init_linear(store, rng, prefix + ".fc1", spec.in_dim, spec.hidden_dim);
  init_linear(store, rng, prefix + ".fc2", spec.hidden_dim, spec.out_dim);
}

void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.add(prefix + ".gain", Tensor::parameter({d}, std::vector<double>(d, 1.0)));
  store.add(prefix + ".bias", Tensor::parameter({d}, std::vector<double>(d, 0.0)));
}

Tensor linear_forward(const ParamScope& p, const Tensor& x) { return linear(x, p["w"], p["b"]); }

Tensor mlp_forward(const MlpSpec& spec, const ParamScope& p, const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() != spec.in_dim) {
    throw ShapeError("mlp '" + p.path("") + "': input x has shape " + shape_str(x.shape()) +
                     ", expected trailing dimension " + std::to_string(spec.in_dim));
  }
  Tensor h = relu(linear_forward(p.sub("fc1"), x));
  return linear_forward(p.sub("fc2"), h);
}

Tensor layer_norm_forward(const ParamScope& p, const Tensor& x) {
  return layer_norm(x, p["gain"], p["bias"], kLayerNormEps);
}

void init_attention(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d) {
  for (const char* name : {"q", "k", "v", "o"}) init_linear(store, rng, prefix + "." + name, d, d);
}

Tensor multi_head_attention(const ParamScope& p, const Tensor& query_in, const Tensor& key_in,
                            const Tensor& value_in, std::size_t heads) {
  const std::size_t d = query_in.size(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor q = linear_forward(p.sub("q"), query_in);
  Tensor k = linear_forward(p.sub("k"), key_in);
  Tensor v = linear_forward(p.sub("v"), value_in);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Tensor weights = softmax_lastdim(scale(matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(matmul(weights, vh));
  }
  Tensor merged = heads == 1 ? outs[0] : concat_cols(outs);
  return linear_forward(p.sub("o"), merged);
}

void init_self_attention_block(ParamStore& store, Rng& rng, const std::string& prefix,
                               std::size_t d, std::size_t ffn_hidden) {
  init_layer_norm(store, prefix + ".ln1", d);
  init_attention(store, rng, prefix + ".attn", d);
  init_layer_norm(store, prefix + ".ln2", d);
  init_mlp(store, rng, prefix + ".ffn", {d, ffn_hidden, d});
}

Tensor self_attention_block(const Tensor& x, const ParamScope& p, std::size_t heads) {
  if (x.rank() != 2) throw ShapeError("self_attention_block: x must be [n, d], got " + shape_str(x.shape()));
  const std::size_t d = x.size(1);
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("self_attention_block: width " + std::to_string(d) +
                      " is not divisible by " + std::to_string(heads) + " heads");
  }
  Tensor h = layer_norm_forward(p.sub("ln1"), x);
  Tensor y = add(x, multi_head_attention(p.sub("attn"), h, h, h, heads));
  const auto& fc1 = p.sub("ffn")["fc1.w"];
  MlpSpec ffn{d, fc1.size(1), d};
  return add(y, mlp_forward(ffn, p.sub("ffn"), layer_norm_forward(p.sub("ln2"), y)));
}

void Adam::step(ParamStore& params) {
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) throw UsageError("adam step: parameter '" + name + "' has no gradient");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (auto& [name, t] : params) {
    auto& mom = moments_[name];
    if (mom.m.size() != t.numel()) {
      mom.m.assign(t.numel(), 0.0);
      mom.v.assign(t.numel(), 0.0);
    }
    auto g = t.grad();
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = options_.beta1 * mom.m[i] + (1.0 - options_.beta1) * g[i];
      mom.v[i] = options_.beta2 * mom.v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      w[i] -= options_.lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
  params.clear_grads();
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, t] : params)
    if (t.has_grad())
      for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [_, t] : params)
      if (t.has_grad())
        for (double& g : t.mutable_grad()) g *= f;
  }
  return norm;
}

}  // namespace relformer

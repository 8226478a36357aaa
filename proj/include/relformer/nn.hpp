#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "relformer/tensor.hpp"

namespace relformer {

// Named parameters, iterated in sorted-name order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::vector<std::string> names() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  // Allocates a zero gradient on every parameter.
  void zero_grad();
  // Drops every gradient buffer.
  void clear_grads();

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::map<std::string, Tensor> params_;
};

// Prefix view used to address one sub-module's parameters.
class ParamScope {
 public:
  ParamScope(const ParamStore& store, std::string prefix)
      : store_(&store), prefix_(std::move(prefix)) {}
  const Tensor& operator[](const std::string& name) const { return store_->get(path(name)); }
  ParamScope sub(const std::string& name) const { return ParamScope(*store_, path(name)); }
  std::string path(const std::string& name) const {
    return prefix_.empty() ? name : prefix_ + "." + name;
  }

 private:
  const ParamStore* store_;
  std::string prefix_;
};

using Rng = std::mt19937_64;

// Always two affine layers with one rectifier in between.
struct MlpSpec {
  std::size_t in_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t out_dim = 0;
};

// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero bias. Names: <prefix>.w, <prefix>.b
void init_linear(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t in,
                 std::size_t out);
// Names: <prefix>.fc1.{w,b}, <prefix>.fc2.{w,b}
void init_mlp(ParamStore& store, Rng& rng, const std::string& prefix, const MlpSpec& spec);
// Names: <prefix>.gain (ones), <prefix>.bias (zeros)
void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d);

Tensor linear_forward(const ParamScope& p, const Tensor& x);
Tensor mlp_forward(const MlpSpec& spec, const ParamScope& p, const Tensor& x);

constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm_forward(const ParamScope& p, const Tensor& x);

// Multi-head scaled dot-product attention with separate query/key/value
// inputs. Parameters: <prefix>.{q,k,v,o}.{w,b}
void init_attention(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d);
Tensor multi_head_attention(const ParamScope& p, const Tensor& query_in, const Tensor& key_in,
                            const Tensor& value_in, std::size_t heads);

// Pre-norm Transformer block:
//   x = x + MHSA(LN1(x));  x = x + FFN(LN2(x))
// Parameters: <prefix>.{ln1, attn, ln2, ffn}
void init_self_attention_block(ParamStore& store, Rng& rng, const std::string& prefix,
                               std::size_t d, std::size_t ffn_hidden);
Tensor self_attention_block(const Tensor& x, const ParamScope& p, std::size_t heads);

struct AdamOptions {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  explicit Adam(AdamOptions options = {}) : options_(options) {}
  // Applies one update, then clears every gradient. Throws UsageError if a
  // parameter has no gradient buffer.
  void step(ParamStore& params);
  std::int64_t steps_taken() const { return t_; }
  const AdamOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  AdamOptions options_;
  std::map<std::string, Moments> moments_;
  std::int64_t t_ = 0;
};

// Global L2 norm of all gradients; rescales them to `max_norm` if larger.
double clip_grad_norm(ParamStore& params, double max_norm);

}  // namespace relformer

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ensemble/core/rng.hpp"
#include "ensemble/nn/autograd.hpp"

namespace ensemble::nn {

Matrix randn(std::size_t rows, std::size_t cols, double sd, Rng& rng);

/// Ordered, named trainable parameters.
class ParamStore {
 public:
  Var add(const std::string& name, Matrix init, bool decay = true);
  Var get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  struct Entry {
    std::string name;
    Var var;
    bool decay;
  };
  const std::vector<Entry>& entries() const { return entries_; }

  void zero_grad();
  std::size_t scalar_count() const;
  bool all_finite() const;
  /// Deep copy of the current values, in entry order.
  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias = true,
         double init_scale = 1.0);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv1d {
  Var w, b;
  std::size_t kernel = 1, stride = 1, pad = 0;
  Conv1d() = default;
  Conv1d(ParamStore& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel,
         std::size_t stride, std::size_t pad, Rng& rng, double init_scale = 1.0);
  Var operator()(const Var& x, std::size_t batch) const { return conv1d(x, w, b, batch, kernel, stride, pad); }
};

/// Pre-norm transformer encoder block over `batch` sequences of `seq` rows each.
struct TransformerBlock {
  LayerNorm ln1, ln2;
  Linear qkv, proj, ff1, ff2;
  std::size_t heads = 1;
  TransformerBlock() = default;
  TransformerBlock(ParamStore& ps, const std::string& name, std::size_t d_model, std::size_t heads,
                   std::size_t d_ff, Rng& rng);
  Var operator()(const Var& x, std::size_t batch, std::size_t seq) const;
};

/// Sinusoidal embedding of scalar positions, one row per value, `dim` columns (sin then cos).
Matrix sinusoidal_embedding(std::span<const double> values, std::size_t dim, double max_period = 10000.0);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class AdamW {
 public:
  AdamW(ParamStore& params, AdamWConfig cfg);
  /// Applies one update from the accumulated gradients and returns the pre-clip gradient norm.
  double step(double lr_scale = 1.0);
  std::int64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Matrix>> export_state() const;
  void import_state(const std::vector<std::pair<std::string, Matrix>>& tensors, std::int64_t steps);

 private:
  ParamStore& params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::int64_t t_ = 0;
};

/// Single-file archive: "ENSCKPT1", u64 header size, JSON header, raw little-endian f64 tensors.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix>> tensors;

  const Matrix* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void export_params(const ParamStore& ps, Checkpoint& ckpt, const std::string& prefix = "");
/// Copies matching tensors into `ps`; every parameter must be present with the right shape.
void import_params(ParamStore& ps, const Checkpoint& ckpt, const std::string& prefix = "");

}  // namespace ensemble::nn

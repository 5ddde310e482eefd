#include "ensemble/nn/layers.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ensemble/core/error.hpp"

namespace ensemble::nn {

Matrix randn(std::size_t rows, std::size_t cols, double sd, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.storage()) v = normal(rng, 0.0, sd);
  return m;
}

Var ParamStore::add(const std::string& name, Matrix init, bool decay) {
  require(!index_.contains(name), ErrorKind::kValidation, "duplicate parameter " + name);
  Var v(std::move(init), true);
  index_[name] = entries_.size();
  entries_.push_back({name, v, decay});
  return v;
}

Var ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorKind::kValidation, "unknown parameter " + name);
  return entries_[it->second].var;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_)
    if (e.var.has_grad()) e.var.mutable_grad().fill(0.0);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.var.value().size();
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& e : entries_)
    if (!ensemble::all_finite(e.var.value())) return false;
  return true;
}

std::vector<Matrix> ParamStore::snapshot() const {
  std::vector<Matrix> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.var.value());
  return out;
}

void ParamStore::restore(const std::vector<Matrix>& values) {
  require(values.size() == entries_.size(), ErrorKind::kValidation, "restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) entries_[i].var.mutable_value() = values[i];
}

Linear::Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias,
               double init_scale) {
  w = ps.add(name + ".w", randn(in, out, init_scale / std::sqrt(static_cast<double>(in)), rng));
  if (bias) b = ps.add(name + ".b", Matrix(1, out), false);
}

Var Linear::operator()(const Var& x) const {
  Var y = matmul(x, w);
  return b ? add_row(y, b) : y;
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::size_t dim) {
  gamma = ps.add(name + ".gamma", Matrix(1, dim, 1.0), false);
  beta = ps.add(name + ".beta", Matrix(1, dim), false);
}

Conv1d::Conv1d(ParamStore& ps, const std::string& name, std::size_t cin, std::size_t cout, std::size_t kernel_,
               std::size_t stride_, std::size_t pad_, Rng& rng, double init_scale)
    : kernel(kernel_), stride(stride_), pad(pad_) {
  const double fan_in = static_cast<double>(kernel * cin);
  w = ps.add(name + ".w", randn(kernel * cin, cout, init_scale / std::sqrt(fan_in), rng));
  b = ps.add(name + ".b", Matrix(1, cout), false);
}

TransformerBlock::TransformerBlock(ParamStore& ps, const std::string& name, std::size_t d_model,
                                   std::size_t heads_, std::size_t d_ff, Rng& rng)
    : heads(heads_) {
  require(d_model % heads == 0, ErrorKind::kConfig, "d_model must be divisible by the head count");
  ln1 = LayerNorm(ps, name + ".ln1", d_model);
  qkv = Linear(ps, name + ".qkv", d_model, 3 * d_model, rng);
  proj = Linear(ps, name + ".proj", d_model, d_model, rng, true, 0.5);
  ln2 = LayerNorm(ps, name + ".ln2", d_model);
  ff1 = Linear(ps, name + ".ff1", d_model, d_ff, rng);
  ff2 = Linear(ps, name + ".ff2", d_ff, d_model, rng, true, 0.5);
}

Var TransformerBlock::operator()(const Var& x, std::size_t batch, std::size_t seq) const {
  const std::size_t d = x.cols();
  Var h = qkv(ln1(x));
  Var a = attention(slice_cols(h, 0, d), slice_cols(h, d, 2 * d), slice_cols(h, 2 * d, 3 * d), batch, seq, seq,
                    heads);
  Var x1 = add(x, proj(a));
  return add(x1, ff2(gelu(ff1(ln2(x1)))));
}

Matrix sinusoidal_embedding(std::span<const double> values, std::size_t dim, double max_period) {
  const std::size_t half = dim / 2;
  Matrix out(values.size(), dim);
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(max_period) * static_cast<double>(k) / static_cast<double>(half));
      out(i, k) = std::sin(values[i] * freq);
      out(i, half + k) = std::cos(values[i] * freq);
    }
  return out;
}

AdamW::AdamW(ParamStore& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
  for (const auto& e : params_.entries()) {
    m_.emplace_back(e.var.rows(), e.var.cols());
    v_.emplace_back(e.var.rows(), e.var.cols());
  }
}

double AdamW::step(double lr_scale) {
  const auto& entries = params_.entries();
  require(entries.size() == m_.size(), ErrorKind::kValidation, "optimizer built for a different parameter set");
  double sq = 0.0;
  for (const auto& e : entries)
    if (e.var.has_grad())
      for (double g : e.var.grad().storage()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double lr = cfg_.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Var v = entries[i].var;
    if (!v.has_grad()) continue;
    double* p = v.mutable_value().data();
    const double* g = v.grad().data();
    double* m = m_[i].data();
    double* s = v_[i].data();
    const double decay = entries[i].decay ? cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < m_[i].size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      s[j] = cfg_.beta2 * s[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mh = m[j] / bc1, sh = s[j] / bc2;
      p[j] -= lr * (mh / (std::sqrt(sh) + cfg_.eps) + decay * p[j]);
    }
  }
  return norm;
}

std::vector<std::pair<std::string, Matrix>> AdamW::export_state() const {
  std::vector<std::pair<std::string, Matrix>> out;
  const auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out.emplace_back("adam.m." + entries[i].name, m_[i]);
    out.emplace_back("adam.v." + entries[i].name, v_[i]);
  }
  return out;
}

void AdamW::import_state(const std::vector<std::pair<std::string, Matrix>>& tensors, std::int64_t steps) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [n, m] : tensors) by_name[n] = &m;
  const auto& entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto mi = by_name.find("adam.m." + entries[i].name);
    auto vi = by_name.find("adam.v." + entries[i].name);
    require(mi != by_name.end() && vi != by_name.end(), ErrorKind::kMissingArtifact,
            "optimizer state missing for " + entries[i].name);
    require(mi->second->same_shape(m_[i]) && vi->second->same_shape(v_[i]), ErrorKind::kValidation,
            "optimizer state shape mismatch for " + entries[i].name);
    m_[i] = *mi->second;
    v_[i] = *vi->second;
  }
  t_ = steps;
}

const Matrix* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, m] : tensors)
    if (n == name) return &m;
  return nullptr;
}

namespace {
constexpr char kMagic[8] = {'E', 'N', 'S', 'C', 'K', 'P', 'T', '1'};
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, m] : ckpt.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
    offset += m.size();
  }
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, m] : ckpt.tensors)
      out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    require(static_cast<bool>(out), ErrorKind::kIo, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kMissingArtifact, "checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  require(in && std::memcmp(magic, kMagic, sizeof(magic)) == 0, ErrorKind::kIo, "not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(static_cast<bool>(in), ErrorKind::kIo, "truncated checkpoint header: " + path.string());
  const auto header = nlohmann::json::parse(text);
  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& t : header.at("tensors")) {
    Matrix m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    require(static_cast<bool>(in), ErrorKind::kIo, "truncated checkpoint payload: " + path.string());
    ckpt.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  return ckpt;
}

void export_params(const ParamStore& ps, Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& e : ps.entries()) ckpt.tensors.emplace_back(prefix + e.name, e.var.value());
}

void import_params(ParamStore& ps, const Checkpoint& ckpt, const std::string& prefix) {
  for (const auto& e : ps.entries()) {
    const Matrix* m = ckpt.find(prefix + e.name);
    require(m != nullptr, ErrorKind::kMissingArtifact, "checkpoint lacks parameter " + prefix + e.name);
    require(m->same_shape(e.var.value()), ErrorKind::kValidation, "parameter shape mismatch for " + prefix + e.name);
    Var v = e.var;
    v.mutable_value() = *m;
  }
}

}  // namespace ensemble::nn

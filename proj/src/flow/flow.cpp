#include "ensemble/flow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "ensemble/core/error.hpp"

namespace ensemble::flow {

namespace {

constexpr double kPi = 3.14159265358979323846;
// Sinusoid inputs are scaled so t in (0,1) and start times in seconds span many periods.
constexpr double kTimestepScale = 1000.0;
constexpr double kStartTimeScale = 10.0;

}  // namespace

// ---------------------------------------------------------------- timestep distribution

double sample_timestep(double m, double s, Rng& rng) {
  require(s > 0.0, ErrorKind::kDomain, "sample_timestep: s must be positive");
  const double u = normal(rng, m, s);
  const double t = 1.0 / (1.0 + std::exp(-u));
  // Keep the open interval even where the logistic rounds to an endpoint.
  return std::clamp(t, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

double logit_normal_pdf(double t, double m, double s) {
  require(t > 0.0 && t < 1.0, ErrorKind::kDomain, "logit_normal_pdf: t must lie in (0, 1)");
  require(s > 0.0, ErrorKind::kDomain, "logit_normal_pdf: s must be positive");
  const double l = std::log(t / (1.0 - t));
  const double d = (l - m) / s;
  return std::exp(-0.5 * d * d) / (s * std::sqrt(2.0 * kPi) * t * (1.0 - t));
}

// ---------------------------------------------------------------- path, guidance, solver

Matrix interpolate(const Matrix& z0, const Matrix& z1, double t) {
  require(z0.same_shape(z1), ErrorKind::kValidation, "interpolate: shape mismatch");
  require(t >= 0.0 && t <= 1.0, ErrorKind::kDomain, "interpolate: t must lie in [0, 1]");
  Matrix out(z0.rows(), z0.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = (1.0 - t) * z0.data()[i] + t * z1.data()[i];
  return out;
}

Matrix cfg_velocity(const Matrix& v_cond, const Matrix& v_uncond, double scale) {
  require(v_cond.same_shape(v_uncond), ErrorKind::kValidation, "cfg_velocity: shape mismatch");
  Matrix out(v_cond.rows(), v_cond.cols());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] = v_uncond.data()[i] + scale * (v_cond.data()[i] - v_uncond.data()[i]);
  return out;
}

Matrix euler_integrate(const VelocityField& field, Matrix z, std::size_t n_steps) {
  require(n_steps >= 1, ErrorKind::kValidation, "euler: n_steps must be >= 1");
  const double dt = 1.0 / static_cast<double>(n_steps);
  for (std::size_t i = 0; i < n_steps; ++i) {
    const Matrix v = field(z, static_cast<double>(i) * dt);
    require(v.same_shape(z), ErrorKind::kValidation, "euler: velocity shape mismatch");
    for (std::size_t k = 0; k < z.size(); ++k) z.data()[k] += dt * v.data()[k];
    require(all_finite(z), ErrorKind::kSamplingFailure, "euler: non-finite state at step " + std::to_string(i));
  }
  return z;
}

// ---------------------------------------------------------------- configuration

namespace {

template <typename F>
void visit_fields(FlowConfig& c, F&& f) {
  f("d_z", c.d_z);
  f("d_model", c.d_model);
  f("n_layers", c.n_layers);
  f("n_heads", c.n_heads);
  f("d_ff", c.d_ff);
  f("d_lyr", c.d_lyr);
  f("d_struct", c.d_struct);
  f("d_time", c.d_time);
  f("lyric_vocab", c.lyric_vocab);
  f("lyric_rate", c.lyric_rate);
  f("latent_rate", c.latent_rate);
  f("m", c.m);
  f("s", c.s);
  f("cond_drop_prob", c.cond_drop_prob);
  f("texture_drop_prob", c.texture_drop_prob);
  f("window", c.window);
}

}  // namespace

void FlowConfig::validate() const {
  require(s > 0.0, ErrorKind::kConfig, "flow: s must be positive");
  require(cond_drop_prob >= 0.0 && cond_drop_prob < 1.0, ErrorKind::kConfig, "flow: cond_drop_prob must be in [0, 1)");
  require(texture_drop_prob >= 0.0 && texture_drop_prob <= 1.0, ErrorKind::kConfig,
          "flow: texture_drop_prob must be in [0, 1]");
  require(d_z >= 1 && d_model >= 1 && n_layers >= 1 && d_ff >= 1, ErrorKind::kConfig, "flow: sizes must be positive");
  require(n_heads >= 1 && d_model % n_heads == 0, ErrorKind::kConfig, "flow: d_model must be divisible by n_heads");
  require(d_time >= 2 && d_time % 2 == 0, ErrorKind::kConfig, "flow: d_time must be even");
  require(d_model % 2 == 0, ErrorKind::kConfig, "flow: d_model must be even");
  require(lyric_vocab >= 1 && lyric_rate >= 1 && window >= 1, ErrorKind::kConfig, "flow: lyric/window sizes");
  require(latent_rate > 0.0, ErrorKind::kConfig, "flow: latent_rate must be positive");
  require(fuser.d_k % fuser.heads == 0, ErrorKind::kConfig, "flow: fuser d_k must be divisible by heads");
}

nlohmann::json FlowConfig::to_json() const {
  nlohmann::json j;
  visit_fields(const_cast<FlowConfig&>(*this), [&](const char* name, auto& v) { j[name] = v; });
  j["fuser"] = {{"d_emb", fuser.d_emb}, {"d_k", fuser.d_k}, {"heads", fuser.heads}, {"max_set", fuser.max_set}};
  return j;
}

FlowConfig FlowConfig::from_json(const nlohmann::json& j) {
  FlowConfig c;
  std::set<std::string> known{"fuser"};
  visit_fields(c, [&](const char* name, auto& v) {
    known.insert(name);
    if (j.contains(name)) v = j.at(name).get<std::remove_reference_t<decltype(v)>>();
  });
  for (const auto& [k, _] : j.items()) require(known.contains(k), ErrorKind::kConfig, "flow: unknown key '" + k + "'");
  if (j.contains("fuser")) {
    for (const auto& [k, v] : j.at("fuser").items()) {
      if (k == "d_emb") c.fuser.d_emb = v.get<std::size_t>();
      else if (k == "d_k") c.fuser.d_k = v.get<std::size_t>();
      else if (k == "heads") c.fuser.heads = v.get<std::size_t>();
      else if (k == "max_set") c.fuser.max_set = v.get<std::size_t>();
      else fail(ErrorKind::kConfig, "flow.fuser: unknown key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- alignment

namespace {

// Track resampled to `frames` rows: identity, broadcast of one row, or group means.
Matrix align_track(const Matrix& track, std::size_t frames, std::size_t width, const std::string& name) {
  require(track.cols() == width, ErrorKind::kValidation,
          name + " track has width " + std::to_string(track.cols()) + ", expected " + std::to_string(width));
  Matrix out(frames, width);
  if (track.rows() == 1) {
    for (std::size_t t = 0; t < frames; ++t) std::copy_n(track.data(), width, out.row(t).begin());
    return out;
  }
  require(track.rows() >= frames, ErrorKind::kAlignment,
          name + " track has " + std::to_string(track.rows()) + " rows for " + std::to_string(frames) + " frames");
  require(track.rows() % frames == 0, ErrorKind::kAlignment,
          name + " track rate is not an integer multiple of the latent rate");
  const std::size_t r = track.rows() / frames;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t j = 0; j < r; ++j)
      for (std::size_t k = 0; k < width; ++k) out(t, k) += track(t * r + j, k) / static_cast<double>(r);
  return out;
}

}  // namespace

Matrix align_and_concat(const ConditionBundle& bundle, const Matrix& z_t, const FlowConfig& config) {
  require(z_t.cols() == config.d_z, ErrorKind::kValidation, "align: latent width mismatch");
  require(bundle.t > 0.0 && bundle.t < 1.0, ErrorKind::kDomain, "align: t must lie in (0, 1)");
  const std::size_t frames = z_t.rows();
  const Matrix lyr = align_track(bundle.lyrics_track, frames, config.d_lyr, "lyrics");
  const Matrix st = align_track(bundle.structure_track, frames, config.d_struct, "structure");
  const Matrix pr = align_track(bundle.prompt_track.values, frames, config.fuser.d_k, "prompt");
  Matrix out(frames, config.input_width());
  std::vector<double> tex(config.d_z, 0.0);
  if (bundle.texture) {
    require(bundle.texture->pooled.size() == config.d_z, ErrorKind::kValidation, "align: texture width mismatch");
    tex = bundle.texture->pooled;
  }
  for (std::size_t t = 0; t < frames; ++t) {
    auto row = out.row(t).begin();
    row = std::copy(z_t.row(t).begin(), z_t.row(t).end(), row);
    row = std::copy(lyr.row(t).begin(), lyr.row(t).end(), row);
    row = std::copy(st.row(t).begin(), st.row(t).end(), row);
    row = std::copy(pr.row(t).begin(), pr.row(t).end(), row);
    std::copy(tex.begin(), tex.end(), row);
  }
  return out;
}

// ---------------------------------------------------------------- model

FlowModel::FlowModel(const FlowConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = make_rng(seed, 0x666c6f77ULL);
  fuser_ = prompt::Fuser(params_, "flow.fuser", config_.fuser, rng);
  lyric_table_ = params_.add("flow.lyric_table", nn::randn(config_.lyric_vocab, config_.d_lyr, 1.0, rng));
  struct_table_ = params_.add("flow.struct_table", nn::randn(corpus::kNumLabels, config_.d_struct, 1.0, rng));
  const std::size_t d = config_.d_model;
  in_proj_ = nn::Linear(params_, "flow.in_proj", config_.input_width(), d, rng);
  t_proj_ = nn::Linear(params_, "flow.t_proj", config_.d_time, d, rng);
  start_proj_ = nn::Linear(params_, "flow.start_proj", config_.d_time, d, rng);
  for (std::size_t i = 0; i < config_.n_layers; ++i)
    blocks_.emplace_back(params_, "flow.block" + std::to_string(i), d, config_.n_heads, config_.d_ff, rng);
  ln_out_ = nn::LayerNorm(params_, "flow.ln_out", d);
  out_ = nn::Linear(params_, "flow.out", d, config_.d_z, rng, true, 0.1);
}

FlowModel::Conditions FlowModel::conditions(const std::vector<WindowConditions>& windows) const {
  require(!windows.empty(), ErrorKind::kValidation, "flow conditions: no windows");
  const std::size_t frames = windows.front().frames(), r = config_.lyric_rate;
  require(frames >= 1, ErrorKind::kValidation, "flow conditions: empty window");
  std::vector<std::size_t> tokens, labels, set_rows;
  std::vector<Matrix> sets;
  Matrix texture(windows.size() * frames, config_.d_z);
  std::vector<double> times;
  for (std::size_t b = 0; b < windows.size(); ++b) {
    const WindowConditions& w = windows[b];
    require(w.frames() == frames, ErrorKind::kAlignment, "flow conditions: windows differ in length");
    require(w.tokens.size() == frames * r, ErrorKind::kAlignment, "flow conditions: lyric track length mismatch");
    require(w.set_of_frame.size() == frames, ErrorKind::kAlignment, "flow conditions: prompt track length mismatch");
    for (int tok : w.tokens)
      tokens.push_back(static_cast<std::size_t>(std::clamp<long>(tok, 0, static_cast<long>(config_.lyric_vocab) - 1)));
    for (auto l : w.labels) labels.push_back(static_cast<std::size_t>(l));
    for (std::size_t f = 0; f < frames; ++f) {
      require(w.set_of_frame[f] < w.singer_sets.size(), ErrorKind::kValidation, "flow conditions: bad singer set index");
      set_rows.push_back(sets.size() + w.set_of_frame[f]);
      times.push_back((w.start_time + static_cast<double>(f) / config_.latent_rate) * kStartTimeScale);
    }
    sets.insert(sets.end(), w.singer_sets.begin(), w.singer_sets.end());
    if (!w.texture.empty()) {
      require(w.texture.size() == config_.d_z, ErrorKind::kValidation, "flow conditions: texture width mismatch");
      for (std::size_t f = 0; f < frames; ++f) std::copy(w.texture.begin(), w.texture.end(), texture.row(b * frames + f).begin());
    }
  }
  const nn::Var lyr = nn::mean_row_groups(nn::gather_rows(lyric_table_, tokens), r);
  const nn::Var st = nn::gather_rows(struct_table_, labels);
  const nn::Var pr = nn::gather_rows(fuser_.fuse_sets(sets), set_rows);
  Conditions c;
  c.block = nn::concat_cols({lyr, st, pr, nn::constant(std::move(texture))});
  c.start = nn::constant(nn::sinusoidal_embedding(times, config_.d_time));
  return c;
}

ConditionBundle FlowModel::bundle(const WindowConditions& w, double t) const {
  nn::NoGradGuard guard;
  ConditionBundle b;
  std::vector<std::size_t> tokens, labels;
  for (int tok : w.tokens)
    tokens.push_back(static_cast<std::size_t>(std::clamp<long>(tok, 0, static_cast<long>(config_.lyric_vocab) - 1)));
  for (auto l : w.labels) labels.push_back(static_cast<std::size_t>(l));
  b.lyrics_track = nn::gather_rows(lyric_table_, tokens).value();
  b.structure_track = nn::gather_rows(struct_table_, labels).value();
  const Matrix fused = fuser_.fuse_sets(w.singer_sets).value();
  b.prompt_track.frame_rate = config_.latent_rate;
  b.prompt_track.segment_of_frame = w.set_of_frame;
  b.prompt_track.values = nn::gather_rows(nn::constant(fused), w.set_of_frame).value();
  if (!w.texture.empty()) b.texture = codec::TextureLatent{Matrix::row_vector(w.texture), w.texture};
  b.start_time = w.start_time;
  b.t = t;
  return b;
}

nn::Var FlowModel::velocity(const nn::Var& z_t, std::span<const double> t, const Conditions& cond,
                            std::span<const double> keep, std::size_t batch) const {
  require(batch > 0 && z_t.rows() % batch == 0, ErrorKind::kAlignment, "velocity: rows not divisible by batch");
  require(t.size() == batch && keep.size() == batch, ErrorKind::kValidation, "velocity: one t and keep per window");
  require(cond.block.rows() == z_t.rows() && cond.start.rows() == z_t.rows(), ErrorKind::kAlignment,
          "velocity: conditions are not frame-aligned with the latent");
  const std::size_t frames = z_t.rows() / batch;
  Matrix keep_col(z_t.rows(), 1);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < frames; ++f) keep_col(b * frames + f, 0) = keep[b];
  const nn::Var kc = nn::constant(std::move(keep_col));
  const nn::Var block = nn::mul_col(cond.block, kc);
  const nn::Var start = nn::mul_col(cond.start, kc);

  std::vector<double> ts(t.begin(), t.end());
  for (double& v : ts) v *= kTimestepScale;
  const nn::Var t_emb = nn::repeat_rows(t_proj_(nn::constant(nn::sinusoidal_embedding(ts, config_.d_time))), frames);
  std::vector<double> positions(frames);
  for (std::size_t f = 0; f < frames; ++f) positions[f] = static_cast<double>(f);
  const Matrix pos = nn::sinusoidal_embedding(positions, config_.d_model);
  Matrix pos_all(batch * frames, config_.d_model);
  for (std::size_t b = 0; b < batch; ++b) std::copy(pos.storage().begin(), pos.storage().end(), pos_all.row(b * frames).begin());

  nn::Var h = in_proj_(nn::concat_cols({z_t, block}));
  h = nn::add(nn::add(h, start_proj_(start)), nn::add(t_emb, nn::constant(std::move(pos_all))));
  for (const auto& blk : blocks_) h = blk(h, batch, frames);
  return out_(ln_out_(h));
}

// ---------------------------------------------------------------- objective

FmDraw draw_fm(std::size_t batch, std::size_t frames, std::size_t d_z, double m, double s, double cond_drop_prob,
               Rng& rng) {
  FmDraw d;
  d.z0 = Matrix(batch * frames, d_z);
  d.t.resize(batch);
  d.keep.resize(batch);
  // Each window has its own stream, so its draw does not depend on the batch around it.
  const std::uint64_t base = rng();
  for (std::size_t b = 0; b < batch; ++b) {
    Rng r = make_rng(base, b);
    d.t[b] = sample_timestep(m, s, r);
    d.keep[b] = bernoulli(r, cond_drop_prob) ? 0.0 : 1.0;
    for (std::size_t i = 0; i < frames * d_z; ++i) d.z0.data()[b * frames * d_z + i] = normal(r);
  }
  return d;
}

nn::Var fm_loss(const VelocityNet& net, const Matrix& z1, std::size_t batch, const FmDraw& draw) {
  require(draw.z0.same_shape(z1), ErrorKind::kValidation, "fm_loss: prior sample shape mismatch");
  require(batch > 0 && z1.rows() % batch == 0 && draw.t.size() == batch && draw.keep.size() == batch,
          ErrorKind::kAlignment, "fm_loss: batch layout mismatch");
  const std::size_t per = z1.size() / batch;
  Matrix zt(z1.rows(), z1.cols()), target(z1.rows(), z1.cols());
  for (std::size_t i = 0; i < z1.size(); ++i) {
    const double t = draw.t[i / per];
    const double a = draw.z0.data()[i], b = z1.data()[i];
    zt.data()[i] = (1.0 - t) * a + t * b;
    target.data()[i] = b - a;
  }
  const nn::Var v = net(nn::constant(std::move(zt)), draw.t, draw.keep, batch);
  require(v.value().same_shape(z1), ErrorKind::kValidation, "fm_loss: velocity shape mismatch");
  return nn::scale(nn::sum(nn::square(nn::sub(v, nn::constant(std::move(target))))), 1.0 / static_cast<double>(batch));
}

nn::Var fm_loss(const FlowModel& model, const Matrix& z1, const std::vector<WindowConditions>& windows, Rng& rng,
                FmDraw* draw_out) {
  const FlowConfig& c = model.config();
  const std::size_t batch = windows.size();
  require(batch > 0 && z1.rows() % batch == 0, ErrorKind::kAlignment, "fm_loss: latent rows do not match the windows");
  FmDraw draw = draw_fm(batch, z1.rows() / batch, c.d_z, c.m, c.s, c.cond_drop_prob, rng);
  const FlowModel::Conditions cond = model.conditions(windows);
  const nn::Var loss = fm_loss(
      [&](const nn::Var& z, std::span<const double> t, std::span<const double> keep, std::size_t b) {
        return model.velocity(z, t, cond, keep, b);
      },
      z1, batch, draw);
  if (draw_out) *draw_out = std::move(draw);
  return loss;
}

// ---------------------------------------------------------------- data

LatentNorm LatentNorm::fit(const std::vector<Matrix>& latents) {
  require(!latents.empty(), ErrorKind::kValidation, "latent norm: no data");
  const std::size_t d = latents.front().cols();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double n = 0.0;
  for (const Matrix& z : latents) {
    require(z.cols() == d, ErrorKind::kValidation, "latent norm: width differs");
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t k = 0; k < d; ++k) {
        sum[k] += z(i, k);
        sq[k] += z(i, k) * z(i, k);
      }
    n += static_cast<double>(z.rows());
  }
  require(n > 1.0, ErrorKind::kInsufficientAudio, "latent norm: need at least two frames");
  LatentNorm ln;
  for (std::size_t k = 0; k < d; ++k) {
    const double mu = sum[k] / n;
    ln.mean.push_back(mu);
    ln.std.push_back(std::max(1e-6, std::sqrt(std::max(0.0, sq[k] / n - mu * mu))));
  }
  return ln;
}

Matrix LatentNorm::apply(const Matrix& z) const {
  require(z.cols() == mean.size(), ErrorKind::kValidation, "latent norm: width mismatch");
  Matrix out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t k = 0; k < z.cols(); ++k) out(i, k) = (z(i, k) - mean[k]) / std[k];
  return out;
}

Matrix LatentNorm::invert(const Matrix& z) const {
  require(z.cols() == mean.size(), ErrorKind::kValidation, "latent norm: width mismatch");
  Matrix out(z.rows(), z.cols());
  for (std::size_t i = 0; i < z.rows(); ++i)
    for (std::size_t k = 0; k < z.cols(); ++k) out(i, k) = z(i, k) * std[k] + mean[k];
  return out;
}

nlohmann::json LatentNorm::to_json() const { return {{"mean", mean}, {"std", std}}; }

LatentNorm LatentNorm::from_json(const nlohmann::json& j) {
  LatentNorm n;
  n.mean = j.at("mean").get<std::vector<double>>();
  n.std = j.at("std").get<std::vector<double>>();
  require(n.mean.size() == n.std.size() && !n.mean.empty(), ErrorKind::kValidation, "latent norm: malformed");
  return n;
}

FlowSong flow_song(const codec::CodecSong& song, const corpus::SongManifest& manifest,
                   const prompt::SongSchedule& schedule, const Matrix& normalized_latent, const Matrix& texture_sequence,
                   const FlowConfig& config) {
  const std::size_t l = normalized_latent.rows();
  require(normalized_latent.cols() == config.d_z, ErrorKind::kValidation, song.song_id + ": latent width mismatch");
  require(texture_sequence.rows() == l && texture_sequence.cols() == config.d_z, ErrorKind::kAlignment,
          song.song_id + ": texture sequence does not match the latent");
  require(song.tokens.size() == l * config.lyric_rate, ErrorKind::kAlignment,
          song.song_id + ": lyric track does not match the latent at the configured rate");
  require(schedule.assignments.size() == manifest.segments.size(), ErrorKind::kValidation,
          song.song_id + ": schedule does not match the manifest");
  FlowSong f;
  f.song_id = song.song_id;
  f.z = normalized_latent;
  f.texture = texture_sequence;
  f.tokens = song.tokens;
  f.latent_rate = config.latent_rate;
  f.segment_of_frame = prompt::frame_segments(manifest.segments, config.latent_rate, l);
  for (std::size_t i = 0; i < l; ++i) f.labels.push_back(schedule.assignments[f.segment_of_frame[i]].updated_label);
  for (std::size_t m = 0; m < manifest.segments.size(); ++m) f.singer_sets.push_back(prompt::singer_set(schedule, m));
  return f;
}

std::vector<double> pooled_texture(const FlowSong& song, std::size_t start, std::size_t frames) {
  require(frames >= 1 && start + frames <= song.texture.rows(), ErrorKind::kAlignment, "texture window outside the song");
  std::vector<double> t(song.texture.cols(), 0.0);
  for (std::size_t f = start; f < start + frames; ++f)
    for (std::size_t k = 0; k < t.size(); ++k) t[k] += song.texture(f, k) / static_cast<double>(frames);
  return t;
}

WindowConditions window_conditions(const FlowSong& song, std::size_t start, std::size_t frames, bool with_texture) {
  require(frames >= 1 && start + frames <= song.labels.size(), ErrorKind::kAlignment, "window outside the song");
  const std::size_t r = song.tokens.size() / song.labels.size();
  WindowConditions w;
  w.tokens.assign(song.tokens.begin() + static_cast<std::ptrdiff_t>(start * r),
                  song.tokens.begin() + static_cast<std::ptrdiff_t>((start + frames) * r));
  w.labels.assign(song.labels.begin() + static_cast<std::ptrdiff_t>(start),
                  song.labels.begin() + static_cast<std::ptrdiff_t>(start + frames));
  std::map<std::size_t, std::size_t> local;
  for (std::size_t f = start; f < start + frames; ++f) {
    const std::size_t seg = song.segment_of_frame[f];
    auto [it, inserted] = local.emplace(seg, w.singer_sets.size());
    if (inserted) w.singer_sets.push_back(song.singer_sets[seg]);
    w.set_of_frame.push_back(it->second);
  }
  if (with_texture) w.texture = pooled_texture(song, start, frames);
  w.start_time = static_cast<double>(start) / song.latent_rate;
  return w;
}

Matrix window_latent(const FlowSong& song, std::size_t start, std::size_t frames) {
  require(start + frames <= song.z.rows(), ErrorKind::kAlignment, "window outside the song");
  Matrix out(frames, song.z.cols());
  std::copy_n(song.z.row(start).begin(), frames * song.z.cols(), out.data());
  return out;
}

// ---------------------------------------------------------------- training

namespace {

double lr_scale(const FlowTrainConfig& cfg, std::size_t step) {
  const double s = static_cast<double>(step);
  if (cfg.warmup > 0.0 && s < cfg.warmup) return (s + 1.0) / cfg.warmup;
  const double progress = (s - cfg.warmup) / std::max(1.0, static_cast<double>(cfg.steps) - cfg.warmup);
  return 0.1 + 0.9 * 0.5 * (1.0 + std::cos(kPi * std::clamp(progress, 0.0, 1.0)));
}

}  // namespace

std::vector<FlowLossRecord> train_flow(FlowModel& model, const std::vector<FlowSong>& songs,
                                       const FlowTrainConfig& cfg, const FlowStepCallback& on_step) {
  const FlowConfig& fc = model.config();
  require(!songs.empty(), ErrorKind::kValidation, "train_flow: no songs");
  require(cfg.batch > 0 && cfg.steps > 0, ErrorKind::kConfig, "train_flow: batch and steps must be positive");
  const std::size_t w = fc.window;
  std::vector<double> cum;
  double total = 0.0;
  for (const auto& s : songs) {
    require(s.z.cols() == fc.d_z, ErrorKind::kValidation, s.song_id + ": latent width mismatch");
    total += s.z.rows() >= w ? static_cast<double>(s.z.rows() - w + 1) : 0.0;
    cum.push_back(total);
  }
  require(total > 0.0, ErrorKind::kInsufficientAudio, "train_flow: every song is shorter than one window");

  nn::AdamW opt(model.params(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  std::vector<FlowLossRecord> curve;
  const double per_window = static_cast<double>(w * fc.d_z);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<WindowConditions> windows;
    Matrix z1(cfg.batch * w, fc.d_z);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      Rng r = make_rng(cfg.seed, step * cfg.batch + b);
      const double u = uniform(r, 0.0, total);
      const auto si = std::min<std::size_t>(songs.size() - 1, static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin()));
      const FlowSong& s = songs[si];
      const auto start = static_cast<std::size_t>(uniform_int(r, 0, static_cast<std::int64_t>(s.z.rows() - w)));
      windows.push_back(window_conditions(s, start, w, false));
      // Texture comes from an independent window of the same song, as a reference clip would at
      // inference; pooling the target window itself lets the model copy its pitch from texture.
      if (!bernoulli(r, fc.texture_drop_prob)) {
        const auto ts = static_cast<std::size_t>(uniform_int(r, 0, static_cast<std::int64_t>(s.z.rows() - w)));
        windows.back().texture = pooled_texture(s, ts, w);
      }
      std::copy_n(s.z.row(start).begin(), w * fc.d_z, z1.row(b * w).begin());
    }
    Rng rng = make_rng(cfg.seed ^ 0x5eedULL, step);
    model.params().zero_grad();
    const nn::Var loss = nn::scale(fm_loss(model, z1, windows, rng), 1.0 / per_window);
    const double value = loss.item();
    if (!std::isfinite(value))
      fail(ErrorKind::kTrainingFailure, "flow: non-finite loss at step " + std::to_string(step));
    nn::backward(loss);
    opt.step(lr_scale(cfg, step));
    if (!model.params().all_finite())
      fail(ErrorKind::kTrainingFailure, "flow: non-finite parameters at step " + std::to_string(step));
    const FlowLossRecord rec{step, value};
    if (on_step) on_step(rec);
    if (step % std::max<std::size_t>(1, cfg.log_every) == 0 || step + 1 == cfg.steps) curve.push_back(rec);
  }
  return curve;
}

// ---------------------------------------------------------------- sampling

std::vector<Matrix> euler_sample(const FlowModel& model, const std::vector<WindowConditions>& windows,
                                 const SampleConfig& config) {
  require(config.n_steps >= 1, ErrorKind::kValidation, "euler_sample: n_steps must be >= 1");
  require(!windows.empty(), ErrorKind::kValidation, "euler_sample: no windows");
  const FlowConfig& fc = model.config();
  const std::size_t batch = windows.size(), frames = windows.front().frames(), d = fc.d_z;
  nn::NoGradGuard guard;
  const FlowModel::Conditions cond = model.conditions(windows);
  const bool need_cond = config.cfg_scale != 0.0, need_uncond = config.cfg_scale != 1.0;
  const std::size_t passes = (need_cond ? 1 : 0) + (need_uncond ? 1 : 0);
  // Conditional and unconditional passes share one batched forward.
  FlowModel::Conditions stacked = cond;
  std::vector<double> keep;
  if (need_cond) keep.insert(keep.end(), batch, 1.0);
  if (need_uncond) keep.insert(keep.end(), batch, 0.0);
  if (passes == 2) {
    stacked.block = nn::concat_rows({cond.block, cond.block});
    stacked.start = nn::concat_rows({cond.start, cond.start});
  }

  Matrix z(batch * frames, d);
  for (std::size_t b = 0; b < batch; ++b) {
    Rng r = make_rng(config.seed, config.first_stream + b);
    for (std::size_t i = 0; i < frames * d; ++i) z.data()[b * frames * d + i] = normal(r);
  }
  const double dt = 1.0 / static_cast<double>(config.n_steps);
  const std::size_t half = batch * frames * d;
  for (std::size_t step = 0; step < config.n_steps; ++step) {
    const double t = static_cast<double>(step) * dt;
    Matrix input(passes * batch * frames, d);
    for (std::size_t p = 0; p < passes; ++p) std::copy_n(z.data(), half, input.data() + p * half);
    const std::vector<double> ts(passes * batch, t);
    const Matrix v = model.velocity(nn::constant(std::move(input)), ts, stacked, keep, passes * batch).value();
    for (std::size_t i = 0; i < half; ++i) {
      double vi = v.data()[i];
      if (passes == 2) vi = v.data()[half + i] + config.cfg_scale * (v.data()[i] - v.data()[half + i]);
      z.data()[i] += dt * vi;
    }
    require(all_finite(z), ErrorKind::kSamplingFailure, "euler_sample: non-finite state at step " + std::to_string(step));
  }
  std::vector<Matrix> out;
  for (std::size_t b = 0; b < batch; ++b) {
    Matrix m(frames, d);
    std::copy_n(z.row(b * frames).begin(), frames * d, m.data());
    out.push_back(std::move(m));
  }
  return out;
}

Matrix generate(const FlowModel& model, const FlowSong& source, const SampleConfig& config,
                const std::optional<codec::TextureLatent>& texture) {
  const FlowConfig& fc = model.config();
  const std::size_t l = source.labels.size(), w = fc.window;
  require(l >= 1, ErrorKind::kValidation, "generate: empty conditions");
  std::vector<WindowConditions> full;
  for (std::size_t start = 0; start + w <= l; start += w) full.push_back(window_conditions(source, start, w, false));
  const std::size_t tail = l % w;
  std::vector<WindowConditions> last;
  if (tail > 0) last.push_back(window_conditions(source, l - tail, tail, false));
  if (texture) {
    require(texture->pooled.size() == fc.d_z, ErrorKind::kValidation, "generate: texture width mismatch");
    for (auto* group : {&full, &last})
      for (auto& win : *group) win.texture = texture->pooled;
  }
  Matrix out(l, fc.d_z);
  std::size_t row = 0;
  SampleConfig sc = config;
  for (auto* group : {&full, &last}) {
    if (group->empty()) continue;
    for (const Matrix& m : euler_sample(model, *group, sc)) {
      std::copy_n(m.data(), m.size(), out.row(row).begin());
      row += m.rows();
    }
    sc.first_stream += group->size();
  }
  return out;
}

// ---------------------------------------------------------------- persistence

void save_flow(const std::filesystem::path& path, const FlowModel& model, const FlowBundle& bundle) {
  nn::Checkpoint ck;
  ck.meta = {{"kind", "flow"},
             {"config", model.config().to_json()},
             {"latent_norm", bundle.norm.to_json()},
             {"config_hash", bundle.config_hash},
             {"codec_hash", bundle.codec_hash}};
  nn::export_params(model.params(), ck);
  nn::save_checkpoint(path, ck);
}

FlowModel load_flow(const std::filesystem::path& path, FlowBundle& bundle) {
  const nn::Checkpoint ck = nn::load_checkpoint(path);
  require(ck.meta.value("kind", std::string()) == "flow", ErrorKind::kValidation,
          path.string() + " is not a flow checkpoint");
  bundle.config = FlowConfig::from_json(ck.meta.at("config"));
  bundle.norm = LatentNorm::from_json(ck.meta.at("latent_norm"));
  bundle.config_hash = ck.meta.value("config_hash", std::string());
  bundle.codec_hash = ck.meta.value("codec_hash", std::string());
  FlowModel model(bundle.config, 0);
  nn::import_params(model.params(), ck);
  return model;
}

}  // namespace ensemble::flow

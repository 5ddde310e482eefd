#include "ensemble/codec/codec.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"
#include "ensemble/dsp/dsp.hpp"

namespace ensemble::codec {

namespace {

constexpr std::uint64_t kLyricTableSeed = 0x6c79726963ULL;

std::vector<std::size_t> checked_resolutions(const CodecConfig& c) {
  return {c.stft_resolutions.begin(), c.stft_resolutions.end()};
}

nlohmann::json weights_json(const LossWeights& w) {
  return {{"stft", w.stft}, {"kl", w.kl}, {"feature", w.feature}, {"adversarial", w.adversarial}};
}

LossWeights weights_from(const nlohmann::json& j, const std::string& where) {
  LossWeights w;
  for (const auto& [k, v] : j.items()) {
    if (k == "stft") w.stft = v.get<double>();
    else if (k == "kl") w.kl = v.get<double>();
    else if (k == "feature") w.feature = v.get<double>();
    else if (k == "adversarial") w.adversarial = v.get<double>();
    else fail(ErrorKind::kConfig, where + ": unknown key '" + k + "'");
  }
  return w;
}

}  // namespace

// ---------------------------------------------------------------- config

void CodecConfig::validate() const {
  features.validate();
  require(d_z >= 1 && factor >= 1 && hidden >= 1, ErrorKind::kConfig, "codec: sizes must be positive");
  require(kernel % 2 == 1, ErrorKind::kConfig, "codec: kernel must be odd");
  require(lyric_vocab >= 1 && lyric_dim >= 1 && singer_dim >= 1, ErrorKind::kConfig, "codec: condition sizes");
  require(!stft_resolutions.empty(), ErrorKind::kConfig, "codec: need at least one STFT resolution");
  for (std::size_t r : stft_resolutions)
    require(r >= 16 && r % 4 == 0, ErrorKind::kConfig, "codec: STFT windows must be multiples of 4 and >= 16");
  for (const LossWeights* w : {&stage1, &stage2})
    require(w->stft >= 0.0 && w->kl >= 0.0 && w->feature >= 0.0 && w->adversarial >= 0.0, ErrorKind::kConfig,
            "codec: loss weights must be nonnegative");
  require(std::isfinite(snr_db), ErrorKind::kConfig, "codec: snr_db must be finite");
}

nlohmann::json CodecConfig::to_json() const {
  return {{"sample_rate", features.sample_rate},
          {"frame_rate", features.frame_rate},
          {"harmonics", features.harmonics},
          {"noise_bands", features.noise_bands},
          {"n_fft", features.n_fft},
          {"amp_floor", features.amp_floor},
          {"d_z", d_z},
          {"factor", factor},
          {"hidden", hidden},
          {"kernel", kernel},
          {"lyric_vocab", lyric_vocab},
          {"lyric_dim", lyric_dim},
          {"singer_dim", singer_dim},
          {"stft_resolutions", stft_resolutions},
          {"stage1", weights_json(stage1)},
          {"stage2", weights_json(stage2)},
          {"snr_db", snr_db},
          {"adversarial", adversarial}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
  CodecConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "sample_rate") c.features.sample_rate = v.get<int>();
    else if (k == "frame_rate") c.features.frame_rate = v.get<double>();
    else if (k == "harmonics") c.features.harmonics = v.get<std::size_t>();
    else if (k == "noise_bands") c.features.noise_bands = v.get<std::size_t>();
    else if (k == "n_fft") c.features.n_fft = v.get<std::size_t>();
    else if (k == "amp_floor") c.features.amp_floor = v.get<double>();
    else if (k == "d_z") c.d_z = v.get<std::size_t>();
    else if (k == "factor") c.factor = v.get<std::size_t>();
    else if (k == "hidden") c.hidden = v.get<std::size_t>();
    else if (k == "kernel") c.kernel = v.get<std::size_t>();
    else if (k == "lyric_vocab") c.lyric_vocab = v.get<std::size_t>();
    else if (k == "lyric_dim") c.lyric_dim = v.get<std::size_t>();
    else if (k == "singer_dim") c.singer_dim = v.get<std::size_t>();
    else if (k == "stft_resolutions") c.stft_resolutions = v.get<std::vector<std::size_t>>();
    else if (k == "stage1") c.stage1 = weights_from(v, "codec.stage1");
    else if (k == "stage2") c.stage2 = weights_from(v, "codec.stage2");
    else if (k == "snr_db") c.snr_db = v.get<double>();
    else if (k == "adversarial") c.adversarial = v.get<bool>();
    else fail(ErrorKind::kConfig, "codec: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

ExplicitConditions ExplicitConditions::zeros(std::size_t frames, const CodecConfig& config) {
  return {Matrix(frames, config.lyrics_width()), Matrix(frames, config.singer_dim), Matrix(frames, config.f0_width())};
}

// ---------------------------------------------------------------- model

Codec::Codec(const CodecConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng = make_rng(seed, 0x636f646563ULL);
  const std::size_t c = config_.features.channels(), f = config_.factor, h = config_.hidden, k = config_.kernel;
  const std::size_t pad = k / 2;
  enc1_ = nn::Conv1d(params_, "codec.enc1", f * c, h, k, 1, pad, rng);
  enc2_ = nn::Conv1d(params_, "codec.enc2", h, h, k, 1, pad, rng);
  enc3_ = nn::Conv1d(params_, "codec.enc3", h, 2 * config_.d_z, k, 1, pad, rng, 0.5);
  const std::size_t dec_in = config_.d_z + config_.f0_width() + config_.lyrics_width() + config_.singer_dim;
  dec1_ = nn::Conv1d(params_, "codec.dec1", dec_in, h, k, 1, pad, rng);
  dec2_ = nn::Conv1d(params_, "codec.dec2", h, h, k, 1, pad, rng);
  dec3_ = nn::Conv1d(params_, "codec.dec3", h, f * c, k, 1, pad, rng, 0.5);
  Rng table_rng = make_rng(kLyricTableSeed);
  lyric_table_ = nn::randn(config_.lyric_vocab, config_.lyric_dim, 1.0, table_rng);
  std::fill_n(lyric_table_.row(0).begin(), config_.lyric_dim, 0.0);
}

Codec Codec::clone() const {
  Codec c(config_, 0);
  c.params_.restore(params_.snapshot());
  return c;
}

Encoded Codec::encode(const nn::Var& frames, std::size_t batch) const {
  const std::size_t c = config_.features.channels(), f = config_.factor;
  require(frames.cols() == c, ErrorKind::kValidation, "encode: expected " + std::to_string(c) + " feature channels");
  require(batch > 0 && frames.rows() % (batch * f) == 0, ErrorKind::kAlignment,
          "encode: frames per sequence must be divisible by the compression factor");
  const std::size_t latent_rows = frames.rows() / f;
  nn::Var x = nn::reshape(frames, latent_rows, f * c);
  x = nn::gelu(enc1_(x, batch));
  x = nn::gelu(enc2_(x, batch));
  x = enc3_(x, batch);
  // Bounded log-variance keeps exp() finite early in training.
  nn::Var logvar = nn::scale(nn::tanh(nn::scale(nn::slice_cols(x, config_.d_z, 2 * config_.d_z), 1.0 / 6.0)), 6.0);
  return {nn::slice_cols(x, 0, config_.d_z), logvar};
}

nn::Var Codec::decode_cond(const nn::Var& z, const ExplicitConditions& cond, std::size_t batch) const {
  require(z.cols() == config_.d_z, ErrorKind::kValidation, "decode: latent width mismatch");
  require(batch > 0 && z.rows() % batch == 0, ErrorKind::kAlignment, "decode: rows not divisible by batch");
  require(cond.lyrics.rows() == z.rows() && cond.singer.rows() == z.rows() && cond.f0.rows() == z.rows(),
          ErrorKind::kAlignment, "decode: conditions are not frame-aligned with the latent");
  require(cond.lyrics.cols() == config_.lyrics_width() && cond.singer.cols() == config_.singer_dim &&
              cond.f0.cols() == config_.f0_width(),
          ErrorKind::kValidation, "decode: condition widths mismatch");
  nn::Var x = nn::concat_cols({z, nn::constant(cond.f0), nn::constant(cond.lyrics), nn::constant(cond.singer)});
  x = nn::gelu(dec1_(x, batch));
  x = nn::gelu(dec2_(x, batch));
  x = dec3_(x, batch);
  return nn::reshape(x, z.rows() * config_.factor, config_.features.channels());
}

nn::Var Codec::decode(const nn::Var& z, std::size_t batch) const {
  return decode_cond(z, ExplicitConditions::zeros(z.rows(), config_), batch);
}

ExplicitConditions Codec::conditions(std::span<const int> tokens, const Matrix& singer, const Matrix& features) const {
  const std::size_t t = features.rows(), f = config_.factor;
  require(t % f == 0, ErrorKind::kAlignment, "conditions: frame count must be divisible by the compression factor");
  require(tokens.size() == t && singer.rows() == t, ErrorKind::kAlignment, "conditions: tracks differ in length");
  require(singer.cols() == config_.singer_dim, ErrorKind::kValidation, "conditions: singer width mismatch");
  const std::size_t l = t / f, d = config_.lyric_dim;
  ExplicitConditions c = ExplicitConditions::zeros(l, config_);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      const std::size_t frame = i * f + j;
      const auto tok = static_cast<std::size_t>(std::clamp<long>(tokens[frame], 0, static_cast<long>(config_.lyric_vocab) - 1));
      std::copy_n(lyric_table_.row(tok).begin(), d, c.lyrics.row(i).begin() + static_cast<std::ptrdiff_t>(j * d));
      for (std::size_t k = 0; k < config_.singer_dim; ++k) c.singer(i, k) += singer(frame, k) / static_cast<double>(f);
      c.f0(i, 2 * j) = features(frame, kF0Channel);
      c.f0(i, 2 * j + 1) = features(frame, kVoicingChannel);
    }
  return c;
}

// ---------------------------------------------------------------- perturbation and loss

namespace {

double noise_sd(std::span<const double> z, double snr_db) {
  double p = 0.0;
  for (double v : z) p += v * v;
  p /= static_cast<double>(std::max<std::size_t>(1, z.size()));
  return std::sqrt(p / std::pow(10.0, snr_db / 10.0));
}

Matrix latent_noise(const Matrix& z, double snr_db, std::size_t batch, Rng& rng) {
  require(batch > 0 && z.rows() % batch == 0, ErrorKind::kAlignment, "perturb: rows not divisible by batch");
  const std::size_t per = z.rows() / batch * z.cols();
  Matrix noise(z.rows(), z.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    const double sd = noise_sd(std::span<const double>(z.data() + b * per, per), snr_db);
    for (std::size_t i = 0; i < per; ++i) noise.data()[b * per + i] = sd * normal(rng);
  }
  return noise;
}

}  // namespace

Matrix perturb_latent(const Matrix& z, double snr_db, Rng& rng) {
  Matrix out = latent_noise(z, snr_db, 1, rng);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += z.data()[i];
  return out;
}

nn::Var perturb_latent(const nn::Var& z, double snr_db, std::size_t batch, Rng& rng) {
  return nn::add(z, nn::constant(latent_noise(z.value(), snr_db, batch, rng)));
}

nn::Var vae_loss(const nn::Var& y_hat, const Matrix& y, const nn::Var& mu, const nn::Var& logvar,
                 const LossWeights& w, std::size_t batch, std::span<const std::size_t> resolutions,
                 const nn::Var& feature_loss, const nn::Var& adversarial_loss, LossBreakdown* out) {
  const nn::Var stft = stft_loss(y_hat, y, batch, resolutions);
  const nn::Var kl = nn::gaussian_kl(mu, logvar);
  nn::Var total = nn::add(nn::scale(stft, w.stft), nn::scale(kl, w.kl));
  LossBreakdown b;
  b.stft = stft.item();
  b.kl = kl.item();
  if (feature_loss) {
    total = nn::add(total, nn::scale(feature_loss, w.feature));
    b.feature = feature_loss.item();
  }
  if (adversarial_loss) {
    total = nn::add(total, nn::scale(adversarial_loss, w.adversarial));
    b.adversarial = adversarial_loss.item();
  }
  b.total = total.item();
  if (out) *out = b;
  return total;
}

// ---------------------------------------------------------------- data

std::vector<int> frame_tokens(const corpus::SongManifest& m) {
  std::vector<int> tokens(m.num_frames(), 0);
  for (const auto& seg : m.segments) {
    const auto base = static_cast<std::size_t>(std::lround(seg.start * m.frame_rate));
    for (const auto& n : seg.notes)
      for (std::size_t f = base + n.onset_frame; f < std::min(tokens.size(), base + n.offset_frame); ++f)
        tokens[f] = n.token;
  }
  return tokens;
}

Matrix singer_frames(const corpus::SongManifest& m, const std::vector<std::vector<double>>& prompts) {
  require(prompts.size() == m.segments.size(), ErrorKind::kValidation, "singer frames: one prompt per segment");
  require(!prompts.empty(), ErrorKind::kValidation, "singer frames: song has no segments");
  const std::size_t t = m.num_frames(), d = prompts.front().size();
  const auto owner = prompt::frame_segments(m.segments, m.frame_rate, t);
  Matrix out(t, d);
  for (std::size_t i = 0; i < t; ++i) std::copy_n(prompts[owner[i]].begin(), d, out.row(i).begin());
  return out;
}

std::vector<std::vector<double>> segment_singer_means(const prompt::SongSchedule& schedule) {
  std::vector<std::vector<double>> out;
  for (std::size_t m = 0; m < schedule.assignments.size(); ++m) {
    const Matrix set = prompt::singer_set(schedule, m);
    std::vector<double> mean(set.cols(), 0.0);
    for (std::size_t i = 0; i < set.rows(); ++i)
      for (std::size_t k = 0; k < set.cols(); ++k) mean[k] += set(i, k) / static_cast<double>(set.rows());
    out.push_back(std::move(mean));
  }
  return out;
}

std::vector<double> feature_f0(std::span<const double> waveform, const FeatureConfig& config) {
  dsp::F0Config f0;
  f0.sample_rate = config.sample_rate;
  f0.frame_rate = config.frame_rate;
  return dsp::estimate_f0(waveform, f0);
}

namespace {

std::size_t usable_frames(const corpus::RenderedSong& song, const CodecConfig& config) {
  const std::size_t t = std::min(song.gt_f0.size(), song.waveform.size() / config.features.hop());
  return t - t % config.factor;
}

}  // namespace

Matrix song_features(const corpus::RenderedSong& song, const CodecConfig& config) {
  const std::size_t t = usable_frames(song, config);
  require(t > 0, ErrorKind::kInsufficientAudio, song.manifest.song_id + ": shorter than one latent frame");
  const std::span<const double> wave(song.waveform.data(), t * config.features.hop());
  auto f0 = feature_f0(wave, config.features);
  f0.resize(t);
  return analyze(wave, f0, config.features);
}

CodecSong codec_song(const corpus::RenderedSong& song, const FeatureNorm& norm, const prompt::SongSchedule& schedule,
                     const CodecConfig& config) {
  const std::size_t t = usable_frames(song, config);
  require(t > 0, ErrorKind::kInsufficientAudio, song.manifest.song_id + ": shorter than one latent frame");
  CodecSong s;
  s.song_id = song.manifest.song_id;
  s.waveform.assign(song.waveform.begin(), song.waveform.begin() + static_cast<std::ptrdiff_t>(t * config.features.hop()));
  s.f0 = feature_f0(s.waveform, config.features);
  s.f0.resize(t);
  s.features = norm.apply(analyze(s.waveform, s.f0, config.features));
  s.gt_f0.assign(song.gt_f0.begin(), song.gt_f0.begin() + static_cast<std::ptrdiff_t>(t));
  s.tokens = frame_tokens(song.manifest);
  s.tokens.resize(t);
  const Matrix singer = singer_frames(song.manifest, segment_singer_means(schedule));
  s.singer = Matrix(t, singer.cols());
  std::copy_n(singer.data(), t * singer.cols(), s.singer.data());
  return s;
}

// ---------------------------------------------------------------- training

namespace {

struct Batch {
  std::size_t size = 0;
  Matrix features;  // (B*T) x C
  Matrix wave;      // (B*T*hop) x 1
  Matrix carriers;  // (B*T*hop) x controls
  ExplicitConditions cond;
};

struct Chunk {
  std::size_t song = 0, start = 0;
  std::size_t noise_offset = 0;
};

Batch make_batch(const Codec& codec, const Vocoder& vocoder, const std::vector<CodecSong>& songs,
                 const std::vector<Chunk>& chunks, std::size_t frames) {
  const CodecConfig& cfg = codec.config();
  const std::size_t c = cfg.features.channels(), hop = cfg.features.hop(), l = frames / cfg.factor;
  Batch b;
  b.size = chunks.size();
  b.features = Matrix(b.size * frames, c);
  b.wave = Matrix(b.size * frames * hop, 1);
  b.carriers = Matrix(b.size * frames * hop, vocoder.controls());
  b.cond = ExplicitConditions::zeros(b.size * l, cfg);
  for (std::size_t i = 0; i < b.size; ++i) {
    const CodecSong& s = songs[chunks[i].song];
    const std::size_t t0 = chunks[i].start;
    Matrix feats(frames, c), singer(frames, s.singer.cols());
    std::copy_n(s.features.row(t0).begin(), frames * c, feats.data());
    std::copy_n(s.singer.row(t0).begin(), frames * s.singer.cols(), singer.data());
    std::copy_n(feats.data(), frames * c, b.features.row(i * frames).begin());
    std::copy_n(s.waveform.begin() + static_cast<std::ptrdiff_t>(t0 * hop), frames * hop,
                b.wave.data() + i * frames * hop);
    const Matrix car =
        vocoder.carriers(std::span<const double>(s.f0).subspan(t0, frames), chunks[i].noise_offset);
    std::copy_n(car.data(), car.size(), b.carriers.row(i * frames * hop).begin());
    const ExplicitConditions ci =
        codec.conditions(std::span<const int>(s.tokens).subspan(t0, frames), singer, feats);
    std::copy_n(ci.lyrics.data(), ci.lyrics.size(), b.cond.lyrics.row(i * l).begin());
    std::copy_n(ci.singer.data(), ci.singer.size(), b.cond.singer.row(i * l).begin());
    std::copy_n(ci.f0.data(), ci.f0.size(), b.cond.f0.row(i * l).begin());
  }
  return b;
}

// Feature-space reconstruction: f0 on voiced frames, voicing as a logit, log levels directly.
nn::Var feature_loss(const nn::Var& decoded, const Matrix& target) {
  const std::size_t rows = target.rows(), c = target.cols();
  Matrix f0(rows, 1), voiced(rows, 1), levels(rows, c - kHarmonicChannel);
  for (std::size_t t = 0; t < rows; ++t) {
    f0(t, 0) = target(t, kF0Channel);
    voiced(t, 0) = target(t, kVoicingChannel);
    std::copy_n(target.row(t).begin() + kHarmonicChannel, c - kHarmonicChannel, levels.row(t).begin());
  }
  const nn::Var lf0 = nn::weighted_mse(nn::slice_cols(decoded, kF0Channel, kF0Channel + 1), f0, voiced);
  const nn::Var lv = nn::bce_with_logits(nn::slice_cols(decoded, kVoicingChannel, kVoicingChannel + 1), voiced);
  const nn::Var ll = nn::mse(nn::slice_cols(decoded, kHarmonicChannel, c), nn::constant(levels));
  return nn::add(nn::add(lf0, lv), ll);
}

// Linear control amplitudes from decoded normalized log levels.
nn::Var control_amplitudes(const nn::Var& decoded, const FeatureNorm& norm) {
  const std::size_t c = decoded.cols();
  Matrix sd(1, c - kHarmonicChannel), mu(1, c - kHarmonicChannel);
  for (std::size_t k = kHarmonicChannel; k < c; ++k) {
    sd(0, k - kHarmonicChannel) = norm.std[k];
    mu(0, k - kHarmonicChannel) = norm.mean[k];
  }
  nn::Var log_amp = nn::add_row(nn::mul_row(nn::slice_cols(decoded, kHarmonicChannel, c), nn::constant(sd)),
                                nn::constant(mu));
  return nn::exp(log_amp);
}

struct Discriminator {
  nn::ParamStore params;
  nn::Conv1d c1, c2;
  Discriminator(std::size_t channels, Rng& rng) {
    c1 = nn::Conv1d(params, "disc.c1", channels, 64, 3, 1, 1, rng);
    c2 = nn::Conv1d(params, "disc.c2", 64, 1, 3, 1, 1, rng);
  }
  nn::Var operator()(const nn::Var& x, std::size_t batch) const { return c2(nn::gelu(c1(x, batch)), batch); }
};

nn::Var lsgan(const nn::Var& score, double target) {
  return nn::mean(nn::square(nn::add_scalar(score, -target)));
}

struct StepResult {
  LossBreakdown loss;
};

double lr_at(const TrainConfig& cfg, std::size_t step) {
  const double s = static_cast<double>(step);
  if (cfg.warmup > 0.0 && s < cfg.warmup) return (s + 1.0) / cfg.warmup;
  const double progress = (s - cfg.warmup) / std::max(1.0, static_cast<double>(cfg.steps) - cfg.warmup);
  return 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::clamp(progress, 0.0, 1.0)));
}

std::vector<Chunk> draw_chunks(const std::vector<CodecSong>& songs, std::size_t frames, std::size_t factor,
                               std::size_t batch, std::size_t bank, Rng& rng) {
  std::vector<double> cum;
  double total = 0.0;
  for (const auto& s : songs) {
    total += s.features.rows() >= frames ? static_cast<double>(s.features.rows() - frames + 1) : 0.0;
    cum.push_back(total);
  }
  require(total > 0.0, ErrorKind::kInsufficientAudio, "codec training: every song is shorter than one chunk");
  std::vector<Chunk> out(batch);
  for (auto& c : out) {
    const double u = uniform(rng, 0.0, total);
    c.song = std::min<std::size_t>(songs.size() - 1, static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin()));
    const std::size_t slots = (songs[c.song].features.rows() - frames) / factor;
    c.start = factor * static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(slots)));
    c.noise_offset = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(bank) - 1));
  }
  return out;
}

void check_songs(const Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs) {
  require(!songs.empty(), ErrorKind::kValidation, "codec training: no songs");
  require(norm.mean.size() == codec.config().features.channels(), ErrorKind::kValidation,
          "codec training: feature norm does not match the channel count");
  for (const auto& s : songs) {
    require(s.features.cols() == codec.config().features.channels(), ErrorKind::kValidation,
            s.song_id + ": channel count mismatch");
    require(s.waveform.size() == s.features.rows() * codec.config().features.hop() && s.f0.size() == s.features.rows() &&
                s.tokens.size() == s.features.rows() && s.singer.rows() == s.features.rows(),
            ErrorKind::kAlignment, s.song_id + ": tracks differ in length");
  }
}

TrainResult train_stage(Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                        const TrainConfig& cfg, const StepCallback& on_step, int stage) {
  check_songs(codec, norm, songs);
  const CodecConfig& cc = codec.config();
  require(cfg.chunk_frames % cc.factor == 0 && cfg.chunk_frames > 0, ErrorKind::kConfig,
          "codec training: chunk_frames must be a positive multiple of the compression factor");
  require(cfg.batch > 0 && cfg.steps > 0, ErrorKind::kConfig, "codec training: batch and steps must be positive");
  const LossWeights& w = stage == 1 ? cc.stage1 : cc.stage2;
  const auto res = checked_resolutions(cc);
  const Vocoder vocoder(cc.features);
  nn::AdamW opt(codec.params(), {.lr = cfg.lr, .weight_decay = 0.0});
  Rng disc_rng = make_rng(cfg.seed, 0x64697363ULL);
  Discriminator disc(cc.features.channels(), disc_rng);
  nn::AdamW disc_opt(disc.params, {.lr = cfg.lr});
  const bool adversarial = cc.adversarial && w.adversarial > 0.0;

  TrainResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Rng rng = make_rng(cfg.seed, 0x1000 + step * 2 + static_cast<std::size_t>(stage));
    const auto chunks = draw_chunks(songs, cfg.chunk_frames, cc.factor, cfg.batch, vocoder.bank_size(), rng);
    const Batch b = make_batch(codec, vocoder, songs, chunks, cfg.chunk_frames);

    codec.params().zero_grad();
    const Encoded enc = codec.encode(nn::constant(b.features), b.size);
    Matrix eps(enc.mu.rows(), enc.mu.cols());
    for (double& e : eps.storage()) e = normal(rng);
    nn::Var z = nn::add(enc.mu, nn::mul(nn::exp(nn::scale(enc.logvar, 0.5)), nn::constant(eps)));
    nn::Var decoded;
    if (stage == 1) {
      decoded = codec.decode(z, b.size);
    } else {
      z = perturb_latent(z, cc.snr_db, b.size, rng);
      decoded = codec.decode_cond(z, b.cond, b.size);
    }
    const nn::Var y_hat = linear_synthesis(control_amplitudes(decoded, norm), b.carriers, b.size, cc.features.hop());
    nn::Var adv;
    if (adversarial) adv = lsgan(disc(decoded, b.size), 1.0);
    LossRecord rec;
    rec.step = step;
    const nn::Var loss = vae_loss(y_hat, b.wave, enc.mu, enc.logvar, w, b.size, res, feature_loss(decoded, b.features),
                                  adv, &rec.loss);
    if (!std::isfinite(rec.loss.total))
      fail(ErrorKind::kTrainingFailure, "codec stage " + std::to_string(stage) + ": non-finite loss at step " +
                                            std::to_string(step));
    nn::backward(loss);
    opt.step(lr_at(cfg, step));
    if (!codec.params().all_finite())
      fail(ErrorKind::kTrainingFailure, "codec stage " + std::to_string(stage) + ": non-finite parameters at step " +
                                            std::to_string(step));
    if (adversarial) {
      disc.params.zero_grad();
      const nn::Var d_loss = nn::add(lsgan(disc(nn::constant(b.features), b.size), 1.0),
                                     lsgan(disc(nn::constant(decoded.value()), b.size), 0.0));
      nn::backward(d_loss);
      disc_opt.step(lr_at(cfg, step));
    }
    if (on_step) on_step(rec);
    if (step % std::max<std::size_t>(1, cfg.log_every) == 0 || step + 1 == cfg.steps) result.curve.push_back(rec);
  }
  return result;
}

}  // namespace

TrainResult train_vae(Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                      const TrainConfig& config, const StepCallback& on_step) {
  return train_stage(codec, norm, songs, config, on_step, 1);
}

TrainResult train_texture_stage(Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                                const TrainConfig& config, const StepCallback& on_step) {
  return train_stage(codec, norm, songs, config, on_step, 2);
}

LossBreakdown evaluate_reconstruction(const Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                                      bool zero_conditions, std::uint64_t seed, std::size_t chunk_frames,
                                      std::size_t max_chunks_per_song) {
  check_songs(codec, norm, songs);
  const CodecConfig& cc = codec.config();
  require(chunk_frames % cc.factor == 0 && chunk_frames > 0, ErrorKind::kConfig,
          "reconstruction: chunk_frames must be a positive multiple of the compression factor");
  const auto res = checked_resolutions(cc);
  const Vocoder vocoder(cc.features);
  std::vector<Chunk> chunks;
  for (std::size_t s = 0; s < songs.size(); ++s)
    for (std::size_t k = 0; k < max_chunks_per_song && (k + 1) * chunk_frames <= songs[s].features.rows(); ++k)
      chunks.push_back({s, k * chunk_frames, (s * 7919 + k * 104729) % vocoder.bank_size()});
  require(!chunks.empty(), ErrorKind::kInsufficientAudio, "reconstruction: every song is shorter than one chunk");

  nn::NoGradGuard guard;
  LossBreakdown acc;
  constexpr std::size_t kBatch = 8;
  for (std::size_t i = 0; i < chunks.size(); i += kBatch) {
    const std::vector<Chunk> part(chunks.begin() + static_cast<std::ptrdiff_t>(i),
                                  chunks.begin() + static_cast<std::ptrdiff_t>(std::min(chunks.size(), i + kBatch)));
    const Batch b = make_batch(codec, vocoder, songs, part, chunk_frames);
    Rng rng = make_rng(seed, i);
    const Encoded enc = codec.encode(nn::constant(b.features), b.size);
    const nn::Var z = perturb_latent(enc.mu, cc.snr_db, b.size, rng);
    const nn::Var decoded = zero_conditions ? codec.decode(z, b.size) : codec.decode_cond(z, b.cond, b.size);
    const nn::Var y_hat = linear_synthesis(control_amplitudes(decoded, norm), b.carriers, b.size, cc.features.hop());
    const double stft = stft_loss(y_hat, b.wave, b.size, res).item();
    const double feat = feature_loss(decoded, b.features).item();
    const double weight = static_cast<double>(b.size) / static_cast<double>(chunks.size());
    acc.stft += stft * weight;
    acc.feature += feat * weight;
  }
  acc.total = cc.stage2.stft * acc.stft + cc.stage2.feature * acc.feature;
  return acc;
}

// ---------------------------------------------------------------- inference

Matrix encode_mean(const Codec& codec, const Matrix& features) {
  nn::NoGradGuard guard;
  return codec.encode(nn::constant(features), 1).mu.value();
}

TextureLatent extract_texture(const Codec& codec, const Matrix& features) {
  TextureLatent t;
  t.sequence = encode_mean(codec, features);
  t.pooled.assign(t.sequence.cols(), 0.0);
  for (std::size_t i = 0; i < t.sequence.rows(); ++i)
    for (std::size_t k = 0; k < t.sequence.cols(); ++k)
      t.pooled[k] += t.sequence(i, k) / static_cast<double>(t.sequence.rows());
  return t;
}

Matrix decode_features(const Codec& codec, const Matrix& z) {
  nn::NoGradGuard guard;
  return codec.decode(nn::constant(z), 1).value();
}

std::vector<double> render_features(const Vocoder& vocoder, const FeatureNorm& norm, const Matrix& features,
                                    bool voicing_logits) {
  const FeatureConfig& fc = vocoder.config();
  require(features.cols() == fc.channels(), ErrorKind::kValidation, "render: channel count mismatch");
  const double threshold = voicing_logits ? 0.0 : 0.5;
  std::vector<double> f0(features.rows(), 0.0);
  for (std::size_t t = 0; t < features.rows(); ++t)
    if (features(t, kVoicingChannel) > threshold)
      f0[t] = std::clamp(std::exp2(norm.norm_to_log2_f0(features(t, kF0Channel))), 40.0, fc.sample_rate / 2.0 - 1.0);
  nn::NoGradGuard guard;
  const Matrix amps = control_amplitudes(nn::constant(features), norm).value();
  return vocoder.render(amps, vocoder.carriers(f0, 0));
}

// ---------------------------------------------------------------- persistence

void save_codec(const std::filesystem::path& path, const Codec& codec, const CodecBundle& bundle,
                const nn::AdamW* optimizer) {
  nn::Checkpoint ck;
  ck.meta = {{"kind", "codec"},
             {"config", codec.config().to_json()},
             {"norm", bundle.norm.to_json()},
             {"stage", bundle.stage},
             {"config_hash", bundle.config_hash}};
  nn::export_params(codec.params(), ck);
  if (optimizer) {
    for (auto& [name, m] : optimizer->export_state()) ck.tensors.emplace_back("adam/" + name, m);
    ck.meta["adam_steps"] = optimizer->steps();
  }
  save_checkpoint(path, ck);
}

Codec load_codec(const std::filesystem::path& path, CodecBundle& bundle) {
  const nn::Checkpoint ck = nn::load_checkpoint(path);
  require(ck.meta.value("kind", std::string()) == "codec", ErrorKind::kValidation,
          path.string() + " is not a codec checkpoint");
  bundle.config = CodecConfig::from_json(ck.meta.at("config"));
  bundle.norm = FeatureNorm::from_json(ck.meta.at("norm"));
  bundle.stage = ck.meta.at("stage").get<int>();
  bundle.config_hash = ck.meta.value("config_hash", std::string());
  Codec codec(bundle.config, 0);
  nn::import_params(codec.params(), ck);
  return codec;
}

}  // namespace ensemble::codec

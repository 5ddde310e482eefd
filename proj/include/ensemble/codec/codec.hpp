#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensemble/core/matrix.hpp"
#include "ensemble/core/rng.hpp"
#include "ensemble/corpus/corpus.hpp"
#include "ensemble/nn/layers.hpp"
#include "ensemble/prompt/prompt.hpp"

namespace ensemble::codec {

// ---------------------------------------------------------------- frame features

struct FeatureConfig {
  int sample_rate = 8000;
  double frame_rate = 50.0;
  std::size_t harmonics = 8;
  std::size_t noise_bands = 8;
  std::size_t n_fft = 512;
  double amp_floor = 1e-4;

  std::size_t hop() const;
  std::size_t channels() const { return 2 + harmonics + noise_bands; }
  void validate() const;
};

// Channel layout of a feature frame.
inline constexpr std::size_t kF0Channel = 0;       // log2 Hz, 0 when unvoiced
inline constexpr std::size_t kVoicingChannel = 1;  // 1 voiced, 0 unvoiced
inline constexpr std::size_t kHarmonicChannel = 2;

/// Per-frame analysis T x channels: log2 f0, voicing, log harmonic amplitudes at multiples of f0
/// and log mean magnitude of the bins between harmonics in equal-width bands.
Matrix analyze(std::span<const double> waveform, std::span<const double> f0, const FeatureConfig& config);

/// Per-channel standardization fitted on a training corpus. The f0 channel is fitted on voiced
/// frames and unvoiced frames map to 0; the voicing channel is left as is.
struct FeatureNorm {
  std::vector<double> mean, std;

  static FeatureNorm fit(const std::vector<Matrix>& raw);
  Matrix apply(const Matrix& raw) const;
  double f0_to_norm(double hz) const;
  double norm_to_log2_f0(double v) const { return v * std[kF0Channel] + mean[kF0Channel]; }
  nlohmann::json to_json() const;
  static FeatureNorm from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------- vocoder

/// Harmonic-plus-noise synthesizer driven by frame-rate controls.
class Vocoder {
 public:
  explicit Vocoder(const FeatureConfig& config, std::uint64_t seed = 0x6e6f697365ULL);

  const FeatureConfig& config() const { return config_; }
  std::size_t controls() const { return config_.harmonics + config_.noise_bands; }

  /// Sample-rate carriers (frames*hop) x controls: harmonic sinusoids following `f0` (0 where
  /// unvoiced) then unit band-limited noises read from the bank at `noise_offset`.
  Matrix carriers(std::span<const double> f0, std::size_t noise_offset) const;

  /// Waveform from linear amplitudes (frames x controls) and carriers.
  std::vector<double> render(const Matrix& amplitudes, const Matrix& carriers) const;

  std::size_t bank_size() const { return bank_.rows(); }

 private:
  FeatureConfig config_;
  Matrix bank_;  // samples x noise_bands, each column has unit band magnitude under analysis
};

/// y[n] = sum_c interp(amplitudes[:, c])(n) * carriers[n, c] for `batch` stacked chunks; amplitudes
/// are linearly interpolated between frame centres. Output is (batch * frames * hop) x 1.
nn::Var linear_synthesis(const nn::Var& amplitudes, const Matrix& carriers, std::size_t batch, std::size_t hop);

struct StftLossParts {
  double spectral_convergence = 0.0;
  double log_magnitude = 0.0;
};

/// Multi-resolution STFT loss between `estimate` ((batch*n) x 1) and `target` (same shape): mean
/// over resolutions of spectral convergence plus mean absolute log-magnitude difference. Hann
/// windows of each size with hop size/4.
nn::Var stft_loss(const nn::Var& estimate, const Matrix& target, std::size_t batch,
                  std::span<const std::size_t> resolutions, StftLossParts* parts = nullptr);

// ---------------------------------------------------------------- model

struct LossWeights {
  double stft = 1.0;
  double kl = 1e-3;
  double feature = 1.0;
  double adversarial = 0.0;
};

struct CodecConfig {
  FeatureConfig features;
  std::size_t d_z = 16;
  std::size_t factor = 4;  // feature frames per latent frame
  std::size_t hidden = 128;
  std::size_t kernel = 3;
  std::size_t lyric_vocab = 64;
  std::size_t lyric_dim = 8;  // per feature frame
  std::size_t singer_dim = 192;
  std::vector<std::size_t> stft_resolutions{256, 512, 1024};
  LossWeights stage1;
  LossWeights stage2{1.0, 2e-2, 1.0, 0.0};
  double snr_db = 10.0;
  bool adversarial = false;

  std::size_t lyrics_width() const { return factor * lyric_dim; }
  std::size_t f0_width() const { return factor * 2; }
  void validate() const;
  nlohmann::json to_json() const;
  static CodecConfig from_json(const nlohmann::json& j);
};

/// Frame-aligned explicit conditions at the latent rate.
struct ExplicitConditions {
  Matrix lyrics;  // L x lyrics_width: fixed token embeddings of `factor` consecutive frames
  Matrix singer;  // L x singer_dim: mean of the segment's singer embeddings
  Matrix f0;      // L x f0_width: normalized log f0 and voicing of `factor` consecutive frames

  std::size_t frames() const { return lyrics.rows(); }
  static ExplicitConditions zeros(std::size_t frames, const CodecConfig& config);
};

struct Encoded {
  nn::Var mu, logvar;
};

class Codec {
 public:
  Codec(const CodecConfig& config, std::uint64_t seed);
  // Layers hold handles into params_, so a member-wise copy would share weights.
  Codec(const Codec&) = delete;
  Codec& operator=(const Codec&) = delete;
  Codec(Codec&&) = default;
  Codec& operator=(Codec&&) = default;
  /// Independent copy of the weights.
  Codec clone() const;

  const CodecConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// frames: (batch * T) x channels normalized features, T divisible by factor.
  Encoded encode(const nn::Var& frames, std::size_t batch) const;
  /// z: (batch * L) x d_z. Returns (batch * L * factor) x channels normalized features.
  nn::Var decode_cond(const nn::Var& z, const ExplicitConditions& conditions, std::size_t batch) const;
  nn::Var decode(const nn::Var& z, std::size_t batch) const;

  /// Fixed lyric token embedding (row 0, no lyric, is zero).
  const Matrix& lyric_table() const { return lyric_table_; }
  ExplicitConditions conditions(std::span<const int> tokens, const Matrix& singer_frames, const Matrix& features) const;

 private:
  CodecConfig config_;
  nn::ParamStore params_;
  nn::Conv1d enc1_, enc2_, enc3_, dec1_, dec2_, dec3_;
  Matrix lyric_table_;
};

/// z + N(0, sigma^2) with sigma^2 = mean(z^2) / 10^(snr_db / 10), one sigma per sequence.
Matrix perturb_latent(const Matrix& z, double snr_db, Rng& rng);
/// perturb_latent on a tape for `batch` stacked sequences; the noise is a constant of the values.
nn::Var perturb_latent(const nn::Var& z, double snr_db, std::size_t batch, Rng& rng);

struct LossBreakdown {
  double total = 0.0;
  double stft = 0.0;
  double kl = 0.0;
  double feature = 0.0;
  double adversarial = 0.0;
};

/// w_stft * L_stft + w_kl * L_kl (+ w_feature * L_feature + w_adv * L_adv).
nn::Var vae_loss(const nn::Var& y_hat, const Matrix& y, const nn::Var& mu, const nn::Var& logvar,
                 const LossWeights& weights, std::size_t batch, std::span<const std::size_t> resolutions,
                 const nn::Var& feature_loss = {}, const nn::Var& adversarial_loss = {}, LossBreakdown* out = nullptr);

// ---------------------------------------------------------------- data

/// One training song reduced to what the codec needs.
struct CodecSong {
  std::string song_id;
  Matrix features;               // normalized, T x channels, T divisible by the codec factor
  std::vector<double> waveform;  // T * hop samples
  std::vector<double> f0;        // estimate the features were analysed with
  std::vector<double> gt_f0;
  std::vector<int> tokens;  // lyric token per frame
  Matrix singer;            // T x singer_dim
};

/// Lyric token active at every frame of a song (0 outside notes).
std::vector<int> frame_tokens(const corpus::SongManifest& manifest);
/// Per-frame mean of the assigned singers' embeddings.
Matrix singer_frames(const corpus::SongManifest& manifest, const std::vector<std::vector<double>>& segment_prompts);

/// Per-segment mean of the assigned singers' embeddings.
std::vector<std::vector<double>> segment_singer_means(const prompt::SongSchedule& schedule);

/// f0 estimate of a waveform at the feature frame rate.
std::vector<double> feature_f0(std::span<const double> waveform, const FeatureConfig& config);
/// Song truncated to a whole number of latent frames, analysed and normalized.
CodecSong codec_song(const corpus::RenderedSong& song, const FeatureNorm& norm, const prompt::SongSchedule& schedule,
                     const CodecConfig& config);
/// Raw features of a song truncated to a whole number of latent frames.
Matrix song_features(const corpus::RenderedSong& song, const CodecConfig& config);

// ---------------------------------------------------------------- training

struct TrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 8;
  std::size_t chunk_frames = 64;
  double lr = 2e-3;
  double warmup = 50;
  std::uint64_t seed = 1;
  std::size_t log_every = 50;
};

struct LossRecord {
  std::size_t step = 0;
  LossBreakdown loss;
};

struct TrainResult {
  std::vector<LossRecord> curve;  // every log_every steps and the last step
};

using StepCallback = std::function<void(const LossRecord&)>;

/// Stage 1: clean reconstruction with zero conditions. Throws kTrainingFailure on a non-finite loss.
TrainResult train_vae(Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                      const TrainConfig& config, const StepCallback& on_step = {});
/// Stage 2: reconstruction from the perturbed latent and the explicit conditions.
TrainResult train_texture_stage(Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                                const TrainConfig& config, const StepCallback& on_step = {});

/// Held-out reconstruction loss under the stage-2 objective, with the true or zeroed conditions.
/// Chunks are taken in order from every song; the latent noise depends only on `seed`.
LossBreakdown evaluate_reconstruction(const Codec& codec, const FeatureNorm& norm, const std::vector<CodecSong>& songs,
                                      bool zero_conditions, std::uint64_t seed, std::size_t chunk_frames = 64,
                                      std::size_t max_chunks_per_song = 4);

struct TextureLatent {
  Matrix sequence;              // L x d_z encoder means
  std::vector<double> pooled;  // frame mean of `sequence`
};

/// Encoder means of a full sequence of normalized features (T divisible by factor).
Matrix encode_mean(const Codec& codec, const Matrix& features);
TextureLatent extract_texture(const Codec& codec, const Matrix& features);
/// Decoded normalized features of a latent sequence under zero conditions.
Matrix decode_features(const Codec& codec, const Matrix& z);
/// Waveform of normalized features using their own f0 and voicing. Decoded features carry a
/// voicing logit; analysed ones carry 0/1 (`voicing_logits` = false).
std::vector<double> render_features(const Vocoder& vocoder, const FeatureNorm& norm, const Matrix& features,
                                    bool voicing_logits = true);

// ---------------------------------------------------------------- persistence

struct CodecBundle {
  CodecConfig config;
  FeatureNorm norm;
  int stage = 0;  // 1 after train_vae, 2 after train_texture_stage
  std::string config_hash;
};

void save_codec(const std::filesystem::path& path, const Codec& codec, const CodecBundle& bundle,
                const nn::AdamW* optimizer = nullptr);
/// Loads a codec checkpoint; `bundle` receives its metadata.
Codec load_codec(const std::filesystem::path& path, CodecBundle& bundle);

}  // namespace ensemble::codec

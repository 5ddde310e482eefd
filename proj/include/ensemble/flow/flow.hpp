#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensemble/codec/codec.hpp"
#include "ensemble/core/matrix.hpp"
#include "ensemble/core/rng.hpp"
#include "ensemble/corpus/corpus.hpp"
#include "ensemble/nn/layers.hpp"
#include "ensemble/prompt/prompt.hpp"

namespace ensemble::flow {

// ---------------------------------------------------------------- timestep distribution

/// t = logistic(u) with u ~ N(m, s).
double sample_timestep(double m, double s, Rng& rng);
/// Logit-normal density 1/(s sqrt(2 pi)) * 1/(t (1 - t)) * exp(-(logit(t) - m)^2 / (2 s^2)).
double logit_normal_pdf(double t, double m, double s);

// ---------------------------------------------------------------- path, guidance, solver

/// (1 - t) z0 + t z1.
Matrix interpolate(const Matrix& z0, const Matrix& z1, double t);
/// v_uncond + scale (v_cond - v_uncond).
Matrix cfg_velocity(const Matrix& v_cond, const Matrix& v_uncond, double scale);

using VelocityField = std::function<Matrix(const Matrix& z, double t)>;
/// Uniform Euler steps from t = 0 to 1. Throws kSamplingFailure naming the step when z turns non-finite.
Matrix euler_integrate(const VelocityField& field, Matrix z0, std::size_t n_steps);

// ---------------------------------------------------------------- configuration

struct FlowConfig {
  std::size_t d_z = 16;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t d_lyr = 32;
  std::size_t d_struct = 20;
  std::size_t d_time = 16;   // start-time and timestep embeddings
  std::size_t lyric_vocab = 64;
  std::size_t lyric_rate = 4;  // lyric frames per latent frame
  double latent_rate = 12.5;
  prompt::FuserConfig fuser;
  double m = 0.0;
  double s = 1.0;
  double cond_drop_prob = 0.1;
  /// Probability that a training window sees no texture (the absent-texture case at inference).
  double texture_drop_prob = 0.5;
  std::size_t window = 16;  // latent frames per training window

  std::size_t cond_width() const { return d_lyr + d_struct + fuser.d_k + d_z; }
  std::size_t input_width() const { return d_z + cond_width(); }
  void validate() const;
  nlohmann::json to_json() const;
  static FlowConfig from_json(const nlohmann::json& j);
};

// ---------------------------------------------------------------- conditions

struct ConditionBundle {
  Matrix lyrics_track;     // (frames * r) x d_lyr for an integer rate ratio r >= 1
  Matrix structure_track;  // frames x d_struct
  prompt::PromptTrack prompt_track;
  std::optional<codec::TextureLatent> texture;
  double start_time = 0.0;  // seconds
  double t = 0.5;
};

/// [z_t | lyrics | structure | prompt | texture]. Single-row tracks are broadcast, tracks at an
/// integer multiple of the latent rate are averaged over consecutive groups, an absent texture
/// is a zero block and a present one contributes its pooled vector on every frame.
Matrix align_and_concat(const ConditionBundle& bundle, const Matrix& z_t, const FlowConfig& config);

/// Symbolic conditions of one window of latent frames.
struct WindowConditions {
  std::vector<int> tokens;                 // frames * lyric_rate lyric tokens
  std::vector<corpus::Label> labels;       // per latent frame
  std::vector<Matrix> singer_sets;         // one per segment touched by the window
  std::vector<std::size_t> set_of_frame;   // per latent frame, index into singer_sets
  std::vector<double> texture;             // pooled texture latent, empty when absent
  double start_time = 0.0;

  std::size_t frames() const { return labels.size(); }
};

// ---------------------------------------------------------------- model

class FlowModel {
 public:
  FlowModel(const FlowConfig& config, std::uint64_t seed);
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;
  FlowModel(FlowModel&&) = default;
  FlowModel& operator=(FlowModel&&) = default;

  const FlowConfig& config() const { return config_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const prompt::Fuser& fuser() const { return fuser_; }

  /// Condition block (sum of frames) x cond_width and start-time features (sum of frames) x d_time
  /// for windows of equal length, with learned embeddings on the tape.
  struct Conditions {
    nn::Var block, start;
  };
  Conditions conditions(const std::vector<WindowConditions>& windows) const;
  /// The bundle view of one window's conditions at timestep t.
  ConditionBundle bundle(const WindowConditions& window, double t) const;

  /// Velocity for `batch` windows stacked as rows; t has one entry per window. Rows of `keep`
  /// (one per window) scale the condition block and start-time features, 0 for unconditional.
  nn::Var velocity(const nn::Var& z_t, std::span<const double> t, const Conditions& cond,
                   std::span<const double> keep, std::size_t batch) const;

 private:
  FlowConfig config_;
  nn::ParamStore params_;
  prompt::Fuser fuser_;
  nn::Var lyric_table_, struct_table_;
  nn::Linear in_proj_, t_proj_, start_proj_, out_;
  std::vector<nn::TransformerBlock> blocks_;
  nn::LayerNorm ln_out_;
};

// ---------------------------------------------------------------- objective

/// Random quantities of one flow-matching draw.
struct FmDraw {
  Matrix z0;                  // prior sample, same shape as z1
  std::vector<double> t;      // per window
  std::vector<double> keep;   // per window, 0 when conditions are dropped
};
FmDraw draw_fm(std::size_t batch, std::size_t frames, std::size_t d_z, double m, double s, double cond_drop_prob,
               Rng& rng);

/// Network under the objective: (z_t, t per window, keep per window, batch) -> velocity.
using VelocityNet =
    std::function<nn::Var(const nn::Var& z_t, std::span<const double> t, std::span<const double> keep, std::size_t batch)>;

/// Mean over windows of ||v(z_t, t) - (z1 - z0)||^2 for the given draw.
nn::Var fm_loss(const VelocityNet& net, const Matrix& z1, std::size_t batch, const FmDraw& draw);
nn::Var fm_loss(const FlowModel& model, const Matrix& z1, const std::vector<WindowConditions>& windows, Rng& rng,
                FmDraw* draw_out = nullptr);

// ---------------------------------------------------------------- data

/// Per-dimension standardization of stage-1 latents.
struct LatentNorm {
  std::vector<double> mean, std;
  static LatentNorm fit(const std::vector<Matrix>& latents);
  Matrix apply(const Matrix& z) const;
  Matrix invert(const Matrix& z) const;
  nlohmann::json to_json() const;
  static LatentNorm from_json(const nlohmann::json& j);
};

/// One song prepared for the flow: normalized latents and per-frame symbolic conditions.
struct FlowSong {
  std::string song_id;
  Matrix z;                                // L x d_z normalized stage-1 latents
  Matrix texture;                          // L x d_z texture encoder means
  std::vector<int> tokens;                 // L * lyric_rate
  std::vector<corpus::Label> labels;       // per latent frame, updated labels
  std::vector<std::size_t> segment_of_frame;
  std::vector<Matrix> singer_sets;         // per segment
  double latent_rate = 12.5;
};

FlowSong flow_song(const codec::CodecSong& song, const corpus::SongManifest& manifest,
                   const prompt::SongSchedule& schedule, const Matrix& normalized_latent, const Matrix& texture_sequence,
                   const FlowConfig& config);

/// Mean texture latent over frames [start, start + frames).
std::vector<double> pooled_texture(const FlowSong& song, std::size_t start, std::size_t frames);

/// Conditions of frames [start, start + frames) of a song; `with_texture` selects the texture block.
WindowConditions window_conditions(const FlowSong& song, std::size_t start, std::size_t frames, bool with_texture);
Matrix window_latent(const FlowSong& song, std::size_t start, std::size_t frames);

// ---------------------------------------------------------------- training and sampling

struct FlowTrainConfig {
  std::size_t steps = 8000;
  std::size_t batch = 32;
  double lr = 1e-3;
  double warmup = 200;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  std::size_t log_every = 100;
};

struct FlowLossRecord {
  std::size_t step = 0;
  double loss = 0.0;  // fm_loss per latent element
};

using FlowStepCallback = std::function<void(const FlowLossRecord&)>;

/// Trains the velocity network and the fuser jointly. Throws kTrainingFailure on divergence.
std::vector<FlowLossRecord> train_flow(FlowModel& model, const std::vector<FlowSong>& songs,
                                       const FlowTrainConfig& config, const FlowStepCallback& on_step = {});

struct SampleConfig {
  std::size_t n_steps = 50;
  double cfg_scale = 4.0;
  std::uint64_t seed = 0;
  std::uint64_t first_stream = 0;  // prior stream of the first window
};

/// Euler sampling of equal-length windows at once; window i draws its prior from stream
/// first_stream + i of the seed, so results do not depend on how windows are batched.
std::vector<Matrix> euler_sample(const FlowModel& model, const std::vector<WindowConditions>& windows,
                                 const SampleConfig& config);

/// Normalized latent of a whole sequence, generated window by window with the song's symbolic
/// conditions; `texture` (pooled) conditions every window when given.
Matrix generate(const FlowModel& model, const FlowSong& conditions_source, const SampleConfig& config,
                const std::optional<codec::TextureLatent>& texture = std::nullopt);

// ---------------------------------------------------------------- persistence

struct FlowBundle {
  FlowConfig config;
  LatentNorm norm;
  std::string config_hash;
  std::string codec_hash;
};

void save_flow(const std::filesystem::path& path, const FlowModel& model, const FlowBundle& bundle);
FlowModel load_flow(const std::filesystem::path& path, FlowBundle& bundle);

}  // namespace ensemble::flow

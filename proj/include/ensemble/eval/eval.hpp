#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensemble/codec/codec.hpp"
#include "ensemble/core/matrix.hpp"
#include "ensemble/corpus/corpus.hpp"
#include "ensemble/dsp/dsp.hpp"
#include "ensemble/flow/flow.hpp"
#include "ensemble/prompt/prompt.hpp"

namespace ensemble::eval {

inline constexpr int kReportSchemaVersion = 1;

// ---------------------------------------------------------------- F0

/// Autocorrelation pitch per frame at `frame_rate`, 0 where unvoiced.
std::vector<double> f0_estimate(std::span<const double> waveform, double frame_rate, int sample_rate = 8000);

/// 1200 log2(f_a / f_b). Throws kDomain on a nonpositive frequency.
double cents(double f_a, double f_b);

struct F0Report {
  double rmse_cents = 0.0;
  double mae_cents = 0.0;
  double correlation = 0.0;
  std::size_t n_frames_compared = 0;

  nlohmann::json to_json() const;
};

/// Row names of the printed F0 table, in order.
inline const std::array<std::string, 3> kF0RowNames = {"F0 RMSE (cents)", "F0 MAE (cents)", "Correlation"};

/// Deviation of b from a in cents over mutually voiced frames, optionally restricted to frames
/// where `include` is true. Correlation is Pearson over log frequency; two constant tracks count
/// as perfectly correlated. Throws kInsufficientOverlap without a frame to compare.
F0Report compare_f0(std::span<const double> track_a, std::span<const double> track_b,
                    const std::vector<bool>& include = {});

/// Fixed-width table with one row per kF0RowNames entry.
std::string format_f0_table(const F0Report& report, const std::string& column = "Value");

// ---------------------------------------------------------------- texture swap

/// Trained pieces needed to turn symbolic conditions into audio.
struct GenerationModels {
  const flow::FlowModel* flow = nullptr;
  const flow::LatentNorm* latent_norm = nullptr;
  const codec::Codec* decoder = nullptr;          // stage-1 codec, whose latents the flow models
  const codec::Codec* texture_encoder = nullptr;  // stage-2 codec
  const codec::FeatureNorm* feature_norm = nullptr;
  const codec::Vocoder* vocoder = nullptr;
};

struct Generation {
  Matrix latent;               // normalized flow output
  std::vector<double> waveform;
  std::vector<double> f0;      // estimated, feature frame rate
};

/// Generates, decodes and renders one song's conditions. `max_latent_frames` = 0 keeps the
/// whole song, otherwise the song is cut to its first frames.
Generation generate_audio(const GenerationModels& models, const flow::FlowSong& source,
                          const flow::SampleConfig& sample, const std::optional<codec::TextureLatent>& texture,
                          std::size_t max_latent_frames = 0);

/// Names of the metrics the report layout reserves rows for; they need pretrained models, so
/// none is bundled (see MetricRegistry).
inline const std::array<std::string, 2> kExternalMetricNames = {"WER", "SIM"};

struct ReferenceClip {
  std::string id;
  Matrix features;  // normalized codec features, rows divisible by the codec factor
};

struct TextureSwapConfig {
  std::size_t n_samples = 10;
  std::size_t n_references = 4;
  std::uint64_t seed = 42;
  std::size_t n_steps = 50;
  double cfg_scale = 4.0;
  std::size_t max_latent_frames = 160;
};

struct TextureSwapEntry {
  std::size_t sample = 0;
  std::size_t reference = 0;
  std::string source_id, reference_id;
  F0Report report;
};

struct TextureSwapReport {
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  std::size_t n_references = 0;
  std::vector<TextureSwapEntry> entries;
  F0Report aggregate;                  // field-wise means of the entries
  std::size_t excluded_chorus_frames = 0;
  /// Values for kExternalMetricNames rows, filled by hosts that register those metrics.
  std::map<std::string, double> external;

  /// Ordered rows: kF0RowNames then kExternalMetricNames, null where no value exists.
  nlohmann::json table() const;
  /// Fixed-width table of the same rows, "n/a" where no value exists.
  std::string format() const;
  nlohmann::json to_json() const;
};

/// Every sample is generated once without texture and once per reference with the same seed and
/// conditions; F0 of each textured version is compared to the baseline over solo-labelled frames.
/// Samples cycle through `sources`, references through `references`.
TextureSwapReport texture_swap_protocol(const GenerationModels& models, std::span<const flow::FlowSong> sources,
                                        std::span<const ReferenceClip> references, const TextureSwapConfig& config);

// ---------------------------------------------------------------- similarity statistics

using Embedder = std::function<std::vector<double>(std::span<const double>)>;

struct SimilarityConfig {
  double slice_s = 3.0;
  double overlap_s = 1.5;
  std::size_t histogram_bins = 40;
};

/// One slice of a solo verse section.
struct SliceRef {
  std::size_t song = 0;
  std::size_t segment = 0;
  std::size_t start_sample = 0;
  std::string profile;  // "<song_id>:<singer id>"
};

/// Slices of every solo verse section, in song, segment, time order.
std::vector<SliceRef> similarity_slices(std::span<const corpus::RenderedSong> corpus, const SimilarityConfig& config);

struct PairCounts {
  std::size_t intra = 0;
  std::size_t cross = 0;
};
/// Closed-form pair counts: n(n-1)/2 per verse section with n slices, and the product of slice
/// counts for every pair of slices from different profiles in different songs.
PairCounts similarity_pair_counts(std::span<const corpus::RenderedSong> corpus, const SimilarityConfig& config);

struct SimilarityStats {
  double mean = 0.0, median = 0.0, std = 0.0;
  std::size_t n_pairs = 0;
  std::vector<std::size_t> histogram;
};

struct SimilarityReport {
  SimilarityStats intra, cross;
  std::vector<double> histogram_edges;

  nlohmann::json to_json() const;
};

/// Cosine similarities of slice embeddings within single verse sections and across songs whose
/// singers differ. Throws kProtocol with fewer than two profiles.
SimilarityReport similarity_distributions(std::span<const corpus::RenderedSong> corpus, const Embedder& embedder,
                                          const SimilarityConfig& config = {});

// ---------------------------------------------------------------- attention

struct SegmentAttention {
  std::size_t segment = 0;
  corpus::Label label = corpus::Label::kVerse;
  /// Head-summed fuser weight per member of the song's global singer set (0 when unassigned).
  std::vector<double> head_sum;
  /// Singer-to-singer attention among the assigned singers, only for multi-singer segments.
  Matrix singer_matrix;
};

struct AttentionReport {
  std::string song_id;
  std::size_t heads = 0;
  std::vector<SegmentAttention> segments;

  nlohmann::json to_json() const;
};

AttentionReport attention_report(const prompt::Fuser& fuser, const corpus::SongManifest& manifest,
                                 const prompt::SongSchedule& schedule);

/// Weight table (CSV + PNG heatmap) and one singer-matrix heatmap per multi-singer segment.
std::vector<std::filesystem::path> write_attention_report(const std::filesystem::path& dir,
                                                          const AttentionReport& report);

// ---------------------------------------------------------------- plots

/// Grayscale PNG with rows of `m` running left to right and columns bottom to top, values mapped
/// linearly from [lo, hi] (the matrix range when lo == hi); a CSV sidecar holds the raw matrix.
void write_heatmap(const std::filesystem::path& png, const Matrix& m, double lo = 0.0, double hi = 0.0);

/// Pitch salience image with time on x, log pitch on y.
std::filesystem::path emit_pitch_salience(std::span<const double> waveform, const std::filesystem::path& png,
                                          const dsp::SalienceConfig& config = {});
std::filesystem::path emit_mel_spectrogram(std::span<const double> waveform, const std::filesystem::path& png,
                                           const dsp::MelConfig& config = {});

// ---------------------------------------------------------------- distribution statistics

using Samples = std::vector<std::vector<double>>;

/// 2 E|X - Y| - E|X - X'| - E|Y - Y'| with Euclidean distances, the within-sample terms over
/// distinct pairs.
double energy_distance(const Samples& x, const Samples& y);

/// Ridge-regularized least squares with an intercept.
class LinearProbe {
 public:
  static LinearProbe fit(const Samples& x, std::span<const double> y, double ridge = 1e-6);
  double predict(std::span<const double> x) const;
  double rmse(const Samples& x, std::span<const double> y) const;

 private:
  std::vector<double> weights_;
  double bias_ = 0.0;
};

// ---------------------------------------------------------------- external metrics

/// Interface for metrics that need pretrained models (word error rate, speaker similarity).
/// None is bundled; hosts register implementations.
class Metric {
 public:
  virtual ~Metric() = default;
  virtual std::string name() const = 0;
  virtual double score(std::span<const double> generated, std::span<const double> reference,
                       int sample_rate) const = 0;
};

class MetricRegistry {
 public:
  void add(std::unique_ptr<Metric> metric);
  bool contains(const std::string& name) const;
  std::vector<std::string> names() const;
  /// Throws kEvaluation when nothing is registered under `name`.
  const Metric& get(const std::string& name) const;

 private:
  std::vector<std::unique_ptr<Metric>> metrics_;
};

/// JSON envelope with schema version and report kind.
nlohmann::json report_envelope(const std::string& kind, nlohmann::json body);

}  // namespace ensemble::eval

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ensemble/core/matrix.hpp"

namespace ensemble::corpus {

enum class Label { kVerse = 0, kChorus = 1, kBridge = 2, kMultiChorus = 3 };
inline constexpr std::size_t kNumLabels = 4;
std::string_view to_string(Label label);
Label label_from_string(std::string_view name);

struct SingerProfile {
  int id = 0;
  std::vector<double> harmonic_profile;  // nonnegative, sums to 1
  double f_lo = 0.0;
  double f_hi = 0.0;
  double vibrato_rate = 0.0;   // Hz
  double vibrato_depth = 0.0;  // cents
};

struct Note {
  std::size_t onset_frame = 0;   // relative to the segment start
  std::size_t offset_frame = 0;  // exclusive
  int token = 0;                 // 0 = no lyric
};

struct Segment {
  double start = 0.0;
  double end = 0.0;
  Label label = Label::kVerse;
  std::vector<int> lyric_tokens;
  std::vector<double> f0_track;  // per frame, 0 = unvoiced
  std::vector<int> active_singers;
  std::vector<Note> notes;

  double duration() const { return end - start; }
};

struct SongManifest {
  std::string song_id;
  int sample_rate = 8000;
  double frame_rate = 50.0;
  std::vector<Segment> segments;
  std::vector<SingerProfile> singer_roster;
  std::uint64_t render_seed = 0;

  double duration() const { return segments.empty() ? 0.0 : segments.back().end; }
  std::size_t num_samples() const;
  std::size_t num_frames() const;
  const SingerProfile& singer(int id) const;
};

struct RenderedSong {
  std::vector<double> waveform;
  SongManifest manifest;
  std::vector<double> gt_f0;
};

struct CorpusConfig {
  int sample_rate = 8000;
  double frame_rate = 50.0;
  std::size_t harmonics = 8;
  int singers_min = 2;  // K is drawn uniformly from [singers_min, singers_max] per song
  int singers_max = 2;
  int segments_min = 5;
  int segments_max = 8;
  double duration_min = 4.0;
  double duration_max = 12.0;
  /// Segment boundaries are multiples of this (one latent frame at the default rates).
  double duration_quantum = 0.08;
  double dirichlet_alpha = 0.35;
  /// Weight of the fundamental added to every profile.
  double fundamental_floor = 0.0;
  /// Profiles whose waveform correlates with itself at a lag shorter than one period by at least
  /// this much (two thirds of it at sub-multiples of the period) are redrawn, so the perceived
  /// pitch is the fundamental.
  double max_pitch_ambiguity = 0.75;
  /// Singers within one song are redrawn until their profiles are below this cosine similarity.
  double max_profile_cosine = 0.2;
  double p_multi_chorus = 0.75;
  double p_multi_bridge = 0.2;
  int lyric_vocab = 64;
  double vibrato_rate_min = 4.5, vibrato_rate_max = 6.5;
  double vibrato_depth_min = 15.0, vibrato_depth_max = 50.0;
  double detune_cents = 15.0;
  double t60_min = 0.2, t60_max = 0.6;
  double wet_min = 0.3, wet_max = 0.6;
  bool reverb = true;
  bool consonants = true;
  bool normalize = true;
  double target_rms = 0.1;

  void validate() const;
  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

/// Knobs for render_song that tests use to isolate parts of the signal model.
struct RenderOptions {
  double detune_cents = 15.0;
  bool reverb = true;
  bool consonants = true;
  double t60_min = 0.2, t60_max = 0.6;
  double wet_min = 0.3, wet_max = 0.6;

  static RenderOptions from(const CorpusConfig& cfg);
};

/// Manifest of song `index` of the corpus generated from `seed`; a pure function of its inputs.
SongManifest make_manifest(std::uint64_t seed, std::size_t index, const CorpusConfig& config);
RenderedSong render_song(const SongManifest& manifest, std::uint64_t rng_seed, const RenderOptions& options = {});
/// make_manifest + render_song (+ loudness normalization when configured).
RenderedSong make_song(std::uint64_t seed, std::size_t index, const CorpusConfig& config);
std::vector<RenderedSong> make_corpus(std::uint64_t seed, std::size_t n_songs, const CorpusConfig& config);

std::vector<double> loudness_normalize(std::span<const double> waveform, double target_rms = 0.1);

/// Per-sample contribution of one singer following `f0_track` (frame rate `frame_rate`).
std::vector<double> render_voice(const SingerProfile& singer, std::span<const double> f0_track, double frame_rate,
                                 int sample_rate, double detune_cents, std::span<const Note> notes);

struct EmbedConfig {
  int sample_rate = 8000;
  double frame_rate = 50.0;
  std::size_t dim = 192;
  std::size_t window = 512;
  std::size_t n_fft = 1024;
  double ratio_min = 0.5;
  double ratio_step = 1.0 / 24.0;
  double min_duration = 0.5;
};

/// Unit-norm embedding: time average of per-frame normalized magnitude spectra sampled at
/// multiples ratio_min + i*ratio_step of the frame's estimated f0.
std::vector<double> embed_segment(std::span<const double> slice, const EmbedConfig& config = {});

double cosine(std::span<const double> a, std::span<const double> b);

// Serialization.
nlohmann::json to_json(const SongManifest& m);
SongManifest manifest_from_json(const nlohmann::json& j);

/// Writes <id>.json, <id>.wav and <id>_f0.csv under `dir`.
void write_song(const std::filesystem::path& dir, const RenderedSong& song);
RenderedSong read_song(const std::filesystem::path& dir, const std::string& song_id);

struct CorpusIndex {
  std::uint64_t seed = 0;
  CorpusConfig config;
  std::vector<std::string> song_ids;
  std::vector<std::uint64_t> song_seeds;
};
void write_index(const std::filesystem::path& dir, const CorpusIndex& index);
CorpusIndex read_index(const std::filesystem::path& dir);

}  // namespace ensemble::corpus

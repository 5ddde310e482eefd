#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensemble/codec/codec.hpp"
#include "ensemble/core/error.hpp"
#include "ensemble/corpus/corpus.hpp"
#include "ensemble/eval/eval.hpp"
#include "ensemble/flow/flow.hpp"
#include "ensemble/prompt/prompt.hpp"

namespace ensemble::pipeline {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- configuration

struct CorpusSection {
  std::uint64_t seed = 7;
  std::size_t n_songs = 48;
  std::size_t n_heldout = 8;  // the last songs of the corpus
  corpus::CorpusConfig config;
};

struct StageTraining {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::size_t chunk_frames = 64;
  double lr = 2e-3;
  double warmup = 50;
};

struct CodecSection {
  codec::CodecConfig model;
  StageTraining vae;
  StageTraining texture;
  std::uint64_t seed = 1;
};

struct FlowSection {
  flow::FlowConfig model;
  flow::FlowTrainConfig train;
};

struct InferenceSection {
  std::size_t n_steps = 50;
  double cfg_scale = 4.0;
  std::uint64_t seed = 0;
};

struct EvalSection {
  std::uint64_t seed = 42;
  std::size_t swap_samples = 10;
  std::size_t swap_references = 4;
  std::size_t swap_max_latent_frames = 160;
  eval::SimilarityConfig similarity;
  std::size_t attention_songs = 2;
  std::size_t plot_songs = 1;
};

struct PipelineConfig {
  std::string profile = "desk";
  CorpusSection corpus;
  prompt::SchedulerConfig scheduler;
  CodecSection codec;
  FlowSection flow;
  InferenceSection inference;
  EvalSection eval;

  void validate() const;
  nlohmann::json to_json() const;
  /// Overlays `j` on the profile it names (default "desk"); unknown keys throw kConfig.
  static PipelineConfig from_json(const nlohmann::json& j);
  /// Applies `section.key=value` style overrides; values are parsed as JSON, else taken as strings.
  void apply_overrides(const std::map<std::string, std::string>& overrides);

  /// Hash of the sections an artifact depends on, e.g. {"corpus", "codec"}.
  std::string section_hash(const std::vector<std::string>& sections) const;
};

/// Built-in profiles: "desk" (default), "smoke" (seconds-scale CI run) and "paper_fullscale"
/// (documented full-scale values; far beyond a desk machine).
PipelineConfig profile(const std::string& name);
std::vector<std::string> profile_names();

/// Overrides from environment variables `<prefix><SECTION>__<KEY>`, e.g. ENSEMBLE_FLOW__TRAIN__STEPS=20.
std::map<std::string, std::string> environment_overrides(const std::string& prefix = "ENSEMBLE_");

PipelineConfig load_config(const std::optional<fs::path>& path, const std::map<std::string, std::string>& overrides);

// ---------------------------------------------------------------- artifacts

struct Layout {
  fs::path root;

  fs::path corpus() const { return root / "corpus"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path vae_checkpoint() const { return checkpoints() / "vae.ckpt"; }
  fs::path texture_checkpoint() const { return checkpoints() / "texture.ckpt"; }
  fs::path flow_checkpoint() const { return checkpoints() / "flow.ckpt"; }
  fs::path logs() const { return root / "logs"; }
  fs::path generated() const { return root / "generated"; }
  fs::path reports() const { return root / "reports"; }
  fs::path manifests() const { return root / "manifests"; }
};

/// Throws kMissingArtifact naming `what` when `path` does not exist.
void require_artifact(const fs::path& path, const std::string& what);

struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string source_revision;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;  // path -> sha256
  std::vector<std::string> outputs;
  double wall_time_s = 0.0;

  nlohmann::json to_json() const;
};

std::string source_revision();
/// Writes manifests/<command>.json and returns its path.
fs::path write_manifest(const Layout& layout, const RunManifest& manifest);

// ---------------------------------------------------------------- data shared by commands

struct CorpusData {
  std::vector<corpus::RenderedSong> songs;
  std::vector<prompt::SongSchedule> schedules;
  std::size_t n_train = 0;
};

/// Reads the corpus written by synth_data and schedules every song.
CorpusData load_corpus(const PipelineConfig& config, const Layout& layout);

struct CodecData {
  codec::FeatureNorm norm;
  std::vector<codec::CodecSong> songs;  // all songs, train first
};
CodecData prepare_codec_data(const PipelineConfig& config, const CorpusData& corpus, const codec::FeatureNorm* norm = nullptr);

struct FlowData {
  flow::LatentNorm norm;
  std::vector<flow::FlowSong> songs;  // all songs, train first
};
FlowData prepare_flow_data(const PipelineConfig& config, const CorpusData& corpus, const CodecData& codec_data,
                           const codec::Codec& vae, const codec::Codec& texture, const flow::LatentNorm* norm = nullptr);

codec::TrainConfig stage_train_config(const StageTraining& stage, std::uint64_t seed, std::size_t steps_limit = 0);

// ---------------------------------------------------------------- commands

using Log = std::function<void(const std::string&)>;

struct CommandResult {
  std::vector<fs::path> outputs;
  nlohmann::json summary;
};

struct StepLimit {
  /// 0 = configured step count; otherwise training stops after this many steps.
  std::size_t steps = 0;
};

CommandResult synth_data(const PipelineConfig& config, const Layout& layout, const Log& log = {});
CommandResult train_vae(const PipelineConfig& config, const Layout& layout, const Log& log = {}, StepLimit limit = {});
CommandResult train_texture(const PipelineConfig& config, const Layout& layout, const Log& log = {},
                            StepLimit limit = {});
CommandResult train_flow(const PipelineConfig& config, const Layout& layout, const Log& log = {}, StepLimit limit = {});

/// Request file fields: "song" (corpus song id, required), "seed", "n_steps", "cfg_scale",
/// "texture_reference" (song id), "max_latent_frames", "name".
CommandResult generate(const PipelineConfig& config, const Layout& layout, const fs::path& request, const Log& log = {});

enum class Evaluation { kTextureSwap, kSimilarity, kAttention, kPlots, kAll };
Evaluation evaluation_from_string(const std::string& name);
CommandResult evaluate(const PipelineConfig& config, const Layout& layout, Evaluation which, const Log& log = {});

/// CLI exit status for an error kind: 2 config, 3 missing artifact, 4 training failure,
/// 5 evaluation failure, 1 anything else.
int exit_code(ErrorKind kind);

}  // namespace ensemble::pipeline

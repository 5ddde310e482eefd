#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensemble/core/matrix.hpp"
#include "ensemble/core/rng.hpp"
#include "ensemble/corpus/corpus.hpp"
#include "ensemble/nn/layers.hpp"

namespace ensemble::prompt {

using Embedding = std::vector<double>;

struct GlobalSingerSet {
  std::vector<Embedding> members;  // unit-norm centroids u_1..u_K
  std::size_t size() const { return members.size(); }
};

/// Greedy clustering in input order: an embedding joins the first cluster whose centroid has
/// cosine >= delta_id, else it founds a new one. Clusters whose centroids end up within delta_id
/// of each other are merged afterwards, so members are pairwise below delta_id.
GlobalSingerSet cluster_verse_singers(std::span<const Embedding> verse_embeddings, double delta_id);

struct SegmentAssignment {
  std::size_t segment_index = 0;
  std::vector<std::size_t> assigned_singers;  // indices into GlobalSingerSet, ascending
  corpus::Label updated_label = corpus::Label::kVerse;
  std::vector<double> similarity_scores;  // cosine to every member of the global set
};

std::vector<SegmentAssignment> assign_segments(std::span<const corpus::Label> labels,
                                               std::span<const Embedding> embeddings, const GlobalSingerSet& global,
                                               double delta_multi);

struct SchedulerConfig {
  double delta_id = 0.4;
  double delta_multi = 0.4;
  corpus::EmbedConfig embed;
};

/// Output of the scheduling front end for one song.
struct SongSchedule {
  std::vector<Embedding> segment_embeddings;
  GlobalSingerSet global;
  std::vector<SegmentAssignment> assignments;
};

/// Embeds every segment, clusters the verses and assigns all segments.
SongSchedule schedule_song(const corpus::RenderedSong& song, const SchedulerConfig& config = {});

/// Matrix of the singer embeddings assigned to one segment (rows), the set U_m.
Matrix singer_set(const SongSchedule& schedule, std::size_t segment);

struct FuserConfig {
  std::size_t d_emb = 192;
  std::size_t d_k = 64;
  std::size_t heads = 4;
  std::size_t max_set = 8;
};

/// Attention pooling of a singer set with one learned query:
/// alpha = softmax(q W_q (U W_k)^T / sqrt(d_k / heads)) per head, output sum_i alpha_i U_i W_v.
class Fuser {
 public:
  Fuser() = default;
  Fuser(nn::ParamStore& params, const std::string& name, const FuserConfig& config, Rng& rng);

  const FuserConfig& config() const { return config_; }

  /// Fuses several sets at once; returns one row of width d_k per set.
  nn::Var fuse_sets(const std::vector<Matrix>& sets) const;
  std::vector<double> fuse(const Matrix& set) const;
  /// heads x |set| weights used by fuse.
  Matrix attention_weights(const Matrix& set) const;
  /// Head-averaged |set| x |set| attention with each singer's projection as the query.
  Matrix singer_attention(const Matrix& set) const;

 private:
  void check_set(const Matrix& set) const;

  FuserConfig config_;
  nn::Var query_, w_q_, w_k_, w_v_;
};

/// Frame-level prompt: row t is the condition of the segment containing time t / frame_rate.
struct PromptTrack {
  Matrix values;
  std::vector<std::size_t> segment_of_frame;
  double frame_rate = 0.0;
};

/// Segments are half-open [start, end); a frame on a boundary belongs to the later segment.
std::vector<std::size_t> frame_segments(const std::vector<corpus::Segment>& segments, double frame_rate,
                                        std::size_t n_frames);
PromptTrack broadcast_prompt(const std::vector<corpus::Segment>& segments, const Matrix& fused, double frame_rate,
                             std::size_t n_frames);

nlohmann::json to_json(const std::vector<SegmentAssignment>& assignments);
std::vector<SegmentAssignment> assignments_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GlobalSingerSet& global);
GlobalSingerSet global_set_from_json(const nlohmann::json& j);

void write_prompt_track(const std::filesystem::path& path, const PromptTrack& track);
Matrix read_prompt_track(const std::filesystem::path& path, double* frame_rate = nullptr);

}  // namespace ensemble::prompt

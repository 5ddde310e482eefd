#include "ensemble/prompt/prompt.hpp"

#include <algorithm>
#include <cmath>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"

namespace ensemble::prompt {

namespace {

Embedding normalized(const std::vector<double>& v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  require(n > 0.0, ErrorKind::kDegenerateSignal, "cannot normalize a zero vector");
  Embedding out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

}  // namespace

GlobalSingerSet cluster_verse_singers(std::span<const Embedding> verse_embeddings, double delta_id) {
  require(!verse_embeddings.empty(), ErrorKind::kNoVerse, "no verse embeddings to cluster");
  require(delta_id > 0.0 && delta_id < 1.0, ErrorKind::kConfig, "delta_id must be in (0, 1)");
  const std::size_t dim = verse_embeddings.front().size();
  std::vector<std::vector<double>> sums;
  std::vector<Embedding> centroids;
  for (const Embedding& e : verse_embeddings) {
    require(e.size() == dim, ErrorKind::kValidation, "verse embeddings differ in dimension");
    std::size_t hit = centroids.size();
    for (std::size_t c = 0; c < centroids.size(); ++c)
      if (corpus::cosine(e, centroids[c]) >= delta_id) {
        hit = c;
        break;
      }
    if (hit == centroids.size()) {
      sums.push_back(e);
      centroids.push_back(normalized(e));
    } else {
      for (std::size_t i = 0; i < dim; ++i) sums[hit][i] += e[i];
      centroids[hit] = normalized(sums[hit]);
    }
  }
  // Centroids drift as members join; merge the closest pair until all are below the threshold.
  for (;;) {
    double best = delta_id;
    std::size_t a = 0, b = 0;
    bool found = false;
    for (std::size_t i = 0; i < centroids.size(); ++i)
      for (std::size_t j = i + 1; j < centroids.size(); ++j) {
        const double s = corpus::cosine(centroids[i], centroids[j]);
        if (s >= best) {
          best = s;
          a = i;
          b = j;
          found = true;
        }
      }
    if (!found) break;
    for (std::size_t i = 0; i < dim; ++i) sums[a][i] += sums[b][i];
    centroids[a] = normalized(sums[a]);
    sums.erase(sums.begin() + static_cast<long>(b));
    centroids.erase(centroids.begin() + static_cast<long>(b));
  }
  return GlobalSingerSet{std::move(centroids)};
}

std::vector<SegmentAssignment> assign_segments(std::span<const corpus::Label> labels,
                                               std::span<const Embedding> embeddings, const GlobalSingerSet& global,
                                               double delta_multi) {
  require(global.size() > 0, ErrorKind::kValidation, "empty global singer set");
  require(labels.size() == embeddings.size(), ErrorKind::kValidation, "one embedding per segment required");
  const std::size_t k = global.size();
  std::vector<SegmentAssignment> out(labels.size());
  for (std::size_t m = 0; m < labels.size(); ++m) {
    SegmentAssignment& a = out[m];
    a.segment_index = m;
    a.updated_label = labels[m];
    a.similarity_scores.resize(k);
    std::size_t nearest = 0;
    for (std::size_t j = 0; j < k; ++j) {
      a.similarity_scores[j] = corpus::cosine(embeddings[m], global.members[j]);
      if (a.similarity_scores[j] > a.similarity_scores[nearest]) nearest = j;
    }
    if (labels[m] == corpus::Label::kVerse || k == 1) {
      a.assigned_singers = {nearest};
      continue;
    }
    for (std::size_t j = 0; j < k; ++j)
      if (a.similarity_scores[j] > delta_multi) a.assigned_singers.push_back(j);
    if (a.assigned_singers.empty()) a.assigned_singers = {nearest};
    if (a.assigned_singers.size() >= 2) a.updated_label = corpus::Label::kMultiChorus;
  }
  return out;
}

SongSchedule schedule_song(const corpus::RenderedSong& song, const SchedulerConfig& config) {
  SongSchedule s;
  const auto& m = song.manifest;
  std::vector<corpus::Label> labels;
  std::vector<Embedding> verses;
  for (const auto& seg : m.segments) {
    const auto a = static_cast<std::size_t>(std::lround(seg.start * m.sample_rate));
    const auto b = std::min(song.waveform.size(), static_cast<std::size_t>(std::lround(seg.end * m.sample_rate)));
    require(a < b, ErrorKind::kValidation, m.song_id + ": segment outside the waveform");
    s.segment_embeddings.push_back(
        corpus::embed_segment(std::span<const double>(song.waveform).subspan(a, b - a), config.embed));
    labels.push_back(seg.label);
    if (seg.label == corpus::Label::kVerse) verses.push_back(s.segment_embeddings.back());
  }
  s.global = cluster_verse_singers(verses, config.delta_id);
  s.assignments = assign_segments(labels, s.segment_embeddings, s.global, config.delta_multi);
  return s;
}

Matrix singer_set(const SongSchedule& schedule, std::size_t segment) {
  const auto& ids = schedule.assignments.at(segment).assigned_singers;
  const std::size_t dim = schedule.global.members.front().size();
  Matrix u(ids.size(), dim);
  for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(schedule.global.members[ids[i]].begin(), dim, u.row(i).begin());
  return u;
}

// ---------------------------------------------------------------- fuser

Fuser::Fuser(nn::ParamStore& params, const std::string& name, const FuserConfig& config, Rng& rng) : config_(config) {
  require(config.d_k % config.heads == 0, ErrorKind::kConfig, "fuser d_k must be divisible by heads");
  require(config.max_set >= 1, ErrorKind::kConfig, "fuser max_set must be >= 1");
  const double sd = 1.0 / std::sqrt(static_cast<double>(config.d_emb));
  query_ = params.add(name + ".query", nn::randn(1, config.d_emb, sd, rng));
  w_q_ = params.add(name + ".w_q", nn::randn(config.d_emb, config.d_k, sd, rng));
  w_k_ = params.add(name + ".w_k", nn::randn(config.d_emb, config.d_k, sd, rng));
  w_v_ = params.add(name + ".w_v", nn::randn(config.d_emb, config.d_k, sd, rng));
}

void Fuser::check_set(const Matrix& set) const {
  require(set.rows() >= 1, ErrorKind::kValidation, "fuser: empty singer set");
  require(set.rows() <= config_.max_set, ErrorKind::kValidation, "fuser: singer set larger than max_set");
  require(set.cols() == config_.d_emb, ErrorKind::kValidation, "fuser: embedding dimension mismatch");
}

nn::Var Fuser::fuse_sets(const std::vector<Matrix>& sets) const {
  require(!sets.empty(), ErrorKind::kValidation, "fuser: no sets");
  std::size_t tk = 0;
  for (const auto& s : sets) {
    check_set(s);
    tk = std::max(tk, s.rows());
  }
  // Sets are zero-padded to a common size; padded keys are masked out.
  Matrix packed(sets.size() * tk, config_.d_emb);
  std::vector<std::size_t> key_len(sets.size());
  for (std::size_t b = 0; b < sets.size(); ++b) {
    key_len[b] = sets[b].rows();
    std::copy(sets[b].storage().begin(), sets[b].storage().end(), packed.row(b * tk).begin());
  }
  nn::Var u = nn::constant(std::move(packed));
  nn::Var q = nn::broadcast_rows(nn::matmul(query_, w_q_), sets.size());
  return nn::attention(q, nn::matmul(u, w_k_), nn::matmul(u, w_v_), sets.size(), 1, tk, config_.heads, key_len);
}

std::vector<double> Fuser::fuse(const Matrix& set) const {
  nn::NoGradGuard guard;
  const nn::Var out = fuse_sets({set});
  return out.value().storage();
}

Matrix Fuser::attention_weights(const Matrix& set) const {
  check_set(set);
  nn::NoGradGuard guard;
  const nn::Var q = nn::matmul(query_, w_q_);
  const nn::Var k = nn::matmul(nn::constant(set), w_k_);
  return nn::attention_probs(q.value(), k.value(), 1, 1, set.rows(), config_.heads);
}

Matrix Fuser::singer_attention(const Matrix& set) const {
  check_set(set);
  nn::NoGradGuard guard;
  const nn::Var u = nn::constant(set);
  const Matrix probs = nn::attention_probs(nn::matmul(u, w_q_).value(), nn::matmul(u, w_k_).value(), 1, set.rows(),
                                           set.rows(), config_.heads);
  const std::size_t n = set.rows();
  Matrix out(n, n);
  for (std::size_t h = 0; h < config_.heads; ++h)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) out(i, j) += probs(h * n + i, j) / static_cast<double>(config_.heads);
  return out;
}

// ---------------------------------------------------------------- broadcasting

std::vector<std::size_t> frame_segments(const std::vector<corpus::Segment>& segments, double frame_rate,
                                        std::size_t n_frames) {
  std::vector<std::size_t> owner(n_frames);
  std::size_t m = 0;
  for (std::size_t t = 0; t < n_frames; ++t) {
    const double time = static_cast<double>(t) / frame_rate;
    // Tolerance keeps boundaries that are exact multiples of the frame period on the later side.
    constexpr double kEps = 1e-9;
    while (m < segments.size() && time >= segments[m].end - kEps) ++m;
    require(m < segments.size() && time >= segments[m].start - kEps, ErrorKind::kCoverage,
            "frame " + std::to_string(t) + " at " + std::to_string(time) + " s lies outside every segment");
    owner[t] = m;
  }
  return owner;
}

PromptTrack broadcast_prompt(const std::vector<corpus::Segment>& segments, const Matrix& fused, double frame_rate,
                             std::size_t n_frames) {
  require(fused.rows() == segments.size(), ErrorKind::kValidation, "one fused embedding per segment required");
  PromptTrack track;
  track.frame_rate = frame_rate;
  track.segment_of_frame = frame_segments(segments, frame_rate, n_frames);
  track.values = Matrix(n_frames, fused.cols());
  for (std::size_t t = 0; t < n_frames; ++t) {
    const auto src = fused.row(track.segment_of_frame[t]);
    std::copy(src.begin(), src.end(), track.values.row(t).begin());
  }
  return track;
}

// ---------------------------------------------------------------- serialization

nlohmann::json to_json(const std::vector<SegmentAssignment>& assignments) {
  auto arr = nlohmann::json::array();
  for (const auto& a : assignments)
    arr.push_back({{"index", a.segment_index},
                   {"label", std::string(corpus::to_string(a.updated_label))},
                   {"singer_ids", a.assigned_singers},
                   {"similarity_scores", a.similarity_scores}});
  return arr;
}

std::vector<SegmentAssignment> assignments_from_json(const nlohmann::json& j) {
  std::vector<SegmentAssignment> out;
  for (const auto& e : j) {
    SegmentAssignment a;
    a.segment_index = e.at("index").get<std::size_t>();
    a.updated_label = corpus::label_from_string(e.at("label").get<std::string>());
    a.assigned_singers = e.at("singer_ids").get<std::vector<std::size_t>>();
    a.similarity_scores = e.at("similarity_scores").get<std::vector<double>>();
    out.push_back(std::move(a));
  }
  return out;
}

nlohmann::json to_json(const GlobalSingerSet& global) { return {{"members", global.members}}; }

GlobalSingerSet global_set_from_json(const nlohmann::json& j) {
  return GlobalSingerSet{j.at("members").get<std::vector<Embedding>>()};
}

void write_prompt_track(const std::filesystem::path& path, const PromptTrack& track) {
  io::write_matrix(path, track.values, track.frame_rate);
}

Matrix read_prompt_track(const std::filesystem::path& path, double* frame_rate) {
  return io::read_matrix(path, frame_rate);
}

}  // namespace ensemble::prompt

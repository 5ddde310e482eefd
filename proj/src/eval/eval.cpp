#include "ensemble/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <png.h>
#include <Eigen/Dense>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"

namespace ensemble::eval {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- F0

std::vector<double> f0_estimate(std::span<const double> waveform, double frame_rate, int sample_rate) {
  dsp::F0Config cfg;
  cfg.sample_rate = sample_rate;
  cfg.frame_rate = frame_rate;
  return dsp::estimate_f0(waveform, cfg);
}

double cents(double f_a, double f_b) {
  require(f_a > 0.0 && f_b > 0.0, ErrorKind::kDomain, "cents: frequencies must be positive");
  return 1200.0 * std::log2(f_a / f_b);
}

nlohmann::json F0Report::to_json() const {
  return {{kF0RowNames[0], rmse_cents},
          {kF0RowNames[1], mae_cents},
          {kF0RowNames[2], correlation},
          {"n_frames_compared", n_frames_compared}};
}

F0Report compare_f0(std::span<const double> a, std::span<const double> b, const std::vector<bool>& include) {
  require(a.size() == b.size(), ErrorKind::kValidation, "compare_f0: tracks differ in length");
  require(include.empty() || include.size() == a.size(), ErrorKind::kValidation, "compare_f0: mask length mismatch");
  std::vector<double> la, lb;
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] > 0.0 && b[i] > 0.0) || (!include.empty() && !include[i])) continue;
    const double d = cents(b[i], a[i]);
    se += d * d;
    ae += std::abs(d);
    la.push_back(std::log2(a[i]));
    lb.push_back(std::log2(b[i]));
  }
  require(!la.empty(), ErrorKind::kInsufficientOverlap, "compare_f0: no mutually voiced frames");
  const double n = static_cast<double>(la.size());
  F0Report r;
  r.n_frames_compared = la.size();
  r.rmse_cents = std::sqrt(se / n);
  r.mae_cents = ae / n;
  const double ma = std::accumulate(la.begin(), la.end(), 0.0) / n, mb = std::accumulate(lb.begin(), lb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) {
    sab += (la[i] - ma) * (lb[i] - mb);
    saa += (la[i] - ma) * (la[i] - ma);
    sbb += (lb[i] - mb) * (lb[i] - mb);
  }
  constexpr double kFlat = 1e-18;
  if (saa < kFlat && sbb < kFlat)
    r.correlation = 1.0;
  else if (saa < kFlat || sbb < kFlat)
    r.correlation = 0.0;
  else
    r.correlation = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  return r;
}

std::string format_f0_table(const F0Report& r, const std::string& column) {
  std::ostringstream os;
  os << std::left << std::setw(18) << "Metric" << std::right << std::setw(12) << column << '\n';
  os << std::fixed;
  os << std::left << std::setw(18) << kF0RowNames[0] << std::right << std::setw(12) << std::setprecision(2)
     << r.rmse_cents << '\n';
  os << std::left << std::setw(18) << kF0RowNames[1] << std::right << std::setw(12) << std::setprecision(2)
     << r.mae_cents << '\n';
  os << std::left << std::setw(18) << kF0RowNames[2] << std::right << std::setw(12) << std::setprecision(4)
     << r.correlation << '\n';
  return os.str();
}

// ---------------------------------------------------------------- texture swap

namespace {

flow::FlowSong excerpt(const flow::FlowSong& s, std::size_t frames) {
  if (frames == 0 || frames >= s.labels.size()) return s;
  const std::size_t r = s.tokens.size() / s.labels.size();
  flow::FlowSong e = s;
  e.z = Matrix(frames, s.z.cols());
  std::copy_n(s.z.data(), frames * s.z.cols(), e.z.data());
  e.texture = Matrix(frames, s.texture.cols());
  std::copy_n(s.texture.data(), frames * s.texture.cols(), e.texture.data());
  e.tokens.resize(frames * r);
  e.labels.resize(frames);
  e.segment_of_frame.resize(frames);
  return e;
}

}  // namespace

Generation generate_audio(const GenerationModels& m, const flow::FlowSong& source, const flow::SampleConfig& sample,
                          const std::optional<codec::TextureLatent>& texture, std::size_t max_latent_frames) {
  require(m.flow && m.latent_norm && m.decoder && m.feature_norm && m.vocoder, ErrorKind::kValidation,
          "generate_audio: incomplete model set");
  Generation g;
  g.latent = flow::generate(*m.flow, excerpt(source, max_latent_frames), sample, texture);
  const Matrix features = codec::decode_features(*m.decoder, m.latent_norm->invert(g.latent));
  g.waveform = codec::render_features(*m.vocoder, *m.feature_norm, features);
  const auto& fc = m.decoder->config().features;
  g.f0 = f0_estimate(g.waveform, fc.frame_rate, fc.sample_rate);
  g.f0.resize(features.rows(), 0.0);
  return g;
}

nlohmann::json TextureSwapReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json j = e.report.to_json();
    j["sample"] = e.sample;
    j["reference"] = e.reference;
    j["source_id"] = e.source_id;
    j["reference_id"] = e.reference_id;
    rows.push_back(std::move(j));
  }
  return {{"seed", seed},
          {"n_samples", n_samples},
          {"n_references", n_references},
          {"comparisons", entries.size()},
          {"excluded_chorus_frames", excluded_chorus_frames},
          {"aggregate", aggregate.to_json()},
          {"table", table()},
          {"entries", std::move(rows)}};
}

nlohmann::json TextureSwapReport::table() const {
  const nlohmann::json agg = aggregate.to_json();
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& name : kF0RowNames) rows.push_back({{"metric", name}, {"value", agg.at(name)}});
  for (const auto& name : kExternalMetricNames) {
    const auto it = external.find(name);
    rows.push_back({{"metric", name}, {"value", it == external.end() ? nlohmann::json() : nlohmann::json(it->second)}});
  }
  return rows;
}

std::string TextureSwapReport::format() const {
  std::ostringstream os;
  os << format_f0_table(aggregate) << std::fixed << std::setprecision(4);
  for (const auto& name : kExternalMetricNames) {
    os << std::left << std::setw(18) << name << std::right << std::setw(12);
    const auto it = external.find(name);
    if (it == external.end()) os << "n/a";
    else os << it->second;
    os << '\n';
  }
  return os.str();
}

TextureSwapReport texture_swap_protocol(const GenerationModels& models, std::span<const flow::FlowSong> sources,
                                        std::span<const ReferenceClip> references, const TextureSwapConfig& config) {
  require(models.texture_encoder != nullptr, ErrorKind::kValidation, "texture swap: no texture encoder");
  require(config.n_samples == 0 || !sources.empty(), ErrorKind::kProtocol, "texture swap: no source songs");
  require(config.n_references == 0 || !references.empty(), ErrorKind::kProtocol, "texture swap: no reference clips");
  TextureSwapReport report;
  report.seed = config.seed;
  report.n_samples = config.n_samples;
  report.n_references = config.n_references;

  std::vector<codec::TextureLatent> textures;
  for (std::size_t j = 0; j < config.n_references; ++j)
    textures.push_back(codec::extract_texture(*models.texture_encoder, references[j % references.size()].features));

  const std::size_t factor = models.decoder ? models.decoder->config().factor : 1;
  for (std::size_t i = 0; i < config.n_samples; ++i) {
    const flow::FlowSong& src = sources[i % sources.size()];
    flow::SampleConfig sc;
    sc.n_steps = config.n_steps;
    sc.cfg_scale = config.cfg_scale;
    sc.seed = derive_seed(config.seed, i);
    Generation base;
    try {
      base = generate_audio(models, src, sc, std::nullopt, config.max_latent_frames);
    } catch (const Error& e) {
      fail(e.kind(), "texture swap sample " + std::to_string(i) + " baseline: " + e.what());
    }
    // Chorus frames carry several voices; only solo-labelled frames are compared.
    std::vector<bool> solo(base.f0.size());
    for (std::size_t f = 0; f < solo.size(); ++f) {
      solo[f] = src.labels[std::min(f / factor, src.labels.size() - 1)] != corpus::Label::kMultiChorus;
      if (!solo[f]) ++report.excluded_chorus_frames;
    }
    for (std::size_t j = 0; j < config.n_references; ++j) {
      Generation tex;
      try {
        tex = generate_audio(models, src, sc, textures[j], config.max_latent_frames);
      } catch (const Error& e) {
        fail(e.kind(), "texture swap sample " + std::to_string(i) + " reference " + std::to_string(j) + ": " + e.what());
      }
      TextureSwapEntry entry{i, j, src.song_id, references[j % references.size()].id,
                             compare_f0(base.f0, tex.f0, solo)};
      report.entries.push_back(std::move(entry));
    }
  }
  if (!report.entries.empty()) {
    const double n = static_cast<double>(report.entries.size());
    for (const auto& e : report.entries) {
      report.aggregate.rmse_cents += e.report.rmse_cents / n;
      report.aggregate.mae_cents += e.report.mae_cents / n;
      report.aggregate.correlation += e.report.correlation / n;
      report.aggregate.n_frames_compared += e.report.n_frames_compared;
    }
  }
  return report;
}

// ---------------------------------------------------------------- similarity statistics

namespace {

struct SliceGeometry {
  std::size_t len = 0, hop = 0;
};

SliceGeometry slice_geometry(const SimilarityConfig& c, int sample_rate) {
  require(c.slice_s > 0.0 && c.overlap_s >= 0.0 && c.overlap_s < c.slice_s, ErrorKind::kConfig,
          "similarity: need 0 <= overlap < slice length");
  const auto sr = static_cast<double>(sample_rate);
  return {static_cast<std::size_t>(std::llround(c.slice_s * sr)),
          static_cast<std::size_t>(std::llround((c.slice_s - c.overlap_s) * sr))};
}

bool solo_verse(const corpus::Segment& s) { return s.label == corpus::Label::kVerse && s.active_singers.size() == 1; }

std::pair<std::size_t, std::size_t> segment_samples(const corpus::Segment& s, int sample_rate) {
  const auto sr = static_cast<double>(sample_rate);
  return {static_cast<std::size_t>(std::llround(s.start * sr)), static_cast<std::size_t>(std::llround(s.end * sr))};
}

std::size_t slices_in(std::size_t begin, std::size_t end, const SliceGeometry& g) {
  if (end < begin + g.len) return 0;
  return (end - begin - g.len) / g.hop + 1;
}

SimilarityStats summarize(std::vector<double> v, const std::vector<double>& edges) {
  SimilarityStats s;
  s.n_pairs = v.size();
  s.histogram.assign(edges.size() - 1, 0);
  if (v.empty()) return s;
  const double n = static_cast<double>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double var = 0.0;
  for (double x : v) var += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(var / n);
  const double width = (edges.back() - edges.front()) / static_cast<double>(s.histogram.size());
  for (double x : v) {
    const auto b = static_cast<std::size_t>(std::clamp((x - edges.front()) / width, 0.0, static_cast<double>(s.histogram.size() - 1)));
    ++s.histogram[b];
  }
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  s.median = v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
  return s;
}

nlohmann::json stats_json(const SimilarityStats& s) {
  return {{"mean", s.mean}, {"median", s.median}, {"std", s.std}, {"n_pairs", s.n_pairs}, {"histogram", s.histogram}};
}

}  // namespace

std::vector<SliceRef> similarity_slices(std::span<const corpus::RenderedSong> corpus, const SimilarityConfig& config) {
  std::vector<SliceRef> out;
  for (std::size_t si = 0; si < corpus.size(); ++si) {
    const auto& m = corpus[si].manifest;
    const SliceGeometry g = slice_geometry(config, m.sample_rate);
    for (std::size_t k = 0; k < m.segments.size(); ++k) {
      const auto& seg = m.segments[k];
      if (!solo_verse(seg)) continue;
      const auto [b, e] = segment_samples(seg, m.sample_rate);
      const std::string profile = m.song_id + ":" + std::to_string(seg.active_singers.front());
      const std::size_t n = slices_in(b, std::min(e, corpus[si].waveform.size()), g);
      for (std::size_t j = 0; j < n; ++j) out.push_back({si, k, b + j * g.hop, profile});
    }
  }
  return out;
}

PairCounts similarity_pair_counts(std::span<const corpus::RenderedSong> corpus, const SimilarityConfig& config) {
  PairCounts c;
  std::size_t total = 0, same_song = 0;
  for (const auto& song : corpus) {
    const auto& m = song.manifest;
    const SliceGeometry g = slice_geometry(config, m.sample_rate);
    std::size_t per_song = 0;
    for (const auto& seg : m.segments) {
      if (!solo_verse(seg)) continue;
      const auto [b, e] = segment_samples(seg, m.sample_rate);
      const std::size_t n = slices_in(b, std::min(e, song.waveform.size()), g);
      c.intra += n * (n - 1) / 2;
      per_song += n;
    }
    total += per_song;
    same_song += per_song * per_song;
  }
  // Profiles are scoped to their song, so every pair of slices from different songs qualifies.
  c.cross = (total * total - same_song) / 2;
  return c;
}

nlohmann::json SimilarityReport::to_json() const {
  return {{"intra_verse", stats_json(intra)},
          {"cross_singer", stats_json(cross)},
          {"histogram_edges", histogram_edges},
          {"margin", intra.mean - cross.mean},
          {"full_scale_reference",
           {{"intra_verse", {{"mean", 0.5355}, {"median", 0.5526}, {"std", 0.1973}}},
            {"cross_singer", {{"mean", 0.2835}, {"median", 0.2778}, {"std", 0.1515}}}}}};
}

SimilarityReport similarity_distributions(std::span<const corpus::RenderedSong> corpus, const Embedder& embedder,
                                          const SimilarityConfig& config) {
  require(config.histogram_bins >= 1, ErrorKind::kConfig, "similarity: need at least one histogram bin");
  const std::vector<SliceRef> slices = similarity_slices(corpus, config);
  std::set<std::string> profiles;
  for (const auto& s : slices) profiles.insert(s.profile);
  require(profiles.size() >= 2, ErrorKind::kProtocol, "similarity: need slices from at least two singer profiles");

  std::vector<std::vector<double>> emb(slices.size());
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const auto& s = slices[i];
    const auto& wave = corpus[s.song].waveform;
    const SliceGeometry g = slice_geometry(config, corpus[s.song].manifest.sample_rate);
    emb[i] = embedder(std::span<const double>(wave).subspan(s.start_sample, g.len));
  }
  std::vector<double> intra, cross;
  for (std::size_t i = 0; i < slices.size(); ++i)
    for (std::size_t j = i + 1; j < slices.size(); ++j) {
      const bool same_section = slices[i].song == slices[j].song && slices[i].segment == slices[j].segment;
      const bool other_singer = slices[i].song != slices[j].song && slices[i].profile != slices[j].profile;
      if (same_section)
        intra.push_back(corpus::cosine(emb[i], emb[j]));
      else if (other_singer)
        cross.push_back(corpus::cosine(emb[i], emb[j]));
    }
  SimilarityReport r;
  for (std::size_t b = 0; b <= config.histogram_bins; ++b)
    r.histogram_edges.push_back(-1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(config.histogram_bins));
  r.intra = summarize(std::move(intra), r.histogram_edges);
  r.cross = summarize(std::move(cross), r.histogram_edges);
  require(r.intra.n_pairs > 0 && r.cross.n_pairs > 0, ErrorKind::kProtocol, "similarity: a comparison group is empty");
  return r;
}

// ---------------------------------------------------------------- attention

nlohmann::json AttentionReport::to_json() const {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : segments) {
    nlohmann::json j = {{"segment", s.segment}, {"label", corpus::to_string(s.label)}, {"head_sum", s.head_sum}};
    if (!s.singer_matrix.empty()) {
      nlohmann::json rows = nlohmann::json::array();
      for (std::size_t i = 0; i < s.singer_matrix.rows(); ++i)
        rows.push_back(std::vector<double>(s.singer_matrix.row(i).begin(), s.singer_matrix.row(i).end()));
      j["singer_matrix"] = std::move(rows);
    }
    segs.push_back(std::move(j));
  }
  return {{"song_id", song_id}, {"heads", heads}, {"segments", std::move(segs)}};
}

AttentionReport attention_report(const prompt::Fuser& fuser, const corpus::SongManifest& manifest,
                                 const prompt::SongSchedule& schedule) {
  require(schedule.assignments.size() == manifest.segments.size(), ErrorKind::kValidation,
          "attention report: schedule does not match the manifest");
  AttentionReport r;
  r.song_id = manifest.song_id;
  r.heads = fuser.config().heads;
  for (std::size_t k = 0; k < manifest.segments.size(); ++k) {
    const auto& a = schedule.assignments[k];
    SegmentAttention s;
    s.segment = k;
    s.label = a.updated_label;
    s.head_sum.assign(schedule.global.size(), 0.0);
    const Matrix set = prompt::singer_set(schedule, k);
    const Matrix w = fuser.attention_weights(set);
    for (std::size_t h = 0; h < w.rows(); ++h)
      for (std::size_t i = 0; i < a.assigned_singers.size(); ++i) s.head_sum[a.assigned_singers[i]] += w(h, i);
    if (a.assigned_singers.size() > 1) s.singer_matrix = fuser.singer_attention(set);
    r.segments.push_back(std::move(s));
  }
  return r;
}

std::vector<fs::path> write_attention_report(const fs::path& dir, const AttentionReport& report) {
  fs::create_directories(dir);
  std::vector<fs::path> out;
  const std::size_t k = report.segments.empty() ? 0 : report.segments.front().head_sum.size();
  Matrix table(report.segments.size(), k);
  for (std::size_t i = 0; i < report.segments.size(); ++i)
    std::copy(report.segments[i].head_sum.begin(), report.segments[i].head_sum.end(), table.row(i).begin());
  const fs::path weights = dir / (report.song_id + "_weights.png");
  if (!table.empty()) {
    write_heatmap(weights, table, 0.0, static_cast<double>(report.heads));
    out.push_back(weights);
    out.push_back(fs::path(weights).replace_extension(".csv"));
  }
  for (const auto& s : report.segments) {
    if (s.singer_matrix.empty()) continue;
    const fs::path p = dir / (report.song_id + "_segment" + std::to_string(s.segment) + "_singers.png");
    write_heatmap(p, s.singer_matrix, 0.0, 1.0);
    out.push_back(p);
    out.push_back(fs::path(p).replace_extension(".csv"));
  }
  const fs::path json = dir / (report.song_id + "_attention.json");
  io::write_text(json, report_envelope("attention", report.to_json()).dump(2));
  out.push_back(json);
  return out;
}

// ---------------------------------------------------------------- plots

namespace {

void write_csv(const fs::path& path, const Matrix& m) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << std::setprecision(10);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << m(i, j);
    os << '\n';
  }
}

void write_png(const fs::path& path, std::size_t width, std::size_t height, const std::vector<std::uint8_t>& gray) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  require(fp != nullptr, ErrorKind::kIo, "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail(ErrorKind::kIo, "libpng failed on " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) png_write_row(png, const_cast<std::uint8_t*>(gray.data() + y * width));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace

void write_heatmap(const fs::path& png, const Matrix& m, double lo, double hi) {
  require(!m.empty(), ErrorKind::kValidation, "heatmap: empty matrix");
  if (png.has_parent_path()) fs::create_directories(png.parent_path());
  if (lo == hi) {
    lo = *std::min_element(m.data(), m.data() + m.size());
    hi = *std::max_element(m.data(), m.data() + m.size());
    if (lo == hi) hi = lo + 1.0;
  }
  // Small matrices are blown up so each cell stays visible.
  const std::size_t cell = std::max<std::size_t>(1, 256 / std::max(m.rows(), m.cols()));
  const std::size_t w = m.rows() * cell, h = m.cols() * cell;
  std::vector<std::uint8_t> gray(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double v = (m(x / cell, (h - 1 - y) / cell) - lo) / (hi - lo);
      gray[y * w + x] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    }
  write_png(png, w, h, gray);
  write_csv(fs::path(png).replace_extension(".csv"), m);
}

fs::path emit_pitch_salience(std::span<const double> waveform, const fs::path& png, const dsp::SalienceConfig& config) {
  require(!waveform.empty(), ErrorKind::kValidation, "salience plot: empty waveform");
  write_heatmap(png, dsp::pitch_salience(waveform, config), 0.0, 1.0);
  return png;
}

fs::path emit_mel_spectrogram(std::span<const double> waveform, const fs::path& png, const dsp::MelConfig& config) {
  require(!waveform.empty(), ErrorKind::kValidation, "mel plot: empty waveform");
  const Matrix mel = dsp::mel_spectrogram(waveform, config);
  const double hi = *std::max_element(mel.data(), mel.data() + mel.size());
  write_heatmap(png, mel, hi - 8.0, hi);  // 80 dB range
  return png;
}

// ---------------------------------------------------------------- distribution statistics

namespace {

double mean_distance(const Samples& a, const Samples& b, bool distinct_pairs) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = distinct_pairs ? i + 1 : 0; j < b.size(); ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < a[i].size(); ++k) d += (a[i][k] - b[j][k]) * (a[i][k] - b[j][k]);
      sum += std::sqrt(d);
      ++n;
    }
  return sum / static_cast<double>(n);
}

}  // namespace

double energy_distance(const Samples& x, const Samples& y) {
  require(x.size() >= 2 && y.size() >= 2, ErrorKind::kValidation, "energy distance: need two samples per side");
  const std::size_t d = x.front().size();
  for (const auto* s : {&x, &y})
    for (const auto& v : *s) require(v.size() == d, ErrorKind::kValidation, "energy distance: dimension mismatch");
  return 2.0 * mean_distance(x, y, false) - mean_distance(x, x, true) - mean_distance(y, y, true);
}

LinearProbe LinearProbe::fit(const Samples& x, std::span<const double> y, double ridge) {
  require(!x.empty() && x.size() == y.size(), ErrorKind::kValidation, "probe: need one target per sample");
  const auto n = static_cast<Eigen::Index>(x.size()), d = static_cast<Eigen::Index>(x.front().size());
  Eigen::MatrixXd a(n, d + 1);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    require(static_cast<Eigen::Index>(x[i].size()) == d, ErrorKind::kValidation, "probe: dimension mismatch");
    for (Eigen::Index k = 0; k < d; ++k) a(i, k) = x[i][k];
    a(i, d) = 1.0;
    b(i) = y[i];
  }
  Eigen::MatrixXd normal = a.transpose() * a;
  normal.diagonal().head(d).array() += ridge * static_cast<double>(n);
  const Eigen::VectorXd w = normal.ldlt().solve(a.transpose() * b);
  LinearProbe p;
  p.weights_.assign(w.data(), w.data() + d);
  p.bias_ = w(d);
  return p;
}

double LinearProbe::predict(std::span<const double> x) const {
  require(x.size() == weights_.size(), ErrorKind::kValidation, "probe: dimension mismatch");
  return std::inner_product(x.begin(), x.end(), weights_.begin(), bias_);
}

double LinearProbe::rmse(const Samples& x, std::span<const double> y) const {
  require(!x.empty() && x.size() == y.size(), ErrorKind::kValidation, "probe: need one target per sample");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += std::pow(predict(x[i]) - y[i], 2);
  return std::sqrt(se / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------- external metrics

void MetricRegistry::add(std::unique_ptr<Metric> metric) {
  require(metric != nullptr, ErrorKind::kValidation, "metric registry: null metric");
  require(!contains(metric->name()), ErrorKind::kValidation, "metric registry: duplicate " + metric->name());
  metrics_.push_back(std::move(metric));
}

bool MetricRegistry::contains(const std::string& name) const {
  return std::any_of(metrics_.begin(), metrics_.end(), [&](const auto& m) { return m->name() == name; });
}

std::vector<std::string> MetricRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& m : metrics_) out.push_back(m->name());
  return out;
}

const Metric& MetricRegistry::get(const std::string& name) const {
  for (const auto& m : metrics_)
    if (m->name() == name) return *m;
  fail(ErrorKind::kEvaluation, "no implementation registered for metric " + name);
}

nlohmann::json report_envelope(const std::string& kind, nlohmann::json body) {
  return {{"schema_version", kReportSchemaVersion}, {"kind", kind}, {"report", std::move(body)}};
}

}  // namespace ensemble::eval

#include "ensemble/corpus/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

#include <boost/random/gamma_distribution.hpp>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"
#include "ensemble/core/rng.hpp"
#include "ensemble/dsp/dsp.hpp"
#include "ensemble/kernels/kernels.hpp"

namespace ensemble::corpus {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Integer-ish quantities derived from floating time stamps; the tolerance absorbs round-off from
// quantized boundaries such as 0.08 * k.
std::size_t ceil_count(double seconds, double rate) {
  return static_cast<std::size_t>(std::ceil(seconds * rate - 1e-6));
}
std::size_t round_count(double seconds, double rate) {
  return static_cast<std::size_t>(std::llround(seconds * rate));
}

template <typename Config, typename F>
void visit_fields(Config& c, F&& f) {
  f("sample_rate", c.sample_rate);
  f("frame_rate", c.frame_rate);
  f("harmonics", c.harmonics);
  f("singers_min", c.singers_min);
  f("singers_max", c.singers_max);
  f("segments_min", c.segments_min);
  f("segments_max", c.segments_max);
  f("duration_min", c.duration_min);
  f("duration_max", c.duration_max);
  f("duration_quantum", c.duration_quantum);
  f("dirichlet_alpha", c.dirichlet_alpha);
  f("fundamental_floor", c.fundamental_floor);
  f("max_profile_cosine", c.max_profile_cosine);
  f("max_pitch_ambiguity", c.max_pitch_ambiguity);
  f("p_multi_chorus", c.p_multi_chorus);
  f("p_multi_bridge", c.p_multi_bridge);
  f("lyric_vocab", c.lyric_vocab);
  f("vibrato_rate_min", c.vibrato_rate_min);
  f("vibrato_rate_max", c.vibrato_rate_max);
  f("vibrato_depth_min", c.vibrato_depth_min);
  f("vibrato_depth_max", c.vibrato_depth_max);
  f("detune_cents", c.detune_cents);
  f("t60_min", c.t60_min);
  f("t60_max", c.t60_max);
  f("wet_min", c.wet_min);
  f("wet_max", c.wet_max);
  f("reverb", c.reverb);
  f("consonants", c.consonants);
  f("normalize", c.normalize);
  f("target_rms", c.target_rms);
}

}  // namespace

std::string_view to_string(Label label) {
  switch (label) {
    case Label::kVerse: return "verse";
    case Label::kChorus: return "chorus";
    case Label::kBridge: return "bridge";
    case Label::kMultiChorus: return "multi_chorus";
  }
  return "verse";
}

Label label_from_string(std::string_view name) {
  if (name == "verse") return Label::kVerse;
  if (name == "chorus") return Label::kChorus;
  if (name == "bridge") return Label::kBridge;
  if (name == "multi_chorus") return Label::kMultiChorus;
  fail(ErrorKind::kValidation, "unknown structure label '" + std::string(name) + "'");
}

std::size_t SongManifest::num_samples() const { return ceil_count(duration(), sample_rate); }
std::size_t SongManifest::num_frames() const { return ceil_count(duration(), frame_rate); }

const SingerProfile& SongManifest::singer(int id) const {
  for (const auto& s : singer_roster)
    if (s.id == id) return s;
  fail(ErrorKind::kValidation, "singer id " + std::to_string(id) + " not in roster of " + song_id);
}

void CorpusConfig::validate() const {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorKind::kConfig, "corpus: " + what); };
  check(sample_rate >= 4000, "sample_rate must be >= 4000");
  check(frame_rate > 0.0 && frame_rate <= sample_rate, "frame_rate out of range");
  check(harmonics >= 1, "harmonics must be >= 1");
  check(singers_min >= 1, "singer count K must be >= 1");
  // Four or more mutually distinct sparse profiles over 8 harmonics are rarely drawable.
  check(singers_max >= singers_min && singers_max <= 3, "singers_max must be in [singers_min, 3]");
  check(segments_min >= 1 && segments_max >= segments_min, "empty segment grammar");
  check(segments_max >= singers_max + (singers_max > 1 ? 1 : 0),
        "segments_max too small to give every singer a verse and a shared chorus");
  check(duration_min > 0.0 && duration_max >= duration_min, "duration bounds");
  check(duration_quantum > 0.0 && duration_quantum <= duration_min, "duration_quantum");
  check(dirichlet_alpha > 0.0, "dirichlet_alpha must be positive");
  check(fundamental_floor >= 0.0 && fundamental_floor < 1.0, "fundamental_floor in [0,1)");
  check(max_profile_cosine > 0.0 && max_profile_cosine <= 1.0, "max_profile_cosine in (0,1]");
  check(max_pitch_ambiguity > 0.0 && max_pitch_ambiguity <= 1.0, "max_pitch_ambiguity in (0,1]");
  check(p_multi_chorus >= 0.0 && p_multi_chorus <= 1.0 && p_multi_bridge >= 0.0 && p_multi_bridge <= 1.0,
        "probabilities in [0,1]");
  check(lyric_vocab >= 2, "lyric_vocab must be >= 2");
  check(vibrato_depth_max < 100.0, "vibrato_depth_max must be < 100 cents");
  check(detune_cents >= 0.0 && detune_cents <= 15.0, "detune_cents must be in [0, 15]");
  check(t60_min > 0.0 && t60_max >= t60_min && wet_max >= wet_min && wet_min >= 0.0, "reverb ranges");
  check(target_rms > 0.0, "target_rms must be positive");
}

nlohmann::json CorpusConfig::to_json() const {
  nlohmann::json j;
  CorpusConfig copy = *this;
  visit_fields(copy, [&](const char* name, auto& v) { j[name] = v; });
  return j;
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  std::set<std::string> known;
  visit_fields(c, [&](const char* name, auto& v) {
    known.insert(name);
    if (j.contains(name)) v = j.at(name).get<std::remove_reference_t<decltype(v)>>();
  });
  for (const auto& [k, _] : j.items())
    require(known.contains(k), ErrorKind::kConfig, "corpus: unknown key '" + k + "'");
  return c;
}

RenderOptions RenderOptions::from(const CorpusConfig& cfg) {
  RenderOptions o;
  o.detune_cents = cfg.detune_cents;
  o.reverb = cfg.reverb;
  o.consonants = cfg.consonants;
  o.t60_min = cfg.t60_min;
  o.t60_max = cfg.t60_max;
  o.wet_min = cfg.wet_min;
  o.wet_max = cfg.wet_max;
  return o;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::kValidation, "cosine: dimension mismatch");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------- manifest generation

namespace {

// Normalized autocorrelation of the profile's periodic waveform at a lag of `tau` periods.
double profile_autocorrelation(const std::vector<double>& p, double tau) {
  double total = 0.0, r = 0.0;
  for (std::size_t h = 0; h < p.size(); ++h) {
    total += p[h] * p[h];
    r += p[h] * p[h] * std::cos(kTwoPi * static_cast<double>(h + 1) * tau);
  }
  return r / total;
}

// A profile is pitch-ambiguous when its waveform nearly repeats before one full period, e.g. when
// only even harmonics carry energy. Sub-multiples of the period get the stricter bound because an
// autocorrelation tracker would report a multiple of the fundamental there.
bool pitch_ambiguous(const std::vector<double>& p, double bound) {
  for (int i = 1; i < 200; ++i)
    if (profile_autocorrelation(p, 0.04 + 0.92 * i / 200.0) >= bound) return true;
  for (double tau : {1.0 / 2.0, 1.0 / 3.0, 2.0 / 3.0, 1.0 / 4.0, 3.0 / 4.0})
    if (profile_autocorrelation(p, tau) >= 2.0 * bound / 3.0) return true;
  return false;
}

std::vector<double> draw_profile(Rng& rng, const CorpusConfig& cfg) {
  boost::random::gamma_distribution<double> gamma(cfg.dirichlet_alpha, 1.0);
  std::vector<double> g(cfg.harmonics), p(cfg.harmonics);
  for (int attempt = 0;; ++attempt) {
    require(attempt < 10000, ErrorKind::kConfig, "cannot draw a harmonic profile with an unambiguous pitch");
    double total = 0.0;
    for (double& v : g) {
      v = gamma(rng);
      total += v;
    }
    if (total <= 0.0) continue;
    for (std::size_t h = 0; h < p.size(); ++h) p[h] = (1.0 - cfg.fundamental_floor) * g[h] / total;
    p[0] += cfg.fundamental_floor;
    if (cfg.harmonics == 1 || !pitch_ambiguous(p, cfg.max_pitch_ambiguity)) return p;
  }
}

std::vector<Label> draw_labels(Rng& rng, int n_segments) {
  // Rows: from verse, chorus, bridge. Columns: to verse, chorus, bridge.
  static constexpr std::array<std::array<double, 3>, 3> kTransitions{{
      {0.25, 0.60, 0.15},
      {0.60, 0.15, 0.25},
      {0.30, 0.70, 0.00},
  }};
  std::vector<Label> labels{Label::kVerse};
  while (static_cast<int>(labels.size()) < n_segments) {
    const auto& row = kTransitions[static_cast<std::size_t>(labels.back())];
    double u = uniform(rng), acc = 0.0;
    std::size_t next = 0;
    for (; next < 2; ++next) {
      acc += row[next];
      if (u < acc) break;
    }
    labels.push_back(static_cast<Label>(next));
  }
  return labels;
}

struct Melody {
  std::vector<double> f0;
  std::vector<Note> notes;
};

Melody draw_melody(Rng& rng, std::size_t frames, double frame_rate, double t0, const std::vector<double>& grid,
                   const SingerProfile& lead, int vocab) {
  Melody m;
  m.f0.assign(frames, 0.0);
  auto idx = static_cast<std::int64_t>(uniform_int(rng, 0, static_cast<std::int64_t>(grid.size()) - 1));
  std::size_t pos = 0;
  while (pos < frames) {
    const auto len = static_cast<std::size_t>(uniform_int(rng, 10, 30));
    const std::size_t end = std::min(frames, pos + len);
    const int token = static_cast<int>(uniform_int(rng, 1, vocab - 1));
    m.notes.push_back({pos, end, token});
    for (std::size_t t = pos; t < end; ++t) {
      const double time = t0 + (static_cast<double>(t) + 0.5) / frame_rate;
      const double vib = lead.vibrato_depth * std::sin(kTwoPi * lead.vibrato_rate * time);
      m.f0[t] = grid[static_cast<std::size_t>(idx)] * std::pow(2.0, vib / 1200.0);
    }
    pos = end;
    if (pos < frames && bernoulli(rng, 0.15)) pos = std::min(frames, pos + static_cast<std::size_t>(uniform_int(rng, 4, 10)));
    idx = std::clamp<std::int64_t>(idx + uniform_int(rng, -2, 2), 0, static_cast<std::int64_t>(grid.size()) - 1);
  }
  return m;
}

}  // namespace

SongManifest make_manifest(std::uint64_t seed, std::size_t index, const CorpusConfig& cfg) {
  cfg.validate();
  Rng rng = make_rng(seed, index);
  SongManifest m;
  std::ostringstream id;
  id << "song_" << std::setw(5) << std::setfill('0') << index;
  m.song_id = id.str();
  m.sample_rate = cfg.sample_rate;
  m.frame_rate = cfg.frame_rate;
  m.render_seed = derive_seed(derive_seed(seed, index), 0x72656e646572ULL);

  const int k = static_cast<int>(uniform_int(rng, cfg.singers_min, cfg.singers_max));
  for (int attempt = 0; static_cast<int>(m.singer_roster.size()) < k; ++attempt) {
    require(attempt < 1000, ErrorKind::kConfig, "cannot draw mutually distinct singer profiles");
    m.singer_roster.clear();
    for (int s = 0; s < k; ++s) {
      SingerProfile p;
      p.id = static_cast<int>(index) * 16 + s;
      bool found = false;
      for (int tries = 0; tries < 200 && !found; ++tries) {
        p.harmonic_profile = draw_profile(rng, cfg);
        found = true;
        for (const auto& other : m.singer_roster)
          found = found && cosine(p.harmonic_profile, other.harmonic_profile) < cfg.max_profile_cosine;
      }
      if (!found) break;
      p.f_lo = uniform(rng, 100.0, 150.0);
      p.f_hi = uniform(rng, 280.0, 400.0);
      p.vibrato_rate = uniform(rng, cfg.vibrato_rate_min, cfg.vibrato_rate_max);
      p.vibrato_depth = uniform(rng, cfg.vibrato_depth_min, cfg.vibrato_depth_max);
      m.singer_roster.push_back(std::move(p));
    }
  }

  // Structure: Markov chain over labels, redrawn until every singer can get a verse and a chorus exists.
  std::vector<Label> labels;
  for (int attempt = 0;; ++attempt) {
    require(attempt < 1000, ErrorKind::kConfig, "segment grammar cannot satisfy the singer constraints");
    labels = draw_labels(rng, static_cast<int>(uniform_int(rng, cfg.segments_min, cfg.segments_max)));
    const auto verses = std::count(labels.begin(), labels.end(), Label::kVerse);
    const auto choruses = std::count(labels.begin(), labels.end(), Label::kChorus);
    if (verses >= k && (k == 1 || choruses >= 1)) break;
  }

  std::vector<int> order(static_cast<std::size_t>(k));
  for (int s = 0; s < k; ++s) order[static_cast<std::size_t>(s)] = s;
  for (int s = k - 1; s > 0; --s) std::swap(order[static_cast<std::size_t>(s)], order[static_cast<std::size_t>(uniform_int(rng, 0, s))]);

  auto random_subset = [&](int size) {
    std::vector<int> pool(order);
    for (int i = k - 1; i > 0; --i) std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(uniform_int(rng, 0, i))]);
    pool.resize(static_cast<std::size_t>(size));
    return pool;
  };

  const double tonic = 130.81 * std::pow(2.0, static_cast<double>(uniform_int(rng, 0, 11)) / 12.0);
  static constexpr std::array<int, 7> kMajor{0, 2, 4, 5, 7, 9, 11};

  std::size_t verse_count = 0;
  bool has_multi = false;  // a shared chorus exists
  std::int64_t quanta_done = 0;
  for (Label label : labels) {
    Segment seg;
    seg.label = label;
    const double q = cfg.duration_quantum;
    const auto lo = static_cast<std::int64_t>(std::ceil(cfg.duration_min / q - 1e-9));
    const auto hi = static_cast<std::int64_t>(std::floor(cfg.duration_max / q + 1e-9));
    const std::int64_t quanta = uniform_int(rng, lo, hi);
    seg.start = static_cast<double>(quanta_done) * q;
    quanta_done += quanta;
    seg.end = static_cast<double>(quanta_done) * q;

    std::vector<int> who;
    if (label == Label::kVerse) {
      who = {verse_count < static_cast<std::size_t>(k) ? order[verse_count] : static_cast<int>(uniform_int(rng, 0, k - 1))};
      ++verse_count;
    } else {
      const double p_multi = label == Label::kChorus ? cfg.p_multi_chorus : cfg.p_multi_bridge;
      if (k > 1 && bernoulli(rng, p_multi)) {
        who = random_subset(static_cast<int>(uniform_int(rng, 2, k)));
        has_multi = has_multi || label == Label::kChorus;
      } else {
        who = {static_cast<int>(uniform_int(rng, 0, k - 1))};
      }
    }
    for (int s : who) seg.active_singers.push_back(m.singer_roster[static_cast<std::size_t>(s)].id);
    m.segments.push_back(std::move(seg));
  }
  if (k > 1 && !has_multi) {
    for (auto& seg : m.segments)
      if (seg.label == Label::kChorus) {
        seg.active_singers.clear();
        for (int s : order) seg.active_singers.push_back(m.singer_roster[static_cast<std::size_t>(s)].id);
        break;
      }
  }

  for (auto& seg : m.segments) {
    const std::size_t f0_frame = round_count(seg.start, cfg.frame_rate);
    const std::size_t frames = round_count(seg.end, cfg.frame_rate) - f0_frame;
    // Diatonic grid inside every active register, leaving headroom for the lead's vibrato.
    double lo = 0.0, hi = 1e9;
    for (int id : seg.active_singers) {
      lo = std::max(lo, m.singer(id).f_lo);
      hi = std::min(hi, m.singer(id).f_hi);
    }
    const SingerProfile& lead = m.singer(seg.active_singers.front());
    const double margin = std::pow(2.0, (lead.vibrato_depth + 1.0) / 1200.0);
    std::vector<double> grid;
    for (int oct = -2; oct <= 3; ++oct)
      for (int deg : kMajor) {
        const double f = tonic * std::pow(2.0, oct + deg / 12.0);
        if (f >= lo * margin && f <= hi / margin) grid.push_back(f);
      }
    require(!grid.empty(), ErrorKind::kConfig, "register intersection too narrow for a melody");
    Melody mel = draw_melody(rng, frames, cfg.frame_rate, seg.start, grid, lead, cfg.lyric_vocab);
    seg.f0_track = std::move(mel.f0);
    seg.notes = std::move(mel.notes);
    for (const auto& n : seg.notes) seg.lyric_tokens.push_back(n.token);
  }
  return m;
}

// ---------------------------------------------------------------- rendering

namespace {

void validate_manifest(const SongManifest& m) {
  require(!m.segments.empty(), ErrorKind::kValidation, "manifest has no segments");
  require(m.sample_rate > 0 && m.frame_rate > 0.0, ErrorKind::kValidation, "manifest rates must be positive");
  double prev_end = 0.0;
  for (std::size_t i = 0; i < m.segments.size(); ++i) {
    const Segment& s = m.segments[i];
    const std::string where = m.song_id + " segment " + std::to_string(i);
    require(s.start < s.end, ErrorKind::kValidation, where + ": start must precede end");
    require(s.start >= prev_end - 1e-9, ErrorKind::kValidation, where + ": overlaps its predecessor");
    prev_end = s.end;
    require(!s.active_singers.empty(), ErrorKind::kValidation, where + ": no active singer");
    const std::size_t frames = round_count(s.end, m.frame_rate) - round_count(s.start, m.frame_rate);
    require(s.f0_track.size() == frames, ErrorKind::kValidation, where + ": f0_track length mismatch");
    for (int id : s.active_singers) {
      const SingerProfile& p = m.singer(id);
      for (double f : s.f0_track)
        require(f == 0.0 || (f >= p.f_lo && f <= p.f_hi), ErrorKind::kValidation,
                where + ": f0 " + std::to_string(f) + " Hz outside register of singer " + std::to_string(id));
    }
  }
}

std::vector<double> note_envelope(std::span<const Note> notes, std::size_t n, double samples_per_frame,
                                  int sample_rate) {
  std::vector<double> env(n, 0.0);
  const double attack = 0.02 * sample_rate, release = 0.03 * sample_rate;
  for (const Note& note : notes) {
    const auto a = static_cast<std::size_t>(std::llround(static_cast<double>(note.onset_frame) * samples_per_frame));
    const auto b = std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(note.offset_frame) * samples_per_frame)));
    for (std::size_t i = a; i < b; ++i) {
      const double from_start = static_cast<double>(i - a), to_end = static_cast<double>(b - i);
      env[i] = std::max(env[i], std::min({1.0, from_start / attack, to_end / release}));
    }
  }
  return env;
}

// Linear convolution of x with h, truncated to x's length.
std::vector<double> fft_convolve(std::span<const double> x, std::span<const double> h) {
  std::size_t n = 1;
  while (n < x.size() + h.size()) n <<= 1;
  dsp::RealFft fft(n);
  std::vector<std::complex<double>> fx(fft.bins()), fh(fft.bins());
  fft.forward(x, fx);
  fft.forward(h, fh);
  for (std::size_t k = 0; k < fx.size(); ++k) fx[k] *= fh[k];
  std::vector<double> y(n);
  fft.inverse(fx, y);
  y.resize(x.size());
  for (double& v : y) v /= static_cast<double>(n);
  return y;
}

void add_consonants(std::vector<double>& seg, std::span<const Note> notes, double samples_per_frame,
                    int sample_rate, Rng& rng) {
  const auto len = static_cast<std::size_t>(0.025 * sample_rate);
  const auto window = dsp::hann(len);
  for (const Note& note : notes) {
    if (note.token <= 0) continue;
    // Band-pass resonator whose centre identifies the token class.
    const double fc = 600.0 + 400.0 * static_cast<double>(note.token % 8);
    const double w0 = kTwoPi * fc / sample_rate, alpha = std::sin(w0) / 4.0;
    const double a0 = 1.0 + alpha, b0 = alpha / a0, b2 = -alpha / a0;
    const double a1 = -2.0 * std::cos(w0) / a0, a2 = (1.0 - alpha) / a0;
    const auto start = static_cast<std::size_t>(std::llround(static_cast<double>(note.onset_frame) * samples_per_frame));
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (std::size_t i = 0; i < len && start + i < seg.size(); ++i) {
      const double x = normal(rng);
      const double y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
      x2 = x1;
      x1 = x;
      y2 = y1;
      y1 = y;
      seg[start + i] += 0.25 * window[i] * y;
    }
  }
}

}  // namespace

std::vector<double> render_voice(const SingerProfile& singer, std::span<const double> f0_track, double frame_rate,
                                 int sample_rate, double detune_cents, std::span<const Note> notes) {
  const double spf = sample_rate / frame_rate;
  const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(f0_track.size()) * spf));
  const std::size_t harmonics = singer.harmonic_profile.size();
  std::vector<double> env = note_envelope(notes, n, spf, sample_rate);

  // Frame f0 with unvoiced frames filled from the nearest voiced neighbour (phase continuity only).
  std::vector<double> filled(f0_track.begin(), f0_track.end());
  double last = 0.0;
  for (double& f : filled) (f > 0.0) ? void(last = f) : void(f = last);
  last = 0.0;
  for (auto it = filled.rbegin(); it != filled.rend(); ++it) (*it > 0.0) ? void(last = *it) : void(*it = last);

  const double ratio = std::pow(2.0, detune_cents / 1200.0);
  std::vector<double> f(n), theta(n);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = (static_cast<double>(i) + 0.5) / spf - 0.5;
    const double fl = std::floor(u);
    const auto a = static_cast<std::size_t>(std::clamp(fl, 0.0, static_cast<double>(filled.size() - 1)));
    const auto b = std::min(a + 1, filled.size() - 1);
    const double w = std::clamp(u - fl, 0.0, 1.0);
    f[i] = ((1.0 - w) * filled[a] + w * filled[b]) * ratio;
    const auto frame = std::min(static_cast<std::size_t>(static_cast<double>(i) / spf), f0_track.size() - 1);
    if (f0_track[frame] <= 0.0) env[i] = 0.0;
    theta[i] = phase;
    phase = std::fmod(phase + kTwoPi * f[i] / sample_rate, kTwoPi * 1024.0);
  }

  std::vector<double> phase0(harmonics);
  for (std::size_t h = 0; h < harmonics; ++h) phase0[h] = 0.7 * static_cast<double>(h);
  std::vector<double> carriers(n * harmonics);
  kernels::harmonic_carriers(theta.data(), f.data(), phase0.data(), n, harmonics, sample_rate / 2.0, carriers.data());

  double norm = 0.0;
  for (double a : singer.harmonic_profile) norm += a * a;
  norm = std::sqrt(norm);
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (env[i] == 0.0) continue;
    double s = 0.0;
    for (std::size_t h = 0; h < harmonics; ++h) s += singer.harmonic_profile[h] / norm * carriers[i * harmonics + h];
    out[i] = 0.3 * env[i] * s;
  }
  return out;
}

RenderedSong render_song(const SongManifest& manifest, std::uint64_t rng_seed, const RenderOptions& options) {
  validate_manifest(manifest);
  Rng rng = make_rng(rng_seed);
  const double t60 = uniform(rng, options.t60_min, options.t60_max);
  const double wet = uniform(rng, options.wet_min, options.wet_max);

  RenderedSong song;
  song.manifest = manifest;
  song.waveform.assign(manifest.num_samples(), 0.0);
  const int sr = manifest.sample_rate;
  const double spf = sr / manifest.frame_rate;

  for (std::size_t m = 0; m < manifest.segments.size(); ++m) {
    const Segment& seg = manifest.segments[m];
    Rng seg_rng = make_rng(rng_seed, m + 1);
    const bool multi = seg.active_singers.size() > 1;
    std::vector<double> mix;
    for (int id : seg.active_singers) {
      const double detune = multi ? uniform(seg_rng, -options.detune_cents, options.detune_cents) : 0.0;
      auto voice = render_voice(manifest.singer(id), seg.f0_track, manifest.frame_rate, sr, detune, seg.notes);
      if (mix.empty()) mix.assign(voice.size(), 0.0);
      for (std::size_t i = 0; i < voice.size(); ++i) mix[i] += voice[i];
    }
    if (options.consonants) add_consonants(mix, seg.notes, spf, sr, seg_rng);
    if (multi && options.reverb) {
      const auto len = static_cast<std::size_t>(t60 * sr);
      std::vector<double> ir(len);
      double energy = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        ir[i] = normal(seg_rng) * std::exp(-6.907755 * static_cast<double>(i) / static_cast<double>(len));
        energy += ir[i] * ir[i];
      }
      for (double& v : ir) v /= std::sqrt(energy);
      const auto tail = fft_convolve(mix, ir);
      for (std::size_t i = 0; i < mix.size(); ++i) mix[i] += wet * tail[i];
    }
    const std::size_t offset = round_count(seg.start, sr);
    for (std::size_t i = 0; i < mix.size() && offset + i < song.waveform.size(); ++i) song.waveform[offset + i] += mix[i];
  }

  song.gt_f0.assign(manifest.num_frames(), 0.0);
  for (const Segment& seg : manifest.segments) {
    const std::size_t f0 = round_count(seg.start, manifest.frame_rate);
    for (std::size_t t = 0; t < seg.f0_track.size() && f0 + t < song.gt_f0.size(); ++t) song.gt_f0[f0 + t] = seg.f0_track[t];
  }
  return song;
}

std::vector<double> loudness_normalize(std::span<const double> waveform, double target_rms) {
  require(!waveform.empty(), ErrorKind::kDegenerateSignal, "loudness_normalize: empty waveform");
  const double r = dsp::rms(waveform);
  require(r > 0.0, ErrorKind::kDegenerateSignal, "loudness_normalize: all-zero waveform");
  std::vector<double> out(waveform.begin(), waveform.end());
  const double g = target_rms / r;
  for (double& v : out) v *= g;
  return out;
}

RenderedSong make_song(std::uint64_t seed, std::size_t index, const CorpusConfig& config) {
  SongManifest m = make_manifest(seed, index, config);
  RenderedSong song = render_song(m, m.render_seed, RenderOptions::from(config));
  if (config.normalize) song.waveform = loudness_normalize(song.waveform, config.target_rms);
  return song;
}

std::vector<RenderedSong> make_corpus(std::uint64_t seed, std::size_t n_songs, const CorpusConfig& config) {
  require(n_songs >= 1, ErrorKind::kConfig, "n_songs must be >= 1");
  config.validate();
  std::vector<RenderedSong> songs(n_songs);
  const long count = static_cast<long>(n_songs);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < count; ++i) songs[static_cast<std::size_t>(i)] = make_song(seed, static_cast<std::size_t>(i), config);
  return songs;
}

// ---------------------------------------------------------------- embedding

std::vector<double> embed_segment(std::span<const double> slice, const EmbedConfig& cfg) {
  const double seconds = static_cast<double>(slice.size()) / cfg.sample_rate;
  require(seconds + 1e-9 >= cfg.min_duration, ErrorKind::kInsufficientAudio,
          "slice of " + std::to_string(seconds) + " s is shorter than " + std::to_string(cfg.min_duration) + " s");
  dsp::F0Config fc;
  fc.sample_rate = cfg.sample_rate;
  fc.frame_rate = cfg.frame_rate;
  const auto f0 = dsp::estimate_f0(slice, fc);
  const auto hop = static_cast<std::size_t>(std::llround(cfg.sample_rate / cfg.frame_rate));
  const auto window = dsp::hann(cfg.window);
  dsp::RealFft fft(cfg.n_fft);
  std::vector<double> buf(cfg.n_fft, 0.0), frame_vec(cfg.dim), acc(cfg.dim, 0.0);
  std::vector<std::complex<double>> spec(fft.bins());
  std::size_t used = 0;
  for (std::size_t t = 0; t < f0.size(); ++t) {
    if (f0[t] <= 0.0) continue;
    const long centre = static_cast<long>(t * hop + hop / 2);
    const long start = centre - static_cast<long>(cfg.window / 2);
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t i = 0; i < cfg.window; ++i) {
      const long p = start + static_cast<long>(i);
      if (p >= 0 && p < static_cast<long>(slice.size())) buf[i] = slice[static_cast<std::size_t>(p)] * window[i];
    }
    fft.forward(buf, spec);
    double norm = 0.0;
    for (std::size_t d = 0; d < cfg.dim; ++d) {
      const double freq = (cfg.ratio_min + cfg.ratio_step * static_cast<double>(d)) * f0[t];
      const double bin = freq * static_cast<double>(cfg.n_fft) / cfg.sample_rate;
      const auto b0 = static_cast<std::size_t>(bin);
      double v = 0.0;
      if (b0 + 1 < spec.size()) {
        const double w = bin - static_cast<double>(b0);
        v = (1.0 - w) * std::abs(spec[b0]) + w * std::abs(spec[b0 + 1]);
      }
      frame_vec[d] = v;
      norm += v * v;
    }
    if (norm <= 0.0) continue;
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < cfg.dim; ++d) acc[d] += frame_vec[d] / norm;
    ++used;
  }
  require(used > 0, ErrorKind::kInsufficientAudio, "slice has no voiced frames");
  double norm = 0.0;
  for (double v : acc) norm += v * v;
  norm = std::sqrt(norm);
  for (double& v : acc) v /= norm;
  return acc;
}

// ---------------------------------------------------------------- serialization

nlohmann::json to_json(const SongManifest& m) {
  nlohmann::json j;
  j["song_id"] = m.song_id;
  j["sample_rate"] = m.sample_rate;
  j["frame_rate"] = m.frame_rate;
  j["render_seed"] = m.render_seed;
  j["singer_roster"] = nlohmann::json::array();
  for (const auto& s : m.singer_roster)
    j["singer_roster"].push_back({{"id", s.id},
                                  {"harmonic_profile", s.harmonic_profile},
                                  {"f_lo", s.f_lo},
                                  {"f_hi", s.f_hi},
                                  {"vibrato_rate", s.vibrato_rate},
                                  {"vibrato_depth", s.vibrato_depth}});
  j["segments"] = nlohmann::json::array();
  for (const auto& seg : m.segments) {
    nlohmann::json notes = nlohmann::json::array();
    for (const auto& n : seg.notes) notes.push_back({n.onset_frame, n.offset_frame, n.token});
    j["segments"].push_back({{"start", seg.start},
                             {"end", seg.end},
                             {"label", to_string(seg.label)},
                             {"lyric_tokens", seg.lyric_tokens},
                             {"f0_track", seg.f0_track},
                             {"active_singers", seg.active_singers},
                             {"notes", notes}});
  }
  return j;
}

SongManifest manifest_from_json(const nlohmann::json& j) {
  SongManifest m;
  m.song_id = j.at("song_id").get<std::string>();
  m.sample_rate = j.at("sample_rate").get<int>();
  m.frame_rate = j.at("frame_rate").get<double>();
  m.render_seed = j.value("render_seed", std::uint64_t{0});
  for (const auto& s : j.at("singer_roster")) {
    SingerProfile p;
    p.id = s.at("id").get<int>();
    p.harmonic_profile = s.at("harmonic_profile").get<std::vector<double>>();
    p.f_lo = s.at("f_lo").get<double>();
    p.f_hi = s.at("f_hi").get<double>();
    p.vibrato_rate = s.at("vibrato_rate").get<double>();
    p.vibrato_depth = s.at("vibrato_depth").get<double>();
    m.singer_roster.push_back(std::move(p));
  }
  for (const auto& s : j.at("segments")) {
    Segment seg;
    seg.start = s.at("start").get<double>();
    seg.end = s.at("end").get<double>();
    seg.label = label_from_string(s.at("label").get<std::string>());
    seg.lyric_tokens = s.at("lyric_tokens").get<std::vector<int>>();
    seg.f0_track = s.at("f0_track").get<std::vector<double>>();
    seg.active_singers = s.at("active_singers").get<std::vector<int>>();
    for (const auto& n : s.value("notes", nlohmann::json::array()))
      seg.notes.push_back({n.at(0).get<std::size_t>(), n.at(1).get<std::size_t>(), n.at(2).get<int>()});
    m.segments.push_back(std::move(seg));
  }
  return m;
}

void write_song(const std::filesystem::path& dir, const RenderedSong& song) {
  std::filesystem::create_directories(dir);
  const std::string& id = song.manifest.song_id;
  io::write_text(dir / (id + ".json"), to_json(song.manifest).dump(1) + "\n");
  io::write_wav(dir / (id + ".wav"), song.waveform, song.manifest.sample_rate);
  std::ostringstream csv;
  csv << "frame_index,f0_hz\n";
  csv.precision(17);
  for (std::size_t t = 0; t < song.gt_f0.size(); ++t) csv << t << ',' << song.gt_f0[t] << '\n';
  io::write_text(dir / (id + "_f0.csv"), csv.str());
}

RenderedSong read_song(const std::filesystem::path& dir, const std::string& song_id) {
  RenderedSong song;
  song.manifest = manifest_from_json(nlohmann::json::parse(io::read_text(dir / (song_id + ".json"))));
  auto wav = io::read_wav(dir / (song_id + ".wav"));
  require(wav.sample_rate == song.manifest.sample_rate, ErrorKind::kValidation, song_id + ": sample rate mismatch");
  song.waveform = std::move(wav.samples);
  std::istringstream csv(io::read_text(dir / (song_id + "_f0.csv")));
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    song.gt_f0.push_back(std::stod(line.substr(line.find(',') + 1)));
  }
  return song;
}

void write_index(const std::filesystem::path& dir, const CorpusIndex& index) {
  nlohmann::json j;
  j["version"] = 1;
  j["seed"] = index.seed;
  j["config"] = index.config.to_json();
  j["songs"] = nlohmann::json::array();
  for (std::size_t i = 0; i < index.song_ids.size(); ++i)
    j["songs"].push_back({{"song_id", index.song_ids[i]}, {"seed", index.song_seeds[i]}});
  std::filesystem::create_directories(dir);
  io::write_text(dir / "index.json", j.dump(1) + "\n");
}

CorpusIndex read_index(const std::filesystem::path& dir) {
  const auto path = dir / "index.json";
  require(std::filesystem::exists(path), ErrorKind::kMissingArtifact, "corpus index not found: " + path.string());
  const auto j = nlohmann::json::parse(io::read_text(path));
  CorpusIndex index;
  index.seed = j.at("seed").get<std::uint64_t>();
  index.config = CorpusConfig::from_json(j.at("config"));
  for (const auto& s : j.at("songs")) {
    index.song_ids.push_back(s.at("song_id").get<std::string>());
    index.song_seeds.push_back(s.at("seed").get<std::uint64_t>());
  }
  return index;
}

}  // namespace ensemble::corpus

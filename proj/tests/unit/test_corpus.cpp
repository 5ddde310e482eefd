#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "ensemble/core/error.hpp"
#include "ensemble/corpus/corpus.hpp"
#include "ensemble/dsp/dsp.hpp"

using namespace ensemble;
using namespace ensemble::corpus;

namespace {

SongManifest one_segment_song(std::vector<double> profile, double f0, double seconds, std::vector<int> active) {
  SongManifest m;
  m.song_id = "manual";
  const auto frames = static_cast<std::size_t>(std::lround(seconds * m.frame_rate));
  Segment s;
  s.start = 0.0;
  s.end = seconds;
  s.label = active.size() > 1 ? Label::kChorus : Label::kVerse;
  s.f0_track.assign(frames, f0);
  s.active_singers = active;
  s.notes.push_back({0, frames, 0});
  m.segments.push_back(s);
  for (int id : active) {
    SingerProfile p;
    p.id = id;
    p.harmonic_profile = profile;
    p.f_lo = 100.0;
    p.f_hi = 400.0;
    m.singer_roster.push_back(p);
  }
  return m;
}

RenderOptions dry() {
  RenderOptions o;
  o.detune_cents = 0.0;
  o.reverb = false;
  o.consonants = false;
  return o;
}

CorpusConfig with_k(int k) {
  CorpusConfig c;
  c.singers_min = c.singers_max = k;
  return c;
}

std::span<const double> segment_slice(const RenderedSong& s, const Segment& seg) {
  const auto a = static_cast<std::size_t>(std::lround(seg.start * s.manifest.sample_rate));
  const auto b = std::min(s.waveform.size(), static_cast<std::size_t>(std::lround(seg.end * s.manifest.sample_rate)));
  return std::span<const double>(s.waveform).subspan(a, b - a);
}

}  // namespace

TEST_CASE("single-singer config gives solo segments everywhere") {
  const auto m = make_manifest(7, 0, with_k(1));
  REQUIRE(m.singer_roster.size() == 1);
  for (const auto& s : m.segments) CHECK(s.active_singers.size() == 1);
}

TEST_CASE("corpus generation is bit-identical across runs") {
  const auto cfg = with_k(3);
  const auto a = make_corpus(7, 3, cfg);
  const auto b = make_corpus(7, 3, cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(to_json(a[i].manifest).dump() == to_json(b[i].manifest).dump());
    CHECK(a[i].waveform == b[i].waveform);
    CHECK(a[i].gt_f0 == b[i].gt_f0);
  }
}

TEST_CASE("grammar guarantees verses per singer and a shared chorus") {
  const auto cfg = with_k(2);
  std::size_t duet_choruses = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto m = make_manifest(7, i, cfg);
    std::set<int> verse_singers;
    bool shared_chorus = false;
    for (const auto& s : m.segments) {
      if (s.label == Label::kVerse) {
        REQUIRE(s.active_singers.size() == 1);
        verse_singers.insert(s.active_singers[0]);
      }
      if (s.label == Label::kChorus && s.active_singers.size() >= 2) {
        shared_chorus = true;
        ++duet_choruses;
      }
    }
    CHECK(verse_singers.size() == m.singer_roster.size());
    CHECK(shared_chorus);
  }
  CHECK(duet_choruses >= 100);
}

TEST_CASE("manifest invariants hold over a mixed-K corpus") {
  CorpusConfig cfg;
  cfg.singers_min = 1;
  cfg.singers_max = 3;
  for (std::size_t i = 0; i < 40; ++i) {
    const auto m = make_manifest(11, i, cfg);
    double prev = 0.0;
    for (const auto& s : m.segments) {
      CHECK(s.start < s.end);
      CHECK(s.start >= prev - 1e-9);
      prev = s.end;
      for (int id : s.active_singers) CHECK_NOTHROW(m.singer(id));
    }
    for (const auto& p : m.singer_roster) {
      double sum = 0.0;
      for (double a : p.harmonic_profile) {
        CHECK(a >= 0.0);
        sum += a;
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
      CHECK(p.f_lo < p.f_hi);
      CHECK(p.f_lo >= 80.0);
      CHECK(p.f_hi <= 1000.0);
    }
  }
}

TEST_CASE("rendered lengths follow duration") {
  const auto s = make_song(3, 0, CorpusConfig{});
  const double d = s.manifest.duration();
  CHECK(s.waveform.size() == static_cast<std::size_t>(std::ceil(d * s.manifest.sample_rate - 1e-6)));
  CHECK(s.gt_f0.size() == static_cast<std::size_t>(std::ceil(d * s.manifest.frame_rate - 1e-6)));
}

TEST_CASE("a one-harmonic singer renders a pure tone") {
  auto m = one_segment_song({1.0}, 220.0, 2.0, {0});
  const auto song = render_song(m, 1, dry());
  const std::size_t n_fft = 4096;
  const auto mag = dsp::stft_magnitude(std::span<const double>(song.waveform).subspan(4000, n_fft), n_fft, n_fft);
  std::size_t peak = 0;
  for (std::size_t k = 1; k < mag.cols(); ++k)
    if (mag(0, k) > mag(0, peak)) peak = k;
  const double bin_hz = 8000.0 / n_fft;
  CHECK(std::abs(static_cast<double>(peak) * bin_hz - 220.0) <= bin_hz);
}

TEST_CASE("two identical dry voices superpose linearly") {
  const std::vector<double> profile{0.5, 0.3, 0.2};
  auto solo = render_song(one_segment_song(profile, 180.0, 1.0, {0}), 5, dry());
  auto duo = render_song(one_segment_song(profile, 180.0, 1.0, {0, 1}), 5, dry());
  REQUIRE(solo.waveform.size() == duo.waveform.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < solo.waveform.size(); ++i)
    worst = std::max(worst, std::abs(duo.waveform[i] - 2.0 * solo.waveform[i]));
  CHECK(worst < 1e-12);
}

TEST_CASE("multi-singer segments are louder than solo ones") {
  CorpusConfig cfg = with_k(3);
  cfg.normalize = false;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto m = make_manifest(21, i, cfg);
    const auto s = render_song(m, m.render_seed, RenderOptions::from(cfg));
    double solo = 0.0, multi = 0.0;
    int n_solo = 0, n_multi = 0;
    for (const auto& seg : m.segments) {
      const double r = dsp::rms(segment_slice(s, seg));
      if (seg.active_singers.size() > 1) {
        multi += r * r;
        ++n_multi;
      } else {
        solo += r * r;
        ++n_solo;
      }
    }
    REQUIRE(n_solo > 0);
    REQUIRE(n_multi > 0);
    CHECK(multi / n_multi >= solo / n_solo);
  }
}

TEST_CASE("f0 outside the register is rejected") {
  auto m = one_segment_song({1.0}, 500.0, 1.0, {0});
  try {
    render_song(m, 1, dry());
    FAIL("expected a validation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kValidation);
  }
}

TEST_CASE("loudness normalization") {
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.5 * std::sqrt(2.0) * std::sin(0.1 * static_cast<double>(i));
  const auto y = loudness_normalize(x, 0.1);
  CHECK(std::abs(dsp::rms(y) - 0.1) / 0.1 < 1e-6);
  const auto z = loudness_normalize(y, 0.1);
  double worst = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(z[i] - y[i]));
  CHECK(worst < 1e-9);
  std::vector<double> zeros(10, 0.0);
  try {
    loudness_normalize(zeros, 0.1);
    FAIL("expected a degenerate-signal error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kDegenerateSignal);
  }
}

TEST_CASE("embeddings separate profiles") {
  const std::vector<double> low{0.6, 0.3, 0.1, 0.0, 0.0, 0.0};
  const std::vector<double> high{0.0, 0.0, 0.0, 0.2, 0.4, 0.4};
  const auto a = render_song(one_segment_song(low, 200.0, 2.0, {0}), 1, dry());
  const auto b = render_song(one_segment_song(low, 200.0, 2.0, {0}), 2, dry());
  const auto c = render_song(one_segment_song(high, 200.0, 2.0, {0}), 1, dry());
  const auto ea = embed_segment(a.waveform), eb = embed_segment(b.waveform), ec = embed_segment(c.waveform);
  double norm = 0.0;
  for (double v : ea) norm += v * v;
  CHECK(ea.size() == 192);
  CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-9);
  CHECK(cosine(ea, eb) > 0.9);
  CHECK(cosine(ea, ec) < 0.3);
}

TEST_CASE("same singer on different melodies embeds alike") {
  const auto song = make_song(5, 0, with_k(2));
  std::map<int, std::vector<std::vector<double>>> by_singer;
  for (const auto& seg : song.manifest.segments)
    if (seg.label == Label::kVerse) by_singer[seg.active_singers[0]].push_back(embed_segment(segment_slice(song, seg)));
  for (const auto& [id, es] : by_singer)
    for (std::size_t i = 1; i < es.size(); ++i) CHECK(cosine(es[0], es[i]) > 0.9);
}

TEST_CASE("short slices are rejected") {
  std::vector<double> x(3000, 0.1);
  try {
    embed_segment(x);
    FAIL("expected an insufficient-audio error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInsufficientAudio);
  }
}

TEST_CASE("config validation and json round trip") {
  CorpusConfig bad;
  bad.singers_min = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK_THROWS_AS(make_corpus(1, 0, CorpusConfig{}), Error);
  CorpusConfig c = with_k(3);
  c.p_multi_bridge = 0.5;
  const auto j = c.to_json();
  CHECK(CorpusConfig::from_json(j).to_json() == j);
  auto extra = j;
  extra["bogus"] = 1;
  CHECK_THROWS_AS(CorpusConfig::from_json(extra), Error);
}

TEST_CASE("songs survive a disk round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "ensemble_test_corpus";
  std::filesystem::remove_all(dir);
  const auto song = make_song(9, 1, with_k(2));
  write_song(dir, song);
  const auto back = read_song(dir, song.manifest.song_id);
  CHECK(to_json(back.manifest).dump() == to_json(song.manifest).dump());
  REQUIRE(back.waveform.size() == song.waveform.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < song.waveform.size(); ++i)
    worst = std::max(worst, std::abs(back.waveform[i] - song.waveform[i]));
  CHECK(worst < 1e-6);
  CHECK(back.gt_f0.size() == song.gt_f0.size());
  CorpusIndex idx{9, with_k(2), {song.manifest.song_id}, {song.manifest.render_seed}};
  write_index(dir, idx);
  const auto idx2 = read_index(dir);
  CHECK(idx2.song_ids == idx.song_ids);
  CHECK(idx2.song_seeds == idx.song_seeds);
  std::filesystem::remove_all(dir);
  try {
    read_index(dir);
    FAIL("expected a missing-artifact error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kMissingArtifact);
  }
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "ensemble/core/error.hpp"
#include "ensemble/prompt/prompt.hpp"

using namespace ensemble;
using namespace ensemble::prompt;
using corpus::Label;

namespace {

Embedding unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return v;
}

Matrix random_set(std::size_t n, std::size_t dim, Rng& rng) {
  Matrix m(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (double& v : m.row(i)) {
      v = normal(rng);
      s += v * v;
    }
    for (double& v : m.row(i)) v /= std::sqrt(s);
  }
  return m;
}

// Embeddings with prescribed cosine to three orthonormal singer axes.
Embedding mix(double a, double b, double c) {
  return unit({a, b, c, std::sqrt(std::max(0.0, 1.0 - a * a - b * b - c * c))});
}

}  // namespace

TEST_CASE("clustering a single verse") {
  const std::vector<Embedding> v{unit({1, 2, 3})};
  const auto g = cluster_verse_singers(v, 0.4);
  REQUIRE(g.size() == 1);
  for (std::size_t i = 0; i < 3; ++i) CHECK(g.members[0][i] == doctest::Approx(v[0][i]));
}

TEST_CASE("identical verses form one cluster") {
  const std::vector<Embedding> v{unit({1, 0, 1}), unit({1, 0, 1})};
  CHECK(cluster_verse_singers(v, 0.5).size() == 1);
}

TEST_CASE("clustering rejects empty input") {
  try {
    cluster_verse_singers(std::vector<Embedding>{}, 0.4);
    FAIL("expected a no-verse error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kNoVerse);
  }
}

TEST_CASE("clustering output is pairwise separated and idempotent") {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Embedding> v;
    const Matrix m = random_set(12, 6, rng);
    for (std::size_t i = 0; i < m.rows(); ++i) v.emplace_back(m.row(i).begin(), m.row(i).end());
    const auto g = cluster_verse_singers(v, 0.4);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t j = i + 1; j < g.size(); ++j) CHECK(corpus::cosine(g.members[i], g.members[j]) < 0.4);
    CHECK(cluster_verse_singers(g.members, 0.4).size() == g.size());
  }
}

TEST_CASE("assignment with one singer never updates labels") {
  const GlobalSingerSet g{{mix(1, 0, 0)}};
  const std::vector<Label> labels{Label::kVerse, Label::kChorus, Label::kBridge};
  const std::vector<Embedding> e{mix(0.9, 0, 0), mix(0.5, 0, 0), mix(0.1, 0, 0)};
  for (const auto& a : assign_segments(labels, e, g, 0.4)) {
    CHECK(a.assigned_singers == std::vector<std::size_t>{0});
    CHECK(a.updated_label == labels[a.segment_index]);
  }
}

TEST_CASE("indicator rule marks multi-singer sections") {
  const GlobalSingerSet g{{mix(1, 0, 0), mix(0, 1, 0), mix(0, 0, 1)}};
  const std::vector<Label> labels{Label::kChorus};
  const auto a = assign_segments(labels, std::vector<Embedding>{mix(0.5, 0.45, 0.05)}, g, 0.3);
  CHECK(a[0].assigned_singers == std::vector<std::size_t>{0, 1});
  CHECK(a[0].updated_label == Label::kMultiChorus);

  const GlobalSingerSet g2{{mix(1, 0, 0), mix(0, 1, 0)}};
  const auto b = assign_segments(labels, std::vector<Embedding>{mix(0.9, 0.3, 0)}, g2, 0.5);
  CHECK(b[0].assigned_singers == std::vector<std::size_t>{0});
  CHECK(b[0].updated_label == Label::kChorus);

  // No match above the threshold: nearest singleton.
  const auto c = assign_segments(labels, std::vector<Embedding>{mix(0.2, 0.3, 0)}, g2, 0.5);
  CHECK(c[0].assigned_singers == std::vector<std::size_t>{1});
  CHECK(c[0].updated_label == Label::kChorus);

  // Verses always take the nearest singer.
  const std::vector<Label> verse{Label::kVerse};
  const auto d = assign_segments(verse, std::vector<Embedding>{mix(0.6, 0.7, 0)}, g2, 0.5);
  CHECK(d[0].assigned_singers == std::vector<std::size_t>{1});
  CHECK(d[0].updated_label == Label::kVerse);
}

TEST_CASE("raising delta_multi never grows an assignment") {
  Rng rng = make_rng(5);
  const Matrix gm = random_set(5, 8, rng);
  GlobalSingerSet g;
  for (std::size_t i = 0; i < gm.rows(); ++i) g.members.emplace_back(gm.row(i).begin(), gm.row(i).end());
  const Matrix em = random_set(40, 8, rng);
  std::vector<Embedding> e;
  for (std::size_t i = 0; i < em.rows(); ++i) e.emplace_back(em.row(i).begin(), em.row(i).end());
  const std::vector<Label> labels(e.size(), Label::kChorus);
  std::vector<std::size_t> prev(e.size(), 99);
  for (double d = -0.5; d < 1.0; d += 0.05) {
    const auto a = assign_segments(labels, e, g, d);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].assigned_singers.size() <= prev[i]);
      CHECK((a[i].assigned_singers.size() >= 2) == (a[i].updated_label == Label::kMultiChorus));
      prev[i] = a[i].assigned_singers.size();
    }
  }
}

TEST_CASE("fuser on a single singer returns its value projection") {
  nn::ParamStore ps;
  Rng rng = make_rng(1);
  Fuser f(ps, "fuser", FuserConfig{}, rng);
  const Matrix u = random_set(1, 192, rng);
  const auto out = f.fuse(u);
  const Matrix v = nn::matmul(nn::constant(u), ps.get("fuser.w_v")).value();
  for (std::size_t j = 0; j < 64; ++j) CHECK(out[j] == v(0, j));
  const Matrix w = f.attention_weights(u);
  REQUIRE(w.rows() == 4);
  for (std::size_t h = 0; h < 4; ++h) CHECK(w(h, 0) == 1.0);
}

TEST_CASE("fuser is permutation invariant and its weights are a distribution") {
  nn::ParamStore ps;
  Rng rng = make_rng(2);
  Fuser f(ps, "fuser", FuserConfig{}, rng);
  for (std::size_t n = 1; n <= 8; ++n) {
    Matrix u = random_set(n, 192, rng);
    const auto a = f.fuse(u);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    Matrix p(n, 192);
    for (std::size_t i = 0; i < n; ++i) std::copy_n(u.row(perm[i]).begin(), 192, p.row(i).begin());
    const auto b = f.fuse(p);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::abs(a[j] - b[j]) < 1e-5);
    const Matrix w = f.attention_weights(u);
    for (std::size_t h = 0; h < w.rows(); ++h) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        CHECK(w(h, i) > 0.0);
        s += w(h, i);
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
    const Matrix sa = f.singer_attention(u);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += sa(i, j);
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("batched fusion matches one-at-a-time fusion") {
  nn::ParamStore ps;
  Rng rng = make_rng(4);
  Fuser f(ps, "fuser", FuserConfig{}, rng);
  std::vector<Matrix> sets{random_set(1, 192, rng), random_set(3, 192, rng), random_set(2, 192, rng)};
  nn::NoGradGuard guard;
  const Matrix all = f.fuse_sets(sets).value();
  for (std::size_t b = 0; b < sets.size(); ++b) {
    const auto one = f.fuse(sets[b]);
    for (std::size_t j = 0; j < one.size(); ++j) CHECK(all(b, j) == doctest::Approx(one[j]).epsilon(1e-12));
  }
}

TEST_CASE("fuser input validation") {
  nn::ParamStore ps;
  Rng rng = make_rng(1);
  Fuser f(ps, "fuser", FuserConfig{}, rng);
  CHECK_THROWS_AS(f.fuse(Matrix(0, 192)), Error);
  CHECK_THROWS_AS(f.fuse(Matrix(2, 10)), Error);
  CHECK_THROWS_AS(f.fuse(Matrix(9, 192)), Error);
}

TEST_CASE("prompt broadcasting is piecewise constant with half-open segments") {
  std::vector<corpus::Segment> segs(2);
  segs[0].start = 0.0;
  segs[0].end = 2.0;
  segs[1].start = 2.0;
  segs[1].end = 4.0;
  Matrix fused(2, 3);
  fused.row(0)[0] = 1.0;
  fused.row(1)[0] = 2.0;
  const auto track = broadcast_prompt(segs, fused, 50.0, 200);
  for (std::size_t t = 0; t < 100; ++t) CHECK(track.values(t, 0) == 1.0);
  for (std::size_t t = 100; t < 200; ++t) CHECK(track.values(t, 0) == 2.0);
  CHECK(track.segment_of_frame[100] == 1);

  const auto single = broadcast_prompt({segs[0]}, Matrix(1, 3, 0.5), 50.0, 100);
  for (std::size_t t = 0; t < 100; ++t) CHECK(single.values(t, 2) == 0.5);

  try {
    broadcast_prompt(segs, fused, 50.0, 201);
    FAIL("expected a coverage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kCoverage);
  }
}

TEST_CASE("scheduling a rendered song recovers its singers") {
  corpus::CorpusConfig cfg;
  cfg.singers_min = cfg.singers_max = 3;
  const auto song = corpus::make_song(7, 2, cfg);
  const auto s = schedule_song(song);
  CHECK(s.global.size() == 3);
  for (std::size_t m = 0; m < song.manifest.segments.size(); ++m) {
    const bool truth = song.manifest.segments[m].active_singers.size() >= 2;
    CHECK((s.assignments[m].updated_label == Label::kMultiChorus) == truth);
    CHECK(singer_set(s, m).rows() == s.assignments[m].assigned_singers.size());
  }
}

TEST_CASE("assignments and prompt tracks round trip") {
  const GlobalSingerSet g{{mix(1, 0, 0), mix(0, 1, 0)}};
  const std::vector<Label> labels{Label::kVerse, Label::kChorus};
  const auto a = assign_segments(labels, std::vector<Embedding>{mix(0.9, 0, 0), mix(0.6, 0.6, 0)}, g, 0.4);
  const auto back = assignments_from_json(to_json(a));
  REQUIRE(back.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(back[i].assigned_singers == a[i].assigned_singers);
    CHECK(back[i].updated_label == a[i].updated_label);
    CHECK(back[i].similarity_scores == a[i].similarity_scores);
  }
  CHECK(global_set_from_json(to_json(g)).members == g.members);

  PromptTrack t;
  t.values = Matrix(3, 2, 0.25);
  t.frame_rate = 12.5;
  const auto path = std::filesystem::temp_directory_path() / "ensemble_prompt_track.bin";
  write_prompt_track(path, t);
  double fr = 0.0;
  CHECK(read_prompt_track(path, &fr) == t.values);
  CHECK(fr == 12.5);
  std::filesystem::remove(path);
}

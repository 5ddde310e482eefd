#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"
#include "ensemble/eval/eval.hpp"

using namespace ensemble;
using namespace ensemble::eval;

namespace {

constexpr double kTwoPi = 6.283185307179586;

std::vector<double> sine(double f, std::size_t n, double amp = 0.3) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(kTwoPi * f * static_cast<double>(i) / 8000.0);
  return x;
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("cents follows the octave definition") {
  CHECK(cents(440.0, 440.0) == 0.0);
  CHECK(cents(880.0, 440.0) == doctest::Approx(1200.0));
  CHECK(cents(466.16, 440.0) == doctest::Approx(100.0).epsilon(1e-3));
  CHECK(cents(300.0, 200.0) == doctest::Approx(-cents(200.0, 300.0)));
  CHECK_THROWS_AS(cents(0.0, 440.0), Error);
  CHECK_THROWS_AS(cents(440.0, -1.0), Error);
}

TEST_CASE("f0 estimate on a sinusoid and on silence") {
  const auto f0 = f0_estimate(sine(220.0, 8000), 50.0);
  std::size_t voiced = 0;
  for (std::size_t t = 2; t + 2 < f0.size(); ++t) {
    if (f0[t] == 0.0) continue;
    ++voiced;
    CHECK(std::abs(f0[t] - 220.0) < 2.0);
  }
  CHECK(voiced > 40);
  for (double f : f0_estimate(std::vector<double>(4000, 0.0), 50.0)) CHECK(f == 0.0);
}

TEST_CASE("compare_f0 oracles") {
  std::vector<double> a{200, 210, 0, 220, 230, 0}, b = a;
  const F0Report same = compare_f0(a, b);
  CHECK(same.rmse_cents == 0.0);
  CHECK(same.mae_cents == 0.0);
  CHECK(same.correlation == doctest::Approx(1.0));
  CHECK(same.n_frames_compared == 4);
  for (double& f : b) f *= 2.0;
  const F0Report oct = compare_f0(a, b);
  CHECK(oct.rmse_cents == doctest::Approx(1200.0));
  CHECK(oct.mae_cents == doctest::Approx(1200.0));
  CHECK(oct.correlation == doctest::Approx(1.0));
  // Symmetry and ordering of the error measures.
  std::vector<double> c{205, 190, 100, 240, 228, 0};
  const F0Report ac = compare_f0(a, c), ca = compare_f0(c, a);
  CHECK(ac.rmse_cents == doctest::Approx(ca.rmse_cents));
  CHECK(ac.mae_cents == doctest::Approx(ca.mae_cents));
  CHECK(ac.correlation == doctest::Approx(ca.correlation));
  CHECK(ac.rmse_cents >= ac.mae_cents);
  CHECK(compare_f0(a, c, {true, true, true, false, false, false}).n_frames_compared == 2);
  try {
    compare_f0(std::vector<double>{0, 100}, std::vector<double>{100, 0});
    FAIL("expected an overlap error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInsufficientOverlap);
  }
  CHECK_THROWS_AS(compare_f0(a, std::vector<double>{1.0}), Error);
  const std::string table = format_f0_table(oct);
  for (const auto& row : kF0RowNames) CHECK(table.find(row) != std::string::npos);
  const auto j = oct.to_json();
  for (const auto& row : kF0RowNames) CHECK(j.contains(row));

  TextureSwapReport rep;
  rep.aggregate = oct;
  rep.external["SIM"] = 0.5;
  const auto t = rep.table();
  REQUIRE(t.size() == 5);
  const std::vector<std::string> rows{"F0 RMSE (cents)", "F0 MAE (cents)", "Correlation", "WER", "SIM"};
  for (std::size_t i = 0; i < rows.size(); ++i) CHECK(t[i]["metric"] == rows[i]);
  CHECK(t[0]["value"] == doctest::Approx(1200.0));
  CHECK(t[3]["value"].is_null());
  CHECK(t[4]["value"] == 0.5);
  CHECK(rep.format().find("n/a") != std::string::npos);
}

TEST_CASE("energy distance is zero on identical samples and grows with a shift") {
  Rng rng = make_rng(1);
  Samples x, y, z;
  for (int i = 0; i < 200; ++i) {
    x.push_back({normal(rng), normal(rng)});
    y.push_back({normal(rng), normal(rng)});
    z.push_back({normal(rng) + 2.0, normal(rng)});
  }
  CHECK(std::abs(energy_distance(x, y)) < 0.1);
  CHECK(energy_distance(x, z) > 1.0);
  CHECK(energy_distance(x, z) == doctest::Approx(energy_distance(z, x)));
  CHECK_THROWS_AS(energy_distance(x, Samples{{1.0}, {2.0}}), Error);
}

TEST_CASE("linear probe recovers a linear map") {
  Rng rng = make_rng(2);
  Samples x;
  std::vector<double> y;
  for (int i = 0; i < 100; ++i) {
    x.push_back({normal(rng), normal(rng), normal(rng)});
    y.push_back(1.5 * x.back()[0] - 2.0 * x.back()[2] + 0.25);
  }
  const LinearProbe p = LinearProbe::fit(x, y, 0.0);
  CHECK(p.rmse(x, y) < 1e-9);
  CHECK(p.predict(std::vector<double>{0.0, 0.0, 0.0}) == doctest::Approx(0.25));
}

TEST_CASE("similarity pair counts match a brute-force recount") {
  corpus::CorpusConfig cc;
  const auto songs = corpus::make_corpus(3, 4, cc);
  const SimilarityConfig cfg;
  const auto slices = similarity_slices(songs, cfg);
  // Brute force: walk every solo verse in 1.5 s steps, then enumerate every slice pair.
  std::vector<std::tuple<std::size_t, std::size_t>> walk;
  for (std::size_t s = 0; s < songs.size(); ++s)
    for (std::size_t k = 0; k < songs[s].manifest.segments.size(); ++k) {
      const auto& seg = songs[s].manifest.segments[k];
      if (seg.label != corpus::Label::kVerse || seg.active_singers.size() != 1) continue;
      for (double t = seg.start; t + 3.0 <= seg.end + 1e-9; t += 1.5) walk.emplace_back(s, k);
    }
  REQUIRE(walk.size() == slices.size());
  PairCounts brute;
  for (std::size_t i = 0; i < walk.size(); ++i)
    for (std::size_t j = i + 1; j < walk.size(); ++j) {
      if (walk[i] == walk[j]) ++brute.intra;
      if (std::get<0>(walk[i]) != std::get<0>(walk[j])) ++brute.cross;
    }
  const PairCounts closed = similarity_pair_counts(songs, cfg);
  CHECK(closed.intra == brute.intra);
  CHECK(closed.cross == brute.cross);

  const auto report = similarity_distributions(songs, [](std::span<const double> x) {
    return corpus::embed_segment(x);
  }, cfg);
  CHECK(report.intra.n_pairs == closed.intra);
  CHECK(report.cross.n_pairs == closed.cross);
  CHECK(report.intra.mean <= 1.0);
  CHECK(report.cross.mean >= -1.0);
  CHECK(report.intra.std >= 0.0);
  std::size_t total = 0;
  for (auto c : report.intra.histogram) total += c;
  CHECK(total == report.intra.n_pairs);
  CHECK(report.to_json().contains("full_scale_reference"));

  const std::vector<corpus::RenderedSong> one{songs[0]};
  try {
    similarity_distributions(one, [](std::span<const double> x) { return corpus::embed_segment(x); }, cfg);
    FAIL("expected a protocol error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kProtocol);
  }
}

TEST_CASE("attention report head sums and singer matrix rows") {
  corpus::CorpusConfig cc;
  const auto songs = corpus::make_corpus(5, 3, cc);
  nn::ParamStore ps;
  Rng rng = make_rng(4);
  const prompt::Fuser fuser(ps, "fuser", prompt::FuserConfig{}, rng);
  bool saw_solo = false, saw_multi = false;
  for (const auto& song : songs) {
    const auto schedule = prompt::schedule_song(song);
    const AttentionReport r = attention_report(fuser, song.manifest, schedule);
    REQUIRE(r.segments.size() == song.manifest.segments.size());
    for (std::size_t k = 0; k < r.segments.size(); ++k) {
      const auto& s = r.segments[k];
      double total = 0.0;
      for (double w : s.head_sum) total += w;
      CHECK(total == doctest::Approx(4.0));
      const auto& assigned = schedule.assignments[k].assigned_singers;
      if (assigned.size() == 1) {
        saw_solo = true;
        CHECK(s.head_sum[assigned[0]] == doctest::Approx(4.0));
        CHECK(s.singer_matrix.empty());
      } else {
        saw_multi = true;
        for (std::size_t i : assigned) CHECK(s.head_sum[i] > 0.0);
        for (std::size_t i = 0; i < s.singer_matrix.rows(); ++i) {
          double row = 0.0;
          for (std::size_t j = 0; j < s.singer_matrix.cols(); ++j) row += s.singer_matrix(i, j);
          CHECK(std::abs(row - 1.0) < 1e-6);
        }
      }
    }
    const auto dir = temp_dir("ensemble_test_attention");
    for (const auto& p : write_attention_report(dir, r)) CHECK(std::filesystem::exists(p));
  }
  CHECK(saw_solo);
  CHECK(saw_multi);
}

TEST_CASE("plots write png files with csv sidecars") {
  const auto dir = temp_dir("ensemble_test_plots");
  const auto x = sine(220.0, 8000);
  const auto sal = emit_pitch_salience(x, dir / "salience.png");
  const auto mel = emit_mel_spectrogram(x, dir / "mel.png");
  for (const auto& p : {sal, mel}) {
    REQUIRE(std::filesystem::exists(p));
    const std::string head = io::read_text(p).substr(0, 8);
    CHECK(head == std::string("\x89PNG\r\n\x1a\n"));
    CHECK(std::filesystem::exists(std::filesystem::path(p).replace_extension(".csv")));
  }
  CHECK_THROWS_AS(emit_mel_spectrogram(std::vector<double>{}, dir / "none.png"), Error);
}

TEST_CASE("metric registry has no bundled implementations") {
  struct Constant final : Metric {
    std::string name() const override { return "SIM"; }
    double score(std::span<const double>, std::span<const double>, int) const override { return 0.5; }
  };
  MetricRegistry reg;
  CHECK(reg.names().empty());
  try {
    reg.get("WER");
    FAIL("expected an evaluation error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kEvaluation);
  }
  reg.add(std::make_unique<Constant>());
  CHECK(reg.contains("SIM"));
  CHECK(reg.get("SIM").score({}, {}, 8000) == 0.5);
  CHECK_THROWS_AS(reg.add(std::make_unique<Constant>()), Error);
  CHECK(report_envelope("x", {})["schema_version"] == kReportSchemaVersion);
}

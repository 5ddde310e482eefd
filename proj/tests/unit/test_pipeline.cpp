#include <doctest.h>

#include <cstdlib>

#include "ensemble/core/error.hpp"
#include "ensemble/pipeline/pipeline.hpp"

using namespace ensemble;
using namespace ensemble::pipeline;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("every profile validates and round-trips through json") {
  for (const auto& name : profile_names()) {
    const PipelineConfig c = profile(name);
    c.validate();
    const PipelineConfig back = PipelineConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
  }
  CHECK(kind_of([] { profile("laptop"); }) == ErrorKind::kConfig);
  const auto full = profile("paper_fullscale");
  CHECK(full.codec.vae.steps == 970000);
  CHECK(full.codec.vae.lr == 1.5e-4);
  CHECK(full.codec.texture.lr == 5e-5);
  CHECK(full.codec.model.snr_db == 10.0);
  CHECK(full.flow.train.batch == 4);
  CHECK(full.inference.cfg_scale == 4.0);
}

TEST_CASE("config files overlay their profile and reject unknown keys") {
  const auto c = PipelineConfig::from_json({{"profile", "smoke"}, {"flow", {{"train", {{"steps", 3}}}}}});
  CHECK(c.flow.train.steps == 3);
  CHECK(c.corpus.n_songs == profile("smoke").corpus.n_songs);
  CHECK(kind_of([] { PipelineConfig::from_json({{"flow", {{"trian", 1}}}}); }) == ErrorKind::kConfig);
  CHECK(kind_of([] { PipelineConfig::from_json({{"inference", {{"n_steps", "many"}}}}); }) == ErrorKind::kConfig);
  CHECK(kind_of([] { PipelineConfig::from_json({{"corpus", {{"n_heldout", 48}}}}); }) == ErrorKind::kConfig);
  CHECK(kind_of([] { PipelineConfig::from_json({{"flow", {{"model", {{"d_z", 8}}}}}}); }) == ErrorKind::kConfig);
}

TEST_CASE("overrides parse json values and environment names") {
  PipelineConfig c = profile("desk");
  c.apply_overrides({{"inference.cfg_scale", "2.5"}, {"codec.model.sample_rate", "8000"}});
  CHECK(c.inference.cfg_scale == 2.5);
  CHECK(kind_of([&] { c.apply_overrides({{"inference.cfg", "1"}}); }) == ErrorKind::kConfig);

  ::setenv("TESTPFX_FLOW__TRAIN__STEPS", "12", 1);
  ::setenv("TESTPFX_IGNORED", "1", 1);
  const auto env = environment_overrides("TESTPFX_");
  REQUIRE(env.size() == 1);
  CHECK(env.at("flow.train.steps") == "12");
  c.apply_overrides(env);
  CHECK(c.flow.train.steps == 12);
}

TEST_CASE("section hashes only move with the sections they cover") {
  const PipelineConfig a = profile("desk");
  PipelineConfig b = a;
  b.flow.train.steps += 1;
  b.inference.n_steps += 1;
  CHECK(a.section_hash({"corpus", "codec"}) == b.section_hash({"corpus", "codec"}));
  CHECK(a.section_hash({"corpus", "flow"}) != b.section_hash({"corpus", "flow"}));
  b = a;
  b.codec.texture.lr *= 2.0;
  CHECK(a.section_hash({"codec.model", "codec.vae"}) == b.section_hash({"codec.model", "codec.vae"}));
  CHECK(a.section_hash({"codec"}) != b.section_hash({"codec"}));
  CHECK(kind_of([&] { a.section_hash({"codec.nothing"}); }) == ErrorKind::kConfig);
}

TEST_CASE("exit codes and missing artifacts") {
  CHECK(exit_code(ErrorKind::kConfig) == 2);
  CHECK(exit_code(ErrorKind::kMissingArtifact) == 3);
  CHECK(exit_code(ErrorKind::kTrainingFailure) == 4);
  CHECK(exit_code(ErrorKind::kEvaluation) == 5);
  CHECK(exit_code(ErrorKind::kInsufficientOverlap) == 5);
  CHECK(exit_code(ErrorKind::kIo) == 1);
  CHECK(kind_of([] { require_artifact("/nonexistent/flow.ckpt", "flow"); }) == ErrorKind::kMissingArtifact);
  const Layout layout{std::filesystem::temp_directory_path() / "ensemble_test_empty_run"};
  std::filesystem::remove_all(layout.root);
  CHECK(kind_of([&] { train_vae(profile("smoke"), layout); }) == ErrorKind::kMissingArtifact);
  CHECK(kind_of([&] { evaluation_from_string("everything"); }) == ErrorKind::kConfig);
}

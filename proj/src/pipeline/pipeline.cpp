#include "ensemble/pipeline/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "ensemble/core/error.hpp"
#include "ensemble/core/io.hpp"

extern char** environ;

#ifndef ENSEMBLE_SOURCE_REVISION
#define ENSEMBLE_SOURCE_REVISION "unknown"
#endif

namespace ensemble::pipeline {

using nlohmann::json;

// ---------------------------------------------------------------- configuration

namespace {

// Reads `key` from `j` into `v` when present and records it as known.
struct Reader {
  const json& j;
  std::string section;
  std::set<std::string> known;

  template <typename T>
  Reader& operator()(const char* key, T& v) {
    known.insert(key);
    if (j.contains(key)) {
      try {
        v = j.at(key).get<T>();
      } catch (const json::exception& e) {
        fail(ErrorKind::kConfig, section + "." + key + ": " + e.what());
      }
    }
    return *this;
  }
  void finish() const {
    require(j.is_object(), ErrorKind::kConfig, section + " must be an object");
    for (const auto& [k, _] : j.items())
      require(known.contains(k), ErrorKind::kConfig, "unknown key '" + section + "." + k + "'");
  }
};

const json& section_of(const json& j, const char* key) {
  static const json empty = json::object();
  return j.contains(key) ? j.at(key) : empty;
}

json stage_json(const StageTraining& s) {
  return {{"steps", s.steps}, {"batch", s.batch}, {"chunk_frames", s.chunk_frames}, {"lr", s.lr}, {"warmup", s.warmup}};
}

StageTraining stage_from(const json& j, const std::string& name, StageTraining s) {
  Reader r{j, name, {}};
  r("steps", s.steps)("batch", s.batch)("chunk_frames", s.chunk_frames)("lr", s.lr)("warmup", s.warmup);
  r.finish();
  return s;
}

}  // namespace

void PipelineConfig::validate() const {
  corpus.config.validate();
  require(corpus.n_songs >= 2, ErrorKind::kConfig, "corpus.n_songs must be >= 2");
  require(corpus.n_heldout >= 1 && corpus.n_heldout < corpus.n_songs, ErrorKind::kConfig,
          "corpus.n_heldout must leave at least one training song");
  require(scheduler.delta_id > -1.0 && scheduler.delta_id < 1.0 && scheduler.delta_multi > -1.0 &&
              scheduler.delta_multi < 1.0,
          ErrorKind::kConfig, "scheduler thresholds must lie in (-1, 1)");
  codec.model.validate();
  for (const auto* s : {&codec.vae, &codec.texture}) {
    require(s->batch >= 1 && s->lr > 0.0, ErrorKind::kConfig, "codec training needs batch >= 1 and lr > 0");
    require(s->chunk_frames >= codec.model.factor && s->chunk_frames % codec.model.factor == 0, ErrorKind::kConfig,
            "codec chunk_frames must be a positive multiple of the downsampling factor");
  }
  flow.model.validate();
  require(flow.model.d_z == codec.model.d_z, ErrorKind::kConfig, "flow.model.d_z must equal codec.model.d_z");
  require(flow.train.batch >= 1 && flow.train.lr > 0.0, ErrorKind::kConfig, "flow training needs batch >= 1, lr > 0");
  require(inference.n_steps >= 1, ErrorKind::kConfig, "inference.n_steps must be >= 1");
  require(eval.similarity.slice_s > eval.similarity.overlap_s && eval.similarity.overlap_s >= 0.0, ErrorKind::kConfig,
          "eval: need 0 <= overlap_s < slice_s");
}

json PipelineConfig::to_json() const {
  return {
      {"profile", profile},
      {"corpus", {{"seed", corpus.seed}, {"n_songs", corpus.n_songs}, {"n_heldout", corpus.n_heldout},
                  {"config", corpus.config.to_json()}}},
      {"scheduler", {{"delta_id", scheduler.delta_id}, {"delta_multi", scheduler.delta_multi}}},
      {"codec", {{"model", codec.model.to_json()}, {"vae", stage_json(codec.vae)}, {"texture", stage_json(codec.texture)},
                 {"seed", codec.seed}}},
      {"flow", {{"model", flow.model.to_json()},
                {"train", {{"steps", flow.train.steps}, {"batch", flow.train.batch}, {"lr", flow.train.lr},
                           {"warmup", flow.train.warmup}, {"weight_decay", flow.train.weight_decay},
                           {"seed", flow.train.seed}, {"log_every", flow.train.log_every}}}}},
      {"inference", {{"n_steps", inference.n_steps}, {"cfg_scale", inference.cfg_scale}, {"seed", inference.seed}}},
      {"eval", {{"seed", eval.seed}, {"swap_samples", eval.swap_samples}, {"swap_references", eval.swap_references},
                {"swap_max_latent_frames", eval.swap_max_latent_frames}, {"slice_s", eval.similarity.slice_s},
                {"overlap_s", eval.similarity.overlap_s}, {"histogram_bins", eval.similarity.histogram_bins},
                {"attention_songs", eval.attention_songs}, {"plot_songs", eval.plot_songs}}},
  };
}

PipelineConfig PipelineConfig::from_json(const json& in) {
  require(in.is_object(), ErrorKind::kConfig, "config must be a JSON object");
  const std::string name = in.value("profile", std::string("desk"));
  json j = pipeline::profile(name).to_json();
  j.merge_patch(in);

  PipelineConfig c;
  c.profile = name;
  Reader top{j, "config", {"profile", "corpus", "scheduler", "codec", "flow", "inference", "eval"}};
  top.finish();

  const json& cj = section_of(j, "corpus");
  Reader rc{cj, "corpus", {"config"}};
  rc("seed", c.corpus.seed)("n_songs", c.corpus.n_songs)("n_heldout", c.corpus.n_heldout);
  rc.finish();
  try {
    c.corpus.config = corpus::CorpusConfig::from_json(section_of(cj, "config"));
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("corpus.config: ") + e.what());
  }

  Reader rs{section_of(j, "scheduler"), "scheduler", {}};
  rs("delta_id", c.scheduler.delta_id)("delta_multi", c.scheduler.delta_multi);
  rs.finish();

  const json& kj = section_of(j, "codec");
  Reader rk{kj, "codec", {"model", "vae", "texture"}};
  rk("seed", c.codec.seed);
  rk.finish();
  try {
    c.codec.model = codec::CodecConfig::from_json(section_of(kj, "model"));
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("codec.model: ") + e.what());
  }
  c.codec.vae = stage_from(section_of(kj, "vae"), "codec.vae", c.codec.vae);
  c.codec.texture = stage_from(section_of(kj, "texture"), "codec.texture", c.codec.texture);

  const json& fj = section_of(j, "flow");
  Reader rf{fj, "flow", {"model", "train"}};
  rf.finish();
  try {
    c.flow.model = flow::FlowConfig::from_json(section_of(fj, "model"));
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, std::string("flow.model: ") + e.what());
  }
  Reader rt{section_of(fj, "train"), "flow.train", {}};
  rt("steps", c.flow.train.steps)("batch", c.flow.train.batch)("lr", c.flow.train.lr)("warmup", c.flow.train.warmup)(
      "weight_decay", c.flow.train.weight_decay)("seed", c.flow.train.seed)("log_every", c.flow.train.log_every);
  rt.finish();

  Reader ri{section_of(j, "inference"), "inference", {}};
  ri("n_steps", c.inference.n_steps)("cfg_scale", c.inference.cfg_scale)("seed", c.inference.seed);
  ri.finish();

  Reader re{section_of(j, "eval"), "eval", {}};
  re("seed", c.eval.seed)("swap_samples", c.eval.swap_samples)("swap_references", c.eval.swap_references)(
      "swap_max_latent_frames", c.eval.swap_max_latent_frames)("slice_s", c.eval.similarity.slice_s)(
      "overlap_s", c.eval.similarity.overlap_s)("histogram_bins", c.eval.similarity.histogram_bins)(
      "attention_songs", c.eval.attention_songs)("plot_songs", c.eval.plot_songs);
  re.finish();

  c.validate();
  return c;
}

void PipelineConfig::apply_overrides(const std::map<std::string, std::string>& overrides) {
  if (overrides.empty()) return;
  json j = to_json();
  for (const auto& [key, text] : overrides) {
    json* node = &j;
    std::stringstream path(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(path, part, '.')) parts.push_back(part);
    require(!parts.empty(), ErrorKind::kConfig, "empty override key");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      require(node->is_object() && node->contains(parts[i]), ErrorKind::kConfig, "unknown override key '" + key + "'");
      node = &(*node)[parts[i]];
    }
    require(node->is_object() && node->contains(parts.back()), ErrorKind::kConfig,
            "unknown override key '" + key + "'");
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    (*node)[parts.back()] = std::move(value);
  }
  *this = from_json(j);
}

std::string PipelineConfig::section_hash(const std::vector<std::string>& sections) const {
  const json j = to_json();
  json picked = json::object();
  for (const auto& s : sections) {
    std::string pointer = "/";
    for (char ch : s) pointer += ch == '.' ? '/' : ch;
    const json::json_pointer p(pointer);
    require(j.contains(p), ErrorKind::kConfig, "unknown config section '" + s + "'");
    picked[s] = j.at(p);
  }
  return io::sha256_hex(picked.dump());
}

PipelineConfig profile(const std::string& name) {
  PipelineConfig c;
  c.profile = name;
  c.codec.vae = {.steps = 1000, .batch = 8, .chunk_frames = 64, .lr = 2e-3, .warmup = 50};
  c.codec.texture = c.codec.vae;
  c.flow.train.steps = 8500;
  c.flow.train.lr = 3e-3;
  if (name == "desk") return c;
  if (name == "smoke") {
    c.corpus.n_songs = 6;
    c.corpus.n_heldout = 2;
    c.corpus.config.duration_min = 3.0;
    c.corpus.config.duration_max = 6.0;
    c.codec.model.hidden = 32;
    c.codec.vae.steps = 10;
    c.codec.vae.batch = 2;
    c.codec.texture = c.codec.vae;
    c.flow.model.d_model = 32;
    c.flow.model.d_ff = 64;
    c.flow.model.n_layers = 1;
    c.flow.train.steps = 10;
    c.flow.train.batch = 4;
    c.flow.train.warmup = 2;
    c.flow.train.log_every = 1;
    c.inference.n_steps = 4;
    c.eval.swap_samples = 2;
    c.eval.swap_references = 2;
    c.eval.swap_max_latent_frames = 32;
    c.eval.attention_songs = 1;
    return c;
  }
  if (name == "paper_fullscale") {
    // Full-scale reference values; the step counts need a GPU cluster.
    c.codec.vae = {.steps = 970000, .batch = 32, .chunk_frames = 64, .lr = 1.5e-4, .warmup = 1000};
    c.codec.texture = {.steps = 200000, .batch = 8, .chunk_frames = 64, .lr = 5e-5, .warmup = 1000};
    c.flow.train.steps = 950000;
    c.flow.train.batch = 4;
    c.flow.train.lr = 1e-5;
    c.flow.train.warmup = 1000;
    c.inference.n_steps = 50;
    c.inference.cfg_scale = 4.0;
    c.eval.swap_samples = 50;
    c.eval.swap_references = 10;
    return c;
  }
  fail(ErrorKind::kConfig, "unknown profile '" + name + "'");
}

std::vector<std::string> profile_names() { return {"desk", "smoke", "paper_fullscale"}; }

std::map<std::string, std::string> environment_overrides(const std::string& prefix) {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos || entry.compare(0, prefix.size(), prefix) != 0) continue;
    std::string key = entry.substr(prefix.size(), eq - prefix.size());
    if (key.find("__") == std::string::npos) continue;  // not a SECTION__KEY variable
    std::string dotted;
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (key.compare(i, 2, "__") == 0) {
        dotted += '.';
        ++i;
      } else {
        dotted += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    out[dotted] = entry.substr(eq + 1);
  }
  return out;
}

PipelineConfig load_config(const std::optional<fs::path>& path, const std::map<std::string, std::string>& overrides) {
  PipelineConfig c;
  if (path) {
    require(fs::exists(*path), ErrorKind::kConfig, "config file " + path->string() + " not found");
    const json j = json::parse(io::read_text(*path), nullptr, false);
    require(!j.is_discarded(), ErrorKind::kConfig, path->string() + " is not valid JSON");
    c = PipelineConfig::from_json(j);
  } else {
    c = profile("desk");
  }
  c.apply_overrides(overrides);
  return c;
}

// ---------------------------------------------------------------- artifacts

void require_artifact(const fs::path& path, const std::string& what) {
  require(fs::exists(path), ErrorKind::kMissingArtifact, what + " not found at " + path.string());
}

json RunManifest::to_json() const {
  return {{"command", command}, {"config_hash", config_hash}, {"source_revision", source_revision},
          {"seeds", seeds},     {"inputs", inputs},           {"outputs", outputs},
          {"wall_time_s", wall_time_s}};
}

std::string source_revision() { return ENSEMBLE_SOURCE_REVISION; }

fs::path write_manifest(const Layout& layout, const RunManifest& m) {
  fs::create_directories(layout.manifests());
  const fs::path p = layout.manifests() / (m.command + ".json");
  io::write_text(p, m.to_json().dump(2));
  return p;
}

// ---------------------------------------------------------------- data

namespace {

const std::vector<std::string> kVaeSections{"corpus", "scheduler", "codec.model", "codec.vae", "codec.seed"};
const std::vector<std::string> kTextureSections{"corpus", "scheduler", "codec"};
const std::vector<std::string> kFlowSections{"corpus", "scheduler", "codec", "flow"};

void emit(const Log& log, const std::string& line) {
  if (log) log(line);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

CorpusData load_corpus(const PipelineConfig& config, const Layout& layout) {
  require_artifact(layout.corpus() / "index.json", "corpus index (run synth-data)");
  const corpus::CorpusIndex index = corpus::read_index(layout.corpus());
  require(index.seed == config.corpus.seed && index.song_ids.size() == config.corpus.n_songs, ErrorKind::kConfig,
          "corpus on disk was synthesized with a different corpus configuration");
  CorpusData d;
  d.n_train = config.corpus.n_songs - config.corpus.n_heldout;
  d.songs.resize(index.song_ids.size());
  d.schedules.resize(index.song_ids.size());
  const long n = static_cast<long>(index.song_ids.size());
  std::vector<std::string> errors(d.songs.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    try {
      d.songs[k] = corpus::read_song(layout.corpus(), index.song_ids[k]);
      d.schedules[k] = prompt::schedule_song(d.songs[k], config.scheduler);
    } catch (const std::exception& e) {
      errors[k] = e.what();
    }
  }
  for (std::size_t k = 0; k < errors.size(); ++k)
    require(errors[k].empty(), ErrorKind::kIo, index.song_ids[k] + ": " + errors[k]);
  return d;
}

CodecData prepare_codec_data(const PipelineConfig& config, const CorpusData& corpus, const codec::FeatureNorm* norm) {
  CodecData d;
  const codec::CodecConfig& cc = config.codec.model;
  if (norm) {
    d.norm = *norm;
  } else {
    std::vector<Matrix> raw(corpus.n_train);
    const long n = static_cast<long>(corpus.n_train);
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) raw[static_cast<std::size_t>(i)] = codec::song_features(corpus.songs[static_cast<std::size_t>(i)], cc);
    d.norm = codec::FeatureNorm::fit(raw);
  }
  d.songs.resize(corpus.songs.size());
  const long n = static_cast<long>(corpus.songs.size());
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    d.songs[k] = codec::codec_song(corpus.songs[k], d.norm, corpus.schedules[k], cc);
  }
  return d;
}

FlowData prepare_flow_data(const PipelineConfig& config, const CorpusData& corpus, const CodecData& codec_data,
                           const codec::Codec& vae, const codec::Codec& texture, const flow::LatentNorm* norm) {
  std::vector<Matrix> latents, textures;
  for (const auto& s : codec_data.songs) {
    latents.push_back(codec::encode_mean(vae, s.features));
    textures.push_back(codec::extract_texture(texture, s.features).sequence);
  }
  FlowData d;
  d.norm = norm ? *norm : flow::LatentNorm::fit(std::vector<Matrix>(latents.begin(), latents.begin() + static_cast<std::ptrdiff_t>(corpus.n_train)));
  for (std::size_t i = 0; i < latents.size(); ++i)
    d.songs.push_back(flow::flow_song(codec_data.songs[i], corpus.songs[i].manifest, corpus.schedules[i],
                                      d.norm.apply(latents[i]), textures[i], config.flow.model));
  return d;
}

codec::TrainConfig stage_train_config(const StageTraining& stage, std::uint64_t seed, std::size_t steps_limit) {
  codec::TrainConfig t;
  t.steps = steps_limit ? std::min(steps_limit, stage.steps) : stage.steps;
  t.batch = stage.batch;
  t.chunk_frames = stage.chunk_frames;
  t.lr = stage.lr;
  t.warmup = stage.warmup;
  t.seed = seed;
  t.log_every = 1;
  return t;
}

// ---------------------------------------------------------------- commands

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_codec_trace(const fs::path& path, const codec::TrainResult& r) {
  std::ostringstream os;
  os << "step,total,stft,kl,feature,adversarial\n" << std::setprecision(17);
  for (const auto& rec : r.curve)
    os << rec.step << ',' << rec.loss.total << ',' << rec.loss.stft << ',' << rec.loss.kl << ',' << rec.loss.feature
       << ',' << rec.loss.adversarial << '\n';
  io::write_text(path, os.str());
}

codec::Codec load_checked_codec(const fs::path& path, const std::string& what, const std::string& expected_hash,
                                codec::CodecBundle& bundle) {
  require_artifact(path, what);
  codec::Codec c = codec::load_codec(path, bundle);
  require(bundle.config_hash == expected_hash, ErrorKind::kConfig,
          what + " at " + path.string() + " was trained with a different configuration; retrain it");
  return c;
}

struct LoadedModels {
  codec::CodecBundle vae_bundle, texture_bundle;
  std::unique_ptr<codec::Codec> vae, texture;
  flow::FlowBundle flow_bundle;
  std::unique_ptr<flow::FlowModel> flow;
  std::unique_ptr<codec::Vocoder> vocoder;

  eval::GenerationModels view() const {
    return {flow.get(), &flow_bundle.norm, vae.get(), texture.get(), &vae_bundle.norm, vocoder.get()};
  }
};

LoadedModels load_models(const PipelineConfig& config, const Layout& layout) {
  LoadedModels m;
  // The flow is checked first so that a missing flow checkpoint is the error reported.
  require_artifact(layout.flow_checkpoint(), "flow checkpoint (run train-flow)");
  m.flow = std::make_unique<flow::FlowModel>(flow::load_flow(layout.flow_checkpoint(), m.flow_bundle));
  require(m.flow_bundle.config_hash == config.section_hash(kFlowSections), ErrorKind::kConfig,
          "flow checkpoint was trained with a different configuration; retrain it");
  m.vae = std::make_unique<codec::Codec>(
      load_checked_codec(layout.vae_checkpoint(), "vae checkpoint", config.section_hash(kVaeSections), m.vae_bundle));
  m.texture = std::make_unique<codec::Codec>(load_checked_codec(
      layout.texture_checkpoint(), "texture checkpoint", config.section_hash(kTextureSections), m.texture_bundle));
  require(m.flow_bundle.codec_hash == m.texture_bundle.config_hash, ErrorKind::kConfig,
          "flow checkpoint was trained against a different codec");
  m.vocoder = std::make_unique<codec::Vocoder>(config.codec.model.features);
  return m;
}

RunManifest start_manifest(const std::string& command, const PipelineConfig& config) {
  RunManifest m;
  m.command = command;
  m.config_hash = config.section_hash({"corpus", "scheduler", "codec", "flow", "inference", "eval"});
  m.source_revision = source_revision();
  return m;
}

void finish(const Layout& layout, RunManifest& m, CommandResult& r, Clock::time_point t0) {
  for (const auto& p : r.outputs) m.outputs.push_back(p.string());
  m.wall_time_s = seconds_since(t0);
  r.outputs.push_back(write_manifest(layout, m));
}

void record_input(RunManifest& m, const fs::path& p) { m.inputs[p.string()] = io::sha256_file(p); }

}  // namespace

CommandResult synth_data(const PipelineConfig& config, const Layout& layout, const Log& log) {
  const auto t0 = Clock::now();
  config.validate();
  RunManifest man = start_manifest("synth-data", config);
  man.seeds["corpus"] = config.corpus.seed;
  fs::create_directories(layout.corpus());
  const auto songs = corpus::make_corpus(config.corpus.seed, config.corpus.n_songs, config.corpus.config);
  corpus::CorpusIndex index;
  index.seed = config.corpus.seed;
  index.config = config.corpus.config;
  CommandResult r;
  for (const auto& s : songs) {
    corpus::write_song(layout.corpus(), s);
    index.song_ids.push_back(s.manifest.song_id);
    index.song_seeds.push_back(s.manifest.render_seed);
    for (const char* ext : {".json", ".wav", "_f0.csv"}) r.outputs.push_back(layout.corpus() / (s.manifest.song_id + ext));
  }
  corpus::write_index(layout.corpus(), index);
  const fs::path idx = layout.corpus() / "index.json";
  r.outputs.push_back(idx);
  r.summary = {{"songs", songs.size()}, {"index_sha256", io::sha256_file(idx)}};
  emit(log, "synthesized " + std::to_string(songs.size()) + " songs, index " + r.summary["index_sha256"].get<std::string>());
  finish(layout, man, r, t0);
  return r;
}

CommandResult train_vae(const PipelineConfig& config, const Layout& layout, const Log& log, StepLimit limit) {
  const auto t0 = Clock::now();
  RunManifest man = start_manifest("train-vae", config);
  const CorpusData corpus = load_corpus(config, layout);
  record_input(man, layout.corpus() / "index.json");
  const CodecData data = prepare_codec_data(config, corpus, nullptr);
  const std::vector<codec::CodecSong> train(data.songs.begin(), data.songs.begin() + static_cast<std::ptrdiff_t>(corpus.n_train));

  codec::Codec model(config.codec.model, config.codec.seed);
  const codec::TrainConfig tc = stage_train_config(config.codec.vae, config.codec.seed, limit.steps);
  man.seeds["codec"] = config.codec.seed;
  const auto result = codec::train_vae(model, data.norm, train, tc, [&](const codec::LossRecord& rec) {
    if (rec.step % 50 == 0 || rec.step + 1 == tc.steps)
      emit(log, "vae step " + std::to_string(rec.step) + " loss " + fixed(rec.loss.total));
  });
  fs::create_directories(layout.checkpoints());
  fs::create_directories(layout.logs());
  codec::save_codec(layout.vae_checkpoint(), model,
                    codec::CodecBundle{config.codec.model, data.norm, 1, config.section_hash(kVaeSections)});
  write_codec_trace(layout.logs() / "vae_loss.csv", result);
  CommandResult r;
  r.outputs = {layout.vae_checkpoint(), layout.logs() / "vae_loss.csv"};
  r.summary = {{"steps", tc.steps}, {"final_loss", result.curve.back().loss.total}};
  finish(layout, man, r, t0);
  return r;
}

CommandResult train_texture(const PipelineConfig& config, const Layout& layout, const Log& log, StepLimit limit) {
  const auto t0 = Clock::now();
  RunManifest man = start_manifest("train-texture", config);
  codec::CodecBundle vb;
  codec::Codec model =
      load_checked_codec(layout.vae_checkpoint(), "vae checkpoint (run train-vae)", config.section_hash(kVaeSections), vb);
  record_input(man, layout.vae_checkpoint());
  const CorpusData corpus = load_corpus(config, layout);
  const CodecData data = prepare_codec_data(config, corpus, &vb.norm);
  const std::vector<codec::CodecSong> train(data.songs.begin(), data.songs.begin() + static_cast<std::ptrdiff_t>(corpus.n_train));

  const std::uint64_t seed = derive_seed(config.codec.seed, 2);
  man.seeds["codec_texture"] = seed;
  const codec::TrainConfig tc = stage_train_config(config.codec.texture, seed, limit.steps);
  const auto result = codec::train_texture_stage(model, vb.norm, train, tc, [&](const codec::LossRecord& rec) {
    if (rec.step % 50 == 0 || rec.step + 1 == tc.steps)
      emit(log, "texture step " + std::to_string(rec.step) + " loss " + fixed(rec.loss.total));
  });
  fs::create_directories(layout.logs());
  codec::save_codec(layout.texture_checkpoint(), model,
                    codec::CodecBundle{config.codec.model, vb.norm, 2, config.section_hash(kTextureSections)});
  write_codec_trace(layout.logs() / "texture_loss.csv", result);
  CommandResult r;
  r.outputs = {layout.texture_checkpoint(), layout.logs() / "texture_loss.csv"};
  r.summary = {{"steps", tc.steps}, {"final_loss", result.curve.back().loss.total}};
  finish(layout, man, r, t0);
  return r;
}

CommandResult train_flow(const PipelineConfig& config, const Layout& layout, const Log& log, StepLimit limit) {
  const auto t0 = Clock::now();
  RunManifest man = start_manifest("train-flow", config);
  codec::CodecBundle vb, tb;
  const codec::Codec vae =
      load_checked_codec(layout.vae_checkpoint(), "vae checkpoint (run train-vae)", config.section_hash(kVaeSections), vb);
  const codec::Codec texture = load_checked_codec(layout.texture_checkpoint(), "texture checkpoint (run train-texture)",
                                                  config.section_hash(kTextureSections), tb);
  record_input(man, layout.vae_checkpoint());
  record_input(man, layout.texture_checkpoint());
  const CorpusData corpus = load_corpus(config, layout);
  const CodecData cdata = prepare_codec_data(config, corpus, &vb.norm);
  const FlowData fdata = prepare_flow_data(config, corpus, cdata, vae, texture);
  const std::vector<flow::FlowSong> train(fdata.songs.begin(), fdata.songs.begin() + static_cast<std::ptrdiff_t>(corpus.n_train));

  flow::FlowModel model(config.flow.model, config.flow.train.seed);
  flow::FlowTrainConfig tc = config.flow.train;
  if (limit.steps) tc.steps = std::min(tc.steps, limit.steps);
  man.seeds["flow"] = tc.seed;
  std::ostringstream trace;
  trace << "step,loss\n" << std::setprecision(17);
  double window = 0.0;
  flow::train_flow(model, train, tc, [&](const flow::FlowLossRecord& rec) {
    trace << rec.step << ',' << rec.loss << '\n';
    window += rec.loss;
    const std::size_t every = std::max<std::size_t>(1, tc.log_every);
    if ((rec.step + 1) % every == 0) {
      emit(log, "flow step " + std::to_string(rec.step + 1) + " loss " + fixed(window / static_cast<double>(every)));
      window = 0.0;
    }
  });
  fs::create_directories(layout.logs());
  flow::save_flow(layout.flow_checkpoint(), model,
                  flow::FlowBundle{config.flow.model, fdata.norm, config.section_hash(kFlowSections), tb.config_hash});
  io::write_text(layout.logs() / "flow_loss.csv", trace.str());
  CommandResult r;
  r.outputs = {layout.flow_checkpoint(), layout.logs() / "flow_loss.csv"};
  r.summary = {{"steps", tc.steps}};
  finish(layout, man, r, t0);
  return r;
}

CommandResult generate(const PipelineConfig& config, const Layout& layout, const fs::path& request, const Log& log) {
  const auto t0 = Clock::now();
  RunManifest man = start_manifest("generate", config);
  const LoadedModels models = load_models(config, layout);
  require(fs::exists(request), ErrorKind::kConfig, "request file " + request.string() + " not found");
  const json req = json::parse(io::read_text(request), nullptr, false);
  require(req.is_object() && req.contains("song"), ErrorKind::kConfig, "request needs a \"song\" id");
  const std::set<std::string> allowed{"song", "seed", "n_steps", "cfg_scale", "texture_reference", "max_latent_frames", "name"};
  for (const auto& [k, _] : req.items()) require(allowed.contains(k), ErrorKind::kConfig, "unknown request key '" + k + "'");
  record_input(man, request);

  const CorpusData corpus = load_corpus(config, layout);
  const CodecData cdata = prepare_codec_data(config, corpus, &models.vae_bundle.norm);
  const FlowData fdata = prepare_flow_data(config, corpus, cdata, *models.vae, *models.texture, &models.flow_bundle.norm);
  const auto find = [&](const std::string& id) {
    for (std::size_t i = 0; i < fdata.songs.size(); ++i)
      if (fdata.songs[i].song_id == id) return i;
    fail(ErrorKind::kConfig, "song '" + id + "' is not in the corpus");
  };
  const std::size_t si = find(req.at("song").get<std::string>());
  flow::SampleConfig sc;
  sc.seed = req.value("seed", config.inference.seed);
  sc.n_steps = req.value("n_steps", config.inference.n_steps);
  sc.cfg_scale = req.value("cfg_scale", config.inference.cfg_scale);
  man.seeds["sample"] = sc.seed;
  std::optional<codec::TextureLatent> tex;
  if (req.contains("texture_reference"))
    tex = codec::extract_texture(*models.texture, cdata.songs[find(req.at("texture_reference").get<std::string>())].features);
  const eval::Generation g =
      eval::generate_audio(models.view(), fdata.songs[si], sc, tex, req.value("max_latent_frames", std::size_t{0}));

  const std::string name = req.value("name", fdata.songs[si].song_id + "_gen");
  fs::create_directories(layout.generated());
  const fs::path wav = layout.generated() / (name + ".wav"), lat = layout.generated() / (name + ".latent"),
                 meta = layout.generated() / (name + ".json");
  io::write_wav(wav, g.waveform, config.codec.model.features.sample_rate);
  io::write_matrix(lat, g.latent, config.flow.model.latent_rate);
  json m = {{"song", fdata.songs[si].song_id},
            {"seed", sc.seed},
            {"n_steps", sc.n_steps},
            {"cfg_scale", sc.cfg_scale},
            {"latent_frames", g.latent.rows()},
            {"samples", g.waveform.size()},
            {"waveform_sha256", io::sha256_doubles(g.waveform)}};
  if (req.contains("texture_reference")) m["texture_reference"] = req.at("texture_reference");
  io::write_text(meta, m.dump(2));
  emit(log, "wrote " + wav.string());
  CommandResult r;
  r.outputs = {wav, lat, meta};
  r.summary = m;
  finish(layout, man, r, t0);
  return r;
}

Evaluation evaluation_from_string(const std::string& name) {
  if (name == "texture_swap") return Evaluation::kTextureSwap;
  if (name == "similarity") return Evaluation::kSimilarity;
  if (name == "attention") return Evaluation::kAttention;
  if (name == "plots") return Evaluation::kPlots;
  if (name == "all") return Evaluation::kAll;
  fail(ErrorKind::kConfig, "unknown evaluation '" + name + "' (texture_swap, similarity, attention, plots, all)");
}

namespace {

// Feature rows of one segment, cut to a whole number of latent frames.
Matrix segment_features(const codec::CodecSong& song, const corpus::Segment& seg, const codec::CodecConfig& cc) {
  const double fr = cc.features.frame_rate;
  const auto begin = std::min(song.features.rows(), static_cast<std::size_t>(std::llround(seg.start * fr)));
  auto end = std::min(song.features.rows(), static_cast<std::size_t>(std::llround(seg.end * fr)));
  end = begin + (end - begin) / cc.factor * cc.factor;
  require(end > begin, ErrorKind::kInsufficientAudio, song.song_id + ": reference segment shorter than a latent frame");
  Matrix out(end - begin, song.features.cols());
  std::copy_n(song.features.row(begin).data(), out.size(), out.data());
  return out;
}

// Held-out reference clips alternating between solo and multi-singer segments.
std::vector<eval::ReferenceClip> reference_clips(const CorpusData& corpus, const CodecData& cdata,
                                                 const codec::CodecConfig& cc, std::size_t n) {
  std::vector<eval::ReferenceClip> out;
  const std::size_t held = corpus.songs.size() - corpus.n_train;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t si = corpus.n_train + j % held;
    const auto& segs = corpus.songs[si].manifest.segments;
    const bool want_multi = j % 2 == 1;
    std::size_t pick = 0;
    for (std::size_t k = 0; k < segs.size(); ++k)
      if ((segs[k].active_singers.size() > 1) == want_multi) {
        pick = k;
        break;
      }
    out.push_back({corpus.songs[si].manifest.song_id + "/segment" + std::to_string(pick),
                   segment_features(cdata.songs[si], segs[pick], cc)});
  }
  return out;
}

}  // namespace

CommandResult evaluate(const PipelineConfig& config, const Layout& layout, Evaluation which, const Log& log) {
  const auto t0 = Clock::now();
  RunManifest man = start_manifest("evaluate", config);
  man.seeds["eval"] = config.eval.seed;
  const bool all = which == Evaluation::kAll;
  const bool need_models = all || which == Evaluation::kTextureSwap || which == Evaluation::kAttention;
  std::optional<LoadedModels> models;
  if (need_models) {
    models = load_models(config, layout);
    record_input(man, layout.flow_checkpoint());
    record_input(man, layout.vae_checkpoint());
    record_input(man, layout.texture_checkpoint());
  }
  const CorpusData corpus = load_corpus(config, layout);
  record_input(man, layout.corpus() / "index.json");
  fs::create_directories(layout.reports());
  CommandResult r;
  r.summary = json::object();

  if (all || which == Evaluation::kTextureSwap) {
    const CodecData cdata = prepare_codec_data(config, corpus, &models->vae_bundle.norm);
    const FlowData fdata =
        prepare_flow_data(config, corpus, cdata, *models->vae, *models->texture, &models->flow_bundle.norm);
    const std::vector<flow::FlowSong> held(fdata.songs.begin() + static_cast<std::ptrdiff_t>(corpus.n_train), fdata.songs.end());
    const auto refs = reference_clips(corpus, cdata, config.codec.model, config.eval.swap_references);
    eval::TextureSwapConfig tc;
    tc.n_samples = config.eval.swap_samples;
    tc.n_references = config.eval.swap_references;
    tc.seed = config.eval.seed;
    tc.n_steps = config.inference.n_steps;
    tc.cfg_scale = config.inference.cfg_scale;
    tc.max_latent_frames = config.eval.swap_max_latent_frames;
    eval::TextureSwapReport rep;
    try {
      rep = eval::texture_swap_protocol(models->view(), held, refs, tc);
    } catch (const Error& e) {
      fail(ErrorKind::kEvaluation, e.what());
    }
    const fs::path p = layout.reports() / "texture_swap.json";
    io::write_text(p, eval::report_envelope("texture_swap", rep.to_json()).dump(2));
    r.outputs.push_back(p);
    r.summary["texture_swap"] = rep.aggregate.to_json();
    emit(log, "texture swap, " + std::to_string(rep.entries.size()) + " comparisons\n" +
                  rep.format());
  }
  if (all || which == Evaluation::kSimilarity) {
    const corpus::EmbedConfig ec = config.scheduler.embed;
    eval::SimilarityReport rep;
    try {
      rep = eval::similarity_distributions(corpus.songs, [&](std::span<const double> x) { return corpus::embed_segment(x, ec); },
                                           config.eval.similarity);
    } catch (const Error& e) {
      fail(ErrorKind::kEvaluation, e.what());
    }
    const fs::path p = layout.reports() / "similarity.json";
    io::write_text(p, eval::report_envelope("similarity", rep.to_json()).dump(2));
    r.outputs.push_back(p);
    r.summary["similarity"] = {{"intra_mean", rep.intra.mean}, {"cross_mean", rep.cross.mean},
                               {"n_intra_pairs", rep.intra.n_pairs}, {"n_cross_pairs", rep.cross.n_pairs}};
    emit(log, "similarity intra " + fixed(rep.intra.mean) + " cross " + fixed(rep.cross.mean));
  }
  if (all || which == Evaluation::kAttention) {
    const std::size_t n = std::min(config.eval.attention_songs, corpus.songs.size() - corpus.n_train);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t si = corpus.n_train + i;
      const auto rep = eval::attention_report(models->flow->fuser(), corpus.songs[si].manifest, corpus.schedules[si]);
      for (auto& p : eval::write_attention_report(layout.reports() / "attention", rep)) r.outputs.push_back(p);
    }
    r.summary["attention"] = {{"songs", n}};
    emit(log, "attention reports for " + std::to_string(n) + " songs");
  }
  if (all || which == Evaluation::kPlots) {
    const std::size_t n = std::min(config.eval.plot_songs, corpus.songs.size() - corpus.n_train);
    const fs::path dir = layout.reports() / "plots";
    for (std::size_t i = 0; i < n; ++i) {
      const auto& song = corpus.songs[corpus.n_train + i];
      // One solo and one multi-singer excerpt per song when present.
      for (const bool multi : {false, true}) {
        for (const auto& seg : song.manifest.segments) {
          if ((seg.active_singers.size() > 1) != multi) continue;
          const auto sr = static_cast<double>(song.manifest.sample_rate);
          const auto b = static_cast<std::size_t>(seg.start * sr);
          const auto e = std::min(song.waveform.size(), static_cast<std::size_t>(seg.end * sr));
          const std::span<const double> x(song.waveform.data() + b, e - b);
          const std::string stem = song.manifest.song_id + (multi ? "_multi" : "_solo");
          for (const auto& p : {eval::emit_pitch_salience(x, dir / (stem + "_salience.png")),
                                eval::emit_mel_spectrogram(x, dir / (stem + "_mel.png"))}) {
            r.outputs.push_back(p);
            r.outputs.push_back(fs::path(p).replace_extension(".csv"));
          }
          break;
        }
      }
    }
    r.summary["plots"] = {{"songs", n}};
    emit(log, "plots for " + std::to_string(n) + " songs");
  }
  const fs::path summary = layout.reports() / "summary.json";
  io::write_text(summary, eval::report_envelope("summary", r.summary).dump(2));
  r.outputs.push_back(summary);
  finish(layout, man, r, t0);
  return r;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
      return 2;
    case ErrorKind::kMissingArtifact:
      return 3;
    case ErrorKind::kTrainingFailure:
      return 4;
    case ErrorKind::kEvaluation:
    case ErrorKind::kInsufficientOverlap:
    case ErrorKind::kProtocol:
    case ErrorKind::kSamplingFailure:
      return 5;
    default:
      return 1;
  }
}

}  // namespace ensemble::pipeline

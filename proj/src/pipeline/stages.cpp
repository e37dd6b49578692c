#include "ihk/pipeline/stages.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstdio>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "ihk/bodyfit/fit.hpp"
#include "ihk/common/array_file.hpp"
#include "ihk/common/hashing.hpp"
#include "ihk/common/image_io.hpp"
#include "ihk/common/log.hpp"
#include "ihk/common/module_io.hpp"
#include "ihk/genmodels/checkpoint.hpp"
#include "ihk/genmodels/conditions.hpp"
#include "ihk/genmodels/toy_data.hpp"
#include "ihk/pipeline/captions.hpp"
#include "ihk/pipeline/rejection.hpp"

namespace ihk::pipeline {

namespace fs = std::filesystem;

std::string StageCache::key(const std::string& stage, const nlohmann::json& config,
                            const std::vector<std::string>& upstream_hashes) {
  return sha256_hex(nlohmann::json{{"stage", stage}, {"config", config}, {"upstream", upstream_hashes}}.dump());
}

std::optional<StageOutput> StageCache::lookup(const std::string& stage, const std::string& key) const {
  const auto dir = root_ / stage / key;
  const auto index = dir / "stage.json";
  if (!fs::exists(index)) return std::nullopt;
  const auto text = read_file_bytes(index);
  const auto j = nlohmann::json::parse(text, nullptr, false);
  bool ok = !j.is_discarded() && j.contains("meta") && j.contains("files");
  StageOutput out{dir, {}, {}, sha256_hex(text)};
  if (ok) {
    out.meta = j.at("meta");
    out.files = j.at("files").get<std::map<std::string, std::string>>();
    for (const auto& [name, hash] : out.files) {
      if (!fs::exists(dir / name) || sha256_file(dir / name) != hash) {
        ok = false;
        break;
      }
    }
  }
  if (!ok) {
    log_warn("cache entry " + stage + "/" + key.substr(0, 12) + " is damaged, recomputing");
    fs::remove_all(dir);
    return std::nullopt;
  }
  return out;
}

StageOutput StageCache::store(const std::string& stage, const std::string& key, const nlohmann::json& meta,
                              const std::map<std::string, std::string>& files) const {
  const auto dir = root_ / stage / key;
  std::ostringstream tmp_name;
  tmp_name << ".tmp-" << key.substr(0, 12) << "-" << std::this_thread::get_id();
  const auto tmp = root_ / stage / tmp_name.str();
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  std::map<std::string, std::string> hashes;
  for (const auto& [name, bytes] : files) {
    write_file_bytes(tmp / name, bytes);
    hashes[name] = sha256_hex(bytes);
  }
  const auto index = nlohmann::json{{"meta", meta}, {"files", hashes}}.dump(1);
  write_file_bytes(tmp / "stage.json", index);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  return {dir, meta, hashes, sha256_hex(index)};
}

void PipelineConfig::validate() const {
  if (identities < 0) throw std::invalid_argument("identities must be >= 0");
  if (image_resolution <= 0 || image_resolution % sampling.latent_resolution != 0) {
    throw std::invalid_argument("image_resolution must be a multiple of the sampling latent resolution");
  }
  if (tryoff_candidates < 1 || tryoff_steps < 1) throw std::invalid_argument("try-off needs candidates and steps");
  if (fit_iterations < 0 || fit_init_noise < 0.0) throw std::invalid_argument("bad body-fit settings");
  if (workers < 1) throw std::invalid_argument("workers must be >= 1");
  sampling.validate();
}

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"identities", c.identities},
          {"seed", c.seed},
          {"image_resolution", c.image_resolution},
          {"tryoff_candidates", c.tryoff_candidates},
          {"tryoff_steps", c.tryoff_steps},
          {"sampling", genmodels::to_json(c.sampling)},
          {"fit_iterations", c.fit_iterations},
          {"fit_init_noise", c.fit_init_noise},
          {"budget", c.budget},
          {"workers", c.workers},
          {"seed_captions", c.seed_captions}};
}

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.identities = j.value("identities", c.identities);
  c.seed = j.value("seed", c.seed);
  c.image_resolution = j.value("image_resolution", c.image_resolution);
  c.tryoff_candidates = j.value("tryoff_candidates", c.tryoff_candidates);
  c.tryoff_steps = j.value("tryoff_steps", c.tryoff_steps);
  if (j.contains("sampling")) c.sampling = genmodels::gen_schnell_config_from_json(j.at("sampling"));
  c.fit_iterations = j.value("fit_iterations", c.fit_iterations);
  c.fit_init_noise = j.value("fit_init_noise", c.fit_init_noise);
  c.budget = j.value("budget", c.budget);
  c.workers = j.value("workers", c.workers);
  c.seed_captions = j.value("seed_captions", c.seed_captions);
  c.validate();
  return c;
}

std::vector<std::string> default_seed_captions(const bodyfit::BodyModel& model, int count) {
  std::vector<std::string> out;
  for (int k = 0; k < count; ++k) out.push_back(genmodels::sample_identity(model, 900000 + static_cast<uint64_t>(k)).describe());
  return out;
}

nlohmann::json PipelineModels::fingerprint() const {
  return {{"tryoff", module_hash(*tryoff, genmodels::to_json(tryoff->config()))},
          {"denoiser", module_hash(*denoiser, mvattention::to_json(denoiser->config()))},
          {"generator", module_hash(*generator, splat::to_json(generator->config()))},
          {"schedule_steps", schedule.size()}};
}

PipelineModels load_pipeline_models(const bodyfit::BodyModel& body, const nlohmann::json& config, uint64_t seed) {
  const auto ckpt = config.value("checkpoints", nlohmann::json::object());
  const auto cfgs = config.value("models", nlohmann::json::object());
  auto model_config = [&](const char* name) -> nlohmann::json {
    if (ckpt.contains(name)) return genmodels::read_checkpoint_info(ckpt.at(name).get<std::string>()).config;
    return cfgs.value(name, nlohmann::json::object());
  };
  torch::manual_seed(seed);
  PipelineModels m;
  m.body = &body;
  m.tryoff = genmodels::FlowModel(genmodels::flow_config_from_json(model_config("tryoff")));
  m.denoiser = mvattention::Denoiser(mvattention::denoiser_config_from_json(model_config("denoiser")));
  m.generator = splat::SplatGenerator(splat::generator_config_from_json(model_config("generator")));
  for (auto [name, module] : {std::pair<const char*, torch::nn::Module*>{"tryoff", m.tryoff.get()},
                              {"denoiser", m.denoiser.get()},
                              {"generator", m.generator.get()}}) {
    if (ckpt.contains(name)) {
      genmodels::load_checkpoint(ckpt.at(name).get<std::string>(), *module);
    } else {
      log_warn(std::string("no ") + name + " checkpoint configured, using untrained weights");
    }
  }
  m.tryoff->eval();
  m.denoiser->eval();
  m.generator->eval();
  m.schedule = diffusion::make_schedule(m.denoiser->config().num_train_steps);
  return m;
}

namespace {

using Files = std::map<std::string, std::string>;

uint64_t identity_seed(const PipelineConfig& c, int64_t index) {
  return c.seed * 1000003ULL + static_cast<uint64_t>(index);
}

nlohmann::json provenance(const std::string& tool, uint64_t seed, double cost, nlohmann::json extra = nlohmann::json::object()) {
  extra["tool"] = tool;
  extra["version"] = "1";
  extra["seed"] = seed;
  extra["cost"] = cost;
  return extra;
}

struct Context {
  const PipelineConfig& config;
  const Clients& clients;
  PipelineModels& models;
  StageCache cache;
  RunStats* stats;
  uint64_t seed;
};

template <class Produce>
StageOutput run_stage(Context& ctx, const std::string& stage, const nlohmann::json& config,
                      const std::vector<const StageOutput*>& upstream, Produce&& produce) {
  std::vector<std::string> hashes;
  for (const auto* u : upstream) hashes.push_back(u->hash);
  const auto key = StageCache::key(stage, config, hashes);
  if (auto hit = ctx.cache.lookup(stage, key)) {
    if (ctx.stats) ++ctx.stats->stages_cached;
    return *hit;
  }
  if (ctx.stats) ++ctx.stats->stages_run;
  Files files;
  auto meta = produce(files);
  return ctx.cache.store(stage, key, meta, files);
}

torch::Tensor read_image(const StageOutput& s, const std::string& name) { return read_png(s.file(name)); }

// Bilinear resize of an H x W x C image.
torch::Tensor resize_image(const torch::Tensor& image, int64_t res) {
  if (image.size(0) == res && image.size(1) == res) return image;
  namespace F = torch::nn::functional;
  auto x = image.permute({2, 0, 1}).unsqueeze(0);
  auto y = F::interpolate(x, F::InterpolateFuncOptions().size(std::vector<int64_t>{res, res}).mode(torch::kBilinear).align_corners(false));
  return y.squeeze(0).permute({1, 2, 0}).clamp(0.0, 1.0).contiguous();
}

}  // namespace

IdentityRecord run_identity(int64_t index, const PipelineConfig& config, const Clients& clients, PipelineModels& models,
                            const fs::path& out_dir, RunStats* stats) {
  config.validate();
  if (!models.body) throw std::invalid_argument("pipeline models lack a body model");
  const auto& body = *models.body;
  Context ctx{config, clients, models, StageCache(out_dir / "cache"), stats, identity_seed(config, index)};
  const auto seed = ctx.seed;
  const auto res = config.image_resolution;
  const auto fingerprint = models.fingerprint();

  IdentityRecord rec;
  char name[32];
  std::snprintf(name, sizeof(name), "subject_%04lld", static_cast<long long>(index));
  rec.name = name;
  rec.seed = seed;

  std::string stage;
  try {
    stage = "caption";
    const auto pool = config.seed_captions.empty() ? default_seed_captions(body) : config.seed_captions;
    const auto caption = run_stage(ctx, stage, {{"pool", sha256_hex(nlohmann::json(pool).dump())}, {"tool", clients.caption->name()}, {"seed", seed}},
                                   {}, [&](Files&) {
                                     CallLog log;
                                     auto c = generate_caption_set(pool, 1, *clients.caption, seed, &log);
                                     return nlohmann::json{{"caption", c.front()},
                                                           {"provenance", provenance(clients.caption->name(), seed, log.cost,
                                                                                     {{"calls", log.entries}})}};
                                   });

    stage = "summarize";
    const auto summary = run_stage(ctx, stage, {{"tool", clients.summarizer->name()}, {"seed", seed}}, {&caption}, [&](Files&) {
      CallLog log;
      auto ladder = summarize_granularities(caption.meta.at("caption").get<std::string>(), *clients.summarizer, seed, &log);
      return nlohmann::json{{"captions", ladder.captions},
                            {"reprompted_levels", ladder.reprompted_levels},
                            {"truncated_levels", ladder.truncated_levels},
                            {"provenance", provenance(clients.summarizer->name(), seed, log.cost,
                                                      {{"calls", log.entries}, {"truncated", !ladder.truncated_levels.empty()}})}};
    });

    stage = "image";
    const auto image = run_stage(ctx, stage, {{"resolution", res}, {"seed", seed}}, {&caption}, [&](Files& files) {
      const auto id = genmodels::sample_identity(body, seed);
      auto person = genmodels::render_color(body, id, genmodels::part_camera(BodyPart::body, ViewLabel::front, res), res);
      files["person.png"] = encode_png(person);
      return nlohmann::json{{"identity", genmodels::to_json(id)},
                            {"garment_label", id.garment_label()},
                            {"provenance", provenance("toy-text-to-image", seed, 0.0)}};
    });

    stage = "tryoff";
    const auto tryoff = run_stage(
        ctx, stage, {{"model", fingerprint.at("tryoff")}, {"candidates", config.tryoff_candidates}, {"steps", config.tryoff_steps}, {"seed", seed}},
        {&image}, [&](Files& files) {
          torch::NoGradGuard no_grad;
          auto c = tryoff_extract(read_image(image, "person.png"), image.meta.at("garment_label").get<std::string>(), models.tryoff,
                                  config.tryoff_candidates, seed, config.tryoff_steps);
          for (std::size_t k = 0; k < c.size(); ++k) files["candidate_" + std::to_string(k + 1) + ".png"] = encode_png(c[k]);
          return nlohmann::json{{"candidates", c.size()},
                                {"provenance", provenance("tryoff-flow:" + fingerprint.at("tryoff").get<std::string>().substr(0, 12), seed, 0.0,
                                                          {{"steps", config.tryoff_steps}})}};
        });

    stage = "rejection";
    const auto rejection = run_stage(ctx, stage, {{"tool", clients.judge->name()}, {"seed", seed}}, {&tryoff, &image, &summary}, [&](Files& files) {
      std::vector<torch::Tensor> candidates;
      for (int k = 1; k <= tryoff.meta.at("candidates").get<int>(); ++k) {
        candidates.push_back(read_image(tryoff, "candidate_" + std::to_string(k) + ".png"));
      }
      JudgeContext context{read_image(image, "person.png"), image.meta.at("garment_label").get<std::string>(),
                           summary.meta.at("captions").at(0).get<std::string>()};
      CallLog log;
      auto sel = reject_negatives(candidates, context, *clients.judge, seed, &log);
      nlohmann::json selected = nullptr;
      if (sel.index) {
        selected = *sel.index;
        files["cloth.png"] = read_file_bytes(tryoff.file("candidate_" + std::to_string(*sel.index + 1) + ".png"));
      }
      return nlohmann::json{{"selected", selected},
                            {"reply", sel.reply},
                            {"provenance", provenance(clients.judge->name(), seed, log.cost,
                                                      {{"calls", log.entries}, {"prompts", sel.prompts}, {"selected", selected}})}};
    });

    stage = "bodyfit";
    const auto fit = run_stage(ctx, stage, {{"iterations", config.fit_iterations}, {"init_noise", config.fit_init_noise}, {"seed", seed}},
                               {&image}, [&](Files&) {
      const auto truth = genmodels::sample_identity(body, seed).params;
      const auto cam = bodyfit::view_camera(ViewLabel::front, 100.0 * static_cast<double>(res) / 128.0,
                                            {static_cast<double>(res) / 2.0, static_cast<double>(res) / 2.0});
      const auto targets = bodyfit::synthesize_targets(body, truth, cam, bodyfit::default_keypoint_weights(body));
      auto init = truth.detached_clone();
      auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
      init.pose = init.pose + config.fit_init_noise * torch::randn(init.pose.sizes(), gen, init.pose.options());
      bodyfit::FitConfig fc;
      fc.iterations = config.fit_iterations;
      const auto result = bodyfit::fit_pose(body, init, cam, targets, fc);
      return nlohmann::json{{"params", bodyfit::to_json(result.params)},
                            {"camera", bodyfit::to_json(cam)},
                            {"rmse_px", bodyfit::weighted_rmse(body, result.params, cam, targets)},
                            {"initial_loss", result.initial_loss},
                            {"final_loss", result.final_loss},
                            {"provenance", provenance("reprojection-fit", seed, 0.0, {{"iterations", config.fit_iterations}})}};
    });

    stage = "mvd";
    const auto mvd = run_stage(
        ctx, stage, {{"denoiser", fingerprint.at("denoiser")}, {"generator", fingerprint.at("generator")}, {"sampling", genmodels::to_json(config.sampling)},
                     {"resolution", res}, {"seed", seed}},
        {&summary, &rejection, &fit}, [&](Files& files) {
          const auto params = bodyfit::body_params_from_json(fit.meta.at("params"));
          const auto cloth = rejection.meta.at("selected").is_null() ? torch::zeros({res, res, 4})
                                                                     : resize_image(read_image(rejection, "cloth.png"), res);
          const auto bundle = genmodels::make_condition_bundle(body, params, cloth, summary.meta.at("captions").at(0).get<std::string>(),
                                                               seed, res, models.denoiser->config().text_dim);
          const auto out = genmodels::gen_schnell(bundle, models.denoiser, models.generator, models.schedule, config.sampling);
          for (std::size_t v = 0; v < 4; ++v) {
            const std::string view(to_string(kCanonicalViews[v]));
            files["body_" + view + ".png"] = encode_png(genmodels::latent_to_image(out.body[static_cast<int64_t>(v)]));
            files["head_" + view + ".png"] = encode_png(genmodels::latent_to_image(out.head[static_cast<int64_t>(v)]));
          }
          files["gaussians.safetensors"] = encode_array_file(splat::to_array_file(*out.gaussians));
          nlohmann::json trace = nlohmann::json::array();
          for (const auto& st : out.trace) trace.push_back(genmodels::to_json(st));
          return nlohmann::json{{"trace", trace},
                                {"provenance", provenance("gen-schnell", seed, 0.0, {{"steps", config.sampling.steps},
                                                                                     {"k_consistent", config.sampling.k_consistent}})}};
        });

    // Assemble the record from cached outputs only, so reruns are byte-identical.
    const auto subject_dir = fs::path("identities") / rec.name;
    fs::create_directories(out_dir / subject_dir);
    auto materialize = [&](const StageOutput& s, const std::string& file) {
      const auto ref = (subject_dir / file).string();
      const auto dst = out_dir / ref;
      const auto& hash = s.files.at(file);
      if (!fs::exists(dst) || sha256_file(dst) != hash) fs::copy_file(s.file(file), dst, fs::copy_options::overwrite_existing);
      rec.files[ref] = hash;
      return ref;
    };
    rec.captions = summary.meta.at("captions").get<std::vector<std::string>>();
    if (!summary.meta.at("truncated_levels").empty()) rec.flags.push_back(kTruncatedFlag);
    if (rejection.meta.at("selected").is_null()) {
      rec.flags.push_back(kRejectedFlag);
    } else {
      rec.cloth_image_ref = materialize(rejection, "cloth.png");
    }
    rec.body_params = bodyfit::body_params_from_json(fit.meta.at("params"));
    rec.camera = bodyfit::camera_from_json(fit.meta.at("camera"));
    for (auto v : kCanonicalViews) {
      rec.mv_body_refs.push_back(materialize(mvd, "body_" + std::string(to_string(v)) + ".png"));
      rec.mv_head_refs.push_back(materialize(mvd, "head_" + std::string(to_string(v)) + ".png"));
    }
    const std::vector<std::pair<std::string, const StageOutput*>> stages{
        {"caption", &caption}, {"summarize", &summary}, {"image", &image}, {"tryoff", &tryoff},
        {"rejection", &rejection}, {"bodyfit", &fit}, {"mvd", &mvd}};
    for (const auto& [n, s] : stages) {
      rec.provenance[n] = s->meta.at("provenance");
      rec.cost += s->meta.at("provenance").at("cost").get<double>();
    }
    rec.complete = true;
  } catch (const std::exception& e) {
    rec.complete = false;
    rec.failed_stage = stage;
    rec.error = e.what();
    log_error(rec.name + " failed at stage " + stage + ": " + e.what());
  }
  if (rec.cost > config.budget) {
    rec.flags.push_back(kBudgetFlag);
    log_warn(rec.name + " cost $" + std::to_string(rec.cost) + " exceeds the $" + std::to_string(config.budget) + " budget");
  }
  rec.id = compute_record_id(rec);
  return rec;
}

nlohmann::json to_json(const BuildSummary& s) {
  return {{"records", s.records},           {"complete", s.complete},
          {"flagged", s.flagged},           {"stages_run", s.stages_run},
          {"stages_cached", s.stages_cached}, {"cost", s.cost},
          {"manifest", s.manifest.string()}};
}

BuildSummary build_dataset(const PipelineConfig& config, const Clients& clients, PipelineModels& models,
                           const fs::path& out_dir) {
  config.validate();
  fs::create_directories(out_dir);
  BuildSummary summary;
  summary.manifest = out_dir / "manifest.jsonl";
  fs::remove(summary.manifest);
  RunStats stats;
  std::atomic<int64_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    for (int64_t i = next++; i < config.identities; i = next++) {
      auto rec = run_identity(i, config, clients, models, out_dir, &stats);
      write_record(rec, summary.manifest);
      std::lock_guard<std::mutex> lock(mu);
      ++summary.records;
      if (rec.complete) ++summary.complete;
      if (!rec.flags.empty()) ++summary.flagged;
      summary.cost += rec.cost;
      log_info(rec.name + (rec.complete ? " done" : " incomplete") + ", cost $" + std::to_string(rec.cost));
    }
  };
  if (config.workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < config.workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (!fs::exists(summary.manifest)) write_file_bytes(summary.manifest, "");
  summary.stages_run = stats.stages_run;
  summary.stages_cached = stats.stages_cached;
  return summary;
}

}  // namespace ihk::pipeline

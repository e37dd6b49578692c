#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/bodyfit/camera.hpp"
#include "ihk/bodyfit/fit.hpp"
#include "ihk/common/array_file.hpp"
#include "ihk/common/image_io.hpp"
#include "ihk/common/log.hpp"
#include "ihk/genmodels/checkpoint.hpp"
#include "ihk/genmodels/gen_hres.hpp"
#include "ihk/genmodels/gen_schnell.hpp"
#include "ihk/genmodels/training.hpp"
#include "ihk/pipeline/captions.hpp"
#include "ihk/pipeline/records.hpp"
#include "ihk/pipeline/rejection.hpp"
#include "ihk/pipeline/stages.hpp"
#include "ihk/splat/gaussians.hpp"

namespace fs = std::filesystem;
using namespace ihk;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::optional<uint64_t> seed;
  bool mock = false;
  std::string out = "out";
  json config = json::object();

  uint64_t seed_or(uint64_t fallback) const { return seed.value_or(config.value("seed", fallback)); }
  json section(const char* name) const { return config.value(name, json::object()); }
  fs::path out_dir() const {
    fs::create_directories(out);
    return out;
  }
};

void write_json(const fs::path& path, const json& j) {
  std::ofstream(path) << j.dump(2) << "\n";
  std::cout << path.string() << "\n";
}

pipeline::Clients clients_for(const Globals& g, const bodyfit::BodyModel& body) {
  return g.mock ? pipeline::mock_clients(body) : pipeline::http_clients(g.section("clients"));
}

std::string checkpoint_path(const Globals& g, const char* name) {
  const auto c = g.section("checkpoints");
  return c.contains(name) ? c.at(name).get<std::string>() : std::string();
}

genmodels::ToySample toy_subject(const bodyfit::BodyModel& body, uint64_t seed, int64_t latent_res) {
  genmodels::ToyDataConfig dc;
  dc.count = 1;
  dc.seed = seed;
  dc.latent_resolution = latent_res;
  return genmodels::make_toy_dataset(body, dc).front();
}

int cmd_caption(const Globals& g, const std::string& text) {
  const auto& body = bodyfit::toy_body_model();
  auto clients = clients_for(g, body);
  const auto seed = g.seed_or(0);
  pipeline::CallLog log;
  auto caption = text;
  if (caption.empty()) {
    auto pool = g.section("pipeline").value("seed_captions", std::vector<std::string>{});
    if (pool.empty()) pool = pipeline::default_seed_captions(body);
    caption = pipeline::generate_caption_set(pool, 1, *clients.caption, seed, &log).front();
  }
  auto ladder = pipeline::summarize_granularities(caption, *clients.summarizer, seed, &log);
  write_json(g.out_dir() / "captions.json", {{"caption", caption},
                                             {"captions", ladder.captions},
                                             {"reprompted_levels", ladder.reprompted_levels},
                                             {"truncated_levels", ladder.truncated_levels},
                                             {"cost", log.cost},
                                             {"calls", log.entries}});
  return 0;
}

int cmd_tryoff(const Globals& g, const std::string& image, const std::string& garment, int candidates, int steps,
               bool judge) {
  const auto& body = bodyfit::toy_body_model();
  auto models = pipeline::load_pipeline_models(body, g.config, g.seed_or(0));
  const auto seed = g.seed_or(0);
  const auto person = read_png(image);
  torch::NoGradGuard no_grad;
  auto out = pipeline::tryoff_extract(person, garment, models.tryoff, candidates, seed, steps);
  const auto dir = g.out_dir();
  for (std::size_t k = 0; k < out.size(); ++k) {
    write_png(dir / ("candidate_" + std::to_string(k + 1) + ".png"), out[k]);
    std::cout << (dir / ("candidate_" + std::to_string(k + 1) + ".png")).string() << "\n";
  }
  if (judge) {
    auto clients = clients_for(g, body);
    pipeline::CallLog log;
    auto sel = pipeline::reject_negatives(out, {person, garment, ""}, *clients.judge, seed, &log);
    write_json(dir / "selection.json", {{"selected", sel.index ? json(*sel.index) : json()},
                                        {"reply", sel.reply},
                                        {"instruction", genmodels::tryoff_instruction(garment)},
                                        {"cost", log.cost}});
  }
  return 0;
}

int cmd_fit(const Globals& g, const std::string& keypoints, const std::string& init_path, double image_scale,
            std::vector<double> offset, std::optional<uint64_t> subject, int iterations) {
  const auto& body = bodyfit::toy_body_model();
  if (offset.size() != 2) offset = {64.0, 64.0};
  const auto cam = bodyfit::view_camera(ViewLabel::front, image_scale, {offset[0], offset[1]});
  bodyfit::Joints2D targets;
  bodyfit::BodyParams init = bodyfit::BodyParams::zeros(body);
  if (subject) {
    const auto truth = genmodels::sample_identity(body, *subject).params;
    targets = bodyfit::synthesize_targets(body, truth, cam, bodyfit::default_keypoint_weights(body));
    init = truth.detached_clone();
    auto gen = at::make_generator<at::CPUGeneratorImpl>(g.seed_or(0));
    init.pose = init.pose + 0.05 * torch::randn(init.pose.sizes(), gen, init.pose.options());
  } else if (!keypoints.empty()) {
    targets = bodyfit::load_keypoints(keypoints, body);
  } else {
    throw CLI::ValidationError("fit", "give --keypoints or --subject");
  }
  if (!init_path.empty()) {
    std::ifstream in(init_path);
    init = bodyfit::body_params_from_json(json::parse(in));
  }
  bodyfit::FitConfig fc;
  fc.iterations = iterations;
  auto r = bodyfit::fit_pose(body, init, cam, targets, fc);
  write_json(g.out_dir() / "fit.json", {{"params", bodyfit::to_json(r.params)},
                                        {"camera", bodyfit::to_json(cam)},
                                        {"initial_loss", r.initial_loss},
                                        {"final_loss", r.final_loss},
                                        {"rmse_px", bodyfit::weighted_rmse(body, r.params, cam, targets)},
                                        {"diagnostics", r.diagnostics}});
  return 0;
}

int cmd_train_mvd(const Globals& g, int64_t steps, int64_t identities, int64_t generator_steps, const std::string& resume) {
  const auto& body = bodyfit::toy_body_model();
  const auto models = g.section("models");
  auto tc = genmodels::train_config_from_json(g.section("train"));
  tc.seed = g.seed_or(tc.seed);
  if (steps >= 0) tc.steps = steps;
  const auto dcfg = mvattention::denoiser_config_from_json(models.value("denoiser", json::object()));
  const auto gcfg = splat::generator_config_from_json(models.value("generator", json::object()));
  genmodels::ToyDataConfig data_cfg;
  data_cfg.count = identities;
  data_cfg.seed = tc.seed;
  data_cfg.latent_resolution = gcfg.latent_resolution;
  data_cfg.text_dim = dcfg.text_dim;
  const auto data = genmodels::make_toy_dataset(body, data_cfg);

  torch::manual_seed(tc.seed);
  genmodels::MvdTrainer trainer(mvattention::Denoiser(dcfg), diffusion::make_schedule(dcfg.num_train_steps), tc);
  if (!resume.empty()) trainer.load(resume);
  auto log = trainer.train(data, std::max<int64_t>(0, tc.steps - trainer.steps_done));
  const auto dir = g.out_dir();
  trainer.save(dir / "mvd.safetensors");
  const double mse = genmodels::evaluate_mvd_eps_mse(data, trainer.net, diffusion::make_schedule(dcfg.num_train_steps));

  splat::SplatGenerator gen(gcfg);
  auto fit = genmodels::train_generator(gen, data, generator_steps, 3e-3, tc.seed);
  genmodels::save_checkpoint(dir / "generator.safetensors", *gen, splat::to_json(gcfg), nullptr, generator_steps);
  write_json(dir / "train_mvd.json", {{"steps", trainer.steps_done},
                                      {"epoch_losses", log.epoch_losses},
                                      {"skipped_steps", log.skipped_steps},
                                      {"eps_mse", mse},
                                      {"generator_psnr", fit.psnr}});
  return 0;
}

int cmd_train_hres(const Globals& g, int64_t steps, int64_t identities, const std::string& task, const std::string& resume) {
  const auto& body = bodyfit::toy_body_model();
  auto tc = genmodels::train_config_from_json(g.section("train"));
  tc.seed = g.seed_or(tc.seed);
  if (steps >= 0) tc.steps = steps;
  const auto fcfg = genmodels::flow_config_from_json(g.section("models").value(task == "tryoff" ? "tryoff" : "hres", json::object()));
  genmodels::ToyDataConfig data_cfg;
  data_cfg.count = identities;
  data_cfg.seed = tc.seed;
  data_cfg.text_dim = fcfg.text_dim;
  const auto data = genmodels::make_toy_dataset(body, data_cfg);
  const auto examples = task == "tryoff" ? genmodels::tryoff_examples(data, fcfg) : genmodels::hres_examples(data, fcfg);
  torch::manual_seed(tc.seed);
  genmodels::FlowTrainer trainer(genmodels::FlowModel(fcfg), tc);
  if (!resume.empty()) trainer.load(resume);
  auto log = trainer.train(examples, std::max<int64_t>(0, tc.steps - trainer.steps_done));
  const auto dir = g.out_dir();
  trainer.save(dir / (task + ".safetensors"));
  write_json(dir / ("train_" + task + ".json"), {{"steps", trainer.steps_done},
                                                 {"epoch_losses", log.epoch_losses},
                                                 {"skipped_steps", log.skipped_steps},
                                                 {"psnr", genmodels::evaluate_flow_psnr(trainer.net, examples, 20, tc.seed)}});
  return 0;
}

int cmd_gen_schnell(const Globals& g, uint64_t subject, int64_t steps, int64_t k) {
  const auto& body = bodyfit::toy_body_model();
  auto models = pipeline::load_pipeline_models(body, g.config, g.seed_or(0));
  auto cfg = genmodels::gen_schnell_config_from_json(g.section("sampling"));
  if (steps > 0) cfg.steps = steps;
  cfg.k_consistent = k >= 0 ? k : std::min(cfg.k_consistent, cfg.steps);
  cfg.latent_resolution = models.generator->config().latent_resolution;
  cfg.validate();
  auto sample = toy_subject(body, subject, cfg.latent_resolution);
  sample.bundle.seed = g.seed_or(sample.bundle.seed);
  auto out = genmodels::gen_schnell(sample.bundle, models.denoiser, models.generator, models.schedule, cfg);
  const auto dir = g.out_dir();
  for (int64_t v = 0; v < 4; ++v) {
    const std::string view(to_string(kCanonicalViews[static_cast<std::size_t>(v)]));
    write_png(dir / ("body_" + view + ".png"), genmodels::latent_to_image(out.body[v]));
    write_png(dir / ("head_" + view + ".png"), genmodels::latent_to_image(out.head[v]));
  }
  splat::save_gaussians(dir / "gaussians.safetensors", *out.gaussians);
  json trace = json::array();
  for (const auto& st : out.trace) trace.push_back(genmodels::to_json(st));
  write_json(dir / "gen_schnell.json", {{"seed", sample.bundle.seed},
                                        {"caption", sample.bundle.caption},
                                        {"config", genmodels::to_json(cfg)},
                                        {"checkpoints", models.fingerprint()},
                                        {"trace", trace}});
  return 0;
}

int cmd_gen_hres(const Globals& g, uint64_t subject, int steps) {
  const auto& body = bodyfit::toy_body_model();
  const auto path = checkpoint_path(g, "hres");
  json fcfg = g.section("models").value("hres", json::object());
  if (!path.empty()) fcfg = genmodels::read_checkpoint_info(path).config;
  torch::manual_seed(g.seed_or(0));
  genmodels::FlowModel model(genmodels::flow_config_from_json(fcfg));
  if (!path.empty()) {
    genmodels::load_checkpoint(path, *model);
  } else {
    log_warn("no hres checkpoint configured, using untrained weights");
  }
  auto sample = toy_subject(body, subject, 32);
  sample.bundle.seed = g.seed_or(sample.bundle.seed);
  auto out = genmodels::gen_hres(sample.bundle, model, steps);
  const auto dir = g.out_dir();
  write_png(dir / "full_body.png", out.image);
  write_json(dir / "gen_hres.json", out.record);
  return 0;
}

int cmd_dataset_build(const Globals& g, int64_t identities, int workers) {
  const auto& body = bodyfit::toy_body_model();
  auto cfg = pipeline::pipeline_config_from_json(g.section("pipeline"));
  cfg.seed = g.seed_or(cfg.seed);
  if (identities >= 0) cfg.identities = identities;
  if (workers > 0) cfg.workers = workers;
  auto clients = clients_for(g, body);
  auto models = pipeline::load_pipeline_models(body, g.config, cfg.seed);
  auto summary = pipeline::build_dataset(cfg, clients, models, g.out_dir());
  std::cout << to_json(summary).dump(2) << "\n";
  return summary.complete == summary.records ? 0 : 1;
}

int cmd_dataset_validate(const Globals& g, const std::string& manifest) {
  const fs::path path = manifest.empty() ? fs::path(g.out) / "manifest.jsonl" : fs::path(manifest);
  auto report = pipeline::validate_dataset(path);
  std::cout << to_json(report).dump(2) << "\n";
  return report.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy human data and avatar generation tools"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "random seed");
  app.add_flag("--mock-clients", g.mock, "use in-process mock model clients");
  app.add_option("--out", g.out, "output directory");

  auto* caption = app.add_subcommand("caption", "write a caption and its ten-level summary");
  std::string caption_text;
  caption->add_option("--text", caption_text, "caption to summarize (generated when omitted)");

  auto* tryoff = app.add_subcommand("tryoff", "extract garment candidates from a person image");
  std::string tryoff_image, garment = "shirt";
  int candidates = pipeline::kTryoffCandidates, tryoff_steps = 20;
  bool judge = false;
  tryoff->add_option("--image", tryoff_image, "person image (PNG)")->required()->check(CLI::ExistingFile);
  tryoff->add_option("--garment", garment, "garment label");
  tryoff->add_option("--candidates", candidates, "number of candidates");
  tryoff->add_option("--steps", tryoff_steps, "sampling steps");
  tryoff->add_flag("--judge", judge, "pick the best candidate with the judge client");

  auto* fit = app.add_subcommand("fit", "refine body pose against 2D keypoints");
  std::string keypoints, init_path;
  double image_scale = 100.0;
  std::vector<double> offset;
  std::optional<uint64_t> subject_kp;
  int iterations = 200;
  fit->add_option("--keypoints", keypoints, "keypoint JSON file")->check(CLI::ExistingFile);
  fit->add_option("--subject", subject_kp, "synthesize keypoints for a toy subject seed");
  fit->add_option("--init", init_path, "initial body params JSON")->check(CLI::ExistingFile);
  fit->add_option("--image-scale", image_scale, "pixels per meter");
  fit->add_option("--offset", offset, "principal offset x y")->expected(2);
  fit->add_option("--iterations", iterations, "optimizer iterations");

  int64_t train_steps = -1, identities = 4, generator_steps = 600;
  std::string resume, task = "hres";
  auto* train_mvd = app.add_subcommand("train-mvd", "train the multi-view denoiser and splat generator on toy data");
  train_mvd->add_option("--steps", train_steps, "denoiser optimizer steps");
  train_mvd->add_option("--identities", identities, "toy subjects");
  train_mvd->add_option("--generator-steps", generator_steps, "splat generator steps");
  train_mvd->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  auto* train_hres = app.add_subcommand("train-hres", "train a flow model on toy data");
  train_hres->add_option("--steps", train_steps, "optimizer steps");
  train_hres->add_option("--identities", identities, "toy subjects");
  train_hres->add_option("--task", task, "hres or tryoff")->check(CLI::IsMember({"hres", "tryoff"}));
  train_hres->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  uint64_t subject = 0;
  int64_t gen_steps = 0, k_consistent = -1;
  auto* gen_schnell = app.add_subcommand("gen-schnell", "multi-view generation with splat-consistent sampling");
  gen_schnell->add_option("--subject", subject, "toy subject seed providing the conditions");
  gen_schnell->add_option("--steps", gen_steps, "sampling steps");
  gen_schnell->add_option("--k-consistent", k_consistent, "leading consistent steps");
  auto* gen_hres = app.add_subcommand("gen-hres", "full-body image generation");
  int hres_steps = 20;
  gen_hres->add_option("--subject", subject, "toy subject seed providing the conditions");
  gen_hres->add_option("--steps", hres_steps, "Euler steps");

  auto* dataset = app.add_subcommand("dataset", "dataset construction");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "run every subject through the pipeline");
  int64_t build_identities = -1;
  int workers = 0;
  build->add_option("--identities", build_identities, "number of subjects");
  build->add_option("--workers", workers, "concurrent subjects");
  auto* validate = dataset->add_subcommand("validate", "check a manifest and its files");
  std::string manifest;
  validate->add_option("--manifest", manifest, "manifest path (default OUT/manifest.jsonl)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (!g.config_path.empty()) {
      std::ifstream in(g.config_path);
      g.config = json::parse(in);
    }
    torch::set_num_threads(g.config.value("threads", 1));
    if (*caption) return cmd_caption(g, caption_text);
    if (*tryoff) return cmd_tryoff(g, tryoff_image, garment, candidates, tryoff_steps, judge);
    if (*fit) return cmd_fit(g, keypoints, init_path, image_scale, offset, subject_kp, iterations);
    if (*train_mvd) return cmd_train_mvd(g, train_steps, identities, generator_steps, resume);
    if (*train_hres) return cmd_train_hres(g, train_steps, identities, task, resume);
    if (*gen_schnell) return cmd_gen_schnell(g, subject, gen_steps, k_consistent);
    if (*gen_hres) return cmd_gen_hres(g, subject, hres_steps);
    if (*build) return cmd_dataset_build(g, build_identities, workers);
    if (*validate) return cmd_dataset_validate(g, manifest);
  } catch (const std::exception& e) {
    log_error(e.what());
    return 2;
  }
  return 0;
}

#pragma once

#include <atomic>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/diffusion/schedule.hpp"
#include "ihk/genmodels/flow_model.hpp"
#include "ihk/genmodels/gen_schnell.hpp"
#include "ihk/mvattention/denoiser.hpp"
#include "ihk/pipeline/clients.hpp"
#include "ihk/pipeline/records.hpp"
#include "ihk/splat/generator.hpp"

namespace ihk::pipeline {

// Completed stage output in the cache.
struct StageOutput {
  std::filesystem::path dir;
  nlohmann::json meta;
  std::map<std::string, std::string> files;  // name -> sha256
  std::string hash;                          // content hash of meta and files

  std::filesystem::path file(const std::string& name) const { return dir / name; }
};

// Content-addressed stage outputs under root/<stage>/<key>/.
class StageCache {
 public:
  explicit StageCache(std::filesystem::path root) : root_(std::move(root)) {}

  static std::string key(const std::string& stage, const nlohmann::json& config,
                         const std::vector<std::string>& upstream_hashes);

  // Hit only when every recorded file exists and matches its hash; a damaged
  // entry is removed.
  std::optional<StageOutput> lookup(const std::string& stage, const std::string& key) const;

  StageOutput store(const std::string& stage, const std::string& key, const nlohmann::json& meta,
                    const std::map<std::string, std::string>& files) const;

  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

struct PipelineConfig {
  int64_t identities = 8;
  uint64_t seed = 0;
  int64_t image_resolution = 128;
  int tryoff_candidates = 4;
  int tryoff_steps = 20;
  genmodels::GenSchnellConfig sampling;
  int fit_iterations = 200;
  double fit_init_noise = 0.05;  // rad, spread of the toy pose regressor
  double budget = 0.03;          // USD per subject
  int workers = 1;
  std::vector<std::string> seed_captions;  // empty: built-in pool

  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// In-context caption pool used when none is configured.
std::vector<std::string> default_seed_captions(const bodyfit::BodyModel& model, int count = 24);

struct PipelineModels {
  const bodyfit::BodyModel* body = nullptr;
  genmodels::FlowModel tryoff{nullptr};
  mvattention::Denoiser denoiser{nullptr};
  splat::SplatGenerator generator{nullptr};
  diffusion::NoiseSchedule schedule;

  // Hash of every model's parameters, part of downstream cache keys.
  nlohmann::json fingerprint() const;
};

// Freshly initialized models (torch seed `seed`) unless checkpoints are given
// under {"checkpoints": {"tryoff", "denoiser", "generator"}}; model configs
// come from {"models": {"tryoff", "denoiser", "generator"}}.
PipelineModels load_pipeline_models(const bodyfit::BodyModel& body, const nlohmann::json& config, uint64_t seed);

struct RunStats {
  std::atomic<int64_t> stages_run{0};
  std::atomic<int64_t> stages_cached{0};
};

inline const std::vector<std::string> kStageOrder{"caption", "summarize", "image", "tryoff", "rejection", "bodyfit", "mvd"};

// Runs every stage of one subject, reusing cached outputs. Files are copied to
// out_dir/identities/<name>/ and referenced relative to out_dir. Stage
// failures yield an incomplete record naming the stage.
IdentityRecord run_identity(int64_t index, const PipelineConfig& config, const Clients& clients,
                            PipelineModels& models, const std::filesystem::path& out_dir, RunStats* stats = nullptr);

struct BuildSummary {
  int64_t records = 0;
  int64_t complete = 0;
  int64_t flagged = 0;
  int64_t stages_run = 0;
  int64_t stages_cached = 0;
  double cost = 0.0;
  std::filesystem::path manifest;
};

nlohmann::json to_json(const BuildSummary& s);

// Rewrites out_dir/manifest.jsonl with one record per subject.
BuildSummary build_dataset(const PipelineConfig& config, const Clients& clients, PipelineModels& models,
                           const std::filesystem::path& out_dir);

}  // namespace ihk::pipeline

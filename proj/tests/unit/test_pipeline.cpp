#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/common/array_file.hpp"
#include "ihk/common/hashing.hpp"
#include "ihk/common/image_io.hpp"
#include "ihk/pipeline/captions.hpp"
#include "ihk/pipeline/clients.hpp"
#include "ihk/pipeline/records.hpp"
#include "ihk/pipeline/rejection.hpp"
#include "ihk/pipeline/stages.hpp"

using namespace ihk;
using namespace ihk::pipeline;
namespace fs = std::filesystem;

namespace {

const bodyfit::BodyModel& body() {
  static const bodyfit::BodyModel m = bodyfit::toy_body_model();
  return m;
}

RetryPolicy instant(std::vector<int64_t>* delays = nullptr) {
  RetryPolicy p;
  p.sleep = [delays](std::chrono::milliseconds d) {
    if (delays) delays->push_back(d.count());
  };
  return p;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("ihk_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> pool(int n) {
  std::vector<std::string> out;
  for (int i = 0; i < n; ++i) out.push_back("exemplar number " + std::to_string(i) + " wears a coat");
  return out;
}

// Records every request it sees and answers like the mock caption client.
class RecordingClient : public ModelClient {
 public:
  ClientReply complete(const ClientRequest& r) override {
    requests.push_back(r);
    return {"1. a person in a blue coat\n2. a person in a red hat", 0.001};
  }
  std::string name() const override { return "recording"; }
  std::vector<ClientRequest> requests;
};

torch::Tensor planted_candidates(std::mt19937& rng, const torch::Tensor& ref, std::vector<torch::Tensor>& out) {
  std::uniform_int_distribution<int> pick(0, 3);
  const int best = pick(rng);
  out.clear();
  for (int k = 0; k < 4; ++k) {
    const double sigma = k == best ? 0.03 : 0.12 + 0.03 * k;
    auto noise = torch::randn(ref.sizes()) * sigma;
    out.push_back((ref + noise).clamp(0.0, 1.0));
  }
  return torch::tensor(best);
}

PipelineConfig small_pipeline(int64_t n) {
  PipelineConfig c;
  c.identities = n;
  c.image_resolution = 64;
  c.tryoff_steps = 2;
  c.sampling.steps = 4;
  c.sampling.k_consistent = 2;
  c.sampling.latent_resolution = 16;
  c.fit_iterations = 10;
  return c;
}

nlohmann::json small_models() {
  return {{"models",
           {{"tryoff", {{"resolution", 16}, {"base_channels", 16}}},
            {"denoiser", {{"base_channels", 16}, {"channel_mults", {1, 2}}, {"num_train_steps", 100}}},
            {"generator", {{"latent_resolution", 16}, {"features", 16}}}}}};
}

struct Counted {
  std::shared_ptr<CountingClient> caption, summarizer, judge;
  Clients clients;
  int64_t calls() const { return caption->calls() + summarizer->calls() + judge->calls(); }
};

Counted counted(Clients inner) {
  Counted c;
  c.caption = std::make_shared<CountingClient>(inner.caption);
  c.summarizer = std::make_shared<CountingClient>(inner.summarizer);
  c.judge = std::make_shared<CountingClient>(inner.judge);
  c.clients = {c.caption, c.summarizer, c.judge};
  return c;
}

}  // namespace

TEST_CASE("retries back off exponentially and give up after three attempts") {
  auto inner = std::make_shared<MockSummarizer>();
  ClientRequest req{"summarize_level", {"a b c d e"}, {}, 1, {{"level", 1}, {"max_words", 3}}};
  std::vector<int64_t> delays;
  FlakyClient twice(inner, 2);
  CHECK(complete_with_retry(twice, req, instant(&delays)).text == "a b c");
  CHECK(delays == std::vector<int64_t>{200, 400});
  FlakyClient thrice(inner, 3);
  CHECK_THROWS_AS(complete_with_retry(thrice, req, instant()), TransientError);
}

TEST_CASE("caption set samples ten distinct exemplars") {
  RecordingClient client;
  CallLog log;
  auto out = generate_caption_set(pool(25), 2, client, 42, &log, instant());
  CHECK(out == std::vector<std::string>{"a person in a blue coat", "a person in a red hat"});
  REQUIRE(client.requests.size() == 1);
  const auto idx = sample_exemplars(25, 42);
  CHECK(idx.size() == 10);
  CHECK(std::set<std::size_t>(idx.begin(), idx.end()).size() == 10);
  for (auto i : idx) CHECK(client.requests[0].messages[1].find(pool(25)[i]) != std::string::npos);
  CHECK(sample_exemplars(25, 42) == idx);
  CHECK(sample_exemplars(25, 43) != idx);
  CHECK(sample_exemplars(3, 1).size() == 3);
  CHECK(log.calls == 1);
  CHECK(log.entries[0]["reply"] == "1. a person in a blue coat\n2. a person in a red hat");
  CHECK(log.cost == doctest::Approx(0.001));
  CHECK_THROWS_AS(generate_caption_set({}, 1, client, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_caption_set(pool(3), 5, client, 0, nullptr, instant()), StageError);

  FlakyClient dead(std::make_shared<RecordingClient>(), 10);
  CHECK_THROWS_AS(generate_caption_set(pool(3), 1, dead, 0, nullptr, instant()), StageError);
}

TEST_CASE("mock caption client is pure given the seed") {
  MockCaptionClient c(body());
  auto a = generate_caption_set(pool(12), 1, c, 5);
  CHECK(a == generate_caption_set(pool(12), 1, c, 5));
  CHECK(a != generate_caption_set(pool(12), 1, c, 6));
  CHECK(word_count(a[0]) >= 25);
}

TEST_CASE("summaries follow the word-count ladder") {
  const std::string caption = generate_caption_set(pool(12), 1, *mock_clients(body()).caption, 3).front();
  MockSummarizer mock;
  auto ladder = summarize_granularities(caption, mock, 3);
  REQUIRE(ladder.captions.size() == 10);
  for (int i = 0; i < 10; ++i) CHECK(word_count(ladder.captions[i]) == kLevelWordTargets[i]);
  CHECK(ladder.reprompted_levels.empty());
  CHECK(ladder.truncated_levels.empty());
  CHECK(caption_violations(ladder.captions).empty());
  CHECK(summarize_granularities(caption, mock, 3).captions == ladder.captions);

  MockSummarizer once({{4, 9}, false, 0.0});
  auto fixed = summarize_granularities(caption, once, 3);
  CHECK(fixed.reprompted_levels == std::vector<int>{4, 9});
  CHECK(fixed.truncated_levels.empty());
  CHECK(fixed.captions == ladder.captions);

  MockSummarizer stubborn({{2}, true, 0.0});
  CallLog log;
  auto cut = summarize_granularities(caption, stubborn, 3, &log);
  CHECK(cut.truncated_levels == std::vector<int>{2});
  CHECK(log.calls == 2);
  CHECK(word_count(cut.captions[1]) == 36);
  CHECK(caption_violations(cut.captions).empty());
}

TEST_CASE("caption invariants") {
  std::vector<std::string> ok(10);
  for (int i = 0; i < 10; ++i)
    for (int k = 0; k < kLevelWordTargets[i]; ++k) ok[i] += (k ? " w" : "w");
  CHECK(caption_violations(ok).empty());
  auto nine = ok;
  nine.pop_back();
  CHECK(caption_violations(nine).size() == 1);
  auto rising = ok;
  std::swap(rising[3], rising[4]);
  CHECK(caption_violations(rising).size() == 1);
  auto long_first = ok;
  long_first[0] += " a b c d e f g h";
  CHECK(caption_violations(long_first).size() == 1);
  CHECK(level_word_limit(0) == 45);
  CHECK(level_word_limit(9) == 7);
}

TEST_CASE("judge replies map to zero-based indices") {
  CHECK(parse_judge_reply("2", 4)->index == 1u);
  CHECK(parse_judge_reply(" 4.\n", 4)->index == 3u);
  CHECK_FALSE(parse_judge_reply("No", 4)->index.has_value());
  CHECK_FALSE(parse_judge_reply("no.", 4)->index.has_value());
  CHECK_FALSE(parse_judge_reply("5", 4).has_value());
  CHECK_FALSE(parse_judge_reply("0", 4).has_value());
  CHECK_FALSE(parse_judge_reply("the second", 4).has_value());
  CHECK_FALSE(parse_judge_reply("", 4).has_value());
}

TEST_CASE("nearest-candidate judge finds the planted best") {
  torch::manual_seed(1);
  std::mt19937 rng(7);
  int hits = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto ref = torch::rand({16, 16, 4});
    std::vector<torch::Tensor> cands;
    const auto best = planted_candidates(rng, ref, cands).item<int64_t>();
    MockJudge judge({MockJudge::Mode::nearest, ref, 1.0, 0.0});
    auto sel = reject_negatives(cands, {torch::zeros({16, 16, 4}), "shirt", "a caption"}, judge, trial);
    hits += sel.index && static_cast<int64_t>(*sel.index) == best;
  }
  CHECK(hits == 20);
}

TEST_CASE("rejection handles No and malformed replies") {
  auto ctx = JudgeContext{torch::zeros({8, 8, 4}), "shirt", ""};
  std::vector<torch::Tensor> cands(4, torch::full({8, 8, 4}, 0.5));
  MockJudge no({MockJudge::Mode::always_no, std::nullopt, 1.0, 0.0});
  auto sel = reject_negatives(cands, ctx, no, 0);
  CHECK_FALSE(sel.index.has_value());
  CHECK(sel.reply == "No");

  MockJudge once({MockJudge::Mode::malformed_once, std::nullopt, 1.0, 0.0});
  CallLog log;
  sel = reject_negatives(cands, ctx, once, 0, &log);
  CHECK(sel.prompts == 2);
  CHECK(sel.index.has_value());
  CHECK(log.calls == 2);

  MockJudge bad({MockJudge::Mode::always_malformed, std::nullopt, 1.0, 0.0});
  CHECK_THROWS_AS(reject_negatives(cands, ctx, bad, 0), StageError);

  MockJudge strict({MockJudge::Mode::nearest, std::nullopt, 0.01, 0.0});
  CHECK_FALSE(reject_negatives(cands, ctx, strict, 0).index.has_value());
}

TEST_CASE("try-off candidates are seeded draws") {
  torch::manual_seed(2);
  genmodels::FlowModelConfig cfg;
  cfg.resolution = 16;
  cfg.base_channels = 16;
  genmodels::FlowModel fm(cfg);
  auto person = torch::rand({64, 64, 3});
  person = torch::cat({person, torch::ones({64, 64, 1})}, 2);
  auto a = tryoff_extract(person, "red shirt", fm, 4, 10, 3);
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a[i].sizes() == torch::IntArrayRef({16, 16, 4}));
    for (std::size_t j = i + 1; j < 4; ++j) CHECK((a[i] - a[j]).pow(2).sum().item<double>() > 0.0);
  }
  auto b = tryoff_extract(person, "red shirt", fm, 4, 10, 3);
  for (std::size_t i = 0; i < 4; ++i) CHECK(torch::equal(a[i], b[i]));
  CHECK(torch::equal(tryoff_extract(person, "red shirt", fm, 1, 11, 3)[0], a[1]));
}

TEST_CASE("records round trip and detect tampering") {
  const auto dir = fresh_dir("records");
  IdentityRecord r;
  r.name = "subject_0001";
  r.seed = 3;
  for (int t : kLevelWordTargets) {
    std::string s;
    for (int k = 0; k < t; ++k) s += (k ? " word" : "word");
    r.captions.push_back(s);
  }
  r.body_params = bodyfit::BodyParams::zeros(body());
  r.camera = bodyfit::view_camera(ViewLabel::front, 100.0, {64.0, 64.0});
  fs::create_directories(dir / "identities" / r.name);
  auto add = [&](const std::string& file, std::vector<std::string>* list) {
    const auto ref = "identities/" + r.name + "/" + file;
    write_png(dir / ref, torch::rand({4, 4, 4}));
    r.files[ref] = sha256_file(dir / ref);
    if (list) list->push_back(ref);
    return ref;
  };
  for (auto v : kCanonicalViews) {
    add("body_" + std::string(to_string(v)) + ".png", &r.mv_body_refs);
    add("head_" + std::string(to_string(v)) + ".png", &r.mv_head_refs);
  }
  r.cloth_image_ref = add("cloth.png", nullptr);
  r.provenance = {{"caption", {{"tool", "mock"}, {"version", "1"}, {"seed", 3}, {"cost", 0.004}}}};
  r.cost = 0.004;
  r.complete = true;
  r.id = compute_record_id(r);

  const auto manifest = dir / "manifest.jsonl";
  write_record(r, manifest);
  auto back = read_records(manifest);
  REQUIRE(back.size() == 1);
  CHECK(to_json(back[0]).dump() == to_json(r).dump());
  CHECK(validate_dataset(manifest).ok());

  SUBCASE("tampered image") {
    write_png(dir / r.mv_body_refs[2], torch::zeros({4, 4, 4}));
    auto rep = validate_dataset(manifest);
    REQUIRE(rep.violations.size() == 1);
    CHECK(rep.violations[0].find(r.mv_body_refs[2]) != std::string::npos);
    CHECK(rep.exit_code() == 1);
    CHECK_THROWS_AS(read_records(manifest), std::runtime_error);
  }
  SUBCASE("missing head view") {
    fs::remove(dir / r.mv_head_refs[1]);
    auto rep = validate_dataset(manifest);
    REQUIRE(rep.violations.size() == 1);
    CHECK(rep.violations[0].find(r.id.substr(0, 12)) != std::string::npos);
    CHECK(rep.violations[0].find("missing") != std::string::npos);
  }
  SUBCASE("nine captions") {
    auto bad = r;
    bad.captions.pop_back();
    CHECK_THROWS_AS(write_record(bad, manifest), std::invalid_argument);
    bad.id = compute_record_id(bad);
    std::ofstream(manifest, std::ios::app) << to_json(bad).dump() << "\n";
    auto rep = validate_dataset(manifest);
    CHECK(rep.violations.size() == 2);  // the caption count and the duplicate name
  }
  SUBCASE("cost must equal the stage sum") {
    auto bad = r;
    bad.name = "subject_0002";
    bad.cost = 1.0;
    bad.id = compute_record_id(bad);
    write_record(bad, manifest);
    CHECK(validate_dataset(manifest).violations.size() == 1);
  }
  SUBCASE("concurrent appends stay whole lines") {
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
      threads.emplace_back([&, t] {
        for (int k = 0; k < 25; ++k) {
          auto c = r;
          c.name = "subject_t" + std::to_string(t) + "_" + std::to_string(k);
          c.id = compute_record_id(c);
          write_record(c, manifest);
        }
      });
    }
    for (auto& th : threads) th.join();
    auto all = read_records(manifest);
    CHECK(all.size() == 101);
    CHECK(validate_dataset(manifest).ok());
  }
  fs::remove_all(dir);
}

TEST_CASE("dataset build is cached, resumable and valid") {
  const auto dir = fresh_dir("build");
  auto cfg = small_pipeline(2);
  auto models = load_pipeline_models(body(), small_models(), 0);
  auto c = counted(mock_clients(body()));
  auto first = build_dataset(cfg, c.clients, models, dir);
  CHECK(first.records == 2);
  CHECK(first.complete == 2);
  CHECK(first.stages_run == 14);
  const auto calls = c.calls();
  CHECK(calls == 6);
  auto rep = validate_dataset(first.manifest);
  CHECK(rep.ok());
  for (auto& v : rep.violations) MESSAGE(v);
  const auto manifest_bytes = read_file_bytes(first.manifest);

  auto records = read_records(first.manifest);
  for (const auto& r : records) {
    CHECK(r.captions.size() == 10);
    CHECK(r.mv_body_refs.size() == 4);
    CHECK(r.mv_head_refs.size() == 4);
    CHECK(r.cost <= cfg.budget);
    double sum = 0.0;
    for (const auto& st : kStageOrder) {
      REQUIRE(r.provenance.contains(st));
      sum += r.provenance[st]["cost"].get<double>();
    }
    CHECK(sum == doctest::Approx(r.cost));
  }

  auto second = build_dataset(cfg, c.clients, models, dir);
  CHECK(c.calls() == calls);
  CHECK(second.stages_run == 0);
  CHECK(second.stages_cached == 14);
  CHECK(read_file_bytes(second.manifest) == manifest_bytes);

  SUBCASE("a damaged cache file reruns only its stage") {
    fs::path damaged;
    for (auto& e : fs::recursive_directory_iterator(dir / "cache" / "tryoff")) {
      if (e.path().filename() == "candidate_2.png") damaged = e.path();
    }
    REQUIRE_FALSE(damaged.empty());
    write_file_bytes(damaged, "junk");
    auto third = build_dataset(cfg, c.clients, models, dir);
    CHECK(third.stages_run == 1);
    CHECK(c.calls() == calls);
    CHECK(read_file_bytes(third.manifest) == manifest_bytes);
  }
  SUBCASE("a changed sampler reruns only the lifting stage") {
    auto cfg2 = cfg;
    cfg2.sampling.k_consistent = 0;
    auto third = build_dataset(cfg2, c.clients, models, dir);
    CHECK(third.stages_run == 2);
    CHECK(c.calls() == calls);
    CHECK(validate_dataset(third.manifest).ok());
  }
  fs::remove_all(dir);
}

TEST_CASE("all-No judging keeps flagged records") {
  const auto dir = fresh_dir("reject");
  auto cfg = small_pipeline(2);
  auto models = load_pipeline_models(body(), small_models(), 0);
  auto clients = mock_clients(body());
  clients.judge = std::make_shared<MockJudge>(MockJudge::Options{MockJudge::Mode::always_no, std::nullopt, 1.0, 0.006});
  auto s = build_dataset(cfg, clients, models, dir);
  CHECK(s.complete == 2);
  CHECK(s.flagged == 2);
  for (const auto& r : read_records(s.manifest)) {
    CHECK(r.has_flag(kRejectedFlag));
    CHECK(r.cloth_image_ref.empty());
    CHECK(r.provenance["rejection"]["selected"].is_null());
  }
  CHECK(validate_dataset(s.manifest).ok());
  fs::remove_all(dir);
}

TEST_CASE("stage failures are recorded and resumed") {
  const auto dir = fresh_dir("resume");
  auto cfg = small_pipeline(1);
  auto models = load_pipeline_models(body(), small_models(), 0);
  auto clients = mock_clients(body());
  auto healthy = clients.judge;
  clients.judge = std::make_shared<FlakyClient>(healthy, 3);
  auto s = build_dataset(cfg, clients, models, dir);
  CHECK(s.complete == 0);
  auto recs = read_records(s.manifest, false);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].failed_stage == "rejection");
  auto rep = validate_dataset(s.manifest);
  REQUIRE(rep.violations.size() == 1);
  CHECK(rep.violations[0].find("rejection") != std::string::npos);

  auto c = counted(mock_clients(body()));
  auto again = build_dataset(cfg, c.clients, models, dir);
  CHECK(again.complete == 1);
  CHECK(again.stages_cached == 4);
  CHECK(c.caption->calls() == 0);
  CHECK(c.summarizer->calls() == 0);
  CHECK(c.judge->calls() == 1);
  CHECK(validate_dataset(again.manifest).ok());
  fs::remove_all(dir);
}

TEST_CASE("budget alarm flags expensive subjects") {
  const auto dir = fresh_dir("budget");
  auto cfg = small_pipeline(1);
  cfg.budget = 0.005;
  auto models = load_pipeline_models(body(), small_models(), 0);
  auto s = build_dataset(cfg, mock_clients(body()), models, dir);
  auto recs = read_records(s.manifest);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].has_flag(kBudgetFlag));
  CHECK(recs[0].cost > 0.005);
  fs::remove_all(dir);
}

TEST_CASE("pipeline config json round trip") {
  auto c = small_pipeline(3);
  c.seed_captions = {"x"};
  auto back = pipeline_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  auto bad = to_json(c);
  bad["image_resolution"] = 50;
  CHECK_THROWS_AS(pipeline_config_from_json(bad), std::invalid_argument);
}

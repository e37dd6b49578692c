#include "ihk/pipeline/records.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <mutex>
#include <stdexcept>

#include "ihk/common/hashing.hpp"
#include "ihk/pipeline/captions.hpp"

namespace ihk::pipeline {

bool IdentityRecord::has_flag(const std::string& f) const { return std::find(flags.begin(), flags.end(), f) != flags.end(); }

nlohmann::json to_json(const IdentityRecord& r) {
  return {{"id", r.id},
          {"name", r.name},
          {"seed", r.seed},
          {"captions", r.captions},
          {"cloth_image_ref", r.cloth_image_ref},
          {"body_params", r.body_params ? bodyfit::to_json(*r.body_params) : nlohmann::json()},
          {"camera", r.camera ? bodyfit::to_json(*r.camera) : nlohmann::json()},
          {"mv_body_refs", r.mv_body_refs},
          {"mv_head_refs", r.mv_head_refs},
          {"files", r.files},
          {"provenance", r.provenance},
          {"flags", r.flags},
          {"complete", r.complete},
          {"failed_stage", r.failed_stage},
          {"error", r.error},
          {"cost", r.cost}};
}

IdentityRecord identity_record_from_json(const nlohmann::json& j) {
  IdentityRecord r;
  r.id = j.at("id").get<std::string>();
  r.name = j.at("name").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.captions = j.at("captions").get<std::vector<std::string>>();
  r.cloth_image_ref = j.at("cloth_image_ref").get<std::string>();
  if (!j.at("body_params").is_null()) r.body_params = bodyfit::body_params_from_json(j.at("body_params"));
  if (!j.at("camera").is_null()) r.camera = bodyfit::camera_from_json(j.at("camera"));
  r.mv_body_refs = j.at("mv_body_refs").get<std::vector<std::string>>();
  r.mv_head_refs = j.at("mv_head_refs").get<std::vector<std::string>>();
  r.files = j.at("files").get<std::map<std::string, std::string>>();
  r.provenance = j.at("provenance");
  r.flags = j.at("flags").get<std::vector<std::string>>();
  r.complete = j.at("complete").get<bool>();
  r.failed_stage = j.at("failed_stage").get<std::string>();
  r.error = j.at("error").get<std::string>();
  r.cost = j.at("cost").get<double>();
  return r;
}

std::string compute_record_id(const IdentityRecord& r) {
  auto j = to_json(r);
  j.erase("id");
  return sha256_hex(j.dump());
}

std::vector<std::string> record_violations(const IdentityRecord& r, const std::filesystem::path& root) {
  std::vector<std::string> v;
  if (r.id != compute_record_id(r)) v.push_back("record id does not match its content");
  if (!r.complete) {
    v.push_back("incomplete, failed at stage '" + r.failed_stage + "': " + r.error);
    return v;
  }
  for (auto& c : caption_violations(r.captions)) v.push_back(c);
  if (r.mv_body_refs.size() != 4) v.push_back("expected 4 body views, found " + std::to_string(r.mv_body_refs.size()));
  if (r.mv_head_refs.size() != 4) v.push_back("expected 4 head views, found " + std::to_string(r.mv_head_refs.size()));
  if (!r.body_params) v.push_back("missing body_params");
  if (!r.camera) v.push_back("missing camera");
  if (r.cloth_image_ref.empty() && !r.has_flag(kRejectedFlag)) v.push_back("missing cloth image without rejection flag");

  std::vector<std::string> refs = r.mv_body_refs;
  refs.insert(refs.end(), r.mv_head_refs.begin(), r.mv_head_refs.end());
  if (!r.cloth_image_ref.empty()) refs.push_back(r.cloth_image_ref);
  for (const auto& ref : refs) {
    const auto it = r.files.find(ref);
    if (it == r.files.end()) {
      v.push_back("file " + ref + " has no manifest hash");
      continue;
    }
    const auto path = root / ref;
    if (!std::filesystem::exists(path)) {
      v.push_back("file " + ref + " is missing");
    } else if (sha256_file(path) != it->second) {
      v.push_back("file " + ref + " does not match its hash");
    }
  }

  double stage_cost = 0.0;
  for (const auto& [stage, p] : r.provenance.items()) {
    for (const char* key : {"tool", "version", "seed", "cost"}) {
      if (!p.contains(key)) v.push_back("provenance of stage '" + stage + "' lacks " + key);
    }
    stage_cost += p.value("cost", 0.0);
  }
  if (std::abs(stage_cost - r.cost) > 1e-9) v.push_back("record cost differs from the sum of stage costs");
  return v;
}

void write_record(const IdentityRecord& r, const std::filesystem::path& manifest) {
  if (r.complete) {
    const auto v = caption_violations(r.captions);
    if (!v.empty()) throw std::invalid_argument("record " + r.name + ": " + v.front());
  }
  const std::string line = to_json(r).dump() + "\n";
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  const int fd = ::open(manifest.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw std::runtime_error("cannot open manifest " + manifest.string());
  ::flock(fd, LOCK_EX);
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(fd, line.data() + written, line.size() - written);
    if (n <= 0) break;
    written += static_cast<std::size_t>(n);
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (written != line.size()) throw std::runtime_error("short write to manifest " + manifest.string());
}

namespace {

std::vector<std::pair<std::string, nlohmann::json>> manifest_lines(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot read manifest " + manifest.string());
  std::vector<std::pair<std::string, nlohmann::json>> out;
  int n = 0;
  for (std::string line; std::getline(in, line);) {
    ++n;
    if (line.empty()) continue;
    out.emplace_back("line " + std::to_string(n), nlohmann::json::parse(line, nullptr, false));
  }
  return out;
}

}  // namespace

std::vector<IdentityRecord> read_records(const std::filesystem::path& manifest, bool validate) {
  const auto root = manifest.parent_path();
  std::vector<IdentityRecord> out;
  for (auto& [where, j] : manifest_lines(manifest)) {
    if (j.is_discarded()) throw std::runtime_error(manifest.string() + " " + where + ": invalid JSON");
    auto r = identity_record_from_json(j);
    if (validate) {
      const auto v = record_violations(r, root);
      if (!v.empty()) throw std::runtime_error("record " + r.name + ": " + v.front());
    }
    out.push_back(std::move(r));
  }
  return out;
}

nlohmann::json to_json(const DatasetReport& r) {
  return {{"records", r.records}, {"complete", r.complete}, {"flagged", r.flagged}, {"violations", r.violations}};
}

DatasetReport validate_dataset(const std::filesystem::path& manifest) {
  DatasetReport report;
  if (!std::filesystem::exists(manifest)) {
    report.violations.push_back(manifest.string() + ": manifest not found");
    return report;
  }
  const auto root = manifest.parent_path();
  std::map<std::string, int> names;
  for (auto& [where, j] : manifest_lines(manifest)) {
    ++report.records;
    if (j.is_discarded()) {
      report.violations.push_back(where + ": invalid JSON");
      continue;
    }
    IdentityRecord r;
    try {
      r = identity_record_from_json(j);
    } catch (const std::exception& e) {
      report.violations.push_back(where + ": " + e.what());
      continue;
    }
    if (r.complete) ++report.complete;
    if (!r.flags.empty()) ++report.flagged;
    if (++names[r.name] == 2) report.violations.push_back(r.name + ": duplicate record");
    for (auto& v : record_violations(r, root)) report.violations.push_back(r.name + " (" + r.id.substr(0, 12) + "): " + v);
  }
  return report;
}

}  // namespace ihk::pipeline

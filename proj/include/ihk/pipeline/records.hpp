#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ihk/bodyfit/body_model.hpp"
#include "ihk/bodyfit/camera.hpp"

namespace ihk::pipeline {

inline constexpr const char* kRejectedFlag = "garment_rejected";
inline constexpr const char* kTruncatedFlag = "captions_truncated";
inline constexpr const char* kBudgetFlag = "over_budget";

// One dataset subject. File references are relative to the manifest directory.
struct IdentityRecord {
  std::string id;  // sha256 of the record content without this field
  std::string name;
  uint64_t seed = 0;
  std::vector<std::string> captions;  // level 1 (detailed) first
  std::string cloth_image_ref;        // empty when every try-off candidate was rejected
  std::optional<bodyfit::BodyParams> body_params;
  std::optional<bodyfit::OrthoCamera> camera;
  std::vector<std::string> mv_body_refs, mv_head_refs;
  std::map<std::string, std::string> files;  // ref -> sha256
  nlohmann::json provenance = nlohmann::json::object();  // stage -> {tool, version, seed, cost, ...}
  std::vector<std::string> flags;
  bool complete = false;
  std::string failed_stage;
  std::string error;
  double cost = 0.0;

  bool has_flag(const std::string& f) const;
};

nlohmann::json to_json(const IdentityRecord& r);
IdentityRecord identity_record_from_json(const nlohmann::json& j);

// Content hash over everything except `id`.
std::string compute_record_id(const IdentityRecord& r);

// Invariant violations of one record; files are resolved against `root`.
std::vector<std::string> record_violations(const IdentityRecord& r, const std::filesystem::path& root);

// Appends one JSON line. Complete records must satisfy the caption invariants
// (std::invalid_argument otherwise). Appends from threads and processes are
// serialized with a mutex and an exclusive file lock.
void write_record(const IdentityRecord& r, const std::filesystem::path& manifest);

// Reads every line; with `validate` throws std::runtime_error naming the first
// violation.
std::vector<IdentityRecord> read_records(const std::filesystem::path& manifest, bool validate = true);

struct DatasetReport {
  int64_t records = 0;
  int64_t complete = 0;
  int64_t flagged = 0;
  std::vector<std::string> violations;  // "<record name or line>: <problem>"

  bool ok() const { return violations.empty(); }
  int exit_code() const { return ok() ? 0 : 1; }
};

nlohmann::json to_json(const DatasetReport& r);

DatasetReport validate_dataset(const std::filesystem::path& manifest);

}  // namespace ihk::pipeline

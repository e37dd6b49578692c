#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ihk/pipeline/clients.hpp"

namespace ihk::pipeline {

inline constexpr int kCaptionLevels = 10;
// Word-count targets, detailed to minimal.
inline constexpr std::array<int, kCaptionLevels> kLevelWordTargets{40, 36, 32, 28, 24, 20, 16, 12, 9, 5};
inline constexpr int kInContextExamples = 10;

std::vector<std::string> split_words(const std::string& text);
int word_count(const std::string& text);
std::string truncate_words(const std::string& text, int max_words);
// Largest accepted word count at a level (0-based): target + max(2, target / 8).
int level_word_limit(int level);

// Log of client traffic kept in stage provenance.
struct CallLog {
  nlohmann::json entries = nlohmann::json::array();
  double cost = 0.0;
  int64_t calls = 0;

  void add(const ClientRequest& request, const ClientReply& reply);
};

// Samples min(10, pool) exemplars without replacement from `seed_captions`
// and asks the client for `count` new captions in one in-context prompt.
// Throws StageError("caption") when the client is exhausted or the reply is
// short.
std::vector<std::string> generate_caption_set(const std::vector<std::string>& seed_captions, int count,
                                              ModelClient& client, uint64_t seed, CallLog* log = nullptr,
                                              const RetryPolicy& retry = {});

// Indices of the exemplars used for a given seed (exposed for tests).
std::vector<std::size_t> sample_exemplars(std::size_t pool, uint64_t seed);

struct CaptionLadder {
  std::vector<std::string> captions;  // level 1 (detailed) first
  std::vector<int> reprompted_levels; // 1-based
  std::vector<int> truncated_levels;  // 1-based
};

// Ten summaries of `caption`. Levels that exceed their limit or the previous
// level's length are re-prompted once, then truncated.
CaptionLadder summarize_granularities(const std::string& caption, ModelClient& client, uint64_t seed,
                                      CallLog* log = nullptr, const RetryPolicy& retry = {});

// Violations of the ladder invariants (empty when valid).
std::vector<std::string> caption_violations(const std::vector<std::string>& captions);

}  // namespace ihk::pipeline

#include "ihk/pipeline/captions.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <regex>
#include <sstream>

namespace ihk::pipeline {

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

int word_count(const std::string& text) { return static_cast<int>(split_words(text).size()); }

std::string truncate_words(const std::string& text, int max_words) {
  auto words = split_words(text);
  if (static_cast<int>(words.size()) > max_words) words.resize(static_cast<std::size_t>(std::max(0, max_words)));
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

int level_word_limit(int level) {
  const int t = kLevelWordTargets.at(static_cast<std::size_t>(level));
  return t + std::max(2, t / 8);
}

void CallLog::add(const ClientRequest& request, const ClientReply& reply) {
  entries.push_back({{"task", request.task},
                     {"seed", request.seed},
                     {"params", request.params},
                     {"messages", request.messages},
                     {"images", request.images.size()},
                     {"reply", reply.text},
                     {"cost", reply.cost}});
  cost += reply.cost;
  ++calls;
}

namespace {

ClientReply call(ModelClient& client, const ClientRequest& request, CallLog* log, const RetryPolicy& retry,
                 const char* stage) {
  try {
    auto reply = complete_with_retry(client, request, retry);
    if (log) log->add(request, reply);
    return reply;
  } catch (const TransientError& e) {
    throw StageError(stage, std::string("client exhausted: ") + e.what());
  }
}

// Non-empty reply lines with any "3." / "3)" / "3:" prefix removed.
std::vector<std::pair<int, std::string>> numbered_lines(const std::string& text) {
  static const std::regex prefix(R"(^\s*(\d+)\s*[.):]\s*(.*)$)");
  std::vector<std::pair<int, std::string>> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (split_words(line).empty()) continue;
    std::smatch m;
    if (std::regex_match(line, m, prefix)) {
      out.emplace_back(std::stoi(m[1].str()), truncate_words(m[2].str(), 1 << 20));
    } else {
      out.emplace_back(0, truncate_words(line, 1 << 20));
    }
  }
  return out;
}

}  // namespace

std::vector<std::size_t> sample_exemplars(std::size_t pool, uint64_t seed) {
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(pool, kInContextExamples));
  return idx;
}

std::vector<std::string> generate_caption_set(const std::vector<std::string>& seed_captions, int count,
                                              ModelClient& client, uint64_t seed, CallLog* log,
                                              const RetryPolicy& retry) {
  if (seed_captions.empty()) throw std::invalid_argument("at least one seed caption is required");
  if (count < 1) throw std::invalid_argument("count must be positive");
  std::ostringstream examples;
  examples << "Examples:\n";
  int k = 1;
  for (auto i : sample_exemplars(seed_captions.size(), seed)) examples << k++ << ". " << seed_captions[i] << "\n";
  ClientRequest req;
  req.task = "caption";
  req.seed = seed;
  req.params = {{"count", count}};
  req.messages = {"Describe a person's appearance and outfit in about 40 words, in the style of the examples.",
                  examples.str(), "Write " + std::to_string(count) + " new descriptions, one per line."};
  const auto reply = call(client, req, log, retry, "caption");
  std::vector<std::string> out;
  for (auto& [n, line] : numbered_lines(reply.text)) out.push_back(line);
  if (static_cast<int>(out.size()) < count) {
    throw StageError("caption", "expected " + std::to_string(count) + " captions, got " + std::to_string(out.size()));
  }
  out.resize(static_cast<std::size_t>(count));
  return out;
}

CaptionLadder summarize_granularities(const std::string& caption, ModelClient& client, uint64_t seed, CallLog* log,
                                      const RetryPolicy& retry) {
  if (split_words(caption).empty()) throw std::invalid_argument("cannot summarize an empty caption");
  ClientRequest req;
  req.task = "summarize";
  req.seed = seed;
  req.params = {{"targets", kLevelWordTargets}};
  std::ostringstream ask;
  ask << "Summarize the description at ten levels of detail with these word counts:";
  for (auto t : kLevelWordTargets) ask << " " << t;
  ask << ". Answer with ten numbered lines.";
  req.messages = {ask.str(), caption};
  const auto reply = call(client, req, log, retry, "summarize");

  std::vector<std::string> levels(kCaptionLevels);
  int next = 1;
  for (auto& [n, line] : numbered_lines(reply.text)) {
    const int level = n > 0 ? n : next;
    if (level >= 1 && level <= kCaptionLevels && levels[static_cast<std::size_t>(level - 1)].empty()) {
      levels[static_cast<std::size_t>(level - 1)] = line;
    }
    next = level + 1;
  }

  CaptionLadder out;
  int previous = word_count(caption);
  for (int i = 0; i < kCaptionLevels; ++i) {
    const int allowed = std::min(level_word_limit(i), previous);
    auto ok = [&](const std::string& s) { return word_count(s) > 0 && word_count(s) <= allowed; };
    auto& text = levels[static_cast<std::size_t>(i)];
    if (!ok(text)) {
      out.reprompted_levels.push_back(i + 1);
      const int target = std::min(kLevelWordTargets[static_cast<std::size_t>(i)], allowed);
      ClientRequest again;
      again.task = "summarize_level";
      again.seed = seed;
      again.params = {{"level", i + 1}, {"max_words", target}};
      again.messages = {"Summarize the description in at most " + std::to_string(target) + " words.", caption};
      auto retry_text = numbered_lines(call(client, again, log, retry, "summarize").text);
      text = retry_text.empty() ? std::string() : retry_text.front().second;
      if (!ok(text)) {
        out.truncated_levels.push_back(i + 1);
        const auto& source = word_count(text) > 0 ? text : (i > 0 ? levels[static_cast<std::size_t>(i - 1)] : caption);
        text = truncate_words(source, target);
      }
    }
    previous = word_count(text);
  }
  out.captions = std::move(levels);
  return out;
}

std::vector<std::string> caption_violations(const std::vector<std::string>& captions) {
  std::vector<std::string> v;
  if (static_cast<int>(captions.size()) != kCaptionLevels) {
    v.push_back("expected " + std::to_string(kCaptionLevels) + " captions, found " + std::to_string(captions.size()));
    return v;
  }
  for (int i = 0; i < kCaptionLevels; ++i) {
    const int n = word_count(captions[static_cast<std::size_t>(i)]);
    const std::string level = "caption level " + std::to_string(i + 1);
    if (n == 0) v.push_back(level + " is empty");
    if (i > 0 && n > word_count(captions[static_cast<std::size_t>(i - 1)])) {
      v.push_back(level + " is longer than level " + std::to_string(i));
    }
  }
  if (word_count(captions.front()) > level_word_limit(0)) v.push_back("caption level 1 exceeds 45 words");
  if (word_count(captions.back()) > level_word_limit(kCaptionLevels - 1)) v.push_back("caption level 10 exceeds 7 words");
  return v;
}

}  // namespace ihk::pipeline

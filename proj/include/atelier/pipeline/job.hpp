// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pipeline job record and its state machine.
//
//   queued -> generating -> classifying -> awaiting_style_choice
//   awaiting_style_choice -> stylizing -> done
//   done -> stylizing            (chaining another style, or reshuffle)
//   queued | generating | classifying | stylizing -> failed

#include <array>
#include <chrono>
#include <ctime>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/tensor.hpp"

namespace atelier::pipeline {

enum class JobState { queued, generating, classifying, awaiting_style_choice, stylizing, done, failed };

inline constexpr std::array<const char*, 7> kStateNames = {
    "queued", "generating", "classifying", "awaiting_style_choice", "stylizing", "done", "failed"};

inline std::string to_string(JobState s) { return kStateNames[static_cast<std::size_t>(s)]; }

inline JobState parse_state(const std::string& s) {
  for (std::size_t i = 0; i < kStateNames.size(); ++i)
    if (s == kStateNames[i]) return static_cast<JobState>(i);
  throw Error("invalid_argument", "unknown job state '" + s + "'");
}

inline bool is_active(JobState s) {
  return s == JobState::queued || s == JobState::generating || s == JobState::classifying || s == JobState::stylizing;
}

inline bool transition_allowed(JobState from, JobState to) {
  using S = JobState;
  if (to == S::failed) return is_active(from);
  switch (from) {
    case S::queued: return to == S::generating;
    case S::generating: return to == S::classifying;
    case S::classifying: return to == S::awaiting_style_choice;
    case S::awaiting_style_choice: return to == S::stylizing;
    case S::stylizing: return to == S::done;
    case S::done: return to == S::stylizing;
    case S::failed: return false;
  }
  return false;
}

inline std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

struct StyleChoice {
  std::string style;
  std::string mode = "feedforward";
  std::string painting;                // image path of the picked painting
  std::vector<std::uint64_t> pick_seeds;  // one per pick; the last one is in effect
  std::string input;                   // artifact hash the style was applied to
  std::string artifact;                // stylized output hash

  friend bool operator==(const StyleChoice&, const StyleChoice&) = default;
};

inline void to_json(nlohmann::json& j, const StyleChoice& c) {
  j = {{"style", c.style}, {"mode", c.mode},   {"painting", c.painting}, {"pick_seeds", c.pick_seeds},
       {"input", c.input}, {"artifact", c.artifact}};
}

inline void from_json(const nlohmann::json& j, StyleChoice& c) {
  c.style = j.at("style");
  c.mode = j.at("mode");
  c.painting = j.at("painting");
  c.pick_seeds = j.at("pick_seeds").get<std::vector<std::uint64_t>>();
  c.input = j.at("input");
  c.artifact = j.at("artifact");
}

struct JobError {
  std::string stage;
  std::string code;
  std::string message;

  friend bool operator==(const JobError&, const JobError&) = default;
};

struct Transition {
  std::string state;
  std::string at;

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct PipelineJob {
  std::string id;
  std::string text;
  std::uint64_t seed = 0;
  nlohmann::json overrides = nlohmann::json::object();
  JobState state = JobState::queued;
  std::string generated;                  // artifact hash, empty until generated
  nlohmann::json generation;              // provenance of the generated image
  nlohmann::json genre;                   // GenreDistribution JSON
  nlohmann::json recommendation;          // StyleRecommendation JSON
  std::vector<StyleChoice> choices;
  std::optional<JobError> error;
  std::vector<Transition> history;

  std::vector<std::string> recommended_styles() const {
    std::vector<std::string> out;
    if (recommendation.is_object())
      for (const auto& s : recommendation.at("styles")) out.push_back(s.at("style"));
    return out;
  }

  // Hash of the newest image: the last stylization, else the generated one.
  std::string latest_artifact() const { return choices.empty() ? generated : choices.back().artifact; }

  friend bool operator==(const PipelineJob&, const PipelineJob&) = default;
};

inline void to_json(nlohmann::json& j, const PipelineJob& job) {
  nlohmann::json hist = nlohmann::json::array();
  for (const auto& t : job.history) hist.push_back({{"state", t.state}, {"at", t.at}});
  j = {{"id", job.id},
       {"text", job.text},
       {"seed", job.seed},
       {"overrides", job.overrides},
       {"state", to_string(job.state)},
       {"generated", job.generated.empty() ? nlohmann::json() : nlohmann::json(job.generated)},
       {"generation", job.generation},
       {"genre", job.genre},
       {"recommendation", job.recommendation},
       {"choices", job.choices},
       {"error", job.error ? nlohmann::json{{"stage", job.error->stage}, {"code", job.error->code},
                                            {"message", job.error->message}}
                           : nlohmann::json()},
       {"history", hist}};
}

inline void from_json(const nlohmann::json& j, PipelineJob& job) {
  job.id = j.at("id");
  job.text = j.at("text");
  job.seed = j.at("seed");
  job.overrides = j.at("overrides");
  job.state = parse_state(j.at("state"));
  job.generated = j.at("generated").is_null() ? "" : j.at("generated").get<std::string>();
  job.generation = j.at("generation");
  job.genre = j.at("genre");
  job.recommendation = j.at("recommendation");
  job.choices = j.at("choices").get<std::vector<StyleChoice>>();
  job.error.reset();
  if (!j.at("error").is_null()) job.error = JobError{j["error"].at("stage"), j["error"].at("code"), j["error"].at("message")};
  job.history.clear();
  for (const auto& t : j.at("history")) job.history.push_back({t.at("state"), t.at("at")});
}

}  // namespace atelier::pipeline

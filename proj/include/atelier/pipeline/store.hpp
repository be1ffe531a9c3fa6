// SPDX-License-Identifier: Apache-2.0
#pragma once

// Durable job store and content-addressed artifact store.
//
// jobs/jobs.log is append-only, one JSON record per line:
//   {"seq": n, "job": <full job snapshot>}
// jobs/index.json is the current-state index. It is derived: replaying the
// log reproduces it byte for byte, and opening a store rebuilds it from the
// log so a crash between the two writes loses nothing.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atelier/core/checkpoint.hpp"
#include "atelier/core/hash.hpp"
#include "atelier/core/image.hpp"
#include "atelier/pipeline/job.hpp"

namespace atelier::pipeline {

namespace fs = std::filesystem;

struct JobPage {
  std::vector<PipelineJob> jobs;
  std::size_t page = 1;  // 1-based
  std::size_t page_size = 20;
  std::size_t total = 0;
  std::size_t pages = 0;

  nlohmann::json to_json() const {
    return {{"jobs", jobs}, {"page", page}, {"page_size", page_size}, {"total", total}, {"pages", pages}};
  }
};

struct ReplayResult {
  std::map<std::string, PipelineJob> jobs;
  std::uint64_t seq = 0;
  std::size_t dropped_tail = 0;  // 1 if a torn final line was ignored
};

// Validates every record against the state machine while rebuilding.
inline ReplayResult replay_log(const fs::path& log) {
  ReplayResult r;
  std::ifstream in(log, std::ios::binary);
  if (!in) return r;
  const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t start = 0, line_no = 0;
  while (start < content.size()) {
    const std::size_t nl = content.find('\n', start);
    ++line_no;
    if (nl == std::string::npos) {  // torn write: the record never completed
      r.dropped_tail = 1;
      break;
    }
    const std::string line = content.substr(start, nl - start);
    start = nl + 1;
    const auto where = log.string() + ":" + std::to_string(line_no);
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed_manifest", where + ": unparsable job log record: " + e.what());
    }
    const std::uint64_t seq = rec.at("seq");
    if (seq != r.seq + 1) throw Error("malformed_manifest", where + ": sequence gap in job log");
    r.seq = seq;
    PipelineJob job = rec.at("job").get<PipelineJob>();
    auto it = r.jobs.find(job.id);
    if (it == r.jobs.end()) {
      if (job.state != JobState::queued) throw Error("malformed_manifest", where + ": job " + job.id + " first seen in state " + to_string(job.state));
      r.jobs.emplace(job.id, std::move(job));
    } else {
      if (it->second.state != job.state && !transition_allowed(it->second.state, job.state))
        throw Error("malformed_manifest", where + ": illegal transition " + to_string(it->second.state) + " -> " +
                                              to_string(job.state) + " for " + job.id);
      it->second = std::move(job);
    }
  }
  return r;
}

inline std::string index_text(const std::map<std::string, PipelineJob>& jobs, std::uint64_t seq) {
  nlohmann::json j = {{"seq", seq}, {"jobs", nlohmann::json::object()}};
  for (const auto& [id, job] : jobs) j["jobs"][id] = job;
  return j.dump(2) + "\n";
}

class JobStore {
 public:
  explicit JobStore(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    ReplayResult r = replay_log(log_path());
    if (r.dropped_tail) truncate_torn_tail();
    jobs_ = std::move(r.jobs);
    seq_ = r.seq;
    write_index();
  }

  fs::path log_path() const { return dir_ / "jobs.log"; }
  fs::path index_path() const { return dir_ / "index.json"; }

  PipelineJob create(std::string text, std::uint64_t seed, nlohmann::json overrides) {
    std::lock_guard lock(mu_);
    char id[32];
    std::snprintf(id, sizeof id, "job-%06zu", jobs_.size() + 1);
    PipelineJob job;
    job.id = id;
    job.text = std::move(text);
    job.seed = seed;
    job.overrides = std::move(overrides);
    job.history.push_back({to_string(JobState::queued), utc_now()});
    persist(job);
    return job;
  }

  // Persists a new snapshot. A state change must be a legal transition;
  // a timestamped history entry is added for it.
  PipelineJob update(PipelineJob job) {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(job.id);
    if (it == jobs_.end()) throw Error("not_found", "no job with id " + job.id);
    if (it->second.state != job.state) {
      if (!transition_allowed(it->second.state, job.state))
        throw Error("invalid_state", "illegal transition " + to_string(it->second.state) + " -> " + to_string(job.state));
      job.history.push_back({to_string(job.state), utc_now()});
    }
    persist(job);
    return job;
  }

  PipelineJob get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = jobs_.find(id);
    if (it == jobs_.end()) throw Error("not_found", "no job with id " + id);
    return it->second;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return jobs_.size();
  }

  // Creation order (ids are zero-padded sequence numbers); one snapshot.
  JobPage list(std::size_t page, std::size_t page_size, const std::string& state_filter = {}) const {
    require(page >= 1, "page must be >= 1");
    require(page_size >= 1 && page_size <= 200, "page_size must be in [1, 200]");
    std::vector<PipelineJob> all;
    {
      std::lock_guard lock(mu_);
      for (const auto& [_, j] : jobs_)
        if (state_filter.empty() || to_string(j.state) == state_filter) all.push_back(j);
    }
    JobPage p;
    p.page = page;
    p.page_size = page_size;
    p.total = all.size();
    p.pages = (all.size() + page_size - 1) / page_size;
    const std::size_t lo = std::min(all.size(), (page - 1) * page_size);
    const std::size_t hi = std::min(all.size(), lo + page_size);
    p.jobs.assign(all.begin() + static_cast<long>(lo), all.begin() + static_cast<long>(hi));
    return p;
  }

  std::string index_bytes() const {
    std::lock_guard lock(mu_);
    return index_text(jobs_, seq_);
  }

 private:
  void persist(const PipelineJob& job) {
    const nlohmann::json rec = {{"seq", seq_ + 1}, {"job", job}};
    append_line(rec.dump() + "\n");
    ++seq_;
    jobs_[job.id] = job;
    write_index();
  }

  void append_line(const std::string& line) {
    const int fd = ::open(log_path().c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd < 0) throw Error("invalid_argument", "cannot open job log " + log_path().string());
    std::size_t off = 0;
    while (off < line.size()) {
      const ssize_t n = ::write(fd, line.data() + off, line.size() - off);
      if (n <= 0) {
        ::close(fd);
        throw Error("invalid_argument", "short write to job log " + log_path().string());
      }
      off += static_cast<std::size_t>(n);
    }
    ::fsync(fd);
    ::close(fd);
  }

  void write_index() {
    const std::string text = index_text(jobs_, seq_);
    write_file_atomic(index_path(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  void truncate_torn_tail() {
    std::ifstream in(log_path(), std::ios::binary);
    const std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    fs::resize_file(log_path(), content.rfind('\n') == std::string::npos ? 0 : content.rfind('\n') + 1);
  }

  fs::path dir_;
  mutable std::mutex mu_;
  std::map<std::string, PipelineJob> jobs_;
  std::uint64_t seq_ = 0;
};

// PNG artifacts named by the SHA-256 of their bytes, each with a JSON
// provenance sidecar written by the first producer.
class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  const fs::path& dir() const noexcept { return dir_; }

  std::string put(const Tensor& unit_image, const nlohmann::json& provenance) {
    const auto bytes = encode_png(unit_image);
    const std::string hash = sha256_hex(std::span<const std::uint8_t>(bytes));
    std::lock_guard lock(mu_);
    if (!fs::exists(png(hash))) write_file_atomic(png(hash), bytes);
    if (!fs::exists(sidecar(hash))) {
      const std::string text = provenance.dump(2) + "\n";
      write_file_atomic(sidecar(hash), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
    }
    return hash;
  }

  static void check_hash(const std::string& hash) {
    const bool ok = hash.size() == 64 && std::all_of(hash.begin(), hash.end(), [](char c) {
                      return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
                    });
    if (!ok) throw Error("invalid_argument", "artifact ids are 64 lowercase hex characters");
  }

  fs::path path(const std::string& hash) const {
    check_hash(hash);
    if (!fs::exists(png(hash))) throw Error("not_found", "no artifact " + hash);
    return png(hash);
  }

  std::vector<std::uint8_t> bytes(const std::string& hash) const {
    auto b = read_file_bytes(path(hash));
    if (sha256_hex(std::span<const std::uint8_t>(b)) != hash)
      throw Error("corrupt_checkpoint", "artifact " + hash + " fails its integrity check");
    return b;
  }

  Tensor image(const std::string& hash) const { return decode_png(bytes(hash), hash); }

  nlohmann::json provenance(const std::string& hash) const {
    check_hash(hash);
    std::ifstream in(sidecar(hash));
    if (!in) throw Error("not_found", "no provenance for artifact " + hash);
    return nlohmann::json::parse(in);
  }

 private:
  fs::path png(const std::string& h) const { return dir_ / (h + ".png"); }
  fs::path sidecar(const std::string& h) const { return dir_ / (h + ".json"); }

  fs::path dir_;
  std::mutex mu_;
};

}  // namespace atelier::pipeline

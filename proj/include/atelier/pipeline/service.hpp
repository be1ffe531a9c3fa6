// SPDX-License-Identifier: Apache-2.0
#pragma once

// Job orchestration: generate -> classify -> recommend, park for a human
// style choice, then stylize (and optionally chain or reshuffle).
//
// Each job's mutations are serialized by a per-job mutex; different jobs run
// concurrently on the worker pool. Models are loaded once and shared.

#include <cctype>
#include <condition_variable>
#include <deque>
#include <memory>
#include <set>
#include <thread>

#include "atelier/dmgan/generator.hpp"
#include "atelier/genre/recommend.hpp"
#include "atelier/pipeline/models.hpp"
#include "atelier/pipeline/store.hpp"

namespace atelier::pipeline {

struct ServiceConfig {
  fs::path data_dir = default_data_dir();
  long recommend_k = 3;
  std::size_t workers = 1;
  std::size_t max_optimize_iters = 200;
  bool bootstrap = true;  // train missing checkpoints on start
  BootstrapConfig bootstrap_config;
};

// Per-job request overrides accepted by create_job.
//   stages  number of generator stages to run (1..configured)
//   k       number of recommended styles
struct JobOverrides {
  std::optional<std::size_t> stages;
  std::optional<long> k;

  static JobOverrides parse(const nlohmann::json& j) {
    require(j.is_object(), "overrides must be an object");
    JobOverrides o;
    for (const auto& [key, v] : j.items()) {
      if (key == "stages") {
        require(v.is_number_integer() && v.get<long>() >= 1, "overrides.stages must be a positive integer");
        o.stages = static_cast<std::size_t>(v.get<long>());
      } else if (key == "k") {
        require(v.is_number_integer() && v.get<long>() >= 1, "overrides.k must be a positive integer");
        o.k = v.get<long>();
      } else {
        throw Error("invalid_argument", "unknown override '" + key + "' (allowed: stages, k)");
      }
    }
    return o;
  }
};

class PipelineService {
 public:
  explicit PipelineService(ServiceConfig cfg)
      : cfg_(std::move(cfg)), layout_{cfg_.data_dir}, models_(layout_), jobs_(layout_.jobs()), artifacts_(layout_.artifacts()) {
    if (cfg_.bootstrap) ensure_models(layout_, cfg_.bootstrap_config);
    recover();
  }

  ~PipelineService() { stop(); }

  PipelineService(const PipelineService&) = delete;
  PipelineService& operator=(const PipelineService&) = delete;

  const DataLayout& layout() const noexcept { return layout_; }
  const ModelBundle& models() const noexcept { return models_; }
  const ServiceConfig& config() const noexcept { return cfg_; }
  JobStore& jobs() noexcept { return jobs_; }
  ArtifactStore& artifacts() noexcept { return artifacts_; }

  PipelineJob create_job(const std::string& text, std::uint64_t seed, const nlohmann::json& overrides = nlohmann::json::object()) {
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); }))
      throw Error("invalid_argument", "text must be non-empty");
    const auto o = JobOverrides::parse(overrides);
    if (o.stages)
      require(*o.stages <= models_.gan().config().stages,
              "overrides.stages must be at most " + std::to_string(models_.gan().config().stages));
    return jobs_.create(text, seed, overrides);
  }

  PipelineJob get_job(const std::string& id) const { return jobs_.get(id); }

  JobPage list_jobs(std::size_t page, std::size_t page_size, const std::string& state = {}) const {
    if (!state.empty()) parse_state(state);
    return jobs_.list(page, page_size, state);
  }

  // Runs one stage. Parked and terminal jobs are returned unchanged.
  PipelineJob advance(const std::string& id) {
    auto lock = lock_job(id);
    return advance_locked(jobs_.get(id));
  }

  // Advances until the job parks, finishes or fails.
  PipelineJob run_to_park(const std::string& id) {
    auto lock = lock_job(id);
    PipelineJob job = jobs_.get(id);
    while (job.state == JobState::queued || job.state == JobState::generating || job.state == JobState::classifying)
      job = advance_locked(job);
    return job;
  }

  PipelineJob choose_style(const std::string& id, const std::string& style, const std::string& mode = "feedforward",
                           std::optional<std::size_t> iters = {}) {
    const auto m = styler::parse_mode(mode);
    const std::size_t n_iters = check_iters(iters);
    auto lock = lock_job(id);
    PipelineJob job = jobs_.get(id);
    if (job.state != JobState::awaiting_style_choice && job.state != JobState::done)
      throw Error("invalid_state", "job " + id + " is " + to_string(job.state) +
                                       "; styles can be chosen only when awaiting_style_choice or done");
    const auto allowed = job.recommended_styles();
    if (std::find(allowed.begin(), allowed.end(), style) == allowed.end()) {
      std::string list;
      for (const auto& s : allowed) list += (list.empty() ? "" : ", ") + s;
      throw Error("invalid_argument", "style '" + style + "' is not recommended for job " + id + "; choose one of: " + list);
    }
    StyleChoice c;
    c.style = style;
    c.mode = styler::mode_name(m);
    c.pick_seeds = {mix_seed(job.seed, job.choices.size())};
    c.input = job.latest_artifact();
    return stylize_into(std::move(job), std::move(c), n_iters, /*replace_last=*/false);
  }

  // Re-picks a painting for the latest choice with the next pick seed and
  // re-stylizes its input, replacing the latest artifact.
  PipelineJob reshuffle(const std::string& id) {
    auto lock = lock_job(id);
    PipelineJob job = jobs_.get(id);
    if (job.choices.empty()) throw Error("invalid_state", "job " + id + " has no style picks to reshuffle");
    if (job.state != JobState::done)
      throw Error("invalid_state", "job " + id + " is " + to_string(job.state) + "; only done jobs can be reshuffled");
    StyleChoice c = job.choices.back();
    c.pick_seeds.push_back(c.pick_seeds.back() + 1);
    const std::size_t iters = c.mode == "optimize" ? cfg_.max_optimize_iters : 0;
    return stylize_into(std::move(job), std::move(c), iters, /*replace_last=*/true);
  }

  genre::StyleRecommendation preview_styles(const std::string& genre, long k) const {
    const auto& stats = models_.stats();
    if (!stats.has_genre(genre)) {
      std::set<std::string> known;
      for (const auto& [key, _] : stats.counts()) known.insert(key.first);
      std::string list;
      for (const auto& g : known) list += (list.empty() ? "" : ", ") + g;
      throw Error("not_found", "unknown genre '" + genre + "'; known genres: " + list);
    }
    return genre::recommend_styles(genre, stats, k);
  }

  // Background execution up to the park state.
  void submit(const std::string& id) {
    start_workers();
    {
      std::lock_guard lock(queue_mu_);
      queue_.push_back(id);
    }
    queue_cv_.notify_one();
  }

  // Queues jobs left active by a previous process.
  void resume_pending() {
    if (!pending_.empty()) start_workers();
  }

  // Blocks until the queue is drained and no worker is busy.
  void wait_idle() {
    std::unique_lock lock(queue_mu_);
    idle_cv_.wait(lock, [&] { return queue_.empty() && busy_ == 0; });
  }

  void stop() {
    {
      std::lock_guard lock(queue_mu_);
      stopping_ = true;
    }
    queue_cv_.notify_all();
    for (auto& t : workers_)
      if (t.joinable()) t.join();
    workers_.clear();
  }

 private:
  std::unique_lock<std::mutex> lock_job(const std::string& id) {
    std::shared_ptr<std::mutex> m;
    {
      std::lock_guard lock(locks_mu_);
      auto& slot = job_locks_[id];
      if (!slot) slot = std::make_shared<std::mutex>();
      m = slot;
    }
    return std::unique_lock(*m);
  }

  std::size_t check_iters(std::optional<std::size_t> iters) const {
    if (!iters) return cfg_.max_optimize_iters;
    require(*iters >= 1 && *iters <= cfg_.max_optimize_iters,
            "iters must be in [1, " + std::to_string(cfg_.max_optimize_iters) + "]");
    return *iters;
  }

  PipelineJob fail(PipelineJob job, const std::string& stage, const std::string& code, const std::string& message) {
    job.error = JobError{stage, code, message};
    job.state = JobState::failed;
    return jobs_.update(std::move(job));
  }

  PipelineJob advance_locked(PipelineJob job) {
    const auto o = JobOverrides::parse(job.overrides);
    const std::string stage = job.state == JobState::classifying ? "classifying" : "generating";
    try {
      switch (job.state) {
        case JobState::queued:
          job.state = JobState::generating;
          job = jobs_.update(std::move(job));
          [[fallthrough]];
        case JobState::generating: {
          const auto& gan = models_.gan();
          const std::size_t stages = o.stages.value_or(gan.config().stages);
          auto images = dmgan::generate(job.text, job.seed, stages, models_.damsm(), gan);
          const auto& last = images.back();
          nlohmann::json prov = last.provenance();
          prov["kind"] = "generated";
          job.generated = artifacts_.put(to_unit_range(last.image), prov);
          job.generation = prov;
          job.state = JobState::classifying;
          return jobs_.update(std::move(job));
        }
        case JobState::classifying: {
          const auto dist = models_.classifier().classify(artifacts_.image(job.generated));
          const auto rec = genre::recommend_styles(dist.genre(), models_.stats(), o.k.value_or(cfg_.recommend_k));
          if (rec.styles.empty())
            throw Error("not_found", "no styles recorded for genre '" + dist.genre() + "' in the painting corpus");
          job.genre = dist.to_json();
          job.recommendation = rec.to_json();
          job.state = JobState::awaiting_style_choice;
          return jobs_.update(std::move(job));
        }
        default:
          return job;
      }
    } catch (const Error& e) {
      return fail(jobs_.get(job.id), stage, e.code(), e.what());
    } catch (const std::exception& e) {
      return fail(jobs_.get(job.id), stage, "internal", e.what());
    }
  }

  Tensor stylize(const Tensor& content, const corpus::PaintingRecord& painting, const std::string& mode,
                 std::size_t iters) const {
    const Tensor style = read_png(painting.image_path);
    if (mode == "optimize") {
      styler::OptimizeConfig oc;
      oc.iterations = iters;
      return styler::stylize_optimize(content, style, oc).image;
    }
    return styler::stylize_feedforward(content, models_.predictor().predict(style), models_.transfer());
  }

  PipelineJob stylize_into(PipelineJob job, StyleChoice c, std::size_t iters, bool replace_last) {
    const std::string id = job.id;
    job.state = JobState::stylizing;
    job = jobs_.update(std::move(job));
    try {
      const auto painting = genre::pick_painting(c.style, models_.paintings().records, c.pick_seeds.back());
      const Tensor out = stylize(artifacts_.image(c.input), painting, c.mode, iters);
      c.painting = fs::relative(painting.image_path, layout_.root).generic_string();
      nlohmann::json prov = {{"kind", "stylized"},
                             {"input", c.input},
                             {"style", c.style},
                             {"mode", c.mode},
                             {"painting", c.painting},
                             {"pick_seed", c.pick_seeds.back()}};
      if (c.mode == "optimize") prov["iterations"] = iters;
      else
        prov["checkpoints"] = {checkpoint_id(models_.predictor().to_checkpoint()),
                               checkpoint_id(models_.transfer().to_checkpoint())};
      c.artifact = artifacts_.put(out, prov);
      if (replace_last) job.choices.back() = std::move(c);
      else job.choices.push_back(std::move(c));
      job.state = JobState::done;
      return jobs_.update(std::move(job));
    } catch (const Error& e) {
      return fail(jobs_.get(id), "stylizing", e.code(), e.what());
    } catch (const std::exception& e) {
      return fail(jobs_.get(id), "stylizing", "internal", e.what());
    }
  }

  // Jobs caught mid-stylization by a restart fail; earlier stages resume.
  void recover() {
    const auto all = jobs_.list(1, 200).total;
    for (std::size_t p = 1; p <= (all + 199) / 200; ++p)
      for (const auto& j : jobs_.list(p, 200).jobs) {
        if (j.state == JobState::stylizing) fail(j, "stylizing", "interrupted", "service restarted during stylization");
        else if (is_active(j.state)) pending_.push_back(j.id);
      }
  }

  void start_workers() {
    std::lock_guard lock(queue_mu_);
    if (!workers_.empty() || stopping_) return;
    for (const auto& id : pending_) queue_.push_back(id);
    pending_.clear();
    for (std::size_t i = 0; i < std::max<std::size_t>(1, cfg_.workers); ++i) workers_.emplace_back([this] { work(); });
  }

  void work() {
    for (;;) {
      std::string id;
      {
        std::unique_lock lock(queue_mu_);
        queue_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_) return;
        id = queue_.front();
        queue_.pop_front();
        ++busy_;
      }
      try {
        run_to_park(id);
      } catch (...) {
        // advance records stage failures on the job itself; anything else
        // (e.g. the job vanished) leaves nothing to update.
      }
      {
        std::lock_guard lock(queue_mu_);
        --busy_;
      }
      idle_cv_.notify_all();
    }
  }

  ServiceConfig cfg_;
  DataLayout layout_;
  ModelBundle models_;
  JobStore jobs_;
  ArtifactStore artifacts_;

  std::mutex locks_mu_;
  std::map<std::string, std::shared_ptr<std::mutex>> job_locks_;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_, idle_cv_;
  std::deque<std::string> queue_;
  std::vector<std::string> pending_;
  std::vector<std::thread> workers_;
  std::size_t busy_ = 0;
  bool stopping_ = false;
};

}  // namespace atelier::pipeline

// SPDX-License-Identifier: Apache-2.0
// atelier command-line front end. Results go to stdout as JSON; failures
// print one JSON error line to stderr and exit nonzero (2 for usage errors).

#include <CLI11.hpp>

#include <csignal>
#include <fstream>
#include <iostream>

#include "atelier/metrics/generator_eval.hpp"
#include "atelier/metrics/style_eval.hpp"
#include "atelier/pipeline/http.hpp"

using namespace atelier;
using namespace atelier::pipeline;
using nlohmann::json;

namespace {

// Global options plus the optional --config file. Keys in the file:
//   data_dir, recommend_k, workers, max_optimize_iters, seed
// Precedence for the data root: --data-dir, ATELIER_DATA_DIR, data_dir.
struct Globals {
  std::string data_dir;
  std::string config;
  bool quiet = false;
};

ServiceConfig service_config(const Globals& g) {
  ServiceConfig c;
  json file = json::object();
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw Error("not_found", "config file " + g.config + " not found");
    try {
      file = json::parse(in);
    } catch (const json::exception& e) {
      throw Error("invalid_argument", "config file " + g.config + ": " + e.what());
    }
    static const std::set<std::string> known = {"data_dir", "recommend_k", "workers", "max_optimize_iters", "seed"};
    for (const auto& [k, _] : file.items())
      if (!known.count(k)) throw Error("invalid_argument", "config file " + g.config + ": unknown key '" + k + "'");
  }
  c.data_dir = file.value("data_dir", std::string("atelier-data"));
  if (const char* env = std::getenv("ATELIER_DATA_DIR"); env && *env) c.data_dir = env;
  if (!g.data_dir.empty()) c.data_dir = g.data_dir;
  c.recommend_k = file.value("recommend_k", c.recommend_k);
  c.workers = file.value("workers", c.workers);
  c.max_optimize_iters = file.value("max_optimize_iters", c.max_optimize_iters);
  c.bootstrap_config.seed = file.value("seed", c.bootstrap_config.seed);
  return c;
}

std::function<void(const std::string&)> logger(const Globals& g) {
  return [quiet = g.quiet](const std::string& s) {
    if (!quiet) std::cerr << json{{"log", s}}.dump() << std::endl;
  };
}

DataLayout ready_layout(const Globals& g) {
  const auto c = service_config(g);
  DataLayout d{c.data_dir};
  ensure_models(d, c.bootstrap_config, logger(g));
  return d;
}

void print(const json& j) { std::cout << j.dump() << std::endl; }

void write_with_sidecar(const fs::path& out, const Tensor& img, const json& provenance) {
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_png(out, img);
  std::ofstream(out.string() + ".json") << provenance.dump(2) << "\n";
}

Checkpoint save_to(const fs::path& path, const Checkpoint& ck) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, ck);
  return ck;
}

json checkpoint_summary(const fs::path& path, const Checkpoint& ck) {
  return {{"checkpoint", path.string()}, {"kind", ck.kind}, {"id", checkpoint_id(ck)}};
}

fs::path resolve_near(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return q.is_absolute() ? q : base.parent_path() / q;
}

std::sig_atomic_t volatile g_stop = 0;
httplib::Server* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"atelier: text to image, genre and style studio"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may follow the subcommand
  Globals g;
  app.add_option("--data-dir", g.data_dir, "Data root (default: $ATELIER_DATA_DIR or atelier-data)");
  app.add_option("--config", g.config, "JSON config file");
  app.add_flag("-q,--quiet", g.quiet, "Suppress progress logs on stderr");

  // generate
  std::string gen_text, gen_out;
  std::uint64_t gen_seed = 0;
  std::size_t gen_stages = 0;
  auto* generate = app.add_subcommand("generate", "Generate an image from a description");
  generate->add_option("text", gen_text, "Image description")->required();
  generate->add_option("--seed", gen_seed, "Noise seed");
  generate->add_option("--stages", gen_stages, "Generator stages to run (default: all)");
  generate->add_option("--out", gen_out, "Also write the PNG (and a .json provenance sidecar) here");

  // pipeline
  std::string pipe_text, pipe_style, pipe_mode = "feedforward", pipe_out;
  std::uint64_t pipe_seed = 0;
  bool pipe_auto = false;
  std::optional<std::size_t> pipe_iters;
  auto* pipeline = app.add_subcommand("pipeline", "Run the generate, classify, recommend, stylize workflow");
  pipeline->add_option("text", pipe_text, "Image description")->required();
  pipeline->add_option("--seed", pipe_seed, "Job seed");
  pipeline->add_flag("--auto", pipe_auto, "Apply the top recommended style instead of parking");
  pipeline->add_option("--style", pipe_style, "Apply this recommended style");
  pipeline->add_option("--mode", pipe_mode, "feedforward or optimize")->check(CLI::IsMember({"feedforward", "optimize"}));
  pipeline->add_option("--iters", pipe_iters, "Iteration cap for optimize mode");
  pipeline->add_option("--out", pipe_out, "Copy the final artifact here");

  // classify
  std::string cls_image;
  long cls_k = 0;
  auto* classify = app.add_subcommand("classify", "Predict the genre of an image and recommend styles");
  classify->add_option("image", cls_image, "PNG image")->required()->check(CLI::ExistingFile);
  classify->add_option("-k", cls_k, "Number of recommended styles");

  // stylize
  std::string sty_content, sty_style, sty_out;
  bool sty_optimize = false;
  std::size_t sty_iters = 200;
  auto* stylize = app.add_subcommand("stylize", "Apply the style of one image to another");
  stylize->add_option("content", sty_content, "Content PNG")->required()->check(CLI::ExistingFile);
  stylize->add_option("--style-image", sty_style, "Style PNG")->required()->check(CLI::ExistingFile);
  stylize->add_flag("--optimize", sty_optimize, "Optimize pixels instead of the feedforward network");
  stylize->add_option("--iters", sty_iters, "Iterations in optimize mode")->check(CLI::PositiveNumber);
  stylize->add_option("--out", sty_out, "Output PNG (default: the artifact store)");

  // training
  std::string manifest, train_out, train_out2, damsm_path;
  std::optional<std::size_t> epochs, steps;
  std::optional<std::uint64_t> train_seed;
  auto* train_damsm = app.add_subcommand("train-damsm", "Train the text and image encoders on a caption manifest");
  auto* train_gan = app.add_subcommand("train-gan", "Train the generator on a caption manifest");
  auto* train_classifier = app.add_subcommand("train-classifier", "Fine-tune the genre classifier on a painting manifest");
  auto* train_styler = app.add_subcommand("train-styler", "Train the style prediction and transfer networks");
  for (auto* t : {train_damsm, train_gan, train_classifier, train_styler}) {
    t->add_option("manifest", manifest, "Manifest (.jsonl)")->required()->check(CLI::ExistingFile);
    t->add_option("--seed", train_seed, "Training seed");
    t->add_option("--out", train_out, "Checkpoint path (default: <data-dir>/models/<kind>.ckpt)");
  }
  for (auto* t : {train_damsm, train_classifier, train_styler}) t->add_option("--epochs", epochs, "Epochs");
  train_gan->add_option("--steps", steps, "Optimizer steps");
  train_gan->add_option("--damsm", damsm_path, "Text encoder checkpoint (default: <data-dir>/models/damsm.ckpt)");
  train_styler->add_option("--out-transfer", train_out2, "Transfer checkpoint path");

  // evaluate
  std::string eval_config;
  auto* evaluate = app.add_subcommand("evaluate", "Score models as described by a JSON evaluation config");
  evaluate->add_option("config", eval_config, "Evaluation config")->required()->check(CLI::ExistingFile);

  // serve
  int port = 8080;
  std::string host = "127.0.0.1", static_dir;
  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  serve->add_option("--port", port, "TCP port (0 picks a free one)");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--static", static_dir, "Serve UI assets from this directory at /ui")->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_envelope("usage", e.what()).dump() << std::endl;
    return 2;
  }

  try {
    if (*generate) {
      const auto d = ready_layout(g);
      ModelBundle m(d);
      const std::size_t stages = gen_stages ? gen_stages : m.gan().config().stages;
      const auto img = dmgan::generate(gen_text, gen_seed, stages, m.damsm(), m.gan()).back();
      json prov = img.provenance();
      prov["kind"] = "generated";
      const Tensor unit = to_unit_range(img.image);
      const auto hash = ArtifactStore(d.artifacts()).put(unit, prov);
      if (!gen_out.empty()) write_with_sidecar(gen_out, unit, prov);
      print({{"artifact", hash},
             {"path", (gen_out.empty() ? d.artifacts() / (hash + ".png") : fs::path(gen_out)).string()},
             {"provenance", prov}});
    } else if (*pipeline) {
      auto cfg = service_config(g);
      const auto log = logger(g);
      ensure_models(DataLayout{cfg.data_dir}, cfg.bootstrap_config, log);
      cfg.bootstrap = false;
      PipelineService svc(cfg);
      auto job = svc.run_to_park(svc.create_job(pipe_text, pipe_seed).id);
      if (job.state == JobState::awaiting_style_choice && (pipe_auto || !pipe_style.empty())) {
        const std::string style = pipe_style.empty() ? job.recommended_styles().at(0) : pipe_style;
        job = svc.choose_style(job.id, style, pipe_mode, pipe_iters);
      }
      if (job.state == JobState::failed) {
        std::cerr << error_envelope(job.error->code, job.error->stage + ": " + job.error->message).dump() << std::endl;
        return 1;
      }
      json out = {{"job", job}, {"final_artifact", job.latest_artifact()},
                  {"path", svc.artifacts().path(job.latest_artifact()).string()}};
      if (!pipe_out.empty()) {
        const auto bytes = svc.artifacts().bytes(job.latest_artifact());
        if (fs::path(pipe_out).has_parent_path()) fs::create_directories(fs::path(pipe_out).parent_path());
        write_file_atomic(pipe_out, bytes);
        out["path"] = pipe_out;
      }
      print(out);
    } else if (*classify) {
      const auto cfg = service_config(g);
      const auto d = ready_layout(g);
      ModelBundle m(d);
      const auto dist = m.classifier().classify(read_png(cls_image));
      const auto rec = genre::recommend_styles(dist.genre(), m.stats(), cls_k > 0 ? cls_k : cfg.recommend_k);
      print({{"genre", dist.to_json()}, {"recommendation", rec.to_json()}});
    } else if (*stylize) {
      const Tensor content = read_png(sty_content), style = read_png(sty_style);
      json result = {{"mode", sty_optimize ? "optimize" : "feedforward"}, {"content", sty_content}, {"style", sty_style}};
      Tensor out;
      if (sty_optimize) {
        styler::OptimizeConfig oc;
        oc.iterations = sty_iters;
        const auto r = styler::stylize_optimize(content, style, oc);
        out = r.image;
        result["iterations"] = sty_iters;
        result["initial_style_loss"] = r.initial_style_loss;
        result["best_style_loss"] = r.best_style_loss;
      } else {
        ModelBundle m(ready_layout(g));
        out = styler::stylize_feedforward(content, m.predictor().predict(style), m.transfer());
        result["checkpoints"] = {checkpoint_id(m.predictor().to_checkpoint()), checkpoint_id(m.transfer().to_checkpoint())};
      }
      if (sty_out.empty()) {
        const auto d = DataLayout{service_config(g).data_dir};
        result["artifact"] = ArtifactStore(d.artifacts()).put(out, result);
        result["path"] = (d.artifacts() / (result["artifact"].get<std::string>() + ".png")).string();
      } else {
        write_with_sidecar(sty_out, out, result);
        result["artifact"] = sha256_hex(std::span<const std::uint8_t>(encode_png(out)));
        result["path"] = sty_out;
      }
      print(result);
    } else if (*train_damsm || *train_gan) {
      const DataLayout d{service_config(g).data_dir};
      const auto records = corpus::load_caption_manifest(manifest);
      BootstrapConfig defaults;
      if (*train_damsm) {
        DamsmRecipe r = defaults.damsm;
        if (epochs) r.train.epochs = *epochs;
        if (train_seed) r.train.seed = *train_seed;
        const fs::path out = train_out.empty() ? d.checkpoint("damsm") : fs::path(train_out);
        print(checkpoint_summary(out, save_to(out, train_damsm_on(records, r).to_checkpoint())));
      } else {
        GanRecipe r = defaults.gan;
        if (steps) r.steps = *steps;
        if (train_seed) r.train.seed = *train_seed;
        const fs::path dp = damsm_path.empty() ? d.checkpoint("damsm") : fs::path(damsm_path);
        const auto damsm = text::DamsmModel::from_checkpoint(load_checkpoint(dp, "damsm"));
        const auto log = logger(g);
        const auto model = train_gan_on(damsm, records, r, [&](std::size_t step, const dmgan::GanLosses& l) {
          if (step % 10 == 0 || step + 1 == r.steps)
            log("step " + std::to_string(step) + " g=" + std::to_string(l.generator) + " d=" + std::to_string(l.discriminator));
        });
        const fs::path out = train_out.empty() ? d.checkpoint("dmgan") : fs::path(train_out);
        print(checkpoint_summary(out, save_to(out, model.to_checkpoint())));
      }
    } else if (*train_classifier) {
      const DataLayout d{service_config(g).data_dir};
      ClassifierRecipe r = BootstrapConfig{}.classifier;
      if (epochs) r.train.epochs = *epochs;
      if (train_seed) r.train.seed = r.init_seed = *train_seed;
      const auto res = train_classifier_on(corpus::load_painting_manifest(manifest), r);
      const fs::path out = train_out.empty() ? d.checkpoint("genre_classifier") : fs::path(train_out);
      json summary = checkpoint_summary(out, save_to(out, res.model.to_checkpoint()));
      summary["best_epoch"] = res.best_epoch;
      summary["trace"] = json::array();
      for (const auto& e : res.trace) summary["trace"].push_back(e.to_json());
      print(summary);
    } else if (*train_styler) {
      const DataLayout d{service_config(g).data_dir};
      StylerRecipe r = BootstrapConfig{}.styler;
      if (epochs) r.train.epochs = *epochs;
      if (train_seed) r.train.seed = *train_seed;
      const auto res = train_styler_on(corpus::load_painting_manifest(manifest), r);
      const fs::path p = train_out.empty() ? d.checkpoint("style_predictor") : fs::path(train_out);
      const fs::path t = train_out2.empty() ? d.checkpoint("style_transfer") : fs::path(train_out2);
      json summary = {{"predictor", checkpoint_summary(p, save_to(p, res.predictor.to_checkpoint()))},
                      {"transfer", checkpoint_summary(t, save_to(t, res.transfer.to_checkpoint()))},
                      {"trace", json::array()}};
      for (const auto& e : res.trace) summary["trace"].push_back(e.to_json());
      print(summary);
    } else if (*evaluate) {
      // Keys: kind ("style_transfer" | "generator"), manifest, seed, and
      //   style_transfer: observed_fraction, image_size, max_pairs_per_split, contents
      //   generator:      stages, max_samples, splits, r
      // Paths are relative to the config file. Models come from the data root.
      std::ifstream in(eval_config);
      json c;
      try {
        c = json::parse(in);
      } catch (const json::exception& e) {
        throw Error("invalid_argument", eval_config + ": " + e.what());
      }
      const std::string kind = c.value("kind", std::string());
      ModelBundle m(ready_layout(g));
      if (kind == "style_transfer") {
        metrics::StyleEvalConfig ec;
        ec.split.observed_fraction = c.value("observed_fraction", ec.split.observed_fraction);
        ec.image_size = c.value("image_size", ec.image_size);
        ec.max_pairs_per_split = c.value("max_pairs_per_split", ec.max_pairs_per_split);
        ec.seed = c.value("seed", ec.seed);
        const auto paintings = c.contains("manifest")
                                   ? corpus::load_painting_manifest(resolve_near(eval_config, c["manifest"]))
                                   : m.paintings();
        std::vector<Tensor> contents;
        for (auto& s : corpus::synth_shapes(mix_seed(ec.seed, 0xC0), c.value("contents", std::size_t{8}), ec.image_size))
          contents.push_back(std::move(s.image));
        const auto r = metrics::eval_style_transfer(m.predictor(), m.transfer(), metrics::styled_images(paintings.records),
                                                    contents, ec);
        std::cout << r.table();
        print(r.to_json());
      } else if (kind == "generator") {
        metrics::GeneratorEvalConfig ec;
        ec.stages = c.value("stages", ec.stages);
        ec.max_samples = c.value("max_samples", ec.max_samples);
        ec.splits = c.value("splits", ec.splits);
        ec.r = c.value("r", ec.r);
        ec.seed = c.value("seed", ec.seed);
        const auto records = corpus::load_caption_manifest(
            c.contains("manifest") ? resolve_near(eval_config, c["manifest"]) : m.layout().captions());
        const auto r = metrics::eval_generator(m.damsm(), m.gan(), m.classifier(), records, ec);
        std::cout << r.table();
        print(r.to_json());
      } else {
        throw Error("invalid_argument", eval_config + ": kind must be \"style_transfer\" or \"generator\"");
      }
    } else if (*serve) {
      auto cfg = service_config(g);
      ensure_models(DataLayout{cfg.data_dir}, cfg.bootstrap_config, logger(g));
      cfg.bootstrap = false;
      PipelineService svc(cfg);
      svc.resume_pending();
      httplib::Server srv;
      install_routes(srv, svc);
      if (!static_dir.empty()) srv.set_mount_point("/ui", static_dir);
      const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
      if (bound < 0) throw Error("invalid_argument", "cannot bind " + host + ":" + std::to_string(port));
      g_server = &srv;
      std::signal(SIGINT, [](int) {
        g_stop = 1;
        if (g_server) g_server->stop();
      });
      std::signal(SIGTERM, [](int) {
        g_stop = 1;
        if (g_server) g_server->stop();
      });
      print({{"listening", host + ":" + std::to_string(bound)}, {"data_dir", cfg.data_dir.string()}});
      srv.listen_after_bind();
      svc.stop();
    }
  } catch (const Error& e) {
    std::cerr << error_envelope(e.code(), e.what()).dump() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << error_envelope("internal", e.what()).dump() << std::endl;
    return 1;
  }
  return 0;
}

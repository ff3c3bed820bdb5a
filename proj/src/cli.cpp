#include "mecca/cli.hpp"

#include <atomic>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>

#include "mecca/error.hpp"
#include "mecca/io.hpp"
#include "mecca/server.hpp"
#include "mecca/session.hpp"
#include "mecca/synthgen.hpp"
#include "mecca/trainer.hpp"

namespace mecca {

namespace {

std::filesystem::path default_out_dir() {
  const char* env = std::getenv("MECCA_OUT_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("mecca_out");
}

// "HxWxD", e.g. 32x32x16.
Shape3 parse_shape(const std::string& s) {
  static const std::regex re(R"((\d+)x(\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) fail(ErrorKind::kInvalidArgument, "shape must look like HxWxD, got '" + s + "'");
  Shape3 sh{std::stoi(m[3]), std::stoi(m[1]), std::stoi(m[2])};
  sh.validate();
  return sh;
}

nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::kMissingFile, "cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::kValidation, p.string() + " is not valid JSON: " + e.what());
  }
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + p.string());
  out << text;
  if (!out) fail(ErrorKind::kIo, "failed writing " + p.string());
}

EvalConfig eval_config_for(const Checkpoint& ck) {
  if (ck.meta.contains("config")) {
    TrainConfig tc = ck.meta.at("config").get<TrainConfig>();
    return eval_config_from(tc);
  }
  return EvalConfig{};
}

std::atomic<HttpServer*> g_server{nullptr};

extern "C" void on_stop_signal(int) {
  if (HttpServer* s = g_server.load()) s->stop();
}

void run_interact(SessionManager& mgr, const std::string& id, std::istream& in, std::ostream& out) {
  out << nlohmann::json{{"session", mgr.describe(id)}, {"suggestions", mgr.suggestions(id)}}.dump() << '\n';
  out << "commands: [z,y,x] | [[z,y,x],...] | step | suggest | state | metrics | quit\n" << std::flush;
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    line = line.substr(first, line.find_last_not_of(" \t\r") - first + 1);
    try {
      if (line == "quit" || line == "exit") break;
      if (line == "step") {
        out << mgr.step(id).get().dump() << '\n';
      } else if (line == "suggest") {
        out << mgr.suggestions(id).dump() << '\n';
      } else if (line == "state") {
        out << mgr.describe(id).dump() << '\n';
      } else if (line == "metrics") {
        out << mgr.metrics(id).dump() << '\n';
      } else if (line.front() == '[') {
        nlohmann::json j = nlohmann::json::parse(line);
        if (!j.empty() && j.front().is_number()) j = nlohmann::json::array({j});
        out << mgr.submit_hints(id, hints_from_json(j)).dump() << '\n';
      } else {
        out << nlohmann::json{{"error", "invalid_argument"}, {"message", "unknown command '" + line + "'"}}.dump()
            << '\n';
      }
    } catch (const Error& e) {
      out << nlohmann::json{{"error", to_string(e.kind())}, {"message", e.what()}}.dump() << '\n';
    } catch (const nlohmann::json::exception& e) {
      out << nlohmann::json{{"error", "validation"}, {"message", e.what()}}.dump() << '\n';
    }
    out << std::flush;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Interactive volumetric segmentation with per-voxel agents", "mecca"};
  app.require_subcommand(1);
  const std::string out_default = default_out_dir().string();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset and manifest");
  int gen_count = 40;
  std::string gen_shape = "32x32x16";
  std::uint64_t gen_seed = 7;
  std::string gen_out = out_default;
  gen->add_option("--count", gen_count, "Number of samples")->capture_default_str();
  gen->add_option("--shape", gen_shape, "Volume extents HxWxD")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  gen->add_option("--out-dir", gen_out, "Output directory (default $MECCA_OUT_DIR or ./mecca_out)")
      ->capture_default_str();

  // train / print-config share the config flags
  struct ConfigFlags {
    std::string config;
    double labeled_fraction = 1.0;
    std::uint64_t seed = 0;
    int epochs = 200;
    int workers = 1;
    double lr = 1e-4;
    double conf_lr = 1e-4;
    std::string widths = "full";
    CLI::Option* o_frac = nullptr;
    CLI::Option* o_seed = nullptr;
    CLI::Option* o_epochs = nullptr;
    CLI::Option* o_workers = nullptr;
    CLI::Option* o_lr = nullptr;
    CLI::Option* o_conf_lr = nullptr;
    CLI::Option* o_widths = nullptr;

    void add(CLI::App* c) {
      c->add_option("--config", config, "JSON config file (as printed by print-config)");
      o_frac = c->add_option("--labeled-fraction", labeled_fraction, "Fraction of samples with labels")
                   ->capture_default_str();
      o_seed = c->add_option("--seed", seed, "Training seed")->capture_default_str();
      o_epochs = c->add_option("--epochs", epochs, "Epochs")->capture_default_str();
      o_workers = c->add_option("--workers", workers, "Evaluation threads")->capture_default_str();
      o_lr = c->add_option("--lr", lr, "Segmentation learning rate")->capture_default_str();
      o_conf_lr = c->add_option("--conf-lr", conf_lr, "Confidence learning rate")->capture_default_str();
      o_widths = c->add_option("--widths", widths, "Network preset")
                     ->check(CLI::IsMember({"full", "desk", "tiny"}))
                     ->capture_default_str();
    }

    TrainConfig resolve() const {
      TrainConfig cfg;
      if (!config.empty()) cfg = read_json_file(config).get<TrainConfig>();
      if (o_frac->count()) cfg.labeled_fraction = labeled_fraction;
      if (o_seed->count()) cfg.seed = seed;
      if (o_epochs->count()) cfg.epochs = epochs;
      if (o_workers->count()) cfg.workers = workers;
      if (o_lr->count()) cfg.lr = lr;
      if (o_conf_lr->count()) cfg.conf_lr = conf_lr;
      if (o_widths->count()) {
        cfg.widths = widths == "desk" ? nn::NetWidths::desk() : widths == "tiny" ? nn::NetWidths::tiny()
                                                                                 : nn::NetWidths{};
      }
      cfg.validate();
      return cfg;
    }
  };

  auto* train_cmd = app.add_subcommand("train", "Train both networks");
  ConfigFlags train_flags;
  train_flags.add(train_cmd);
  std::string train_manifest, train_resume, train_eval_manifest;
  std::string train_out = out_default;
  int train_eval_every = -1;
  train_cmd->add_option("--manifest", train_manifest, "Training manifest")->required();
  train_cmd->add_option("--resume", train_resume, "Checkpoint to resume from");
  train_cmd->add_option("--eval-manifest", train_eval_manifest, "Held-out manifest for periodic evaluation");
  train_cmd->add_option("--eval-every", train_eval_every, "Epochs between held-out evaluations (overrides config)");
  train_cmd->add_option("--out-dir", train_out, "Output directory")->capture_default_str();

  auto* print_cmd = app.add_subcommand("print-config", "Print the effective training config as JSON");
  ConfigFlags print_flags;
  print_flags.add(print_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint with the simulated expert");
  std::string eval_ckpt, eval_manifest;
  std::string eval_out = out_default;
  std::uint64_t eval_seed = 0;
  int eval_workers = 1;
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--manifest", eval_manifest, "Labeled manifest")->required();
  auto* o_eval_seed = eval_cmd->add_option("--seed", eval_seed, "Click seed (default: the checkpoint's seed)");
  eval_cmd->add_option("--workers", eval_workers, "Threads")->capture_default_str();
  eval_cmd->add_option("--out-dir", eval_out, "Output directory")->capture_default_str();

  // interact
  auto* int_cmd = app.add_subcommand("interact", "Terminal-driven refinement session");
  std::string int_ckpt, int_volume, int_label;
  int_cmd->add_option("--ckpt", int_ckpt, "Checkpoint")->required();
  int_cmd->add_option("--volume", int_volume, "Image volume")->required();
  int_cmd->add_option("--label", int_label, "Optional label mask, enables Dice/ASSD reports");

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP session server");
  std::string serve_host = "127.0.0.1";
  int serve_port = 8080;
  int serve_max_steps = 1000;
  serve_cmd->add_option("--host", serve_host, "Bind address")->capture_default_str();
  serve_cmd->add_option("--port", serve_port, "Port (0 picks a free one)")->capture_default_str();
  serve_cmd->add_option("--max-steps", serve_max_steps, "Step limit per session")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << nlohmann::json{{"error", "usage"}, {"message", msg}}.dump() << '\n';
    return 2;
  }

  try {
    if (*gen) {
      GenDataOptions o;
      o.count = gen_count;
      o.shape = parse_shape(gen_shape);
      o.seed = gen_seed;
      if (o.count < 1) fail(ErrorKind::kInvalidArgument, "--count must be positive");
      const auto manifest = generate_dataset(o, gen_out);
      out << nlohmann::json{{"manifest", manifest.string()}, {"count", o.count}}.dump() << '\n';
    } else if (*print_cmd) {
      out << nlohmann::json(print_flags.resolve()).dump(2) << '\n';
    } else if (*train_cmd) {
      TrainConfig cfg = train_flags.resolve();
      if (train_eval_every >= 0) cfg.eval_every = train_eval_every;
      TrainOptions opts;
      opts.out_dir = train_out;
      if (!train_resume.empty()) opts.resume = train_resume;
      if (!train_eval_manifest.empty()) opts.eval_manifest = train_eval_manifest;
      opts.on_epoch = [&out](const TrainLogRecord& r) { out << nlohmann::json(r).dump() << '\n' << std::flush; };
      std::filesystem::create_directories(opts.out_dir);
      write_file(opts.out_dir / "config.json", nlohmann::json(cfg).dump(2) + "\n");
      train(train_manifest, cfg, opts);
      out << nlohmann::json{{"model", (opts.out_dir / "model.ckpt").string()}}.dump() << '\n';
    } else if (*eval_cmd) {
      const Checkpoint ck = read_checkpoint(eval_ckpt);
      const Models m = load_models(ck);
      EvalConfig ec = eval_config_for(ck);
      if (o_eval_seed->count()) ec.seed = eval_seed;
      ec.workers = eval_workers;
      const EvalResult r = evaluate(m, load_samples(eval_manifest), ec);
      const std::filesystem::path dir = eval_out;
      std::filesystem::create_directories(dir);
      write_file(dir / "eval_summary.csv", summary_csv(r.summary));
      std::string lines;
      for (const auto& s : r.samples) {
        nlohmann::json steps = nlohmann::json::array();
        for (const auto& st : s.steps) steps.push_back(to_json(st));
        lines += nlohmann::json{{"id", s.id}, {"steps", steps}, {"conf_accuracy", s.conf_accuracy}}.dump() + "\n";
      }
      write_file(dir / "eval_reports.jsonl", lines);
      out << summary_csv(r.summary);
    } else if (*int_cmd) {
      SessionManager mgr;
      CreateRequest req;
      req.volume = int_volume;
      req.checkpoint = int_ckpt;
      if (!int_label.empty()) req.label = int_label;
      run_interact(mgr, mgr.create(req), in, out);
    } else if (*serve_cmd) {
      SessionConfig sc;
      sc.max_steps = serve_max_steps;
      SessionManager mgr(sc);
      HttpServer server(mgr);
      const int port = server.bind(serve_host, serve_port);
      out << nlohmann::json{{"listening", "http://" + serve_host + ":" + std::to_string(port)}}.dump() << '\n'
          << std::flush;
      g_server = &server;
      std::signal(SIGINT, on_stop_signal);
      std::signal(SIGTERM, on_stop_signal);
      server.serve();
      g_server = nullptr;
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << nlohmann::json{{"error", to_string(e.kind())}, {"message", msg}}.dump() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << nlohmann::json{{"error", "validation"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << nlohmann::json{{"error", "internal"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mecca

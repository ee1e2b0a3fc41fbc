#include "segedit/cli.hpp"

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "segedit/bench.hpp"
#include "segedit/error.hpp"
#include "segedit/io.hpp"

namespace segedit {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string backend;
  std::string bench_dir;
  bool verbose = false;
};

BenchConfig load_config(const Globals& g) {
  BenchConfig c = BenchConfig::from_json(io::read_json(g.config));
  if (g.seed) c.seed = *g.seed;
  if (!g.backend.empty()) c.backend = g.backend;
  c.validate();
  return c;
}

fs::path bench_dir(const Globals& g, const BenchConfig& c) {
  if (!g.bench_dir.empty()) return g.bench_dir;
  if (!c.benchmark_dir.empty()) return c.benchmark_dir;
  return fs::path("bench") / c.name;
}

int scenes_gen(const Globals& g) {
  const BenchConfig c = load_config(g);
  const World world = World::standard();
  const fs::path out = g.out.empty() ? fs::path("scenes") / c.name : fs::path(g.out);
  fs::create_directories(out);
  const auto scenes = generate_scenes(c, world);
  nlohmann::json index = nlohmann::json::array();
  for (const auto& s : scenes) {
    io::save_scene(out, s);
    index.push_back(s.id);
  }
  io::write_json(out / "index.json", {{"scenes", index}, {"config_hash", c.hash()}});
  std::cout << "wrote " << scenes.size() << " scenes to " << out.string() << "\n";
  return 0;
}

int denoiser_train(const Globals& g) {
  const BenchConfig c = load_config(g);
  const World world = World::standard();
  const fs::path out = g.out.empty() ? fs::path("checkpoints") : fs::path(g.out);
  fs::create_directories(out);
  const auto scenes = generate_scenes(c, world);
  const Tokenizer tok = Tokenizer::builtin();
  TrainReport rep;
  const ToyDenoiser d = train_toy_denoiser(c, scenes, world, tok, &rep);
  d.save(out / "denoiser.ckpt");
  nlohmann::json log = {{"config_hash", c.hash()}, {"final_batch_loss", rep.final_batch_loss}, {"losses", nlohmann::json::array()}};
  for (const auto& [step, loss] : rep.losses) log["losses"].push_back({step, loss});
  io::write_json(out / "training.json", log);
  std::cout << "saved " << (out / "denoiser.ckpt").string() << " (final batch loss " << rep.final_batch_loss << ")\n";
  return 0;
}

void print_summary(const FilterSummary& s) {
  for (const auto& [name, kept] : s.kept)
    std::cout << name << ": kept " << kept << ", rejected " << s.rejected.at(name) << "\n";
  std::cout << "manifest sha256 " << s.manifest_hash << "\n";
}

int bench_build(const Globals& g) {
  const BenchConfig c = load_config(g);
  const World world = World::standard();
  const fs::path dir = g.out.empty() ? bench_dir(g, c) : fs::path(g.out);
  fs::create_directories(dir);
  const auto scenes = generate_scenes(c, world);
  const BackendBundle b = build_backends(c, scenes, world);
  Backends v = b.view();
  v.surrogate = nullptr;  // fit on the selected originals at filter time
  print_summary(build_benchmark(c, scenes, world, v, dir));
  return 0;
}

int bench_filter(const Globals& g) {
  const BenchConfig c = load_config(g);
  const World world = World::standard();
  const fs::path dir = g.out.empty() ? bench_dir(g, c) : fs::path(g.out);
  const ConceptEmbedder emb(world, c.embedder_seed);
  Backends v;
  v.embedder = &emb;
  print_summary(filter_benchmark(c, v, dir));
  return 0;
}

int bench_eval(const Globals& g) {
  const BenchConfig c = load_config(g);
  const fs::path dir = bench_dir(g, c);
  const fs::path out = g.out.empty() ? dir : fs::path(g.out);
  fs::create_directories(out);
  const PrototypeSegmenter seg = fit_on_originals(dir);
  const EvaluationResult ev = evaluate_benchmark(seg, seg.name(), dir);
  const nlohmann::json j = ev.to_json();
  io::write_json(out / "report.json", j);
  io::write_text(out / "report.md", report_markdown(j));
  std::cout << "primary group " << ev.primary << ": RmIoU " << round2(j["rmiou"].get<double>()) << ", mR "
            << round2(j["mr"].get<double>()) << "\n";
  return 0;
}

int bench_report(const Globals& g) {
  const BenchConfig c = load_config(g);
  const fs::path out = g.out.empty() ? bench_dir(g, c) : fs::path(g.out);
  const nlohmann::json j = io::read_json(out / "report.json");
  io::write_text(out / "report.md", report_markdown(j));
  std::cout << report_markdown(j);
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"segmentation robustness benchmark builder"};
  app.require_subcommand(1);
  Globals g;
  std::uint64_t seed = 0;
  auto add_globals = [&](CLI::App* a) {
    a->add_option("--config", g.config, "JSON config file")->check(CLI::ExistingFile);
    a->add_option("--seed", seed, "override the config seed");
    a->add_option("--out", g.out, "output directory");
    a->add_option("--backend", g.backend, "denoiser backend")->check(CLI::IsMember({"toy", "linear"}));
    a->add_option("--bench", g.bench_dir, "benchmark directory (eval/report)");
    a->add_flag("-v,--verbose", g.verbose, "debug logging");
  };
  std::function<int(const Globals&)> action;
  auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& desc, int (*fn)(const Globals&)) {
    CLI::App* s = parent->add_subcommand(name, desc);
    add_globals(s);
    s->callback([&action, fn] { action = fn; });
  };
  CLI::App* scenes = app.add_subcommand("scenes", "procedural scenes")->require_subcommand(1);
  leaf(scenes, "gen", "generate scenes", scenes_gen);
  CLI::App* bench = app.add_subcommand("bench", "benchmark construction and evaluation")->require_subcommand(1);
  leaf(bench, "build", "generate, edit and filter a benchmark", bench_build);
  leaf(bench, "filter", "re-run filtering on a built benchmark", bench_filter);
  leaf(bench, "eval", "evaluate the prototype segmenter", bench_eval);
  leaf(bench, "report", "render report.md from report.json", bench_report);
  CLI::App* den = app.add_subcommand("denoiser", "toy denoiser")->require_subcommand(1);
  leaf(den, "train", "train and save a checkpoint", denoiser_train);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }
  for (auto* sub : app.get_subcommands())
    for (auto* leafcmd : sub->get_subcommands())
      if (leafcmd->count("--seed")) g.seed = seed;
  if (g.config.empty()) {
    std::cerr << "--config is required\n\n" << app.help();
    return 1;
  }
  spdlog::set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);
  try {
    return action(g);
  } catch (const BackendError& e) {
    spdlog::error("backend failure: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
}

}  // namespace segedit

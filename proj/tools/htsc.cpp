// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 numeric failure, 1 anything else.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "htsc/errors.hpp"
#include "htsc/scm.hpp"
#include "htsc/trainer.hpp"
#include "json.hpp"

#ifndef HTSC_VERSION
#define HTSC_VERSION "dev"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace htsc;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

Config load_config(const Common& c) {
  Config cfg = c.config_path.empty() ? Config() : Config::load(c.config_path);
  cfg.apply(c.overrides);
  return cfg;
}

void add_config_options(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "key = value config file");
  app->add_option("--set", c.overrides, "override, e.g. --set stage1.epochs=5")->take_all();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

// Paths are left out so that identical runs into different directories
// produce identical manifests.
void write_manifest(const fs::path& dir, const std::string& command, const Config* cfg, const json& inputs) {
  json m{{"command", command}, {"code_version", HTSC_VERSION}, {"inputs", inputs}};
  if (cfg) {
    m["config"] = cfg->canonical();
    m["config_hash"] = cfg->hash_hex();
    m["seed"] = cfg->integer("train.seed");
  }
  write_text(dir / "run_manifest.json", m.dump(2) + "\n");
}

train::Progress progress_sink(bool quiet) {
  if (quiet) return {};
  return [](const std::string& line) { std::cerr << line << std::endl; };
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

fs::path reference_path(const fs::path& hyp) {
  auto stem = hyp.filename().string();
  if (stem.size() > 6 && stem.ends_with(".jsonl")) stem.resize(stem.size() - 6);
  return hyp.parent_path() / (stem + ".ref.jsonl");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical report generation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "no progress output");

  // gen-data
  Common gen;
  std::string gen_out;
  std::uint64_t gen_seed = 1;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic corpus");
  add_config_options(gen_cmd, gen);
  gen_cmd->add_option("--out", gen_out, "output directory")->required();
  gen_cmd->add_option("--seed", gen_seed, "generator seed");

  // train
  Common tr;
  int stage = 1;
  std::string tr_data, tr_out, tr_init;
  bool resume = false;
  auto* train_cmd = app.add_subcommand("train", "run stage 1 or stage 2");
  add_config_options(train_cmd, tr);
  train_cmd->add_option("--stage", stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  train_cmd->add_option("--data", tr_data, "corpus directory")->required();
  train_cmd->add_option("--out", tr_out, "output directory")->required();
  train_cmd->add_option("--init", tr_init, "stage-1 checkpoint (stage 2)");
  train_cmd->add_flag("--resume", resume, "reuse a finished run in --out with the same config hash");

  // generate
  std::string g_ckpt, g_data, g_split = "test", g_decode, g_out;
  std::size_t g_beam = 0;
  auto* gen_text = app.add_subcommand("generate", "decode reports for a split");
  gen_text->add_option("--ckpt", g_ckpt)->required();
  gen_text->add_option("--data", g_data)->required();
  gen_text->add_option("--split", g_split)->check(CLI::IsMember({"train", "val", "test"}));
  gen_text->add_option("--decode", g_decode, "greedy or beam (default: checkpoint config)")
      ->check(CLI::IsMember({"greedy", "beam"}));
  gen_text->add_option("--beam-size", g_beam);
  gen_text->add_option("--out", g_out, "hypotheses JSONL; references go to <name>.ref.jsonl")->required();

  // eval
  std::string e_hyp, e_ref, e_metrics = "bleu,rouge,meteor,cider", e_out;
  bool cider_d = false;
  auto* eval_cmd = app.add_subcommand("eval", "score hypotheses against references");
  eval_cmd->add_option("--hyp", e_hyp)->required();
  eval_cmd->add_option("--ref", e_ref)->required();
  eval_cmd->add_option("--metrics", e_metrics);
  eval_cmd->add_flag("--cider-d", cider_d, "length-penalized CIDEr-D");
  eval_cmd->add_option("--out", e_out)->required();

  // ablate
  Common ab;
  std::string a_grid = "levels", a_data, a_out, a_work, a_seeds = "1,2,3";
  auto* ablate_cmd = app.add_subcommand("ablate", "level/mediator ablation or lambda sweep");
  add_config_options(ablate_cmd, ab);
  ablate_cmd->add_option("--grid", a_grid)->check(CLI::IsMember({"levels", "lambda"}));
  ablate_cmd->add_option("--data", a_data)->required();
  ablate_cmd->add_option("--out", a_out)->required();
  ablate_cmd->add_option("--work", a_work, "stage cache (default <out>/cache)");
  ablate_cmd->add_option("--seeds", a_seeds, "comma-separated seeds");

  // scm-verify
  std::size_t s_trials = 200;
  std::uint64_t s_seed = 1;
  std::string s_out;
  auto* scm_cmd = app.add_subcommand("scm-verify", "front-door adjustment vs graph surgery on random models");
  scm_cmd->add_option("--trials", s_trials);
  scm_cmd->add_option("--seed", s_seed);
  scm_cmd->add_option("--out", s_out, "JSON result (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const auto progress = progress_sink(quiet);

  try {
    if (*gen_cmd) {
      const auto cfg = load_config(gen);
      fs::create_directories(gen_out);
      const auto summary = data::generate_corpus(cfg, gen_seed, gen_out);
      const auto corpus = data::load_corpus(gen_out);
      write_manifest(gen_out, "gen-data", &cfg, {{"generator_seed", gen_seed}, {"corpus_hash", corpus.hash}});
      if (progress)
        progress("corpus: " + std::to_string(summary.train) + " train, " + std::to_string(summary.val) + " val, " +
                 std::to_string(summary.test) + " test");
    } else if (*train_cmd) {
      const auto cfg = load_config(tr);
      const fs::path out(tr_out);
      const auto ckpt_path = out / ("stage" + std::to_string(stage) + ".ckpt");
      if (resume && fs::exists(out / "run_manifest.json")) {
        std::ifstream in(out / "run_manifest.json");
        const auto m = json::parse(in);
        if (m.value("config_hash", "") != cfg.hash_hex())
          throw ConfigError("refusing to resume: " + (out / "run_manifest.json").string() + " has config hash " +
                            m.value("config_hash", "?") + ", current config is " + cfg.hash_hex());
        if (fs::exists(ckpt_path)) {
          if (progress) progress("resume: stage " + std::to_string(stage) + " already complete");
          return 0;
        }
      }
      if (stage == 2 && tr_init.empty()) throw ConfigError("stage 2 requires --init <stage-1 checkpoint>");
      const auto corpus = data::load_corpus(tr_data);
      fs::create_directories(out);
      json inputs{{"corpus_hash", corpus.hash}};
      train::StageResult result;
      try {
        if (stage == 1) {
          result = train::train_stage1(cfg, corpus, progress);
        } else {
          const auto init = load_checkpoint(tr_init);
          inputs["init_hash"] = data::file_hash(tr_init);
          result = train::train_stage2(cfg, corpus, &init, progress);
        }
      } catch (const NumericError& e) {
        write_text(out / "numeric_failure.json", json{{"error", e.what()}}.dump(2) + "\n");
        throw;
      }
      save_checkpoint(ckpt_path.string(), result.best);
      train::write_log((out / ("stage" + std::to_string(stage) + "_log.jsonl")).string(), result.log);
      write_manifest(out, "train --stage " + std::to_string(stage), &cfg, inputs);
    } else if (*gen_text) {
      const auto ckpt = load_checkpoint(g_ckpt);
      const auto corpus = data::load_corpus(g_data);
      auto cfg = Config::parse(ckpt.config);
      if (!g_decode.empty()) cfg.set("decode.mode", g_decode);
      if (g_beam > 0) cfg.set("decode.beam_size", std::to_string(g_beam));
      const auto& samples = corpus.split(g_split);
      const auto hyps = train::generate(ckpt, samples, train::decode_options(cfg));
      const data::Vocab vocab(corpus.config);
      std::vector<train::TextRecord> h, r;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        h.push_back({hyps[i].id, train::words(hyps[i].tokens, vocab)});
        r.push_back({samples[i].id, train::words(samples[i].tokens, vocab)});
      }
      const fs::path out(g_out);
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      train::write_records(out.string(), h);
      train::write_records(reference_path(out).string(), r);
    } else if (*eval_cmd) {
      const auto rep = train::evaluate(train::read_records(e_hyp), train::read_records(e_ref), split_list(e_metrics),
                                       cider_d);
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
      write_text(e_out, train::report_json(rep));
    } else if (*ablate_cmd) {
      const auto cfg = load_config(ab);
      const auto corpus = data::load_corpus(a_data);
      std::vector<std::uint64_t> seeds;
      for (const auto& s : split_list(a_seeds)) seeds.push_back(std::stoull(s));
      if (seeds.empty()) throw ConfigError("--seeds is empty");
      const fs::path out(a_out);
      fs::create_directories(out);
      train::RunCache cache(a_work.empty() ? (out / "cache").string() : a_work, progress);
      std::vector<train::GridResult> rows;
      std::string csv;
      if (a_grid == "levels") {
        rows = train::run_ablation(cfg, corpus, seeds, cache, progress);
        csv = train::grid_csv(rows);
      } else {
        rows = train::run_lambda_sweep(cfg, corpus, seeds, cache, progress);
        csv = train::grid_csv(rows, "lambda=" + train::fmt(0.25));
      }
      const auto name = a_grid == "levels" ? std::string("ablation") : std::string("lambda");
      write_text(out / (name + ".csv"), csv);
      json per_seed = json::array();
      for (const auto& r : rows)
        for (std::size_t i = 0; i < r.per_seed.size(); ++i)
          per_seed.push_back({{"variant", r.name}, {"seed", seeds[i]}, {"scores", r.per_seed[i]}});
      write_text(out / (name + "_seeds.json"), per_seed.dump(2) + "\n");
      write_manifest(out, "ablate --grid " + a_grid, &cfg, {{"corpus_hash", corpus.hash}, {"seeds", seeds}});
    } else if (*scm_cmd) {
      const auto s = scm::verify_random_models(s_trials, s_seed);
      const auto text = json{{"trials", s.trials},
                             {"max_abs_error", s.max_abs_error},
                             {"max_backdoor_abs_error", s.max_backdoor_abs_error},
                             {"confounder_reads", s.confounder_reads},
                             {"failures", s.failures}}
                            .dump(2) +
                        "\n";
      if (s_out.empty())
        std::cout << text;
      else
        write_text(s_out, text);
      return s.failures == 0 ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

// trigger-scope: train small transformer text classifiers, plant
// insertion-based backdoors, and defend them at inference time.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "trigger_scope/pipeline.hpp"

namespace ts = trigger_scope;
namespace pl = trigger_scope::pipeline;

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  std::string out_dir;
};

struct DefenseArgs {
  std::optional<std::size_t> k;
  std::string lambda;
  std::string method;
  std::string op;
  bool oracle = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config JSON");
  cmd->add_option("--seed", args.seed, "global seed override");
  cmd->add_option("--jobs", args.jobs, "worker threads for per-instance work");
  cmd->add_option("--out", args.out_dir, "output directory override");
}

void add_defense(CLI::App* cmd, DefenseArgs& args) {
  cmd->add_option("--k", args.k, "suspicious-token budget K");
  cmd->add_option("--lambda", args.lambda,
                  "gradient-norm bar (number or 'inf' for the naive variant)");
  cmd->add_option("--method", args.method, "gradient | attention | onion-lite");
  cmd->add_option("--op", args.op, "delete | mask");
  cmd->add_flag("--oracle", args.oracle, "use the true trigger count per instance");
}

double parse_lambda(const std::string& text) {
  if (text == "inf" || text == "infinity") return ts::defense::kInfinity;
  try {
    std::size_t used = 0;
    const double value = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw ts::ConfigError("--lambda: expected a number or 'inf', got '" + text + "'");
  }
}

pl::ExperimentConfig resolve_config(const CommonArgs& common,
                                    const DefenseArgs* defense) {
  pl::ExperimentConfig cfg;
  if (!common.config_path.empty()) cfg = pl::load_config(common.config_path);
  if (common.seed.has_value()) cfg.seed = *common.seed;
  if (common.jobs.has_value()) cfg.jobs = *common.jobs;
  if (!common.out_dir.empty()) cfg.paths.out_dir = common.out_dir;
  if (defense != nullptr) {
    if (defense->k.has_value()) cfg.defense.k = *defense->k;
    if (!defense->lambda.empty()) cfg.defense.lambda = parse_lambda(defense->lambda);
    if (!defense->method.empty()) {
      cfg.defense.method = ts::defense::method_from_string(defense->method);
    }
    if (!defense->op.empty()) {
      cfg.defense.op = ts::defense::edit_op_from_string(defense->op);
    }
    if (defense->oracle) cfg.defense.oracle = true;
  }
  return cfg;
}

template <typename T>
std::vector<T> parse_list(const std::string& csv,
                          T (*parse_one)(const std::string&)) {
  std::vector<T> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_one(item));
  }
  return out;
}

std::size_t parse_size(const std::string& s) {
  return static_cast<std::size_t>(std::stoul(s));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"backdoor attack and inference-time defense laboratory"};
  app.require_subcommand(1);

  CommonArgs common;
  DefenseArgs defense;
  std::string defend_text;
  std::string ks_csv = "0,1,2,3,4,5";
  std::string lambdas_csv = "0.25,0.5,1,2,inf";

  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic keyword-labeled corpus");
  add_common(gen, common);

  auto* vocab = app.add_subcommand("build-vocab", "build the vocabulary file");
  add_common(vocab, common);

  auto* poison = app.add_subcommand("poison", "write poisoned train/test sets and manifest");
  add_common(poison, common);

  auto* train = app.add_subcommand("train", "train (or fine-tune) a checkpoint");
  add_common(train, common);
  std::string init_from;
  train->add_option("--init-from", init_from,
                    "existing checkpoint to fine-tune instead of a fresh init");

  auto* evaluate = app.add_subcommand("evaluate", "ASR/CACC/topK report with and without defense");
  add_common(evaluate, common);
  add_defense(evaluate, defense);

  auto* defend = app.add_subcommand("defend", "defend one input and print the saliency report");
  add_common(defend, common);
  add_defense(defend, defense);
  defend->add_option("text", defend_text, "input text")->required();

  auto* sweep = app.add_subcommand("sweep", "grid CSV of (K, lambda, ASR, CACC)");
  add_common(sweep, common);
  add_defense(sweep, defense);
  sweep->add_option("--ks", ks_csv, "comma-separated K values");
  sweep->add_option("--lambdas", lambdas_csv, "comma-separated lambda values ('inf' allowed)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      pl::run_gen_corpus(resolve_config(common, nullptr));
    } else if (vocab->parsed()) {
      pl::run_build_vocab(resolve_config(common, nullptr));
    } else if (poison->parsed()) {
      pl::run_poison(resolve_config(common, nullptr));
    } else if (train->parsed()) {
      auto cfg = resolve_config(common, nullptr);
      if (!init_from.empty()) cfg.paths.init_from = init_from;
      pl::run_train(cfg);
    } else if (evaluate->parsed()) {
      pl::run_evaluate(resolve_config(common, &defense));
    } else if (defend->parsed()) {
      auto report = pl::run_defend_text(resolve_config(common, &defense), defend_text);
      std::cout << report.dump(2) << "\n";
    } else if (sweep->parsed()) {
      auto cfg = resolve_config(common, &defense);
      auto ks = parse_list<std::size_t>(ks_csv, parse_size);
      auto lambdas = parse_list<double>(lambdas_csv, parse_lambda);
      pl::run_sweep(cfg, ks, lambdas);
    }
  } catch (const ts::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// Command-line front end: run, verify, toy, sweep.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include "pacm/experiments.hpp"
#include "pacm/theory_checks.hpp"
#include "pacm/toy_solver.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json to_json(const pacm::CheckReport& r) {
  return {{"name", r.name},       {"trials", r.trials}, {"violations", r.violations},
          {"worst_slack", r.worst_slack}, {"passed", r.passed}, {"tolerance", r.tolerance},
          {"values", r.values}};
}

std::vector<pacm::CheckReport> run_verify(std::size_t trials, std::uint64_t seed) {
  pacm::Rng rng(seed);
  std::vector<pacm::CheckReport> out;

  {
    pacm::Rng data_rng = rng.split();
    const pacm::MixtureNormal1D nu({0.3, 0.7}, {-2.0, 2.0}, {1.0, 1.0});
    const auto data = pacm::sample(nu, data_rng, 5);
    pacm::Rng chain_rng = rng.split();
    out.push_back(pacm::check_monotone_chain(pacm::Normal1D(0.0, 3.0), data, 1.0, {1, 2, 4, 8, 16, 32},
                                             std::max<std::size_t>(trials, 4000), chain_rng));
  }
  pacm::Rng lemma_rng = rng.split();
  for (auto& r : pacm::check_inequality_lemmas(lemma_rng, trials)) out.push_back(std::move(r));
  for (std::size_t n : {10u, 100u})
    for (double beta : {0.5, 1.0, 2.0}) {
      auto r = pacm::check_lambda_star(n, beta, {1, 2, 4, 16, 64});
      r.name += "_n" + std::to_string(n) + "_beta" + pacm::fmt_num(beta);
      out.push_back(std::move(r));
    }
  return out;
}

// Cartesian product over the array-valued fields of a flat JSON object.
std::vector<json> expand_sweep(const json& j) {
  std::vector<json> configs{json::object()};
  for (const auto& [key, v] : j.items()) {
    std::vector<json> next;
    const std::vector<json> values = v.is_array() ? v.get<std::vector<json>>() : std::vector<json>{v};
    for (const auto& base : configs)
      for (const auto& val : values) {
        json c = base;
        c[key] = val;
        next.push_back(std::move(c));
      }
    configs = std::move(next);
  }
  return configs;
}

void print_run(const pacm::RunResult& r) {
  std::printf("%s loss=%s seed=%llu lpp=%.4f nats kl_to_truth=%.4f nats (%.4f bits) completed=%s\n",
              pacm::to_string(r.config.experiment), pacm::to_string(r.config.loss),
              static_cast<unsigned long long>(r.config.seed), r.eval.lpp, r.eval.kl_to_truth,
              pacm::to_bits(r.eval.kl_to_truth), r.state.completed ? "yes" : "no");
  if (!r.state.diagnostic.empty()) std::printf("diagnostic: %s\n", r.state.diagnostic.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-sample PAC-Bayes objectives: experiments and checks"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Train and evaluate one regression experiment");
  std::string experiment = "sinusoid", loss = "pacm", lambda_mode = "beta-nm", out_dir, config_file;
  std::size_t m = 0, n_train = 0, steps = 0, eval_samples = 0;
  double beta = 1.0, lambda = 0.0, lr0 = 0.0, decay_rate = 0.0;
  std::uint64_t seed = 0;
  bool quiet = false;
  run->add_option("--experiment", experiment, "sinusoid | mixture | mixture-multimodal | mixture-wellspec");
  run->add_option("--loss", loss, "elbo | pacm | pac2t | iwae");
  run->add_option("--m", m, "posterior samples per step");
  run->add_option("--beta", beta, "KL down-weighting");
  run->add_option("--lambda-mode", lambda_mode, "beta-nm | lambda-star | explicit");
  run->add_option("--lambda", lambda, "lambda for --lambda-mode explicit");
  run->add_option("--seed", seed);
  run->add_option("--n-train", n_train);
  run->add_option("--steps", steps);
  run->add_option("--lr0", lr0);
  run->add_option("--decay-rate", decay_rate);
  run->add_option("--eval-samples", eval_samples);
  run->add_option("--config", config_file, "flat JSON config; command-line flags override it");
  run->add_option("--out", out_dir, "output directory")->required();
  run->add_flag("--quiet", quiet, "suppress the training log");

  // verify
  auto* verify = app.add_subcommand("verify", "Run the numerical theory checks");
  std::size_t trials = 1000;
  std::uint64_t verify_seed = 1;
  std::string verify_out;
  verify->add_option("--trials", trials)->check(CLI::Range(100, 100000000));
  verify->add_option("--seed", verify_seed);
  verify->add_option("--out", verify_out)->required();

  // toy
  auto* toy = app.add_subcommand("toy", "Six-way risk comparison on the toy location model");
  std::uint64_t toy_seed = 0;
  std::string toy_out;
  toy->add_option("--seed", toy_seed);
  toy->add_option("--out", toy_out)->required();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Fan out run over array-valued config fields");
  std::string sweep_config, sweep_out;
  std::size_t jobs = 1;
  sweep->add_option("--config", sweep_config)->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", sweep_out, "root directory (default: out_dir field or runs/sweep)");
  sweep->add_option("--jobs", jobs, "concurrent runs")->check(CLI::PositiveNumber);

  CLI11_PARSE(app, argc, argv);
  pacm::tune_allocator();

  try {
    if (*run) {
      json j = json::object();
      if (!config_file.empty()) j = json::parse(std::ifstream(config_file));
      if (run->count("--experiment") || !j.contains("experiment")) j["experiment"] = experiment;
      if (run->count("--loss")) j["loss"] = loss;
      if (run->count("--m")) j["m"] = m;
      if (run->count("--beta")) j["beta"] = beta;
      if (run->count("--lambda-mode")) j["lambda_mode"] = lambda_mode;
      if (run->count("--lambda")) j["lambda"] = lambda;
      if (run->count("--seed")) j["seed"] = seed;
      if (run->count("--n-train")) j["n_train"] = n_train;
      if (run->count("--steps")) j["steps"] = steps;
      if (run->count("--lr0")) j["lr0"] = lr0;
      if (run->count("--decay-rate")) j["decay_rate"] = decay_rate;
      if (run->count("--eval-samples")) j["eval_samples"] = eval_samples;
      j["out_dir"] = out_dir;
      const pacm::ExperimentConfig cfg = pacm::config_from_json(j);
      auto log = [&](const pacm::LogRow& r) {
        if (!quiet)
          std::printf("step %zu loss %.6f data %.6f kl %.6f lr %.6g\n", r.step, r.loss, r.data_term, r.kl_term, r.lr);
      };
      const pacm::RunResult r = pacm::run_experiment(cfg, log);
      pacm::emit_report(r, out_dir);
      print_run(r);
      return r.state.completed ? 0 : 3;
    }
    if (*verify) {
      const auto reports = run_verify(trials, verify_seed);
      json arr = json::array();
      bool ok = true;
      for (const auto& r : reports) {
        arr.push_back(to_json(r));
        ok = ok && r.passed;
        std::printf("%-32s %s trials=%zu violations=%zu worst_slack=%.3g\n", r.name.c_str(),
                    r.passed ? "PASS" : "FAIL", r.trials, r.violations, r.worst_slack);
      }
      pacm::write_text(fs::path(verify_out) / "checks.json", arr.dump(2) + "\n");
      return ok ? 0 : 1;
    }
    if (*toy) {
      const pacm::ToyReport rep = pacm::run_toy(pacm::ToySetup{}, toy_seed);
      pacm::emit_toy_report(rep, toy_out);
      for (const auto& r : rep.rows)
        std::printf("%-10s %-22s %8.4f bits%s\n", r.name.c_str(), r.solver.c_str(), r.kl_bits,
                    r.converged ? "" : " (not converged)");
      return 0;
    }
    if (*sweep) {
      const json base = json::parse(std::ifstream(sweep_config));
      if (!base.is_object()) throw pacm::UsageError("sweep: config must be a flat JSON object");
      fs::path root = sweep_out.empty() ? fs::path(base.value("out_dir", std::string("runs/sweep"))) : fs::path(sweep_out);
      std::vector<pacm::ExperimentConfig> cfgs;
      std::size_t idx = 0;
      for (json c : expand_sweep(base)) {
        c.erase("out_dir");
        pacm::ExperimentConfig cfg = pacm::config_from_json(c);
        cfg.out_dir = (root / ("run" + std::to_string(idx++) + "_" + pacm::to_string(cfg.experiment) + "_" +
                               pacm::to_string(cfg.loss) + "_m" + std::to_string(cfg.m) + "_s" +
                               std::to_string(cfg.seed)))
                          .string();
        cfg.validate();
        cfgs.push_back(cfg);
      }
      std::vector<json> summaries(cfgs.size());
      std::size_t next = 0;
      bool ok = true;
      while (next < cfgs.size()) {
        std::vector<std::future<pacm::RunResult>> batch;
        const std::size_t start = next;
        for (; next < cfgs.size() && next - start < jobs; ++next)
          batch.push_back(std::async(std::launch::async, [c = cfgs[next]] { return pacm::run_experiment(c); }));
        for (std::size_t b = 0; b < batch.size(); ++b) {
          const pacm::RunResult r = batch[b].get();
          pacm::emit_report(r, r.config.out_dir);
          print_run(r);
          summaries[start + b] = pacm::summary_json(r);
          ok = ok && r.state.completed;
        }
      }
      pacm::write_text(root / "sweep_summary.json", json(summaries).dump(2) + "\n");
      return ok ? 0 : 3;
    }
  } catch (const pacm::UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

// Command line front end: analyze a trial dataset, run the simulation study,
// and plan bootstrap sample sizes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmi/csv.hpp"
#include "cmi/errors.hpp"
#include "cmi/inference.hpp"
#include "cmi/simgen.hpp"
#include "cmi/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

std::string fnv1a_hex(const std::string& data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw cmi::Error("cannot open config file: " + path);
  json j;
  in >> j;
  return j;
}

std::vector<cmi::Strategy> parse_strategies(const std::string& arg, bool* from_file) {
  *from_file = false;
  if (arg == "file") {
    *from_file = true;
    return {};
  }
  std::vector<cmi::Strategy> out;
  if (arg == "all")
    return {cmi::Strategy::mar, cmi::Strategy::j2r, cmi::Strategy::cr, cmi::Strategy::cir};
  std::stringstream ss(arg);
  std::string token;
  while (std::getline(ss, token, ',')) {
    const auto s = cmi::strategy_from_string(token);
    if (!s) throw cmi::Error("unknown strategy \"" + token + "\" (expected MAR, CR, J2R, CIR)");
    out.push_back(*s);
  }
  if (out.empty()) throw cmi::Error("no strategy given");
  return out;
}

struct ManifestWriter {
  json manifest;
  fs::path out_dir;

  ManifestWriter(const std::string& command, const fs::path& dir, std::uint64_t seed,
                 const std::string& config_dump)
      : out_dir(dir) {
    fs::create_directories(out_dir);
    manifest["command"] = command;
    manifest["version"] = cmi::kVersion;
    manifest["seed"] = seed;
    manifest["config_hash"] = fnv1a_hex(config_dump);
    manifest["started_at"] = iso_timestamp();
    manifest["outputs"] = json::array();
  }

  void add_output(const std::string& name) { manifest["outputs"].push_back(name); }

  void finish() {
    manifest["finished_at"] = iso_timestamp();
    std::ofstream out(out_dir / "manifest.json");
    out << manifest.dump(2) << "\n";
  }
};

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeConfig {
  cmi::DatasetSchema schema;
  cmi::Pipeline pipeline;
  double alpha = 0.05;
};

AnalyzeConfig parse_analyze_config(const json& j) {
  AnalyzeConfig cfg;
  if (!j.contains("visits") || !j.contains("baseline"))
    throw cmi::Error("config must declare \"visits\" and \"baseline\"");
  cfg.schema.grid.labels = j.at("visits").get<std::vector<std::string>>();
  cfg.schema.grid.baseline_label = j.at("baseline").get<std::string>();
  if (j.contains("covariates"))
    cfg.schema.covariates = j.at("covariates").get<std::vector<std::string>>();
  cfg.schema.group_control = j.value("group_control", std::string("control"));
  cfg.schema.group_intervention = j.value("group_intervention", std::string("intervention"));

  std::vector<std::string> model_covs = cfg.schema.covariates;
  bool cov_by_visit = true;
  if (j.contains("model")) {
    const json& m = j.at("model");
    if (m.contains("covariates")) model_covs = m.at("covariates").get<std::vector<std::string>>();
    cov_by_visit = m.value("covariate_by_visit", true);
  } else if (model_covs.empty() && !cfg.schema.grid.baseline_label.empty()) {
    model_covs = {cfg.schema.grid.baseline_label};
  }
  cfg.pipeline.mean_spec = cmi::MeanModelSpec::standard(model_covs, cov_by_visit);
  cfg.pipeline.cov_spec.grouping =
      j.value("covariance_by_group", false) ? cmi::CovarianceSpec::Grouping::by_group
                                            : cmi::CovarianceSpec::Grouping::shared;

  cfg.pipeline.ancova.dependent = cmi::AncovaSpec::Dependent::change_from_baseline;
  cfg.pipeline.ancova.covariates = {cfg.schema.grid.baseline_label};
  if (j.contains("ancova")) {
    const json& a = j.at("ancova");
    const std::string dep = a.value("dependent", std::string("change"));
    if (dep == "outcome")
      cfg.pipeline.ancova.dependent = cmi::AncovaSpec::Dependent::outcome;
    else if (dep != "change")
      throw cmi::Error("ancova.dependent must be \"change\" or \"outcome\"");
    cfg.pipeline.ancova.target_visit = a.value("target_visit", 0);
    if (a.contains("covariates"))
      cfg.pipeline.ancova.covariates = a.at("covariates").get<std::vector<std::string>>();
  }
  cfg.alpha = j.value("alpha", 0.05);
  return cfg;
}

int cmd_analyze(const std::string& data_path, const std::string& config_path,
                const std::string& strategy_arg, const std::string& method, int b,
                std::uint64_t seed, int jobs, bool stratify, bool export_imputed,
                const std::string& out_dir) {
  const json config_json = load_json_file(config_path);
  const AnalyzeConfig cfg = parse_analyze_config(config_json);
  const cmi::TrialDataset data = cmi::load_csv(data_path, cfg.schema);

  bool from_file = false;
  const std::vector<cmi::Strategy> strategies = parse_strategies(strategy_arg, &from_file);

  ManifestWriter manifest("analyze", out_dir, seed, config_json.dump());
  json results = json::array();
  bool any_failed = false;

  struct Row {
    std::string strategy;
    double ls_int = 0, ls_ctl = 0, diff = 0, se = 0, p = 1;
    bool ok = false;
  };
  std::vector<Row> rows;

  const int n_runs = from_file ? 1 : static_cast<int>(strategies.size());
  for (int k = 0; k < n_runs; ++k) {
    cmi::Pipeline pipeline = cfg.pipeline;
    std::string label = "file";
    if (!from_file) {
      pipeline.strategy = strategies[static_cast<std::size_t>(k)];
      label = cmi::to_string(*pipeline.strategy);
    }
    json entry;
    entry["strategy"] = label;
    entry["method"] = method;
    entry["manifest"] = "manifest.json";
    Row row;
    row.strategy = label;
    try {
      const cmi::TrialDataset prepared = cmi::prepare_dataset(data, pipeline);
      cmi::Pipeline applied = pipeline;
      applied.strategy = std::nullopt;
      const cmi::PipelineRun run = cmi::run_pipeline_detailed(prepared, applied);
      const cmi::EffectEstimate& estimate = run.estimate;

      double se = 0;
      json extra;
      if (method == "jackknife") {
        const cmi::JackknifeResult jk = cmi::jackknife(data, pipeline, jobs);
        se = jk.se_jack;
        extra["n"] = data.num_subjects();
        extra["failures"] = jk.failures;
      } else {
        const cmi::BootstrapResult bs = cmi::bootstrap(data, pipeline, b, seed, jobs, stratify);
        se = bs.se_boot;
        extra["B"] = bs.b;
        extra["seed"] = bs.seed;
        extra["replacements"] = bs.replacements;
        extra["failures"] = json::array();
      }
      const cmi::InferenceResult inf =
          cmi::normal_inference(estimate.theta, se, cfg.alpha, method);

      entry["estimate"] = inf.estimate;
      entry["se"] = inf.se;
      entry["ci"] = {inf.ci_low, inf.ci_high};
      entry["p"] = inf.p_two_sided;
      entry["alpha"] = inf.alpha;
      entry["lsmean_control"] = estimate.lsmean_control;
      entry["lsmean_intervention"] = estimate.lsmean_intervention;
      if (run.fit)
        entry["fit"] = {{"converged", run.fit->converged},
                        {"iterations", run.fit->iterations},
                        {"reml_loglik", run.fit->reml_loglik}};
      else
        entry["fit"] = {{"skipped", "dataset complete, no imputation model needed"}};
      entry.update(extra);
      entry["status"] = "ok";

      row.ok = true;
      row.ls_int = estimate.lsmean_intervention;
      row.ls_ctl = estimate.lsmean_control;
      row.diff = estimate.theta;
      row.se = inf.se;
      row.p = inf.p_two_sided;

      if (export_imputed) {
        const cmi::ImputedDataset completed =
            run.fit ? cmi::DatasetImputer(prepared, *run.fit).conditional_mean()
                    : cmi::as_completed(prepared);
        const std::string name = "imputed_" + label + ".csv";
        cmi::write_imputed_csv(completed, (fs::path(out_dir) / name).string());
        manifest.add_output(name);
      }
    } catch (const std::exception& e) {
      entry["status"] = "error";
      entry["error"] = e.what();
      any_failed = true;
    }
    results.push_back(entry);
    rows.push_back(row);
  }

  // text table
  std::ostringstream table;
  char line[160];
  std::snprintf(line, sizeof line, "%-9s %12s %12s %12s %10s %10s\n", "strategy",
                "lsmean_int", "lsmean_ctl", "difference", "se", "p");
  table << line;
  for (const auto& r : rows) {
    if (r.ok)
      std::snprintf(line, sizeof line, "%-9s %12.4f %12.4f %12.4f %10.4f %10.4f\n",
                    r.strategy.c_str(), r.ls_int, r.ls_ctl, r.diff, r.se, r.p);
    else
      std::snprintf(line, sizeof line, "%-9s %12s %12s %12s %10s %10s\n", r.strategy.c_str(),
                    "-", "-", "-", "-", "failed");
    table << line;
  }
  std::cout << table.str();

  {
    std::ofstream txt(fs::path(out_dir) / "analysis.txt");
    txt << "# manifest: manifest.json\n" << table.str();
    manifest.add_output("analysis.txt");
    std::ofstream js(fs::path(out_dir) / "analysis.json");
    json doc;
    doc["manifest"] = "manifest.json";
    doc["results"] = results;
    js << doc.dump(2) << "\n";
    manifest.add_output("analysis.json");
  }
  manifest.finish();
  return any_failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// simulate

cmi::SimConfig parse_sim_config(const json& j) {
  cmi::SimConfig cfg;
  auto get = [&](const char* name, auto& field) {
    if (j.contains(name)) field = j.at(name).get<std::decay_t<decltype(field)>>();
  };
  get("n_per_group", cfg.n_per_group);
  get("num_visits", cfg.num_visits);
  get("last_month", cfg.last_month);
  get("baseline_mean", cfg.baseline_mean);
  get("control_change", cfg.control_change);
  get("slope_change_month", cfg.slope_change_month);
  get("active_slope_multiplier", cfg.active_slope_multiplier);
  get("re_sd_intercept", cfg.re_sd_intercept);
  get("re_sd_slope", cfg.re_sd_slope);
  get("re_corr", cfg.re_corr);
  get("resid_sd", cfg.resid_sd);
  get("disc_base_prob_control", cfg.disc_base_prob_control);
  get("disc_base_prob_intervention", cfg.disc_base_prob_intervention);
  get("disc_odds_ratio", cfg.disc_odds_ratio);
  get("disc_anchor", cfg.disc_anchor);
  get("disc_odds_scale_control", cfg.disc_odds_scale_control);
  get("disc_odds_scale_intervention", cfg.disc_odds_scale_intervention);
  get("disc_first_visit_odds_scale", cfg.disc_first_visit_odds_scale);
  get("dropout_prob_at_disc", cfg.dropout_prob_at_disc);
  get("dropout_includes_disc_visit", cfg.dropout_includes_disc_visit);
  return cfg;
}

int cmd_simulate(const std::string& config_path, const std::string& hypothesis, int n_sims,
                 std::uint64_t seed, const std::string& methods, int b,
                 const std::string& strategy_arg, int jobs, double alpha,
                 const std::string& out_dir) {
  json config_json = json::object();
  if (!config_path.empty()) config_json = load_json_file(config_path);
  const cmi::SimConfig cfg = parse_sim_config(config_json);
  {
    const auto problems = cfg.validate();
    if (!problems.empty()) {
      std::ostringstream msg;
      msg << "invalid simulation config:";
      for (const auto& p : problems) msg << "\n  " << p;
      throw cmi::Error(msg.str());
    }
  }

  cmi::Hypothesis hyp;
  if (hypothesis == "null")
    hyp = cmi::Hypothesis::null_hypothesis;
  else if (hypothesis == "alternative")
    hyp = cmi::Hypothesis::alternative;
  else
    throw cmi::Error("--hypothesis must be null or alternative");

  cmi::StudyOptions opt;
  bool from_file = false;
  opt.strategies = parse_strategies(strategy_arg, &from_file);
  if (from_file) throw cmi::Error("--strategies file is not meaningful for simulate");
  opt.n_sims = n_sims;
  opt.seed = seed;
  opt.alpha = alpha;
  opt.jobs = jobs;
  opt.bootstrap_b = b;
  opt.run_jackknife = methods.find("jackknife") != std::string::npos;
  opt.run_bootstrap = methods.find("bootstrap") != std::string::npos;
  if (!opt.run_jackknife && !opt.run_bootstrap)
    throw cmi::Error("--methods must include jackknife and/or bootstrap");

  ManifestWriter manifest("simulate", out_dir, seed, config_json.dump());
  const cmi::StudyResult result = cmi::run_study(cfg, hyp, opt);

  const std::string text = cmi::format_summary_text(result.table);
  std::cout << text;
  {
    std::ofstream txt(fs::path(out_dir) / "summary.txt");
    txt << "# manifest: manifest.json\n" << text;
    manifest.add_output("summary.txt");
    std::ofstream csv(fs::path(out_dir) / "summary.csv");
    cmi::write_summary_csv(result.table, csv, "manifest.json");
    manifest.add_output("summary.csv");
  }
  manifest.finish();
  return 0;
}

// ---------------------------------------------------------------------------
// bootstrap-plan

int cmd_bootstrap_plan(double p_inf, int b, const std::string& method, double tau) {
  if (!(p_inf > 0.0 && p_inf < 1.0)) throw cmi::Error("--p-inf must be in (0,1)");
  const cmi::PbMethod m = method == "percentile" ? cmi::PbMethod::percentile
                                                 : cmi::PbMethod::normal;
  if (method != "percentile" && method != "normal")
    throw cmi::Error("--method must be normal or percentile");
  const cmi::PbAccuracy acc = cmi::pb_accuracy(m, p_inf, b, tau);
  std::printf("method: %s   p_inf: %.2f%%   B: %d\n", method.c_str(), 100.0 * p_inf, b);
  std::printf("95%% range of p_B: %.2f%% to %.2f%%\n", 100.0 * acc.lo, 100.0 * acc.hi);
  std::printf("P(p_B <= %.2f%%) = %.2f%%\n", 100.0 * tau, 100.0 * acc.prob_at_or_below);
  std::printf("P(p_B >  %.2f%%) = %.2f%%\n", 100.0 * tau, 100.0 * (1.0 - acc.prob_at_or_below));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic conditional mean imputation for longitudinal "
               "trials with resampling inference"};
  app.set_version_flag("--version", cmi::kVersion);
  app.require_subcommand(1);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Estimate treatment effects from a CSV dataset");
  std::string data_path, config_path, out_dir = ".";
  std::string strategy_arg = "file", method = "jackknife";
  int b = 10000, jobs = static_cast<int>(std::thread::hardware_concurrency());
  if (jobs < 1) jobs = 1;
  std::uint64_t seed = 1;
  bool stratify = false, export_imputed = false;
  analyze->add_option("--data", data_path, "Long-format CSV file")->required();
  analyze->add_option("--config", config_path, "JSON schema/model config")->required();
  analyze->add_option("--strategy", strategy_arg,
                      "Comma list of MAR,CR,J2R,CIR, or 'all', or 'file' (per-record)");
  analyze->add_option("--method", method, "jackknife or bootstrap")
      ->check(CLI::IsMember({"jackknife", "bootstrap"}));
  analyze->add_option("--B", b, "Bootstrap resamples");
  analyze->add_option("--seed", seed, "Bootstrap seed");
  analyze->add_option("--jobs", jobs, "Parallel workers");
  analyze->add_flag("--stratify-bootstrap", stratify, "Resample within treatment groups");
  analyze->add_flag("--export-imputed", export_imputed,
                    "Write the conditional-mean imputed dataset per strategy");
  analyze->add_option("--out", out_dir, "Output directory");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "Run the operating-characteristics study");
  std::string sim_config, hypothesis = "null", methods = "jackknife";
  std::string sim_strategies = "all";
  int n_sims = 100, sim_b = 1000;
  std::uint64_t sim_seed = 1;
  int sim_jobs = jobs;
  double alpha = 0.05;
  std::string sim_out = ".";
  simulate->add_option("--config", sim_config, "JSON generator config (defaults when omitted)");
  simulate->add_option("--hypothesis", hypothesis, "null or alternative")
      ->check(CLI::IsMember({"null", "alternative"}));
  simulate->add_option("--n-sims", n_sims, "Number of simulated trials");
  simulate->add_option("--seed", sim_seed, "Study seed");
  simulate->add_option("--methods", methods, "Comma list of jackknife,bootstrap");
  simulate->add_option("--B", sim_b, "Bootstrap resamples per simulation");
  simulate->add_option("--strategies", sim_strategies, "Comma list of MAR,CR,J2R,CIR or 'all'");
  simulate->add_option("--jobs", sim_jobs, "Parallel workers");
  simulate->add_option("--alpha", alpha, "Two-sided significance level");
  simulate->add_option("--out", sim_out, "Output directory");

  // bootstrap-plan
  auto* plan = app.add_subcommand("bootstrap-plan",
                                  "Finite-B accuracy of bootstrap p-values");
  double p_inf = 0.025, tau = 0.025;
  int plan_b = 999;
  std::string plan_method = "normal";
  plan->add_option("--p-inf", p_inf, "Theoretical bootstrap p-value")->required();
  plan->add_option("--B", plan_b, "Number of bootstrap samples");
  plan->add_option("--method", plan_method, "normal or percentile");
  plan->add_option("--tau", tau, "Threshold for P(p_B <= tau)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand(analyze))
      return cmd_analyze(data_path, config_path, strategy_arg, method, b, seed, jobs, stratify,
                         export_imputed, out_dir);
    if (app.got_subcommand(simulate))
      return cmd_simulate(sim_config, hypothesis, n_sims, sim_seed, methods, sim_b,
                          sim_strategies, sim_jobs, alpha, sim_out);
    if (app.got_subcommand(plan)) return cmd_bootstrap_plan(p_inf, plan_b, plan_method, tau);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

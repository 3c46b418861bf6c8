#include "cli.hpp"

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "bench.hpp"
#include "qfat/envlab.hpp"
#include "qfat/error.hpp"
#include "qfat/trainer.hpp"

namespace qfat::cli {
namespace fs = std::filesystem;

GmmParams gmm_from_json(const nlohmann::json& j) {
  require(j.is_object(), "gmm spec: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    require(key == "weights" || key == "means" || key == "stddevs", "gmm spec: unknown field '" + key + "'");
  }
  require(j.contains("weights") && j.contains("means") && j.contains("stddevs"),
          "gmm spec: need weights, means and stddevs");
  const auto w = j["weights"].get<std::vector<double>>();
  const auto mu = j["means"].get<std::vector<std::vector<double>>>();
  const auto sd = j["stddevs"].get<std::vector<std::vector<double>>>();
  require(!w.empty() && mu.size() == w.size() && sd.size() == w.size(),
          "gmm spec: weights, means and stddevs must have one entry per component");
  const std::size_t m = mu.front().size();
  require(m >= 1, "gmm spec: components need at least one dimension");
  GmmParams g;
  g.weights = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  const double total = g.weights.sum();
  require(std::abs(total - 1.0) < 1e-6, "gmm spec: weights must sum to 1");
  g.weights /= total;
  g.means.resize(static_cast<Eigen::Index>(w.size()), static_cast<Eigen::Index>(m));
  g.stddevs.resize(static_cast<Eigen::Index>(w.size()), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < w.size(); ++i) {
    require(mu[i].size() == m && sd[i].size() == m, "gmm spec: component " + std::to_string(i) + " has the wrong dimension");
    for (std::size_t d = 0; d < m; ++d) {
      g.means(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = mu[i][d];
      g.stddevs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = sd[i][d];
    }
  }
  g.validate();
  return g;
}

nlohmann::json gmm_to_json(const GmmParams& g) {
  nlohmann::json means = nlohmann::json::array(), sds = nlohmann::json::array();
  for (Eigen::Index i = 0; i < g.means.rows(); ++i) {
    means.push_back(std::vector<double>(g.means.row(i).begin(), g.means.row(i).end()));
    sds.push_back(std::vector<double>(g.stddevs.row(i).begin(), g.stddevs.row(i).end()));
  }
  return {{"weights", std::vector<double>(g.weights.begin(), g.weights.end())}, {"means", means}, {"stddevs", sds}};
}

ModeFinderConfig mode_config_from_json(const nlohmann::json& j) {
  static const char* const kKnown[] = {"epsilon", "max_it", "n_init", "merge_radius", "eig_tol",
                                       "min_weight", "newton_polish"};
  for (const auto& [key, _] : j.items()) {
    require(std::find(std::begin(kKnown), std::end(kKnown), key) != std::end(kKnown),
            "mode finder config: unknown field '" + key + "'");
  }
  ModeFinderConfig c;
  c.epsilon = j.value("epsilon", c.epsilon);
  c.max_it = j.value("max_it", c.max_it);
  if (j.contains("n_init") && j["n_init"].is_number_integer()) c.n_init = j["n_init"].get<int>();
  c.merge_radius = j.value("merge_radius", c.merge_radius);
  c.eig_tol = j.value("eig_tol", c.eig_tol);
  c.min_weight = j.value("min_weight", c.min_weight);
  c.newton_polish = j.value("newton_polish", c.newton_polish);
  c.validate();
  return c;
}

nlohmann::json mode_set_to_json(const ModeSet& s) {
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& x : s.modes) modes.push_back(std::vector<double>(x.begin(), x.end()));
  return {{"modes", modes}, {"weights", s.weights}, {"log_densities", s.log_densities}, {"degraded", s.degraded}};
}

namespace {

nlohmann::json read_json(const fs::path& path, const std::string& what) {
  std::ifstream in(path);
  require(static_cast<bool>(in), what + ": cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(what + " " + path.string() + ": " + e.what());
  }
}

void require_file(const std::string& path, const std::string& what) {
  require(!path.empty(), what + ": path required");
  require(fs::is_regular_file(path), what + ": no such file " + path);
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), "cannot create output directory " + dir.string());
}

void prepare_parent(const fs::path& file) {
  if (file.has_parent_path()) prepare_dir(file.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), "cannot write " + path.string());
  out << text;
}

/// SVG with the resolved config embedded as a leading comment.
std::string with_config(const std::string& svg, const nlohmann::json& config) {
  std::string dump = config.dump();
  for (std::size_t p = dump.find("--"); p != std::string::npos; p = dump.find("--", p)) dump.replace(p, 2, "- -");
  const auto open = svg.find('>') + 1;
  return svg.substr(0, open) + "\n<!-- " + dump + " -->" + svg.substr(open);
}

struct SamplerFlags {
  std::string kind = "vanilla";
  double alpha = 1e-6;
  std::string noise = "none";
  double noise_sigma = 0.01;
  double temperature = 1.0;

  void attach(CLI::App* app) {
    app->add_option("--sampler", kind, "vanilla | scaled | mode")
        ->check(CLI::IsMember({"vanilla", "scaled", "mode"}));
    app->add_option("--alpha", alpha, "Variance scale for the scaled sampler");
    app->add_option("--mode-noise", noise, "none | fixed | laplace")->check(CLI::IsMember({"none", "fixed", "laplace"}));
    app->add_option("--noise-sigma", noise_sigma, "Standard deviation for fixed mode noise");
    app->add_option("--temperature", temperature, "Temperature for Laplace mode noise");
  }

  ModeNoise mode_noise() const {
    if (noise == "fixed") {
      require(noise_sigma > 0.0, "--noise-sigma must be positive");
      return FixedNoise{noise_sigma};
    }
    if (noise == "laplace") {
      require(temperature > 0.0, "--temperature must be positive");
      return LaplaceNoise{temperature};
    }
    return NoNoise{};
  }

  SamplerSpec spec(const ModeFinderConfig& mode_cfg) const {
    SamplerSpec s;
    s.kind = sampler_kind_from_string(kind);
    s.alpha = alpha;
    s.noise = mode_noise();
    s.mode_config = mode_cfg;
    s.validate();
    return s;
  }
};

struct Context {
  std::ostream& out;
  std::ostream& err;
};

int gen_data(Context& ctx, const std::string& env_name, int n, double noise, std::uint64_t seed,
             const std::string& out_path) {
  const EnvKind kind = env_kind_from_string(env_name);
  require(!out_path.empty(), "gen-data: --out required");
  prepare_parent(out_path);
  Rng rng = Rng::substream(seed, "data");
  Dataset data = generate_demos(kind, n, noise, rng);
  data.meta["seed"] = seed;
  data.meta["command"] = "gen-data";
  save_dataset(out_path, data);
  ctx.out << "wrote " << data.trajectories.size() << " " << env_name << " demonstrations to " << out_path << '\n';
  return 0;
}

struct TrainArgs {
  std::string dataset, config, out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool conditional = false;
  int threads = 1;
};

int train_cmd(Context& ctx, const TrainArgs& a) {
  require_file(a.dataset, "train --dataset");
  if (!a.config.empty()) require_file(a.config, "train --config");
  require(!a.out.empty(), "train: --out required");
  prepare_dir(a.out);

  const nlohmann::json cfg = a.config.empty() ? nlohmann::json::object() : read_json(a.config, "train config");
  for (const auto& [key, _] : cfg.items()) {
    require(key == "policy" || key == "train", "train config: unknown top-level field '" + key + "'");
  }
  const Dataset data = load_dataset(a.dataset);

  nlohmann::json pj = cfg.value("policy", nlohmann::json::object());
  if (!pj.contains("state_dim")) pj["state_dim"] = data.state_dim();
  if (!pj.contains("action_dim")) pj["action_dim"] = data.action_dim();
  if (a.conditional && pj.value("goal_horizon", 0) == 0) pj["goal_horizon"] = 5;
  const PolicyConfig pc = pj.get<PolicyConfig>();
  require(!a.conditional || pc.goal_horizon > 0, "train: --conditional needs goal_horizon > 0");

  TrainConfig tc = cfg.value("train", nlohmann::json::object()).get<TrainConfig>();
  if (a.seed_given || !cfg.value("train", nlohmann::json::object()).contains("seed")) tc.seed = a.seed;

  nlohmann::json resolved = {{"command", "train"},     {"dataset", a.dataset}, {"policy", pc},
                             {"train", tc},            {"seed", tc.seed},      {"dataset_meta", data.meta}};
  resolved["dataset_meta"].erase("labels");

  Rng split_rng = Rng::substream(tc.seed, "split");
  const PreparedData prepared = prepare(data, pc, tc, split_rng);
  resolved["skipped_trajectories"] = prepared.skipped_trajectories;
  resolved["train_trajectories"] = prepared.train_trajectories.size();
  resolved["val_trajectories"] = prepared.val_trajectories.size();
  if (prepared.skipped_trajectories > 0) {
    ctx.err << "train: skipped " << prepared.skipped_trajectories << " trajectories shorter than the context\n";
  }

  Policy policy(pc);
  Rng init_rng = Rng::substream(tc.seed, "init");
  policy.init(init_rng);

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    ctx.out << "epoch " << r.epoch << " train_nll " << r.train_nll;
    if (r.val_nll) ctx.out << " val_nll " << *r.val_nll << " active " << *r.mean_active_mixtures;
    ctx.out << '\n';
  };
  const TrainResult result = train(policy, prepared, tc, hooks);
  if (!result.lr_note.empty()) {
    resolved["lr_note"] = result.lr_note;
    ctx.err << "train: " << result.lr_note << '\n';
  }
  resolved["best_epoch"] = result.best_epoch;
  resolved["best_val_nll"] = result.best_epoch >= 0 ? nlohmann::json(result.best_val_nll) : nlohmann::json(nullptr);

  const fs::path dir(a.out);
  save_policy(dir / "final.qfat", policy, prepared.normalizer, resolved);
  Policy best(pc);
  best.params() = result.best;
  save_policy(dir / "best.qfat", best, prepared.normalizer, resolved);
  write_train_log(dir / "train_log.csv", result.log, resolved);
  write_text(dir / "resolved_config.json", resolved.dump(2) + "\n");
  ctx.out << "best epoch " << result.best_epoch << ", checkpoints in " << dir.string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint, env, config, out, dataset;
  std::uint64_t seed = 0;
  int threads = 1;
  int episodes = 100;
  bool conditional = false;
  SamplerFlags sampler;
};

int eval_cmd(Context& ctx, const EvalArgs& a) {
  require_file(a.checkpoint, "eval --checkpoint");
  require_file(a.checkpoint + ".json", "eval checkpoint sidecar");
  if (!a.config.empty()) require_file(a.config, "eval --config");
  if (a.conditional) require_file(a.dataset, "eval --dataset (goal demonstrations)");
  require(!a.out.empty(), "eval: --out required");
  prepare_dir(a.out);

  const nlohmann::json cfg = a.config.empty() ? nlohmann::json::object() : read_json(a.config, "eval config");
  for (const auto& [key, _] : cfg.items()) {
    require(key == "mode_finder" || key == "active_threshold" || key == "process_noise",
            "eval config: unknown field '" + key + "'");
  }
  const ModeFinderConfig mode_cfg = mode_config_from_json(cfg.value("mode_finder", nlohmann::json::object()));
  const SamplerSpec sampler = a.sampler.spec(mode_cfg);

  const PolicyBundle bundle = load_policy(a.checkpoint);
  std::string env_name = a.env;
  if (env_name.empty()) env_name = bundle.meta.value("dataset_meta", nlohmann::json::object()).value("env", "");
  require(!env_name.empty(), "eval: --env required (checkpoint does not record its environment)");
  EnvSpec env{env_kind_from_string(env_name), cfg.value("process_noise", 0.0)};

  const bool conditioned = bundle.policy.config().goal_horizon > 0;
  require(conditioned == a.conditional, conditioned ? "eval: goal-conditioned checkpoint needs --conditional"
                                                    : "eval: --conditional given for an unconditional checkpoint");
  Dataset goals;
  RolloutConfig rc;
  rc.episodes = a.episodes;
  rc.seed = a.seed;
  rc.threads = a.threads;
  rc.active_threshold = cfg.value("active_threshold", 0.1);
  if (conditioned) {
    goals = load_dataset(a.dataset);
    rc.goal_demos = &goals.trajectories;
  }

  nlohmann::json resolved = {{"command", "eval"},   {"checkpoint", a.checkpoint}, {"env", env_name},
                             {"sampler", sampler},  {"episodes", a.episodes},     {"seed", a.seed},
                             {"active_threshold", rc.active_threshold},           {"process_noise", env.process_noise},
                             {"conditional", a.conditional}};
  if (conditioned) resolved["goal_dataset"] = a.dataset;

  const RolloutReport report = rollout(bundle.policy, bundle.normalizer, env, sampler, rc);
  const fs::path dir(a.out);
  write_report(dir / "report.json", report, resolved);
  write_trajectories_csv(dir / "trajectories.csv", report, resolved);
  write_text(dir / "trajectories.svg", with_config(trajectories_svg(report), resolved));

  ctx.out << std::setprecision(4) << "success " << report.success_rate << " entropy " << report.behavioral_entropy_bits
          << " bits jitter " << report.mean_jitter << " unimodal " << report.unimodal_fraction << '\n';
  if (report.degraded_steps > 0) {
    ctx.err << "eval: mode sampler degraded on " << report.degraded_steps << " steps\n";
    return 2;
  }
  return 0;
}

int modes_cmd(Context& ctx, const std::string& gmm_path, const std::string& config, std::uint64_t seed, int threads,
              const std::string& out_path) {
  require_file(gmm_path, "modes --gmm");
  if (!config.empty()) require_file(config, "modes --config");
  if (!out_path.empty()) prepare_parent(out_path);
  const GmmParams gmm = gmm_from_json(read_json(gmm_path, "gmm spec"));
  ModeFinderConfig mc = mode_config_from_json(config.empty() ? nlohmann::json::object() : read_json(config, "mode config"));
  mc.threads = threads;
  Rng rng = Rng::substream(seed, "sampling");
  const ModeSet modes = find_modes(gmm, mc, rng);

  nlohmann::json resolved = mode_set_to_json(modes);
  nlohmann::json cfg_json = {{"epsilon", mc.epsilon},           {"max_it", mc.max_it},
                             {"n_init", mc.n_init ? *mc.n_init : 4 * gmm.components()},
                             {"merge_radius", mc.merge_radius}, {"eig_tol", mc.eig_tol},
                             {"min_weight", mc.min_weight},     {"newton_polish", mc.newton_polish}};
  resolved["config"] = {{"command", "modes"}, {"gmm", gmm_to_json(gmm)}, {"mode_finder", cfg_json}, {"seed", seed}};
  const std::string text = resolved.dump(2) + "\n";
  ctx.out << text;
  if (!out_path.empty()) write_text(out_path, text);
  if (modes.degraded) {
    ctx.err << "modes: no verified mode found; fell back to the heaviest component mean\n";
    return 2;
  }
  return 0;
}

int sample_viz(Context& ctx, const std::string& gmm_path, const std::string& config, int n, std::uint64_t seed,
               const SamplerFlags& flags, const std::string& out) {
  require_file(gmm_path, "sample-viz --gmm");
  if (!config.empty()) require_file(config, "sample-viz --config");
  require(n >= 1, "sample-viz: --n must be >= 1");
  require(!out.empty(), "sample-viz: --out required");
  prepare_dir(out);
  const GmmParams gmm = gmm_from_json(read_json(gmm_path, "gmm spec"));
  const ModeFinderConfig mc =
      mode_config_from_json(config.empty() ? nlohmann::json::object() : read_json(config, "mode config"));
  require(flags.alpha > 0.0 && flags.alpha <= 1.0, "sample-viz: --alpha must lie in (0, 1]");

  Rng rng = Rng::substream(seed, "sampling");
  std::vector<std::pair<std::string, Eigen::MatrixXd>> series;
  series.emplace_back("vanilla", sample_vanilla(gmm, rng, n));
  series.emplace_back("scaled", sample_vanilla(scale_variances(gmm, flags.alpha), rng, n));
  const ModeSet modes = find_modes(gmm, mc, rng);
  Eigen::MatrixXd mode_pts(n, gmm.dim());
  const ModeNoise noise = flags.mode_noise();
  for (int i = 0; i < n; ++i) mode_pts.row(i) = sample_mode(modes, rng, noise).x.transpose();
  series.emplace_back("mode", mode_pts);

  nlohmann::json resolved = {{"command", "sample-viz"}, {"gmm", gmm_to_json(gmm)}, {"n", n},
                             {"alpha", flags.alpha},     {"mode_noise", flags.noise}, {"seed", seed}};
  if (flags.noise == "fixed") resolved["noise_sigma"] = flags.noise_sigma;
  if (flags.noise == "laplace") resolved["temperature"] = flags.temperature;

  const fs::path dir(out);
  {
    std::ofstream csv(dir / "samples.csv", std::ios::trunc);
    require(static_cast<bool>(csv), "sample-viz: cannot write samples.csv");
    csv << "# " << resolved.dump() << "\nsampler";
    for (int d = 0; d < gmm.dim(); ++d) csv << ",x" << d;
    csv << '\n' << std::setprecision(9);
    for (const auto& [name, pts] : series) {
      for (Eigen::Index r = 0; r < pts.rows(); ++r) {
        csv << name;
        for (Eigen::Index d = 0; d < pts.cols(); ++d) csv << ',' << pts(r, d);
        csv << '\n';
      }
    }
  }
  auto plane = series;
  for (auto& [_, pts] : plane) {
    if (pts.cols() == 1) {
      Eigen::MatrixXd two = Eigen::MatrixXd::Zero(pts.rows(), 2);
      two.col(0) = pts.col(0);
      pts = two;
    }
  }
  write_text(dir / "samples.svg", with_config(scatter_svg(plane, "vanilla / scaled / mode samples"), resolved));
  ctx.out << "modes found " << modes.size() << ", wrote " << (dir / "samples.csv").string() << '\n';
  return modes.degraded ? 2 : 0;
}

int bench_cmd(Context& ctx, const std::string& config, int reps, std::uint64_t seed, const std::string& out_path) {
  if (!config.empty()) require_file(config, "bench --config");
  if (!out_path.empty()) prepare_parent(out_path);
  require(reps >= 1, "bench: --reps must be >= 1");
  const PolicyConfig pc = config.empty() ? timing_policy_config() : read_json(config, "policy config").get<PolicyConfig>();
  Policy policy(pc);
  Rng init = Rng::substream(seed, "init");
  policy.init(init);
  const InferenceTiming t = time_inference(policy, reps, seed);

  ctx.out << std::left << std::setw(10) << "component" << std::right << std::setw(12) << "mean_ms" << std::setw(12)
          << "p95_ms" << '\n'
          << std::fixed << std::setprecision(4);
  for (const auto& c : t.components) {
    ctx.out << std::left << std::setw(10) << c.name << std::right << std::setw(12) << c.mean_ms << std::setw(12)
            << c.p95_ms << '\n';
  }
  ctx.out << "(head + vanilla) / backbone = " << t.head_plus_vanilla_ratio << '\n';
  if (!out_path.empty()) {
    nlohmann::json j = timing_to_json(t);
    j["config"] = {{"command", "bench"}, {"policy", pc}, {"seed", seed}};
    write_text(out_path, j.dump(2) + "\n");
  }
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gaussian-mixture transformer policies: data, training, evaluation and sampler tools", "qfat"};
  app.require_subcommand(1);
  Context ctx{out, err};

  std::uint64_t seed = 0;
  int threads = 1;

  auto* gen = app.add_subcommand("gen-data", "Generate demonstrations as JSON lines");
  std::string env_name, out_path;
  int n = 1000;
  double demo_noise = 0.005;
  gen->add_option("--env", env_name, "multiroute | sequencing")->required()->check(CLI::IsMember({"multiroute", "sequencing"}));
  gen->add_option("--n", n, "Number of demonstrations");
  gen->add_option("--noise", demo_noise, "Action noise standard deviation");
  gen->add_option("--seed", seed);
  gen->add_option("--out", out_path, "Output .jsonl")->required();

  auto* tr = app.add_subcommand("train", "Train a policy by behavioral cloning");
  TrainArgs ta;
  tr->add_option("--dataset", ta.dataset)->required();
  tr->add_option("--config", ta.config, "JSON with optional \"policy\" and \"train\" objects");
  tr->add_option("--out", ta.out, "Output directory")->required();
  auto* train_seed = tr->add_option("--seed", ta.seed);
  tr->add_option("--threads", ta.threads)->check(CLI::PositiveNumber);
  tr->add_flag("--conditional", ta.conditional, "Goal-conditioned policy (goal_horizon 5 unless configured)");

  auto* ev = app.add_subcommand("eval", "Roll out a checkpoint");
  EvalArgs ea;
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--env", ea.env)->check(CLI::IsMember({"multiroute", "sequencing"}));
  ev->add_option("--config", ea.config, "JSON with optional mode_finder, active_threshold, process_noise");
  ev->add_option("--dataset", ea.dataset, "Goal demonstrations for --conditional");
  ev->add_option("--out", ea.out, "Output directory")->required();
  ev->add_option("--seed", ea.seed);
  ev->add_option("--threads", ea.threads)->check(CLI::PositiveNumber);
  ev->add_option("--episodes", ea.episodes)->check(CLI::PositiveNumber);
  ev->add_flag("--conditional", ea.conditional);
  ea.sampler.attach(ev);

  auto* md = app.add_subcommand("modes", "Extract the modes of a GMM spec");
  std::string gmm_path, config;
  md->add_option("--gmm", gmm_path)->required();
  md->add_option("--config", config, "Mode finder JSON");
  md->add_option("--seed", seed);
  md->add_option("--threads", threads)->check(CLI::PositiveNumber);
  md->add_option("--out", out_path, "Also write the JSON here");

  auto* sv = app.add_subcommand("sample-viz", "Draw samples from a GMM spec under every sampler");
  SamplerFlags sflags;
  sv->add_option("--gmm", gmm_path)->required();
  sv->add_option("--config", config, "Mode finder JSON");
  sv->add_option("--n", n);
  sv->add_option("--seed", seed);
  sv->add_option("--out", out_path, "Output directory")->required();
  sv->add_option("--alpha", sflags.alpha);
  sv->add_option("--mode-noise", sflags.noise)->check(CLI::IsMember({"none", "fixed", "laplace"}));
  sv->add_option("--noise-sigma", sflags.noise_sigma);
  sv->add_option("--temperature", sflags.temperature);

  auto* bn = app.add_subcommand("bench", "Time backbone, head and samplers");
  int reps = 1000;
  bn->add_option("--config", config, "Policy config JSON (default: 6 layers, 8 heads, 128 dims, 4 mixtures)");
  bn->add_option("--reps", reps);
  bn->add_option("--seed", seed);
  bn->add_option("--out", out_path, "Also write the timings as JSON");

  std::vector<const char*> args;
  for (const auto& a : argv) args.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(args.size()), args.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return gen_data(ctx, env_name, n, demo_noise, seed, out_path);
    if (tr->parsed()) {
      ta.seed_given = train_seed->count() > 0;
      return train_cmd(ctx, ta);
    }
    if (ev->parsed()) return eval_cmd(ctx, ea);
    if (md->parsed()) return modes_cmd(ctx, gmm_path, config, seed, threads, out_path);
    if (sv->parsed()) return sample_viz(ctx, gmm_path, config, n, seed, sflags, out_path);
    if (bn->parsed()) return bench_cmd(ctx, config, reps, seed, out_path);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return 2;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

int run(const std::vector<std::string>& argv) { return run(argv, std::cout, std::cerr); }

}  // namespace qfat::cli

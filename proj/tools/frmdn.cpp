// Command-line front end: dataset generation, training, evaluation,
// sampling, gradient checking, parameter counting and dream control.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "frmdn/frmdn.hpp"

namespace {

using namespace frmdn;

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// String-valued flags that map onto config keys; only flags the user
/// actually passed are applied, after any config file.
class KeyedFlags {
 public:
  void add(CLI::App* app, const std::string& names, const std::string& key, const std::string& help) {
    auto& slot = values_[key];
    options_.emplace_back(app->add_option(names, slot, help), key);
  }

  std::vector<std::pair<std::string, std::string>> given() const {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [opt, key] : options_) {
      if (opt->count() > 0) out.emplace_back(key, values_.at(key));
    }
    return out;
  }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::pair<CLI::Option*, std::string>> options_;
};

void add_model_flags(CLI::App* cmd, KeyedFlags& flags) {
  flags.add(cmd, "--k", "k", "mixture components");
  flags.add(cmd, "--h,--hidden", "hidden", "LSTM hidden size");
  flags.add(cmd, "--structure", "structure", "diagonal | tied | logistic");
  flags.add(cmd, "--flow", "flow", "on | off");
  flags.add(cmd, "--flow-depth", "flow_depth", "number of coupling layers");
  flags.add(cmd, "--flow-hidden", "flow_hidden", "coupling network width");
  flags.add(cmd, "--s-clamp", "s_clamp", "bound on coupling log-scales");
  flags.add(cmd, "--c-width", "c_width", "logistic bin width");
  flags.add(cmd, "--seed", "seed", "random seed");
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  return out;
}

// gen -------------------------------------------------------------------------

struct GenArgs {
  std::string kind = "ar";
  std::size_t q = 64, t = 256, d = 8, d_action = 2, modes = 2;
  double rho = 0.9, corr = 0.8, separation = 4.0, stay = 0.9, noise = 0.1;
  std::uint64_t seed = 0;
  std::string out, csv;
};

void cmd_gen(const GenArgs& a) {
  SequenceBatch data;
  double floor = 0.0;
  if (a.kind == "ar") {
    data = gen_correlated_ar(a.q, a.t, a.d, a.rho, a.corr, a.seed);
    floor = ar_entropy_rate(a.d, a.corr);
  } else if (a.kind == "modes") {
    SwitchingModes cfg;
    cfg.modes = a.modes;
    cfg.separation = a.separation;
    cfg.stay = a.stay;
    data = gen_switching_modes(a.q, a.t, a.d, cfg, a.seed);
  } else if (a.kind == "control") {
    data = gen_control_task(a.q, a.t, a.d, a.d_action, a.seed, a.noise).data;
    floor = control_entropy_rate(a.d, a.noise);
  } else {
    throw ValidationError("unknown --kind '" + a.kind + "' (expected ar, modes or control)");
  }
  write_fseq(a.out, data);
  if (!a.csv.empty()) open_out(a.csv) << to_csv(data);
  std::cout << "wrote " << a.out << ": q=" << data.q << " t=" << data.t << " d=" << data.d
            << " d_action=" << data.d_action << " (" << data.descriptor << ")\n";
  if (a.kind != "modes") std::cout << "entropy_rate=" << fmt(floor) << "\n";
}

// train -----------------------------------------------------------------------

void write_row(std::ostream& log, std::size_t epoch, const char* split, const NllReport& r) {
  log << epoch << ',' << split << ',' << fmt(r.total) << ',' << fmt(r.mixture) << ',' << fmt(r.logdet) << '\n';
  std::cout << "epoch " << epoch << ' ' << split << ": total " << fmt(r.total) << " mixture " << fmt(r.mixture)
            << " logdet " << fmt(r.logdet) << '\n';
}

void cmd_train(const std::string& config_file, const KeyedFlags& flags) {
  RunConfig run;
  if (!config_file.empty()) run.apply_file(config_file);
  for (const auto& [k, v] : flags.given()) run.set(k, v);
  if (run.data.empty()) throw ValidationError("train: --data is required");
  if (run.out.empty()) throw ValidationError("train: --out is required");

  const SequenceBatch train = read_fseq(run.data);
  SequenceBatch test;
  if (!run.test.empty()) test = read_fseq(run.test);

  FrmdnModel model;
  std::optional<TrainingState> resumed;
  if (!run.resume.empty()) {
    auto ck = read_checkpoint(run.resume);
    model = std::move(ck.model);
    resumed = std::move(ck.training);
    if (!resumed) throw ValidationError("train: checkpoint '" + run.resume + "' has no training state to resume");
    // Optimizer settings come from the checkpoint unless given again.
    run.model = model.config;
    run.optimizer = resumed->optimizer;
    for (const auto& [k, v] : config_detail::parse_lines(config_file.empty() ? "" : io::read_file(config_file))) {
      if (k == "optimizer" || k == "lr" || k == "clip_norm") run.set(k, v);
    }
    for (const auto& [k, v] : flags.given()) {
      if (k == "optimizer" || k == "lr" || k == "clip_norm") run.set(k, v);
    }
  } else {
    run.model.d = train.d;
    run.model.d_action = train.d_action;
  }
  run.validate();
  if (train.d != run.model.d || train.d_action != run.model.d_action) {
    throw ValidationError("train: dataset dims (d=" + std::to_string(train.d) + ", d_action=" +
                          std::to_string(train.d_action) + ") do not match the model");
  }
  if (!run.test.empty() && (test.d != train.d || test.d_action != train.d_action)) {
    throw ValidationError("train: test dataset dims differ from the training dataset");
  }
  if (run.resume.empty()) model = FrmdnModel::create(run.model);

  Optimizer opt(run.optimizer);
  std::size_t first_epoch = 1;
  if (resumed) {
    opt.restore(resumed->optimizer_steps, resumed->first, resumed->second);
    first_epoch = resumed->epochs_done + 1;
  }

  std::ofstream log_file;
  std::ostringstream discard;
  std::ostream* log = &discard;
  if (!run.log.empty()) {
    log_file = open_out(run.log);
    log = &log_file;
  }
  *log << "# command=train\n";
  if (!config_file.empty()) *log << "# config=" << config_file << '\n';
  std::istringstream echoed(model.config.to_text());
  for (std::string line; std::getline(echoed, line);) *log << "# " << line << '\n';
  *log << "# optimizer=" << to_string(run.optimizer.kind) << "\n# lr=" << fmt(run.optimizer.lr)
       << "\n# clip_norm=" << fmt(run.optimizer.clip_norm) << "\n# batch_size=" << run.batch_size
       << "\n# window=" << run.window << "\n# epochs=" << run.epochs << "\n# data=" << run.data
       << "\n# test=" << run.test << "\n# out=" << run.out << "\n# resume=" << run.resume << '\n';
  *log << "epoch,split,nll_total,nll_mixture,nll_logdet\n";

  if (!resumed) {
    write_row(*log, 0, "train", evaluate(model, train, run.window));
    if (!run.test.empty()) write_row(*log, 0, "test", evaluate(model, test, run.window));
  }
  TrainingState state;
  state.optimizer = run.optimizer;
  for (std::size_t epoch = first_epoch; epoch <= run.epochs; ++epoch) {
    const auto r = train_epoch(model, train, run.window, run.batch_size, opt, model.config.seed, epoch);
    write_row(*log, epoch, "train", r);
    if (!run.test.empty()) write_row(*log, epoch, "test", evaluate(model, test, run.window));
    state.epochs_done = epoch;
  }
  if (first_epoch > run.epochs) state.epochs_done = first_epoch - 1;
  state.optimizer_steps = opt.steps();
  state.first = opt.first_moments();
  state.second = opt.second_moments();
  save_checkpoint(run.out, model, &state);
  std::cout << "saved " << run.out << '\n';
}

// eval / sample ----------------------------------------------------------------

void cmd_eval(const std::string& model_path, const std::string& data_path, std::size_t window, std::size_t batch) {
  if (window < 2) throw ValidationError("eval: --window must be at least 2");
  if (batch == 0) throw ValidationError("eval: --batch-size must be positive");
  auto ck = read_checkpoint(model_path);
  const auto data = read_fseq(data_path);
  const auto r = evaluate(ck.model, data, window, batch);
  std::cout << "nll_total=" << fmt(r.total) << "\nnll_mixture=" << fmt(r.mixture) << "\nnll_logdet=" << fmt(r.logdet)
            << '\n';
}

void cmd_sample(const std::string& model_path, const std::string& init_path, std::size_t steps, std::size_t count,
                std::uint64_t seed, const std::string& out) {
  if (steps == 0) throw ValidationError("sample: --steps must be positive");
  if (count == 0) throw ValidationError("sample: --count must be positive");
  auto ck = read_checkpoint(model_path);
  const auto& cfg = ck.model.config;
  SequenceBatch init;
  if (!init_path.empty()) {
    init = read_fseq(init_path);
    if (init.d != cfg.d) throw ValidationError("sample: initial-state dataset has the wrong dimension");
  }
  SequenceBatch all(count, steps + 1, cfg.d, cfg.d_action);
  all.descriptor = "rollout";
  for (std::size_t s = 0; s < count; ++s) {
    Rng rng(derive_seed(seed, s));
    std::vector<double> y0(cfg.d, 0.0);
    if (!init_path.empty()) {
      const auto row = init.obs(s % init.q, 0);
      y0.assign(row.begin(), row.end());
    }
    std::uniform_real_distribution<double> policy(-1.0, 1.0);
    ActionFn random_policy = [&](std::span<const double>, std::span<const double>) {
      std::vector<double> a(cfg.d_action);
      for (double& v : a) v = policy(rng);
      return a;
    };
    const auto one = rollout(ck.model, y0, random_policy, steps, rng);
    for (std::size_t t = 0; t <= steps; ++t) {
      std::copy(one.obs(0, t).begin(), one.obs(0, t).end(), all.obs(s, t).begin());
      std::copy(one.act(0, t).begin(), one.act(0, t).end(), all.act(s, t).begin());
    }
  }
  if (out.empty()) {
    std::cout << to_csv(all);
  } else {
    open_out(out) << to_csv(all);
    std::cout << "wrote " << count << " rollouts of " << steps << " steps to " << out << '\n';
  }
}

// gradcheck / paramcount ---------------------------------------------------------

int cmd_gradcheck(const std::string& config_file, const KeyedFlags& flags, std::size_t d, std::size_t d_action,
                  std::size_t q, std::size_t t, double step, double tolerance) {
  RunConfig run;
  run.model.hidden = 8;
  run.model.k = 2;
  if (!config_file.empty()) run.apply_file(config_file);
  for (const auto& [k, v] : flags.given()) run.set(k, v);
  run.model.d = d;
  run.model.d_action = d_action;
  run.validate();
  if (t < 2) throw ValidationError("gradcheck: --t must be at least 2");
  auto model = FrmdnModel::create(run.model);
  Rng rng(derive_seed(run.model.seed, 1));
  perturb_parameters(model, 0.1, rng);
  const auto batch = d_action > 0 ? gen_control_task(q, t, d, d_action, run.model.seed).data
                                  : gen_correlated_ar(q, t, d, 0.9, 0.5, run.model.seed);
  const auto point = model.flat_parameters();
  const double err = grad_check(nll_objective(model, batch), point, step);
  std::cout << "parameters=" << point.size() << "\nmax_relative_error=" << fmt(err) << '\n';
  if (err > tolerance) {
    std::cerr << "gradcheck failed: " << fmt(err) << " exceeds " << fmt(tolerance) << '\n';
    return 1;
  }
  return 0;
}

void cmd_paramcount(std::size_t k, std::size_t d, const std::string& structure) {
  const auto s = parse_structure(structure);
  const auto r = param_count(k, d, s);
  std::cout << "structure,k,d,alpha,mu,sigma,total\n"
            << to_string(s) << ',' << k << ',' << d << ',' << r.alpha_count << ',' << r.mu_count << ','
            << r.sigma_count << ',' << r.total << '\n';
}

// dream ----------------------------------------------------------------------------

struct DreamArgs {
  std::string model_path;
  std::string log_path;
  DreamSetup setup;
  DreamSearch search;
  std::uint64_t seed = 0;
};

void cmd_dream(DreamArgs a) {
  FrmdnModel model;
  if (!a.model_path.empty()) {
    model = read_checkpoint(a.model_path).model;
  } else {
    std::cout << "# no --model given: fitting a d=" << a.setup.d << " d_action=" << a.setup.d_action
              << " model to random-policy rollouts\n";
    model = train_dream_model(a.setup, a.seed);
  }
  if (a.search.popsize < 2) throw ValidationError("dream: --popsize must be at least 2");
  if (!(a.search.sigma > 0.0)) throw ValidationError("dream: --sigma must be positive");
  if (a.setup.episodes == 0) throw ValidationError("dream: --episodes must be positive");
  make_reward(a.setup.reward);

  std::ofstream file;
  std::ostream* out = &std::cout;
  if (!a.log_path.empty()) {
    file = open_out(a.log_path);
    out = &file;
  }
  *out << "# command=dream\n# model=" << (a.model_path.empty() ? "(trained in-process)" : a.model_path)
       << "\n# popsize=" << a.search.popsize << "\n# sigma=" << fmt(a.search.sigma)
       << "\n# generations=" << a.search.generations << "\n# episodes=" << a.setup.episodes
       << "\n# horizon=" << a.setup.horizon << "\n# init_std=" << fmt(a.setup.init_std)
       << "\n# reward=" << a.setup.reward << "\n# mirrored=" << (a.search.mirrored ? "on" : "off")
       << "\n# seed=" << a.seed << '\n';
  *out << "generation,mean_reward,best_reward,sigma\n";
  run_dream_cmaes(model, a.setup, a.search, a.seed, [&](const DreamGeneration& g) {
    *out << g.generation << ',' << fmt(g.mean_reward) << ',' << fmt(g.best_reward) << ',' << fmt(g.sigma) << '\n';
    out->flush();
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow-based recurrent mixture density networks"};
  app.require_subcommand(1);
  app.set_help_flag("--help", "print this help");  // --h is the hidden-size flag

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "generate a synthetic FSEQ dataset");
  g->add_option("--kind", gen.kind, "ar | modes | control")->capture_default_str();
  g->add_option("--q", gen.q, "sequences")->capture_default_str();
  g->add_option("--t", gen.t, "steps per sequence")->capture_default_str();
  g->add_option("--d", gen.d, "observation dimension")->capture_default_str();
  g->add_option("--rho", gen.rho, "AR lag coefficient")->capture_default_str();
  g->add_option("--corr", gen.corr, "noise equicorrelation")->capture_default_str();
  g->add_option("--modes", gen.modes, "number of regimes")->capture_default_str();
  g->add_option("--separation", gen.separation, "distance between regime means")->capture_default_str();
  g->add_option("--stay", gen.stay, "regime persistence probability")->capture_default_str();
  g->add_option("--d-action", gen.d_action, "action dimension (control)")->capture_default_str();
  g->add_option("--noise", gen.noise, "noise std (control)")->capture_default_str();
  g->add_option("--seed", gen.seed, "random seed")->capture_default_str();
  g->add_option("--out", gen.out, "output FSEQ path")->required();
  g->add_option("--csv", gen.csv, "also write a CSV copy");

  std::string train_config;
  KeyedFlags train_flags;
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint");
  tr->add_option("--config", train_config, "key=value config file (flags override it)");
  add_model_flags(tr, train_flags);
  train_flags.add(tr, "--optimizer", "optimizer", "rmsprop | adam");
  train_flags.add(tr, "--lr", "lr", "learning rate");
  train_flags.add(tr, "--clip-norm", "clip_norm", "global gradient norm bound");
  train_flags.add(tr, "--batch-size", "batch_size", "windows per step");
  train_flags.add(tr, "--window", "window", "window length");
  train_flags.add(tr, "--epochs", "epochs", "total epochs");
  train_flags.add(tr, "--data", "data", "training FSEQ");
  train_flags.add(tr, "--test", "test", "held-out FSEQ");
  train_flags.add(tr, "--out", "out", "checkpoint path");
  train_flags.add(tr, "--log", "log", "metrics CSV path");
  train_flags.add(tr, "--resume", "resume", "checkpoint to continue from");

  std::string eval_model, eval_data;
  std::size_t eval_window = 32, eval_batch = 64;
  auto* ev = app.add_subcommand("eval", "mean NLL of a checkpoint on a dataset");
  ev->add_option("--model", eval_model, "checkpoint")->required();
  ev->add_option("--data", eval_data, "FSEQ dataset")->required();
  ev->add_option("--window", eval_window, "window length")->capture_default_str();
  ev->add_option("--batch-size", eval_batch, "windows per batch")->capture_default_str();

  std::string sample_model, sample_init, sample_out;
  std::size_t sample_steps = 100, sample_count = 1;
  std::uint64_t sample_seed = 0;
  auto* sa = app.add_subcommand("sample", "free-running rollouts as CSV");
  sa->add_option("--model", sample_model, "checkpoint")->required();
  sa->add_option("--init", sample_init, "FSEQ whose first observations seed the rollouts");
  sa->add_option("--steps", sample_steps, "generated steps")->capture_default_str();
  sa->add_option("--count", sample_count, "number of rollouts")->capture_default_str();
  sa->add_option("--seed", sample_seed, "random seed")->capture_default_str();
  sa->add_option("--out", sample_out, "CSV path (stdout if omitted)");

  std::string gc_config;
  KeyedFlags gc_flags;
  std::size_t gc_d = 3, gc_da = 0, gc_q = 2, gc_t = 4;
  double gc_step = 1e-6, gc_tol = 1e-3;
  auto* gc = app.add_subcommand("gradcheck", "compare gradients with central differences");
  gc->add_option("--config", gc_config, "key=value config file");
  add_model_flags(gc, gc_flags);
  gc->add_option("--d", gc_d, "observation dimension")->capture_default_str();
  gc->add_option("--d-action", gc_da, "action dimension")->capture_default_str();
  gc->add_option("--q", gc_q, "sequences in the batch")->capture_default_str();
  gc->add_option("--t", gc_t, "steps per sequence")->capture_default_str();
  gc->add_option("--step", gc_step, "finite-difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "failure threshold")->capture_default_str();

  std::size_t pc_k = 5, pc_d = 32;
  std::string pc_structure = "diagonal";
  auto* pc = app.add_subcommand("paramcount", "mixture parameters per step");
  pc->add_option("--k", pc_k, "components")->capture_default_str();
  pc->add_option("--d", pc_d, "dimension")->capture_default_str();
  pc->add_option("--structure", pc_structure, "full | diagonal | tied | logistic")->capture_default_str();

  DreamArgs dream;
  auto* dr = app.add_subcommand("dream", "train a linear controller with CMA-ES inside model rollouts");
  dr->add_option("--model", dream.model_path, "checkpoint with d_action > 0 (fits one if omitted)");
  dr->add_option("--popsize", dream.search.popsize, "CMA-ES population size")->capture_default_str();
  dr->add_option("--sigma", dream.search.sigma, "initial step size")->capture_default_str();
  dr->add_option("--generations", dream.search.generations, "generations")->capture_default_str();
  dr->add_option("--episodes", dream.setup.episodes, "episodes per candidate")->capture_default_str();
  dr->add_option("--horizon", dream.setup.horizon, "steps per episode")->capture_default_str();
  dr->add_option("--init-std", dream.setup.init_std, "spread of initial observations")->capture_default_str();
  dr->add_option("--reward", dream.setup.reward, "norm | track | zero")->capture_default_str();
  dr->add_option("--threads", dream.search.threads, "parallel candidate evaluations")->capture_default_str();
  dr->add_option("--mirrored", dream.search.mirrored, "mirrored sampling")->capture_default_str();
  dr->add_option("--seed", dream.seed, "random seed")->capture_default_str();
  dr->add_option("--log", dream.log_path, "CSV path (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) cmd_gen(gen);
    else if (*tr) cmd_train(train_config, train_flags);
    else if (*ev) cmd_eval(eval_model, eval_data, eval_window, eval_batch);
    else if (*sa) cmd_sample(sample_model, sample_init, sample_steps, sample_count, sample_seed, sample_out);
    else if (*gc) return cmd_gradcheck(gc_config, gc_flags, gc_d, gc_da, gc_q, gc_t, gc_step, gc_tol);
    else if (*pc) cmd_paramcount(pc_k, pc_d, pc_structure);
    else if (*dr) cmd_dream(dream);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use inran::controller::{
    configure_jobs, offline_bootstrap, replay_full, verify_round_log, Bootstrap, Experiment, LoopState, ReplayVerdict,
};
use inran::simenv::{monte_carlo_confidence, LatencyModel};
use inran::solver::{solve, EnsembleConstraint, GaConfig, SafeProblem, TrustRegionState};
use inran::{
    ensemble_mean, ensemble_variance, ControlAction, EnsembleSurrogate, Error, NetworkState, Policy, ProblemConfig,
    ReformulationMode, Result,
};

#[derive(Parser)]
#[command(name = "inran", version, about = "Interpretable chance-constrained slice control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile the environment and train the ensemble surrogate.
    OfflineTrain {
        #[command(flatten)]
        common: Common,
        /// Offline profiling samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Ensemble size.
        #[arg(long)]
        members: Option<usize>,
        /// Training steps per member.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, short, default_value = "offline")]
        out: PathBuf,
    },
    /// Run the closed control loop and write per-round artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// sweep, random-walk, shuffle-full-space, or a file with one state per line.
        #[arg(long)]
        trace: Option<String>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Retrain the surrogate every k rounds.
        #[arg(long)]
        update_every: Option<usize>,
        /// Write zeros in the timing columns so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
        /// Reuse an `offline-train` output directory instead of bootstrapping.
        #[arg(long)]
        bootstrap: Option<PathBuf>,
        /// Continue from a loop-state checkpoint.
        #[arg(long, conflicts_with = "bootstrap")]
        resume: Option<PathBuf>,
        #[arg(long, short, default_value = "run")]
        out: PathBuf,
    },
    /// Solve one instance and write the per-generation objective trajectory.
    EvalSolver {
        #[command(flatten)]
        common: Common,
        /// toy (f=a, c=600-5a, H=500), simulator (exact latency quantile), or an ensemble directory.
        #[arg(long, default_value = "toy")]
        surrogate: String,
        #[arg(long, default_value_t = 20)]
        state: i64,
        /// Round index for the simulator's drift factor.
        #[arg(long, default_value_t = 0)]
        round: usize,
        #[arg(long, short, default_value = "solver_trajectory.csv")]
        out: PathBuf,
    },
    /// Render each member's closed form and the mean/variance composition.
    EmitExpr {
        /// Ensemble directory (`ensemble/` inside an offline-train output).
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        digits: usize,
        /// Write the report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Verify a round log against its seed.
    Replay {
        log: PathBuf,
        /// Override the seed recorded in the log.
        #[arg(long)]
        seed: Option<u64>,
        /// Re-execute training and solving too, not only the environment.
        #[arg(long)]
        full: bool,
    },
    /// Tabulate Pr{latency <= H} over the action grid.
    CalibrateEnv {
        #[command(flatten)]
        common: Common,
        /// Restrict to one state.
        #[arg(long)]
        state: Option<i64>,
        #[arg(long, default_value_t = 0)]
        round: usize,
        /// Monte-Carlo draws per cell (0 skips the estimate).
        #[arg(long, default_value_t = 0)]
        draws: usize,
        #[arg(long, short, default_value = "calibration.csv")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Inran,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Paper,
    Standard,
}

impl Common {
    fn load(&self) -> Result<ProblemConfig> {
        let mut cfg = match &self.config {
            Some(p) => ProblemConfig::load(p)?,
            None => ProblemConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.run.jobs = j;
        }
        if let Some(m) = self.mode {
            cfg.constraint.reformulation_mode = match m {
                ModeArg::Paper => ReformulationMode::Paper,
                ModeArg::Standard => ReformulationMode::Standard,
            };
        }
        Ok(cfg)
    }
}

fn finish(cfg: &ProblemConfig) -> Result<()> {
    cfg.validate()?;
    configure_jobs(cfg.run.jobs)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::OfflineTrain {
            common,
            samples,
            members,
            steps,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(n) = samples {
                cfg.env.offline_samples = n;
            }
            if let Some(n) = members {
                cfg.ensemble.size = n;
            }
            if let Some(n) = steps {
                cfg.kan.train_steps = n;
            }
            finish(&cfg)?;
            let boot = offline_bootstrap(&cfg, cfg.run.seed, true, cfg.run.jobs != 1)?;
            boot.save(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            if let Some((_, report)) = &boot.surrogate {
                let last: Vec<f64> = report
                    .loss_histories
                    .iter()
                    .filter_map(|h| h.last().map(|l| l.sqrt()))
                    .collect();
                println!("members: {}", last.len());
                println!("samples: {}", boot.data.len());
                println!(
                    "final_rmse: min={:.5} max={:.5}",
                    last.iter().copied().fold(f64::INFINITY, f64::min),
                    last.iter().copied().fold(0.0, f64::max)
                );
            }
            println!("out: {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            common,
            rounds,
            policy,
            trace,
            checkpoint_every,
            update_every,
            no_timing,
            bootstrap,
            resume,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(r) = rounds {
                cfg.run.rounds = r;
            }
            if let Some(p) = policy {
                cfg.run.policy = match p {
                    PolicyArg::Inran => Policy::Inran,
                    PolicyArg::Baseline => Policy::Baseline,
                };
            }
            if let Some(t) = trace {
                cfg.run.trace = t;
            }
            if let Some(c) = checkpoint_every {
                cfg.run.checkpoint_every = c;
            }
            if let Some(u) = update_every {
                cfg.run.update_every = u;
            }
            if no_timing {
                cfg.run.record_timing = false;
            }
            finish(&cfg)?;
            let exp = Experiment::from_config(&cfg, cfg.run.seed)?;
            let state = match (bootstrap, resume) {
                (Some(dir), _) => exp.initial_state(Bootstrap::load(&dir)?)?,
                (_, Some(path)) => LoopState::load(&path)?,
                _ => exp.bootstrap()?,
            };
            let report = exp.run(state, Some(&out))?;
            print!("{}", report.summary());
            Ok(ExitCode::SUCCESS)
        }
        Command::EvalSolver {
            common,
            surrogate,
            state,
            round,
            out,
        } => {
            let cfg = common.load()?;
            finish(&cfg)?;
            eval_solver(&cfg, &surrogate, state, round, &out)
        }
        Command::EmitExpr { checkpoint, digits, out } => {
            let surrogate = EnsembleSurrogate::<f64>::load_dir(&checkpoint)?;
            let text = expression_report(&surrogate, digits);
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { log, seed, full } => {
            let verdict = if full {
                replay_full(&log)?
            } else {
                verify_round_log(&log, seed)?
            };
            println!("{verdict}");
            Ok(match verdict {
                ReplayVerdict::Ok { .. } => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            })
        }
        Command::CalibrateEnv {
            common,
            state,
            round,
            draws,
            out,
        } => {
            let cfg = common.load()?;
            finish(&cfg)?;
            calibrate(&cfg, state, round, draws, &out)
        }
    }
}

fn eval_solver(cfg: &ProblemConfig, name: &str, state: i64, round: usize, out: &Path) -> Result<ExitCode> {
    let ga = GaConfig::from_section(&cfg.ga, cfg.trust_region.max_iters)?;
    let tr = TrustRegionState::from_section(&cfg.trust_region);
    let bounds = cfg.problem.action_bounds();
    let seed = cfg.run.seed;
    let constraint = cfg.constraint::<f64>()?;
    let s = [state as f64];

    let toy = |a: &[f64], _: &[f64]| 600.0 - 5.0 * a[0];
    let latency = LatencyModel::from_config(&cfg.env, &cfg.problem.state_bounds());
    let z = inran::inverse_normal_cdf(constraint.effective_confidence())?;
    let sim = |a: &[f64], s: &[f64]| {
        // exact lognormal quantile of the latency at the relaxed action
        let m = latency.drift_factor(round) * cfg.env.workload / (a[0] * latency.rate(NetworkState { dl_max_mcs: s[0] as i64 }));
        (cfg.env.base_latency_ms + m) * (cfg.env.noise_log_std * z).exp()
    };
    let loaded;
    let ens;
    let model: &dyn inran::solver::ConstraintModel<f64> = match name {
        "toy" => &toy,
        "simulator" => &sim,
        dir => {
            loaded = EnsembleSurrogate::load_dir(Path::new(dir))?;
            ens = EnsembleConstraint {
                surrogate: &loaded,
                constraint,
                mode: cfg.constraint.reformulation_mode,
            };
            &ens
        }
    };
    let threshold = if name == "toy" { 500.0 } else { constraint.effective_threshold() };
    let problem = SafeProblem {
        objective: &inran::problem::VrbCount,
        constraint: model,
        threshold,
        state: s.to_vec(),
        bounds: vec![bounds],
    };
    let res = solve(&problem, &ga, &tr, None, seed)?;
    let mut csv = String::from("generation,best,mean\n");
    for (g, (best, mean)) in res.objective_trajectory.iter().enumerate() {
        let _ = writeln!(csv, "{g},{best},{mean}");
    }
    std::fs::write(out, csv)?;
    println!("best_action: {}", res.best_action[0]);
    println!("constraint_value: {:.3}", res.constraint_value_at_best);
    println!("threshold: {threshold:.3}");
    println!("feasible: {}", res.feasible);
    println!("generations: {}", res.generations_run);
    println!("csv: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn expression_report(s: &EnsembleSurrogate<f64>, digits: usize) -> String {
    let forms = s.closed_forms();
    let mut r = String::new();
    let (alo, ahi) = s.scaler.input_ranges[0];
    let (slo, shi) = s.scaler.input_ranges[1];
    let (ylo, yhi) = s.scaler.output_range;
    let _ = writeln!(r, "# inputs normalized to [-1, 1]");
    let _ = writeln!(r, "a = 2*(vrbs - {alo})/{} - 1", ahi - alo);
    let _ = writeln!(r, "s = 2*(mcs - {slo})/{} - 1", shi - slo);
    let _ = writeln!(r);
    for (i, f) in forms.iter().enumerate() {
        let pretty = f.pretty(digits);
        let _ = writeln!(r, "K_{i}(a, s) = {}", pretty[0]);
        let _ = writeln!(
            r,
            "  r2={:.6} max_abs_err={:.2e} symbolic={}",
            f.r_squared, f.max_abs_error, f.symbolic
        );
    }
    let n = forms.len();
    let _ = writeln!(r);
    let _ = writeln!(r, "latency_i(vrbs, mcs) = {ylo} + {} * K_i(a, s)   [ms]", yhi - ylo);
    let _ = writeln!(r, "mu(a|s) = (1/{n}) * sum_i latency_i");
    let _ = writeln!(r, "sigma2(a|s) = (1/{}) * sum_i (latency_i - mu)^2", n.saturating_sub(1));
    if n >= 2 {
        let _ = writeln!(r);
        let _ = writeln!(r, "# sample points");
        for (a, st) in [(20.0, 20.0), (40.0, 20.0), (60.0, 15.0)] {
            let mu = ensemble_mean(s, &[a], &[st]);
            let var = ensemble_variance(s, &[a], &[st]).unwrap_or(f64::NAN);
            let _ = writeln!(r, "vrbs={a} mcs={st}: mu={mu:.2} sigma2={var:.2}");
        }
    }
    r
}

fn calibrate(cfg: &ProblemConfig, only: Option<i64>, round: usize, draws: usize, out: &Path) -> Result<ExitCode> {
    let sb = cfg.problem.state_bounds();
    let ab = cfg.problem.action_bounds();
    if let Some(s) = only {
        if !sb.contains(s) {
            return Err(Error::Config(format!("state {s} outside [{}, {}]", sb.min, sb.max)));
        }
    }
    let model = LatencyModel::from_config(&cfg.env, &sb);
    let c = cfg.constraint::<f64>()?;
    let h = c.threshold_h;
    let states: Vec<i64> = match only {
        Some(s) => vec![s],
        None => (sb.min..=sb.max).collect(),
    };
    let mut csv = String::from("state,vrbs,mean_ms,p_exact,p_mc\n");
    for &s in &states {
        let st = NetworkState { dl_max_mcs: s };
        for v in ab.min..=ab.max {
            let a = ControlAction { vrbs: v };
            let mc = if draws > 0 {
                monte_carlo_confidence(&model, a, st, round, h, draws, cfg.run.seed).to_string()
            } else {
                String::new()
            };
            let _ = writeln!(
                csv,
                "{s},{v},{},{},{mc}",
                model.mean_latency(a, st, round),
                model.prob_within(a, st, round, h)
            );
        }
        let at = |eps| {
            model
                .min_safe_action(st, round, h, eps, &ab)
                .map_or("none".to_string(), |v| v.to_string())
        };
        println!(
            "state {s}: min vrbs for eps={:.3} -> {}, for eps+margin={:.3} -> {}",
            c.epsilon,
            at(c.epsilon),
            c.effective_confidence(),
            at(c.effective_confidence())
        );
    }
    std::fs::write(out, csv)?;
    println!("csv: {}", out.display());
    Ok(ExitCode::SUCCESS)
}

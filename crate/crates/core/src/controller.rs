//! The closed control loop: observe state, solve, act, observe latency, then
//! update the offset and the surrogate. Also run artifacts (CSV, round log,
//! checkpoints) and replay verification.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleSurrogate, Observation, TrainReport};
use crate::error::{Error, Result};
use crate::kan::{KanArch, Scaler, TrainOptions};
use crate::problem::{ChanceConstraint, ControlAction, NetworkState, Policy, ProblemConfig, VrbCount};
use crate::rng::{derive_seed, stream};
use crate::simenv::{baseline_policy, empirical_confidence, offline_profile, round_latencies, LatencyModel, ProfilingBaseline, StateTrace};
use crate::solver::{solve, EnsembleConstraint, GaConfig, SafeProblem, TrustRegionState};
use crate::stats::percentile;
use crate::tracker::{continual_update, ContinualConfig, OffsetController, ReplayBuffer};

pub const CSV_HEADER: &str = "round,state,vrbs,objective,p_r,alpha,assured,solver_gens,t_solver_s,t_train_s,t_total_s";
const LOG_FORMAT: &str = "inran-round-log";
const LOG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub solver_s: f64,
    pub train_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRound {
    pub round: usize,
    pub state: i64,
    pub vrbs: i64,
    pub objective: f64,
    pub latency_samples: Vec<f64>,
    pub p_r: f64,
    /// Offset after this round's update.
    pub alpha: f64,
    pub assured: bool,
    pub solver_generations: usize,
    /// The solver found no feasible action and the most conservative one was executed.
    pub fallback: bool,
    pub timing: PhaseTiming,
}

impl ControlRound {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.state,
            self.vrbs,
            self.objective,
            self.p_r,
            self.alpha,
            self.assured,
            self.solver_generations,
            self.timing.solver_s,
            self.timing.train_s,
            self.timing.total_s
        )
    }

    /// Everything except wall-clock timings.
    pub fn same_outcome(&self, other: &ControlRound) -> bool {
        let mut a = self.clone();
        a.timing = other.timing;
        a == *other
    }
}

/// Everything that evolves across rounds; serializable for checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Index of the next round to execute.
    pub round: usize,
    pub surrogate: Option<EnsembleSurrogate<f64>>,
    pub baseline: ProfilingBaseline,
    pub buffer: ReplayBuffer<f64>,
    pub offset: OffsetController<f64>,
    pub last_action: Option<i64>,
    /// Observations waiting for the next surrogate update.
    pub pending: Vec<Observation<f64>>,
}

impl LoopState {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Offline dataset, baseline table and (for inRAN) the bagged surrogate.
pub struct Bootstrap {
    pub data: Vec<Observation<f64>>,
    pub baseline: ProfilingBaseline,
    pub surrogate: Option<(EnsembleSurrogate<f64>, TrainReport<f64>)>,
}

impl Bootstrap {
    /// Writes `dataset.json`, `baseline.json`, and for a trained surrogate
    /// `ensemble/` plus `training_loss.csv` (`step,member_id,rmse`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("dataset.json"), serde_json::to_string(&self.data)?)?;
        std::fs::write(dir.join("baseline.json"), serde_json::to_string_pretty(&self.baseline)?)?;
        if let Some((surrogate, report)) = &self.surrogate {
            surrogate.save_dir(&dir.join("ensemble"))?;
            let mut csv = BufWriter::new(File::create(dir.join("training_loss.csv"))?);
            writeln!(csv, "step,member_id,rmse")?;
            let steps = report.loss_histories.iter().map(Vec::len).max().unwrap_or(0);
            for step in 0..steps {
                for (m, hist) in report.loss_histories.iter().enumerate() {
                    if let Some(loss) = hist.get(step) {
                        writeln!(csv, "{step},{m},{}", loss.max(0.0).sqrt())?;
                    }
                }
            }
            csv.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let data = serde_json::from_str(&std::fs::read_to_string(dir.join("dataset.json"))?)?;
        let baseline = serde_json::from_str(&std::fs::read_to_string(dir.join("baseline.json"))?)?;
        let ens_dir = dir.join("ensemble");
        let surrogate = if ens_dir.is_dir() {
            let s = EnsembleSurrogate::load_dir(&ens_dir)?;
            let report = TrainReport {
                loss_histories: s.members.iter().map(|m| m.training_loss_history.clone()).collect(),
            };
            Some((s, report))
        } else {
            None
        };
        Ok(Bootstrap {
            data,
            baseline,
            surrogate,
        })
    }
}

pub fn surrogate_scaler(config: &ProblemConfig) -> Scaler<f64> {
    let p = &config.problem;
    Scaler {
        input_ranges: vec![
            (p.action_min as f64, p.action_max as f64),
            (p.state_min as f64, p.state_max as f64),
        ],
        output_range: (0.0, config.kan.latency_cap_ms),
    }
}

pub fn kan_arch(config: &ProblemConfig) -> KanArch {
    let mut widths = vec![2];
    widths.extend(&config.kan.hidden);
    widths.push(1);
    KanArch {
        widths,
        grid_intervals: config.kan.grid_intervals,
        spline_order: config.kan.spline_order,
        init_scale: config.kan.init_scale,
    }
}

pub fn train_options(config: &ProblemConfig) -> TrainOptions<f64> {
    TrainOptions {
        steps: config.kan.train_steps,
        learning_rate: config.kan.learning_rate,
        momentum: config.kan.momentum,
    }
}

/// Profiles the environment and, when `train` is set, fits the ensemble.
pub fn offline_bootstrap(config: &ProblemConfig, seed: u64, train: bool, parallel: bool) -> Result<Bootstrap> {
    let p = &config.problem;
    let model = LatencyModel::from_config(&config.env, &p.state_bounds());
    let (data, baseline) = offline_profile(
        &model,
        config.env.offline_samples,
        &p.state_bounds(),
        &p.action_bounds(),
        config.env.state_bucket_width,
        config.env.action_bin_width,
        seed,
    )?;
    let surrogate = if train {
        Some(EnsembleSurrogate::train(
            &data,
            &kan_arch(config),
            surrogate_scaler(config),
            &train_options(config),
            config.ensemble.size,
            derive_seed(seed, &[stream::ENSEMBLE]),
            parallel,
        )?)
    } else {
        None
    };
    Ok(Bootstrap {
        data,
        baseline,
        surrogate,
    })
}

/// Immutable context of one run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ProblemConfig,
    pub policy: Policy,
    pub seed: u64,
    pub latency: LatencyModel,
    pub trace: StateTrace,
    pub constraint: ChanceConstraint<f64>,
    ga: GaConfig,
    tr: TrustRegionState<f64>,
    parallel: bool,
}

impl Experiment {
    pub fn new(config: &ProblemConfig, policy: Policy, trace: StateTrace, seed: u64) -> Result<Self> {
        config.validate()?;
        if trace.states.len() < config.run.rounds {
            return Err(Error::Config(format!(
                "trace has {} states, {} rounds requested",
                trace.states.len(),
                config.run.rounds
            )));
        }
        let sb = config.problem.state_bounds();
        if let Some(s) = trace.states.iter().find(|s| !sb.contains(s.dl_max_mcs)) {
            return Err(Error::Config(format!("trace state {} out of bounds", s.dl_max_mcs)));
        }
        Ok(Experiment {
            latency: LatencyModel::from_config(&config.env, &sb),
            constraint: config.constraint()?,
            ga: GaConfig::from_section(&config.ga, config.trust_region.max_iters).map_err(|e| Error::Config(e.to_string()))?,
            tr: TrustRegionState::from_section(&config.trust_region),
            parallel: config.run.jobs != 1,
            config: config.clone(),
            policy,
            trace,
            seed,
        })
    }

    /// Uses the trace named in the config.
    pub fn from_config(config: &ProblemConfig, seed: u64) -> Result<Self> {
        let r = &config.run;
        let trace = StateTrace::resolve(&r.trace, r.rounds, r.trace_dwell, &config.problem.state_bounds(), seed)?;
        Self::new(config, r.policy, trace, seed)
    }

    fn fresh_offset(&self) -> OffsetController<f64> {
        let k = &self.config.tracker;
        OffsetController::new(
            self.config.constraint.alpha0,
            k.eta0,
            k.eta_decay,
            k.delta,
            (k.alpha_min, k.alpha_max),
            k.offset_mode,
        )
        .expect("validated tracker config")
    }

    /// Round-0 loop state from an offline bootstrap.
    pub fn initial_state(&self, boot: Bootstrap) -> Result<LoopState> {
        let surrogate = match self.policy {
            Policy::Inran => Some(
                boot.surrogate
                    .ok_or_else(|| Error::Config("inran policy needs a trained surrogate".into()))?
                    .0,
            ),
            Policy::Baseline => None,
        };
        let mut buffer = ReplayBuffer::new(self.config.tracker.buffer_capacity);
        buffer.extend(boot.data);
        Ok(LoopState {
            round: 0,
            surrogate,
            baseline: boot.baseline,
            buffer,
            offset: self.fresh_offset(),
            last_action: None,
            pending: Vec::new(),
        })
    }

    pub fn bootstrap(&self) -> Result<LoopState> {
        let boot = offline_bootstrap(&self.config, self.seed, self.policy == Policy::Inran, self.parallel)?;
        self.initial_state(boot)
    }

    fn round_seed(&self, round: usize) -> u64 {
        derive_seed(self.seed, &[stream::ROUND, round as u64])
    }

    /// Executes one control round and advances `st`.
    pub fn run_round(&self, st: &mut LoopState) -> Result<ControlRound> {
        let r = st.round;
        self.step(st).map_err(|e| Error::Round {
            round: r,
            source: Box::new(e),
        })
    }

    fn step(&self, st: &mut LoopState) -> Result<ControlRound> {
        let t0 = Instant::now();
        let round = st.round;
        let state = *self
            .trace
            .states
            .get(round)
            .ok_or_else(|| Error::domain(format!("trace ends before round {round}")))?;
        let bounds = self.config.problem.action_bounds();
        let h = self.constraint.threshold_h;
        let eps_eff = self.constraint.effective_confidence();

        let (action, generations, fallback) = match (&self.policy, &st.surrogate) {
            (Policy::Inran, Some(surrogate)) => {
                let cc = self.constraint.with_alpha(st.offset.alpha);
                let model = EnsembleConstraint {
                    surrogate,
                    constraint: cc,
                    mode: self.config.constraint.reformulation_mode,
                };
                let problem = SafeProblem {
                    objective: &VrbCount,
                    constraint: &model,
                    threshold: cc.effective_threshold(),
                    state: state.features(),
                    bounds: vec![bounds],
                };
                let warm = st.last_action.map(|a| vec![a as f64]);
                let res = solve(&problem, &self.ga, &self.tr, warm.as_deref(), self.round_seed(round))?;
                if res.feasible {
                    (res.control_action(), res.generations_run, false)
                } else {
                    (ControlAction { vrbs: bounds.max }, res.generations_run, true)
                }
            }
            (Policy::Inran, None) => return Err(Error::domain("inran policy without a surrogate")),
            (Policy::Baseline, _) => (baseline_policy(&st.baseline, state, h, eps_eff)?, 0, false),
        };
        let t_solver = t0.elapsed().as_secs_f64();

        let samples = round_latencies(
            &self.latency,
            action,
            state,
            round,
            self.seed,
            self.config.env.samples_per_round,
        );
        let p_r = empirical_confidence(&samples, h)?;
        let assured = p_r >= self.constraint.epsilon;

        let t1 = Instant::now();
        if self.policy == Policy::Inran {
            st.offset.update(p_r, eps_eff);
            st.pending.extend(
                samples
                    .iter()
                    .map(|&l| Observation::scalar(action.vrbs as f64, state.dl_max_mcs as f64, l)),
            );
            if (round + 1) % self.config.run.update_every == 0 {
                let cfg = ContinualConfig {
                    lambda: self.config.tracker.ewc_lambda,
                    replay_ratio: self.config.tracker.replay_ratio,
                    train: train_options(&self.config),
                };
                let surrogate = st.surrogate.as_mut().expect("inran state has a surrogate");
                continual_update(surrogate, &st.pending, &mut st.buffer, &cfg, self.round_seed(round), self.parallel)?;
                st.pending.clear();
            }
        }
        let t_train = t1.elapsed().as_secs_f64();

        st.last_action = Some(action.vrbs);
        st.round += 1;
        let timing = if self.config.run.record_timing {
            PhaseTiming {
                solver_s: t_solver,
                train_s: t_train,
                total_s: t0.elapsed().as_secs_f64(),
            }
        } else {
            PhaseTiming::default()
        };
        Ok(ControlRound {
            round,
            state: state.dl_max_mcs,
            vrbs: action.vrbs,
            objective: action.vrbs as f64,
            latency_samples: samples,
            p_r,
            alpha: st.offset.alpha,
            assured,
            solver_generations: generations,
            fallback,
            timing,
        })
    }

    /// Runs from `st` up to the configured round count.
    pub fn run(&self, mut st: LoopState, out_dir: Option<&Path>) -> Result<RunReport> {
        let mut writer = match out_dir {
            Some(d) => Some(RunWriter::create(d, self)?),
            None => None,
        };
        let mut rounds = Vec::with_capacity(self.config.run.rounds.saturating_sub(st.round));
        while st.round < self.config.run.rounds {
            let r = self.run_round(&mut st)?;
            if let Some(w) = writer.as_mut() {
                w.round(&r)?;
                if st.round % self.config.run.checkpoint_every == 0 {
                    w.checkpoint(&st)?;
                }
            }
            rounds.push(r);
        }
        let (csv_path, checkpoints) = match writer {
            Some(w) => w.finish()?,
            None => (None, Vec::new()),
        };
        Ok(RunReport::new(rounds, csv_path, checkpoints, st))
    }
}

/// Sizes the global worker pool; 0 leaves the default (one per core).
pub fn configure_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Offline bootstrap plus the full loop.
pub fn run_experiment(config: &ProblemConfig, policy: Policy, trace: StateTrace, seed: u64, out_dir: Option<&Path>) -> Result<RunReport> {
    let exp = Experiment::new(config, policy, trace, seed)?;
    let st = exp.bootstrap()?;
    exp.run(st, out_dir)
}

pub struct RunReport {
    pub rounds: Vec<ControlRound>,
    pub assurance_ratio: f64,
    pub mean_objective: f64,
    pub csv_path: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub final_state: LoopState,
}

impl RunReport {
    fn new(rounds: Vec<ControlRound>, csv_path: Option<PathBuf>, checkpoints: Vec<PathBuf>, final_state: LoopState) -> Self {
        let n = rounds.len().max(1) as f64;
        RunReport {
            assurance_ratio: rounds.iter().filter(|r| r.assured).count() as f64 / n,
            mean_objective: rounds.iter().map(|r| r.objective).sum::<f64>() / n,
            rounds,
            csv_path,
            checkpoints,
            final_state,
        }
    }

    pub fn fallback_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.fallback).count()
    }

    /// Plain `key: value` lines for stdout.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "rounds: {}", self.rounds.len());
        let _ = writeln!(s, "assurance_ratio: {:.4}", self.assurance_ratio);
        let _ = writeln!(s, "mean_objective: {:.3}", self.mean_objective);
        let _ = writeln!(s, "fallback_rounds: {}", self.fallback_rounds());
        if !self.rounds.is_empty() {
            let totals: Vec<f64> = self.rounds.iter().map(|r| r.timing.total_s).collect();
            let solver: Vec<f64> = self.rounds.iter().map(|r| r.timing.solver_s).collect();
            let train: Vec<f64> = self.rounds.iter().map(|r| r.timing.train_s).collect();
            for (name, v) in [("t_total_s", &totals), ("t_solver_s", &solver), ("t_train_s", &train)] {
                let _ = writeln!(
                    s,
                    "{name}: p50={:.4} p90={:.4} p99={:.4}",
                    percentile(v, 0.5),
                    percentile(v, 0.9),
                    percentile(v, 0.99)
                );
            }
        }
        if let Some(p) = &self.csv_path {
            let _ = writeln!(s, "csv: {}", p.display());
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    format: String,
    version: u32,
    seed: u64,
    policy: Policy,
    config: ProblemConfig,
    trace: Vec<i64>,
}

struct RunWriter {
    dir: PathBuf,
    csv: BufWriter<File>,
    log: BufWriter<File>,
    checkpoints: Vec<PathBuf>,
}

impl RunWriter {
    fn create(dir: &Path, exp: &Experiment) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("rounds.csv"))?);
        writeln!(csv, "{CSV_HEADER}")?;
        let mut log = BufWriter::new(File::create(dir.join("round_log.jsonl"))?);
        let header = LogHeader {
            format: LOG_FORMAT.into(),
            version: LOG_VERSION,
            seed: exp.seed,
            policy: exp.policy,
            config: exp.config.clone(),
            trace: exp.trace.states.iter().map(|s| s.dl_max_mcs).collect(),
        };
        writeln!(log, "{}", serde_json::to_string(&header)?)?;
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            csv,
            log,
            checkpoints: Vec::new(),
        })
    }

    fn round(&mut self, r: &ControlRound) -> Result<()> {
        writeln!(self.csv, "{}", r.csv_row())?;
        writeln!(self.log, "{}", serde_json::to_string(r)?)?;
        Ok(())
    }

    fn checkpoint(&mut self, st: &LoopState) -> Result<()> {
        let path = self.dir.join("checkpoints").join(format!("round_{:04}.json", st.round));
        st.save(&path)?;
        self.checkpoints.push(path);
        Ok(())
    }

    fn finish(mut self) -> Result<(Option<PathBuf>, Vec<PathBuf>)> {
        self.csv.flush()?;
        self.log.flush()?;
        Ok((Some(self.dir.join("rounds.csv")), self.checkpoints))
    }
}

/// Recounts the assurance ratio from a rounds CSV.
pub fn assurance_from_csv(text: &str) -> Result<f64> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("unexpected CSV header".into()));
    }
    let (mut n, mut ok) = (0usize, 0usize);
    for line in lines {
        let assured = line
            .split(',')
            .nth(6)
            .ok_or_else(|| Error::Parse(format!("short CSV row: {line}")))?;
        n += 1;
        ok += usize::from(assured == "true");
    }
    Ok(if n == 0 { 0.0 } else { ok as f64 / n as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ReplayVerdict {
    Ok { rounds: usize },
    Mismatch { round: usize, field: String, detail: String },
    Partial { verified: usize, expected: usize },
}

impl std::fmt::Display for ReplayVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReplayVerdict::Ok { rounds } => write!(f, "OK ({rounds} rounds)"),
            ReplayVerdict::Mismatch { round, field, detail } => {
                write!(f, "MISMATCH at round {round}: {field} ({detail})")
            }
            ReplayVerdict::Partial { verified, expected } => {
                write!(f, "PARTIAL: {verified} of {expected} rounds verified (log truncated)")
            }
        }
    }
}

fn read_log(path: &Path) -> Result<(LogHeader, Vec<std::result::Result<ControlRound, String>>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse("empty round log".into()))??;
    let header: LogHeader = serde_json::from_str(&first)?;
    if header.format != LOG_FORMAT {
        return Err(Error::Parse(format!("not a round log: {}", header.format)));
    }
    let mut rounds = Vec::new();
    for line in lines {
        let line = line?;
        rounds.push(serde_json::from_str::<ControlRound>(&line).map_err(|e| e.to_string()));
    }
    Ok((header, rounds))
}

/// Re-derives every round's environment outcome and bookkeeping from the
/// log's seed: trace state, latency draws for the logged action, empirical
/// confidence, assurance, objective, and the offset trajectory.
///
/// `seed` overrides the seed recorded in the log header.
pub fn verify_round_log(path: &Path, seed: Option<u64>) -> Result<ReplayVerdict> {
    let (mut header, rounds) = read_log(path)?;
    if let Some(s) = seed {
        header.seed = s;
    }
    let cfg = &header.config;
    let exp_rounds = cfg.run.rounds;
    let latency = LatencyModel::from_config(&cfg.env, &cfg.problem.state_bounds());
    let constraint: ChanceConstraint<f64> = cfg.constraint()?;
    let k = &cfg.tracker;
    let mut offset = OffsetController::new(cfg.constraint.alpha0, k.eta0, k.eta_decay, k.delta, (k.alpha_min, k.alpha_max), k.offset_mode)?;
    let bounds = cfg.problem.action_bounds();
    let mismatch = |round: usize, field: &str, detail: String| ReplayVerdict::Mismatch {
        round,
        field: field.into(),
        detail,
    };

    let mut verified = 0;
    for (i, r) in rounds.iter().enumerate() {
        let r = match r {
            Ok(r) => r,
            Err(_) => break,
        };
        if r.round != i {
            return Ok(mismatch(i, "round", format!("logged index {}", r.round)));
        }
        let Some(&expected_state) = header.trace.get(i) else {
            return Ok(mismatch(i, "state", "beyond the logged trace".into()));
        };
        if r.state != expected_state {
            return Ok(mismatch(i, "state", format!("trace has {expected_state}, log has {}", r.state)));
        }
        if !bounds.contains(r.vrbs) {
            return Ok(mismatch(i, "vrbs", format!("{} outside action bounds", r.vrbs)));
        }
        if r.objective != r.vrbs as f64 {
            return Ok(mismatch(i, "objective", format!("{} for {} vRBs", r.objective, r.vrbs)));
        }
        if r.fallback && r.vrbs != bounds.max {
            return Ok(mismatch(i, "vrbs", "fallback round without the maximum action".into()));
        }
        let samples = round_latencies(
            &latency,
            ControlAction { vrbs: r.vrbs },
            NetworkState { dl_max_mcs: r.state },
            i,
            header.seed,
            cfg.env.samples_per_round,
        );
        if samples != r.latency_samples {
            return Ok(mismatch(i, "vrbs", "latency draws do not match the logged action".into()));
        }
        let p_r = empirical_confidence(&samples, constraint.threshold_h)?;
        if p_r != r.p_r {
            return Ok(mismatch(i, "p_r", format!("expected {p_r}, log has {}", r.p_r)));
        }
        if (p_r >= constraint.epsilon) != r.assured {
            return Ok(mismatch(i, "assured", format!("p_r {p_r}")));
        }
        if header.policy == Policy::Inran {
            offset.update(p_r, constraint.effective_confidence());
        }
        if offset.alpha != r.alpha {
            return Ok(mismatch(i, "alpha", format!("expected {}, log has {}", offset.alpha, r.alpha)));
        }
        verified += 1;
    }
    if verified < exp_rounds {
        return Ok(ReplayVerdict::Partial {
            verified,
            expected: exp_rounds,
        });
    }
    Ok(ReplayVerdict::Ok { rounds: verified })
}

/// Re-executes the logged run from scratch (including training and solving)
/// and compares every round except timings.
pub fn replay_full(path: &Path) -> Result<ReplayVerdict> {
    let (header, logged) = read_log(path)?;
    let trace = StateTrace {
        states: header.trace.iter().map(|&s| NetworkState { dl_max_mcs: s }).collect(),
    };
    let exp = Experiment::new(&header.config, header.policy, trace, header.seed)?;
    let mut st = exp.bootstrap()?;
    let mut verified = 0;
    for (i, r) in logged.iter().enumerate() {
        let Ok(r) = r else { break };
        if i >= header.config.run.rounds {
            break;
        }
        let fresh = exp.run_round(&mut st)?;
        if !fresh.same_outcome(r) {
            let field = if fresh.vrbs != r.vrbs { "vrbs" } else { "round record" };
            return Ok(ReplayVerdict::Mismatch {
                round: i,
                field: field.into(),
                detail: format!("replayed {} vRBs, log has {}", fresh.vrbs, r.vrbs),
            });
        }
        verified += 1;
    }
    if verified < header.config.run.rounds {
        return Ok(ReplayVerdict::Partial {
            verified,
            expected: header.config.run.rounds,
        });
    }
    Ok(ReplayVerdict::Ok { rounds: verified })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::DriftStep;

    /// Small, fast configuration for loop-mechanics tests.
    fn tiny() -> ProblemConfig {
        let mut c = ProblemConfig::default();
        c.ensemble.size = 3;
        c.kan.train_steps = 30;
        c.env.offline_samples = 60;
        c.env.samples_per_round = 10;
        c.ga.population = 12;
        c.ga.generations = 6;
        c.ga.tr_interval = 3;
        c.run.rounds = 12;
        c.run.checkpoint_every = 4;
        c.run.record_timing = false;
        c.run.jobs = 1;
        c
    }

    #[test]
    fn csv_header_is_exact() {
        assert_eq!(
            CSV_HEADER,
            "round,state,vrbs,objective,p_r,alpha,assured,solver_gens,t_solver_s,t_train_s,t_total_s"
        );
    }

    #[test]
    fn degenerate_environment_always_picks_minimum() {
        let mut c = tiny();
        c.env.noise_log_std = 0.0;
        c.env.workload = 1.0;
        c.env.drift = vec![];
        c.kan.train_steps = 200;
        for policy in [Policy::Inran, Policy::Baseline] {
            let exp = Experiment::from_config(&c, 1).unwrap();
            let exp = Experiment::new(&c, policy, exp.trace, 1).unwrap();
            let st = exp.bootstrap().unwrap();
            let rep = exp.run(st, None).unwrap();
            for r in &rep.rounds {
                assert_eq!(r.vrbs, 10, "{policy:?} round {}", r.round);
                assert!(r.assured);
            }
            assert_eq!(rep.assurance_ratio, 1.0);
        }
    }

    #[test]
    fn baseline_skips_learning() {
        let mut c = tiny();
        c.run.record_timing = true;
        let exp = Experiment::from_config(&c, 2).unwrap();
        let exp = Experiment::new(&c, Policy::Baseline, exp.trace, 2).unwrap();
        let st = exp.bootstrap().unwrap();
        assert!(st.surrogate.is_none());
        let rep = exp.run(st, None).unwrap();
        assert!(rep.rounds.iter().all(|r| r.alpha == 0.0 && r.solver_generations == 0));
        assert!(rep.rounds.iter().all(|r| r.timing.train_s < 1e-3));
        assert_eq!(rep.final_state.buffer.len(), 60);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let c = tiny();
        let exp = Experiment::from_config(&c, 3).unwrap();
        let st = exp.bootstrap().unwrap();
        let full = exp.run(st.clone(), None).unwrap();

        let mut half = st;
        for _ in 0..5 {
            exp.run_round(&mut half).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        half.save(&path).unwrap();
        let resumed = exp.run(LoopState::load(&path).unwrap(), None).unwrap();
        assert_eq!(resumed.rounds[..], full.rounds[5..]);
        assert_eq!(resumed.final_state, full.final_state);
    }

    #[test]
    fn artifacts_and_replay() {
        let c = tiny();
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::from_config(&c, 4).unwrap();
        let rep = exp.run(exp.bootstrap().unwrap(), Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert_eq!(csv.lines().count(), 13);
        assert_eq!(assurance_from_csv(&csv).unwrap(), rep.assurance_ratio);
        assert_eq!(rep.checkpoints.len(), 3);
        for r in &rep.rounds {
            assert_eq!(r.objective, r.vrbs as f64);
        }

        let log = dir.path().join("round_log.jsonl");
        assert_eq!(verify_round_log(&log, None).unwrap(), ReplayVerdict::Ok { rounds: 12 });
        assert_eq!(replay_full(&log).unwrap(), ReplayVerdict::Ok { rounds: 12 });

        // tamper with the action of round 7
        let text = std::fs::read_to_string(&log).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut r7: ControlRound = serde_json::from_str(&lines[8]).unwrap();
        r7.vrbs = if r7.vrbs == 100 { 99 } else { r7.vrbs + 1 };
        r7.objective = r7.vrbs as f64;
        lines[8] = serde_json::to_string(&r7).unwrap();
        let tampered = dir.path().join("tampered.jsonl");
        std::fs::write(&tampered, lines.join("\n") + "\n").unwrap();
        match verify_round_log(&tampered, None).unwrap() {
            ReplayVerdict::Mismatch { round, .. } => assert_eq!(round, 7),
            v => panic!("{v}"),
        }

        // truncate mid-line after round 4
        let cut: String = text.lines().take(6).collect::<Vec<_>>().join("\n") + "\n{\"round\":5,";
        let truncated = dir.path().join("truncated.jsonl");
        std::fs::write(&truncated, cut).unwrap();
        assert_eq!(
            verify_round_log(&truncated, None).unwrap(),
            ReplayVerdict::Partial { verified: 5, expected: 12 }
        );
    }

    #[test]
    fn reruns_are_byte_identical() {
        let c = tiny();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for d in [&d1, &d2] {
            let exp = Experiment::from_config(&c, 5).unwrap();
            exp.run(exp.bootstrap().unwrap(), Some(d.path())).unwrap();
        }
        for f in ["rounds.csv", "round_log.jsonl"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn short_trace_is_config_error() {
        let c = tiny();
        let trace = StateTrace {
            states: vec![NetworkState { dl_max_mcs: 20 }; 3],
        };
        assert!(Experiment::new(&c, Policy::Inran, trace, 0).unwrap_err().is_config());
        let mut bad = tiny();
        bad.env.drift = vec![DriftStep { round: 1, factor: 1.0 }];
        bad.ga.tournament_size = 1;
        assert!(Experiment::from_config(&bad, 0).unwrap_err().is_config());
    }
}

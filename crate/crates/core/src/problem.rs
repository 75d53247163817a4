//! Problem formulation: state/action spaces, objective, chance constraint,
//! and the run configuration with its defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntBounds {
    pub min: i64,
    pub max: i64,
}

impl IntBounds {
    pub fn contains(&self, v: i64) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn as_reals<T: Scalar>(&self) -> (T, T) {
        (T::of(self.min as f64), T::of(self.max as f64))
    }

    pub fn span(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    /// Round half up, then clamp.
    pub fn round(&self, x: f64) -> i64 {
        let r = if x.is_finite() { (x + 0.5).floor() } else if x > 0.0 { self.max as f64 } else { self.min as f64 };
        (r as i64).clamp(self.min, self.max)
    }
}

/// Downlink maximum MCS index of the slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NetworkState {
    pub dl_max_mcs: i64,
}

/// Number of virtual resource blocks allocated to the slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ControlAction {
    pub vrbs: i64,
}

impl NetworkState {
    pub fn new(dl_max_mcs: i64, bounds: &IntBounds) -> Result<Self> {
        if !bounds.contains(dl_max_mcs) {
            return Err(Error::domain(format!(
                "state {dl_max_mcs} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        Ok(NetworkState { dl_max_mcs })
    }

    pub fn features<T: Scalar>(&self) -> Vec<T> {
        vec![T::of(self.dl_max_mcs as f64)]
    }
}

impl ControlAction {
    pub fn new(vrbs: i64, bounds: &IntBounds) -> Result<Self> {
        if !bounds.contains(vrbs) {
            return Err(Error::domain(format!(
                "action {vrbs} outside [{}, {}]",
                bounds.min, bounds.max
            )));
        }
        Ok(ControlAction { vrbs })
    }

    /// Continuous relaxation back to an executable action.
    pub fn from_relaxed(x: f64, bounds: &IntBounds) -> Self {
        ControlAction { vrbs: bounds.round(x) }
    }

    pub fn features<T: Scalar>(&self) -> Vec<T> {
        vec![T::of(self.vrbs as f64)]
    }
}

/// Cost to minimize over the continuous relaxation of the action space.
pub trait Objective<T: Scalar>: Send + Sync {
    fn value(&self, action: &[T], state: &[T]) -> T;

    /// Defaults to central differences.
    fn gradient(&self, action: &[T], state: &[T], out: &mut [T]) {
        let h = T::of(1e-6);
        let mut x = action.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = self.value(&x, state);
            x[i] = orig - h;
            let down = self.value(&x, state);
            x[i] = orig;
            out[i] = (up - down) / (h + h);
        }
    }
}

/// Allocated vRB count; ignores the state.
#[derive(Clone, Copy, Debug, Default)]
pub struct VrbCount;

impl<T: Scalar> Objective<T> for VrbCount {
    fn value(&self, action: &[T], _state: &[T]) -> T {
        action.iter().copied().sum()
    }

    fn gradient(&self, _action: &[T], _state: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|g| *g = T::one());
    }
}

/// `f(a|s)` for an executable action under the default vRB-count cost.
pub fn objective(action: ControlAction, state: NetworkState, bounds: &IntBounds) -> Result<f64> {
    ControlAction::new(action.vrbs, bounds)?;
    Ok(VrbCount.value(&[action.vrbs as f64], &state.features::<f64>()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReformulationMode {
    /// `mu + sigma^2 * z`
    #[default]
    Paper,
    /// `mu + sigma * z`
    Standard,
}

/// `Pr{g(a|s) <= H} >= epsilon`, tightened by a safety margin and shifted by
/// an adaptive offset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ChanceConstraint<T: Scalar> {
    pub threshold_h: T,
    pub epsilon: T,
    pub safety_margin: T,
    pub alpha_offset: T,
}

impl<T: Scalar> ChanceConstraint<T> {
    pub fn new(threshold_h: T, epsilon: T, safety_margin: T) -> Result<Self> {
        if !(epsilon > T::zero() && epsilon < T::one()) {
            return Err(Error::domain("epsilon must lie in (0, 1)"));
        }
        if !(safety_margin >= T::zero()) || !(epsilon + safety_margin < T::one()) {
            return Err(Error::domain("need safety_margin >= 0 and epsilon + safety_margin < 1"));
        }
        if !(threshold_h > T::zero()) {
            return Err(Error::domain("threshold must be positive"));
        }
        Ok(ChanceConstraint {
            threshold_h,
            epsilon,
            safety_margin,
            alpha_offset: T::zero(),
        })
    }

    /// `H * (1 + alpha)`
    pub fn effective_threshold(&self) -> T {
        self.threshold_h * (T::one() + self.alpha_offset)
    }

    /// `epsilon + margin`
    pub fn effective_confidence(&self) -> T {
        self.epsilon + self.safety_margin
    }

    pub fn with_alpha(mut self, alpha: T) -> Self {
        self.alpha_offset = alpha;
        self
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub state_min: i64,
    pub state_max: i64,
    pub action_min: i64,
    pub action_max: i64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection {
            state_min: 12,
            state_max: 27,
            action_min: 10,
            action_max: 100,
        }
    }
}

impl ProblemSection {
    pub fn state_bounds(&self) -> IntBounds {
        IntBounds {
            min: self.state_min,
            max: self.state_max,
        }
    }

    pub fn action_bounds(&self) -> IntBounds {
        IntBounds {
            min: self.action_min,
            max: self.action_max,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintSection {
    /// Latency threshold H in milliseconds.
    pub threshold_ms: f64,
    pub epsilon: f64,
    pub safety_margin: f64,
    /// Initial threshold offset.
    pub alpha0: f64,
    pub reformulation_mode: ReformulationMode,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        ConstraintSection {
            threshold_ms: 500.0,
            epsilon: 0.7,
            safety_margin: 0.1,
            alpha0: 0.0,
            reformulation_mode: ReformulationMode::Paper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KanSection {
    pub hidden: Vec<usize>,
    pub grid_intervals: usize,
    pub spline_order: usize,
    pub init_scale: f64,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Latency mapped to 1.0 by the target scaler.
    pub latency_cap_ms: f64,
}

impl Default for KanSection {
    fn default() -> Self {
        KanSection {
            hidden: vec![3],
            grid_intervals: 5,
            spline_order: 3,
            init_scale: 0.1,
            train_steps: 200,
            learning_rate: 0.05,
            momentum: 0.9,
            latency_cap_ms: 2000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub size: usize,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection { size: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaSection {
    pub population: usize,
    pub generations: usize,
    pub initial_mutation_rate: f64,
    pub mutation_scale: f64,
    pub tournament_size: usize,
    pub tr_interval: usize,
    pub penalty_weight: f64,
    pub early_stop_tol: f64,
    pub early_stop_patience: usize,
}

impl Default for GaSection {
    fn default() -> Self {
        GaSection {
            population: 50,
            generations: 30,
            initial_mutation_rate: 0.3,
            mutation_scale: 5.0,
            tournament_size: 3,
            tr_interval: 5,
            penalty_weight: 1e6,
            early_stop_tol: 1e-6,
            early_stop_patience: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustRegionSection {
    pub initial_radius: f64,
    pub min_radius: f64,
    pub max_radius: f64,
    pub expand_factor: f64,
    pub shrink_factor: f64,
    pub accept_low: f64,
    pub accept_high: f64,
    pub barrier_weight: f64,
    pub barrier_decay: f64,
    pub max_iters: usize,
    pub curvature: bool,
}

impl Default for TrustRegionSection {
    fn default() -> Self {
        TrustRegionSection {
            initial_radius: 10.0,
            min_radius: 1e-3,
            max_radius: 90.0,
            expand_factor: 2.0,
            shrink_factor: 0.25,
            accept_low: 0.25,
            accept_high: 0.75,
            barrier_weight: 0.1,
            barrier_decay: 0.5,
            max_iters: 20,
            curvature: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetMode {
    /// Step against the sign of `P_r - target`.
    #[default]
    Signed,
    /// Always add `eta` when out of tolerance.
    Unsigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSection {
    pub ewc_lambda: f64,
    pub buffer_capacity: usize,
    /// Replay samples drawn per new sample.
    pub replay_ratio: f64,
    pub delta: f64,
    pub eta0: f64,
    pub eta_decay: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub offset_mode: OffsetMode,
}

impl Default for TrackerSection {
    fn default() -> Self {
        TrackerSection {
            ewc_lambda: 100.0,
            buffer_capacity: 1000,
            replay_ratio: 3.0,
            delta: 0.05,
            eta0: 0.02,
            eta_decay: 0.95,
            alpha_min: -0.5,
            alpha_max: 0.5,
            offset_mode: OffsetMode::Signed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftStep {
    pub round: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub base_latency_ms: f64,
    /// Load term numerator, ms * vRB at unit rate.
    pub workload: f64,
    /// Relative per-vRB throughput gain per MCS step above `state_min`.
    pub rate_slope: f64,
    /// Standard deviation of the log of the multiplicative noise; 0 disables noise.
    pub noise_log_std: f64,
    pub drift: Vec<DriftStep>,
    pub samples_per_round: usize,
    pub offline_samples: usize,
    pub state_bucket_width: i64,
    pub action_bin_width: i64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            base_latency_ms: 50.0,
            workload: 25_000.0,
            rate_slope: 0.1,
            noise_log_std: 0.15,
            drift: vec![
                DriftStep { round: 100, factor: 1.3 },
                DriftStep { round: 200, factor: 0.9 },
            ],
            samples_per_round: 20,
            offline_samples: 250,
            state_bucket_width: 4,
            action_bin_width: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    #[default]
    Inran,
    Baseline,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inran" => Ok(Policy::Inran),
            "baseline" => Ok(Policy::Baseline),
            other => Err(Error::Config(format!("unknown policy '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub rounds: usize,
    pub policy: Policy,
    /// `sweep`, `random-walk`, `shuffle-full-space`, or a path to a one-column file.
    pub trace: String,
    /// Rounds each generated state is held for.
    pub trace_dwell: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Surrogate is updated every this many rounds.
    pub update_every: usize,
    /// Write wall-clock timings; disable for byte-identical reruns.
    pub record_timing: bool,
    /// Worker threads for member training; 0 uses all cores.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            rounds: 300,
            policy: Policy::Inran,
            trace: "sweep".into(),
            trace_dwell: 10,
            seed: 0,
            checkpoint_every: 50,
            update_every: 1,
            record_timing: true,
            jobs: 0,
        }
    }
}

/// Every tunable of a run. Loaded from TOML; every key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemConfig {
    pub problem: ProblemSection,
    pub constraint: ConstraintSection,
    pub kan: KanSection,
    pub ensemble: EnsembleSection,
    pub ga: GaSection,
    pub trust_region: TrustRegionSection,
    pub tracker: TrackerSection,
    pub env: EnvSection,
    pub run: RunSection,
}

impl ProblemConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ProblemConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn constraint<T: Scalar>(&self) -> Result<ChanceConstraint<T>> {
        let c = &self.constraint;
        ChanceConstraint::new(T::of(c.threshold_ms), T::of(c.epsilon), T::of(c.safety_margin))
            .map(|cc| cc.with_alpha(T::of(c.alpha0)))
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let p = &self.problem;
        if p.state_min > p.state_max || p.action_min > p.action_max {
            return bad("bounds must satisfy min <= max");
        }
        if p.action_min <= 0 {
            return bad("action_min must be positive");
        }
        self.constraint::<f64>()?;
        if self.ensemble.size < 2 {
            return bad("ensemble.size must be at least 2");
        }
        if self.kan.train_steps == 0 || self.kan.spline_order == 0 || self.kan.grid_intervals == 0 {
            return bad("kan.train_steps, spline_order and grid_intervals must be positive");
        }
        if self.kan.spline_order > crate::kan::MAX_ORDER {
            return bad("kan.spline_order too large");
        }
        if !(self.kan.latency_cap_ms > 0.0) {
            return bad("kan.latency_cap_ms must be positive");
        }
        let g = &self.ga;
        if g.population < 2 || g.tournament_size < 2 || g.tournament_size > g.population {
            return bad("ga needs population >= 2 and 2 <= tournament_size <= population");
        }
        if !(g.initial_mutation_rate > 0.0 && g.initial_mutation_rate <= 1.0) {
            return bad("ga.initial_mutation_rate must lie in (0, 1]");
        }
        if g.generations == 0 || g.tr_interval == 0 {
            return bad("ga.generations and ga.tr_interval must be positive");
        }
        let t = &self.trust_region;
        if !(t.min_radius > 0.0 && t.min_radius <= t.initial_radius && t.initial_radius <= t.max_radius) {
            return bad("trust_region needs 0 < min_radius <= initial_radius <= max_radius");
        }
        let k = &self.tracker;
        if !(k.eta_decay > 0.0 && k.eta_decay <= 1.0) || !(k.eta0 > 0.0) {
            return bad("tracker needs eta0 > 0 and eta_decay in (0, 1]");
        }
        if k.alpha_min > k.alpha_max || k.buffer_capacity == 0 {
            return bad("tracker needs alpha_min <= alpha_max and buffer_capacity > 0");
        }
        let e = &self.env;
        if e.samples_per_round == 0 || e.offline_samples == 0 {
            return bad("env.samples_per_round and env.offline_samples must be positive");
        }
        if e.state_bucket_width <= 0 || e.action_bin_width <= 0 {
            return bad("env bucket widths must be positive");
        }
        if !(e.base_latency_ms >= 0.0 && e.workload > 0.0 && e.noise_log_std >= 0.0) {
            return bad("env latency parameters out of range");
        }
        if self.run.update_every == 0 || self.run.checkpoint_every == 0 {
            return bad("run.update_every and run.checkpoint_every must be positive");
        }
        Ok(())
    }
}

//! Closed-form extraction: each edge is matched against a small library of
//! univariate forms `c * f(alpha * x + beta) + d`, then the per-edge forms are
//! composed along the layer structure.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{parse_expression, KanModel, SplineEdge};
use crate::error::Result;
use crate::linalg::least_squares;
use crate::scalar::{silu, Scalar};

/// Maximum absolute deviation tolerated between the expression and the network.
pub const FIDELITY_TOL: f64 = 0.05;
/// Candidates within this R² of the best are considered ties; the simpler wins.
const R2_TIE: f64 = 1e-6;
const FIT_SAMPLES: usize = 101;
const GRID_PER_DIM: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Candidate {
    Const,
    Linear,
    Square,
    Cube,
    Sin,
    Exp,
    Log,
    Silu,
}

impl Candidate {
    /// Library in order of increasing complexity (used for tie-breaks).
    pub const LIBRARY: [Candidate; 8] = [
        Candidate::Const,
        Candidate::Linear,
        Candidate::Square,
        Candidate::Cube,
        Candidate::Silu,
        Candidate::Sin,
        Candidate::Exp,
        Candidate::Log,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Candidate::Const => "c",
            Candidate::Linear => "x",
            Candidate::Square => "x^2",
            Candidate::Cube => "x^3",
            Candidate::Sin => "sin",
            Candidate::Exp => "exp",
            Candidate::Log => "log",
            Candidate::Silu => "silu",
        }
    }

    pub fn apply(self, u: f64) -> f64 {
        match self {
            Candidate::Const => 0.0,
            Candidate::Linear => u,
            Candidate::Square => u * u,
            Candidate::Cube => u * u * u,
            Candidate::Sin => u.sin(),
            Candidate::Exp => u.exp(),
            Candidate::Log => u.ln(),
            Candidate::Silu => silu(u),
        }
    }
}

/// `outer * f(inner_scale * x + inner_shift) + offset`, with its goodness of fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedForm {
    pub candidate: Candidate,
    pub inner_scale: f64,
    pub inner_shift: f64,
    pub outer: f64,
    pub offset: f64,
    pub r_squared: f64,
}

impl FittedForm {
    pub fn eval(&self, x: f64) -> f64 {
        match self.candidate {
            Candidate::Const => self.offset,
            c => self.outer * c.apply(self.inner_scale * x + self.inner_shift) + self.offset,
        }
    }

    fn render(&self, arg: &str) -> String {
        let inner = if self.inner_scale == 1.0 && self.inner_shift == 0.0 {
            arg.to_string()
        } else if self.inner_scale == 1.0 {
            format!("{arg} + {}", num(self.inner_shift))
        } else {
            format!("{}*{arg} + {}", num(self.inner_scale), num(self.inner_shift))
        };
        match self.candidate {
            Candidate::Const => String::new(),
            Candidate::Linear => format!("{}*({inner})", num(self.outer)),
            Candidate::Square => format!("{}*({inner})^2", num(self.outer)),
            Candidate::Cube => format!("{}*({inner})^3", num(self.outer)),
            c => format!("{}*{}({inner})", num(self.outer), c.tag()),
        }
    }
}

fn num(v: f64) -> String {
    if v.is_sign_negative() {
        format!("({v})")
    } else {
        format!("{v}")
    }
}

fn r_squared(ys: &[f64], fit: impl Fn(usize) -> f64) -> f64 {
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let sst: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = ys.iter().enumerate().map(|(i, y)| (y - fit(i)).powi(2)).sum();
    if !sse.is_finite() {
        return f64::NEG_INFINITY;
    }
    let scale = ys.iter().map(|y| y * y).sum::<f64>().max(1e-300);
    if sst <= 1e-24 * scale {
        return if sse <= 1e-20 * scale.max(1.0) { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

/// Closed-form `(c, d)` for `y ~ c * u + d`; returns `(c, d, sse)`.
fn simple_regression(us: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = us.len() as f64;
    let mu = us.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut suu, mut suy) = (0.0, 0.0);
    for (u, y) in us.iter().zip(ys) {
        suu += (u - mu) * (u - mu);
        suy += (u - mu) * (y - my);
    }
    if !(suu > 1e-300) || !suu.is_finite() {
        let sse = ys.iter().map(|y| (y - my).powi(2)).sum();
        return (0.0, my, sse);
    }
    let c = suy / suu;
    let d = my - c * mu;
    let sse = us.iter().zip(ys).map(|(u, y)| (y - c * u - d).powi(2)).sum();
    (c, d, sse)
}

/// Fits one library candidate to samples `(xs, ys)` by least squares.
/// Returns `None` when the candidate is undefined over the samples.
pub fn fit_candidate(candidate: Candidate, xs: &[f64], ys: &[f64]) -> Option<FittedForm> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let center = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(1e-12);
    let mut form = match candidate {
        Candidate::Const => FittedForm {
            candidate,
            inner_scale: 1.0,
            inner_shift: 0.0,
            outer: 0.0,
            offset: ys.iter().sum::<f64>() / ys.len() as f64,
            r_squared: 0.0,
        },
        Candidate::Linear => {
            let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
            let c = least_squares(&design, ys, 2)?;
            FittedForm {
                candidate,
                inner_scale: 1.0,
                inner_shift: 0.0,
                outer: c[1],
                offset: c[0],
                r_squared: 0.0,
            }
        }
        Candidate::Square => {
            let design: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x, x * x]).collect();
            let q = least_squares(&design, ys, 3)?;
            if q[2].abs() < 1e-12 {
                return None;
            }
            let shift = q[1] / (2.0 * q[2]);
            FittedForm {
                candidate,
                inner_scale: 1.0,
                inner_shift: shift,
                outer: q[2],
                offset: q[0] - q[2] * shift * shift,
                r_squared: 0.0,
            }
        }
        _ => fit_nonlinear(candidate, xs, ys, center, half)?,
    };
    form.r_squared = r_squared(ys, |i| form.eval(xs[i]));
    form.r_squared.is_finite().then_some(form)
}

/// Grid search over the inner affine map in standardized coordinates
/// `t = (x - center) / half`, then pattern-search refinement.
fn fit_nonlinear(candidate: Candidate, xs: &[f64], ys: &[f64], center: f64, half: f64) -> Option<FittedForm> {
    let ts: Vec<f64> = xs.iter().map(|x| (x - center) / half).collect();
    let mut us = vec![0.0; ts.len()];
    let mut objective = |a: f64, b: f64| -> Option<(f64, f64, f64)> {
        for (u, &t) in us.iter_mut().zip(&ts) {
            let arg = a * t + b;
            if candidate == Candidate::Log && arg <= 0.0 {
                return None;
            }
            *u = candidate.apply(arg);
            if !u.is_finite() {
                return None;
            }
        }
        let (c, d, sse) = simple_regression(&us, ys);
        sse.is_finite().then_some((c, d, sse))
    };
    let (a_range, b_range) = match candidate {
        Candidate::Log => ((0.05, 4.0), (0.0, 6.0)),
        Candidate::Exp => ((-3.0, 3.0), (-2.0, 2.0)),
        _ => ((-4.0, 4.0), (-4.0, 4.0)),
    };
    let steps = 32;
    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=steps {
        let a = a_range.0 + (a_range.1 - a_range.0) * i as f64 / steps as f64;
        if a.abs() < 1e-9 {
            continue;
        }
        for k in 0..=steps {
            let b = b_range.0 + (b_range.1 - b_range.0) * k as f64 / steps as f64;
            if let Some((_, _, sse)) = objective(a, b) {
                if best.is_none_or(|(_, _, s)| sse < s) {
                    best = Some((a, b, sse));
                }
            }
        }
    }
    let (mut a, mut b, mut sse) = best?;
    let mut step_a = (a_range.1 - a_range.0) / steps as f64;
    let mut step_b = (b_range.1 - b_range.0) / steps as f64;
    for _ in 0..200 {
        let mut improved = false;
        for (da, db) in [(step_a, 0.0), (-step_a, 0.0), (0.0, step_b), (0.0, -step_b)] {
            if let Some((_, _, s)) = objective(a + da, b + db) {
                if s < sse {
                    a += da;
                    b += db;
                    sse = s;
                    improved = true;
                }
            }
        }
        if !improved {
            step_a *= 0.5;
            step_b *= 0.5;
            if step_a < 1e-10 && step_b < 1e-10 {
                break;
            }
        }
    }
    let (c, d, _) = objective(a, b)?;
    // undo the standardization: a*t + b = (a/half)*x + (b - a*center/half)
    Some(FittedForm {
        candidate,
        inner_scale: a / half,
        inner_shift: b - a * center / half,
        outer: c,
        offset: d,
        r_squared: 0.0,
    })
}

/// Best library form for samples; ties within `R2_TIE` go to the simpler candidate.
fn best_form(xs: &[f64], ys: &[f64]) -> FittedForm {
    let fits: Vec<FittedForm> = Candidate::LIBRARY
        .iter()
        .filter_map(|&c| fit_candidate(c, xs, ys))
        .collect();
    let top = fits.iter().map(|f| f.r_squared).fold(f64::NEG_INFINITY, f64::max);
    *fits
        .iter()
        .find(|f| f.r_squared >= top - R2_TIE)
        .expect("constant candidate always fits")
}

/// One edge of the extracted expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeTerm {
    pub layer: usize,
    pub output: usize,
    pub input: usize,
    /// Input interval the fit was performed over.
    pub domain: (f64, f64),
    /// Best library fit (kept for reporting even when the edge is tabulated).
    pub fit: FittedForm,
    /// True when the edge is kept as the original spline.
    pub tabulated: bool,
    edge: SplineEdge<f64>,
}

impl EdgeTerm {
    pub fn eval(&self, x: f64) -> f64 {
        if self.tabulated {
            self.edge.eval(x)
        } else {
            self.fit.eval(x)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormExpr {
    pub widths: Vec<usize>,
    pub variables: Vec<String>,
    pub terms: Vec<EdgeTerm>,
    /// R² of the composed expression against the network over the check grid.
    pub r_squared: f64,
    /// Largest absolute deviation from the network over the check grid.
    pub max_abs_error: f64,
    /// False when at least one edge had to stay tabulated.
    pub symbolic: bool,
    /// Full-precision text for every output, parseable by [`parse_expression`].
    pub rendered: Vec<String>,
}

impl ClosedFormExpr {
    fn term(&self, layer: usize, output: usize, input: usize) -> &EdgeTerm {
        self.terms
            .iter()
            .find(|t| t.layer == layer && t.output == output && t.input == input)
            .expect("every edge has a term")
    }

    /// Term-wise evaluation on a normalized input.
    pub fn eval(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        for l in 0..self.widths.len() - 1 {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            cur = (0..n_out)
                .map(|j| (0..n_in).map(|p| self.term(l, j, p).eval(cur[p])).sum())
                .collect();
        }
        cur
    }

    /// Evaluates output `k` by parsing `rendered[k]`.
    pub fn eval_rendered(&self, k: usize, input: &[f64]) -> Result<f64> {
        let parsed = parse_expression(&self.rendered[k])?;
        let vars: Vec<(&str, f64)> = self.variables.iter().map(String::as_str).zip(input.iter().copied()).collect();
        parsed.eval(&vars, &|[l, j, p], x| self.term(l, j, p).edge.eval(x))
    }

    fn render_all(&mut self) {
        let mut nodes: Vec<String> = self.variables.clone();
        for l in 0..self.widths.len() - 1 {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            nodes = (0..n_out)
                .map(|j| {
                    let mut parts = Vec::new();
                    let mut constant = 0.0;
                    for (p, node) in nodes.iter().enumerate().take(n_in) {
                        let t = self.term(l, j, p);
                        let arg = if l == 0 { node.clone() } else { format!("({node})") };
                        let arg = arg.as_str();
                        if t.tabulated {
                            parts.push(format!("spline[{l},{j},{p}]({arg})"));
                        } else {
                            constant += t.fit.offset;
                            if t.fit.candidate != Candidate::Const {
                                parts.push(t.fit.render(arg));
                            }
                        }
                    }
                    if constant != 0.0 || parts.is_empty() {
                        parts.push(num(constant));
                    }
                    parts.join(" + ")
                })
                .collect();
        }
        self.rendered = nodes;
    }

    /// Compact rendering with `digits` decimals, in the style
    /// `0.0243*s - 0.4535*a - 0.2538*(s + 0.1338)^2 + 0.6791`.
    pub fn pretty(&self, digits: usize) -> Vec<String> {
        self.rendered
            .iter()
            .map(|r| {
                let mut out = String::new();
                let mut chars = r.chars().peekable();
                let mut token = String::new();
                let flush = |token: &mut String, out: &mut String| {
                    if !token.is_empty() {
                        match token.parse::<f64>() {
                            Ok(v) if token.contains('.') => {
                                let _ = write!(out, "{v:.digits$}");
                            }
                            _ => out.push_str(token),
                        }
                        token.clear();
                    }
                };
                while let Some(c) = chars.next() {
                    let starts_ident = token.is_empty()
                        && out.chars().last().is_some_and(|p| p.is_ascii_alphabetic() || p == '_');
                    if (c.is_ascii_digit() || c == '.') && !starts_ident {
                        token.push(c);
                    } else {
                        flush(&mut token, &mut out);
                        out.push(c);
                    }
                    let _ = chars.peek();
                }
                flush(&mut token, &mut out);
                out.replace("+ (-", "- (").replace("+ -", "- ")
            })
            .collect()
    }
}

fn check_points(dim: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..GRID_PER_DIM)
        .map(|i| -1.0 + 2.0 * i as f64 / (GRID_PER_DIM - 1) as f64)
        .collect();
    match dim {
        1 => axis.iter().map(|&x| vec![x]).collect(),
        2 => axis
            .iter()
            .flat_map(|&a| axis.iter().map(move |&b| vec![a, b]))
            .collect(),
        _ => {
            // quasi-random cover for wider inputs
            (0..GRID_PER_DIM * GRID_PER_DIM)
                .map(|i| {
                    (0..dim)
                        .map(|d| {
                            let g = 0.5 + (i as f64 + 1.0) * (d as f64 + 1.0) * 0.618_033_988_749_895;
                            2.0 * g.fract() - 1.0
                        })
                        .collect()
                })
                .collect()
        }
    }
}

fn default_variables(dim: usize) -> Vec<String> {
    if dim == 2 {
        vec!["a".into(), "s".into()]
    } else {
        (1..=dim).map(|i| format!("x{i}")).collect()
    }
}

/// Extracts a closed-form expression from a trained model. Edges whose
/// symbolic replacement would push the composed expression more than
/// `FIDELITY_TOL` away from the network are kept as tabulated splines,
/// lowest R² first.
pub fn extract_closed_form<T: Scalar>(model: &KanModel<T>) -> ClosedFormExpr {
    let model = to_f64(model);
    let widths = model.widths();
    let points = check_points(model.input_dim());

    // per-layer input ranges observed over the check grid
    let mut ranges: Vec<Vec<(f64, f64)>> = vec![vec![(-1.0, 1.0); widths[0]]];
    let mut acts = points.clone();
    for layer in &model.layers {
        let mut next_acts = Vec::with_capacity(acts.len());
        let mut r = vec![(f64::INFINITY, f64::NEG_INFINITY); layer.n_out];
        for a in &acts {
            let mut y = vec![0.0; layer.n_out];
            layer.forward(a, &mut y);
            for (k, v) in y.iter().enumerate() {
                r[k] = (r[k].0.min(*v), r[k].1.max(*v));
            }
            next_acts.push(y);
        }
        ranges.push(r);
        acts = next_acts;
    }
    let reference: Vec<Vec<f64>> = acts;

    let mut terms = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        for j in 0..layer.n_out {
            for p in 0..layer.n_in {
                let (mut lo, mut hi) = ranges[l][p];
                if !(hi - lo > 1e-9) {
                    lo -= 1e-3;
                    hi += 1e-3;
                }
                let edge = layer.edge(j, p).clone();
                let xs: Vec<f64> = (0..FIT_SAMPLES)
                    .map(|i| lo + (hi - lo) * i as f64 / (FIT_SAMPLES - 1) as f64)
                    .collect();
                let ys: Vec<f64> = xs.iter().map(|&x| edge.eval(x)).collect();
                terms.push(EdgeTerm {
                    layer: l,
                    output: j,
                    input: p,
                    domain: (lo, hi),
                    fit: best_form(&xs, &ys),
                    tabulated: false,
                    edge,
                });
            }
        }
    }

    let mut expr = ClosedFormExpr {
        widths,
        variables: default_variables(model.input_dim()),
        terms,
        r_squared: 0.0,
        max_abs_error: 0.0,
        symbolic: true,
        rendered: Vec::new(),
    };
    loop {
        let max_err = points
            .iter()
            .zip(&reference)
            .map(|(x, y)| {
                expr.eval(x)
                    .iter()
                    .zip(y)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        expr.max_abs_error = max_err;
        if max_err <= FIDELITY_TOL {
            break;
        }
        let worst = expr
            .terms
            .iter_mut()
            .filter(|t| !t.tabulated)
            .min_by(|a, b| a.fit.r_squared.total_cmp(&b.fit.r_squared));
        match worst {
            Some(t) => {
                t.tabulated = true;
                expr.symbolic = false;
            }
            None => break,
        }
    }
    let ys: Vec<f64> = reference.iter().map(|y| y[0]).collect();
    let preds: Vec<f64> = points.iter().map(|x| expr.eval(x)[0]).collect();
    expr.r_squared = r_squared(&ys, |i| preds[i]);
    expr.render_all();
    expr
}

fn to_f64<T: Scalar>(model: &KanModel<T>) -> KanModel<f64> {
    let text = serde_json::to_string(model).expect("model serializes");
    serde_json::from_str(&text).expect("model deserializes as f64")
}

//! Closed-loop experiments: run each controller against the plant driven by
//! the measured preview and compare tracking performance and timing.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ene::GainVariant;
use crate::error::{EneError, Result};
use crate::mene::{adapt_multi_segment, single_segment_policy, AdaptOptions, SegmentPolicy};
use crate::numerics::Vector;
use crate::ocp::{solve_nominal, NominalSolution, OcpProblem, SolveOptions, Trajectory, Violation};
use crate::model::PreviewSignal;
use crate::systems::{NominalPreview, ScenarioSpec};

/// Constraint values above this count as violations in the run log.
pub const VIOLATION_TOL: f64 = 1e-6;
/// Leading timing samples dropped as warm-up.
pub const WARMUP_SAMPLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    /// The nominal plan applied without feedback.
    Olnmpc,
    /// Shrinking-horizon re-solve at every step.
    Clnmpc,
    /// State-feedback gains only.
    Ne,
    /// State and preview feedback gains.
    Ene,
    /// State-only gains with activity-aware segmentation.
    Mne,
    /// Extended gains with activity-aware segmentation.
    Mene,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 6] = [
        ControllerKind::Olnmpc,
        ControllerKind::Clnmpc,
        ControllerKind::Ne,
        ControllerKind::Ene,
        ControllerKind::Mne,
        ControllerKind::Mene,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Olnmpc => "OLNMPC",
            ControllerKind::Clnmpc => "CLNMPC",
            ControllerKind::Ne => "NE",
            ControllerKind::Ene => "ENE",
            ControllerKind::Mne => "MNE",
            ControllerKind::Mene => "MENE",
        }
    }

    fn variant(self) -> GainVariant {
        match self {
            ControllerKind::Ne | ControllerKind::Mne => GainVariant::StateOnly,
            _ => GainVariant::Extended,
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ControllerKind {
    type Err = EneError;

    fn from_str(s: &str) -> Result<Self> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EneError::InvalidInput(format!("unknown controller '{s}'")))
    }
}

/// Per-step control computation times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median: f64,
    pub mean: f64,
    pub samples: usize,
}

impl TimingStats {
    fn from_samples(samples: &[f64]) -> Self {
        let kept = if samples.len() > WARMUP_SAMPLES {
            &samples[WARMUP_SAMPLES..]
        } else {
            samples
        };
        if kept.is_empty() {
            return Self {
                median: 0.0,
                mean: 0.0,
                samples: 0,
            };
        }
        let mut sorted = kept.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 0 {
            0.5 * (sorted[mid - 1] + sorted[mid])
        } else {
            sorted[mid]
        };
        Self {
            median,
            mean: kept.iter().sum::<f64>() / kept.len() as f64,
            samples: kept.len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: String,
    pub controller: ControllerKind,
    /// Plant states `x(0..=N)` (shorter when the run failed).
    pub x: Vec<Vector>,
    pub u: Vec<Vector>,
    /// Measured preview `w(0..=N)`.
    pub w: Vec<Vector>,
    /// Constraint values at each applied control.
    pub constraint_values: Vec<Vector>,
    /// Frobenius norm of the stacked output errors `y(k) − r`.
    pub performance: f64,
    pub timing: TimingStats,
    /// Gain or segment computation done before the loop starts.
    pub precompute_seconds: f64,
    pub violations: Vec<Violation>,
    pub segments: usize,
    pub flips: usize,
    pub failed: Option<String>,
}

impl SimResult {
    pub fn completed(&self) -> bool {
        self.failed.is_none()
    }

    /// Plot-ready table: `k, x…, u…, w…, c…`, one row per step, `u` and `c`
    /// left empty on the terminal row.
    pub fn to_csv(&self) -> String {
        let n = self.x.first().map_or(0, |v| v.len());
        let m = self.u.first().map_or(0, |v| v.len());
        let p = self.w.first().map_or(0, |v| v.len());
        let l = self.constraint_values.first().map_or(0, |v| v.len());
        let mut header = vec!["k".to_string()];
        header.extend((0..n).map(|i| format!("x{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        header.extend((0..p).map(|i| format!("w{i}")));
        header.extend((0..l).map(|i| format!("c{i}")));
        let mut out = header.join(",");
        out.push('\n');
        let cell = |v: Option<&Vector>, len: usize| -> Vec<String> {
            match v {
                Some(v) => v.iter().map(|c| format!("{c:.16e}")).collect(),
                None => vec![String::new(); len],
            }
        };
        for k in 0..self.x.len() {
            let mut row = vec![k.to_string()];
            row.extend(cell(self.x.get(k), n));
            row.extend(cell(self.u.get(k), m));
            row.extend(cell(self.w.get(k), p));
            row.extend(cell(self.constraint_values.get(k), l));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Frobenius norm of `[y(0) − r, …, y(N) − r]` with `y = [z, θ]`.
pub fn tracking_performance(states: &[Vector], reference: &Vector) -> f64 {
    states
        .iter()
        .map(|x| (ScenarioSpec::output(x) - reference).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// A scenario with its nominal solution, ready to run controllers against.
pub struct Experiment {
    pub spec: ScenarioSpec,
    pub problem: OcpProblem,
    pub nominal: NominalSolution,
    pub nominal_seconds: f64,
    /// Where the plant's preview comes from.
    pub actual_preview: PreviewSignal,
}

impl Experiment {
    /// Solve the nominal problem. Fails unless the solve reaches optimality.
    pub fn prepare(spec: &ScenarioSpec) -> Result<Self> {
        let problem = spec.problem()?;
        let start = Instant::now();
        let nominal = solve_nominal(&problem, &SolveOptions::default())?;
        let nominal_seconds = start.elapsed().as_secs_f64();
        if !nominal.is_optimal {
            return Err(EneError::SolveFailed {
                best_kkt_norm: nominal.kkt_norm,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            problem,
            nominal,
            nominal_seconds,
            actual_preview: spec.actual_preview(),
        })
    }

    /// Replace the measured preview source (the nominal model reproduces the
    /// planning assumption exactly).
    pub fn with_actual_preview(mut self, preview: PreviewSignal) -> Self {
        self.actual_preview = preview;
        self
    }

    pub fn horizon(&self) -> usize {
        self.problem.horizon
    }

    /// Initial plant state `x°(0) + δx(0)`.
    pub fn initial_state(&self) -> Vector {
        &self.problem.x0 + self.spec.initial_perturbation()
    }

    fn preview_sequence(&self) -> Result<Option<Vec<Vector>>> {
        match &self.actual_preview {
            PreviewSignal::Generator(g) => g.sequence(self.horizon() + 1).map(Some),
            _ => Ok(None),
        }
    }

    fn initial_preview(&self, measured: &Option<Vec<Vector>>) -> Vector {
        match measured {
            Some(seq) => seq[0].clone(),
            None => self.problem.w0.clone(),
        }
    }

    fn next_preview(&self, measured: &Option<Vec<Vector>>, k: usize, x: &Vector, w: &Vector) -> Vector {
        match (measured, &self.actual_preview) {
            (Some(seq), _) => seq[k + 1].clone(),
            (None, PreviewSignal::HoldConstant) => w.clone(),
            (None, _) => self.problem.model.preview(x, w),
        }
    }

    fn build_controller(&self, kind: ControllerKind, w_initial: &Vector) -> Result<(Controller, usize, usize)> {
        match kind {
            ControllerKind::Olnmpc => Ok((Controller::OpenLoop(self.nominal.trajectory.u.clone()), 0, 0)),
            ControllerKind::Clnmpc => Ok((Controller::Resolve { previous: None }, 0, 0)),
            ControllerKind::Ne | ControllerKind::Ene => {
                let policy = single_segment_policy(&self.problem, &self.nominal, kind.variant())?;
                Ok((Controller::Policy(Box::new(policy)), 1, 0))
            }
            ControllerKind::Mne | ControllerKind::Mene => {
                let dx0 = self.spec.initial_perturbation();
                let dw0 = w_initial - &self.nominal.trajectory.w[0];
                let opts = AdaptOptions {
                    variant: kind.variant(),
                    ..AdaptOptions::default()
                };
                let adapted = adapt_multi_segment(&self.problem, &self.nominal, &dx0, &dw0, &opts)?;
                let (segments, flips) = (adapted.segments.len(), adapted.flips());
                Ok((Controller::Policy(Box::new(adapted.policy)), segments, flips))
            }
        }
    }

    /// Simulate `N` steps of the plant under one controller.
    pub fn run(&self, kind: ControllerKind) -> SimResult {
        let horizon = self.horizon();
        let mut result = SimResult {
            scenario: self.spec.name.clone(),
            controller: kind,
            x: Vec::with_capacity(horizon + 1),
            u: Vec::with_capacity(horizon),
            w: Vec::with_capacity(horizon + 1),
            constraint_values: Vec::with_capacity(horizon),
            performance: 0.0,
            timing: TimingStats::from_samples(&[]),
            precompute_seconds: 0.0,
            violations: Vec::new(),
            segments: 0,
            flips: 0,
            failed: None,
        };
        let measured = match self.preview_sequence() {
            Ok(m) => m,
            Err(e) => {
                result.failed = Some(e.to_string());
                return result;
            }
        };
        let mut x = self.initial_state();
        let mut w = self.initial_preview(&measured);
        result.x.push(x.clone());
        result.w.push(w.clone());

        let start = Instant::now();
        let built = self.build_controller(kind, &w);
        result.precompute_seconds = start.elapsed().as_secs_f64();
        let mut controller = match built {
            Ok((c, segments, flips)) => {
                result.segments = segments;
                result.flips = flips;
                c
            }
            Err(e) => {
                result.failed = Some(e.to_string());
                result.performance = tracking_performance(&result.x, &self.spec.reference());
                return result;
            }
        };

        let mut samples = Vec::with_capacity(horizon);
        for k in 0..horizon {
            let start = Instant::now();
            let u = controller.control(self, k, &x, &w);
            samples.push(start.elapsed().as_secs_f64());
            let u = match u {
                Ok(u) => u,
                Err(e) => {
                    result.failed = Some(format!("step {k}: {e}"));
                    break;
                }
            };
            let c = self.problem.constraints.eval(&x, &u, &w);
            for (i, &v) in c.iter().enumerate() {
                if v > VIOLATION_TOL {
                    result.violations.push(Violation {
                        step: k,
                        constraint: i,
                        magnitude: v,
                    });
                }
            }
            let x_next = self.problem.model.dynamics(&x, &u, &w);
            let w_next = self.next_preview(&measured, k, &x, &w);
            result.u.push(u);
            result.constraint_values.push(c);
            x = x_next;
            w = w_next;
            result.x.push(x.clone());
            result.w.push(w.clone());
        }
        result.timing = TimingStats::from_samples(&samples);
        result.performance = tracking_performance(&result.x, &self.spec.reference());
        result
    }
}

enum Controller {
    OpenLoop(Vec<Vector>),
    Policy(Box<SegmentPolicy>),
    /// Last re-solve's trajectory, shifted as the next warm start.
    Resolve { previous: Option<Trajectory> },
}

impl Controller {
    fn control(&mut self, exp: &Experiment, k: usize, x: &Vector, w: &Vector) -> Result<Vector> {
        match self {
            Controller::OpenLoop(u) => Ok(u[k].clone()),
            Controller::Policy(policy) => Ok(policy.control(k, x, w)),
            Controller::Resolve { previous } => {
                let remaining = exp.horizon() - k;
                let warm = match previous.take() {
                    Some(t) => t.tail(1),
                    None => exp.nominal.trajectory.tail(k),
                };
                let problem = exp.problem.restarted(remaining, x.clone(), w.clone())?;
                let opts = SolveOptions {
                    init_reference: Some(warm),
                    ..SolveOptions::default()
                };
                let sol = solve_nominal(&problem, &opts)?;
                let u0 = sol.trajectory.u[0].clone();
                *previous = Some(sol.trajectory);
                Ok(u0)
            }
        }
    }
}

/// Run one controller on a scenario.
pub fn run_scenario(spec: &ScenarioSpec, kind: ControllerKind) -> Result<SimResult> {
    Ok(Experiment::prepare(spec)?.run(kind))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    pub performance: f64,
    pub median_step_seconds: f64,
    /// CLNMPC median step time over this controller's, when CLNMPC ran.
    pub speedup_vs_clnmpc: Option<f64>,
    pub violations: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub nominal_seconds: f64,
    pub nominal_kkt_norm: f64,
    /// Sorted by performance, ties by controller order.
    pub rows: Vec<ComparisonRow>,
    /// In the order requested.
    pub results: Vec<SimResult>,
}

impl Comparison {
    pub fn result(&self, kind: ControllerKind) -> Option<&SimResult> {
        self.results.iter().find(|r| r.controller == kind)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "## {}\n\n| Controller | Performance | Time per step (ms) | Speedup vs CLNMPC | Violations |\n|---|---|---|---|---|\n",
            self.scenario
        );
        for r in &self.rows {
            let speedup = r.speedup_vs_clnmpc.map_or("-".to_string(), |s| format!("{s:.1}x"));
            let status = if r.completed { "" } else { " (failed)" };
            out.push_str(&format!(
                "| {}{} | {:.4} | {:.4} | {} | {} |\n",
                r.controller,
                status,
                r.performance,
                r.median_step_seconds * 1e3,
                speedup,
                r.violations
            ));
        }
        out
    }
}

/// Run the controllers one after another on a shared nominal solution.
pub fn compare_controllers(spec: &ScenarioSpec, kinds: &[ControllerKind]) -> Result<Comparison> {
    let exp = Experiment::prepare(spec)?;
    Ok(compare_prepared(&exp, kinds))
}

pub fn compare_prepared(exp: &Experiment, kinds: &[ControllerKind]) -> Comparison {
    let results: Vec<SimResult> = kinds.iter().map(|&k| exp.run(k)).collect();
    let clnmpc = results
        .iter()
        .find(|r| r.controller == ControllerKind::Clnmpc && r.completed())
        .map(|r| r.timing.median);
    let mut rows: Vec<ComparisonRow> = results
        .iter()
        .map(|r| ComparisonRow {
            controller: r.controller,
            performance: r.performance,
            median_step_seconds: r.timing.median,
            speedup_vs_clnmpc: clnmpc.map(|c| c / r.timing.median.max(f64::MIN_POSITIVE)),
            violations: r.violations.len(),
            completed: r.completed(),
        })
        .collect();
    rows.sort_by(|a, b| {
        a.performance
            .total_cmp(&b.performance)
            .then(a.controller.cmp(&b.controller))
    });
    Comparison {
        scenario: exp.spec.name.clone(),
        nominal_seconds: exp.nominal_seconds,
        nominal_kkt_norm: exp.nominal.kkt_norm,
        rows,
        results,
    }
}

/// Compare controllers on several scenarios in parallel. Results keep the
/// order of `specs`.
pub fn compare_scenarios(specs: &[ScenarioSpec], kinds: &[ControllerKind]) -> Vec<Result<Comparison>> {
    specs.par_iter().map(|s| compare_controllers(s, kinds)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub model: NominalPreview,
    pub ene: SimResult,
    pub mene: SimResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario: String,
    pub entries: Vec<SweepEntry>,
    /// Index into `entries` with the lowest MENE performance.
    pub best: usize,
}

/// The two nominal preview models compared in the preview study.
pub fn standard_preview_models() -> Vec<NominalPreview> {
    vec![NominalPreview::HoldConstant, NominalPreview::default()]
}

/// Re-solve the nominal problem under each preview model and run ENE and
/// MENE against the same measured preview.
pub fn preview_model_sweep(spec: &ScenarioSpec, models: &[NominalPreview]) -> Result<SweepReport> {
    if models.is_empty() {
        return Err(EneError::InvalidInput("no preview models to compare".into()));
    }
    let entries: Vec<SweepEntry> = models
        .par_iter()
        .map(|&model| {
            let spec = ScenarioSpec {
                preview_model: model,
                ..spec.clone()
            };
            let exp = Experiment::prepare(&spec)?;
            Ok(SweepEntry {
                model,
                ene: exp.run(ControllerKind::Ene),
                mene: exp.run(ControllerKind::Mene),
            })
        })
        .collect::<Result<_>>()?;
    let best = entries
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mene.performance.total_cmp(&b.1.mene.performance))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(SweepReport {
        scenario: spec.name.clone(),
        entries,
        best,
    })
}

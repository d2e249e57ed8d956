//! Continuous-time variance approximation evaluated by quadrature over a
//! recorded trajectory.
//!
//! For `0 <= i <= j <= T` (times in grid units),
//!
//! ```text
//! Var(x_i) ~ Var(x_j)
//!          + 2 int_i^j f(t) int_i^t f(s) Var(x_s) ds dt
//!          + 2 int_i^j f(t) int_i^t f(s) Var(x_s) (int_s^t f(u) du) ds dt
//!          - 2 int_i^j f(s) g(s)^2 / sigma_s Cov(x_s, eps_s) ds
//!          + int_i^j g(s)^4 / sigma_s^2 Var(eps_s) ds
//!          + int_i^j g(s)^2 ds
//! ```
//!
//! with `f = d log alpha / dt` and `g^2 = d sigma^2 / dt - 2 f sigma^2`.
//! The trajectory only knows `Var(x_s)`, `Cov(x_s, eps_s)` and `Var(eps_s)`
//! on the grid; between grid points they are held constant at the value of
//! the later grid point, which is where the step out of that cell evaluates
//! its noise prediction.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::moments::TrajectoryRecord;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    /// Nodes at the grid points. The noise terms vanish at `t = 0`, where
    /// no prediction is consumed and `g^2 / sigma` is unbounded.
    #[default]
    Trapezoid,
    /// One node per cell at its centre.
    Midpoint,
}

impl QuadratureRule {
    pub fn name(self) -> &'static str {
        match self {
            Self::Trapezoid => "trapezoid",
            Self::Midpoint => "midpoint",
        }
    }
}

impl std::str::FromStr for QuadratureRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(Self::Trapezoid),
            "midpoint" => Ok(Self::Midpoint),
            other => Err(Error::InvalidArgument(format!("unknown quadrature rule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QuadratureConfig {
    pub rule: QuadratureRule,
}

/// Drift and diffusion rates sampled at the quadrature nodes, plus the
/// antiderivative of `f` used for the inner `int_s^t f(u) du`.
#[derive(Debug, Clone)]
pub(crate) struct Rates {
    /// Node times.
    pub tau: Vec<f64>,
    pub f: Vec<f64>,
    pub g_sq: Vec<f64>,
    /// `g^2 / sigma` at each node; zero where no noise prediction exists.
    pub g_sq_over_sigma: Vec<f64>,
    /// `int_0^tau f(u) du` at each node.
    pub big_f: Vec<f64>,
    /// Quadrature weight of each node within its own interval.
    pub weight: Vec<f64>,
    /// Grid step whose recorded moments apply at each node.
    pub step: Vec<usize>,
}

impl Rates {
    /// Nodes covering `[i, j]`. With log(alpha_bar) linear between grid
    /// points, `f = log(1 - beta_k) / 2` and `g^2 = -2 f` on cell `k`;
    /// trapezoid nodes at interior grid points average the two cells.
    pub(crate) fn new(s: &NoiseSchedule, rule: QuadratureRule, i: usize, j: usize) -> Self {
        let cell_f = |k: usize| 0.5 * (-s.beta(k)).ln_1p();
        let log_alpha = |tau: f64| 0.5 * s.log_alpha_bar_at(tau);
        let mut r = Rates {
            tau: vec![],
            f: vec![],
            g_sq: vec![],
            g_sq_over_sigma: vec![],
            big_f: vec![],
            weight: vec![],
            step: vec![],
        };
        match rule {
            QuadratureRule::Trapezoid => {
                for k in i..=j {
                    let f = match (k > i, k < j) {
                        (true, true) => 0.5 * (cell_f(k) + cell_f(k + 1)),
                        (true, false) => cell_f(k),
                        (false, true) => cell_f(k + 1),
                        (false, false) => 0.0,
                    };
                    let g_sq = -2.0 * f;
                    let sigma = s.sigma(k);
                    r.tau.push(k as f64);
                    r.f.push(f);
                    r.g_sq.push(g_sq);
                    r.g_sq_over_sigma.push(if k == 0 { 0.0 } else { g_sq / sigma });
                    r.big_f.push(log_alpha(k as f64));
                    r.weight.push(if j == i || k == i || k == j { 0.5 } else { 1.0 });
                    r.step.push(k);
                }
                if j == i {
                    r.weight[0] = 0.0;
                }
            }
            QuadratureRule::Midpoint => {
                for k in (i + 1)..=j {
                    let tau = k as f64 - 0.5;
                    let f = cell_f(k);
                    r.tau.push(tau);
                    r.f.push(f);
                    r.g_sq.push(-2.0 * f);
                    r.g_sq_over_sigma.push(-2.0 * f / s.sigma_at(tau));
                    r.big_f.push(log_alpha(tau));
                    r.weight.push(1.0);
                    r.step.push(k);
                }
            }
        }
        r
    }

    /// Weight of node `n` in an integral whose upper limit is node `m`
    /// (`n <= m`).
    fn partial_weight(&self, rule: QuadratureRule, n: usize, m: usize) -> f64 {
        match rule {
            QuadratureRule::Trapezoid => {
                if n == m && n == 0 {
                    0.0
                } else if n == 0 || n == m {
                    0.5
                } else {
                    1.0
                }
            }
            // The cell containing the upper limit contributes half a cell,
            // evaluated at its own centre.
            QuadratureRule::Midpoint => {
                if n == m {
                    0.5
                } else {
                    1.0
                }
            }
        }
    }
}

/// Per-node recorded moments.
struct Recorded {
    var: Vec<Array1<f64>>,
    cov: Vec<Array1<f64>>,
    eps_var: Vec<Array1<f64>>,
}

fn recorded(traj: &TrajectoryRecord, rates: &Rates) -> Result<Recorded> {
    let d = traj.meta.shape.len();
    let mut rec = Recorded { var: vec![], cov: vec![], eps_var: vec![] };
    for &k in &rates.step {
        let state = traj.state_at(k)?;
        rec.var.push(state.var.data().clone());
        if k == 0 {
            rec.cov.push(Array1::zeros(d));
            rec.eps_var.push(Array1::zeros(d));
        } else {
            rec.cov.push(state.cov_x_eps.data().clone());
            rec.eps_var.push(traj.step_at(k)?.eps_var.clone());
        }
    }
    Ok(rec)
}

/// The quadrature itself, on explicit rates and moments.
fn integrate(rates: &Rates, rule: QuadratureRule, rec: &Recorded, var_j: &Array1<f64>) -> Array1<f64> {
    let n = rates.tau.len();
    let mut out = var_j.clone();
    // Outer integral over t of f(t) * inner(t).
    for m in 0..n {
        let mut inner = Array1::<f64>::zeros(out.len());
        for k in 0..=m {
            let w = rates.partial_weight(rule, k, m);
            if w == 0.0 {
                continue;
            }
            let span = match rule {
                // The half cell below a midpoint node is evaluated at its
                // own centre, a quarter cell below the upper limit.
                QuadratureRule::Midpoint if k == m => 0.25 * rates.f[m],
                _ => rates.big_f[m] - rates.big_f[k],
            };
            inner.scaled_add(w * rates.f[k] * (1.0 + span), &rec.var[k]);
        }
        out.scaled_add(2.0 * rates.weight[m] * rates.f[m], &inner);
    }
    for k in 0..n {
        let w = rates.weight[k];
        let gs = rates.g_sq_over_sigma[k];
        out.scaled_add(-2.0 * w * rates.f[k] * gs, &rec.cov[k]);
        out.scaled_add(w * gs * gs, &rec.eps_var[k]);
        out += w * rates.g_sq[k];
    }
    out
}

/// `Var(x_i)` from `Var(x_j)` by the continuous-time approximation.
pub fn var_continuous(
    traj: &TrajectoryRecord,
    s: &NoiseSchedule,
    cfg: &QuadratureConfig,
    i: usize,
    j: usize,
) -> Result<PixelField> {
    let n = traj.meta.num_steps;
    if i > j || j > n {
        return Err(Error::InvalidArgument(format!("interval [{i}, {j}] outside [0, {n}]")));
    }
    if s.num_steps() != n {
        return Err(Error::InvalidArgument(format!("schedule has {} steps, trajectory {n}", s.num_steps())));
    }
    let var_j = traj.state_at(j)?.var.data().clone();
    if i == j {
        return PixelField::from_array(traj.meta.shape, var_j);
    }
    let rates = Rates::new(s, cfg.rule, i, j);
    let rec = recorded(traj, &rates)?;
    PixelField::from_array(traj.meta.shape, integrate(&rates, cfg.rule, &rec, &var_j))
}

pub const CONTINUOUS_HEADER: &str = "interval_i,interval_j,l2_rel_gap,rule";

/// Relative L2 gap between the continuous approximation and the recorded
/// discrete `Var(x_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRow {
    pub i: usize,
    pub j: usize,
    pub l2_rel_gap: f64,
    pub rule: QuadratureRule,
}

impl ContinuousRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{:e},{}", self.i, self.j, self.l2_rel_gap, self.rule.name())
    }
}

pub fn l2_rel_gap(approx: &PixelField, reference: &PixelField) -> f64 {
    let diff = approx.data() - reference.data();
    let den = reference.data().dot(reference.data()).sqrt();
    let num = diff.dot(&diff).sqrt();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub fn continuous_check(
    traj: &TrajectoryRecord,
    s: &NoiseSchedule,
    cfg: &QuadratureConfig,
    intervals: &[(usize, usize)],
) -> Result<Vec<ContinuousRow>> {
    intervals
        .iter()
        .map(|&(i, j)| {
            let approx = var_continuous(traj, s, cfg, i, j)?;
            let reference = &traj.state_at(i)?.var;
            Ok(ContinuousRow { i, j, l2_rel_gap: l2_rel_gap(&approx, reference), rule: cfg.rule })
        })
        .collect()
}

pub fn write_continuous_report(path: &Path, rows: &[ContinuousRow]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{CONTINUOUS_HEADER}")?;
    for row in rows {
        writeln!(file, "{}", row.to_csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Shape;
    use crate::moments::{run_bayesdiff, BayesDiffConfig, SamplerKind, VarianceInit};
    use crate::predictor::AffineScoreModel;
    use ndarray::array;

    fn trajectory(steps: usize) -> (TrajectoryRecord, NoiseSchedule) {
        let s = NoiseSchedule::linear_rescaled(steps).unwrap();
        let m =
            AffineScoreModel::new(Shape::flat(2), s.clone(), array![0.3, -0.2], array![0.2, 0.5], array![0.01, 0.02])
                .unwrap();
        let x = PixelField::new(Shape::flat(2), vec![0.4, -0.7]).unwrap();
        let cfg = BayesDiffConfig::new(SamplerKind::EulerSde, 8, 1).with_var_init(VarianceInit::Unconditional);
        let (_, rec) = run_bayesdiff(&x, &m, &s, &cfg).unwrap();
        (rec, s)
    }

    #[test]
    fn empty_interval_returns_start_variance() {
        let (rec, s) = trajectory(20);
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::Midpoint] {
            for t in [0, 7, 20] {
                let v = var_continuous(&rec, &s, &QuadratureConfig { rule }, t, t).unwrap();
                assert_eq!(v, rec.state_at(t).unwrap().var);
            }
        }
    }

    #[test]
    fn frozen_dynamics_leave_variance_unchanged() {
        let (rec, s) = trajectory(10);
        for rule in [QuadratureRule::Trapezoid, QuadratureRule::Midpoint] {
            let mut rates = Rates::new(&s, rule, 2, 9);
            let n = rates.tau.len();
            rates.f = vec![0.0; n];
            rates.g_sq = vec![0.0; n];
            rates.g_sq_over_sigma = vec![0.0; n];
            rates.big_f = vec![0.0; n];
            let r = recorded(&rec, &rates).unwrap();
            let start = rec.state_at(9).unwrap().var.data().clone();
            assert_eq!(integrate(&rates, rule, &r, &start), start);
        }
    }

    #[test]
    fn rejects_bad_intervals() {
        let (rec, s) = trajectory(10);
        let cfg = QuadratureConfig::default();
        assert!(var_continuous(&rec, &s, &cfg, 5, 4).is_err());
        assert!(var_continuous(&rec, &s, &cfg, 0, 11).is_err());
        let other = NoiseSchedule::linear_rescaled(12).unwrap();
        assert!(var_continuous(&rec, &other, &cfg, 0, 10).is_err());
    }

    #[test]
    fn report_rows() {
        let (rec, s) = trajectory(10);
        let rows = continuous_check(&rec, &s, &QuadratureConfig::default(), &[(0, 10), (5, 5)]).unwrap();
        assert_eq!(rows[1].l2_rel_gap, 0.0);
        assert!(rows[0].l2_rel_gap.is_finite());
        assert!(rows[0].to_csv().ends_with(",trapezoid"));
    }
}

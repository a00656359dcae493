//! Maximum (penalized) pairwise likelihood estimation of a dependence field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dependence_model::DependenceField;
use crate::error::{numeric, Result};
use crate::likelihood::{penalty_value, PairSet, PairwiseData, ParamMap, PenaltyPower, PenaltySpec};
use crate::scalar::Real;
use crate::simulator::MaximaPanel;
use crate::spatial_domain::{Partition, SiteSet};

/// Smoothing constant of the L1 surrogate `sqrt(x^2 + eps)`.
pub const L1_SMOOTHING: f64 = 1e-8;

/// Optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Number of starts: the initial point plus jittered copies.
    pub n_starts: usize,
    pub seed: u64,
    /// Standard deviation of the start jitter on the log scale.
    pub start_sd: f64,
    pub max_iter: usize,
    /// Relative objective change required for convergence.
    pub ftol: f64,
    /// Gradient sup-norm required for convergence, on the objective scaled
    /// per pair and time.
    pub gtol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { n_starts: 3, seed: 0, start_sd: 0.1, max_iter: 500, ftol: 1e-8, gtol: 1e-5 }
    }
}

/// Outcome of a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub field_hat: DependenceField<T>,
    /// Pairwise log-likelihood at the estimate.
    pub pl_value: T,
    /// `pl_value` minus the exact fused penalty.
    pub ppl_value: T,
    pub converged: bool,
    pub n_evals: usize,
    pub condition_flag: Option<String>,
}

/// Fits the field for `partition` under `spec`. Without `init`, starts from
/// the stationary fit replicated over the subregions.
pub fn fit<T: Real>(
    panel: &MaximaPanel<T>,
    pairs: &PairSet,
    sites: &SiteSet<T>,
    partition: &Partition,
    spec: &PenaltySpec<T>,
    init: Option<&DependenceField<T>>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let data = PairwiseData::new(panel, pairs, sites)?;
    fit_data(&data, partition, spec, init, opts)
}

/// Stationary fit (one region, two parameters).
pub fn fit_stationary<T: Real>(
    panel: &MaximaPanel<T>,
    pairs: &PairSet,
    sites: &SiteSet<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let data = PairwiseData::new(panel, pairs, sites)?;
    fit_stationary_data(&data, opts)
}

/// Default stationary starting point: unit sill and range equal to the
/// squared median pair distance.
pub fn stationary_start<T: Real>(data: &PairwiseData<T>) -> DependenceField<T> {
    let m = data.median_distance().max(T::lit(1e-12));
    DependenceField::new(vec![T::zero()], vec![(m * m).ln()]).expect("finite start")
}

pub fn fit_stationary_data<T: Real>(data: &PairwiseData<T>, opts: &FitOptions) -> Result<FitResult<T>> {
    let part = Partition::single(data.n_sites());
    let start = stationary_start(data);
    fit_data(data, &part, &PenaltySpec::stationary(PenaltyPower::L2), Some(&start), opts)
}

/// Fit against prepared pair data.
pub fn fit_data<T: Real>(
    data: &PairwiseData<T>,
    partition: &Partition,
    spec: &PenaltySpec<T>,
    init: Option<&DependenceField<T>>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    if partition.n_sites() != data.n_sites() {
        return Err(crate::error::invalid("partition does not match the data"));
    }
    let r = partition.n_regions();
    let init = match init {
        Some(f) => {
            f.check_partition(partition)?;
            f.clone()
        }
        None => {
            let st = fit_stationary_data(data, opts)?;
            DependenceField::new(vec![st.field_hat.psi1()[0]; r], vec![st.field_hat.psi2()[0]; r])?
        }
    };
    let map = ParamMap::new(r, spec);
    let sizes: Vec<T> = partition.region_sizes().iter().map(|&n| T::lit(n as f64)).collect();
    let theta0: Vec<f64> = map.contract_field(&init, &sizes).iter().map(|v| v.f64()).collect();
    let objective = Objective { data, partition, spec, map, scale: 1.0 / (data.n_times() * data.n_pairs()) as f64 };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let jitter = Normal::new(0.0, opts.start_sd.max(0.0)).map_err(|e| numeric(e.to_string()))?;
    let mut best: Option<Run> = None;
    let mut n_evals = 0;
    let mut last_err = None;
    for s in 0..opts.n_starts.max(1) {
        let start: Vec<f64> = if s == 0 {
            theta0.clone()
        } else {
            theta0.iter().map(|v| v + jitter.sample(&mut rng)).collect()
        };
        match bfgs(|x| objective.eval(x).ok(), start, opts) {
            Ok(run) => {
                n_evals += run.n_evals;
                if best.as_ref().is_none_or(|b| run.f < b.f) {
                    best = Some(run);
                }
            }
            Err(e) => {
                log::debug!("start {s} aborted: {e}");
                last_err = Some(e);
            }
        }
    }
    let Some(best) = best else {
        return Err(last_err.unwrap_or_else(|| numeric("no start succeeded")));
    };
    let theta: Vec<T> = best.x.iter().map(|v| T::lit(*v)).collect();
    let (psi1, psi2) = map.expand(&theta);
    let field_hat = DependenceField::new(psi1, psi2)?;
    let pl_value = data.loglik(partition.labels(), field_hat.psi1(), field_hat.psi2(), false)?.value;
    let pen = penalty_value(&field_hat, partition, spec)?;
    let condition_flag = (!best.converged).then(|| best.note.clone());
    Ok(FitResult { field_hat, pl_value, ppl_value: pl_value - pen, converged: best.converged, n_evals, condition_flag })
}

struct Objective<'a, T> {
    data: &'a PairwiseData<T>,
    partition: &'a Partition,
    spec: &'a PenaltySpec<T>,
    map: ParamMap,
    scale: f64,
}

impl<T: Real> Objective<'_, T> {
    /// Negative scaled PPL with the smoothed penalty, and its gradient.
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let theta: Vec<T> = x.iter().map(|v| T::lit(*v)).collect();
        let (psi1, psi2) = self.map.expand(&theta);
        let ll = self.data.loglik(self.partition.labels(), &psi1, &psi2, true)?;
        let r = self.map.n_regions;
        let mut value = ll.value.f64();
        let mut grad: Vec<f64> = ll.grad.iter().map(|g| g.f64()).collect();
        for (c, lam) in [(0usize, self.spec.lambda1), (1, self.spec.lambda2)] {
            let shared = if c == 0 { self.map.shared1 } else { self.map.shared2 };
            let Some(l) = lam.value() else { continue };
            let l = l.f64();
            if shared || l == 0.0 {
                continue;
            }
            let psi = if c == 0 { &psi1 } else { &psi2 };
            for &(a, b) in self.partition.adjacency() {
                let diff = (psi[a] - psi[b]).f64();
                let (p, dp) = match self.spec.q {
                    PenaltyPower::L1 => {
                        let s = (diff * diff + L1_SMOOTHING).sqrt();
                        (s, diff / s)
                    }
                    PenaltyPower::L2 => (diff * diff, 2.0 * diff),
                };
                value -= l * p;
                grad[c * r + a] -= l * dp;
                grad[c * r + b] += l * dp;
            }
        }
        let g = self.map.contract_grad(&grad);
        let f = -value * self.scale;
        if !f.is_finite() {
            return Err(numeric("objective is not finite"));
        }
        Ok((f, g.iter().map(|v| -v * self.scale).collect()))
    }
}

pub(crate) struct Run {
    pub x: Vec<f64>,
    pub f: f64,
    pub converged: bool,
    pub n_evals: usize,
    pub note: String,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Quasi-Newton minimization with a strong Wolfe line search.
pub(crate) fn bfgs(
    mut objective: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    opts: &FitOptions,
) -> Result<Run> {
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64]| -> Option<(f64, Vec<f64>)> {
        evals += 1;
        objective(x).filter(|(f, g)| f.is_finite() && g.iter().all(|v| v.is_finite()))
    };
    let Some((mut f, mut g)) = eval(&x0) else {
        return Err(numeric("objective not finite at the starting point"));
    };
    let mut x = x0;
    let mut h = identity(n);
    let mut scaled = false;
    let mut converged = false;
    let mut note = String::from("iteration limit reached");
    let mut resets = 0;
    for _ in 0..opts.max_iter {
        let mut d: Vec<f64> = (0..n).map(|i| -dot(&h[i], &g)).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n);
            scaled = false;
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let alpha0 = if scaled { 1.0 } else { (1.0 / sup_norm(&g).max(1e-300)).min(1.0) };
        match line_search(&mut eval, &x, f, slope, &d, alpha0) {
            Some((alpha, fnew, gnew)) => {
                let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
                let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
                let rel = (f - fnew).abs() / f.abs().max(1.0);
                x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
                f = fnew;
                g = gnew;
                if rel < opts.ftol && sup_norm(&g) < opts.gtol {
                    converged = true;
                    break;
                }
                let sy = dot(&s, &y);
                if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
                    if !scaled {
                        let gamma = sy / dot(&y, &y);
                        h = identity(n);
                        h.iter_mut().enumerate().for_each(|(i, row)| row[i] = gamma);
                        scaled = true;
                    }
                    bfgs_update(&mut h, &s, &y, sy);
                }
                resets = 0;
            }
            None => {
                if sup_norm(&g) < opts.gtol {
                    converged = true;
                    break;
                }
                if resets == 0 && scaled {
                    h = identity(n);
                    scaled = false;
                    resets += 1;
                    continue;
                }
                note = format!("line search failed with gradient norm {:.3e}", sup_norm(&g));
                break;
            }
        }
    }
    Ok(Run { x, f, converged, n_evals: evals, note })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Inverse-Hessian update `H <- (I - rho s y') H (I - rho y s') + rho s s'`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

type Eval<'e> = dyn FnMut(&[f64]) -> Option<(f64, Vec<f64>)> + 'e;

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong Wolfe line search; non-finite trial points count as failures of
/// the sufficient-decrease condition.
fn line_search(
    eval: &mut Eval<'_>,
    x: &[f64],
    f0: f64,
    slope0: f64,
    d: &[f64],
    alpha0: f64,
) -> Option<(f64, f64, Vec<f64>)> {
    let at = |a: f64| -> Vec<f64> { x.iter().zip(d).map(|(xi, di)| xi + a * di).collect() };
    let mut probe = |a: f64, eval: &mut Eval<'_>| -> (f64, f64, Vec<f64>) {
        match eval(&at(a)) {
            Some((f, g)) => {
                let s = dot(&g, d);
                (f, s, g)
            }
            None => (f64::INFINITY, f64::NAN, Vec::new()),
        }
    };
    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut s_prev = slope0;
    let mut a = alpha0;
    for i in 0..30 {
        let (fa, sa, ga) = probe(a, eval);
        if !(fa <= f0 + C1 * a * slope0) || (i > 0 && fa >= f_prev) {
            return zoom(eval, &mut probe, f0, slope0, (a_prev, f_prev, s_prev), (a, fa));
        }
        if sa.abs() <= -C2 * slope0 {
            return Some((a, fa, ga));
        }
        if sa >= 0.0 {
            return zoom(eval, &mut probe, f0, slope0, (a, fa, sa), (a_prev, f_prev));
        }
        a_prev = a;
        f_prev = fa;
        s_prev = sa;
        a *= 2.0;
    }
    None
}

fn zoom(
    eval: &mut Eval<'_>,
    probe: &mut dyn FnMut(f64, &mut Eval<'_>) -> (f64, f64, Vec<f64>),
    f0: f64,
    slope0: f64,
    lo: (f64, f64, f64),
    hi: (f64, f64),
) -> Option<(f64, f64, Vec<f64>)> {
    let (mut a_lo, mut f_lo, mut s_lo) = lo;
    let (mut a_hi, mut f_hi) = hi;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for _ in 0..40 {
        // Quadratic interpolation from (a_lo, f_lo, s_lo) and (a_hi, f_hi),
        // safeguarded into the middle of the bracket.
        let width = a_hi - a_lo;
        let mut a = if f_hi.is_finite() {
            let denom = 2.0 * (f_hi - f_lo - s_lo * width);
            if denom > 0.0 {
                a_lo - s_lo * width * width / denom
            } else {
                a_lo + 0.5 * width
            }
        } else {
            a_lo + 0.5 * width
        };
        let (lo_b, hi_b) = (a_lo.min(a_hi), a_lo.max(a_hi));
        let margin = 0.1 * (hi_b - lo_b);
        if !(a > lo_b + margin && a < hi_b - margin) {
            a = 0.5 * (a_lo + a_hi);
        }
        let (fa, sa, ga) = probe(a, eval);
        if !(fa <= f0 + C1 * a * slope0) || fa >= f_lo {
            a_hi = a;
            f_hi = fa;
        } else {
            if sa.abs() <= -C2 * slope0 {
                return Some((a, fa, ga));
            }
            best = Some((a, fa, ga));
            if sa * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a;
            f_lo = fa;
            s_lo = sa;
        }
        if (a_hi - a_lo).abs() < 1e-16 * a_lo.abs().max(1.0) {
            break;
        }
    }
    // Accept a sufficient decrease without the curvature condition.
    best.filter(|b| b.1 < f0)
}

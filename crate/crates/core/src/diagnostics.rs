//! Marginal standardization and goodness-of-fit summaries.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::dependence_model::{extremal_coefficient, variogram, DependenceField};
use crate::error::{data_err, invalid, Result};
use crate::estimator::{bfgs, FitOptions};
use crate::scalar::Real;
use crate::simulator::{MaximaPanel, Scale};
use crate::spatial_domain::{Partition, SiteSet};

/// Average ranks (1-based) of `x`; ties share the mean of their positions.
pub fn average_ranks<T: Real>(x: &[T]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).expect("finite values"));
    let mut ranks = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && x[idx[e + 1]] == x[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        idx[k..=e].iter().for_each(|&i| ranks[i] = r);
        k = e + 1;
    }
    ranks
}

/// Empirical CDF values `rank / (T + 1)`.
pub fn empirical_cdf<T: Real>(x: &[T]) -> Vec<f64> {
    let n1 = (x.len() + 1) as f64;
    average_ranks(x).into_iter().map(|r| r / n1).collect()
}

/// Per-site rank transform to unit Fréchet margins, `z = -1 / ln(r / (T + 1))`.
pub fn rank_to_frechet<T: Real>(panel: &MaximaPanel<T>) -> Result<MaximaPanel<T>> {
    let (nt, ns) = (panel.n_times(), panel.n_sites());
    if nt < 10 {
        return Err(invalid(format!("rank transform needs at least 10 times, got {nt}")));
    }
    let cols: Vec<Vec<T>> = (0..ns)
        .into_par_iter()
        .map(|i| {
            let col = panel.column(i);
            if col.iter().all(|v| *v == col[0]) {
                return Err(data_err(format!("site column {} is constant", i + 1)));
            }
            Ok(empirical_cdf(&col).into_iter().map(|u| T::lit(-1.0 / u.ln())).collect())
        })
        .collect::<Result<_>>()?;
    let mut values = vec![T::zero(); nt * ns];
    for (i, c) in cols.iter().enumerate() {
        for (t, v) in c.iter().enumerate() {
            values[t * ns + i] = *v;
        }
    }
    MaximaPanel::new(values, nt, ns, Scale::UnitFrechet)
}

/// Largest gap between the empirical CDF of `u` and the uniform CDF.
pub fn ks_distance<T: Real>(u: &[T]) -> T {
    let mut v: Vec<f64> = u.iter().map(|x| x.f64()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len() as f64;
    let d = v.iter().enumerate().fold(0.0f64, |m, (k, x)| {
        let c = x.clamp(0.0, 1.0);
        m.max((k as f64 + 1.0) / n - c).max(c - k as f64 / n)
    });
    T::lit(d)
}

/// Asymptotic two-sided critical value of the KS distance.
pub fn ks_critical_value(n: usize, alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt() / (n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GevParams<T> {
    pub mu: T,
    pub varsigma: T,
    pub xi: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GevFit<T> {
    pub params: GevParams<T>,
    /// The likelihood search failed and the moment estimates were kept.
    pub fallback: bool,
}

const XI_BOUND: f64 = 0.5;

/// Probability-weighted-moment estimates, with the shape clamped inside
/// the search interval.
pub fn gev_pwm<T: Real>(x: &[T]) -> Result<GevParams<T>> {
    let n = x.len();
    if n < 3 {
        return Err(invalid("need at least three values"));
    }
    let mut v: Vec<f64> = x.iter().map(|a| a.f64()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let nf = n as f64;
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (i, xi) in v.iter().enumerate() {
        let i = i as f64;
        b0 += xi;
        b1 += i / (nf - 1.0) * xi;
        b2 += i * (i - 1.0) / ((nf - 1.0) * (nf - 2.0)) * xi;
    }
    b0 /= nf;
    b1 /= nf;
    b2 /= nf;
    let l2 = 2.0 * b1 - b0;
    if !(l2 > 0.0) {
        return Err(data_err("series has no spread"));
    }
    let c = l2 / (3.0 * b2 - b0) - 2f64.ln() / 3f64.ln();
    let k = (7.859 * c + 2.9554 * c * c).clamp(-0.49, 0.49);
    let (mu, sc) = if k.abs() < 1e-6 {
        let sc = l2 / 2f64.ln();
        (b0 - 0.577_215_664_901_532_9 * sc, sc)
    } else {
        let g = libm::tgamma(1.0 + k);
        let sc = l2 * k / (g * (1.0 - 2f64.powf(-k)));
        (b0 + sc * (g - 1.0) / k, sc)
    };
    Ok(GevParams { mu: T::lit(mu), varsigma: T::lit(sc), xi: T::lit(-k) })
}

/// Log density and its gradient in `(mu, varsigma, xi)`; `None` outside
/// the support.
fn gev_logpdf_grad(x: f64, mu: f64, sc: f64, xi: f64) -> Option<(f64, [f64; 3])> {
    let y = (x - mu) / sc;
    if xi.abs() < 1e-6 {
        let e = (-y).exp();
        let dxi = -y + y * y / 2.0 - e * y * y / 2.0;
        let l = -sc.ln() - y - e + xi * dxi;
        let dy = -1.0 + e;
        return Some((l, [-dy / sc, -1.0 / sc - dy * y / sc, dxi]));
    }
    let t = 1.0 + xi * y;
    if !(t > 0.0) {
        return None;
    }
    let s = t.ln();
    let a = (-s / xi).exp();
    let l = -sc.ln() - (1.0 + 1.0 / xi) * s - a;
    let core = (1.0 + xi - a) / (sc * t);
    let dxi = (1.0 - a) * s / (xi * xi) - (y / t) * ((1.0 + 1.0 / xi) - a / xi);
    Some((l, [core, -1.0 / sc + y * core, dxi]))
}

/// Maximum likelihood GEV fit with the shape restricted to `[-0.5, 0.5]`,
/// started from the moment estimates.
pub fn fit_gev_site<T: Real>(series: &[T]) -> Result<GevFit<T>> {
    if series.len() < 20 {
        return Err(invalid(format!("GEV fit needs at least 20 values, got {}", series.len())));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(data_err("non-finite value in series"));
    }
    let pwm = gev_pwm(series)?;
    // Work on data standardized by the moment estimates so the search is
    // equivariant under affine changes of the data.
    let (m0, s0) = (pwm.mu.f64(), pwm.varsigma.f64());
    let data: Vec<f64> = series.iter().map(|v| (v.f64() - m0) / s0).collect();
    let n = data.len() as f64;
    let objective = |th: &[f64]| -> Option<(f64, Vec<f64>)> {
        let (mu, sc) = (th[0], th[1].exp());
        let th2 = th[2].tanh();
        let xi = XI_BOUND * th2;
        let mut f = 0.0;
        let mut g = [0.0; 3];
        for &x in &data {
            let (l, d) = gev_logpdf_grad(x, mu, sc, xi)?;
            f -= l;
            g[0] -= d[0];
            g[1] -= d[1] * sc;
            g[2] -= d[2] * XI_BOUND * (1.0 - th2 * th2);
        }
        Some((f / n, g.iter().map(|v| v / n).collect()))
    };
    let xi0 = (pwm.xi.f64() / XI_BOUND).clamp(-0.98, 0.98);
    let mut x0 = vec![0.0, 0.0, xi0.atanh()];
    // Widen the scale until every observation lies inside the support.
    for _ in 0..60 {
        if objective(&x0).is_some() {
            break;
        }
        x0[1] += 0.5f64.ln().abs();
    }
    let opts = FitOptions { max_iter: 500, ftol: 1e-12, gtol: 1e-9, ..FitOptions::default() };
    // A stalled line search close to the optimum still counts as a fit.
    let accept = |run: &crate::estimator::Run| {
        run.x.iter().all(|v| v.is_finite())
            && (run.converged || objective(&run.x).is_some_and(|(_, g)| g.iter().all(|v| v.abs() < 1e-6)))
    };
    match bfgs(objective, x0, &opts) {
        Ok(run) if accept(&run) => Ok(GevFit {
            params: GevParams {
                mu: T::lit(m0 + s0 * run.x[0]),
                varsigma: T::lit(s0 * run.x[1].exp()),
                xi: T::lit(XI_BOUND * run.x[2].tanh()),
            },
            fallback: false,
        }),
        _ => {
            log::warn!("GEV likelihood search did not converge; keeping moment estimates");
            Ok(GevFit { params: pwm, fallback: true })
        }
    }
}

/// Maps GEV data to unit Fréchet, `z = (1 + xi (x - mu) / varsigma)^(1/xi)`.
pub fn gev_to_frechet<T: Real>(x: T, p: &GevParams<T>) -> Result<T> {
    let y = (x - p.mu) / p.varsigma;
    if p.xi.abs() < T::lit(1e-12) {
        return Ok(y.exp());
    }
    let t = T::one() + p.xi * y;
    if !(t > T::zero()) {
        return Err(data_err("value outside the GEV support"));
    }
    Ok(t.powf(T::one() / p.xi))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremalCoefficientEstimate<T> {
    pub pair: (usize, usize),
    pub theta_hat: T,
    pub nu_hat: T,
    /// The raw estimate fell outside `[1, 2]`.
    pub truncated: bool,
}

fn madogram_from_cdfs(fi: &[f64], fj: &[f64]) -> (f64, f64, bool) {
    let nu = fi.iter().zip(fj).map(|(a, b)| (a - b).abs()).sum::<f64>() / (2.0 * fi.len() as f64);
    let raw = (1.0 + 2.0 * nu) / (1.0 - 2.0 * nu);
    let theta = raw.clamp(1.0, 2.0);
    (nu, theta, theta != raw)
}

/// F-madogram estimate of the pairwise extremal coefficient from empirical
/// CDFs, truncated to `[1, 2]`.
pub fn f_madogram<T: Real>(panel: &MaximaPanel<T>, i: usize, j: usize) -> Result<ExtremalCoefficientEstimate<T>> {
    if panel.n_times() < 10 {
        return Err(invalid("madogram needs at least 10 times"));
    }
    if i >= panel.n_sites() || j >= panel.n_sites() {
        return Err(invalid("site index out of range"));
    }
    let fi = empirical_cdf(&panel.column(i));
    let fj = empirical_cdf(&panel.column(j));
    let (nu, theta, truncated) = madogram_from_cdfs(&fi, &fj);
    Ok(ExtremalCoefficientEstimate { pair: (i, j), theta_hat: T::lit(theta), nu_hat: T::lit(nu), truncated })
}

/// One row of the model-versus-empirical extremal coefficient table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtremalRow<T> {
    pub i: usize,
    pub j: usize,
    pub distance: T,
    pub theta_model: T,
    pub theta_empirical: T,
    /// Shared stratum of both sites, if any.
    pub stratum: Option<usize>,
}

/// Model and empirical extremal coefficients for the given pairs.
pub fn extremal_table<T: Real>(
    panel: &MaximaPanel<T>,
    sites: &SiteSet<T>,
    partition: &Partition,
    field: &DependenceField<T>,
    pairs: &[(usize, usize)],
    strata: Option<&[usize]>,
) -> Result<Vec<ExtremalRow<T>>> {
    if panel.n_sites() != sites.len() || partition.n_sites() != sites.len() {
        return Err(invalid("panel, sites and partition disagree on the number of sites"));
    }
    if panel.n_times() < 10 {
        return Err(invalid("madogram needs at least 10 times"));
    }
    if strata.is_some_and(|s| s.len() != sites.len()) {
        return Err(invalid("strata must label every site"));
    }
    field.check_partition(partition)?;
    let cdfs: Vec<Vec<f64>> = (0..panel.n_sites()).into_par_iter().map(|i| empirical_cdf(&panel.column(i))).collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let g = field.geometry(partition, sites.coord(i), sites.coord(j), i, j);
            let theta_model = extremal_coefficient(variogram(&g))?;
            let (_, theta, _) = madogram_from_cdfs(&cdfs[i], &cdfs[j]);
            let stratum = strata.and_then(|s| (s[i] == s[j]).then_some(s[i]));
            Ok(ExtremalRow { i, j, distance: sites.distance(i, j), theta_model, theta_empirical: T::lit(theta), stratum })
        })
        .collect()
}

pub fn write_extremal_csv<T: Real>(rows: &[ExtremalRow<T>], path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "i,j,distance,theta_model,theta_empirical,stratum")?;
    for r in rows {
        let st = r.stratum.map(|s| (s + 1).to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{},{},{}", r.i + 1, r.j + 1, r.distance, r.theta_model, r.theta_empirical, st)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadReport<T> {
    /// `(stratum, MAD, number of pairs)` for strata with at least two sites.
    pub per_stratum: Vec<(usize, T, usize)>,
    pub total: T,
    pub n_pairs: usize,
}

/// Mean absolute difference between model and empirical extremal
/// coefficients, within each stratum and over all pairs.
pub fn mad_extremal<T: Real>(
    panel: &MaximaPanel<T>,
    sites: &SiteSet<T>,
    partition: &Partition,
    field: &DependenceField<T>,
    strata: &[usize],
) -> Result<MadReport<T>> {
    if strata.len() != sites.len() {
        return Err(invalid("strata must label every site"));
    }
    let n = sites.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let rows = extremal_table(panel, sites, partition, field, &pairs, Some(strata))?;
    Ok(mad_from_rows(&rows, strata))
}

/// MAD summary of an already computed table.
pub fn mad_from_rows<T: Real>(rows: &[ExtremalRow<T>], strata: &[usize]) -> MadReport<T> {
    let n_strata = strata.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_strata];
    strata.iter().for_each(|&s| counts[s] += 1);
    let mut sums = vec![0.0f64; n_strata];
    let mut npairs = vec![0usize; n_strata];
    let mut total = 0.0;
    for r in rows {
        let d = (r.theta_model - r.theta_empirical).abs().f64();
        total += d;
        if let Some(s) = r.stratum {
            sums[s] += d;
            npairs[s] += 1;
        }
    }
    let mut per_stratum = Vec::new();
    for s in 0..n_strata {
        if counts[s] < 2 {
            if counts[s] == 1 {
                log::warn!("stratum {} has a single site and is skipped", s + 1);
            }
            continue;
        }
        if npairs[s] > 0 {
            per_stratum.push((s, T::lit(sums[s] / npairs[s] as f64), npairs[s]));
        }
    }
    let total = if rows.is_empty() { T::zero() } else { T::lit(total / rows.len() as f64) };
    MadReport { per_stratum, total, n_pairs: rows.len() }
}

/// `sqrt(mean over experiments of mean over sites of squared error)`.
pub fn int_rmse<T: Real>(fitted: &[Vec<T>], truth: &[T]) -> Result<T> {
    if fitted.is_empty() || fitted.iter().any(|f| f.len() != truth.len()) || truth.is_empty() {
        return Err(invalid("every fitted surface must match the truth in length"));
    }
    let mut acc = 0.0;
    for f in fitted {
        acc += f.iter().zip(truth).map(|(a, b)| (*a - *b).f64().powi(2)).sum::<f64>() / truth.len() as f64;
    }
    Ok(T::lit((acc / fitted.len() as f64).sqrt()))
}

/// Per-experiment root mean squared error over regions.
pub fn rmse_subregion<T: Real>(estimates: &[Vec<T>], truth: &[T]) -> Result<Vec<T>> {
    if truth.is_empty() || estimates.iter().any(|e| e.len() != truth.len()) {
        return Err(invalid("estimates must have one value per region"));
    }
    Ok(estimates
        .iter()
        .map(|e| {
            let s = e.iter().zip(truth).map(|(a, b)| (*a - *b).f64().powi(2)).sum::<f64>();
            T::lit((s / truth.len() as f64).sqrt())
        })
        .collect())
}

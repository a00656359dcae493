//! Nonstationary exponential correlation, variogram and the bivariate
//! Brown-Resnick exponent function with its derivatives.

use std::path::Path;

use crate::error::{data_err, invalid, numeric, Result};
use crate::scalar::{ln_norm_pdf, norm_cdf, norm_cdf_with_ln, Real};
use crate::spatial_domain::Partition;

/// Below this variogram value the pair is treated as completely dependent.
pub const GAMMA_DEPENDENCE_LIMIT: f64 = 1e-12;
/// Above this variogram value the pair is treated as independent.
pub const GAMMA_INDEPENDENCE_LIMIT: f64 = 1e8;

/// Per-subregion log-sill `psi1 = ln sigma^2` and log-range `psi2 = ln phi`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependenceField<T> {
    psi1: Vec<T>,
    psi2: Vec<T>,
}

impl<T: Real> DependenceField<T> {
    pub fn new(psi1: Vec<T>, psi2: Vec<T>) -> Result<Self> {
        if psi1.len() != psi2.len() || psi1.is_empty() {
            return Err(invalid("psi1 and psi2 must be non-empty and of equal length"));
        }
        if psi1.iter().chain(&psi2).any(|v| !v.is_finite()) {
            return Err(invalid("dependence parameters must be finite"));
        }
        Ok(Self { psi1, psi2 })
    }

    /// Builds a field from natural-scale sills and ranges.
    pub fn from_natural(sigma2: &[T], phi: &[T]) -> Result<Self> {
        if sigma2.iter().chain(phi).any(|v| !(*v > T::zero())) {
            return Err(invalid("sill and range must be positive"));
        }
        Self::new(sigma2.iter().map(|v| v.ln()).collect(), phi.iter().map(|v| v.ln()).collect())
    }

    /// The same `(sigma2, phi)` in each of `r` regions.
    pub fn constant(r: usize, sigma2: T, phi: T) -> Result<Self> {
        Self::from_natural(&vec![sigma2; r], &vec![phi; r])
    }

    pub fn n_regions(&self) -> usize {
        self.psi1.len()
    }

    pub fn psi1(&self) -> &[T] {
        &self.psi1
    }

    pub fn psi2(&self) -> &[T] {
        &self.psi2
    }

    pub fn sigma2(&self, r: usize) -> T {
        self.psi1[r].exp()
    }

    pub fn phi(&self, r: usize) -> T {
        self.psi2[r].exp()
    }

    /// Checks that the field indexes the regions of `partition`.
    pub fn check_partition(&self, partition: &Partition) -> Result<()> {
        if self.n_regions() != partition.n_regions() {
            return Err(invalid(format!(
                "field has {} regions but the partition has {}",
                self.n_regions(),
                partition.n_regions()
            )));
        }
        Ok(())
    }

    /// Per-site `(sigma2, phi)` surface.
    pub fn site_params(&self, partition: &Partition) -> Result<Vec<(T, T)>> {
        self.check_partition(partition)?;
        Ok(partition.labels().iter().map(|&r| (self.sigma2(r), self.phi(r))).collect())
    }

    /// Writes `region,sigma2,phi,psi1,psi2` with 1-based regions.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["region", "sigma2", "phi", "psi1", "psi2"])?;
        for r in 0..self.n_regions() {
            w.write_record([
                (r + 1).to_string(),
                self.sigma2(r).to_string(),
                self.phi(r).to_string(),
                self.psi1[r].to_string(),
                self.psi2[r].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a field table with regions `1..R` in order. Log-scale columns
    /// are used when present, otherwise `sigma2` and `phi`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let h = rd.headers()?.clone();
        let col = |name: &str| h.iter().position(|c| c.trim() == name);
        let region = col("region").ok_or_else(|| data_err("field table needs a region column"))?;
        let (a, b, log_scale) = match (col("psi1"), col("psi2"), col("sigma2"), col("phi")) {
            (Some(a), Some(b), _, _) => (a, b, true),
            (_, _, Some(a), Some(b)) => (a, b, false),
            _ => return Err(data_err("field table needs psi1,psi2 or sigma2,phi columns")),
        };
        let (mut p1, mut p2) = (Vec::new(), Vec::new());
        for (k, rec) in rd.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let get = |c: usize| rec.get(c).ok_or_else(|| data_err(format!("line {line}: missing column")));
            let r: usize = get(region)?.trim().parse().map_err(|_| data_err(format!("line {line}: bad region")))?;
            if r != k + 1 {
                return Err(data_err(format!("line {line}: regions must be listed as 1..R in order")));
            }
            let x: T = crate::spatial_domain::parse_real(get(a)?, line)?;
            let y: T = crate::spatial_domain::parse_real(get(b)?, line)?;
            if log_scale {
                p1.push(x);
                p2.push(y);
            } else {
                if !(x > T::zero() && y > T::zero()) {
                    return Err(data_err(format!("line {line}: sill and range must be positive")));
                }
                p1.push(x.ln());
                p2.push(y.ln());
            }
        }
        Self::new(p1, p2).map_err(|e| data_err(e.to_string()))
    }

    /// Pair geometry for sites `i`, `j` at coordinates `si`, `sj`.
    pub fn geometry(&self, partition: &Partition, si: [T; 2], sj: [T; 2], i: usize, j: usize) -> PairGeometry<T> {
        let (ri, rj) = (partition.label(i), partition.label(j));
        PairGeometry {
            site_i: si,
            site_j: sj,
            sigma2_i: self.sigma2(ri),
            sigma2_j: self.sigma2(rj),
            phi_i: self.phi(ri),
            phi_j: self.phi(rj),
        }
    }
}

/// Two sites with their local sill and range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry<T> {
    pub site_i: [T; 2],
    pub site_j: [T; 2],
    pub sigma2_i: T,
    pub sigma2_j: T,
    pub phi_i: T,
    pub phi_j: T,
}

impl<T: Real> PairGeometry<T> {
    pub fn separation(&self) -> T {
        (self.site_i[0] - self.site_j[0]).hypot(self.site_i[1] - self.site_j[1])
    }
}

/// `||s_i - s_j|| / sqrt((phi_i + phi_j) / 2)`.
pub fn mahalanobis_distance<T: Real>(g: &PairGeometry<T>) -> T {
    g.separation() / ((g.phi_i + g.phi_j) * T::lit(0.5)).sqrt()
}

/// Locally isotropic nonstationary exponential correlation.
pub fn nonstationary_correlation<T: Real>(g: &PairGeometry<T>) -> T {
    correlation_from_h(g.separation(), g.phi_i, g.phi_j)
}

#[inline]
pub(crate) fn correlation_from_h<T: Real>(h: T, phi_i: T, phi_j: T) -> T {
    let s = phi_i + phi_j;
    let prefactor = T::lit(2.0) * (phi_i * phi_j).sqrt() / s;
    prefactor * (-h / (s * T::lit(0.5)).sqrt()).exp()
}

/// Semivariogram `gamma = (sigma_i^2 + sigma_j^2 - 2 sigma_i sigma_j rho) / 2`.
pub fn variogram<T: Real>(g: &PairGeometry<T>) -> T {
    let rho = nonstationary_correlation(g);
    let v = T::lit(0.5) * (g.sigma2_i + g.sigma2_j) - (g.sigma2_i * g.sigma2_j).sqrt() * rho;
    v.max(T::zero())
}

/// Semivariogram and its derivatives with respect to
/// `(psi1_i, psi2_i, psi1_j, psi2_j)`.
#[inline]
pub(crate) fn variogram_with_grad<T: Real>(h: T, s2i: T, s2j: T, phi_i: T, phi_j: T) -> (T, [T; 4]) {
    let half = T::lit(0.5);
    let s = phi_i + phi_j;
    let d = h / (s * half).sqrt();
    let rho = T::lit(2.0) * (phi_i * phi_j).sqrt() / s * (-d).exp();
    let c = (s2i * s2j).sqrt() * rho;
    let gamma = (half * (s2i + s2j) - c).max(T::zero());
    let dlnrho = |phi_own: T| half - phi_own / s + d * phi_own / (T::lit(2.0) * s);
    (
        gamma,
        [half * (s2i - c), -c * dlnrho(phi_i), half * (s2j - c), -c * dlnrho(phi_j)],
    )
}

/// `theta = 2 Phi(sqrt(2 gamma) / 2)`.
pub fn extremal_coefficient<T: Real>(gamma: T) -> Result<T> {
    if !(gamma >= T::zero()) {
        return Err(invalid(format!("variogram value {gamma} is negative")));
    }
    if gamma == T::infinity() {
        return Ok(T::lit(2.0));
    }
    Ok(T::lit(2.0) * norm_cdf((T::lit(2.0) * gamma).sqrt() * T::lit(0.5)))
}

fn check_args<T: Real>(zi: T, zj: T, gamma: T) -> Result<()> {
    if !(zi > T::zero()) || !(zj > T::zero()) || !zi.is_finite() || !zj.is_finite() {
        return Err(invalid(format!("maxima must be positive and finite, got ({zi}, {zj})")));
    }
    if !(gamma >= T::zero()) {
        return Err(invalid(format!("variogram value {gamma} is negative")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Regime {
    Dependent,
    Independent,
    Interior,
}

fn regime<T: Real>(gamma: T) -> Regime {
    if gamma.f64() < GAMMA_DEPENDENCE_LIMIT {
        Regime::Dependent
    } else if gamma.f64() > GAMMA_INDEPENDENCE_LIMIT {
        Regime::Independent
    } else {
        Regime::Interior
    }
}

/// `(a, w1, w2)` with `a = sqrt(2 gamma)`, `w1 = a/2 + ln(zj/zi)/a`,
/// `w2 = a - w1`.
#[inline]
fn arguments<T: Real>(zi: T, zj: T, gamma: T) -> (T, T, T) {
    let a = (T::lit(2.0) * gamma).sqrt();
    let k = (zj / zi).ln();
    let w1 = a * T::lit(0.5) + k / a;
    let w2 = a * T::lit(0.5) - k / a;
    (a, w1, w2)
}

/// Bivariate exponent function `V(z_i, z_j)`.
pub fn exponent_v<T: Real>(zi: T, zj: T, gamma: T) -> Result<T> {
    check_args(zi, zj, gamma)?;
    Ok(match regime(gamma) {
        Regime::Dependent => T::one() / zi.min(zj),
        Regime::Independent => T::one() / zi + T::one() / zj,
        Regime::Interior => {
            let (_, w1, w2) = arguments(zi, zj, gamma);
            norm_cdf(w1) / zi + norm_cdf(w2) / zj
        }
    })
}

/// `(dV/dz_i, dV/dz_j, d^2V/dz_i dz_j)`.
///
/// At complete dependence the first partials are those of `1/min` (one-sided
/// at `z_i = z_j`) and the mixed partial is zero away from the diagonal.
pub fn exponent_partials<T: Real>(zi: T, zj: T, gamma: T) -> Result<(T, T, T)> {
    check_args(zi, zj, gamma)?;
    Ok(match regime(gamma) {
        Regime::Dependent => {
            if zi <= zj {
                (-T::one() / (zi * zi), T::zero(), T::zero())
            } else {
                (T::zero(), -T::one() / (zj * zj), T::zero())
            }
        }
        Regime::Independent => (-T::one() / (zi * zi), -T::one() / (zj * zj), T::zero()),
        Regime::Interior => {
            let (a, w1, w2) = arguments(zi, zj, gamma);
            let vi = -norm_cdf(w1) / (zi * zi);
            let vj = -norm_cdf(w2) / (zj * zj);
            let vij = -ln_norm_pdf(w1).exp() / (a * zi * zi * zj);
            (vi, vj, vij)
        }
    })
}

/// Bivariate log density `ln(V_i V_j - V_ij) - V` of a unit Frechet
/// Brown-Resnick pair.
pub fn pair_log_density<T: Real>(zi: T, zj: T, gamma: T) -> Result<T> {
    check_args(zi, zj, gamma)?;
    if regime(gamma) == Regime::Dependent {
        return Err(numeric(format!(
            "bivariate density undefined at complete dependence (z_i={zi}, z_j={zj}, gamma={gamma})"
        )));
    }
    let (l, _) = log_density_and_dgamma(zi, zj, gamma);
    if !l.is_finite() {
        return Err(numeric(format!("non-finite log density at (z_i={zi}, z_j={zj}, gamma={gamma})")));
    }
    Ok(l)
}

/// Log density and its derivative in `gamma`, given `gamma >=` the
/// dependence limit. Works in log space so that the result stays finite
/// where the density itself underflows.
#[inline]
pub(crate) fn log_density_and_dgamma<T: Real>(zi: T, zj: T, gamma: T) -> (T, T) {
    let (lx, ly) = (zi.ln(), zj.ln());
    if regime(gamma) == Regime::Independent {
        return (-T::lit(2.0) * (lx + ly) - zi.recip() - zj.recip(), T::zero());
    }
    let (a, w1, w2) = arguments(zi, zj, gamma);
    let (p1, lp1) = norm_cdf_with_ln(w1);
    let (p2, lp2) = norm_cdf_with_ln(w2);
    let ld1 = ln_norm_pdf(w1);
    let ld2 = ln_norm_pdf(w2);
    let two = T::lit(2.0);
    let ln_a_term = lp1 + lp2 - two * (lx + ly);
    let ln_b_term = ld1 - a.ln() - two * lx - ly;
    let hi = ln_a_term.max(ln_b_term);
    let ln_n = hi + ((ln_a_term - hi).exp() + (ln_b_term - hi).exp()).ln();
    let v = p1 / zi + p2 / zj;
    let l = ln_n - v;

    let fa = (ln_a_term - ln_n).exp();
    let fb = (ln_b_term - ln_n).exp();
    let m1 = (ld1 - lp1).exp();
    let m2 = (ld2 - lp2).exp();
    let dl_da = (fa * (m1 * w2 + m2 * w1) - fb * (w1 * w2 + T::one())) / a - (ld1 - lx).exp();
    (l, dl_da / a)
}

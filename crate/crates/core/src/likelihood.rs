//! Pair selection, the pairwise log-likelihood and its gradient, fused
//! penalties, sandwich information matrices and CLIC/CBIC.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dependence_model::{log_density_and_dgamma, variogram_with_grad, DependenceField, GAMMA_DEPENDENCE_LIMIT};
use crate::error::{data_err, invalid, numeric, Error, Result};
use crate::linalg::{cholesky, cholesky_solve, symmetric_pinv, Matrix};
use crate::scalar::{KahanSum, Real};
use crate::simulator::{MaximaPanel, Scale};
use crate::spatial_domain::{check_header, Partition, SiteSet};

/// How a pair set was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairScheme {
    All,
    Simple,
    Stratified,
}

impl PairScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(Self::All),
            "simple" => Ok(Self::Simple),
            "stratified" => Ok(Self::Stratified),
            other => Err(invalid(format!("unknown pair scheme {other:?}"))),
        }
    }
}

/// Sorted, duplicate-free site pairs `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
    pub scheme: PairScheme,
    pub fraction: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl PairSet {
    /// Validates and canonicalizes an explicit pair list.
    pub fn from_pairs(n_sites: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut v = Vec::with_capacity(pairs.len());
        for (i, j) in pairs {
            if i == j || i >= n_sites || j >= n_sites {
                return Err(invalid(format!("invalid pair ({i}, {j}) for {n_sites} sites")));
            }
            v.push((i.min(j), i.max(j)));
        }
        v.sort_unstable();
        let before = v.len();
        v.dedup();
        if v.len() != before {
            return Err(invalid("pair list contains duplicates"));
        }
        if v.is_empty() {
            return Err(invalid("pair set is empty"));
        }
        Ok(Self { pairs: v, scheme: PairScheme::All, fraction: 1.0, n_classes: 1, seed: 0 })
    }

    /// Every pair of `n_sites` sites.
    pub fn all(n_sites: usize) -> Result<Self> {
        Self::from_pairs(n_sites, all_pairs(n_sites))
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `i,j` with 1-based site positions.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j"])?;
        for (i, j) in &self.pairs {
            w.write_record([(i + 1).to_string(), (j + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>, n_sites: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        check_header(rdr.headers()?, &["i", "j"])?;
        let mut pairs = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let p = |s: &str| -> Result<usize> {
                match s.trim().parse::<usize>() {
                    Ok(v) if v >= 1 => Ok(v - 1),
                    _ => Err(data_err(format!("pairs line {}: bad index {s:?}", line + 2))),
                }
            };
            pairs.push((p(&rec[0])?, p(&rec[1])?));
        }
        Self::from_pairs(n_sites, pairs)
    }
}

pub(crate) fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            v.push((i, j));
        }
    }
    v
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("pair fraction {fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Uniform sample without replacement of `round(fraction * |pool|)` pairs.
pub(crate) fn sample_pool_simple(pool: &[(usize, usize)], fraction: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    check_fraction(fraction)?;
    let n = (fraction * pool.len() as f64).round() as usize;
    if n == 0 {
        return Err(invalid(format!("fraction {fraction} of {} pairs selects none", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<_> = index::sample(&mut rng, pool.len(), n).into_iter().map(|k| pool[k]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Equal-length distance classes over `[min, max]`; the same fraction (at
/// least one pair) drawn from each non-empty class.
pub(crate) fn sample_pool_stratified<T: Real>(
    sites: &SiteSet<T>,
    pool: &[(usize, usize)],
    fraction: f64,
    n_classes: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    check_fraction(fraction)?;
    if n_classes == 0 {
        return Err(invalid("need at least one distance class"));
    }
    if pool.is_empty() {
        return Err(invalid("no pairs to sample from"));
    }
    let dist: Vec<f64> = pool.iter().map(|&(i, j)| sites.distance(i, j).f64()).collect();
    let lo = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_classes as f64;
    let mut classes: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_classes];
    for (p, h) in pool.iter().zip(&dist) {
        let c = if width > 0.0 { (((h - lo) / width).floor() as usize).min(n_classes - 1) } else { 0 };
        classes[c].push(*p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (c, members) in classes.iter().enumerate() {
        if members.is_empty() {
            log::warn!("distance class {} is empty and was skipped", c + 1);
            continue;
        }
        let n = ((fraction * members.len() as f64).round() as usize).max(1);
        out.extend(index::sample(&mut rng, members.len(), n).into_iter().map(|k| members[k]));
    }
    out.sort_unstable();
    Ok(out)
}

/// Simple random sample of site pairs.
pub fn sample_pairs_simple(n_sites: usize, fraction: f64, seed: u64) -> Result<PairSet> {
    let pairs = sample_pool_simple(&all_pairs(n_sites), fraction, seed)?;
    let mut p = PairSet::from_pairs(n_sites, pairs)?;
    p.scheme = if fraction == 1.0 { PairScheme::All } else { PairScheme::Simple };
    p.fraction = fraction;
    p.seed = seed;
    Ok(p)
}

/// Distance-stratified sample of site pairs.
pub fn sample_pairs_stratified<T: Real>(sites: &SiteSet<T>, fraction: f64, n_classes: usize, seed: u64) -> Result<PairSet> {
    let pairs = sample_pool_stratified(sites, &all_pairs(sites.len()), fraction, n_classes, seed)?;
    let mut p = PairSet::from_pairs(sites.len(), pairs)?;
    p.scheme = PairScheme::Stratified;
    p.fraction = fraction;
    p.n_classes = n_classes;
    p.seed = seed;
    Ok(p)
}

/// A penalty weight: finite and nonnegative, or the infinite marker that
/// forces equal parameters across subregions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda<T> {
    Finite(T),
    Infinite,
}

impl<T: Real> Lambda<T> {
    pub fn finite(v: T) -> Result<Self> {
        if !(v >= T::zero()) || !v.is_finite() {
            return Err(invalid(format!("penalty weight {v} must be finite and nonnegative")));
        }
        Ok(Self::Finite(v))
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }

    pub fn value(&self) -> Option<T> {
        match self {
            Self::Finite(v) => Some(*v),
            Self::Infinite => None,
        }
    }

    /// Total order with the infinite marker on top.
    pub fn gt(&self, other: &Self) -> bool {
        match (self, other) {
            (Self::Infinite, Self::Infinite) => false,
            (Self::Infinite, _) => true,
            (_, Self::Infinite) => false,
            (Self::Finite(a), Self::Finite(b)) => a > b,
        }
    }
}

impl<T: Real> std::fmt::Display for Lambda<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Finite(v) => write!(f, "{v}"),
            Self::Infinite => write!(f, "inf"),
        }
    }
}

/// Exponent of the fused penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PenaltyPower {
    L1,
    L2,
}

impl PenaltyPower {
    pub fn from_q(q: u32) -> Result<Self> {
        match q {
            1 => Ok(Self::L1),
            2 => Ok(Self::L2),
            _ => Err(invalid(format!("penalty exponent must be 1 or 2, got {q}"))),
        }
    }

    pub fn q(self) -> u32 {
        match self {
            Self::L1 => 1,
            Self::L2 => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltySpec<T> {
    pub lambda1: Lambda<T>,
    pub lambda2: Lambda<T>,
    pub q: PenaltyPower,
}

impl<T: Real> PenaltySpec<T> {
    pub fn new(lambda1: Lambda<T>, lambda2: Lambda<T>, q: PenaltyPower) -> Self {
        Self { lambda1, lambda2, q }
    }

    pub fn zero(q: PenaltyPower) -> Self {
        Self::new(Lambda::Finite(T::zero()), Lambda::Finite(T::zero()), q)
    }

    pub fn stationary(q: PenaltyPower) -> Self {
        Self::new(Lambda::Infinite, Lambda::Infinite, q)
    }
}

/// `sum_k lambda_k sum_{r1~r2} |psi_k,r1 - psi_k,r2|^q`.
pub fn fused_penalty<T: Real>(field: &DependenceField<T>, partition: &Partition, spec: &PenaltySpec<T>) -> Result<T> {
    if spec.lambda1.is_infinite() || spec.lambda2.is_infinite() {
        return Err(Error::Contract("an infinite penalty weight cannot be evaluated arithmetically".into()));
    }
    penalty_value(field, partition, spec)
}

/// As [`fused_penalty`], with infinite weights contributing zero (their
/// coordinates are equal across subregions by construction).
pub fn penalty_value<T: Real>(field: &DependenceField<T>, partition: &Partition, spec: &PenaltySpec<T>) -> Result<T> {
    field.check_partition(partition)?;
    let mut total = T::zero();
    for (lam, psi) in [(spec.lambda1, field.psi1()), (spec.lambda2, field.psi2())] {
        let Some(l) = lam.value() else { continue };
        if l == T::zero() {
            continue;
        }
        let mut s = KahanSum::new();
        for &(a, b) in partition.adjacency() {
            let diff = (psi[a] - psi[b]).abs();
            s.add(match spec.q {
                PenaltyPower::L1 => diff,
                PenaltyPower::L2 => diff * diff,
            });
        }
        total += l * s.value();
    }
    Ok(total)
}

/// Map from free optimization coordinates to per-region `(psi1, psi2)`.
/// A coordinate with an infinite penalty weight is one shared parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMap {
    pub n_regions: usize,
    pub shared1: bool,
    pub shared2: bool,
}

impl ParamMap {
    pub fn new<T: Real>(n_regions: usize, spec: &PenaltySpec<T>) -> Self {
        Self { n_regions, shared1: spec.lambda1.is_infinite() || n_regions == 1, shared2: spec.lambda2.is_infinite() || n_regions == 1 }
    }

    pub fn full(n_regions: usize) -> Self {
        Self { n_regions, shared1: n_regions == 1, shared2: n_regions == 1 }
    }

    fn len1(&self) -> usize {
        if self.shared1 {
            1
        } else {
            self.n_regions
        }
    }

    fn len2(&self) -> usize {
        if self.shared2 {
            1
        } else {
            self.n_regions
        }
    }

    pub fn n_free(&self) -> usize {
        self.len1() + self.len2()
    }

    pub fn expand<T: Real>(&self, theta: &[T]) -> (Vec<T>, Vec<T>) {
        let r = self.n_regions;
        let (a, b) = theta.split_at(self.len1());
        let psi1 = if self.shared1 { vec![a[0]; r] } else { a.to_vec() };
        let psi2 = if self.shared2 { vec![b[0]; r] } else { b.to_vec() };
        (psi1, psi2)
    }

    /// Free coordinates of `field`; shared coordinates take the
    /// region-weighted mean.
    pub fn contract_field<T: Real>(&self, field: &DependenceField<T>, weights: &[T]) -> Vec<T> {
        let wmean = |psi: &[T]| {
            let tot: T = weights.iter().copied().sum();
            psi.iter().zip(weights).map(|(p, w)| *p * *w).sum::<T>() / tot
        };
        let mut theta = Vec::with_capacity(self.n_free());
        if self.shared1 {
            theta.push(wmean(field.psi1()));
        } else {
            theta.extend_from_slice(field.psi1());
        }
        if self.shared2 {
            theta.push(wmean(field.psi2()));
        } else {
            theta.extend_from_slice(field.psi2());
        }
        theta
    }

    /// Chain rule from a region gradient `[d/dpsi1 (R), d/dpsi2 (R)]`.
    pub fn contract_grad<T: Real>(&self, g: &[T]) -> Vec<T> {
        let r = self.n_regions;
        let mut out = Vec::with_capacity(self.n_free());
        if self.shared1 {
            out.push(g[..r].iter().copied().sum());
        } else {
            out.extend_from_slice(&g[..r]);
        }
        if self.shared2 {
            out.push(g[r..].iter().copied().sum());
        } else {
            out.extend_from_slice(&g[r..]);
        }
        out
    }
}

const PAIR_CHUNK: usize = 64;

/// Panel and pair geometry prepared for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct PairwiseData<T> {
    n_times: usize,
    n_sites: usize,
    pairs: Vec<(usize, usize)>,
    h: Vec<T>,
    z: Vec<T>,
}

/// Value and gradient of the pairwise log-likelihood over regions.
#[derive(Debug, Clone)]
pub struct LogLik<T> {
    pub value: T,
    /// `[d/dpsi1_r for r in 0..R, d/dpsi2_r for r in 0..R]`.
    pub grad: Vec<T>,
}

impl<T: Real> PairwiseData<T> {
    pub fn new(panel: &MaximaPanel<T>, pairs: &PairSet, sites: &SiteSet<T>) -> Result<Self> {
        if panel.scale() != Scale::UnitFrechet {
            return Err(data_err("the pairwise likelihood needs a unit Frechet panel"));
        }
        if panel.n_sites() != sites.len() {
            return Err(invalid("panel and sites differ in size"));
        }
        for t in 0..panel.n_times() {
            for (i, v) in panel.row(t).iter().enumerate() {
                if !(*v > T::zero()) {
                    return Err(data_err(format!("nonpositive maximum at time {}, site {}", t + 1, i + 1)));
                }
            }
        }
        if let Some(&(_, j)) = pairs.pairs().iter().find(|&&(_, j)| j >= sites.len()) {
            return Err(invalid(format!("pair references site {} beyond {}", j + 1, sites.len())));
        }
        Ok(Self {
            n_times: panel.n_times(),
            n_sites: panel.n_sites(),
            pairs: pairs.pairs().to_vec(),
            h: pairs.pairs().iter().map(|&(i, j)| sites.distance(i, j)).collect(),
            z: panel.values().to_vec(),
        })
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Median pair separation.
    pub fn median_distance(&self) -> T {
        let mut h: Vec<T> = self.h.clone();
        h.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let n = h.len();
        if n % 2 == 1 {
            h[n / 2]
        } else {
            (h[n / 2 - 1] + h[n / 2]) * T::lit(0.5)
        }
    }

    /// Pair variogram and its region derivatives.
    #[inline]
    fn pair_gamma(&self, k: usize, labels: &[usize], psi1: &[T], psi2: &[T]) -> (usize, usize, T, [T; 4]) {
        let (i, j) = self.pairs[k];
        let (ri, rj) = (labels[i], labels[j]);
        let (g, dg) = variogram_with_grad(self.h[k], psi1[ri].exp(), psi1[rj].exp(), psi2[ri].exp(), psi2[rj].exp());
        (ri, rj, g, dg)
    }

    fn gamma_error(&self, k: usize, gamma: T) -> Error {
        let (i, j) = self.pairs[k];
        numeric(format!("variogram {gamma} between sites {} and {} is at the complete-dependence limit", i + 1, j + 1))
    }

    fn density_error(&self, t: usize, k: usize, gamma: T) -> Error {
        let (i, j) = self.pairs[k];
        let zi = self.z[t * self.n_sites + i];
        let zj = self.z[t * self.n_sites + j];
        numeric(format!("non-finite pair log density at (z_i={zi}, z_j={zj}, gamma={gamma})"))
    }

    /// Pairwise log-likelihood and its gradient over region parameters.
    pub fn loglik(&self, labels: &[usize], psi1: &[T], psi2: &[T], with_grad: bool) -> Result<LogLik<T>> {
        let r = psi1.len();
        let d = self.n_sites;
        let chunks: Vec<Result<(T, Vec<T>)>> = (0..self.pairs.len().div_ceil(PAIR_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = KahanSum::new();
                let mut grad = if with_grad { vec![T::zero(); 2 * r] } else { Vec::new() };
                for k in c * PAIR_CHUNK..((c + 1) * PAIR_CHUNK).min(self.pairs.len()) {
                    let (ri, rj, gamma, dg) = self.pair_gamma(k, labels, psi1, psi2);
                    if gamma.f64() < GAMMA_DEPENDENCE_LIMIT {
                        return Err(self.gamma_error(k, gamma));
                    }
                    let (i, j) = self.pairs[k];
                    let mut dsum = KahanSum::new();
                    for t in 0..self.n_times {
                        let (l, dl) = log_density_and_dgamma(self.z[t * d + i], self.z[t * d + j], gamma);
                        if !l.is_finite() || !dl.is_finite() {
                            return Err(self.density_error(t, k, gamma));
                        }
                        acc.add(l);
                        dsum.add(dl);
                    }
                    if with_grad {
                        let s = dsum.value();
                        grad[ri] += s * dg[0];
                        grad[r + ri] += s * dg[1];
                        grad[rj] += s * dg[2];
                        grad[r + rj] += s * dg[3];
                    }
                }
                Ok((acc.value(), grad))
            })
            .collect();
        let mut value = KahanSum::new();
        let mut grad = vec![KahanSum::new(); if with_grad { 2 * r } else { 0 }];
        for c in chunks {
            let (v, g) = c?;
            value.add(v);
            for (a, x) in grad.iter_mut().zip(g) {
                a.add(x);
            }
        }
        Ok(LogLik { value: value.value(), grad: grad.iter().map(KahanSum::value).collect() })
    }

    /// Per-time scores `d l_t / d psi` as a `T x 2R` matrix.
    pub fn time_scores(&self, labels: &[usize], psi1: &[T], psi2: &[T]) -> Result<Matrix<T>> {
        let r = psi1.len();
        let p = 2 * r;
        let d = self.n_sites;
        let nt = self.n_times;
        let chunks: Vec<Result<Vec<T>>> = (0..self.pairs.len().div_ceil(PAIR_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut s = vec![T::zero(); nt * p];
                for k in c * PAIR_CHUNK..((c + 1) * PAIR_CHUNK).min(self.pairs.len()) {
                    let (ri, rj, gamma, dg) = self.pair_gamma(k, labels, psi1, psi2);
                    if gamma.f64() < GAMMA_DEPENDENCE_LIMIT {
                        return Err(self.gamma_error(k, gamma));
                    }
                    let (i, j) = self.pairs[k];
                    for t in 0..nt {
                        let (l, dl) = log_density_and_dgamma(self.z[t * d + i], self.z[t * d + j], gamma);
                        if !l.is_finite() || !dl.is_finite() {
                            return Err(self.density_error(t, k, gamma));
                        }
                        let row = &mut s[t * p..(t + 1) * p];
                        row[ri] += dl * dg[0];
                        row[r + ri] += dl * dg[1];
                        row[rj] += dl * dg[2];
                        row[r + rj] += dl * dg[3];
                    }
                }
                Ok(s)
            })
            .collect();
        let mut out = Matrix::zeros(nt, p);
        for c in chunks {
            let s = c?;
            for t in 0..nt {
                for q in 0..p {
                    out[(t, q)] += s[t * p + q];
                }
            }
        }
        Ok(out)
    }
}

/// Sum over times and pairs of the bivariate log density.
pub fn pairwise_loglik<T: Real>(
    panel: &MaximaPanel<T>,
    pairs: &PairSet,
    sites: &SiteSet<T>,
    partition: &Partition,
    field: &DependenceField<T>,
) -> Result<T> {
    field.check_partition(partition)?;
    let data = PairwiseData::new(panel, pairs, sites)?;
    Ok(data.loglik(partition.labels(), field.psi1(), field.psi2(), false)?.value)
}

/// Pairwise log-likelihood minus the fused penalty.
pub fn penalized_loglik<T: Real>(
    panel: &MaximaPanel<T>,
    pairs: &PairSet,
    sites: &SiteSet<T>,
    partition: &Partition,
    field: &DependenceField<T>,
    spec: &PenaltySpec<T>,
) -> Result<T> {
    let pen = fused_penalty(field, partition, spec)?;
    Ok(pairwise_loglik(panel, pairs, sites, partition, field)? - pen)
}

/// Sensitivity `J`, variability `K` and `tr(J^-1 K)`.
#[derive(Debug, Clone)]
pub struct SandwichInfo<T> {
    pub j: Matrix<T>,
    pub k: Matrix<T>,
    pub trace_jinv_k: T,
    /// Set when `J` was not positive definite and a pseudo-inverse was used.
    pub condition_flag: Option<String>,
}

/// Step used for the central-difference Hessian, per log-parameter.
pub const HESSIAN_STEP: f64 = 1e-4;

/// Sandwich matrices in the free coordinates of `map`.
pub fn sandwich_mapped<T: Real>(
    data: &PairwiseData<T>,
    labels: &[usize],
    field: &DependenceField<T>,
    map: &ParamMap,
) -> Result<SandwichInfo<T>> {
    let weights = vec![T::one(); map.n_regions];
    let theta = map.contract_field(field, &weights);
    let p = theta.len();
    let grad_at = |th: &[T]| -> Result<Vec<T>> {
        let (a, b) = map.expand(th);
        Ok(map.contract_grad(&data.loglik(labels, &a, &b, true)?.grad))
    };
    let step = T::lit(HESSIAN_STEP);
    let mut hess = Matrix::zeros(p, p);
    for c in 0..p {
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[c] += step;
        dn[c] -= step;
        let (gu, gd) = (grad_at(&up)?, grad_at(&dn)?);
        for rr in 0..p {
            hess[(rr, c)] = -(gu[rr] - gd[rr]) / (T::lit(2.0) * step);
        }
    }
    let j = hess.symmetrized();

    let (a, b) = map.expand(&theta);
    let raw = data.time_scores(labels, &a, &b)?;
    let nt = raw.rows();
    let scores: Vec<Vec<T>> = (0..nt).map(|t| map.contract_grad(raw.row(t))).collect();
    let mut mean = vec![T::zero(); p];
    for u in &scores {
        for (m, x) in mean.iter_mut().zip(u) {
            *m += *x / T::lit(nt as f64);
        }
    }
    let mut k = Matrix::zeros(p, p);
    let denom = T::lit((nt.max(2) - 1) as f64);
    for u in &scores {
        for a1 in 0..p {
            for b1 in 0..p {
                k[(a1, b1)] += (u[a1] - mean[a1]) * (u[b1] - mean[b1]);
            }
        }
    }
    let scale = T::lit(nt as f64) / denom;
    for a1 in 0..p {
        for b1 in 0..p {
            k[(a1, b1)] *= scale;
        }
    }
    let k = k.symmetrized();

    let (trace, condition_flag) = match cholesky(&j) {
        Ok(l) => {
            let mut tr = T::zero();
            for c in 0..p {
                let col: Vec<T> = (0..p).map(|r| k[(r, c)]).collect();
                tr += cholesky_solve(&l, &col)[c];
            }
            (tr, None)
        }
        Err(_) => {
            let pinv = symmetric_pinv(&j, T::lit(1e-10));
            let (eig, _) = crate::linalg::symmetric_eigen(&j);
            let top = eig.iter().fold(T::zero(), |m, e| m.max(e.abs()));
            let low = eig.iter().fold(T::infinity(), |m, e| m.min(e.abs()));
            let cond = if low > T::zero() { top / low } else { T::infinity() };
            (pinv.matmul(&k).trace(), Some(format!("J not positive definite (condition number {cond}); pseudo-inverse used")))
        }
    };
    Ok(SandwichInfo { j, k, trace_jinv_k: trace, condition_flag })
}

/// Sandwich matrices at a fitted field with one free parameter per region
/// and coordinate.
pub fn sandwich<T: Real>(
    panel: &MaximaPanel<T>,
    pairs: &PairSet,
    sites: &SiteSet<T>,
    partition: &Partition,
    field_hat: &DependenceField<T>,
) -> Result<SandwichInfo<T>> {
    field_hat.check_partition(partition)?;
    let data = PairwiseData::new(panel, pairs, sites)?;
    sandwich_mapped(&data, partition.labels(), field_hat, &ParamMap::full(partition.n_regions()))
}

/// `(CLIC, CBIC) = (-2 l + 2 tr, -2 l + ln(T) tr)`.
pub fn clic_cbic<T: Real>(pl_at_opt: T, info: &SandwichInfo<T>, n_times: usize) -> (T, T) {
    let tr = info.trace_jinv_k;
    let base = -T::lit(2.0) * pl_at_opt;
    (base + T::lit(2.0) * tr, base + T::lit((n_times as f64).ln()) * tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependence_model::pair_log_density;

    #[test]
    fn simple_sampling_counts() {
        let p = sample_pairs_simple(1600, 0.001, 3).unwrap();
        assert_eq!(p.len(), 1279);
        let all = sample_pairs_simple(20, 1.0, 3).unwrap();
        assert_eq!(all.len(), 190);
        assert!(sample_pairs_simple(20, 1.5, 3).is_err());
    }

    #[test]
    fn penalty_hand_cases() {
        let part = Partition::from_labels(vec![0, 1]).unwrap().with_adjacency([(0, 1)]).unwrap();
        let f = DependenceField::new(vec![0.0f64, 2.0], vec![0.5, 0.5]).unwrap();
        let l1 = PenaltySpec::new(Lambda::Finite(3.0), Lambda::Finite(0.0), PenaltyPower::L1);
        assert_eq!(fused_penalty(&f, &part, &l1).unwrap(), 6.0);
        let l2 = PenaltySpec { q: PenaltyPower::L2, ..l1 };
        assert_eq!(fused_penalty(&f, &part, &l2).unwrap(), 12.0);
        let inf = PenaltySpec::new(Lambda::Infinite, Lambda::Finite(0.0), PenaltyPower::L1);
        assert!(matches!(fused_penalty(&f, &part, &inf), Err(Error::Contract(_))));
    }

    #[test]
    fn loglik_single_term_and_gradient() {
        let sites = SiteSet::<f64>::from_coords(vec![[0.0, 0.0], [0.3, 0.1], [0.9, 0.4]]).unwrap();
        let panel = MaximaPanel::new(vec![1.2, 0.4, 3.0, 0.7, 2.2, 0.9], 2, 3, Scale::UnitFrechet).unwrap();
        let part = Partition::from_labels(vec![0, 1, 1]).unwrap();
        let f = DependenceField::new(vec![0.2, -0.4], vec![-1.0, -0.3]).unwrap();
        let one = PairSet::from_pairs(3, vec![(0, 1)]).unwrap();
        let single = MaximaPanel::new(vec![1.2, 0.4, 3.0], 1, 3, Scale::UnitFrechet).unwrap();
        let g = crate::dependence_model::variogram(&f.geometry(&part, sites.coord(0), sites.coord(1), 0, 1));
        let want = pair_log_density(1.2, 0.4, g).unwrap();
        let got = pairwise_loglik(&single, &one, &sites, &part, &f).unwrap();
        assert!((got - want).abs() < 1e-13);

        let all = PairSet::all(3).unwrap();
        let data = PairwiseData::new(&panel, &all, &sites).unwrap();
        let base = data.loglik(part.labels(), f.psi1(), f.psi2(), true).unwrap();
        let theta: Vec<f64> = f.psi1().iter().chain(f.psi2()).copied().collect();
        for k in 0..4 {
            let e = 1e-6;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += e;
            dn[k] -= e;
            let v = |th: &[f64]| data.loglik(part.labels(), &th[..2], &th[2..], false).unwrap().value;
            let fd = (v(&up) - v(&dn)) / (2.0 * e);
            assert!((fd - base.grad[k]).abs() < 1e-6, "k={k} fd={fd} an={}", base.grad[k]);
        }
        let scores = data.time_scores(part.labels(), f.psi1(), f.psi2()).unwrap();
        for k in 0..4 {
            let s: f64 = (0..2).map(|t| scores[(t, k)]).sum();
            assert!((s - base.grad[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn clic_cbic_cases() {
        let info = SandwichInfo { j: Matrix::identity(2), k: Matrix::identity(2), trace_jinv_k: 2.0, condition_flag: None };
        let t = (2.0f64).exp().round() as usize;
        let (clic, cbic) = clic_cbic(-10.0, &info, t);
        assert_eq!(clic, 24.0);
        assert!(cbic > clic - 1.0);
    }

    #[test]
    fn param_map_sharing() {
        let m = ParamMap { n_regions: 3, shared1: true, shared2: false };
        assert_eq!(m.n_free(), 4);
        let (a, b) = m.expand(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a, vec![1.0; 3]);
        assert_eq!(b, vec![2.0, 3.0, 4.0]);
        assert_eq!(m.contract_grad(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), vec![6.0, 4.0, 5.0, 6.0]);
    }
}

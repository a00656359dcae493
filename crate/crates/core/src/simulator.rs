//! Truncated spectral simulation of Brown-Resnick processes and the block
//! maxima panel type.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::dependence_model::{correlation_from_h, DependenceField};
use crate::error::{data_err, invalid, Result};
use crate::linalg::{cholesky_jittered, Matrix};
use crate::scalar::Real;
use crate::spatial_domain::{parse_real, Partition, SiteSet};

/// Marginal scale of a panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Raw,
    UnitFrechet,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Raw => "raw",
            Scale::UnitFrechet => "unit_frechet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "raw" => Ok(Scale::Raw),
            "unit_frechet" => Ok(Scale::UnitFrechet),
            other => Err(invalid(format!("unknown scale {other:?}"))),
        }
    }
}

/// `T x D` matrix of block maxima, stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaximaPanel<T> {
    values: Vec<T>,
    n_times: usize,
    n_sites: usize,
    scale: Scale,
}

impl<T: Real> MaximaPanel<T> {
    pub fn new(values: Vec<T>, n_times: usize, n_sites: usize, scale: Scale) -> Result<Self> {
        if values.len() != n_times * n_sites || n_times == 0 || n_sites == 0 {
            return Err(invalid("panel dimensions do not match the data"));
        }
        for (k, v) in values.iter().enumerate() {
            let ok = v.is_finite() && (scale == Scale::Raw || *v > T::zero());
            if !ok {
                return Err(data_err(format!(
                    "invalid value {v} at time {}, site {}",
                    k / n_sites + 1,
                    k % n_sites + 1
                )));
            }
        }
        Ok(Self { values, n_times, n_sites, scale })
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, i: usize) -> T {
        self.values[t * self.n_sites + i]
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.values[t * self.n_sites..(t + 1) * self.n_sites]
    }

    pub fn column(&self, i: usize) -> Vec<T> {
        (0..self.n_times).map(|t| self.get(t, i)).collect()
    }

    /// Keeps the listed time rows.
    pub fn select_times(&self, times: &[usize]) -> Result<Self> {
        let mut v = Vec::with_capacity(times.len() * self.n_sites);
        for &t in times {
            v.extend_from_slice(self.row(t));
        }
        Self::new(v, times.len(), self.n_sites, self.scale)
    }

    /// Keeps the listed sites, in the given order.
    pub fn select_sites(&self, sites: &[usize]) -> Result<Self> {
        let mut v = Vec::with_capacity(sites.len() * self.n_times);
        for t in 0..self.n_times {
            v.extend(sites.iter().map(|&i| self.get(t, i)));
        }
        Self::new(v, self.n_times, sites.len(), self.scale)
    }

    /// Stacks `other` below `self`.
    pub fn stacked(&self, other: &Self) -> Result<Self> {
        if other.n_sites != self.n_sites || other.scale != self.scale {
            return Err(invalid("panels differ in sites or scale"));
        }
        let mut v = self.values.clone();
        v.extend_from_slice(&other.values);
        Self::new(v, self.n_times + other.n_times, self.n_sites, self.scale)
    }

    /// Path of the metadata file that records the panel scale.
    pub fn meta_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// Writes `time,<site ids>` rows plus a `<path>.meta` sidecar holding
    /// `scale=<raw|unit_frechet>`.
    pub fn write_csv(&self, path: impl AsRef<Path>, sites: &SiteSet<T>) -> Result<()> {
        let path = path.as_ref();
        if sites.len() != self.n_sites {
            return Err(invalid("panel and sites differ in size"));
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend(sites.ids().iter().cloned());
        w.write_record(&header)?;
        for t in 0..self.n_times {
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        std::fs::write(Self::meta_path(path), format!("scale={}\n", self.scale.as_str()))?;
        Ok(())
    }

    /// Reads a panel whose columns are matched to `sites` by id. The scale is
    /// taken from the sidecar when present, else from `default_scale`.
    pub fn read_csv(path: impl AsRef<Path>, sites: &SiteSet<T>, default_scale: Scale) -> Result<Self> {
        let path = path.as_ref();
        let meta = Self::meta_path(path);
        let scale = if meta.exists() {
            let text = std::fs::read_to_string(&meta)?;
            let line = text
                .lines()
                .find_map(|l| l.trim().strip_prefix("scale="))
                .ok_or_else(|| data_err(format!("{} has no scale entry", meta.display())))?;
            Scale::parse(line)?
        } else {
            default_scale
        };
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        if header.get(0).map(str::trim) != Some("time") {
            return Err(data_err("panel header must start with `time`"));
        }
        let cols: Vec<usize> = header
            .iter()
            .skip(1)
            .map(|id| sites.index_of(id.trim()).ok_or_else(|| data_err(format!("panel column {id} is not a known site"))))
            .collect::<Result<_>>()?;
        if cols.len() != sites.len() {
            return Err(data_err(format!("panel has {} site columns, expected {}", cols.len(), sites.len())));
        }
        let mut seen = vec![false; sites.len()];
        for &c in &cols {
            if std::mem::replace(&mut seen[c], true) {
                return Err(data_err("panel repeats a site column"));
            }
        }
        let d = sites.len();
        let mut values = Vec::new();
        let mut n_times = 0;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(data_err(format!("panel line {} has {} fields", line + 2, rec.len())));
            }
            let mut row = vec![T::zero(); d];
            for (k, &c) in cols.iter().enumerate() {
                row[c] = parse_real(&rec[k + 1], line + 2)?;
            }
            values.extend(row);
            n_times += 1;
        }
        Self::new(values, n_times, d, scale)
    }
}

/// Settings for [`sample_br`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Number of Poisson arrivals kept per replicate.
    pub m_star: usize,
    pub n_replicates: usize,
    pub seed: u64,
    /// Relative diagonal regularizer, as a multiple of the mean variance.
    pub jitter: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_star == 0 || self.n_replicates == 0 {
            return Err(invalid("m_star and n_replicates must be positive"));
        }
        if !(0.0..=1e-4).contains(&self.jitter) {
            return Err(invalid("jitter must lie in [0, 1e-4]"));
        }
        Ok(())
    }
}

/// `C[i][j] = sigma_i sigma_j rho_ij` for the field expanded over the sites.
pub fn build_covariance<T: Real>(sites: &SiteSet<T>, partition: &Partition, field: &DependenceField<T>) -> Result<Matrix<T>> {
    let params = field.site_params(partition)?;
    if params.len() != sites.len() {
        return Err(invalid("partition does not match the sites"));
    }
    let d = sites.len();
    let mut c = Matrix::zeros(d, d);
    for i in 0..d {
        let (s2i, pi) = params[i];
        c[(i, i)] = s2i;
        for j in 0..i {
            let (s2j, pj) = params[j];
            let v = (s2i * s2j).sqrt() * correlation_from_h(sites.distance(i, j), pi, pj);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

const ARRIVAL_BLOCK: usize = 512;

/// Simulates `n_replicates` unit Frechet Brown-Resnick fields,
/// `Z(s) = max_k exp(eps_k(s) - sigma^2(s)/2) / P_k` over the first `m_star`
/// Poisson arrivals.
///
/// Replicate `t` uses its own ChaCha stream, drawing for each arrival one
/// exponential spacing followed by `D` standard normals, so a larger
/// `m_star` extends rather than reshuffles the draws.
pub fn sample_br<T: Real>(
    sites: &SiteSet<T>,
    partition: &Partition,
    field: &DependenceField<T>,
    cfg: &SimConfig,
) -> Result<MaximaPanel<T>> {
    cfg.validate()?;
    let cov = build_covariance(sites, partition, field)?;
    let (l, used) = cholesky_jittered(&cov, T::lit(cfg.jitter))?;
    if used.f64() > cfg.jitter {
        log::warn!("covariance needed jitter {used} to factorize");
    }
    let lt = l.transpose();
    let d = sites.len();
    let half_var: Vec<T> = (0..d).map(|i| T::lit(0.5) * cov[(i, i)]).collect();

    let rows: Vec<Vec<T>> = (0..cfg.n_replicates)
        .into_par_iter()
        .map(|t| replicate(&lt, &half_var, cfg.m_star, cfg.seed, t as u64))
        .collect();
    let values: Vec<T> = rows.into_iter().flatten().collect();
    MaximaPanel::new(values, cfg.n_replicates, d, Scale::UnitFrechet)
}

fn replicate<T: Real>(lt: &Matrix<T>, half_var: &[T], m_star: usize, seed: u64, stream: u64) -> Vec<T> {
    let d = half_var.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut log_z = vec![T::neg_infinity(); d];
    let mut arrival = 0.0f64;
    let mut g = vec![T::zero(); ARRIVAL_BLOCK * d];
    let mut e = vec![T::zero(); ARRIVAL_BLOCK * d];
    let mut log_p = vec![T::zero(); ARRIVAL_BLOCK];
    let mut done = 0;
    while done < m_star {
        let b = ARRIVAL_BLOCK.min(m_star - done);
        for k in 0..b {
            let spacing: f64 = rng.sample(Exp1);
            arrival += spacing;
            log_p[k] = T::lit(arrival.ln());
            for x in &mut g[k * d..(k + 1) * d] {
                let n: f64 = rng.sample(StandardNormal);
                *x = T::lit(n);
            }
        }
        // Row k of E is L times the k-th normal vector.
        T::gemm(b, d, d, &g[..b * d], lt.as_slice(), &mut e[..b * d]);
        for k in 0..b {
            let row = &e[k * d..(k + 1) * d];
            for i in 0..d {
                let v = row[i] - half_var[i] - log_p[k];
                if v > log_z[i] {
                    log_z[i] = v;
                }
            }
        }
        done += b;
    }
    log_z.into_iter().map(|v| v.exp()).collect()
}

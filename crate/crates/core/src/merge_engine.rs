//! Partition selection by iterative subregion merging with penalty tuning
//! on descending grids, scored on held-out sites.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dependence_model::DependenceField;
use crate::error::{invalid, Result};
use crate::estimator::{fit_data, FitOptions, FitResult};
use crate::likelihood::{
    all_pairs, penalty_value, sample_pool_simple, sample_pool_stratified, Lambda, PairScheme, PairSet, PairwiseData,
    PenaltyPower, PenaltySpec,
};
use crate::scalar::Real;
use crate::simulator::MaximaPanel;
use crate::spatial_domain::{merge, Partition, SiteSet};

/// Descending penalty grids for the two coordinates. Each starts with the
/// infinite marker and ends at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T> {
    grid1: Vec<Lambda<T>>,
    grid2: Vec<Lambda<T>>,
}

impl<T: Real> GridSpec<T> {
    pub fn new(grid1: Vec<Lambda<T>>, grid2: Vec<Lambda<T>>) -> Result<Self> {
        check_grid(&grid1)?;
        check_grid(&grid2)?;
        Ok(Self { grid1, grid2 })
    }

    /// `{inf, values..., 0}` for both coordinates; `values` must be
    /// positive and strictly descending.
    pub fn from_values(values: &[T]) -> Result<Self> {
        let g = grid_from_values(values);
        Self::new(g.clone(), g)
    }

    pub fn grid(&self, coord: usize) -> &[Lambda<T>] {
        if coord == 0 {
            &self.grid1
        } else {
            &self.grid2
        }
    }

    pub fn position(&self, coord: usize, lam: Lambda<T>) -> Option<usize> {
        self.grid(coord).iter().position(|g| *g == lam)
    }
}

fn grid_from_values<T: Real>(values: &[T]) -> Vec<Lambda<T>> {
    let mut g = vec![Lambda::Infinite];
    g.extend(values.iter().map(|v| Lambda::Finite(*v)));
    g.push(Lambda::Finite(T::zero()));
    g
}

fn check_grid<T: Real>(g: &[Lambda<T>]) -> Result<()> {
    if g.len() < 2 || !g[0].is_infinite() || g.last() != Some(&Lambda::Finite(T::zero())) {
        return Err(invalid("a grid starts with inf and ends with 0"));
    }
    for w in g.windows(2) {
        if !w[0].gt(&w[1]) {
            return Err(invalid("grid values must be strictly descending"));
        }
        if let Lambda::Finite(v) = w[1] {
            if !(v >= T::zero()) || !v.is_finite() {
                return Err(invalid("grid values must be finite and nonnegative"));
            }
        }
    }
    Ok(())
}

/// Refines each coordinate's grid around the tuned weight:
/// `{inf, 4l, 2l, l, l/2, l/4, 0}`; an infinite weight keeps the previous
/// grid; a zero weight gives `{inf, g, g/2, 0}` with `g` the previous
/// smallest positive entry.
pub fn update_grid<T: Real>(lambda_hat: &PenaltySpec<T>, previous: &GridSpec<T>) -> GridSpec<T> {
    let refine = |lam: Lambda<T>, prev: &[Lambda<T>]| -> Vec<Lambda<T>> {
        match lam {
            Lambda::Infinite => prev.to_vec(),
            Lambda::Finite(l) if l == T::zero() => {
                let gmin = prev.iter().filter_map(|g| g.value()).filter(|v| *v > T::zero()).fold(T::infinity(), T::min);
                if gmin.is_finite() {
                    grid_from_values(&[gmin, gmin * T::lit(0.5)])
                } else {
                    grid_from_values(&[])
                }
            }
            Lambda::Finite(l) => {
                let vals: Vec<T> = [4.0, 2.0, 1.0, 0.5, 0.25].iter().map(|f| l * T::lit(*f)).collect();
                grid_from_values(&vals)
            }
        }
    };
    GridSpec { grid1: refine(lambda_hat.lambda1, &previous.grid1), grid2: refine(lambda_hat.lambda2, &previous.grid2) }
}

/// Euclidean distance between two regions' `(psi1, psi2)`.
pub fn parameter_distance<T: Real>(field: &DependenceField<T>, r1: usize, r2: usize) -> T {
    let a = field.psi1()[r1] - field.psi1()[r2];
    let b = field.psi2()[r1] - field.psi2()[r2];
    a.hypot(b)
}

/// Linear-interpolation (type 7) quantile of sorted data.
pub fn quantile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + T::lit(h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Thresholds `eta_h`, the `1 - h/(H+1)` quantiles of neighbour distances,
/// with ties dropped so the sequence is strictly descending.
pub fn propose_thresholds<T: Real>(field: &DependenceField<T>, partition: &Partition, h: usize) -> Result<Vec<T>> {
    if partition.adjacency().is_empty() {
        return Err(invalid("no adjacent regions to threshold"));
    }
    if h == 0 {
        return Err(invalid("need at least one threshold"));
    }
    field.check_partition(partition)?;
    let mut d: Vec<T> = partition.adjacency().iter().map(|&(a, b)| parameter_distance(field, a, b)).collect();
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mut out: Vec<T> = Vec::with_capacity(h);
    for k in 1..=h {
        let q = quantile_sorted(&d, 1.0 - k as f64 / (h + 1) as f64);
        if out.last().is_none_or(|last| q < *last) {
            out.push(q);
        }
    }
    Ok(out)
}

/// How sites are held out and pairs drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoldoutConfig {
    /// Fraction of each base region's sites reserved for final validation.
    pub validation_fraction: f64,
    /// With one fold, the fraction of each region's remaining sites held out.
    pub holdout_fraction: f64,
    pub n_folds: usize,
    pub scheme: PairScheme,
    pub pair_fraction: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.15,
            holdout_fraction: 0.15,
            n_folds: 1,
            scheme: PairScheme::Simple,
            pair_fraction: 0.01,
            n_classes: 10,
            seed: 0,
        }
    }
}

/// Site roles and the pair sets drawn for each fold.
#[derive(Debug, Clone)]
pub struct HoldoutSplit {
    pub validation_sites: Vec<usize>,
    pub folds: Vec<Vec<usize>>,
    pub train_pairs: Vec<PairSet>,
    pub holdout_pairs: Vec<PairSet>,
    /// Pairs touching at least one validation site.
    pub validation_pairs: PairSet,
}

impl HoldoutSplit {
    /// Draws validation sites and folds region by region so that every base
    /// region has at least one held-out site in every fold.
    pub fn build<T: Real>(sites: &SiteSet<T>, base: &Partition, cfg: &HoldoutConfig) -> Result<Self> {
        if cfg.n_folds == 0 {
            return Err(invalid("need at least one fold"));
        }
        if !(0.0..1.0).contains(&cfg.validation_fraction) || !(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0) {
            return Err(invalid("holdout fractions must lie in (0, 1)"));
        }
        let d = sites.len();
        let k = cfg.n_folds;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut role = vec![Role::Train; d];
        let mut validation = Vec::new();
        let mut folds = vec![Vec::new(); k];
        for r in 0..base.n_regions() {
            let mut m = base.members(r);
            m.shuffle(&mut rng);
            let need = if k == 1 { 2 } else { k + 1 };
            if m.len() < need {
                return Err(invalid(format!(
                    "region {} has {} sites; at least {need} are needed for {k} fold(s)",
                    r + 1,
                    m.len()
                )));
            }
            let n_val = ((cfg.validation_fraction * m.len() as f64).round() as usize).min(m.len() - need);
            for &i in &m[..n_val] {
                role[i] = Role::Validation;
                validation.push(i);
            }
            let rest = &m[n_val..];
            if k == 1 {
                let n_hold = ((cfg.holdout_fraction * rest.len() as f64).round() as usize).clamp(1, rest.len() - 1);
                folds[0].extend_from_slice(&rest[..n_hold]);
            } else {
                for (pos, &i) in rest.iter().enumerate() {
                    folds[pos % k].push(i);
                }
            }
        }
        validation.sort_unstable();
        folds.iter_mut().for_each(|f| f.sort_unstable());

        let pool = all_pairs(d);
        let draw = |pool: &[(usize, usize)], seed: u64| -> Result<PairSet> {
            let pairs = match cfg.scheme {
                PairScheme::All => pool.to_vec(),
                PairScheme::Simple => sample_pool_simple(pool, cfg.pair_fraction, seed)?,
                PairScheme::Stratified => sample_pool_stratified(sites, pool, cfg.pair_fraction, cfg.n_classes, seed)?,
            };
            let mut p = PairSet::from_pairs(d, pairs)?;
            p.scheme = cfg.scheme;
            p.fraction = cfg.pair_fraction;
            p.n_classes = cfg.n_classes;
            p.seed = seed;
            Ok(p)
        };
        let mut train_pairs = Vec::with_capacity(k);
        let mut holdout_pairs = Vec::with_capacity(k);
        for (f, fold) in folds.iter().enumerate() {
            let mut held = vec![false; d];
            fold.iter().for_each(|&i| held[i] = true);
            let usable = |i: usize| role[i] != Role::Validation;
            let train_pool: Vec<_> = pool.iter().copied().filter(|&(i, j)| usable(i) && usable(j) && !held[i] && !held[j]).collect();
            let hold_pool: Vec<_> = pool.iter().copied().filter(|&(i, j)| usable(i) && usable(j) && (held[i] || held[j])).collect();
            let s = cfg.seed.wrapping_mul(1_000_003).wrapping_add(2 * f as u64 + 1);
            train_pairs.push(draw(&train_pool, s)?);
            holdout_pairs.push(draw(&hold_pool, s.wrapping_add(7_919))?);
        }
        let val_pool: Vec<_> = pool.iter().copied().filter(|&(i, j)| role[i] == Role::Validation || role[j] == Role::Validation).collect();
        let validation_pairs = if val_pool.is_empty() {
            // No validation sites: fall back to the first fold's holdout pairs.
            holdout_pairs[0].clone()
        } else {
            draw(&val_pool, cfg.seed.wrapping_mul(1_000_003).wrapping_add(999_983))?
        };
        Ok(Self { validation_sites: validation, folds, train_pairs, holdout_pairs, validation_pairs })
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Train,
    Validation,
}

/// Panel and pair data for every fold, plus fitting settings.
pub struct MergeContext<T> {
    train: Vec<PairwiseData<T>>,
    hold: Vec<PairwiseData<T>>,
    pub q: PenaltyPower,
    pub fit_options: FitOptions,
}

impl<T: Real> MergeContext<T> {
    pub fn new(
        panel: &MaximaPanel<T>,
        sites: &SiteSet<T>,
        split: &HoldoutSplit,
        q: PenaltyPower,
        fit_options: FitOptions,
    ) -> Result<Self> {
        let train = split.train_pairs.iter().map(|p| PairwiseData::new(panel, p, sites)).collect::<Result<_>>()?;
        let hold = split.holdout_pairs.iter().map(|p| PairwiseData::new(panel, p, sites)).collect::<Result<_>>()?;
        Ok(Self { train, hold, q, fit_options })
    }

    pub fn n_folds(&self) -> usize {
        self.train.len()
    }

    pub fn train_data(&self, fold: usize) -> &PairwiseData<T> {
        &self.train[fold]
    }

    /// Fits each fold and scores it on that fold's holdout pairs. Each
    /// start in `inits` is tried (`None` starts from the stationary fit) and
    /// the fit with the larger training PPL is kept. Failed fits score
    /// negative infinity.
    pub fn score(&self, partition: &Partition, spec: &PenaltySpec<T>, inits: &[Option<&DependenceField<T>>]) -> Scored<T> {
        let per_fold: Vec<Option<(FitResult<T>, T, T)>> = (0..self.n_folds())
            .into_par_iter()
            .map(|f| {
                let fit = inits
                    .iter()
                    .filter_map(|init| fit_data(&self.train[f], partition, spec, *init, &self.fit_options).ok())
                    .fold(None::<FitResult<T>>, |best, c| match best {
                        Some(b) if b.ppl_value >= c.ppl_value => Some(b),
                        _ => Some(c),
                    })?;
                let pl = self.hold[f].loglik(partition.labels(), fit.field_hat.psi1(), fit.field_hat.psi2(), false).ok()?.value;
                let pen = penalty_value(&fit.field_hat, partition, spec).ok()?;
                Some((fit, pl, pl - pen))
            })
            .collect();
        if per_fold.iter().any(Option::is_none) {
            return Scored::failed(*spec);
        }
        let per_fold: Vec<_> = per_fold.into_iter().flatten().collect();
        let k = T::lit(per_fold.len() as f64);
        let r = partition.n_regions();
        let mut psi1 = vec![T::zero(); r];
        let mut psi2 = vec![T::zero(); r];
        for (fit, _, _) in &per_fold {
            for q in 0..r {
                psi1[q] += fit.field_hat.psi1()[q] / k;
                psi2[q] += fit.field_hat.psi2()[q] / k;
            }
        }
        let holdout_pl = per_fold.iter().map(|p| p.1).sum::<T>() / k;
        let holdout_ppl = per_fold.iter().map(|p| p.2).sum::<T>() / k;
        Scored {
            spec: *spec,
            field: DependenceField::new(psi1, psi2).ok(),
            fits: per_fold.into_iter().map(|p| p.0).collect(),
            holdout_pl,
            holdout_ppl,
        }
    }
}

/// Fold-averaged fit and holdout scores for one penalty setting.
#[derive(Debug, Clone)]
pub struct Scored<T> {
    pub spec: PenaltySpec<T>,
    /// Fold-averaged field; `None` when a fit failed.
    pub field: Option<DependenceField<T>>,
    pub fits: Vec<FitResult<T>>,
    pub holdout_pl: T,
    pub holdout_ppl: T,
}

impl<T: Real> Scored<T> {
    fn failed(spec: PenaltySpec<T>) -> Self {
        Self { spec, field: None, fits: Vec::new(), holdout_pl: T::neg_infinity(), holdout_ppl: T::neg_infinity() }
    }
}

/// Result of penalty tuning.
#[derive(Debug, Clone)]
pub struct Tuned<T> {
    pub spec: PenaltySpec<T>,
    pub positions: (usize, usize),
    pub scored: Scored<T>,
    pub n_fits: usize,
}

/// Greedy descent along the grids: from `start`, fit both single-coordinate
/// advances and keep the one whose holdout PL improves most; stop when
/// neither improves. Advances start from the incumbent fit and from `init`.
pub fn tune_lambda<T: Real>(
    ctx: &MergeContext<T>,
    partition: &Partition,
    grids: &GridSpec<T>,
    start: (usize, usize),
    init: Option<&DependenceField<T>>,
) -> Result<Tuned<T>> {
    let (g1, g2) = (grids.grid(0), grids.grid(1));
    if start.0 >= g1.len() || start.1 >= g2.len() {
        return Err(invalid("start position lies outside the grids"));
    }
    let spec_at = |p: (usize, usize)| PenaltySpec::new(g1[p.0], g2[p.1], ctx.q);
    let mut pos = start;
    let mut inc = ctx.score(partition, &spec_at(pos), &[init]);
    let mut n_fits = 1;
    loop {
        let mut moves = Vec::new();
        if pos.0 + 1 < g1.len() {
            moves.push((pos.0 + 1, pos.1));
        }
        if pos.1 + 1 < g2.len() {
            moves.push((pos.0, pos.1 + 1));
        }
        if moves.is_empty() {
            break;
        }
        let mut starts = vec![init];
        if let Some(f) = inc.field.as_ref().filter(|f| Some(*f) != init) {
            starts.insert(0, Some(f));
        }
        let cands: Vec<((usize, usize), Scored<T>)> =
            moves.iter().map(|&m| (m, ctx.score(partition, &spec_at(m), &starts))).collect();
        n_fits += cands.len();
        let best = cands
            .into_iter()
            .filter(|(_, s)| s.holdout_pl.is_finite())
            .fold(None::<((usize, usize), Scored<T>)>, |acc, c| match acc {
                Some(a) if a.1.holdout_pl >= c.1.holdout_pl => Some(a),
                _ => Some(c),
            });
        match best {
            Some((m, s)) if s.holdout_pl > inc.holdout_pl => {
                pos = m;
                inc = s;
            }
            _ => break,
        }
    }
    Ok(Tuned { spec: spec_at(pos), positions: pos, scored: inc, n_fits })
}

/// One accepted partition of the merge trace.
#[derive(Debug, Clone)]
pub struct MergeStep<T> {
    pub partition: Partition,
    pub lambda_hat: PenaltySpec<T>,
    pub holdout_pl: T,
    pub holdout_ppl: T,
    /// Thresholds evaluated at this step before acceptance (empty at step 0).
    pub thresholds_tried: Vec<T>,
    pub accepted_threshold: Option<T>,
    /// Fold-averaged fitted field.
    pub field: DependenceField<T>,
    pub fits: Vec<FitResult<T>>,
}

#[derive(Debug, Clone)]
pub struct MergeTrace<T> {
    pub steps: Vec<MergeStep<T>>,
    pub final_partition: Partition,
}

impl<T> MergeTrace<T> {
    pub fn final_step(&self) -> &MergeStep<T> {
        self.steps.last().expect("a trace has at least the base step")
    }
}

/// Algorithm settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeOptions {
    /// Number of candidate thresholds per step.
    pub n_thresholds: usize,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self { n_thresholds: 5 }
    }
}

/// Merged field: each new region takes the site-count weighted mean of the
/// old regions it absorbs.
fn merged_field<T: Real>(field: &DependenceField<T>, old: &Partition, new: &Partition) -> Result<DependenceField<T>> {
    let r = new.n_regions();
    let mut w = vec![T::zero(); r];
    let mut a = vec![T::zero(); r];
    let mut b = vec![T::zero(); r];
    for (&o, &n) in old.labels().iter().zip(new.labels()) {
        w[n] += T::one();
        a[n] += field.psi1()[o];
        b[n] += field.psi2()[o];
    }
    DependenceField::new(a.iter().zip(&w).map(|(x, n)| *x / *n).collect(), b.iter().zip(&w).map(|(x, n)| *x / *n).collect())
}

/// Tunes the penalty on the base partition, then repeatedly merges
/// neighbours whose parameter distance falls below a threshold and keeps
/// the first candidate whose holdout PPL beats the incumbent.
pub fn run_algorithm1<T: Real>(
    ctx: &MergeContext<T>,
    base: &Partition,
    initial_grids: &GridSpec<T>,
    opts: &MergeOptions,
) -> Result<MergeTrace<T>> {
    let tuned = tune_lambda(ctx, base, initial_grids, (0, 0), None)?;
    let Some(field) = tuned.scored.field.clone() else {
        return Err(crate::error::numeric("the base partition could not be fitted"));
    };
    let mut steps = vec![MergeStep {
        partition: base.clone(),
        lambda_hat: tuned.spec,
        holdout_pl: tuned.scored.holdout_pl,
        holdout_ppl: tuned.scored.holdout_ppl,
        thresholds_tried: Vec::new(),
        accepted_threshold: None,
        field,
        fits: tuned.scored.fits,
    }];
    let mut grids = initial_grids.clone();
    loop {
        let inc = steps.last().expect("non-empty");
        grids = update_grid(&inc.lambda_hat, &grids);
        if inc.partition.adjacency().is_empty() {
            break;
        }
        let start = (
            grids.position(0, inc.lambda_hat.lambda1).unwrap_or(0),
            grids.position(1, inc.lambda_hat.lambda2).unwrap_or(0),
        );
        let thresholds = propose_thresholds(&inc.field, &inc.partition, opts.n_thresholds)?;
        let mut tried = Vec::new();
        let mut accepted = None;
        for &eta in &thresholds {
            let merge_pairs: Vec<(usize, usize)> = inc
                .partition
                .adjacency()
                .iter()
                .copied()
                .filter(|&(a, b)| parameter_distance(&inc.field, a, b) < eta)
                .collect();
            if merge_pairs.is_empty() {
                continue;
            }
            tried.push(eta);
            let cand = merge(&inc.partition, &merge_pairs)?;
            let init = merged_field(&inc.field, &inc.partition, &cand)?;
            let t = tune_lambda(ctx, &cand, &grids, start, Some(&init))?;
            log::info!(
                "step {}: threshold {eta} gives {} regions, holdout PPL {} vs {}",
                steps.len(),
                cand.n_regions(),
                t.scored.holdout_ppl,
                inc.holdout_ppl
            );
            if t.scored.holdout_ppl > inc.holdout_ppl {
                if let Some(field) = t.scored.field.clone() {
                    accepted = Some((eta, cand, t, field));
                    break;
                }
            }
        }
        let Some((eta, cand, t, field)) = accepted else { break };
        steps.push(MergeStep {
            partition: cand,
            lambda_hat: t.spec,
            holdout_pl: t.scored.holdout_pl,
            holdout_ppl: t.scored.holdout_ppl,
            thresholds_tried: tried,
            accepted_threshold: Some(eta),
            field,
            fits: t.scored.fits,
        });
    }
    let final_partition = steps.last().expect("non-empty").partition.clone();
    Ok(MergeTrace { steps, final_partition })
}

use fusedmax::dependence_model::{extremal_coefficient, variogram, DependenceField};
use fusedmax::diagnostics::*;
use fusedmax::estimator::{fit, fit_stationary, FitOptions};
use fusedmax::likelihood::*;
use fusedmax::simulator::*;
use fusedmax::spatial_domain::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gev_sample(n: usize, mu: f64, sc: f64, xi: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let e = -rng.random::<f64>().ln();
            if xi.abs() < 1e-12 {
                mu - sc * e.ln()
            } else {
                mu + sc * (e.powf(-xi) - 1.0) / xi
            }
        })
        .collect()
}

#[test]
fn rank_transform_properties() {
    let x = gev_sample(200, 5.0, 2.0, 0.2, 1);
    let cols: Vec<f64> = x.iter().flat_map(|v| [*v, v.powi(3) + 1.0]).collect();
    let panel = MaximaPanel::new(cols, 200, 2, Scale::Raw).unwrap();
    let z = rank_to_frechet(&panel).unwrap();
    // A monotone transform of a column leaves its ranks, so its output, unchanged.
    assert_eq!(z.column(0), z.column(1));
    let col = z.column(0);
    assert!(col.iter().all(|v| *v > 0.0));
    let top = col.iter().copied().fold(0.0, f64::max);
    assert!((top + 1.0 / (200.0f64 / 201.0).ln()).abs() < 1e-12);
    for (a, b) in x.iter().zip(&col) {
        for (c, d) in x.iter().zip(&col) {
            assert_eq!(a < c, b < d);
        }
    }
    let u: Vec<f64> = col.iter().map(|z| (-1.0 / z).exp()).collect();
    assert!(ks_distance(&u) < ks_critical_value(200, 0.01));
    assert!(rank_to_frechet(&MaximaPanel::new(vec![1.0; 40], 20, 2, Scale::Raw).unwrap()).is_err());
}

/// With a vanishing sill every site is `1 / P1`, a unit Frechet variable.
#[test]
fn degenerate_simulation_is_unit_frechet() {
    let sites = SiteSet::<f64>::unit_grid(2, 1).unwrap();
    let field = DependenceField::constant(1, 1e-300, 1.0).unwrap();
    let mut accepted = 0;
    for seed in 0..20 {
        let cfg = SimConfig { m_star: 1, n_replicates: 2000, seed, jitter: 0.0 };
        let panel = sample_br(&sites, &Partition::single(2), &field, &cfg).unwrap();
        let u: Vec<f64> = panel.column(0).iter().map(|z| (-1.0 / z).exp()).collect();
        accepted += usize::from(ks_distance(&u) < ks_critical_value(2000, 0.01));
    }
    assert!(accepted >= 19, "{accepted} of 20 seeds accepted");
}

#[test]
fn gev_fit_recovers_standard_gumbel() {
    let mut ok = 0;
    let mut fallbacks = 0;
    for seed in 0..50 {
        let f = fit_gev_site(&gev_sample(500, 0.0, 1.0, 0.0, 1000 + seed)).unwrap();
        fallbacks += usize::from(f.fallback);
        let p = f.params;
        ok += usize::from(p.mu.abs() <= 0.15 && (p.varsigma - 1.0).abs() <= 0.15 && p.xi.abs() <= 0.1);
    }
    assert!(ok >= 45, "{ok} of 50 fits within tolerance");
    assert!(fallbacks <= 2);
}

#[test]
fn gev_fit_is_equivariant() {
    let x = gev_sample(400, 3.0, 1.5, 0.15, 7);
    let a = fit_gev_site(&x).unwrap().params;
    let shifted: Vec<f64> = x.iter().map(|v| v + 10.0).collect();
    let b = fit_gev_site(&shifted).unwrap().params;
    assert!((b.mu - a.mu - 10.0).abs() < 1e-5);
    assert!((b.varsigma - a.varsigma).abs() < 1e-6 && (b.xi - a.xi).abs() < 1e-6);
    let scaled: Vec<f64> = x.iter().map(|v| v * 4.0).collect();
    let c = fit_gev_site(&scaled).unwrap().params;
    assert!((c.varsigma / a.varsigma - 4.0).abs() < 1e-5);
    assert!((c.mu / a.mu - 4.0).abs() < 1e-5 && (c.xi - a.xi).abs() < 1e-6);
    let z = gev_to_frechet(a.mu, &a).unwrap();
    assert!((z - 1.0).abs() < 1e-12);
}

#[test]
fn madogram_extremes() {
    let x = gev_sample(300, 1.0, 1.0, 1.0, 3);
    let same = MaximaPanel::new(x.iter().flat_map(|v| [*v, *v]).collect(), 300, 2, Scale::UnitFrechet).unwrap();
    let e = f_madogram(&same, 0, 1).unwrap();
    assert_eq!((e.nu_hat, e.theta_hat), (0.0, 1.0));

    let a = gev_sample(5000, 1.0, 1.0, 1.0, 4);
    let b = gev_sample(5000, 1.0, 1.0, 1.0, 5);
    let indep = MaximaPanel::new(a.iter().zip(&b).flat_map(|(x, y)| [*x, *y]).collect(), 5000, 2, Scale::UnitFrechet).unwrap();
    let e = f_madogram(&indep, 0, 1).unwrap();
    assert!((e.theta_hat - 2.0).abs() <= 0.1, "{}", e.theta_hat);
}

#[test]
fn madogram_matches_brown_resnick_pair() {
    // Unit sill and range, distance ln 2: rho = 1/2, so gamma = 1/2.
    let sites = SiteSet::from_coords(vec![[0.0, 0.0], [2f64.ln(), 0.0]]).unwrap();
    let field = DependenceField::constant(1, 1.0, 1.0).unwrap();
    let cfg = SimConfig { m_star: 10_000, n_replicates: 2000, seed: 17, jitter: 1e-10 };
    let panel = sample_br(&sites, &Partition::single(2), &field, &cfg).unwrap();
    let theta = extremal_coefficient(0.5f64).unwrap();
    assert!((theta - 1.38292).abs() < 1e-4);
    let e = f_madogram(&panel, 0, 1).unwrap();
    assert!((e.theta_hat - theta).abs() <= 0.07, "{} vs {theta}", e.theta_hat);
}

fn brute_mad(panel: &MaximaPanel<f64>, sites: &SiteSet<f64>, part: &Partition, field: &DependenceField<f64>, strata: &[usize]) -> (f64, Vec<(usize, f64)>) {
    let n = sites.len();
    let mut all = Vec::new();
    let mut by = std::collections::BTreeMap::<usize, Vec<f64>>::new();
    for i in 0..n {
        for j in i + 1..n {
            let g = field.geometry(part, sites.coord(i), sites.coord(j), i, j);
            let m = extremal_coefficient(variogram(&g)).unwrap();
            let d = (m - f_madogram(panel, i, j).unwrap().theta_hat).abs();
            all.push(d);
            if strata[i] == strata[j] {
                by.entry(strata[i]).or_default().push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&all), by.iter().map(|(s, v)| (*s, mean(v))).collect())
}

#[test]
fn mad_matches_enumeration() {
    let sites = SiteSet::<f64>::unit_grid(6, 6).unwrap();
    let part = compute_adjacency(&sites, build_grid_partition(&sites, 2, 1).unwrap());
    let field = DependenceField::from_natural(&[0.5, 3.0], &[0.3, 0.3]).unwrap();
    let cfg = SimConfig { m_star: 1000, n_replicates: 80, seed: 2, jitter: 1e-8 };
    let panel = sample_br(&sites, &part, &field, &cfg).unwrap();
    let strata = build_grid_partition(&sites, 3, 1).unwrap().labels().to_vec();
    let rep = mad_extremal(&panel, &sites, &part, &field, &strata).unwrap();
    let (total, per) = brute_mad(&panel, &sites, &part, &field, &strata);
    assert_eq!(rep.n_pairs, 36 * 35 / 2);
    assert!((rep.total - total).abs() < 1e-12);
    assert_eq!(rep.per_stratum.len(), per.len());
    for ((s, m, _), (s2, m2)) in rep.per_stratum.iter().zip(&per) {
        assert_eq!(s, s2);
        assert!((m - m2).abs() < 1e-12);
    }
    // Reordering the table rows leaves the summary alone.
    let pairs: Vec<(usize, usize)> = (0..36).flat_map(|i| (i + 1..36).map(move |j| (i, j))).rev().collect();
    let rows = extremal_table(&panel, &sites, &part, &field, &pairs, Some(&strata)).unwrap();
    assert!((mad_from_rows(&rows, &strata).total - rep.total).abs() < 1e-12);
    assert!(rows.iter().all(|r| (1.0..=2.0).contains(&r.theta_model) && (1.0..=2.0).contains(&r.theta_empirical)));
}

#[test]
fn mad_of_self_comparison_is_zero() {
    let rows: Vec<ExtremalRow<f64>> = (0..5)
        .map(|k| ExtremalRow { i: k, j: k + 1, distance: 1.0, theta_model: 1.0 + k as f64 / 5.0, theta_empirical: 1.0 + k as f64 / 5.0, stratum: Some(0) })
        .collect();
    let rep = mad_from_rows(&rows, &[0; 6]);
    assert_eq!(rep.total, 0.0);
    assert_eq!(rep.per_stratum, vec![(0, 0.0, 5)]);
}

#[test]
fn nonstationary_fit_has_smaller_mad() {
    let sites = SiteSet::<f64>::unit_grid(10, 10).unwrap();
    let part = compute_adjacency(&sites, build_grid_partition(&sites, 2, 1).unwrap());
    let truth = DependenceField::from_natural(&[0.5, 5.0], &[2.0, 2.0]).unwrap();
    let strata = vec![0; 100];
    let mut ok = 0;
    for seed in 0..10 {
        let cfg = SimConfig { m_star: 2000, n_replicates: 100, seed: 300 + seed, jitter: 1e-8 };
        let panel = sample_br(&sites, &part, &truth, &cfg).unwrap();
        let pairs = sample_pairs_simple(100, 0.1, seed).unwrap();
        let opts = FitOptions { n_starts: 1, seed, ..FitOptions::default() };
        let ns = fit(&panel, &pairs, &sites, &part, &PenaltySpec::zero(PenaltyPower::L2), None, &opts).unwrap();
        let st = fit_stationary(&panel, &pairs, &sites, &opts).unwrap();
        let m_ns = mad_extremal(&panel, &sites, &part, &ns.field_hat, &strata).unwrap().total;
        let m_st = mad_extremal(&panel, &sites, &Partition::single(100), &st.field_hat, &strata).unwrap().total;
        ok += usize::from(m_ns < m_st);
    }
    assert!(ok >= 8, "{ok} of 10 seeds");
}

#[test]
fn rmse_hand_cases() {
    let r = rmse_subregion(&[vec![1.0f64, 2.0, 2.0, 4.0]], &[0.5, 2.0, 2.0, 5.0]).unwrap();
    assert!((r[0] - 0.559017).abs() < 1e-6);
    assert_eq!(int_rmse(&[vec![1.0, 2.0]], &[1.0, 2.0]).unwrap(), 0.0);
    assert!((int_rmse(&[vec![3.5f64, 4.5]], &[1.0, 2.0]).unwrap() - 2.5).abs() < 1e-15);
    assert!(int_rmse::<f64>(&[], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn rmse_matches_two_loop_reference(
        truth in prop::collection::vec(-5.0..5.0f64, 1..30),
        noise in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 30), 1..8),
    ) {
        let fitted: Vec<Vec<f64>> = noise.iter().map(|n| truth.iter().zip(n).map(|(t, e)| t + e).collect()).collect();
        let mut acc = 0.0;
        for f in &fitted {
            let mut s = 0.0;
            for k in 0..truth.len() {
                s += (f[k] - truth[k]) * (f[k] - truth[k]);
            }
            acc += s / truth.len() as f64;
        }
        let want = (acc / fitted.len() as f64).sqrt();
        prop_assert!((int_rmse(&fitted, &truth).unwrap() - want).abs() < 1e-12);
        let per = rmse_subregion(&fitted, &truth).unwrap();
        for (f, got) in fitted.iter().zip(per) {
            let mut s = 0.0;
            for k in 0..truth.len() {
                s += (f[k] - truth[k]) * (f[k] - truth[k]);
            }
            prop_assert!((got - (s / truth.len() as f64).sqrt()).abs() < 1e-12);
        }
    }
}

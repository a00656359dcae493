use fusedmax::dependence_model::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rug::Float;

const PREC: u32 = 4096;

fn mp(x: f64) -> Float {
    Float::with_val(PREC, x)
}

/// Standard normal CDF in multiple precision.
fn mp_phi(x: &Float) -> Float {
    let arg = Float::with_val(PREC, -x) / Float::with_val(PREC, 2).sqrt();
    arg.erfc() / 2
}

fn mp_v(zi: &Float, zj: &Float, gamma: &Float) -> Float {
    let a = Float::with_val(PREC, gamma * 2u32).sqrt();
    let k = Float::with_val(PREC, zj / zi).ln();
    let half = Float::with_val(PREC, &a / 2u32);
    let w1 = Float::with_val(PREC, &half + Float::with_val(PREC, &k / &a));
    let w2 = Float::with_val(PREC, &half - Float::with_val(PREC, &k / &a));
    mp_phi(&w1) / zi + mp_phi(&w2) / zj
}

fn mp_cdf(zi: &Float, zj: &Float, gamma: &Float) -> Float {
    (-mp_v(zi, zj, gamma)).exp()
}

/// Mixed central difference of `f` in multiple precision.
fn mp_mixed(f: impl Fn(&Float, &Float) -> Float, zi: f64, zj: f64) -> f64 {
    mp_mixed_exact(f, zi, zj).to_f64()
}

fn mp_mixed_exact(f: impl Fn(&Float, &Float) -> Float, zi: f64, zj: f64) -> Float {
    let hi = mp(zi) * mp(1e-150);
    let hj = mp(zj) * mp(1e-150);
    let (xi, xj) = (mp(zi), mp(zj));
    let pp = f(&Float::with_val(PREC, &xi + &hi), &Float::with_val(PREC, &xj + &hj));
    let pm = f(&Float::with_val(PREC, &xi + &hi), &Float::with_val(PREC, &xj - &hj));
    let mp_ = f(&Float::with_val(PREC, &xi - &hi), &Float::with_val(PREC, &xj + &hj));
    let mm = f(&Float::with_val(PREC, &xi - &hi), &Float::with_val(PREC, &xj - &hj));
    let num = pp - pm - mp_ + mm;
    num / (hi * hj * 4u32)
}

fn mp_density(zi: f64, zj: f64, gamma: f64) -> f64 {
    mp_log_density(zi, zj, gamma).exp()
}

/// Log of the mixed partial of `exp(-V)`, taken before rounding so that
/// tiny densities do not underflow.
fn mp_log_density(zi: f64, zj: f64, gamma: f64) -> f64 {
    let g = mp(gamma);
    mp_mixed_exact(|a, b| mp_cdf(a, b, &g), zi, zj).ln().to_f64()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn geom(si: [f64; 2], sj: [f64; 2], s2: (f64, f64), phi: (f64, f64)) -> PairGeometry<f64> {
    PairGeometry { site_i: si, site_j: sj, sigma2_i: s2.0, sigma2_j: s2.1, phi_i: phi.0, phi_j: phi.1 }
}

#[test]
fn mahalanobis_hand_case() {
    let g = geom([0.0, 0.0], [2.0, 0.0], (1.0, 1.0), (1.0, 3.0));
    assert!((mahalanobis_distance(&g) - 2.0 / 2f64.sqrt()).abs() < 1e-14);
    // Matrix form: h' ((Omega_i + Omega_j)/2)^-1 h with Omega = phi I.
    let omega = (1.0 + 3.0) / 2.0;
    let q: f64 = (2.0 * 2.0) / omega;
    assert!((mahalanobis_distance(&g) - q.sqrt()).abs() < 1e-14);
}

#[test]
fn correlation_prefactor_at_zero_distance() {
    let g = geom([0.3, 0.3], [0.3, 0.3], (1.0, 1.0), (1.0, 4.0));
    // Determinant form: |O_i|^1/4 |O_j|^1/4 |(O_i+O_j)/2|^-1/2 in two dimensions.
    let (di, dj, dm) = (1.0f64 * 1.0, 4.0f64 * 4.0, 2.5f64 * 2.5);
    let want = di.powf(0.25) * dj.powf(0.25) / dm.sqrt();
    assert!((want - 0.8).abs() < 1e-15);
    assert!((nonstationary_correlation(&g) - want).abs() < 1e-14);
}

#[test]
fn variogram_hand_case() {
    // Equal ranges and h = ln 2 give rho = 0.5.
    let g = geom([0.0, 0.0], [2f64.ln(), 0.0], (1.0, 4.0), (1.0, 1.0));
    assert!((nonstationary_correlation(&g) - 0.5).abs() < 1e-14);
    assert!((variogram(&g) - 1.5).abs() < 1e-14);
}

#[test]
fn extremal_coefficient_reference_values() {
    assert_eq!(extremal_coefficient(0.0f64).unwrap(), 1.0);
    let want = 1.0 + libm::erf(0.5 / 2f64.sqrt());
    assert!((extremal_coefficient(0.5f64).unwrap() - want).abs() < 1e-10);
    assert!((want - 1.38292).abs() < 1e-5);
}

/// Richardson-extrapolated central difference.
fn richardson(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[test]
fn first_partials_match_differences() {
    let (zi, zj, g) = (1.3, 0.7, 0.8);
    let (vi, vj, _) = exponent_partials(zi, zj, g).unwrap();
    let fi = richardson(|x| exponent_v(x, zj, g).unwrap(), zi, 1e-5);
    let fj = richardson(|x| exponent_v(zi, x, g).unwrap(), zj, 1e-5);
    assert!(rel(vi, fi) < 1e-6, "{vi} vs {fi}");
    assert!(rel(vj, fj) < 1e-6, "{vj} vs {fj}");
}

#[test]
fn mixed_partial_matches_differences_on_grid() {
    let zs: Vec<f64> = (0..10).map(|k| 0.1 * 10f64.powf(k as f64 * 2.0 / 9.0)).collect();
    let gammas = [0.05, 0.3, 1.0, 3.0, 10.0];
    for &zi in &zs {
        for &zj in &zs {
            for &g in &gammas {
                let (_, _, vij) = exponent_partials(zi, zj, g).unwrap();
                let gm = mp(g);
                let fd = mp_mixed(|a, b| mp_v(a, b, &gm), zi, zj);
                assert!(rel(vij, fd) < 1e-5, "({zi}, {zj}, {g}): {vij} vs {fd}");
            }
        }
    }
}

#[test]
fn density_matches_oracle_at_reference_point() {
    let got = pair_log_density(1.0f64, 2.0, 0.5).unwrap().exp();
    let want = mp_density(1.0, 2.0, 0.5);
    assert!(rel(got, want) < 1e-5, "{got} vs {want}");
}

#[test]
fn density_matches_oracle_on_random_cloud() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let logu = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let zi = logu(&mut rng, 0.05, 50.0);
        let zj = logu(&mut rng, 0.05, 50.0);
        let g = logu(&mut rng, 0.01, 20.0);
        // |ln a - ln b| bounds the relative error of exp(ln a) to first order.
        let got = pair_log_density(zi, zj, g).unwrap();
        let want = mp_log_density(zi, zj, g);
        let e = (got - want).abs().exp_m1();
        assert!(e < 1e-4, "({zi}, {zj}, {g}): {got} vs {want}");
        worst = worst.max(e);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn density_integrates_to_one() {
    // Trapezoid rule in (ln zi, ln zj) over [a, b]^2; the exact box mass
    // accounts for the tails.
    let (a, b) = (1e-3f64, 1e4f64);
    let n = 1200;
    let (la, lb) = (a.ln(), b.ln());
    let step = (lb - la) / (n - 1) as f64;
    let s: Vec<f64> = (0..n).map(|k| la + step * k as f64).collect();
    for &g in &[0.25, 1.0, 4.0] {
        let mut total = 0.0;
        for (p, &x) in s.iter().enumerate() {
            let wx = if p == 0 || p == n - 1 { 0.5 } else { 1.0 };
            for (q, &y) in s.iter().enumerate() {
                let wy = if q == 0 || q == n - 1 { 0.5 } else { 1.0 };
                let f = (pair_log_density(x.exp(), y.exp(), g).unwrap() + x + y).exp();
                total += wx * wy * f;
            }
        }
        total *= step * step;
        let cdf = |u: f64, v: f64| (-exponent_v(u, v, g).unwrap()).exp();
        let box_mass = cdf(b, b) - cdf(a, b) - cdf(b, a) + cdf(a, a);
        let full = total + (1.0 - box_mass);
        assert!((full - 1.0).abs() < 1e-3, "gamma {g}: {full}");
    }
}

fn site() -> impl Strategy<Value = [f64; 2]> {
    [-5.0f64..5.0, -5.0f64..5.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn correlation_in_unit_interval(si in site(), sj in site(), pi in 0.01f64..10.0, pj in 0.01f64..10.0) {
        let g = geom(si, sj, (1.0, 1.0), (pi, pj));
        let r = nonstationary_correlation(&g);
        prop_assert!(r > 0.0 && r <= 1.0);
        if si != sj || pi != pj {
            prop_assert!(r < 1.0);
        }
        let same = geom(si, si, (1.0, 1.0), (pi, pi));
        prop_assert_eq!(nonstationary_correlation(&same), 1.0);
    }

    #[test]
    fn variogram_nonnegative_and_symmetric(si in site(), sj in site(), s in (0.01f64..10.0, 0.01f64..10.0), p in (0.01f64..10.0, 0.01f64..10.0)) {
        let g = geom(si, sj, s, p);
        let swapped = geom(sj, si, (s.1, s.0), (p.1, p.0));
        let (a, b) = (variogram(&g), variogram(&swapped));
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn exponent_symmetric_under_swap(zi in 0.05f64..50.0, zj in 0.05f64..50.0, g in 0.01f64..20.0) {
        let (v1, v2) = (exponent_v(zi, zj, g).unwrap(), exponent_v(zj, zi, g).unwrap());
        prop_assert!((v1 - v2).abs() <= 1e-12 * v1);
        let (_, _, m1) = exponent_partials(zi, zj, g).unwrap();
        let (_, _, m2) = exponent_partials(zj, zi, g).unwrap();
        prop_assert!((m1 - m2).abs() <= 1e-10 * m1.abs());
        let (d1, d2) = (pair_log_density(zi, zj, g).unwrap(), pair_log_density(zj, zi, g).unwrap());
        prop_assert!((d1 - d2).abs() <= 1e-10 * d1.abs().max(1.0));
    }

    #[test]
    fn extremal_coefficient_increasing(g in 0.0f64..50.0, dg in 1e-6f64..5.0) {
        prop_assert!(extremal_coefficient(g + dg).unwrap() > extremal_coefficient(g).unwrap());
    }

    #[test]
    fn stationary_reduction(si in site(), sj in site(), s2 in 0.01f64..10.0, phi in 0.01f64..10.0) {
        let g = geom(si, sj, (s2, s2), (phi, phi));
        let h = ((si[0] - sj[0]).powi(2) + (si[1] - sj[1]).powi(2)).sqrt();
        let rho = (-h / phi.sqrt()).exp();
        prop_assert!((nonstationary_correlation(&g) - rho).abs() < 1e-14);
        prop_assert!((variogram(&g) - s2 * (1.0 - rho)).abs() < 1e-12 * s2.max(1.0));
    }
}

#[test]
fn strictly_increasing_on_fixed_grid() {
    let thetas: Vec<f64> = (0..100).map(|k| extremal_coefficient(k as f64 * 0.2).unwrap()).collect();
    assert!(thetas.windows(2).all(|w| w[1] > w[0]));
    assert!(thetas.iter().all(|t| (1.0..=2.0).contains(t)));
}

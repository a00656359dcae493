use fusedmax::dependence_model::DependenceField;
use fusedmax::linalg::cholesky_jittered;
use fusedmax::simulator::*;
use fusedmax::spatial_domain::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(n: usize, seed: u64) -> SiteSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SiteSet::from_coords((0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect()).unwrap()
}

#[test]
fn covariance_factorizes_on_random_cloud() {
    let sites = cloud(400, 3);
    let km = build_kmeans_partition(&sites, 6, 3).unwrap().partition;
    for phi in [0.05, 0.1, 0.2, 0.5] {
        let phis: Vec<f64> = (0..6).map(|r| phi * (1.0 + 0.1 * r as f64)).collect();
        let field = DependenceField::from_natural(&[1.0; 6], &phis).unwrap();
        let c = build_covariance(&sites, &km, &field).unwrap();
        assert!(c.is_symmetric(0.0));
        let (_, used) = cholesky_jittered(&c, 1e-10).unwrap();
        assert!(used <= 1e-10 * 100.0, "phi {phi} needed jitter {used}");
    }
}

#[test]
fn unit_frechet_margins() {
    let sites = SiteSet::<f64>::unit_grid(3, 3).unwrap();
    let p = compute_adjacency(&sites, build_grid_partition(&sites, 2, 1).unwrap());
    let field = DependenceField::from_natural(&[0.5, 5.0], &[2.0, 2.0]).unwrap();
    let cfg = SimConfig { m_star: 10_000, n_replicates: 2000, seed: 11, jitter: 1e-8 };
    let panel = sample_br(&sites, &p, &field, &cfg).unwrap();
    assert!(panel.values().iter().all(|v| *v > 0.0 && v.is_finite()));
    for i in 0..9 {
        let col = panel.column(i);
        let m = col.iter().map(|z| (-1.0 / z).exp()).sum::<f64>() / col.len() as f64;
        assert!((m - 0.5).abs() < 0.02, "site {i}: mean of exp(-1/Z) {m}");
    }
}

#[test]
fn truncation_is_monotone_and_replicates_are_prefix_stable() {
    let sites = SiteSet::<f64>::unit_grid(4, 4).unwrap();
    let p = Partition::single(16);
    let field = DependenceField::constant(1, 1.0, 0.2).unwrap();
    let small = SimConfig { m_star: 300, n_replicates: 20, seed: 5, jitter: 1e-8 };
    let large = SimConfig { m_star: 2000, ..small };
    let a = sample_br(&sites, &p, &field, &small).unwrap();
    let b = sample_br(&sites, &p, &field, &large).unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!(y >= x);
    }
    let fewer = sample_br(&sites, &p, &field, &SimConfig { n_replicates: 7, ..small }).unwrap();
    assert_eq!(fewer.values(), &a.values()[..7 * 16]);
}

#[test]
fn output_ignores_thread_count() {
    let sites = SiteSet::<f64>::unit_grid(5, 5).unwrap();
    let p = Partition::single(25);
    let field = DependenceField::constant(1, 2.0, 0.3).unwrap();
    let cfg = SimConfig { m_star: 1000, n_replicates: 30, seed: 9, jitter: 1e-8 };
    let run = |n| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        pool.install(|| sample_br(&sites, &p, &field, &cfg).unwrap())
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn degenerate_field_gives_common_arrival() {
    // With a vanishing sill every site sees the same arrival, Z = 1 / P1.
    let sites = SiteSet::<f64>::unit_grid(2, 2).unwrap();
    let p = Partition::single(4);
    let field = DependenceField::constant(1, 1e-300, 0.2).unwrap();
    let cfg = SimConfig { m_star: 50, n_replicates: 10, seed: 1, jitter: 0.0 };
    let panel = sample_br(&sites, &p, &field, &cfg).unwrap();
    for t in 0..10 {
        let row = panel.row(t);
        assert!(row.iter().all(|z| (z / row[0] - 1.0).abs() < 1e-12));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let sites = SiteSet::<f64>::unit_grid(2, 2).unwrap();
    let p = Partition::single(4);
    let field = DependenceField::constant(1, 1.0, 0.2).unwrap();
    for cfg in [
        SimConfig { m_star: 0, n_replicates: 1, seed: 0, jitter: 0.0 },
        SimConfig { m_star: 1, n_replicates: 0, seed: 0, jitter: 0.0 },
        SimConfig { m_star: 1, n_replicates: 1, seed: 0, jitter: 1.0 },
    ] {
        assert!(sample_br(&sites, &p, &field, &cfg).is_err());
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fusedmax::dependence_model::DependenceField;
use fusedmax::estimator::{fit_data, FitOptions};
use fusedmax::likelihood::{PairSet, PairwiseData, PenaltySpec, PenaltyPower};
use fusedmax::simulator::{MaximaPanel, Scale};
use fusedmax::spatial_domain::{build_grid_partition, compute_adjacency, SiteSet};

const BIN: &str = env!("CARGO_BIN_EXE_fusedmax");

fn run(cmd: &str, config: &Path, out: &Path, threads: usize) -> std::process::Output {
    Command::new(BIN)
        .args([cmd, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", &threads.to_string()])
        .output()
        .expect("binary runs")
}

fn ok(cmd: &str, config: &Path, out: &Path, threads: usize) {
    let o = run(cmd, config, out, threads);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// Simulates a small two-region panel into `dir/sim`.
fn simulated(dir: &Path) -> PathBuf {
    let cfg = write(
        dir,
        "simulate.toml",
        "seed = 7\n[sites]\ngrid = [6, 6]\n[partition]\nkind = \"grid\"\nnx = 2\nny = 1\n\
         [truth]\nsigma2 = [0.5, 5.0]\nphi = [2.0]\n[simulate]\nm_star = 500\nn_replicates = 40\n",
    );
    let out = dir.join("sim");
    ok("simulate", &cfg, &out, 1);
    out
}

fn fit_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "fit.toml",
        "seed = 3\n[sites]\npath = \"sim/sites.csv\"\n[partition]\nkind = \"grid\"\nnx = 2\nny = 1\n\
         [data]\npanel = \"sim/panel.csv\"\n[pairs]\nscheme = \"simple\"\nfraction = 0.3\n\
         [penalty]\nlambda1 = 0\nlambda2 = 0\n[fit]\nn_starts = 1\n",
    )
}

#[test]
fn pipeline_is_deterministic_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let sim = simulated(dir);
    let again = dir.join("sim8");
    ok("simulate", &dir.join("simulate.toml"), &again, 8);
    assert_eq!(dir_bytes(&sim), dir_bytes(&again));

    let fit = fit_config(dir);
    ok("fit", &fit, &dir.join("fit1"), 1);
    ok("fit", &fit, &dir.join("fit8"), 8);
    assert_eq!(dir_bytes(&dir.join("fit1")), dir_bytes(&dir.join("fit8")));

    let merge = write(
        dir,
        "merge.toml",
        "seed = 4\n[sites]\npath = \"sim/sites.csv\"\n[partition]\nkind = \"grid\"\nnx = 2\nny = 2\n\
         [data]\npanel = \"sim/panel.csv\"\n[pairs]\nfraction = 0.4\n[fit]\nn_starts = 1\n\
         [merge]\ngrid = [10.0, 1.0]\nfolds = 2\n",
    );
    ok("merge", &merge, &dir.join("merge1"), 1);
    ok("merge", &merge, &dir.join("merge8"), 8);
    assert_eq!(dir_bytes(&dir.join("merge1")), dir_bytes(&dir.join("merge8")));
    let trace = fs::read_to_string(dir.join("merge1/trace.csv")).unwrap();
    assert!(trace.starts_with("step,n_regions,lambda1,lambda2,holdout_pl,holdout_ppl,accepted_threshold,thresholds_tried\n"));
    assert!(dir.join("merge1/final_partition.csv").exists());

    let diag = write(
        dir,
        "diagnose.toml",
        "seed = 5\n[sites]\npath = \"sim/sites.csv\"\n[partition]\nkind = \"file\"\npath = \"sim/partition.csv\"\n\
         [data]\npanel = \"sim/panel.csv\"\n\
         [diagnose]\nfield = \"sim/field.csv\"\nreference = \"sim/partition.csv\"\n\
         truth_field = \"sim/field.csv\"\ntruth_partition = \"sim/partition.csv\"\n",
    );
    ok("diagnose", &diag, &dir.join("diag1"), 1);
    ok("diagnose", &diag, &dir.join("diag8"), 8);
    assert_eq!(dir_bytes(&dir.join("diag1")), dir_bytes(&dir.join("diag8")));

    let summary: toml::Table = fs::read_to_string(dir.join("diag1/diagnose.toml")).unwrap().parse().unwrap();
    assert_eq!(summary["rand_index"].as_float(), Some(1.0));
    assert_eq!(summary["intrmse_sigma2"].as_float(), Some(0.0));
    let lri = fs::read_to_string(dir.join("diag1/local_rand_index.csv")).unwrap();
    assert!(lri.lines().skip(1).all(|l| l.ends_with(",1")));

    let mad = fs::read_to_string(dir.join("diag1/mad.csv")).unwrap();
    let mut lines = mad.lines();
    assert_eq!(lines.next(), Some("stratum,mad,n_pairs"));
    let total: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((total[0], total[2]), ("Total", "630"));
    assert_eq!(mad.lines().count(), 4);

    let ext = fs::read_to_string(dir.join("diag1/extremal.csv")).unwrap();
    let mut rows = ext.lines();
    assert_eq!(rows.next(), Some("i,j,distance,theta_model,theta_empirical,stratum"));
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        for c in [3, 4] {
            let v: f64 = f[c].parse().unwrap();
            assert!((1.0..=2.0).contains(&v));
        }
    }

    let manifest: toml::Table = fs::read_to_string(dir.join("fit1/manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["command"].as_str(), Some("fit"));
    assert!(manifest["outputs"].as_table().unwrap().contains_key("field.csv"));
}

#[test]
fn fit_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulated(dir);
    let cfg = write(
        dir,
        "fit_all.toml",
        "seed = 3\n[sites]\npath = \"sim/sites.csv\"\n[partition]\nkind = \"grid\"\nnx = 2\nny = 1\n\
         [data]\npanel = \"sim/panel.csv\"\n[pairs]\nscheme = \"all\"\n\
         [penalty]\nlambda1 = 0\nlambda2 = 0\n[fit]\nn_starts = 1\n",
    );
    ok("fit", &cfg, &dir.join("fit"), 2);
    let got = DependenceField::<f64>::read_csv(dir.join("fit/field.csv")).unwrap();

    let sites = SiteSet::<f64>::read_csv(dir.join("sim/sites.csv")).unwrap();
    let panel = MaximaPanel::read_csv(dir.join("sim/panel.csv"), &sites, Scale::UnitFrechet).unwrap();
    let part = compute_adjacency(&sites, build_grid_partition(&sites, 2, 1).unwrap());
    let data = PairwiseData::new(&panel, &PairSet::all(36).unwrap(), &sites).unwrap();
    let opts = FitOptions { n_starts: 1, seed: 3, ..FitOptions::default() };
    let want = fit_data(&data, &part, &PenaltySpec::zero(PenaltyPower::L2), None, &opts).unwrap();
    for r in 0..2 {
        assert!((got.psi1()[r] - want.field_hat.psi1()[r]).abs() < 1e-12);
        assert!((got.psi2()[r] - want.field_hat.psi2()[r]).abs() < 1e-12);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulated(dir);
    let out = dir.join("o");

    let unknown = write(dir, "bad.toml", "seed = 1\nbogus = 2\n");
    assert_eq!(run("fit", &unknown, &out, 1).status.code(), Some(1));
    let missing = write(dir, "missing.toml", "seed = 1\n[sites]\npath = \"nope.csv\"\n");
    assert_eq!(run("fit", &missing, &out, 1).status.code(), Some(1));
    let no_seed = write(dir, "noseed.toml", "[sites]\ngrid = [3, 3]\n");
    assert_eq!(run("simulate", &no_seed, &out, 1).status.code(), Some(1));
    assert_eq!(run("fit", &fit_config(dir), &out, 0).status.code(), Some(1));

    let panel = fs::read_to_string(dir.join("sim/panel.csv")).unwrap();
    let mut lines: Vec<String> = panel.lines().map(String::from).collect();
    let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
    cells[1] = "-1".into();
    lines[1] = cells.join(",");
    write(dir, "broken.csv", &(lines.join("\n") + "\n"));
    fs::copy(dir.join("sim/panel.csv.meta"), dir.join("broken.csv.meta")).ok();
    let broken = write(
        dir,
        "broken.toml",
        "seed = 1\n[sites]\npath = \"sim/sites.csv\"\n[partition]\nkind = \"single\"\n[data]\npanel = \"broken.csv\"\n",
    );
    let o = run("fit", &broken, &out, 1);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    // A vanishing sill puts every pair at complete dependence, where the
    // density is undefined.
    write(dir, "degenerate.csv", "region,sigma2,phi\n1,1e-300,1\n");
    let degenerate = write(
        dir,
        "degenerate.toml",
        "seed = 1\n[sites]\npath = \"sim/sites.csv\"\n[partition]\nkind = \"single\"\n[data]\npanel = \"sim/panel.csv\"\n\
         [pairs]\nfraction = 0.5\n[fit]\nn_starts = 1\ninit_field = \"degenerate.csv\"\n",
    );
    let o = run("fit", &degenerate, &out, 1);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

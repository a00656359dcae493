use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use fusedmax::dependence_model::DependenceField;
use fusedmax::diagnostics::{
    extremal_table, int_rmse, ks_critical_value, ks_distance, mad_from_rows, rank_to_frechet, write_extremal_csv,
};
use fusedmax::estimator::{fit_data, FitOptions};
use fusedmax::likelihood::{
    clic_cbic, sample_pairs_simple, sample_pairs_stratified, sandwich_mapped, Lambda, PairScheme, PairSet,
    PairwiseData, ParamMap,
};
use fusedmax::linalg::Matrix;
use fusedmax::merge_engine::{run_algorithm1, GridSpec, HoldoutConfig, HoldoutSplit, MergeContext, MergeOptions};
use fusedmax::simulator::{sample_br, MaximaPanel, Scale, SimConfig};
use fusedmax::spatial_domain::{
    build_grid_partition, build_kmeans_partition, compute_adjacency, local_rand_index, rand_index, Partition,
    SiteSet,
};
use fusedmax::{Field, Panel, Sites};

use crate::config::{self, config_err, existing, Config};

/// Everything a command needs besides its own sections.
pub struct Run {
    pub command: &'static str,
    pub config: Config,
    pub config_text: String,
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

impl Run {
    fn path(&self, p: &Path, key: &str) -> Result<PathBuf> {
        existing(&self.base, p, key)
    }

    fn sites(&self) -> Result<Sites> {
        let s = self.config.section(&self.config.sites, "sites")?;
        match (&s.path, s.grid) {
            (Some(p), None) => Ok(SiteSet::read_csv(self.path(p, "sites.path")?)?),
            (None, Some([nx, ny])) => Ok(SiteSet::unit_grid(nx, ny).map_err(|e| config_err(format!("sites.grid: {e}")))?),
            _ => Err(config_err("[sites] needs exactly one of path or grid")),
        }
    }

    fn partition(&self, sites: &Sites) -> Result<Partition> {
        let p = self.config.section(&self.config.partition, "partition")?;
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| config_err(format!("partition.{key} is required for kind {:?}", p.kind)));
        let part = match p.kind.as_str() {
            "single" => Partition::single(sites.len()),
            "grid" => build_grid_partition(sites, need(p.nx, "nx")?, need(p.ny, "ny")?)?,
            "kmeans" => {
                let km = build_kmeans_partition(sites, need(p.regions, "regions")?, self.seed)?;
                if !km.converged {
                    log::warn!("k-means did not converge; using the last assignment");
                }
                km.partition
            }
            "file" => {
                let path = p.path.as_ref().ok_or_else(|| config_err("partition.path is required for kind \"file\""))?;
                Partition::read_csv(self.path(path, "partition.path")?, sites)?
            }
            other => return Err(config_err(format!("partition.kind: unknown kind {other:?}"))),
        };
        Ok(compute_adjacency(sites, part))
    }

    fn panel(&self, sites: &Sites) -> Result<Panel> {
        let d = self.config.section(&self.config.data, "data")?;
        let scale = config::scale(d)?;
        let panel = MaximaPanel::read_csv(self.path(&d.panel, "data.panel")?, sites, scale)?;
        Ok(match panel.scale() {
            Scale::Raw => rank_to_frechet(&panel)?,
            Scale::UnitFrechet => panel,
        })
    }

    fn pairs(&self, sites: &Sites) -> Result<PairSet> {
        let p = self.config.pairs.clone().unwrap_or_default();
        Ok(match config::scheme(&p)? {
            PairScheme::All => PairSet::all(sites.len())?,
            PairScheme::Simple => sample_pairs_simple(sites.len(), p.fraction, self.seed)?,
            PairScheme::Stratified => sample_pairs_stratified(sites, p.fraction, p.classes, self.seed)?,
        })
    }

    fn fit_options(&self) -> FitOptions {
        let mut o = FitOptions { seed: self.seed, ..FitOptions::default() };
        if let Some(f) = &self.config.fit {
            o.n_starts = f.n_starts.unwrap_or(o.n_starts);
            o.max_iter = f.max_iter.unwrap_or(o.max_iter);
            o.start_sd = f.start_sd.unwrap_or(o.start_sd);
        }
        o
    }
}

/// Collects written files for the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    }

    fn toml<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        self.text(name, &toml::to_string(value)?)
    }

    fn finish(mut self, run: &Run) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let mut outputs = BTreeMap::new();
        for f in &self.files {
            outputs.insert(f.clone(), sha256_hex(&fs::read(self.dir.join(f))?));
        }
        let m = Manifest {
            command: run.command.to_string(),
            version: format!("fusedmax-cli {}", env!("CARGO_PKG_VERSION")),
            config_sha256: sha256_hex(run.config_text.as_bytes()),
            seed: run.seed,
            outputs,
        };
        fs::write(self.dir.join("manifest.toml"), toml::to_string(&m)?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    config_sha256: String,
    seed: u64,
    outputs: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn lambda_text(l: Lambda<f64>) -> String {
    l.to_string()
}

fn matrix_csv(m: &Matrix<f64>) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Broadcasts a single value to every region.
fn per_region(v: &[f64], r: usize, key: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; r]),
        n if n == r => Ok(v.to_vec()),
        n => Err(config_err(format!("{key}: expected 1 or {r} values, got {n}"))),
    }
}

pub fn simulate(run: &Run) -> Result<()> {
    let sites = run.sites()?;
    let partition = run.partition(&sites)?;
    let r = partition.n_regions();
    let truth = run.config.section(&run.config.truth, "truth")?;
    let field: Field = match (&truth.field, &truth.sigma2, &truth.phi) {
        (Some(p), None, None) => DependenceField::read_csv(run.path(p, "truth.field")?)?,
        (None, Some(s), Some(f)) => {
            DependenceField::from_natural(&per_region(s, r, "truth.sigma2")?, &per_region(f, r, "truth.phi")?)
                .map_err(|e| config_err(format!("[truth]: {e}")))?
        }
        _ => return Err(config_err("[truth] needs either field or both sigma2 and phi")),
    };
    field.check_partition(&partition).map_err(|e| config_err(format!("[truth]: {e}")))?;
    let s = run.config.section(&run.config.simulate, "simulate")?;
    let cfg = SimConfig { m_star: s.m_star, n_replicates: s.n_replicates, seed: run.seed, jitter: s.jitter };
    cfg.validate().map_err(|e| config_err(format!("[simulate]: {e}")))?;
    let panel = sample_br(&sites, &partition, &field, &cfg)?;

    let mut out = Outputs::new(&run.out)?;
    sites.write_csv(out.path("sites.csv"))?;
    partition.write_csv(out.path("partition.csv"), &sites)?;
    field.write_csv(out.path("field.csv"))?;
    let panel_path = out.path("panel.csv");
    panel.write_csv(&panel_path, &sites)?;
    out.files.push("panel.csv.meta".into());
    #[derive(Serialize)]
    struct Meta {
        m_star: usize,
        n_replicates: usize,
        jitter: f64,
        n_sites: usize,
        n_regions: usize,
    }
    out.toml("simulation.toml", &Meta { m_star: cfg.m_star, n_replicates: cfg.n_replicates, jitter: cfg.jitter, n_sites: sites.len(), n_regions: r })?;
    out.finish(run)
}

#[derive(Serialize)]
struct FitSummary {
    n_sites: usize,
    n_times: usize,
    n_pairs: usize,
    n_regions: usize,
    q: u32,
    lambda1: String,
    lambda2: String,
    pl: f64,
    ppl: f64,
    converged: bool,
    n_evals: usize,
    trace_jinv_k: f64,
    clic: f64,
    cbic: f64,
    condition_flag: String,
}

pub fn fit(run: &Run) -> Result<()> {
    let sites = run.sites()?;
    let partition = run.partition(&sites)?;
    let panel = run.panel(&sites)?;
    let pairs = run.pairs(&sites)?;
    let spec = config::penalty(run.config.penalty.as_ref())?;
    let opts = run.fit_options();
    let init = match run.config.fit.as_ref().and_then(|f| f.init_field.as_ref()) {
        Some(p) => Some(DependenceField::read_csv(run.path(p, "fit.init_field")?)?),
        None => None,
    };
    let data = PairwiseData::new(&panel, &pairs, &sites)?;
    let res = fit_data(&data, &partition, &spec, init.as_ref(), &opts)?;
    if !res.converged {
        log::warn!("optimizer did not converge: {}", res.condition_flag.as_deref().unwrap_or(""));
    }
    let map = ParamMap::new(partition.n_regions(), &spec);
    let info = sandwich_mapped(&data, partition.labels(), &res.field_hat, &map)?;
    let (clic, cbic) = clic_cbic(res.pl_value, &info, panel.n_times());

    let mut out = Outputs::new(&run.out)?;
    res.field_hat.write_csv(out.path("field.csv"))?;
    partition.write_csv(out.path("partition.csv"), &sites)?;
    pairs.write_csv(out.path("pairs.csv"))?;
    out.text("sandwich_j.csv", &matrix_csv(&info.j))?;
    out.text("sandwich_k.csv", &matrix_csv(&info.k))?;
    let flags: Vec<&str> = [res.condition_flag.as_deref(), info.condition_flag.as_deref()].into_iter().flatten().collect();
    out.toml(
        "fit.toml",
        &FitSummary {
            n_sites: sites.len(),
            n_times: panel.n_times(),
            n_pairs: pairs.len(),
            n_regions: partition.n_regions(),
            q: spec.q.q(),
            lambda1: lambda_text(spec.lambda1),
            lambda2: lambda_text(spec.lambda2),
            pl: res.pl_value,
            ppl: res.ppl_value,
            converged: res.converged,
            n_evals: res.n_evals,
            trace_jinv_k: info.trace_jinv_k,
            clic,
            cbic,
            condition_flag: flags.join("; "),
        },
    )?;
    out.finish(run)
}

#[derive(Serialize)]
struct MergeSummary {
    n_steps: usize,
    base_regions: usize,
    final_regions: usize,
    lambda1: String,
    lambda2: String,
    holdout_ppl: f64,
    validation_pairs: usize,
    validation_pl: f64,
}

pub fn merge(run: &Run) -> Result<()> {
    let sites = run.sites()?;
    let base = run.partition(&sites)?;
    let panel = run.panel(&sites)?;
    let m = run.config.section(&run.config.merge, "merge")?;
    let pairs = run.config.pairs.clone().unwrap_or_default();
    let grids = GridSpec::new(
        fusedmax_grid(&m.grid),
        fusedmax_grid(m.grid2.as_ref().unwrap_or(&m.grid)),
    )
    .map_err(|e| config_err(format!("[merge] grid: {e}")))?;
    let hc = HoldoutConfig {
        validation_fraction: m.validation_fraction,
        holdout_fraction: m.holdout_fraction,
        n_folds: m.folds,
        scheme: config::scheme(&pairs)?,
        pair_fraction: pairs.fraction,
        n_classes: pairs.classes,
        seed: run.seed,
    };
    let split = HoldoutSplit::build(&sites, &base, &hc).map_err(|e| config_err(format!("[merge]: {e}")))?;
    let q = config::power(run.config.penalty.as_ref())?;
    let ctx = MergeContext::new(&panel, &sites, &split, q, run.fit_options())?;
    let trace = run_algorithm1(&ctx, &base, &grids, &MergeOptions { n_thresholds: m.thresholds })?;
    let last = trace.final_step();
    let val = PairwiseData::new(&panel, &split.validation_pairs, &sites)?;
    let validation_pl = val.loglik(last.partition.labels(), last.field.psi1(), last.field.psi2(), false)?.value;

    let mut out = Outputs::new(&run.out)?;
    let mut csv = String::from("step,n_regions,lambda1,lambda2,holdout_pl,holdout_ppl,accepted_threshold,thresholds_tried\n");
    for (k, s) in trace.steps.iter().enumerate() {
        let tried: Vec<String> = s.thresholds_tried.iter().map(|t| t.to_string()).collect();
        csv.push_str(&format!(
            "{k},{},{},{},{},{},{},{}\n",
            s.partition.n_regions(),
            lambda_text(s.lambda_hat.lambda1),
            lambda_text(s.lambda_hat.lambda2),
            s.holdout_pl,
            s.holdout_ppl,
            s.accepted_threshold.map(|t| t.to_string()).unwrap_or_default(),
            tried.join(";")
        ));
        s.partition.write_csv(out.path(&format!("partition_step{k}.csv")), &sites)?;
    }
    out.text("trace.csv", &csv)?;
    trace.final_partition.write_csv(out.path("final_partition.csv"), &sites)?;
    last.field.write_csv(out.path("field.csv"))?;
    split.validation_pairs.write_csv(out.path("validation_pairs.csv"))?;
    out.toml(
        "merge.toml",
        &MergeSummary {
            n_steps: trace.steps.len() - 1,
            base_regions: base.n_regions(),
            final_regions: trace.final_partition.n_regions(),
            lambda1: lambda_text(last.lambda_hat.lambda1),
            lambda2: lambda_text(last.lambda_hat.lambda2),
            holdout_ppl: last.holdout_ppl,
            validation_pairs: split.validation_pairs.len(),
            validation_pl,
        },
    )?;
    out.finish(run)
}

fn fusedmax_grid(values: &[f64]) -> Vec<Lambda<f64>> {
    let mut g = vec![Lambda::Infinite];
    g.extend(values.iter().map(|v| Lambda::Finite(*v)));
    g.push(Lambda::Finite(0.0));
    g
}

#[derive(Serialize, Default)]
struct DiagnoseSummary {
    n_pairs: usize,
    mad_total: f64,
    ks_critical_001: f64,
    ks_rejections: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    rand_index: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrmse_sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intrmse_phi: Option<f64>,
}

pub fn diagnose(run: &Run) -> Result<()> {
    let sites = run.sites()?;
    let partition = run.partition(&sites)?;
    let panel = run.panel(&sites)?;
    let dcfg = run.config.section(&run.config.diagnose, "diagnose")?;
    let field = DependenceField::read_csv(run.path(&dcfg.field, "diagnose.field")?)?;
    field.check_partition(&partition).map_err(|e| fusedmax::Error::Data(e.to_string()))?;
    let strata = match &dcfg.strata {
        Some(p) => Partition::read_csv(run.path(p, "diagnose.strata")?, &sites)?,
        None => partition.clone(),
    };
    let pairs = match dcfg.pair_fraction {
        Some(f) => sample_pairs_simple(sites.len(), f, run.seed).map_err(|e| config_err(format!("diagnose.pair_fraction: {e}")))?,
        None => PairSet::all(sites.len())?,
    };
    let rows = extremal_table(&panel, &sites, &partition, &field, pairs.pairs(), Some(strata.labels()))?;
    let mad = mad_from_rows(&rows, strata.labels());

    let mut out = Outputs::new(&run.out)?;
    write_extremal_csv(&rows, out.path("extremal.csv"))?;
    let mut mad_csv = String::from("stratum,mad,n_pairs\n");
    mad_csv.push_str(&format!("Total,{},{}\n", mad.total, mad.n_pairs));
    for (s, v, n) in &mad.per_stratum {
        mad_csv.push_str(&format!("{},{v},{n}\n", s + 1));
    }
    out.text("mad.csv", &mad_csv)?;

    let crit = ks_critical_value(panel.n_times(), 0.01);
    let mut ks_csv = String::from("id,ks_distance\n");
    let mut rejections = 0;
    for i in 0..sites.len() {
        let u: Vec<f64> = panel.column(i).iter().map(|z| (-1.0 / z).exp()).collect();
        let d = ks_distance(&u);
        rejections += usize::from(d > crit);
        ks_csv.push_str(&format!("{},{d}\n", sites.ids()[i]));
    }
    out.text("ks.csv", &ks_csv)?;

    let mut summary = DiagnoseSummary { n_pairs: rows.len(), mad_total: mad.total, ks_critical_001: crit, ks_rejections: rejections, ..Default::default() };
    if let Some(p) = &dcfg.reference {
        let reference = Partition::read_csv(run.path(p, "diagnose.reference")?, &sites)?;
        summary.rand_index = Some(rand_index(&reference, &partition)?);
        let mut lri = String::from("id,local_rand_index\n");
        for i in 0..sites.len() {
            lri.push_str(&format!("{},{}\n", sites.ids()[i], local_rand_index(&reference, &partition, i)?));
        }
        out.text("local_rand_index.csv", &lri)?;
    }
    match (&dcfg.truth_field, &dcfg.truth_partition) {
        (Some(f), Some(p)) => {
            let tf: Field = DependenceField::read_csv(run.path(f, "diagnose.truth_field")?)?;
            let tp = Partition::read_csv(run.path(p, "diagnose.truth_partition")?, &sites)?;
            let truth = tf.site_params(&tp)?;
            let est = field.site_params(&partition)?;
            let pick = |v: &[(f64, f64)], c: usize| -> Vec<f64> { v.iter().map(|x| if c == 0 { x.0 } else { x.1 }).collect() };
            summary.intrmse_sigma2 = Some(int_rmse(&[pick(&est, 0)], &pick(&truth, 0))?);
            summary.intrmse_phi = Some(int_rmse(&[pick(&est, 1)], &pick(&truth, 1))?);
        }
        (None, None) => {}
        _ => return Err(config_err("diagnose.truth_field and diagnose.truth_partition go together")),
    }
    out.toml("diagnose.toml", &summary)?;
    out.finish(run)
}

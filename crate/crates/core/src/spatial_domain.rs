//! Sites, partitions into subregions, subregion adjacency, merging and
//! partition agreement scores.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::error::{data_err, invalid, Result};
use crate::scalar::Real;

/// Observation locations in the plane with unique identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSet<T> {
    ids: Vec<String>,
    coords: Vec<[T; 2]>,
}

impl<T: Real> SiteSet<T> {
    /// Validates and builds a site set. Requires at least two sites, finite
    /// coordinates, unique ids and no repeated locations.
    pub fn new(ids: Vec<String>, coords: Vec<[T; 2]>) -> Result<Self> {
        if ids.len() != coords.len() {
            return Err(invalid("ids and coordinates differ in length"));
        }
        if ids.len() < 2 {
            return Err(invalid("a site set needs at least two sites"));
        }
        let mut seen_ids = HashSet::new();
        let mut seen_xy = HashSet::new();
        for (id, c) in ids.iter().zip(&coords) {
            if !c[0].is_finite() || !c[1].is_finite() {
                return Err(data_err(format!("site {id} has a non-finite coordinate")));
            }
            if !seen_ids.insert(id.as_str()) {
                return Err(data_err(format!("duplicate site id {id}")));
            }
            // Normalize -0.0 so it collides with 0.0.
            let key = ((c[0] + T::zero()).f64().to_bits(), (c[1] + T::zero()).f64().to_bits());
            if !seen_xy.insert(key) {
                return Err(data_err(format!("site {id} duplicates another site's coordinates")));
            }
        }
        Ok(Self { ids, coords })
    }

    /// Builds a site set with ids `"1"`, `"2"`, ...
    pub fn from_coords(coords: Vec<[T; 2]>) -> Result<Self> {
        let ids = (1..=coords.len()).map(|i| i.to_string()).collect();
        Self::new(ids, coords)
    }

    /// Cell-centred `nx` by `ny` lattice on the unit square, ordered row by row.
    pub fn unit_grid(nx: usize, ny: usize) -> Result<Self> {
        let mut coords = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                coords.push([
                    T::lit((ix as f64 + 0.5) / nx as f64),
                    T::lit((iy as f64 + 0.5) / ny as f64),
                ]);
            }
        }
        Self::from_coords(coords)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> [T; 2] {
        self.coords[i]
    }

    /// Euclidean distance between sites `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> T {
        let a = self.coords[i];
        let b = self.coords[j];
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> (T, T, T, T) {
        let mut b = (T::infinity(), T::infinity(), T::neg_infinity(), T::neg_infinity());
        for c in &self.coords {
            b.0 = b.0.min(c[0]);
            b.1 = b.1.min(c[1]);
            b.2 = b.2.max(c[0]);
            b.3 = b.3.max(c[1]);
        }
        b
    }

    /// Returns a copy with every coordinate multiplied by `c`.
    pub fn scaled(&self, c: T) -> Result<Self> {
        Self::new(self.ids.clone(), self.coords.iter().map(|p| [p[0] * c, p[1] * c]).collect())
    }

    /// Keeps the listed sites, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.ids[i].clone()).collect(),
            idx.iter().map(|&i| self.coords[i]).collect(),
        )
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    /// Reads a CSV with header `id,x,y`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        check_header(rdr.headers()?, &["id", "x", "y"])?;
        let mut ids = Vec::new();
        let mut coords = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(data_err(format!("sites row {} has {} fields", line + 2, rec.len())));
            }
            ids.push(rec[0].to_string());
            coords.push([parse_real(&rec[1], line + 2)?, parse_real(&rec[2], line + 2)?]);
        }
        Self::new(ids, coords)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "x", "y"])?;
        for (id, c) in self.ids.iter().zip(&self.coords) {
            w.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_header(h: &csv::StringRecord, want: &[&str]) -> Result<()> {
    let got: Vec<&str> = h.iter().map(str::trim).collect();
    if got != want {
        return Err(data_err(format!("expected header {}, found {}", want.join(","), got.join(","))));
    }
    Ok(())
}

pub(crate) fn parse_real<T: Real>(s: &str, line: usize) -> Result<T> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| data_err(format!("line {line}: cannot parse {s:?} as a number")))?;
    Ok(T::lit(v))
}

/// Assignment of sites to subregions `0..R` plus the subregion adjacency
/// graph. Region ids are 0-based in memory and 1-based in CSV files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    n_regions: usize,
    adjacency: BTreeSet<(usize, usize)>,
}

impl Partition {
    /// Builds a partition from labels that must cover `0..R` with no gaps.
    /// Adjacency starts empty.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("partition has no sites"));
        }
        let n_regions = labels.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; n_regions];
        for &l in &labels {
            used[l] = true;
        }
        if let Some(r) = used.iter().position(|u| !u) {
            return Err(invalid(format!("region {} has no sites", r + 1)));
        }
        Ok(Self { labels, n_regions, adjacency: BTreeSet::new() })
    }

    /// Relabels arbitrary ids to `0..R`, ordering new ids by each group's
    /// smallest old id.
    pub fn compacted<L: Ord + Copy>(raw: &[L]) -> Result<Self> {
        let distinct: BTreeSet<L> = raw.iter().copied().collect();
        let map: BTreeMap<L, usize> = distinct.into_iter().enumerate().map(|(k, l)| (l, k)).collect();
        Self::from_labels(raw.iter().map(|l| map[l]).collect())
    }

    /// Every site in one region.
    pub fn single(n_sites: usize) -> Self {
        Self { labels: vec![0; n_sites], n_regions: 1, adjacency: BTreeSet::new() }
    }

    /// Replaces the adjacency set after validating it.
    pub fn with_adjacency(mut self, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut adj = BTreeSet::new();
        for (a, b) in pairs {
            if a == b {
                return Err(invalid(format!("region {} adjacent to itself", a + 1)));
            }
            if a >= self.n_regions || b >= self.n_regions {
                return Err(invalid("adjacency references a missing region"));
            }
            adj.insert((a.min(b), a.max(b)));
        }
        self.adjacency = adj;
        Ok(self)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, site: usize) -> usize {
        self.labels[site]
    }

    pub fn n_sites(&self) -> usize {
        self.labels.len()
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    /// Unordered adjacent region pairs stored as `(low, high)`.
    pub fn adjacency(&self) -> &BTreeSet<(usize, usize)> {
        &self.adjacency
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency.contains(&(a.min(b), a.max(b)))
    }

    pub fn region_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_regions];
        for &l in &self.labels {
            n[l] += 1;
        }
        n
    }

    pub fn members(&self, region: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == region).collect()
    }

    /// True if every region of `self` lies inside a single region of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.n_sites() != coarser.n_sites() {
            return false;
        }
        let mut map = vec![usize::MAX; self.n_regions];
        for (&a, &b) in self.labels.iter().zip(&coarser.labels) {
            if map[a] == usize::MAX {
                map[a] = b;
            } else if map[a] != b {
                return false;
            }
        }
        true
    }

    /// Reads a CSV with header `id,region` (regions 1-based, any order of
    /// rows). Adjacency is left empty.
    pub fn read_csv<T: Real>(path: impl AsRef<Path>, sites: &SiteSet<T>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        check_header(rdr.headers()?, &["id", "region"])?;
        let mut raw = vec![None; sites.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let i = sites
                .index_of(&rec[0])
                .ok_or_else(|| data_err(format!("line {}: unknown site {}", line + 2, &rec[0])))?;
            let r: usize = rec[1]
                .trim()
                .parse()
                .map_err(|_| data_err(format!("line {}: bad region {:?}", line + 2, &rec[1])))?;
            if r == 0 {
                return Err(data_err(format!("line {}: regions are numbered from 1", line + 2)));
            }
            raw[i] = Some(r - 1);
        }
        let labels = raw
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| data_err(format!("site {} has no region", sites.ids()[i]))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_labels(labels)
    }

    pub fn write_csv<T: Real>(&self, path: impl AsRef<Path>, sites: &SiteSet<T>) -> Result<()> {
        if sites.len() != self.n_sites() {
            return Err(invalid("partition and sites differ in size"));
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "region"])?;
        for (id, l) in sites.ids().iter().zip(&self.labels) {
            w.write_record([id.clone(), (l + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of k-means clustering.
#[derive(Debug, Clone)]
pub struct KMeansPartition {
    pub partition: Partition,
    /// False when the iteration cap was reached before the centroids settled.
    pub converged: bool,
}

const KMEANS_MAX_ITER: usize = 200;
const KMEANS_TOL: f64 = 1e-8;

/// k-means clustering of the standardized coordinates with k-means++
/// seeding. Adjacency is populated.
pub fn build_kmeans_partition<T: Real>(sites: &SiteSet<T>, r: usize, seed: u64) -> Result<KMeansPartition> {
    let d = sites.len();
    if r == 0 || r > d {
        return Err(invalid(format!("cannot form {r} clusters from {d} sites")));
    }
    if r == d {
        let p = Partition::from_labels((0..d).collect())?;
        return Ok(KMeansPartition { partition: compute_adjacency(sites, p), converged: true });
    }
    let pts = standardized(sites);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers: Vec<[f64; 2]> = Vec::with_capacity(r);
    centers.push(pts[rng.random_range(0..d)]);
    let mut best_d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < r {
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut k = d - 1;
            for (i, w) in best_d2.iter().enumerate() {
                if u < *w {
                    k = i;
                    break;
                }
                u -= w;
            }
            k
        } else {
            rng.random_range(0..d)
        };
        let c = pts[pick];
        centers.push(c);
        for (b, p) in best_d2.iter_mut().zip(&pts) {
            *b = b.min(sq_dist(p, &c));
        }
    }

    let mut labels = vec![0usize; d];
    let mut converged = false;
    for _ in 0..KMEANS_MAX_ITER {
        for (l, p) in labels.iter_mut().zip(&pts) {
            *l = nearest(p, &centers);
        }
        let mut sums = vec![[0.0f64; 2]; r];
        let mut counts = vec![0usize; r];
        for (l, p) in labels.iter().zip(&pts) {
            sums[*l][0] += p[0];
            sums[*l][1] += p[1];
            counts[*l] += 1;
        }
        // Reseed empty clusters at the point farthest from its centroid.
        for k in 0..r {
            if counts[k] == 0 {
                let far = (0..d)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&pts[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&pts[b], &centers[labels[b]]))
                            .then(b.cmp(&a))
                    })
                    .expect("some cluster has two members when one is empty");
                let old = labels[far];
                sums[old][0] -= pts[far][0];
                sums[old][1] -= pts[far][1];
                counts[old] -= 1;
                labels[far] = k;
                sums[k] = pts[far];
                counts[k] = 1;
            }
        }
        let mut shift = 0.0f64;
        for k in 0..r {
            let c = [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64];
            shift = shift.max(sq_dist(&c, &centers[k]).sqrt());
            centers[k] = c;
        }
        if shift <= KMEANS_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("k-means stopped after {KMEANS_MAX_ITER} iterations without converging");
    }
    // Final assignment against the final centroids; empty clusters are
    // dropped by compaction.
    let partition = Partition::compacted(&labels)?;
    Ok(KMeansPartition { partition: compute_adjacency(sites, partition), converged })
}

fn standardized<T: Real>(sites: &SiteSet<T>) -> Vec<[f64; 2]> {
    let n = sites.len() as f64;
    let mut mean = [0.0; 2];
    for c in sites.coords() {
        mean[0] += c[0].f64() / n;
        mean[1] += c[1].f64() / n;
    }
    let mut var = [0.0; 2];
    for c in sites.coords() {
        var[0] += (c[0].f64() - mean[0]).powi(2) / n;
        var[1] += (c[1].f64() - mean[1]).powi(2) / n;
    }
    let sd = [
        if var[0] > 0.0 { var[0].sqrt() } else { 1.0 },
        if var[1] > 0.0 { var[1].sqrt() } else { 1.0 },
    ];
    sites
        .coords()
        .iter()
        .map(|c| [(c[0].f64() - mean[0]) / sd[0], (c[1].f64() - mean[1]) / sd[1]])
        .collect()
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centers: &[[f64; 2]]) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < bd {
            bd = d;
            best = k;
        }
    }
    best
}

/// Bins sites into an `nx` by `ny` lattice of equal rectangles over their
/// bounding box. Empty cells are dropped. Adjacency is populated.
pub fn build_grid_partition<T: Real>(sites: &SiteSet<T>, nx: usize, ny: usize) -> Result<Partition> {
    if nx == 0 || ny == 0 {
        return Err(invalid("grid dimensions must be positive"));
    }
    let (x0, y0, x1, y1) = sites.bbox();
    let (w, h) = ((x1 - x0).f64(), (y1 - y0).f64());
    if (nx > 1 && w <= 0.0) || (ny > 1 && h <= 0.0) {
        return Err(invalid("bounding box of the sites is degenerate"));
    }
    let cell = |v: f64, lo: f64, len: f64, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let k = ((v - lo) / len * n as f64).floor();
        (k.max(0.0) as usize).min(n - 1)
    };
    let raw: Vec<usize> = sites
        .coords()
        .iter()
        .map(|c| {
            let ix = cell(c[0].f64(), x0.f64(), w, nx);
            let iy = cell(c[1].f64(), y0.f64(), h, ny);
            iy * nx + ix
        })
        .collect();
    Ok(compute_adjacency(sites, Partition::compacted(&raw)?))
}

/// Site-level neighbour graph: Delaunay edges, or k-nearest neighbours
/// (k = 4) when the sites do not span a triangle.
pub fn site_graph<T: Real>(sites: &SiteSet<T>) -> Vec<(usize, usize)> {
    let d = sites.len();
    let (x0, y0, x1, y1) = sites.bbox();
    let diag = (x1 - x0).f64().hypot((y1 - y0).f64());
    let scale = 1e-9 * if diag > 0.0 { diag } else { 1.0 };
    let mut tri: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    let mut handle_to_site = vec![usize::MAX; d];
    let mut ok = d >= 3 && !collinear(sites);
    if ok {
        for (i, c) in sites.coords().iter().enumerate() {
            let (x, y) = (c[0].f64(), c[1].f64());
            let (jx, jy) = coordinate_jitter(x, y);
            match tri.insert(Point2::new(x + scale * jx, y + scale * jy)) {
                Ok(h) if h.index() < d && handle_to_site[h.index()] == usize::MAX => {
                    handle_to_site[h.index()] = i;
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        ok = ok && tri.num_inner_faces() > 0;
    }
    let mut edges = BTreeSet::new();
    if ok {
        for e in tri.undirected_edges() {
            let [a, b] = e.vertices();
            let (i, j) = (handle_to_site[a.fix().index()], handle_to_site[b.fix().index()]);
            edges.insert((i.min(j), i.max(j)));
        }
    } else {
        let k = 4.min(d - 1);
        for i in 0..d {
            let mut others: Vec<usize> = (0..d).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                sites.distance(i, a).f64().total_cmp(&sites.distance(i, b).f64()).then(a.cmp(&b))
            });
            for &j in others.iter().take(k) {
                edges.insert((i.min(j), i.max(j)));
            }
        }
    }
    edges.into_iter().collect()
}

fn collinear<T: Real>(sites: &SiteSet<T>) -> bool {
    let c: Vec<[f64; 2]> = sites.coords().iter().map(|p| [p[0].f64(), p[1].f64()]).collect();
    let far = (1..c.len()).max_by(|&a, &b| sq_dist(&c[0], &c[a]).total_cmp(&sq_dist(&c[0], &c[b]))).unwrap_or(0);
    let (ux, uy) = (c[far][0] - c[0][0], c[far][1] - c[0][1]);
    let len2 = ux * ux + uy * uy;
    c.iter().all(|p| {
        let cross = ux * (p[1] - c[0][1]) - uy * (p[0] - c[0][0]);
        cross.abs() <= 1e-12 * len2
    })
}

/// Deterministic pseudo-random offsets in [-1, 1] derived from the
/// coordinate bits, so that the triangulation does not depend on site order.
fn coordinate_jitter(x: f64, y: f64) -> (f64, f64) {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let hx = mix(x.to_bits() ^ mix(y.to_bits()));
    let hy = mix(hx);
    let unit = |h: u64| (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
    (unit(hx), unit(hy))
}

/// Regions are adjacent when a site-graph edge joins them.
pub fn compute_adjacency<T: Real>(sites: &SiteSet<T>, partition: Partition) -> Partition {
    assert_eq!(sites.len(), partition.n_sites(), "partition does not match sites");
    let mut adj = BTreeSet::new();
    if partition.n_regions > 1 {
        for (i, j) in site_graph(sites) {
            let (a, b) = (partition.labels[i], partition.labels[j]);
            if a != b {
                adj.insert((a.min(b), a.max(b)));
            }
        }
    }
    Partition { adjacency: adj, ..partition }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // Smallest id becomes the root so roots order groups by smallest member.
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Fuses every group of regions connected through `merge_pairs`. New ids are
/// ordered by the smallest old id in each group; adjacency is contracted.
pub fn merge(partition: &Partition, merge_pairs: &[(usize, usize)]) -> Result<Partition> {
    let mut uf = UnionFind::new(partition.n_regions);
    for &(a, b) in merge_pairs {
        if !partition.are_adjacent(a, b) {
            return Err(invalid(format!("regions {} and {} are not adjacent", a + 1, b + 1)));
        }
        uf.union(a, b);
    }
    let roots: Vec<usize> = (0..partition.n_regions).map(|r| uf.find(r)).collect();
    let mut new_id = vec![usize::MAX; partition.n_regions];
    let mut next = 0;
    for r in 0..partition.n_regions {
        let root = roots[r];
        if new_id[root] == usize::MAX {
            new_id[root] = next;
            next += 1;
        }
    }
    let map: Vec<usize> = roots.iter().map(|&root| new_id[root]).collect();
    let labels = partition.labels.iter().map(|&l| map[l]).collect();
    let adjacency = partition
        .adjacency
        .iter()
        .filter_map(|&(a, b)| {
            let (x, y) = (map[a], map[b]);
            (x != y).then(|| (x.min(y), x.max(y)))
        })
        .collect();
    Ok(Partition { labels, n_regions: next, adjacency })
}

/// Region-to-region map from the groups of `fine` into `coarse`, if `fine`
/// refines `coarse`.
pub fn region_map(fine: &Partition, coarse: &Partition) -> Option<Vec<usize>> {
    if !fine.refines(coarse) {
        return None;
    }
    let mut map = vec![0; fine.n_regions()];
    for (&a, &b) in fine.labels().iter().zip(coarse.labels()) {
        map[a] = b;
    }
    Some(map)
}

fn check_same_sites(a: &Partition, b: &Partition) -> Result<()> {
    if a.n_sites() != b.n_sites() {
        return Err(invalid("partitions label different numbers of sites"));
    }
    Ok(())
}

fn choose2(n: u64) -> u128 {
    (n as u128) * (n.saturating_sub(1) as u128) / 2
}

/// Fraction of site pairs on which both partitions agree about
/// co-membership.
pub fn rand_index(reference: &Partition, candidate: &Partition) -> Result<f64> {
    check_same_sites(reference, candidate)?;
    let d = reference.n_sites() as u64;
    if d < 2 {
        return Err(invalid("rand index needs at least two sites"));
    }
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (&a, &b) in reference.labels.iter().zip(&candidate.labels) {
        *joint.entry((a, b)).or_default() += 1;
    }
    let same_both: u128 = joint.values().map(|&n| choose2(n)).sum();
    let same_ref: u128 = reference.region_sizes().iter().map(|&n| choose2(n as u64)).sum();
    let same_cand: u128 = candidate.region_sizes().iter().map(|&n| choose2(n as u64)).sum();
    let total = choose2(d);
    let agree = total + 2 * same_both - same_ref - same_cand;
    Ok(agree as f64 / total as f64)
}

/// Agreement rate of co-membership between `site` and each other site.
pub fn local_rand_index(reference: &Partition, candidate: &Partition, site: usize) -> Result<f64> {
    check_same_sites(reference, candidate)?;
    let d = reference.n_sites();
    if site >= d {
        return Err(invalid(format!("site index {site} out of range")));
    }
    if d < 2 {
        return Err(invalid("local rand index needs at least two sites"));
    }
    let (ra, ca) = (reference.labels[site], candidate.labels[site]);
    let (mut same_ref, mut same_cand, mut same_both) = (0usize, 0usize, 0usize);
    for k in (0..d).filter(|&k| k != site) {
        let sr = reference.labels[k] == ra;
        let sc = candidate.labels[k] == ca;
        same_ref += sr as usize;
        same_cand += sc as usize;
        same_both += (sr && sc) as usize;
    }
    let agree = same_both + (d - 1 + same_both - same_ref - same_cand);
    Ok(agree as f64 / (d - 1) as f64)
}

//! Sub-template discovery over role-aligned rows: flat k-means scored by the
//! discriminative measure E, compression metrics, PCA and the template tree.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_template_with, assign_roles_cached, AlignedDataset, AssignOptions, BhattacharyyaCost, Template};
use crate::discovery::{discover_formation, DiscoveryConfig};
use crate::ingest::Dataset;
use crate::kmeans::{lloyd, nearest, plus_plus_centers, sq_dist};
use crate::numeric::{CompensatedSum, REDUCE_CHUNK};
use crate::{Error, Result};

/// A hard partition of aligned rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

impl ClusterSet {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Row indices in cluster `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect()
    }

    /// Centroids are the cluster means of `labels`.
    pub fn from_labels(r: &AlignedDataset, k: usize, labels: Vec<usize>) -> Result<Self> {
        let data = complete_rows(r)?;
        let dim = r.dim();
        if labels.len() != r.n_rows() || labels.iter().any(|&l| l >= k) {
            return Err(Error::invalid("labels do not match the rows"));
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (row, &l) in data.chunks_exact(dim).zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return Err(Error::invalid("every cluster needs at least one row"));
        }
        for (c, n) in counts.iter().enumerate() {
            sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= *n as f64);
        }
        let inertia = data
            .chunks_exact(dim)
            .zip(&labels)
            .map(|(row, &l)| sq_dist(row, &sums[l * dim..(l + 1) * dim]))
            .sum();
        Ok(Self {
            k,
            dim,
            centroids: sums,
            labels,
            inertia,
        })
    }
}

fn complete_rows(r: &AlignedDataset) -> Result<&[f64]> {
    if !r.is_complete() {
        return Err(Error::invalid("clustering needs every role occupied in every frame"));
    }
    if r.n_rows() == 0 {
        return Err(Error::invalid("no rows to cluster"));
    }
    Ok(r.values())
}

fn chunked_sum(data: &[f64], dim: usize, f: impl Fn(usize, &[f64]) -> f64 + Sync) -> f64 {
    let partials: Vec<CompensatedSum> = data
        .par_chunks(REDUCE_CHUNK * dim)
        .enumerate()
        .map(|(ci, chunk)| {
            chunk
                .chunks_exact(dim)
                .enumerate()
                .map(|(i, row)| f(ci * REDUCE_CHUNK + i, row))
                .collect()
        })
        .collect();
    let mut total = CompensatedSum::new();
    for p in &partials {
        total.merge(p);
    }
    total.value()
}

/// Mean over rows of `(‖x − μₙ‖ − ‖x − μ‖) / ‖x − μₙ‖`, where `μ` is the row's
/// own centroid and `μₙ` the nearest other centroid. Rows equidistant from
/// both, or sitting on `μₙ`, contribute 0.
pub fn discriminative_score(r: &AlignedDataset, c: &ClusterSet) -> Result<f64> {
    if c.k < 2 {
        return Err(Error::invalid("the discriminative score needs at least two clusters"));
    }
    let data = complete_rows(r)?;
    let dim = r.dim();
    check_set(r, c)?;
    let total = chunked_sum(data, dim, |i, row| {
        let own = c.labels[i];
        let a = sq_dist(row, c.centroid(own)).sqrt();
        let b = (0..c.k)
            .filter(|&j| j != own)
            .map(|j| sq_dist(row, c.centroid(j)))
            .fold(f64::INFINITY, f64::min)
            .sqrt();
        if b > 0.0 {
            (b - a) / b
        } else {
            0.0
        }
    });
    Ok(total / r.n_rows() as f64)
}

fn check_set(r: &AlignedDataset, c: &ClusterSet) -> Result<()> {
    if c.dim != r.dim() || c.labels.len() != r.n_rows() {
        return Err(Error::invalid("cluster set does not match the rows"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wce {
    /// Mean L2 distance of a row to its centroid.
    pub mean: f64,
    /// `mean / N`.
    pub per_player: f64,
}

pub fn within_cluster_error(r: &AlignedDataset, c: &ClusterSet) -> Result<Wce> {
    let data = complete_rows(r)?;
    check_set(r, c)?;
    let total = chunked_sum(data, r.dim(), |i, row| sq_dist(row, c.centroid(c.labels[i])).sqrt());
    let mean = total / r.n_rows() as f64;
    Ok(Wce {
        mean,
        per_player: mean / r.n_roles() as f64,
    })
}

/// Sum of squared distances of rows to their centroid.
pub fn centroid_distortion(r: &AlignedDataset, c: &ClusterSet) -> Result<f64> {
    let data = complete_rows(r)?;
    check_set(r, c)?;
    Ok(chunked_sum(data, r.dim(), |i, row| sq_dist(row, c.centroid(c.labels[i]))))
}

/// `Σ_k Σ_{i,j ∈ C_k} ‖Rᵢ − Rⱼ‖` over ordered pairs. Quadratic in cluster size.
pub fn pairwise_partition_loss(r: &AlignedDataset, c: &ClusterSet) -> Result<f64> {
    let data = complete_rows(r)?;
    check_set(r, c)?;
    let dim = r.dim();
    let members: Vec<Vec<usize>> = (0..c.k).map(|j| c.members(j)).collect();
    let per_row: Vec<f64> = (0..r.n_rows())
        .into_par_iter()
        .map(|i| {
            let row = &data[i * dim..(i + 1) * dim];
            members[c.labels[i]]
                .iter()
                .map(|&j| sq_dist(row, &data[j * dim..(j + 1) * dim]).sqrt())
                .collect::<CompensatedSum>()
                .value()
        })
        .collect();
    Ok(per_row.into_iter().collect::<CompensatedSum>().value())
}

/// Single-cluster partition of all rows.
pub fn single_cluster(r: &AlignedDataset) -> Result<ClusterSet> {
    ClusterSet::from_labels(r, 1, vec![0; r.n_rows()])
}

/// Covariance eigenvalues of the rows, descending, as fractions of their sum.
pub fn pca_variance_explained(r: &AlignedDataset) -> Result<Vec<f64>> {
    let data = complete_rows(r)?;
    let (n, dim) = (r.n_rows(), r.dim());
    if n < 2 {
        return Err(Error::invalid("variance needs at least two rows"));
    }
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, dim, |i, j| data[i * dim + j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("rows have zero variance".into()));
    }
    Ok(eig.into_iter().map(|v| v / total).collect())
}

/// Running sums of [`pca_variance_explained`].
pub fn cumulative(fractions: &[f64]) -> Vec<f64> {
    fractions
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatClusterConfig {
    /// Seed noise as a fraction of each dimension's standard deviation.
    pub noise_frac: f64,
    pub seed: u64,
    /// Independent noisy seedings per `k`; the lowest-inertia run is kept.
    pub restarts: usize,
    /// Score assigned to the one-cluster solution.
    pub single_cluster_score: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FlatClusterConfig {
    fn default() -> Self {
        Self {
            noise_frac: 0.01,
            seed: 0,
            restarts: 8,
            single_cluster_score: 0.0,
            tol: 1e-6,
            max_iters: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub k: usize,
    /// `None` when the candidate was skipped as degenerate.
    pub score: Option<f64>,
    pub inertia: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatClustering {
    pub best: ClusterSet,
    pub score: f64,
    pub candidates: Vec<CandidateScore>,
}

/// K-means for each candidate `k`, every center seeded at the template mean
/// row plus Gaussian noise; the partition with the highest E wins (ties go
/// to the smaller `k`).
pub fn flat_cluster(r: &AlignedDataset, ks: &[usize], template: &Template, cfg: &FlatClusterConfig) -> Result<FlatClustering> {
    let data = complete_rows(r)?;
    let dim = r.dim();
    if template.k() != r.n_roles() {
        return Err(Error::invalid("template and aligned rows have different role counts"));
    }
    if ks.is_empty() {
        return Err(Error::invalid("no candidate cluster counts"));
    }
    let base = template.mean_row();
    let n = r.n_rows() as f64;
    let sd: Vec<f64> = (0..dim)
        .map(|d| {
            let m = data.iter().skip(d).step_by(dim).sum::<f64>() / n;
            (data.iter().skip(d).step_by(dim).map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();

    let mut best: Option<(f64, ClusterSet)> = None;
    let mut candidates = Vec::new();
    for &k in ks {
        let fitted = if k == 0 || k > r.n_rows() {
            warn!("skipping k = {k}: needs between 1 and {} clusters", r.n_rows());
            None
        } else if k == 1 {
            Some((cfg.single_cluster_score, single_cluster(r)?))
        } else {
            match best_of_restarts(data, dim, k, &base, &sd, cfg, |set| discriminative_score(r, set)) {
                Ok(scored) => Some(scored),
                Err(e) => {
                    warn!("skipping k = {k}: {e}");
                    None
                }
            }
        };
        candidates.push(CandidateScore {
            k,
            score: fitted.as_ref().map(|f| f.0),
            inertia: fitted.as_ref().map(|f| f.1.inertia),
        });
        if let Some((score, set)) = fitted {
            let better = match &best {
                None => true,
                Some((s, b)) => score > *s || (score == *s && set.k < b.k),
            };
            if better {
                best = Some((score, set));
            }
        }
    }
    let (score, best) = best.ok_or_else(|| Error::Degenerate("every candidate cluster count was degenerate".into()))?;
    Ok(FlatClustering { best, score, candidates })
}

fn best_of_restarts(
    data: &[f64],
    dim: usize,
    k: usize,
    base: &[f64],
    sd: &[f64],
    cfg: &FlatClusterConfig,
    score: impl Fn(&ClusterSet) -> Result<f64>,
) -> Result<(f64, ClusterSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut best: Option<ClusterSet> = None;
    let mut last_err = None;
    for _ in 0..cfg.restarts.max(1) {
        let init: Vec<f64> = (0..k * dim)
            .map(|i| {
                let d = i % dim;
                let noise = Normal::new(0.0, (cfg.noise_frac * sd[d]).max(1e-12)).expect("finite std");
                base[d] + noise.sample(&mut rng)
            })
            .collect();
        match lloyd(data, dim, &init, cfg.tol, cfg.max_iters) {
            Ok(out) if has_duplicate_centers(&out.centers, dim) => {
                last_err = Some(Error::Degenerate(format!("{k} clusters collapse onto fewer distinct centers")));
            }
            Ok(out) => {
                let set = ClusterSet {
                    k,
                    dim,
                    inertia: out.final_inertia(),
                    centroids: out.centers,
                    labels: out.labels,
                };
                if best.as_ref().is_none_or(|b| set.inertia < b.inertia) {
                    best = Some(set);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let best = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Degenerate("k-means failed".into())))?;
    Ok((score(&best)?, best))
}

fn has_duplicate_centers(centers: &[f64], dim: usize) -> bool {
    let rows: Vec<&[f64]> = centers.chunks_exact(dim).collect();
    rows.iter().enumerate().any(|(i, a)| rows[i + 1..].iter().any(|b| a == b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub wce: f64,
    pub wce_per_player: f64,
    /// `None` for `k = 1`.
    pub score: Option<f64>,
}

/// Extra k-means++ restarts tried for each `k` of a sweep.
const SWEEP_RESTARTS: usize = 4;

/// Nested k-means over `1..=k_max`: each `k` starts from the `k − 1`
/// solution plus the row farthest from its centroid, alongside a few seeded
/// k-means++ starts. Stops early (with a warning) when the rows cannot fill
/// more clusters.
pub fn kmeans_sweep(r: &AlignedDataset, k_max: usize, tol: f64) -> Result<Vec<(ClusterSet, SweepPoint)>> {
    let data = complete_rows(r)?;
    let dim = r.dim();
    let mut centers = single_cluster(r)?.centroids;
    let mut out = Vec::new();
    for k in 1..=k_max.min(r.n_rows()) {
        if k > 1 {
            let far = data
                .chunks_exact(dim)
                .enumerate()
                .map(|(i, row)| (i, nearest(row, &centers, dim).1))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("rows are non-empty");
            if far.1 == 0.0 {
                warn!("k-means sweep stops at k = {}: every row sits on a centroid", k - 1);
                break;
            }
            centers.extend_from_slice(&data[far.0 * dim..(far.0 + 1) * dim]);
        }
        let mut fit = match lloyd(data, dim, &centers, tol, 1000) {
            Ok(f) => f,
            Err(e) => {
                warn!("k-means sweep stops at k = {}: {e}", k - 1);
                break;
            }
        };
        // The nested start can settle in a poor minimum; a few seeded
        // k-means++ starts guard against that. Lowest inertia wins, nested first.
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        for _ in 0..SWEEP_RESTARTS {
            let Ok(init) = plus_plus_centers(data, dim, k, &mut rng) else { break };
            if let Ok(f) = lloyd(data, dim, &init, tol, 1000) {
                if f.final_inertia() < fit.final_inertia() {
                    fit = f;
                }
            }
        }
        centers = fit.centers.clone();
        let set = ClusterSet {
            k,
            dim,
            inertia: fit.final_inertia(),
            centroids: fit.centers,
            labels: fit.labels,
        };
        let wce = within_cluster_error(r, &set)?;
        let score = if k > 1 { Some(discriminative_score(r, &set)?) } else { None };
        out.push((
            set,
            SweepPoint {
                k,
                wce: wce.mean,
                wce_per_player: wce.per_player,
                score,
            },
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Root is depth 1.
    pub max_depth: usize,
    /// Nodes with fewer rows are not split, and no split may create a smaller child.
    pub min_node_rows: usize,
    /// Minimum relative drop in centroid distortion a split must achieve.
    pub min_improvement: f64,
    /// Minimum discriminative score E a split must achieve.
    pub min_split_score: f64,
    /// Cluster counts tried at each node; binary splits by default.
    pub k_candidates: Vec<usize>,
    pub discovery: DiscoveryConfig,
    pub cluster: FlatClusterConfig,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_depth: 3,
            min_node_rows: 200,
            min_improvement: 0.01,
            min_split_score: 0.35,
            k_candidates: vec![2],
            discovery: DiscoveryConfig::default(),
            cluster: FlatClusterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub k: usize,
    pub score: f64,
    /// Centroid distortion of the node's aligned rows under the split.
    pub distortion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Dotted path from the root, e.g. `0.1.0`.
    pub id: String,
    pub depth: usize,
    /// Indices into the dataset the tree was learned on, ascending.
    pub rows: Vec<usize>,
    pub template: Template,
    /// Centroid distortion of the node's aligned rows about their mean.
    pub distortion: f64,
    pub split: Option<SplitInfo>,
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    fn visit<'a>(&'a self, out: &mut Vec<&'a TreeNode>) {
        out.push(self);
        for c in &self.children {
            c.visit(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateTree {
    pub root: TreeNode,
}

impl TemplateTree {
    /// Depth-first, parents before children.
    pub fn nodes(&self) -> Vec<&TreeNode> {
        let mut out = Vec::new();
        self.root.visit(&mut out);
        out
    }

    pub fn leaves(&self) -> Vec<&TreeNode> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    pub fn depth(&self) -> usize {
        self.nodes().iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// Grows a tree of templates: each node learns and aligns its own template
/// against its parent's, assigns roles, and splits its rows by flat
/// clustering while the split is worthwhile.
pub fn learn_tree(ds: &Dataset, g: &Template, cfg: &TreeConfig) -> Result<TemplateTree> {
    let rows: Vec<usize> = (0..ds.n_frames()).collect();
    Ok(TemplateTree {
        root: grow(ds, rows, g, "0".into(), 1, cfg)?,
    })
}

fn grow(ds: &Dataset, rows: Vec<usize>, parent: &Template, id: String, depth: usize, cfg: &TreeConfig) -> Result<TreeNode> {
    let sub = ds.subset(&rows)?;
    let found = discover_formation(&sub, &cfg.discovery)?;
    let alignment = align_template_with(&found.formation, parent, &BhattacharyyaCost)?;
    let aligned = assign_roles_cached(&sub, &alignment, &found.scores, AssignOptions::default())?;
    let template = alignment.template;
    let distortion = centroid_distortion(&aligned, &single_cluster(&aligned)?)?;

    let mut node = TreeNode {
        id,
        depth,
        rows,
        template,
        distortion,
        split: None,
        children: Vec::new(),
    };
    if depth >= cfg.max_depth || node.rows.len() < 2 * cfg.min_node_rows {
        return Ok(node);
    }
    let ks: Vec<usize> = cfg
        .k_candidates
        .iter()
        .copied()
        .filter(|&k| k >= 2 && k * cfg.min_node_rows <= node.rows.len())
        .collect();
    if ks.is_empty() {
        return Ok(node);
    }
    let fc = match flat_cluster(&aligned, &ks, &node.template, &cfg.cluster) {
        Ok(fc) => fc,
        Err(Error::Degenerate(msg)) => {
            warn!("node {}: no split ({msg})", node.id);
            return Ok(node);
        }
        Err(e) => return Err(e),
    };
    let improvement = if distortion > 0.0 {
        (distortion - fc.best.inertia) / distortion
    } else {
        0.0
    };
    let accept = fc.best.k >= 2
        && fc.score >= cfg.min_split_score
        && improvement >= cfg.min_improvement
        && fc.best.sizes().iter().all(|&s| s >= cfg.min_node_rows);
    if !accept {
        return Ok(node);
    }
    node.split = Some(SplitInfo {
        k: fc.best.k,
        score: fc.score,
        distortion: fc.best.inertia,
    });
    let child_rows: Vec<Vec<usize>> = (0..fc.best.k)
        .map(|c| fc.best.members(c).into_iter().map(|i| node.rows[i]).collect())
        .collect();
    let parent_template = node.template.clone();
    let base_id = node.id.clone();
    node.children = child_rows
        .into_par_iter()
        .enumerate()
        .map(|(c, rows)| grow(ds, rows, &parent_template, format!("{base_id}.{c}"), depth + 1, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(node)
}

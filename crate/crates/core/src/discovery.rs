//! Formation discovery: player-mean initialization, k-means to convergence,
//! and an EM loop that falls back to spherical ("soft k-means") updates
//! whenever a component's covariance becomes too elongated.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{eigenvalue_ratio, floor_eigenvalues, Gaussian2D, SymMat2, Vec2, DEFAULT_EIGEN_FLOOR};
use crate::ingest::{flatten, Dataset, FlatPoints};
use crate::kmeans::lloyd;
use crate::numeric::{CompensatedSum, REDUCE_CHUNK};
use crate::registry::{initializers, Named};
use crate::{Error, Result};

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Unordered set of `K` role distributions whose weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FormationRepr", into = "FormationRepr")]
pub struct Formation {
    components: Vec<Gaussian2D>,
}

#[derive(Serialize, Deserialize)]
struct FormationRepr {
    components: Vec<Gaussian2D>,
}

impl TryFrom<FormationRepr> for Formation {
    type Error = Error;
    fn try_from(r: FormationRepr) -> Result<Self> {
        Formation::new(r.components)
    }
}

impl From<Formation> for FormationRepr {
    fn from(f: Formation) -> Self {
        FormationRepr {
            components: f.components,
        }
    }
}

impl Formation {
    pub fn new(components: Vec<Gaussian2D>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("formation needs at least one component"));
        }
        let total: f64 = components.iter().map(Gaussian2D::weight).sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("formation weights sum to {total}, not 1")));
        }
        Ok(Self { components })
    }

    /// Same distributions, every weight set to `1/K`.
    pub fn with_uniform_weights(&self) -> Formation {
        let w = 1.0 / self.k() as f64;
        Formation {
            components: self
                .components
                .iter()
                .map(|g| g.with_weight(w).expect("1/K is a valid weight"))
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Gaussian2D] {
        &self.components
    }

    pub fn into_components(self) -> Vec<Gaussian2D> {
        self.components
    }

    /// `ln Σₖ πₖ 𝒩(x; μₖ, Σₖ)`
    pub fn log_density(&self, x: Vec2) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut acc = 0.0;
        for g in &self.components {
            let v = g.weight().ln() + g.log_pdf(x);
            if v > max {
                acc = acc * (max - v).exp() + 1.0;
                max = v;
            } else {
                acc += (v - max).exp();
            }
        }
        max + acc.ln()
    }

    pub fn eigen_ratios(&self) -> Vec<f64> {
        self.components.iter().map(eigenvalue_ratio).collect()
    }

    pub fn max_eigen_ratio(&self) -> f64 {
        self.eigen_ratios().into_iter().fold(1.0, f64::max)
    }
}

/// Which M-step produced an EM state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateKind {
    /// State built from the k-means partition, before any EM update.
    Init,
    FullGmm,
    SoftKMeans,
}

impl UpdateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            UpdateKind::Init => "init",
            UpdateKind::FullGmm => "full-gmm",
            UpdateKind::SoftKMeans => "soft-k-means",
        }
    }
}

/// Which components fall back to a spherical update when the eigenvalue guard trips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuardScope {
    /// Every component, if any one violates the ratio band.
    #[default]
    Global,
    /// Only the violating components.
    PerComponent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmRecord {
    pub iteration: usize,
    /// Average per-point log-likelihood of the state after this update.
    pub avg_log_likelihood: f64,
    pub update_kind: UpdateKind,
    pub eigen_ratios: Vec<f64>,
}

impl EmRecord {
    pub fn max_eigen_ratio(&self) -> f64 {
        self.eigen_ratios.iter().copied().fold(1.0, f64::max)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub records: Vec<EmRecord>,
    pub converged: bool,
}

impl EmTrace {
    pub fn count(&self, kind: UpdateKind) -> usize {
        self.records.iter().filter(|r| r.update_kind == kind).count()
    }

    /// Largest log-likelihood drop across a full-covariance update (0 when none drops).
    pub fn worst_full_update_drop(&self) -> f64 {
        self.records
            .windows(2)
            .filter(|w| w[1].update_kind == UpdateKind::FullGmm)
            .map(|w| w[0].avg_log_likelihood - w[1].avg_log_likelihood)
            .fold(0.0, f64::max)
    }

    /// `iteration,loglik,update_kind,max_eig_ratio`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "loglik", "update_kind", "max_eig_ratio"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.avg_log_likelihood.to_string(),
                r.update_kind.as_str().to_string(),
                r.max_eigen_ratio().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn default_k() -> usize {
    10
}
fn default_ratio() -> f64 {
    2.0
}
fn default_em_tol() -> f64 {
    1e-6
}
fn default_max_iters() -> usize {
    500
}
fn default_kmeans_tol() -> f64 {
    1e-6
}
fn default_kmeans_max_iters() -> usize {
    1000
}
fn default_init() -> String {
    "player-means".into()
}
fn default_floor() -> f64 {
    DEFAULT_EIGEN_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    /// Upper bound `r` on λ₁/λ₂ before the spherical fallback kicks in; must exceed 1.
    #[serde(default = "default_ratio")]
    pub eig_ratio_bound: f64,
    /// Stop once the relative average log-likelihood gain falls below this.
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_kmeans_tol")]
    pub kmeans_tol: f64,
    #[serde(default = "default_kmeans_max_iters")]
    pub kmeans_max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    /// Name of a registered [`Initializer`].
    #[serde(default = "default_init")]
    pub init: String,
    #[serde(default)]
    pub guard_scope: GuardScope,
    #[serde(default = "default_floor")]
    pub eigen_floor: f64,
    /// Pin every mixture weight to `1/K` in each M-step.
    #[serde(default)]
    pub uniform_weights: bool,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            eig_ratio_bound: default_ratio(),
            em_tol: default_em_tol(),
            max_iters: default_max_iters(),
            kmeans_tol: default_kmeans_tol(),
            kmeans_max_iters: default_kmeans_max_iters(),
            seed: 0,
            init: default_init(),
            guard_scope: GuardScope::Global,
            eigen_floor: default_floor(),
            uniform_weights: false,
        }
    }
}

impl DiscoveryConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if !(self.eig_ratio_bound > 1.0) {
            return Err(Error::invalid("eigenvalue ratio bound must exceed 1"));
        }
        if !(self.em_tol > 0.0 && self.kmeans_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if !(self.eigen_floor > 0.0) {
            return Err(Error::invalid("eigenvalue floor must be positive"));
        }
        if !initializers().contains(&self.init) {
            initializers().get(&self.init)?;
        }
        Ok(())
    }
}

/// Chooses the k-means starting centers.
pub trait Initializer: Named + Send + Sync {
    /// `canonical` holds every point of `ds` in a fixed, order-independent sequence.
    fn centers(&self, ds: &Dataset, canonical: &[Vec2], k: usize, seed: u64) -> Result<Vec<Vec2>>;
}

/// Each agent's mean position over all frames.
pub struct PlayerMeansInit;

impl Named for PlayerMeansInit {
    fn name(&self) -> &'static str {
        "player-means"
    }
}

impl Initializer for PlayerMeansInit {
    fn centers(&self, ds: &Dataset, _canonical: &[Vec2], k: usize, _seed: u64) -> Result<Vec<Vec2>> {
        if ds.n_agents() != k {
            return Err(Error::invalid(format!(
                "player-mean initialization needs one agent per role ({} agents, k = {k})",
                ds.n_agents()
            )));
        }
        Ok(player_mean_init(ds))
    }
}

/// `k` distinct data points drawn uniformly with a seeded generator.
pub struct RandomPointsInit;

impl Named for RandomPointsInit {
    fn name(&self) -> &'static str {
        "random"
    }
}

impl Initializer for RandomPointsInit {
    fn centers(&self, _ds: &Dataset, canonical: &[Vec2], k: usize, seed: u64) -> Result<Vec<Vec2>> {
        if k > canonical.len() {
            return Err(Error::invalid("more centers requested than points available"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(index::sample(&mut rng, canonical.len(), k)
            .into_iter()
            .map(|i| canonical[i])
            .collect())
    }
}

/// Mean position of every agent across all frames, in roster order.
pub fn player_mean_init(ds: &Dataset) -> Vec<Vec2> {
    ds.agent_tracks()
        .into_iter()
        .map(|track| {
            let n = track.len() as f64;
            let sx: CompensatedSum = track.iter().map(|p| p[0]).collect();
            let sy: CompensatedSum = track.iter().map(|p| p[1]).collect();
            [sx.value() / n, sy.value() / n]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansReport {
    pub init_centers: Vec<Vec2>,
    pub centers: Vec<Vec2>,
    /// Sum of squared distances after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn to_flat(points: &[Vec2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

fn to_points(flat: &[f64]) -> Vec<Vec2> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Lloyd's algorithm on 2-D points from `init`, run until no center moves by `tol`.
pub fn kmeans(points: &FlatPoints, init: &[Vec2], tol: f64) -> Result<KMeansReport> {
    kmeans_points(points.points(), init, tol, default_kmeans_max_iters())
}

fn kmeans_points(points: &[Vec2], init: &[Vec2], tol: f64, max_iters: usize) -> Result<KMeansReport> {
    let out = lloyd(&to_flat(points), 2, &to_flat(init), tol, max_iters)?;
    Ok(KMeansReport {
        init_centers: init.to_vec(),
        centers: to_points(&out.centers),
        inertia_trace: out.inertia_trace,
        iterations: out.iterations,
        converged: out.converged,
    })
}

/// Per-component quantities reused for every point in an E-step.
struct Kernel {
    mean: Vec2,
    precision: SymMat2,
    offset: f64,
}

fn kernels(state: &Formation) -> Vec<Kernel> {
    let log_two_pi = (2.0 * std::f64::consts::PI).ln();
    state
        .components()
        .iter()
        .map(|g| Kernel {
            mean: g.mean(),
            precision: g.precision(),
            offset: g.weight().ln() - log_two_pi - 0.5 * g.log_det(),
        })
        .collect()
}

/// Responsibility-weighted sufficient statistics, with moments taken about
/// each component's current mean.
#[derive(Clone)]
struct Stats {
    nk: Vec<f64>,
    s1: Vec<[f64; 2]>,
    s2: Vec<[f64; 3]>,
    loglik: CompensatedSum,
    n: usize,
}

impl Stats {
    fn zeros(k: usize) -> Self {
        Self {
            nk: vec![0.0; k],
            s1: vec![[0.0; 2]; k],
            s2: vec![[0.0; 3]; k],
            loglik: CompensatedSum::new(),
            n: 0,
        }
    }

    fn merge(&mut self, o: &Stats) {
        for k in 0..self.nk.len() {
            self.nk[k] += o.nk[k];
            self.s1[k][0] += o.s1[k][0];
            self.s1[k][1] += o.s1[k][1];
            for c in 0..3 {
                self.s2[k][c] += o.s2[k][c];
            }
        }
        self.loglik.merge(&o.loglik);
        self.n += o.n;
    }

    fn avg_loglik(&self) -> f64 {
        self.loglik.value() / self.n as f64
    }
}

fn e_step(state: &Formation, points: &[Vec2]) -> Stats {
    let ks = kernels(state);
    let k = ks.len();
    let partials: Vec<Stats> = points
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut st = Stats::zeros(k);
            let mut lj = vec![0.0f64; k];
            for x in chunk {
                let mut max = f64::NEG_INFINITY;
                for (v, kern) in lj.iter_mut().zip(&ks) {
                    let d = [x[0] - kern.mean[0], x[1] - kern.mean[1]];
                    *v = kern.offset - 0.5 * kern.precision.quad(d);
                    max = max.max(*v);
                }
                let mut total = 0.0;
                for v in lj.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                st.loglik.add(max + total.ln());
                let inv = 1.0 / total;
                for (c, kern) in ks.iter().enumerate() {
                    let r = lj[c] * inv;
                    if r == 0.0 {
                        continue;
                    }
                    let d = [x[0] - kern.mean[0], x[1] - kern.mean[1]];
                    st.nk[c] += r;
                    st.s1[c][0] += r * d[0];
                    st.s1[c][1] += r * d[1];
                    st.s2[c][0] += r * d[0] * d[0];
                    st.s2[c][1] += r * d[0] * d[1];
                    st.s2[c][2] += r * d[1] * d[1];
                }
            }
            st.n = chunk.len();
            st
        })
        .collect();
    let mut total = Stats::zeros(k);
    for p in &partials {
        total.merge(p);
    }
    total
}

#[derive(Debug, Clone, Copy)]
struct StepOptions {
    floor: f64,
    uniform_weights: bool,
}

fn m_step(state: &Formation, st: &Stats, spherical: &[bool], opts: StepOptions) -> Result<Formation> {
    let k = state.k();
    let total_nk: f64 = st.nk.iter().sum();
    let mut comps = Vec::with_capacity(k);
    for c in 0..k {
        let old = &state.components()[c];
        let nk = st.nk[c];
        let weight = if opts.uniform_weights {
            1.0 / k as f64
        } else {
            (nk / total_nk).clamp(0.0, 1.0)
        };
        // A component that lost all responsibility keeps its previous shape.
        if nk <= 1e-12 * st.n as f64 {
            let cov = if spherical[c] {
                SymMat2::scaled_identity(0.5 * old.cov().trace())
            } else {
                old.cov()
            };
            comps.push(Gaussian2D::regularized(old.mean(), cov, weight, opts.floor)?);
            continue;
        }
        let delta = [st.s1[c][0] / nk, st.s1[c][1] / nk];
        let mean = [old.mean()[0] + delta[0], old.mean()[1] + delta[1]];
        let xx = st.s2[c][0] / nk - delta[0] * delta[0];
        let xy = st.s2[c][1] / nk - delta[0] * delta[1];
        let yy = st.s2[c][2] / nk - delta[1] * delta[1];
        let cov = if spherical[c] {
            SymMat2::scaled_identity((0.5 * (xx + yy)).max(opts.floor))
        } else {
            floor_eigenvalues(SymMat2::new(xx, xy, yy), opts.floor)
        };
        comps.push(Gaussian2D::new(mean, cov, weight)?);
    }
    renormalize(comps)
}

fn renormalize(comps: Vec<Gaussian2D>) -> Result<Formation> {
    let total: f64 = comps.iter().map(Gaussian2D::weight).sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all mixture weights vanished".into()));
    }
    let comps = comps
        .into_iter()
        .map(|g| g.with_weight((g.weight() / total).min(1.0)))
        .collect::<Result<Vec<_>>>()?;
    Formation::new(comps)
}

/// One full-covariance EM update over every point.
pub fn em_step_full(state: &Formation, points: &FlatPoints) -> Result<Formation> {
    let st = e_step(state, points.points());
    m_step(state, &st, &vec![false; state.k()], default_step_options())
}

/// One EM update with each covariance constrained to `c·I`.
pub fn em_step_spherical(state: &Formation, points: &FlatPoints) -> Result<Formation> {
    let st = e_step(state, points.points());
    m_step(state, &st, &vec![true; state.k()], default_step_options())
}

fn default_step_options() -> StepOptions {
    StepOptions {
        floor: DEFAULT_EIGEN_FLOOR,
        uniform_weights: false,
    }
}

/// Mean per-point log-likelihood of `points` under the mixture.
pub fn average_log_likelihood_points(f: &Formation, points: &[Vec2]) -> f64 {
    let partials: Vec<CompensatedSum> = points
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| chunk.iter().map(|&x| f.log_density(x)).collect())
        .collect();
    let mut total = CompensatedSum::new();
    for p in &partials {
        total.merge(p);
    }
    total.value() / points.len() as f64
}

/// Mixture state built from a hard partition: weights are cluster shares,
/// covariances the cluster scatter. Clusters with fewer than three points
/// get a spherical covariance at the pooled per-axis variance.
fn state_from_partition(points: &[Vec2], centers: &[Vec2], floor: f64) -> Result<Formation> {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    let mut scatter = vec![[0.0f64; 3]; k];
    for p in points {
        let (c, _) = crate::kmeans::nearest(p, &to_flat(centers), 2);
        let d = [p[0] - centers[c][0], p[1] - centers[c][1]];
        counts[c] += 1;
        scatter[c][0] += d[0] * d[0];
        scatter[c][1] += d[0] * d[1];
        scatter[c][2] += d[1] * d[1];
    }
    let n = points.len() as f64;
    let pooled = {
        let mx = points.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = points.iter().map(|p| p[1]).sum::<f64>() / n;
        let v: f64 = points.iter().map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2)).sum::<f64>();
        (0.5 * v / n).max(floor)
    };
    let comps = (0..k)
        .map(|c| {
            let cov = if counts[c] < 3 {
                SymMat2::scaled_identity(pooled)
            } else {
                let m = counts[c] as f64;
                SymMat2::new(scatter[c][0] / m, scatter[c][1] / m, scatter[c][2] / m)
            };
            let weight = (counts[c] as f64 / n).max(1e-12);
            Gaussian2D::regularized(centers[c], cov, weight.min(1.0), floor)
        })
        .collect::<Result<Vec<_>>>()?;
    renormalize(comps)
}

/// Points sorted by `(x, y)` bit-order, so that row order cannot influence the fit.
fn canonical_points(points: &[Vec2]) -> Vec<Vec2> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    sorted
}

/// Log densities `ln 𝒩(x; μₖ, Σₖ)` of every point of a dataset under every
/// component of the formation it was fitted with, kept so that role
/// assignment on the training data does not recompute them.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleScores {
    pub n_frames: usize,
    pub n_agents: usize,
    pub k: usize,
    /// Row-major `(S·N) × K`.
    pub log_pdf: Vec<f64>,
}

impl RoleScores {
    pub fn compute(ds: &Dataset, f: &Formation) -> Self {
        let flat = flatten(ds);
        let k = f.k();
        let mut log_pdf = vec![0.0; flat.len() * k];
        log_pdf
            .par_chunks_mut(k)
            .zip(flat.points().par_iter())
            .for_each(|(row, &x)| {
                for (v, g) in row.iter_mut().zip(f.components()) {
                    *v = g.log_pdf(x);
                }
            });
        Self {
            n_frames: ds.n_frames(),
            n_agents: ds.n_agents(),
            k,
            log_pdf,
        }
    }

    #[inline]
    pub fn get(&self, frame: usize, agent: usize, component: usize) -> f64 {
        self.log_pdf[(frame * self.n_agents + agent) * self.k + component]
    }
}

/// Everything formation discovery produces.
#[derive(Debug, Clone)]
pub struct Discovery {
    pub formation: Formation,
    pub trace: EmTrace,
    pub kmeans: KMeansReport,
    pub scores: RoleScores,
}

/// Player-mean (or other) initialization, k-means to convergence, then the
/// eigenvalue-guarded EM loop. Expects a centered dataset.
///
/// The returned formation is the highest-likelihood EM state visited.
pub fn discover_formation(ds: &Dataset, cfg: &DiscoveryConfig) -> Result<Discovery> {
    cfg.validate()?;
    let flat = flatten(ds);
    if cfg.k > flat.len() {
        return Err(Error::invalid(format!(
            "k = {} exceeds the number of points ({})",
            cfg.k,
            flat.len()
        )));
    }
    let points = canonical_points(flat.points());
    let init = initializers().get(&cfg.init)?.centers(ds, &points, cfg.k, cfg.seed)?;
    let km = kmeans_points(&points, &init, cfg.kmeans_tol, cfg.kmeans_max_iters)?;
    let state = state_from_partition(&points, &km.centers, cfg.eigen_floor)?;
    let (formation, trace) = run_em(state, &points, cfg)?;
    let scores = RoleScores::compute(ds, &formation);
    Ok(Discovery {
        formation,
        trace,
        kmeans: km,
        scores,
    })
}

fn guard(state: &Formation, cfg: &DiscoveryConfig) -> Vec<bool> {
    let violating: Vec<bool> = state
        .eigen_ratios()
        .into_iter()
        .map(|r| !(r < cfg.eig_ratio_bound && r > 1.0 / cfg.eig_ratio_bound))
        .collect();
    match cfg.guard_scope {
        GuardScope::Global => vec![violating.iter().any(|&v| v); violating.len()],
        GuardScope::PerComponent => violating,
    }
}

/// Runs the guarded EM loop from `state` over `points`.
pub fn fit_mixture(state: Formation, points: &FlatPoints, cfg: &DiscoveryConfig) -> Result<(Formation, EmTrace)> {
    cfg.validate()?;
    run_em(state, &canonical_points(points.points()), cfg)
}

fn run_em(mut state: Formation, points: &[Vec2], cfg: &DiscoveryConfig) -> Result<(Formation, EmTrace)> {
    let opts = StepOptions {
        floor: cfg.eigen_floor,
        uniform_weights: cfg.uniform_weights,
    };
    let mut stats = e_step(&state, points);
    let mut ll = stats.avg_loglik();
    let mut trace = EmTrace::default();
    trace.records.push(EmRecord {
        iteration: 0,
        avg_log_likelihood: ll,
        update_kind: UpdateKind::Init,
        eigen_ratios: state.eigen_ratios(),
    });
    let mut best = (ll, state.clone());

    for iteration in 1..=cfg.max_iters {
        let spherical = guard(&state, cfg);
        let kind = if spherical.iter().any(|&s| s) {
            UpdateKind::SoftKMeans
        } else {
            UpdateKind::FullGmm
        };
        let next = m_step(&state, &stats, &spherical, opts)?;
        let next_stats = e_step(&next, points);
        let next_ll = next_stats.avg_loglik();
        trace.records.push(EmRecord {
            iteration,
            avg_log_likelihood: next_ll,
            update_kind: kind,
            eigen_ratios: next.eigen_ratios(),
        });
        let gain = (next_ll - ll) / ll.abs().max(f64::MIN_POSITIVE);
        if next_ll > best.0 {
            best = (next_ll, next.clone());
        }
        let next_kind_same = guard(&next, cfg) == spherical;
        state = next;
        stats = next_stats;
        ll = next_ll;
        if gain.abs() < cfg.em_tol && next_kind_same {
            trace.converged = true;
            break;
        }
    }
    Ok((best.1, trace))
}

/// Produces a formation from a prepared (centered) dataset.
pub trait FormationLearner: Named + Send + Sync {
    fn learn(&self, ds: &Dataset, cfg: &DiscoveryConfig) -> Result<LearnedFormation>;
}

#[derive(Debug, Clone)]
pub enum LearnerTrace {
    Soft { em: EmTrace, kmeans: KMeansReport },
    Hard(crate::baseline::HardEmTrace),
}

#[derive(Debug, Clone)]
pub struct LearnedFormation {
    pub formation: Formation,
    pub trace: LearnerTrace,
    pub converged: bool,
    /// Per-point component log densities, when the learner computed them.
    pub scores: Option<RoleScores>,
}

impl LearnedFormation {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        match &self.trace {
            LearnerTrace::Soft { em, .. } => em.write_csv(out),
            LearnerTrace::Hard(t) => t.write_csv(out),
        }
    }
}

/// Soft-assignment mixture learner ([`discover_formation`]).
pub struct SoftEmLearner;

impl Named for SoftEmLearner {
    fn name(&self) -> &'static str {
        "soft-em"
    }
}

impl FormationLearner for SoftEmLearner {
    fn learn(&self, ds: &Dataset, cfg: &DiscoveryConfig) -> Result<LearnedFormation> {
        let d = discover_formation(ds, cfg)?;
        Ok(LearnedFormation {
            converged: d.trace.converged,
            formation: d.formation,
            trace: LearnerTrace::Soft {
                em: d.trace,
                kmeans: d.kmeans,
            },
            scores: Some(d.scores),
        })
    }
}

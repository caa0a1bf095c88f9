//! Hard-assignment EM: the Hungarian-per-frame baseline the soft method is
//! compared against, plus the overlap penalty it minimizes.
//!
//! Role distributions here are Gaussians (the original method used
//! nonparametric heat maps) so both methods can be compared with the same
//! likelihood and divergence measures.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};
use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedDataset, Template};
use crate::assignment::{hungarian, CostMatrix};
use crate::discovery::{
    average_log_likelihood_points, DiscoveryConfig, FormationLearner, LearnedFormation, LearnerTrace,
};
use crate::geometry::{differential_entropy, Gaussian2D, SymMat2, DEFAULT_EIGEN_FLOOR};
use crate::ingest::{flatten, Dataset};
use crate::numeric::CompensatedSum;
use crate::registry::Named;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardEmRecord {
    pub iteration: usize,
    /// Sum of per-frame assignment costs under the distributions used for assigning.
    pub total_cost: f64,
    /// Average log-likelihood of the refitted distributions.
    pub avg_log_likelihood: f64,
    /// Frames whose agent → role map differs from the previous iteration.
    pub changed_frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HardEmTrace {
    pub records: Vec<HardEmRecord>,
    /// Stopped because no frame changed its assignment.
    pub converged: bool,
    /// Stopped because an earlier assignment state came back.
    pub oscillated: bool,
}

impl HardEmTrace {
    /// True when the likelihood ever went down between iterations, or the run cycled.
    pub fn is_non_monotone(&self) -> bool {
        self.oscillated
            || self
                .records
                .windows(2)
                .any(|w| w[1].avg_log_likelihood < w[0].avg_log_likelihood - 1e-12)
    }

    /// `iteration,total_cost,loglik,changed_frames`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "total_cost", "loglik", "changed_frames"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                r.total_cost.to_string(),
                r.avg_log_likelihood.to_string(),
                r.changed_frames.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HardEmResult {
    /// Final role distributions, in the initial template's role order.
    pub template: Template,
    pub aligned: AlignedDataset,
    pub trace: HardEmTrace,
}

/// Each agent's own distribution over the whole dataset, as if it held one
/// role for the entire game. Weights are uniform.
pub fn player_distributions(ds: &Dataset) -> Result<Template> {
    let n = ds.n_agents();
    let perms = vec![(0..n).collect::<Vec<_>>(); ds.n_frames()];
    let uniform = vec![Gaussian2D::standard().with_weight(1.0 / n as f64)?; n];
    refit(ds, &perms, &Template::new(uniform)?, DEFAULT_EIGEN_FLOOR)
}

/// Fits each role's Gaussian to the points assigned to it. Roles nobody
/// occupies keep their previous distribution.
fn refit(ds: &Dataset, perms: &[Vec<usize>], prev: &Template, floor: f64) -> Result<Template> {
    let k = prev.k();
    let mut count = vec![0usize; k];
    let mut sx = vec![CompensatedSum::new(); k];
    let mut sy = vec![CompensatedSum::new(); k];
    for (f, perm) in ds.frames().iter().zip(perms) {
        for (p, &r) in f.positions.iter().zip(perm) {
            count[r] += 1;
            sx[r].add(p[0]);
            sy[r].add(p[1]);
        }
    }
    let means: Vec<[f64; 2]> = (0..k)
        .map(|r| {
            let c = count[r].max(1) as f64;
            [sx[r].value() / c, sy[r].value() / c]
        })
        .collect();
    let mut sxx = vec![CompensatedSum::new(); k];
    let mut sxy = vec![CompensatedSum::new(); k];
    let mut syy = vec![CompensatedSum::new(); k];
    for (f, perm) in ds.frames().iter().zip(perms) {
        for (p, &r) in f.positions.iter().zip(perm) {
            let d = [p[0] - means[r][0], p[1] - means[r][1]];
            sxx[r].add(d[0] * d[0]);
            sxy[r].add(d[0] * d[1]);
            syy[r].add(d[1] * d[1]);
        }
    }
    let total: usize = count.iter().sum();
    let roles = (0..k)
        .map(|r| {
            if count[r] == 0 {
                return Ok(prev.role(r).clone());
            }
            let c = count[r] as f64;
            let cov = SymMat2::new(sxx[r].value() / c, sxy[r].value() / c, syy[r].value() / c);
            Gaussian2D::regularized(means[r], cov, c / total as f64, floor)
        })
        .collect::<Result<Vec<_>>>()?;
    let wsum: f64 = roles.iter().map(Gaussian2D::weight).sum();
    let roles = roles
        .into_iter()
        .map(|g| g.with_weight((g.weight() / wsum).min(1.0)))
        .collect::<Result<Vec<_>>>()?;
    Template::new(roles)
}

/// Per-frame Hungarian assignment under `state`: agent → role maps and costs.
fn hard_assign(ds: &Dataset, state: &Template) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let k = state.k();
    let log_w: Vec<f64> = state.roles().iter().map(|g| g.weight().max(1e-300).ln()).collect();
    let solved: Vec<(Vec<usize>, f64)> = ds
        .frames()
        .par_iter()
        .map(|f| {
            let m = CostMatrix::from_fn(f.positions.len(), k, |n, j| {
                -(state.role(j).log_pdf(f.positions[n]) + log_w[j])
            })?;
            let a = hungarian(&m);
            Ok((a.mapping, a.total_cost))
        })
        .collect::<Result<_>>()?;
    Ok(solved.into_iter().unzip())
}

/// One hard-EM iteration: assign every frame, then refit. Returns the new
/// distributions, the assignment and its total cost.
pub fn hard_em_step(ds: &Dataset, state: &Template) -> Result<(Template, Vec<Vec<usize>>, f64)> {
    let (perms, costs) = hard_assign(ds, state)?;
    let next = refit(ds, &perms, state, DEFAULT_EIGEN_FLOOR)?;
    let total = costs.iter().copied().collect::<CompensatedSum>().value();
    Ok((next, perms, total))
}

fn state_hash(perms: &[Vec<usize>]) -> u64 {
    let mut h = DefaultHasher::new();
    perms.hash(&mut h);
    h.finish()
}

/// Hard-assignment EM from `init`, starting with every agent in the role of
/// the same index. Stops when no frame changes, when an assignment state
/// repeats, or after `max_iters` iterations. `max_iters = 0` refits `init`
/// once under the starting assignment.
pub fn hard_assignment_em(ds: &Dataset, init: &Template, max_iters: usize) -> Result<HardEmResult> {
    let n = ds.n_agents();
    if n > init.k() {
        return Err(Error::invalid(format!(
            "{n} agents cannot take distinct roles among {}",
            init.k()
        )));
    }
    let points = flatten(ds);
    let mut perms: Vec<Vec<usize>> = vec![(0..n).collect(); ds.n_frames()];
    let mut costs = vec![0.0; ds.n_frames()];
    let mut state = refit(ds, &perms, init, DEFAULT_EIGEN_FLOOR)?;
    let mut seen = HashSet::from([state_hash(&perms)]);
    let mut trace = HardEmTrace::default();

    for iteration in 1..=max_iters {
        let (next_perms, next_costs) = hard_assign(ds, &state)?;
        let changed = perms.iter().zip(&next_perms).filter(|(a, b)| a != b).count();
        let total_cost = next_costs.iter().copied().collect::<CompensatedSum>().value();
        state = refit(ds, &next_perms, &state, DEFAULT_EIGEN_FLOOR)?;
        perms = next_perms;
        costs = next_costs;
        trace.records.push(HardEmRecord {
            iteration,
            total_cost,
            avg_log_likelihood: average_log_likelihood_points(&state.to_formation(), points.points()),
            changed_frames: changed,
        });
        if changed == 0 {
            trace.converged = true;
            break;
        }
        if !seen.insert(state_hash(&perms)) {
            trace.oscillated = true;
            break;
        }
    }
    let aligned = AlignedDataset::from_permutations(ds, state.k(), perms, costs);
    Ok(HardEmResult {
        template: state,
        aligned,
        trace,
    })
}

/// Hard-assignment EM initialized from the player distributions; needs `k = N`.
pub struct HardEmLearner;

impl Named for HardEmLearner {
    fn name(&self) -> &'static str {
        "hard-em"
    }
}

impl FormationLearner for HardEmLearner {
    fn learn(&self, ds: &Dataset, cfg: &DiscoveryConfig) -> Result<LearnedFormation> {
        if cfg.k != ds.n_agents() {
            return Err(Error::invalid(format!(
                "hard assignment needs one role per agent ({} agents, k = {})",
                ds.n_agents(),
                cfg.k
            )));
        }
        let init = player_distributions(ds)?;
        let out = hard_assignment_em(ds, &init, cfg.max_iters)?;
        Ok(LearnedFormation {
            formation: out.template.to_formation(),
            converged: out.trace.converged,
            trace: LearnerTrace::Hard(out.trace),
            scores: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapEstimate {
    /// `V = −H(x) + Σₙ πₙ H(x|n)` in nats (≤ 0).
    pub value: f64,
    /// Monte-Carlo standard error of the mixture-entropy term.
    pub std_error: f64,
}

pub const OVERLAP_MIN_SAMPLES: usize = 100_000;

/// Overlap penalty of a formation: negative mixture entropy (Monte-Carlo)
/// plus the weighted closed-form component entropies. With uniform weights
/// the second term is the plain average over roles.
pub fn overlap_penalty(f: &Template, samples: usize, seed: u64) -> Result<OverlapEstimate> {
    let samples = samples.max(OVERLAP_MIN_SAMPLES);
    let formation = f.to_formation();
    let weights: Vec<f64> = f.roles().iter().map(Gaussian2D::weight).collect();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = CompensatedSum::new();
    let mut sum_sq = CompensatedSum::new();
    for _ in 0..samples {
        let x = f.role(pick.sample(&mut rng)).sample(&mut rng);
        let v = -formation.log_density(x);
        sum.add(v);
        sum_sq.add(v * v);
    }
    let n = samples as f64;
    let mean = sum.value() / n;
    let var = ((sum_sq.value() / n - mean * mean) * n / (n - 1.0)).max(0.0);
    let conditional: f64 = f.roles().iter().map(|g| g.weight() * differential_entropy(g)).sum();
    Ok(OverlapEstimate {
        value: -mean + conditional,
        std_error: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AttackDirection, Frame, FrameMeta};

    fn frames(rows: &[[[f64; 2]; 2]]) -> Dataset {
        let frames = rows
            .iter()
            .enumerate()
            .map(|(i, r)| Frame {
                frame_id: i as i64,
                positions: r.to_vec(),
                is_event: false,
                attack_direction: AttackDirection::LeftToRight,
                meta: FrameMeta::default(),
            })
            .collect();
        Dataset::new(vec!["a".into(), "b".into()], frames).unwrap()
    }

    #[test]
    fn zero_iterations_refits_init() {
        let ds = frames(&[[[0.0, 0.0], [5.0, 0.0]], [[1.0, 0.0], [6.0, 1.0]], [[0.0, 1.0], [5.0, 2.0]]]);
        let init = player_distributions(&ds).unwrap();
        let out = hard_assignment_em(&ds, &init, 0).unwrap();
        assert_eq!(out.template, init);
        assert!(out.trace.records.is_empty());
        assert!((init.role(0).mean()[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn swapped_frames_get_untangled() {
        // Agent b starts on the left in the last frame.
        let ds = frames(&[
            [[0.0, 0.0], [10.0, 0.0]],
            [[0.5, 0.5], [10.5, 0.5]],
            [[0.0, 1.0], [10.0, 1.0]],
            [[10.2, 0.2], [0.2, 0.2]],
        ]);
        let init = player_distributions(&ds).unwrap();
        let out = hard_assignment_em(&ds, &init, 50).unwrap();
        assert!(out.trace.converged);
        assert_eq!(out.aligned.permutations()[3], vec![1, 0]);
        assert!(out.template.role(0).mean()[0] < 1.0);
    }

    #[test]
    fn trace_csv_header() {
        let ds = frames(&[[[0.0, 0.0], [5.0, 0.0]], [[1.0, 0.0], [6.0, 1.0]], [[0.0, 1.0], [5.0, 2.0]]]);
        let out = hard_assignment_em(&ds, &player_distributions(&ds).unwrap(), 5).unwrap();
        let mut buf = Vec::new();
        out.trace.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("iteration,total_cost,loglik,changed_frames\n1,"));
    }

    #[test]
    fn overlap_of_single_component_is_zero() {
        let t = Template::new(vec![Gaussian2D::new([1.0, 2.0], SymMat2::diag(2.0, 0.5), 1.0).unwrap()]).unwrap();
        let v = overlap_penalty(&t, 100_000, 4).unwrap();
        assert!(v.value.abs() < 3.0 * v.std_error + 1e-12, "{v:?}");
    }

    #[test]
    fn overlap_of_far_components_is_minus_ln_two() {
        let t = Template::new(vec![
            Gaussian2D::new([-50.0, 0.0], SymMat2::IDENTITY, 0.5).unwrap(),
            Gaussian2D::new([50.0, 0.0], SymMat2::IDENTITY, 0.5).unwrap(),
        ])
        .unwrap();
        let v = overlap_penalty(&t, 100_000, 5).unwrap();
        assert!((v.value + 2f64.ln()).abs() < 3.0 * v.std_error + 1e-9, "{v:?}");
    }

    #[test]
    fn overlap_of_identical_components_is_zero() {
        let g = Gaussian2D::new([0.0, 0.0], SymMat2::IDENTITY, 0.5).unwrap();
        let t = Template::new(vec![g.clone(), g]).unwrap();
        let v = overlap_penalty(&t, 100_000, 6).unwrap();
        assert!(v.value.abs() < 3.0 * v.std_error + 1e-12);
    }
}

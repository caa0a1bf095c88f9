//! Synthetic formations with known ground truth.
//!
//! Every draw comes from a [`ChaCha8Rng`] seeded explicitly, so identical
//! parameters and seed give byte-identical datasets.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignedDataset, Template};
use crate::assignment::{hungarian, CostMatrix};
use crate::geometry::{Gaussian2D, SymMat2, Vec2};
use crate::ingest::{center_normalize, AttackDirection, Dataset, Frame, FrameMeta};
use crate::{Error, Result};

/// Shape parameters for [`generate_formation_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub k: usize,
    /// Minimum pairwise mean distance, in units of the largest component σ.
    pub separation: f64,
    /// Range of `λ₁/λ₂` per component.
    pub anisotropy: (f64, f64),
    /// Range of the minor-axis standard deviation (m).
    pub minor_sigma: (f64, f64),
    /// Side of the sampling box relative to `√k · separation · σmax`.
    pub spread: f64,
    /// Long side over short side of the sampling box.
    pub aspect: f64,
}

impl FormationSpec {
    pub fn new(k: usize, separation: f64) -> Self {
        Self {
            k,
            separation,
            anisotropy: (1.0, 1.6),
            minor_sigma: (0.7, 1.0),
            spread: 4.0,
            aspect: 1.5,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 20_000;
const PLACEMENT_RESTARTS: usize = 50;

/// `k` Gaussians with uniform weights, means centered on the origin and
/// pairwise at least `separation · σmax` apart.
pub fn generate_formation(k: usize, separation: f64, anisotropy: (f64, f64), seed: u64) -> Result<Template> {
    generate_formation_with(
        &FormationSpec {
            anisotropy,
            ..FormationSpec::new(k, separation)
        },
        seed,
    )
}

pub fn generate_formation_with(spec: &FormationSpec, seed: u64) -> Result<Template> {
    if spec.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let (alo, ahi) = spec.anisotropy;
    let (slo, shi) = spec.minor_sigma;
    if !(alo >= 1.0 && ahi >= alo && slo > 0.0 && shi >= slo && spec.separation >= 0.0 && spec.spread > 0.0 && spec.aspect >= 1.0) {
        return Err(Error::invalid("formation spec out of range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let covs: Vec<SymMat2> = (0..spec.k)
        .map(|_| {
            let minor = rng.random_range(slo..=shi);
            let ratio = rng.random_range(alo..=ahi);
            let angle = rng.random_range(0.0..PI);
            let (l1, l2) = (ratio * minor * minor, minor * minor);
            let (c, s) = (angle.cos(), angle.sin());
            SymMat2::new(l1 * c * c + l2 * s * s, (l1 - l2) * c * s, l1 * s * s + l2 * c * c)
        })
        .collect();
    let sigma_max = covs.iter().map(|c| c.eigenvalues().0.sqrt()).fold(0.0, f64::max);
    let min_dist = spec.separation * sigma_max;
    let width = spec.spread * (spec.k as f64).sqrt() * min_dist.max(sigma_max);
    let height = width / spec.aspect;

    let means = 'placement: {
        for _ in 0..PLACEMENT_RESTARTS {
            let mut placed: Vec<Vec2> = Vec::with_capacity(spec.k);
            let mut attempts = 0;
            while placed.len() < spec.k && attempts < PLACEMENT_ATTEMPTS {
                attempts += 1;
                let p = [
                    rng.random_range(-0.5..=0.5) * width,
                    rng.random_range(-0.5..=0.5) * height,
                ];
                if placed.iter().all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) >= min_dist) {
                    placed.push(p);
                }
            }
            if placed.len() == spec.k {
                break 'placement placed;
            }
        }
        return Err(Error::invalid(format!(
            "could not place {} roles {} σ apart",
            spec.k, spec.separation
        )));
    };
    let n = spec.k as f64;
    let cx = means.iter().map(|m| m[0]).sum::<f64>() / n;
    let cy = means.iter().map(|m| m[1]).sum::<f64>() / n;
    let roles = means
        .iter()
        .zip(covs)
        .map(|(m, c)| Gaussian2D::new([m[0] - cx, m[1] - cy], c, 1.0 / n))
        .collect::<Result<Vec<_>>>()?;
    Template::new(roles)
}

/// Sampling parameters for [`sample_dataset_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub frames: usize,
    /// Per-frame probability that a new swap run starts.
    pub swap_rate: f64,
    /// Mean length (frames) of a swap run.
    pub mean_swap_len: f64,
    pub event_rate: f64,
    /// Fraction of frames stored attacking right to left (positions rotated by 180°).
    pub rtl_rate: f64,
    pub meta: FrameMeta,
    pub first_frame_id: i64,
}

impl SampleSpec {
    pub fn new(frames: usize, swap_rate: f64, event_rate: f64) -> Self {
        Self {
            frames,
            swap_rate,
            mean_swap_len: 10.0,
            event_rate,
            rtl_rate: 0.0,
            meta: FrameMeta::default(),
            first_frame_id: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub template: Template,
    pub frame_ids: Vec<i64>,
    /// Per frame, agent → generating role.
    pub roles: Vec<Vec<usize>>,
    pub swap_rate: f64,
    pub event_rate: f64,
    pub seed: u64,
}

#[derive(Serialize)]
struct TruthLine<'a> {
    frame_id: i64,
    roles: &'a [usize],
}

impl GroundTruth {
    /// One `{"frame_id":…,"roles":[…]}` object per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, roles) in self.frame_ids.iter().zip(&self.roles) {
            serde_json::to_writer(&mut out, &TruthLine { frame_id: *id, roles })?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One point per role per frame, agents shuffled onto roles once, with
/// occasional runs of frames in which two agents trade roles.
pub fn sample_dataset(t: &Template, s: usize, swap_rate: f64, event_rate: f64, seed: u64) -> Result<(Dataset, GroundTruth)> {
    sample_dataset_with(t, &SampleSpec::new(s, swap_rate, event_rate), seed)
}

pub fn sample_dataset_with(t: &Template, spec: &SampleSpec, seed: u64) -> Result<(Dataset, GroundTruth)> {
    for (name, p) in [("swap rate", spec.swap_rate), ("event rate", spec.event_rate), ("rtl rate", spec.rtl_rate)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} {p} outside [0, 1]")));
        }
    }
    if spec.frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    if !(spec.mean_swap_len >= 1.0) {
        return Err(Error::invalid("mean swap length must be at least 1"));
    }
    let k = t.k();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base: Vec<usize> = (0..k).collect();
    base.shuffle(&mut rng);
    let run_len = Geometric::new(1.0 / spec.mean_swap_len).map_err(|e| Error::invalid(e.to_string()))?;
    // Active swaps: (agent a, agent b, frames left).
    let mut swaps: Vec<(usize, usize, u64)> = Vec::new();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut truth = Vec::with_capacity(spec.frames);
    for s in 0..spec.frames {
        swaps.retain(|sw| sw.2 > 0);
        if k >= 2 && rng.random_bool(spec.swap_rate) {
            let a = rng.random_range(0..k);
            let mut b = rng.random_range(0..k - 1);
            if b >= a {
                b += 1;
            }
            swaps.push((a, b, 1 + run_len.sample(&mut rng)));
        }
        let mut map = base.clone();
        for sw in swaps.iter_mut() {
            map.swap(sw.0, sw.1);
            sw.2 -= 1;
        }
        let positions: Vec<Vec2> = map.iter().map(|&r| t.role(r).sample(&mut rng)).collect();
        let is_event = rng.random_bool(spec.event_rate);
        let rtl = rng.random_bool(spec.rtl_rate);
        frames.push(Frame {
            frame_id: spec.first_frame_id + s as i64,
            positions,
            is_event,
            attack_direction: AttackDirection::LeftToRight,
            meta: spec.meta.clone(),
        });
        truth.push((map, rtl));
    }
    let ids = (0..k).map(|i| format!("p{i:02}")).collect();
    let centered = center_normalize(&Dataset::new(ids, frames)?);
    // Right-to-left frames are stored mirrored so that normalization undoes it.
    let frames = centered
        .frames()
        .iter()
        .zip(&truth)
        .map(|(f, (_, rtl))| {
            if *rtl {
                Frame {
                    positions: f.positions.iter().map(|p| [-p[0], -p[1]]).collect(),
                    attack_direction: AttackDirection::RightToLeft,
                    ..f.clone()
                }
            } else {
                f.clone()
            }
        })
        .collect();
    let ds = Dataset::new(centered.agent_ids().to_vec(), frames)?;
    let gt = GroundTruth {
        template: t.clone(),
        frame_ids: ds.frames().iter().map(|f| f.frame_id).collect(),
        roles: truth.into_iter().map(|(m, _)| m).collect(),
        swap_rate: spec.swap_rate,
        event_rate: spec.event_rate,
        seed,
    };
    Ok((ds, gt))
}

/// Index of the true role matched to each predicted role by a single global
/// relabeling that maximizes agreement over all frames.
pub fn global_relabel(predicted: &AlignedDataset, truth: &GroundTruth) -> Result<Vec<usize>> {
    check_frames(predicted, truth)?;
    let k = predicted.n_roles().max(truth.template.k());
    let mut counts = vec![0.0f64; k * k];
    for (p, t) in predicted.permutations().iter().zip(&truth.roles) {
        for (&pr, &tr) in p.iter().zip(t) {
            counts[pr * k + tr] += 1.0;
        }
    }
    let m = CostMatrix::new(k, k, counts.iter().map(|c| -c).collect())?;
    Ok(hungarian(&m).mapping)
}

fn check_frames(predicted: &AlignedDataset, truth: &GroundTruth) -> Result<()> {
    if predicted.frame_ids() != truth.frame_ids.as_slice() {
        return Err(Error::invalid("predicted and true frame sets differ"));
    }
    if predicted.permutations().iter().zip(&truth.roles).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::invalid("predicted and true rosters differ"));
    }
    Ok(())
}

/// Fraction of frames whose whole agent → role map is right after the best
/// global relabeling.
pub fn recovery_score(predicted: &AlignedDataset, truth: &GroundTruth) -> Result<f64> {
    let relabel = global_relabel(predicted, truth)?;
    let hits = predicted
        .permutations()
        .iter()
        .zip(&truth.roles)
        .filter(|(p, t)| p.iter().zip(t.iter()).all(|(&pr, &tr)| relabel[pr] == tr))
        .count();
    Ok(hits as f64 / truth.roles.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::write_csv;

    #[test]
    fn k_one_sits_at_origin() {
        let t = generate_formation(1, 3.0, (1.0, 1.5), 1).unwrap();
        assert_eq!(t.role(0).mean(), [0.0, 0.0]);
        assert_eq!(t.role(0).weight(), 1.0);
    }

    #[test]
    fn separation_holds() {
        let t = generate_formation(10, 3.0, (1.0, 1.6), 7).unwrap();
        let smax = t.roles().iter().map(|g| g.cov().eigenvalues().0.sqrt()).fold(0.0, f64::max);
        for (i, a) in t.roles().iter().enumerate() {
            let (l1, l2) = a.cov().eigenvalues();
            assert!(l1 / l2 <= 1.6 + 1e-9);
            for b in &t.roles()[i + 1..] {
                let d = (a.mean()[0] - b.mean()[0]).hypot(a.mean()[1] - b.mean()[1]);
                assert!(d >= 3.0 * smax - 1e-9);
            }
        }
    }

    #[test]
    fn impossible_packing_errors() {
        let spec = FormationSpec {
            spread: 0.3,
            ..FormationSpec::new(10, 3.0)
        };
        assert!(generate_formation_with(&spec, 1).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let t = generate_formation(5, 3.0, (1.0, 1.5), 3).unwrap();
        let render = |seed| {
            let (ds, gt) = sample_dataset(&t, 200, 0.1, 0.1, seed).unwrap();
            let mut a = Vec::new();
            write_csv(&ds, &mut a).unwrap();
            gt.write_jsonl(&mut a).unwrap();
            a
        };
        assert_eq!(render(9), render(9));
        assert_ne!(render(9), render(10));
        assert_eq!(generate_formation(5, 3.0, (1.0, 1.5), 3).unwrap(), t);
    }

    #[test]
    fn no_swaps_means_fixed_roles() {
        let t = generate_formation(6, 3.0, (1.0, 1.5), 2).unwrap();
        let (ds, gt) = sample_dataset(&t, 100, 0.0, 0.0, 4).unwrap();
        assert!(gt.roles.iter().all(|r| r == &gt.roles[0]));
        assert!(ds.frames().iter().all(|f| !f.is_event));
        for f in ds.frames() {
            let c = f.centroid();
            assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
        }
    }

    #[test]
    fn swaps_keep_maps_injective() {
        let t = generate_formation(6, 3.0, (1.0, 1.5), 2).unwrap();
        let (_, gt) = sample_dataset(&t, 500, 0.3, 0.0, 4).unwrap();
        assert!(gt.roles.iter().any(|r| r != &gt.roles[0]));
        for r in &gt.roles {
            let mut s = r.clone();
            s.sort_unstable();
            assert_eq!(s, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn truth_scores_one_even_when_relabeled() {
        let t = generate_formation(4, 3.0, (1.0, 1.5), 2).unwrap();
        let (ds, gt) = sample_dataset(&t, 50, 0.2, 0.0, 4).unwrap();
        let exact = AlignedDataset::from_permutations(&ds, 4, gt.roles.clone(), vec![0.0; 50]);
        assert_eq!(recovery_score(&exact, &gt).unwrap(), 1.0);
        let shift: Vec<Vec<usize>> = gt.roles.iter().map(|r| r.iter().map(|&x| (x + 1) % 4).collect()).collect();
        let relabeled = AlignedDataset::from_permutations(&ds, 4, shift, vec![0.0; 50]);
        assert_eq!(recovery_score(&relabeled, &gt).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_frames_error() {
        let t = generate_formation(3, 3.0, (1.0, 1.5), 2).unwrap();
        let (ds, gt) = sample_dataset(&t, 10, 0.0, 0.0, 4).unwrap();
        let (ds2, _) = sample_dataset(&t, 11, 0.0, 0.0, 4).unwrap();
        let pred = AlignedDataset::identity(&ds2);
        assert!(recovery_score(&pred, &gt).is_err());
        assert!(recovery_score(&AlignedDataset::identity(&ds), &gt).is_ok());
    }
}

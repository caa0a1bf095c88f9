//! Soft versus hard formation learning on the same input and initialization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alignment::{align_template_with, assign_roles_cached, average_log_likelihood, AlignedDataset, AssignOptions, BhattacharyyaCost};
use crate::baseline::{hard_assignment_em, overlap_penalty, player_distributions};
use crate::clustering::{cumulative, kmeans_sweep, pca_variance_explained};
use crate::discovery::{discover_formation, DiscoveryConfig};
use crate::geometry::{bhattacharyya_distance, kl_divergence, role_area_with, AreaConvention};
use crate::ingest::Dataset;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub discovery: DiscoveryConfig,
    /// Largest `k` in the WCE sweep.
    pub sweep_k_max: usize,
    pub area: AreaConvention,
    /// Monte-Carlo samples for the overlap penalty.
    pub overlap_samples: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            discovery: DiscoveryConfig::default(),
            sweep_k_max: 20,
            area: AreaConvention::default(),
            overlap_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleComparison {
    pub role: usize,
    /// `KL(soft ‖ hard)` in nats.
    pub kl: f64,
    pub bhattacharyya: f64,
    pub area_soft: f64,
    pub area_hard: f64,
    /// `area_soft − area_hard`.
    pub area_diff: f64,
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepComparison {
    pub k: usize,
    pub wce_aligned: f64,
    pub wce_identity: f64,
    pub wce_aligned_per_player: f64,
    pub wce_identity_per_player: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaComparison {
    pub component: usize,
    pub aligned: f64,
    pub identity: f64,
    pub aligned_cumulative: f64,
    pub identity_cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub avg_log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub overlap_penalty: f64,
    pub overlap_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub n_frames: usize,
    pub n_agents: usize,
    pub k: usize,
    pub soft: MethodSummary,
    pub hard: MethodSummary,
    pub hard_oscillated: bool,
    /// Soft minus hard average log-likelihood; non-negative when the soft fit explains the data at least as well.
    pub delta_log_likelihood: f64,
    pub roles: Vec<RoleComparison>,
    pub wce_sweep: Vec<SweepComparison>,
    pub pca: Vec<PcaComparison>,
}

/// Runs both learners from the player-mean initialization on a prepared
/// dataset, aligns the soft template to the player distributions and the
/// hard one to the soft template, and compares them role by role.
pub fn compare(ds: &Dataset, cfg: &CompareConfig) -> Result<CompareReport> {
    let players = player_distributions(ds)?;
    let soft = discover_formation(ds, &cfg.discovery)?;
    let soft_al = align_template_with(&soft.formation, &players, &BhattacharyyaCost)?;
    let hard = hard_assignment_em(ds, &players, cfg.discovery.max_iters)?;
    let hard_t = align_template_with(&hard.template.to_formation(), &soft_al.template, &BhattacharyyaCost)?.template;

    let ll_soft = average_log_likelihood(ds, &soft.formation);
    let ll_hard = average_log_likelihood(ds, &hard.template.to_formation());

    let roles = soft_al
        .template
        .roles()
        .iter()
        .zip(hard_t.roles())
        .enumerate()
        .map(|(role, (s, h))| {
            let (a_s, a_h) = (role_area_with(s, cfg.area), role_area_with(h, cfg.area));
            Ok(RoleComparison {
                role,
                kl: kl_divergence(s, h),
                bhattacharyya: bhattacharyya_distance(s, h)?,
                area_soft: a_s,
                area_hard: a_h,
                area_diff: a_s - a_h,
                mean_shift: (s.mean()[0] - h.mean()[0]).hypot(s.mean()[1] - h.mean()[1]),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let aligned = assign_roles_cached(ds, &soft_al, &soft.scores, AssignOptions::default())?;
    let identity = AlignedDataset::identity(ds);
    let (wce_sweep, pca) = compression(&aligned, &identity, cfg.sweep_k_max)?;

    let ov_soft = overlap_penalty(&soft_al.template, cfg.overlap_samples, cfg.discovery.seed)?;
    let ov_hard = overlap_penalty(&hard.template, cfg.overlap_samples, cfg.discovery.seed)?;

    Ok(CompareReport {
        n_frames: ds.n_frames(),
        n_agents: ds.n_agents(),
        k: cfg.discovery.k,
        soft: MethodSummary {
            avg_log_likelihood: ll_soft,
            iterations: soft.trace.records.len().saturating_sub(1),
            converged: soft.trace.converged,
            overlap_penalty: ov_soft.value,
            overlap_std_error: ov_soft.std_error,
        },
        hard: MethodSummary {
            avg_log_likelihood: ll_hard,
            iterations: hard.trace.records.len(),
            converged: hard.trace.converged,
            overlap_penalty: ov_hard.value,
            overlap_std_error: ov_hard.std_error,
        },
        hard_oscillated: hard.trace.oscillated,
        delta_log_likelihood: ll_soft - ll_hard,
        roles,
        wce_sweep,
        pca,
    })
}

/// WCE sweeps over `k = 2..=k_max` and PCA spectra for two orderings of the same frames.
pub fn compression(
    aligned: &AlignedDataset,
    identity: &AlignedDataset,
    k_max: usize,
) -> Result<(Vec<SweepComparison>, Vec<PcaComparison>)> {
    let sa = kmeans_sweep(aligned, k_max, 1e-6)?;
    let si = kmeans_sweep(identity, k_max, 1e-6)?;
    let sweep = sa
        .iter()
        .zip(&si)
        .filter(|(a, _)| a.1.k >= 2)
        .map(|(a, i)| SweepComparison {
            k: a.1.k,
            wce_aligned: a.1.wce,
            wce_identity: i.1.wce,
            wce_aligned_per_player: a.1.wce_per_player,
            wce_identity_per_player: i.1.wce_per_player,
        })
        .collect();
    let pa = pca_variance_explained(aligned)?;
    let pi = pca_variance_explained(identity)?;
    let (ca, ci) = (cumulative(&pa), cumulative(&pi));
    let pca = (0..pa.len())
        .map(|c| PcaComparison {
            component: c,
            aligned: pa[c],
            identity: pi[c],
            aligned_cumulative: ca[c],
            identity_cumulative: ci[c],
        })
        .collect();
    Ok((sweep, pca))
}

impl CompareReport {
    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn write_roles_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.roles)
    }

    pub fn write_wce_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.wce_sweep)
    }

    pub fn write_pca_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.pca)
    }
}

fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

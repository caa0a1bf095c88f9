//! Template alignment and per-frame role assignment.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::discovery::{average_log_likelihood_points, Formation, RoleScores};
use crate::geometry::{bhattacharyya_distance, mahalanobis_between_means, Gaussian2D, Vec2};
use crate::ingest::{flatten, Dataset};
use crate::registry::{alignment_costs, Named};
use crate::{Error, Result};

/// A formation with a fixed role order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TemplateRepr", into = "TemplateRepr")]
pub struct Template {
    roles: Vec<Gaussian2D>,
}

#[derive(Serialize, Deserialize)]
struct TemplateRepr {
    roles: Vec<Gaussian2D>,
}

impl TryFrom<TemplateRepr> for Template {
    type Error = Error;
    fn try_from(r: TemplateRepr) -> Result<Self> {
        Template::new(r.roles)
    }
}

impl From<Template> for TemplateRepr {
    fn from(t: Template) -> Self {
        TemplateRepr { roles: t.roles }
    }
}

impl Template {
    pub fn new(roles: Vec<Gaussian2D>) -> Result<Self> {
        Formation::new(roles).map(Self::from)
    }

    pub fn k(&self) -> usize {
        self.roles.len()
    }

    pub fn roles(&self) -> &[Gaussian2D] {
        &self.roles
    }

    pub fn role(&self, j: usize) -> &Gaussian2D {
        &self.roles[j]
    }

    pub fn means(&self) -> Vec<Vec2> {
        self.roles.iter().map(Gaussian2D::mean).collect()
    }

    pub fn to_formation(&self) -> Formation {
        Formation::new(self.roles.clone()).expect("template weights are validated")
    }

    /// Role means concatenated as `[x₀, y₀, x₁, y₁, …]`.
    pub fn mean_row(&self) -> Vec<f64> {
        self.roles.iter().flat_map(|g| g.mean()).collect()
    }

    /// Roles reordered so that new role `j` is old role `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Template> {
        let mut seen = vec![false; self.k()];
        if order.len() != self.k() || order.iter().any(|&i| i >= self.k() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("role order must be a permutation"));
        }
        Ok(Template {
            roles: order.iter().map(|&i| self.roles[i].clone()).collect(),
        })
    }
}

/// Keeps the formation's component order.
impl From<Formation> for Template {
    fn from(f: Formation) -> Self {
        Template {
            roles: f.into_components(),
        }
    }
}

/// Dissimilarity between a formation component and a template role.
pub trait AlignmentCost: Named + Send + Sync {
    fn cost(&self, component: &Gaussian2D, role: &Gaussian2D) -> Result<f64>;
}

pub struct BhattacharyyaCost;

impl Named for BhattacharyyaCost {
    fn name(&self) -> &'static str {
        "bhattacharyya"
    }
}

impl AlignmentCost for BhattacharyyaCost {
    fn cost(&self, component: &Gaussian2D, role: &Gaussian2D) -> Result<f64> {
        bhattacharyya_distance(component, role)
    }
}

/// Mahalanobis distance between means under the averaged covariance.
pub struct MahalanobisCost;

impl Named for MahalanobisCost {
    fn name(&self) -> &'static str {
        "mahalanobis"
    }
}

impl AlignmentCost for MahalanobisCost {
    fn cost(&self, component: &Gaussian2D, role: &Gaussian2D) -> Result<f64> {
        mahalanobis_between_means(component, role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateAlignment {
    pub template: Template,
    /// Role `j` of `template` is component `source_index[j]` of the formation.
    pub source_index: Vec<usize>,
    pub total_cost: f64,
    /// Cost of each matched pair, by role.
    pub role_costs: Vec<f64>,
}

/// Orders `f` against the parent template `g` by minimum total Bhattacharyya distance.
pub fn align_template(f: &Formation, g: &Template) -> Result<Template> {
    Ok(align_template_with(f, g, &BhattacharyyaCost)?.template)
}

/// [`align_template`] with a cost looked up by registry name.
pub fn align_template_named(f: &Formation, g: &Template, cost: &str) -> Result<TemplateAlignment> {
    let cost = alignment_costs().get(cost)?;
    align_template_with(f, g, cost.as_ref())
}

pub fn align_template_with(f: &Formation, g: &Template, cost: &dyn AlignmentCost) -> Result<TemplateAlignment> {
    if f.k() != g.k() {
        return Err(Error::invalid(format!(
            "cannot align a formation of {} components to a template of {} roles",
            f.k(),
            g.k()
        )));
    }
    let k = g.k();
    let mut data = Vec::with_capacity(k * k);
    for role in g.roles() {
        for comp in f.components() {
            data.push(cost.cost(comp, role)?);
        }
    }
    let m = CostMatrix::new(k, k, data)?;
    let a = hungarian(&m);
    let role_costs: Vec<f64> = a.mapping.iter().enumerate().map(|(j, &c)| m.get(j, c)).collect();
    Ok(TemplateAlignment {
        template: Template {
            roles: a.mapping.iter().map(|&c| f.components()[c].clone()).collect(),
        },
        source_index: a.mapping,
        total_cost: a.total_cost,
        role_costs,
    })
}

/// Role-ordered data: row `s` holds frame `s`'s positions arranged by role.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    frame_ids: Vec<i64>,
    n_agents: usize,
    n_roles: usize,
    /// `S × 2K`, row-major; roles nobody occupies are NaN.
    values: Vec<f64>,
    /// Per frame, agent → role.
    permutations: Vec<Vec<usize>>,
    /// Per-frame assignment cost (0 for identity ordering).
    costs: Vec<f64>,
}

#[derive(Serialize)]
struct AlignedJson<'a> {
    frame_id: i64,
    permutation: &'a [usize],
    cost: f64,
    positions: Vec<Option<[f64; 2]>>,
}

impl AlignedDataset {
    /// Rows in the dataset's own agent order (role `n` = agent `n`).
    pub fn identity(ds: &Dataset) -> Self {
        let n = ds.n_agents();
        Self::from_permutations(ds, n, vec![(0..n).collect(); ds.n_frames()], vec![0.0; ds.n_frames()])
    }

    /// Builds rows from per-frame agent → role maps. Maps must be injective into `0..n_roles`.
    pub fn from_permutations(ds: &Dataset, n_roles: usize, permutations: Vec<Vec<usize>>, costs: Vec<f64>) -> Self {
        let width = 2 * n_roles;
        let mut values = vec![f64::NAN; ds.n_frames() * width];
        for ((row, f), perm) in values.chunks_exact_mut(width).zip(ds.frames()).zip(&permutations) {
            for (p, &role) in f.positions.iter().zip(perm) {
                row[2 * role] = p[0];
                row[2 * role + 1] = p[1];
            }
        }
        Self {
            frame_ids: ds.frames().iter().map(|f| f.frame_id).collect(),
            n_agents: ds.n_agents(),
            n_roles,
            values,
            permutations,
            costs,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn n_roles(&self) -> usize {
        self.n_roles
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Row width, `2K`.
    pub fn dim(&self) -> usize {
        2 * self.n_roles
    }

    pub fn frame_ids(&self) -> &[i64] {
        &self.frame_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.dim()..(s + 1) * self.dim()]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim())
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// True when every role is occupied in every frame.
    pub fn is_complete(&self) -> bool {
        self.n_agents == self.n_roles
    }

    /// Frame `s`'s positions back in agent order.
    pub fn agent_positions(&self, s: usize) -> Vec<Vec2> {
        let row = self.row(s);
        self.permutations[s].iter().map(|&r| [row[2 * r], row[2 * r + 1]]).collect()
    }

    /// Rows at the given indices, in order.
    pub fn subset(&self, rows: &[usize]) -> AlignedDataset {
        let d = self.dim();
        Self {
            frame_ids: rows.iter().map(|&i| self.frame_ids[i]).collect(),
            n_agents: self.n_agents,
            n_roles: self.n_roles,
            values: rows.iter().flat_map(|&i| self.values[i * d..(i + 1) * d].iter().copied()).collect(),
            permutations: rows.iter().map(|&i| self.permutations[i].clone()).collect(),
            costs: rows.iter().map(|&i| self.costs[i]).collect(),
        }
    }

    /// `frame_id, role_0_x, role_0_y, …`; unoccupied roles are empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["frame_id".to_string()];
        for j in 0..self.n_roles {
            header.push(format!("role_{j}_x"));
            header.push(format!("role_{j}_y"));
        }
        w.write_record(&header)?;
        for (id, row) in self.frame_ids.iter().zip(self.rows()) {
            let mut rec = vec![id.to_string()];
            rec.extend(row.iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One object per frame with its agent → role permutation.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (s, row) in self.rows().enumerate() {
            let rec = AlignedJson {
                frame_id: self.frame_ids[s],
                permutation: &self.permutations[s],
                cost: self.costs[s],
                positions: row
                    .chunks_exact(2)
                    .map(|c| (!c[0].is_nan()).then_some([c[0], c[1]]))
                    .collect(),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssignOptions {
    /// Add `ln πⱼ` to each role's log-likelihood.
    pub include_weights: bool,
}

impl Default for AssignOptions {
    fn default() -> Self {
        Self { include_weights: true }
    }
}

fn log_weight(g: &Gaussian2D, opts: AssignOptions) -> f64 {
    if opts.include_weights {
        g.weight().max(1e-300).ln()
    } else {
        0.0
    }
}

/// Per-frame minimum negative log-likelihood assignment of agents to roles.
pub fn assign_roles(ds: &Dataset, t: &Template) -> Result<AlignedDataset> {
    assign_roles_with(ds, t, AssignOptions::default())
}

pub fn assign_roles_with(ds: &Dataset, t: &Template, opts: AssignOptions) -> Result<AlignedDataset> {
    let log_w: Vec<f64> = t.roles().iter().map(|g| log_weight(g, opts)).collect();
    assign_with_scorer(ds, t.k(), |_, agent_pos, _, j| -(t.role(j).log_pdf(agent_pos) + log_w[j]))
}

/// Role assignment on the data a formation was fitted on, reusing its
/// per-point log densities. `alignment` maps template roles to components.
pub fn assign_roles_cached(
    ds: &Dataset,
    alignment: &TemplateAlignment,
    scores: &RoleScores,
    opts: AssignOptions,
) -> Result<AlignedDataset> {
    if scores.n_frames != ds.n_frames() || scores.n_agents != ds.n_agents() || scores.k != alignment.template.k() {
        return Err(Error::invalid("cached scores do not match the dataset"));
    }
    let log_w: Vec<f64> = alignment.template.roles().iter().map(|g| log_weight(g, opts)).collect();
    let src = &alignment.source_index;
    assign_with_scorer(ds, alignment.template.k(), |s, _, n, j| -(scores.get(s, n, src[j]) + log_w[j]))
}

fn assign_with_scorer<F>(ds: &Dataset, k: usize, cost: F) -> Result<AlignedDataset>
where
    F: Fn(usize, Vec2, usize, usize) -> f64 + Sync,
{
    if ds.n_agents() > k {
        return Err(Error::invalid(format!(
            "{} agents cannot take distinct roles among {k}",
            ds.n_agents()
        )));
    }
    let solved: Vec<(Vec<usize>, f64)> = ds
        .frames()
        .par_iter()
        .enumerate()
        .map(|(s, f)| {
            let m = CostMatrix::from_fn(f.positions.len(), k, |n, j| cost(s, f.positions[n], n, j))?;
            let a = hungarian(&m);
            Ok((a.mapping, a.total_cost))
        })
        .collect::<Result<_>>()?;
    let (perms, costs) = solved.into_iter().unzip();
    Ok(AlignedDataset::from_permutations(ds, k, perms, costs))
}

/// Mean log mixture density over all `S·N` points.
pub fn average_log_likelihood(ds: &Dataset, f: &Formation) -> f64 {
    average_log_likelihood_points(f, flatten(ds).points())
}

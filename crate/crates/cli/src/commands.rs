use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use formation_core::alignment::{align_template_with, assign_roles_cached, assign_roles_with, AlignedDataset, AssignOptions, Template};
use formation_core::baseline::player_distributions;
use formation_core::bench::{run_bench, summarize, write_bench_csv, BenchConfig};
use formation_core::clustering::{learn_tree, FlatClusterConfig, TreeConfig};
use formation_core::compare::{compare as run_compare, CompareConfig};
use formation_core::discovery::{discover_formation, DiscoveryConfig, LearnedFormation, LearnerTrace};
use formation_core::ingest::{parse_tracking_with, prepare, write_tracking, Dataset, FilterExpr, Format, Frame, RosterPolicy};
use formation_core::registry::{alignment_costs, learners};
use formation_core::synth::{generate_formation_with, sample_dataset_with, FormationSpec, SampleSpec};

use crate::manifest::{OutDir, RunManifest};
use crate::{BenchArgs, CompareArgs, ContextArgs, DiscoverArgs, FitArgs, GroupField, InputArgs, SynthArgs, TreeArgs, UsageError};

fn infer_format(path: &Path, explicit: Option<Format>) -> Format {
    explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl" | "ndjson" | "json") => Format::Jsonl,
        _ => Format::Csv,
    })
}

#[derive(Serialize)]
struct InputSnapshot<'a> {
    input: &'a Path,
    format: Format,
    roster: RosterPolicy,
    key_frames_only: bool,
    filter: Option<&'a str>,
}

impl<'a> InputSnapshot<'a> {
    fn new(a: &'a InputArgs, filter: Option<&'a str>) -> Self {
        Self {
            input: &a.input,
            format: infer_format(&a.input, a.format),
            roster: a.roster,
            key_frames_only: a.key_frames_only,
            filter,
        }
    }
}

/// Raw (filtered) frames; the prepared training set is built from them.
fn load_raw(m: &mut RunManifest, a: &InputArgs, filter: Option<&str>) -> Result<Dataset> {
    let bytes = m.read_input("input", &a.input)?;
    let format = infer_format(&a.input, a.format);
    let ds = m.time("parse", || parse_tracking_with(&bytes[..], format, a.roster))?;
    m.stat("input_frames", ds.n_frames());
    m.stat("agents", ds.n_agents());
    let ds = match filter {
        Some(expr) => FilterExpr::parse(expr)?.apply(&ds)?,
        None => ds,
    };
    m.stat("selected_frames", ds.n_frames());
    Ok(ds)
}

fn load_prepared(m: &mut RunManifest, a: &InputArgs, filter: Option<&str>) -> Result<Dataset> {
    let raw = load_raw(m, a, filter)?;
    let ds = prepare(&raw, a.key_frames_only)?;
    m.stat("training_frames", ds.n_frames());
    m.stat("training_points", ds.n_points());
    Ok(ds)
}

fn load_template(m: &mut RunManifest, path: &Path) -> Result<Template> {
    let bytes = m.read_input("parent-template", path)?;
    serde_json::from_slice(&bytes).map_err(|e| UsageError(format!("`{}` is not a template: {e}", path.display())).into())
}

/// Config file (if any) with flag overrides applied, validated.
fn resolve_config(m: &mut RunManifest, a: &FitArgs) -> Result<DiscoveryConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let bytes = m.read_input("config", path)?;
            let v: serde_json::Value =
                serde_json::from_slice(&bytes).map_err(|e| UsageError(format!("`{}` is not JSON: {e}", path.display())))?;
            let inner = v
                .pointer("/config/discovery")
                .or_else(|| v.get("discovery"))
                .cloned()
                .unwrap_or(v);
            serde_json::from_value(inner).map_err(|e| UsageError(format!("bad discovery config in `{}`: {e}", path.display())))?
        }
        None => DiscoveryConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.eig_ratio {
        cfg.eig_ratio_bound = r;
    }
    if let Some(t) = a.em_tol {
        cfg.em_tol = t;
    }
    if let Some(n) = a.max_iters {
        cfg.max_iters = n;
    }
    if let Some(init) = &a.init {
        cfg.init = init.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_kmeans_csv(out: &mut OutDir, rel: &str, inertia: &[f64]) -> Result<()> {
    let mut w = out.create(rel)?;
    writeln!(w, "iteration,inertia")?;
    for (i, v) in inertia.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(())
}

fn iterations(l: &LearnedFormation) -> usize {
    match &l.trace {
        LearnerTrace::Soft { em, .. } => em.records.len().saturating_sub(1),
        LearnerTrace::Hard(t) => t.records.len(),
    }
}

#[derive(Serialize)]
struct DiscoverSnapshot<'a> {
    #[serde(flatten)]
    input: InputSnapshot<'a>,
    discovery: &'a DiscoveryConfig,
    learner: &'a str,
    align_cost: &'a str,
    parent_template: Option<&'a Path>,
}

pub fn discover(a: &DiscoverArgs, threads: Option<usize>) -> Result<()> {
    let mut m = RunManifest::new("discover", 0, threads);
    let cfg = resolve_config(&mut m, &a.fit)?;
    m.seed = cfg.seed;
    m.config(&DiscoverSnapshot {
        input: InputSnapshot::new(&a.input, a.filter.as_deref()),
        discovery: &cfg,
        learner: &a.learner,
        align_cost: &a.align_cost,
        parent_template: a.parent_template.as_deref(),
    })?;
    let learner = learners().get(&a.learner)?;
    let cost = alignment_costs().get(&a.align_cost)?;
    let parent = a.parent_template.as_deref().map(|p| load_template(&mut m, p)).transpose()?;
    let ds = load_prepared(&mut m, &a.input, a.filter.as_deref())?;
    let mut out = OutDir::new(&a.out)?;

    let learned = m.time("learn", || learner.learn(&ds, &cfg))?;
    m.stat("converged", learned.converged);
    m.stat("iterations", iterations(&learned));
    m.stat("avg_log_likelihood", formation_core::alignment::average_log_likelihood(&ds, &learned.formation));
    if !learned.converged {
        m.warn(format!("{} stopped after {} iterations without converging", a.learner, iterations(&learned)));
    }
    out.json("formation.json", &learned.formation)?;
    learned.write_trace_csv(out.create("trace.csv")?)?;
    if let LearnerTrace::Soft { kmeans, .. } = &learned.trace {
        write_kmeans_csv(&mut out, "kmeans.csv", &kmeans.inertia_trace)?;
        m.stat("kmeans_iterations", kmeans.iterations);
    }

    let reference = parent.clone().unwrap_or_else(|| Template::from(learned.formation.clone()));
    let alignment = m.time("align", || align_template_with(&learned.formation, &reference, cost.as_ref()))?;
    if parent.is_some() {
        out.json("template.json", &alignment.template)?;
        out.json("alignment.json", &alignment)?;
    }
    let aligned = m.time("assign", || match &learned.scores {
        Some(scores) => assign_roles_cached(&ds, &alignment, scores, AssignOptions::default()),
        None => assign_roles_with(&ds, &alignment.template, AssignOptions::default()),
    })?;
    write_aligned(&mut out, "", &aligned)?;
    out.finish(m)
}

fn write_aligned(out: &mut OutDir, prefix: &str, aligned: &AlignedDataset) -> Result<()> {
    aligned.write_csv(out.create(&format!("{prefix}roles.csv"))?)?;
    aligned.write_jsonl(out.create(&format!("{prefix}assignments.jsonl"))?)?;
    Ok(())
}

#[derive(Serialize)]
struct CompareSnapshot<'a> {
    #[serde(flatten)]
    input: InputSnapshot<'a>,
    #[serde(flatten)]
    compare: &'a CompareConfig,
}

pub fn compare(a: &CompareArgs, threads: Option<usize>) -> Result<()> {
    let mut m = RunManifest::new("compare", 0, threads);
    let cfg = CompareConfig {
        discovery: resolve_config(&mut m, &a.fit)?,
        sweep_k_max: a.sweep_k_max,
        overlap_samples: a.overlap_samples,
        ..CompareConfig::default()
    };
    m.seed = cfg.discovery.seed;
    m.config(&CompareSnapshot {
        input: InputSnapshot::new(&a.input, a.filter.as_deref()),
        compare: &cfg,
    })?;
    let ds = load_prepared(&mut m, &a.input, a.filter.as_deref())?;
    let mut out = OutDir::new(&a.out)?;

    let report = m.time("compare", || run_compare(&ds, &cfg))?;
    if !report.soft.converged {
        m.warn("soft learner stopped without converging");
    }
    if report.hard_oscillated {
        m.warn("hard-assignment EM oscillated between assignments");
    } else if !report.hard.converged {
        m.warn("hard-assignment EM stopped without converging");
    }
    m.stat("delta_log_likelihood", report.delta_log_likelihood);
    out.json("compare_report.json", &report)?;
    report.write_roles_csv(out.create("roles.csv")?)?;
    report.write_wce_csv(out.create("wce_sweep.csv")?)?;
    report.write_pca_csv(out.create("pca.csv")?)?;
    out.finish(m)
}

pub fn bench(a: &BenchArgs, threads: Option<usize>) -> Result<()> {
    let mut m = RunManifest::new("bench", a.seed, threads);
    let cfg = BenchConfig {
        n_values: a.n_values.clone(),
        frames: a.frames,
        reps: a.reps,
        iterations: a.iterations,
        seed: a.seed,
    };
    m.config(&cfg)?;
    let mut out = OutDir::new(&a.out)?;
    let rows = m.time("bench", || run_bench(&cfg))?;
    write_bench_csv(&rows, out.create("bench.csv")?)?;
    match summarize(&rows) {
        Ok(s) => out.json("bench_summary.json", &s)?,
        Err(e) => m.warn(format!("no slope fit: {e}")),
    }
    out.finish(m)
}

#[derive(Serialize)]
struct ContextSnapshot<'a> {
    #[serde(flatten)]
    input: InputSnapshot<'a>,
    discovery: &'a DiscoveryConfig,
    filters: &'a [String],
    group_by: Option<&'static str>,
    align_cost: &'a str,
    parent_template: Option<&'a Path>,
}

#[derive(Serialize)]
struct ContextSummary {
    index: usize,
    label: String,
    dir: String,
    frames: usize,
    converged: bool,
    alignment_cost: f64,
}

fn group_name(g: GroupField) -> &'static str {
    match g {
        GroupField::Team => "team",
        GroupField::Game => "game",
        GroupField::Period => "period",
    }
}

fn group_value(g: GroupField, f: &Frame) -> &str {
    match g {
        GroupField::Team => &f.meta.team,
        GroupField::Game => &f.meta.game,
        GroupField::Period => &f.meta.period,
    }
}

pub fn context(a: &ContextArgs, threads: Option<usize>) -> Result<()> {
    if a.filter.is_empty() && a.group_by.is_none() {
        return Err(UsageError("context needs at least one --filter or a --group-by field".into()).into());
    }
    let mut m = RunManifest::new("context", 0, threads);
    let cfg = resolve_config(&mut m, &a.fit)?;
    m.seed = cfg.seed;
    m.config(&ContextSnapshot {
        input: InputSnapshot::new(&a.input, None),
        discovery: &cfg,
        filters: &a.filter,
        group_by: a.group_by.map(group_name),
        align_cost: &a.align_cost,
        parent_template: a.parent_template.as_deref(),
    })?;
    let cost = alignment_costs().get(&a.align_cost)?;
    let parent = a.parent_template.as_deref().map(|p| load_template(&mut m, p)).transpose()?;
    let ds = load_prepared(&mut m, &a.input, None)?;

    let mut contexts: Vec<(String, Dataset)> = Vec::new();
    for expr in &a.filter {
        let f = FilterExpr::parse(expr)?;
        contexts.push((f.source().to_string(), f.apply(&ds)?));
    }
    if let Some(g) = a.group_by {
        let values: BTreeSet<&str> = ds.frames().iter().map(|f| group_value(g, f)).collect();
        for v in values {
            let sub = ds.select(|f| group_value(g, f) == v).expect("value taken from the data");
            contexts.push((format!("{}={v}", group_name(g)), sub));
        }
    }
    let mut out = OutDir::new(&a.out)?;

    let shared = match parent {
        Some(t) => t,
        None => {
            let global = m.time("global", || discover_formation(&ds, &cfg))?;
            if !global.trace.converged {
                m.warn("global formation stopped without converging");
            }
            Template::from(global.formation)
        }
    };
    out.json("global_template.json", &shared)?;

    let mut summaries = Vec::new();
    for (i, (label, sub)) in contexts.iter().enumerate() {
        let found = m.time(&format!("context {i}"), || discover_formation(sub, &cfg))?;
        if !found.trace.converged {
            m.warn(format!("context `{label}` stopped without converging"));
        }
        let alignment = align_template_with(&found.formation, &shared, cost.as_ref())?;
        let dir = format!("contexts/{i:02}");
        out.json(&format!("{dir}/formation.json"), &found.formation)?;
        out.json(&format!("{dir}/template.json"), &alignment.template)?;
        found.trace.write_csv(out.create(&format!("{dir}/trace.csv"))?)?;
        summaries.push(ContextSummary {
            index: i,
            label: label.clone(),
            dir,
            frames: sub.n_frames(),
            converged: found.trace.converged,
            alignment_cost: alignment.total_cost,
        });
    }
    out.json("contexts.json", &summaries)?;
    m.stat("contexts", summaries.len());
    out.finish(m)
}

#[derive(Serialize)]
struct TreeSnapshot<'a> {
    #[serde(flatten)]
    input: InputSnapshot<'a>,
    tree: &'a TreeConfig,
    parent_template: Option<&'a Path>,
}

pub fn tree(a: &TreeArgs, threads: Option<usize>) -> Result<()> {
    let mut m = RunManifest::new("tree", 0, threads);
    let discovery = resolve_config(&mut m, &a.fit)?;
    let cfg = TreeConfig {
        max_depth: a.max_depth,
        min_node_rows: a.min_node_rows,
        min_improvement: a.min_improvement,
        min_split_score: a.min_split_score,
        k_candidates: a.k_candidates.clone(),
        cluster: FlatClusterConfig {
            seed: discovery.seed,
            ..FlatClusterConfig::default()
        },
        discovery,
    };
    m.seed = cfg.discovery.seed;
    m.config(&TreeSnapshot {
        input: InputSnapshot::new(&a.input, a.filter.as_deref()),
        tree: &cfg,
        parent_template: a.parent_template.as_deref(),
    })?;
    let parent = a.parent_template.as_deref().map(|p| load_template(&mut m, p)).transpose()?;
    let ds = load_prepared(&mut m, &a.input, a.filter.as_deref())?;
    let mut out = OutDir::new(&a.out)?;
    let g = match parent {
        Some(t) => t,
        None => player_distributions(&ds)?,
    };
    let tree = m.time("tree", || learn_tree(&ds, &g, &cfg))?;
    m.stat("depth", tree.depth());
    m.stat("leaves", tree.leaves().len());
    tree.write_json(out.create("tree.json")?)?;

    let mut w = out.create("nodes.csv")?;
    writeln!(w, "id,depth,rows,distortion,split_k,split_score")?;
    for n in tree.nodes() {
        let (k, score) = n.split.as_ref().map_or((String::new(), String::new()), |s| (s.k.to_string(), s.score.to_string()));
        writeln!(w, "{},{},{},{},{k},{score}", n.id, n.depth, n.rows.len(), n.distortion)?;
    }
    w.flush()?;
    drop(w);
    out.finish(m)
}

pub fn synth(a: &SynthArgs, threads: Option<usize>) -> Result<()> {
    let mut m = RunManifest::new("synth", a.seed, threads);
    if a.contexts == 0 {
        return Err(UsageError("--contexts must be at least 1".into()).into());
    }
    let frames = i64::try_from(a.frames).map_err(|_| UsageError("--frames is too large".into()))?;
    let mut templates = Vec::new();
    let mut data: Option<Dataset> = None;
    let mut truth = Vec::new();
    for c in 0..a.contexts {
        let base = a.seed.wrapping_add(2 * c as u64);
        let t = generate_formation_with(&FormationSpec::new(a.k, a.separation), base)?;
        let mut spec = SampleSpec::new(a.frames, a.swap_rate, a.event_rate);
        spec.rtl_rate = a.rtl_rate;
        spec.first_frame_id = c as i64 * frames;
        spec.meta.team = format!("team{c}");
        spec.meta.game = "g0".into();
        spec.meta.period = "1".into();
        let (ds, gt) = sample_dataset_with(&t, &spec, base.wrapping_add(1))?;
        data = Some(match data {
            Some(d) => d.concat(&ds)?,
            None => ds,
        });
        templates.push(t);
        truth.push(gt);
    }
    let data = data.expect("at least one context");
    m.config(&serde_json::json!({
        "k": a.k,
        "separation": a.separation,
        "frames": a.frames,
        "swap_rate": a.swap_rate,
        "event_rate": a.event_rate,
        "rtl_rate": a.rtl_rate,
        "contexts": a.contexts,
        "format": a.format,
    }))?;
    let mut out = OutDir::new(&a.out)?;
    let ext = match a.format {
        Format::Csv => "csv",
        Format::Jsonl => "jsonl",
    };
    let mut w = out.create(&format!("tracking.{ext}"))?;
    write_tracking(&data, a.format, &mut w)?;
    w.flush()?;
    drop(w);
    out.json("truth_templates.json", &templates)?;
    let mut w = out.create("truth_roles.jsonl")?;
    for gt in &truth {
        gt.write_jsonl(&mut w)?;
    }
    w.flush()?;
    drop(w);
    m.stat("frames", data.n_frames());
    out.finish(m)
}

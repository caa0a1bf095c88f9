//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints its own PASS/FAIL line; exits non-zero if any fails.

use std::time::Instant;

use formation_core::alignment::{
    align_template, align_template_with, assign_roles, assign_roles_cached, average_log_likelihood, AlignedDataset, AssignOptions,
    BhattacharyyaCost, Template,
};
use formation_core::assignment::{hungarian, sinkhorn_normalize, CostMatrix};
use formation_core::baseline::{hard_assignment_em, player_distributions};
use formation_core::bench::{run_bench, summarize, BenchConfig};
use formation_core::compare::compression;
use formation_core::discovery::{
    discover_formation, kmeans, player_mean_init, DiscoveryConfig, Initializer, RandomPointsInit, UpdateKind,
};
use formation_core::geometry::{bhattacharyya_distance, differential_entropy, kl_divergence, Gaussian2D, SymMat2, Vec2};
use formation_core::ingest::{filter_key_frames, flatten, Dataset};
use formation_core::synth::{generate_formation, global_relabel, recovery_score, sample_dataset};
use formation_core::clustering::{learn_tree, TreeConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const K: usize = 10;
const FRAMES: usize = 1500;
const SUITE: usize = 50;

struct Tgp {
    separation: f64,
    ds: Dataset,
}

/// Fifty seeded team-game-periods with separations spread over 1.5σ to 4σ.
fn suite() -> Vec<Tgp> {
    (0..SUITE)
        .into_par_iter()
        .map(|i| {
            let separation = 1.5 + 2.5 * i as f64 / (SUITE - 1) as f64;
            let t = generate_formation(K, separation, (1.0, 1.6), 1000 + i as u64).unwrap();
            let (ds, _) = sample_dataset(&t, FRAMES, 0.05, 0.1, 2000 + i as u64).unwrap();
            Tgp { separation, ds }
        })
        .collect()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, o: &Outcome, failures: &mut Vec<usize>) {
    println!("criterion {n:>2} {name:<24} {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        failures.push(n);
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Likelihood dominance and EM monotonicity share the same runs.
fn soft_vs_hard(tgps: &[Tgp]) -> (Outcome, Outcome) {
    let start = Instant::now();
    let cfg = DiscoveryConfig::default();
    let runs: Vec<(f64, f64, f64, bool, usize)> = tgps
        .par_iter()
        .map(|tgp| {
            let players = player_distributions(&tgp.ds).unwrap();
            let soft = discover_formation(&tgp.ds, &cfg).unwrap();
            let hard = hard_assignment_em(&tgp.ds, &players, cfg.max_iters).unwrap();
            let ls = average_log_likelihood(&tgp.ds, &soft.formation);
            let lh = average_log_likelihood(&tgp.ds, &hard.template.to_formation());
            let hard_irregular = hard.trace.is_non_monotone() || hard.trace.oscillated;
            (ls, lh, soft.trace.worst_full_update_drop(), hard_irregular, soft.trace.count(UpdateKind::SoftKMeans))
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();

    let deltas: Vec<f64> = runs.iter().map(|r| r.0 - r.1).collect();
    let dominated = deltas.iter().filter(|&&d| d >= -1e-9).count();
    let min_delta = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let worst_idx = deltas.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap();
    let c1 = Outcome {
        pass: dominated == runs.len() && secs < 300.0,
        detail: format!(
            "{dominated}/{} soft ≥ hard − 1e-9, min Δ {min_delta:.3e} (sep {:.2}σ), median Δ {:.3e}, {secs:.1}s",
            runs.len(),
            tgps[worst_idx].separation,
            median(deltas.clone())
        ),
    };

    let worst_drop = runs.iter().map(|r| r.2).fold(0.0, f64::max);
    let irregular = runs.iter().filter(|r| r.3).count();
    let fallbacks = runs.iter().filter(|r| r.4 > 0).count();
    let c2 = Outcome {
        pass: worst_drop <= 1e-8,
        detail: format!(
            "worst full-update drop {worst_drop:.2e}; hard EM non-monotone/oscillating on {irregular}/{} runs{}; spherical fallback used on {fallbacks} runs",
            runs.len(),
            if irregular == 0 { " (none observed)" } else { "" }
        ),
    };
    (c1, c2)
}

fn role_recovery() -> Outcome {
    let cfg = DiscoveryConfig::default();
    let runs: Vec<(f64, f64, f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|i| {
            let start = Instant::now();
            let t = generate_formation(K, 3.0, (1.0, 1.6), 3000 + i).unwrap();
            let (ds, truth) = sample_dataset(&t, FRAMES, 0.05, 0.1, 4000 + i).unwrap();
            let players = player_distributions(&ds).unwrap();
            let found = discover_formation(&ds, &cfg).unwrap();
            let al = align_template_with(&found.formation, &players, &BhattacharyyaCost).unwrap();
            let aligned = assign_roles_cached(&ds, &al, &found.scores, AssignOptions::default()).unwrap();
            let score = recovery_score(&aligned, &truth).unwrap();
            let relabel = global_relabel(&aligned, &truth).unwrap();
            let err = al
                .template
                .roles()
                .iter()
                .enumerate()
                .map(|(j, g)| dist(g.mean(), t.role(relabel[j]).mean()))
                .fold(0.0, f64::max);
            let secs = start.elapsed().as_secs_f64();
            // Recovery with the generating template itself bounds what any learner can reach.
            let oracle = recovery_score(&assign_roles(&ds, &t).unwrap(), &truth).unwrap();
            (score, err, secs, oracle)
        })
        .collect();
    let min_score = runs.iter().map(|r| r.0).fold(1.0, f64::min);
    let max_err = runs.iter().map(|r| r.1).fold(0.0, f64::max);
    let max_secs = runs.iter().map(|r| r.2).fold(0.0, f64::max);
    let min_oracle = runs.iter().map(|r| r.3).fold(1.0, f64::min);
    let below = runs.iter().filter(|r| r.0 < 0.99).count();
    Outcome {
        pass: min_score >= 0.99 && max_err <= 0.1 && max_secs < 30.0,
        detail: format!(
            "10 TGPs: min recovery {min_score:.4} ({below} below 0.99; true-template recovery min {min_oracle:.4}), max mean error {max_err:.3} m, slowest {max_secs:.2}s"
        ),
    }
}

fn complexity() -> Outcome {
    let start = Instant::now();
    let rows = run_bench(&BenchConfig::default()).unwrap();
    let s = summarize(&rows).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ratio = s.ratio_at_10.unwrap_or(f64::NAN);
    Outcome {
        pass: (s.slope_difference - 3.0).abs() <= 0.5 && ratio >= 100.0 && secs < 600.0,
        detail: format!(
            "slopes hard {:.2} soft {:.2} k-means {:.2}, difference {:.2} (want 3 ± 0.5), hard/soft at N=10 {ratio:.1} (want ≥ 100), {secs:.1}s",
            s.hard_slope, s.soft_slope, s.kmeans_slope, s.slope_difference
        ),
    }
}

fn two_formation_mix(seed: u64, frames: usize) -> (Dataset, [Template; 2]) {
    let a = generate_formation(K, 3.0, (1.0, 1.6), seed * 2).unwrap();
    let b = generate_formation(K, 3.0, (1.0, 1.6), seed * 2 + 1).unwrap();
    let (da, _) = sample_dataset(&a, frames, 0.05, 0.1, seed * 2 + 100).unwrap();
    let (db, _) = sample_dataset(&b, frames, 0.05, 0.1, seed * 2 + 101).unwrap();
    (da.concat(&db).unwrap(), [a, b])
}

fn compression_check() -> Outcome {
    let cfg = DiscoveryConfig::default();
    let results: Vec<(bool, bool, f64, f64)> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let (ds, _) = two_formation_mix(500 + seed, 750);
            let players = player_distributions(&ds).unwrap();
            let found = discover_formation(&ds, &cfg).unwrap();
            let al = align_template_with(&found.formation, &players, &BhattacharyyaCost).unwrap();
            let aligned = assign_roles_cached(&ds, &al, &found.scores, AssignOptions::default()).unwrap();
            let (sweep, pca) = compression(&aligned, &AlignedDataset::identity(&ds), 20).unwrap();
            let wce_ok = sweep.len() == 19 && sweep.iter().all(|p| p.wce_aligned <= p.wce_identity);
            let pca_ok = pca.iter().take(5).all(|p| p.aligned_cumulative >= p.identity_cumulative);
            let worst = sweep.iter().map(|p| p.wce_aligned / p.wce_identity).fold(0.0, f64::max);
            (wce_ok, pca_ok, worst, pca[4].aligned_cumulative - pca[4].identity_cumulative)
        })
        .collect();
    let wce = results.iter().filter(|r| r.0).count();
    let pca = results.iter().filter(|r| r.1).count();
    let worst = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let gap = results.iter().map(|r| r.3).fold(f64::INFINITY, f64::min);
    Outcome {
        pass: wce == results.len() && pca == results.len(),
        detail: format!(
            "5 mixes: WCE aligned ≤ identity for all k=2..20 on {wce}/5 (worst ratio {worst:.3}), PCA dominance on first 5 on {pca}/5 (min cumulative gap at 5: {gap:.3})"
        ),
    }
}

fn initialization(tgps: &[Tgp]) -> Outcome {
    let tol = DiscoveryConfig::default().kmeans_tol;
    let runs: Vec<(usize, f64)> = tgps
        .par_iter()
        .enumerate()
        .map(|(i, tgp)| {
            let points = flatten(&tgp.ds);
            let player = kmeans(&points, &player_mean_init(&tgp.ds), tol).unwrap().iterations;
            let random: Vec<f64> = (0..20u64)
                .map(|r| {
                    let init = RandomPointsInit.centers(&tgp.ds, points.points(), K, 100 * i as u64 + r).unwrap();
                    kmeans(&points, &init, tol).unwrap().iterations as f64
                })
                .collect();
            (player, median(random))
        })
        .collect();
    let better = runs.iter().filter(|r| (r.0 as f64) < r.1).count();
    let within_ten = runs.iter().filter(|r| r.0 <= 10).count();
    let frac = better as f64 / runs.len() as f64;
    Outcome {
        pass: frac >= 0.9,
        detail: format!(
            "player-means faster than random median on {better}/{} ({:.0}%), within 10 iterations on {within_ten}/{}; median iterations player {:.0} vs random {:.0}",
            runs.len(),
            100.0 * frac,
            runs.len(),
            median(runs.iter().map(|r| r.0 as f64).collect()),
            median(runs.iter().map(|r| r.1).collect())
        ),
    }
}

fn key_frames(tgps: &[Tgp]) -> Outcome {
    let cfg = DiscoveryConfig::default();
    let runs: Vec<(f64, f64)> = tgps
        .par_iter()
        .map(|tgp| {
            let players = player_distributions(&tgp.ds).unwrap();
            let all = discover_formation(&tgp.ds, &cfg).unwrap();
            let t_all = align_template(&all.formation, &players).unwrap();
            let keys = filter_key_frames(&tgp.ds).unwrap();
            let key = discover_formation(&keys, &cfg).unwrap();
            let t_key = align_template(&key.formation, &t_all).unwrap();
            let mut worst_b = 0.0f64;
            let mut worst_gap = 0.0f64;
            for (a, b) in t_all.roles().iter().zip(t_key.roles()) {
                worst_b = worst_b.max(bhattacharyya_distance(a, b).unwrap());
                worst_gap = worst_gap.max(dist(a.mean(), b.mean()));
            }
            (worst_b, worst_gap)
        })
        .collect();
    let ok = runs.iter().filter(|r| r.0 <= 0.1 && r.1 <= 0.3).count();
    let frac = ok as f64 / runs.len() as f64;
    Outcome {
        pass: frac >= 0.9,
        detail: format!(
            "{ok}/{} TGPs within Bhattacharyya 0.1 and 0.3 m ({:.0}%); median worst-role distance {:.3}, median worst gap {:.3} m",
            runs.len(),
            100.0 * frac,
            median(runs.iter().map(|r| r.0).collect()),
            median(runs.iter().map(|r| r.1).collect())
        ),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn solver_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for n in 1..=7 {
        let perms = permutations(n);
        for _ in 0..1000 {
            let m = CostMatrix::from_fn(n, n, |_, _| rng.random_range(-10.0..10.0)).unwrap();
            let brute = perms.iter().map(|p| m.cost_of(p)).fold(f64::INFINITY, f64::min);
            let got = m.cost_of(&hungarian(&m).mapping);
            if (got - brute).abs() > 1e-9 * brute.abs().max(1.0) {
                mismatches += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    let mut unconverged = 0;
    for n in 2..=20 {
        for _ in 0..20 {
            let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-3.0f64..3.0).exp());
            let out = sinkhorn_normalize(&q, 100_000, 1e-6).unwrap();
            if !out.converged {
                unconverged += 1;
            }
            for i in 0..n {
                worst = worst.max((out.matrix.row(i).sum() - 1.0).abs());
                worst = worst.max((out.matrix.column(i).sum() - 1.0).abs());
            }
        }
    }
    Outcome {
        pass: mismatches == 0 && worst <= 1e-6 && unconverged == 0,
        detail: format!(
            "Hungarian vs brute force: {mismatches} mismatches in 7000; Sinkhorn n=2..20 (380 matrices): worst marginal error {worst:.1e}, {unconverged} unconverged"
        ),
    }
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> Gaussian2D {
    let a = rng.random_range(0.3..3.0);
    let b = rng.random_range(0.3..3.0);
    let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (t.cos(), t.sin());
    Gaussian2D::new(
        [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        SymMat2::new(a * c * c + b * s * s, (a - b) * c * s, a * s * s + b * c * c),
        1.0,
    )
    .unwrap()
}

/// Midpoint-rule KL(p‖q) and Bhattacharyya distance on a grid covering both densities.
fn quadrature(p: &Gaussian2D, q: &Gaussian2D) -> (f64, f64) {
    let reach = |g: &Gaussian2D| 9.0 * g.cov().eigenvalues().0.sqrt();
    let (rp, rq) = (reach(p), reach(q));
    let x0 = (p.mean()[0] - rp).min(q.mean()[0] - rq);
    let x1 = (p.mean()[0] + rp).max(q.mean()[0] + rq);
    let y0 = (p.mean()[1] - rp).min(q.mean()[1] - rq);
    let y1 = (p.mean()[1] + rp).max(q.mean()[1] + rq);
    let n = 1200;
    let (hx, hy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut kl, mut bc) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let x = [x0 + (i as f64 + 0.5) * hx, y0 + (j as f64 + 0.5) * hy];
            let (lp, lq) = (p.log_pdf(x), q.log_pdf(x));
            kl += lp.exp() * (lp - lq);
            bc += (0.5 * (lp + lq)).exp();
        }
    }
    (kl * hx * hy, -(bc * hx * hy).ln())
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pairs: Vec<(Gaussian2D, Gaussian2D)> = (0..20).map(|_| (random_gaussian(&mut rng), random_gaussian(&mut rng))).collect();
    let errors: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(p, q)| {
            let (kl, b) = quadrature(p, q);
            ((kl - kl_divergence(p, q)).abs(), (b - bhattacharyya_distance(p, q).unwrap()).abs())
        })
        .collect();
    let kl_err = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let b_err = errors.iter().map(|e| e.1).fold(0.0, f64::max);

    let mut within = 0;
    let mut worst_z = 0.0f64;
    for (p, _) in &pairs {
        let n = 100_000;
        let samples: Vec<f64> = (0..n).map(|_| -p.log_pdf(p.sample(&mut rng))).collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let z = (mean - differential_entropy(p)).abs() / (var / n as f64).sqrt();
        worst_z = worst_z.max(z);
        if z <= 3.0 {
            within += 1;
        }
    }
    Outcome {
        pass: kl_err <= 1e-3 && b_err <= 1e-3 && within == pairs.len(),
        detail: format!(
            "20 pairs: max |KL − quadrature| {kl_err:.1e}, max |Bhattacharyya − quadrature| {b_err:.1e}; entropy within 3 SE of Monte Carlo on {within}/20 (worst {worst_z:.2} SE)"
        ),
    }
}

/// Worst per-role distance between a leaf template and the generator it matches best.
fn leaf_match(leaf: &Template, generators: &[Template; 2]) -> (usize, f64) {
    generators
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let aligned = align_template(&leaf.to_formation(), g).unwrap();
            let worst = aligned
                .roles()
                .iter()
                .zip(g.roles())
                .map(|(a, b)| bhattacharyya_distance(a, b).unwrap())
                .fold(0.0, f64::max);
            (i, worst)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

fn tree_sanity() -> Outcome {
    let cfg = TreeConfig::default();
    let mixes: Vec<(usize, usize, f64, bool)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let (ds, gens) = two_formation_mix(700 + seed, 1000);
            let tree = learn_tree(&ds, &player_distributions(&ds).unwrap(), &cfg).unwrap();
            let leaves = tree.leaves();
            let matches: Vec<(usize, f64)> = leaves.iter().map(|l| leaf_match(&l.template, &gens)).collect();
            let worst = matches.iter().map(|m| m.1).fold(0.0, f64::max);
            let both = matches.iter().any(|m| m.0 == 0) && matches.iter().any(|m| m.0 == 1);
            (tree.depth(), leaves.len(), worst, both)
        })
        .collect();
    let singles: Vec<usize> = (0..10u64)
        .into_par_iter()
        .map(|seed| {
            let t = generate_formation(K, 3.0, (1.0, 1.6), 900 + seed).unwrap();
            let (ds, _) = sample_dataset(&t, 2000, 0.05, 0.1, 950 + seed).unwrap();
            learn_tree(&ds, &player_distributions(&ds).unwrap(), &cfg).unwrap().depth()
        })
        .collect();
    let good_mix = mixes.iter().filter(|m| m.0 == 2 && m.1 == 2 && m.2 <= 0.1 && m.3).count();
    let bad: Vec<String> = mixes
        .iter()
        .enumerate()
        .filter(|(_, m)| !(m.0 == 2 && m.1 == 2 && m.2 <= 0.1 && m.3))
        .map(|(i, m)| format!("seed {i}: depth {} leaves {} worst {:.3}", m.0, m.1, m.2))
        .collect();
    let good_single = singles.iter().filter(|&&d| d == 1).count();
    Outcome {
        pass: good_mix == mixes.len() && good_single == singles.len(),
        detail: format!(
            "mixtures depth 2 with generator-matching leaves on {good_mix}/20, single formations depth 1 on {good_single}/10{}",
            if bad.is_empty() { String::new() } else { format!(" [{}]", bad.join("; ")) }
        ),
    }
}

fn main() {
    // Honour `cargo test -- --list` and name filters well enough to stay out of the way.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut failures = Vec::new();
    let tgps = suite();
    let (c1, c2) = soft_vs_hard(&tgps);
    report(1, "likelihood dominance", &c1, &mut failures);
    report(2, "EM monotonicity", &c2, &mut failures);
    report(3, "role recovery", &role_recovery(), &mut failures);
    report(4, "complexity", &complexity(), &mut failures);
    report(5, "compression", &compression_check(), &mut failures);
    report(6, "initialization", &initialization(&tgps), &mut failures);
    report(7, "key-frame fidelity", &key_frames(&tgps), &mut failures);
    report(8, "solver oracles", &solver_oracles(), &mut failures);
    report(9, "geometry oracles", &geometry_oracles(), &mut failures);
    report(10, "tree sanity", &tree_sanity(), &mut failures);
    if failures.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}

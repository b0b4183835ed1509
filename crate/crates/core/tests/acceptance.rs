//! End-to-end acceptance checks. Runs sequentially so timings are not
//! disturbed by other tests, prints one line per check and exits nonzero if
//! any check fails.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::{Duration, Instant};

use changeseg::eval::{self, GtMatch};
use changeseg::geometry::{Point3, Vec3};
use changeseg::gmp::{self, ChangeField, CutPursuitOptions, GmpProblem};
use changeseg::io::{GroundTruth, InstancePoints};
use changeseg::pipeline::{self, Baseline, PipelineConfig, SweepParam};
use changeseg::postprocess::{Detection, DetectionSet};
use changeseg::supervoxel::{self, SupervoxelParams};
use changeseg::synth::{self, SceneSpec, SynthScene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// --- A1 / A2 -------------------------------------------------------------

/// Energy of `q` written out from the definitions, independent of the library.
fn oracle_energy(p: &[[f64; 2]], q: &[[f64; 2]], edges: &[(usize, usize)], lambda: f64, eps: f64) -> f64 {
    let sm = |x: f64| (1.0 - eps) * x + eps / 2.0;
    let mut e = 0.0;
    for (a, b) in p.iter().zip(q) {
        for k in 0..2 {
            let (pa, qb) = (sm(a[k]), sm(b[k]));
            if pa > 0.0 {
                e += pa * (pa / qb).ln();
            }
        }
    }
    for &(i, j) in edges {
        if (q[i][0] - q[j][0]).abs() > 1e-12 || (q[i][1] - q[j][1]).abs() > 1e-12 {
            e += lambda;
        }
    }
    e
}

/// Minimum over all set partitions, each block valued at the mean of its
/// members (the KL minimizer for a fixed block).
fn oracle_min(p: &[[f64; 2]], edges: &[(usize, usize)], lambda: f64, eps: f64) -> f64 {
    let n = p.len();
    let mut best = f64::INFINITY;
    let mut block = vec![0usize; n];
    fn rec(
        i: usize,
        blocks: usize,
        block: &mut Vec<usize>,
        p: &[[f64; 2]],
        edges: &[(usize, usize)],
        lambda: f64,
        eps: f64,
        best: &mut f64,
    ) {
        let n = p.len();
        if i == n {
            let mut sums = vec![[0.0f64; 2]; blocks];
            let mut counts = vec![0usize; blocks];
            for (v, &b) in block.iter().enumerate() {
                sums[b][0] += p[v][0];
                sums[b][1] += p[v][1];
                counts[b] += 1;
            }
            let q: Vec<[f64; 2]> = block
                .iter()
                .map(|&b| [sums[b][0] / counts[b] as f64, sums[b][1] / counts[b] as f64])
                .collect();
            *best = best.min(oracle_energy(p, &q, edges, lambda, eps));
            return;
        }
        for b in 0..=blocks {
            block[i] = b;
            rec(i + 1, blocks.max(b + 1), block, p, edges, lambda, eps, best);
        }
    }
    rec(0, 0, &mut block, p, edges, lambda, eps, &mut best);
    best
}

fn a1_a2() -> (Check, Check) {
    const LAMBDAS: [f64; 4] = [0.05, 0.2, 1.0, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut equal, mut below, mut far, mut nonmono) = (0, 0, 0, 0);
    let mut worst = 0.0f64;
    let total = 200;
    for inst in 0..total {
        let n = rng.random_range(1..=8usize);
        // Half the instances use the two-level prior the pipeline produces,
        // the rest arbitrary distributions.
        let p: Vec<[f64; 2]> = (0..n)
            .map(|_| {
                let a = if inst % 2 == 0 {
                    if rng.random_bool(0.4) { 0.8 } else { 0.5 }
                } else {
                    rng.random::<f64>()
                };
                [a, 1.0 - a]
            })
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    edges.push((i, j));
                }
            }
        }
        let lambda = LAMBDAS[inst % 4];
        let eps = GmpProblem::DEFAULT_EPSILON;
        let problem = GmpProblem::new(n, edges.iter().map(|&(i, j)| (i as u32, j as u32, 1.0))).with_lambda(lambda);
        let field = ChangeField { values: p.clone() };
        let res = gmp::cut_pursuit(&field, &problem, &CutPursuitOptions::default()).expect("solver");
        let e = oracle_energy(&p, &res.q.values, &edges, lambda, eps);
        let o = oracle_min(&p, &edges, lambda, eps);
        if e < o - 1e-9 {
            below += 1;
        }
        if (e - o).abs() <= 1e-9 {
            equal += 1;
        } else {
            let rel = (e - o) / o.abs().max(1e-12);
            worst = worst.max(rel);
            if rel > 0.05 {
                far += 1;
            }
        }
        if res.history.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            nonmono += 1;
        }
    }
    let a1 = (|| {
        ensure(below == 0, format!("{below} instances below the oracle"))?;
        ensure(equal * 10 >= total * 9, format!("only {equal}/{total} equal the oracle"))?;
        ensure(far == 0, format!("{far} instances more than 5% above the oracle (worst {:.2}%)", worst * 100.0))?;
        Ok(format!("{equal}/{total} equal the oracle, worst gap {:.3}%", worst * 100.0))
    })();
    let a2 = if nonmono == 0 {
        Ok(format!("history non-increasing on all {total} instances"))
    } else {
        Err(format!("{nonmono} instances with an energy increase"))
    };
    (a1, a2)
}

// --- scenes --------------------------------------------------------------

fn gt_ious(report: &eval::EvalReport) -> BTreeMap<u32, f64> {
    report.matches.iter().map(|m: &GtMatch| (m.instance_id, m.iou)).collect()
}

fn run_scene(scene: &SynthScene, config: &PipelineConfig) -> Result<eval::EvalReport, String> {
    let out = pipeline::run(&scene.to_scene(), config).map_err(|e| e.to_string())?;
    out.report.ok_or_else(|| "no evaluation report".to_string())
}

fn a3(scene: &SynthScene) -> (Check, Option<f64>) {
    let report = match run_scene(scene, &PipelineConfig::default()) {
        Ok(r) => r,
        Err(e) => return (Err(e), None),
    };
    let recall = report.recall_at(0.5).unwrap_or(f64::NAN);
    let ious = gt_ious(&report);
    let check = (|| {
        ensure(recall == 100.0, format!("recall@0.50 = {recall}, matched IoUs {ious:?}"))?;
        ensure(
            report.matches.iter().all(|m| m.detection_id.is_some() && m.iou >= 0.90),
            format!("matched IoUs {ious:?}"),
        )?;
        Ok(format!("recall@0.50 = {recall:.1}, IoUs {ious:.3?}"))
    })();
    (check, Some(recall))
}

fn a4() -> Check {
    let scene = synth::generate(&SceneSpec::slid_object()).map_err(|e| e.to_string())?;
    let full = run_scene(&scene, &PipelineConfig::default())?;
    let seeds_only = run_scene(
        &scene,
        &PipelineConfig {
            baseline: Baseline::SeedsOnly,
            ..Default::default()
        },
    )?;
    let (rf, rs) = (full.recall_at(0.5).unwrap(), seeds_only.recall_at(0.5).unwrap());
    let slid_iou = gt_ious(&seeds_only).get(&1).copied().unwrap_or(0.0);
    ensure(rf > rs, format!("full {rf} vs seeds-only {rs}"))?;
    ensure(slid_iou < 0.5, format!("seeds-only IoU of the slid object {slid_iou:.3}"))?;
    Ok(format!(
        "full {rf:.1} > seeds-only {rs:.1}; seeds-only slid IoU {slid_iou:.3}, full {:.3}",
        gt_ious(&full).get(&1).copied().unwrap_or(0.0)
    ))
}

fn a5(scene: &SynthScene) -> Check {
    let table = pipeline::sweep(&scene.to_scene(), &PipelineConfig::default(), SweepParam::PSeed, &[0.8, 0.7, 0.5])
        .map_err(|e| e.to_string())?;
    let r: Vec<f64> = table
        .rows
        .iter()
        .map(|row| row.report.as_ref().and_then(|rep| rep.recall_at(0.5)).unwrap_or(f64::NAN))
        .collect();
    ensure(r[0] == r[1], format!("recall {r:?}"))?;
    ensure(r[2] == 0.0, format!("recall {r:?}"))?;
    Ok(format!("recall@0.50 at p_seed 0.8/0.7/0.5 = {r:?}"))
}

fn a6(scene: &SynthScene, a3_recall: Option<f64>) -> Check {
    let base = a3_recall.ok_or("A3 produced no recall")?;
    let mut fragmented = scene.clone();
    fragmented.fragment(3, 7).map_err(|e| e.to_string())?;
    let report = run_scene(&fragmented, &PipelineConfig::default())?;
    let r = report.recall_at(0.5).unwrap();
    let one_object = 100.0 / scene.ground_truth.changed_instances.len() as f64;
    ensure((r - base).abs() <= one_object + 1e-9, format!("{r} vs {base}"))?;
    Ok(format!("recall@0.50 = {r:.1} with 3 fragments per region (A3: {base:.1})"))
}

/// Nearest ray hit over the rescan quads; returns the camera z.
fn analytic_depth(scene: &SynthScene, origin: Point3, dir: Vec3, forward: Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for q in &scene.rescan_quads {
        let [c0, c1, _, c3] = q.corners;
        let n = (c1 - c0).cross(&(c3 - c0));
        let denom = n.dot(&dir);
        if denom.abs() < 1e-15 {
            continue;
        }
        let t = n.dot(&(c0 - origin)) / denom;
        if t <= 0.0 {
            continue;
        }
        let hit = origin + dir * t;
        let (u, v) = (c1 - c0, c3 - c0);
        let a = (hit - c0).dot(&u) / u.norm_squared();
        let b = (hit - c0).dot(&v) / v.norm_squared();
        if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
            let z = (dir * t).dot(&forward);
            if best.is_none_or(|d| z < d) {
                best = Some(z);
            }
        }
    }
    best
}

fn a7(scene: &SynthScene) -> Check {
    let (mut ok, mut total) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for view in &scene.views {
        let depth = synth::clean_depth(scene, view, true);
        // Camera-to-world pose: columns of the rotation are the camera axes.
        let r = view.pose.rotation();
        let origin = Point3::from(view.pose.translation());
        let forward = r.column(2).into_owned();
        let k = &view.intrinsics;
        for row in 0..k.height {
            for col in 0..k.width {
                let Some(d) = depth.get(col, row) else {
                    continue;
                };
                total += 1;
                let x = (col as f64 + 0.5 - k.cx) / k.fx;
                let y = (row as f64 + 0.5 - k.cy) / k.fy;
                let dir = r * Vec3::new(x, y, 1.0);
                if let Some(z) = analytic_depth(scene, origin, dir, forward) {
                    let err = (z - d).abs();
                    if err <= 1e-4 {
                        ok += 1;
                    } else {
                        worst = worst.max(err);
                    }
                }
            }
        }
    }
    let frac = ok as f64 / total.max(1) as f64;
    ensure(total > 0 && frac >= 0.999, format!("{ok}/{total} pixels within 1e-4 m (worst miss {worst:.2e})"))?;
    Ok(format!("{ok}/{total} valid pixels within 1e-4 m ({:.4}%)", frac * 100.0))
}

fn a8(scene: &SynthScene) -> Check {
    let params = SupervoxelParams::default();
    let cloud = &scene.rescan_cloud;
    let g = supervoxel::build(cloud, &params).map_err(|e| e.to_string())?;
    let g2 = supervoxel::build(cloud, &params).map_err(|e| e.to_string())?;
    ensure(g == g2, "two builds differ")?;

    // Totality: every point in exactly one supervoxel, consistent with the assignment.
    let mut owner = vec![u32::MAX; cloud.len()];
    for (s, sv) in g.supervoxels.iter().enumerate() {
        ensure(!sv.point_indices.is_empty(), format!("supervoxel {s} is empty"))?;
        for &p in &sv.point_indices {
            ensure(owner[p as usize] == u32::MAX, format!("point {p} in two supervoxels"))?;
            owner[p as usize] = s as u32;
        }
    }
    ensure(owner.iter().all(|&o| o != u32::MAX), "some point has no supervoxel")?;
    ensure(owner == g.assignment, "assignment disagrees with member lists")?;

    // Connectivity: member voxels 26-connected at the voxel resolution.
    let vr = params.voxel_resolution;
    let key = |p: &Point3| [(p.x / vr).floor() as i64, (p.y / vr).floor() as i64, (p.z / vr).floor() as i64];
    for (s, sv) in g.supervoxels.iter().enumerate() {
        let cells: BTreeSet<[i64; 3]> = sv.point_indices.iter().map(|&p| key(&cloud.positions[p as usize])).collect();
        let start = *cells.iter().next().unwrap();
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(c) = stack.pop() {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if cells.contains(&n) && seen.insert(n) {
                            stack.push(n);
                        }
                    }
                }
            }
        }
        ensure(seen.len() == cells.len(), format!("supervoxel {s} is not connected"))?;
    }

    // Purity: points agreeing with their supervoxel's majority instance.
    let ids = cloud.instance_ids.as_ref().ok_or("no instance ids")?;
    let mut pure = 0usize;
    for sv in &g.supervoxels {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for &p in &sv.point_indices {
            *counts.entry(ids[p as usize]).or_default() += 1;
        }
        pure += counts.values().max().copied().unwrap_or(0);
    }
    let purity = pure as f64 / cloud.len() as f64;
    ensure(purity >= 0.95, format!("purity {purity:.4}"))?;
    Ok(format!("{} supervoxels, purity {:.2}%", g.len(), purity * 100.0))
}

fn a9() -> Check {
    let gt_of = |sets: Vec<Vec<u32>>| GroundTruth {
        changed_instances: sets
            .into_iter()
            .enumerate()
            .map(|(i, point_indices)| InstancePoints {
                instance_id: i as u32 + 1,
                point_indices,
            })
            .collect(),
        removed_instances: vec![],
    };
    let dets_of = |sets: Vec<(f64, Vec<u32>)>| DetectionSet {
        detections: sets
            .into_iter()
            .enumerate()
            .map(|(i, (score, point_indices))| Detection {
                id: i as u32,
                score,
                point_indices,
            })
            .collect(),
        ..Default::default()
    };

    // IoU 0.5: 50 of 100 ground-truth points, nothing extra.
    let gt_pts: Vec<u32> = (0..100).collect();
    let half: Vec<u32> = (0..50).collect();
    let iou = eval::iou(&half, &gt_pts);
    ensure(iou == 0.5, format!("IoU {iou}"))?;

    // Recall 50: two instances matched at 0.6 and 0.1.
    let gt = gt_of(vec![(0..100).collect(), (100..200).collect()]);
    let dets = dets_of(vec![
        (1.0, (0..60).collect()),    // 60/100
        (1.0, (100..110).collect()), // 10/100
    ]);
    let recall = eval::recall_at(&dets, &gt, 0.5).map_err(|e| e.to_string())?;
    ensure(recall == 50.0, format!("recall {recall}"))?;

    // AP 1.0: a single detection equal to the single instance, and a TP
    // ranked ahead of an FP.
    let gt = gt_of(vec![(0..100).collect()]);
    let ap_exact = eval::average_precision(&dets_of(vec![(1.0, (0..100).collect())]), &gt, 0.25);
    ensure(ap_exact == 1.0, format!("AP {ap_exact}"))?;
    let ap_ranked = eval::average_precision(
        &dets_of(vec![(0.9, (0..100).collect()), (0.8, (500..600).collect())]),
        &gt,
        0.25,
    );
    ensure(ap_ranked == 1.0, format!("AP {ap_ranked}"))?;
    let ap_none = eval::average_precision(&dets_of(vec![]), &gt, 0.25);
    ensure(ap_none == 0.0, format!("AP without detections {ap_none}"))?;
    Ok("IoU 0.5, recall 50.0, AP 1.0 reproduced".into())
}

fn a10() -> Check {
    let p = ChangeField {
        values: vec![[0.8, 0.2], [0.5, 0.5]],
    };
    let problem = GmpProblem::new(2, [(0, 1, 1.0)]).with_lambda(1.0).with_epsilon(0.0);
    let res = gmp::cut_pursuit(&p, &problem, &CutPursuitOptions::default()).map_err(|e| e.to_string())?;
    for q in &res.q.values {
        ensure((q[0] - 0.65).abs() < 1e-12 && (q[1] - 0.35).abs() < 1e-12, format!("Q = {:?}", res.q.values))?;
    }
    ensure(gmp::extract_labels(&res.q) == vec![true, true], "labels are not both changing")?;
    let (_, oracle_energy) = gmp::brute_force_gmp(&p, &problem).map_err(|e| e.to_string())?;
    let hand = 0.8 * (0.8f64 / 0.65).ln() + 0.2 * (0.2f64 / 0.35).ln() + 0.5 * (0.5f64 / 0.65).ln() + 0.5 * (0.5f64 / 0.35).ln();
    ensure((oracle_energy - res.energy).abs() < 1e-6, format!("oracle {} vs {}", oracle_energy, res.energy))?;
    ensure((oracle_energy - hand).abs() < 1e-6, format!("oracle {} vs closed form {hand}", oracle_energy))?;
    ensure((oracle_energy - 0.1013).abs() < 5e-5, format!("energy {}", oracle_energy))?;
    Ok(format!("Q = (0.65, 0.35) on both nodes, energy {:.6}", res.energy))
}

struct Line {
    id: &'static str,
    limit: Duration,
    elapsed: Duration,
    result: Check,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    let mut lines = Vec::new();
    let secs = Duration::from_secs;

    let ((r1, r2), t) = timed(a1_a2);
    lines.push(Line { id: "A1", limit: secs(10), elapsed: t, result: r1 });
    lines.push(Line { id: "A2", limit: secs(10), elapsed: t, result: r2 });

    let (scene, t_gen) = timed(|| synth::generate(&SceneSpec::three_cuboids()).expect("three-cuboid scene"));

    let ((r3, recall3), t) = timed(|| a3(&scene));
    lines.push(Line { id: "A3", limit: secs(60), elapsed: t + t_gen, result: r3 });

    let (r, t) = timed(a4);
    lines.push(Line { id: "A4", limit: secs(60), elapsed: t, result: r });

    let (r, t) = timed(|| a5(&scene));
    lines.push(Line { id: "A5", limit: secs(90), elapsed: t + t_gen, result: r });

    let (r, t) = timed(|| a6(&scene, recall3));
    lines.push(Line { id: "A6", limit: secs(60), elapsed: t + t_gen, result: r });

    let (r, t) = timed(|| a7(&scene));
    lines.push(Line { id: "A7", limit: secs(10), elapsed: t, result: r });

    let (r, t) = timed(|| a8(&scene));
    lines.push(Line { id: "A8", limit: secs(30), elapsed: t, result: r });

    let (r, t) = timed(a9);
    lines.push(Line { id: "A9", limit: secs(1), elapsed: t, result: r });

    let (r, t) = timed(a10);
    lines.push(Line { id: "A10", limit: secs(1), elapsed: t, result: r });

    let mut failed = 0;
    for l in &lines {
        let over = l.elapsed > l.limit;
        let (status, detail) = match (&l.result, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {:?} limit", l.limit)),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{:<4} {status} [{:>6.2}s] {detail}", l.id, l.elapsed.as_secs_f64());
    }
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

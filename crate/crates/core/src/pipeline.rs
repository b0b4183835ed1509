//! The full chain: render and compare, seed, supervoxelize, attach mask
//! constraints, optimize, group into detections, evaluate.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, IouMode};
use crate::geometry::{DepthImage, PointCloud};
use crate::gmp::{self, ChangeField, CutPursuitOptions, CutPursuitResult, GmpProblem};
use crate::io::{self, Scene};
use crate::masks::{self, EdgeWeights, MaskAssignment, MaskVote};
use crate::postprocess::{self, ComponentParams, DetectionSet};
use crate::render::{self, RenderOptions};
use crate::seeds::{self, BackprojectOptions, SeedSet, ThresholdPolicy};
use crate::supervoxel::{self, SupervoxelGraph, SupervoxelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    #[default]
    Full,
    /// Seeded supervoxels are the result; no mask constraints, no optimization.
    SeedsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Unit weight between neighbors sharing a mask in some view.
    #[default]
    SameMask,
    /// Color-similarity weight on every adjacency edge.
    Photoconsistency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub render: RenderOptions,
    pub threshold: ThresholdPolicy,
    pub backproject: BackprojectOptions,
    pub supervoxel: SupervoxelParams,
    pub min_seed_points: usize,
    pub depth_tol: f64,
    pub mask_vote: MaskVote,
    /// Mask sources to use; empty means every source present in all views.
    pub sources: Vec<String>,
    pub edge_mode: EdgeMode,
    pub gamma: f64,
    pub w: f64,
    pub lambda: f64,
    pub p_seed: f64,
    pub epsilon: f64,
    pub cut_pursuit: CutPursuitOptions,
    pub components: ComponentParams,
    pub eval_ks: Vec<f64>,
    pub iou_mode: IouMode,
    pub baseline: Baseline,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            render: RenderOptions::default(),
            threshold: ThresholdPolicy::default(),
            backproject: BackprojectOptions::default(),
            supervoxel: SupervoxelParams::default(),
            min_seed_points: 1,
            depth_tol: masks::DEFAULT_DEPTH_TOL,
            mask_vote: MaskVote::Visible,
            sources: Vec::new(),
            edge_mode: EdgeMode::SameMask,
            gamma: 1.0,
            w: GmpProblem::DEFAULT_W,
            lambda: GmpProblem::DEFAULT_LAMBDA,
            p_seed: 0.8,
            epsilon: GmpProblem::DEFAULT_EPSILON,
            cut_pursuit: CutPursuitOptions::default(),
            components: ComponentParams::default(),
            eval_ks: eval::DEFAULT_KS.to_vec(),
            iou_mode: IouMode::Point,
            baseline: Baseline::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        self.threshold.validate()?;
        if !(self.backproject.snap_radius > 0.0) {
            return Err(Error::invalid("snap radius must be > 0"));
        }
        self.supervoxel.validate()?;
        if !(self.depth_tol >= 0.0) {
            return Err(Error::invalid("depth tolerance must be >= 0"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid("gamma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_seed) {
            return Err(Error::invalid(format!("p_seed must be in [0, 1], got {}", self.p_seed)));
        }
        self.problem(0, &[]).validate()?;
        self.components.validate()?;
        if self.eval_ks.iter().any(|k| !(0.0..1.0).contains(k)) {
            return Err(Error::invalid("evaluation IoU thresholds must be in [0, 1)"));
        }
        Ok(())
    }

    fn problem(&self, n: usize, edges: &[(u32, u32, f64)]) -> GmpProblem {
        let mut p = GmpProblem::new(n, edges.iter().copied());
        p.w = self.w;
        p.lambda = self.lambda;
        p.epsilon = self.epsilon;
        p
    }

    pub fn set_param(&mut self, param: SweepParam, value: f64) {
        match param {
            SweepParam::Lambda => self.lambda = value,
            SweepParam::PSeed => self.p_seed = value,
            SweepParam::Tau => self.threshold.tau_fixed = value,
        }
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Depth maps of both scans rendered from every view.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub reference: Vec<DepthImage>,
    pub rescan: Vec<DepthImage>,
}

pub fn render_stage(scene: &Scene, config: &PipelineConfig) -> Result<Rendered> {
    stage("render", config.render.validate())?;
    Ok(Rendered {
        reference: render::render_views(scene.reference_geometry(), &scene.views, &config.render),
        rescan: render::render_views(scene.rescan_geometry(), &scene.views, &config.render),
    })
}

pub fn seed_stage(scene: &Scene, rendered: &Rendered, config: &PipelineConfig) -> Result<SeedSet> {
    stage(
        "seed",
        seeds::detect_seeds(
            &scene.views,
            &rendered.reference,
            &rendered.rescan,
            &scene.rescan,
            &config.threshold,
            &config.backproject,
        ),
    )
}

pub fn supervoxel_stage(scene: &Scene, config: &PipelineConfig) -> Result<SupervoxelGraph> {
    stage("supervoxel", supervoxel::build(&scene.rescan, &config.supervoxel))
}

/// Sources named in the config, or all sources common to every view.
pub fn resolve_sources(scene: &Scene, config: &PipelineConfig) -> Vec<String> {
    if !config.sources.is_empty() {
        return config.sources.clone();
    }
    let mut it = scene.views.iter();
    let Some(first) = it.next() else {
        return Vec::new();
    };
    let mut common: Vec<String> = first.labels.keys().cloned().collect();
    for v in it {
        common.retain(|s| v.labels.contains_key(s));
    }
    common
}

pub fn assign_stage(
    scene: &Scene,
    rendered: &Rendered,
    graph: &SupervoxelGraph,
    config: &PipelineConfig,
) -> Result<Vec<MaskAssignment>> {
    let sources = resolve_sources(scene, config);
    if sources.is_empty() && config.edge_mode == EdgeMode::SameMask {
        return stage("assign", Err(Error::invalid("no mask source is available in every view")));
    }
    stage(
        "assign",
        masks::assign_masks(&scene.rescan, graph, &scene.views, &rendered.rescan, &sources, config.depth_tol, config.mask_vote),
    )
}

pub fn edge_weights(
    cloud: &PointCloud,
    graph: &SupervoxelGraph,
    assignments: &[MaskAssignment],
    config: &PipelineConfig,
) -> Result<EdgeWeights> {
    match config.edge_mode {
        EdgeMode::SameMask => Ok(masks::same_mask_edges(graph, assignments)),
        EdgeMode::Photoconsistency => stage("assign", masks::photoconsistency_weights(graph, cloud, config.gamma)),
    }
}

/// Contents of `assignments.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentFile {
    pub assignments: Vec<MaskAssignment>,
    pub edges: EdgeWeights,
}

/// Labels per supervoxel plus the optimization record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOutput {
    pub labels: Vec<bool>,
    pub initial: ChangeField,
    /// Absent for the seeds-only baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<CutPursuitResult>,
}

pub fn optimize_stage(
    graph: &SupervoxelGraph,
    seeds: &SeedSet,
    weights: &EdgeWeights,
    config: &PipelineConfig,
) -> Result<LabelOutput> {
    let changed = supervoxel::mark_changed(graph, seeds, config.min_seed_points);
    let initial = gmp::init_labeling(graph.len(), &changed, config.p_seed);
    if config.baseline == Baseline::SeedsOnly {
        return Ok(LabelOutput {
            labels: (0..graph.len() as u32).map(|i| changed.contains(&i)).collect(),
            initial,
            solution: None,
        });
    }
    let edges: Vec<(u32, u32, f64)> = weights.edges.iter().zip(&weights.weights).map(|(&(a, b), &w)| (a, b, w)).collect();
    let problem = config.problem(graph.len(), &edges);
    let solution = stage("optimize", gmp::cut_pursuit(&initial, &problem, &config.cut_pursuit))?;
    Ok(LabelOutput {
        labels: gmp::extract_labels(&solution.q),
        initial,
        solution: Some(solution),
    })
}

pub fn detect_stage(
    cloud: &PointCloud,
    graph: &SupervoxelGraph,
    labels: &[bool],
    seeds: &SeedSet,
    config: &PipelineConfig,
) -> Result<DetectionSet> {
    let points = stage("detect", postprocess::changed_points(graph, labels))?;
    let set = stage("detect", postprocess::connected_components(&points, cloud, &config.components))?;
    let mut set = postprocess::score(set, seeds);
    set.params = serde_json::to_value(config).unwrap_or_default();
    Ok(set)
}

/// `None` when the scene carries no ground truth or no changed instances.
pub fn eval_stage(scene: &Scene, detections: &DetectionSet, config: &PipelineConfig) -> Result<Option<EvalReport>> {
    let Some(gt) = &scene.ground_truth else {
        return Ok(None);
    };
    match eval::evaluate(detections, gt, &config.eval_ks, config.iou_mode, Some(&scene.rescan)) {
        Ok(r) => Ok(Some(r)),
        Err(Error::NoGroundTruth) => Ok(None),
        Err(e) => stage("eval", Err(e)),
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub seeds: SeedSet,
    pub graph: SupervoxelGraph,
    pub assignments: Vec<MaskAssignment>,
    pub weights: EdgeWeights,
    pub labels: LabelOutput,
    pub detections: DetectionSet,
    pub report: Option<EvalReport>,
}

impl PipelineOutput {
    /// Writes every stage artifact under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_json(&dir.join("seeds.json"), &self.seeds)?;
        io::write_json(&dir.join("graph.json"), &self.graph)?;
        io::write_json(
            &dir.join("assignments.json"),
            &AssignmentFile {
                assignments: self.assignments.clone(),
                edges: self.weights.clone(),
            },
        )?;
        io::write_json(&dir.join("labels.json"), &self.labels)?;
        io::write_json(&dir.join("detections.json"), &self.detections)?;
        if let Some(r) = &self.report {
            io::write_json(&dir.join("report.json"), r)?;
        }
        Ok(())
    }
}

/// Stages that do not depend on the seed threshold, the prior or lambda.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub rendered: Rendered,
    pub graph: SupervoxelGraph,
    pub assignments: Vec<MaskAssignment>,
    pub weights: EdgeWeights,
}

pub fn prepare(scene: &Scene, config: &PipelineConfig) -> Result<Prepared> {
    config.validate()?;
    let rendered = render_stage(scene, config)?;
    let graph = supervoxel_stage(scene, config)?;
    info!("{} supervoxels, {} adjacency edges", graph.len(), graph.edges.len());
    let (assignments, weights) = if config.baseline == Baseline::SeedsOnly {
        (Vec::new(), EdgeWeights { edges: Vec::new(), weights: Vec::new() })
    } else {
        let a = if config.edge_mode == EdgeMode::SameMask {
            assign_stage(scene, &rendered, &graph, config)?
        } else {
            Vec::new()
        };
        let w = edge_weights(&scene.rescan, &graph, &a, config)?;
        info!("{} of {} edges constrained", w.active_count(), w.edges.len());
        (a, w)
    };
    Ok(Prepared {
        rendered,
        graph,
        assignments,
        weights,
    })
}

/// Seeding onward, reusing prepared stages.
pub fn finish(scene: &Scene, prepared: &Prepared, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let seeds = seed_stage(scene, &prepared.rendered, config)?;
    info!("{} seed points", seeds.len());
    let labels = optimize_stage(&prepared.graph, &seeds, &prepared.weights, config)?;
    let detections = detect_stage(&scene.rescan, &prepared.graph, &labels.labels, &seeds, config)?;
    info!("{} detections", detections.len());
    let mut report = eval_stage(scene, &detections, config)?;
    let mut detections = detections;
    if let Some(r) = &mut report {
        detections.metrics = serde_json::to_value(&*r).ok();
    }
    Ok(PipelineOutput {
        seeds,
        graph: prepared.graph.clone(),
        assignments: prepared.assignments.clone(),
        weights: prepared.weights.clone(),
        labels,
        detections,
        report,
    })
}

pub fn run(scene: &Scene, config: &PipelineConfig) -> Result<PipelineOutput> {
    let prepared = prepare(scene, config)?;
    finish(scene, &prepared, config)
}

/// Loads the manifest, runs every stage and writes the artifacts to `out`.
pub fn run_pipeline(manifest: &Path, config: &PipelineConfig, out: &Path) -> Result<PipelineOutput> {
    config.validate()?;
    let m = io::load_manifest(manifest)?;
    let scene = io::load_scene(&m)?;
    let output = run(&scene, config)?;
    output.write(out)?;
    Ok(output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    PSeed,
    Tau,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::PSeed => "p_seed",
            SweepParam::Tau => "tau",
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "p_seed" | "p-seed" => Ok(SweepParam::PSeed),
            "tau" => Ok(SweepParam::Tau),
            _ => Err(Error::invalid(format!("unknown sweep parameter `{s}` (expected lambda, p_seed or tau)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub n_detections: usize,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn table(&self) -> String {
        let ks: Vec<f64> = self
            .rows
            .iter()
            .find_map(|r| r.report.as_ref())
            .map(|r| r.recall.iter().map(|x| x.k).collect())
            .unwrap_or_default();
        let mut s = format!("{:>10} {:>6}", self.param.name(), "dets");
        for k in &ks {
            s.push_str(&format!(" {:>8}", format!("R@{k:.2}")));
        }
        s.push_str(&format!(" {:>8}\n", "AP"));
        for r in &self.rows {
            s.push_str(&format!("{:>10.4} {:>6}", r.value, r.n_detections));
            match &r.report {
                Some(rep) => {
                    for x in &rep.recall {
                        s.push_str(&format!(" {:>8.2}", x.recall));
                    }
                    s.push_str(&format!(" {:>8.4}\n", rep.ap));
                }
                None => s.push_str("  (no ground truth)\n"),
            }
        }
        s
    }
}

/// One run per value; the scene-level stages are computed once.
pub fn sweep(scene: &Scene, config: &PipelineConfig, param: SweepParam, values: &[f64]) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    let prepared = prepare(scene, config)?;
    let one = |&value: &f64| -> Result<SweepRow> {
        let mut c = config.clone();
        c.set_param(param, value);
        let out = finish(scene, &prepared, &c)?;
        Ok(SweepRow {
            value,
            n_detections: out.detections.len(),
            report: out.report,
        })
    };
    #[cfg(feature = "parallel")]
    let rows = {
        use rayon::prelude::*;
        values.par_iter().map(one).collect::<Result<Vec<_>>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let rows = values.iter().map(one).collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { param, rows })
}

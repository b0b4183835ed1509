//! Browser bindings: render and compare one view of a synthetic scene pair,
//! run the pipeline with adjustable parameters, and solve a small partition
//! problem next to its exhaustive optimum.

use changeseg::geometry::DepthImage;
use changeseg::gmp::{self, ChangeField, CutPursuitOptions, GmpProblem};
use changeseg::io::Scene;
use changeseg::pipeline::{self, PipelineConfig, Prepared};
use changeseg::postprocess::DetectionSet;
use changeseg::synth::{self, CameraRing, SceneSpec};
use wasm_bindgen::prelude::*;

fn js_err(e: changeseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    prepared: Prepared,
    detections: DetectionSet,
    width: u32,
    height: u32,
}

fn depth_rgba(d: &DepthImage, max: f64) -> Vec<u8> {
    d.values
        .iter()
        .flat_map(|&v| {
            if v <= 0.0 {
                [20, 20, 30, 255]
            } else {
                let t = (1.0 - (v as f64 / max).clamp(0.0, 1.0)) * 255.0;
                [t as u8, t as u8, (t * 0.8 + 40.0).min(255.0) as u8, 255]
            }
        })
        .collect()
}

#[wasm_bindgen]
impl Demo {
    /// Builds a reduced-resolution scene from a preset name.
    #[wasm_bindgen(constructor)]
    pub fn new(preset: &str, seed: u64) -> Result<Demo, JsError> {
        let spec = SceneSpec {
            density: 1600.0,
            seed,
            cameras: CameraRing {
                count: 8,
                image_width: 160,
                image_height: 120,
                focal_px: 130.0,
                ..Default::default()
            },
            ..SceneSpec::preset(preset).map_err(js_err)?
        };
        let synth = synth::generate(&spec).map_err(js_err)?;
        let scene = synth.to_scene();
        let config = PipelineConfig::default();
        let prepared = pipeline::prepare(&scene, &config).map_err(js_err)?;
        Ok(Demo {
            scene,
            prepared,
            detections: DetectionSet::default(),
            width: spec.cameras.image_width,
            height: spec.cameras.image_height,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn view_count(&self) -> usize {
        self.scene.views.len()
    }

    /// RGBA pixels of one view: `kind` is "reference", "rescan" or "residual"
    /// (pixels above `tau` in red).
    pub fn view_image(&self, view: usize, kind: &str, tau: f64) -> Result<Vec<u8>, JsError> {
        let r = &self.prepared.rendered;
        let (a, b) = match (r.reference.get(view), r.rescan.get(view)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(JsError::new("view out of range")),
        };
        Ok(match kind {
            "reference" => depth_rgba(a, 6.0),
            "rescan" => depth_rgba(b, 6.0),
            "residual" => a
                .values
                .iter()
                .zip(&b.values)
                .flat_map(|(&x, &y)| {
                    if x <= 0.0 || y <= 0.0 {
                        return [20, 20, 30, 255];
                    }
                    let d = (x - y).abs() as f64;
                    if d > tau {
                        [230, 40, 40, 255]
                    } else {
                        let g = (d / tau * 200.0) as u8;
                        [g, g, g, 255]
                    }
                })
                .collect(),
            _ => return Err(JsError::new("kind must be reference, rescan or residual")),
        })
    }

    /// Runs seeding onward and returns the evaluation as JSON.
    pub fn run(&mut self, lambda: f64, p_seed: f64, tau: f64, seeds_only: bool) -> Result<String, JsError> {
        let config = PipelineConfig {
            lambda,
            p_seed,
            threshold: changeseg::seeds::ThresholdPolicy::fixed(tau),
            baseline: if seeds_only {
                pipeline::Baseline::SeedsOnly
            } else {
                pipeline::Baseline::Full
            },
            ..Default::default()
        };
        let out = pipeline::finish(&self.scene, &self.prepared, &config).map_err(js_err)?;
        let summary = serde_json::json!({
            "seeds": out.seeds.len(),
            "changing_supervoxels": out.labels.labels.iter().filter(|l| **l).count(),
            "supervoxels": out.labels.labels.len(),
            "detections": out.detections.len(),
            "report": out.report,
        });
        self.detections = out.detections;
        Ok(summary.to_string())
    }

    /// Top-down RGBA image of the rescan, `size` pixels square, detections
    /// colored and other points gray.
    pub fn top_view(&self, size: u32) -> Vec<u8> {
        let cloud = &self.scene.rescan;
        let mut color = vec![None; cloud.len()];
        const PALETTE: [[u8; 3]; 6] = [[230, 25, 75], [60, 180, 75], [0, 130, 200], [245, 130, 48], [145, 30, 180], [70, 240, 240]];
        for d in &self.detections.detections {
            for &p in &d.point_indices {
                color[p as usize] = Some(PALETTE[d.id as usize % PALETTE.len()]);
            }
        }
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &cloud.positions {
            lo = [lo[0].min(p.x), lo[1].min(p.y)];
            hi = [hi[0].max(p.x), hi[1].max(p.y)];
        }
        let scale = (size as f64 - 1.0) / (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let mut img = vec![255u8; (size * size * 4) as usize];
        let mut top = vec![f64::MIN; (size * size) as usize];
        for (i, p) in cloud.positions.iter().enumerate() {
            if p.z > 1.0 {
                continue;
            }
            let c = ((p.x - lo[0]) * scale) as u32;
            let r = size - 1 - ((p.y - lo[1]) * scale) as u32;
            let k = (r * size + c) as usize;
            if p.z < top[k] {
                continue;
            }
            top[k] = p.z;
            let rgb = color[i].unwrap_or_else(|| {
                let g = (120.0 + p.z * 200.0).min(220.0) as u8;
                [g, g, g]
            });
            img[k * 4..k * 4 + 3].copy_from_slice(&rgb);
        }
        img
    }
}

/// Solves a chain of nodes with priors `p_change` linked by unit edges and
/// returns the solver and exhaustive results as JSON.
#[wasm_bindgen]
pub fn gmp_chain(p_change: Vec<f64>, lambda: f64, epsilon: f64) -> Result<String, JsError> {
    let n = p_change.len();
    if n == 0 || p_change.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(JsError::new("priors must be in [0, 1]"));
    }
    let field = ChangeField {
        values: p_change.iter().map(|&p| [p, 1.0 - p]).collect(),
    };
    let problem = GmpProblem::new(n, (1..n as u32).map(|i| (i - 1, i, 1.0)))
        .with_lambda(lambda)
        .with_epsilon(epsilon);
    problem.validate().map_err(js_err)?;
    let res = gmp::cut_pursuit(&field, &problem, &CutPursuitOptions::default()).map_err(js_err)?;
    let exhaustive = if n <= gmp::BRUTE_FORCE_LIMIT {
        gmp::brute_force_gmp(&field, &problem).ok().map(|(_, e)| e)
    } else {
        None
    };
    Ok(serde_json::json!({
        "q": res.q.values.iter().map(|v| v[0]).collect::<Vec<_>>(),
        "labels": gmp::extract_labels(&res.q),
        "energy": res.energy,
        "history": res.history,
        "exhaustive_energy": exhaustive,
    })
    .to_string())
}

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use changeseg::io;
use changeseg::seeds::{self, BackprojectOptions, ThresholdPolicy};
use changeseg::render::{self, Geometry, RenderOptions};
use changeseg::synth::{self, fragment_masks, CameraRing, SceneSpec, ORACLE_SOURCE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(spec: SceneSpec) -> SceneSpec {
    SceneSpec {
        density: 900.0,
        cameras: CameraRing {
            count: 6,
            image_width: 120,
            image_height: 90,
            focal_px: 98.0,
            ..Default::default()
        },
        ..spec
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_gives_identical_trees() {
    let spec = small(SceneSpec::three_cuboids());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth::generate(&spec).unwrap().write(a.path()).unwrap();
    synth::generate(&spec).unwrap().write(b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
}

#[test]
fn written_scene_loads_back() {
    let scene = synth::generate(&small(SceneSpec::three_cuboids())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = scene.write(dir.path()).unwrap();
    let m = io::load_manifest(&manifest).unwrap();
    assert_eq!(m.label_sources(), vec![ORACLE_SOURCE.to_string()]);
    let loaded = io::load_scene(&m).unwrap();
    assert_eq!(loaded.rescan.positions.len(), scene.rescan_cloud.len());
    assert_eq!(loaded.ground_truth.as_ref(), Some(&scene.ground_truth));
    assert_eq!(loaded.views.len(), scene.views.len());
    for (a, b) in loaded.views.iter().zip(&scene.views) {
        assert_eq!(a.labels[ORACLE_SOURCE], b.labels[ORACLE_SOURCE]);
        let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
        for (x, y) in da.values.iter().zip(&db.values) {
            assert!((x - y).abs() <= 0.0005 + 1e-6);
        }
    }
}

#[test]
fn unchanged_pair_yields_no_seeds() {
    let scene = synth::generate(&small(SceneSpec::unchanged())).unwrap();
    assert!(scene.ground_truth.changed_instances.is_empty());
    let opts = RenderOptions::default();
    let reference = render::render_views(Geometry::Mesh(&scene.reference_mesh), &scene.views, &opts);
    let rescan = render::render_views(Geometry::Mesh(&scene.rescan_mesh), &scene.views, &opts);
    let s = seeds::detect_seeds(
        &scene.views,
        &reference,
        &rescan,
        &scene.rescan_cloud,
        &ThresholdPolicy::fixed(0.1),
        &BackprojectOptions::default(),
    )
    .unwrap();
    assert!(s.is_empty());
}

#[test]
fn moved_instance_is_ground_truth() {
    let mut spec = small(SceneSpec::unchanged());
    spec.objects[2].change = synth::Change::Move {
        translation: [0.5, 0.0],
        yaw: 0.0,
    };
    let scene = synth::generate(&spec).unwrap();
    let gt = &scene.ground_truth.changed_instances;
    assert_eq!(gt.len(), 1);
    assert_eq!(gt[0].instance_id, 3);
    let ids = scene.rescan_cloud.instance_ids.as_ref().unwrap();
    let expected: Vec<u32> = (0..ids.len() as u32).filter(|&i| ids[i as usize] == 3).collect();
    assert_eq!(gt[0].point_indices, expected);
}

#[test]
fn oracle_pixels_name_the_visible_instance() {
    let scene = synth::generate(&small(SceneSpec::three_cuboids())).unwrap();
    let mut seen = BTreeSet::new();
    for v in &scene.views {
        seen.extend(v.labels[ORACLE_SOURCE].ids.iter().copied());
    }
    // Floor and walls are background; instance 3 was removed.
    assert_eq!(seen, BTreeSet::from([0, 1, 2]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn fragments_partition_each_region(seed in 0u64..1000, parts in 1usize..5) {
        let scene = synth::generate(&small(SceneSpec::three_cuboids())).unwrap();
        let labels = &scene.views[(seed % 6) as usize].labels[ORACLE_SOURCE];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = fragment_masks(labels, parts, &mut rng).unwrap();
        // Each fragment lies inside one original id, and zero stays zero.
        let mut owner = std::collections::BTreeMap::new();
        for (&a, &b) in labels.ids.iter().zip(&f.ids) {
            prop_assert_eq!(a == 0, b == 0);
            if b != 0 {
                prop_assert_eq!(*owner.entry(b).or_insert(a), a);
            }
        }
        if parts == 1 {
            let orig: BTreeSet<u16> = labels.ids.iter().copied().filter(|&i| i != 0).collect();
            prop_assert!(owner.len() >= orig.len());
        }
    }
}

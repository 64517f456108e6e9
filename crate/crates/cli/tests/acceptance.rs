//! End-to-end acceptance checks, run by a plain `main` (no libtest
//! harness) so every criterion prints its `criterion N: PASS|FAIL ...`
//! line. Positional arguments filter criteria by name.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s3_cli::config::{ExperimentConfig, Variant};
use s3_cli::dataset::{self, read_manifest, write_manifest, Scene};
use s3_cli::{ablate_with, ablation_medians, load_checkpoint, read_model, read_report, score, train_scenes, write_checkpoint_file, write_model, write_report};
use s3_core::animation::{drift_clip, retarget, SkinningWeights};
use s3_core::character::{analytic_joints, build_character, character_mesh, random_pose, Proportions};
use s3_core::extraction::{ground_truth_model, marching_cubes, posed_ground_truth_model, AnimatableModel};
use s3_core::fields::{eval_skinning, FieldConfig, FieldParams};
use s3_core::geom::{TriangleMesh, Vec3, VoxelGrid};
use s3_core::metrics::{chamfer, mpjpe, normal_consistency, p2s, retarget_error};
use s3_core::sensorsim::{capture, Placement, ViewConfig};
use s3_core::training::{backward, finite_difference_gradient, max_relative_error, read_loss_csv, write_loss_csv, LossWeights, PreparedScene, SamplerMode, SamplingConfig, TrainBatch, TrainScene};

/// Overfit schedule: steps and the learning-rate drop.
const OVERFIT_STEPS: usize = 10_000;
const OVERFIT_DECAY: usize = 7_000;
/// Shorter schedule for the ablation trends (15 trainings).
const ABLATION_STEPS: usize = 2_000;
const ABLATION_RESOLUTION: usize = 64;

fn report(n: usize, pass: bool, detail: String) -> bool {
    println!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn tiny_field() -> FieldConfig {
    FieldConfig { voxel_resolution: 8, vox_channels: 3, image_channels: 3, hidden_width: 8, head_layers: 3, ..FieldConfig::default() }
}

fn small_scene(character_seed: u64, yaw: f64, image: usize) -> TrainScene {
    let character = build_character(character_seed, &Proportions::default()).unwrap();
    let pose = random_pose(character.skeleton(), 0.5, 0.2, &mut ChaCha8Rng::seed_from_u64(character_seed));
    let view = ViewConfig { image_size: image, mesh_resolution: 48, ..Default::default() };
    let (sample, _) = capture(&character, &pose, &Placement::facing(10.0, 0.1, yaw), &view, character_seed).unwrap();
    TrainScene { id: 0, character, pose, sample }
}

fn criterion_01_gradient_oracle() -> bool {
    let t = Instant::now();
    let field = tiny_field();
    let sampling = SamplingConfig { occ_points: 20, pose_points: 20, skin_points: 20, surface_resolution: 32, ..Default::default() };
    let (mut worst, mut max_abs, mut live, mut total) = (0.0f64, 0.0f64, 0usize, 0usize);
    for seed in 0..5u64 {
        let scene = small_scene(seed, 0.4 * seed as f64, 32);
        let prepared = PreparedScene::new(&scene, &field, sampling.surface_resolution).unwrap();
        let batch = TrainBatch::sample(&prepared, &sampling, seed);
        let mut params = FieldParams::random(&field, 100 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        let w = LossWeights::default();
        let (_, g) = backward(&batch, &params, &prepared.input, &w).unwrap();
        let fd = finite_difference_gradient(&batch, &params, &prepared.input, &w, 1e-5).unwrap();
        worst = worst.max(max_relative_error(&g, &fd, 1e-8));
        for (a, f) in g.tensors().iter().zip(&fd) {
            for (x, y) in a.iter().zip(f) {
                max_abs = max_abs.max((x - y).abs());
                live += (x.abs() > 1e-6) as usize;
                total += 1;
            }
        }
    }
    // a vacuous pass (all gradients zero) is not a pass
    let pass = worst < 1e-4 && live * 2 > total;
    report(1, pass, format!("max relative error {worst:.3e}, max abs diff {max_abs:.2e}, {live}/{total} non-zero gradients over 5 parameter sets ({:.1?})", t.elapsed()))
}

fn criterion_02_simplex_contract() -> bool {
    let t = Instant::now();
    let (mut worst_sum, mut min_component, mut count) = (0.0f64, f64::INFINITY, 0usize);
    for seed in 0..10u64 {
        let field = FieldConfig { hidden_width: 32, head_layers: 3, ..FieldConfig::default() };
        let mut params = FieldParams::random(&field, seed).unwrap();
        // larger weights push the softmax towards one-hot outputs
        let gain = 1.0 + seed as f64;
        for l in &mut params.skin.layers {
            l.w.iter_mut().for_each(|v| *v *= gain);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = field.encoding_dim();
        for _ in 0..10_000 {
            let phi: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s = eval_skinning(&phi, &params).unwrap();
            worst_sum = worst_sum.max((s.iter().sum::<f64>() - 1.0).abs());
            min_component = min_component.min(s.iter().copied().fold(f64::INFINITY, f64::min));
            count += 1;
        }
    }
    let pass = count == 100_000 && worst_sum <= 1e-9 && min_component >= 0.0;
    report(2, pass, format!("{count} evaluations, max |sum - 1| {worst_sum:.2e}, min component {min_component:.2e} ({:.1?})", t.elapsed()))
}

fn sphere_mesh(res: usize, radius: f64) -> (TriangleMesh, f64) {
    let mut g = VoxelGrid::cube(Vec3::zeros(), 1.4, res, 1).unwrap();
    let cell = g.cell_size();
    for lin in 0..g.cell_count() {
        let [i, j, k] = g.cell_coords(lin);
        let d = g.cell_center(i, j, k).norm() - radius;
        g.values_mut()[lin] = (0.5 - d / cell).clamp(0.0, 1.0);
    }
    (marching_cubes(&g, 0.5), cell)
}

fn criterion_03_marching_cubes_sphere() -> bool {
    let t = Instant::now();
    let r = 0.5;
    let radial = |m: &TriangleMesh| m.vertices().iter().map(|v| (v.norm() - r).abs()).fold(0.0, f64::max);
    let (m64, cell64) = sphere_mesh(64, r);
    let (m128, _) = sphere_mesh(128, r);
    let (e64, e128) = (radial(&m64), radial(&m128));
    let watertight = m64.is_watertight() && m128.is_watertight();
    let pass = watertight && e64 < 1.5 * cell64 && e128 <= e64;
    report(
        3,
        pass,
        format!("watertight {watertight}, max radial error {:.3} cells at 64^3, {e128:.2e} m at 128^3 vs {e64:.2e} m ({:.1?})", e64 / cell64, t.elapsed()),
    )
}

fn criterion_04_ik_fk_lbs() -> bool {
    let t = Instant::now();
    // (a) retargeting any model to its own joints is the identity
    let mut self_err = 0.0f64;
    for seed in 0..3u64 {
        let c = build_character(seed, &Proportions::default()).unwrap();
        let pose = random_pose(c.skeleton(), 0.6, 0.3, &mut ChaCha8Rng::seed_from_u64(seed));
        let gt = posed_ground_truth_model(&c, &pose, 64).unwrap();
        // random simplex weights: the identity must not depend on them
        let mut rng = ChaCha8Rng::seed_from_u64(10 + seed);
        let (n, k) = (gt.mesh().vertices().len(), gt.weights().cols());
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let random = AnimatableModel::new(gt.mesh().clone(), gt.skeleton().clone(), SkinningWeights::from_rows(&rows, 1e-9).unwrap()).unwrap();
        for model in [&gt, &random] {
            let out = retarget(model, &model.joints()).unwrap();
            for (a, b) in out.vertices().iter().zip(model.mesh().vertices()) {
                self_err = self_err.max((a - b).norm());
            }
        }
    }
    // (b) rest-pose analytic model driven to random poses
    let c = build_character(7, &Proportions::default()).unwrap();
    let model = ground_truth_model(&c, 128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let pose = random_pose(c.skeleton(), 0.6, 0.3, &mut rng);
        worst = worst.max(retarget_error(&model, &c, &pose, 128, 10_000, i).unwrap());
    }
    let pass = self_err <= 1e-9 && worst < 2.0;
    report(4, pass, format!("self-retarget max vertex error {self_err:.2e} m, max chamfer over 20 poses {worst:.3} cm ({:.1?})", t.elapsed()))
}

fn overfit_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.train.steps = OVERFIT_STEPS;
    cfg.train.decay_steps = vec![OVERFIT_DECAY];
    cfg.train.field.hidden_width = 64;
    cfg.metrics.gt_resolution = 128;
    cfg
}

fn criterion_05_overfit_reconstruction() -> bool {
    let t = Instant::now();
    let cfg = overfit_config();
    let scenes = dataset::generate(&cfg).unwrap();
    let outcome = s3_core::training::train(&train_scenes(&scenes), &cfg.train).unwrap();
    let trained = t.elapsed();
    let eval: Vec<&Scene> = scenes.iter().map(|(_, s)| s).collect();
    let s = score(&outcome.params, &eval, 128, cfg.extract.iso, &cfg.metrics).unwrap();
    let pass = s.chamfer_cm < 3.0 && s.p2s_cm < 3.0 && s.normal_consistency > 0.85 && s.mpjpe_cm < 5.0;
    report(
        5,
        pass,
        format!(
            "{} scenes at 128^3: chamfer {:.3} cm, p2s {:.3} cm, normal {:.4}, mpjpe {:.3} cm ({} steps, train {trained:.0?}, total {:.0?})",
            eval.len(),
            s.chamfer_cm,
            s.p2s_cm,
            s.normal_consistency,
            s.mpjpe_cm,
            cfg.train.steps,
            t.elapsed()
        ),
    )
}

fn ablation_config(variants: Vec<Variant>) -> ExperimentConfig {
    let mut cfg = overfit_config();
    cfg.train.decay_steps.clear();
    cfg.ablation.steps = Some(ABLATION_STEPS);
    cfg.ablation.resolution = ABLATION_RESOLUTION;
    cfg.ablation.seeds = vec![0, 1, 2];
    cfg.ablation.variants = variants;
    cfg
}

fn median_chamfer(cfg: &ExperimentConfig) -> Vec<(String, f64)> {
    let scenes = dataset::generate(cfg).unwrap();
    let rows = ablate_with(cfg, &scenes, |r| println!("  {} seed {}: chamfer {:.3} cm", r.variant, r.seed, r.scores.chamfer_cm)).unwrap();
    ablation_medians(&rows).into_iter().map(|(v, s)| (v, s.chamfer_cm)).collect()
}

/// NaN (degenerate reconstruction) ranks worst.
fn not_worse(a: f64, b: f64) -> bool {
    !a.is_nan() && (b.is_nan() || a <= b)
}

fn criterion_06_sampling_trend() -> bool {
    let t = Instant::now();
    let v = |name: &str, m| Variant { sampler: Some(m), ..Variant::named(name) };
    let cfg = ablation_config(vec![v("both", SamplerMode::Both), v("uniform", SamplerMode::Uniform), v("biased", SamplerMode::Biased)]);
    let m = median_chamfer(&cfg);
    let both = m[0].1;
    let pass = m[1..].iter().all(|(_, c)| not_worse(both, *c));
    let text: Vec<String> = m.iter().map(|(n, c)| format!("{n} {c:.3}")).collect();
    report(6, pass, format!("median chamfer cm: {} ({:.0?})", text.join(", "), t.elapsed()))
}

fn criterion_07_view_feature_trend() -> bool {
    let t = Instant::now();
    let full = Variant { voxel_feature: Some(false), ..Variant::named("image_view") };
    let ablated = Variant { voxel_feature: Some(false), view_feature: Some(false), ..Variant::named("image_no_view") };
    let m = median_chamfer(&ablation_config(vec![full, ablated]));
    let pass = not_worse(m[0].1, m[1].1);
    report(7, pass, format!("median chamfer cm: with view {:.3}, without {:.3} ({:.0?})", m[0].1, m[1].1, t.elapsed()))
}

fn criterion_08_retarget_trend() -> bool {
    let t = Instant::now();
    let c = build_character(3, &Proportions::default()).unwrap();
    let clip = drift_clip(c.skeleton(), 120, 0.5, 0.01, 3);
    let offsets = [3usize, 5, 10, 20, 100];
    let starts = [0usize, 4, 8, 12, 16, 19];
    let mut medians = Vec::new();
    for &k in &offsets {
        let mut errs: Vec<f64> = starts
            .iter()
            .map(|&s| {
                let model = posed_ground_truth_model(&c, &clip.frames[s], 64).unwrap();
                retarget_error(&model, &c, &clip.frames[s + k], 64, 4000, s as u64).unwrap()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        medians.push(0.5 * (errs[2] + errs[3]));
    }
    let pass = medians.windows(2).all(|w| w[1] >= 0.9 * w[0]);
    let text: Vec<String> = offsets.iter().zip(&medians).map(|(k, m)| format!("+{k} {m:.3}")).collect();
    report(8, pass, format!("median retarget error cm: {} ({:.1?})", text.join(", "), t.elapsed()))
}

fn criterion_09_metric_identities() -> bool {
    let t = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..10u64 {
        let c = build_character(seed, &Proportions::default()).unwrap();
        let pose = random_pose(c.skeleton(), 0.5, 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
        let m = character_mesh(&c, &pose, 64).unwrap();
        let j = analytic_joints(&c, &pose).unwrap();
        worst[0] = worst[0].max(chamfer(&m, &m, 2000, seed).unwrap());
        worst[1] = worst[1].max(p2s(&m, &m, 2000, seed).unwrap());
        worst[2] = worst[2].max((normal_consistency(&m, &m, 2000, seed).unwrap() - 1.0).abs());
        worst[3] = worst[3].max(mpjpe(&j, &j).unwrap());
    }
    let pass = worst[0] < 1e-9 && worst[1] < 1e-9 && worst[2] < 1e-12 && worst[3] == 0.0;
    report(
        9,
        pass,
        format!("10 characters: chamfer {:.1e}, p2s {:.1e}, |nc - 1| {:.1e}, mpjpe {:.1e} ({:.1?})", worst[0], worst[1], worst[2], worst[3], t.elapsed()),
    )
}

const TINY: &str = "seed = 1
[data]
poses = 2
views = 1
[view]
image_size = 64
mesh_resolution = 48
[train]
steps = 20
[train.field]
hidden_width = 16
[train.sampling]
occ_points = 64
pose_points = 64
skin_points = 64
surface_resolution = 32
[extract]
resolution = 32
[metrics]
samples = 500
gt_resolution = 32
[ablation]
seeds = [0]
steps = 5
resolution = 16
eval_scenes = 1
";

/// Runs `s3` and returns its exit code and stdout.
fn s3(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_s3")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every command twice into sibling directories; returns the first
/// run's root.
fn run_pipeline(root: &Path, cfg: &Path) -> Vec<(String, i32, String)> {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    let c = cfg.to_str().unwrap();
    let scene = p("data/scene_000_000_00");
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec!["gen-data".into(), "--config".into(), c.into(), "--out".into(), p("data")]),
        ("train", vec!["train".into(), "--config".into(), c.into(), "--dataset".into(), p("data"), "--out".into(), p("run")]),
        (
            "reconstruct",
            vec!["reconstruct".into(), "--config".into(), c.into(), "--scene".into(), scene.clone(), "--checkpoint".into(), p("run/checkpoint.s3f"), "--out".into(), p("rec")],
        ),
        ("reconstruct-gt", vec!["reconstruct".into(), "--config".into(), c.into(), "--scene".into(), scene.clone(), "--ground-truth".into(), "--out".into(), p("gt")]),
        (
            "animate",
            vec!["animate".into(), "--config".into(), c.into(), "--model".into(), p("gt"), "--clip".into(), format!("{scene}/clip.json"), "--frames".into(), "0,7,15".into(), "--out".into(), p("anim")],
        ),
        (
            "eval",
            vec!["eval".into(), "--config".into(), c.into(), "--pred".into(), p("gt"), "--scene".into(), scene.clone(), "--frames".into(), "3,5".into(), "--metrics".into(), "chamfer,p2s,normal,mpjpe,retarget".into(), "--out".into(), p("eval")],
        ),
        ("ablate", vec!["ablate".into(), "--config".into(), c.into(), "--dataset".into(), p("data"), "--out".into(), p("ablate")]),
    ];
    steps
        .into_iter()
        .map(|(name, args)| {
            let a: Vec<&str> = args.iter().map(String::as_str).collect();
            let (code, stdout) = s3(&a);
            // output paths are echoed; compare run-independent text
            (name.to_string(), code, stdout.replace(root.to_str().unwrap(), "<root>"))
        })
        .collect()
}

/// write → read → write for every on-disk format in a pipeline run.
fn format_round_trips(root: &Path, scratch: &Path) -> (usize, Vec<String>) {
    let (mut failures, mut checked) = (Vec::new(), 0);
    let mut check = |name: &str, a: &[u8], b: &[u8]| {
        checked += 1;
        if a != b {
            failures.push(name.to_string());
        }
    };
    // scene: character/pose/clip/view JSON, S3PC, PFM, PGM
    let src = root.join("data/scene_000_000_00");
    let copy = scratch.join("scene");
    Scene::read(&src).unwrap().write(&copy).unwrap();
    for f in ["character.json", "pose.json", "clip.json", "view.json", "points.s3pc", "depth.pfm", "mask.pgm"] {
        check(f, &fs::read(src.join(f)).unwrap(), &fs::read(copy.join(f)).unwrap());
    }
    // model: OBJ, skeleton JSON, S3SW
    let copy = scratch.join("model");
    write_model(&read_model(&root.join("gt")).unwrap(), &copy).unwrap();
    for f in ["mesh.obj", "skeleton.json", "skinning.s3sw"] {
        check(f, &fs::read(root.join("gt").join(f)).unwrap(), &fs::read(copy.join(f)).unwrap());
    }
    // S3F1 checkpoint
    let ck = root.join("run/checkpoint.s3f");
    let copy = scratch.join("checkpoint.s3f");
    write_checkpoint_file(&load_checkpoint(&ck).unwrap(), &copy).unwrap();
    check("checkpoint.s3f", &fs::read(&ck).unwrap(), &fs::read(&copy).unwrap());
    // loss CSV
    let loss = fs::read(root.join("run/loss.csv")).unwrap();
    let mut buf = Vec::new();
    write_loss_csv(&read_loss_csv(BufReader::new(&loss[..])).unwrap(), &mut buf).unwrap();
    check("loss.csv", &loss, &buf);
    // metrics CSV and text
    let copy = scratch.join("eval");
    write_report(&read_report(&root.join("eval/metrics.csv")).unwrap(), &copy).unwrap();
    for f in ["metrics.csv", "metrics.txt"] {
        check(f, &fs::read(root.join("eval").join(f)).unwrap(), &fs::read(copy.join(f)).unwrap());
    }
    // manifest
    let manifest = fs::read_to_string(root.join("data/manifest.txt")).unwrap();
    check("manifest.txt", manifest.as_bytes(), write_manifest(&read_manifest(&manifest).unwrap()).as_bytes());
    // TOML config echo
    let toml = fs::read_to_string(root.join("run/config.toml")).unwrap();
    check("config.toml", toml.as_bytes(), ExperimentConfig::from_toml(&toml).unwrap().to_toml().unwrap().as_bytes());
    (checked, failures)
}

fn criterion_10_determinism_and_round_trips() -> bool {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let runs = [run_pipeline(&a, &cfg), run_pipeline(&b, &cfg)];
    let mut problems = Vec::new();
    for ((name, code, out), (_, code2, out2)) in runs[0].iter().zip(&runs[1]) {
        // an undertrained field may legitimately be degenerate (exit 3)
        let ok_code = *code == 0 || (name == "reconstruct" && *code == 3);
        if !ok_code || code != code2 || out != out2 {
            problems.push(format!("{name} exit {code}/{code2}"));
        }
    }
    let (ta, tb) = (tree(&a), tree(&b));
    let files = ta.len();
    if ta != tb {
        problems.push("output trees differ".into());
    }
    let scratch = tmp.path().join("scratch");
    let (formats, failures) = format_round_trips(&a, &scratch);
    let codes: Vec<String> = runs[0].iter().map(|(n, c, _)| format!("{n}={c}")).collect();
    problems.extend(failures.iter().map(|f| format!("{f} round trip")));
    let pass = problems.is_empty() && files > 20;
    report(10, pass, format!("exits [{}], {files} files compared across 2 runs, {formats} files round-tripped; problems {problems:?} ({:.1?})", codes.join(" "), t.elapsed()))
}

fn main() {
    let criteria: [(&str, fn() -> bool); 10] = [
        ("criterion_01_gradient_oracle", criterion_01_gradient_oracle),
        ("criterion_02_simplex_contract", criterion_02_simplex_contract),
        ("criterion_03_marching_cubes_sphere", criterion_03_marching_cubes_sphere),
        ("criterion_04_ik_fk_lbs", criterion_04_ik_fk_lbs),
        ("criterion_05_overfit_reconstruction", criterion_05_overfit_reconstruction),
        ("criterion_06_sampling_trend", criterion_06_sampling_trend),
        ("criterion_07_view_feature_trend", criterion_07_view_feature_trend),
        ("criterion_08_retarget_trend", criterion_08_retarget_trend),
        ("criterion_09_metric_identities", criterion_09_metric_identities),
        ("criterion_10_determinism_and_round_trips", criterion_10_determinism_and_round_trips),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<_> = criteria.iter().filter(|(name, _)| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()))).collect();
    let failed: Vec<&str> = selected.iter().filter(|(_, run)| !run()).map(|(name, _)| *name).collect();
    println!("acceptance: {} of {} criteria passed", selected.len() - failed.len(), selected.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}

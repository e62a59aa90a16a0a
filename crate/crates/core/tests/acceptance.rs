//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (unbuffered, so it shows even when output capture is on) and then asserts.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereo_patch::attack::{self, AttackConfig, AttackMode, IntervalStrategy, PreparedScene, RotationAxis};
use stereo_patch::deploy::StereoScene;
use stereo_patch::geometry::{self, CameraRig, PatchPlacement, Side};
use stereo_patch::harness::{self, ExperimentConfig};
use stereo_patch::matcher::{cost_volume, periodicity_score, BuiltinMatcher, MatcherConfig, StereoModel};
use stereo_patch::metrics::{self, MetricConfig};
use stereo_patch::patch::{self, AssembledPatch, GridSpec, PatchLayout, TextureElement};
use stereo_patch::{DisparityMap, Image, Mask};

fn report(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn kitti_like_rig() -> CameraRig {
    CameraRig::new(
        [[720.0, 0.0, 620.0, 0.0], [0.0, 720.0, 187.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        [[720.0, 0.0, 620.0, -388.8], [0.0, 720.0, 187.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        (375, 1242),
    )
    .unwrap()
}

fn experiment_model() -> BuiltinMatcher {
    BuiltinMatcher::new(MatcherConfig { d_max: 64, ..Default::default() }).unwrap()
}

fn suite_scenes() -> Vec<StereoScene> {
    harness::load_scenes(&ExperimentConfig::default(), 0, 8).unwrap()
}

/// Optimizer settings shared by the attack criteria; the step size is raised from
/// the library default because the averaged per-pixel gradient is tiny.
fn suite_attack(mode: AttackMode) -> AttackConfig {
    AttackConfig { mode, lr: 2.0, steps: 200, seed: 0, ..Default::default() }
}

const GRID_INTERVAL: usize = 5;

#[test]
fn criterion_1_element_size_formula() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..100 {
        let k = rng.gen_range(1..=6usize);
        let o = rng.gen_range(1..=12usize);
        let h_p = rng.gen_range(k * o + 1..=400);
        let w_p = rng.gen_range(k * o + 1..=400);
        // oracle: largest t with (k+1)·t + k·o <= len
        let oracle = |len: usize| (0..=len).rev().find(|t| (k + 1) * t + k * o <= len).unwrap();
        let got = patch::element_size_grid(h_p, w_p, &GridSpec::grid((k, k), o));
        let (eh, ew) = (oracle(h_p), oracle(w_p));
        let ok = match got {
            Ok(v) => eh >= 2 && ew >= 2 && v == (eh, ew),
            Err(_) => eh < 2 || ew < 2,
        };
        if !ok {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0 && t0.elapsed().as_secs_f64() < 1.0;
    report(1, pass, format!("({mismatches}/100 mismatches, {:.3}s)", t0.elapsed().as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_2_projection_oracle() {
    let t0 = Instant::now();
    let rig = kitti_like_rig();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let pts: [Vector4<f64>; 4] = std::array::from_fn(|_| {
            Vector4::new(rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0), rng.gen_range(4.0..30.0), 1.0)
        });
        // keep the quad well-formed: a 1 m square around the first point
        let base = pts[0];
        let pts = [
            base,
            base + Vector4::new(1.0, 0.0, 0.0, 0.0),
            base + Vector4::new(0.0, 1.0, 0.0, 0.0),
            base + Vector4::new(1.0, 1.0, 0.0, 0.0),
        ];
        for side in [Side::Left, Side::Right] {
            let p = if side == Side::Left { rig.proj_left } else { rig.proj_right };
            let q = geometry::project_corners(&rig, &pts, side).unwrap();
            let got = [q.top_left, q.top_right, q.bottom_left, q.bottom_right];
            for (pt, g) in pts.iter().zip(got) {
                // rectification is identity here, so pixel = P·X by hand
                let x = [pt.x, pt.y, pt.z, pt.w];
                let h: Vec<f64> = (0..3).map(|r| (0..4).map(|c| p[r][c] * x[c]).sum()).collect();
                worst = worst.max((g[0] - h[0] / h[2]).abs()).max((g[1] - h[1] / h[2]).abs());
            }
        }
    }
    let mut worst_disp: f64 = 0.0;
    for e in [5.0, 10.0, 20.0] {
        let (l, r) = geometry::project_placement(&rig, &PatchPlacement::default().with_depth(e)).unwrap();
        let expected = 720.0 * 0.54 / e;
        for (a, b) in [(l.top_left, r.top_left), (l.top_right, r.top_right), (l.bottom_left, r.bottom_left), (l.bottom_right, r.bottom_right)] {
            worst_disp = worst_disp.max((a[0] - b[0] - expected).abs()).max((a[1] - b[1]).abs());
        }
    }
    let pass = worst < 1e-6 && worst_disp < 1e-3 && t0.elapsed().as_secs_f64() < 1.0;
    report(2, pass, format!("(max pixel error {worst:.2e}, max disparity error {worst_disp:.2e})"));
    assert!(pass);
}

#[test]
fn criterion_3_gradient_fidelity() {
    let t0 = Instant::now();
    let model = experiment_model();
    let scene = harness::generate_synthetic_scene(&Default::default(), 3).unwrap();
    // a 2x2 tiling of a 32x32 patch gives the 16x16 element
    let spec = GridSpec::tiled((2, 2));
    let patch_size = (32, 32);
    let prepared = vec![PreparedScene::new(&scene, &model, &PatchPlacement::default(), patch_size).unwrap()];
    let layout = PatchLayout::new(&spec, patch_size.0, patch_size.1).unwrap();
    let cfg = AttackConfig::default();
    let element = TextureElement::random(16, 16, 0.2, 0.8, 3).unwrap();
    let grad = attack::evaluate(&element, &spec, &layout, &prepared, &model, &cfg).unwrap().gradient();
    let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    let n = 24;
    for _ in 0..n {
        let (r, c, ch) = (rng.gen_range(0..16), rng.gen_range(0..16), rng.gen_range(0..3));
        let f = |delta: f64| {
            let mut img = element.image().clone();
            img.set(r, c, ch, img.get(r, c, ch) + delta);
            let e = TextureElement::new(img).unwrap();
            attack::evaluate(&e, &spec, &layout, &prepared, &model, &cfg).unwrap().parts.total
        };
        let fd = (f(h) - f(-h)) / (2.0 * h);
        let an = grad.get(r, c, ch);
        // relative to the coordinate's own magnitude, floored at 1% of the largest entry
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-2 * scale);
        worst = worst.max(rel);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-3 && secs < 120.0;
    report(3, pass, format!("(worst relative error {worst:.2e} over {n} coordinates, {secs:.1}s)"));
    assert!(pass);
}

#[test]
fn criterion_4_matcher_fidelity() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for i in 0..10 {
        let shift = rng.gen_range(4..=60) as f64;
        let scene = harness::constant_shift_pair(48, 160, shift, 100 + i).unwrap();
        let model = BuiltinMatcher::new(MatcherConfig { d_max: 64, ..Default::default() }).unwrap();
        let pred = model.forward(&scene.left, &scene.right).unwrap();
        let gt = scene.gt_disparity.clone().unwrap();
        // interior: away from the window halo and the left columns with no match
        let halo = 4;
        let mask = Mask::from_fn(48, 160, |r, c| r >= halo && r < 48 - halo && c >= 64 + halo && c < 160 - halo);
        worst = worst.max(metrics::epe(&pred, &gt, &mask).unwrap());
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 0.5 && secs < 60.0;
    report(4, pass, format!("(worst interior EPE {worst:.3} px, {secs:.1}s)"));
    assert!(pass);
}

#[test]
fn criterion_5_periodicity() {
    let t0 = Instant::now();
    let mut worst_margin = f64::INFINITY;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
        let w_t = rng.gen_range(6..=12usize);
        let element = TextureElement::random(8, w_t, 0.0, 1.0, seed).unwrap();
        let reps = 163 / w_t + 1;
        let patch = patch::assemble(&element, &GridSpec::tiled((4, reps)), 32, w_t * reps).unwrap();
        let left = patch.image.crop(0, 0, 32, 160).unwrap();
        let right = patch.image.crop(0, 3, 32, 160).unwrap();
        let d_max = 4 * w_t;
        let vol = cost_volume(&left, &right, d_max, 7, 255.0).unwrap();
        let at_period = periodicity_score(&vol, w_t).unwrap();
        let best_other = (1..=d_max / 2)
            .filter(|p| p % w_t != 0)
            .map(|p| periodicity_score(&vol, p).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        worst_margin = worst_margin.min(at_period - best_other);
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst_margin >= 0.2 && secs < 60.0;
    report(5, pass, format!("(smallest margin over non-multiples {worst_margin:.3}, {secs:.1}s)"));
    assert!(pass);
}

struct AttackSuite {
    dv: f64,
    grid: f64,
    random: f64,
    secs: f64,
}

fn mean_attack_d1(prepared: &[PreparedScene], model: &dyn StereoModel, p: &AssembledPatch) -> f64 {
    attack::evaluate_patch(prepared, model, p, &MetricConfig::default(), 100.0).unwrap().attack_d1
}

fn run_depth_vanish(scenes: &[StereoScene], model: &dyn StereoModel, cfg: &AttackConfig) -> AssembledPatch {
    attack::optimize(scenes, model, &PatchPlacement::default(), &GridSpec::tiled((4, 5)), cfg).unwrap().patch
}

fn attack_suite() -> &'static AttackSuite {
    static SUITE: OnceLock<AttackSuite> = OnceLock::new();
    SUITE.get_or_init(|| {
        let t0 = Instant::now();
        let model = experiment_model();
        let scenes = suite_scenes();
        let placement = PatchPlacement::default();
        let size = attack::patch_size_for(&scenes[0], &placement).unwrap();
        let prepared = attack::prepare_scenes(&scenes, &model, &placement, size).unwrap();

        let dv_patch = run_depth_vanish(&scenes, &model, &suite_attack(AttackMode::DepthVanish));
        let grid_patch = attack::optimize(&scenes, &model, &placement, &GridSpec::grid((4, 5), GRID_INTERVAL), &suite_attack(AttackMode::Grid))
            .unwrap()
            .patch;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let random = AssembledPatch::from_image(Image::from_fn(size.0, size.1, 3, |_, _, _| rng.gen::<f64>()));

        AttackSuite {
            dv: mean_attack_d1(&prepared, &model, &dv_patch),
            grid: mean_attack_d1(&prepared, &model, &grid_patch),
            random: mean_attack_d1(&prepared, &model, &random),
            secs: t0.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_6_attack_ordering() {
    let s = attack_suite();
    let pass = s.dv - s.grid >= 10.0 && s.grid - s.random >= 10.0 && s.dv >= 60.0 && s.secs < 1200.0;
    report(
        6,
        pass,
        format!("(attack-D1 depth-vanish {:.2}%, grid {:.2}%, random {:.2}%, {:.0}s)", s.dv, s.grid, s.random, s.secs),
    );
    assert!(pass);
}

#[test]
fn criterion_7_regularizer_ablation() {
    let with_reg = attack_suite().dv;
    let t0 = Instant::now();
    let model = experiment_model();
    let scenes = suite_scenes();
    let placement = PatchPlacement::default();
    let size = attack::patch_size_for(&scenes[0], &placement).unwrap();
    let prepared = attack::prepare_scenes(&scenes, &model, &placement, size).unwrap();
    let cfg = AttackConfig { alpha: 0.0, ..suite_attack(AttackMode::DepthVanish) };
    let no_entropy = mean_attack_d1(&prepared, &model, &run_depth_vanish(&scenes, &model, &cfg));
    let secs = t0.elapsed().as_secs_f64();
    let pass = with_reg - no_entropy >= 10.0 && secs < 1200.0;
    report(7, pass, format!("(attack-D1 alpha=0.1 {with_reg:.2}%, alpha=0 {no_entropy:.2}%, {secs:.0}s)"));
    assert!(pass);
}

#[test]
fn criterion_8_rotation_trend() {
    let t0 = Instant::now();
    let model = experiment_model();
    let scenes = suite_scenes();
    let placement = PatchPlacement::default();
    let size = attack::patch_size_for(&scenes[0], &placement).unwrap();
    let texture = harness::default_sweep_texture(size.0, size.1, 7);
    let build = |strategy: IntervalStrategy| {
        let spec = strategy.spec((4, 5), GRID_INTERVAL);
        let (h_t, w_t) = patch::element_size(size.0, size.1, &spec).unwrap();
        let element = TextureElement::new(texture.crop(0, 0, h_t, w_t).unwrap()).unwrap();
        patch::assemble(&element, &spec, size.0, size.1).unwrap()
    };
    let degrees: Vec<f64> = (-3..=3).map(|i| 10.0 * i as f64).collect();
    let sweep = |p: &AssembledPatch| -> Vec<f64> {
        attack::rotation_sweep(&scenes, &model, p, &placement, RotationAxis::X, &degrees, &MetricConfig::default(), 100.0)
            .unwrap()
            .into_iter()
            .map(|r| r.stats.map_or(f64::NAN, |s| s.attack_d1))
            .collect()
    };
    let grid = sweep(&build(IntervalStrategy::Grid));
    let basic = sweep(&build(IntervalStrategy::BasicRepeat));
    let at_zero = grid[3];
    let retained = grid.iter().map(|g| g / at_zero).fold(f64::INFINITY, f64::min);
    let basic_ok = basic.iter().zip(&grid).all(|(b, g)| b <= g);
    let secs = t0.elapsed().as_secs_f64();
    let pass = retained >= 0.5 && basic_ok && secs < 600.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/");
    report(
        8,
        pass,
        format!("(grid attack-D1 at -30..30 deg {}, basic repeat {}, min retained {retained:.2}, {secs:.0}s)", fmt(&grid), fmt(&basic)),
    );
    assert!(pass);
}

#[test]
fn criterion_9_metric_suite() {
    let t0 = Instant::now();
    let cfg = MetricConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let gt = DisparityMap::from_fn(h, w, |_, _| rng.gen_range(0.0..120.0));
        let pred = DisparityMap::from_fn(h, w, |_, _| rng.gen_range(0.0..120.0));
        let mut mask = Mask::from_fn(h, w, |_, _| rng.gen_bool(0.7));
        mask.set(0, 0, true);
        let c = rng.gen_range(1.0..100.0);
        let (mut n, mut abs, mut bad, mut att) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..h {
            for col in 0..w {
                if !mask.get(r, col) {
                    continue;
                }
                let (p, g) = (pred.get(r, col), gt.get(r, col));
                n += 1.0;
                abs += (p - g).abs();
                if (p - g).abs() > f64::max(3.0, 0.05 * g) {
                    bad += 1.0;
                }
                if (p - c).abs() > f64::max(3.0, 0.05 * c) && p < c / 3.0 {
                    att += 1.0;
                }
            }
        }
        let ok = metrics::epe(&pred, &gt, &mask).unwrap() == abs / n
            && metrics::d1(&pred, &gt, &mask, &cfg).unwrap() == 100.0 * bad / n
            && metrics::attack_d1(&pred, c, None, &mask, &cfg).unwrap() == 100.0 * att / n;
        if !ok {
            mismatches += 1;
        }
    }
    let one = Mask::full(1, 1);
    let single = |v: f64| metrics::attack_d1(&DisparityMap::from_fn(1, 1, |_, _| v), 77.76, None, &one, &cfg).unwrap();
    let examples_ok = single(10.0) == 100.0 && single(77.76) == 0.0 && single(30.0) == 0.0;
    let secs = t0.elapsed().as_secs_f64();
    let pass = mismatches == 0 && examples_ok && secs < 5.0;
    report(9, pass, format!("({mismatches}/200 mismatches, c=77.76 examples {}, {secs:.2}s)", if examples_ok { "ok" } else { "wrong" }));
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let reports: Vec<Vec<u8>> = dirs
        .iter()
        .map(|d| {
            let mut cfg = ExperimentConfig { scene_count: 8, eval_scene_count: 0, output_dir: d.path().to_path_buf(), ..Default::default() };
            cfg.attack = AttackConfig { steps: 50, ..suite_attack(AttackMode::DepthVanish) };
            harness::run_attack(&cfg).unwrap();
            std::fs::read(d.path().join("report.json")).unwrap()
        })
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let pass = reports[0] == reports[1] && secs < 2400.0;
    report(10, pass, format!("(report.json {} bytes, identical: {}, {secs:.0}s)", reports[0].len(), reports[0] == reports[1]));
    assert!(pass);
}

//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix3, Matrix3x4, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use flowdepth::camera::{Intrinsics, RelativePose};
use flowdepth::fusion::{
    loss_depth, loss_smooth, search_source_offset, select_source_frames, total_loss, Direction,
    FrameSequence, FusionError, LossWeights,
};
use flowdepth::geometry::{
    confidence_gradient_wrt_pose, flow_to_depth, triangulate_pixel, ConfidenceParams, GeometryError,
};
use flowdepth::grid::{FlowField, Grid};
use flowdepth::io::{self, IoError};
use flowdepth::metrics::evaluate;
use flowdepth::refine::{refine_pose, refinement_objective, RefinementConfig, RefinementResult};
use flowdepth::synth::{perturb_pose, render, NoiseSpec, SyntheticScene};

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    // straight to the handle so the line shows even when output is captured
    let line = format!("[{}] {id} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "acceptance {id} ({name}) failed: {detail}");
}

fn trace_monotone(res: &RefinementResult) -> bool {
    res.trace.windows(2).all(|w| w[1].objective >= w[0].objective)
}

fn direction_error(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.normalize().dot(&b.normalize()).clamp(-1.0, 1.0).acos()
}

#[test]
fn acceptance_1_triangulation_exactness() {
    let params = ConfidenceParams::default();
    let mut worst_depth: f64 = 0.0;
    let mut worst_conf: f64 = 0.0;
    let mut missing = 0usize;
    for seed in 0..100 {
        let scene = SyntheticScene::random(80, 60, seed);
        let r = render(&scene, seed).unwrap();
        let k = scene.intrinsics;
        let prop = flow_to_depth(&r.flow, &k, &r.true_pose, &k, &params).unwrap();
        for i in 0..r.flow.len() {
            if r.flow.at(i).is_none() {
                continue;
            }
            if !prop.positive_mask.as_slice()[i] {
                missing += 1;
                continue;
            }
            let (d, g) = (prop.depth.as_slice()[i], r.gt_depth.as_slice()[i]);
            worst_depth = worst_depth.max((d - g).abs() / g);
            worst_conf = worst_conf.max((prop.confidence.as_slice()[i] - 1.0).abs());
        }
    }

    let scene = SyntheticScene::random(1241, 376, 7);
    let r = render(&scene, 7).unwrap();
    let k = scene.intrinsics;
    let _ = flow_to_depth(&r.flow, &k, &r.true_pose, &k, &params).unwrap();
    let mut times = Vec::new();
    for _ in 0..3 {
        let start = Instant::now();
        let prop = flow_to_depth(&r.flow, &k, &r.true_pose, &k, &params).unwrap();
        times.push(start.elapsed().as_secs_f64());
        assert_eq!(prop.width(), 1241);
    }
    times.sort_by(f64::total_cmp);
    let runtime = times[1];

    let pass = worst_depth <= 1e-6 && worst_conf <= 1e-9 && missing == 0 && runtime < 1.0;
    report(
        1,
        "triangulation exactness",
        pass,
        &format!(
            "100 scenes, max rel depth err {worst_depth:.2e} (tol 1e-6), max |C-1| {worst_conf:.2e} (tol 1e-9), \
             {missing} valid pixels lost, 1241x376 frame in {runtime:.3} s (limit 1 s)"
        ),
    );
}

/// `ε(d)` by explicit projection of the back-projected point.
fn oracle_error(d: f64, p: &Vector2<f64>, pp: &Vector2<f64>, k: &Intrinsics, m: &Matrix3x4<f64>) -> f64 {
    let x = k.inverse_matrix() * Vector3::new(p.x, p.y, 1.0) * d;
    let y = m * x.push(1.0);
    (Vector2::new(y.x / y.z, y.y / y.z) - pp).norm()
}

#[test]
fn acceptance_2_closed_form_vs_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 2.0).unwrap();
    let samples = 10_000;
    let (lo, hi) = (0.1, 200.0);
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut degenerate = 0;
    let mut done = 0;
    while done < 1000 {
        let k = Intrinsics::new(
            rng.gen_range(200.0..1000.0),
            rng.gen_range(200.0..1000.0),
            rng.gen_range(100.0..600.0),
            rng.gen_range(100.0..400.0),
        )
        .unwrap();
        let ks = Intrinsics::new(
            k.fx * rng.gen_range(0.9..1.1),
            k.fy * rng.gen_range(0.9..1.1),
            k.cx + rng.gen_range(-5.0..5.0),
            k.cy + rng.gen_range(-5.0..5.0),
        )
        .unwrap();
        let axis = Vector3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let rot = Rotation3::new(axis.normalize() * rng.gen_range(0.0..0.1));
        let t = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        let pose = RelativePose::new(rot, t);
        let m = pose.camera_matrix(&ks);
        let p = Vector2::new(rng.gen_range(0.0..1200.0), rng.gen_range(0.0..800.0));
        let d0 = rng.gen_range(1.0..100.0);
        let x = pose.transform_point(&(k.unproject(p.x, p.y) * d0));
        if x.z <= 0.0 {
            continue;
        }
        let q = ks.project(&x).unwrap();
        let pp = q + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        let tri = match triangulate_pixel(&p, &pp, &k, &m) {
            Ok(t) => t,
            Err(GeometryError::DegenerateRay) => {
                degenerate += 1;
                continue;
            }
            Err(e) => panic!("{e}"),
        };
        let best = (0..samples)
            .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
            .map(|d| oracle_error(d, &p, &pp, &k, &m))
            .fold(f64::INFINITY, f64::min);
        let at_star = oracle_error(tri.depth, &p, &pp, &k, &m);
        assert!((at_star - tri.residual).abs() <= 1e-9 * (1.0 + at_star));
        worst = worst.max(at_star - best);
        done += 1;
    }
    report(
        2,
        "closed form vs brute force",
        worst <= 1e-9,
        &format!(
            "1000 instances, max eps(d*) - min over 1e4 samples = {worst:.2e} px (tol 1e-9), {degenerate} degenerate rays skipped"
        ),
    );
}

/// True when the objective is differentiable across the whole central
/// difference stencil: no pixel changes its positive-depth status and no
/// residual `|s|` crosses its kink at `s = 0`.
///
/// With `ε± = |s₀ ± δ|`, a crossing shows up as `ε₀ ≤ |ε₊ − ε₋| / 2`.
fn smooth_on_stencil(flow: &FlowField, k: &Intrinsics, chart: &[f64; 6], h: f64, params: &ConfidenceParams) -> bool {
    let center = flow_to_depth(flow, k, &RelativePose::from_chart(chart), k, params).unwrap();
    for i in 0..6 {
        let (mut a, mut b) = (*chart, *chart);
        a[i] += h;
        b[i] -= h;
        let plus = flow_to_depth(flow, k, &RelativePose::from_chart(&a), k, params).unwrap();
        let minus = flow_to_depth(flow, k, &RelativePose::from_chart(&b), k, params).unwrap();
        if plus.positive_mask != center.positive_mask || minus.positive_mask != center.positive_mask {
            return false;
        }
        for j in 0..flow.len() {
            if !center.positive_mask.as_slice()[j] {
                continue;
            }
            let (e0, ep, em) = (center.residual.as_slice()[j], plus.residual.as_slice()[j], minus.residual.as_slice()[j]);
            if e0 <= 2.0 * (ep - em).abs() {
                return false;
            }
        }
    }
    true
}

#[test]
fn acceptance_3_gradient_check() {
    let params = ConfidenceParams::default();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let (mut accepted, mut skipped) = (0, 0);
    let mut seed = 0u64;
    while accepted < 100 && seed < 2000 {
        seed += 1;
        let scene = SyntheticScene::random(40, 30, 300 + seed).with_noise(NoiseSpec {
            flow_std: 2.0,
            ..NoiseSpec::default()
        });
        let Ok(r) = render(&scene, seed) else { continue };
        let k = scene.intrinsics;
        let pose = perturb_pose(&r.true_pose, 1.0, 0.02, seed);
        let chart = pose.to_chart();
        if !smooth_on_stencil(&r.flow, &k, &chart, h, &params) {
            skipped += 1;
            continue;
        }
        accepted += 1;
        let g = confidence_gradient_wrt_pose(&r.flow, &k, &pose, &k, &params);
        let mut fd = [0.0; 6];
        for i in 0..6 {
            let (mut a, mut b) = (chart, chart);
            a[i] += h;
            b[i] -= h;
            let fa = refinement_objective(&r.flow, &k, &RelativePose::from_chart(&a), &k, &params);
            let fb = refinement_objective(&r.flow, &k, &RelativePose::from_chart(&b), &k, &params);
            fd[i] = (fa - fb) / (2.0 * h);
        }
        let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff / norm;
        worst = worst.max(rel);
        if !(rel <= 1e-4) {
            failures += 1;
        }
    }
    report(
        3,
        "analytic pose gradient",
        failures == 0 && accepted >= 100,
        &format!(
            "{accepted} smooth scenes ({skipped} skipped with a kink or mask change inside the stencil), \
             max relative error vs central differences (h = 1e-5) {worst:.2e} (tol 1e-4), {failures} over tolerance"
        ),
    );
}

#[test]
fn acceptance_4_pose_recovery() {
    let params = ConfidenceParams::default();
    let cfg = RefinementConfig::default();
    let (mut literal, mut up_to_scale, mut monotone) = (0, 0, 0);
    let mut worst_rot: f64 = 0.0;
    let mut worst_trel: f64 = 0.0;
    for seed in 0..100u64 {
        let scene = SyntheticScene::random(64, 48, seed);
        let r = render(&scene, seed).unwrap();
        let k = scene.intrinsics;
        let init = perturb_pose(&r.true_pose, 1.0, 0.02, seed + 1000);
        let res = refine_pose(&r.flow, &k, &init, &k, &params, &cfg).unwrap();
        let truth = r.true_pose.translation();
        let est = res.refined_pose.translation();
        let rot = res.refined_pose.rotation_distance(&r.true_pose);
        let trel = (est - truth).norm() / truth.norm();
        worst_rot = worst_rot.max(rot);
        worst_trel = worst_trel.max(trel);
        literal += usize::from(rot < 1e-3 && trel < 1e-3);
        up_to_scale += usize::from(rot < 1e-3 && direction_error(est, truth) < 1e-3);
        monotone += usize::from(trace_monotone(&res));
    }
    report(
        4,
        "pose refinement recovery",
        literal >= 95 && monotone == 100,
        &format!(
            "{literal}/100 within 1e-3 rad and 1e-3 relative translation (need 95), \
             {up_to_scale}/100 within 1e-3 rad and 1e-3 rad translation direction, \
             monotone trace {monotone}/100, max rot err {worst_rot:.2e} rad, max rel translation err {worst_trel:.2e}"
        ),
    );
}

#[test]
fn acceptance_5_noise_degradation() {
    let params = ConfidenceParams::default();
    let cfg = RefinementConfig::default();
    let mut closer = 0;
    for seed in 0..100u64 {
        let scene = SyntheticScene::random(256, 192, seed).with_noise(NoiseSpec {
            flow_std: 1.0,
            ..NoiseSpec::default()
        });
        let r = render(&scene, seed).unwrap();
        let k = scene.intrinsics;
        let init = perturb_pose(&r.true_pose, 1.0, 0.02, seed + 1000);
        let res = refine_pose(&r.flow, &k, &init, &k, &params, &cfg).unwrap();
        let truth = r.true_pose.translation();
        let before = init.rotation_distance(&r.true_pose) + direction_error(init.translation(), truth);
        let after = res.refined_pose.rotation_distance(&r.true_pose)
            + direction_error(res.refined_pose.translation(), truth);
        closer += usize::from(after <= before);
    }
    report(
        5,
        "noise degradation",
        closer >= 90,
        &format!(
            "flow noise 1 px, 256x192 scenes: refined pose at least as close as the initial one in {closer}/100 \
             trials (need 90; distance = rotation angle + translation direction angle)"
        ),
    );
}

fn map(v: &[f64]) -> Grid<f64> {
    Grid::from_vec(v.len(), 1, v.to_vec()).unwrap()
}

#[test]
fn acceptance_6_metric_suite() {
    let mut err: f64 = 0.0;
    let mut check = |got: f64, want: f64| err = err.max((got - want).abs());

    let r = evaluate(&map(&[2.0]), &map(&[1.0]), 80.0).unwrap();
    check(r.abs_rel, 1.0);
    check(r.sq_rel, 1.0);
    check(r.rms, 1.0);
    check(r.log_rms, 0.693_147_180_559_945_3);
    check(r.irmse, 0.5);
    check(r.silog, 0.0);
    check(r.delta1, 0.0);
    check(r.delta2, 0.0);
    check(r.delta3, 0.0);

    let same = map(&[0.5, 3.0, 40.0]);
    let r = evaluate(&same, &same, 80.0).unwrap();
    for v in [r.abs_rel, r.sq_rel, r.rms, r.log_rms, r.irmse, r.silog] {
        check(v, 0.0);
    }
    for v in [r.delta1, r.delta2, r.delta3] {
        check(v, 1.0);
    }

    // two pixels: errors e = ln 2 and 0
    let r = evaluate(&map(&[4.0, 3.0]), &map(&[2.0, 3.0]), 80.0).unwrap();
    check(r.abs_rel, 0.5);
    check(r.sq_rel, 1.0);
    check(r.rms, 2f64.sqrt());
    check(r.log_rms, (0.5f64).sqrt() * 2f64.ln());
    check(r.irmse, (0.0625f64 / 2.0).sqrt());
    check(r.silog, 2f64.ln() / 2.0);
    check(r.delta1, 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt: Vec<f64> = (0..500).map(|_| rng.gen_range(1.0..50.0)).collect();
    let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.7..1.4)).collect();
    let base = evaluate(&map(&pred), &map(&gt), 1e6).unwrap().silog;
    let mut scale_err: f64 = 0.0;
    for _ in 0..100 {
        let c = rng.gen_range(0.05..20.0);
        let scaled: Vec<f64> = pred.iter().map(|p| p * c).collect();
        let s = evaluate(&map(&scaled), &map(&gt), 1e6).unwrap().silog;
        scale_err = scale_err.max((s - base).abs());
    }
    report(
        6,
        "metric suite",
        err <= 1e-9 && scale_err <= 1e-12,
        &format!("max deviation from hand values {err:.2e} (tol 1e-9), SIlog change over 100 scale factors {scale_err:.2e}"),
    );
}

#[test]
fn acceptance_7_losses() {
    let mut err: f64 = 0.0;
    let mut check = |got: f64, want: f64| err = err.max((got - want).abs());
    let ones = map(&[1.0, 1.0, 1.0]);
    check(loss_depth(&ones, &ones).unwrap(), 0.0);
    check(loss_depth(&map(&[std::f64::consts::E]), &map(&[1.0])).unwrap(), 1.0);
    check(loss_depth(&map(&[2.0; 3]), &ones).unwrap(), 3.0 * 2f64.ln());
    check(loss_smooth(&Grid::filled(4, 4, 7.0)), 0.0);
    check(loss_smooth(&Grid::from_fn(5, 4, |u, _| 1.0 / (0.2 * u as f64 + 0.5))), 0.0);
    let mut bump = Grid::filled(3, 3, 1.0);
    *bump.get_mut(1, 1) = 0.5;
    check(loss_smooth(&bump), 4.0);
    let w = LossWeights::default();
    let gt = Grid::filled(3, 3, 1.0);
    check(total_loss(&bump, &gt, &w).unwrap(), 2f64.ln() + 0.5 * 4.0);
    let weights_ok = w.depth == 1.0 && w.smooth == 0.5;
    report(
        7,
        "losses",
        err <= 1e-9 && weights_ok,
        &format!("max deviation from hand values {err:.2e} (tol 1e-9), weights depth {} smooth {}", w.depth, w.smooth),
    );
}

fn brute_force(centers: &[Vector3<f64>], t: usize, thr: f64, dir: Direction) -> Option<usize> {
    let mut best = None;
    for s in 0..centers.len() {
        if (centers[s] - centers[t]).norm() <= thr {
            continue;
        }
        let k = match dir {
            Direction::Backward if s < t => t - s,
            Direction::Forward if s > t => s - t,
            _ => continue,
        };
        if best.map_or(true, |b| k < b) {
            best = Some(k);
        }
    }
    best
}

#[test]
fn acceptance_8_frame_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    let mut queries = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let mut c = Vector3::zeros();
        let mut centers = Vec::with_capacity(n);
        for _ in 0..n {
            // stationary stretches, small steps, jumps and back-tracking
            let step = match rng.gen_range(0..4) {
                0 => 0.0,
                1 => rng.gen_range(0.0..0.1),
                2 => rng.gen_range(0.0..0.5),
                _ => rng.gen_range(0.0..1.5),
            };
            let dir = Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng),
            );
            c += dir.normalize() * step;
            centers.push(c);
        }
        let seq = FrameSequence::from_centers(&centers).unwrap();
        for thr in [0.12, 0.80] {
            let t = rng.gen_range(0..n);
            let sel = select_source_frames(&seq, t, thr);
            for (got, dir) in [(&sel.backward, Direction::Backward), (&sel.forward, Direction::Forward)] {
                queries += 1;
                let want = brute_force(&centers, t, thr, dir).ok_or(FusionError::NoValidSource(dir));
                if *got != want || search_source_offset(&seq, t, thr, dir) != want {
                    mismatches += 1;
                }
            }
        }
    }
    report(
        8,
        "frame selection",
        mismatches == 0,
        &format!("1000 trajectories, {queries} searches at T = 0.12 and 0.80 m, {mismatches} mismatches vs linear scan"),
    );
}

fn random_pose(rng: &mut impl Rng) -> RelativePose {
    let w = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
    let w = if w.norm() >= 3.1 { w * (3.0 / w.norm()) } else { w };
    let t = Vector3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-50.0..50.0), rng.gen_range(-500.0..500.0));
    RelativePose::from_chart(&[w.x, w.y, w.z, t.x, t.y, t.z])
}

fn malformed_inputs_rejected(dir: &std::path::Path) -> Vec<String> {
    let mut missed = Vec::new();
    let mut expect = |name: &str, ok: bool| {
        if !ok {
            missed.push(name.to_string());
        }
    };
    let p = dir.join("x.flo");
    let good = io::encode_flow(&FlowField::dense(Grid::filled(3, 2, Vector2::new(1.0, 2.0))));
    let write = |bytes: &[u8]| std::fs::write(&p, bytes).unwrap();

    let mut b = good.clone();
    b[0] ^= 0xff;
    write(&b);
    expect("flow bad magic", matches!(io::read_flow(&p), Err(IoError::BadMagic(_))));
    write(&good[..good.len() - 1]);
    expect("flow truncated", matches!(io::read_flow(&p), Err(IoError::TruncatedFile(_))));
    let mut b = good.clone();
    b[4..8].copy_from_slice(&40_000i32.to_le_bytes());
    write(&b);
    expect("flow too large", matches!(io::read_flow(&p), Err(IoError::DimensionOverflow { .. })));
    let mut b = good.clone();
    b.push(0);
    write(&b);
    expect("flow trailing bytes", matches!(io::read_flow(&p), Err(IoError::BadHeader { .. })));

    let d = dir.join("x.fdm");
    let fm = io::encode_float_map(&Grid::filled(2, 2, 1.0));
    std::fs::write(&d, &fm[..fm.len() - 2]).unwrap();
    expect("float map truncated", matches!(io::read_depth(&d), Err(IoError::TruncatedFile(_))));
    let mut b = fm.clone();
    b[..8].copy_from_slice(b"NOTDEPTH");
    std::fs::write(&d, &b).unwrap();
    expect("float map bad magic", matches!(io::read_depth(&d), Err(IoError::BadHeader { .. })));
    expect(
        "depth extension",
        matches!(io::read_depth(dir.join("x.tiff")), Err(IoError::UnknownExtension(_))),
    );

    let poses = dir.join("p.txt");
    std::fs::write(&poses, "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n").unwrap();
    expect("pose short line", matches!(io::read_poses(&poses), Err(IoError::BadLine { line: 2, .. })));
    std::fs::write(&poses, "2 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    expect("pose non-rigid", matches!(io::read_poses(&poses), Err(IoError::NonRigidRotation { .. })));
    missed
}

#[test]
fn acceptance_9_io_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = Vec::new();
    for i in 0..1000 {
        let (w, h) = (rng.gen_range(1..24), rng.gen_range(1..24));

        let flow: Vec<Vector2<f64>> = (0..w * h)
            .map(|_| {
                Vector2::new(
                    f64::from(rng.gen_range(-500.0f32..500.0)),
                    f64::from(rng.gen_range(-500.0f32..500.0)),
                )
            })
            .collect();
        let valid: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.8)).collect();
        let flow = FlowField::new(Grid::from_vec(w, h, flow).unwrap(), Grid::from_vec(w, h, valid).unwrap()).unwrap();
        let fp = dir.path().join("f.flo");
        io::write_flow(&fp, &flow).unwrap();
        let back = io::read_flow(&fp).unwrap();
        let same_flow = back.valid() == flow.valid()
            && (0..flow.len()).all(|j| match (flow.at(j), back.at(j)) {
                (Some(a), Some(b)) => a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits(),
                (None, None) => true,
                _ => false,
            })
            && io::encode_flow(&back) == std::fs::read(&fp).unwrap();
        if !same_flow {
            failures.push(format!("flow {i}"));
        }

        let depth: Vec<f64> = (0..w * h)
            .map(|_| match rng.gen_range(0..10) {
                0 => 0.0,
                1 => -f64::from(rng.gen::<f32>()),
                _ => f64::from(rng.gen_range(1e-3f32..1e4)),
            })
            .collect();
        let depth = Grid::from_vec(w, h, depth).unwrap();
        let dp = dir.path().join("d.fdm");
        io::write_depth(&dp, &depth).unwrap();
        let back = io::read_depth(&dp).unwrap();
        let bitwise = back.same_shape(&depth)
            && back.as_slice().iter().zip(depth.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !bitwise {
            failures.push(format!("depth {i}"));
        }

        let quantized = depth.map(|d| if *d > 0.0 { (d * 256.0).round().clamp(1.0, 65535.0) / 256.0 } else { 0.0 });
        let pp = dir.path().join("d.png");
        io::write_depth(&pp, &quantized).unwrap();
        if io::read_depth(&pp).unwrap() != quantized {
            failures.push(format!("png {i}"));
        }

        let poses: Vec<RelativePose> = (0..rng.gen_range(1..6)).map(|_| random_pose(&mut rng)).collect();
        let posep = dir.path().join("poses.txt");
        io::write_poses(&posep, &poses).unwrap();
        let back = io::read_poses(&posep).unwrap();
        let exact = back.len() == poses.len()
            && back.iter().zip(&poses).all(|(a, b)| {
                let m = |p: &RelativePose| -> Vec<u64> {
                    let r: &Matrix3<f64> = p.rotation_matrix();
                    r.iter().chain(p.translation().iter()).map(|v| v.to_bits()).collect()
                };
                m(a) == m(b)
            });
        if !exact {
            failures.push(format!("poses {i}"));
        }
    }
    let missed = malformed_inputs_rejected(dir.path());
    report(
        9,
        "I/O round trips",
        failures.is_empty() && missed.is_empty(),
        &format!(
            "1000 flow/depth/pose files: {} round-trip failures {:?}, malformed cases not rejected: {:?}",
            failures.len(),
            failures.iter().take(5).collect::<Vec<_>>(),
            missed
        ),
    );
}

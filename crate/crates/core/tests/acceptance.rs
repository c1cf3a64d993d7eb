//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL line;
//! the process exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvos::autograd::{Mat, Tape};
use rvos::geometry::{generalized_iou, giou_loss_with_grad, iou, BoundingBox, CornerBox};
use rvos::losses::{
    box_loss, modalcon_loss, modalcon_on, textcon_loss, textcon_on, total_loss, triplet,
    LossComponents, LossWeights, TripletDistances, TripletOptions,
};
use rvos::mask::Mask;
use rvos::metrics::{boundary_f, overall_and_mean_iou, precision_at_k, region_j, Protocol};
use rvos::pipeline::evaluate::{ROW_BOX_ONLY, ROW_CONTRA};
use rvos::pipeline::train::{initialize, FINAL_CHECKPOINT, LOSS_LOG};
use rvos::pipeline::*;
use rvos::segmenter::build_adapter;
use rvos::synthdata::io::{generate_samples, DatasetConfig};
use rvos::synthdata::{GenerationSpec, VideoSample};

// Pinned tolerances and limits.
const RASTER: usize = 256;
const RASTER_TOL: f64 = 2e-2;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_ABS_FLOOR: f64 = 1e-8;
const FD_STEP: f64 = 1e-6;
const HAND_TOL: f64 = 1e-6;
const UPPER_BOUND_JF: f64 = 0.95;
const OVERFIT_STEPS: usize = 300;
const OVERFIT_BOX_IOU: f64 = 0.75;
const OVERFIT_JF: f64 = 0.6;
const ABLATION_SLACK: f64 = 0.02;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_STEPS: usize = 640;

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

/// Runs one criterion, prints its line and returns whether it passed.
fn criterion(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> (bool, String)) -> bool {
    let t0 = Instant::now();
    let (ok, detail) = f();
    let took = t0.elapsed();
    let ok = ok && took < limit;
    println!(
        "{} criterion {id} ({name}): {detail} [{:.1}s, limit {}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64(),
        limit.as_secs()
    );
    ok
}

fn dataset(videos: usize, seed: u64, motion_only_pairs: bool) -> Vec<VideoSample> {
    generate_samples(&DatasetConfig {
        videos,
        video: GenerationSpec {
            motion_only_pairs,
            ..GenerationSpec::default()
        },
        seed,
    })
    .expect("dataset generates")
}

/// Relative agreement of an analytic and a numeric derivative.
fn grad_close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= GRAD_REL_TOL * scale + GRAD_ABS_FLOOR
}

// ---- 1: geometry ------------------------------------------------------------

/// Random box inside the unit square with sides in `[0.1, 0.6]`, large
/// enough that the raster oracle resolves it to about 25 pixels or more.
fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (w, h) = (rng.random_range(0.1..0.6), rng.random_range(0.1..0.6));
    let (x1, y1) = (rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h));
    BoundingBox::from_corners(CornerBox {
        x1,
        y1,
        x2: x1 + w,
        y2: y1 + h,
    })
}

fn pixel_in(c: &CornerBox, u: f64, v: f64) -> bool {
    u >= c.x1 && u < c.x2 && v >= c.y1 && v < c.y2
}

/// IoU and GIoU by counting pixel centers on a square grid.
fn raster_iou_giou(a: &BoundingBox, b: &BoundingBox) -> (f64, f64) {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let hull = CornerBox {
        x1: ca.x1.min(cb.x1),
        y1: ca.y1.min(cb.y1),
        x2: ca.x2.max(cb.x2),
        y2: ca.y2.max(cb.y2),
    };
    let (mut inter, mut union, mut enclosing) = (0u64, 0u64, 0u64);
    for i in 0..RASTER {
        for j in 0..RASTER {
            let (u, v) = ((j as f64 + 0.5) / RASTER as f64, (i as f64 + 0.5) / RASTER as f64);
            let (ia, ib) = (pixel_in(&ca, u, v), pixel_in(&cb, u, v));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
            enclosing += u64::from(pixel_in(&hull, u, v));
        }
    }
    let iou = inter as f64 / union as f64;
    (iou, iou - (enclosing - union) as f64 / enclosing as f64)
}

/// True when no edge of `p` lies within `gap` of an edge of `g` on the same
/// axis, so finite differences stay on one smooth piece.
fn edges_apart(p: &BoundingBox, g: &BoundingBox, gap: f64) -> bool {
    let (a, b) = (p.to_corners(), g.to_corners());
    let xs = [a.x1, a.x2, b.x1, b.x2];
    let ys = [a.y1, a.y2, b.y1, b.y2];
    let apart = |v: [f64; 4]| (0..4).all(|i| (i + 1..4).all(|j| (v[i] - v[j]).abs() > gap));
    apart(xs) && apart(ys)
}

fn geometry_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ri, rg) = raster_iou_giou(&a, &b);
        worst = worst
            .max((iou(&a, &b).unwrap() - ri).abs())
            .max((generalized_iou(&a, &b).unwrap() - rg).abs());
    }
    let mut grad_fail = 0;
    let mut checked = 0;
    while checked < 100 {
        let (p, g) = (random_box(&mut rng), random_box(&mut rng));
        if !edges_apart(&p, &g, 1e-3) {
            continue;
        }
        checked += 1;
        let (_, grad) = giou_loss_with_grad(&p, &g).unwrap();
        for k in 0..4 {
            let shifted = |d: f64| {
                let mut a = p.to_array();
                a[k] += d;
                giou_loss_with_grad(&BoundingBox::from_array(a), &g).unwrap().0
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            grad_fail += usize::from(!grad_close(grad[k], numeric));
        }
    }
    (
        worst <= RASTER_TOL && grad_fail == 0,
        format!("max raster error {worst:.4} over 1000 pairs, {grad_fail} of 400 gradient entries off"),
    )
}

// ---- 2: losses ----------------------------------------------------------------

fn vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn row(v: &[f64]) -> Mat {
    Mat::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
}

/// Compares tape gradients of `on` against central differences of `value`
/// for every entry of every input vector.
fn check_triplet_grads(
    inputs: &[Vec<f64>],
    on: impl Fn(&mut Tape, &[rvos::autograd::Var]) -> rvos::autograd::Var,
    value: impl Fn(&[Vec<f64>]) -> f64,
) -> usize {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|v| tape.param(row(v))).collect();
    let out = on(&mut tape, &vars);
    let grads = tape.backward(out);
    let mut bad = 0;
    for (i, v) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(vars[i], (1, v.len()));
        for k in 0..v.len() {
            let at = |d: f64| {
                let mut x = inputs.to_vec();
                x[i][k] += d;
                value(&x)
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            bad += usize::from(!grad_close(g[[0, k]], numeric));
        }
    }
    bad
}

fn loss_suite() -> (bool, String) {
    let mut fails = Vec::new();
    let mut expect = |label: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            fails.push(format!("{label}: {got} vs {want}"));
        }
    };
    let t = |dp, dn| triplet(TripletDistances::new(dp, dn).unwrap());
    expect("triplet satisfied", t(0.3, 0.7), 0.0, 0.0);
    expect("triplet substitution", t(0.7, 0.3), 0.7 - 0.3, 0.0);
    expect("triplet boundary", t(0.5, 0.5), 0.0, 0.0);

    let opts = TripletOptions::default();
    let p = vec![vec![0.2, -0.1], vec![0.4, 0.3]];
    let other = vec![vec![0.9, 0.9], vec![-0.5, 0.1]];
    expect("textcon perfect", textcon_loss(&p, &p, &other, opts).unwrap(), 0.0, 0.0);
    expect("textcon collapsed", textcon_loss(&p, &other, &other, opts).unwrap(), 0.0, 0.0);
    expect(
        "textcon hand",
        textcon_loss(&[vec![0.0, 0.0]], &[vec![1.0, 0.0]], &[vec![0.0, 0.5]], opts).unwrap(),
        0.5,
        HAND_TOL,
    );
    expect("modalcon equal", modalcon_loss(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0], opts).unwrap(), 0.0, 0.0);
    expect("modalcon equidistant", modalcon_loss(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], opts).unwrap(), 0.0, 0.0);
    expect("modalcon hand", modalcon_loss(&[0.0, 0.0], &[3.0, 4.0], &[0.0, 1.0], opts).unwrap(), 4.0, HAND_TOL);

    let w = LossWeights::default();
    let pred = BoundingBox::new(0.5, 0.5, 0.4, 0.4).unwrap();
    let gt = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
    expect("box hand", box_loss(&[pred], &[gt], &w).unwrap(), 1.72, HAND_TOL);
    expect("box exact", box_loss(&[gt, pred], &[gt, pred], &w).unwrap(), 0.0, 0.0);
    let total = total_loss(
        &LossComponents {
            box_loss: 1.72,
            cls: 0.0,
            textcon: 0.5,
            modalcon: 4.0,
        },
        &w,
    );
    expect("total hand", total.total, 2.125, HAND_TOL);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut grad_bad, mut checked) = (0, 0);
    while checked < 50 {
        let frames = 3;
        let inputs: Vec<Vec<f64>> = (0..3 * frames).map(|_| vector(&mut rng, 6)).collect();
        let (a, rest) = inputs.split_at(frames);
        let (pos, neg) = rest.split_at(frames);
        let off_hinge = (0..frames).all(|t| {
            let d = TripletDistances::between(&a[t], &pos[t], &neg[t], false).unwrap();
            (d.d_p - d.d_n).abs() > 1e-3
        });
        if !off_hinge {
            continue;
        }
        checked += 1;
        grad_bad += check_triplet_grads(
            &inputs,
            |tape, v| textcon_on(tape, &v[..frames], &v[frames..2 * frames], &v[2 * frames..], opts).unwrap(),
            |x| textcon_loss(&x[..frames], &x[frames..2 * frames], &x[2 * frames..], opts).unwrap(),
        );
        let video = &inputs[..3];
        grad_bad += check_triplet_grads(
            video,
            |tape, v| modalcon_on(tape, v[0], v[1], v[2], opts).unwrap(),
            |x| modalcon_loss(&x[0], &x[1], &x[2], opts).unwrap(),
        );
    }
    let n = fails.len();
    (
        n == 0 && grad_bad == 0,
        format!("{n} hand cases off {fails:?}, {grad_bad} gradient entries off over 50 configurations"),
    )
}

// ---- 3: freeze audit ------------------------------------------------------------

fn freeze_audit() -> (bool, String) {
    let data = dataset(4, 3, false);
    let cfg = RunConfig {
        max_steps: 50,
        learning_rate: 0.01,
        lr_schedule: LrSchedule::Cosine,
        grad_clip: 3.0,
        arm: Arm::BoxPlusContra,
        ..RunConfig::default()
    };
    let (model0, seg0) = initialize(&cfg).unwrap();
    let weak: Vec<_> = data.iter().map(|s| s.weak()).collect();
    let ck = train(&cfg, &weak, TrainOptions::default()).unwrap().checkpoint;
    let mut moved_frozen = Vec::new();
    for (id, p) in seg0.params().iter() {
        if ck.segmenter.get(id) != &p.value {
            moved_frozen.push(p.name.clone());
        }
    }
    let (mut changed, mut trainable) = (0, 0);
    for (id, p) in model0.params().iter() {
        let same = ck.model.get(id) == &p.value;
        if p.trainable {
            trainable += 1;
            changed += usize::from(!same);
        } else if !same {
            moved_frozen.push(p.name.clone());
        }
    }
    let frozen = seg0.params().len() + model0.params().frozen_ids().len();
    (
        ck.step == 50 && moved_frozen.is_empty() && changed > 0,
        format!(
            "{} steps; {frozen} frozen tensors, moved {moved_frozen:?}; {changed} of {trainable} trainable tensors changed",
            ck.step
        ),
    )
}

// ---- 4: metrics -------------------------------------------------------------------

fn metric_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut j_off = 0;
    for _ in 0..500 {
        let (w, h) = (rng.random_range(1..48), rng.random_range(1..48));
        let (pa, pb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let a: Vec<bool> = (0..w * h).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..w * h).map(|_| rng.random_bool(pb)).collect();
        let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
        let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
        let want = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = region_j(&Mask::from_vec(w, h, a), &Mask::from_vec(w, h, b)).unwrap();
        j_off += usize::from(got != want);
    }

    let square = |x0: usize, y0: usize, side: usize| {
        Mask::from_fn(128, 128, move |x, y| (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y))
    };
    let f_shift = boundary_f(&square(40, 40, 40), &square(41, 40, 40)).unwrap();
    let f_far = boundary_f(&square(4, 4, 20), &square(90, 90, 20)).unwrap();

    let ious = [0.55, 0.65, 0.85];
    let p = |k| precision_at_k(&ious, k).unwrap();
    let (o2, m2) = overall_and_mean_iou(&[(1, 2), (3, 4)]);
    let (o1, m1) = overall_and_mean_iou(&[(3, 7)]);
    let (op, mp) = overall_and_mean_iou(&[(5, 5), (9, 9)]);
    let exact = p(0.5) == 1.0
        && p(0.6) == 2.0 / 3.0
        && p(0.9) == 0.0
        && o2 == 4.0 / 6.0
        && m2 == 0.625
        && o1 == m1
        && (op, mp) == (1.0, 1.0);
    (
        j_off == 0 && f_shift == 1.0 && f_far == 0.0 && exact,
        format!(
            "J mismatches {j_off}/500, F shift {f_shift}, F distant {f_far}, P@K and oIoU/mIoU hand cases {}",
            if exact { "exact" } else { "off" }
        ),
    )
}

// ---- 5: upper bound ------------------------------------------------------------------

fn upper_bound() -> (bool, String) {
    let data = dataset(20, 5, false);
    let ev = evaluate(Proposer::GroundTruth, &data, Protocol::DavisStyle, "oracle").unwrap();
    (
        ev.boxes.score == 100.0 && ev.metrics.jf_mean >= UPPER_BOUND_JF,
        format!("Box {} J&F {:.4}", ev.boxes.score, ev.metrics.jf_mean),
    )
}

// ---- 6: overfit ---------------------------------------------------------------------------

fn overfit() -> (bool, String) {
    let data = dataset(4, 11, false);
    let cfg = RunConfig {
        arm: Arm::BoxOnly,
        max_steps: OVERFIT_STEPS,
        epochs: 1000,
        learning_rate: 0.01,
        lr_schedule: LrSchedule::Cosine,
        grad_clip: 3.0,
        ..RunConfig::default()
    };
    let weak: Vec<_> = data.iter().map(|s| s.weak()).collect();
    let ck = train(&cfg, &weak, TrainOptions::default()).unwrap().checkpoint;
    let (model, _) = restore(&ck).unwrap();
    let ev = evaluate(Proposer::Model(&model), &data, Protocol::DavisStyle, "oracle").unwrap();
    (
        ck.step <= OVERFIT_STEPS
            && ev.boxes.mean_iou >= OVERFIT_BOX_IOU
            && ev.metrics.jf_mean >= OVERFIT_JF,
        format!(
            "{} SGD steps, box IoU {:.4}, J&F {:.4}",
            ck.step, ev.boxes.mean_iou, ev.metrics.jf_mean
        ),
    )
}

// ---- 7: ablation direction -----------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation_direction() -> (bool, String) {
    let data = dataset(32, 7, true);
    let (mut plain, mut contra) = (Vec::new(), Vec::new());
    let mut per_seed_ok = true;
    for seed in ABLATION_SEEDS {
        let cfg = RunConfig {
            seed,
            max_steps: ABLATION_STEPS,
            epochs: 1000,
            learning_rate: 0.01,
            lr_schedule: LrSchedule::Cosine,
            grad_clip: 3.0,
            ..RunConfig::default()
        };
        let table = ablate(&cfg, &data, &data, None).unwrap();
        let b = table.row(ROW_BOX_ONLY).unwrap().box_score / 100.0;
        let c = table.row(ROW_CONTRA).unwrap().box_score / 100.0;
        per_seed_ok &= c >= b - ABLATION_SLACK;
        plain.push(b);
        contra.push(c);
    }
    let (mb, mc) = (median(plain.clone()), median(contra.clone()));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ");
    (
        per_seed_ok && mc >= mb,
        format!(
            "box IoU box_only [{}] vs box_plus_contra [{}], medians {mb:.4} vs {mc:.4}",
            fmt(&plain),
            fmt(&contra)
        ),
    )
}

// ---- 8: online contract -----------------------------------------------------------------------

fn online_contract() -> (bool, String) {
    let data = dataset(2, 8, false);
    let cfg = RunConfig {
        max_steps: 5,
        layers: 2,
        learning_rate: 0.01,
        ..RunConfig::default()
    };
    let weak: Vec<_> = data.iter().map(|s| s.weak()).collect();
    let (model, _) = restore(&train(&cfg, &weak, TrainOptions::default()).unwrap().checkpoint).unwrap();
    let mut checked = 0;
    let mut mismatched = 0;
    for s in &data {
        for adapter in ["oracle", "color-box"] {
            let adapter = build_adapter(adapter, Some(s)).unwrap();
            for e in &s.expressions {
                let full = infer(BoxSource::model(&model, &e.text).unwrap(), &s.frames, adapter.as_ref()).unwrap();
                for k in 1..=s.frames.len() {
                    let prefix =
                        infer(BoxSource::model(&model, &e.text).unwrap(), &s.frames[..k], adapter.as_ref()).unwrap();
                    checked += 1;
                    mismatched += usize::from(prefix[..] != full[..k]);
                }
            }
        }
    }
    (mismatched == 0, format!("{mismatched} of {checked} prefixes differ"))
}

// ---- 9: determinism ----------------------------------------------------------------------------

fn determinism() -> (bool, String) {
    let data = dataset(4, 9, false);
    let cfg = RunConfig {
        epochs: 2,
        learning_rate: 0.01,
        grad_clip: 3.0,
        arm: Arm::BoxPlusContra,
        ..RunConfig::default()
    };
    let weak: Vec<_> = data.iter().map(|s| s.weak()).collect();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let opts = TrainOptions {
            out_dir: Some(d.path().to_path_buf()),
            ..TrainOptions::default()
        };
        train(&cfg, &weak, opts).unwrap();
    }
    let read = |i: usize, name: &str| std::fs::read(dirs[i].path().join(name)).unwrap();
    let logs = read(0, LOSS_LOG) == read(1, LOSS_LOG);
    let ckpt = read(0, FINAL_CHECKPOINT) == read(1, FINAL_CHECKPOINT);
    let steps = String::from_utf8(read(0, LOSS_LOG)).unwrap().lines().count();
    (
        logs && ckpt && steps > 0,
        format!("{steps} logged steps; logs identical {logs}, checkpoints identical {ckpt}"),
    )
}

type Check = fn() -> (bool, String);

fn main() {
    let all: [(usize, &str, u64, Check); 9] = [
        (1, "geometry oracle suite", 60, geometry_suite),
        (2, "loss kernel suite", 60, loss_suite),
        (3, "freeze audit", 120, freeze_audit),
        (4, "metric oracle suite", 60, metric_suite),
        (5, "ground-truth box upper bound", 120, upper_bound),
        (6, "overfit sanity", 600, overfit),
        (7, "ablation direction", 2700, ablation_direction),
        (8, "online contract", 60, online_contract),
        (9, "determinism", 600, determinism),
    ];
    // Optional criterion numbers on the command line select a subset.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let results: Vec<bool> = all
        .iter()
        .filter(|c| only.is_empty() || only.contains(&c.0))
        .map(|&(id, name, limit, f)| criterion(id, name, secs(limit), f))
        .collect();
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

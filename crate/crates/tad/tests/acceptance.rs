//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tad_core::curation::{
    compose_training_set, DatasetManifest, ManifestEntry, ManifestObject, ManifestRegistry, ModelComposition,
    Provenance,
};
use tad_core::evaluation::{average_precision, GroundTruthFrame, TruthObject};
use tad_core::geometry::{overlap_area_ratio, overlapped_line_length_ratio, Axis, Direction, TravelAxis};
use tad_core::incidents::{judge_stoppage, judge_wrong_way, RuleConfig, TrackWindow};
use tad_core::simulation::ClosedLoopReport;
use tad_core::tracking::{associate, Observation, Tracker, TrackerConfig};
use tad_core::{BoundingBox, Detection, ObjectClass};

fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).expect("valid test box")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tad() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tad"));
    c.env_remove("TAD_CONFIG");
    c
}

// ---------------------------------------------------------------- geometry

/// Box with corners on a quarter-pixel grid.
fn grid_box(r: &mut ChaCha8Rng) -> BoundingBox {
    let x0 = r.gen_range(0..100) as f64 * 0.25;
    let y0 = r.gen_range(0..100) as f64 * 0.25;
    let w = r.gen_range(1..=60) as f64 * 0.25;
    let h = r.gen_range(1..=60) as f64 * 0.25;
    bb(x0, y0, x0 + w, y0 + h)
}

/// IoU by counting quarter-pixel cells whose centers fall inside each box.
fn iou_by_grid(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let lo_x = a.x_min().min(b.x_min());
    let lo_y = a.y_min().min(b.y_min());
    let nx = ((a.x_max().max(b.x_max()) - lo_x) / 0.25).round() as usize;
    let ny = ((a.y_max().max(b.y_max()) - lo_y) / 0.25).round() as usize;
    let inside =
        |bx: &BoundingBox, x: f64, y: f64| x > bx.x_min() && x < bx.x_max() && y > bx.y_min() && y < bx.y_max();
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for i in 0..nx {
        let x = lo_x + (i as f64 + 0.5) * 0.25;
        for j in 0..ny {
            let y = lo_y + (j as f64 + 0.5) * 0.25;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            na += ia as u64;
            nb += ib as u64;
            both += (ia && ib) as u64;
        }
    }
    both as f64 / (na + nb - both) as f64
}

/// Overlap of `[p0,p1]` and `[c0,c1]` over the length of the first, summed
/// over the elementary intervals between the sorted endpoints.
fn line_ratio_by_intervals(p: (f64, f64), c: (f64, f64)) -> f64 {
    let mut pts = [p.0, p.1, c.0, c.1];
    pts.sort_by(f64::total_cmp);
    let mut covered = 0.0;
    for w in pts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        if mid > p.0 && mid < p.1 && mid > c.0 && mid < c.1 {
            covered += w[1] - w[0];
        }
    }
    covered / (p.1 - p.0)
}

fn geometry_oracles() -> Result<String> {
    let mut r = rng(0x6e0);
    let mut worst = 0.0f64;
    let mut overlapping = 0;
    for _ in 0..1000 {
        let (a, b) = (grid_box(&mut r), grid_box(&mut r));
        let want = iou_by_grid(&a, &b);
        let got = overlap_area_ratio(&a, &b);
        overlapping += (want > 0.0) as usize;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-6, "IoU {got} vs grid {want} for {a:?} {b:?}");

        let axis = if r.gen_bool(0.5) {
            Axis::Horizontal
        } else {
            Axis::Vertical
        };
        let dir = if r.gen_bool(0.5) {
            Direction::Increasing
        } else {
            Direction::Decreasing
        };
        let (p, c) = match axis {
            Axis::Horizontal => ((a.x_min(), a.x_max()), (b.x_min(), b.x_max())),
            Axis::Vertical => ((a.y_min(), a.y_max()), (b.y_min(), b.y_max())),
        };
        let want = line_ratio_by_intervals(p, c);
        let got = overlapped_line_length_ratio(&a, &b, TravelAxis::new(axis, dir));
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-6, "line ratio {got} vs {want} for {a:?} {b:?}");
    }
    ensure!(overlapping >= 200, "only {overlapping} overlapping pairs generated");
    Ok(format!("1000 pairs ({overlapping} overlapping), max error {worst:.1e}"))
}

// -------------------------------------------------------------- assignment

fn best_by_permutation(scores: &[Vec<f64>], nd: usize) -> f64 {
    fn go(scores: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == scores.len() {
            *best = best.max(acc);
            return;
        }
        // leave this track unmatched
        go(scores, row + 1, used, acc, best);
        for j in 0..used.len() {
            if !used[j] && scores[row][j] > 0.0 {
                used[j] = true;
                go(scores, row + 1, used, acc + scores[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = 0.0;
    go(scores, 0, &mut vec![false; nd], 0.0, &mut best);
    best
}

fn assignment_optimality() -> Result<String> {
    let mut r = rng(0xa55);
    let mut matched = 0;
    for inst in 0..500 {
        let nt = r.gen_range(1..=7);
        let nd = r.gen_range(1..=7);
        let spread = r.gen_range(20.0..80.0);
        let mut boxes = |n: usize| -> Vec<BoundingBox> {
            (0..n)
                .map(|_| {
                    let (x, y) = (r.gen_range(0.0..spread), r.gen_range(0.0..spread));
                    bb(x, y, x + r.gen_range(15.0..40.0), y + r.gen_range(15.0..40.0))
                })
                .collect()
        };
        let (tracks, dets) = (boxes(nt), boxes(nd));
        let threshold = if inst % 2 == 0 { 0.3 } else { 0.05 };
        let a = associate(&tracks, &dets, threshold);

        let gated = |t: &BoundingBox, d: &BoundingBox| {
            let iou = overlap_area_ratio(t, d);
            if iou >= threshold && iou > 0.0 {
                iou
            } else {
                0.0
            }
        };
        let scores: Vec<Vec<f64>> = tracks
            .iter()
            .map(|t| dets.iter().map(|d| gated(t, d)).collect())
            .collect();
        let want = best_by_permutation(&scores, nd);

        let mut seen_t = vec![false; nt];
        let mut seen_d = vec![false; nd];
        let mut got = 0.0;
        for &(ti, di) in &a.matches {
            ensure!(!seen_t[ti] && !seen_d[di], "instance {inst}: index reused");
            ensure!(scores[ti][di] > 0.0, "instance {inst}: gated pair ({ti},{di}) matched");
            seen_t[ti] = true;
            seen_d[di] = true;
            got += scores[ti][di];
        }
        let un_t: Vec<usize> = (0..nt).filter(|&i| !seen_t[i]).collect();
        let un_d: Vec<usize> = (0..nd).filter(|&i| !seen_d[i]).collect();
        ensure!(
            a.unmatched_tracks == un_t && a.unmatched_detections == un_d,
            "instance {inst}: unmatched lists"
        );
        // both totals are summed in track order
        ensure!(
            got == want,
            "instance {inst}: total IoU {got} but the exhaustive optimum is {want}"
        );
        matched += a.matches.len();
    }
    Ok(format!("500 instances up to 7x7, {matched} matches, all optimal"))
}

// ---------------------------------------------------------------- tracking

fn tracking_identity() -> Result<String> {
    let cfg = TrackerConfig::default();
    let mut worst_asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for scenario in 0..50u64 {
        let mut r = rng(0x7ac0 + scenario);
        let n = r.gen_range(2..=5);
        // one car per lane; lanes are 40 px apart and cars at most 30 px tall
        let cars: Vec<(f64, f64, f64, f64, f64)> = (0..n)
            .map(|lane| {
                let y = 20.0 + 40.0 * lane as f64;
                let speed = r.gen_range(1.0..6.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
                (
                    r.gen_range(100.0..900.0),
                    y,
                    r.gen_range(40.0..60.0),
                    r.gen_range(22.0..30.0),
                    speed,
                )
            })
            .collect();
        let mut tracker = Tracker::new("cam", cfg.clone());
        let mut owner: Vec<Option<u64>> = vec![None; n];
        let mut claimed: HashMap<u64, usize> = HashMap::new();
        let mut seen = vec![0u32; n];
        for f in 0..200u64 {
            let dets: Vec<Detection> = cars
                .iter()
                .map(|&(x, y, w, h, v)| {
                    let x0 = x + v * f as f64 + r.gen_range(-0.5..0.5);
                    let y0 = y + r.gen_range(-0.5..0.5);
                    let b = bb(x0, y0, x0 + w + r.gen_range(-0.5..0.5), y0 + h + r.gen_range(-0.5..0.5));
                    Detection::new(b, ObjectClass::Car, 0.9, f, "cam").expect("valid confidence")
                })
                .collect();
            for snap in tracker.step(f, &dets)? {
                let Some(obs) = snap.observed else { continue };
                let car = dets
                    .iter()
                    .position(|d| d.bbox == obs)
                    .context("snapshot box is no detection")?;
                seen[car] += 1;
                match owner[car] {
                    None => owner[car] = Some(snap.track_id),
                    Some(id) => ensure!(
                        id == snap.track_id,
                        "scenario {scenario}: car {car} switched from track {id} to {} at frame {f}",
                        snap.track_id
                    ),
                }
                let prev = *claimed.entry(snap.track_id).or_insert(car);
                ensure!(
                    prev == car,
                    "scenario {scenario}: track {} jumped from car {prev} to {car}",
                    snap.track_id
                );
            }
            for t in tracker.tracks() {
                let p = &t.state.covariance;
                for i in 0..7 {
                    for j in 0..7 {
                        worst_asym = worst_asym.max((p[(i, j)] - p[(j, i)]).abs());
                    }
                }
                let e = p
                    .symmetric_eigen()
                    .eigenvalues
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min);
                min_eig = min_eig.min(e);
            }
        }
        for (car, &k) in seen.iter().enumerate() {
            ensure!(
                k > 200 - cfg.min_hits,
                "scenario {scenario}: car {car} reported on only {k} frames"
            );
        }
    }
    ensure!(worst_asym <= 1e-9, "covariance asymmetry {worst_asym:e}");
    ensure!(min_eig >= -1e-9, "covariance eigenvalue {min_eig:e}");
    Ok(format!(
        "50 scenarios, 0 ID switches, max |P-P^T| {worst_asym:.1e}, min eigenvalue {min_eig:.2e}"
    ))
}

// ------------------------------------------------------------------- rules

fn iou_oracle(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max().min(b.x_max()) - a.x_min().max(b.x_min())).max(0.0);
    let h = (a.y_max().min(b.y_max()) - a.y_min().max(b.y_min())).max(0.0);
    let i = w * h;
    i / (a.width() * a.height() + b.width() * b.height() - i)
}

fn window(boxes: &[BoundingBox]) -> Vec<Observation> {
    boxes
        .iter()
        .enumerate()
        .map(|(f, b)| Observation {
            frame_index: f as u64,
            bbox: *b,
        })
        .collect()
}

fn tw(obs: &[Observation]) -> TrackWindow<'_> {
    TrackWindow {
        channel_id: "cam",
        track_id: 1,
        observations: obs,
    }
}

fn rule_thresholds() -> Result<String> {
    let cfg = RuleConfig::default();
    let n = cfg.judgment_window_frames as usize;
    let t = Utc.with_ymd_and_hms(2026, 1, 1, 0, 0, 0).unwrap();
    let mut r = rng(0x5709);
    let (mut stopped, mut moving) = (0, 0);
    for _ in 0..1000 {
        let (x, y, w, h) = (
            r.gen_range(0.0..500.0),
            r.gen_range(0.0..200.0),
            r.gen_range(30.0..80.0),
            r.gen_range(20.0..50.0),
        );
        let jitter = r.gen_range(0.0..0.06) * w;
        let mut boxes = vec![bb(x, y, x + w, y + h)];
        for _ in 1..n {
            let mut j = || r.gen_range(-jitter..=jitter);
            boxes.push(bb(x + j(), y + j(), x + w + j(), y + h + j()));
        }
        let min = boxes.iter().map(|b| iou_oracle(&boxes[0], b)).fold(1.0, f64::min);
        if (min - cfg.stoppage_overlap_threshold).abs() < 1e-9 {
            continue;
        }
        let obs = window(&boxes);
        let fired = judge_stoppage(&tw(&obs), &cfg, t).is_some();
        ensure!(
            fired == (min >= cfg.stoppage_overlap_threshold),
            "stoppage {fired} with window-min IoU {min}"
        );
        if fired {
            stopped += 1;
        } else {
            moving += 1;
        }
    }
    ensure!(
        stopped >= 100 && moving >= 100,
        "unbalanced stoppage sample {stopped}/{moving}"
    );

    let (mut backward_hits, mut backward_misses, mut forward) = (0, 0, 0);
    for _ in 0..1000 {
        let axis = if r.gen_bool(0.5) {
            Axis::Horizontal
        } else {
            Axis::Vertical
        };
        let dir = if r.gen_bool(0.5) {
            Direction::Increasing
        } else {
            Direction::Decreasing
        };
        let ax = TravelAxis::new(axis, dir);
        let (x, y, w, h) = (
            r.gen_range(200.0..400.0),
            r.gen_range(200.0..400.0),
            r.gen_range(30.0..80.0),
            r.gen_range(30.0..80.0),
        );
        let len = if axis == Axis::Horizontal { w } else { h };
        let shift = r.gen_range(-1.5..1.5) * len;
        let grow = r.gen_range(0.8..1.2);
        let (dx, dy) = if axis == Axis::Horizontal {
            (shift, 0.0)
        } else {
            (0.0, shift)
        };
        let first = bb(x, y, x + w, y + h);
        let last = bb(x + dx, y + dy, x + dx + w * grow, y + dy + h * grow);
        let mut boxes = vec![first];
        for _ in 1..n - 1 {
            let (ox, oy) = (r.gen_range(-50.0..50.0), r.gen_range(-50.0..50.0));
            boxes.push(bb(x + ox, y + oy, x + ox + w, y + oy + h));
        }
        boxes.push(last);

        let (fc, lc) = (first.center(), last.center());
        let mut delta = if axis == Axis::Horizontal {
            lc.0 - fc.0
        } else {
            lc.1 - fc.1
        };
        if dir == Direction::Decreasing {
            delta = -delta;
        }
        let proj = |b: &BoundingBox| {
            if axis == Axis::Horizontal {
                (b.x_min(), b.x_max())
            } else {
                (b.y_min(), b.y_max())
            }
        };
        let ratio = line_ratio_by_intervals(proj(&first), proj(&last));
        if (delta.abs() - cfg.direction_dead_band).abs() < 1e-9
            || (ratio - cfg.wrongway_line_ratio_threshold).abs() < 1e-9
        {
            continue;
        }
        let obs = window(&boxes);
        let fired = judge_wrong_way(&tw(&obs), ax, &cfg, t).is_some();
        if delta > cfg.direction_dead_band {
            ensure!(!fired, "forward trajectory (delta {delta}) raised wrong_way");
            forward += 1;
        } else if delta < -cfg.direction_dead_band {
            let want = ratio < cfg.wrongway_line_ratio_threshold;
            ensure!(
                fired == want,
                "backward trajectory with ratio {ratio}: wrong_way {fired}"
            );
            if want {
                backward_hits += 1;
            } else {
                backward_misses += 1;
            }
        }
    }
    ensure!(
        backward_hits >= 100 && backward_misses >= 50 && forward >= 100,
        "unbalanced wrong-way sample"
    );

    // exact boundaries: IoU 90/100 and line ratio 75/100
    let base = bb(0.0, 0.0, 10.0, 10.0);
    let at = window(&[vec![base; n - 1], vec![bb(0.0, 0.0, 10.0, 9.0)]].concat());
    ensure!(
        judge_stoppage(&tw(&at), &cfg, t).is_some(),
        "IoU exactly 0.9 must be a stoppage"
    );
    let below = window(&[vec![base; n - 1], vec![bb(0.0, 0.0, 10.0, 8.999)]].concat());
    ensure!(
        judge_stoppage(&tw(&below), &cfg, t).is_none(),
        "IoU below 0.9 must not be a stoppage"
    );

    let ax = TravelAxis::default();
    let car = bb(100.0, 0.0, 200.0, 10.0);
    let at = window(&[vec![car; n - 1], vec![bb(75.0, 0.0, 175.0, 10.0)]].concat());
    ensure!(
        judge_wrong_way(&tw(&at), ax, &cfg, t).is_none(),
        "ratio exactly 0.75 must not be wrong_way"
    );
    let past = window(&[vec![car; n - 1], vec![bb(74.9, 0.0, 174.9, 10.0)]].concat());
    ensure!(
        judge_wrong_way(&tw(&past), ax, &cfg, t).is_some(),
        "ratio below 0.75 must be wrong_way"
    );

    Ok(format!(
        "stoppage {stopped} fired / {moving} not; wrong-way backward {backward_hits} fired / {backward_misses} not, forward {forward} silent; boundaries pinned"
    ))
}

// ---------------------------------------------------------------------- AP

/// AP by re-matching every confidence prefix from scratch and integrating
/// interpolated precision one truth object at a time.
fn ap_oracle(dets: &[Detection], truth: &[GroundTruthFrame], class: ObjectClass) -> f64 {
    let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.object_class == class).collect();
    ds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let n_truth: usize = truth.iter().map(|t| t.count(class)).sum();
    let mut points = Vec::new();
    for k in 1..=ds.len() {
        let mut used: HashMap<(String, u64, usize), bool> = HashMap::new();
        let mut tp = 0;
        for d in &ds[..k] {
            let frame = truth
                .iter()
                .find(|t| t.channel_id() == d.channel_id && t.frame_index() == d.frame_index);
            let Some(frame) = frame else { continue };
            let mut best: Option<(usize, f64)> = None;
            for (j, o) in frame.objects().iter().enumerate() {
                if o.object_class != class || used.contains_key(&(d.channel_id.clone(), d.frame_index, j)) {
                    continue;
                }
                let iou = iou_oracle(&d.bbox, &o.bbox);
                if iou >= 0.5 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used.insert((d.channel_id.clone(), d.frame_index, j), true);
                tp += 1;
            }
        }
        points.push((tp, tp as f64 / k as f64));
    }
    (1..=n_truth)
        .map(|j| {
            points
                .iter()
                .filter(|(tp, _)| *tp >= j)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / n_truth as f64
}

fn ap_oracle_equivalence() -> Result<String> {
    let mut r = rng(0xa9);
    let mut worst = 0.0f64;
    for inst in 0..200 {
        let frames = r.gen_range(1..=3u64);
        let mut truth = Vec::new();
        let mut dets = Vec::new();
        for f in 0..frames {
            let mut objects = Vec::new();
            for _ in 0..r.gen_range(0..=4) {
                let (x, y) = (r.gen_range(0.0..300.0), r.gen_range(0.0..300.0));
                let class = if r.gen_bool(0.8) {
                    ObjectClass::Person
                } else {
                    ObjectClass::Car
                };
                objects.push(TruthObject {
                    bbox: bb(x, y, x + r.gen_range(10.0..40.0), y + r.gen_range(20.0..60.0)),
                    object_class: class,
                });
            }
            truth.push(GroundTruthFrame::new("cam", f, objects)?);
        }
        if truth.iter().map(|t| t.count(ObjectClass::Person)).sum::<usize>() == 0 {
            let o = TruthObject {
                bbox: bb(5.0, 5.0, 25.0, 45.0),
                object_class: ObjectClass::Person,
            };
            truth[0] = GroundTruthFrame::new("cam", 0, [truth[0].objects(), &[o]].concat())?;
        }
        let n_dets = r.gen_range(0..=20);
        for _ in 0..n_dets {
            let f = r.gen_range(0..frames);
            let objs = truth[f as usize].objects();
            let b = if !objs.is_empty() && r.gen_bool(0.6) {
                let o = objs[r.gen_range(0..objs.len())].bbox;
                let j = r.gen_range(0.0..8.0);
                bb(
                    o.x_min() + j,
                    o.y_min() - j,
                    o.x_max() + j,
                    o.y_max() + r.gen_range(-j..=j),
                )
            } else {
                let (x, y) = (r.gen_range(0.0..300.0), r.gen_range(0.0..300.0));
                bb(x, y, x + 20.0, y + 40.0)
            };
            let class = if r.gen_bool(0.85) {
                ObjectClass::Person
            } else {
                ObjectClass::Car
            };
            dets.push(Detection::new(b, class, r.gen_range(0.01..1.0), f, "cam")?);
        }
        let got = average_precision(&dets, &truth, ObjectClass::Person, 0.5)?;
        let want = ap_oracle(&dets, &truth, ObjectClass::Person);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "instance {inst}: AP {got} vs oracle {want}");

        let perfect: Vec<Detection> = truth
            .iter()
            .flat_map(|t| {
                t.objects()
                    .iter()
                    .map(|o| Detection::new(o.bbox, o.object_class, 0.5, t.frame_index(), "cam").unwrap())
                    .collect::<Vec<_>>()
            })
            .collect();
        let ap = average_precision(&perfect, &truth, ObjectClass::Person, 0.5)?;
        ensure!(ap == 1.0, "instance {inst}: perfect detector AP {ap}");
    }
    Ok(format!("200 instances, max error {worst:.1e}, perfect detector AP = 1"))
}

// ------------------------------------------------------------- closed loop

fn closed_loop() -> Result<String> {
    let out = tad().args(["simulate", "--rounds", "2", "--seed", "7"]).output()?;
    ensure!(
        out.status.success(),
        "tad simulate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: ClosedLoopReport = serde_json::from_slice(&out.stdout).context("simulate output")?;
    ensure!(
        report.rounds.len() == 3,
        "expected rounds 0..=2, got {}",
        report.rounds.len()
    );
    let fp: Vec<f64> = report
        .rounds
        .iter()
        .map(|r| r.held_out_fp_rate[&ObjectClass::Person])
        .collect();
    let fire: Vec<f64> = report.rounds.iter().map(|r| r.fire_alarms_per_day).collect();
    let ap = |c: ObjectClass| -> Vec<f64> { report.rounds.iter().map(|r| r.average_precision[&c]).collect() };
    let (car, person) = (ap(ObjectClass::Car), ap(ObjectClass::Person));
    let mut problems = Vec::new();
    if !fp.windows(2).all(|w| w[1] < w[0]) {
        problems.push("(a) person FP rate not strictly decreasing".to_string());
    }
    if fire[1] > 0.10 * fire[0] {
        problems.push(format!("(b) fire alarms/day {:.2} > 10% of {:.2}", fire[1], fire[0]));
    }
    for (name, v) in [("car", &car), ("person", &person)] {
        for (i, w) in v.windows(2).enumerate() {
            if w[1] < w[0] - 0.02 {
                problems.push(format!("(c) {name} AP fell {:.4} in round {}", w[0] - w[1], i + 1));
            }
        }
    }
    if person[2] < person[0] {
        problems.push(format!(
            "(c) person AP {:.4} -> {:.4} decreased overall",
            person[0], person[2]
        ));
    }
    let mut detail = String::new();
    let fmt = |v: &[f64], p: usize| {
        v.iter()
            .map(|x| format!("{x:.prec$}", prec = p))
            .collect::<Vec<_>>()
            .join(" > ")
    };
    write!(
        detail,
        "person FP% {}; fire alarms/day {}; car AP {}; person AP {}",
        fmt(&fp, 2),
        fmt(&fire, 2),
        fmt(&car, 4).replace('>', "/"),
        fmt(&person, 4).replace('>', "/")
    )?;
    if problems.is_empty() {
        Ok(detail)
    } else {
        bail!("{}; {detail}", problems.join("; "))
    }
}

// ---------------------------------------------------------------- curation

fn fixture(
    name: &str,
    provenance: Provenance,
    images: usize,
    counts: &[(ObjectClass, usize)],
) -> Result<DatasetManifest> {
    let mut entries: Vec<ManifestEntry> = (0..images)
        .map(|i| ManifestEntry {
            image: format!("{name}/{i:06}.jpg"),
            objects: Vec::new(),
        })
        .collect();
    let mut k = 0usize;
    for &(class, n) in counts {
        for _ in 0..n {
            entries[k % images].objects.push(ManifestObject {
                bbox: bb(0.0, 0.0, 1.0, 1.0),
                object_class: class,
            });
            k += 1;
        }
    }
    Ok(DatasetManifest::new(
        name,
        provenance,
        Utc.with_ymd_and_hms(2018, 12, 1, 0, 0, 0).unwrap(),
        entries,
    )?)
}

fn curation_accounting() -> Result<String> {
    use ObjectClass::*;
    let mut reg = ManifestRegistry::new();
    reg.register(fixture(
        "labeled",
        Provenance::Labeled,
        70_914,
        &[(Car, 446_726), (Person, 47_141), (Fire, 857), (FalseFire, 184_448)],
    )?)?;
    reg.register(fixture(
        "fp-a",
        Provenance::FpCollected,
        2_041,
        &[(FalseFire, 691), (FalsePerson, 1_357)],
    )?)?;
    reg.register(fixture(
        "fp-b",
        Provenance::FpCollected,
        8_007,
        &[(FalseFire, 22), (FalsePerson, 7_999)],
    )?)?;

    // (model, manifests, images, car, person, fire, false_fire, false_person)
    let expected: [(&str, &[&str], usize, [u64; 5]); 3] = [
        ("A", &["labeled"], 70_914, [446_726, 47_141, 857, 184_448, 0]),
        (
            "B",
            &["labeled", "fp-a"],
            72_955,
            [446_726, 47_141, 857, 185_139, 1_357],
        ),
        (
            "C",
            &["labeled", "fp-a", "fp-b"],
            80_962,
            [446_726, 47_141, 857, 185_161, 9_356],
        ),
    ];
    for (model, manifests, images, counts) in expected {
        let comp = ModelComposition::new(model, manifests.iter().map(|s| s.to_string()).collect())?;
        let set = compose_training_set(&comp, &reg)?;
        let got = [Car, Person, Fire, FalseFire, FalsePerson].map(|c| set.counts.get(c));
        ensure!(
            set.images == images,
            "model {model}: {} images, want {images}",
            set.images
        );
        ensure!(
            set.manifest.image_count() == images,
            "model {model}: manifest image count"
        );
        ensure!(got == counts, "model {model}: counts {got:?}, want {counts:?}");
        ensure!(
            set.manifest.class_counts() == set.counts,
            "model {model}: counts disagree with entries"
        );
    }
    Ok("models A/B/C: images 70,914 / 72,955 / 80,962; model B false_person 1,357, model C 9,356".into())
}

// -------------------------------------------------------------- determinism

fn detection_log(path: &Path) -> Result<()> {
    let mut r = rng(0xdec0);
    let t0 = Utc.with_ymd_and_hms(2026, 5, 4, 9, 0, 0).unwrap();
    let mut text = String::new();
    let line = |text: &mut String, ch: &str, f: u64, class: &str, conf: f64, b: [f64; 4]| {
        let t = t0 + chrono::Duration::milliseconds(40 * f as i64);
        writeln!(
            text,
            r#"{{"channel":"{ch}","frame":{f},"t":"{}","class":"{class}","conf":{conf},"box":[{},{},{},{}]}}"#,
            t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            b[0],
            b[1],
            b[2],
            b[3]
        )
        .unwrap();
    };
    for f in 0..400u64 {
        let ff = f as f64;
        // stopping car, reversing car, passing traffic
        let stop_x = if f < 100 { 50.0 + 3.0 * ff } else { 350.0 };
        line(&mut text, "cam1", f, "car", 0.93, [stop_x, 100.0, stop_x + 50.0, 128.0]);
        let back_x = 600.0 - 1.5 * ff;
        line(&mut text, "cam2", f, "car", 0.9, [back_x, 60.0, back_x + 45.0, 85.0]);
        let pass_x = (20.0 + 5.0 * ff) % 700.0;
        line(&mut text, "cam2", f, "car", 0.88, [pass_x, 140.0, pass_x + 48.0, 166.0]);
        if (150..170).contains(&f) || (300..310).contains(&f) {
            line(
                &mut text,
                "cam3",
                f,
                "fire",
                r.gen_range(0.5..0.95),
                [200.0, 40.0, 230.0, 80.0],
            );
        }
        if (200..230).contains(&f) {
            line(&mut text, "cam3", f, "person", 0.8, [400.0, 90.0, 415.0, 130.0]);
            if f < 210 {
                line(&mut text, "cam3", f, "false_person", 0.9, [401.0, 90.0, 416.0, 131.0]);
            }
        }
        if f % 97 == 0 {
            writeln!(text, "{{\"channel\":\"cam1\",\"frame\":{f}").unwrap();
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn pipeline_determinism() -> Result<String> {
    let dir = tempfile::tempdir()?;
    let input = dir.path().join("detections.jsonl");
    detection_log(&input)?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let store = dir.path().join(run);
        let out = tad()
            .args(["track", "--input"])
            .arg(&input)
            .arg("--store")
            .arg(&store)
            .output()?;
        ensure!(
            out.status.success(),
            "tad track failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        logs.push((
            std::fs::read(store.join("events.jsonl"))?,
            std::fs::read(store.join("rejects.jsonl"))?,
            out.stdout,
        ));
    }
    ensure!(logs[0].0 == logs[1].0, "event logs differ");
    ensure!(logs[0].1 == logs[1].1, "reject logs differ");
    ensure!(logs[0].2 == logs[1].2, "run summaries differ");
    let events = logs[0].0.iter().filter(|&&b| b == b'\n').count();
    let kinds: BTreeMap<String, usize> = String::from_utf8(logs[0].0.clone())?
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).map(|v| v["event_type"].as_str().unwrap_or("").to_string())
        })
        .try_fold(BTreeMap::new(), |mut m, k| {
            *m.entry(k?).or_insert(0) += 1;
            Ok::<_, serde_json::Error>(m)
        })?;
    ensure!(kinds.len() == 4, "expected all four event types, got {kinds:?}");
    Ok(format!(
        "{events} events ({kinds:?}), {} bytes, identical across runs",
        logs[0].0.len()
    ))
}

// -------------------------------------------------------------------- main

type Check = fn() -> Result<String>;

fn main() {
    let checks: [(&str, Check, Option<Duration>); 8] = [
        (
            "geometry oracle equivalence",
            geometry_oracles,
            Some(Duration::from_secs(5)),
        ),
        (
            "assignment optimality",
            assignment_optimality,
            Some(Duration::from_secs(10)),
        ),
        ("tracking identity", tracking_identity, None),
        ("rule thresholds", rule_thresholds, None),
        ("AP oracle equivalence", ap_oracle_equivalence, None),
        ("closed-loop FP reduction", closed_loop, Some(Duration::from_secs(120))),
        ("curation accounting", curation_accounting, None),
        ("pipeline determinism", pipeline_determinism, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in checks {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(anyhow::anyhow!(
                "panicked: {:?}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or(p.downcast_ref::<&str>().copied())
            ))
        });
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if took > l => Err(anyhow::anyhow!("took {took:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{took:.2?}]"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e:#} [{took:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

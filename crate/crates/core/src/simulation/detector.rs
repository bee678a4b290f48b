//! Nearest-prototype window classifier over five hand-crafted features.
//!
//! Every candidate window is described by its mean intensity, log aspect,
//! size, contrast against a surrounding ring and edge elongation (log ratio
//! of horizontal to vertical gradient energy). Training clusters labeled
//! windows into a few prototypes per class plus background prototypes;
//! inference slides the training window shapes over the frame and keeps
//! windows whose nearest prototype is an object class.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::Raster;
use super::SimulationError;
use crate::curation::DatasetManifest;
use crate::detection::{Detection, ObjectClass};
use crate::geometry::{overlap_area_ratio, BoundingBox};

pub const FEATURE_NAMES: [&str; 7] = [
    "mean_intensity",
    "log_aspect",
    "area_fraction",
    "contrast",
    "edge_elongation",
    "center_peak",
    "edge_closure",
];

pub type Features = [f64; 7];

// fixed weights that bring the features to comparable ranges
const W_MEAN: f64 = 4.0 / 255.0;
const W_ASPECT: f64 = 1.5;
const W_AREA: f64 = 6.0;
const W_CONTRAST: f64 = 4.0 / 255.0;
const W_ELONG: f64 = 1.0;
const W_PEAK: f64 = 4.0 / 255.0;
const W_CLOSURE: f64 = 4.0 / 255.0;

/// Source of training images keyed by image reference.
pub trait ImageSource {
    fn image(&self, image_ref: &str) -> Option<&Raster>;
}

impl ImageSource for HashMap<String, Raster> {
    fn image(&self, image_ref: &str) -> Option<&Raster> {
        self.get(image_ref)
    }
}

impl ImageSource for BTreeMap<String, Raster> {
    fn image(&self, image_ref: &str) -> Option<&Raster> {
        self.get(image_ref)
    }
}

/// Summed-area tables of intensity and absolute gradients.
pub struct IntegralImage {
    width: usize,
    height: usize,
    sum: Vec<i64>,
    gx: Vec<i64>,
    gy: Vec<i64>,
}

impl IntegralImage {
    pub fn new(r: &Raster) -> Self {
        let (w, h) = (r.width(), r.height());
        let stride = w + 1;
        let mut sum = vec![0i64; stride * (h + 1)];
        let mut gx = vec![0i64; stride * (h + 1)];
        let mut gy = vec![0i64; stride * (h + 1)];
        for y in 0..h {
            let (mut rs, mut rx, mut ry) = (0i64, 0i64, 0i64);
            for x in 0..w {
                let v = r.get(x, y) as i64;
                rs += v;
                if x + 1 < w {
                    rx += (r.get(x + 1, y) as i64 - v).abs();
                }
                if y + 1 < h {
                    ry += (r.get(x, y + 1) as i64 - v).abs();
                }
                let i = (y + 1) * stride + x + 1;
                sum[i] = sum[i - stride] + rs;
                gx[i] = gx[i - stride] + rx;
                gy[i] = gy[i - stride] + ry;
            }
        }
        Self {
            width: w,
            height: h,
            sum,
            gx,
            gy,
        }
    }

    fn rect(&self, t: &[i64], x0: usize, y0: usize, x1: usize, y1: usize) -> i64 {
        let s = self.width + 1;
        t[y1 * s + x1] - t[y0 * s + x1] - t[y1 * s + x0] + t[y0 * s + x0]
    }

    /// Inner mean minus ring mean, in intensity units.
    pub fn contrast(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let m = (w.min(h) / 2).max(2);
        let (ox0, oy0) = (x.saturating_sub(m), y.saturating_sub(m));
        let (ox1, oy1) = ((x + w + m).min(self.width), (y + h + m).min(self.height));
        let inner = self.rect(&self.sum, x, y, x + w, y + h);
        let outer = self.rect(&self.sum, ox0, oy0, ox1, oy1);
        let ring_area = ((ox1 - ox0) * (oy1 - oy0) - w * h) as f64;
        let inner_mean = inner as f64 / (w * h) as f64;
        if ring_area <= 0.0 {
            return 0.0;
        }
        inner_mean - (outer - inner) as f64 / ring_area
    }

    /// Smallest absolute step between the window mean and the strip just
    /// outside each of its four sides; sides at the frame border are skipped.
    pub fn closure(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let m = (w.min(h) / 4).max(2);
        let inner = self.rect(&self.sum, x, y, x + w, y + h) as f64 / (w * h) as f64;
        let strips = [
            (x.saturating_sub(m), y, x, y + h),
            (x + w, y, (x + w + m).min(self.width), y + h),
            (x, y.saturating_sub(m), x + w, y),
            (x, y + h, x + w, (y + h + m).min(self.height)),
        ];
        strips
            .into_iter()
            .filter(|&(x0, y0, x1, y1)| x1 > x0 && y1 > y0)
            .map(|(x0, y0, x1, y1)| {
                let mean = self.rect(&self.sum, x0, y0, x1, y1) as f64 / ((x1 - x0) * (y1 - y0)) as f64;
                (inner - mean).abs()
            })
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))))
            .unwrap_or(0.0)
    }

    /// Weighted feature vector of the window `[x, x+w) x [y, y+h)`.
    pub fn features(&self, x: usize, y: usize, w: usize, h: usize) -> Features {
        let area = (w * h) as f64;
        let mean = self.rect(&self.sum, x, y, x + w, y + h) as f64 / area;
        let sgx = self.rect(&self.gx, x, y, x + w - 1, y + h) as f64 / ((w - 1).max(1) * h) as f64;
        let sgy = self.rect(&self.gy, x, y, x + w, y + h - 1) as f64 / (w * (h - 1).max(1)) as f64;
        let frame_area = (self.width * self.height) as f64;
        let (cw, ch) = ((w / 2).max(1), (h / 2).max(1));
        let (cx, cy) = (x + (w - cw) / 2, y + (h - ch) / 2);
        let center = self.rect(&self.sum, cx, cy, cx + cw, cy + ch) as f64 / (cw * ch) as f64;
        [
            mean * W_MEAN,
            (h as f64 / w as f64).ln() * W_ASPECT,
            (area / frame_area).sqrt() * W_AREA,
            self.contrast(x, y, w, h) * W_CONTRAST,
            ((sgx + 1.0) / (sgy + 1.0)).ln() * W_ELONG,
            (center - mean) * W_PEAK,
            self.closure(x, y, w, h) * W_CLOSURE,
        ]
    }
}

fn dist2(a: &Features, b: &Features) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    /// `None` is the background.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ObjectClass>,
    pub center: Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetectorModel {
    pub composition_id: String,
    pub frame_size: (u32, u32),
    pub window_shapes: Vec<(u32, u32)>,
    pub prototypes: Vec<Prototype>,
    pub thresholds: BTreeMap<ObjectClass, f64>,
    /// Windows whose contrast magnitude is below this (intensity units) are
    /// never scored.
    pub min_contrast: f64,
    pub nms_iou: f64,
}

impl ToyDetectorModel {
    pub fn classes(&self) -> BTreeSet<ObjectClass> {
        self.prototypes.iter().filter_map(|p| p.class).collect()
    }

    /// Nearest distance from `f` to each class (background keyed `None`).
    pub fn class_distances(&self, f: &Features) -> BTreeMap<Option<ObjectClass>, f64> {
        let mut out: BTreeMap<Option<ObjectClass>, f64> = BTreeMap::new();
        for p in &self.prototypes {
            let d = dist2(f, &p.center);
            out.entry(p.class).and_modify(|x| *x = x.min(d)).or_insert(d);
        }
        out.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
    }

    /// Winning class and confidence for one feature vector, or `None` when
    /// the background wins.
    pub fn classify(&self, f: &Features) -> Option<(ObjectClass, f64)> {
        let mut best: Option<(Option<ObjectClass>, f64)> = None;
        for p in &self.prototypes {
            let d = dist2(f, &p.center);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((p.class, d));
            }
        }
        let (class, d_best) = best?;
        let class = class?;
        let d_other = self
            .prototypes
            .iter()
            .filter(|p| p.class != Some(class))
            .map(|p| dist2(f, &p.center))
            .fold(f64::INFINITY, f64::min);
        let (d_best, d_other) = (d_best.sqrt(), d_other.sqrt());
        let conf = if d_other.is_infinite() {
            1.0
        } else if d_best + d_other == 0.0 {
            0.5
        } else {
            d_other / (d_best + d_other)
        };
        Some((class, conf))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub seed: u64,
    pub frame_size: (u32, u32),
    pub prototypes_per_class: usize,
    pub background_prototypes: usize,
    pub background_per_image: usize,
    /// Extra windows drawn around each labeled object.
    pub near_samples_per_object: usize,
    /// A drawn window at this IoU with an object is a sample of its class.
    pub positive_min_iou: f64,
    /// A drawn window below this IoU with every object is background.
    pub background_max_iou: f64,
    pub threshold: f64,
    pub min_contrast: f64,
    pub nms_iou: f64,
    pub max_shapes: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0x70f,
            frame_size: super::scenario::DEFAULT_FRAME_SIZE,
            prototypes_per_class: 4,
            background_prototypes: 24,
            background_per_image: 24,
            near_samples_per_object: 16,
            positive_min_iou: 0.6,
            background_max_iou: 0.5,
            threshold: 0.55,
            min_contrast: 10.0,
            nms_iou: 0.5,
            max_shapes: 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Samples per class name, background included.
    pub samples: BTreeMap<String, usize>,
    /// Classes with no labeled object; the model never emits them.
    pub skipped_classes: Vec<ObjectClass>,
}

/// Integer window covering `b`, clipped to the frame; `None` if degenerate.
fn window_of(b: &BoundingBox, fw: usize, fh: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = b.x_min().round().max(0.0) as usize;
    let y0 = b.y_min().round().max(0.0) as usize;
    let x1 = (b.x_max().round() as usize).min(fw);
    let y1 = (b.y_max().round() as usize).min(fh);
    (x1 >= x0 + 2 && y1 >= y0 + 2).then(|| (x0, y0, x1 - x0, y1 - y0))
}

fn window_box(x: usize, y: usize, w: usize, h: usize) -> BoundingBox {
    BoundingBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).expect("window box")
}

/// Deterministic k-means: farthest-point seeding from the sample nearest
/// the mean, then Lloyd iterations.
fn kmeans(samples: &[Features], k: usize) -> Vec<Features> {
    let k = k.min(samples.len());
    if k == 0 {
        return Vec::new();
    }
    let n = samples.len() as f64;
    let mut mean = [0.0; 7];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n;
        }
    }
    let first = (0..samples.len())
        .min_by(|&a, &b| dist2(&samples[a], &mean).total_cmp(&dist2(&samples[b], &mean)))
        .expect("non-empty");
    let mut centers = vec![samples[first]];
    let mut nearest: Vec<f64> = samples.iter().map(|s| dist2(s, &centers[0])).collect();
    while centers.len() < k {
        let (i, d) = nearest
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        if d <= 0.0 {
            break;
        }
        centers.push(samples[i]);
        for (j, s) in samples.iter().enumerate() {
            nearest[j] = nearest[j].min(dist2(s, &samples[i]));
        }
    }
    let mut assign = vec![0usize; samples.len()];
    for _ in 0..30 {
        let mut changed = false;
        for (j, s) in samples.iter().enumerate() {
            let c = (0..centers.len())
                .min_by(|&a, &b| dist2(s, &centers[a]).total_cmp(&dist2(s, &centers[b])))
                .expect("centers");
            if c != assign[j] {
                assign[j] = c;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Features> = samples
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(s, _)| s)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let mut acc = [0.0; 7];
            for s in members {
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += v / m;
                }
            }
            *center = acc;
        }
        if !changed {
            break;
        }
    }
    centers
}

/// IoU of two window shapes sharing a center.
fn shape_iou(a: (u32, u32), b: (u32, u32)) -> f64 {
    let inter = (a.0.min(b.0) * a.1.min(b.1)) as f64;
    inter / ((a.0 * a.1 + b.0 * b.1) as f64 - inter)
}

/// Greedy choice of at most `k` window shapes maximizing the weighted best
/// IoU to every labeled shape, with each class carrying equal total weight.
fn select_shapes(counts: &BTreeMap<(ObjectClass, (u32, u32)), usize>, k: usize) -> Vec<(u32, u32)> {
    let mut class_total: BTreeMap<ObjectClass, usize> = BTreeMap::new();
    for (&(c, _), &n) in counts {
        *class_total.entry(c).or_default() += n;
    }
    let mut weight: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    for (&(c, s), &n) in counts {
        *weight.entry(s).or_default() += n as f64 / class_total[&c] as f64;
    }
    let targets: Vec<((u32, u32), f64)> = weight.into_iter().collect();
    let mut cover = vec![0.0; targets.len()];
    let mut chosen = Vec::new();
    while chosen.len() < k {
        let mut best: Option<(f64, (u32, u32))> = None;
        for &(cand, _) in &targets {
            if chosen.contains(&cand) {
                continue;
            }
            let gain: f64 = targets
                .iter()
                .zip(&cover)
                .map(|(&(t, w), &c)| w * (shape_iou(cand, t) - c).max(0.0))
                .sum();
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, cand));
            }
        }
        let Some((gain, cand)) = best else { break };
        if gain <= 0.0 {
            break;
        }
        for (c, &(t, _)) in cover.iter_mut().zip(&targets) {
            *c = c.max(shape_iou(cand, t));
        }
        chosen.push(cand);
    }
    chosen.sort_unstable();
    chosen
}

/// Fits a model to the labeled windows of `manifest`.
///
/// Background windows are drawn only from images that carry at least one
/// positive object; images holding only negative-class boxes are sparsely
/// labeled and their remaining content is unknown.
pub fn toy_train(
    manifest: &DatasetManifest,
    images: &dyn ImageSource,
    cfg: &ToyTrainConfig,
) -> Result<(ToyDetectorModel, TrainReport), SimulationError> {
    let (fw, fh) = (cfg.frame_size.0 as usize, cfg.frame_size.1 as usize);
    let mut per_class: BTreeMap<ObjectClass, Vec<Features>> = BTreeMap::new();
    let mut shape_count: BTreeMap<(ObjectClass, (u32, u32)), usize> = BTreeMap::new();
    let mut sampled = Vec::new();

    for entry in manifest.entries() {
        let raster = images
            .image(&entry.image)
            .ok_or_else(|| SimulationError::MissingImage(entry.image.clone()))?;
        if (raster.width(), raster.height()) != (fw, fh) {
            return Err(SimulationError::SizeMismatch {
                expected: cfg.frame_size,
                got: (raster.width() as u32, raster.height() as u32),
            });
        }
        let ii = IntegralImage::new(raster);
        for o in &entry.objects {
            let Some((x, y, w, h)) = window_of(&o.bbox, fw, fh) else {
                continue;
            };
            *shape_count.entry((o.object_class, (w as u32, h as u32))).or_default() += 1;
            let j = (w.min(h) / 6).max(1) as isize;
            for (dx, dy) in [(0, 0), (-j, 0), (j, 0), (0, -j), (0, j)] {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if xx < 0 || yy < 0 || xx as usize + w > fw || yy as usize + h > fh {
                    continue;
                }
                per_class
                    .entry(o.object_class)
                    .or_default()
                    .push(ii.features(xx as usize, yy as usize, w, h));
            }
        }
        let fully_labeled = entry.objects.iter().any(|o| !o.object_class.is_negative());
        let objects: Vec<(BoundingBox, ObjectClass)> = entry.objects.iter().map(|o| (o.bbox, o.object_class)).collect();
        sampled.push((ii, objects, fully_labeled));
    }
    if per_class.is_empty() {
        return Err(SimulationError::EmptyTraining);
    }

    let window_shapes = select_shapes(&shape_count, cfg.max_shapes);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut background = Vec::new();
    let pick_shape = |rng: &mut ChaCha8Rng| {
        let (w, h) = window_shapes[rng.gen_range(0..window_shapes.len())];
        ((w as usize).min(fw), (h as usize).min(fh))
    };
    for (ii, objects, fully_labeled) in &sampled {
        let best_overlap = |wb: &BoundingBox| {
            objects
                .iter()
                .map(|(b, c)| (overlap_area_ratio(wb, b), *c))
                .fold(
                    (0.0, None),
                    |acc, (iou, c)| if iou > acc.0 { (iou, Some(c)) } else { acc },
                )
        };
        // windows around each object: shifted or reshaped copies
        for (b, _) in objects {
            let (cx, cy) = b.center();
            for _ in 0..cfg.near_samples_per_object {
                let (w, h) = pick_shape(&mut rng);
                let px = cx + rng.gen_range(-0.75..=0.75) * b.width() - w as f64 / 2.0;
                let py = cy + rng.gen_range(-0.75..=0.75) * b.height() - h as f64 / 2.0;
                let x = (px.round().max(0.0) as usize).min(fw - w);
                let y = (py.round().max(0.0) as usize).min(fh - h);
                if ii.contrast(x, y, w, h).abs() < cfg.min_contrast {
                    continue;
                }
                let (iou, class) = best_overlap(&window_box(x, y, w, h));
                match class {
                    Some(c) if iou >= cfg.positive_min_iou => {
                        per_class.entry(c).or_default().push(ii.features(x, y, w, h));
                    }
                    _ if iou < cfg.background_max_iou && *fully_labeled => {
                        background.push(ii.features(x, y, w, h));
                    }
                    _ => {}
                }
            }
        }
        if !fully_labeled {
            continue;
        }
        let mut taken = 0;
        for _ in 0..cfg.background_per_image * 40 {
            if taken == cfg.background_per_image {
                break;
            }
            let (w, h) = pick_shape(&mut rng);
            let x = rng.gen_range(0..=fw - w);
            let y = rng.gen_range(0..=fh - h);
            if ii.contrast(x, y, w, h).abs() < cfg.min_contrast {
                continue;
            }
            if best_overlap(&window_box(x, y, w, h)).0 >= cfg.background_max_iou {
                continue;
            }
            background.push(ii.features(x, y, w, h));
            taken += 1;
        }
    }

    let mut report = TrainReport::default();
    let mut prototypes = Vec::new();
    for class in ObjectClass::ALL {
        match per_class.get(&class) {
            Some(samples) if !samples.is_empty() => {
                report.samples.insert(class.as_str().to_string(), samples.len());
                prototypes.extend(
                    kmeans(samples, cfg.prototypes_per_class)
                        .into_iter()
                        .map(|c| Prototype {
                            class: Some(class),
                            center: c,
                        }),
                );
            }
            _ => report.skipped_classes.push(class),
        }
    }
    report.samples.insert("background".into(), background.len());
    prototypes.extend(
        kmeans(&background, cfg.background_prototypes)
            .into_iter()
            .map(|c| Prototype { class: None, center: c }),
    );

    let thresholds = per_class.keys().map(|&c| (c, cfg.threshold)).collect();
    Ok((
        ToyDetectorModel {
            composition_id: manifest.name().to_string(),
            frame_size: cfg.frame_size,
            window_shapes,
            prototypes,
            thresholds,
            min_contrast: cfg.min_contrast,
            nms_iou: cfg.nms_iou,
        },
        report,
    ))
}

/// Whether a kept window suppresses `b`: IoU at the NMS threshold, or most
/// of the smaller box covered when the two are of similar size.
fn shadows(kept: &BoundingBox, b: &BoundingBox, nms_iou: f64) -> bool {
    if overlap_area_ratio(kept, b) >= nms_iou {
        return true;
    }
    let (small, large) = if kept.area() < b.area() {
        (kept.area(), b.area())
    } else {
        (b.area(), kept.area())
    };
    large <= 2.0 * small && kept.intersection_area(b) >= 0.6 * small
}

/// Slides every window shape over `raster` and returns the surviving
/// object windows after class-agnostic non-maximum suppression.
pub fn toy_infer(
    model: &ToyDetectorModel,
    raster: &Raster,
    channel_id: &str,
    frame_index: u64,
) -> Result<Vec<Detection>, SimulationError> {
    let (fw, fh) = (raster.width(), raster.height());
    if (fw as u32, fh as u32) != model.frame_size {
        return Err(SimulationError::SizeMismatch {
            expected: model.frame_size,
            got: (fw as u32, fh as u32),
        });
    }
    let ii = IntegralImage::new(raster);
    let mut cands: Vec<(f64, usize, usize, usize, usize, ObjectClass)> = Vec::new();
    for &(w, h) in &model.window_shapes {
        let (w, h) = (w as usize, h as usize);
        if w > fw || h > fh {
            continue;
        }
        let (sx, sy) = ((w / 5).max(1), (h / 5).max(1));
        for y in (0..=fh - h).step_by(sy) {
            for x in (0..=fw - w).step_by(sx) {
                if ii.contrast(x, y, w, h).abs() < model.min_contrast {
                    continue;
                }
                let f = ii.features(x, y, w, h);
                if let Some((class, conf)) = model.classify(&f) {
                    if conf >= model.thresholds.get(&class).copied().unwrap_or(1.0) {
                        cands.push((conf, y, x, w, h, class));
                    }
                }
            }
        }
    }
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then((a.1, a.2, a.3, a.4, a.5).cmp(&(b.1, b.2, b.3, b.4, b.5)))
    });

    let mut kept: Vec<Detection> = Vec::new();
    for (conf, y, x, w, h, class) in cands {
        let b = window_box(x, y, w, h);
        if kept.iter().any(|k| shadows(&k.bbox, &b, model.nms_iou)) {
            continue;
        }
        kept.push(Detection::new(b, class, conf, frame_index, channel_id).expect("confidence in [0.5, 1]"));
    }
    Ok(kept)
}

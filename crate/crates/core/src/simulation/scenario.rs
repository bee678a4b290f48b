//! Scripted synthetic tunnel clips rendered as small grayscale rasters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SimulationError;
use crate::detection::ObjectClass;
use crate::evaluation::{GroundTruthFrame, TruthObject};
use crate::geometry::BoundingBox;

pub const DEFAULT_FRAME_SIZE: (u32, u32) = (160, 120);

/// Single-channel 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixel columns/rows whose centers fall inside `b`, clipped to the image.
    fn span(&self, b: &BoundingBox) -> (usize, usize, usize, usize) {
        let lo = |v: f64, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n);
        (
            lo(b.x_min(), self.width),
            lo(b.y_min(), self.height),
            lo(b.x_max(), self.width),
            lo(b.y_max(), self.height),
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Motion {
    #[default]
    Linear,
    /// Moves until frame `at`, then stands still.
    Stop { at: u64 },
    /// Moves until frame `at`, then backs up at the same speed.
    Reverse { at: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmearSurface {
    /// Dark patch riding on a car body.
    Car,
    /// Dark stain on the lane or wall.
    Lane,
}

/// Position and lifetime shared by every entity. `box` is the position at
/// frame 0; `visible` is a half-open frame range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible: Option<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entity {
    Car {
        #[serde(flatten)]
        at: Placement,
        #[serde(default)]
        motion: Motion,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        intensity: Option<u8>,
    },
    Person {
        #[serde(flatten)]
        at: Placement,
    },
    Fire {
        #[serde(flatten)]
        at: Placement,
    },
    GlareArtifact {
        #[serde(flatten)]
        at: Placement,
    },
    DarkSmear {
        #[serde(flatten)]
        at: Placement,
        surface: SmearSurface,
    },
}

impl Entity {
    pub fn placement(&self) -> &Placement {
        match self {
            Entity::Car { at, .. }
            | Entity::Person { at }
            | Entity::Fire { at }
            | Entity::GlareArtifact { at }
            | Entity::DarkSmear { at, .. } => at,
        }
    }

    /// Truth class; artifacts have none.
    pub fn truth_class(&self) -> Option<ObjectClass> {
        match self {
            Entity::Car { .. } => Some(ObjectClass::Car),
            Entity::Person { .. } => Some(ObjectClass::Person),
            Entity::Fire { .. } => Some(ObjectClass::Fire),
            Entity::GlareArtifact { .. } | Entity::DarkSmear { .. } => None,
        }
    }

    pub fn is_visible(&self, frame: u64) -> bool {
        self.placement().visible.is_none_or(|[a, b]| (a..b).contains(&frame))
    }

    /// Box at `frame`, whether or not the entity is visible then.
    pub fn box_at(&self, frame: u64) -> BoundingBox {
        let p = self.placement();
        let t = match self {
            Entity::Car {
                motion: Motion::Stop { at },
                ..
            } => frame.min(*at) as f64,
            Entity::Car {
                motion: Motion::Reverse { at },
                ..
            } if frame > *at => 2.0 * *at as f64 - frame as f64,
            _ => frame as f64,
        };
        p.bbox
            .translate(p.velocity[0] * t, p.velocity[1] * t)
            .expect("finite translation")
    }
}

/// A scripted clip. `seed` drives sensor noise and texture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub channel_id: String,
    pub frames: u64,
    #[serde(default = "default_frame_size")]
    pub frame_size: (u32, u32),
    pub entities: Vec<Entity>,
    pub seed: u64,
}

fn default_frame_size() -> (u32, u32) {
    DEFAULT_FRAME_SIZE
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let invalid = |reason: String| SimulationError::InvalidSpec {
            channel: self.channel_id.clone(),
            reason,
        };
        if self.channel_id.is_empty() || self.channel_id.contains('/') {
            return Err(invalid("channel_id must be non-empty and contain no '/'".into()));
        }
        if self.frames == 0 {
            return Err(invalid("frames must be positive".into()));
        }
        let (w, h) = self.frame_size;
        if w < 16 || h < 16 || w > 4096 || h > 4096 {
            return Err(invalid(format!("frame_size {w}x{h} outside 16..=4096")));
        }
        for (i, e) in self.entities.iter().enumerate() {
            let p = e.placement();
            if p.bbox.width() < 2.0 || p.bbox.height() < 2.0 {
                return Err(invalid(format!("entity {i} is smaller than 2x2 px")));
            }
            if !p.velocity.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("entity {i} has a non-finite velocity")));
            }
            for f in 0..self.frames {
                if !e.is_visible(f) {
                    continue;
                }
                let b = e.box_at(f);
                if b.x_min() < 0.0 || b.y_min() < 0.0 || b.x_max() > w as f64 || b.y_max() > h as f64 {
                    return Err(invalid(format!("entity {i} leaves the frame at frame {f}")));
                }
            }
        }
        Ok(())
    }

    /// Ground truth at `frame` (cars, persons and fires only).
    pub fn truth_at(&self, frame: u64) -> GroundTruthFrame {
        let objects = self
            .entities
            .iter()
            .filter(|e| e.is_visible(frame))
            .filter_map(|e| {
                e.truth_class().map(|c| TruthObject {
                    bbox: e.box_at(frame),
                    object_class: c,
                })
            })
            .collect();
        GroundTruthFrame::new(self.channel_id.clone(), frame, objects).expect("truth holds positive classes only")
    }

    /// Whether any artifact that imitates `class` is visible at `frame`.
    pub fn artifact_visible(&self, frame: u64, class: ObjectClass) -> bool {
        self.entities.iter().any(|e| {
            e.is_visible(frame)
                && matches!(
                    (e, class),
                    (Entity::GlareArtifact { .. }, ObjectClass::Fire) | (Entity::DarkSmear { .. }, ObjectClass::Person)
                )
        })
    }

    pub fn image_ref(&self, frame: u64) -> String {
        format!("{}/{}", self.channel_id, frame)
    }
}

/// Intensities of the rendered scene.
mod look {
    pub const BACKGROUND: f64 = 72.0;
    pub const BACKGROUND_RAMP: f64 = 16.0;
    pub const NOISE: f64 = 4.0;
    pub const CAR: u8 = 150;
    pub const PERSON: f64 = 32.0;
    pub const FIRE: f64 = 215.0;
    pub const FIRE_STREAK: f64 = 7.0;
    pub const FIRE_FLICKER: f64 = 8.0;
    pub const GLARE_PEAK: f64 = 260.0;
    pub const SMEAR: f64 = 44.0;
    pub const SMEAR_BAND: f64 = 14.0;
}

/// Renders a validated spec frame by frame.
pub struct ScenarioFrames<'a> {
    spec: &'a ScenarioSpec,
    rng: ChaCha8Rng,
    next: u64,
}

impl<'a> ScenarioFrames<'a> {
    pub fn new(spec: &'a ScenarioSpec) -> Result<Self, SimulationError> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            next: 0,
        })
    }

    fn render(&mut self, frame: u64) -> Raster {
        let (w, h) = (self.spec.frame_size.0 as usize, self.spec.frame_size.1 as usize);
        let mut r = Raster::new(w, h, 0);
        let mut field = vec![0.0f64; w * h];
        for y in 0..h {
            let base = look::BACKGROUND + look::BACKGROUND_RAMP * y as f64 / h as f64;
            field[y * w..(y + 1) * w].fill(base);
        }

        // painter's order: cars, smears, persons, fires, glare
        let order = |e: &Entity| match e {
            Entity::Car { .. } => 0,
            Entity::DarkSmear { .. } => 1,
            Entity::Person { .. } => 2,
            Entity::Fire { .. } => 3,
            Entity::GlareArtifact { .. } => 4,
        };
        let mut visible: Vec<&Entity> = self.spec.entities.iter().filter(|e| e.is_visible(frame)).collect();
        visible.sort_by_key(|e| order(e));

        for e in visible {
            let b = e.box_at(frame);
            let (x0, y0, x1, y1) = r.span(&b);
            match e {
                Entity::Car { intensity, .. } => {
                    let v = intensity.unwrap_or(look::CAR) as f64;
                    for y in y0..y1 {
                        field[y * w + x0..y * w + x1].fill(v);
                    }
                }
                Entity::Person { .. } => {
                    for y in y0..y1 {
                        field[y * w + x0..y * w + x1].fill(look::PERSON);
                    }
                }
                Entity::DarkSmear { surface, .. } => {
                    // rows on a car body, columns on the road
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let band = match surface {
                                SmearSurface::Car => (y - y0) % 2 == 1,
                                SmearSurface::Lane => (x - x0) % 2 == 1,
                            };
                            field[y * w + x] = look::SMEAR + if band { look::SMEAR_BAND } else { 0.0 };
                        }
                    }
                }
                Entity::Fire { .. } => {
                    let phase = self.rng.gen_range(0..3usize);
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let streak = if (x + phase) % 3 == 0 {
                                -look::FIRE_STREAK
                            } else {
                                look::FIRE_STREAK / 2.0
                            };
                            let flicker = self.rng.gen_range(-look::FIRE_FLICKER..=look::FIRE_FLICKER);
                            field[y * w + x] = look::FIRE + streak + flicker;
                        }
                    }
                }
                Entity::GlareArtifact { .. } => {
                    let (cx, cy) = b.center();
                    let (sx, sy) = (b.width() / 3.0, b.height() / 2.5);
                    // the blob spills past its nominal box
                    let halo = BoundingBox::new(b.x_min() - sx, b.y_min() - sy, b.x_max() + sx, b.y_max() + sy)
                        .expect("finite box");
                    let (hx0, hy0, hx1, hy1) = r.span(&halo);
                    for y in hy0..hy1 {
                        for x in hx0..hx1 {
                            let dx = (x as f64 + 0.5 - cx) / sx;
                            let dy = (y as f64 + 0.5 - cy) / sy;
                            let g = look::GLARE_PEAK * (-(dx * dx + dy * dy) / 2.0).exp();
                            field[y * w + x] += g;
                        }
                    }
                }
            }
        }

        for (i, v) in field.iter().enumerate() {
            let n = self.rng.gen_range(-look::NOISE..=look::NOISE);
            r.pixels[i] = (v + n).round().clamp(0.0, 255.0) as u8;
        }
        r
    }
}

impl Iterator for ScenarioFrames<'_> {
    type Item = (u64, Raster, GroundTruthFrame);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.spec.frames {
            return None;
        }
        let f = self.next;
        self.next += 1;
        let raster = self.render(f);
        Some((f, raster, self.spec.truth_at(f)))
    }
}

/// Renders every frame of a scenario with its ground truth.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(Vec<Raster>, Vec<GroundTruthFrame>), SimulationError> {
    let mut frames = Vec::with_capacity(spec.frames as usize);
    let mut truth = Vec::with_capacity(spec.frames as usize);
    for (_, r, t) in ScenarioFrames::new(spec)? {
        frames.push(r);
        truth.push(t);
    }
    Ok((frames, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn at(b: BoundingBox, vx: f64) -> Placement {
        Placement {
            bbox: b,
            velocity: [vx, 0.0],
            visible: None,
        }
    }

    fn spec(entities: Vec<Entity>, seed: u64) -> ScenarioSpec {
        ScenarioSpec {
            channel_id: "cam".into(),
            frames: 20,
            frame_size: DEFAULT_FRAME_SIZE,
            entities,
            seed,
        }
    }

    fn car(vx: f64, motion: Motion) -> Entity {
        Entity::Car {
            at: at(bb(20.0, 40.0, 48.0, 56.0), vx),
            motion,
            intensity: None,
        }
    }

    fn mean_in(r: &Raster, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let mut s = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                s += r.get(x, y) as f64;
            }
        }
        s / ((x1 - x0) * (y1 - y0)) as f64
    }

    #[test]
    fn same_seed_same_pixels() {
        let s = spec(vec![car(1.0, Motion::Linear)], 5);
        let (a, ta) = generate_scenario(&s).unwrap();
        let (b, tb) = generate_scenario(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate_scenario(&spec(vec![car(1.0, Motion::Linear)], 6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frames_iterator_matches_batch() {
        let s = spec(vec![car(0.5, Motion::Linear)], 1);
        let (frames, truth) = generate_scenario(&s).unwrap();
        for (f, r, t) in ScenarioFrames::new(&s).unwrap() {
            assert_eq!(r, frames[f as usize]);
            assert_eq!(t, truth[f as usize]);
        }
    }

    #[test]
    fn objects_render_against_background() {
        let s = spec(
            vec![
                car(0.0, Motion::Linear),
                Entity::Person {
                    at: at(bb(100.0, 60.0, 106.0, 73.0), 0.0),
                },
            ],
            2,
        );
        let (frames, _) = generate_scenario(&s).unwrap();
        let r = &frames[0];
        let bg = mean_in(r, 60, 80, 90, 100);
        assert!(mean_in(r, 21, 41, 47, 55) > bg + 50.0);
        assert!(mean_in(r, 101, 61, 105, 72) < bg - 25.0);
    }

    #[test]
    fn artifacts_carry_no_truth() {
        let glare = Entity::GlareArtifact {
            at: Placement {
                bbox: bb(40.0, 6.0, 62.0, 20.0),
                velocity: [0.0, 0.0],
                visible: Some([5, 10]),
            },
        };
        let smear = Entity::DarkSmear {
            at: at(bb(80.0, 60.0, 85.0, 72.0), 0.0),
            surface: SmearSurface::Lane,
        };
        let s = spec(vec![glare, smear], 3);
        let (_, truth) = generate_scenario(&s).unwrap();
        assert!(truth.iter().all(|t| t.objects().is_empty()));
        assert!(!s.artifact_visible(4, ObjectClass::Fire));
        assert!(s.artifact_visible(5, ObjectClass::Fire));
        assert!(s.artifact_visible(9, ObjectClass::Fire));
        assert!(!s.artifact_visible(10, ObjectClass::Fire));
        assert!(s.artifact_visible(0, ObjectClass::Person));
        assert!(!s.artifact_visible(0, ObjectClass::Car));
    }

    #[test]
    fn truth_follows_motion() {
        let s = spec(
            vec![
                car(1.0, Motion::Stop { at: 5 }),
                Entity::Car {
                    at: at(bb(90.0, 70.0, 118.0, 86.0), 1.0),
                    motion: Motion::Reverse { at: 4 },
                    intensity: Some(140),
                },
            ],
            4,
        );
        let stop = |f| s.truth_at(f).objects()[0].bbox.x_min();
        assert_eq!(stop(3), 23.0);
        assert_eq!(stop(5), 25.0);
        assert_eq!(stop(15), 25.0);
        let rev = |f| s.truth_at(f).objects()[1].bbox.x_min();
        assert_eq!(rev(4), 94.0);
        assert_eq!(rev(6), 92.0);
        assert_eq!(s.truth_at(0).objects()[0].object_class, ObjectClass::Car);
    }

    #[test]
    fn rejects_entities_leaving_the_frame() {
        let s = spec(vec![car(10.0, Motion::Linear)], 0);
        assert!(matches!(s.validate(), Err(SimulationError::InvalidSpec { .. })));
        assert!(generate_scenario(&s).is_err());
        let hidden = Entity::Car {
            at: Placement {
                bbox: bb(20.0, 40.0, 48.0, 56.0),
                velocity: [10.0, 0.0],
                visible: Some([0, 5]),
            },
            motion: Motion::Linear,
            intensity: None,
        };
        spec(vec![hidden], 0).validate().unwrap();
    }

    #[test]
    fn rejects_malformed_specs() {
        let mut s = spec(vec![], 0);
        s.channel_id = "a/b".into();
        assert!(s.validate().is_err());
        let mut s = spec(vec![], 0);
        s.frames = 0;
        assert!(s.validate().is_err());
        let mut s = spec(vec![], 0);
        s.frame_size = (8, 120);
        assert!(s.validate().is_err());
        let tiny = Entity::Person {
            at: at(bb(10.0, 10.0, 11.0, 20.0), 0.0),
        };
        assert!(spec(vec![tiny], 0).validate().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(
            vec![
                car(0.5, Motion::Reverse { at: 7 }),
                Entity::DarkSmear {
                    at: at(bb(30.0, 42.0, 35.0, 54.0), 0.5),
                    surface: SmearSurface::Car,
                },
            ],
            9,
        );
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&text).unwrap(), s);

        let minimal = r#"{"channel_id":"c1","frames":3,"seed":1,
            "entities":[{"kind":"fire","box":[10,10,30,26],"velocity":[0,0]}]}"#;
        let parsed: ScenarioSpec = serde_json::from_str(minimal).unwrap();
        assert_eq!(parsed.frame_size, DEFAULT_FRAME_SIZE);
        assert_eq!(parsed.truth_at(0).objects()[0].object_class, ObjectClass::Fire);
    }

    #[test]
    fn image_refs_name_channel_and_frame() {
        assert_eq!(spec(vec![], 0).image_ref(12), "cam/12");
    }
}

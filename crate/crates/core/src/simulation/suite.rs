//! Seeded families of clips for the closed-loop experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{Entity, Motion, Placement, ScenarioSpec, SmearSurface, DEFAULT_FRAME_SIZE};
use crate::geometry::BoundingBox;

/// Clips grouped by role in the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSuite {
    /// Fully labeled clips without artifacts; round 0 trains on these.
    pub train: Vec<ScenarioSpec>,
    /// Field clips per retraining round, reused cyclically.
    pub field: Vec<Vec<ScenarioSpec>>,
    /// Held-out labeled clips for AP; may contain artifacts.
    pub held_out: Vec<ScenarioSpec>,
    /// Held-out artifact clips without persons or fires, one group per
    /// simulated day.
    pub held_out_fp: Vec<Vec<ScenarioSpec>>,
}

const LANE_CENTERS: [f64; 3] = [44.0, 68.0, 92.0];
const WALKWAY: (f64, f64) = (103.0, 119.0);
const PORTAL: (f64, f64) = (2.0, 24.0);

fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, x + w, y + h).expect("finite box")
}

fn still(b: BoundingBox) -> Placement {
    Placement {
        bbox: b,
        velocity: [0.0, 0.0],
        visible: None,
    }
}

struct Builder {
    rng: ChaCha8Rng,
    frames: u64,
    width: f64,
}

impl Builder {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.gen_range(lo..hi)
    }

    fn int(&mut self, lo: u32, hi: u32) -> f64 {
        self.rng.gen_range(lo..=hi) as f64
    }

    /// A car driving right along `lane`; stays inside the frame.
    fn car(&mut self, lane: usize) -> (Entity, BoundingBox, [f64; 2]) {
        let (w, h) = (self.int(24, 32), self.int(14, 18));
        let vx = self.uniform(0.2, 0.5);
        let travel = vx * self.frames as f64;
        let x = self.uniform(1.0, (self.width - w - travel - 1.0).max(1.5));
        let y = (LANE_CENTERS[lane] - h / 2.0).round();
        let b = bx(x.round(), y, w, h);
        let intensity = self.rng.gen_range(135..=165u8);
        let car = Entity::Car {
            at: Placement {
                bbox: b,
                velocity: [vx, 0.0],
                visible: None,
            },
            motion: Motion::Linear,
            intensity: Some(intensity),
        };
        (car, b, [vx, 0.0])
    }

    fn person_size(&mut self) -> (f64, f64) {
        (self.int(4, 6), self.int(11, 14))
    }

    /// Standing spot in the free lane or on the walkway, away from `taken`.
    fn spot(&mut self, w: f64, h: f64, free_lane: usize, taken: &mut Vec<BoundingBox>) -> BoundingBox {
        for _ in 0..200 {
            let fits_walkway = h < WALKWAY.1 - WALKWAY.0;
            let y = if !fits_walkway || self.rng.gen_bool(0.5) {
                (LANE_CENTERS[free_lane] - h / 2.0).round()
            } else {
                self.uniform(WALKWAY.0, WALKWAY.1 - h).round()
            };
            let x = self.uniform(4.0, self.width - w - 4.0).round();
            let b = bx(x, y, w, h);
            let padded = bx(x - 8.0, y - 6.0, w + 16.0, h + 12.0);
            if taken.iter().all(|t| padded.intersection_area(t) == 0.0) {
                taken.push(b);
                return b;
            }
        }
        let b = bx(4.0, WALKWAY.0, w, h);
        taken.push(b);
        b
    }

    fn person(&mut self, free_lane: usize, taken: &mut Vec<BoundingBox>) -> Entity {
        let (w, h) = self.person_size();
        let b = self.spot(w, h, free_lane, taken);
        Entity::Person { at: still(b) }
    }

    fn fire(&mut self, free_lane: usize, taken: &mut Vec<BoundingBox>) -> Entity {
        let (w, h) = (self.int(18, 24), self.int(14, 18));
        let b = self.spot(w, h, free_lane, taken);
        Entity::Fire { at: still(b) }
    }

    fn lane_smear(&mut self, free_lane: usize, taken: &mut Vec<BoundingBox>) -> Entity {
        let (w, h) = self.person_size();
        let b = self.spot(w, h, free_lane, taken);
        Entity::DarkSmear {
            at: still(b),
            surface: SmearSurface::Lane,
        }
    }

    /// Dark patch riding on the car `car`.
    fn car_smear(&mut self, car: BoundingBox, v: [f64; 2]) -> Entity {
        let w = self.int(4, 6);
        let h = (car.height() - 3.0).min(self.int(11, 13));
        let x = car.x_min() + self.uniform(3.0, car.width() - w - 3.0).round();
        let y = car.y_min() + ((car.height() - h) / 2.0).floor();
        Entity::DarkSmear {
            at: Placement {
                bbox: bx(x, y, w, h),
                velocity: v,
                visible: None,
            },
            surface: SmearSurface::Car,
        }
    }

    /// Light blob at the portal, visible during `[from, to)`.
    fn glare(&mut self, from: u64, to: u64) -> Entity {
        let (w, h) = (self.int(18, 24), self.int(12, 15));
        let x = self.uniform(12.0, self.width - w - 12.0).round();
        let y = self.uniform(PORTAL.0 + 4.0, PORTAL.1 - h).round();
        Entity::GlareArtifact {
            at: Placement {
                bbox: bx(x, y, w, h),
                velocity: [0.0, 0.0],
                visible: Some([from, to]),
            },
        }
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Train,
    HeldOut,
    FieldCarSmear,
    FieldLaneSmear,
    HeldOutFp,
}

fn clip(channel: String, seed: u64, kind: Kind) -> ScenarioSpec {
    let frames = match kind {
        Kind::Train | Kind::HeldOut => 120,
        Kind::FieldCarSmear | Kind::FieldLaneSmear => 40,
        Kind::HeldOutFp => 90,
    };
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        frames,
        width: DEFAULT_FRAME_SIZE.0 as f64,
    };
    let free_lane = b.rng.gen_range(0..3usize);
    let lanes: Vec<usize> = (0..3).filter(|&l| l != free_lane).collect();
    let mut entities = Vec::new();
    let mut cars = Vec::new();
    for &lane in &lanes {
        let (car, bbox, v) = b.car(lane);
        entities.push(car);
        cars.push((bbox, v));
    }
    let mut taken: Vec<BoundingBox> = Vec::new();

    match kind {
        Kind::Train | Kind::HeldOut => {
            let persons = b.rng.gen_range(1..=2);
            for _ in 0..persons {
                let p = b.person(free_lane, &mut taken);
                entities.push(p);
            }
            if b.rng.gen_bool(0.6) {
                let f = b.fire(free_lane, &mut taken);
                entities.push(f);
            }
            if matches!(kind, Kind::HeldOut) {
                if b.rng.gen_bool(0.5) {
                    let (car, v) = cars[0];
                    entities.push(b.car_smear(car, v));
                }
                if b.rng.gen_bool(0.5) {
                    let s = b.lane_smear(free_lane, &mut taken);
                    entities.push(s);
                }
                if b.rng.gen_bool(0.5) {
                    entities.push(b.glare(20, 100));
                }
            }
        }
        Kind::FieldCarSmear => {
            for &(car, v) in &cars {
                entities.push(b.car_smear(car, v));
            }
            entities.push(b.glare(5, 35));
        }
        Kind::FieldLaneSmear => {
            let n = b.rng.gen_range(1..=2);
            for _ in 0..n {
                let s = b.lane_smear(free_lane, &mut taken);
                entities.push(s);
            }
            entities.push(b.glare(5, 35));
        }
        Kind::HeldOutFp => {
            let (car_smear, lane_smear) = match b.rng.gen_range(0..3) {
                0 => (true, false),
                1 => (false, true),
                _ => (true, true),
            };
            if car_smear {
                let (car, v) = cars[0];
                entities.push(b.car_smear(car, v));
            }
            if lane_smear {
                let s = b.lane_smear(free_lane, &mut taken);
                entities.push(s);
            }
            entities.push(b.glare(10, 40));
            entities.push(b.glare(55, 85));
        }
    }

    ScenarioSpec {
        channel_id: channel,
        frames,
        frame_size: DEFAULT_FRAME_SIZE,
        entities,
        seed,
    }
}

impl ScenarioSuite {
    /// The default experiment: 10 training clips, two field rounds (car-body
    /// smears, then lane smears; glare in both), 8 held-out labeled clips and
    /// 4 held-out days of 8 artifact clips each.
    pub fn standard(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || master.gen::<u64>();
        let train = (0..10)
            .map(|i| clip(format!("train-{i}"), next(), Kind::Train))
            .collect();
        let field = vec![
            (0..24)
                .map(|i| clip(format!("field-a-{i}"), next(), Kind::FieldCarSmear))
                .collect(),
            (0..24)
                .map(|i| clip(format!("field-b-{i}"), next(), Kind::FieldLaneSmear))
                .collect(),
        ];
        let held_out = (0..8)
            .map(|i| clip(format!("heldout-{i}"), next(), Kind::HeldOut))
            .collect();
        let held_out_fp = (0..4)
            .map(|d| {
                (0..8)
                    .map(|i| clip(format!("day{d}-cam{i}"), next(), Kind::HeldOutFp))
                    .collect()
            })
            .collect();
        Self {
            train,
            field,
            held_out,
            held_out_fp,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::ObjectClass;

    #[test]
    fn standard_suite_is_seeded_and_valid() {
        let a = ScenarioSuite::standard(11);
        assert_eq!(a, ScenarioSuite::standard(11));
        assert_ne!(a, ScenarioSuite::standard(12));
        assert_eq!(a.train.len(), 10);
        assert_eq!(a.field.len(), 2);
        assert_eq!(a.held_out.len(), 8);
        assert_eq!(a.held_out_fp.len(), 4);
        let all = a
            .train
            .iter()
            .chain(a.field.iter().flatten())
            .chain(&a.held_out)
            .chain(a.held_out_fp.iter().flatten());
        let mut channels = std::collections::BTreeSet::new();
        for s in all {
            s.validate().unwrap();
            assert!(
                channels.insert(s.channel_id.clone()),
                "duplicate channel {}",
                s.channel_id
            );
        }
    }

    #[test]
    fn artifact_clips_hold_no_person_or_fire() {
        let s = ScenarioSuite::standard(5);
        for spec in s.field.iter().flatten().chain(s.held_out_fp.iter().flatten()) {
            for f in 0..spec.frames {
                let t = spec.truth_at(f);
                assert_eq!(t.count(ObjectClass::Person) + t.count(ObjectClass::Fire), 0);
            }
            assert!((0..spec.frames).any(|f| spec.artifact_visible(f, ObjectClass::Fire)));
            assert!((0..spec.frames).any(|f| spec.artifact_visible(f, ObjectClass::Person)));
        }
        for spec in &s.train {
            assert!(!spec.entities.iter().any(|e| e.truth_class().is_none()));
            assert!(spec.truth_at(0).count(ObjectClass::Person) >= 1);
        }
    }
}

//! Detector output as consumed by every downstream stage.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

/// Detector classes. `FalseFire` and `FalsePerson` are negative classes:
/// trained from field false positives so the detector absorbs them instead
/// of raising an alarm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Person,
    Fire,
    FalseFire,
    FalsePerson,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Car,
        ObjectClass::Person,
        ObjectClass::Fire,
        ObjectClass::FalseFire,
        ObjectClass::FalsePerson,
    ];

    pub const POSITIVE: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Person, ObjectClass::Fire];

    pub fn is_negative(self) -> bool {
        matches!(self, ObjectClass::FalseFire | ObjectClass::FalsePerson)
    }

    /// The negative class paired with an alarming positive class.
    pub fn negative_counterpart(self) -> Option<ObjectClass> {
        match self {
            ObjectClass::Fire => Some(ObjectClass::FalseFire),
            ObjectClass::Person => Some(ObjectClass::FalsePerson),
            _ => None,
        }
    }

    /// The positive class a negative class stands in for.
    pub fn positive_counterpart(self) -> Option<ObjectClass> {
        match self {
            ObjectClass::FalseFire => Some(ObjectClass::Fire),
            ObjectClass::FalsePerson => Some(ObjectClass::Person),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Person => "person",
            ObjectClass::Fire => "fire",
            ObjectClass::FalseFire => "false_fire",
            ObjectClass::FalsePerson => "false_person",
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown object class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for ObjectClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("confidence must lie in [0, 1], got {0}")]
pub struct InvalidConfidence(pub f64);

/// One detector output box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub object_class: ObjectClass,
    pub confidence: f64,
    pub frame_index: u64,
    pub channel_id: String,
}

impl Detection {
    pub fn new(
        bbox: BoundingBox,
        object_class: ObjectClass,
        confidence: f64,
        frame_index: u64,
        channel_id: impl Into<String>,
    ) -> Result<Self, InvalidConfidence> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(InvalidConfidence(confidence));
        }
        Ok(Self {
            bbox,
            object_class,
            confidence,
            frame_index,
            channel_id: channel_id.into(),
        })
    }
}

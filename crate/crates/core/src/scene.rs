//! User-editable scene: geometry objects in the unit domain plus flow
//! parameters and the refinement plan.
//!
//! JSON layout:
//! ```json
//! {
//!   "objects": [{"id": "c1", "shape": "circle", "center": [0.5, 0.5], "size": 0.1, "kind": "obstacle"}],
//!   "params": {"tau": 0.8, "inflow_velocity": [0.05, 0.0]},
//!   "plan": {"base_resolution": [48, 48], "max_level": 2},
//!   "boundary": "channel"
//! }
//! ```

use crate::hierarchy::LevelPlan;
use crate::lattice::FluidParams;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("unknown object id {0:?}")]
    UnknownId(String),
    #[error("duplicate object id {0:?}")]
    DuplicateId(String),
    #[error("invalid geometry for {id:?}: {reason}")]
    InvalidGeometry { id: String, reason: String },
    #[error("invalid scene file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Inflow on the left column, outflow on the right, walls top and bottom.
    #[default]
    Channel,
    /// Periodic in x with walls top and bottom (body-force channel).
    PeriodicX,
    /// Fully periodic, no boundary cells.
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Obstacle,
    Manikin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Circle { radius: f64 },
    Rect { width: f64, height: f64 },
}

impl Shape {
    pub fn is_positive(&self) -> bool {
        match *self {
            Shape::Circle { radius } => radius > 0.0 && radius.is_finite(),
            Shape::Rect { width, height } => {
                width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()
            }
        }
    }

    fn scaled(self, factor: f64) -> Self {
        match self {
            Shape::Circle { radius } => Shape::Circle {
                radius: radius * factor,
            },
            Shape::Rect { width, height } => Shape::Rect {
                width: width * factor,
                height: height * factor,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawObject", into = "RawObject")]
pub struct SceneObject {
    pub id: String,
    pub shape: Shape,
    pub center: [f64; 2],
    pub kind: ObjectKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawObject {
    id: String,
    shape: ShapeName,
    center: [f64; 2],
    size: RawSize,
    #[serde(default = "default_kind")]
    kind: ObjectKind,
}

fn default_kind() -> ObjectKind {
    ObjectKind::Obstacle
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ShapeName {
    Circle,
    Rect,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
enum RawSize {
    Radius(f64),
    Extent([f64; 2]),
}

impl TryFrom<RawObject> for SceneObject {
    type Error = SceneError;

    fn try_from(raw: RawObject) -> Result<Self, Self::Error> {
        let shape = match (raw.shape, raw.size) {
            (ShapeName::Circle, RawSize::Radius(radius)) => Shape::Circle { radius },
            (ShapeName::Rect, RawSize::Extent([width, height])) => Shape::Rect { width, height },
            (ShapeName::Circle, _) => {
                return Err(SceneError::Parse(format!("circle {:?} needs a scalar radius", raw.id)))
            }
            (ShapeName::Rect, _) => {
                return Err(SceneError::Parse(format!("rect {:?} needs a [w, h] size", raw.id)))
            }
        };
        Ok(SceneObject {
            id: raw.id,
            shape,
            center: raw.center,
            kind: raw.kind,
        })
    }
}

impl From<SceneObject> for RawObject {
    fn from(obj: SceneObject) -> Self {
        let (shape, size) = match obj.shape {
            Shape::Circle { radius } => (ShapeName::Circle, RawSize::Radius(radius)),
            Shape::Rect { width, height } => (ShapeName::Rect, RawSize::Extent([width, height])),
        };
        RawObject {
            id: obj.id,
            shape,
            center: obj.center,
            size,
            kind: obj.kind,
        }
    }
}

impl SceneObject {
    pub fn circle(id: &str, center: [f64; 2], radius: f64) -> Self {
        Self {
            id: id.to_string(),
            shape: Shape::Circle { radius },
            center,
            kind: ObjectKind::Obstacle,
        }
    }

    pub fn rect(id: &str, center: [f64; 2], size: [f64; 2]) -> Self {
        Self {
            id: id.to_string(),
            shape: Shape::Rect {
                width: size[0],
                height: size[1],
            },
            center,
            kind: ObjectKind::Obstacle,
        }
    }

    pub fn manikin(mut self) -> Self {
        self.kind = ObjectKind::Manikin;
        self
    }

    fn validate(&self) -> Result<(), SceneError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.center.iter().all(|&v| in_unit(v)) {
            return Err(SceneError::InvalidGeometry {
                id: self.id.clone(),
                reason: format!("center {:?} outside the unit domain", self.center),
            });
        }
        if !self.shape.is_positive() {
            return Err(SceneError::InvalidGeometry {
                id: self.id.clone(),
                reason: "non-positive size".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub params: FluidParams,
    #[serde(default)]
    pub plan: LevelPlan,
    #[serde(default)]
    pub boundary: BoundaryMode,
}

impl Default for Scene {
    fn default() -> Self {
        Self {
            objects: Vec::new(),
            params: FluidParams::default(),
            plan: LevelPlan::default(),
            boundary: BoundaryMode::Channel,
        }
    }
}

impl Scene {
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SceneError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, obj) in self.objects.iter().enumerate() {
            obj.validate()?;
            if self.objects[..i].iter().any(|o| o.id == obj.id) {
                return Err(SceneError::DuplicateId(obj.id.clone()));
            }
        }
        self.plan
            .validate()
            .map_err(|e| SceneError::Parse(e.to_string()))
    }

    pub fn has_manikin(&self) -> bool {
        self.objects.iter().any(|o| o.kind == ObjectKind::Manikin)
    }

    fn find_mut(&mut self, id: &str) -> Result<&mut SceneObject, SceneError> {
        self.objects
            .iter_mut()
            .find(|o| o.id == id)
            .ok_or_else(|| SceneError::UnknownId(id.to_string()))
    }

    pub fn add(&mut self, obj: SceneObject) -> Result<(), SceneError> {
        obj.validate()?;
        if self.objects.iter().any(|o| o.id == obj.id) {
            return Err(SceneError::DuplicateId(obj.id));
        }
        self.objects.push(obj);
        Ok(())
    }

    pub fn delete(&mut self, id: &str) -> Result<SceneObject, SceneError> {
        let pos = self
            .objects
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| SceneError::UnknownId(id.to_string()))?;
        Ok(self.objects.remove(pos))
    }

    pub fn move_to(&mut self, id: &str, center: [f64; 2]) -> Result<(), SceneError> {
        let obj = self.find_mut(id)?;
        let mut moved = obj.clone();
        moved.center = center;
        moved.validate()?;
        *obj = moved;
        Ok(())
    }

    pub fn scale(&mut self, id: &str, factor: f64) -> Result<(), SceneError> {
        let obj = self.find_mut(id)?;
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(SceneError::InvalidGeometry {
                id: id.to_string(),
                reason: format!("scale factor {factor} must be positive"),
            });
        }
        let mut scaled = obj.clone();
        scaled.shape = scaled.shape.scaled(factor);
        scaled.validate()?;
        *obj = scaled;
        Ok(())
    }
}

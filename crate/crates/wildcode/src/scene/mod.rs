//! The graphics-code scene DSL: typed programs, a line-oriented parser, a
//! canonical emitter, validation diagnostics, and saliency ordering.
//!
//! A program is eleven scene-attribute setters in fixed order followed by up
//! to twenty-five `add(...)` object statements. Rotation and appearance
//! values never appear as text; the literals `[ROT]` and `[CLIP]` mark slots
//! whose continuous payloads travel out of band (see [`crate::codec`]).
//! The grammar is documented in `docs/grammar.md`.

mod emit;
mod parse;

pub use emit::{emit_program, format_float3};
pub use parse::{parse_program, parse_program_with, ParseError, ParseErrorKind, ParseOptions, PixelsMode};

use crate::rot::Rotation;
use serde::{Deserialize, Serialize};

/// Hard cap on `add` statements per program.
pub const MAX_OBJECTS: usize = 25;

/// The eleven setters in their mandatory emission order.
pub const SETTER_NAMES: [&str; 11] = [
    "set_sun_intensity",
    "set_sun_elevation",
    "set_sun_size",
    "set_camera",
    "set_atmospheric_density",
    "set_ozone",
    "set_sun_rotation",
    "set_dust",
    "set_sun_strength",
    "set_air",
    "set_ground",
];

/// Names of the ten numeric scene attributes, in setter order.
pub const NUMERIC_ATTR_NAMES: [&str; 10] = [
    "sun_intensity",
    "sun_elevation",
    "sun_size",
    "camera",
    "atmospheric_density",
    "ozone",
    "sun_rotation",
    "dust",
    "sun_strength",
    "air",
];

/// An appearance value: a slot marker, a resolved embedding vector, or an
/// integer name (the discrete-name grammar profile).
#[derive(Debug, Clone, PartialEq, Default)]
pub enum EmbeddingSlot {
    /// The `[CLIP]` literal: payload not attached.
    #[default]
    Unresolved,
    /// A concrete embedding vector. Emits as `[CLIP]`; the vector itself is
    /// carried by the token stream, never by program text.
    Resolved(Vec<f32>),
    /// An integer asset/scene name, written directly into the text.
    Named(u32),
}

impl EmbeddingSlot {
    pub fn resolved(&self) -> Option<&[f32]> {
        match self {
            EmbeddingSlot::Resolved(v) => Some(v),
            _ => None,
        }
    }
}

/// A rotation value: the `[ROT]` slot marker or a concrete rotation.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum RotationSlot {
    #[default]
    Unresolved,
    Resolved(Rotation),
}

impl RotationSlot {
    pub fn resolved(&self) -> Option<&Rotation> {
        match self {
            RotationSlot::Resolved(r) => Some(r),
            RotationSlot::Unresolved => None,
        }
    }
}

/// Scene-level attributes, one per setter line.
///
/// `camera`, `sun_elevation`, and `sun_rotation` are carried as emitted; the
/// format does not define their units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAttributes {
    pub sun_intensity: f64,
    pub sun_elevation: f64,
    pub sun_size: f64,
    pub camera: f64,
    pub atmospheric_density: f64,
    pub ozone: f64,
    pub sun_rotation: f64,
    pub dust: f64,
    pub sun_strength: f64,
    pub air: f64,
    #[serde(skip)]
    pub ground: EmbeddingSlot,
}

impl SceneAttributes {
    /// The ten numeric attributes in setter order.
    pub fn numeric_values(&self) -> [f64; 10] {
        [
            self.sun_intensity,
            self.sun_elevation,
            self.sun_size,
            self.camera,
            self.atmospheric_density,
            self.ozone,
            self.sun_rotation,
            self.dust,
            self.sun_strength,
            self.air,
        ]
    }

    /// Replaces the ten numeric attributes, keeping the ground slot.
    pub fn with_numeric_values(&self, v: [f64; 10]) -> SceneAttributes {
        SceneAttributes {
            sun_intensity: v[0],
            sun_elevation: v[1],
            sun_size: v[2],
            camera: v[3],
            atmospheric_density: v[4],
            ozone: v[5],
            sun_rotation: v[6],
            dust: v[7],
            sun_strength: v[8],
            air: v[9],
            ground: self.ground.clone(),
        }
    }
}

impl Default for SceneAttributes {
    fn default() -> Self {
        SceneAttributes {
            sun_intensity: 0.0,
            sun_elevation: 0.0,
            sun_size: 0.0,
            camera: 0.0,
            atmospheric_density: 0.0,
            ozone: 0.0,
            sun_rotation: 0.0,
            dust: 0.0,
            sun_strength: 0.0,
            air: 0.0,
            ground: EmbeddingSlot::Unresolved,
        }
    }
}

/// One `add(...)` statement: an object instance as seen from the camera.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectRecord {
    /// Visible pixel count; `None` under the no-conditioning grammar profile.
    pub pixels: Option<u32>,
    /// Camera-frame location in meters.
    pub loc: [f64; 3],
    /// Object height in meters.
    pub height: f64,
    pub rotation: RotationSlot,
    pub appearance: EmbeddingSlot,
}

/// A full scene program: attributes plus saliency-ordered object records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneProgram {
    pub attributes: SceneAttributes,
    pub objects: Vec<ObjectRecord>,
}

/// A named invariant violation reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    /// Dotted path of the offending field, e.g. `objects[3].rotation`.
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn diag(field: impl Into<String>, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        field: field.into(),
        message: message.into(),
    }
}

/// Checks every type invariant, returning one diagnostic per violation.
/// An empty list means the program is valid.
pub fn validate(p: &SceneProgram) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let attrs = &p.attributes;

    for (name, v) in NUMERIC_ATTR_NAMES.iter().zip(attrs.numeric_values()) {
        if !v.is_finite() {
            out.push(diag(format!("attributes.{name}"), "not finite"));
        }
    }
    if attrs.sun_rotation.is_finite()
        && !(0.0..360.0).contains(&attrs.sun_rotation)
    {
        out.push(diag(
            "attributes.sun_rotation",
            "not normalized to [0, 360)",
        ));
    }
    for (name, v) in [
        ("atmospheric_density", attrs.atmospheric_density),
        ("ozone", attrs.ozone),
        ("dust", attrs.dust),
        ("sun_strength", attrs.sun_strength),
        ("air", attrs.air),
    ] {
        if v < 0.0 {
            out.push(diag(format!("attributes.{name}"), "negative"));
        }
    }

    let mut dims = Vec::new();
    check_slot(&attrs.ground, "attributes.ground", &mut dims, &mut out);

    if p.objects.len() > MAX_OBJECTS {
        out.push(diag(
            "objects",
            format!("{} objects exceed the limit of {MAX_OBJECTS}", p.objects.len()),
        ));
    }

    let mut pixel_presence: Option<bool> = None;
    for (i, obj) in p.objects.iter().enumerate() {
        let path = |f: &str| format!("objects[{i}].{f}");
        if !obj.loc.iter().all(|v| v.is_finite()) {
            out.push(diag(path("loc"), "not finite"));
        }
        if !(obj.height.is_finite() && obj.height > 0.0) {
            out.push(diag(path("height"), "must be finite and > 0"));
        }
        if let RotationSlot::Resolved(r) = &obj.rotation {
            if let Err(e) = Rotation::try_new(*r.matrix(), crate::rot::ROTATION_TOL) {
                out.push(diag(path("rotation"), format!("not in SO(3): {e}")));
            }
        }
        check_slot(&obj.appearance, &path("appearance"), &mut dims, &mut out);

        let has = obj.pixels.is_some();
        match pixel_presence {
            None => pixel_presence = Some(has),
            Some(prev) if prev != has => {
                out.push(diag(path("pixels"), "pixels presence differs across objects"));
                pixel_presence = Some(has);
            }
            _ => {}
        }
    }

    if dims.windows(2).any(|w| w[0] != w[1]) {
        out.push(diag(
            "embedding dimension",
            format!("resolved slots disagree on dimension: {dims:?}"),
        ));
    }

    let counts: Vec<u32> = p.objects.iter().filter_map(|o| o.pixels).collect();
    if counts.len() == p.objects.len() && counts.windows(2).any(|w| w[0] < w[1]) {
        out.push(diag("objects", "not ordered by pixel count descending"));
    }

    out
}

fn check_slot(slot: &EmbeddingSlot, path: &str, dims: &mut Vec<usize>, out: &mut Vec<Diagnostic>) {
    if let EmbeddingSlot::Resolved(v) = slot {
        if !v.iter().all(|x| x.is_finite()) {
            out.push(diag(path, "embedding not finite"));
        }
        dims.push(v.len());
    }
}

/// Stable sort of the object records by pixel count, largest first.
///
/// Records whose pixel count is absent sort as zero. The multiset of records
/// is preserved; equal counts keep their input order.
pub fn order_by_saliency(p: &SceneProgram) -> SceneProgram {
    let mut objects = p.objects.clone();
    objects.sort_by_key(|o| std::cmp::Reverse(o.pixels.unwrap_or(0)));
    SceneProgram {
        attributes: p.attributes.clone(),
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn obj(pixels: u32) -> ObjectRecord {
        ObjectRecord {
            pixels: Some(pixels),
            loc: [0.0, 0.0, -10.0],
            height: 1.0,
            rotation: RotationSlot::Unresolved,
            appearance: EmbeddingSlot::Unresolved,
        }
    }

    fn program(pixel_counts: &[u32]) -> SceneProgram {
        SceneProgram {
            attributes: SceneAttributes {
                sun_intensity: 0.5,
                camera: 88.0,
                ..SceneAttributes::default()
            },
            objects: pixel_counts.iter().copied().map(obj).collect(),
        }
    }

    #[test]
    fn valid_program_has_no_diagnostics() {
        assert!(validate(&program(&[1582, 111])).is_empty());
    }

    #[test]
    fn reflection_rotation_is_flagged() {
        let mut p = program(&[10]);
        let reflection = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, -1.0));
        p.objects[0].rotation =
            RotationSlot::Resolved(Rotation::from_matrix_unchecked(reflection));
        let ds = validate(&p);
        assert!(ds.iter().any(|d| d.field == "objects[0].rotation"));
    }

    #[test]
    fn ascending_pixel_order_is_flagged() {
        let ds = validate(&program(&[111, 1582]));
        assert!(ds.iter().any(|d| d.field == "objects" && d.message.contains("ordered")));
    }

    #[test]
    fn too_many_objects_is_flagged() {
        let p = program(&vec![5; 26]);
        assert!(validate(&p).iter().any(|d| d.message.contains("limit")));
    }

    #[test]
    fn mixed_pixel_presence_is_flagged() {
        let mut p = program(&[50, 40]);
        p.objects[1].pixels = None;
        assert!(validate(&p)
            .iter()
            .any(|d| d.message.contains("presence differs")));
    }

    #[test]
    fn embedding_dimension_mismatch_is_flagged() {
        let mut p = program(&[50, 40]);
        p.attributes.ground = EmbeddingSlot::Resolved(vec![1.0; 8]);
        p.objects[0].appearance = EmbeddingSlot::Resolved(vec![1.0; 4]);
        assert!(validate(&p)
            .iter()
            .any(|d| d.field == "embedding dimension"));
    }

    #[test]
    fn saliency_sort_is_stable_and_idempotent() {
        let mut p = program(&[111, 1582, 111]);
        p.objects[0].height = 1.0;
        p.objects[2].height = 2.0;
        let sorted = order_by_saliency(&p);
        let pix: Vec<u32> = sorted.objects.iter().map(|o| o.pixels.unwrap()).collect();
        assert_eq!(pix, [1582, 111, 111]);
        // Stability: the two 111-pixel records keep their relative order.
        assert_eq!(sorted.objects[1].height, 1.0);
        assert_eq!(sorted.objects[2].height, 2.0);
        assert_eq!(order_by_saliency(&sorted), sorted);
        // Permutation: multiset preserved.
        let mut orig: Vec<u32> = p.objects.iter().map(|o| o.pixels.unwrap()).collect();
        let mut after = pix.clone();
        orig.sort_unstable();
        after.sort_unstable();
        assert_eq!(orig, after);
    }
}

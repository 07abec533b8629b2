//! On-disk data model and load/save operations.
//!
//! Everything the pipeline persists is a JSON document carrying an explicit
//! `"schema": 1` version field: scene manifests, description caches, and
//! match outputs, plus the generic helpers other modules use for their own
//! documents. Loaders validate every invariant and report violations with
//! the path of the offending field; a document either loads completely valid
//! or not at all. Writers go through a temp-file-then-rename step so
//! re-running a command never leaves a partially written file behind.
//!
//! All operations are pure functions over paths; concurrent calls on
//! distinct paths are safe.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs::Attributes;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: malformed document: {source}", path.display())]
    Malformed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("{}: unsupported schema version {found}, expected {SCHEMA_VERSION}", path.display())]
    SchemaVersion { path: PathBuf, found: u32 },
}

impl SceneIoError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        SceneIoError::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Prefix the offending-field path with the file it came from.
    fn in_file(self, path: &Path) -> Self {
        match self {
            SceneIoError::Invalid { field, message } => SceneIoError::Invalid {
                field: format!("{}: {field}", path.display()),
                message,
            },
            other => other,
        }
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

/// Pixel-space bounding box, `(x, y)` top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x <= other.x
            && self.y <= other.y
            && self.right() >= other.right()
            && self.bottom() >= other.bottom()
    }

    /// Intersection-over-union with another box in the same frame.
    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let iy = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn validate(&self, field: &str) -> Result<(), SceneIoError> {
        if !(self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()) {
            return Err(SceneIoError::invalid(
                format!("{field}.bbox"),
                "bbox coordinates must be finite",
            ));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(SceneIoError::invalid(
                format!("{field}.bbox"),
                format!(
                    "bbox width and height must be positive, got {}x{}",
                    self.w, self.h
                ),
            ));
        }
        Ok(())
    }
}

// Serialized as the `[x, y, w, h]` array the manifest schema uses.
impl Serialize for BBox {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        (self.x, self.y, self.w, self.h).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let (x, y, w, h) = <(f64, f64, f64, f64)>::deserialize(deserializer)?;
        Ok(BBox { x, y, w, h })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Thermal,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Thermal => "thermal",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Rgb => f.write_str("rgb"),
            Modality::Thermal => f.write_str("thermal"),
        }
    }
}

/// One detected pedestrian in one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub det_id: String,
    pub modality: Modality,
    pub bbox: BBox,
    /// Detector confidence in `[0, 1]`.
    pub confidence: f64,
    /// Ground-truth identity, present only for synthetic or labeled data.
    pub gt_identity: Option<String>,
}

/// An RGB/thermal image pair with detections per modality and optional
/// ground-truth correspondence. Images are optional: the pipeline runs
/// detection-lists-only, so manifests may omit pixel data entirely.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub scene_id: String,
    pub rgb_image: Option<String>,
    pub thermal_image: Option<String>,
    pub image_size_rgb: (u32, u32),
    pub image_size_thermal: (u32, u32),
    pub rgb_detections: Vec<Detection>,
    pub thermal_detections: Vec<Detection>,
    /// Pairing of rgb/thermal det_ids that share an identity; a partial
    /// bijection (no det_id appears twice).
    pub gt_pairs: Option<Vec<(String, String)>>,
}

impl ScenePair {
    pub fn detections(&self, modality: Modality) -> &[Detection] {
        match modality {
            Modality::Rgb => &self.rgb_detections,
            Modality::Thermal => &self.thermal_detections,
        }
    }

    pub fn image_size(&self, modality: Modality) -> (u32, u32) {
        match modality {
            Modality::Rgb => self.image_size_rgb,
            Modality::Thermal => self.image_size_thermal,
        }
    }

    pub fn find(&self, modality: Modality, det_id: &str) -> Option<&Detection> {
        self.detections(modality)
            .iter()
            .find(|d| d.det_id == det_id)
    }

    pub fn validate(&self) -> Result<(), SceneIoError> {
        if self.scene_id.is_empty() {
            return Err(SceneIoError::invalid("scene_id", "must not be empty"));
        }
        for (field, (w, h)) in [
            ("image_size_rgb", self.image_size_rgb),
            ("image_size_thermal", self.image_size_thermal),
        ] {
            if w == 0 || h == 0 {
                return Err(SceneIoError::invalid(field, "image size must be nonzero"));
            }
        }
        for (field, list, modality) in [
            ("rgb_detections", &self.rgb_detections, Modality::Rgb),
            (
                "thermal_detections",
                &self.thermal_detections,
                Modality::Thermal,
            ),
        ] {
            let mut seen = BTreeSet::new();
            for (i, det) in list.iter().enumerate() {
                let at = format!("{field}[{i}]");
                if det.det_id.is_empty() {
                    return Err(SceneIoError::invalid(
                        format!("{at}.det_id"),
                        "must not be empty",
                    ));
                }
                if det.modality != modality {
                    return Err(SceneIoError::invalid(
                        format!("{at}.modality"),
                        format!("expected {modality}, got {}", det.modality),
                    ));
                }
                if !seen.insert(det.det_id.as_str()) {
                    return Err(SceneIoError::invalid(
                        format!("{at}.det_id"),
                        format!("duplicate det_id `{}`", det.det_id),
                    ));
                }
                det.bbox.validate(&at)?;
                if !det.confidence.is_finite() || !(0.0..=1.0).contains(&det.confidence) {
                    return Err(SceneIoError::invalid(
                        format!("{at}.confidence"),
                        format!("confidence out of range: {}", det.confidence),
                    ));
                }
            }
        }
        if let Some(pairs) = &self.gt_pairs {
            let mut rgb_seen = BTreeSet::new();
            let mut thermal_seen = BTreeSet::new();
            for (i, (r, t)) in pairs.iter().enumerate() {
                let at = format!("gt_pairs[{i}]");
                if self.find(Modality::Rgb, r).is_none() {
                    return Err(SceneIoError::invalid(
                        at,
                        format!("dangling ground-truth reference: no rgb detection `{r}`"),
                    ));
                }
                if self.find(Modality::Thermal, t).is_none() {
                    return Err(SceneIoError::invalid(
                        at,
                        format!("dangling ground-truth reference: no thermal detection `{t}`"),
                    ));
                }
                if !rgb_seen.insert(r.as_str()) {
                    return Err(SceneIoError::invalid(
                        at,
                        format!("rgb det_id `{r}` appears in more than one ground-truth pair"),
                    ));
                }
                if !thermal_seen.insert(t.as_str()) {
                    return Err(SceneIoError::invalid(
                        at,
                        format!("thermal det_id `{t}` appears in more than one ground-truth pair"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Structured textual description of one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceRecord {
    pub det_id: String,
    pub description_text: String,
    #[serde(default)]
    pub attributes: Attributes,
    /// Provider id the record came from, or `"judge"` for debate verdicts.
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_ref: Option<String>,
}

/// One row of a persisted description cache: an [`AppearanceRecord`] plus the
/// modality of the described detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRecord {
    pub det_id: String,
    pub modality: Modality,
    pub provider: String,
    pub description_text: String,
    #[serde(default)]
    pub attributes: Attributes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_ref: Option<String>,
}

impl DescriptionRecord {
    pub fn appearance(&self) -> AppearanceRecord {
        AppearanceRecord {
            det_id: self.det_id.clone(),
            description_text: self.description_text.clone(),
            attributes: self.attributes.clone(),
            provenance: self.provider.clone(),
            transcript_ref: self.transcript_ref.clone(),
        }
    }
}

/// Per-scene cache of all provider descriptions, one record per
/// (detection, provider).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescriptionCache {
    pub scene_id: String,
    pub records: Vec<DescriptionRecord>,
}

impl DescriptionCache {
    pub fn record(&self, det_id: &str, provider: &str) -> Option<&DescriptionRecord> {
        self.records
            .iter()
            .find(|r| r.det_id == det_id && r.provider == provider)
    }

    /// All records for one detection, in cache order.
    pub fn records_for(&self, det_id: &str) -> Vec<&DescriptionRecord> {
        self.records.iter().filter(|r| r.det_id == det_id).collect()
    }

    pub fn validate(&self) -> Result<(), SceneIoError> {
        for (i, rec) in self.records.iter().enumerate() {
            let at = format!("records[{i}]");
            if rec.det_id.is_empty() {
                return Err(SceneIoError::invalid(
                    format!("{at}.det_id"),
                    "must not be empty",
                ));
            }
            if rec.description_text.is_empty() {
                return Err(SceneIoError::invalid(
                    format!("{at}.description_text"),
                    "must not be empty",
                ));
            }
        }
        Ok(())
    }
}

/// RGB-to-thermal identity pairing for one scene, with the matcher's
/// rationale. `pairs` plus the unmatched lists exactly partition each
/// modality's detections.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub scene_id: String,
    pub pairs: Vec<(String, String)>,
    pub rationale: String,
    pub unmatched_rgb: Vec<String>,
    pub unmatched_thermal: Vec<String>,
}

impl MatchResult {
    /// Structural check: no det_id may appear twice on either side.
    pub fn validate(&self) -> Result<(), SceneIoError> {
        let mut rgb_seen = BTreeSet::new();
        let mut thermal_seen = BTreeSet::new();
        for (i, (r, t)) in self.pairs.iter().enumerate() {
            if !rgb_seen.insert(r.as_str()) {
                return Err(SceneIoError::invalid(
                    format!("pairs[{i}]"),
                    format!("rgb det_id `{r}` appears twice"),
                ));
            }
            if !thermal_seen.insert(t.as_str()) {
                return Err(SceneIoError::invalid(
                    format!("pairs[{i}]"),
                    format!("thermal det_id `{t}` appears twice"),
                ));
            }
        }
        for (field, list, seen) in [
            ("unmatched_rgb", &self.unmatched_rgb, &mut rgb_seen),
            (
                "unmatched_thermal",
                &self.unmatched_thermal,
                &mut thermal_seen,
            ),
        ] {
            for (i, id) in list.iter().enumerate() {
                if !seen.insert(id.as_str()) {
                    return Err(SceneIoError::invalid(
                        format!("{field}[{i}]"),
                        format!("det_id `{id}` appears twice"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Full invariant against a scene: pairs and unmatched lists exactly
    /// partition the detections of each modality.
    pub fn validate_for(&self, scene: &ScenePair) -> Result<(), SceneIoError> {
        self.validate()?;
        for (modality, field, covered) in [
            (
                Modality::Rgb,
                "pairs/unmatched_rgb",
                self.pairs
                    .iter()
                    .map(|(r, _)| r.as_str())
                    .chain(self.unmatched_rgb.iter().map(String::as_str))
                    .collect::<BTreeSet<_>>(),
            ),
            (
                Modality::Thermal,
                "pairs/unmatched_thermal",
                self.pairs
                    .iter()
                    .map(|(_, t)| t.as_str())
                    .chain(self.unmatched_thermal.iter().map(String::as_str))
                    .collect::<BTreeSet<_>>(),
            ),
        ] {
            let expected: BTreeSet<&str> = scene
                .detections(modality)
                .iter()
                .map(|d| d.det_id.as_str())
                .collect();
            if covered != expected {
                return Err(SceneIoError::invalid(
                    field,
                    format!(
                        "must exactly partition the {modality} detections of scene `{}`",
                        scene.scene_id
                    ),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Document mirrors (the frozen wire schemas)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRow {
    det_id: String,
    bbox: BBox,
    confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_identity: Option<String>,
}

impl DetectionRow {
    fn from_detection(det: &Detection) -> Self {
        DetectionRow {
            det_id: det.det_id.clone(),
            bbox: det.bbox,
            confidence: det.confidence,
            gt_identity: det.gt_identity.clone(),
        }
    }

    fn into_detection(self, modality: Modality) -> Detection {
        Detection {
            det_id: self.det_id,
            modality,
            bbox: self.bbox,
            confidence: self.confidence,
            gt_identity: self.gt_identity,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    schema: u32,
    scene_id: String,
    image_size_rgb: (u32, u32),
    image_size_thermal: (u32, u32),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rgb_image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thermal_image: Option<String>,
    rgb_detections: Vec<DetectionRow>,
    thermal_detections: Vec<DetectionRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_pairs: Option<Vec<(String, String)>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DescriptionsDoc {
    schema: u32,
    scene_id: String,
    records: Vec<DescriptionRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchDoc {
    schema: u32,
    scene_id: String,
    pairs: Vec<(String, String)>,
    rationale: String,
    unmatched_rgb: Vec<String>,
    unmatched_thermal: Vec<String>,
}

// ---------------------------------------------------------------------------
// Generic JSON helpers
// ---------------------------------------------------------------------------

/// Read and deserialize a JSON document.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, SceneIoError> {
    let bytes = fs::read(path).map_err(|source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| SceneIoError::Malformed {
        path: path.to_path_buf(),
        source,
    })
}

/// Serialize pretty JSON and write it atomically (temp file, then rename).
pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<(), SceneIoError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|source| SceneIoError::Malformed {
            path: path.to_path_buf(),
            source,
        })?;
    text.push('\n');
    write_text_atomic(&text, path)
}

/// Write text to `path` via a sibling temp file and rename, so readers never
/// observe a partially written document.
pub fn write_text_atomic(text: &str, path: &Path) -> Result<(), SceneIoError> {
    let io_err = |source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

fn check_schema(found: u32, path: &Path) -> Result<(), SceneIoError> {
    if found != SCHEMA_VERSION {
        return Err(SceneIoError::SchemaVersion {
            path: path.to_path_buf(),
            found,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Load / save operations
// ---------------------------------------------------------------------------

pub fn load_scene(path: &Path) -> Result<ScenePair, SceneIoError> {
    let doc: SceneDoc = load_json(path)?;
    check_schema(doc.schema, path)?;
    let scene = ScenePair {
        scene_id: doc.scene_id,
        rgb_image: doc.rgb_image,
        thermal_image: doc.thermal_image,
        image_size_rgb: doc.image_size_rgb,
        image_size_thermal: doc.image_size_thermal,
        rgb_detections: doc
            .rgb_detections
            .into_iter()
            .map(|row| row.into_detection(Modality::Rgb))
            .collect(),
        thermal_detections: doc
            .thermal_detections
            .into_iter()
            .map(|row| row.into_detection(Modality::Thermal))
            .collect(),
        gt_pairs: doc.gt_pairs,
    };
    scene.validate().map_err(|e| e.in_file(path))?;
    Ok(scene)
}

pub fn save_scene(scene: &ScenePair, path: &Path) -> Result<(), SceneIoError> {
    scene.validate()?;
    let doc = SceneDoc {
        schema: SCHEMA_VERSION,
        scene_id: scene.scene_id.clone(),
        image_size_rgb: scene.image_size_rgb,
        image_size_thermal: scene.image_size_thermal,
        rgb_image: scene.rgb_image.clone(),
        thermal_image: scene.thermal_image.clone(),
        rgb_detections: scene
            .rgb_detections
            .iter()
            .map(DetectionRow::from_detection)
            .collect(),
        thermal_detections: scene
            .thermal_detections
            .iter()
            .map(DetectionRow::from_detection)
            .collect(),
        gt_pairs: scene.gt_pairs.clone(),
    };
    save_json(&doc, path)
}

pub fn load_descriptions(path: &Path) -> Result<DescriptionCache, SceneIoError> {
    let doc: DescriptionsDoc = load_json(path)?;
    check_schema(doc.schema, path)?;
    let cache = DescriptionCache {
        scene_id: doc.scene_id,
        records: doc.records,
    };
    cache.validate().map_err(|e| e.in_file(path))?;
    Ok(cache)
}

pub fn save_descriptions(cache: &DescriptionCache, path: &Path) -> Result<(), SceneIoError> {
    cache.validate()?;
    let doc = DescriptionsDoc {
        schema: SCHEMA_VERSION,
        scene_id: cache.scene_id.clone(),
        records: cache.records.clone(),
    };
    save_json(&doc, path)
}

pub fn load_matches(path: &Path) -> Result<MatchResult, SceneIoError> {
    let doc: MatchDoc = load_json(path)?;
    check_schema(doc.schema, path)?;
    let result = MatchResult {
        scene_id: doc.scene_id,
        pairs: doc.pairs,
        rationale: doc.rationale,
        unmatched_rgb: doc.unmatched_rgb,
        unmatched_thermal: doc.unmatched_thermal,
    };
    result.validate().map_err(|e| e.in_file(path))?;
    Ok(result)
}

pub fn save_matches(result: &MatchResult, path: &Path) -> Result<(), SceneIoError> {
    result.validate()?;
    let doc = MatchDoc {
        schema: SCHEMA_VERSION,
        scene_id: result.scene_id.clone(),
        pairs: result.pairs.clone(),
        rationale: result.rationale.clone(),
        unmatched_rgb: result.unmatched_rgb.clone(),
        unmatched_thermal: result.unmatched_thermal.clone(),
    };
    save_json(&doc, path)
}

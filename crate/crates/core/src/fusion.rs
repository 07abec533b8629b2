//! Late fusion of matched RGB/thermal detection pairs.
//!
//! Scores combine under the conditional-independence rule
//! `s = s1*s2 / (s1*s2 + (1-s1)(1-s2))`: 0.5 is the neutral element,
//! certainty absorbs, and agreeing scores amplify. Boxes are mapped into the
//! target frame through normalized coordinates and averaged with confidence
//! weights. Unmatched detections pass through with their original score.
//! The same fusion runs behind every matcher, so metric differences between
//! runs isolate matching quality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_io::{self, BBox, MatchResult, Modality, SceneIoError, ScenePair};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("matches reference unknown {modality} detection `{det_id}`")]
    DanglingId { modality: Modality, det_id: String },
    #[error("matches belong to scene `{matches}`, not `{scene}`")]
    SceneMismatch { matches: String, scene: String },
}

/// Which detections a fused detection came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusedSources {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal: Option<String>,
}

impl FusedSources {
    pub fn pair(rgb: impl Into<String>, thermal: impl Into<String>) -> Self {
        FusedSources {
            rgb: Some(rgb.into()),
            thermal: Some(thermal.into()),
        }
    }

    pub fn rgb_only(rgb: impl Into<String>) -> Self {
        FusedSources {
            rgb: Some(rgb.into()),
            thermal: None,
        }
    }

    pub fn thermal_only(thermal: impl Into<String>) -> Self {
        FusedSources {
            rgb: None,
            thermal: Some(thermal.into()),
        }
    }

    /// Stable sort key used for deterministic orderings.
    pub fn key(&self) -> String {
        format!(
            "{}|{}",
            self.rgb.as_deref().unwrap_or(""),
            self.thermal.as_deref().unwrap_or("")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub bbox: BBox,
    pub score: f64,
    pub sources: FusedSources,
}

/// Conditional-independence score fusion. The degenerate conflicting case
/// (one score exactly 0, the other exactly 1) has a zero denominator and is
/// defined as 0.5 by the continuity convention.
pub fn fuse_scores(s_rgb: f64, s_thermal: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&s_rgb) && (0.0..=1.0).contains(&s_thermal));
    let joint = s_rgb * s_thermal;
    let denominator = joint + (1.0 - s_rgb) * (1.0 - s_thermal);
    if denominator == 0.0 {
        log::warn!("conflicting certain scores ({s_rgb}, {s_thermal}); fusing to 0.5");
        return 0.5;
    }
    joint / denominator
}

/// Transfer a box between image frames through normalized coordinates.
pub fn map_box(bbox: &BBox, from_size: (u32, u32), to_size: (u32, u32)) -> BBox {
    let sx = f64::from(to_size.0) / f64::from(from_size.0);
    let sy = f64::from(to_size.1) / f64::from(from_size.1);
    BBox::new(bbox.x * sx, bbox.y * sy, bbox.w * sx, bbox.h * sy)
}

/// Confidence-weighted average of the two boxes' corners in the target
/// frame. Zero total score degrades to the unweighted average.
#[allow(clippy::too_many_arguments)]
pub fn fuse_boxes(
    b_rgb: &BBox,
    b_thermal: &BBox,
    s_rgb: f64,
    s_thermal: f64,
    rgb_size: (u32, u32),
    thermal_size: (u32, u32),
    target_frame: Modality,
) -> BBox {
    let (a, b) = match target_frame {
        Modality::Rgb => (*b_rgb, map_box(b_thermal, thermal_size, rgb_size)),
        Modality::Thermal => (map_box(b_rgb, rgb_size, thermal_size), *b_thermal),
    };
    let (wa, wb) = if s_rgb + s_thermal > 0.0 {
        (s_rgb / (s_rgb + s_thermal), s_thermal / (s_rgb + s_thermal))
    } else {
        (0.5, 0.5)
    };
    let blend = |va: f64, vb: f64| wa * va + wb * vb;
    let x0 = blend(a.x, b.x);
    let y0 = blend(a.y, b.y);
    let x1 = blend(a.right(), b.right());
    let y1 = blend(a.bottom(), b.bottom());
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

/// Fuse a scene's detections according to a match result: one fused
/// detection per matched pair, pass-through (frame-mapped) for everything
/// unmatched. Output order: pairs, then unmatched RGB, then unmatched
/// thermal, each in the match result's order.
pub fn fuse_scene(
    scene: &ScenePair,
    matches: &MatchResult,
    target_frame: Modality,
) -> Result<Vec<FusedDetection>, FusionError> {
    if matches.scene_id != scene.scene_id {
        return Err(FusionError::SceneMismatch {
            matches: matches.scene_id.clone(),
            scene: scene.scene_id.clone(),
        });
    }
    let lookup = |modality: Modality, det_id: &str| {
        scene
            .find(modality, det_id)
            .ok_or_else(|| FusionError::DanglingId {
                modality,
                det_id: det_id.to_string(),
            })
    };
    let target_size = scene.image_size(target_frame);
    let mut fused = Vec::new();
    for (rgb_id, thermal_id) in &matches.pairs {
        let rgb = lookup(Modality::Rgb, rgb_id)?;
        let thermal = lookup(Modality::Thermal, thermal_id)?;
        fused.push(FusedDetection {
            bbox: fuse_boxes(
                &rgb.bbox,
                &thermal.bbox,
                rgb.confidence,
                thermal.confidence,
                scene.image_size_rgb,
                scene.image_size_thermal,
                target_frame,
            ),
            score: fuse_scores(rgb.confidence, thermal.confidence),
            sources: FusedSources::pair(rgb_id.clone(), thermal_id.clone()),
        });
    }
    for det_id in &matches.unmatched_rgb {
        let det = lookup(Modality::Rgb, det_id)?;
        fused.push(FusedDetection {
            bbox: map_box(&det.bbox, scene.image_size_rgb, target_size),
            score: det.confidence,
            sources: FusedSources::rgb_only(det_id.clone()),
        });
    }
    for det_id in &matches.unmatched_thermal {
        let det = lookup(Modality::Thermal, det_id)?;
        fused.push(FusedDetection {
            bbox: map_box(&det.bbox, scene.image_size_thermal, target_size),
            score: det.confidence,
            sources: FusedSources::thermal_only(det_id.clone()),
        });
    }
    Ok(fused)
}

/// Persisted fused-output document: the detection-list schema plus the
/// `sources` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusedDocument {
    pub schema: u32,
    pub scene_id: String,
    pub frame: Modality,
    pub detections: Vec<FusedDetection>,
}

pub fn save_fused(doc: &FusedDocument, path: &std::path::Path) -> Result<(), SceneIoError> {
    scene_io::save_json(doc, path)
}

pub fn load_fused(path: &std::path::Path) -> Result<FusedDocument, SceneIoError> {
    scene_io::load_json(path)
}

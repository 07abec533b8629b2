//! Seeded synthetic scene generation with controllable misalignment.
//!
//! Persons live in a normalized world square. The RGB camera is the
//! reference view (identity projection); the thermal camera sees the same
//! world through a sampled similarity transform (translation, scale) plus a
//! field-of-view crop, so the same person lands at a different place in each
//! image — up to completely disjoint boxes under the heavy profile.
//! Detection noise (jitter, drops, sampled confidences) is applied per
//! modality on top.
//!
//! Generation is a pure function of the config, seed included: scenes get
//! derived sub-seeds, so the output is byte-identical regardless of how the
//! per-scene work is scheduled.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attrs::{AttrKey, Attributes};
use crate::scene_io::{self, BBox, Detection, Modality, SceneIoError, ScenePair};
use crate::util::fnv1a64;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field}: {message}")]
    BadConfig { field: String, message: String },
    #[error("unknown severity profile `{0}` (expected aligned, weak, or heavy)")]
    UnknownProfile(String),
    #[error(transparent)]
    Io(#[from] SceneIoError),
}

fn bad(field: &str, message: impl Into<String>) -> SynthError {
    SynthError::BadConfig {
        field: field.to_string(),
        message: message.into(),
    }
}

/// How far the thermal view is allowed to drift from the RGB view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    /// Max translation as a fraction of image width / height.
    pub dx_frac: f64,
    pub dy_frac: f64,
    /// Uniform scale factor range.
    pub scale_range: (f64, f64),
    /// Max fraction of the view cropped away (zoomed into a sub-window).
    pub fov_crop_frac: f64,
}

impl Misalignment {
    pub const NONE: Misalignment = Misalignment {
        dx_frac: 0.0,
        dy_frac: 0.0,
        scale_range: (1.0, 1.0),
        fov_crop_frac: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionNoise {
    /// Uniform jitter added to box coordinates and extents, in pixels.
    pub jitter_px: f64,
    /// Probability of losing a visible person's detection, per modality.
    pub drop_prob_rgb: f64,
    pub drop_prob_thermal: f64,
    /// Beta(alpha, beta) parameters for sampled detection confidences.
    pub confidence_beta: (f64, f64),
}

impl Default for DetectionNoise {
    fn default() -> Self {
        DetectionNoise {
            jitter_px: 2.0,
            drop_prob_rgb: 0.05,
            drop_prob_thermal: 0.05,
            confidence_beta: (5.0, 1.5),
        }
    }
}

/// Value pool per attribute key; synthetic identities draw from it and the
/// mock provider corrupts within it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVocab(pub BTreeMap<AttrKey, Vec<String>>);

impl Default for AttributeVocab {
    fn default() -> Self {
        let mut vocab = BTreeMap::new();
        let insert = |vocab: &mut BTreeMap<AttrKey, Vec<String>>, key, values: &[&str]| {
            vocab.insert(key, values.iter().map(|v| v.to_string()).collect());
        };
        insert(
            &mut vocab,
            AttrKey::Clothing,
            &[
                "red jacket",
                "blue coat",
                "black shirt",
                "white dress",
                "green hoodie",
            ],
        );
        insert(
            &mut vocab,
            AttrKey::Hairstyle,
            &["short", "long", "bald", "ponytail"],
        );
        insert(
            &mut vocab,
            AttrKey::Accessories,
            &["backpack", "none", "umbrella", "handbag"],
        );
        insert(
            &mut vocab,
            AttrKey::FacingDirection,
            &["left", "right", "toward", "away"],
        );
        AttributeVocab(vocab)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_scenes: usize,
    /// Inclusive (min, max) person count per scene.
    pub persons_per_scene: (usize, usize),
    pub image_size_rgb: (u32, u32),
    pub image_size_thermal: (u32, u32),
    pub misalignment: Misalignment,
    pub detection_noise: DetectionNoise,
    pub attribute_vocab: AttributeVocab,
    /// Per-attribute corruption probability consumed by the mock provider.
    pub hallucination_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_scenes: 10,
            persons_per_scene: (4, 6),
            image_size_rgb: (640, 480),
            image_size_thermal: (640, 512),
            misalignment: Misalignment::NONE,
            detection_noise: DetectionNoise::default(),
            attribute_vocab: AttributeVocab::default(),
            hallucination_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, (w, h)) in [
            ("image_size_rgb", self.image_size_rgb),
            ("image_size_thermal", self.image_size_thermal),
        ] {
            if w == 0 || h == 0 {
                return Err(bad(field, "image must have nonzero area"));
            }
        }
        if self.persons_per_scene.0 > self.persons_per_scene.1 {
            return Err(bad("persons_per_scene", "min exceeds max"));
        }
        for (field, value) in [
            ("misalignment.dx_frac", self.misalignment.dx_frac),
            ("misalignment.dy_frac", self.misalignment.dy_frac),
            (
                "misalignment.fov_crop_frac",
                self.misalignment.fov_crop_frac,
            ),
            ("hallucination_rate", self.hallucination_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(bad(field, format!("fraction out of [0,1]: {value}")));
            }
        }
        let (lo, hi) = self.misalignment.scale_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(bad(
                "misalignment.scale_range",
                format!("invalid range ({lo}, {hi})"),
            ));
        }
        for (field, value) in [
            (
                "detection_noise.drop_prob_rgb",
                self.detection_noise.drop_prob_rgb,
            ),
            (
                "detection_noise.drop_prob_thermal",
                self.detection_noise.drop_prob_thermal,
            ),
        ] {
            if !(0.0..1.0).contains(&value) {
                return Err(bad(field, format!("probability out of [0,1): {value}")));
            }
        }
        let (a, b) = self.detection_noise.confidence_beta;
        if !(a > 0.0 && b > 0.0) {
            return Err(bad(
                "detection_noise.confidence_beta",
                "parameters must be positive",
            ));
        }
        if self.detection_noise.jitter_px < 0.0 {
            return Err(bad("detection_noise.jitter_px", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityProfile {
    Aligned,
    Weak,
    Heavy,
}

impl FromStr for SeverityProfile {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "aligned" => Ok(SeverityProfile::Aligned),
            "weak" => Ok(SeverityProfile::Weak),
            "heavy" => Ok(SeverityProfile::Heavy),
            other => Err(SynthError::UnknownProfile(other.to_string())),
        }
    }
}

impl std::fmt::Display for SeverityProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeverityProfile::Aligned => f.write_str("aligned"),
            SeverityProfile::Weak => f.write_str("weak"),
            SeverityProfile::Heavy => f.write_str("heavy"),
        }
    }
}

/// Misalignment fragment for a named severity profile.
pub fn severity_profile(profile: SeverityProfile) -> Misalignment {
    match profile {
        SeverityProfile::Aligned => Misalignment::NONE,
        SeverityProfile::Weak => Misalignment {
            dx_frac: 0.05,
            dy_frac: 0.05,
            scale_range: (0.98, 1.02),
            fov_crop_frac: 0.0,
        },
        SeverityProfile::Heavy => Misalignment {
            dx_frac: 0.4,
            dy_frac: 0.4,
            scale_range: (0.8, 1.25),
            fov_crop_frac: 0.2,
        },
    }
}

/// Deterministically derive a synthetic identity's attribute tuple from the
/// vocabulary. The mock provider uses the same derivation, so knowing an
/// identity string is enough to reconstruct its ground-truth attributes.
pub fn attributes_for_identity(identity: &str, vocab: &AttributeVocab) -> Attributes {
    let mut attrs = Attributes::new();
    for (key, values) in &vocab.0 {
        if values.is_empty() {
            continue;
        }
        let idx = fnv1a64(&[identity.as_bytes(), key.name().as_bytes()]) as usize % values.len();
        attrs.insert(*key, values[idx].clone());
    }
    attrs
}

// World-space person extents (fractions of the unit square). Boxes are
// person-shaped: notably taller than wide.
const PERSON_W: (f64, f64) = (0.08, 0.16);
const PERSON_H: (f64, f64) = (0.18, 0.32);

struct WorldPerson {
    identity: String,
    center: (f64, f64),
    extent: (f64, f64),
}

struct ThermalView {
    scale: f64,
    tx: f64,
    ty: f64,
    crop: f64,
    crop_ox: f64,
    crop_oy: f64,
}

impl ThermalView {
    /// Map a world point into the thermal view's normalized frame.
    fn project(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let px = (x - 0.5) * self.scale + 0.5 + self.tx;
        let py = (y - 0.5) * self.scale + 0.5 + self.ty;
        (
            (px - self.crop_ox) / (1.0 - self.crop),
            (py - self.crop_oy) / (1.0 - self.crop),
        )
    }

    fn extent_scale(&self) -> f64 {
        self.scale / (1.0 - self.crop)
    }
}

fn sample_symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Project, jitter, clip. Returns `None` when the person is out of this
/// modality's view or too small after clipping.
#[allow(clippy::too_many_arguments)]
fn observe<R: Rng>(
    rng: &mut R,
    center: (f64, f64),
    extent: (f64, f64),
    image_size: (u32, u32),
    jitter_px: f64,
) -> Option<BBox> {
    let (img_w, img_h) = (f64::from(image_size.0), f64::from(image_size.1));
    if !(0.0..=1.0).contains(&center.0) || !(0.0..=1.0).contains(&center.1) {
        return None;
    }
    let mut x = (center.0 - extent.0 / 2.0) * img_w;
    let mut y = (center.1 - extent.1 / 2.0) * img_h;
    let mut w = extent.0 * img_w;
    let mut h = extent.1 * img_h;
    if jitter_px > 0.0 {
        x += sample_symmetric(rng, jitter_px);
        y += sample_symmetric(rng, jitter_px);
        w = (w + sample_symmetric(rng, jitter_px)).max(1.0);
        h = (h + sample_symmetric(rng, jitter_px)).max(1.0);
    }
    // clip to image bounds
    let x1 = (x + w).min(img_w);
    let y1 = (y + h).min(img_h);
    let x0 = x.max(0.0);
    let y0 = y.max(0.0);
    if x1 - x0 < 1.0 || y1 - y0 < 1.0 {
        return None;
    }
    Some(BBox::new(x0, y0, x1 - x0, y1 - y0))
}

fn generate_scene(config: &SynthConfig, index: usize) -> ScenePair {
    let scene_id = format!("scene_{index:04}");
    let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(&[
        &config.seed.to_le_bytes(),
        b"scene",
        &(index as u64).to_le_bytes(),
    ]));

    let (min_p, max_p) = config.persons_per_scene;
    let n_persons = if max_p > min_p {
        rng.random_range(min_p..=max_p)
    } else {
        min_p
    };

    let persons: Vec<WorldPerson> = (0..n_persons)
        .map(|k| WorldPerson {
            identity: format!("{scene_id}_p{k}"),
            center: (rng.random_range(0.08..=0.92), rng.random_range(0.15..=0.85)),
            extent: (
                sample_range(&mut rng, PERSON_W),
                sample_range(&mut rng, PERSON_H),
            ),
        })
        .collect();

    let mis = &config.misalignment;
    let crop = if mis.fov_crop_frac > 0.0 {
        rng.random_range(0.0..=mis.fov_crop_frac)
    } else {
        0.0
    };
    let thermal = ThermalView {
        scale: sample_range(&mut rng, mis.scale_range),
        tx: sample_symmetric(&mut rng, mis.dx_frac),
        ty: sample_symmetric(&mut rng, mis.dy_frac),
        crop,
        crop_ox: if crop > 0.0 {
            rng.random_range(0.0..=crop)
        } else {
            0.0
        },
        crop_oy: if crop > 0.0 {
            rng.random_range(0.0..=crop)
        } else {
            0.0
        },
    };

    let noise = &config.detection_noise;
    let beta = Beta::new(noise.confidence_beta.0, noise.confidence_beta.1)
        .expect("validated beta parameters");

    // person index -> observed box per modality
    let mut rgb_seen: Vec<(usize, BBox, f64)> = Vec::new();
    let mut thermal_seen: Vec<(usize, BBox, f64)> = Vec::new();
    for (k, person) in persons.iter().enumerate() {
        let rgb_box = observe(
            &mut rng,
            person.center,
            person.extent,
            config.image_size_rgb,
            noise.jitter_px,
        );
        let dropped_rgb = noise.drop_prob_rgb > 0.0 && rng.random_bool(noise.drop_prob_rgb);
        let conf_rgb = beta.sample(&mut rng).clamp(0.0, 1.0);
        if let Some(bbox) = rgb_box {
            if !dropped_rgb {
                rgb_seen.push((k, bbox, conf_rgb));
            }
        }

        let t_center = thermal.project(person.center);
        let t_extent = (
            person.extent.0 * thermal.extent_scale(),
            person.extent.1 * thermal.extent_scale(),
        );
        let t_box = observe(
            &mut rng,
            t_center,
            t_extent,
            config.image_size_thermal,
            noise.jitter_px,
        );
        let dropped_t = noise.drop_prob_thermal > 0.0 && rng.random_bool(noise.drop_prob_thermal);
        let conf_t = beta.sample(&mut rng).clamp(0.0, 1.0);
        if let Some(bbox) = t_box {
            if !dropped_t {
                thermal_seen.push((k, bbox, conf_t));
            }
        }
    }

    // Detection order must not leak person order: shuffle per modality, then
    // assign R1../T1.. ids in shuffled order.
    rgb_seen.shuffle(&mut rng);
    thermal_seen.shuffle(&mut rng);

    let mut rgb_ids: BTreeMap<usize, String> = BTreeMap::new();
    let rgb_detections: Vec<Detection> = rgb_seen
        .iter()
        .enumerate()
        .map(|(i, &(k, bbox, confidence))| {
            let det_id = format!("R{}", i + 1);
            rgb_ids.insert(k, det_id.clone());
            Detection {
                det_id,
                modality: Modality::Rgb,
                bbox,
                confidence,
                gt_identity: Some(persons[k].identity.clone()),
            }
        })
        .collect();
    let mut thermal_ids: BTreeMap<usize, String> = BTreeMap::new();
    let thermal_detections: Vec<Detection> = thermal_seen
        .iter()
        .enumerate()
        .map(|(i, &(k, bbox, confidence))| {
            let det_id = format!("T{}", i + 1);
            thermal_ids.insert(k, det_id.clone());
            Detection {
                det_id,
                modality: Modality::Thermal,
                bbox,
                confidence,
                gt_identity: Some(persons[k].identity.clone()),
            }
        })
        .collect();

    // Only persons surviving in both modalities appear in the ground truth.
    let gt_pairs: Vec<(String, String)> = (0..n_persons)
        .filter_map(|k| match (rgb_ids.get(&k), thermal_ids.get(&k)) {
            (Some(r), Some(t)) => Some((r.clone(), t.clone())),
            _ => None,
        })
        .collect();

    ScenePair {
        scene_id,
        rgb_image: None,
        thermal_image: None,
        image_size_rgb: config.image_size_rgb,
        image_size_thermal: config.image_size_thermal,
        rgb_detections,
        thermal_detections,
        gt_pairs: Some(gt_pairs),
    }
}

/// Generate all scenes for a config. Pure function of the config; scenes are
/// produced in parallel from derived sub-seeds.
pub fn generate(config: &SynthConfig) -> Result<Vec<ScenePair>, SynthError> {
    config.validate()?;
    Ok((0..config.n_scenes)
        .into_par_iter()
        .map(|index| generate_scene(config, index))
        .collect())
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

/// Index document written next to the per-scene manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema: u32,
    pub dataset_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    /// Scene manifest filenames relative to the index file.
    pub scenes: Vec<String>,
}

pub const INDEX_FILE: &str = "index.json";

/// Write one manifest per scene plus the dataset index file.
pub fn write_dataset(
    scenes: &[ScenePair],
    dataset_id: &str,
    seed: u64,
    profile: Option<&str>,
    dir: &Path,
) -> Result<DatasetIndex, SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        SynthError::Io(SceneIoError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })?;
    let mut files = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let file = format!("{}.json", scene.scene_id);
        scene_io::save_scene(scene, &dir.join(&file))?;
        files.push(file);
    }
    let index = DatasetIndex {
        schema: scene_io::SCHEMA_VERSION,
        dataset_id: dataset_id.to_string(),
        seed,
        profile: profile.map(str::to_string),
        scenes: files,
    };
    scene_io::save_json(&index, &dir.join(INDEX_FILE))?;
    Ok(index)
}

/// Load a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<ScenePair>), SynthError> {
    let index_path = dir.join(INDEX_FILE);
    let index: DatasetIndex = scene_io::load_json(&index_path)?;
    if index.schema != scene_io::SCHEMA_VERSION {
        return Err(SynthError::Io(SceneIoError::SchemaVersion {
            path: index_path,
            found: index.schema,
        }));
    }
    let mut scenes = Vec::with_capacity(index.scenes.len());
    for file in &index.scenes {
        scenes.push(scene_io::load_scene(&dir.join(file))?);
    }
    Ok((index, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_noise() -> DetectionNoise {
        DetectionNoise {
            jitter_px: 0.0,
            drop_prob_rgb: 0.0,
            drop_prob_thermal: 0.0,
            confidence_beta: (5.0, 1.5),
        }
    }

    #[test]
    fn generation_is_deterministic_to_the_byte() {
        let config = SynthConfig {
            seed: 99,
            n_scenes: 4,
            misalignment: severity_profile(SeverityProfile::Heavy),
            hallucination_rate: 0.3,
            ..SynthConfig::default()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
        // the persisted documents must be byte-identical too
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
        crate::scene_io::save_scene(&a[0], &pa).unwrap();
        crate::scene_io::save_scene(&b[0], &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    }

    #[test]
    fn aligned_profile_matches_modalities_up_to_rescale() {
        let config = SynthConfig {
            seed: 5,
            n_scenes: 3,
            detection_noise: no_noise(),
            ..SynthConfig::default()
        };
        for scene in generate(&config).unwrap() {
            let pairs = scene.gt_pairs.clone().unwrap();
            assert_eq!(pairs.len(), scene.rgb_detections.len());
            for (r, t) in &pairs {
                let rd = scene.find(Modality::Rgb, r).unwrap();
                let td = scene.find(Modality::Thermal, t).unwrap();
                let (rw, rh) = (
                    f64::from(scene.image_size_rgb.0),
                    f64::from(scene.image_size_rgb.1),
                );
                let (tw, th) = (
                    f64::from(scene.image_size_thermal.0),
                    f64::from(scene.image_size_thermal.1),
                );
                let rc = rd.bbox.center();
                let tc = td.bbox.center();
                assert!((rc.0 / rw - tc.0 / tw).abs() < 1e-9);
                assert!((rc.1 / rh - tc.1 / th).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gt_pairs_are_a_bijection_between_shared_identities() {
        let config = SynthConfig {
            seed: 123,
            n_scenes: 20,
            misalignment: severity_profile(SeverityProfile::Heavy),
            detection_noise: DetectionNoise {
                drop_prob_rgb: 0.3,
                drop_prob_thermal: 0.3,
                ..DetectionNoise::default()
            },
            ..SynthConfig::default()
        };
        for scene in generate(&config).unwrap() {
            scene.validate().unwrap();
            let pairs = scene.gt_pairs.clone().unwrap();
            for (r, t) in &pairs {
                let rd = scene.find(Modality::Rgb, r).unwrap();
                let td = scene.find(Modality::Thermal, t).unwrap();
                assert_eq!(rd.gt_identity, td.gt_identity);
            }
        }
    }

    #[test]
    fn no_drops_means_every_person_is_paired() {
        let config = SynthConfig {
            seed: 7,
            n_scenes: 10,
            persons_per_scene: (5, 5),
            detection_noise: no_noise(),
            ..SynthConfig::default()
        };
        for scene in generate(&config).unwrap() {
            assert_eq!(scene.gt_pairs.unwrap().len(), 5);
        }
    }

    #[test]
    fn translation_displacement_is_bounded() {
        // dx up to 0.4 of a 640-wide image, all other effects off: mean
        // displacement must be positive and no sample may exceed 256 px.
        let config = SynthConfig {
            seed: 31,
            n_scenes: 200,
            persons_per_scene: (5, 5),
            image_size_rgb: (640, 480),
            image_size_thermal: (640, 480),
            misalignment: Misalignment {
                dx_frac: 0.4,
                dy_frac: 0.0,
                scale_range: (1.0, 1.0),
                fov_crop_frac: 0.0,
            },
            detection_noise: no_noise(),
            ..SynthConfig::default()
        };
        let mut displacements = Vec::new();
        for scene in generate(&config).unwrap() {
            for (r, t) in scene.gt_pairs.as_ref().unwrap() {
                let rc = scene.find(Modality::Rgb, r).unwrap().bbox.center();
                let tc = scene.find(Modality::Thermal, t).unwrap().bbox.center();
                displacements.push((rc.0 - tc.0).abs());
            }
        }
        assert!(displacements.len() > 500);
        let mean: f64 = displacements.iter().sum::<f64>() / displacements.len() as f64;
        assert!(mean > 0.0);
        // clipping at image edges can only shrink the offset
        assert!(displacements.iter().all(|&d| d <= 256.0 + 1e-9));
    }

    #[test]
    fn weak_profile_keeps_boxes_overlapping() {
        let config = SynthConfig {
            seed: 77,
            n_scenes: 100,
            misalignment: severity_profile(SeverityProfile::Weak),
            detection_noise: no_noise(),
            ..SynthConfig::default()
        };
        let mut ious = Vec::new();
        for scene in generate(&config).unwrap() {
            let (tw, th) = (
                f64::from(scene.image_size_thermal.0),
                f64::from(scene.image_size_thermal.1),
            );
            let (rw, rh) = (
                f64::from(scene.image_size_rgb.0),
                f64::from(scene.image_size_rgb.1),
            );
            for (r, t) in scene.gt_pairs.as_ref().unwrap() {
                let rb = scene.find(Modality::Rgb, r).unwrap().bbox;
                let tb = scene.find(Modality::Thermal, t).unwrap().bbox;
                // compare in normalized coordinates
                let norm = |b: BBox, w: f64, h: f64| BBox::new(b.x / w, b.y / h, b.w / w, b.h / h);
                ious.push(norm(rb, rw, rh).iou(&norm(tb, tw, th)));
            }
        }
        ious.sort_by(f64::total_cmp);
        let median = ious[ious.len() / 2];
        assert!(median > 0.5, "median IoU {median}");
    }

    #[test]
    fn profile_fragments_have_expected_values() {
        assert_eq!(
            severity_profile(SeverityProfile::Aligned),
            Misalignment::NONE
        );
        let weak = severity_profile(SeverityProfile::Weak);
        assert_eq!(weak.dx_frac, 0.05);
        assert_eq!(weak.scale_range, (0.98, 1.02));
        let heavy = severity_profile(SeverityProfile::Heavy);
        assert_eq!(heavy.dx_frac, 0.4);
        assert_eq!(heavy.scale_range, (0.8, 1.25));
        assert_eq!(heavy.fov_crop_frac, 0.2);
    }

    #[test]
    fn unknown_profile_is_rejected() {
        assert!(matches!(
            "extreme".parse::<SeverityProfile>(),
            Err(SynthError::UnknownProfile(p)) if p == "extreme"
        ));
    }

    #[test]
    fn zero_area_image_is_rejected() {
        let config = SynthConfig {
            image_size_rgb: (0, 480),
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate(&config),
            Err(SynthError::BadConfig { .. })
        ));
    }

    #[test]
    fn identity_attributes_are_stable_and_cover_vocab_keys() {
        let vocab = AttributeVocab::default();
        let a = attributes_for_identity("scene_0001_p0", &vocab);
        let b = attributes_for_identity("scene_0001_p0", &vocab);
        assert_eq!(a, b);
        assert_eq!(a.len(), vocab.0.len());
        for (key, value) in &a {
            assert!(vocab.0[key].contains(value));
        }
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            seed: 3,
            n_scenes: 3,
            ..SynthConfig::default()
        };
        let scenes = generate(&config).unwrap();
        let index = write_dataset(&scenes, "synth-3", 3, Some("aligned"), dir.path()).unwrap();
        assert_eq!(index.scenes.len(), 3);
        let (loaded_index, loaded_scenes) = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded_index, index);
        assert_eq!(loaded_scenes, scenes);
    }
}

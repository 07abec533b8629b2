//! Appearance descriptions per detection via vision-language providers.
//!
//! Each detection is turned into an ROI crop (bbox expanded by a margin and
//! clipped to the image), a description request is sent to every configured
//! provider, and the labeled attribute lines of the reply are parsed into an
//! [`AppearanceRecord`]. Replies that carry no attribute lines degrade
//! gracefully: the raw text is kept, attributes stay empty, and a warning is
//! logged.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::attrs::parse_attribute_lines;
use crate::provider::{chat_with_retry, ChatPart, ChatProvider, ChatRequest, ProviderError};
use crate::scene_io::{
    AppearanceRecord, BBox, DescriptionCache, DescriptionRecord, Detection, ScenePair,
};

pub const DEFAULT_MARGIN_RATIO: f64 = 0.5;

/// First line of every description prompt's detection context block; the
/// mock provider keys on it to find the detection being described.
pub const DETECTION_HEADER_PREFIX: &str = "Target detection ";

#[derive(Debug, Error)]
pub enum AppearanceError {
    #[error("detection `{det_id}`: margin_ratio must be nonnegative, got {margin_ratio}")]
    BadMargin { det_id: String, margin_ratio: f64 },
    #[error("detection `{det_id}`: bbox lies entirely outside the {width}x{height} image")]
    BBoxOutsideImage {
        det_id: String,
        width: u32,
        height: u32,
    },
    #[error("detection `{det_id}`: provider `{provider}` returned an empty reply")]
    EmptyReply { det_id: String, provider: String },
    #[error("parallelism must be at least 1")]
    BadParallelism,
    #[error("failed to start worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Zoomed region around one detection.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiCrop {
    pub det_id: String,
    /// Expanded box, clipped to image bounds; contains the detection bbox.
    pub crop_box: BBox,
    /// Magnification available when presenting the crop at image size.
    pub scale_factor: f64,
}

/// Expand a detection's bbox by `margin_ratio * max(w, h)` on each side and
/// clip the result to the image.
pub fn make_roi_crop(
    det: &Detection,
    image_size: (u32, u32),
    margin_ratio: f64,
) -> Result<RoiCrop, AppearanceError> {
    if margin_ratio < 0.0 || !margin_ratio.is_finite() {
        return Err(AppearanceError::BadMargin {
            det_id: det.det_id.clone(),
            margin_ratio,
        });
    }
    let (img_w, img_h) = (f64::from(image_size.0), f64::from(image_size.1));
    let bbox = det.bbox;
    if bbox.x >= img_w || bbox.y >= img_h || bbox.right() <= 0.0 || bbox.bottom() <= 0.0 {
        return Err(AppearanceError::BBoxOutsideImage {
            det_id: det.det_id.clone(),
            width: image_size.0,
            height: image_size.1,
        });
    }
    let margin = margin_ratio * bbox.w.max(bbox.h);
    let x0 = (bbox.x - margin).max(0.0);
    let y0 = (bbox.y - margin).max(0.0);
    let x1 = (bbox.right() + margin).min(img_w);
    let y1 = (bbox.bottom() + margin).min(img_h);
    let crop_box = BBox::new(x0, y0, x1 - x0, y1 - y0);
    let scale_factor = (img_w / crop_box.w).min(img_h / crop_box.h).max(1.0);
    Ok(RoiCrop {
        det_id: det.det_id.clone(),
        crop_box,
        scale_factor,
    })
}

/// Context line identifying a detection inside prompts; the format is part
/// of the mock provider's wire contract.
pub fn detection_header(scene_id: &str, det: &Detection) -> String {
    format!(
        "{DETECTION_HEADER_PREFIX}{} in scene {scene_id} ({} image).",
        det.det_id,
        det.modality.label()
    )
}

/// Build the description request for one detection crop.
///
/// The prompt asks for one labeled line per attribute so that agreement
/// checking downstream is well defined; when the scene carries an image
/// reference, the crop region is attached as an image part.
pub fn build_describe_request(scene: &ScenePair, det: &Detection, crop: &RoiCrop) -> ChatRequest {
    let b = crop.crop_box;
    let prompt = format!(
        "Given an RGB image and a thermal image, generate a textual description of the \
         appearance of each individual in the scene. The description should include \
         information about clothing, accessories, hairstyle, and any other visible attributes.\n\
         \n\
         {header}\n\
         Crop region: x={x:.1}, y={y:.1}, w={w:.1}, h={h:.1} (zoom factor {zoom:.2}).\n\
         \n\
         Answer with exactly one line per attribute, in this form:\n\
         clothing: <value>\n\
         accessories: <value>\n\
         hairstyle: <value>\n\
         facing_direction: <value>\n\
         other: <value>",
        header = detection_header(&scene.scene_id, det),
        x = b.x,
        y = b.y,
        w = b.w,
        h = b.h,
        zoom = crop.scale_factor,
    );
    let mut request = ChatRequest::text(prompt);
    let image = match det.modality {
        crate::scene_io::Modality::Rgb => &scene.rgb_image,
        crate::scene_io::Modality::Thermal => &scene.thermal_image,
    };
    if let Some(image) = image {
        request.parts.push(ChatPart::ImageRef(format!(
            "{image}#crop={:.0},{:.0},{:.0},{:.0}",
            b.x, b.y, b.w, b.h
        )));
    }
    request
}

/// Ask one provider to describe one detection.
pub fn describe(
    scene: &ScenePair,
    det: &Detection,
    crop: &RoiCrop,
    provider: &dyn ChatProvider,
) -> Result<AppearanceRecord, AppearanceError> {
    let request = build_describe_request(scene, det, crop);
    let reply = chat_with_retry(provider, &request)?;
    if reply.trim().is_empty() {
        return Err(AppearanceError::EmptyReply {
            det_id: det.det_id.clone(),
            provider: provider.id().to_string(),
        });
    }
    let attributes = parse_attribute_lines(&reply);
    if attributes.is_empty() {
        log::warn!(
            "provider `{}` answered without attribute lines for `{}`; keeping raw text",
            provider.id(),
            det.det_id
        );
    }
    Ok(AppearanceRecord {
        det_id: det.det_id.clone(),
        description_text: reply,
        attributes,
        provenance: provider.id().to_string(),
        transcript_ref: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescribeFailure {
    pub det_id: String,
    pub provider: String,
    pub message: String,
}

/// Result of a batch description run: the cache holds one record per
/// (detection, provider) that succeeded; failures are reported alongside so
/// partial caches can still be persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct DescribeOutcome {
    pub cache: DescriptionCache,
    pub failures: Vec<DescribeFailure>,
}

/// Describe every detection of a scene with every provider.
///
/// Requests run on a bounded worker pool; record order (detections in scene
/// order, providers in roster order per detection) and contents are
/// independent of `parallelism`.
pub fn describe_all(
    scene: &ScenePair,
    providers: &[Arc<dyn ChatProvider>],
    parallelism: usize,
    margin_ratio: f64,
) -> Result<DescribeOutcome, AppearanceError> {
    if parallelism == 0 {
        return Err(AppearanceError::BadParallelism);
    }
    for provider in providers {
        provider.observe_scene(scene);
    }
    let detections: Vec<&Detection> = scene
        .rgb_detections
        .iter()
        .chain(&scene.thermal_detections)
        .collect();
    let tasks: Vec<(&Detection, &Arc<dyn ChatProvider>)> = detections
        .iter()
        .flat_map(|det| providers.iter().map(move |p| (*det, p)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| AppearanceError::Pool(e.to_string()))?;
    let results: Vec<Result<AppearanceRecord, AppearanceError>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|(det, provider)| {
                let crop = make_roi_crop(det, scene.image_size(det.modality), margin_ratio)?;
                describe(scene, det, &crop, provider.as_ref())
            })
            .collect()
    });

    let mut cache = DescriptionCache {
        scene_id: scene.scene_id.clone(),
        records: Vec::new(),
    };
    let mut failures = Vec::new();
    for ((det, provider), result) in tasks.iter().zip(results) {
        match result {
            Ok(record) => cache.records.push(DescriptionRecord {
                det_id: record.det_id,
                modality: det.modality,
                provider: record.provenance,
                description_text: record.description_text,
                attributes: record.attributes,
                transcript_ref: None,
            }),
            Err(err) => failures.push(DescribeFailure {
                det_id: det.det_id.clone(),
                provider: provider.id().to_string(),
                message: err.to_string(),
            }),
        }
    }
    Ok(DescribeOutcome { cache, failures })
}

/// Records for one provider keyed by det_id, as matchers consume them.
pub fn records_by_detection(
    cache: &DescriptionCache,
    provider: &str,
) -> BTreeMap<String, AppearanceRecord> {
    cache
        .records
        .iter()
        .filter(|r| r.provider == provider)
        .map(|r| (r.det_id.clone(), r.appearance()))
        .collect()
}

//! End-to-end orchestration: per scene, build graphs, describe (and debate),
//! match, fuse, evaluate; across scenes, a bounded worker pool collects
//! results in scene order, so output is independent of scheduling.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use xmodal_core::appearance::{describe_all, DescribeFailure};
use xmodal_core::debate::{adjudicate_scene, DebateTranscript};
use xmodal_core::eval::{aggregate_report, count_mismatches, EvalReport, SceneEval};
use xmodal_core::fusion::{fuse_scene, FusedDetection, FusedDocument};
use xmodal_core::matcher::{llm_match, overlap_match, structural_match};
use xmodal_core::posgraph::{build_graph, serialize_graph, PositionalGraph};
use xmodal_core::provider::{ChatProvider, ProviderRegistry};
use xmodal_core::scene_io::{
    self, AppearanceRecord, DescriptionCache, MatchResult, Modality, ScenePair, SCHEMA_VERSION,
};
use xmodal_core::synthgen;

use crate::config::{MatcherKind, PipelineConfig};
use crate::render::render_svg;

/// Everything one scene produced; persisted per scene by `run`.
#[derive(Debug)]
pub struct SceneArtifacts {
    pub scene_id: String,
    pub graph_rgb: PositionalGraph,
    pub graph_thermal: PositionalGraph,
    pub graph_rgb_text: String,
    pub graph_thermal_text: String,
    pub cache: DescriptionCache,
    pub describe_failures: Vec<DescribeFailure>,
    pub transcripts: Vec<DebateTranscript>,
    pub matches: MatchResult,
    pub fused: Vec<FusedDetection>,
    pub eval: SceneEval,
}

/// Split a cache into per-modality description maps, keeping the first
/// record per detection (describe order puts the primary provider first).
pub fn split_first_records(
    cache: &DescriptionCache,
) -> (
    BTreeMap<String, AppearanceRecord>,
    BTreeMap<String, AppearanceRecord>,
) {
    let mut rgb = BTreeMap::new();
    let mut thermal = BTreeMap::new();
    for record in &cache.records {
        let map = match record.modality {
            Modality::Rgb => &mut rgb,
            Modality::Thermal => &mut thermal,
        };
        map.entry(record.det_id.clone())
            .or_insert_with(|| record.appearance());
    }
    (rgb, thermal)
}

/// Ground-truth boxes for AP: the target-frame detections that carry an
/// identity label (the annotated boxes of the evaluation frame).
pub fn gt_boxes_for_ap(scene: &ScenePair, frame: Modality) -> Vec<xmodal_core::scene_io::BBox> {
    scene
        .detections(frame)
        .iter()
        .filter(|d| d.gt_identity.is_some())
        .map(|d| d.bbox)
        .collect()
}

/// Run the full pipeline for one scene.
pub fn run_scene(
    scene: &ScenePair,
    config: &PipelineConfig,
    registry: &ProviderRegistry,
) -> anyhow::Result<SceneArtifacts> {
    let settings = &config.pipeline;
    let graph_rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb)?;
    let graph_thermal = build_graph(
        &scene.thermal_detections,
        scene.image_size_thermal,
        Modality::Thermal,
    )?;

    // describe + debate only on provider-backed paths
    let (cache, describe_failures, transcripts, rgb_desc, thermal_desc) =
        if settings.matcher == MatcherKind::Overlap {
            (
                DescriptionCache {
                    scene_id: scene.scene_id.clone(),
                    records: Vec::new(),
                },
                Vec::new(),
                Vec::new(),
                BTreeMap::new(),
                BTreeMap::new(),
            )
        } else {
            let providers: Vec<std::sync::Arc<dyn ChatProvider>> = settings
                .roster
                .iter()
                .map(|name| {
                    registry
                        .get(&name.as_str().into())
                        .cloned()
                        .map_err(anyhow::Error::from)
                })
                .collect::<anyhow::Result<_>>()?;
            let outcome = describe_all(
                scene,
                &providers,
                settings.parallelism,
                settings.margin_ratio,
            )?;
            let adjudication = adjudicate_scene(
                scene,
                &outcome.cache,
                settings.debate,
                &config.debate_config(),
                registry,
            )?;
            (
                outcome.cache,
                outcome.failures,
                adjudication.transcripts,
                adjudication.rgb,
                adjudication.thermal,
            )
        };

    let weights = config.weights();
    let matches = match settings.matcher {
        MatcherKind::Overlap => overlap_match(scene, settings.iou_thresh)?,
        MatcherKind::Structural => structural_match(
            &scene.scene_id,
            &graph_rgb,
            &graph_thermal,
            &rgb_desc,
            &thermal_desc,
            &weights,
        )?,
        MatcherKind::Llm => {
            let provider = registry.get(&config.match_provider())?;
            llm_match(
                scene,
                &graph_rgb,
                &graph_thermal,
                &rgb_desc,
                &thermal_desc,
                provider.as_ref(),
                &weights,
            )?
        }
    };

    let fused = fuse_scene(scene, &matches, settings.fusion_frame)?;
    let (n_mismatched, n_gt_pairs) = scene
        .gt_pairs
        .as_ref()
        .map(|gt| count_mismatches(gt, &matches))
        .unwrap_or((0, 0));
    let eval = SceneEval {
        scene_id: scene.scene_id.clone(),
        n_gt_pairs,
        n_mismatched,
        fused: fused.clone(),
        gt_boxes: gt_boxes_for_ap(scene, settings.fusion_frame),
    };

    let graph_rgb_text = serialize_graph(&graph_rgb, Some(&rgb_desc))?;
    let graph_thermal_text = serialize_graph(&graph_thermal, Some(&thermal_desc))?;
    Ok(SceneArtifacts {
        scene_id: scene.scene_id.clone(),
        graph_rgb,
        graph_thermal,
        graph_rgb_text,
        graph_thermal_text,
        cache,
        describe_failures,
        transcripts,
        matches,
        fused,
        eval,
    })
}

/// Transcript sidecar document written next to the description cache.
#[derive(Debug, Serialize, Deserialize)]
pub struct TranscriptsDoc {
    pub schema: u32,
    pub scene_id: String,
    pub transcripts: Vec<DebateTranscript>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFailure {
    pub scene_id: String,
    pub error: String,
}

/// `report.json` shape: the metric report plus run metadata and the list of
/// scenes that failed.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportDoc {
    pub schema: u32,
    #[serde(flatten)]
    pub report: EvalReport,
    pub fusion_frame: Modality,
    pub failed_scenes: Vec<SceneFailure>,
}

pub struct RunOutcome {
    pub report: EvalReport,
    pub table: String,
    pub failures: Vec<SceneFailure>,
}

fn write_scene_artifacts(
    out_dir: &Path,
    scene: &ScenePair,
    artifacts: &SceneArtifacts,
    fusion_frame: Modality,
) -> anyhow::Result<()> {
    let scene_dir = out_dir.join(&artifacts.scene_id);
    std::fs::create_dir_all(&scene_dir)
        .with_context(|| format!("creating {}", scene_dir.display()))?;
    scene_io::write_text_atomic(&artifacts.graph_rgb_text, &scene_dir.join("graph_rgb.txt"))?;
    scene_io::write_text_atomic(
        &artifacts.graph_thermal_text,
        &scene_dir.join("graph_thermal.txt"),
    )?;
    if !artifacts.cache.records.is_empty() {
        scene_io::save_descriptions(&artifacts.cache, &scene_dir.join("descriptions.json"))?;
    }
    if !artifacts.transcripts.is_empty() {
        scene_io::save_json(
            &TranscriptsDoc {
                schema: SCHEMA_VERSION,
                scene_id: artifacts.scene_id.clone(),
                transcripts: artifacts.transcripts.clone(),
            },
            &scene_dir.join("transcripts.json"),
        )?;
    }
    scene_io::save_matches(&artifacts.matches, &scene_dir.join("matches.json"))?;
    xmodal_core::fusion::save_fused(
        &FusedDocument {
            schema: SCHEMA_VERSION,
            scene_id: artifacts.scene_id.clone(),
            frame: fusion_frame,
            detections: artifacts.fused.clone(),
        },
        &scene_dir.join("fused.json"),
    )?;
    let svg = render_svg(scene, &artifacts.matches)?;
    scene_io::write_text_atomic(&svg, &out_dir.join(format!("{}.svg", artifacts.scene_id)))?;
    Ok(())
}

/// Run the pipeline over a dataset directory, writing per-scene artifacts,
/// per-scene SVGs, and the final report into `out_dir`.
///
/// Per-scene failures are isolated: the run continues, failures are listed
/// in the report, and the caller exits nonzero iff any scene failed.
pub fn run_dataset(
    dataset_dir: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    jobs: usize,
) -> anyhow::Result<RunOutcome> {
    let registry = config
        .build_registry(None, None)
        .map_err(|e| anyhow!(e.to_string()))?;
    run_dataset_with_registry(dataset_dir, out_dir, config, &registry, jobs)
}

pub fn run_dataset_with_registry(
    dataset_dir: &Path,
    out_dir: &Path,
    config: &PipelineConfig,
    registry: &ProviderRegistry,
    jobs: usize,
) -> anyhow::Result<RunOutcome> {
    let (index, scenes) = synthgen::load_dataset(dataset_dir)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building worker pool")?;
    let results: Vec<Result<SceneArtifacts, String>> = pool.install(|| {
        scenes
            .par_iter()
            .map(|scene| {
                run_scene(scene, config, registry)
                    .and_then(|artifacts| {
                        write_scene_artifacts(
                            out_dir,
                            scene,
                            &artifacts,
                            config.pipeline.fusion_frame,
                        )?;
                        Ok(artifacts)
                    })
                    .map_err(|e| format!("{e:#}"))
            })
            .collect()
    });

    let mut per_scene = Vec::new();
    let mut failures = Vec::new();
    for (scene, result) in scenes.iter().zip(results) {
        match result {
            Ok(artifacts) => per_scene.push(artifacts.eval),
            Err(error) => failures.push(SceneFailure {
                scene_id: scene.scene_id.clone(),
                error,
            }),
        }
    }
    if per_scene.is_empty() {
        return Err(anyhow!(
            "every scene failed; first error: {}",
            failures.first().map(|f| f.error.as_str()).unwrap_or("none")
        ));
    }

    let report = aggregate_report(
        &per_scene,
        &index.dataset_id,
        &config.pipeline.matcher.to_string(),
        config.pipeline.debate,
        config.pipeline.ap_iou,
    )?;
    let table = xmodal_core::eval::render_report_table(&report);
    scene_io::save_json(
        &ReportDoc {
            schema: SCHEMA_VERSION,
            report: report.clone(),
            fusion_frame: config.pipeline.fusion_frame,
            failed_scenes: failures.clone(),
        },
        &out_dir.join("report.json"),
    )?;
    scene_io::write_text_atomic(&table, &out_dir.join("report.txt"))?;
    Ok(RunOutcome {
        report,
        table,
        failures,
    })
}

//! `xmodal` — cross-modal RGB/thermal identity alignment pipeline.
//!
//! Every pipeline stage is independently invocable (`synth`, `graph`,
//! `describe`, `debate`, `match`, `fuse`, `eval`, `render`), plus the
//! one-shot `run` that wires them end to end over a dataset directory.
//!
//! Exit codes: 0 success, 1 partial scene failures (or runtime error),
//! 2 configuration error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use xmodal_cli::config::{ConfigError, MatcherKind, PipelineConfig};
use xmodal_cli::pipeline::{self, split_first_records, SceneFailure};
use xmodal_cli::render::render_svg;
use xmodal_core::appearance::describe_all;
use xmodal_core::debate::adjudicate_scene;
use xmodal_core::eval::{aggregate_report, count_mismatches, render_report_table, SceneEval};
use xmodal_core::fusion::{fuse_scene, FusedDocument};
use xmodal_core::matcher::{llm_match, overlap_match, structural_match};
use xmodal_core::posgraph::{build_graph, serialize_graph};
use xmodal_core::provider::ChatProvider;
use xmodal_core::scene_io::{self, DescriptionCache, DescriptionRecord, Modality, SCHEMA_VERSION};
use xmodal_core::synthgen::{self, generate, severity_profile, SeverityProfile, SynthConfig};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal RGB/thermal identity alignment pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth correspondences.
    Synth(SynthArgs),
    /// Build and print (or write) the positional graphs of one scene.
    Graph(GraphArgs),
    /// Describe every detection of a scene with the configured providers.
    Describe(DescribeArgs),
    /// Reconcile a description cache through the debate/judge protocol.
    Debate(DebateArgs),
    /// Match RGB and thermal detections of one scene.
    Match(MatchArgs),
    /// Fuse matched detections into single detections.
    Fuse(FuseArgs),
    /// Score per-scene match/fusion artifacts against a dataset.
    Eval(EvalArgs),
    /// Run the full pipeline over a dataset directory.
    Run(RunArgs),
    /// Render a scene's matching as a side-by-side SVG overlay.
    Render(RenderArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    n_scenes: usize,
    /// Misalignment severity: aligned, weak, or heavy.
    #[arg(long, default_value = "heavy")]
    profile: String,
    #[arg(long, default_value_t = 4)]
    persons_min: usize,
    #[arg(long, default_value_t = 6)]
    persons_max: usize,
    /// Mock-provider attribute corruption probability baked into the config.
    #[arg(long, default_value_t = 0.0)]
    hallucination: f64,
    #[arg(long, default_value_t = 2.0)]
    jitter_px: f64,
    /// Detection drop probability, applied to both modalities.
    #[arg(long, default_value_t = 0.05)]
    drop_prob: f64,
    #[arg(long)]
    dataset_id: Option<String>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Description cache; attributes get attached to the NODE lines.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    /// Write graph_rgb.txt / graph_thermal.txt here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ProviderFlags {
    /// Pipeline configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Record every provider exchange as replay fixtures in this directory.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Serve live providers from fixtures in this directory; never touch
    /// the network.
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider_flags: ProviderFlags,
    /// Override the configured roster (comma separated).
    #[arg(long, value_delimiter = ',')]
    providers: Vec<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    margin_ratio: Option<f64>,
}

#[derive(Args)]
struct DebateArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Description cache produced by `describe`.
    #[arg(long)]
    descriptions: PathBuf,
    /// Adjudicated one-record-per-detection cache.
    #[arg(long)]
    out: PathBuf,
    /// Transcript sidecar (default: `transcripts.json` next to --out).
    #[arg(long)]
    transcripts: Option<PathBuf>,
    #[command(flatten)]
    provider_flags: ProviderFlags,
    #[arg(long, value_delimiter = ',')]
    debaters: Vec<String>,
    #[arg(long)]
    judge: Option<String>,
    #[arg(long)]
    max_rounds: Option<usize>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    matcher: Option<MatcherKind>,
    /// Description cache; first record per detection feeds the matcher.
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[command(flatten)]
    provider_flags: ProviderFlags,
    /// Provider answering the matching prompt (llm matcher).
    #[arg(long)]
    provider: Option<String>,
    #[arg(long)]
    w_pos: Option<f64>,
    #[arg(long)]
    w_attr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iou_thresh: Option<f64>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target frame: rgb or thermal.
    #[arg(long, default_value = "thermal")]
    frame: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory (index.json + scene manifests).
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding per-scene `<scene_id>/matches.json` and
    /// `fused.json`, as written by `run`.
    #[arg(long)]
    artifacts: PathBuf,
    /// Report output directory (default: the artifacts directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    ap_iou: f64,
    /// Matcher name shown in the report's Model column.
    #[arg(long, default_value = "unknown")]
    matcher_label: String,
    #[arg(long, default_value_t = false)]
    debate_label: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider_flags: ProviderFlags,
    #[arg(long, value_enum)]
    matcher: Option<MatcherKind>,
    /// Enable or disable the debate stage (on/off).
    #[arg(long, value_parser = clap::builder::BoolishValueParser::new())]
    debate: Option<bool>,
    /// Worker pool size for scene-level parallelism.
    #[arg(long, default_value_t = 4)]
    jobs: usize,
    #[arg(long)]
    match_provider: Option<String>,
    #[arg(long)]
    w_pos: Option<f64>,
    #[arg(long)]
    w_attr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iou_thresh: Option<f64>,
    #[arg(long)]
    ap_iou: Option<f64>,
    /// Fusion/evaluation frame: rgb or thermal.
    #[arg(long)]
    frame: Option<String>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    matches: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_frame(name: &str) -> anyhow::Result<Modality> {
    match name.to_ascii_lowercase().as_str() {
        "rgb" => Ok(Modality::Rgb),
        "thermal" => Ok(Modality::Thermal),
        other => Err(anyhow!(ConfigError::Bad(format!(
            "unknown frame `{other}`"
        )))),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(path) => Ok(PipelineConfig::load(path)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<i32> {
    let profile: SeverityProfile = args
        .profile
        .parse()
        .map_err(|e| anyhow!(ConfigError::Bad(format!("{e}"))))?;
    let config = SynthConfig {
        seed: args.seed,
        n_scenes: args.n_scenes,
        persons_per_scene: (args.persons_min, args.persons_max),
        misalignment: severity_profile(profile),
        detection_noise: xmodal_core::synthgen::DetectionNoise {
            jitter_px: args.jitter_px,
            drop_prob_rgb: args.drop_prob,
            drop_prob_thermal: args.drop_prob,
            ..Default::default()
        },
        hallucination_rate: args.hallucination,
        ..SynthConfig::default()
    };
    let scenes = generate(&config)?;
    let dataset_id = args
        .dataset_id
        .unwrap_or_else(|| format!("synth-{profile}-{}", args.seed));
    let index = synthgen::write_dataset(
        &scenes,
        &dataset_id,
        args.seed,
        Some(&args.profile),
        &args.out,
    )?;
    println!(
        "wrote {} scenes of dataset `{}` to {}",
        index.scenes.len(),
        index.dataset_id,
        args.out.display()
    );
    Ok(0)
}

fn cmd_graph(args: GraphArgs) -> anyhow::Result<i32> {
    let scene = scene_io::load_scene(&args.scene)?;
    let (rgb_desc, thermal_desc) = match &args.descriptions {
        Some(path) => split_first_records(&scene_io::load_descriptions(path)?),
        None => (BTreeMap::new(), BTreeMap::new()),
    };
    let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb)?;
    let thermal = build_graph(
        &scene.thermal_detections,
        scene.image_size_thermal,
        Modality::Thermal,
    )?;
    let rgb_text = serialize_graph(&rgb, Some(&rgb_desc))?;
    let thermal_text = serialize_graph(&thermal, Some(&thermal_desc))?;
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            scene_io::write_text_atomic(&rgb_text, &dir.join("graph_rgb.txt"))?;
            scene_io::write_text_atomic(&thermal_text, &dir.join("graph_thermal.txt"))?;
        }
        None => {
            println!("RGB graph:\n{rgb_text}\nThermal graph:\n{thermal_text}");
        }
    }
    Ok(0)
}

fn cmd_describe(args: DescribeArgs) -> anyhow::Result<i32> {
    let mut config = load_config(args.provider_flags.config.as_deref())?;
    if !args.providers.is_empty() {
        config.pipeline.roster = args.providers.clone();
    }
    if let Some(parallelism) = args.parallelism {
        config.pipeline.parallelism = parallelism;
    }
    if let Some(margin) = args.margin_ratio {
        config.pipeline.margin_ratio = margin;
    }
    config.validate()?;
    let registry = config.build_registry(
        args.provider_flags.record.as_deref(),
        args.provider_flags.replay.as_deref(),
    )?;
    let scene = scene_io::load_scene(&args.scene)?;
    let providers: Vec<std::sync::Arc<dyn ChatProvider>> = config
        .pipeline
        .roster
        .iter()
        .map(|name| registry.get(&name.as_str().into()).cloned())
        .collect::<Result<_, _>>()?;
    let outcome = describe_all(
        &scene,
        &providers,
        config.pipeline.parallelism,
        config.pipeline.margin_ratio,
    )?;
    scene_io::save_descriptions(&outcome.cache, &args.out)?;
    for failure in &outcome.failures {
        eprintln!(
            "describe failure: {} via {}: {}",
            failure.det_id, failure.provider, failure.message
        );
    }
    println!(
        "wrote {} records to {}",
        outcome.cache.records.len(),
        args.out.display()
    );
    Ok(if outcome.failures.is_empty() { 0 } else { 1 })
}

fn cmd_debate(args: DebateArgs) -> anyhow::Result<i32> {
    let mut config = load_config(args.provider_flags.config.as_deref())?;
    if !args.debaters.is_empty() {
        config.pipeline.roster = args.debaters.clone();
    }
    if let Some(judge) = &args.judge {
        config.pipeline.judge = judge.clone();
    }
    if let Some(max_rounds) = args.max_rounds {
        config.pipeline.max_rounds = max_rounds;
    }
    config.pipeline.debate = true;
    config.validate()?;
    let registry = config.build_registry(
        args.provider_flags.record.as_deref(),
        args.provider_flags.replay.as_deref(),
    )?;
    let scene = scene_io::load_scene(&args.scene)?;
    registry.observe_scene(&scene);
    let cache = scene_io::load_descriptions(&args.descriptions)?;
    let adjudication = adjudicate_scene(&scene, &cache, true, &config.debate_config(), &registry)?;

    let transcripts_path = args
        .transcripts
        .clone()
        .unwrap_or_else(|| args.out.with_file_name("transcripts.json"));
    let transcript_file_name = transcripts_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "transcripts.json".to_string());

    let mut verdicts = DescriptionCache {
        scene_id: scene.scene_id.clone(),
        records: Vec::new(),
    };
    for det in scene.rgb_detections.iter().chain(&scene.thermal_detections) {
        let map = match det.modality {
            Modality::Rgb => &adjudication.rgb,
            Modality::Thermal => &adjudication.thermal,
        };
        if let Some(record) = map.get(&det.det_id) {
            let debated = adjudication
                .transcripts
                .iter()
                .any(|t| t.det_id == det.det_id);
            verdicts.records.push(DescriptionRecord {
                det_id: det.det_id.clone(),
                modality: det.modality,
                provider: record.provenance.clone(),
                description_text: record.description_text.clone(),
                attributes: record.attributes.clone(),
                transcript_ref: debated.then(|| format!("{transcript_file_name}#{}", det.det_id)),
            });
        }
    }
    scene_io::save_descriptions(&verdicts, &args.out)?;
    scene_io::save_json(
        &pipeline::TranscriptsDoc {
            schema: SCHEMA_VERSION,
            scene_id: scene.scene_id.clone(),
            transcripts: adjudication.transcripts,
        },
        &transcripts_path,
    )?;
    println!(
        "wrote {} adjudicated records to {}",
        verdicts.records.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_match(args: MatchArgs) -> anyhow::Result<i32> {
    let mut config = load_config(args.provider_flags.config.as_deref())?;
    if let Some(matcher) = args.matcher {
        config.pipeline.matcher = matcher;
    }
    if let Some(provider) = &args.provider {
        config.pipeline.match_provider = Some(provider.clone());
    }
    if let Some(w_pos) = args.w_pos {
        config.pipeline.w_pos = w_pos;
    }
    if let Some(w_attr) = args.w_attr {
        config.pipeline.w_attr = w_attr;
    }
    if let Some(tau) = args.tau {
        config.pipeline.tau = tau;
    }
    if let Some(iou) = args.iou_thresh {
        config.pipeline.iou_thresh = iou;
    }
    config.validate()?;
    let scene = scene_io::load_scene(&args.scene)?;
    let (rgb_desc, thermal_desc) = match &args.descriptions {
        Some(path) => split_first_records(&scene_io::load_descriptions(path)?),
        None => (BTreeMap::new(), BTreeMap::new()),
    };
    let weights = config.weights();
    let matches = match config.pipeline.matcher {
        MatcherKind::Overlap => overlap_match(&scene, config.pipeline.iou_thresh)?,
        MatcherKind::Structural => {
            let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb)?;
            let thermal = build_graph(
                &scene.thermal_detections,
                scene.image_size_thermal,
                Modality::Thermal,
            )?;
            structural_match(
                &scene.scene_id,
                &rgb,
                &thermal,
                &rgb_desc,
                &thermal_desc,
                &weights,
            )?
        }
        MatcherKind::Llm => {
            let registry = config.build_registry(
                args.provider_flags.record.as_deref(),
                args.provider_flags.replay.as_deref(),
            )?;
            registry.observe_scene(&scene);
            let provider = registry.get(&config.match_provider())?;
            let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb)?;
            let thermal = build_graph(
                &scene.thermal_detections,
                scene.image_size_thermal,
                Modality::Thermal,
            )?;
            llm_match(
                &scene,
                &rgb,
                &thermal,
                &rgb_desc,
                &thermal_desc,
                provider.as_ref(),
                &weights,
            )?
        }
    };
    scene_io::save_matches(&matches, &args.out)?;
    println!(
        "matched {} pairs ({} rgb / {} thermal unmatched) -> {}",
        matches.pairs.len(),
        matches.unmatched_rgb.len(),
        matches.unmatched_thermal.len(),
        args.out.display()
    );
    Ok(0)
}

fn cmd_fuse(args: FuseArgs) -> anyhow::Result<i32> {
    let frame = parse_frame(&args.frame)?;
    let scene = scene_io::load_scene(&args.scene)?;
    let matches = scene_io::load_matches(&args.matches)?;
    let detections = fuse_scene(&scene, &matches, frame)?;
    let n = detections.len();
    xmodal_core::fusion::save_fused(
        &FusedDocument {
            schema: SCHEMA_VERSION,
            scene_id: scene.scene_id.clone(),
            frame,
            detections,
        },
        &args.out,
    )?;
    println!("wrote {n} fused detections to {}", args.out.display());
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<i32> {
    let (index, scenes) = synthgen::load_dataset(&args.dataset)?;
    let mut per_scene = Vec::new();
    let mut failures: Vec<SceneFailure> = Vec::new();
    let mut frame = Modality::Thermal;
    for scene in &scenes {
        let scene_dir = args.artifacts.join(&scene.scene_id);
        let load = || -> anyhow::Result<SceneEval> {
            let matches = scene_io::load_matches(&scene_dir.join("matches.json"))?;
            let fused = xmodal_core::fusion::load_fused(&scene_dir.join("fused.json"))?;
            let (n_mismatched, n_gt_pairs) = scene
                .gt_pairs
                .as_ref()
                .map(|gt| count_mismatches(gt, &matches))
                .unwrap_or((0, 0));
            Ok(SceneEval {
                scene_id: scene.scene_id.clone(),
                n_gt_pairs,
                n_mismatched,
                gt_boxes: pipeline::gt_boxes_for_ap(scene, fused.frame),
                fused: fused.detections,
            })
        };
        match load() {
            Ok(eval) => per_scene.push(eval),
            Err(e) => failures.push(SceneFailure {
                scene_id: scene.scene_id.clone(),
                error: format!("{e:#}"),
            }),
        }
    }
    if per_scene.is_empty() {
        bail!(
            "no scene artifacts found under {}",
            args.artifacts.display()
        );
    }
    if let Ok(first) = xmodal_core::fusion::load_fused(
        &args.artifacts.join(&scenes[0].scene_id).join("fused.json"),
    ) {
        frame = first.frame;
    }
    let report = aggregate_report(
        &per_scene,
        &index.dataset_id,
        &args.matcher_label,
        args.debate_label,
        args.ap_iou,
    )?;
    let table = render_report_table(&report);
    let out_dir = args.out.clone().unwrap_or_else(|| args.artifacts.clone());
    std::fs::create_dir_all(&out_dir)?;
    scene_io::save_json(
        &pipeline::ReportDoc {
            schema: SCHEMA_VERSION,
            report: report.clone(),
            fusion_frame: frame,
            failed_scenes: failures.clone(),
        },
        &out_dir.join("report.json"),
    )?;
    scene_io::write_text_atomic(&table, &out_dir.join("report.txt"))?;
    print!("{table}");
    Ok(if failures.is_empty() { 0 } else { 1 })
}

fn cmd_run(args: RunArgs) -> anyhow::Result<i32> {
    let mut config = load_config(args.provider_flags.config.as_deref())?;
    if let Some(matcher) = args.matcher {
        config.pipeline.matcher = matcher;
    }
    if let Some(debate) = args.debate {
        config.pipeline.debate = debate;
    }
    if let Some(provider) = &args.match_provider {
        config.pipeline.match_provider = Some(provider.clone());
    }
    if let Some(w_pos) = args.w_pos {
        config.pipeline.w_pos = w_pos;
    }
    if let Some(w_attr) = args.w_attr {
        config.pipeline.w_attr = w_attr;
    }
    if let Some(tau) = args.tau {
        config.pipeline.tau = tau;
    }
    if let Some(iou) = args.iou_thresh {
        config.pipeline.iou_thresh = iou;
    }
    if let Some(ap_iou) = args.ap_iou {
        config.pipeline.ap_iou = ap_iou;
    }
    if let Some(frame) = &args.frame {
        config.pipeline.fusion_frame = parse_frame(frame)?;
    }
    config.validate()?;
    let registry = config.build_registry(
        args.provider_flags.record.as_deref(),
        args.provider_flags.replay.as_deref(),
    )?;
    let outcome = pipeline::run_dataset_with_registry(
        &args.dataset,
        &args.out,
        &config,
        &registry,
        args.jobs,
    )?;
    print!("{}", outcome.table);
    for failure in &outcome.failures {
        eprintln!("scene {} failed: {}", failure.scene_id, failure.error);
    }
    Ok(if outcome.failures.is_empty() { 0 } else { 1 })
}

fn cmd_render(args: RenderArgs) -> anyhow::Result<i32> {
    let scene = scene_io::load_scene(&args.scene)?;
    let matches = scene_io::load_matches(&args.matches)?;
    let svg = render_svg(&scene, &matches)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    scene_io::write_text_atomic(&svg, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}

fn dispatch(command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Graph(args) => cmd_graph(args),
        Command::Describe(args) => cmd_describe(args),
        Command::Debate(args) => cmd_debate(args),
        Command::Match(args) => cmd_match(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Run(args) => cmd_run(args),
        Command::Render(args) => cmd_render(args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(error) => {
            eprintln!("error: {error:#}");
            if error.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Everything runs offline against deterministic mock providers; the
//! independent oracles (exhaustive Hamiltonian paths, Prim MST, permutation
//! assignment minimum) live in this file and never touch the library's own
//! algorithms.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use xmodal_cli::config::{MatcherKind, PipelineConfig, ProviderConfig};
use xmodal_cli::pipeline::run_dataset;
use xmodal_core::eval::{compute_aer, compute_ap};
use xmodal_core::fusion::{fuse_scores, FusedDetection, FusedSources};
use xmodal_core::matcher::assign::CostMatrix;
use xmodal_core::matcher::{render_match_reply, ParseErrorKind, ReplyParser};
use xmodal_core::posgraph::{build_graph, PositionalGraph};
use xmodal_core::scene_io::{BBox, Detection, MatchResult, Modality};
use xmodal_core::synthgen::{
    generate, severity_profile, write_dataset, DetectionNoise, SeverityProfile, SynthConfig,
};

fn pass(criterion: usize, name: &str) {
    println!("ACCEPTANCE {criterion} {name}: PASS");
}

// ---------------------------------------------------------------------------
// independent oracles
// ---------------------------------------------------------------------------

fn euclid(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Prim's algorithm; unconstrained MST total length.
fn oracle_mst_length(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..n {
        let u = (0..n)
            .filter(|&i| !in_tree[i])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]))
            .unwrap();
        in_tree[u] = true;
        total += best[u];
        for v in 0..n {
            if !in_tree[v] {
                best[v] = best[v].min(euclid(points[u], points[v]));
            }
        }
    }
    total
}

fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    fn recurse(order: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == order.len() {
            visit(order);
            return;
        }
        for i in k..order.len() {
            order.swap(k, i);
            recurse(order, k + 1, visit);
            order.swap(k, i);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    recurse(&mut order, 0, &mut visit);
}

/// Exhaustive minimum Hamiltonian path length over all orderings.
fn oracle_min_hamiltonian_path(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for_each_permutation(points.len(), |order| {
        let cost: f64 = order
            .windows(2)
            .map(|w| euclid(points[w[0]], points[w[1]]))
            .sum();
        if cost < best {
            best = cost;
        }
    });
    best
}

/// Exhaustive minimum assignment cost over all permutations.
fn oracle_min_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut best = f64::INFINITY;
    for_each_permutation(n, |order| {
        let total: f64 = order
            .iter()
            .enumerate()
            .map(|(row, &col)| cost[row][col])
            .sum();
        if total < best {
            best = total;
        }
    });
    best
}

fn assert_spanning_path(graph: &PositionalGraph) {
    let n = graph.nodes.len();
    assert_eq!(
        graph.edges.len(),
        n.saturating_sub(1),
        "spanning edge count"
    );
    for node in &graph.nodes {
        assert!(
            graph.degree(&node.det_id) <= 2,
            "degree cap at {}",
            node.det_id
        );
    }
    let order = graph.path_order();
    assert_eq!(order.len(), n, "path visits every node");
    let mut unique: Vec<&str> = order.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), n, "path visits nodes once");
}

fn detection(id: &str, modality: Modality, center: (f64, f64)) -> Detection {
    Detection {
        det_id: id.to_string(),
        modality,
        bbox: BBox::new(center.0 - 1.0, center.1 - 1.0, 2.0, 2.0),
        confidence: 0.9,
        gt_identity: None,
    }
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_graph_invariants() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(1001);
    for scene_index in 0..200 {
        let n = rng.random_range(2..=7);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
            .collect();
        let detections: Vec<Detection> = points
            .iter()
            .enumerate()
            .map(|(i, &p)| detection(&format!("N{i}"), Modality::Rgb, p))
            .collect();
        let graph = build_graph(&detections, (640, 480), Modality::Rgb).unwrap();
        assert_spanning_path(&graph);
        let total = graph.total_length();
        let mst = oracle_mst_length(&points);
        let ham = oracle_min_hamiltonian_path(&points);
        assert!(
            total + 1e-9 >= mst,
            "scene {scene_index}: total {total} < MST {mst}"
        );
        assert!(
            total + 1e-9 >= ham,
            "scene {scene_index}: total {total} < min path {ham}"
        );
    }
    assert!(
        started.elapsed() < Duration::from_secs(10),
        "runtime {:?}",
        started.elapsed()
    );
    pass(
        1,
        "graph invariants (200 scenes, spanning/acyclic/degree<=2, >= MST, >= min path)",
    );
}

#[test]
fn criterion_2_assignment_oracle() {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(2002);
    for case in 0..100 {
        let n = rng.random_range(1..=8usize);
        // dyadic entries (k/64) keep every sum exact in f64, so optimal
        // totals compare with == regardless of summation order
        let grid: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| f64::from(rng.random_range(0u32..256)) / 64.0)
                    .collect()
            })
            .collect();
        let matrix = CostMatrix::new(
            (0..n).map(|i| format!("R{i}")).collect(),
            (0..n).map(|j| format!("T{j}")).collect(),
            grid.iter().flatten().copied().collect(),
        )
        .unwrap();
        let pairs = matrix.assign(f64::INFINITY);
        assert_eq!(pairs.len(), n, "case {case}: full bijection expected");
        let total = matrix.total_cost(&pairs);
        let oracle = oracle_min_assignment(&grid);
        assert_eq!(total, oracle, "case {case} (n={n}): {total} != {oracle}");
    }
    assert!(
        started.elapsed() < Duration::from_secs(30),
        "runtime {:?}",
        started.elapsed()
    );
    pass(
        2,
        "assignment equals exhaustive permutation minimum (100 matrices, exact)",
    );
}

#[test]
fn criterion_3_parser_round_trip() {
    let mut rng = StdRng::seed_from_u64(3003);
    for case in 0..1000 {
        let n = rng.random_range(1..=20usize);
        let m = rng.random_range(1..=20usize);
        let rgb_ids: Vec<String> = (0..n).map(|i| format!("R{}", i + 1)).collect();
        let thermal_ids: Vec<String> = (0..m).map(|j| format!("T{}", j + 1)).collect();
        let mut rgb_order: Vec<usize> = (0..n).collect();
        let mut thermal_order: Vec<usize> = (0..m).collect();
        for i in (1..n).rev() {
            rgb_order.swap(i, rng.random_range(0..=i));
        }
        for i in (1..m).rev() {
            thermal_order.swap(i, rng.random_range(0..=i));
        }
        let k = rng.random_range(0..=n.min(m));
        let pairs: Vec<(String, String)> = (0..k)
            .map(|i| {
                (
                    rgb_ids[rgb_order[i]].clone(),
                    thermal_ids[thermal_order[i]].clone(),
                )
            })
            .collect();
        let reply = render_match_reply("round trip", &pairs);
        let parser = ReplyParser::new(
            rgb_ids.iter().map(String::as_str),
            thermal_ids.iter().map(String::as_str),
        );
        let parsed = parser
            .parse(&reply)
            .unwrap_or_else(|e| panic!("case {case}: {e}"));
        assert_eq!(parsed.pairs, pairs, "case {case}");
    }

    let parser = ReplyParser::new(["R1", "R2"], ["T1", "T2"]);
    let missing = parser
        .parse("Rationale: thinking...\nno result line")
        .unwrap_err();
    assert_eq!(missing.kind, ParseErrorKind::MissingMarker);
    assert!(missing.to_string().contains("line"), "{missing}");

    let duplicate = parser
        .parse("Matching result: (R1 : T1, R1 : T2)")
        .unwrap_err();
    assert_eq!(duplicate.kind, ParseErrorKind::DuplicateRgbId("R1".into()));
    assert!(duplicate.to_string().contains("column"), "{duplicate}");

    let unknown = parser.parse("Matching result: (R7 : T1)").unwrap_err();
    assert_eq!(unknown.kind, ParseErrorKind::UnknownId("R7".into()));
    assert!(unknown.to_string().contains("unknown id"), "{unknown}");

    pass(
        3,
        "1000 fuzzed render->parse identities; malformed classes rejected with diagnostics",
    );
}

#[test]
fn criterion_4_metric_correctness() {
    let gt: Vec<(String, String)> = (1..=4)
        .map(|i| (format!("R{i}"), format!("T{i}")))
        .collect();
    let result = |pairs: Vec<(String, String)>| MatchResult {
        scene_id: "s".into(),
        pairs,
        rationale: String::new(),
        unmatched_rgb: vec![],
        unmatched_thermal: vec![],
    };
    let perfect = result(gt.clone());
    assert_eq!(compute_aer(&gt, &perfect).unwrap().aer, 0.0);
    let deranged = result(
        (1..=4)
            .map(|i| (format!("R{i}"), format!("T{}", i % 4 + 1)))
            .collect(),
    );
    assert_eq!(compute_aer(&gt, &deranged).unwrap().aer, 1.0);
    let swapped = result(vec![
        ("R1".into(), "T1".into()),
        ("R2".into(), "T3".into()),
        ("R3".into(), "T2".into()),
        ("R4".into(), "T4".into()),
    ]);
    assert_eq!(compute_aer(&gt, &swapped).unwrap().aer, 0.5);

    // hand-computed PR fixture: TP at score .9, disjoint FP at .8 -> AP 1.0
    let gt_boxes = vec![BBox::new(0.0, 0.0, 30.0, 40.0)];
    let fused = vec![
        FusedDetection {
            bbox: BBox::new(0.0, 0.0, 30.0, 30.0),
            score: 0.9,
            sources: FusedSources::thermal_only("T1"),
        },
        FusedDetection {
            bbox: BBox::new(200.0, 200.0, 30.0, 40.0),
            score: 0.8,
            sources: FusedSources::thermal_only("T2"),
        },
    ];
    let ap = compute_ap(&fused, &gt_boxes, 0.5).unwrap();
    assert!((ap - 1.0).abs() < 1e-9, "AP fixture {ap}");

    // rank invariance: any strictly monotone score rescaling keeps AP
    let mut rng = StdRng::seed_from_u64(4004);
    for seed in 0..50 {
        let gt_boxes: Vec<BBox> = (0..4)
            .map(|i| BBox::new(120.0 * i as f64, 0.0, 30.0, 60.0))
            .collect();
        let fused: Vec<FusedDetection> = (0..7)
            .map(|i| {
                let on_target = rng.random_bool(0.55);
                let x = if on_target {
                    120.0 * (i % 4) as f64 + rng.random_range(-4.0..4.0)
                } else {
                    900.0 + 40.0 * i as f64
                };
                FusedDetection {
                    bbox: BBox::new(x, 0.0, 30.0, 60.0),
                    score: rng.random_range(0.05..0.95),
                    sources: FusedSources::thermal_only(format!("T{i}")),
                }
            })
            .collect();
        let base = compute_ap(&fused, &gt_boxes, 0.5).unwrap();
        let rescaled: Vec<FusedDetection> = fused
            .iter()
            .map(|f| FusedDetection {
                score: (0.2 + 0.79 * f.score).powi(3).clamp(0.0, 1.0),
                ..f.clone()
            })
            .collect();
        let transformed = compute_ap(&rescaled, &gt_boxes, 0.5).unwrap();
        assert!(
            (base - transformed).abs() < 1e-12,
            "seed {seed}: {base} vs {transformed}"
        );
    }
    pass(
        4,
        "AER examples exact; AP fixture to 1e-9; AP rank-invariant over 50 seeds",
    );
}

#[test]
fn criterion_5_fusion_laws() {
    for i in 0..=100 {
        let s = i as f64 / 100.0;
        assert!(
            (fuse_scores(s, 0.5) - s).abs() < 1e-12,
            "neutral element at {s}"
        );
    }
    for i in 0..=50 {
        for j in 0..=50 {
            let a = i as f64 / 50.0;
            let b = j as f64 / 50.0;
            assert_eq!(
                fuse_scores(a, b),
                fuse_scores(b, a),
                "symmetry at ({a}, {b})"
            );
            if a > 0.5 && b > 0.5 {
                assert!(
                    fuse_scores(a, b) >= a.max(b) - 1e-12,
                    "amplification at ({a}, {b})"
                );
            }
            if a < 0.5 && b < 0.5 {
                assert!(
                    fuse_scores(a, b) <= a.min(b) + 1e-12,
                    "attenuation at ({a}, {b})"
                );
            }
        }
    }
    assert!((fuse_scores(0.8, 0.9) - 0.97297).abs() < 1e-5);
    pass(
        5,
        "score fusion laws (neutral 0.5, symmetry, agreement amplification, derived value)",
    );
}

/// The fixed synthetic benchmark behind criterion 6: 100 heavy-misalignment
/// scenes, seed 42, ~5 persons per scene.
fn heavy_benchmark(dir: &Path) {
    let config = SynthConfig {
        seed: 42,
        n_scenes: 100,
        persons_per_scene: (4, 6),
        misalignment: severity_profile(SeverityProfile::Heavy),
        ..SynthConfig::default()
    };
    let scenes = generate(&config).unwrap();
    write_dataset(&scenes, "heavy-42", 42, Some("heavy"), dir).unwrap();
}

fn mock_config(hallucination: f64, debate: bool) -> PipelineConfig {
    let mut config = PipelineConfig::default();
    config.providers.clear();
    for (name, seed) in [("mock1", 101u64), ("mock2", 202), ("mock3", 303)] {
        config.providers.insert(
            name.to_string(),
            ProviderConfig::Mock {
                seed,
                hallucination,
            },
        );
    }
    config.pipeline.roster = vec!["mock1".into(), "mock2".into(), "mock3".into()];
    config.pipeline.judge = "mock1".to_string();
    config.pipeline.debate = debate;
    config.pipeline.matcher = MatcherKind::Structural;
    config
}

#[test]
fn criterion_6_directional_table_reproduction() {
    let started = Instant::now();
    let dataset = tempfile::tempdir().unwrap();
    heavy_benchmark(dataset.path());

    // (a) overlap matcher, the baseline proxy: heavy misalignment defeats
    // the overlap assumption
    let mut overlap_config = PipelineConfig::default();
    overlap_config.pipeline.matcher = MatcherKind::Overlap;
    let out = tempfile::tempdir().unwrap();
    let overlap = run_dataset(dataset.path(), out.path(), &overlap_config, 4).unwrap();
    assert!(overlap.failures.is_empty());
    let overlap_aer = overlap.report.aer.expect("gt present");
    assert!(overlap_aer >= 0.60, "overlap AER {overlap_aer}");

    // (b) structural matcher with noiseless mock descriptions
    let out = tempfile::tempdir().unwrap();
    let structural = run_dataset(dataset.path(), out.path(), &mock_config(0.0, false), 4).unwrap();
    assert!(structural.failures.is_empty());
    let structural_aer = structural.report.aer.expect("gt present");
    assert!(structural_aer <= 0.15, "structural AER {structural_aer}");

    // (c) hallucination 0.3: debate on strictly beats debate off
    let out = tempfile::tempdir().unwrap();
    let no_debate = run_dataset(dataset.path(), out.path(), &mock_config(0.3, false), 4).unwrap();
    let out = tempfile::tempdir().unwrap();
    let with_debate = run_dataset(dataset.path(), out.path(), &mock_config(0.3, true), 4).unwrap();
    let aer_off = no_debate.report.aer.expect("gt present");
    let aer_on = with_debate.report.aer.expect("gt present");
    assert!(
        aer_on < aer_off,
        "debate must strictly decrease AER: on {aer_on} vs off {aer_off}"
    );

    assert!(
        started.elapsed() < Duration::from_secs(300),
        "runtime {:?}",
        started.elapsed()
    );
    println!(
        "  overlap AER {overlap_aer:.3}, structural AER {structural_aer:.3}, debate {aer_off:.3} -> {aer_on:.3}"
    );
    pass(
        6,
        "directional reproduction (baseline >= 0.60, structural <= 0.15, debate improves)",
    );
}

#[test]
fn criterion_7_end_to_end_determinism() {
    let binary = env!("CARGO_BIN_EXE_xmodal");
    let dataset = tempfile::tempdir().unwrap();
    heavy_benchmark(dataset.path());
    let config_path = dataset.path().join("pipeline.toml");
    let config_text = r#"
[pipeline]
roster = ["mock1", "mock2", "mock3"]
judge = "mock1"
debate = true
matcher = "structural"

[providers.mock1]
kind = "mock"
seed = 101
hallucination = 0.3

[providers.mock2]
kind = "mock"
seed = 202
hallucination = 0.3

[providers.mock3]
kind = "mock"
seed = 303
hallucination = 0.3
"#;
    std::fs::write(&config_path, config_text).unwrap();

    let run = |out: &Path, jobs: usize| {
        let status = Command::new(binary)
            .args(["run", "--dataset"])
            .arg(dataset.path())
            .arg("--out")
            .arg(out)
            .arg("--config")
            .arg(&config_path)
            .args(["--jobs", &jobs.to_string()])
            .status()
            .expect("spawning xmodal");
        assert!(status.success(), "run exited with {status}");
    };
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    run(out_a.path(), 2);
    run(out_b.path(), 7);

    let report_a = std::fs::read(out_a.path().join("report.json")).unwrap();
    let report_b = std::fs::read(out_b.path().join("report.json")).unwrap();
    assert_eq!(report_a, report_b, "report.json must be byte-identical");

    let mut svg_count = 0;
    for entry in std::fs::read_dir(out_a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().ends_with(".svg") {
            svg_count += 1;
            let a = std::fs::read(out_a.path().join(&name)).unwrap();
            let b = std::fs::read(out_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} must be byte-identical");
        }
    }
    assert_eq!(svg_count, 100, "one SVG per scene");
    pass(
        7,
        "repeated runs produce byte-identical report.json and SVGs",
    );
}

#[test]
fn criterion_8_aligned_profile_sanity() {
    let dataset = tempfile::tempdir().unwrap();
    let config = SynthConfig {
        seed: 8,
        n_scenes: 25,
        persons_per_scene: (4, 6),
        misalignment: severity_profile(SeverityProfile::Aligned),
        detection_noise: DetectionNoise {
            jitter_px: 0.0,
            drop_prob_rgb: 0.0,
            drop_prob_thermal: 0.0,
            confidence_beta: (5.0, 1.5),
        },
        ..SynthConfig::default()
    };
    let scenes = generate(&config).unwrap();
    write_dataset(&scenes, "aligned-8", 8, Some("aligned"), dataset.path()).unwrap();

    let mut structural_config = PipelineConfig::default();
    structural_config.pipeline.matcher = MatcherKind::Structural;
    let out = tempfile::tempdir().unwrap();
    let structural = run_dataset(dataset.path(), out.path(), &structural_config, 4).unwrap();
    assert_eq!(
        structural.report.aer,
        Some(0.0),
        "structural AER on aligned data"
    );
    assert_eq!(structural.report.ap, Some(1.0), "fused AP on aligned data");

    let mut overlap_config = PipelineConfig::default();
    overlap_config.pipeline.matcher = MatcherKind::Overlap;
    let out = tempfile::tempdir().unwrap();
    let overlap = run_dataset(dataset.path(), out.path(), &overlap_config, 4).unwrap();
    assert_eq!(overlap.report.aer, Some(0.0), "overlap AER on aligned data");
    assert_eq!(overlap.report.ap, Some(1.0), "fused AP on aligned data");

    pass(
        8,
        "aligned profile: AER 0 for structural and overlap; fused AP 1.0",
    );
}

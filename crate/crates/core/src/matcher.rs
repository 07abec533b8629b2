//! Cross-modal identity matching.
//!
//! Three matchers produce [`MatchResult`]s:
//!
//! * [`llm_match`] — prompts a provider with both serialized positional
//!   graphs and parses the strictly formatted reply, re-prompting on format
//!   violations and falling back to the structural matcher when the reply
//!   stays unparseable;
//! * [`structural_match`] — deterministic assignment on a positional +
//!   appearance cost matrix; doubles as the offline matcher and the test
//!   oracle for the LLM path;
//! * [`overlap_match`] — greedy IoU pairing that emulates the overlap
//!   assumption conventional late fusion relies on; the provider-free
//!   baseline.

pub mod assign;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::attrs::dissimilarity;
use crate::posgraph::{serialize_graph, GraphError, PositionalGraph};
use crate::provider::{chat_with_retry, ChatProvider, ChatRequest, ProviderError};
use crate::scene_io::{AppearanceRecord, BBox, MatchResult, Modality, ScenePair};
use assign::CostMatrix;

/// Leading phrase of every matching prompt; mocks key on it.
pub const MATCH_PROMPT_MARKER: &str = "This labeling system";

const REPLY_MARKER: &str = "matching result:";

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("graph serialization for the {0} modality is empty")]
    EmptyGraphText(Modality),
    #[error("invalid cost matrix: {message}")]
    BadCostMatrix { message: String },
    #[error("weights must be nonnegative and not both zero (w_pos={w_pos}, w_attr={w_attr})")]
    BadWeights { w_pos: f64, w_attr: f64 },
    #[error("iou threshold must lie strictly between 0 and 1, got {0}")]
    BadIouThreshold(f64),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    MissingMarker,
    Malformed(String),
    UnknownId(String),
    DuplicateRgbId(String),
    DuplicateThermalId(String),
}

/// Reply-format violation with the position (1-based line and column) of
/// the offending token.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: ", self.line, self.column)?;
        match &self.kind {
            ParseErrorKind::MissingMarker => {
                write!(f, "reply has no `Matching result:` line")
            }
            ParseErrorKind::Malformed(msg) => write!(f, "{msg}"),
            ParseErrorKind::UnknownId(id) => write!(f, "unknown id token `{id}`"),
            ParseErrorKind::DuplicateRgbId(id) => write!(f, "duplicate RGB id `{id}`"),
            ParseErrorKind::DuplicateThermalId(id) => write!(f, "duplicate thermal id `{id}`"),
        }
    }
}

/// Build the matching prompt from the two graph serializations. The answer
/// format stanza is fixed; replies are parsed against it.
pub fn build_match_prompt(
    rgb_graph_text: &str,
    thermal_graph_text: &str,
) -> Result<String, MatchError> {
    if rgb_graph_text.trim().is_empty() {
        return Err(MatchError::EmptyGraphText(Modality::Rgb));
    }
    if thermal_graph_text.trim().is_empty() {
        return Err(MatchError::EmptyGraphText(Modality::Thermal));
    }
    Ok(format!(
        "{MATCH_PROMPT_MARKER} is designed to assist you in matching the people in misaligned \
         thermal images and RGB images. Each image is summarized as a positional graph: NODE \
         lines carry a person's label, normalized position, and appearance attributes when \
         available; EDGE lines carry pixel distances between neighboring people.\n\
         \n\
         RGB graph:\n\
         {rgb}\n\
         Thermal graph:\n\
         {thermal}\n\
         Match each RGB person to the thermal person showing the same individual, using \
         relative positions, chain ordering, and appearance. Please answer in the following \
         format.\n\
         Rationale: write your rational\n\
         Matching result: (RGB_person1 : T_person1, RGB_person2 : T_person2, ...)",
        rgb = rgb_graph_text,
        thermal = thermal_graph_text,
    ))
}

/// Parsed reply: free-text rationale and the declared id pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReply {
    pub rationale: String,
    pub pairs: Vec<(String, String)>,
}

/// Parser for the strict reply grammar, resolving ids against the scene.
///
/// Accepted id forms per side: the raw det_id, or the positional alias
/// `RGB_person<k>` / `T_person<k>` (1-based index into the respective
/// detection list). Whitespace is insignificant everywhere.
pub struct ReplyParser<'a> {
    rgb_ids: Vec<&'a str>,
    thermal_ids: Vec<&'a str>,
}

fn position_of(text: &str, byte_offset: usize) -> (usize, usize) {
    let clamped = byte_offset.min(text.len());
    let prefix = &text.as_bytes()[..clamped];
    let line = prefix.iter().filter(|&&b| b == b'\n').count() + 1;
    let column = prefix
        .iter()
        .rposition(|&b| b == b'\n')
        .map(|idx| clamped - idx)
        .unwrap_or(clamped + 1);
    (line, column)
}

// byte-level ASCII case folding; safe on arbitrary (multi-byte) reply text
fn starts_with_ignore_case(text: &str, prefix: &str) -> bool {
    text.len() >= prefix.len()
        && text.as_bytes()[..prefix.len()].eq_ignore_ascii_case(prefix.as_bytes())
}

fn find_ignore_case(text: &str, needle: &str) -> Option<usize> {
    text.as_bytes()
        .windows(needle.len())
        .position(|window| window.eq_ignore_ascii_case(needle.as_bytes()))
}

impl<'a> ReplyParser<'a> {
    pub fn new(
        rgb_ids: impl IntoIterator<Item = &'a str>,
        thermal_ids: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        ReplyParser {
            rgb_ids: rgb_ids.into_iter().collect(),
            thermal_ids: thermal_ids.into_iter().collect(),
        }
    }

    pub fn for_scene(scene: &'a ScenePair) -> Self {
        ReplyParser::new(
            scene.rgb_detections.iter().map(|d| d.det_id.as_str()),
            scene.thermal_detections.iter().map(|d| d.det_id.as_str()),
        )
    }

    fn resolve(
        &self,
        token: &str,
        ids: &[&'a str],
        aliases: &[&str],
        at: (usize, usize),
    ) -> Result<String, ParseError> {
        if let Some(&known) = ids.iter().find(|&&id| id == token) {
            return Ok(known.to_string());
        }
        for alias in aliases {
            if token.len() > alias.len() && starts_with_ignore_case(token, alias) {
                if let Ok(k) = token[alias.len()..].parse::<usize>() {
                    if k >= 1 && k <= ids.len() {
                        return Ok(ids[k - 1].to_string());
                    }
                }
            }
        }
        Err(ParseError {
            kind: ParseErrorKind::UnknownId(token.to_string()),
            line: at.0,
            column: at.1,
        })
    }

    pub fn parse(&self, text: &str) -> Result<ParsedReply, ParseError> {
        // locate the marker line
        let mut marker_end: Option<usize> = None;
        let mut rationale_lines: Vec<&str> = Vec::new();
        let mut offset = 0usize;
        for line in text.split_inclusive('\n') {
            if starts_with_ignore_case(line.trim(), REPLY_MARKER) {
                let in_line = find_ignore_case(line, REPLY_MARKER).expect("trimmed line matched");
                marker_end = Some(offset + in_line + REPLY_MARKER.len());
                break;
            }
            rationale_lines.push(line.trim_end_matches('\n'));
            offset += line.len();
        }
        let Some(marker_end) = marker_end else {
            let (line, column) = position_of(text, text.len());
            return Err(ParseError {
                kind: ParseErrorKind::MissingMarker,
                line,
                column,
            });
        };

        let rationale = {
            let mut joined = rationale_lines.join("\n");
            let trimmed = joined.trim_start();
            if starts_with_ignore_case(trimmed, "rationale:") {
                joined = trimmed["rationale:".len()..].to_string();
            }
            joined.trim().to_string()
        };

        // pair list: everything between the first '(' after the marker and
        // the next ')'
        let open = text[marker_end..].find('(').map(|i| marker_end + i);
        let close = open.and_then(|open| text[open..].find(')').map(|i| open + i));
        let (open, close) = match (open, close) {
            (Some(open), Some(close)) if close > open => (open, close),
            _ => {
                let (line, column) = position_of(text, marker_end);
                return Err(ParseError {
                    kind: ParseErrorKind::Malformed(
                        "expected a parenthesized pair list after `Matching result:`".to_string(),
                    ),
                    line,
                    column,
                });
            }
        };
        let content = &text[open + 1..close];

        let mut pairs = Vec::new();
        let mut rgb_seen: BTreeSet<String> = BTreeSet::new();
        let mut thermal_seen: BTreeSet<String> = BTreeSet::new();
        let mut token_start = 0usize;
        for token in content.split(',') {
            let offset_in_text = open + 1 + token_start;
            token_start += token.len() + 1;
            let trimmed = token.trim();
            if trimmed.is_empty() || trimmed == "..." {
                // tolerate trailing commas and literal ellipses
                continue;
            }
            let at = position_of(
                text,
                offset_in_text + (token.len() - token.trim_start().len()),
            );
            let Some((lhs, rhs)) = trimmed.split_once(':') else {
                return Err(ParseError {
                    kind: ParseErrorKind::Malformed(format!(
                        "pair `{trimmed}` must have the form `<rgb id> : <thermal id>`"
                    )),
                    line: at.0,
                    column: at.1,
                });
            };
            let rgb = self.resolve(lhs.trim(), &self.rgb_ids, &["RGB_person"], at)?;
            let thermal = self.resolve(
                rhs.trim(),
                &self.thermal_ids,
                &["T_person", "Thermal_person"],
                at,
            )?;
            if !rgb_seen.insert(rgb.clone()) {
                return Err(ParseError {
                    kind: ParseErrorKind::DuplicateRgbId(rgb),
                    line: at.0,
                    column: at.1,
                });
            }
            if !thermal_seen.insert(thermal.clone()) {
                return Err(ParseError {
                    kind: ParseErrorKind::DuplicateThermalId(thermal),
                    line: at.0,
                    column: at.1,
                });
            }
            pairs.push((rgb, thermal));
        }
        Ok(ParsedReply { rationale, pairs })
    }
}

/// Render a pairing in the exact reply format the parser accepts; the
/// parse-render identity is a tested invariant.
pub fn render_match_reply(rationale: &str, pairs: &[(String, String)]) -> String {
    let rendered: Vec<String> = pairs.iter().map(|(r, t)| format!("{r} : {t}")).collect();
    format!(
        "Rationale: {rationale}\nMatching result: ({})",
        rendered.join(", ")
    )
}

/// Matcher weighting: `cost = w_pos * position_term + w_attr *
/// attribute_dissimilarity`, with pairs above `tau` left unmatched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights {
    pub w_pos: f64,
    pub w_attr: f64,
    pub tau: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            w_pos: 1.0,
            w_attr: 1.0,
            tau: 1.5,
        }
    }
}

impl MatchWeights {
    fn validate(&self) -> Result<(), MatchError> {
        let ok = self.w_pos.is_finite()
            && self.w_attr.is_finite()
            && self.w_pos >= 0.0
            && self.w_attr >= 0.0
            && (self.w_pos > 0.0 || self.w_attr > 0.0);
        if ok {
            Ok(())
        } else {
            Err(MatchError::BadWeights {
                w_pos: self.w_pos,
                w_attr: self.w_attr,
            })
        }
    }
}

fn unmatched_of(graph: &PositionalGraph, taken: &BTreeSet<&str>) -> Vec<String> {
    graph
        .nodes
        .iter()
        .filter(|n| !taken.contains(n.det_id.as_str()))
        .map(|n| n.det_id.clone())
        .collect()
}

/// Build the positional + appearance cost matrix between two graphs.
///
/// Position term: Euclidean distance of normalized centers plus the
/// difference of normalized path positions (the node's ordinal along its
/// Hamiltonian path, both translation-invariant). Attribute term: fraction
/// of disagreeing attribute keys between the two descriptions.
pub fn build_cost_matrix(
    rgb_graph: &PositionalGraph,
    thermal_graph: &PositionalGraph,
    rgb_descriptions: &BTreeMap<String, AppearanceRecord>,
    thermal_descriptions: &BTreeMap<String, AppearanceRecord>,
    weights: &MatchWeights,
) -> Result<CostMatrix, MatchError> {
    weights.validate()?;
    let rgb_pathpos = rgb_graph.path_positions();
    let thermal_pathpos = thermal_graph.path_positions();
    let empty = crate::attrs::Attributes::new();
    let attrs_of = |descriptions: &BTreeMap<String, AppearanceRecord>, id: &str| {
        descriptions
            .get(id)
            .map(|r| r.attributes.clone())
            .unwrap_or_else(|| empty.clone())
    };
    let mut cost = Vec::with_capacity(rgb_graph.nodes.len() * thermal_graph.nodes.len());
    for r in &rgb_graph.nodes {
        let r_attrs = attrs_of(rgb_descriptions, &r.det_id);
        for t in &thermal_graph.nodes {
            let dx = r.normalized_center.0 - t.normalized_center.0;
            let dy = r.normalized_center.1 - t.normalized_center.1;
            let pos = (dx * dx + dy * dy).sqrt()
                + (rgb_pathpos[r.det_id.as_str()] - thermal_pathpos[t.det_id.as_str()]).abs();
            let attr = dissimilarity(&r_attrs, &attrs_of(thermal_descriptions, &t.det_id));
            cost.push(weights.w_pos * pos + weights.w_attr * attr);
        }
    }
    CostMatrix::new(
        rgb_graph.nodes.iter().map(|n| n.det_id.clone()).collect(),
        thermal_graph
            .nodes
            .iter()
            .map(|n| n.det_id.clone())
            .collect(),
        cost,
    )
}

/// Deterministic matcher: minimum-cost assignment over the positional +
/// appearance cost matrix. Empty inputs yield an empty result.
pub fn structural_match(
    scene_id: &str,
    rgb_graph: &PositionalGraph,
    thermal_graph: &PositionalGraph,
    rgb_descriptions: &BTreeMap<String, AppearanceRecord>,
    thermal_descriptions: &BTreeMap<String, AppearanceRecord>,
    weights: &MatchWeights,
) -> Result<MatchResult, MatchError> {
    let matrix = build_cost_matrix(
        rgb_graph,
        thermal_graph,
        rgb_descriptions,
        thermal_descriptions,
        weights,
    )?;
    let mut assigned = matrix.assign(weights.tau);
    assigned.sort_by_key(|&(i, _)| i);
    let pairs: Vec<(String, String)> = assigned
        .iter()
        .map(|&(i, j)| (matrix.row_ids()[i].clone(), matrix.col_ids()[j].clone()))
        .collect();
    let unmatched_rgb = {
        let taken: BTreeSet<&str> = pairs.iter().map(|(r, _)| r.as_str()).collect();
        unmatched_of(rgb_graph, &taken)
    };
    let unmatched_thermal = {
        let taken: BTreeSet<&str> = pairs.iter().map(|(_, t)| t.as_str()).collect();
        unmatched_of(thermal_graph, &taken)
    };
    Ok(MatchResult {
        scene_id: scene_id.to_string(),
        pairs,
        rationale: format!(
            "structural assignment (w_pos={}, w_attr={}, tau={})",
            weights.w_pos, weights.w_attr, weights.tau
        ),
        unmatched_rgb,
        unmatched_thermal,
    })
}

/// Baseline matcher emulating conventional fusion's overlap assumption:
/// greedy descending-IoU pairing of cross-modal boxes in normalized
/// coordinates; pairs below the threshold stay unmatched.
pub fn overlap_match(scene: &ScenePair, iou_threshold: f64) -> Result<MatchResult, MatchError> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(MatchError::BadIouThreshold(iou_threshold));
    }
    let normalized = |bbox: &BBox, (w, h): (u32, u32)| {
        BBox::new(
            bbox.x / f64::from(w),
            bbox.y / f64::from(h),
            bbox.w / f64::from(w),
            bbox.h / f64::from(h),
        )
    };
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, r) in scene.rgb_detections.iter().enumerate() {
        let rb = normalized(&r.bbox, scene.image_size_rgb);
        for (j, t) in scene.thermal_detections.iter().enumerate() {
            let iou = rb.iou(&normalized(&t.bbox, scene.image_size_thermal));
            if iou >= iou_threshold {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|(ia, ra, ta), (ib, rb, tb)| {
        ib.total_cmp(ia)
            .then_with(|| {
                scene.rgb_detections[*ra]
                    .det_id
                    .cmp(&scene.rgb_detections[*rb].det_id)
            })
            .then_with(|| {
                scene.thermal_detections[*ta]
                    .det_id
                    .cmp(&scene.thermal_detections[*tb].det_id)
            })
    });
    let mut rgb_used = vec![false; scene.rgb_detections.len()];
    let mut thermal_used = vec![false; scene.thermal_detections.len()];
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    for (_, i, j) in candidates {
        if !rgb_used[i] && !thermal_used[j] {
            rgb_used[i] = true;
            thermal_used[j] = true;
            chosen.push((i, j));
        }
    }
    chosen.sort_by_key(|&(i, _)| i);
    Ok(MatchResult {
        scene_id: scene.scene_id.clone(),
        pairs: chosen
            .iter()
            .map(|&(i, j)| {
                (
                    scene.rgb_detections[i].det_id.clone(),
                    scene.thermal_detections[j].det_id.clone(),
                )
            })
            .collect(),
        rationale: format!("greedy IoU overlap matching (threshold={iou_threshold})"),
        unmatched_rgb: scene
            .rgb_detections
            .iter()
            .zip(&rgb_used)
            .filter(|(_, used)| !**used)
            .map(|(d, _)| d.det_id.clone())
            .collect(),
        unmatched_thermal: scene
            .thermal_detections
            .iter()
            .zip(&thermal_used)
            .filter(|(_, used)| !**used)
            .map(|(d, _)| d.det_id.clone())
            .collect(),
    })
}

/// Number of prompt attempts before falling back to the structural matcher
/// (1 initial + 2 re-prompts).
const LLM_MATCH_ATTEMPTS: usize = 3;

/// Prompt a provider to produce the matching and parse its reply.
///
/// Scenes missing detections on either side resolve without any provider
/// call. Replies violating the format are re-prompted twice with a strict
/// format reminder; if all attempts stay unparseable the structural matcher
/// decides and the fallback is flagged in the rationale.
#[allow(clippy::too_many_arguments)]
pub fn llm_match(
    scene: &ScenePair,
    rgb_graph: &PositionalGraph,
    thermal_graph: &PositionalGraph,
    rgb_descriptions: &BTreeMap<String, AppearanceRecord>,
    thermal_descriptions: &BTreeMap<String, AppearanceRecord>,
    provider: &dyn ChatProvider,
    weights: &MatchWeights,
) -> Result<MatchResult, MatchError> {
    if scene.rgb_detections.is_empty() || scene.thermal_detections.is_empty() {
        return Ok(MatchResult {
            scene_id: scene.scene_id.clone(),
            pairs: Vec::new(),
            rationale: "degenerate scene: one modality has no detections".to_string(),
            unmatched_rgb: scene
                .rgb_detections
                .iter()
                .map(|d| d.det_id.clone())
                .collect(),
            unmatched_thermal: scene
                .thermal_detections
                .iter()
                .map(|d| d.det_id.clone())
                .collect(),
        });
    }
    let rgb_text = serialize_graph(rgb_graph, Some(rgb_descriptions))?;
    let thermal_text = serialize_graph(thermal_graph, Some(thermal_descriptions))?;
    let base_prompt = build_match_prompt(&rgb_text, &thermal_text)?;
    let parser = ReplyParser::for_scene(scene);

    let mut prompt = base_prompt;
    let mut last_error: Option<ParseError> = None;
    for attempt in 0..LLM_MATCH_ATTEMPTS {
        if attempt > 0 {
            prompt.push_str("\nAnswer strictly in the required format.");
        }
        let reply = chat_with_retry(provider, &ChatRequest::text(prompt.clone()))?;
        match parser.parse(&reply) {
            Ok(parsed) => {
                let rgb_taken: BTreeSet<&str> =
                    parsed.pairs.iter().map(|(r, _)| r.as_str()).collect();
                let thermal_taken: BTreeSet<&str> =
                    parsed.pairs.iter().map(|(_, t)| t.as_str()).collect();
                return Ok(MatchResult {
                    scene_id: scene.scene_id.clone(),
                    pairs: parsed.pairs.clone(),
                    rationale: parsed.rationale,
                    unmatched_rgb: unmatched_of(rgb_graph, &rgb_taken),
                    unmatched_thermal: unmatched_of(thermal_graph, &thermal_taken),
                });
            }
            Err(err) => {
                log::warn!(
                    "provider `{}` reply failed to parse (attempt {}): {err}",
                    provider.id(),
                    attempt + 1
                );
                last_error = Some(err);
            }
        }
    }

    let last_error = last_error.expect("loop ran LLM_MATCH_ATTEMPTS times");
    let mut fallback = structural_match(
        &scene.scene_id,
        rgb_graph,
        thermal_graph,
        rgb_descriptions,
        thermal_descriptions,
        weights,
    )?;
    fallback.rationale = format!(
        "structural fallback after {LLM_MATCH_ATTEMPTS} unparseable replies from `{}` ({last_error}); {}",
        provider.id(),
        fallback.rationale
    );
    Ok(fallback)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posgraph::build_graph;
    use crate::provider::ProviderId;
    use crate::scene_io::Detection;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn det(id: &str, modality: Modality, cx: f64, cy: f64) -> Detection {
        Detection {
            det_id: id.into(),
            modality,
            bbox: BBox::new(cx - 10.0, cy - 20.0, 20.0, 40.0),
            confidence: 0.9,
            gt_identity: None,
        }
    }

    fn two_by_two_scene() -> ScenePair {
        ScenePair {
            scene_id: "s".into(),
            rgb_image: None,
            thermal_image: None,
            image_size_rgb: (640, 480),
            image_size_thermal: (640, 480),
            rgb_detections: vec![
                det("R1", Modality::Rgb, 100.0, 100.0),
                det("R2", Modality::Rgb, 500.0, 300.0),
            ],
            thermal_detections: vec![
                det("T1", Modality::Thermal, 100.0, 100.0),
                det("T2", Modality::Thermal, 500.0, 300.0),
            ],
            gt_pairs: None,
        }
    }

    fn parser() -> ReplyParser<'static> {
        ReplyParser::new(["R1", "R2"], ["T1", "T2"])
    }

    #[test]
    fn prompt_contains_graphs_and_format_stanza() {
        let prompt =
            build_match_prompt("NODE R1 pos=(0.1,0.1)\n", "NODE T1 pos=(0.2,0.2)\n").unwrap();
        assert!(prompt.contains("NODE R1"));
        assert!(prompt.contains("NODE T1"));
        assert!(prompt.contains("Rationale: write your rational"));
        assert!(prompt.contains("Matching result: (RGB_person1 : T_person1"));
        let again =
            build_match_prompt("NODE R1 pos=(0.1,0.1)\n", "NODE T1 pos=(0.2,0.2)\n").unwrap();
        assert_eq!(prompt, again);
    }

    #[test]
    fn empty_graph_text_is_rejected() {
        assert!(matches!(
            build_match_prompt("", "NODE T1 pos=(0.2,0.2)\n"),
            Err(MatchError::EmptyGraphText(Modality::Rgb))
        ));
    }

    #[test]
    fn parses_the_alias_reply_format() {
        let reply = "Rationale: nearest ordering.\nMatching result: (RGB_person1 : T_person2, RGB_person2 : T_person1)";
        let parsed = parser().parse(reply).unwrap();
        assert_eq!(parsed.rationale, "nearest ordering.");
        assert_eq!(
            parsed.pairs,
            vec![
                ("R1".to_string(), "T2".to_string()),
                ("R2".to_string(), "T1".to_string())
            ]
        );
    }

    #[test]
    fn parses_raw_ids_and_multiline_lists() {
        let reply =
            "Some preamble\nRationale: chain order\nMatching result: (\n  R1 : T1,\n  R2 : T2,\n)";
        let parsed = parser().parse(reply).unwrap();
        assert_eq!(
            parsed.pairs,
            vec![
                ("R1".to_string(), "T1".to_string()),
                ("R2".to_string(), "T2".to_string())
            ]
        );
    }

    #[test]
    fn missing_marker_is_fatal() {
        let err = parser()
            .parse("Rationale: no result line here")
            .unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::MissingMarker);
        assert!(err.to_string().contains("line 1"));
    }

    #[test]
    fn duplicate_rgb_id_is_fatal_with_position() {
        let reply = "Matching result: (RGB_person1 : T_person1, RGB_person1 : T_person2)";
        let err = parser().parse(reply).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::DuplicateRgbId("R1".into()));
        assert_eq!(err.line, 1);
        assert!(err.column > 20);
    }

    #[test]
    fn unknown_id_is_fatal() {
        let reply = "Matching result: (R9 : T1)";
        let err = parser().parse(reply).unwrap_err();
        assert_eq!(err.kind, ParseErrorKind::UnknownId("R9".into()));
    }

    #[test]
    fn empty_pair_list_parses() {
        let parsed = parser().parse("Matching result: ()").unwrap();
        assert!(parsed.pairs.is_empty());
    }

    #[test]
    fn trailing_prose_after_the_list_is_ignored() {
        let reply = "Matching result: (R1 : T1)\nI hope this helps :)";
        let parsed = parser().parse(reply).unwrap();
        assert_eq!(parsed.pairs, vec![("R1".to_string(), "T1".to_string())]);
    }

    #[test]
    fn non_ascii_garbage_is_rejected_without_panicking() {
        for reply in [
            "🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯🎯\nMätçhing rèsult: nope",
            "Rationale: übersicht\nMatching result: (Ř1 : T1)",
            "Ïntro\nMatching result: (",
        ] {
            let _ = parser().parse(reply);
        }
        // a marker line buried after unicode text still parses
        let parsed = parser()
            .parse("Αιτιολόγηση: θέσεις\nMatching result: (R1 : T1)")
            .unwrap();
        assert_eq!(parsed.pairs, vec![("R1".to_string(), "T1".to_string())]);
    }

    proptest! {
        // render -> parse is the identity on random partial bijections
        #[test]
        fn render_parse_round_trip(seed in 0u64..500) {
            let mut rng = StdRng::seed_from_u64(seed);
            let n = rng.random_range(1..=20usize);
            let m = rng.random_range(1..=20usize);
            let rgb_ids: Vec<String> = (0..n).map(|i| format!("R{}", i + 1)).collect();
            let thermal_ids: Vec<String> = (0..m).map(|j| format!("T{}", j + 1)).collect();
            let k = rng.random_range(0..=n.min(m));
            let mut rgb_pick: Vec<usize> = (0..n).collect();
            let mut thermal_pick: Vec<usize> = (0..m).collect();
            for i in (1..rgb_pick.len()).rev() {
                rgb_pick.swap(i, rng.random_range(0..=i));
            }
            for i in (1..thermal_pick.len()).rev() {
                thermal_pick.swap(i, rng.random_range(0..=i));
            }
            let pairs: Vec<(String, String)> = (0..k)
                .map(|i| (rgb_ids[rgb_pick[i]].clone(), thermal_ids[thermal_pick[i]].clone()))
                .collect();
            let reply = render_match_reply("fuzz", &pairs);
            let parser = ReplyParser::new(
                rgb_ids.iter().map(String::as_str),
                thermal_ids.iter().map(String::as_str),
            );
            let parsed = parser.parse(&reply).unwrap();
            prop_assert_eq!(parsed.pairs, pairs);
            prop_assert_eq!(parsed.rationale, "fuzz");
        }
    }

    #[test]
    fn structural_match_on_identical_scenes_is_identity() {
        let scene = two_by_two_scene();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let empty = BTreeMap::new();
        let result = structural_match(
            "s",
            &rgb,
            &thermal,
            &empty,
            &empty,
            &MatchWeights::default(),
        )
        .unwrap();
        assert_eq!(
            result.pairs,
            vec![
                ("R1".to_string(), "T1".to_string()),
                ("R2".to_string(), "T2".to_string())
            ]
        );
        assert!(result.unmatched_rgb.is_empty());
        assert!(result.unmatched_thermal.is_empty());
    }

    #[test]
    fn structural_match_respects_strict_diagonal_dominance() {
        // costs [[0.1, 0.9], [0.9, 0.1]] via attribute-only weights
        let scene = two_by_two_scene();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let matrix = build_cost_matrix(
            &rgb,
            &thermal,
            &BTreeMap::new(),
            &BTreeMap::new(),
            &MatchWeights::default(),
        )
        .unwrap();
        assert!(matrix.get(0, 0) < matrix.get(0, 1));
        assert!(matrix.get(1, 1) < matrix.get(1, 0));
        let pairs = matrix.assign(f64::INFINITY);
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn assignment_total_matches_brute_force_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.random_range(2..=6);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..4.0)).collect();
            let matrix = CostMatrix::new(
                (0..n).map(|i| format!("R{i}")).collect(),
                (0..n).map(|j| format!("T{j}")).collect(),
                cost.clone(),
            )
            .unwrap();
            let pairs = matrix.assign(f64::INFINITY);
            let grid: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| cost[i * n + j]).collect())
                .collect();
            let oracle = assign::brute_force_min_cost(&grid);
            assert!((matrix.total_cost(&pairs) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_scaling_preserves_the_assignment() {
        let scene = two_by_two_scene();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let empty = BTreeMap::new();
        let base = structural_match(
            "s",
            &rgb,
            &thermal,
            &empty,
            &empty,
            &MatchWeights {
                w_pos: 1.0,
                w_attr: 1.0,
                tau: f64::INFINITY,
            },
        )
        .unwrap();
        let scaled = structural_match(
            "s",
            &rgb,
            &thermal,
            &empty,
            &empty,
            &MatchWeights {
                w_pos: 7.0,
                w_attr: 7.0,
                tau: f64::INFINITY,
            },
        )
        .unwrap();
        assert_eq!(base.pairs, scaled.pairs);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let scene = two_by_two_scene();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let empty = BTreeMap::new();
        for weights in [
            MatchWeights {
                w_pos: 0.0,
                w_attr: 0.0,
                tau: 1.5,
            },
            MatchWeights {
                w_pos: -1.0,
                w_attr: 1.0,
                tau: 1.5,
            },
        ] {
            assert!(matches!(
                structural_match("s", &rgb, &thermal, &empty, &empty, &weights),
                Err(MatchError::BadWeights { .. })
            ));
        }
    }

    #[test]
    fn structural_match_of_empty_inputs_is_empty() {
        let rgb = build_graph(&[], (640, 480), Modality::Rgb).unwrap();
        let thermal = build_graph(&[], (640, 480), Modality::Thermal).unwrap();
        let empty = BTreeMap::new();
        let result = structural_match(
            "s",
            &rgb,
            &thermal,
            &empty,
            &empty,
            &MatchWeights::default(),
        )
        .unwrap();
        assert!(result.pairs.is_empty());
    }

    #[test]
    fn overlap_match_pairs_identical_boxes() {
        let scene = two_by_two_scene();
        let result = overlap_match(&scene, 0.5).unwrap();
        assert_eq!(result.pairs.len(), 2);
        assert!(result.unmatched_rgb.is_empty());
    }

    #[test]
    fn overlap_match_leaves_disjoint_boxes_unmatched() {
        let mut scene = two_by_two_scene();
        for t in &mut scene.thermal_detections {
            t.bbox.x += 300.0;
        }
        let result = overlap_match(&scene, 0.2).unwrap();
        assert!(result.pairs.is_empty());
        assert_eq!(result.unmatched_rgb.len(), 2);
        assert_eq!(result.unmatched_thermal.len(), 2);
    }

    #[test]
    fn overlap_match_greedy_prefers_higher_iou() {
        // two RGB boxes over one thermal box: the better overlap wins
        let scene = ScenePair {
            scene_id: "s".into(),
            rgb_image: None,
            thermal_image: None,
            image_size_rgb: (100, 100),
            image_size_thermal: (100, 100),
            rgb_detections: vec![
                Detection {
                    det_id: "R1".into(),
                    modality: Modality::Rgb,
                    bbox: BBox::new(10.0, 10.0, 20.0, 20.0),
                    confidence: 0.9,
                    gt_identity: None,
                },
                Detection {
                    det_id: "R2".into(),
                    modality: Modality::Rgb,
                    bbox: BBox::new(14.0, 10.0, 20.0, 20.0),
                    confidence: 0.9,
                    gt_identity: None,
                },
            ],
            thermal_detections: vec![Detection {
                det_id: "T1".into(),
                modality: Modality::Thermal,
                bbox: BBox::new(10.0, 10.0, 20.0, 20.0),
                confidence: 0.9,
                gt_identity: None,
            }],
            gt_pairs: None,
        };
        let result = overlap_match(&scene, 0.3).unwrap();
        assert_eq!(result.pairs, vec![("R1".to_string(), "T1".to_string())]);
        assert_eq!(result.unmatched_rgb, vec!["R2".to_string()]);
    }

    #[test]
    fn bad_iou_threshold_is_rejected() {
        let scene = two_by_two_scene();
        assert!(matches!(
            overlap_match(&scene, 0.0),
            Err(MatchError::BadIouThreshold(_))
        ));
        assert!(matches!(
            overlap_match(&scene, 1.0),
            Err(MatchError::BadIouThreshold(_))
        ));
    }

    struct ScriptedProvider {
        id: ProviderId,
        replies: std::sync::Mutex<Vec<String>>,
        calls: std::sync::atomic::AtomicUsize,
    }

    impl ScriptedProvider {
        fn new(replies: Vec<&str>) -> Self {
            ScriptedProvider {
                id: "scripted".into(),
                replies: std::sync::Mutex::new(replies.into_iter().map(String::from).collect()),
                calls: std::sync::atomic::AtomicUsize::new(0),
            }
        }
    }

    impl ChatProvider for ScriptedProvider {
        fn id(&self) -> &ProviderId {
            &self.id
        }
        fn chat(&self, _request: &ChatRequest) -> Result<String, ProviderError> {
            self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            let mut replies = self.replies.lock().unwrap();
            if replies.is_empty() {
                Err(ProviderError::Api {
                    provider: "scripted".into(),
                    message: "no more replies".into(),
                })
            } else {
                Ok(replies.remove(0))
            }
        }
    }

    #[test]
    fn llm_match_uses_a_valid_reply() {
        let scene = two_by_two_scene();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let provider = ScriptedProvider::new(vec![
            "Rationale: positions align.\nMatching result: (R1 : T1, R2 : T2)",
        ]);
        let empty = BTreeMap::new();
        let result = llm_match(
            &scene,
            &rgb,
            &thermal,
            &empty,
            &empty,
            &provider,
            &MatchWeights::default(),
        )
        .unwrap();
        assert_eq!(result.pairs.len(), 2);
        assert_eq!(result.rationale, "positions align.");
    }

    #[test]
    fn llm_match_falls_back_after_three_unparseable_replies() {
        let scene = two_by_two_scene();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let provider = ScriptedProvider::new(vec!["nonsense", "more nonsense", "still nonsense"]);
        let empty = BTreeMap::new();
        let result = llm_match(
            &scene,
            &rgb,
            &thermal,
            &empty,
            &empty,
            &provider,
            &MatchWeights::default(),
        )
        .unwrap();
        assert!(
            result.rationale.contains("structural fallback"),
            "{}",
            result.rationale
        );
        assert_eq!(result.pairs.len(), 2);
        assert_eq!(provider.calls.load(std::sync::atomic::Ordering::SeqCst), 3);
    }

    #[test]
    fn llm_match_replays_a_recorded_fixture() {
        use crate::provider::mock::MockProvider;
        use crate::provider::replay::{RecordingProvider, ReplayProvider};
        use std::sync::Arc;

        let mut scene = two_by_two_scene();
        for (list, prefix) in [
            (&mut scene.rgb_detections, "identity"),
            (&mut scene.thermal_detections, "identity"),
        ] {
            for (i, det) in list.iter_mut().enumerate() {
                det.gt_identity = Some(format!("{prefix}_{i}"));
            }
        }
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(
            &scene.thermal_detections,
            scene.image_size_thermal,
            Modality::Thermal,
        )
        .unwrap();
        let empty = BTreeMap::new();

        let dir = tempfile::tempdir().unwrap();
        let recorder =
            RecordingProvider::new(Arc::new(MockProvider::new("mock", 0, 0.0)), dir.path())
                .unwrap();
        let live = llm_match(
            &scene,
            &rgb,
            &thermal,
            &empty,
            &empty,
            &recorder,
            &MatchWeights::default(),
        )
        .unwrap();

        let replay = ReplayProvider::new("mock", dir.path());
        let replayed = llm_match(
            &scene,
            &rgb,
            &thermal,
            &empty,
            &empty,
            &replay,
            &MatchWeights::default(),
        )
        .unwrap();
        assert_eq!(live, replayed);
        assert_eq!(live.pairs.len(), 2);
    }

    #[test]
    fn structural_match_with_infinite_tau_is_a_full_bijection() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..20 {
            let n = rng.random_range(1..=6);
            let make = |prefix: &str, modality: Modality, rng: &mut StdRng| -> Vec<Detection> {
                (0..n)
                    .map(|i| {
                        det(
                            &format!("{prefix}{i}"),
                            modality,
                            rng.random_range(20.0..620.0),
                            rng.random_range(40.0..440.0),
                        )
                    })
                    .collect()
            };
            let rgb_dets = make("R", Modality::Rgb, &mut rng);
            let thermal_dets = make("T", Modality::Thermal, &mut rng);
            let rgb = build_graph(&rgb_dets, (640, 480), Modality::Rgb).unwrap();
            let thermal = build_graph(&thermal_dets, (640, 480), Modality::Thermal).unwrap();
            let empty = BTreeMap::new();
            let result = structural_match(
                "s",
                &rgb,
                &thermal,
                &empty,
                &empty,
                &MatchWeights {
                    w_pos: 1.0,
                    w_attr: 1.0,
                    tau: f64::INFINITY,
                },
            )
            .unwrap();
            assert_eq!(result.pairs.len(), n);
            assert!(result.unmatched_rgb.is_empty());
            assert!(result.unmatched_thermal.is_empty());
        }
    }

    #[test]
    fn llm_match_skips_provider_for_degenerate_scenes() {
        let mut scene = two_by_two_scene();
        scene.thermal_detections.clear();
        let rgb = build_graph(&scene.rgb_detections, scene.image_size_rgb, Modality::Rgb).unwrap();
        let thermal = build_graph(&[], scene.image_size_thermal, Modality::Thermal).unwrap();
        let provider = ScriptedProvider::new(vec![]);
        let empty = BTreeMap::new();
        let result = llm_match(
            &scene,
            &rgb,
            &thermal,
            &empty,
            &empty,
            &provider,
            &MatchWeights::default(),
        )
        .unwrap();
        assert!(result.pairs.is_empty());
        assert_eq!(
            result.unmatched_rgb,
            vec!["R1".to_string(), "R2".to_string()]
        );
        assert_eq!(provider.calls.load(std::sync::atomic::Ordering::SeqCst), 0);
    }
}

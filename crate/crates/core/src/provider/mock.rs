//! Deterministic offline provider.
//!
//! The mock answers the pipeline's four prompt kinds from synthetic ground
//! truth instead of pixels:
//!
//! * description requests — echo the detection's ground-truth attribute
//!   tuple, with each attribute independently corrupted at the configured
//!   hallucination rate (seeded per scene/detection/provider/key, so
//!   repeated calls are byte-identical and independent of call order);
//! * debater requests — restate the provider's own latest opinion found in
//!   the debate history;
//! * judge requests — majority vote per attribute key over the debaters'
//!   final opinions (lexicographically smallest value on ties);
//! * matching requests — greedy nearest-neighbor pairing of the NODE lines
//!   in the two serialized graphs.
//!
//! A reply is a pure function of (scene_id, det_id, gt_identity, provider
//! seed) for descriptions, and of the request text for everything else.

use std::collections::{BTreeMap, HashMap};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::appearance::DETECTION_HEADER_PREFIX;
use crate::attrs::{format_attribute_lines, normalize, parse_attribute_lines, Attributes};
use crate::debate::{DEBATER_PROMPT_MARKER, JUDGE_PROMPT_MARKER};
use crate::matcher::MATCH_PROMPT_MARKER;
use crate::provider::{ChatProvider, ChatRequest, ProviderError, ProviderId};
use crate::scene_io::ScenePair;
use crate::synthgen::{attributes_for_identity, AttributeVocab};
use crate::util::fnv1a64;

pub struct MockProvider {
    id: ProviderId,
    seed: u64,
    hallucination_rate: f64,
    vocab: AttributeVocab,
    /// (scene_id, det_id) -> gt_identity, filled by `observe_scene`.
    identities: RwLock<HashMap<(String, String), String>>,
}

impl MockProvider {
    pub fn new(id: impl Into<ProviderId>, seed: u64, hallucination_rate: f64) -> Self {
        MockProvider {
            id: id.into(),
            seed,
            hallucination_rate,
            vocab: AttributeVocab::default(),
            identities: RwLock::new(HashMap::new()),
        }
    }

    pub fn with_vocab(mut self, vocab: AttributeVocab) -> Self {
        self.vocab = vocab;
        self
    }

    fn err(&self, message: impl Into<String>) -> ProviderError {
        ProviderError::Api {
            provider: self.id.to_string(),
            message: message.into(),
        }
    }

    /// Ground-truth attributes of a detection, each independently replaced
    /// by a wrong vocabulary value with probability `hallucination_rate`.
    pub fn attributes_for(&self, scene_id: &str, det_id: &str) -> Attributes {
        let identity = self
            .identities
            .read()
            .expect("identity registry lock")
            .get(&(scene_id.to_string(), det_id.to_string()))
            .cloned()
            // unlabeled data still gets a stable, scene-derived description
            .unwrap_or_else(|| format!("{scene_id}/{det_id}"));
        let truth = attributes_for_identity(&identity, &self.vocab);
        let mut attrs = Attributes::new();
        for (key, value) in truth {
            let values = &self.vocab.0[&key];
            let mut rng = ChaCha12Rng::seed_from_u64(fnv1a64(&[
                &self.seed.to_le_bytes(),
                scene_id.as_bytes(),
                det_id.as_bytes(),
                self.id.as_str().as_bytes(),
                key.name().as_bytes(),
            ]));
            let corrupted = self.hallucination_rate > 0.0
                && values.len() > 1
                && rng.random::<f64>() < self.hallucination_rate;
            if corrupted {
                let true_idx = values.iter().position(|v| *v == value).unwrap_or(0);
                let offset = rng.random_range(1..values.len());
                attrs.insert(key, values[(true_idx + offset) % values.len()].clone());
            } else {
                attrs.insert(key, value);
            }
        }
        attrs
    }

    fn answer_describe(&self, text: &str) -> Result<String, ProviderError> {
        let (scene_id, det_id) = parse_detection_header(text)
            .ok_or_else(|| self.err("description request without a detection header"))?;
        let attrs = self.attributes_for(&scene_id, &det_id);
        let mut reply = format!("{det_id} shows a person");
        if let Some(clothing) = attrs.get(&crate::attrs::AttrKey::Clothing) {
            reply.push_str(&format!(" wearing {clothing}"));
        }
        reply.push_str(".\n");
        reply.push_str(&format_attribute_lines(&attrs));
        Ok(reply)
    }

    fn answer_debater(&self, text: &str) -> Result<String, ProviderError> {
        if let Some(attrs) = latest_opinion_of(text, self.id.as_str()) {
            return Ok(format!(
                "I stand by my earlier description.\n{}",
                format_attribute_lines(&attrs)
            ));
        }
        // no prior opinion in the history: describe from scratch if possible
        if parse_detection_header(text).is_some() {
            return self.answer_describe(text);
        }
        Err(self.err("debate request without own opinion or detection header"))
    }

    fn answer_judge(&self, text: &str) -> Result<String, ProviderError> {
        let finals = final_opinions(text);
        if finals.is_empty() {
            return Err(self.err("judge request without any debater opinions"));
        }
        let verdict = majority_vote(finals.values());
        Ok(format!(
            "After weighing the debate, the following description is the most consistent.\n{}",
            format_attribute_lines(&verdict)
        ))
    }

    fn answer_match(&self, text: &str) -> Result<String, ProviderError> {
        let (rgb_nodes, thermal_nodes) = parse_graph_sections(text);
        let mut used = vec![false; thermal_nodes.len()];
        let mut pairs = Vec::new();
        for (rgb_id, rx, ry) in &rgb_nodes {
            let nearest = thermal_nodes
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .min_by(|(_, (ia, xa, ya)), (_, (ib, xb, yb))| {
                    let da = (rx - xa).powi(2) + (ry - ya).powi(2);
                    let db = (rx - xb).powi(2) + (ry - yb).powi(2);
                    da.total_cmp(&db).then_with(|| ia.cmp(ib))
                });
            if let Some((j, (t_id, _, _))) = nearest {
                used[j] = true;
                pairs.push(format!("{rgb_id} : {t_id}"));
            }
        }
        Ok(format!(
            "Rationale: Paired each RGB node with the nearest unused thermal node in normalized coordinates.\nMatching result: ({})",
            pairs.join(", ")
        ))
    }
}

impl ChatProvider for MockProvider {
    fn id(&self) -> &ProviderId {
        &self.id
    }

    fn chat(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let text = request.joined_text();
        if text.contains(JUDGE_PROMPT_MARKER) {
            self.answer_judge(&text)
        } else if text.contains(DEBATER_PROMPT_MARKER) {
            self.answer_debater(&text)
        } else if text.contains(MATCH_PROMPT_MARKER) {
            self.answer_match(&text)
        } else if text.contains(DETECTION_HEADER_PREFIX) {
            self.answer_describe(&text)
        } else {
            Err(self.err("request does not match any known prompt kind"))
        }
    }

    fn observe_scene(&self, scene: &ScenePair) {
        let mut identities = self.identities.write().expect("identity registry lock");
        for det in scene.rgb_detections.iter().chain(&scene.thermal_detections) {
            if let Some(identity) = &det.gt_identity {
                identities.insert(
                    (scene.scene_id.clone(), det.det_id.clone()),
                    identity.clone(),
                );
            }
        }
    }
}

/// Extract (scene_id, det_id) from the detection header line that
/// description prompts carry:
/// `Target detection <det_id> in scene <scene_id> (<modality> image).`
fn parse_detection_header(text: &str) -> Option<(String, String)> {
    for line in text.lines() {
        let Some(rest) = line.trim().strip_prefix(DETECTION_HEADER_PREFIX) else {
            continue;
        };
        let mut words = rest.split_whitespace();
        let det_id = words.next()?;
        if words.next() != Some("in") || words.next() != Some("scene") {
            continue;
        }
        let scene_id = words.next()?;
        return Some((scene_id.to_string(), det_id.to_string()));
    }
    None
}

/// Opinion and rebuttal blocks a debate history is made of. Returns
/// (debater id, attribute lines of the block) in order of appearance.
fn history_blocks(text: &str) -> Vec<(String, Attributes)> {
    let mut blocks = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        let trimmed = line.trim();
        let debater = if let Some(rest) = trimmed.strip_prefix("Debater ") {
            rest.strip_suffix(" opinion:").map(str::to_string)
        } else if trimmed.starts_with("Round ") && trimmed.contains(" rebuttal from ") {
            trimmed
                .rsplit_once(" rebuttal from ")
                .and_then(|(_, id)| id.strip_suffix(':'))
                .map(str::to_string)
        } else {
            None
        };
        let Some(debater) = debater else { continue };
        let mut body = String::new();
        while let Some(next) = lines.peek() {
            let t = next.trim();
            if t.is_empty()
                || t.starts_with("Debater ")
                || (t.starts_with("Round ") && t.contains(" rebuttal from "))
            {
                break;
            }
            body.push_str(next);
            body.push('\n');
            lines.next();
        }
        blocks.push((debater, parse_attribute_lines(&body)));
    }
    blocks
}

/// Final (latest non-empty) attribute map per debater, keyed by debater id.
fn final_opinions(text: &str) -> BTreeMap<String, Attributes> {
    let mut finals = BTreeMap::new();
    for (debater, attrs) in history_blocks(text) {
        if !attrs.is_empty() {
            finals.insert(debater, attrs);
        }
    }
    finals
}

fn latest_opinion_of(text: &str, debater: &str) -> Option<Attributes> {
    history_blocks(text)
        .into_iter()
        .filter(|(id, attrs)| id == debater && !attrs.is_empty())
        .map(|(_, attrs)| attrs)
        .next_back()
}

/// Per-key plurality over normalized values; ties resolved to the
/// lexicographically smallest value so the result is independent of
/// debater order.
fn majority_vote<'a>(opinions: impl Iterator<Item = &'a Attributes>) -> Attributes {
    let mut tallies: BTreeMap<crate::attrs::AttrKey, BTreeMap<String, usize>> = BTreeMap::new();
    for attrs in opinions {
        for (key, value) in attrs {
            *tallies
                .entry(*key)
                .or_default()
                .entry(normalize(value))
                .or_insert(0) += 1;
        }
    }
    tallies
        .into_iter()
        .map(|(key, counts)| {
            let best = counts
                .into_iter()
                // BTreeMap iterates values in lexicographic order, so on
                // equal counts the first (smallest) value wins
                .max_by(|(va, ca), (vb, cb)| ca.cmp(cb).then_with(|| vb.cmp(va)))
                .expect("tally has at least one value");
            (key, best.0)
        })
        .collect()
}

/// NODE lines of the two serialized graphs inside a matching prompt:
/// `(det_id, nx, ny)` per node, RGB section then thermal section.
type ParsedNodes = Vec<(String, f64, f64)>;

fn parse_graph_sections(text: &str) -> (ParsedNodes, ParsedNodes) {
    let mut rgb = Vec::new();
    let mut thermal = Vec::new();
    let mut in_thermal = false;
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with("RGB graph:") {
            in_thermal = false;
        } else if trimmed.starts_with("Thermal graph:") {
            in_thermal = true;
        } else if let Some(node) = parse_node_line(trimmed) {
            if in_thermal {
                thermal.push(node);
            } else {
                rgb.push(node);
            }
        }
    }
    (rgb, thermal)
}

fn parse_node_line(line: &str) -> Option<(String, f64, f64)> {
    let rest = line.strip_prefix("NODE ")?;
    let (id, rest) = rest.split_once(" pos=(")?;
    let (coords, _) = rest.split_once(')')?;
    let (x, y) = coords.split_once(',')?;
    Some((
        id.to_string(),
        x.trim().parse().ok()?,
        y.trim().parse().ok()?,
    ))
}

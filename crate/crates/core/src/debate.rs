//! Cross-provider agreement checking, debate rounds, and judge adjudication.
//!
//! Hallucination mitigation works in two stages. First, the attribute maps
//! of all provider opinions are compared after normalization; full agreement
//! short-circuits the debate. Otherwise the disagreeing providers debate:
//! each round, every debater sees the complete opinion/rebuttal history and
//! answers with a rebuttal; after the configured number of rounds (or an
//! earlier consensus among the updated opinions) a judge provider reads the
//! whole history and issues the verdict record.
//!
//! Agreement is attribute-level exact match after normalization — free-text
//! semantic similarity is out of scope; a key present in one opinion but
//! missing from another counts as disagreement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appearance::detection_header;
use crate::attrs::{format_attribute_lines, maps_agree, normalize, Attributes};
use crate::provider::{chat_with_retry, ChatRequest, ProviderError, ProviderId, ProviderRegistry};
use crate::scene_io::{AppearanceRecord, DescriptionCache, Detection, Modality, ScenePair};

/// Leading phrase of every debater prompt; mocks key on it.
pub const DEBATER_PROMPT_MARKER: &str = "You are a debater";
/// Leading phrase of every judge prompt; mocks key on it.
pub const JUDGE_PROMPT_MARKER: &str = "You are a judging expert";

pub const DEFAULT_MAX_ROUNDS: usize = 1;
/// The judge defaults to the strongest configured model.
pub const DEFAULT_JUDGE: &str = "gpt4";

#[derive(Debug, Error)]
pub enum DebateError {
    #[error("detection `{det_id}`: debate needs at least two opinions, got {got}")]
    FewerThanTwoOpinions { det_id: String, got: usize },
    #[error("max_rounds must be at least 1")]
    BadMaxRounds,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateRound {
    pub round: usize,
    /// Rebuttal text per debater, in debater order.
    pub rebuttals: Vec<(String, String)>,
}

/// Complete record of one detection's adjudication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebateTranscript {
    pub det_id: String,
    #[serde(rename = "opinions")]
    pub initial_opinions: BTreeMap<String, AppearanceRecord>,
    pub rounds: Vec<DebateRound>,
    pub verdict: AppearanceRecord,
    pub judge: String,
    pub consensus_short_circuit: bool,
    /// Set when the judge reply was unparseable: "majority" when the
    /// majority vote decided, "judge_opinion" when a tie fell back to the
    /// judge provider's own final opinion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_fallback: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DebateConfig {
    pub debaters: Vec<ProviderId>,
    pub judge: ProviderId,
    pub max_rounds: usize,
}

impl Default for DebateConfig {
    fn default() -> Self {
        DebateConfig {
            debaters: Vec::new(),
            judge: DEFAULT_JUDGE.into(),
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

/// True iff all opinions carry the same normalized attribute map.
///
/// Needs at least two opinions to be meaningful.
pub fn check_consensus(opinions: &BTreeMap<String, AppearanceRecord>) -> Result<bool, DebateError> {
    if opinions.len() < 2 {
        return Err(DebateError::FewerThanTwoOpinions {
            det_id: opinions
                .values()
                .next()
                .map(|r| r.det_id.clone())
                .unwrap_or_default(),
            got: opinions.len(),
        });
    }
    let mut iter = opinions.values();
    let first = iter.next().expect("len checked above");
    Ok(iter.all(|other| maps_agree(&first.attributes, &other.attributes)))
}

fn opinion_body(record: &AppearanceRecord) -> String {
    if record.attributes.is_empty() {
        record.description_text.clone()
    } else {
        format_attribute_lines(&record.attributes)
    }
}

/// Render the full history every debate participant sees: the detection
/// context, each debater's initial opinion, then each completed round's
/// rebuttals. The block headers are part of the wire contract — the mock
/// judge parses them back out.
fn render_history(
    header: &str,
    debaters: &[ProviderId],
    opinions: &BTreeMap<String, AppearanceRecord>,
    rounds: &[DebateRound],
) -> String {
    let mut text = format!("{header}\n\n");
    for debater in debaters {
        if let Some(record) = opinions.get(debater.as_str()) {
            text.push_str(&format!(
                "Debater {debater} opinion:\n{}\n",
                opinion_body(record)
            ));
            if !text.ends_with("\n\n") {
                text.push('\n');
            }
        }
    }
    for round in rounds {
        for (debater, rebuttal) in &round.rebuttals {
            text.push_str(&format!(
                "Round {} rebuttal from {debater}:\n{rebuttal}\n",
                round.round
            ));
            if !text.ends_with("\n\n") {
                text.push('\n');
            }
        }
    }
    text
}

fn debater_request(history: &str) -> ChatRequest {
    ChatRequest::text(format!(
        "{DEBATER_PROMPT_MARKER} among a panel of experts, each of whom will share their \
         opinions on the visual description of a person. Please share your opinions in brief, \
         ending with one labeled line per attribute (clothing, accessories, hairstyle, \
         facing_direction, other).\n\n{history}"
    ))
}

fn judge_request(n_debaters: usize, history: &str) -> ChatRequest {
    ChatRequest::text(format!(
        "{JUDGE_PROMPT_MARKER}. {n_debaters} debaters will participate in a discussion \
         regarding the individual's visual description. Once the debate is over, it will be \
         your responsibility to decide which visual description seems the most reasonable one \
         based on the debate content. Answer with one labeled line per attribute.\n\n{history}"
    ))
}

/// Per-key strict plurality over the final opinions; `None` when any key
/// lacks a unique winner.
fn strict_majority(finals: &BTreeMap<String, Attributes>) -> Option<Attributes> {
    let mut tallies: BTreeMap<crate::attrs::AttrKey, BTreeMap<String, usize>> = BTreeMap::new();
    for attrs in finals.values() {
        for (key, value) in attrs {
            *tallies
                .entry(*key)
                .or_default()
                .entry(normalize(value))
                .or_insert(0) += 1;
        }
    }
    let mut verdict = Attributes::new();
    for (key, counts) in tallies {
        let max = *counts.values().max().expect("nonempty tally");
        let mut winners = counts.into_iter().filter(|(_, c)| *c == max);
        let (value, _) = winners.next().expect("max exists");
        if winners.next().is_some() {
            return None;
        }
        verdict.insert(key, value);
    }
    Some(verdict)
}

/// Run the debate protocol for one detection.
///
/// Pre-existing consensus short-circuits without any provider call: the
/// verdict is the first agreeing opinion (in debater order) and keeps that
/// provider's provenance. Otherwise rounds run up to `max_rounds` (stopping
/// early if the updated opinions converge) and the judge issues the verdict
/// with provenance `"judge"`. An unparseable judge reply falls back to a
/// majority vote over the final opinions; a tie keeps the judge provider's
/// own final opinion.
pub fn run_debate(
    scene_id: &str,
    det: &Detection,
    opinions: &BTreeMap<String, AppearanceRecord>,
    config: &DebateConfig,
    registry: &ProviderRegistry,
) -> Result<DebateTranscript, DebateError> {
    if config.max_rounds == 0 {
        return Err(DebateError::BadMaxRounds);
    }
    if opinions.len() < 2 {
        return Err(DebateError::FewerThanTwoOpinions {
            det_id: det.det_id.clone(),
            got: opinions.len(),
        });
    }
    let debaters: Vec<ProviderId> = config
        .debaters
        .iter()
        .filter(|d| opinions.contains_key(d.as_str()))
        .cloned()
        .collect();

    if check_consensus(opinions)? {
        let first = debaters
            .first()
            .map(|d| d.as_str())
            .unwrap_or_else(|| opinions.keys().next().expect("nonempty").as_str());
        let verdict = opinions
            .get(first)
            .cloned()
            .unwrap_or_else(|| opinions.values().next().expect("nonempty").clone());
        return Ok(DebateTranscript {
            det_id: det.det_id.clone(),
            initial_opinions: opinions.clone(),
            rounds: Vec::new(),
            verdict,
            judge: config.judge.to_string(),
            consensus_short_circuit: true,
            judge_fallback: None,
        });
    }

    let header = detection_header(scene_id, det);
    let mut rounds: Vec<DebateRound> = Vec::new();
    // latest parsed attribute map per debater, updated round by round
    let mut latest: BTreeMap<String, Attributes> = opinions
        .iter()
        .map(|(p, r)| (p.clone(), r.attributes.clone()))
        .collect();

    for round_index in 1..=config.max_rounds {
        let history = render_history(&header, &debaters, opinions, &rounds);
        let mut rebuttals = Vec::new();
        for debater in &debaters {
            let provider = registry.get(debater)?;
            let reply = chat_with_retry(provider.as_ref(), &debater_request(&history))?;
            let parsed = crate::attrs::parse_attribute_lines(&reply);
            if !parsed.is_empty() {
                latest.insert(debater.to_string(), parsed);
            }
            rebuttals.push((debater.to_string(), reply));
        }
        rounds.push(DebateRound {
            round: round_index,
            rebuttals,
        });
        let converged = {
            let mut values = latest.values();
            let first = values.next().cloned().unwrap_or_default();
            values.all(|v| maps_agree(&first, v))
        };
        if converged {
            break;
        }
    }

    let history = render_history(&header, &debaters, opinions, &rounds);
    let judge_provider = registry.get(&config.judge)?;
    let judge_reply = chat_with_retry(
        judge_provider.as_ref(),
        &judge_request(debaters.len(), &history),
    )?;
    let judge_attrs = crate::attrs::parse_attribute_lines(&judge_reply);

    let (verdict_attrs, description, judge_fallback) = if !judge_attrs.is_empty() {
        (judge_attrs, judge_reply, None)
    } else if let Some(majority) = strict_majority(&latest) {
        let text = format!(
            "Majority vote over final opinions (judge reply unparseable).\n{}",
            format_attribute_lines(&majority)
        );
        (majority, text, Some("majority".to_string()))
    } else {
        // tie: keep the judge provider's own final opinion; if the judge
        // did not debate, fall back to the first debater's final opinion
        let own = latest
            .get(config.judge.as_str())
            .or_else(|| debaters.first().and_then(|d| latest.get(d.as_str())))
            .cloned()
            .unwrap_or_default();
        let text = format!(
            "Tied majority vote; keeping the judge provider's own final opinion.\n{}",
            format_attribute_lines(&own)
        );
        (own, text, Some("judge_opinion".to_string()))
    };

    Ok(DebateTranscript {
        det_id: det.det_id.clone(),
        initial_opinions: opinions.clone(),
        rounds,
        verdict: AppearanceRecord {
            det_id: det.det_id.clone(),
            description_text: description,
            attributes: verdict_attrs,
            provenance: "judge".to_string(),
            transcript_ref: None,
        },
        judge: config.judge.to_string(),
        consensus_short_circuit: false,
        judge_fallback,
    })
}

/// Per-modality description maps ready for matching, plus the transcripts of
/// every debate that ran.
#[derive(Debug, Clone, Default)]
pub struct SceneDescriptions {
    pub rgb: BTreeMap<String, AppearanceRecord>,
    pub thermal: BTreeMap<String, AppearanceRecord>,
    pub transcripts: Vec<DebateTranscript>,
}

/// Reduce a description cache to one record per detection.
///
/// With the debate disabled (or fewer than two opinions available) the first
/// roster provider's record is chosen; otherwise the full protocol runs per
/// detection and the verdict record wins.
pub fn adjudicate_scene(
    scene: &ScenePair,
    cache: &DescriptionCache,
    debate_enabled: bool,
    config: &DebateConfig,
    registry: &ProviderRegistry,
) -> Result<SceneDescriptions, DebateError> {
    let mut result = SceneDescriptions::default();
    for det in scene.rgb_detections.iter().chain(&scene.thermal_detections) {
        // only configured debaters' records count as opinions
        let mut opinions: BTreeMap<String, AppearanceRecord> = BTreeMap::new();
        for record in cache.records_for(&det.det_id) {
            let configured = config
                .debaters
                .iter()
                .any(|d| d.as_str() == record.provider);
            if record.modality == det.modality && configured {
                opinions.insert(record.provider.clone(), record.appearance());
            }
        }
        if opinions.is_empty() {
            continue;
        }
        let chosen = if debate_enabled && opinions.len() >= 2 {
            let transcript = run_debate(&scene.scene_id, det, &opinions, config, registry)?;
            let verdict = transcript.verdict.clone();
            result.transcripts.push(transcript);
            verdict
        } else {
            // primary provider = first configured debater with a record
            config
                .debaters
                .iter()
                .find_map(|d| opinions.get(d.as_str()))
                .cloned()
                .unwrap_or_else(|| opinions.values().next().expect("nonempty").clone())
        };
        match det.modality {
            Modality::Rgb => result.rgb.insert(det.det_id.clone(), chosen),
            Modality::Thermal => result.thermal.insert(det.det_id.clone(), chosen),
        };
    }
    Ok(result)
}

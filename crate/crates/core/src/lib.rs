//! Cross-modal RGB/thermal pedestrian identity alignment.
//!
//! The pipeline pairs pedestrian detections across heavily misaligned RGB and
//! thermal images of the same scene. Each modality's detections become a
//! positional graph (nodes are detection centers, edges a degree-capped
//! spanning path built greedily on Euclidean distance). Vision-language
//! providers attach appearance descriptions to the nodes, optionally
//! reconciled by a multi-debater/judge protocol. A matcher then pairs
//! identities across the two graphs, matched detections are fused into single
//! detections, and results are scored with alignment error rate (AER) and
//! average precision (AP).
//!
//! Everything runs offline against deterministic mock providers; live
//! providers are reached through the adapters in [`provider`].

pub mod appearance;
pub mod attrs;
pub mod debate;
pub mod eval;
pub mod fusion;
pub mod matcher;
pub mod posgraph;
pub mod provider;
pub mod scene_io;
pub mod synthgen;

mod util;

pub use attrs::{AttrKey, Attributes};
pub use scene_io::{AppearanceRecord, BBox, Detection, MatchResult, Modality, ScenePair};

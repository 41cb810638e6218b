//! Annotation tasks (HITs), worker responses and their aggregation.
//!
//! A discovery HIT asks whether the attribute a feature encodes is part of the
//! main object, a separate object, or the background. A validation HIT asks
//! whether the heatmaps of a feature's highest- and lowest-activating subset
//! images focus on the same attribute. Verdicts need a strict majority of the
//! quorum; anything short of that is left undecided.

mod hits;
mod ledger;
mod store;

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

pub use hits::{
    build_discovery_hit, build_validation_hit, top_activating, AssetWriter, ClassMetadata, DiscoveryHit,
    PanelImage, ValidationHit, DISCOVERY_PANEL_SIZE, VALIDATION_SECTION_SIZE,
};
pub use ledger::{AnnotationLedger, LedgerExport, LedgerRecord};
pub use store::{Hit, HitStatus, HitStore, HitSummary, Outcome, SubmitReceipt};

use crate::{Error, Result};

pub const DEFAULT_QUORUM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitKind {
    Discovery,
    Validation,
}

impl HitKind {
    pub fn options(self) -> &'static [Choice] {
        match self {
            HitKind::Discovery => &[Choice::MainObject, Choice::SeparateObjects, Choice::Background],
            HitKind::Validation => &[
                Choice::Same,
                Choice::Different,
                Choice::SectionAUnclear,
                Choice::SectionBUnclear,
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    MainObject,
    SeparateObjects,
    Background,
    Same,
    Different,
    SectionAUnclear,
    SectionBUnclear,
}

impl Choice {
    pub fn kind(self) -> HitKind {
        match self {
            Choice::MainObject | Choice::SeparateObjects | Choice::Background => HitKind::Discovery,
            _ => HitKind::Validation,
        }
    }

    /// Label shown to annotators.
    pub fn label(self) -> &'static str {
        match self {
            Choice::MainObject => "main object",
            Choice::SeparateObjects => "separate objects",
            Choice::Background => "background",
            Choice::Same => "same",
            Choice::Different => "different",
            Choice::SectionAUnclear => "Section A is unclear",
            Choice::SectionBUnclear => "Section B is unclear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Causal,
    Spurious,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub hit_id: String,
    pub worker_id: String,
    pub choice: Choice,
    pub reason: String,
    /// Likert confidence, 1 to 5.
    pub confidence: u8,
}

impl WorkerResponse {
    pub fn validate(&self, kind: HitKind) -> Result<()> {
        if self.worker_id.trim().is_empty() {
            return Err(Error::InvalidResponse("empty worker id".into()));
        }
        if !(1..=5).contains(&self.confidence) {
            return Err(Error::InvalidResponse(format!(
                "confidence {} outside 1..=5",
                self.confidence
            )));
        }
        if self.choice.kind() != kind {
            return Err(Error::InvalidResponse(format!(
                "choice {:?} is not an option of a {kind:?} hit",
                self.choice
            )));
        }
        Ok(())
    }
}

/// Smallest vote count that is a strict majority of `quorum`: `ceil((quorum + 1) / 2)`.
pub fn majority_threshold(quorum: usize) -> usize {
    quorum / 2 + 1
}

/// One response per worker, the latest winning; all must target the same HIT.
fn latest_per_worker(responses: &[WorkerResponse]) -> Result<Vec<&WorkerResponse>> {
    let Some(first) = responses.first() else {
        return Ok(Vec::new());
    };
    let mut by_worker: BTreeMap<&str, &WorkerResponse> = BTreeMap::new();
    for r in responses {
        if r.hit_id != first.hit_id {
            return Err(Error::InvalidResponse(format!(
                "responses span hits `{}` and `{}`",
                first.hit_id, r.hit_id
            )));
        }
        if let Some(prev) = by_worker.insert(&r.worker_id, r) {
            warn!(
                "hit {}: worker {} answered again; replacing {:?} with {:?}",
                r.hit_id, r.worker_id, prev.choice, r.choice
            );
        }
    }
    Ok(by_worker.into_values().collect())
}

pub fn vote_counts<'a>(responses: impl IntoIterator<Item = &'a WorkerResponse>) -> BTreeMap<Choice, usize> {
    let mut votes = BTreeMap::new();
    for r in responses {
        *votes.entry(r.choice).or_insert(0) += 1;
    }
    votes
}

fn quorum_votes(responses: &[WorkerResponse], quorum: usize, kind: HitKind) -> Result<BTreeMap<Choice, usize>> {
    if quorum == 0 {
        return Err(Error::InvalidConfig("quorum must be positive".into()));
    }
    let latest = latest_per_worker(responses)?;
    if latest.len() != quorum {
        return Err(Error::InvalidResponse(format!(
            "{} distinct workers answered, quorum is {quorum}",
            latest.len()
        )));
    }
    for r in &latest {
        r.validate(kind)?;
    }
    Ok(vote_counts(latest))
}

/// Spurious when separate-object plus background votes reach a strict majority,
/// causal when main-object votes do, undecided otherwise.
pub fn discovery_verdict(votes: &BTreeMap<Choice, usize>, quorum: usize) -> Verdict {
    let count = |c: Choice| votes.get(&c).copied().unwrap_or(0);
    let threshold = majority_threshold(quorum);
    if count(Choice::SeparateObjects) + count(Choice::Background) >= threshold {
        Verdict::Spurious
    } else if count(Choice::MainObject) >= threshold {
        Verdict::Causal
    } else {
        Verdict::Undecided
    }
}

pub fn aggregate_discovery(responses: &[WorkerResponse], quorum: usize) -> Result<Verdict> {
    let votes = quorum_votes(responses, quorum, HitKind::Discovery)?;
    Ok(discovery_verdict(&votes, quorum))
}

pub fn validation_verdict(votes: &BTreeMap<Choice, usize>, quorum: usize) -> bool {
    votes.get(&Choice::Same).copied().unwrap_or(0) >= majority_threshold(quorum)
}

pub fn aggregate_validation(responses: &[WorkerResponse], quorum: usize) -> Result<bool> {
    let votes = quorum_votes(responses, quorum, HitKind::Validation)?;
    Ok(validation_verdict(&votes, quorum))
}

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{
    discovery_verdict, latest_per_worker, validation_verdict, vote_counts, AnnotationLedger, Choice,
    DiscoveryHit, HitKind, ValidationHit, Verdict, WorkerResponse,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hit {
    Discovery(DiscoveryHit),
    Validation(ValidationHit),
}

impl Hit {
    pub fn id(&self) -> &str {
        match self {
            Hit::Discovery(h) => &h.hit_id,
            Hit::Validation(h) => &h.hit_id,
        }
    }

    pub fn kind(&self) -> HitKind {
        match self {
            Hit::Discovery(_) => HitKind::Discovery,
            Hit::Validation(_) => HitKind::Validation,
        }
    }

    pub fn class_index(&self) -> usize {
        match self {
            Hit::Discovery(h) => h.class_index,
            Hit::Validation(h) => h.class_index,
        }
    }

    pub fn feature_index(&self) -> usize {
        match self {
            Hit::Discovery(h) => h.feature_index,
            Hit::Validation(h) => h.feature_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Discovery(Verdict),
    Validation(bool),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitSummary {
    pub hit_id: String,
    pub kind: HitKind,
    pub class_index: usize,
    pub feature_index: usize,
    pub status: HitStatus,
    pub responses: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub hit_id: String,
    /// Distinct workers that have answered so far.
    pub responses: usize,
    pub quorum: usize,
    /// Set once the response that completed the quorum has been aggregated.
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Default)]
struct SlotState {
    responses: Vec<WorkerResponse>,
    votes: BTreeMap<Choice, usize>,
    outcome: Option<Outcome>,
}

#[derive(Debug)]
struct Slot {
    hit: Hit,
    state: Mutex<SlotState>,
}

/// Concurrent HIT registry.
///
/// Each HIT has its own lock, taken for the whole submit-and-maybe-aggregate
/// step, so aggregation happens exactly once per HIT. The registry itself is
/// only write-locked when HITs are added.
#[derive(Debug)]
pub struct HitStore {
    quorum: usize,
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
    journal: Option<(PathBuf, Mutex<File>)>,
}

impl HitStore {
    pub fn new(quorum: usize) -> Result<Self> {
        if quorum == 0 {
            return Err(Error::InvalidConfig("quorum must be positive".into()));
        }
        Ok(HitStore {
            quorum,
            slots: RwLock::new(BTreeMap::new()),
            journal: None,
        })
    }

    /// A store that appends every accepted response to a JSON-lines journal,
    /// replaying the journal's existing contents first.
    pub fn with_journal(quorum: usize, hits: Vec<Hit>, journal: &Path) -> Result<Self> {
        let mut store = HitStore::new(quorum)?;
        for hit in hits {
            store.add_hit(hit)?;
        }
        if journal.exists() {
            let file = File::open(journal).map_err(|e| Error::io(journal, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(journal, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let response: WorkerResponse = serde_json::from_str(&line)?;
                store.submit(&response.hit_id.clone(), response)?;
            }
        }
        if let Some(parent) = journal.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(journal)
            .map_err(|e| Error::io(journal, e))?;
        store.journal = Some((journal.to_path_buf(), Mutex::new(file)));
        Ok(store)
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn add_hit(&self, hit: Hit) -> Result<()> {
        let mut slots = self.slots.write().unwrap();
        let id = hit.id().to_string();
        if slots.contains_key(&id) {
            return Err(Error::InvalidConfig(format!("duplicate hit id `{id}`")));
        }
        slots.insert(
            id,
            Arc::new(Slot {
                hit,
                state: Mutex::new(SlotState::default()),
            }),
        );
        Ok(())
    }

    fn slot(&self, hit_id: &str) -> Result<Arc<Slot>> {
        self.slots
            .read()
            .unwrap()
            .get(hit_id)
            .cloned()
            .ok_or_else(|| Error::UnknownHit(hit_id.to_string()))
    }

    pub fn hit(&self, hit_id: &str) -> Result<(Hit, HitSummary)> {
        let slot = self.slot(hit_id)?;
        let summary = summarize(&slot);
        Ok((slot.hit.clone(), summary))
    }

    pub fn summaries(&self, status: Option<HitStatus>) -> Vec<HitSummary> {
        let slots: Vec<Arc<Slot>> = self.slots.read().unwrap().values().cloned().collect();
        slots
            .iter()
            .map(|s| summarize(s))
            .filter(|s| status.is_none_or(|st| s.status == st))
            .collect()
    }

    /// Records a response. A worker answering twice replaces their earlier
    /// answer. Submitting to a closed HIT fails with [`Error::HitClosed`].
    pub fn submit(&self, hit_id: &str, response: WorkerResponse) -> Result<SubmitReceipt> {
        if response.hit_id != hit_id {
            return Err(Error::InvalidResponse(format!(
                "response targets `{}`, posted to `{hit_id}`",
                response.hit_id
            )));
        }
        let slot = self.slot(hit_id)?;
        response.validate(slot.hit.kind())?;
        let mut state = slot.state.lock().unwrap();
        if state.outcome.is_some() {
            return Err(Error::HitClosed(hit_id.to_string()));
        }
        if let Some((path, journal)) = &self.journal {
            let mut line = serde_json::to_string(&response)?;
            line.push('\n');
            let mut file = journal.lock().unwrap();
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path, e))?;
        }
        state.responses.push(response);
        let latest = latest_per_worker(&state.responses)?;
        let answered = latest.len();
        if answered == self.quorum {
            let votes = vote_counts(latest);
            let outcome = match slot.hit.kind() {
                HitKind::Discovery => Outcome::Discovery(discovery_verdict(&votes, self.quorum)),
                HitKind::Validation => Outcome::Validation(validation_verdict(&votes, self.quorum)),
            };
            state.votes = votes;
            state.outcome = Some(outcome);
        }
        Ok(SubmitReceipt {
            hit_id: hit_id.to_string(),
            responses: answered,
            quorum: self.quorum,
            outcome: state.outcome.clone(),
        })
    }

    /// Verdicts of all closed discovery HITs plus validation flags.
    pub fn ledger(&self) -> AnnotationLedger {
        let slots: Vec<Arc<Slot>> = self.slots.read().unwrap().values().cloned().collect();
        let mut ledger = AnnotationLedger::new();
        let mut validations = Vec::new();
        for slot in &slots {
            let state = slot.state.lock().unwrap();
            match (&slot.hit, &state.outcome) {
                (Hit::Discovery(h), Some(Outcome::Discovery(v))) => {
                    ledger.record_verdict(h.class_index, h.feature_index, *v, state.votes.clone())
                }
                (Hit::Validation(h), Some(Outcome::Validation(ok))) => {
                    validations.push((h.class_index, h.feature_index, *ok))
                }
                _ => {}
            }
        }
        for (class, feature, ok) in validations {
            // a validation whose discovery HIT is not in this store has nothing to attach to
            let _ = ledger.set_validated(class, feature, ok);
        }
        ledger
    }
}

fn summarize(slot: &Slot) -> HitSummary {
    let state = slot.state.lock().unwrap();
    let answered = latest_per_worker(&state.responses).map(|v| v.len()).unwrap_or(0);
    HitSummary {
        hit_id: slot.hit.id().to_string(),
        kind: slot.hit.kind(),
        class_index: slot.hit.class_index(),
        feature_index: slot.hit.feature_index(),
        status: if state.outcome.is_some() {
            HitStatus::Closed
        } else {
            HitStatus::Open
        },
        responses: answered,
    }
}

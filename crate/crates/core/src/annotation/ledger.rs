use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Choice, Verdict};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub class: usize,
    pub feature: usize,
    pub verdict: Verdict,
    pub votes: BTreeMap<Choice, usize>,
    /// Outcome of the heatmap validation HIT, `None` until one has closed.
    pub validated: Option<bool>,
}

/// Wire format of `GET /ledger` and of ledger snapshots on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerExport {
    pub records: Vec<LedgerRecord>,
}

/// Verdicts per `(class, feature)`. Causal, spurious and undecided features of
/// a class are disjoint because each pair holds exactly one verdict.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnnotationLedger {
    records: BTreeMap<(usize, usize), LedgerRecord>,
}

impl AnnotationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_verdict(&mut self, class: usize, feature: usize, verdict: Verdict, votes: BTreeMap<Choice, usize>) {
        let validated = self.records.get(&(class, feature)).and_then(|r| r.validated);
        self.records.insert(
            (class, feature),
            LedgerRecord {
                class,
                feature,
                verdict,
                votes,
                validated,
            },
        );
    }

    pub fn set_validated(&mut self, class: usize, feature: usize, validated: bool) -> Result<()> {
        let record = self.records.get_mut(&(class, feature)).ok_or_else(|| {
            Error::InvalidResponse(format!(
                "validation for ({class}, {feature}) precedes its discovery verdict"
            ))
        })?;
        record.validated = Some(validated);
        Ok(())
    }

    pub fn get(&self, class: usize, feature: usize) -> Option<&LedgerRecord> {
        self.records.get(&(class, feature))
    }

    pub fn records(&self) -> impl Iterator<Item = &LedgerRecord> {
        self.records.values()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.records.keys().map(|&(c, _)| c).collect()
    }

    fn features_with(&self, class: usize, verdict: Verdict) -> BTreeSet<usize> {
        self.records
            .range((class, 0)..=(class, usize::MAX))
            .filter(|(_, r)| r.verdict == verdict)
            .map(|(&(_, f), _)| f)
            .collect()
    }

    /// C(i)
    pub fn causal(&self, class: usize) -> BTreeSet<usize> {
        self.features_with(class, Verdict::Causal)
    }

    /// S(i)
    pub fn spurious(&self, class: usize) -> BTreeSet<usize> {
        self.features_with(class, Verdict::Spurious)
    }

    pub fn undecided(&self, class: usize) -> BTreeSet<usize> {
        self.features_with(class, Verdict::Undecided)
    }

    pub fn export(&self) -> LedgerExport {
        LedgerExport {
            records: self.records.values().cloned().collect(),
        }
    }

    pub fn import(export: LedgerExport) -> Result<Self> {
        let mut records = BTreeMap::new();
        for r in export.records {
            let key = (r.class, r.feature);
            if records.insert(key, r).is_some() {
                return Err(Error::format("ledger", format!("duplicate record for {key:?}")));
            }
        }
        Ok(AnnotationLedger { records })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.export())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::import(serde_json::from_str(text)?)
    }
}

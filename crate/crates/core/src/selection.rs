//! Study-class selection and per-class neural feature importance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use log::warn;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::cache::CacheRecord;
use crate::model::ModelBundle;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Images whose ground-truth label is the class.
    Label,
    /// Images the model predicts as the class.
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extreme {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub model: String,
    pub grouping: Grouping,
    pub extreme: Extreme,
}

/// Per-class accuracy for each `(model, grouping)` pair.
pub type AccuracyTable = BTreeMap<(String, Grouping), BTreeMap<usize, f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyClassSet {
    pub classes: BTreeSet<usize>,
    pub provenance: BTreeMap<usize, Vec<Provenance>>,
    /// Groupings whose class universe was smaller than `n_extreme`.
    pub truncated: Vec<(String, Grouping)>,
}

/// Accuracy of `label` and `prediction` groupings for every class.
///
/// The label grouping of class `i` scores the images labelled `i`, the prediction
/// grouping the images predicted `i`. An empty group scores 0.
pub fn grouping_accuracies(
    labels: &[usize],
    predictions: &[usize],
    num_classes: usize,
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    if labels.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: predictions.len(),
        });
    }
    let mut by_label = vec![(0usize, 0usize); num_classes];
    let mut by_prediction = vec![(0usize, 0usize); num_classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        for c in [y, p] {
            if c >= num_classes {
                return Err(Error::ClassOutOfRange {
                    index: c,
                    num_classes,
                });
            }
        }
        by_label[y].1 += 1;
        by_prediction[p].1 += 1;
        if y == p {
            by_label[y].0 += 1;
            by_prediction[p].0 += 1;
        }
    }
    let rate = |groups: Vec<(usize, usize)>| {
        groups
            .into_iter()
            .enumerate()
            .map(|(c, (hit, n))| (c, if n == 0 { 0.0 } else { hit as f64 / n as f64 }))
            .collect()
    };
    Ok((rate(by_label), rate(by_prediction)))
}

/// Union over all `(model, grouping)` pairs of the `n_extreme` most and least
/// accurate classes. Ties in accuracy go to the lower class index.
pub fn select_study_classes(table: &AccuracyTable, n_extreme: usize) -> Result<StudyClassSet> {
    let mut groups = table.iter();
    let Some((_, first)) = groups.next() else {
        return Err(Error::InvalidConfig("no accuracy groupings given".into()));
    };
    let universe: BTreeSet<usize> = first.keys().copied().collect();
    if universe.is_empty() {
        return Err(Error::InvalidConfig("empty class universe".into()));
    }
    for ((model, grouping), accs) in table {
        if accs.keys().copied().collect::<BTreeSet<_>>() != universe {
            return Err(Error::InvalidConfig(format!(
                "({model}, {grouping:?}) covers a different class universe"
            )));
        }
        if let Some((c, a)) = accs.iter().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidConfig(format!(
                "({model}, {grouping:?}) class {c}: accuracy {a} outside [0, 1]"
            )));
        }
    }

    let mut set = StudyClassSet {
        classes: BTreeSet::new(),
        provenance: BTreeMap::new(),
        truncated: Vec::new(),
    };
    for ((model, grouping), accs) in table {
        if accs.len() < n_extreme {
            warn!(
                "({model}, {grouping:?}) has {} classes, fewer than {n_extreme}; taking all",
                accs.len()
            );
            set.truncated.push((model.clone(), *grouping));
        }
        let mut ranked: Vec<(usize, f64)> = accs.iter().map(|(&c, &a)| (c, a)).collect();
        ranked.sort_by(|a, b| descending(a.1, b.1).then(a.0.cmp(&b.0)));
        let high: Vec<usize> = ranked.iter().take(n_extreme).map(|&(c, _)| c).collect();
        ranked.sort_by(|a, b| descending(b.1, a.1).then(a.0.cmp(&b.0)));
        let low: Vec<usize> = ranked.iter().take(n_extreme).map(|&(c, _)| c).collect();
        for (extreme, classes) in [(Extreme::High, high), (Extreme::Low, low)] {
            for c in classes {
                set.classes.insert(c);
                set.provenance.entry(c).or_default().push(Provenance {
                    model: model.clone(),
                    grouping: *grouping,
                    extreme,
                });
            }
        }
    }
    Ok(set)
}

/// Mean feature vector over the images the model predicts as `class`.
pub fn mean_feature_vector(records: &[CacheRecord], class: usize) -> Result<Array1<f64>> {
    let mut sum: Option<Array1<f64>> = None;
    let mut count = 0usize;
    for r in records.iter().filter(|r| r.predicted == class) {
        let v = Array1::from_iter(r.vector.iter().map(|&x| f64::from(x)));
        match sum.as_mut() {
            Some(s) if s.len() != v.len() => {
                return Err(Error::LengthMismatch {
                    left: s.len(),
                    right: v.len(),
                })
            }
            Some(s) => *s += &v,
            None => sum = Some(v),
        }
        count += 1;
    }
    match sum {
        Some(s) => Ok(s / count as f64),
        None => Err(Error::EmptySubset(format!("no image is predicted as class {class}"))),
    }
}

/// Total order for sorting scores high to low. Unlike `total_cmp` it treats
/// +0.0 and -0.0 as equal, so they fall through to the tie-break.
pub(crate) fn descending(a: f64, b: f64) -> std::cmp::Ordering {
    let key = |v: f64| if v == 0.0 { 0.0 } else { v };
    key(b).total_cmp(&key(a))
}

/// Feature indices ordered by descending value; ties go to the lower index.
pub fn rank_descending(values: &Array1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| descending(values[a], values[b]).then(a.cmp(&b)));
    order
}

/// Elementwise product of the mean feature vector and the class's head row,
/// with the resulting rank permutation.
pub fn feature_importance(mean: &Array1<f64>, head_row: &Array1<f64>) -> Result<(Array1<f64>, Vec<usize>)> {
    if mean.len() != head_row.len() {
        return Err(Error::LengthMismatch {
            left: mean.len(),
            right: head_row.len(),
        });
    }
    let importance = mean * head_row;
    let ranks = rank_descending(&importance);
    Ok((importance, ranks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub class_index: usize,
    pub mean_vector: Array1<f64>,
    pub head_row: Array1<f64>,
    pub importance: Array1<f64>,
    /// Feature indices by descending importance.
    pub ranks: Vec<usize>,
}

impl ImportanceTable {
    pub fn new(class_index: usize, mean_vector: Array1<f64>, head_row: Array1<f64>) -> Result<Self> {
        let (importance, ranks) = feature_importance(&mean_vector, &head_row)?;
        Ok(ImportanceTable {
            class_index,
            mean_vector,
            head_row,
            importance,
            ranks,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.importance.len()
    }

    /// 1-based rank of `feature`.
    pub fn rank_of(&self, feature: usize) -> Option<usize> {
        self.ranks.iter().position(|&f| f == feature).map(|p| p + 1)
    }
}

/// The `n` most important features of a class (all of them if `n` exceeds F).
pub fn top_features(table: &ImportanceTable, n: usize) -> Vec<usize> {
    table.ranks.iter().take(n).copied().collect()
}

/// Importance tables for `classes`; classes the model never predicts are
/// skipped with a warning and returned separately.
pub fn importance_tables(
    model: &ModelBundle,
    records: &[CacheRecord],
    classes: impl IntoIterator<Item = usize>,
) -> Result<(Vec<ImportanceTable>, Vec<usize>)> {
    let mut tables = Vec::new();
    let mut skipped = Vec::new();
    for class in classes {
        match mean_feature_vector(records, class) {
            Ok(mean) => tables.push(ImportanceTable::new(class, mean, model.head_row(class)?)?),
            Err(Error::EmptySubset(msg)) => {
                warn!("skipping class {class}: {msg}");
                skipped.push(class);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((tables, skipped))
}

const TSV_HEADER: &str = "class_index\tfeature_index\tmean_value\tweight\timportance\trank";

/// One row per `(class, feature)`, tab separated, ranks 1-based.
pub fn importance_to_tsv(tables: &[ImportanceTable]) -> String {
    let mut out = String::from(TSV_HEADER);
    out.push('\n');
    for t in tables {
        let mut rank = vec![0usize; t.feature_count()];
        for (pos, &f) in t.ranks.iter().enumerate() {
            rank[f] = pos + 1;
        }
        for j in 0..t.feature_count() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                t.class_index, j, t.mean_vector[j], t.head_row[j], t.importance[j], rank[j]
            );
        }
    }
    out
}

pub fn importance_from_tsv(text: &str) -> Result<Vec<ImportanceTable>> {
    let mut lines = text.lines();
    if lines.next() != Some(TSV_HEADER) {
        return Err(Error::format("importance table", "missing header"));
    }
    // class -> rows (feature, mean, weight, importance, rank)
    let mut rows: BTreeMap<usize, Vec<(usize, f64, f64, f64, usize)>> = BTreeMap::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let bad = || Error::format("importance table", format!("row {}: `{line}`", n + 2));
        let f: Vec<&str> = line.split('\t').collect();
        let [c, j, m, w, iv, r] = f[..] else {
            return Err(bad());
        };
        rows.entry(c.parse().map_err(|_| bad())?).or_default().push((
            j.parse().map_err(|_| bad())?,
            m.parse().map_err(|_| bad())?,
            w.parse().map_err(|_| bad())?,
            iv.parse().map_err(|_| bad())?,
            r.parse().map_err(|_| bad())?,
        ));
    }
    rows.into_iter()
        .map(|(class_index, mut rows)| {
            rows.sort_by_key(|r| r.0);
            if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
                return Err(Error::format("importance table", format!("class {class_index}: features not contiguous")));
            }
            let mut ranks = vec![usize::MAX; rows.len()];
            for r in &rows {
                if r.4 == 0 || r.4 > rows.len() || ranks[r.4 - 1] != usize::MAX {
                    return Err(Error::format("importance table", format!("class {class_index}: invalid ranks")));
                }
                ranks[r.4 - 1] = r.0;
            }
            Ok(ImportanceTable {
                class_index,
                mean_vector: rows.iter().map(|r| r.1).collect(),
                head_row: rows.iter().map(|r| r.2).collect(),
                importance: rows.iter().map(|r| r.3).collect(),
                ranks,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_computed_importance() {
        let (iv, ranks) = feature_importance(&array![1.0, 2.0, 3.0], &array![0.0, 1.0, -1.0]).unwrap();
        assert_eq!(iv, array![0.0, 2.0, -3.0]);
        assert_eq!(ranks, vec![1, 0, 2]);
    }

    #[test]
    fn unit_weights_rank_by_mean() {
        let mean = array![0.3, 0.9, 0.1, 0.5];
        let (_, ranks) = feature_importance(&mean, &Array1::ones(4)).unwrap();
        assert_eq!(ranks, vec![1, 3, 0, 2]);
    }

    #[test]
    fn ties_go_to_lower_feature_index() {
        let t = ImportanceTable::new(0, array![1.0, 2.0, 1.0, 2.0], Array1::ones(4)).unwrap();
        assert_eq!(top_features(&t, 2), vec![1, 3]);
        assert_eq!(top_features(&t, 4), vec![1, 3, 0, 2]);
        assert_eq!(t.rank_of(0), Some(3));
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(
            feature_importance(&array![1.0], &array![1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn rec(id: &str, predicted: usize, v: &[f32]) -> CacheRecord {
        CacheRecord {
            image_id: id.into(),
            predicted,
            predicted_logit: 0.0,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn mean_over_predicted_subset() {
        let records = vec![
            rec("a", 1, &[1.0, 2.0]),
            rec("b", 0, &[9.0, 9.0]),
            rec("c", 1, &[3.0, 0.5]),
            rec("d", 1, &[2.0, 0.5]),
        ];
        // brute-force accumulation
        let mut acc = [0.0f64; 2];
        let mut n = 0.0;
        for r in records.iter().filter(|r| r.predicted == 1) {
            for k in 0..2 {
                acc[k] += f64::from(r.vector[k]);
            }
            n += 1.0;
        }
        let mean = mean_feature_vector(&records, 1).unwrap();
        for k in 0..2 {
            assert!((mean[k] - acc[k] / n).abs() < 1e-7);
        }
        assert_eq!(mean_feature_vector(&records, 0).unwrap(), array![9.0, 9.0]);
        assert!(matches!(mean_feature_vector(&records, 2), Err(Error::EmptySubset(_))));
    }

    #[test]
    fn grouping_accuracy_counts() {
        let labels = [0, 0, 1, 1, 2];
        let preds = [0, 1, 1, 1, 0];
        let (by_label, by_pred) = grouping_accuracies(&labels, &preds, 4).unwrap();
        assert_eq!(by_label[&0], 0.5);
        assert_eq!(by_label[&1], 1.0);
        assert_eq!(by_label[&2], 0.0);
        assert_eq!(by_label[&3], 0.0);
        assert_eq!(by_pred[&0], 0.5);
        assert_eq!(by_pred[&1], 2.0 / 3.0);
        assert_eq!(by_pred[&2], 0.0);
    }

    fn table_from(groups: &[(&str, Grouping, Vec<f64>)]) -> AccuracyTable {
        groups
            .iter()
            .map(|(m, g, accs)| ((m.to_string(), *g), accs.iter().copied().enumerate().collect()))
            .collect()
    }

    #[test]
    fn identical_rankings_give_disjoint_extremes() {
        let accs: Vec<f64> = (0..10).map(|c| c as f64 / 10.0).collect();
        let table = table_from(&[
            ("std", Grouping::Label, accs.clone()),
            ("std", Grouping::Prediction, accs.clone()),
            ("robust", Grouping::Label, accs.clone()),
        ]);
        let set = select_study_classes(&table, 3).unwrap();
        assert_eq!(set.classes, BTreeSet::from([0, 1, 2, 7, 8, 9]));
        assert_eq!(set.provenance[&9].len(), 3);
        assert!(set.truncated.is_empty());
    }

    #[test]
    fn synthetic_ten_class_table_matches_sort_oracle() {
        let a = vec![0.9, 0.1, 0.5, 0.5, 0.3, 0.95, 0.2, 0.6, 0.0, 0.7];
        let b = vec![0.2, 0.8, 0.4, 0.1, 0.9, 0.3, 0.3, 0.05, 0.6, 0.5];
        let table = table_from(&[("m", Grouping::Label, a.clone()), ("m", Grouping::Prediction, b.clone())]);
        let set = select_study_classes(&table, 2).unwrap();
        // exhaustive oracle: a class is selected iff fewer than 2 classes beat it
        // (ties broken by index) from above or from below in some grouping
        let mut expected = BTreeSet::new();
        for accs in [&a, &b] {
            for c in 0..10 {
                let above = (0..10).filter(|&o| accs[o] > accs[c] || (accs[o] == accs[c] && o < c)).count();
                let below = (0..10).filter(|&o| accs[o] < accs[c] || (accs[o] == accs[c] && o < c)).count();
                if above < 2 || below < 2 {
                    expected.insert(c);
                }
            }
        }
        assert_eq!(set.classes, expected);
    }

    #[test]
    fn small_universe_is_flagged() {
        let table = table_from(&[("m", Grouping::Label, vec![0.1, 0.2, 0.3])]);
        let set = select_study_classes(&table, 5).unwrap();
        assert_eq!(set.classes.len(), 3);
        assert_eq!(set.truncated, vec![("m".to_string(), Grouping::Label)]);
    }

    #[test]
    fn mismatched_universe_rejected() {
        let mut table = table_from(&[("m", Grouping::Label, vec![0.1, 0.2])]);
        table.insert(("m".into(), Grouping::Prediction), BTreeMap::from([(0, 0.5)]));
        assert!(select_study_classes(&table, 1).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let tables = vec![
            ImportanceTable::new(3, array![0.1, 2.5, 1.0 / 3.0], array![-1.0, 0.25, 7.0]).unwrap(),
            ImportanceTable::new(7, array![1.0, 1.0, 1.0], array![1.0, 1.0, 1.0]).unwrap(),
        ];
        let text = importance_to_tsv(&tables);
        assert!(text.starts_with("class_index\tfeature_index\tmean_value\tweight\timportance\trank\n3\t0\t"));
        assert_eq!(importance_from_tsv(&text).unwrap(), tables);
    }
}

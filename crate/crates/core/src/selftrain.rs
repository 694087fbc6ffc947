//! Class-variable self-training.
//!
//! A locally trained model labels the unlabeled pool; predictions whose top
//! probability reaches `tau` become pseudo-labels. Of the pseudo-labeled
//! items predicted as class `p`, only the `ceil(mu_p * n_p)` most confident
//! are added to the label set, so classes whose global count grew the least
//! receive the most pseudo-labeled data.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClientDataset, LabeledSet};
use crate::error::{contract, Result};
use crate::nn::{ModelParams, TrainConfig};
use crate::seed::{self, Stream};

/// When FCVI clients self-train and with which `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuSchedule {
    /// Every round, with the most recent monitored `mu` (all ones before
    /// the first monitored round).
    #[default]
    Persistent,
    /// Only in the round right after a monitored round; labeled-only
    /// training otherwise.
    AfterChangeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTrainConfig {
    /// Confidence threshold. Validated to `(0, 1]`; values above 1 are only
    /// reachable by constructing the struct directly and disable
    /// pseudo-labeling entirely.
    pub tau: f64,
    pub max_iters: usize,
    /// Remove selected items from the pool for later iterations of the
    /// same round.
    pub consume_selected: bool,
    pub mu_schedule: MuSchedule,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            max_iters: 3,
            consume_selected: true,
            mu_schedule: MuSchedule::Persistent,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(contract(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(contract("max_iters must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub features: Array1<f64>,
    pub label: usize,
    pub confidence: f64,
    /// Row index into the client's unlabeled set.
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabeledSet {
    pub items: Vec<PseudoLabel>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }
}

/// Pseudo-labels every row of `features` whose top probability is at least
/// `tau`. `source_indices[i]` is recorded as the origin of row `i`.
pub fn pseudo_label_indexed(
    model: &ModelParams,
    features: ArrayView2<f64>,
    source_indices: &[usize],
    tau: f64,
) -> Result<PseudoLabeledSet> {
    if features.nrows() != source_indices.len() {
        return Err(contract("source index list does not match feature rows"));
    }
    if features.nrows() == 0 {
        return Ok(PseudoLabeledSet::default());
    }
    let probs = model.predict_proba(features)?;
    let items = probs
        .rows()
        .into_iter()
        .zip(features.rows())
        .zip(source_indices)
        .filter_map(|((p, x), &source_index)| {
            let label = crate::nn::argmax(p);
            let confidence = p[label];
            (confidence >= tau).then(|| PseudoLabel {
                features: x.to_owned(),
                label,
                confidence,
                source_index,
            })
        })
        .collect();
    Ok(PseudoLabeledSet { items })
}

pub fn pseudo_label(model: &ModelParams, features: ArrayView2<f64>, tau: f64) -> Result<PseudoLabeledSet> {
    let idx: Vec<usize> = (0..features.nrows()).collect();
    pseudo_label_indexed(model, features, &idx, tau)
}

/// Keeps the `ceil(mu[p] * n_p)` most confident items of each class `p`.
/// Ties go to the smaller source index. Output is ordered by class, then by
/// rank.
pub fn select_subset(pseudo: &PseudoLabeledSet, mu: &[f64]) -> Result<PseudoLabeledSet> {
    if let Some(bad) = mu.iter().find(|&&m| !(m > 0.0 && m <= 1.0 + 1e-12)) {
        return Err(contract(format!("mu entries must lie in (0, 1], got {bad}")));
    }
    if let Some(it) = pseudo.items.iter().find(|it| it.label >= mu.len()) {
        return Err(contract(format!("pseudo-label {} has no mu entry", it.label)));
    }
    let mut by_class: Vec<Vec<&PseudoLabel>> = vec![Vec::new(); mu.len()];
    for it in &pseudo.items {
        by_class[it.label].push(it);
    }
    let mut items = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        members.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.source_index.cmp(&b.source_index))
        });
        let keep = ((mu[class] * members.len() as f64).ceil() as usize).min(members.len());
        items.extend(members.into_iter().take(keep).cloned());
    }
    Ok(PseudoLabeledSet { items })
}

/// Labeled set followed by the pseudo-labeled items.
pub fn expand_label_set(labeled: &LabeledSet, subset: &PseudoLabeledSet) -> Result<LabeledSet> {
    if subset.is_empty() {
        return Ok(labeled.clone());
    }
    let d = labeled.dim();
    if subset.items.iter().any(|it| it.features.len() != d) {
        return Err(contract("pseudo-labeled feature dimension does not match the label set"));
    }
    let mut features = Array2::zeros((labeled.len() + subset.len(), d));
    features.slice_mut(ndarray::s![..labeled.len(), ..]).assign(&labeled.features());
    for (row, it) in features
        .axis_iter_mut(Axis(0))
        .skip(labeled.len())
        .zip(&subset.items)
    {
        let mut row = row;
        row.assign(&it.features);
    }
    let mut labels = labeled.labels().to_vec();
    labels.extend(subset.items.iter().map(|it| it.label));
    LabeledSet::new(features, labels, labeled.classes())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SelfTrainDiagnostics {
    /// Pseudo-labels kept per class, one entry per iteration that ran.
    pub kept: Vec<Vec<usize>>,
    /// Pseudo-labels above threshold per iteration, before subset selection.
    pub candidates: Vec<usize>,
}

impl SelfTrainDiagnostics {
    pub fn total_kept(&self) -> usize {
        self.kept.iter().flatten().sum()
    }
}

/// Self-training from `model`:
/// 1. train on the labeled set;
/// 2. pseudo-label the pool, keep a `mu`-sized subset per class;
/// 3. retrain from `model` on labeled plus kept items;
/// 4. repeat 2-3 up to `max_iters` times or until nothing clears `tau`.
pub fn self_train(
    model: &ModelParams,
    client: &ClientDataset,
    mu: &[f64],
    stc: &SelfTrainConfig,
    tc: &TrainConfig,
) -> Result<(ModelParams, SelfTrainDiagnostics)> {
    if mu.len() != model.classes() {
        return Err(contract("mu must have one entry per class"));
    }
    let mut diagnostics = SelfTrainDiagnostics::default();
    // With no labeled data the incoming global model is the initial model.
    let mut current = model.train_local(&client.labeled, tc)?;
    let pool = client.unlabeled.features();
    let mut remaining: Vec<usize> = (0..pool.nrows()).collect();
    let mut accepted = PseudoLabeledSet::default();

    for iter in 0..stc.max_iters {
        if remaining.is_empty() {
            break;
        }
        let view = pool.select(Axis(0), &remaining);
        let pseudo = pseudo_label_indexed(&current, view.view(), &remaining, stc.tau)?;
        diagnostics.candidates.push(pseudo.len());
        if pseudo.is_empty() {
            diagnostics.kept.push(vec![0; mu.len()]);
            break;
        }
        let subset = select_subset(&pseudo, mu)?;
        diagnostics.kept.push(subset.class_counts(mu.len()));
        if stc.consume_selected {
            let mut taken: Vec<usize> = subset.items.iter().map(|it| it.source_index).collect();
            taken.sort_unstable();
            remaining.retain(|i| taken.binary_search(i).is_err());
            accepted.items.extend(subset.items);
        } else {
            accepted = subset;
        }
        let expanded = expand_label_set(&client.labeled, &accepted)?;
        let iter_cfg = tc.with_seed(seed::derive(tc.rng_seed, Stream::SelfTraining, &[iter as u64]));
        current = model.train_local(&expanded, &iter_cfg)?;
    }
    Ok((current, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::UnlabeledSet;
    use ndarray::array;

    fn item(label: usize, confidence: f64, source_index: usize) -> PseudoLabel {
        PseudoLabel {
            features: array![source_index as f64, 0.0],
            label,
            confidence,
            source_index,
        }
    }

    /// Logits [ln(0.95/0.05), 0] on item A and [0, 0] on item B: maxima 0.95 and 0.5.
    fn two_item_model() -> (ModelParams, Array2<f64>) {
        let params = ModelParams::from_parts(
            array![[1.0, 0.0]],
            array![0.0],
            array![[(0.95f64 / 0.05).ln()], [0.0]],
            array![0.0, 0.0],
        )
        .unwrap();
        (params, array![[1.0, 3.0], [0.0, -2.0]])
    }

    #[test]
    fn threshold_keeps_only_confident_items() {
        let (m, x) = two_item_model();
        let p = pseudo_label(&m, x.view(), 0.9).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.items[0].source_index, 0);
        assert_eq!(p.items[0].label, 0);
        assert!((p.items[0].confidence - 0.95).abs() < 1e-12);
        assert!(pseudo_label(&m, x.view(), 1.5).unwrap().is_empty());
        assert_eq!(pseudo_label(&m, x.view(), 1e-9).unwrap().len(), 2);
    }

    #[test]
    fn quarter_ratio_keeps_one_of_four() {
        let pseudo = PseudoLabeledSet {
            items: vec![item(1, 0.91, 4), item(1, 0.99, 7), item(1, 0.95, 2), item(1, 0.93, 9), item(0, 0.9, 1)],
        };
        let s = select_subset(&pseudo, &[1.0, 0.25]).unwrap();
        assert_eq!(s.class_counts(2), vec![1, 1]);
        assert_eq!(s.items[1].source_index, 7);
    }

    #[test]
    fn unit_mu_is_identity_up_to_order() {
        let pseudo = PseudoLabeledSet {
            items: vec![item(0, 0.9, 0), item(1, 0.8, 1), item(0, 0.95, 2)],
        };
        let s = select_subset(&pseudo, &[1.0, 1.0]).unwrap();
        let mut a: Vec<usize> = s.items.iter().map(|i| i.source_index).collect();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
        let s = select_subset(&pseudo, &[1.0, 1.0, 0.3]).unwrap();
        assert_eq!(s.class_counts(3)[2], 0);
    }

    #[test]
    fn ties_prefer_smaller_source_index() {
        let pseudo = PseudoLabeledSet {
            items: vec![item(0, 0.9, 5), item(0, 0.9, 3), item(0, 0.9, 8)],
        };
        let s = select_subset(&pseudo, &[0.3]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.items[0].source_index, 3);
        assert!(select_subset(&pseudo, &[0.0]).is_err());
    }

    #[test]
    fn expansion_appends_after_labeled() {
        let labeled = LabeledSet::new(array![[1.0, 1.0], [2.0, 2.0]], vec![0, 1], 2).unwrap();
        assert_eq!(expand_label_set(&labeled, &PseudoLabeledSet::default()).unwrap(), labeled);
        let subset = PseudoLabeledSet {
            items: vec![item(1, 0.9, 3), item(1, 0.92, 4)],
        };
        let e = expand_label_set(&labeled, &subset).unwrap();
        assert_eq!(e.len(), 4);
        assert_eq!(e.labels(), &[0, 1, 1, 1]);
        assert_eq!(e.class_counts(), vec![1, 3]);
        assert_eq!(e.features().row(0), labeled.features().row(0));
        let bad = PseudoLabeledSet {
            items: vec![PseudoLabel {
                features: array![1.0],
                label: 0,
                confidence: 1.0,
                source_index: 0,
            }],
        };
        assert!(expand_label_set(&labeled, &bad).is_err());
    }

    #[test]
    fn threshold_above_one_reduces_to_local_training() {
        let mut rng = seed::rng(1);
        let m = ModelParams::init(2, 4, 2, &mut rng).unwrap();
        let client = ClientDataset {
            labeled: LabeledSet::new(array![[1.0, 0.0], [0.0, 1.0], [1.1, 0.1]], vec![0, 1, 0], 2).unwrap(),
            unlabeled: UnlabeledSet::new(array![[0.9, 0.0], [0.1, 1.2]], vec![0, 1]).unwrap(),
        };
        let tc = TrainConfig::new(0.1, 2, 3, 9).unwrap();
        let stc = SelfTrainConfig {
            tau: 1.5,
            ..SelfTrainConfig::default()
        };
        let (out, diag) = self_train(&m, &client, &[1.0, 1.0], &stc, &tc).unwrap();
        assert_eq!(out, m.train_local(&client.labeled, &tc).unwrap());
        assert_eq!(diag.total_kept(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(SelfTrainConfig::default().validate().is_ok());
        let mut c = SelfTrainConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        c.tau = 1.2;
        assert!(c.validate().is_err());
    }
}

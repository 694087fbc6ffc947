//! Synthetic Gaussian-blob data, labeled/unlabeled splitting and scripted
//! client churn.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::federation::AggregationWeights;
use crate::monitor::MonitorThresholds;
use crate::nn::TrainConfig;
use crate::seed::{self, Stream};
use crate::selftrain::SelfTrainConfig;

/// Labeled samples. Labels are class indices in `0..classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(contract("features and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(contract(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn empty(dim: usize, classes: usize) -> Self {
        Self {
            features: Array2::zeros((0, dim)),
            labels: Vec::new(),
            classes,
        }
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        histogram(&self.labels, self.classes)
    }
}

/// Unlabeled samples. The true labels are kept for evaluation only; the
/// training path reads [`UnlabeledSet::features`] and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Array2<f64>,
    oracle_labels: Vec<usize>,
}

impl UnlabeledSet {
    pub fn new(features: Array2<f64>, oracle_labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != oracle_labels.len() {
            return Err(contract("features and oracle labels differ in length"));
        }
        Ok(Self {
            features,
            oracle_labels,
        })
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    /// Mutable access to the features, for perturbation tests.
    pub fn features_mut(&mut self) -> &mut Array2<f64> {
        &mut self.features
    }

    /// Hidden ground truth. Evaluation only.
    pub fn oracle_labels(&self) -> &[usize] {
        &self.oracle_labels
    }

    pub fn len(&self) -> usize {
        self.oracle_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.oracle_labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
}

/// Isotropic Gaussian class-conditional distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    class_means: Array2<f64>,
    sigma: f64,
}

impl GaussianSpec {
    pub fn new(class_means: Array2<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(contract("sigma must be positive"));
        }
        if class_means.nrows() < 2 || class_means.ncols() == 0 {
            return Err(contract("need at least two classes and one feature"));
        }
        for i in 0..class_means.nrows() {
            for j in 0..i {
                if class_means.row(i) == class_means.row(j) {
                    return Err(contract(format!("class means {j} and {i} coincide")));
                }
            }
        }
        Ok(Self { class_means, sigma })
    }

    /// Means at `scale * e_l`, the vertices of a scaled standard simplex.
    /// Pairwise distance is `scale * sqrt(2)`.
    pub fn simplex(classes: usize, dim: usize, scale: f64, sigma: f64) -> Result<Self> {
        if classes > dim {
            return Err(contract(format!("simplex means need dim >= classes ({dim} < {classes})")));
        }
        if !(scale > 0.0) {
            return Err(contract("mean scale must be positive"));
        }
        let mut means = Array2::zeros((classes, dim));
        for l in 0..classes {
            means[[l, l]] = scale;
        }
        Self::new(means, sigma)
    }

    pub fn classes(&self) -> usize {
        self.class_means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.class_means.ncols()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn class_means(&self) -> &Array2<f64> {
        &self.class_means
    }
}

/// Draws exactly `counts[l]` samples of class `l`, class by class.
pub fn generate_class_data(spec: &GaussianSpec, counts: &[usize], seed: u64) -> Result<(Array2<f64>, Vec<usize>)> {
    if counts.len() != spec.classes() {
        return Err(contract(format!("expected {} class counts, got {}", spec.classes(), counts.len())));
    }
    let total: usize = counts.iter().sum();
    let d = spec.dim();
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| contract(e.to_string()))?;
    let mut features = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (class, &n) in counts.iter().enumerate() {
        let mean = spec.class_means.row(class);
        for _ in 0..n {
            for (j, v) in features.row_mut(row).iter_mut().enumerate() {
                *v = mean[j] + noise.sample(&mut rng);
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok((features, labels))
}

/// Per-class labeled counts for a stratified split: floor of `beta * n_l` per
/// class, then the remaining `round(beta * N)` budget goes to the largest
/// fractional remainders (lower class index on ties).
pub fn stratified_counts(counts: &[usize], beta: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(contract(format!("label fraction must lie in [0, 1], got {beta}")));
    }
    let total: usize = counts.iter().sum();
    let target = (beta * total as f64).round() as usize;
    let mut out: Vec<usize> = counts.iter().map(|&n| (beta * n as f64).floor() as usize).collect();
    let mut assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    let frac = |l: usize| beta * counts[l] as f64 - out[l] as f64;
    let fracs: Vec<f64> = order.iter().map(|&l| frac(l)).collect();
    order.sort_by(|&a, &b| fracs[b].total_cmp(&fracs[a]).then(a.cmp(&b)));
    for &l in order.iter().cycle().take(counts.len() * 2) {
        if assigned >= target {
            break;
        }
        if out[l] < counts[l] {
            out[l] += 1;
            assigned += 1;
        }
    }
    Ok(out)
}

/// Stratified split into a labeled set of `round(beta * N)` samples and an
/// unlabeled set holding the rest. Both keep the input's relative order.
pub fn split_labeled_unlabeled(
    features: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    beta: f64,
    seed: u64,
) -> Result<(LabeledSet, UnlabeledSet)> {
    if features.nrows() != labels.len() {
        return Err(contract("features and labels differ in length"));
    }
    let counts = histogram_checked(labels, classes)?;
    let keep = stratified_counts(&counts, beta)?;
    let mut rng = seed::rng(seed);
    let mut is_labeled = vec![false; labels.len()];
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for &i in &members[..keep[class]] {
            is_labeled[i] = true;
        }
    }
    let (lab, unl): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| is_labeled[i]);
    let labeled = LabeledSet::new(
        features.select(Axis(0), &lab),
        lab.iter().map(|&i| labels[i]).collect(),
        classes,
    )?;
    let unlabeled = UnlabeledSet::new(features.select(Axis(0), &unl), unl.iter().map(|&i| labels[i]).collect())?;
    Ok((labeled, unlabeled))
}

fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

fn histogram_checked(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(contract(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(histogram(labels, classes))
}

/// Synthetic data generator settings for a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dim: usize,
    pub sigma: f64,
    pub mean_scale: f64,
    pub label_fraction: f64,
    /// Held-out test samples per class (balanced over every class).
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            sigma: 1.0,
            mean_scale: 5.0,
            label_fraction: 0.3,
            test_per_class: 200,
        }
    }
}

/// One edge server: when it participates and what data it brings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: usize,
    /// First active round.
    pub join: usize,
    /// First round after the client has left. `rounds + 1` means never.
    pub leave: usize,
    /// Per-class sample counts before the labeled/unlabeled split.
    pub counts: Vec<usize>,
}

impl ClientSpec {
    pub fn is_active(&self, round: usize) -> bool {
        self.join <= round && round < self.leave
    }
}

/// A full scripted scenario: churn, data, model and protocol settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSchedule {
    pub rounds: usize,
    pub classes: usize,
    pub hidden: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub monitor: MonitorThresholds,
    pub self_train: SelfTrainConfig,
    pub aggregation: AggregationWeights,
    pub clients: Vec<ClientSpec>,
}

impl ScenarioSchedule {
    /// Checks every structural invariant, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds", "must be >= 1"));
        }
        if self.classes < 2 {
            return Err(invalid("classes", "must be >= 2"));
        }
        if self.hidden == 0 {
            return Err(invalid("hidden", "must be >= 1"));
        }
        if self.data.dim == 0 {
            return Err(invalid("data.dim", "must be >= 1"));
        }
        if self.data.classes_fit(self.classes).is_err() {
            return Err(invalid(
                "data.dim",
                format!("simplex class means need dim >= classes ({} < {})", self.data.dim, self.classes),
            ));
        }
        if !(self.data.sigma > 0.0 && self.data.sigma.is_finite()) {
            return Err(invalid("data.sigma", "must be > 0"));
        }
        if !(self.data.mean_scale > 0.0 && self.data.mean_scale.is_finite()) {
            return Err(invalid("data.mean_scale", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.data.label_fraction) {
            return Err(invalid("data.label_fraction", "must lie in [0, 1]"));
        }
        if self.data.test_per_class == 0 {
            return Err(invalid("data.test_per_class", "must be >= 1"));
        }
        self.train
            .validate()
            .map_err(|e| invalid("train", e.to_string()))?;
        self.monitor
            .validate()
            .map_err(|e| invalid("monitor", e.to_string()))?;
        self.self_train
            .validate()
            .map_err(|e| invalid("self_train", e.to_string()))?;
        if self.clients.is_empty() {
            return Err(invalid("clients", "at least one client is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, c) in self.clients.iter().enumerate() {
            let key = |field: &str| format!("clients[{i}].{field}");
            if !seen.insert(c.id) {
                return Err(invalid(key("id"), format!("duplicate client id {}", c.id)));
            }
            if c.join < 1 || c.join > self.rounds {
                return Err(invalid(key("join"), format!("must lie in 1..={}", self.rounds)));
            }
            if c.leave <= c.join || c.leave > self.rounds + 1 {
                return Err(invalid(
                    key("leave"),
                    format!("must satisfy join < leave <= {}", self.rounds + 1),
                ));
            }
            if c.counts.len() != self.classes {
                return Err(invalid(
                    key("counts"),
                    format!("expected {} per-class counts, got {}", self.classes, c.counts.len()),
                ));
            }
        }
        for t in 1..=self.rounds {
            if !self.clients.iter().any(|c| c.is_active(t)) {
                return Err(invalid("clients", format!("no active client in round {t}")));
            }
        }
        Ok(())
    }

    fn check_round(&self, round: usize) -> Result<()> {
        if round < 1 || round > self.rounds {
            return Err(contract(format!("round {round} outside 1..={}", self.rounds)));
        }
        Ok(())
    }

    /// Ids of the clients active in `round`, ascending.
    pub fn active_clients(&self, round: usize) -> Result<Vec<usize>> {
        self.check_round(round)?;
        let mut ids: Vec<usize> = self.clients.iter().filter(|c| c.is_active(round)).map(|c| c.id).collect();
        ids.sort_unstable();
        Ok(ids)
    }

    pub fn active_count(&self, round: usize) -> Result<usize> {
        Ok(self.active_clients(round)?.len())
    }

    /// Ground-truth labeled class counts summed over the active clients.
    /// Evaluation only; the protocol never sees it.
    pub fn true_class_counts(&self, round: usize) -> Result<Vec<usize>> {
        self.check_round(round)?;
        let mut total = vec![0; self.classes];
        for c in self.clients.iter().filter(|c| c.is_active(round)) {
            for (t, n) in total.iter_mut().zip(stratified_counts(&c.counts, self.data.label_fraction)?) {
                *t += n;
            }
        }
        Ok(total)
    }

    /// Rounds `t >= 2` whose active client count differs from round `t - 1`.
    pub fn change_rounds(&self) -> Vec<usize> {
        (2..=self.rounds)
            .filter(|&t| self.active_count(t).ok() != self.active_count(t - 1).ok())
            .collect()
    }

    pub fn gaussian_spec(&self) -> Result<GaussianSpec> {
        GaussianSpec::simplex(self.classes, self.data.dim, self.data.mean_scale, self.data.sigma)
    }

    /// Generates and splits every client's data for a run seed.
    pub fn build_clients(&self, run_seed: u64) -> Result<BTreeMap<usize, ClientDataset>> {
        let spec = self.gaussian_spec()?;
        let mut out = BTreeMap::new();
        for c in &self.clients {
            let id = c.id as u64;
            let (x, y) = generate_class_data(&spec, &c.counts, seed::derive(run_seed, Stream::ClientData, &[id]))?;
            let (labeled, unlabeled) = split_labeled_unlabeled(
                x.view(),
                &y,
                self.classes,
                self.data.label_fraction,
                seed::derive(run_seed, Stream::ClientSplit, &[id]),
            )?;
            out.insert(c.id, ClientDataset { labeled, unlabeled });
        }
        Ok(out)
    }

    /// Balanced held-out test set covering every class.
    pub fn build_test_set(&self, run_seed: u64) -> Result<LabeledSet> {
        let spec = self.gaussian_spec()?;
        let counts = vec![self.data.test_per_class; self.classes];
        let (x, y) = generate_class_data(&spec, &counts, seed::derive(run_seed, Stream::TestSet, &[]))?;
        LabeledSet::new(x, y, self.classes)
    }
}

impl DataConfig {
    fn classes_fit(&self, classes: usize) -> Result<()> {
        if classes > self.dim {
            return Err(contract("dim < classes"));
        }
        Ok(())
    }
}

/// Per-class sample means, used by the generator sanity checks.
pub fn class_means(features: ArrayView2<f64>, labels: &[usize], classes: usize) -> Vec<Option<Array1<f64>>> {
    (0..classes)
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                None
            } else {
                features.select(Axis(0), &idx).mean_axis(Axis(0))
            }
        })
        .collect()
}

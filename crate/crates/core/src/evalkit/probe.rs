//! One-hidden-layer ReLU MLP trained on frozen features.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Parameters, TensorMut, TensorRef};
use crate::rng::{derive_rng, purpose};
use crate::trainer::optim::{adamw_step, AdamState, OptimConfig};
use crate::transformerpp::linear::INIT_STD;
use crate::transformerpp::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    SoftmaxCe,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    MeanAp,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MeanAp => "mAP",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub val_fraction: f64,
    pub loss: LossMode,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            lr_grid: vec![1e-3, 3.2e-4, 1e-4],
            epochs: 100,
            batch_size: 32,
            weight_decay: 0.0,
            val_fraction: 0.2,
            loss: LossMode::SoftmaxCe,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "probe hidden, epochs and batch_size must be positive".into(),
            ));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("probe lr grid must hold positive values".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per row.
    Single { classes: usize, y: Vec<usize> },
    /// `[n × labels]` of 0/1.
    Multi(Array2<f64>),
}

impl Labels {
    pub fn single(y: Vec<usize>) -> Self {
        let classes = y.iter().max().map_or(0, |m| m + 1);
        Labels::Single { classes, y }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single { y, .. } => y.len(),
            Labels::Multi(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } => *classes,
            Labels::Multi(m) => m.ncols(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Labels::Single { classes, y } => Labels::Single {
                classes: *classes,
                y: idx.iter().map(|&i| y[i]).collect(),
            },
            Labels::Multi(m) => Labels::Multi(m.select(Axis(0), idx)),
        }
    }

    fn check(&self) -> Result<()> {
        match self {
            Labels::Single { classes, y } => {
                if let Some(bad) = y.iter().find(|&&c| c >= *classes) {
                    return Err(Error::Labels(format!("label {bad} outside {classes} classes")));
                }
                let mut seen = vec![false; *classes];
                y.iter().for_each(|&c| seen[c] = true);
                if seen.iter().filter(|&&s| s).count() < 2 {
                    return Err(Error::Labels("need at least two distinct classes".into()));
                }
                if y.len() < *classes {
                    return Err(Error::Labels(format!("{} examples for {classes} classes", y.len())));
                }
            }
            Labels::Multi(m) => {
                if m.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Labels("multi-label targets must be 0 or 1".into()));
                }
                let pos = m.sum();
                if pos == 0.0 || pos == m.len() as f64 {
                    return Err(Error::Labels("multi-label targets are constant".into()));
                }
            }
        }
        Ok(())
    }

    fn targets(&self) -> Array2<f64> {
        match self {
            Labels::Single { classes, y } => {
                let mut t = Array2::zeros((y.len(), *classes));
                for (i, &c) in y.iter().enumerate() {
                    t[[i, c]] = 1.0;
                }
                t
            }
            Labels::Multi(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeNet {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Parameters for ProbeNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.fc1.collect(&crate::params::join(prefix, "fc1"), out);
        self.fc2.collect(&crate::params::join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.fc1.collect_mut(&crate::params::join(prefix, "fc1"), out);
        self.fc2.collect_mut(&crate::params::join(prefix, "fc2"), out);
    }
}

impl ProbeNet {
    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = self.fc1.forward(x).mapv(|v| v.max(0.0));
        let logits = self.fc2.forward(h.view());
        (h, logits)
    }
}

/// Trained probe plus the feature standardization fitted on its training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub net: ProbeNet,
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
    pub loss: LossMode,
    pub lr: f64,
    pub val_metric: f64,
}

impl Probe {
    pub fn param_count(&self) -> usize {
        self.net.num_scalars()
    }

    pub fn scores(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let x = (&features - &self.mean) / &self.std;
        self.net.forward(x.view()).1
    }
}

pub fn probe_param_count(d: usize, hidden: usize, classes: usize) -> usize {
    d * hidden + hidden + hidden * classes + classes
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Loss and `dL/dlogits` for a batch.
fn loss_grad(logits: &Array2<f64>, targets: ArrayView2<f64>, mode: LossMode) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    match mode {
        LossMode::SoftmaxCe => {
            let p = softmax_rows(logits);
            let loss = -(&p.mapv(|v| v.max(1e-300).ln()) * &targets).sum() / n;
            (loss, (p - targets) / n)
        }
        LossMode::Bce => {
            let count = logits.len() as f64;
            let mut loss = 0.0;
            let mut grad = Array2::zeros(logits.dim());
            for ((z, t), g) in logits.iter().zip(targets.iter()).zip(grad.iter_mut()) {
                // log(1 + e^z) - t z, stable form
                loss += z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
                *g = (sigmoid(*z) - t) / count;
            }
            (loss / count, grad)
        }
    }
}

fn standardize(x: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).expect("non-empty features");
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, std)
}

/// Stratified for single-label data: each class contributes the same share.
fn split(labels: &Labels, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = derive_rng(seed, &[purpose::PROBE, 0]);
    let groups: Vec<Vec<usize>> = match labels {
        Labels::Single { classes, y } => (0..*classes)
            .map(|c| (0..y.len()).filter(|&i| y[i] == c).collect())
            .collect(),
        Labels::Multi(m) => vec![(0..m.nrows()).collect()],
    };
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut g in groups {
        g.shuffle(&mut rng);
        let k = ((g.len() as f64 * val_fraction).round() as usize).min(g.len().saturating_sub(1));
        val.extend_from_slice(&g[..k]);
        train.extend_from_slice(&g[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn fit_one(x: ArrayView2<f64>, targets: ArrayView2<f64>, lr: f64, cfg: &ProbeConfig) -> Result<ProbeNet> {
    let (d, c) = (x.ncols(), targets.ncols());
    let mut rng = derive_rng(cfg.seed, &[purpose::PROBE, 1]);
    let mut net = ProbeNet {
        fc1: Linear::init(&mut rng, d, cfg.hidden, true, INIT_STD),
        fc2: Linear::init(&mut rng, cfg.hidden, c, true, INIT_STD),
    };
    let mut state = AdamState::new(&net);
    let optim = OptimConfig {
        weight_decay: cfg.weight_decay,
        batch_size: cfg.batch_size,
        ..OptimConfig::default()
    };
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derive_rng(cfg.seed, &[purpose::PROBE, 2, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let xb = x.select(Axis(0), batch);
            let tb = targets.select(Axis(0), batch);
            let (h, logits) = net.forward(xb.view());
            let (_, dlogits) = loss_grad(&logits, tb.view(), cfg.loss);
            let mut grad = net.zeros_like();
            let mut dh = net.fc2.backward(h.view(), dlogits.view(), &mut grad.fc2);
            dh.zip_mut_with(&h, |g, &a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            });
            net.fc1.backward(xb.view(), dh.view(), &mut grad.fc1);
            adamw_step(&mut net, &grad, &mut state, lr, &optim)?;
        }
    }
    Ok(net)
}

pub fn default_metric(labels: &Labels) -> Metric {
    match labels {
        Labels::Single { .. } => Metric::Accuracy,
        Labels::Multi(_) => Metric::MeanAp,
    }
}

/// Trains one probe per learning rate on a training split and keeps the one
/// with the best validation metric (earliest on ties).
pub fn train_probe(features: ArrayView2<f64>, labels: &Labels, cfg: &ProbeConfig) -> Result<Probe> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::Labels(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    labels.check()?;
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("features contain non-finite values".into()));
    }
    let (train, val) = split(labels, cfg.val_fraction, cfg.seed);
    if val.is_empty() || train.is_empty() {
        return Err(Error::Labels("too few examples for a validation split".into()));
    }
    let xt = features.select(Axis(0), &train);
    let (mean, std) = standardize(xt.view());
    let norm = |x: Array2<f64>| (x - &mean) / &std;
    let xt = norm(xt);
    let xv = norm(features.select(Axis(0), &val));
    let targets = labels.targets();
    let tt = targets.select(Axis(0), &train);
    let lv = labels.subset(&val);
    let metric = default_metric(labels);

    let mut best: Option<Probe> = None;
    for &lr in &cfg.lr_grid {
        let net = fit_one(xt.view(), tt.view(), lr, cfg)?;
        let scores = net.forward(xv.view()).1;
        let m = metric_value(scores.view(), &lv, metric)?;
        if best.as_ref().map_or(true, |b| m > b.val_metric) {
            best = Some(Probe {
                net,
                mean: mean.clone(),
                std: std.clone(),
                loss: cfg.loss,
                lr,
                val_metric: m,
            });
        }
    }
    Ok(best.expect("lr grid is non-empty"))
}

pub fn accuracy(scores: ArrayView2<f64>, y: &[usize]) -> f64 {
    let correct = scores
        .rows()
        .into_iter()
        .zip(y)
        .filter(|(row, &c)| {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            arg == c
        })
        .count();
    correct as f64 / y.len().max(1) as f64
}

/// Mean of precision at each positive's rank (scores sorted descending).
pub fn average_precision(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

pub fn mean_average_precision(scores: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
    let aps: Vec<f64> = (0..scores.ncols())
        .filter_map(|j| {
            let s: Vec<f64> = scores.column(j).to_vec();
            let r: Vec<bool> = targets.column(j).iter().map(|&t| t > 0.5).collect();
            average_precision(&s, &r)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

fn metric_value(scores: ArrayView2<f64>, labels: &Labels, metric: Metric) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::Labels(format!(
            "{} scores for {} labels",
            scores.nrows(),
            labels.len()
        )));
    }
    Ok(match metric {
        Metric::Accuracy => match labels {
            Labels::Single { y, .. } => accuracy(scores, y),
            Labels::Multi(_) => return Err(Error::Labels("accuracy needs single-label targets".into())),
        },
        Metric::MeanAp => mean_average_precision(scores, labels.targets().view()),
    })
}

pub fn eval_probe(probe: &Probe, features: ArrayView2<f64>, labels: &Labels, metric: Metric) -> Result<f64> {
    metric_value(probe.scores(features).view(), labels, metric)
}

/// Deterministic held-out split for probe evaluation, stratified by class.
pub fn holdout_split(labels: &Labels, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    split(labels, test_fraction, seed ^ 0x7e57)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, gap: f64, seed: u64) -> (Array2<f64>, Labels) {
        let mut rng = derive_rng(seed, &[]);
        let mut x = Array2::zeros((n, 6));
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            for j in 0..6 {
                x[[i, j]] = rng.gen_range(-1.0..1.0) + if j == 0 { gap * c as f64 } else { 0.0 };
            }
            y.push(c);
        }
        (x, Labels::single(y))
    }

    fn quick() -> ProbeConfig {
        ProbeConfig {
            hidden: 32,
            epochs: 30,
            ..ProbeConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(100, 4.0, 1);
        let p = train_probe(x.view(), &y, &quick()).unwrap();
        assert!(p.val_metric >= 0.95, "{}", p.val_metric);
        assert_eq!(p.param_count(), probe_param_count(6, 32, 2));
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let (x, y) = blobs(400, 0.0, 2);
        let mut accs = Vec::new();
        for seed in 0..3 {
            let p = train_probe(x.view(), &y, &ProbeConfig { seed, ..quick() }).unwrap();
            accs.push(p.val_metric);
        }
        let mean = accs.iter().sum::<f64>() / 3.0;
        assert!((mean - 0.5).abs() <= 0.1, "{accs:?}");
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Array2::zeros((4, 2));
        let err = train_probe(x.view(), &Labels::single(vec![0; 4]), &quick()).unwrap_err();
        assert!(matches!(err, Error::Labels(_)));
    }

    #[test]
    fn deterministic_per_seed() {
        let (x, y) = blobs(40, 1.0, 3);
        let a = train_probe(x.view(), &y, &quick()).unwrap();
        let b = train_probe(x.view(), &y, &quick()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.2], &[true, false, false]), Some(1.0));
        // ranking: pos, neg, pos → (1/1 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1], &[false]), None);
        let s = ndarray::array![[0.9, 0.1], [0.2, 0.8]];
        assert_eq!(accuracy(s.view(), &[0, 1]), 1.0);
        assert_eq!(
            mean_average_precision(s.view(), ndarray::array![[1.0, 0.0], [0.0, 1.0]].view()),
            1.0
        );
    }

    #[test]
    fn bce_probe_trains() {
        let (x, y) = blobs(80, 4.0, 4);
        let Labels::Single { y, .. } = y else { unreachable!() };
        let mut m = Array2::zeros((80, 2));
        for (i, &c) in y.iter().enumerate() {
            m[[i, c]] = 1.0;
        }
        let labels = Labels::Multi(m);
        let p = train_probe(
            x.view(),
            &labels,
            &ProbeConfig {
                loss: LossMode::Bce,
                ..quick()
            },
        )
        .unwrap();
        assert!(p.val_metric > 0.9);
    }

    #[test]
    fn loss_gradients_match_differences() {
        let z = ndarray::array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let t = ndarray::array![[0.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        for mode in [LossMode::SoftmaxCe, LossMode::Bce] {
            let tt = if mode == LossMode::SoftmaxCe {
                ndarray::array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]
            } else {
                t.clone()
            };
            let (_, g) = loss_grad(&z, tt.view(), mode);
            for i in 0..z.len() {
                let mut a = z.clone();
                let mut b = z.clone();
                a.as_slice_mut().unwrap()[i] += 1e-6;
                b.as_slice_mut().unwrap()[i] -= 1e-6;
                let fd = (loss_grad(&a, tt.view(), mode).0 - loss_grad(&b, tt.view(), mode).0) / 2e-6;
                assert!((fd - g.as_slice().unwrap()[i]).abs() < 1e-8);
            }
        }
    }
}

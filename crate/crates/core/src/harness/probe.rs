//! Linear probe: one-vs-rest hinge-loss classifier trained by stochastic
//! subgradient descent on z-scored features.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    /// L2 regularization strength.
    pub lambda: f64,
    pub lr: f64,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lambda: 1e-4,
            lr: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Percentages in `[0, 100]`.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]` over the categories in `classes` order.
    pub confusion: Vec<Vec<usize>>,
    pub classes: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeReport {
    pub fn support(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn tsv_row(&self, name: &str) -> String {
        format!(
            "{name}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            self.accuracy, self.precision, self.recall, self.f1
        )
    }

    pub fn confusion_text(&self) -> String {
        let mut s = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "{}", cells.join("\t"));
        }
        s
    }
}

pub fn probe_classify(
    latents: &[Vec<f32>],
    labels: &[usize],
    split_seed: u64,
) -> Result<ProbeReport> {
    probe_classify_with(latents, labels, split_seed, &ProbeConfig::default())
}

/// Stratified split, then [`probe_fit_eval`].
pub fn probe_classify_with(
    latents: &[Vec<f32>],
    labels: &[usize],
    split_seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let classes = check_labels(latents, labels)?;
    let mut rng = seeded_rng(split_seed, 30);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for &c in &classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_test =
            ((idx.len() as f64 * cfg.test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |ix: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
        (
            ix.iter().map(|&i| latents[i].clone()).collect(),
            ix.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (xtr, ytr) = pick(&train);
    let (xte, yte) = pick(&test);
    probe_fit_eval(&xtr, &ytr, &xte, &yte, split_seed, cfg)
}

fn check_labels(latents: &[Vec<f32>], labels: &[usize]) -> Result<Vec<usize>> {
    if latents.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} latents but {} labels",
            latents.len(),
            labels.len()
        )));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Input("probe needs at least 2 categories".into()));
    }
    for &c in &classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < 2 {
            return Err(Error::Input(format!(
                "category {c} has {n} sample(s); at least 2 required"
            )));
        }
    }
    if let Some(d) = latents.first().map(Vec::len) {
        if d == 0 || latents.iter().any(|x| x.len() != d) {
            return Err(Error::Input("latents must share a non-zero width".into()));
        }
    }
    Ok(classes)
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f32>]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64 / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        let inv_std = var
            .iter()
            .map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((&v, m), s)| (v as f64 - m) * s)
            .collect()
    }
}

/// Train on `(train_x, train_y)`, report on `(test_x, test_y)`.
pub fn probe_fit_eval(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    test_x: &[Vec<f32>],
    test_y: &[usize],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let classes = check_labels(train_x, train_y)?;
    if test_x.is_empty() || test_x.len() != test_y.len() {
        return Err(Error::Input(
            "probe needs a non-empty, labelled test set".into(),
        ));
    }
    let class_of = |l: usize| classes.binary_search(&l).ok();
    let scaler = Standardizer::fit(train_x);
    let xs: Vec<Vec<f64>> = train_x.iter().map(|r| scaler.apply(r)).collect();
    let d = xs[0].len();
    let k = classes.len();
    let mut w = vec![vec![0.0f64; d]; k];
    let mut b = vec![0.0f64; k];
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = seeded_rng(seed, 31);
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = cfg.lr / (1.0 + cfg.lr * cfg.lambda * t as f64);
            t += 1;
            let target = class_of(train_y[i]).expect("train label is a class");
            for c in 0..k {
                let y = if c == target { 1.0 } else { -1.0 };
                let score: f64 = w[c].iter().zip(&xs[i]).map(|(a, x)| a * x).sum::<f64>() + b[c];
                let shrink = 1.0 - eta * cfg.lambda;
                for v in w[c].iter_mut() {
                    *v *= shrink;
                }
                if y * score < 1.0 {
                    for (v, x) in w[c].iter_mut().zip(&xs[i]) {
                        *v += eta * y * x;
                    }
                    b[c] += eta * y;
                }
            }
        }
    }

    let mut confusion = vec![vec![0usize; k]; k];
    for (row, &label) in test_x.iter().zip(test_y) {
        let Some(truth) = class_of(label) else {
            return Err(Error::Input(format!(
                "test label {label} never seen in training"
            )));
        };
        let x = scaler.apply(row);
        let pred = (0..k)
            .map(|c| w[c].iter().zip(&x).map(|(a, v)| a * v).sum::<f64>() + b[c])
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, s)| {
                if s > best.1 {
                    (c, s)
                } else {
                    best
                }
            })
            .0;
        confusion[truth][pred] += 1;
    }
    Ok(report(confusion, classes, train_x.len(), test_x.len()))
}

fn report(
    confusion: Vec<Vec<usize>>,
    classes: Vec<usize>,
    n_train: usize,
    n_test: usize,
) -> ProbeReport {
    let k = classes.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        let pc = if predicted > 0 {
            tp / predicted as f64
        } else {
            0.0
        };
        let rc = if actual > 0 { tp / actual as f64 } else { 0.0 };
        p += pc;
        r += rc;
        f += if pc + rc > 0.0 {
            2.0 * pc * rc / (pc + rc)
        } else {
            0.0
        };
    }
    let kf = k as f64;
    ProbeReport {
        accuracy: 100.0 * correct as f64 / n_test as f64,
        precision: 100.0 * p / kf,
        recall: 100.0 * r / kf,
        f1: 100.0 * f / kf,
        confusion,
        classes,
        n_train,
        n_test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n_per: usize, k: usize, spread: f32, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = seeded_rng(seed, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for c in 0..k {
            for _ in 0..n_per {
                let mut row: Vec<f32> = (0..6).map(|_| rng.random_range(-spread..spread)).collect();
                row[c % 6] += 5.0;
                x.push(row);
                y.push(c);
            }
        }
        (x, y)
    }

    #[test]
    fn separable_latents_are_classified_perfectly() {
        let (x, y) = blobs(20, 4, 1.0, 1);
        let r = probe_classify(&x, &y, 3).unwrap();
        assert_eq!(r.accuracy, 100.0);
        assert_eq!(r.f1, 100.0);
        assert_eq!(r.support(), vec![4; 4]);
        assert_eq!(r.n_test + r.n_train, 80);
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let (x, mut y) = blobs(60, 5, 1.0, 2);
        y.shuffle(&mut seeded_rng(9, 9));
        let r = probe_classify(&x, &y, 4).unwrap();
        assert!((r.accuracy - 20.0).abs() <= 10.0, "{}", r.accuracy);
    }

    #[test]
    fn singleton_category_is_rejected() {
        let x = vec![vec![0.0f32]; 5];
        assert!(matches!(
            probe_classify(&x, &[0, 0, 0, 0, 1], 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            probe_classify(&x, &[0; 5], 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn metrics_stay_in_range() {
        let (x, y) = blobs(15, 3, 6.0, 5);
        let r = probe_classify(&x, &y, 1).unwrap();
        for v in [r.accuracy, r.precision, r.recall, r.f1] {
            assert!((0.0..=100.0).contains(&v));
        }
        assert_eq!(r.support().iter().sum::<usize>(), r.n_test);
    }
}

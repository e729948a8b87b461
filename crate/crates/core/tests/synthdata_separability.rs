//! The synthetic tasks are individually easy and mutually distinguishable.

use routeprint::numerics::{argmax, softmax, Matrix};
use routeprint::synthdata::{make_task, DataConfig, Dataset};

/// Multinomial logistic regression trained by full-batch gradient descent.
struct Linear {
    w: Matrix,
    b: Vec<f64>,
}

impl Linear {
    fn fit(x: &[&[f64]], y: &[usize], classes: usize, epochs: usize, lr: f64) -> Self {
        let d = x[0].len();
        let mut w = Matrix::zeros(classes, d);
        let mut b = vec![0.0; classes];
        let n = x.len() as f64;
        for _ in 0..epochs {
            let mut gw = Matrix::zeros(classes, d);
            let mut gb = vec![0.0; classes];
            for (xi, &yi) in x.iter().zip(y) {
                let p = softmax(&Self::logits(&w, &b, xi), 1.0).unwrap().into_vec();
                for c in 0..classes {
                    let e = p[c] - if c == yi { 1.0 } else { 0.0 };
                    gb[c] += e / n;
                    for (k, v) in xi.iter().enumerate() {
                        gw.set(c, k, gw.get(c, k) + e * v / n);
                    }
                }
            }
            for c in 0..classes {
                b[c] -= lr * gb[c];
                for k in 0..d {
                    w.set(c, k, w.get(c, k) - lr * gw.get(c, k));
                }
            }
        }
        Self { w, b }
    }

    fn logits(w: &Matrix, b: &[f64], x: &[f64]) -> Vec<f64> {
        (0..w.rows())
            .map(|c| b[c] + w.row(c).iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    fn accuracy(&self, x: &[&[f64]], y: &[usize]) -> f64 {
        let hits = x
            .iter()
            .zip(y)
            .filter(|(xi, &yi)| argmax(&Self::logits(&self.w, &self.b, xi)) == yi)
            .count();
        hits as f64 / x.len() as f64
    }
}

fn rows(d: &Dataset) -> Vec<&[f64]> {
    (0..d.len()).map(|k| d.input(k)).collect()
}

fn tasks(seed: u64, n: usize) -> Vec<(Dataset, Dataset)> {
    let cfg = DataConfig::default();
    (0..n)
        .map(|t| {
            let (_, train, probe) = make_task(t, seed, &cfg).unwrap();
            (train, probe)
        })
        .collect()
}

#[test]
fn each_task_is_linearly_separable() {
    for (train, probe) in tasks(7, 8) {
        let model = Linear::fit(&rows(&train), &train.labels, 4, 300, 0.5);
        let acc = model.accuracy(&rows(&probe), &probe.labels);
        assert!(acc >= 0.95, "task {} linear probe accuracy {acc}", train.task_id);
    }
}

#[test]
fn task_identity_is_recoverable_from_raw_inputs() {
    let all = tasks(7, 8);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut px = Vec::new();
    let mut py = Vec::new();
    for (train, probe) in &all {
        xs.extend(rows(train));
        ys.extend(std::iter::repeat(train.task_id).take(train.len()));
        px.extend(rows(probe));
        py.extend(std::iter::repeat(probe.task_id).take(probe.len()));
    }
    let model = Linear::fit(&xs, &ys, all.len(), 300, 0.5);
    let acc = model.accuracy(&px, &py);
    assert!(acc >= 0.90, "task classifier accuracy {acc}");
}

#[test]
fn probe_splits_are_class_balanced() {
    for (train, probe) in tasks(3, 8) {
        for d in [&train, &probe] {
            let mut counts = [0usize; 4];
            for &l in &d.labels {
                counts[l] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "counts {counts:?}");
        }
        assert!(probe.labels.iter().filter(|&&l| l == 0).count() == 64);
    }
}

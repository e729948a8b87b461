//! Deterministic synthetic classification tasks.
//!
//! Every task draws Gaussian clusters around its class means. The class means
//! are shared prototypes (a common center plus per-class offsets) pushed
//! through a task-specific random rotation, so tasks are mutually
//! distinguishable while each remains an easy linear classification problem.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bundle::Digest64;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, norm, random_orthogonal, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_classes: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub train_size: usize,
    pub probe_size: usize,
    /// Norm of the shared cluster center before rotation.
    pub center_norm: f64,
    /// Norm of each class offset from the center.
    pub class_spread: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            input_dim: 16,
            noise_sigma: 0.3,
            train_size: 512,
            probe_size: 256,
            center_norm: 3.0,
            class_spread: 1.5,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
        }
        if self.input_dim < self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "input_dim {} smaller than n_classes {}",
                self.input_dim, self.n_classes
            )));
        }
        if self.train_size < self.n_classes || self.probe_size < self.n_classes {
            return Err(Error::InvalidConfig(
                "split sizes must be at least n_classes".into(),
            ));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub n_classes: usize,
    pub input_dim: usize,
    pub seed: u64,
    pub class_means: Matrix,
    pub rotation: Matrix,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Probe,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Probe => "probe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task_id: usize,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, k: usize) -> &[f64] {
        self.inputs.row(k)
    }

    /// First `n` samples.
    pub fn prefix(&self, n: usize) -> Dataset {
        let d = self.inputs.cols();
        Dataset {
            task_id: self.task_id,
            inputs: Matrix::from_vec(n, d, self.inputs.as_slice()[..n * d].to_vec())
                .expect("prefix of a valid matrix"),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    fn digest(&self, h: &mut Digest64) {
        h.u64(self.task_id as u64).f64s(self.inputs.as_slice());
        for &l in &self.labels {
            h.u64(l as u64);
        }
    }
}

/// Class prototypes shared by every task of one global seed.
fn prototypes(global_seed: u64, cfg: &DataConfig) -> Matrix {
    let mut rng = Rng::new(derive_seed(global_seed, 0x5052_4f54));
    let d = cfg.input_dim;
    let unit = |rng: &mut Rng, scale: f64| {
        let v = rng.normals(d, 1.0);
        let n = norm(&v);
        v.into_iter().map(|x| scale * x / n).collect::<Vec<f64>>()
    };
    let center = unit(&mut rng, cfg.center_norm);
    loop {
        let offsets: Vec<Vec<f64>> = (0..cfg.n_classes)
            .map(|_| unit(&mut rng, cfg.class_spread))
            .collect();
        let means = Matrix::from_fn(cfg.n_classes, d, |c, k| center[k] + offsets[c][k]);
        if min_pairwise_distance(&means) >= 2.0 * cfg.noise_sigma {
            return means;
        }
    }
}

fn min_pairwise_distance(m: &Matrix) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..m.rows() {
        for b in a + 1..m.rows() {
            let d: f64 = m
                .row(a)
                .iter()
                .zip(m.row(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

fn sample_split(spec: &TaskSpec, n: usize, split: Split) -> Dataset {
    let label = match split {
        Split::Train => 1,
        Split::Probe => 2,
    };
    let mut rng = Rng::new(derive_seed(spec.seed, label));
    let d = spec.input_dim;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let c = k % spec.n_classes;
        let mean = spec.class_means.row(c);
        data.extend(mean.iter().map(|m| m + spec.noise_sigma * rng.normal()));
        labels.push(c);
    }
    Dataset {
        task_id: spec.task_id,
        inputs: Matrix::from_vec(n, d, data).expect("finite samples"),
        labels,
        split,
    }
}

/// Generates the task definition with its training and probe splits.
pub fn make_task(
    task_id: usize,
    global_seed: u64,
    cfg: &DataConfig,
) -> Result<(TaskSpec, Dataset, Dataset)> {
    cfg.validate()?;
    let seed = derive_seed(global_seed, 0x7441_534b_0000 + task_id as u64);
    let mut rng = Rng::new(seed);
    let rotation = random_orthogonal(&mut rng, cfg.input_dim);
    let protos = prototypes(global_seed, cfg);
    let class_means = protos.matmul(&rotation.transpose())?;
    let spec = TaskSpec {
        task_id,
        n_classes: cfg.n_classes,
        input_dim: cfg.input_dim,
        seed,
        class_means,
        rotation,
        noise_sigma: cfg.noise_sigma,
    };
    let train = sample_split(&spec, cfg.train_size, Split::Train);
    let probe = sample_split(&spec, cfg.probe_size, Split::Probe);
    Ok((spec, train, probe))
}

/// Fixed per-task probe sets shared by victim and suspect fingerprinting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSuite {
    pub sets: Vec<Dataset>,
    pub samples_per_task: usize,
    pub checksum: u64,
}

impl ProbeSuite {
    pub fn task_ids(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.task_id).collect()
    }

    pub fn n_tasks(&self) -> usize {
        self.sets.len()
    }

    pub fn total_samples(&self) -> usize {
        self.sets.iter().map(Dataset::len).sum()
    }

    /// All probe inputs in suite order.
    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.sets.iter().flat_map(|s| (0..s.len()).map(move |k| s.input(k)))
    }
}

/// Takes the first `samples_per_task` probe items of each task, in order.
pub fn probe_suite(probes: &[Dataset], samples_per_task: usize) -> Result<ProbeSuite> {
    if samples_per_task == 0 {
        return Err(Error::InvalidRequest("samples_per_task must be positive".into()));
    }
    let mut sets = Vec::with_capacity(probes.len());
    let mut h = Digest64::new();
    for p in probes {
        if p.split != Split::Probe {
            return Err(Error::InvalidRequest(format!(
                "task {} dataset is not a probe split",
                p.task_id
            )));
        }
        if samples_per_task > p.len() {
            return Err(Error::InvalidRequest(format!(
                "requested {samples_per_task} probe samples but task {} has {}",
                p.task_id,
                p.len()
            )));
        }
        let s = p.prefix(samples_per_task);
        s.digest(&mut h);
        sets.push(s);
    }
    Ok(ProbeSuite {
        sets,
        samples_per_task,
        checksum: h.finish(),
    })
}

/// Writes `task_id,split,label,x0..x{d-1}` rows.
pub fn write_csv<W: Write>(datasets: &[&Dataset], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = datasets.first().map(|s| s.inputs.cols()).unwrap_or(0);
    let mut header = vec!["task_id".to_string(), "split".into(), "label".into()];
    header.extend((0..d).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for ds in datasets {
        for k in 0..ds.len() {
            let mut rec = vec![
                ds.task_id.to_string(),
                ds.split.as_str().to_string(),
                ds.labels[k].to_string(),
            ];
            rec.extend(ds.input(k).iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = DataConfig::default();
        let a = make_task(0, 7, &cfg).unwrap();
        let b = make_task(0, 7, &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |d: &Dataset| d.inputs.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.1), bits(&b.1));
    }

    #[test]
    fn tasks_differ_in_class_means() {
        let cfg = DataConfig::default();
        let (t0, _, _) = make_task(0, 7, &cfg).unwrap();
        let (t1, _, _) = make_task(1, 7, &cfg).unwrap();
        assert!(t0.class_means.max_abs_diff(&t1.class_means) > 0.1);
        assert_ne!(t0.seed, t1.seed);
    }

    #[test]
    fn spec_invariants_hold() {
        let cfg = DataConfig::default();
        for t in 0..8 {
            let (spec, train, probe) = make_task(t, 3, &cfg).unwrap();
            let rtr = spec.rotation.transpose().matmul(&spec.rotation).unwrap();
            assert!(rtr.max_abs_diff(&Matrix::identity(cfg.input_dim)) < 1e-6);
            assert!(min_pairwise_distance(&spec.class_means) >= 2.0 * cfg.noise_sigma);
            assert_eq!(train.len(), 512);
            assert_eq!(probe.len(), 256);
            for c in 0..cfg.n_classes {
                assert_eq!(probe.labels.iter().filter(|&&l| l == c).count(), 64);
            }
            assert!(train.labels.iter().all(|&l| l < cfg.n_classes));
        }
    }

    #[test]
    fn degenerate_config_is_rejected() {
        let cfg = DataConfig {
            input_dim: 3,
            ..DataConfig::default()
        };
        assert!(matches!(make_task(0, 1, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn probe_suite_prefix_and_errors() {
        let cfg = DataConfig::default();
        let probes: Vec<Dataset> = (0..3).map(|t| make_task(t, 7, &cfg).unwrap().2).collect();
        let full = probe_suite(&probes, 256).unwrap();
        assert_eq!(full.sets, probes);
        let s16 = probe_suite(&probes, 16).unwrap();
        let s32 = probe_suite(&probes, 32).unwrap();
        for (a, b) in s16.sets.iter().zip(&s32.sets) {
            assert_eq!(a, &b.prefix(16));
        }
        assert_eq!(probe_suite(&probes, 16).unwrap(), s16);
        assert_ne!(s16.checksum, s32.checksum);
        assert!(matches!(
            probe_suite(&probes, 257),
            Err(Error::InvalidRequest(_))
        ));
    }

    #[test]
    fn csv_dump_has_expected_header() {
        let cfg = DataConfig {
            train_size: 4,
            probe_size: 4,
            ..DataConfig::default()
        };
        let (_, train, _) = make_task(0, 1, &cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&[&train], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("task_id,split,label,x0,x1"));
        assert!(header.ends_with("x15"));
        assert_eq!(text.lines().count(), 5);
    }
}

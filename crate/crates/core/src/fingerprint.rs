//! Routing fingerprints and expert attribution.
//!
//! Routing weights of the merged model are averaged per probe task into
//! `F[i, j, l]` (task `i`, expert `j`, layer `l`). After subtracting the mean
//! over experts, the slice of expert `j` is its score fingerprint (RSF, tasks x
//! layers). Softmax over tasks of the layer-summed RSF gives the preference
//! fingerprint (RPF); a per-layer softmax gives the layered RPF used for the
//! divergence-based similarity.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{checksum_hex, Digest64};
use crate::error::{invalid_input, Result};
use crate::merging::MergedMoE;
use crate::numerics::{cosine_sim, jsd2_raw, pairwise_mean, softmax_unchecked, Matrix, ProbVector};
use crate::synthdata::ProbeSuite;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTensor {
    /// Row-major `[task][expert][layer]`.
    pub values: Vec<f64>,
    pub probe_ids: Vec<usize>,
    pub expert_ids: Vec<usize>,
    pub n_layers: usize,
    pub samples_used: usize,
    pub probe_checksum: u64,
    pub centered: bool,
}

impl RoutingTensor {
    pub fn n_tasks(&self) -> usize {
        self.probe_ids.len()
    }

    pub fn n_experts(&self) -> usize {
        self.expert_ids.len()
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, l: usize) -> usize {
        (i * self.n_experts() + j) * self.n_layers + l
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.values[self.idx(i, j, l)]
    }

    /// `N x E` matrix of layer `l`.
    pub fn layer(&self, l: usize) -> Matrix {
        Matrix::from_fn(self.n_tasks(), self.n_experts(), |i, j| self.get(i, j, l))
    }
}

/// Per-(task, layer) mean of the routing weights over the probe suite.
/// Samples are evaluated in parallel; means use pairwise summation in sample
/// order, so the result does not depend on the thread count.
pub fn capture_routing(moe: &MergedMoE, suite: &ProbeSuite) -> Result<RoutingTensor> {
    if suite.sets.is_empty() {
        return Err(invalid_input("probe suite has no tasks"));
    }
    let e = moe.n_experts();
    let depth = moe.n_layers();
    let mut values = vec![0.0; suite.n_tasks() * e * depth];
    for (i, set) in suite.sets.iter().enumerate() {
        if set.is_empty() {
            return Err(invalid_input(format!("probe task {} is empty", set.task_id)));
        }
        let traces: Vec<Vec<Vec<f64>>> = (0..set.len())
            .into_par_iter()
            .map(|k| moe.route(set.input(k)))
            .collect::<Result<Vec<_>>>()?;
        let mut column = vec![0.0; set.len()];
        for j in 0..e {
            for l in 0..depth {
                for (c, t) in column.iter_mut().zip(&traces) {
                    *c = t[l][j];
                }
                values[(i * e + j) * depth + l] = pairwise_mean(&column);
            }
        }
    }
    Ok(RoutingTensor {
        values,
        probe_ids: suite.task_ids(),
        expert_ids: moe.expert_ids.clone(),
        n_layers: depth,
        samples_used: suite.samples_per_task,
        probe_checksum: suite.checksum,
        centered: false,
    })
}

/// Subtracts, for every (task, layer), the mean over experts.
pub fn center_routing(f: &RoutingTensor) -> RoutingTensor {
    let mut out = f.clone();
    let e = f.n_experts();
    for i in 0..f.n_tasks() {
        for l in 0..f.n_layers {
            let mean = (0..e).map(|j| f.get(i, j, l)).sum::<f64>() / e as f64;
            for j in 0..e {
                let k = f.idx(i, j, l);
                out.values[k] = f.values[k] - mean;
            }
        }
    }
    out.centered = true;
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertFingerprint {
    pub expert_slot: usize,
    pub expert_id: usize,
    /// `N x L`
    pub rsf: Matrix,
    pub rpf_vec: ProbVector,
    /// `N x L`, every column a distribution over tasks.
    pub rpf_layered: Matrix,
}

/// One fingerprint per expert. Rejects tensors that were not centered.
pub fn build_fingerprints(centered: &RoutingTensor) -> Result<Vec<ExpertFingerprint>> {
    if !centered.centered {
        return Err(invalid_input(
            "fingerprints must be built from an expert-centered routing tensor",
        ));
    }
    let n = centered.n_tasks();
    let depth = centered.n_layers;
    (0..centered.n_experts())
        .map(|j| {
            let rsf = Matrix::from_fn(n, depth, |i, l| centered.get(i, j, l));
            let sums: Vec<f64> = (0..n).map(|i| rsf.row(i).iter().sum()).collect();
            let rpf_vec = ProbVector::new(softmax_unchecked(&sums, 1.0))?;
            let mut rpf_layered = Matrix::zeros(n, depth);
            for l in 0..depth {
                let col: Vec<f64> = (0..n).map(|i| rsf.get(i, l)).collect();
                for (i, p) in softmax_unchecked(&col, 1.0).into_iter().enumerate() {
                    rpf_layered.set(i, l, p);
                }
            }
            Ok(ExpertFingerprint {
                expert_slot: j,
                expert_id: centered.expert_ids[j],
                rsf,
                rpf_vec,
                rpf_layered,
            })
        })
        .collect()
}

/// Capture, center and split in one go.
pub fn fingerprint_moe(moe: &MergedMoE, suite: &ProbeSuite) -> Result<(RoutingTensor, Vec<ExpertFingerprint>)> {
    let raw = capture_routing(moe, suite)?;
    let fps = build_fingerprints(&center_routing(&raw))?;
    Ok((raw, fps))
}

/// Score similarity `(1 + cos(vec RSF_j, vec RSF_k)) / 2`. A zero RSF on
/// either side scores `0.5` with the degenerate flag.
pub fn sim_rsf(a: &ExpertFingerprint, b: &ExpertFingerprint) -> Result<(f64, bool)> {
    if a.rsf.shape() != b.rsf.shape() {
        return Err(invalid_input("RSF shapes differ"));
    }
    let c = cosine_sim(a.rsf.as_slice(), b.rsf.as_slice())?;
    Ok((0.5 * (1.0 + c.value), c.degenerate))
}

/// Preference similarity `1 - mean_l JSD(RPF_j[:, l], RPF_k[:, l])`.
pub fn sim_rpf(a: &ExpertFingerprint, b: &ExpertFingerprint) -> Result<f64> {
    if a.rpf_layered.shape() != b.rpf_layered.shape() {
        return Err(invalid_input("layered RPF shapes differ"));
    }
    let (n, depth) = a.rpf_layered.shape();
    let mut total = 0.0;
    for l in 0..depth {
        let p: Vec<f64> = (0..n).map(|i| a.rpf_layered.get(i, l)).collect();
        let q: Vec<f64> = (0..n).map(|i| b.rpf_layered.get(i, l)).collect();
        total += jsd2_raw(&p, &q);
    }
    Ok(1.0 - total / depth as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// `E_v x E_s`, mean of the two component matrices.
    pub values: Matrix,
    pub sim_rsf: Matrix,
    pub sim_rpf: Matrix,
    pub victim_ids: Vec<usize>,
    pub suspect_ids: Vec<usize>,
    /// `(victim, suspect)` pairs whose RSF similarity was degenerate.
    pub degenerate: Vec<(usize, usize)>,
}

impl SimilarityMatrix {
    pub fn get(&self, victim: usize, suspect: usize) -> f64 {
        self.values.get(victim, suspect)
    }

    /// Similarities of suspect `k` against every victim expert.
    pub fn profile(&self, suspect: usize) -> Vec<f64> {
        (0..self.values.rows()).map(|j| self.values.get(j, suspect)).collect()
    }

    /// Writes the matrix with victim rows and suspect columns at 6 decimals.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["victim\\suspect".to_string()];
        header.extend(
            self.suspect_ids
                .iter()
                .enumerate()
                .map(|(k, t)| format!("s{k}:task{t}")),
        );
        w.write_record(&header)?;
        for (j, t) in self.victim_ids.iter().enumerate() {
            let mut rec = vec![format!("v{j}:task{t}")];
            rec.extend(self.values.row(j).iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn similarity_matrix(
    victim: &[ExpertFingerprint],
    suspect: &[ExpertFingerprint],
) -> Result<SimilarityMatrix> {
    if victim.is_empty() || suspect.is_empty() {
        return Err(invalid_input("similarity needs fingerprints on both sides"));
    }
    let shape = victim[0].rsf.shape();
    if victim.iter().chain(suspect).any(|f| f.rsf.shape() != shape) {
        return Err(invalid_input(
            "victim and suspect fingerprints must share probe tasks and layer count",
        ));
    }
    let (ev, es) = (victim.len(), suspect.len());
    let mut rsf = Matrix::zeros(ev, es);
    let mut rpf = Matrix::zeros(ev, es);
    let mut values = Matrix::zeros(ev, es);
    let mut degenerate = Vec::new();
    for (j, a) in victim.iter().enumerate() {
        for (k, b) in suspect.iter().enumerate() {
            let (s1, deg) = sim_rsf(a, b)?;
            let s2 = sim_rpf(a, b)?;
            if deg {
                degenerate.push((j, k));
            }
            rsf.set(j, k, s1);
            rpf.set(j, k, s2);
            values.set(j, k, 0.5 * (s1 + s2));
        }
    }
    Ok(SimilarityMatrix {
        values,
        sim_rsf: rsf,
        sim_rpf: rpf,
        victim_ids: victim.iter().map(|f| f.expert_id).collect(),
        suspect_ids: suspect.iter().map(|f| f.expert_id).collect(),
        degenerate,
    })
}

/// Ground-truth provenance of one suspect expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Victim(usize),
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Matched(usize),
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub tau_margin: f64,
    /// Used only when the victim has a single expert and no margin exists.
    pub tau_top1: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            tau_margin: 0.3,
            tau_top1: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspectAttribution {
    pub suspect_slot: usize,
    pub suspect_id: usize,
    pub profile: Vec<f64>,
    pub top1_index: usize,
    pub top1_value: f64,
    /// Top-1 minus top-2; absent when the victim has one expert.
    pub margin: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEval {
    /// Fraction of suspect experts whose verdict equals the ground truth.
    pub accuracy: f64,
    /// Fraction of reused suspect experts whose top-1 is the true counterpart.
    pub argmax_accuracy: Option<f64>,
    /// Verdicts that name a victim expert other than the true origin.
    pub false_matches: usize,
    pub n_reused: usize,
    pub n_new: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub entries: Vec<SuspectAttribution>,
    pub config: AttributionConfig,
    pub top1_fallback: bool,
    pub ground_truth: Option<GroundTruthEval>,
}

impl AttributionReport {
    pub fn matched_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.verdict, Verdict::Matched(_)))
            .count()
    }

    pub fn new_count(&self) -> usize {
        self.entries.len() - self.matched_count()
    }
}

/// Decision rule: a suspect expert is matched to its top-1 victim expert when
/// the top-1 leads the runner-up by at least `tau_margin`; otherwise it is new.
pub fn attribute(
    matrix: &SimilarityMatrix,
    cfg: &AttributionConfig,
    ground_truth: Option<&[Origin]>,
) -> Result<AttributionReport> {
    let (ev, es) = matrix.values.shape();
    if ev == 0 || es == 0 {
        return Err(invalid_input("empty similarity matrix"));
    }
    if let Some(gt) = ground_truth {
        if gt.len() != es {
            return Err(invalid_input("ground truth does not cover every suspect expert"));
        }
    }
    let fallback = ev < 2;
    let entries: Vec<SuspectAttribution> = (0..es)
        .map(|k| {
            let profile = matrix.profile(k);
            let mut order: Vec<usize> = (0..ev).collect();
            order.sort_by(|&a, &b| profile[b].total_cmp(&profile[a]).then(a.cmp(&b)));
            let top1_index = order[0];
            let top1_value = profile[top1_index];
            let margin = (!fallback).then(|| top1_value - profile[order[1]]);
            let matched = match margin {
                Some(m) => m >= cfg.tau_margin,
                None => top1_value >= cfg.tau_top1,
            };
            SuspectAttribution {
                suspect_slot: k,
                suspect_id: matrix.suspect_ids[k],
                profile,
                top1_index,
                top1_value,
                margin,
                verdict: if matched {
                    Verdict::Matched(top1_index)
                } else {
                    Verdict::New
                },
            }
        })
        .collect();
    let ground_truth = ground_truth.map(|gt| evaluate(&entries, gt));
    Ok(AttributionReport {
        entries,
        config: *cfg,
        top1_fallback: fallback,
        ground_truth,
    })
}

fn evaluate(entries: &[SuspectAttribution], gt: &[Origin]) -> GroundTruthEval {
    let mut correct = 0;
    let mut argmax_hits = 0;
    let mut false_matches = 0;
    let mut n_reused = 0;
    for (e, o) in entries.iter().zip(gt) {
        let verdict_ok = match (o, e.verdict) {
            (Origin::Victim(j), Verdict::Matched(m)) => *j == m,
            (Origin::New, Verdict::New) => true,
            _ => false,
        };
        if verdict_ok {
            correct += 1;
        }
        if let Verdict::Matched(m) = e.verdict {
            if *o != Origin::Victim(m) {
                false_matches += 1;
            }
        }
        if let Origin::Victim(j) = o {
            n_reused += 1;
            if e.top1_index == *j {
                argmax_hits += 1;
            }
        }
    }
    GroundTruthEval {
        accuracy: correct as f64 / entries.len() as f64,
        argmax_accuracy: (n_reused > 0).then(|| argmax_hits as f64 / n_reused as f64),
        false_matches,
        n_reused,
        n_new: entries.len() - n_reused,
    }
}

/// JSON export of one fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintExport {
    pub expert_slot: usize,
    pub expert_id: usize,
    pub n_tasks: usize,
    pub n_layers: usize,
    /// Row-major `N x L`.
    pub rsf: Vec<f64>,
    pub rpf_vec: Vec<f64>,
    /// Row-major `N x L`.
    pub rpf_layered: Vec<f64>,
    pub probe_ids: Vec<usize>,
    pub samples_used: usize,
    pub probe_checksum: String,
    pub checksum: String,
}

impl FingerprintExport {
    pub fn new(fp: &ExpertFingerprint, tensor: &RoutingTensor) -> Self {
        let mut h = Digest64::new();
        h.u64(fp.expert_slot as u64)
            .u64(fp.expert_id as u64)
            .f64s(fp.rsf.as_slice())
            .f64s(fp.rpf_vec.as_slice())
            .f64s(fp.rpf_layered.as_slice())
            .u64(tensor.probe_checksum);
        Self {
            expert_slot: fp.expert_slot,
            expert_id: fp.expert_id,
            n_tasks: fp.rsf.rows(),
            n_layers: fp.rsf.cols(),
            rsf: fp.rsf.as_slice().to_vec(),
            rpf_vec: fp.rpf_vec.as_slice().to_vec(),
            rpf_layered: fp.rpf_layered.as_slice().to_vec(),
            probe_ids: tensor.probe_ids.clone(),
            samples_used: tensor.samples_used,
            probe_checksum: checksum_hex(tensor.probe_checksum),
            checksum: checksum_hex(h.finish()),
        }
    }

    pub fn to_fingerprint(&self) -> Result<ExpertFingerprint> {
        Ok(ExpertFingerprint {
            expert_slot: self.expert_slot,
            expert_id: self.expert_id,
            rsf: Matrix::from_vec(self.n_tasks, self.n_layers, self.rsf.clone())?,
            rpf_vec: ProbVector::new(self.rpf_vec.clone())?,
            rpf_layered: Matrix::from_vec(self.n_tasks, self.n_layers, self.rpf_layered.clone())?,
        })
    }
}

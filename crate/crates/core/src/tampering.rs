//! Suspect construction from a victim MoE.
//!
//! Structural operations change the expert set (replace, add, delete) and
//! retrain the routers. Parametric operations keep the expert set and alter
//! expert parameters (fine-tune, magnitude or WANDA pruning, hidden-unit
//! permutation). Each operation returns the suspect together with a
//! [`TamperRecord`] mapping every suspect expert to its victim origin.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::fingerprint::Origin;
use crate::merging::{fresh_routers, init_router_rows, train_routers, MergedMoE, RouterConfig};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::synthdata::Dataset;
use crate::toymodel::{finetune, ExpertDelta, FinetuneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperOp {
    None,
    Replace,
    Add,
    Delete,
    Finetune,
    PruneMagnitude,
    PruneWanda,
    Permute,
}

impl TamperOp {
    pub fn as_str(&self) -> &'static str {
        match self {
            TamperOp::None => "none",
            TamperOp::Replace => "replace",
            TamperOp::Add => "add",
            TamperOp::Delete => "delete",
            TamperOp::Finetune => "finetune",
            TamperOp::PruneMagnitude => "prune_magnitude",
            TamperOp::PruneWanda => "prune_wanda",
            TamperOp::Permute => "permute",
        }
    }

    pub fn is_structural(&self) -> bool {
        matches!(self, TamperOp::Replace | TamperOp::Add | TamperOp::Delete)
    }
}

/// Settings an operation was run with; unused fields stay empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TamperParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub new_task_ids: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamperRecord {
    pub op: TamperOp,
    /// Victim slots touched by the operation (or new suspect slots for `add`).
    pub affected_experts: Vec<usize>,
    pub params: TamperParams,
    /// Indexed by suspect expert slot.
    pub ground_truth_map: Vec<Origin>,
}

impl TamperRecord {
    fn identity(op: TamperOp, e: usize) -> Self {
        Self {
            op,
            affected_experts: Vec::new(),
            params: TamperParams::default(),
            ground_truth_map: (0..e).map(Origin::Victim).collect(),
        }
    }

    /// Total over suspect slots and injective on matched entries, with every
    /// matched slot holding the victim expert's task label.
    pub fn check_consistency(&self, victim: &MergedMoE, suspect: &MergedMoE) -> Result<()> {
        if self.ground_truth_map.len() != suspect.n_experts() {
            return Err(invalid_input("ground truth does not cover every suspect expert"));
        }
        let mut seen = vec![false; victim.n_experts()];
        for (k, o) in self.ground_truth_map.iter().enumerate() {
            if let Origin::Victim(j) = *o {
                if j >= victim.n_experts() || seen[j] {
                    return Err(invalid_input(format!("ground truth entry {k} is not injective")));
                }
                seen[j] = true;
                if victim.expert_ids[j] != suspect.expert_ids[k] {
                    return Err(invalid_input(format!(
                        "suspect slot {k} is mapped to victim slot {j} but holds a different task"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Router retraining used by the structural and fine-tuning operations.
#[derive(Debug, Clone, Copy)]
pub struct RouterTraining<'a> {
    pub datasets: &'a [Dataset],
    pub cfg: &'a RouterConfig,
    pub seed: u64,
}

fn reinit_rows(moe: &mut MergedMoE, rows: &[usize], seed: u64) {
    let rng = Rng::new(derive_seed(seed, 0x5245_494e));
    let d = moe.arch.width;
    for r in moe.routers.iter_mut() {
        let fresh = init_router_rows(&mut rng.split(r.layer_index as u64), rows.len(), d);
        for (k, &row) in rows.iter().enumerate() {
            r.w.row_mut(row).copy_from_slice(fresh.row(k));
            r.b.as_mut_slice()[row] = 0.0;
        }
    }
}

/// The victim itself, with an identity record.
pub fn no_tamper(victim: &MergedMoE) -> (MergedMoE, TamperRecord) {
    (victim.clone(), TamperRecord::identity(TamperOp::None, victim.n_experts()))
}

/// Swaps the MLP deltas at `indices` for `new_deltas`. Surviving router rows
/// are kept as a warm start, replaced rows are re-initialized, and all routers
/// are retrained.
pub fn replace_experts(
    victim: &MergedMoE,
    indices: &[usize],
    new_deltas: &[ExpertDelta],
    rt: &RouterTraining,
) -> Result<(MergedMoE, TamperRecord)> {
    if indices.len() != new_deltas.len() {
        return Err(invalid_input("one new delta is needed per replaced index"));
    }
    let e = victim.n_experts();
    if let Some(&i) = indices.iter().find(|&&i| i >= e) {
        return Err(invalid_input(format!("replace index {i} out of range for {e} experts")));
    }
    let mut record = TamperRecord::identity(TamperOp::Replace, e);
    if indices.is_empty() {
        return Ok((victim.clone(), record));
    }
    let mut s = victim.clone();
    for (&i, d) in indices.iter().zip(new_deltas) {
        check_delta(victim, d)?;
        for (bank, blk) in s.expert_bank.iter_mut().zip(&d.blocks) {
            bank[i] = blk.mlp.clone();
        }
        s.expert_ids[i] = d.source_task;
        record.ground_truth_map[i] = Origin::New;
    }
    s.validate()?;
    reinit_rows(&mut s, indices, rt.seed);
    let s = train_routers(&s, rt.datasets, rt.cfg, rt.seed)?;
    record.affected_experts = indices.to_vec();
    record.params.new_task_ids = new_deltas.iter().map(|d| d.source_task).collect();
    record.params.seed = Some(rt.seed);
    record.params.steps = Some(rt.cfg.steps);
    Ok((s, record))
}

/// Appends `new_deltas` as extra experts; the routers grow by one row each,
/// warm-started on the existing rows.
pub fn add_experts(
    victim: &MergedMoE,
    new_deltas: &[ExpertDelta],
    rt: &RouterTraining,
) -> Result<(MergedMoE, TamperRecord)> {
    let e = victim.n_experts();
    let mut record = TamperRecord::identity(TamperOp::Add, e);
    if new_deltas.is_empty() {
        return Ok((victim.clone(), record));
    }
    let mut s = victim.clone();
    for d in new_deltas {
        check_delta(victim, d)?;
        for (bank, blk) in s.expert_bank.iter_mut().zip(&d.blocks) {
            bank.push(blk.mlp.clone());
        }
        s.expert_ids.push(d.source_task);
        record.ground_truth_map.push(Origin::New);
    }
    let grown = e + new_deltas.len();
    let d = s.arch.width;
    for r in s.routers.iter_mut() {
        let mut w = Matrix::zeros(grown, d);
        let mut b = Matrix::zeros(grown, 1);
        for j in 0..e {
            w.row_mut(j).copy_from_slice(r.w.row(j));
            b.as_mut_slice()[j] = r.b.as_slice()[j];
        }
        r.w = w;
        r.b = b;
    }
    let new_rows: Vec<usize> = (e..grown).collect();
    reinit_rows(&mut s, &new_rows, rt.seed);
    s.validate()?;
    let s = train_routers(&s, rt.datasets, rt.cfg, rt.seed)?;
    record.affected_experts = new_rows;
    record.params.new_task_ids = new_deltas.iter().map(|d| d.source_task).collect();
    record.params.seed = Some(rt.seed);
    record.params.steps = Some(rt.cfg.steps);
    Ok((s, record))
}

/// Restricts the expert bank to `keep_set` (in victim order) and trains
/// freshly initialized routers.
pub fn delete_experts(
    victim: &MergedMoE,
    keep_set: &[usize],
    rt: &RouterTraining,
) -> Result<(MergedMoE, TamperRecord)> {
    let e = victim.n_experts();
    let mut keep = keep_set.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if keep.is_empty() {
        return Err(invalid_input("delete must keep at least one expert"));
    }
    if let Some(&i) = keep.iter().find(|&&i| i >= e) {
        return Err(invalid_input(format!("keep index {i} out of range for {e} experts")));
    }
    let mut s = victim.clone();
    s.expert_bank = victim
        .expert_bank
        .iter()
        .map(|bank| keep.iter().map(|&j| bank[j].clone()).collect())
        .collect();
    s.expert_ids = keep.iter().map(|&j| victim.expert_ids[j]).collect();
    let temperature = victim.routers.first().map_or(1.0, |r| r.temperature);
    s.routers = fresh_routers(&s.arch, keep.len(), rt.seed, temperature);
    s.validate()?;
    let s = train_routers(&s, rt.datasets, rt.cfg, rt.seed)?;
    let record = TamperRecord {
        op: TamperOp::Delete,
        affected_experts: (0..e).filter(|j| !keep.contains(j)).collect(),
        params: TamperParams {
            seed: Some(rt.seed),
            steps: Some(rt.cfg.steps),
            ..Default::default()
        },
        ground_truth_map: keep.iter().map(|&j| Origin::Victim(j)).collect(),
    };
    Ok((s, record))
}

fn check_delta(victim: &MergedMoE, d: &ExpertDelta) -> Result<()> {
    if d.blocks.len() != victim.n_layers()
        || d
            .blocks
            .iter()
            .zip(&victim.base.blocks)
            .any(|(a, b)| !a.mlp.same_shape(&b.mlp))
    {
        return Err(invalid_input("new expert delta does not match the victim architecture"));
    }
    Ok(())
}

/// Further trains every expert's source model `base + Δ_j` on its own task,
/// re-extracts the deltas against the base, re-merges attention with the
/// attention drift of every expert, and retrains the routers from the victim's.
///
/// `task_data` must hold a training set for every expert task.
pub fn finetune_experts(
    victim: &MergedMoE,
    task_data: &[Dataset],
    ft: &FinetuneConfig,
    seed: u64,
    rt: &RouterTraining,
) -> Result<(MergedMoE, TamperRecord)> {
    let e = victim.n_experts();
    let mut record = TamperRecord::identity(TamperOp::Finetune, e);
    record.affected_experts = (0..e).collect();
    record.params.steps = Some(ft.steps);
    record.params.lr = Some(ft.lr);
    record.params.seed = Some(seed);
    if ft.steps == 0 {
        return Ok((victim.clone(), record));
    }
    let sets: Vec<&Dataset> = victim
        .expert_ids
        .iter()
        .map(|&t| {
            task_data
                .iter()
                .find(|d| d.task_id == t)
                .ok_or_else(|| invalid_input(format!("no training data for expert task {t}")))
        })
        .collect::<Result<_>>()?;
    let tuned = (0..e)
        .into_par_iter()
        .map(|j| {
            let mut src = victim.base.clone();
            for (b, m) in src.blocks.iter_mut().zip(victim.expert_deltas(j)) {
                b.mlp.add_scaled(m, 1.0);
            }
            finetune(&src, sets[j], ft, derive_seed(seed, j as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = victim.clone();
    for (j, m) in tuned.iter().enumerate() {
        for (l, blk) in m.blocks.iter().enumerate() {
            s.expert_bank[l][j] = blk.mlp.sub(&victim.base.blocks[l].mlp)?;
            let mut drift = blk.attn.clone();
            drift.add_scaled(&victim.base.blocks[l].attn, -1.0);
            s.base.blocks[l].attn.add_scaled(&drift, victim.lambda);
        }
        let t = victim.expert_ids[j];
        s.base.heads.insert(t, m.heads[&t].clone());
    }
    let s = train_routers(&s, rt.datasets, rt.cfg, rt.seed)?;
    Ok((s, record))
}

/// Zeros exactly `⌊sparsity·len⌋` entries of smallest magnitude, breaking ties
/// by the lowest flat index.
pub fn magnitude_prune_matrix(w: &Matrix, sparsity: f64) -> Matrix {
    let n = w.len();
    let k = (sparsity * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let data = w.as_slice();
    order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b)));
    let mut out = w.clone();
    for &i in &order[..k] {
        out.as_mut_slice()[i] = 0.0;
    }
    out
}

/// WANDA on one matrix: score `|W_ij|·col_norms[j]`, zeroing the
/// `⌊sparsity·cols⌋` lowest-scored entries of every row (ties by lowest column).
pub fn wanda_prune_matrix(w: &Matrix, col_norms: &[f64], sparsity: f64) -> Result<Matrix> {
    if col_norms.len() != w.cols() {
        return Err(invalid_input("one activation norm is needed per input column"));
    }
    let k = (sparsity * w.cols() as f64).floor() as usize;
    let mut out = w.clone();
    for r in 0..w.rows() {
        let row = w.row(r);
        let score: Vec<f64> = row.iter().zip(col_norms).map(|(v, n)| v.abs() * n).collect();
        let mut order: Vec<usize> = (0..w.cols()).collect();
        order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
        let dst = out.row_mut(r);
        for &c in &order[..k] {
            dst[c] = 0.0;
        }
    }
    Ok(out)
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(invalid_input(format!("sparsity {s} must lie in [0, 1)")));
    }
    Ok(())
}

/// Magnitude pruning of every expert's `dW1` and `dW2`, each matrix on its own.
pub fn prune_magnitude(victim: &MergedMoE, sparsity: f64) -> Result<(MergedMoE, TamperRecord)> {
    check_sparsity(sparsity)?;
    let mut s = victim.clone();
    for bank in s.expert_bank.iter_mut() {
        for m in bank.iter_mut() {
            m.w1 = magnitude_prune_matrix(&m.w1, sparsity);
            m.w2 = magnitude_prune_matrix(&m.w2, sparsity);
        }
    }
    let mut record = TamperRecord::identity(TamperOp::PruneMagnitude, victim.n_experts());
    record.affected_experts = (0..victim.n_experts()).collect();
    record.params.sparsity = Some(sparsity);
    Ok((s, record))
}

/// Per-layer column norms of the calibration activations under the victim's
/// routing: pre-MLP features (inputs of `dW1`) and post-ReLU hidden units of
/// the mixed MLP (inputs of `dW2`).
pub fn calibration_norms(moe: &MergedMoE, calib: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if calib.is_empty() {
        return Err(invalid_input("WANDA needs calibration samples"));
    }
    let traces = calib
        .par_iter()
        .map(|x| moe.forward_inner(x).map(|(_, f, h, _)| (f, h)))
        .collect::<Result<Vec<_>>>()?;
    let depth = moe.n_layers();
    let mut feats: Vec<Vec<f64>> = (0..depth).map(|_| vec![0.0; moe.arch.width]).collect();
    let mut hidden: Vec<Vec<f64>> = (0..depth).map(|_| vec![0.0; moe.arch.hidden]).collect();
    for (f, h) in &traces {
        for l in 0..depth {
            for (acc, v) in feats[l].iter_mut().zip(&f[l]) {
                *acc += v * v;
            }
            for (acc, v) in hidden[l].iter_mut().zip(&h[l]) {
                *acc += v * v;
            }
        }
    }
    for v in feats.iter_mut().chain(hidden.iter_mut()).flatten() {
        *v = v.sqrt();
    }
    Ok((feats, hidden))
}

/// WANDA pruning of every expert's `dW1` and `dW2` with per-row sparsity.
pub fn prune_wanda(victim: &MergedMoE, sparsity: f64, calib: &[&[f64]]) -> Result<(MergedMoE, TamperRecord)> {
    check_sparsity(sparsity)?;
    let (feat_norms, hidden_norms) = calibration_norms(victim, calib)?;
    let mut s = victim.clone();
    for (l, bank) in s.expert_bank.iter_mut().enumerate() {
        for m in bank.iter_mut() {
            m.w1 = wanda_prune_matrix(&m.w1, &feat_norms[l], sparsity)?;
            m.w2 = wanda_prune_matrix(&m.w2, &hidden_norms[l], sparsity)?;
        }
    }
    let mut record = TamperRecord::identity(TamperOp::PruneWanda, victim.n_experts());
    record.affected_experts = (0..victim.n_experts()).collect();
    record.params.sparsity = Some(sparsity);
    record.params.calibration_samples = Some(calib.len());
    Ok((s, record))
}

/// One seeded hidden-unit permutation per layer.
pub fn draw_permutations(moe: &MergedMoE, seed: u64) -> Vec<Vec<usize>> {
    let rng = Rng::new(derive_seed(seed, 0x5045_524d));
    (0..moe.n_layers())
        .map(|l| rng.split(l as u64).permutation(moe.arch.hidden))
        .collect()
}

/// Permutes the hidden units of every layer's base MLP and expert deltas
/// alike, leaving the merged function unchanged.
pub fn permute_hidden(victim: &MergedMoE, seed: u64) -> Result<(MergedMoE, TamperRecord)> {
    let perms = draw_permutations(victim, seed);
    let (s, mut record) = permute_hidden_with(victim, &perms)?;
    record.params.seed = Some(seed);
    Ok((s, record))
}

pub fn permute_hidden_with(victim: &MergedMoE, perms: &[Vec<usize>]) -> Result<(MergedMoE, TamperRecord)> {
    if perms.len() != victim.n_layers() {
        return Err(invalid_input("one permutation is needed per layer"));
    }
    let dh = victim.arch.hidden;
    for p in perms {
        let mut seen = vec![false; dh];
        if p.len() != dh || p.iter().any(|&i| i >= dh || std::mem::replace(&mut seen[i], true)) {
            return Err(invalid_input("hidden permutation is not a bijection"));
        }
    }
    let mut s = victim.clone();
    for (l, p) in perms.iter().enumerate() {
        s.base.blocks[l].mlp = victim.base.blocks[l].mlp.permute_hidden(p);
        for m in s.expert_bank[l].iter_mut() {
            *m = m.permute_hidden(p);
        }
    }
    let mut record = TamperRecord::identity(TamperOp::Permute, victim.n_experts());
    record.affected_experts = (0..victim.n_experts()).collect();
    Ok((s, record))
}

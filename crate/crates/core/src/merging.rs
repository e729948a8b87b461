//! Merged mixture-of-experts built from a pretrained base and expert deltas.
//!
//! Attention parameters are merged once, `A = A0 + λ Σ ΔA_i`. MLP parameters
//! are mixed per sample and per layer with router weights,
//! `θ_mlp(x) = θ0_mlp + Σ_j α_j(x) Δ_j_mlp`, where `α = softmax(g(h) / τ)` and
//! `h` is the block's pre-MLP feature.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Bundle, Digest64};
use crate::error::{invalid_input, Error, Result};
use crate::numerics::{derive_seed, softmax_unchecked, Matrix, ProbVector, Rng};
use crate::synthdata::Dataset;
use crate::toymodel::{Arch, ExpertDelta, Head, Mlp, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub layer_index: usize,
    /// `E x width`
    pub w: Matrix,
    /// `E x 1`
    pub b: Matrix,
    pub temperature: f64,
}

impl Router {
    pub fn n_experts(&self) -> usize {
        self.w.rows()
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let mut g = self.w.matvec(h);
        for (gi, bi) in g.iter_mut().zip(self.b.as_slice()) {
            *gi += bi;
        }
        g
    }

    pub fn route(&self, h: &[f64]) -> Vec<f64> {
        softmax_unchecked(&self.logits(h), self.temperature)
    }
}

/// Random router rows, scaled small so initial routing is close to uniform.
pub(crate) fn init_router_rows(rng: &mut Rng, rows: usize, width: usize) -> Matrix {
    let scale = 0.1 / (width as f64).sqrt();
    Matrix::from_vec(rows, width, rng.normals(rows * width, scale)).expect("finite draw")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedMoE {
    pub arch: Arch,
    /// Pretrained parameters with merged attention; MLPs hold `θ0` and the
    /// per-task heads live here too.
    pub base: ModelParams,
    /// `expert_bank[layer][expert]`
    pub expert_bank: Vec<Vec<Mlp>>,
    pub routers: Vec<Router>,
    pub lambda: f64,
    /// Source task of each expert slot.
    pub expert_ids: Vec<usize>,
}

/// Routing weights of one input, one distribution per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace(pub Vec<ProbVector>);

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub logits: Vec<f64>,
    pub trace: RoutingTrace,
    /// Pre-MLP feature of each block.
    pub features: Vec<Vec<f64>>,
    /// Post-ReLU hidden activation of each block's mixed MLP.
    pub hidden: Vec<Vec<f64>>,
    /// Output of the last block.
    pub output: Vec<f64>,
}

/// `θ0` with attention replaced by `A0 + λ Σ ΔA_i`; MLPs stay at `θ0`.
pub fn merge_attention(theta0: &ModelParams, deltas: &[ExpertDelta], lambda: f64) -> Result<ModelParams> {
    let mut out = theta0.clone();
    for d in deltas {
        if d.blocks.len() != theta0.blocks.len() {
            return Err(invalid_input("delta depth does not match the base model"));
        }
        for (b, db) in out.blocks.iter_mut().zip(&d.blocks) {
            if !b.attn.w.same_shape(&db.attn.w) || !b.attn.b.same_shape(&db.attn.b) {
                return Err(invalid_input("delta attention shape does not match the base model"));
            }
            b.attn.add_scaled(&db.attn, lambda);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            steps: 500,
            lr: 0.5,
            batch_size: 32,
        }
    }
}

/// Builds the MoE with seeded, untrained routers.
pub fn assemble_moe(
    theta0: &ModelParams,
    deltas: &[ExpertDelta],
    lambda: f64,
    router_seed: u64,
    temperature: f64,
) -> Result<MergedMoE> {
    if deltas.is_empty() {
        return Err(invalid_input("an MoE needs at least one expert delta"));
    }
    if !(temperature > 0.0) {
        return Err(invalid_input("router temperature must be positive"));
    }
    let base = merge_attention(theta0, deltas, lambda)?;
    let depth = theta0.blocks.len();
    let expert_bank = (0..depth)
        .map(|l| deltas.iter().map(|d| d.blocks[l].mlp.clone()).collect())
        .collect();
    let mut moe = MergedMoE {
        arch: theta0.arch,
        base,
        expert_bank,
        routers: Vec::new(),
        lambda,
        expert_ids: deltas.iter().map(|d| d.source_task).collect(),
    };
    moe.routers = fresh_routers(&moe.arch, deltas.len(), router_seed, temperature);
    moe.validate()?;
    Ok(moe)
}

pub(crate) fn fresh_routers(arch: &Arch, n_experts: usize, seed: u64, temperature: f64) -> Vec<Router> {
    let rng = Rng::new(derive_seed(seed, 0x524f_5554));
    (0..arch.depth)
        .map(|l| Router {
            layer_index: l,
            w: init_router_rows(&mut rng.split(l as u64), n_experts, arch.width),
            b: Matrix::zeros(n_experts, 1),
            temperature,
        })
        .collect()
}

impl MergedMoE {
    pub fn n_experts(&self) -> usize {
        self.expert_ids.len()
    }

    pub fn n_layers(&self) -> usize {
        self.base.blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.n_experts();
        if e == 0 {
            return Err(invalid_input("MoE has no experts"));
        }
        if self.expert_bank.len() != self.n_layers() || self.routers.len() != self.n_layers() {
            return Err(invalid_input("expert bank or routers do not cover every layer"));
        }
        for (l, (bank, r)) in self.expert_bank.iter().zip(&self.routers).enumerate() {
            if bank.len() != e || r.n_experts() != e {
                return Err(invalid_input(format!("layer {l} does not hold {e} experts")));
            }
            let base = &self.base.blocks[l].mlp;
            if bank.iter().any(|m| !m.same_shape(base)) {
                return Err(invalid_input(format!("layer {l} expert shape mismatch")));
            }
        }
        let mut ids = self.expert_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != e {
            return Err(invalid_input("expert ids must be unique"));
        }
        Ok(())
    }

    /// MLP delta of `expert` at every layer.
    pub fn expert_deltas(&self, expert: usize) -> Vec<&Mlp> {
        self.expert_bank.iter().map(|bank| &bank[expert]).collect()
    }

    /// `θ0_mlp + Δ_expert` at every layer.
    pub fn expert_full_mlps(&self, expert: usize) -> Vec<Mlp> {
        self.expert_bank
            .iter()
            .zip(&self.base.blocks)
            .map(|(bank, b)| {
                let mut m = b.mlp.clone();
                m.add_scaled(&bank[expert], 1.0);
                m
            })
            .collect()
    }

    /// `θ0_mlp + Σ_j α_j Δ_j` at `layer`.
    pub fn effective_mlp(&self, layer: usize, alpha: &[f64]) -> Mlp {
        let mut m = self.base.blocks[layer].mlp.clone();
        for (d, &a) in self.expert_bank[layer].iter().zip(alpha) {
            m.add_scaled(d, a);
        }
        m
    }

    pub fn head(&self, task: usize) -> Result<&Head> {
        self.base.head(task)
    }

    /// Installs the head of each expert's own task from its fine-tuned model.
    pub fn install_heads(&mut self, heads: BTreeMap<usize, Head>) {
        self.base.heads.extend(heads);
    }

    pub(crate) fn forward_inner(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>)> {
        let mut z = self.base.embed(x)?;
        let depth = self.n_layers();
        let mut alphas = Vec::with_capacity(depth);
        let mut features = Vec::with_capacity(depth);
        let mut hidden = Vec::with_capacity(depth);
        for l in 0..depth {
            let h = self.base.blocks[l].attn.apply(&z);
            let alpha = self.routers[l].route(&h);
            let out = self.effective_mlp(l, &alpha).apply(&h);
            z = out.out;
            alphas.push(alpha);
            features.push(h);
            hidden.push(out.r);
        }
        Ok((alphas, features, hidden, z))
    }

    /// Routing weights only.
    pub fn route(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.forward_inner(x).map(|(a, ..)| a)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = Digest64::new();
        h.u64(self.backbone_checksum());
        for r in &self.routers {
            h.f64s(r.w.as_slice()).f64s(r.b.as_slice()).f64s(&[r.temperature]);
        }
        h.f64s(&[self.lambda]);
        for &id in &self.expert_ids {
            h.u64(id as u64);
        }
        h.finish()
    }

    /// Checksum of the base parameters and the expert bank (routers excluded).
    pub fn backbone_checksum(&self) -> u64 {
        let mut h = Digest64::new();
        h.u64(self.base.checksum());
        for bank in &self.expert_bank {
            for m in bank {
                for t in m.tensors() {
                    h.f64s(t.as_slice());
                }
            }
        }
        h.finish()
    }

    pub fn to_bundle(&self) -> Result<Bundle<MergedMoE>> {
        Bundle::wrap("moe", self.clone())
    }
}

/// Mixed forward pass with the routing trace of every layer.
pub fn moe_forward(moe: &MergedMoE, x: &[f64], task_head: usize) -> Result<MoeOutput> {
    let head = moe.head(task_head)?;
    let (alphas, features, hidden, z) = moe.forward_inner(x)?;
    Ok(MoeOutput {
        logits: head.apply(&z),
        trace: RoutingTrace(
            alphas
                .into_iter()
                .map(ProbVector::new)
                .collect::<Result<Vec<_>>>()?,
        ),
        features,
        hidden,
        output: z,
    })
}

/// Routing target for a sample of `task`: one-hot at the expert trained on that
/// task, uniform when no expert matches.
pub fn routing_target(expert_ids: &[usize], task: usize) -> Vec<f64> {
    let e = expert_ids.len();
    match expert_ids.iter().position(|&id| id == task) {
        Some(j) => (0..e).map(|k| if k == j { 1.0 } else { 0.0 }).collect(),
        None => vec![1.0 / e as f64; e],
    }
}

/// Trains only the routers with per-layer cross-entropy between `α^(l)` and the
/// routing target. Layer features are computed under the current routing and
/// held fixed for the gradient, so each router sees a logistic-regression
/// gradient on its own layer's inputs.
pub fn train_routers(
    moe: &MergedMoE,
    datasets: &[Dataset],
    cfg: &RouterConfig,
    seed: u64,
) -> Result<MergedMoE> {
    let mut out = moe.clone();
    if cfg.steps == 0 {
        return Ok(out);
    }
    if datasets.is_empty() || datasets.iter().any(Dataset::is_empty) {
        return Err(invalid_input("router training needs non-empty datasets"));
    }
    let mut rng = Rng::new(derive_seed(seed, 0x5254_524e));
    let e = out.n_experts();
    let d = out.arch.width;
    let depth = out.n_layers();
    let targets: Vec<Vec<f64>> = datasets
        .iter()
        .map(|ds| routing_target(&out.expert_ids, ds.task_id))
        .collect();
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let t = rng.below(datasets.len());
                (t, rng.below(datasets[t].len()))
            })
            .collect();
        let snapshot = &out;
        let per_sample: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = picks
            .par_iter()
            .map(|&(t, k)| {
                snapshot
                    .forward_inner(datasets[t].input(k))
                    .map(|(a, f, ..)| (a, f))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gw: Vec<Matrix> = (0..depth).map(|_| Matrix::zeros(e, d)).collect();
        let mut gb: Vec<Matrix> = (0..depth).map(|_| Matrix::zeros(e, 1)).collect();
        let mut loss = 0.0;
        for (&(t, _), (alphas, feats)) in picks.iter().zip(&per_sample) {
            let target = &targets[t];
            for l in 0..depth {
                let tau = out.routers[l].temperature;
                for j in 0..e {
                    let a = alphas[l][j];
                    if target[j] > 0.0 {
                        loss -= target[j] * a.max(1e-300).ln();
                    }
                    let dg = (a - target[j]) / tau * scale;
                    if dg == 0.0 {
                        continue;
                    }
                    for (w, &hv) in gw[l].row_mut(j).iter_mut().zip(&feats[l]) {
                        *w += dg * hv;
                    }
                    gb[l].as_mut_slice()[j] += dg;
                }
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "router loss became {loss} at step {step}"
            )));
        }
        for (r, (w, b)) in out.routers.iter_mut().zip(gw.iter().zip(&gb)) {
            r.w.add_scaled(w, -cfg.lr);
            r.b.add_scaled(b, -cfg.lr);
        }
    }
    if out.routers.iter().any(|r| !r.w.is_finite() || !r.b.is_finite()) {
        return Err(Error::TrainingDiverged("router parameters became non-finite".into()));
    }
    Ok(out)
}

/// Mean routing mass each probe task places on each expert, averaged over layers.
pub fn mean_routing_mass(moe: &MergedMoE, probes: &[Dataset]) -> Result<Vec<Vec<f64>>> {
    probes
        .iter()
        .map(|ds| {
            let mut acc = vec![0.0; moe.n_experts()];
            for k in 0..ds.len() {
                for alpha in moe.route(ds.input(k))? {
                    for (a, v) in acc.iter_mut().zip(alpha) {
                        *a += v;
                    }
                }
            }
            let n = (ds.len() * moe.n_layers()) as f64;
            Ok(acc.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

//! Weight- and activation-based comparison methods.
//!
//! * PCS: cosine of flattened parameters (expert deltas, or the whole model).
//! * ICS: cosine of hidden-permutation invariant products `W2·W1` over the
//!   last `⌈L/2⌉` layers (plus `A·Aᵀ` of attention at model level).
//! * REEF: linear CKA between tapped activations on the probe suite.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_input, Result};
use crate::merging::MergedMoE;
use crate::numerics::{cosine_sim, linear_cka, Matrix, Scored};
use crate::synthdata::ProbeSuite;
use crate::toymodel::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PcsM,
    PcsE,
    IcsM,
    IcsE,
    Reef,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::PcsM => "pcs_m",
            Method::PcsE => "pcs_e",
            Method::IcsM => "ics_m",
            Method::IcsE => "ics_e",
            Method::Reef => "reef",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Some(match s {
            "pcs_m" => Method::PcsM,
            "pcs_e" => Method::PcsE,
            "ics_m" => Method::IcsM,
            "ics_e" => Method::IcsE,
            "reef" => Method::Reef,
            _ => return None,
        })
    }

    pub fn granularity(&self) -> Granularity {
        match self {
            Method::PcsE | Method::IcsE => Granularity::Expert,
            _ => Granularity::Model,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Model,
    Expert,
}

pub const FLAG_DEGENERATE: &str = "degenerate";
pub const FLAG_STRUCTURE_MISMATCH: &str = "structure-mismatch";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub method: Method,
    pub granularity: Granularity,
    pub victim_expert: Option<usize>,
    pub suspect_expert: Option<usize>,
    pub value: f64,
    pub clamped_value: f64,
    pub flags: Vec<String>,
}

impl BaselineScore {
    fn new(method: Method, s: Scored, mut flags: Vec<String>) -> Self {
        if s.degenerate {
            flags.push(FLAG_DEGENERATE.into());
        }
        Self {
            method,
            granularity: method.granularity(),
            victim_expert: None,
            suspect_expert: None,
            value: s.value,
            clamped_value: s.value.clamp(0.0, 1.0),
            flags,
        }
    }

    fn pair(mut self, victim: usize, suspect: usize) -> Self {
        self.victim_expert = Some(victim);
        self.suspect_expert = Some(suspect);
        self
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }
}

fn flatten(mlps: &[&Mlp]) -> Vec<f64> {
    let mut v = Vec::new();
    for m in mlps {
        m.flatten_into(&mut v);
    }
    v
}

fn same_structure(a: &[&Mlp], b: &[&Mlp]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| !x.same_shape(y)) {
        return Err(invalid_input("expert parameters differ in architecture"));
    }
    Ok(())
}

/// PCS-E: cosine of the flattened per-layer MLP deltas of two experts.
pub fn pcs_expert(delta_v: &[&Mlp], delta_s: &[&Mlp]) -> Result<BaselineScore> {
    same_structure(delta_v, delta_s)?;
    let s = cosine_sim(&flatten(delta_v), &flatten(delta_s))?;
    Ok(BaselineScore::new(Method::PcsE, s, Vec::new()))
}

fn last_layers(depth: usize) -> std::ops::Range<usize> {
    depth - depth.div_ceil(2)..depth
}

fn product(m: &Mlp) -> Matrix {
    m.w2.matmul(&m.w1).expect("MLP shapes are consistent")
}

/// ICS-E: cosine of `W2·W1` products of the full expert MLPs (`θ0 + Δ`) over
/// the last `⌈L/2⌉` layers.
pub fn ics_expert(full_v: &[&Mlp], full_s: &[&Mlp]) -> Result<BaselineScore> {
    same_structure(full_v, full_s)?;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for l in last_layers(full_v.len()) {
        a.extend_from_slice(product(full_v[l]).as_slice());
        b.extend_from_slice(product(full_s[l]).as_slice());
    }
    let s = cosine_sim(&a, &b)?;
    Ok(BaselineScore::new(Method::IcsE, s, Vec::new()))
}

/// PCS-E between victim expert `j` and suspect expert `k`.
pub fn pcs_expert_pair(v: &MergedMoE, j: usize, s: &MergedMoE, k: usize) -> Result<BaselineScore> {
    check_slot(v, j)?;
    check_slot(s, k)?;
    Ok(pcs_expert(&v.expert_deltas(j), &s.expert_deltas(k))?.pair(j, k))
}

/// ICS-E between victim expert `j` and suspect expert `k`.
pub fn ics_expert_pair(v: &MergedMoE, j: usize, s: &MergedMoE, k: usize) -> Result<BaselineScore> {
    check_slot(v, j)?;
    check_slot(s, k)?;
    let fv = v.expert_full_mlps(j);
    let fs = s.expert_full_mlps(k);
    let rv: Vec<&Mlp> = fv.iter().collect();
    let rs: Vec<&Mlp> = fs.iter().collect();
    Ok(ics_expert(&rv, &rs)?.pair(j, k))
}

fn check_slot(m: &MergedMoE, j: usize) -> Result<()> {
    if j >= m.n_experts() {
        return Err(invalid_input(format!("expert slot {j} out of range")));
    }
    Ok(())
}

fn check_common(v: &MergedMoE, s: &MergedMoE) -> Result<(usize, Vec<String>)> {
    if v.arch != s.arch || v.n_layers() != s.n_layers() {
        return Err(invalid_input("models differ in architecture"));
    }
    let common = v.n_experts().min(s.n_experts());
    let flags = if v.n_experts() != s.n_experts() {
        vec![FLAG_STRUCTURE_MISMATCH.to_string()]
    } else {
        Vec::new()
    };
    Ok((common, flags))
}

fn model_vector(m: &MergedMoE, common: usize) -> Vec<f64> {
    let mut v = Vec::new();
    v.extend_from_slice(m.base.input_proj.as_slice());
    for b in &m.base.blocks {
        for t in b.tensors() {
            v.extend_from_slice(t.as_slice());
        }
    }
    for bank in &m.expert_bank {
        for e in &bank[..common] {
            e.flatten_into(&mut v);
        }
    }
    for r in &m.routers {
        for j in 0..common {
            v.extend_from_slice(r.w.row(j));
        }
        v.extend_from_slice(&r.b.as_slice()[..common]);
    }
    v
}

/// PCS-M: cosine over base parameters, every expert delta and the routers.
/// Models with different expert counts are compared on the common leading
/// experts and flagged.
pub fn pcs_model(v: &MergedMoE, s: &MergedMoE) -> Result<BaselineScore> {
    let (common, flags) = check_common(v, s)?;
    let sc = cosine_sim(&model_vector(v, common), &model_vector(s, common))?;
    Ok(BaselineScore::new(Method::PcsM, sc, flags))
}

fn invariant_vector(m: &MergedMoE, common: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for l in last_layers(m.n_layers()) {
        let blk = &m.base.blocks[l];
        v.extend_from_slice(product(&blk.mlp).as_slice());
        for j in 0..common {
            let mut full = blk.mlp.clone();
            full.add_scaled(&m.expert_bank[l][j], 1.0);
            v.extend_from_slice(product(&full).as_slice());
        }
        let a = &blk.attn.w;
        v.extend_from_slice(a.matmul(&a.transpose()).expect("square").as_slice());
    }
    v
}

/// ICS-M: invariant products of the base MLP, every expert's full MLP and the
/// attention weights over the last `⌈L/2⌉` layers.
pub fn ics_model(v: &MergedMoE, s: &MergedMoE) -> Result<BaselineScore> {
    let (common, flags) = check_common(v, s)?;
    let sc = cosine_sim(&invariant_vector(v, common), &invariant_vector(s, common))?;
    Ok(BaselineScore::new(Method::IcsM, sc, flags))
}

/// Activation tap for REEF.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Output of the last block.
    #[default]
    Output,
    /// Feature entering the MLP of the given layer.
    PreMlp(usize),
}

/// Tapped features of every probe input, one row per sample in suite order.
pub fn tap_features(m: &MergedMoE, suite: &ProbeSuite, tap: TapPoint) -> Result<Matrix> {
    if let TapPoint::PreMlp(l) = tap {
        if l >= m.n_layers() {
            return Err(invalid_input(format!("tap layer {l} out of range")));
        }
    }
    let inputs: Vec<&[f64]> = suite.inputs().collect();
    if inputs.is_empty() {
        return Err(invalid_input("REEF needs probe samples"));
    }
    let rows = inputs
        .par_iter()
        .map(|x| {
            m.forward_inner(x).map(|(_, feats, _, z)| match tap {
                TapPoint::Output => z,
                TapPoint::PreMlp(l) => feats[l].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = rows[0].len();
    Matrix::from_vec(rows.len(), d, rows.concat())
}

/// REEF: linear CKA of tapped activations on the shared probe suite.
pub fn reef(v: &MergedMoE, s: &MergedMoE, suite: &ProbeSuite, tap: TapPoint) -> Result<BaselineScore> {
    let x = tap_features(v, suite, tap)?;
    let y = tap_features(s, suite, tap)?;
    let sc = linear_cka(&x, &y)?;
    Ok(BaselineScore::new(Method::Reef, sc, Vec::new()))
}

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ScenarioConfig, SuspectRouterData, TamperSpec};
use crate::baselines::{self, BaselineScore, Method};
use crate::bundle::{checksum_hex, Bundle};
use crate::error::{invalid_input, Error, Result};
use crate::fingerprint::{
    attribute, fingerprint_moe, similarity_matrix, AttributionReport, ExpertFingerprint, Origin,
    SimilarityMatrix,
};
use crate::merging::{assemble_moe, train_routers, MergedMoE};
use crate::numerics::derive_seed;
use crate::synthdata::{make_task, probe_suite, Dataset, ProbeSuite};
use crate::tampering::{self, RouterTraining, TamperRecord};
use crate::toymodel::{accuracy, finetune, init_pretrained, task_vector, ExpertDelta, ModelParams};

pub const REPORT_FORMAT: &str = "routeprint-report";
pub const REPORT_VERSION: u32 = 1;

/// Seed labels for the independent random streams of one scenario.
mod stream {
    pub const THETA0: u64 = 1;
    pub const ROUTER_INIT: u64 = 2;
    pub const ROUTER_TRAIN: u64 = 3;
    pub const EXPERT: u64 = 0x100;
    pub const TAMPER: u64 = 0x200;
}

/// Training and probe splits of every task (victim tasks first, then reserves).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: Vec<Dataset>,
    pub probe: Vec<Dataset>,
}

pub fn generate_data(cfg: &ScenarioConfig) -> Result<TaskData> {
    let data = cfg.data();
    let mut train = Vec::with_capacity(cfg.n_tasks());
    let mut probe = Vec::with_capacity(cfg.n_tasks());
    for t in 0..cfg.n_tasks() {
        let (_, tr, pr) = make_task(t, cfg.global_seed, &data)?;
        train.push(tr);
        probe.push(pr);
    }
    Ok(TaskData { train, probe })
}

/// Everything `build_victim` produces, serializable as the `victim` bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Victim {
    pub config: ScenarioConfig,
    pub theta0: ModelParams,
    pub moe: MergedMoE,
    /// Deltas of the reserve tasks, used as new experts by structural tampering.
    pub reserve_deltas: Vec<ExpertDelta>,
    /// Own-task probe accuracy of each fine-tuned expert (victim tasks, then reserves).
    pub expert_accuracy: Vec<f64>,
    /// Probe accuracy of the pretrained base on each task.
    pub base_accuracy: Vec<f64>,
}

impl Victim {
    pub fn to_bundle(&self) -> Result<Bundle<Victim>> {
        Bundle::wrap("victim", self.clone())
    }
}

/// A victim together with the data and probe suite it was built with.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub victim: Victim,
    pub data: TaskData,
    pub suite: ProbeSuite,
    pub victim_fingerprints: Vec<ExpertFingerprint>,
}

impl Workbench {
    pub fn config(&self) -> &ScenarioConfig {
        &self.victim.config
    }

    pub fn from_victim(victim: Victim) -> Result<Self> {
        victim.config.validate()?;
        let data = generate_data(&victim.config)?;
        let suite = probe_suite(&data.probe[..victim.config.n_experts], victim.config.samples_per_task)?;
        let (_, victim_fingerprints) = fingerprint_moe(&victim.moe, &suite)?;
        Ok(Self {
            victim,
            data,
            suite,
            victim_fingerprints,
        })
    }

    /// Same victim, probed with a different number of samples per task.
    pub fn with_samples(&self, samples_per_task: usize) -> Result<Self> {
        let mut victim = self.victim.clone();
        victim.config.samples_per_task = samples_per_task;
        let suite = probe_suite(&self.data.probe[..victim.config.n_experts], samples_per_task)?;
        let (_, victim_fingerprints) = fingerprint_moe(&victim.moe, &suite)?;
        Ok(Self {
            victim,
            data: self.data.clone(),
            suite,
            victim_fingerprints,
        })
    }
}

/// Pretrained base, one fine-tuned expert per task, merged MoE with trained
/// routers. Probe tasks are the victim experts' own tasks.
pub fn build_victim(cfg: &ScenarioConfig) -> Result<Workbench> {
    cfg.validate()?;
    let data = generate_data(cfg)?;
    let g = cfg.global_seed;
    let theta0 = init_pretrained(&cfg.arch(), derive_seed(g, stream::THETA0), &cfg.warmup_cfg(), &data.train)?;
    let ft = cfg.finetune_cfg(cfg.finetune_steps);
    let experts = (0..cfg.n_tasks())
        .into_par_iter()
        .map(|t| finetune(&theta0, &data.train[t], &ft, derive_seed(g, stream::EXPERT + t as u64)))
        .collect::<Result<Vec<_>>>()?;
    let expert_accuracy = experts
        .iter()
        .zip(&data.probe)
        .map(|(m, p)| accuracy(m, p))
        .collect::<Result<Vec<_>>>()?;
    let base_accuracy = data.probe.iter().map(|p| accuracy(&theta0, p)).collect::<Result<Vec<_>>>()?;
    let mut deltas = Vec::with_capacity(experts.len());
    for (t, m) in experts.iter().enumerate() {
        let mut d = task_vector(m, &theta0)?;
        d.source_task = t;
        deltas.push(d);
    }
    let reserve_deltas = deltas.split_off(cfg.n_experts);
    let mut moe = assemble_moe(
        &theta0,
        &deltas,
        cfg.lambda,
        derive_seed(g, stream::ROUTER_INIT),
        cfg.router_temperature,
    )?;
    moe.install_heads(
        experts
            .iter()
            .enumerate()
            .map(|(t, m)| (t, m.heads[&t].clone()))
            .collect::<BTreeMap<_, _>>(),
    );
    let moe = train_routers(
        &moe,
        &data.train[..cfg.n_experts],
        &cfg.router_cfg(),
        derive_seed(g, stream::ROUTER_TRAIN),
    )?;
    let victim = Victim {
        config: cfg.clone(),
        theta0,
        moe,
        reserve_deltas,
        expert_accuracy,
        base_accuracy,
    };
    let suite = probe_suite(&data.probe[..cfg.n_experts], cfg.samples_per_task)?;
    let (_, victim_fingerprints) = fingerprint_moe(&victim.moe, &suite)?;
    Ok(Workbench {
        victim,
        data,
        suite,
        victim_fingerprints,
    })
}

fn label_seed(g: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(derive_seed(g, stream::TAMPER), |acc, b| derive_seed(acc, b as u64))
}

/// Applies one tamper spec to the workbench victim.
pub fn apply_tamper(wb: &Workbench, spec: &TamperSpec) -> Result<(MergedMoE, TamperRecord)> {
    let cfg = wb.config();
    let victim = &wb.victim.moe;
    // Fine-tunes of any length share a stream, so a longer run extends a shorter one.
    let seed = match spec {
        TamperSpec::Finetune { .. } => label_seed(cfg.global_seed, "finetune"),
        _ => label_seed(cfg.global_seed, &spec.label()),
    };
    let rcfg = cfg.router_cfg();
    let router_data = |expert_tasks: &[usize]| -> Vec<Dataset> {
        let mut tasks: Vec<usize> = match cfg.suspect_router_data {
            SuspectRouterData::Union => (0..cfg.n_experts).chain(expert_tasks.iter().copied()).collect(),
            SuspectRouterData::Experts => expert_tasks.to_vec(),
        };
        tasks.sort_unstable();
        tasks.dedup();
        tasks.into_iter().map(|t| wb.data.train[t].clone()).collect()
    };
    let reserves = &wb.victim.reserve_deltas;
    let out = match spec {
        TamperSpec::None => tampering::no_tamper(victim),
        TamperSpec::Replace { count } => {
            let indices: Vec<usize> = (0..*count).collect();
            let mut ids = victim.expert_ids.clone();
            for (i, d) in indices.iter().zip(&reserves[..*count]) {
                ids[*i] = d.source_task;
            }
            let sets = router_data(&ids);
            let rt = RouterTraining { datasets: &sets, cfg: &rcfg, seed };
            tampering::replace_experts(victim, &indices, &reserves[..*count], &rt)?
        }
        TamperSpec::Add { count } => {
            let mut ids = victim.expert_ids.clone();
            ids.extend(reserves[..*count].iter().map(|d| d.source_task));
            let sets = router_data(&ids);
            let rt = RouterTraining { datasets: &sets, cfg: &rcfg, seed };
            tampering::add_experts(victim, &reserves[..*count], &rt)?
        }
        TamperSpec::Delete { count } => {
            let keep: Vec<usize> = (0..victim.n_experts() - count).collect();
            let ids: Vec<usize> = keep.iter().map(|&j| victim.expert_ids[j]).collect();
            let sets = router_data(&ids);
            let rt = RouterTraining { datasets: &sets, cfg: &rcfg, seed };
            tampering::delete_experts(victim, &keep, &rt)?
        }
        TamperSpec::Finetune { steps, .. } => {
            let sets = router_data(&victim.expert_ids);
            let rt = RouterTraining { datasets: &sets, cfg: &rcfg, seed };
            tampering::finetune_experts(victim, &wb.data.train, &cfg.finetune_cfg(*steps), seed, &rt)?
        }
        TamperSpec::PruneMagnitude { percent } => tampering::prune_magnitude(victim, *percent as f64 / 100.0)?,
        TamperSpec::PruneWanda { percent } => {
            let n = cfg.calibration_samples;
            let calib: Vec<&[f64]> = wb.data.probe[..cfg.n_experts]
                .iter()
                .flat_map(|p| (0..n).map(move |k| p.input(k)))
                .collect();
            tampering::prune_wanda(victim, *percent as f64 / 100.0, &calib)?
        }
        TamperSpec::Permute => tampering::permute_hidden(victim, seed)?,
    };
    out.1.check_consistency(victim, &out.0)?;
    Ok(out)
}

/// Headline numbers of one report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    /// Mean similarity between each reused suspect expert and its true origin.
    pub ours_reused_mean: Option<f64>,
    pub min_reused_margin: Option<f64>,
    pub max_new_margin: Option<f64>,
    pub matched: usize,
    pub new: usize,
    /// Mean PCS-E / ICS-E over the same reused pairs.
    pub pcs_e_mean: Option<f64>,
    pub ics_e_mean: Option<f64>,
    pub pcs_m: Option<f64>,
    pub ics_m: Option<f64>,
    pub reef: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub config: ScenarioConfig,
    /// Absent when the suspect's provenance is unknown.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tamper: Option<TamperRecord>,
    pub probe_checksum: String,
    pub samples_per_task: usize,
    pub victim_checksum: String,
    pub suspect_checksum: String,
    pub similarity: SimilarityMatrix,
    pub attribution: AttributionReport,
    pub baselines: Vec<BaselineScore>,
    pub summary: ScenarioSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timings_ms: Option<BTreeMap<String, f64>>,
}

impl ScenarioReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ScenarioReport = serde_json::from_str(text)?;
        if r.format != REPORT_FORMAT {
            return Err(Error::InvalidRequest(format!("not a scenario report: `{}`", r.format)));
        }
        Ok(r)
    }

    pub fn baseline(&self, m: Method) -> impl Iterator<Item = &BaselineScore> {
        self.baselines.iter().filter(move |b| b.method == m)
    }

    /// Baseline CSV: `method,granularity,victim_expert,suspect_expert,value,clamped_value,flags`.
    pub fn write_baselines_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "granularity", "victim_expert", "suspect_expert", "value", "clamped_value", "flags"])?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.baselines {
            w.write_record([
                b.method.as_str().to_string(),
                serde_json::to_value(b.granularity)?.as_str().unwrap_or_default().to_string(),
                opt(b.victim_expert),
                opt(b.suspect_expert),
                format!("{:.6}", b.value),
                format!("{:.6}", b.clamped_value),
                b.flags.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fails unless every report carries the current format version.
pub fn check_versions(reports: &[&ScenarioReport]) -> Result<()> {
    if let Some(r) = reports.iter().find(|r| r.version != REPORT_VERSION || r.format != REPORT_FORMAT) {
        return Err(Error::InvalidRequest(format!(
            "report `{}` has format version {}, expected {REPORT_VERSION}; refusing to aggregate mixed versions",
            r.scenario, r.version
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Fingerprints and baselines of `suspect` against the workbench victim.
pub fn evaluate(
    wb: &Workbench,
    label: &str,
    suspect: &MergedMoE,
    record: TamperRecord,
) -> Result<ScenarioReport> {
    compare_models(
        wb.config(),
        &wb.suite,
        &wb.victim.moe,
        &wb.victim_fingerprints,
        label,
        suspect,
        Some(record),
    )
}

/// Compares two models on a shared probe suite. Without a tamper record the
/// expert-level baselines are scored on the attributed (top-1) pairs and no
/// accuracy is reported.
pub fn compare_models(
    cfg: &ScenarioConfig,
    suite: &ProbeSuite,
    victim: &MergedMoE,
    victim_fingerprints: &[ExpertFingerprint],
    label: &str,
    suspect: &MergedMoE,
    record: Option<TamperRecord>,
) -> Result<ScenarioReport> {
    let t0 = Instant::now();
    let (_, sfp) = fingerprint_moe(suspect, suite)?;
    let similarity = similarity_matrix(victim_fingerprints, &sfp)?;
    let truth = record.as_ref().map(|r| r.ground_truth_map.as_slice());
    let attribution = attribute(&similarity, &cfg.attribution_cfg(), truth)?;
    let t_fp = t0.elapsed().as_secs_f64() * 1e3;

    let origins: Vec<Origin> = match truth {
        Some(t) => t.to_vec(),
        None => attribution.entries.iter().map(|e| Origin::Victim(e.top1_index)).collect(),
    };
    let pairs: Vec<(usize, usize)> = origins
        .iter()
        .enumerate()
        .filter_map(|(k, o)| match o {
            Origin::Victim(j) => Some((*j, k)),
            Origin::New => None,
        })
        .collect();
    let mut scores = Vec::new();
    for m in cfg.baseline_methods() {
        match m {
            Method::PcsM => scores.push(baselines::pcs_model(victim, suspect)?),
            Method::IcsM => scores.push(baselines::ics_model(victim, suspect)?),
            Method::Reef => scores.push(baselines::reef(victim, suspect, suite, cfg.reef_tap)?),
            Method::PcsE => {
                for &(j, k) in &pairs {
                    scores.push(baselines::pcs_expert_pair(victim, j, suspect, k)?);
                }
            }
            Method::IcsE => {
                for &(j, k) in &pairs {
                    scores.push(baselines::ics_expert_pair(victim, j, suspect, k)?);
                }
            }
        }
    }
    let t_base = t0.elapsed().as_secs_f64() * 1e3 - t_fp;

    let margins = |new: bool| -> Vec<f64> {
        attribution
            .entries
            .iter()
            .zip(&origins)
            .filter(|(_, o)| (**o == Origin::New) == new)
            .filter_map(|(e, _)| e.margin)
            .collect()
    };
    let reused: Vec<f64> = pairs.iter().map(|&(j, k)| similarity.get(j, k)).collect();
    let method_mean = |m: Method| -> Option<f64> {
        mean(&scores.iter().filter(|s| s.method == m).map(|s| s.value).collect::<Vec<_>>())
    };
    let summary = ScenarioSummary {
        ours_reused_mean: mean(&reused),
        min_reused_margin: margins(false).into_iter().reduce(f64::min),
        max_new_margin: margins(true).into_iter().reduce(f64::max),
        matched: attribution.matched_count(),
        new: attribution.new_count(),
        pcs_e_mean: method_mean(Method::PcsE),
        ics_e_mean: method_mean(Method::IcsE),
        pcs_m: method_mean(Method::PcsM),
        ics_m: method_mean(Method::IcsM),
        reef: method_mean(Method::Reef),
    };
    let timings_ms = cfg.record_timings.then(|| {
        BTreeMap::from([
            ("fingerprint".to_string(), t_fp),
            ("baselines".to_string(), t_base),
        ])
    });
    Ok(ScenarioReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        scenario: label.into(),
        config: cfg.clone(),
        tamper: record,
        probe_checksum: checksum_hex(suite.checksum),
        samples_per_task: suite.samples_per_task,
        victim_checksum: checksum_hex(victim.checksum()),
        suspect_checksum: checksum_hex(suspect.checksum()),
        similarity,
        attribution,
        baselines: scores,
        summary,
        timings_ms,
    })
}

/// Tamper plus evaluation for one spec.
pub fn run_spec(wb: &Workbench, spec: &TamperSpec) -> Result<(MergedMoE, ScenarioReport)> {
    let t0 = Instant::now();
    let (suspect, record) = apply_tamper(wb, spec)?;
    let t_tamper = t0.elapsed().as_secs_f64() * 1e3;
    let mut report = evaluate(wb, &spec.label(), &suspect, record)?;
    if let Some(t) = report.timings_ms.as_mut() {
        t.insert("tamper".into(), t_tamper);
    }
    Ok((suspect, report))
}

/// Builds the victim and runs every tamper spec of the config (the grid, or
/// the single `tamper` label), in parallel over grid points.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<ScenarioReport>> {
    let wb = build_victim(cfg)?;
    let specs = cfg.tamper_specs()?;
    specs
        .par_iter()
        .map(|s| run_spec(&wb, s).map(|(_, r)| r))
        .collect()
}

/// Loads a victim bundle or a bare MoE bundle.
pub fn load_model(path: &std::path::Path) -> Result<(MergedMoE, Option<Victim>)> {
    let text = std::fs::read_to_string(path)?;
    let kind = serde_json::from_str::<serde_json::Value>(&text)?
        .get("kind")
        .and_then(|k| k.as_str().map(str::to_string))
        .ok_or_else(|| invalid_input(format!("{} is not a model bundle", path.display())))?;
    match kind.as_str() {
        "victim" => {
            let v = Bundle::<Victim>::from_json("victim", &text)?.payload;
            Ok((v.moe.clone(), Some(v)))
        }
        "moe" => Ok((Bundle::<MergedMoE>::from_json("moe", &text)?.payload, None)),
        k => Err(invalid_input(format!("unexpected bundle kind `{k}`"))),
    }
}

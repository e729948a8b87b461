use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ScenarioConfig, TamperSpec};
use super::scenario::{build_victim, check_versions, run_spec, ScenarioReport, Workbench};
use crate::error::{Error, Result};
use crate::merging::mean_routing_mass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteId {
    Effectiveness,
    Parametric,
    Structural,
    Sparsity,
    Samplesize,
    RoutingHeatmap,
}

impl SuiteId {
    pub const ALL: [SuiteId; 6] = [
        SuiteId::Effectiveness,
        SuiteId::Parametric,
        SuiteId::Structural,
        SuiteId::Sparsity,
        SuiteId::Samplesize,
        SuiteId::RoutingHeatmap,
    ];

    pub fn parse(s: &str) -> Result<SuiteId> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::InvalidRequest(format!("unknown suite `{s}`")))
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SuiteId::Effectiveness => "effectiveness",
            SuiteId::Parametric => "parametric",
            SuiteId::Structural => "structural",
            SuiteId::Sparsity => "sparsity",
            SuiteId::Samplesize => "samplesize",
            SuiteId::RoutingHeatmap => "routing-heatmap",
        }
    }
}

pub const EFFECTIVENESS_GRID: [&str; 6] = ["none", "ft-short", "wanda-30", "delete-1", "add-2", "replace-1"];
pub const PARAMETRIC_GRID: [&str; 5] = ["ft-short", "ft-long", "magnitude-30", "wanda-30", "permute"];
pub const SPARSITY_LEVELS: [u32; 4] = [20, 30, 40, 50];
pub const SAMPLE_SIZES: [usize; 5] = [16, 32, 64, 128, 256];
pub const STRUCTURAL_COUNTS: [usize; 3] = [1, 2, 3];

/// Reports of one suite plus its aggregate table.
#[derive(Debug, Clone)]
pub struct SuiteOutput {
    pub id: SuiteId,
    /// `(file stem, report)`
    pub reports: Vec<(String, ScenarioReport)>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl SuiteOutput {
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let c = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[c].as_str()).collect())
    }

    pub fn report(&self, stem: &str) -> Option<&ScenarioReport> {
        self.reports.iter().find(|(s, _)| s == stem).map(|(_, r)| r)
    }
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

fn opt6(v: Option<f64>) -> String {
    v.map(f6).unwrap_or_default()
}

fn specs(cfg: &ScenarioConfig, labels: &[&str]) -> Result<Vec<TamperSpec>> {
    labels.iter().map(|l| TamperSpec::parse(l, cfg)).collect()
}

fn run_grid(wb: &Workbench, specs: &[TamperSpec]) -> Result<Vec<ScenarioReport>> {
    specs.par_iter().map(|s| run_spec(wb, s).map(|(_, r)| r)).collect()
}

fn exhibit(id: SuiteId, label: &str) -> String {
    match id {
        SuiteId::Effectiveness => {
            let panel = EFFECTIVENESS_GRID.iter().position(|l| *l == label).unwrap_or(0);
            format!("fig3{}", (b'a' + panel as u8) as char)
        }
        SuiteId::Parametric => "table-parametric".into(),
        SuiteId::Structural => "fig5".into(),
        SuiteId::Sparsity => "fig4".into(),
        SuiteId::Samplesize => "fig6".into(),
        SuiteId::RoutingHeatmap => "fig2b".into(),
    }
}

/// Runs one suite against the victim of `cfg`.
pub fn run_suite(id: SuiteId, cfg: &ScenarioConfig) -> Result<SuiteOutput> {
    let wb = build_victim(cfg)?;
    run_suite_on(id, &wb)
}

pub fn run_suite_on(id: SuiteId, wb: &Workbench) -> Result<SuiteOutput> {
    let cfg = wb.config();
    let out = match id {
        SuiteId::Effectiveness => effectiveness(wb, cfg)?,
        SuiteId::Parametric => parametric(wb, cfg)?,
        SuiteId::Structural => structural(wb, cfg)?,
        SuiteId::Sparsity => sparsity(wb, cfg)?,
        SuiteId::Samplesize => samplesize(wb, cfg)?,
        SuiteId::RoutingHeatmap => heatmap(wb)?,
    };
    check_versions(&out.reports.iter().map(|(_, r)| r).collect::<Vec<_>>())?;
    Ok(out)
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn effectiveness(wb: &Workbench, cfg: &ScenarioConfig) -> Result<SuiteOutput> {
    let reports = run_grid(wb, &specs(cfg, &EFFECTIVENESS_GRID)?)?;
    let mut rows = Vec::new();
    for r in &reports {
        for (e, gt) in r.attribution.entries.iter().zip(&r.tamper.as_ref().expect("suite reports carry a tamper record").ground_truth_map) {
            let truth = match gt {
                crate::fingerprint::Origin::Victim(j) => j.to_string(),
                crate::fingerprint::Origin::New => "new".into(),
            };
            let verdict = match e.verdict {
                crate::fingerprint::Verdict::Matched(j) => j.to_string(),
                crate::fingerprint::Verdict::New => "new".into(),
            };
            rows.push(vec![
                exhibit(SuiteId::Effectiveness, &r.scenario),
                r.scenario.clone(),
                e.suspect_slot.to_string(),
                e.suspect_id.to_string(),
                truth.clone(),
                e.top1_index.to_string(),
                f6(e.top1_value),
                opt6(e.margin),
                verdict.clone(),
                (truth == verdict).to_string(),
            ]);
        }
    }
    Ok(SuiteOutput {
        id: SuiteId::Effectiveness,
        reports: reports.into_iter().map(|r| (r.scenario.clone(), r)).collect(),
        header: header(&[
            "paper_exhibit",
            "scenario",
            "suspect_expert",
            "suspect_task",
            "ground_truth",
            "top1_index",
            "top1_value",
            "margin",
            "verdict",
            "correct",
        ]),
        rows,
    })
}

const METHOD_COLUMNS: [&str; 6] = ["ours", "pcs_m", "pcs_e", "ics_m", "ics_e", "reef"];

fn method_values(r: &ScenarioReport) -> Vec<String> {
    let s = &r.summary;
    [s.ours_reused_mean, s.pcs_m, s.pcs_e_mean, s.ics_m, s.ics_e_mean, s.reef]
        .into_iter()
        .map(opt6)
        .collect()
}

fn parametric(wb: &Workbench, cfg: &ScenarioConfig) -> Result<SuiteOutput> {
    let reports = run_grid(wb, &specs(cfg, &PARAMETRIC_GRID)?)?;
    let rows = reports
        .iter()
        .map(|r| {
            let mut row = vec![exhibit(SuiteId::Parametric, &r.scenario), r.scenario.clone()];
            row.extend(method_values(r));
            row
        })
        .collect();
    let mut h = header(&["paper_exhibit", "setting"]);
    h.extend(header(&METHOD_COLUMNS));
    Ok(SuiteOutput {
        id: SuiteId::Parametric,
        reports: reports.into_iter().map(|r| (r.scenario.clone(), r)).collect(),
        header: h,
        rows,
    })
}

fn structural(wb: &Workbench, cfg: &ScenarioConfig) -> Result<SuiteOutput> {
    let mut labels = Vec::new();
    for op in ["replace", "delete", "add"] {
        for c in STRUCTURAL_COUNTS {
            let ok = match op {
                "delete" => c < cfg.n_experts,
                "replace" => c <= cfg.reserve_tasks && c <= cfg.n_experts,
                _ => c <= cfg.reserve_tasks,
            };
            if ok {
                labels.push(format!("{op}-{c}"));
            }
        }
    }
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let reports = run_grid(wb, &specs(cfg, &refs)?)?;
    let rows = reports
        .iter()
        .map(|r| {
            let (op, count) = r.scenario.split_once('-').unwrap_or((&r.scenario, ""));
            let gt = r.attribution.ground_truth.as_ref();
            let s = &r.summary;
            vec![
                exhibit(SuiteId::Structural, &r.scenario),
                op.to_string(),
                count.to_string(),
                opt6(s.ours_reused_mean),
                opt6(s.min_reused_margin),
                opt6(s.max_new_margin),
                s.matched.to_string(),
                s.new.to_string(),
                opt6(gt.map(|g| g.accuracy)),
                opt6(gt.and_then(|g| g.argmax_accuracy)),
                opt6(s.pcs_m),
                opt6(s.ics_m),
                opt6(s.reef),
            ]
        })
        .collect();
    Ok(SuiteOutput {
        id: SuiteId::Structural,
        reports: reports.into_iter().map(|r| (r.scenario.clone(), r)).collect(),
        header: header(&[
            "paper_exhibit",
            "op",
            "count",
            "ours_reused_mean",
            "min_reused_margin",
            "max_new_margin",
            "matched",
            "new",
            "accuracy",
            "argmax_accuracy",
            "pcs_m",
            "ics_m",
            "reef",
        ]),
        rows,
    })
}

fn sparsity(wb: &Workbench, cfg: &ScenarioConfig) -> Result<SuiteOutput> {
    let labels: Vec<String> = SPARSITY_LEVELS.iter().map(|p| format!("wanda-{p}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    let reports = run_grid(wb, &specs(cfg, &refs)?)?;
    let rows = reports
        .iter()
        .zip(SPARSITY_LEVELS)
        .map(|(r, p)| {
            let mut row = vec![exhibit(SuiteId::Sparsity, &r.scenario), f6(p as f64 / 100.0)];
            row.extend(method_values(r));
            row
        })
        .collect();
    let mut h = header(&["paper_exhibit", "sparsity"]);
    h.extend(header(&METHOD_COLUMNS));
    Ok(SuiteOutput {
        id: SuiteId::Sparsity,
        reports: reports.into_iter().map(|r| (r.scenario.clone(), r)).collect(),
        header: h,
        rows,
    })
}

/// The ft-short suspect fingerprinted with each probe size.
fn samplesize(wb: &Workbench, cfg: &ScenarioConfig) -> Result<SuiteOutput> {
    let spec = TamperSpec::parse("ft-short", cfg)?;
    let (suspect, record) = super::scenario::apply_tamper(wb, &spec)?;
    let sizes: Vec<usize> = SAMPLE_SIZES.into_iter().filter(|&n| n <= cfg.probe_size).collect();
    let reports = sizes
        .par_iter()
        .map(|&n| {
            let w = wb.with_samples(n)?;
            super::scenario::evaluate(&w, &format!("{}-n{n}", spec.label()), &suspect, record.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = reports
        .iter()
        .zip(&sizes)
        .map(|(r, n)| {
            let s = &r.summary;
            vec![
                exhibit(SuiteId::Samplesize, &r.scenario),
                n.to_string(),
                opt6(s.ours_reused_mean),
                opt6(s.min_reused_margin),
                s.matched.to_string(),
                opt6(s.reef),
            ]
        })
        .collect();
    Ok(SuiteOutput {
        id: SuiteId::Samplesize,
        reports: reports.into_iter().map(|r| (r.scenario.clone(), r)).collect(),
        header: header(&["paper_exhibit", "samples_per_task", "ours", "min_margin", "matched", "reef"]),
        rows,
    })
}

/// Per-layer mean routing weight of every probe task on every victim expert.
fn heatmap(wb: &Workbench) -> Result<SuiteOutput> {
    let moe = &wb.victim.moe;
    let raw = crate::fingerprint::capture_routing(moe, &wb.suite)?;
    let mut rows = Vec::new();
    for (i, task) in raw.probe_ids.iter().enumerate() {
        for l in 0..raw.n_layers {
            for (j, eid) in raw.expert_ids.iter().enumerate() {
                rows.push(vec![
                    exhibit(SuiteId::RoutingHeatmap, ""),
                    task.to_string(),
                    l.to_string(),
                    j.to_string(),
                    eid.to_string(),
                    f6(raw.get(i, j, l)),
                ]);
            }
        }
    }
    // layer-averaged view over every task, including reserves
    let all = mean_routing_mass(moe, &wb.data.probe)?;
    for (t, masses) in all.iter().enumerate() {
        for (j, m) in masses.iter().enumerate() {
            rows.push(vec![
                exhibit(SuiteId::RoutingHeatmap, ""),
                t.to_string(),
                "mean".into(),
                j.to_string(),
                moe.expert_ids[j].to_string(),
                f6(*m),
            ]);
        }
    }
    Ok(SuiteOutput {
        id: SuiteId::RoutingHeatmap,
        reports: Vec::new(),
        header: header(&["paper_exhibit", "probe_task", "layer", "expert_slot", "expert_task", "mass"]),
        rows,
    })
}

/// Output selection for report files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Csv,
    Both,
}

impl OutputFormat {
    pub fn json(&self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }

    pub fn csv(&self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
}

/// Writes one report as `<stem>.json` and/or `<stem>_similarity.csv` plus
/// `<stem>_baselines.csv`.
pub fn write_report(dir: &Path, stem: &str, r: &ScenarioReport, format: OutputFormat) -> Result<()> {
    fs::create_dir_all(dir)?;
    if format.json() {
        fs::write(dir.join(format!("{stem}.json")), r.to_json()? + "\n")?;
    }
    if format.csv() {
        r.similarity.write_csv(fs::File::create(dir.join(format!("{stem}_similarity.csv")))?)?;
        r.write_baselines_csv(fs::File::create(dir.join(format!("{stem}_baselines.csv")))?)?;
    }
    Ok(())
}

/// Writes `<out>/<suite>/` with every report and the aggregate `<suite>.csv`.
/// The aggregate table is always written as CSV.
pub fn write_suite(out: &Path, s: &SuiteOutput, format: OutputFormat) -> Result<()> {
    let dir = out.join(s.id.as_str());
    fs::create_dir_all(&dir)?;
    for (stem, r) in &s.reports {
        write_report(&dir, stem, r, format)?;
    }
    let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", s.id.as_str())))?;
    w.write_record(&s.header)?;
    for row in &s.rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

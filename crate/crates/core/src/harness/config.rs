use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{Method, TapPoint};
use crate::error::{Error, Result};
use crate::fingerprint::AttributionConfig;
use crate::merging::RouterConfig;
use crate::synthdata::DataConfig;
use crate::toymodel::{Arch, FinetuneConfig, WarmupConfig};

/// Which datasets drive router retraining of a structurally tampered suspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuspectRouterData {
    /// Victim tasks plus the suspect's expert tasks; tasks without an expert
    /// get a uniform routing target.
    Union,
    /// Only the tasks the suspect has experts for.
    Experts,
}

/// Flat scenario configuration. Every field has a default and unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub global_seed: u64,

    pub depth: usize,
    pub width: usize,
    pub hidden: usize,
    pub n_classes: usize,
    pub input_dim: usize,

    pub noise_sigma: f64,
    pub center_norm: f64,
    pub class_spread: f64,
    pub train_size: usize,
    pub probe_size: usize,

    pub n_experts: usize,
    pub reserve_tasks: usize,

    pub warmup: bool,
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub batch_size: usize,

    pub lambda: f64,
    pub router_temperature: f64,
    pub router_steps: usize,
    pub router_lr: f64,
    pub suspect_router_data: SuspectRouterData,

    pub tau_margin: f64,
    pub tau_top1: f64,
    pub samples_per_task: usize,
    pub calibration_samples: usize,
    pub ft_short_steps: usize,
    pub ft_long_steps: usize,

    /// Single tamper label, used when `grid` is empty.
    pub tamper: String,
    /// Tamper labels, one report per entry.
    pub grid: Vec<String>,
    pub methods: Vec<String>,
    pub reef_tap: TapPoint,
    pub record_timings: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let arch = Arch::default();
        let warm = WarmupConfig::default();
        let ft = FinetuneConfig::default();
        let router = RouterConfig::default();
        let attr = AttributionConfig::default();
        Self {
            global_seed: 7,
            depth: arch.depth,
            width: arch.width,
            hidden: arch.hidden,
            n_classes: data.n_classes,
            input_dim: data.input_dim,
            noise_sigma: data.noise_sigma,
            center_norm: data.center_norm,
            class_spread: data.class_spread,
            train_size: data.train_size,
            probe_size: data.probe_size,
            n_experts: 5,
            reserve_tasks: 3,
            warmup: warm.enabled,
            warmup_steps: warm.steps,
            warmup_lr: warm.lr,
            finetune_steps: ft.steps,
            finetune_lr: ft.lr,
            batch_size: ft.batch_size,
            lambda: 0.3,
            router_temperature: router.temperature,
            router_steps: router.steps,
            router_lr: router.lr,
            suspect_router_data: SuspectRouterData::Union,
            tau_margin: attr.tau_margin,
            tau_top1: attr.tau_top1,
            samples_per_task: 256,
            calibration_samples: 64,
            ft_short_steps: 200,
            ft_long_steps: 400,
            tamper: "none".into(),
            grid: Vec::new(),
            methods: ["ours", "pcs_m", "pcs_e", "ics_m", "ics_e", "reef"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            reef_tap: TapPoint::Output,
            record_timings: false,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn arch(&self) -> Arch {
        Arch {
            depth: self.depth,
            width: self.width,
            hidden: self.hidden,
            n_classes: self.n_classes,
            input_dim: self.input_dim,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            n_classes: self.n_classes,
            input_dim: self.input_dim,
            noise_sigma: self.noise_sigma,
            train_size: self.train_size,
            probe_size: self.probe_size,
            center_norm: self.center_norm,
            class_spread: self.class_spread,
        }
    }

    pub fn warmup_cfg(&self) -> WarmupConfig {
        WarmupConfig {
            enabled: self.warmup,
            steps: self.warmup_steps,
            lr: self.warmup_lr,
            batch_size: self.batch_size,
        }
    }

    pub fn finetune_cfg(&self, steps: usize) -> FinetuneConfig {
        FinetuneConfig {
            steps,
            lr: self.finetune_lr,
            batch_size: self.batch_size,
        }
    }

    pub fn router_cfg(&self) -> RouterConfig {
        RouterConfig {
            temperature: self.router_temperature,
            steps: self.router_steps,
            lr: self.router_lr,
            batch_size: self.batch_size,
        }
    }

    pub fn attribution_cfg(&self) -> AttributionConfig {
        AttributionConfig {
            tau_margin: self.tau_margin,
            tau_top1: self.tau_top1,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_experts + self.reserve_tasks
    }

    pub fn baseline_methods(&self) -> Vec<Method> {
        self.methods.iter().filter_map(|m| Method::parse(m)).collect()
    }

    /// Tamper labels to run: the grid, or the single `tamper` entry.
    pub fn tamper_specs(&self) -> Result<Vec<TamperSpec>> {
        let labels: Vec<&String> = if self.grid.is_empty() {
            vec![&self.tamper]
        } else {
            self.grid.iter().collect()
        };
        labels.iter().map(|l| TamperSpec::parse(l, self)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.arch().validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        self.data().validate().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if self.n_experts == 0 {
            return bad("n_experts must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("finetune_lr", self.finetune_lr),
            ("router_lr", self.router_lr),
            ("router_temperature", self.router_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.warmup && !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return bad("warmup_lr must be positive".into());
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.tau_margin) || !(0.0..=1.0).contains(&self.tau_top1) {
            return bad("attribution thresholds must lie in [0, 1]".into());
        }
        if self.samples_per_task == 0 || self.samples_per_task > self.probe_size {
            return bad(format!(
                "samples_per_task must lie in 1..={}",
                self.probe_size
            ));
        }
        if self.calibration_samples == 0 || self.calibration_samples > self.probe_size {
            return bad("calibration_samples must lie within the probe pool".into());
        }
        for m in &self.methods {
            if m != "ours" && Method::parse(m).is_none() {
                return bad(format!("unknown method `{m}`"));
            }
        }
        if let TapPoint::PreMlp(l) = self.reef_tap {
            if l >= self.depth {
                return bad(format!("reef tap layer {l} out of range"));
            }
        }
        self.tamper_specs()?;
        Ok(())
    }
}

/// A parsed tamper label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TamperSpec {
    None,
    Replace { count: usize },
    Add { count: usize },
    Delete { count: usize },
    Finetune { steps: usize, label: String },
    PruneMagnitude { percent: u32 },
    PruneWanda { percent: u32 },
    Permute,
}

impl TamperSpec {
    /// Labels: `none`, `replace-K`, `add-K`, `delete-K`, `ft-short`,
    /// `ft-long`, `ft-N`, `magnitude-P`, `wanda-P`, `permute`.
    pub fn parse(label: &str, cfg: &ScenarioConfig) -> Result<TamperSpec> {
        let bad = || Error::InvalidConfig(format!("unknown tamper label `{label}`"));
        let (head, tail) = match label.split_once('-') {
            Some((h, t)) => (h, Some(t)),
            None => (label, None),
        };
        let num = |t: Option<&str>| t.and_then(|s| s.parse::<usize>().ok()).ok_or_else(bad);
        let spec = match head {
            "none" if tail.is_none() => TamperSpec::None,
            "permute" if tail.is_none() => TamperSpec::Permute,
            "replace" => TamperSpec::Replace { count: num(tail)? },
            "add" => TamperSpec::Add { count: num(tail)? },
            "delete" => TamperSpec::Delete { count: num(tail)? },
            "ft" => {
                let steps = match tail {
                    Some("short") => cfg.ft_short_steps,
                    Some("long") => cfg.ft_long_steps,
                    t => num(t)?,
                };
                TamperSpec::Finetune {
                    steps,
                    label: label.to_string(),
                }
            }
            "magnitude" | "wanda" => {
                let p = num(tail)?;
                if p >= 100 {
                    return Err(Error::InvalidConfig(format!("sparsity in `{label}` must be below 100%")));
                }
                if head == "magnitude" {
                    TamperSpec::PruneMagnitude { percent: p as u32 }
                } else {
                    TamperSpec::PruneWanda { percent: p as u32 }
                }
            }
            _ => return Err(bad()),
        };
        match spec {
            TamperSpec::Replace { count } | TamperSpec::Add { count } if count > cfg.reserve_tasks => {
                Err(Error::InvalidConfig(format!(
                    "`{label}` needs {count} reserve tasks, config has {}",
                    cfg.reserve_tasks
                )))
            }
            TamperSpec::Replace { count } if count > cfg.n_experts => Err(Error::InvalidConfig(format!(
                "`{label}` replaces more experts than the victim has"
            ))),
            TamperSpec::Delete { count } if count >= cfg.n_experts => Err(Error::InvalidConfig(format!(
                "`{label}` must keep at least one expert"
            ))),
            s => Ok(s),
        }
    }

    pub fn label(&self) -> String {
        match self {
            TamperSpec::None => "none".into(),
            TamperSpec::Replace { count } => format!("replace-{count}"),
            TamperSpec::Add { count } => format!("add-{count}"),
            TamperSpec::Delete { count } => format!("delete-{count}"),
            TamperSpec::Finetune { label, .. } => label.clone(),
            TamperSpec::PruneMagnitude { percent } => format!("magnitude-{percent}"),
            TamperSpec::PruneWanda { percent } => format!("wanda-{percent}"),
            TamperSpec::Permute => "permute".into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ScenarioConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ScenarioConfig::from_toml("global_seed = 3\nlamda = 0.2\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = ScenarioConfig::from_toml("global_seed = 3\ngrid = [\"add-2\", \"ft-long\"]\n").unwrap();
        assert_eq!(cfg.global_seed, 3);
        assert_eq!(cfg.n_experts, 5);
        let specs = cfg.tamper_specs().unwrap();
        assert_eq!(specs[0], TamperSpec::Add { count: 2 });
        assert_eq!(
            specs[1],
            TamperSpec::Finetune {
                steps: 400,
                label: "ft-long".into()
            }
        );
    }

    #[test]
    fn labels_parse_and_print() {
        let cfg = ScenarioConfig::default();
        for l in ["none", "replace-1", "add-3", "delete-4", "ft-short", "ft-250", "magnitude-30", "wanda-50", "permute"] {
            assert_eq!(TamperSpec::parse(l, &cfg).unwrap().label(), l);
        }
        for l in ["add-4", "delete-5", "wanda-100", "ft", "shuffle", "none-1"] {
            assert!(TamperSpec::parse(l, &cfg).is_err(), "{l}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["samples_per_task = 0", "methods = [\"ours\", \"fancy\"]", "n_experts = 0", "tamper = \"shuffle\""] {
            assert!(matches!(ScenarioConfig::from_toml(text), Err(Error::InvalidConfig(_))), "{text}");
        }
    }
}

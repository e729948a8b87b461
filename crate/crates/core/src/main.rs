use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use routeprint::bundle::checksum_hex;
use routeprint::fingerprint::{attribute, fingerprint_moe, FingerprintExport};
use routeprint::harness::{
    apply_tamper, build_victim, compare_models, generate_data, load_model, run_suite, write_report,
    write_suite, OutputFormat, ScenarioConfig, ScenarioReport, SuiteId, TamperSpec, Workbench,
};
use routeprint::synthdata::{probe_suite, write_csv, Dataset};
use routeprint::tampering::TamperRecord;
use routeprint::{Error, Result};

#[derive(Parser)]
#[command(name = "routeprint", version, about = "Routing fingerprints for merged mixture-of-experts models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario config (TOML, ScenarioConfig field names).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `global_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => OutputFormat::Json,
            Format::Csv => OutputFormat::Csv,
            Format::Both => OutputFormat::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task datasets.
    GenData,
    /// Build and save the victim MoE.
    BuildVictim,
    /// Apply a tamper operation to a victim.
    Tamper {
        /// Victim bundle; built from the config when omitted.
        #[arg(long)]
        victim: Option<PathBuf>,
        /// Tamper label, e.g. `replace-1`, `ft-short`, `wanda-30`, `permute`.
        #[arg(long)]
        op: String,
    },
    /// Capture routing fingerprints of a model.
    Fingerprint {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare a suspect against a victim.
    Compare {
        #[arg(long)]
        victim: PathBuf,
        #[arg(long)]
        suspect: PathBuf,
        /// Tamper record giving the suspect's ground truth.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Re-run attribution on a saved report.
    Attribute {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        tau_margin: Option<f64>,
    },
    /// Run an experiment suite.
    Suite { id: String },
}

fn load_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.global_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn workbench(c: &Common, victim: Option<&Path>) -> Result<Workbench> {
    match victim {
        Some(p) => match load_model(p)? {
            (_, Some(v)) => Workbench::from_victim(v),
            (_, None) => Err(Error::InvalidInput(format!("{} is not a victim bundle", p.display()))),
        },
        None => build_victim(&load_config(c)?),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    rayon::ThreadPoolBuilder::new()
        .num_threads(c.threads.max(1))
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let format = OutputFormat::from(c.format);
    fs::create_dir_all(&c.out)?;
    match &cli.cmd {
        Command::GenData => {
            let cfg = load_config(c)?;
            let data = generate_data(&cfg)?;
            if format.json() {
                write_json(&c.out.join("train.json"), &data.train)?;
                write_json(&c.out.join("probe.json"), &data.probe)?;
            }
            if format.csv() {
                for (name, sets) in [("train.csv", &data.train), ("probe.csv", &data.probe)] {
                    let refs: Vec<&Dataset> = sets.iter().collect();
                    write_csv(&refs, fs::File::create(c.out.join(name))?)?;
                }
            }
            println!("{} tasks written to {}", data.train.len(), c.out.display());
        }
        Command::BuildVictim => {
            let wb = build_victim(&load_config(c)?)?;
            wb.victim.to_bundle()?.save(&c.out.join("victim.json"))?;
            let acc: Vec<String> = wb.victim.expert_accuracy.iter().map(|a| format!("{a:.3}")).collect();
            println!(
                "victim {} experts={} accuracy=[{}]",
                checksum_hex(wb.victim.moe.checksum()),
                wb.victim.moe.n_experts(),
                acc.join(",")
            );
        }
        Command::Tamper { victim, op } => {
            let wb = workbench(c, victim.as_deref())?;
            let spec = TamperSpec::parse(op, wb.config())?;
            let (suspect, record) = apply_tamper(&wb, &spec)?;
            suspect.to_bundle()?.save(&c.out.join("suspect.json"))?;
            write_json(&c.out.join("tamper_record.json"), &record)?;
            println!("suspect {} op={} experts={}", checksum_hex(suspect.checksum()), op, suspect.n_experts());
        }
        Command::Fingerprint { model } => {
            let (moe, victim) = load_model(model)?;
            let cfg = match victim {
                Some(v) => v.config,
                None => load_config(c)?,
            };
            let data = generate_data(&cfg)?;
            let suite = probe_suite(&data.probe[..cfg.n_experts], cfg.samples_per_task)?;
            let (raw, fps) = fingerprint_moe(&moe, &suite)?;
            let export: Vec<FingerprintExport> = fps.iter().map(|f| FingerprintExport::new(f, &raw)).collect();
            write_json(&c.out.join("fingerprints.json"), &export)?;
            println!("{} fingerprints, probe {}", export.len(), checksum_hex(suite.checksum));
        }
        Command::Compare { victim, suspect, record } => {
            let (vmoe, vinfo) = load_model(victim)?;
            let (smoe, _) = load_model(suspect)?;
            let cfg = match vinfo {
                Some(v) => v.config,
                None => load_config(c)?,
            };
            let record: Option<TamperRecord> = match record {
                Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
                None => None,
            };
            let data = generate_data(&cfg)?;
            let suite = probe_suite(&data.probe[..cfg.n_experts], cfg.samples_per_task)?;
            let (_, vfp) = fingerprint_moe(&vmoe, &suite)?;
            let label = record.as_ref().map(|r| r.op.as_str()).unwrap_or("compare");
            let report = compare_models(&cfg, &suite, &vmoe, &vfp, label, &smoe, record.clone())?;
            write_report(&c.out, "compare", &report, format)?;
            print_attribution(&report);
        }
        Command::Attribute { report, tau_margin } => {
            let mut r = ScenarioReport::from_json(&fs::read_to_string(report)?)?;
            let mut acfg = r.config.attribution_cfg();
            if let Some(t) = tau_margin {
                acfg.tau_margin = *t;
            }
            let truth = r.tamper.as_ref().map(|t| t.ground_truth_map.as_slice());
            r.attribution = attribute(&r.similarity, &acfg, truth)?;
            write_json(&c.out.join("attribution.json"), &r.attribution)?;
            print_attribution(&r);
        }
        Command::Suite { id } => {
            let id = SuiteId::parse(id)?;
            let out = run_suite(id, &load_config(c)?)?;
            write_suite(&c.out, &out, format)?;
            println!("suite {} wrote {} reports to {}", id.as_str(), out.reports.len(), c.out.join(id.as_str()).display());
        }
    }
    Ok(())
}

fn print_attribution(r: &ScenarioReport) {
    let a = &r.attribution;
    let mut line = format!("matched={} new={}", a.matched_count(), a.new_count());
    if let Some(gt) = &a.ground_truth {
        line += &format!(" accuracy={:.3}", gt.accuracy);
    }
    println!("{line}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

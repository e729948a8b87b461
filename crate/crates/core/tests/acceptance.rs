//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use routeprint::baselines::Method;
use routeprint::fingerprint::{attribute, center_routing, similarity_matrix, Origin, RoutingTensor, Verdict};
use routeprint::harness::{
    build_victim, run_spec, run_suite_on, ScenarioConfig, ScenarioReport, SuiteId, TamperSpec,
    Workbench, EFFECTIVENESS_GRID,
};
use routeprint::numerics::{
    cosine_sim, dot, jsd2, linear_cka, random_orthogonal, sgd_step, softmax, Matrix, ProbVector, Rng,
};
use routeprint::synthdata::{make_task, DataConfig};
use routeprint::toymodel::{init_pretrained, loss_and_grads, Arch, Sample, WarmupConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn seeded(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        global_seed: seed,
        ..ScenarioConfig::default()
    }
}

fn scenario(wb: &Workbench, label: &str) -> ScenarioReport {
    run_spec(wb, &TamperSpec::parse(label, wb.config()).unwrap()).unwrap().1
}

fn mean_of(r: &ScenarioReport, m: Method) -> f64 {
    let v: Vec<f64> = r.baseline(m).map(|s| s.value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn permutation_exactness() -> Outcome {
    let t0 = Instant::now();
    let wb = build_victim(&seeded(7)).unwrap();
    let r = scenario(&wb, "permute");
    let secs = t0.elapsed().as_secs_f64();
    let diag = (0..5).map(|j| (r.similarity.get(j, j) - 1.0).abs()).fold(0.0, f64::max);
    let reef = r.summary.reef.unwrap();
    let pcs_e = r.baseline(Method::PcsE).map(|s| s.value.abs()).fold(0.0, f64::max);
    ensure!(diag < 1e-9, "ours diagonal off by {diag:e}");
    ensure!((reef - 1.0).abs() < 1e-9, "reef {reef}");
    ensure!(pcs_e < 0.2, "max |PCS-E| {pcs_e}");
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("max|diag-1|={diag:.1e} reef={reef:.12} max|pcs_e|={pcs_e:.4} in {secs:.1}s"))
}

fn self_attribution() -> Outcome {
    let wb = build_victim(&seeded(7)).unwrap();
    let m = similarity_matrix(&wb.victim_fingerprints, &wb.victim_fingerprints).unwrap();
    let mut min_gap = f64::INFINITY;
    for j in 0..5 {
        ensure!((m.get(j, j) - 1.0).abs() < 1e-9, "diagonal {j} = {}", m.get(j, j));
        for k in (0..5).filter(|&k| k != j) {
            min_gap = min_gap.min(m.get(j, j) - m.get(j, k));
        }
    }
    ensure!(min_gap >= 0.3, "smallest diagonal gap {min_gap}");
    let a = attribute(&m, &wb.config().attribution_cfg(), None).unwrap();
    for e in &a.entries {
        ensure!(e.verdict == Verdict::Matched(e.suspect_slot), "slot {} got {:?}", e.suspect_slot, e.verdict);
    }
    Ok(format!("min diagonal gap {min_gap:.4}, 5/5 matched"))
}

fn tamper_attribution() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let t0 = Instant::now();
    let mut lines = Vec::new();
    let result = pool.install(|| -> Outcome {
        for seed in 1..=5 {
            let wb = build_victim(&seeded(seed)).unwrap();
            for label in EFFECTIVENESS_GRID {
                let r = scenario(&wb, label);
                let gt = r.attribution.ground_truth.as_ref().unwrap();
                if let Some(acc) = gt.argmax_accuracy {
                    ensure!(acc == 1.0, "seed {seed} {label}: argmax accuracy {acc}");
                }
                let truth = &r.tamper.as_ref().unwrap().ground_truth_map;
                for (e, o) in r.attribution.entries.iter().zip(truth) {
                    if *o == Origin::New {
                        ensure!(e.verdict == Verdict::New, "seed {seed} {label}: new slot {} matched", e.suspect_slot);
                    }
                }
            }
            lines.push(seed.to_string());
        }
        Ok(String::new())
    });
    result?;
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "took {secs:.1}s");
    Ok(format!("seeds {} x {} scenarios in {secs:.1}s on one thread", lines.join(","), EFFECTIVENESS_GRID.len()))
}

fn margin_separation() -> Outcome {
    let wb = build_victim(&seeded(7)).unwrap();
    let mut parts = Vec::new();
    let mut ok = true;
    for label in ["add-2", "replace-1"] {
        let s = scenario(&wb, label).summary;
        let (lo, hi) = (s.min_reused_margin.unwrap(), s.max_new_margin.unwrap());
        ok &= lo - hi >= 0.15;
        parts.push(format!("{label}: min reused {lo:.4} - max new {hi:.4} = {:.4}", lo - hi));
    }
    let detail = parts.join("; ");
    ensure!(ok, "{detail}");
    Ok(detail)
}

fn pruning_robustness() -> Outcome {
    let wb = build_victim(&seeded(7)).unwrap();
    let out = run_suite_on(SuiteId::Sparsity, &wb).unwrap();
    let ours: Vec<f64> = out.column("ours").unwrap().iter().map(|v| v.parse().unwrap()).collect();
    let detail = format!("ours at 20..50% = {ours:.4?}");
    ensure!(*ours.last().unwrap() >= 0.85, "{detail}");
    ensure!(ours.windows(2).all(|w| w[1] <= w[0] + 0.02), "not non-increasing: {detail}");
    Ok(detail)
}

fn finetune_ordering() -> Outcome {
    let wb = build_victim(&seeded(7)).unwrap();
    let short = scenario(&wb, "ft-short");
    let long = scenario(&wb, "ft-long");
    let (os, ol) = (short.summary.ours_reused_mean.unwrap(), long.summary.ours_reused_mean.unwrap());
    let (ps, pl) = (mean_of(&short, Method::PcsE), mean_of(&long, Method::PcsE));
    let detail = format!("ours {os:.4} -> {ol:.4}, PCS-E {ps:.4} -> {pl:.4}");
    ensure!(ol >= os - 0.05, "{detail}");
    ensure!(os > ps && ol > pl, "{detail}");
    ensure!(pl < ps, "PCS-E not decreasing: {detail}");
    Ok(detail)
}

fn sample_size_stability() -> Outcome {
    let wb = build_victim(&seeded(7)).unwrap();
    let out = run_suite_on(SuiteId::Samplesize, &wb).unwrap();
    let n: Vec<usize> = out.column("samples_per_task").unwrap().iter().map(|v| v.parse().unwrap()).collect();
    let ours: Vec<f64> = out.column("ours").unwrap().iter().map(|v| v.parse().unwrap()).collect();
    let at = |k: usize| ours[n.iter().position(|&x| x == k).unwrap()];
    let range = ours.iter().cloned().fold(f64::MIN, f64::max) - ours.iter().cloned().fold(f64::MAX, f64::min);
    let step = (at(256) - at(128)).abs();
    let detail = format!("range {range:.5}, |256-128| {step:.5} over {n:?}");
    ensure!(range < 0.05 && step <= 0.02, "{detail}");
    Ok(detail)
}

/// CKA through centered Gram matrices, independent of the feature-space form.
fn cka_gram(x: &Matrix, y: &Matrix) -> f64 {
    let n = x.rows();
    let centered_gram = |m: &Matrix| {
        let g: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(m.row(i), m.row(j))).collect()).collect();
        let rm: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let all = rm.iter().sum::<f64>() / n as f64;
        (0..n).map(|i| (0..n).map(|j| g[i][j] - rm[i] - rm[j] + all).collect::<Vec<_>>()).collect::<Vec<_>>()
    };
    let (k, l) = (centered_gram(x), centered_gram(y));
    let tr = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 { (0..n).map(|i| dot(&a[i], &b[i])).sum() };
    tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt()
}

fn metric_oracles() -> Outcome {
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol;
    // softmax
    let u = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
    ensure!(u.as_slice().iter().all(|&p| close(p, 1.0 / 3.0, 1e-12)), "uniform softmax");
    ensure!(softmax(&[50.0, 0.0, 0.0], 1.0).unwrap().as_slice()[0] > 0.999_999, "saturated softmax");
    let p = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
    for (a, want) in p.as_slice().iter().zip([0.09003, 0.24473, 0.66524]) {
        ensure!(close(*a, want, 1e-4), "softmax [1,2,3] gave {a}");
    }
    // cosine
    ensure!(close(cosine_sim(&[1., 2.], &[1., 2.]).unwrap().value, 1.0, 1e-12), "cos(u,u)");
    ensure!(cosine_sim(&[1., 0.], &[0., 1.]).unwrap().value == 0.0, "cos orthogonal");
    ensure!(cosine_sim(&[1., 1.], &[1., -1.]).unwrap().value == 0.0, "cos orthogonal diagonal");
    // JSD
    let pv = |v: Vec<f64>| ProbVector::new(v).unwrap();
    ensure!(jsd2(&pv(vec![0.3, 0.7]), &pv(vec![0.3, 0.7])).unwrap() == 0.0, "jsd(p,p)");
    ensure!(close(jsd2(&pv(vec![1., 0.]), &pv(vec![0., 1.])).unwrap(), 1.0, 1e-12), "jsd disjoint");
    let j = jsd2(&pv(vec![0.5, 0.5]), &pv(vec![1., 0.])).unwrap();
    ensure!(close(j, 0.31128, 1e-4), "jsd half {j}");
    // CKA
    let mut rng = Rng::new(5);
    let gaussian = |rng: &mut Rng, r, c| Matrix::from_vec(r, c, rng.normals(r * c, 1.0)).unwrap();
    let x = gaussian(&mut rng, 64, 8);
    ensure!(close(linear_cka(&x, &x).unwrap().value, 1.0, 1e-12), "cka self");
    let xq = x.matmul(&random_orthogonal(&mut rng, 8)).unwrap();
    ensure!(close(linear_cka(&x, &xq).unwrap().value, 1.0, 1e-9), "cka rotation");
    let mut rng = Rng::new(2024);
    let (a, b) = (gaussian(&mut rng, 256, 16), gaussian(&mut rng, 256, 16));
    let cka = linear_cka(&a, &b).unwrap().value;
    ensure!(cka < 0.2 && close(cka, cka_gram(&a, &b), 1e-9), "independent cka {cka}");
    // SGD
    let one = |v: Vec<f64>| Matrix::from_vec(v.len(), 1, v).unwrap();
    let stepped = sgd_step(&[one(vec![2., -2.])], &[one(vec![1., -1.])], 0.1).unwrap();
    ensure!(stepped[0].as_slice().iter().zip([1.9, -1.9]).all(|(a, b)| close(*a, b, 1e-12)), "sgd step");

    // gradient check
    let cfg = DataConfig { train_size: 64, probe_size: 16, ..DataConfig::default() };
    let (_, train, _) = make_task(2, 5, &cfg).unwrap();
    let model = init_pretrained(&Arch::default(), 11, &WarmupConfig { enabled: false, ..Default::default() }, &[train.clone()]).unwrap();
    let batch: Vec<Sample> = (0..8).map(|k| Sample { task: train.task_id, x: train.input(k), label: train.labels[k] }).collect();
    let (_, g) = loss_and_grads(&model, &batch).unwrap();
    let mut rng = Rng::new(99);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let l = rng.below(model.blocks.len());
        let t = rng.below(6);
        let i = rng.below(model.blocks[l].tensors()[t].len());
        let analytic = g.blocks[l].tensors()[t].as_slice()[i];
        let eval = |d: f64| {
            let mut m = model.clone();
            m.blocks[l].tensors_mut()[t].as_mut_slice()[i] += d;
            loss_and_grads(&m, &batch).unwrap().0
        };
        let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
        let denom = analytic.abs().max(numeric.abs());
        if denom < 1e-7 {
            ensure!((analytic - numeric).abs() < 1e-8, "dead coordinate {analytic} vs {numeric}");
        } else {
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    ensure!(worst < 1e-4, "gradient relative error {worst:e}");

    // routing normalization and centering on random probes
    let wb = build_victim(&seeded(7)).unwrap();
    let moe = &wb.victim.moe;
    let mut rng = Rng::new(1000);
    let (e, layers) = (moe.n_experts(), moe.n_layers());
    let mut values = vec![0.0; 1000 * e * layers];
    for i in 0..1000 {
        let x = rng.normals(moe.arch.input_dim, 3.0);
        for (l, alpha) in moe.route(&x).unwrap().iter().enumerate() {
            ensure!(close(alpha.iter().sum::<f64>(), 1.0, 1e-9), "probe {i} layer {l} sums to {}", alpha.iter().sum::<f64>());
            ensure!(alpha.iter().all(|&a| a >= 0.0), "negative routing weight");
            for (jj, a) in alpha.iter().enumerate() {
                values[(i * e + jj) * layers + l] = *a;
            }
        }
    }
    let raw = RoutingTensor {
        values,
        probe_ids: (0..1000).collect(),
        expert_ids: moe.expert_ids.clone(),
        n_layers: layers,
        samples_used: 1,
        probe_checksum: 0,
        centered: false,
    };
    let c = center_routing(&raw);
    let cc = center_routing(&c);
    for i in 0..1000 {
        for l in 0..layers {
            let s: f64 = (0..e).map(|jj| c.get(i, jj, l)).sum();
            ensure!(s.abs() < 1e-12, "centered sum {s:e}");
        }
    }
    ensure!(c.values.iter().zip(&cc.values).all(|(a, b)| (a - b).abs() < 1e-12), "centering not idempotent");
    Ok(format!("unit examples ok, gradient max rel err {worst:.1e}, 1000 probes normalized and centered"))
}

fn tree(dir: &Path, prefix: &str, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let name = format!("{prefix}/{}", p.file_name().unwrap().to_string_lossy());
        if p.is_dir() {
            tree(&p, &name, out);
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["first", "second"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_routeprint"))
            .args(["suite", "parametric", "--seed", "7", "--format", "both", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        ensure!(status.status.success(), "run failed: {}", String::from_utf8_lossy(&status.stderr));
        let mut files = Vec::new();
        tree(&out, "", &mut files);
        files.sort();
        trees.push(files);
    }
    ensure!(!trees[0].is_empty(), "no files written");
    ensure!(trees[0] == trees[1], "report directories differ");
    Ok(format!("{} files byte-identical across two runs", trees[0].len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("permutation exactness", permutation_exactness),
        ("self-attribution", self_attribution),
        ("tamper attribution accuracy", tamper_attribution),
        ("margin separation", margin_separation),
        ("pruning robustness", pruning_robustness),
        ("fine-tune robustness ordering", finetune_ordering),
        ("sample-size stability", sample_size_stability),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => println!("criterion {}: PASS {name}: {d}", k + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {d}", k + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

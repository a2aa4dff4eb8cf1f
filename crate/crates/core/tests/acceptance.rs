//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset:
//! `cargo test -p fbnet-core --test acceptance -- 1 5`.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use fbnet::cli::{gradcheck_model, GradcheckRun};
use fbnet::data::{synth_generate, SynthConfig};
use fbnet::evaluation::{iou_from_counts, roc_auc, ConfusionCounts, Mask, RocPooling};
use fbnet::maps::{grad_cam, model_cam, ActivationMap, GradTarget};
use fbnet::models::{infer, ModelParams, ModelVariant, POSITIVE};
use fbnet::mpcnn::{beta_from_fc_weights, mpcnn_fuse, mpcnn_step, MPcnnConfig, MPcnnParams, MPcnnState};
use fbnet::nn::{conv2d, ConvParams};
use fbnet::training::{train, TrainConfig};
use fbnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_correctness() -> Verdict {
    let started = Instant::now();
    let defaults = GradcheckRun::default();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    let mut checked = 0;
    for v in ModelVariant::ALL {
        for seed in 0..3 {
            let r = gradcheck_model(v, seed, defaults.precision, defaults.coords_per_group, None);
            checked += r.checked();
            worst = worst.max(r.max_rel_error);
            if !r.passed(1e-3) || r.checked() == 0 {
                failures.push(format!("{v}/{seed}"));
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        failures.is_empty() && secs < 120.0,
        format!(
            "max relative error {worst:.3e} over {checked} coordinates, 12 models, {secs:.1}s (limit 120s){}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn convolution_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (cin, cout) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-4.0f32..4.0));
        let x = t(&[cin, h, w]);
        let k = t(&[cout, cin, 3, 3]);
        let b = t(&[cout]);
        let got = conv2d(&x, &ConvParams::new(k.clone(), b.clone()).unwrap()).unwrap();
        if !got.bit_eq(&common::naive_conv(&x, &k, &b)) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} of 200 random shapes differ from the sliding-window oracle"))
}

fn shared_weights() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut gap = f64::INFINITY;
    for seed in 0..3 {
        let c = common::shared_weight_check(seed);
        worst = c.errors.iter().map(|e| e.1).fold(worst, f64::max);
        gap = gap.min(c.single_site_gap);
    }
    verdict(
        worst <= 1e-10 && gap > 0.0,
        format!("shared cotangent vs sum over per-site copies: max relative error {worst:.2e} (limit 1e-10), 3 seeds"),
    )
}

fn cam_identities() -> Verdict {
    let ds = synth_generate(&SynthConfig {
        n_pos: 100,
        n_neg: 1000,
        seed: 5,
        ..SynthConfig::default()
    });
    let config = TrainConfig {
        iterations: 150,
        batch_size: 32,
        positives_per_batch: 4,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let params = train(ModelParams::init(ModelVariant::InetGap, 5), &ds, None, &config, |_| {})
        .unwrap()
        .params;
    let probe = synth_generate(&SynthConfig {
        n_pos: 25,
        n_neg: 25,
        seed: 4242,
        ..SynthConfig::default()
    });
    let patches: Vec<Tensor> = (0..probe.len()).map(|i| probe.patch(i)).collect();
    let bias = params.fc.bias.data()[POSITIVE] as f64;
    let (mut logit_err, mut grad_err): (f64, f64) = (0.0, 0.0);
    for inf in infer(&params, &patches).unwrap() {
        let c = model_cam(&params, &inf.features, POSITIVE, (10, 10)).unwrap();
        logit_err = logit_err.max((c.mean() + bias - inf.logits[POSITIVE] as f64).abs());
        let g = grad_cam(&params, &inf.features, &inf.logits, POSITIVE, GradTarget::Logit, (10, 10)).unwrap();
        for (gv, cv) in g.map.values().iter().zip(c.values()) {
            grad_err = grad_err.max((*gv as f64 - *cv as f64 / 100.0).abs());
        }
    }
    verdict(
        logit_err < 1e-4 && grad_err < 1e-5,
        format!("50 patches: |mean(CAM)+b-logit| {logit_err:.2e} (limit 1e-4), |Grad-CAM-CAM/100| {grad_err:.2e} (limit 1e-5)"),
    )
}

fn normalized(x: &Tensor<f64>) -> Vec<f64> {
    let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    x.data().iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 }).collect()
}

fn mpcnn_suite() -> Verdict {
    const K: usize = 96;
    const S: usize = 32;
    let started = Instant::now();
    let config = MPcnnConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(96);
    let mut problems: BTreeMap<&str, usize> = BTreeMap::new();
    let mut bump = |what: &'static str, bad: bool| {
        *problems.entry(what).or_default() += bad as usize;
    };
    let stacks = 100;
    for _ in 0..stacks {
        let x = Tensor::<f64>::from_fn(&[K, S, S], |_| rng.gen_range(-1.0..3.0));
        let w: Vec<f64> = (0..K).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta = beta_from_fc_weights(&w, config.beta_scale).unwrap();

        let a = mpcnn_fuse(&x, &beta, &config).unwrap();
        bump("termination", a.iterations == 0 || a.iterations > config.max_iters);

        let params = MPcnnParams::new(&config, beta.clone()).unwrap();
        let s = normalized(&x);
        let mut state = MPcnnState::new(K, S, S, s.clone(), config.t_init).unwrap();
        let mut prev = state.fired.clone();
        let mut grew_wrong = false;
        while state.n < config.max_iters {
            mpcnn_step(&mut state, &s, &params).unwrap();
            grew_wrong |= state.fired.iter().zip(&prev).any(|(now, before)| *before && !*now);
            prev = state.fired.clone();
        }
        bump("monotonicity", grew_wrong);

        let z = mpcnn_fuse(&x, &[0.0; K], &config).unwrap();
        bump("zero beta", !z.constant || z.map.values().iter().any(|&v| v != 0.0));

        let mut perm: Vec<usize> = (0..K).collect();
        for i in (1..K).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let plane = S * S;
        let mut px = Vec::with_capacity(x.len());
        for &k in &perm {
            px.extend_from_slice(&x.data()[k * plane..(k + 1) * plane]);
        }
        let pb: Vec<f64> = perm.iter().map(|&k| beta[k]).collect();
        let p = mpcnn_fuse(&Tensor::new(vec![K, S, S], px).unwrap(), &pb, &config).unwrap();
        let far = a.map.values().iter().zip(p.map.values()).any(|(u, v)| (u - v).abs() > 1e-6);
        bump("permutation", far || a.iterations != p.iterations);

        let again = mpcnn_fuse(&x, &beta, &config).unwrap();
        bump("determinism", !again.map.bit_eq(&a.map) || again != a);
    }
    let secs = started.elapsed().as_secs_f64();
    let failed: Vec<String> = problems.iter().filter(|e| *e.1 > 0).map(|(k, n)| format!("{k} {n}")).collect();
    verdict(
        failed.is_empty() && secs < 180.0,
        format!(
            "{stacks} stacks of {K}x{S}x{S}: termination, monotonicity, zero beta, permutation, determinism; {secs:.1}s (limit 180s){}",
            if failed.is_empty() { String::new() } else { format!("; violations: {}", failed.join(", ")) }
        ),
    )
}

fn published_arithmetic() -> Verdict {
    let c = ConfusionCounts {
        tp: 88,
        fp: 52,
        tn: 0,
        fn_: 17,
    };
    let iou = iou_from_counts(&c).value;
    let four = (iou * 1e4).round() / 1e4;
    let tpr = format!("{:.6}", c.tp_rate());
    verdict(
        four == 0.5605 && format!("{iou:.2}") == "0.56" && tpr == "0.838095",
        format!("IoU(88, 52, 17) = {iou:.6} -> {four} / {iou:.2}; TP rate {tpr}"),
    )
}

fn mann_whitney(values: &[f32], truth: &[bool]) -> f64 {
    let mut s = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (a, &ta) in values.iter().zip(truth) {
        if !ta {
            nn += 1;
            continue;
        }
        np += 1;
        for (b, &tb) in values.iter().zip(truth) {
            if !tb {
                s += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
    }
    s / (np * nn) as f64
}

fn auc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let side = 16;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let v: Vec<f32> = (0..side * side).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let density = rng.gen_range(0.05..0.6);
        let mut t: Vec<bool> = (0..side * side).map(|_| rng.gen_bool(density)).collect();
        t[0] = true;
        t[1] = false;
        let m = ActivationMap::new(side, side, v.clone()).unwrap();
        let mask = Mask::new(side, side, t.clone()).unwrap();
        let auc = roc_auc(&[m], &[mask], RocPooling::Pooled).unwrap().auc;
        worst = worst.max((auc - mann_whitney(&v, &t)).abs());
    }
    let truth: Vec<bool> = (0..64).map(|i| i % 5 == 0).collect();
    let mask = Mask::new(8, 8, truth.clone()).unwrap();
    let perfect = ActivationMap::new(8, 8, truth.iter().map(|&b| b as u8 as f32).collect()).unwrap();
    let flat = ActivationMap::new(8, 8, vec![0.3; 64]).unwrap();
    let p = roc_auc(&[perfect], &[mask.clone()], RocPooling::Pooled).unwrap().auc;
    let c = roc_auc(&[flat], &[mask], RocPooling::Pooled).unwrap().auc;
    verdict(
        worst <= 1.0 / 256.0 && p == 1.0 && c == 0.5,
        format!("100 pairs: max |AUC - rank statistic| {worst:.2e} (limit {:.2e}); perfect {p}; constant {c}", 1.0 / 256.0),
    )
}

fn fbnet_cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fbnet"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`fbnet {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

const VARIANTS: [&str; 4] = ["fbnet", "fbnet_nogap", "inet", "inet_gap"];

fn select(split: &str) -> Vec<&str> {
    vec!["--data", "data", "--split", split, "--val-fraction", "0.1", "--split-seed", "0"]
}

/// Synthesis, fbnet training and its classification and detection reports,
/// all under `dir`. Returns the wall-clock seconds.
fn fbnet_pipeline(dir: &Path) -> Result<f64, String> {
    let started = Instant::now();
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    fbnet_cli(&["synth", "--pos", "500", "--neg", "20000", "--seed", "42", "--out", "data"], dir)?;
    fbnet_cli(&["train", "--data", "data", "--out", "fbnet", "--model", "fbnet", "--iters", "3000"], dir)?;
    let mut a = vec!["eval-classify"];
    a.extend(select("val"));
    a.extend(["--checkpoint", "fbnet/model.ckpt", "--sweep", "true", "--out", "classify"]);
    fbnet_cli(&a, dir)?;
    let mut a = vec!["eval-detect"];
    a.extend(select("val"));
    a.extend(["--checkpoint", "fbnet/model.ckpt", "--method", "mpcnn-cam", "--dump-maps", "8", "--out", "detect-fbnet"]);
    fbnet_cli(&a, dir)?;
    Ok(started.elapsed().as_secs_f64())
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect())
}

fn end_to_end(root: &Path) -> Result<Verdict, String> {
    let dir = root.join("run");
    let secs = fbnet_pipeline(&dir)?;
    let metrics = csv_rows(&dir.join("classify").join("metrics.csv"))?;
    let iou: f64 = metrics[0][3].parse().map_err(|e| format!("metrics.csv: {e}"))?;
    let threshold = &metrics[0][4];

    let started = Instant::now();
    for v in &VARIANTS[1..] {
        fbnet_cli(&["train", "--data", "data", "--out", v, "--model", v, "--iters", "3000"], &dir)?;
    }
    let ckpts: Vec<String> = VARIANTS.iter().map(|v| format!("{v}/model.ckpt")).collect();
    let mut a = vec!["eval-classify"];
    a.extend(select("val"));
    for c in &ckpts {
        a.extend(["--checkpoint", c.as_str()]);
    }
    a.extend(["--sweep", "true", "--out", "classify-all"]);
    fbnet_cli(&a, &dir)?;
    let mut a = vec!["eval-detect"];
    a.extend(select("val"));
    for c in &ckpts {
        a.extend(["--checkpoint", c.as_str()]);
    }
    a.extend(["--dump-maps", "4", "--out", "detect-all"]);
    fbnet_cli(&a, &dir)?;
    let others = started.elapsed().as_secs_f64();

    let summary = fs::read_to_string(dir.join("detect-all").join("auc_summary.csv")).map_err(|e| e.to_string())?;
    println!("    AUC summary on the common true positives of all four models:");
    for line in summary.lines() {
        println!("      {line}");
    }
    let rows = csv_rows(&dir.join("detect-all").join("auc_summary.csv"))?;
    let auc: f64 = rows
        .iter()
        .find(|r| r[0] == "fbnet" && r[1] == "mpcnn-cam")
        .ok_or("no fbnet mpcnn-cam row")?[2]
        .parse()
        .map_err(|e| format!("auc_summary.csv: {e}"))?;
    let samples = &rows[0][3];
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let fast = secs < 900.0;
    Ok(verdict(
        iou >= 0.9 && auc >= 0.9 && fast,
        format!(
            "fbnet val IoU {iou:.4} at swept threshold {threshold} (limit 0.9); mpcnn-cam AUC {auc:.4} over {samples} common \
             true positives (limit 0.9); fbnet pipeline {:.1} min on {cores} core(s) (limit 15 min on 4 cores){}; \
             other variants and summary {:.1} min",
            secs / 60.0,
            if fast { "" } else { ", over budget" },
            others / 60.0
        ),
    ))
}

fn tree(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| format!("{}: {e}", d.display()))? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).map_err(|e| e.to_string())?;
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn reproducibility(root: &Path) -> Result<Verdict, String> {
    let dir = root.join("run");
    let first = root.join("first");
    let parts = ["data", "fbnet", "classify", "detect-fbnet"];
    if !parts.iter().all(|p| dir.join(p).exists()) {
        fbnet_pipeline(&dir)?;
    }
    let _ = fs::remove_dir_all(&first);
    fs::create_dir_all(&first).map_err(|e| e.to_string())?;
    for p in parts {
        fs::rename(dir.join(p), first.join(p)).map_err(|e| e.to_string())?;
    }
    fbnet_pipeline(&dir)?;
    let mut files = 0;
    let mut differing = Vec::new();
    for p in parts {
        let (a, b) = (tree(&first.join(p))?, tree(&dir.join(p))?);
        if a.keys().ne(b.keys()) {
            differing.push(format!("{p}/ file list"));
        }
        for (name, bytes) in &a {
            files += 1;
            if b.get(name) != Some(bytes) {
                differing.push(format!("{p}/{}", name.display()));
            }
        }
    }
    let maps = tree(&first.join("detect-fbnet").join("maps"))?.len();
    Ok(verdict(
        differing.is_empty() && maps > 0,
        format!(
            "rerun of synth, fbnet train, eval-classify and eval-detect: {files} files compared ({maps} map files){}",
            if differing.is_empty() { ", all identical".to_string() } else { format!("; differ: {}", differing.join(", ")) }
        ),
    ))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let root = std::env::var_os("FBNET_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    if run(8) {
        let _ = fs::remove_dir_all(&root);
    }
    fs::create_dir_all(&root).expect("acceptance directory");

    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Verdict>)> = vec![
        (1, "gradient correctness", Box::new(gradient_correctness)),
        (2, "convolution oracle", Box::new(convolution_oracle)),
        (3, "shared-weight accumulation", Box::new(shared_weights)),
        (4, "CAM identities", Box::new(cam_identities)),
        (5, "m-PCNN structure", Box::new(mpcnn_suite)),
        (6, "published IoU arithmetic", Box::new(published_arithmetic)),
        (7, "AUC oracle", Box::new(auc_oracle)),
        (8, "synthetic end-to-end", Box::new(|| end_to_end(&root).unwrap_or_else(|e| verdict(false, e)))),
        (9, "reproducibility", Box::new(|| reproducibility(&root).unwrap_or_else(|e| verdict(false, e)))),
    ];
    let mut failed = 0;
    for (n, name, f) in &criteria {
        if !run(*n) {
            continue;
        }
        let v = f();
        println!("criterion {n} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += !v.pass as usize;
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

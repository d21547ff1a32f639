//! The three CLI verbs: gen-data, train, report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use posemap_core::eval::{
    evaluate_bundle, export_heatmap_pair, feature_gap_stats, FeatureGapReport, MetricReport,
    ReportMeta,
};
use posemap_core::geometry::CameraIntrinsics;
use posemap_core::model::{
    init_model, read_checkpoint, write_checkpoint, ArchSpec, ModelBundle,
};
use posemap_core::scene::{
    build_datasets, read_triplet, write_triplet, DatasetTriplet, DomainParams, SceneConfig,
};
use posemap_core::training::{
    joint_loss_graph, train_regime, EpochLog, Regime, TrainConfig,
};
use posemap_core::{autodiff, seeds};

use crate::config::{ReportMode, RunConfig};
use crate::CliError;

// ---------------------------------------------------------------------------
// shared plumbing

pub fn camera(cfg: &RunConfig) -> Result<CameraIntrinsics, CliError> {
    CameraIntrinsics::new(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height)
        .map_err(|e| CliError::Validation(format!("camera intrinsics: {e}")))
}

fn domain_params(cfg: &RunConfig) -> DomainParams {
    DomainParams {
        blur_sigma: (cfg.blur_min, cfg.blur_max),
        gamma: (cfg.gamma_min, cfg.gamma_max),
        vignette: cfg.vignette,
        noise_sigma: cfg.noise_sigma,
        dropout_prob: cfg.dropout,
        ..DomainParams::default()
    }
}

pub fn scene_config(
    cfg: &RunConfig,
    n_synth: usize,
    n_real: usize,
    master_seed: u64,
) -> Result<SceneConfig, CliError> {
    Ok(SceneConfig {
        camera: camera(cfg)?,
        half_extents: Vector3::new(cfg.hx, cfg.hy, cfg.hz),
        n_synth,
        n_real,
        head_mode: cfg.head_mode,
        depth_range: (cfg.depth_min, cfg.depth_max),
        domain: domain_params(cfg),
        master_seed,
    })
}

pub fn train_config(cfg: &RunConfig, seed: u64, regime: Regime, gamma: f64) -> TrainConfig {
    TrainConfig {
        beta: cfg.beta,
        gamma,
        learning_rate: cfg.learning_rate,
        pretrain_epochs: cfg.pretrain_epochs,
        joint_epochs: cfg.joint_epochs,
        batch_synth: cfg.batch_synth,
        batch_real: cfg.batch_real,
        feature_dim: cfg.feature_dim,
        seed,
        head_mode: cfg.head_mode,
        regime,
    }
}

fn arch(cfg: &RunConfig) -> Result<ArchSpec, CliError> {
    ArchSpec::new(cfg.width, cfg.height, cfg.feature_dim, cfg.head_mode)
        .map_err(|e| CliError::Validation(format!("architecture: {e}")))
}

fn z_ref(cfg: &RunConfig) -> f64 {
    0.5 * (cfg.depth_min + cfg.depth_max)
}

fn train_dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("train.smds")
}

fn test_dataset_path(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("test.smds")
}

fn load_triplet(path: &Path) -> Result<DatasetTriplet, CliError> {
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "dataset file {} not found; run gen-data first",
            path.display()
        )));
    }
    Ok(read_triplet(path)?)
}

fn check_dataset_compat(cfg: &RunConfig, t: &DatasetTriplet, what: &str) -> Result<(), CliError> {
    if t.camera.width != cfg.width || t.camera.height != cfg.height {
        return Err(CliError::Validation(format!(
            "{what}: dataset image size {}x{} does not match configured {}x{}",
            t.camera.width, t.camera.height, cfg.width, cfg.height
        )));
    }
    if t.head_mode != cfg.head_mode {
        return Err(CliError::Validation(format!(
            "{what}: dataset head mode {:?} does not match configured {:?}",
            t.head_mode, cfg.head_mode
        )));
    }
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write the run manifest: the fully resolved config (which re-parses to
/// an identical RunConfig) plus informational `manifest.` entries.
fn write_manifest(
    cfg: &RunConfig,
    name: &str,
    extra: &[(String, String)],
) -> Result<PathBuf, CliError> {
    let mut text = cfg.to_config_string();
    for (k, v) in extra {
        let _ = writeln!(text, "manifest.{k}={v}");
    }
    let path = cfg.out.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

fn ensure_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,l_hs,l_hr,l_g,total,wall_seconds\n");
    for row in logs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            row.epoch, row.l_hs, row.l_hr, row.l_g, row.total, row.wall_seconds
        );
    }
    out
}

// ---------------------------------------------------------------------------
// gen-data

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(cfg)?;
    let train = build_datasets(&scene_config(
        cfg,
        cfg.n_synth,
        cfg.n_real,
        seeds::substream(cfg.seed, "dataset.train", 0),
    )?)?;
    let test = build_datasets(&scene_config(
        cfg,
        cfg.n_synth_test,
        cfg.n_real_test,
        seeds::substream(cfg.seed, "dataset.test", 0),
    )?)?;
    let train_path = cfg.out.join("train.smds");
    let test_path = cfg.out.join("test.smds");
    write_triplet(&train_path, &train)?;
    write_triplet(&test_path, &test)?;
    let extra = vec![
        ("command".to_string(), "gen-data".to_string()),
        ("hash.train.smds".to_string(), sha256_hex(&train_path)?),
        ("hash.test.smds".to_string(), sha256_hex(&test_path)?),
    ];
    write_manifest(cfg, "manifest_gen.txt", &extra)?;
    println!(
        "gen-data: wrote {} (synth {}, real {}, paired {}) and {} (synth {}, real {}, paired {})",
        train_path.display(),
        train.synth.len(),
        train.real.len(),
        train.paired_synth.len(),
        test_path.display(),
        test.synth.len(),
        test.real.len(),
        test.paired_synth.len(),
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let train_path = train_dataset_path(cfg);
    let triplet = load_triplet(&train_path)?;
    check_dataset_compat(cfg, &triplet, "train")?;
    let tc = train_config(cfg, cfg.seed, cfg.regime, cfg.train_gamma);
    let (bundle, logs) = train_regime(&triplet, &tc)
        .map_err(|e| CliError::Runtime(format!("training failed: {e}")))?;
    ensure_out(cfg)?;
    let ckpt_path = cfg.out.join("checkpoint.smpc");
    write_checkpoint(&ckpt_path, &bundle)?;
    fs::write(cfg.out.join("epochs.csv"), epoch_csv(&logs))?;
    let extra = vec![
        ("command".to_string(), "train".to_string()),
        ("hash.train.smds".to_string(), sha256_hex(&train_path)?),
        ("hash.checkpoint.smpc".to_string(), sha256_hex(&ckpt_path)?),
        ("arch".to_string(), bundle.arch.descriptor()),
    ];
    write_manifest(cfg, "manifest_train.txt", &extra)?;
    let last = logs.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!(
        "train: regime {} finished {} epochs (final total loss {last:.6}); checkpoint at {}",
        cfg.regime.name(),
        logs.len(),
        ckpt_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    ensure_out(cfg)?;
    match cfg.report_mode {
        ReportMode::Eval => report_eval(cfg),
        ReportMode::AblateReal => report_ablate_real(cfg),
        ReportMode::AblateGamma => report_ablate_gamma(cfg),
        ReportMode::AnalyzeFeatures => report_analyze_features(cfg),
        ReportMode::Gradcheck => report_gradcheck(cfg),
        ReportMode::Bench => report_bench(cfg),
    }?;
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("checkpoint.smpc"))
}

fn load_bundle(cfg: &RunConfig) -> Result<ModelBundle, CliError> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "checkpoint {} not found; run train first or set report.checkpoint",
            path.display()
        )));
    }
    let mut bundle = read_checkpoint(&path, arch(cfg)?)?;
    bundle.use_mapper = cfg.regime == Regime::Ours;
    Ok(bundle)
}

fn metric_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("regime,n_real,seed,metric,value\n");
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

fn eval_on(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    test: &[posemap_core::scene::Sample],
    triplet: &DatasetTriplet,
    regime_tag: String,
    n_real_used: usize,
    seed: u64,
) -> Result<MetricReport, CliError> {
    let meta = ReportMeta {
        regime: regime_tag,
        n_real_used,
        seed,
    };
    Ok(evaluate_bundle(
        bundle,
        test,
        &triplet.camera,
        &triplet.object,
        z_ref(cfg),
        &cfg.thresholds(),
        &meta,
    )?)
}

fn report_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let test = load_triplet(&test_dataset_path(cfg))?;
    check_dataset_compat(cfg, &test, "report eval")?;
    let bundle = load_bundle(cfg)?;
    let regime = cfg.regime.name().to_string();
    let real = eval_on(cfg, &bundle, &test.real, &test, regime.clone(), cfg.n_real, cfg.seed)?;
    let synth = eval_on(
        cfg,
        &bundle,
        &test.synth,
        &test,
        format!("{regime}+synth_test"),
        cfg.n_real,
        cfg.seed,
    )?;
    fs::write(cfg.out.join("metrics.csv"), metric_csv(&[real.clone()]))?;
    fs::write(cfg.out.join("metrics_synth.csv"), metric_csv(&[synth.clone()]))?;
    if !real.success_curve.is_empty() {
        fs::write(cfg.out.join("curve.csv"), real.curve_csv())?;
    }
    let extra = vec![
        ("command".to_string(), "report.eval".to_string()),
        (
            "hash.checkpoint.smpc".to_string(),
            sha256_hex(&checkpoint_path(cfg))?,
        ),
        (
            "hash.test.smds".to_string(),
            sha256_hex(&test_dataset_path(cfg))?,
        ),
    ];
    write_manifest(cfg, "manifest_report_eval.txt", &extra)?;
    println!(
        "report eval: real test reproj {:.4} px (proj2d {:.3}, pose6d {:.3}, 5cm5deg {:.3}, pnp failures {}); synth test reproj {:.4} px",
        real.mean_corner_reproj_px,
        real.proj2d_rate,
        real.pose6d_rate,
        real.cm_deg_rate,
        real.n_pnp_failures,
        synth.mean_corner_reproj_px
    );
    Ok(())
}

/// Truncate the real/paired streams of a training triplet to its first n
/// entries (the real-image-count ablation).
fn subset_real(t: &DatasetTriplet, n: usize) -> DatasetTriplet {
    DatasetTriplet {
        synth: t.synth.clone(),
        real: t.real[..n].to_vec(),
        paired_synth: t.paired_synth[..n].to_vec(),
        camera: t.camera,
        object: t.object.clone(),
        head_mode: t.head_mode,
    }
}

fn report_ablate_real(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.sweep_real.is_empty() || cfg.report_seeds.is_empty() {
        return Err(CliError::Validation("empty ablation sweep".into()));
    }
    let train = load_triplet(&train_dataset_path(cfg))?;
    let test = load_triplet(&test_dataset_path(cfg))?;
    check_dataset_compat(cfg, &train, "ablate_real")?;
    for &n in &cfg.sweep_real {
        if n == 0 || n > train.real.len() {
            return Err(CliError::Validation(format!(
                "sweep point {n} outside the available {} real samples",
                train.real.len()
            )));
        }
    }
    let mut reports = Vec::new();
    for &n in &cfg.sweep_real {
        let sub = subset_real(&train, n);
        for &seed in &cfg.report_seeds {
            for regime in [Regime::Ours, Regime::RealOnly] {
                let tc = train_config(cfg, seed, regime, cfg.train_gamma);
                let (bundle, _) = train_regime(&sub, &tc)
                    .map_err(|e| CliError::Runtime(format!("ablation training failed: {e}")))?;
                let r = eval_on(cfg, &bundle, &test.real, &test, regime.name().to_string(), n, seed)?;
                println!(
                    "ablate_real: regime {} n {} seed {} -> reproj {:.4} px, proj2d {:.3}",
                    regime.name(),
                    n,
                    seed,
                    r.mean_corner_reproj_px,
                    r.proj2d_rate
                );
                reports.push(r);
            }
        }
    }
    fs::write(cfg.out.join("ablate_real.csv"), metric_csv(&reports))?;
    write_manifest(
        cfg,
        "manifest_report_ablate_real.txt",
        &[("command".to_string(), "report.ablate_real".to_string())],
    )?;
    Ok(())
}

fn gap_rows(tag: &str, seed: u64, n_real: usize, gap: &FeatureGapReport) -> Vec<String> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, value: f64| {
        rows.push(format!("{tag},{n_real},{seed},{metric},{value}"));
    };
    push("mu_before", gap.mu_before);
    push("sigma_before", gap.sigma_before);
    push("mu_after", gap.mu_after);
    push("sigma_after", gap.sigma_after);
    push("gap_reduction", gap.mu_before - gap.mu_after);
    rows
}

fn test_pairs(test: &DatasetTriplet) -> (Vec<&posemap_core::scene::Sample>, Vec<&posemap_core::scene::Sample>) {
    (
        test.real.iter().collect(),
        test.paired_synth.iter().collect(),
    )
}

fn report_ablate_gamma(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.sweep_gamma.is_empty() || cfg.report_seeds.is_empty() {
        return Err(CliError::Validation("empty gamma sweep".into()));
    }
    let train = load_triplet(&train_dataset_path(cfg))?;
    let test = load_triplet(&test_dataset_path(cfg))?;
    check_dataset_compat(cfg, &train, "ablate_gamma")?;
    let mut rows = vec!["regime,n_real,seed,metric,value".to_string()];
    for &gamma in &cfg.sweep_gamma {
        for &seed in &cfg.report_seeds {
            let tc = train_config(cfg, seed, Regime::Ours, gamma);
            let (bundle, _) = train_regime(&train, &tc)
                .map_err(|e| CliError::Runtime(format!("gamma ablation training failed: {e}")))?;
            let (reals, paireds) = test_pairs(&test);
            let gap = feature_gap_stats(&bundle, &reals, &paireds)?;
            let tag = format!("ours_gamma={gamma}");
            rows.extend(gap_rows(&tag, seed, train.real.len(), &gap));
            let r = eval_on(cfg, &bundle, &test.real, &test, tag.clone(), train.real.len(), seed)?;
            rows.push(format!(
                "{tag},{},{seed},mean_corner_reproj_px,{}",
                train.real.len(),
                r.mean_corner_reproj_px
            ));
            println!(
                "ablate_gamma: gamma {gamma} seed {seed} -> mu_before {:.4}, mu_after {:.4}, reproj {:.4} px",
                gap.mu_before, gap.mu_after, r.mean_corner_reproj_px
            );
        }
    }
    fs::write(cfg.out.join("ablate_gamma.csv"), rows.join("\n") + "\n")?;
    write_manifest(
        cfg,
        "manifest_report_ablate_gamma.txt",
        &[("command".to_string(), "report.ablate_gamma".to_string())],
    )?;
    Ok(())
}

fn report_analyze_features(cfg: &RunConfig) -> Result<(), CliError> {
    let test = load_triplet(&test_dataset_path(cfg))?;
    check_dataset_compat(cfg, &test, "analyze_features")?;
    if test.real.is_empty() {
        return Err(CliError::Validation("test set has no real/paired samples".into()));
    }
    let bundle = load_bundle(cfg)?;
    let (reals, paireds) = test_pairs(&test);
    let gap = feature_gap_stats(&bundle, &reals, &paireds)?;
    let mut rows = vec!["regime,n_real,seed,metric,value".to_string()];
    rows.extend(gap_rows(cfg.regime.name(), cfg.seed, cfg.n_real, &gap));
    fs::write(cfg.out.join("features.csv"), rows.join("\n") + "\n")?;
    // aggregate per-coefficient means, plus the first k individual pairs,
    // each before/after pair sharing the before-range normalization
    export_heatmap_pair(
        &gap.mean_before(),
        &gap.mean_after(),
        &cfg.out.join("heatmap_mean_before.pgm"),
        &cfg.out.join("heatmap_mean_after.pgm"),
    )?;
    for i in 0..cfg.heatmap_pairs.min(gap.before_pairs.len()) {
        export_heatmap_pair(
            &gap.before_pairs[i],
            &gap.after_pairs[i],
            &cfg.out.join(format!("heatmap_before_{i}.pgm")),
            &cfg.out.join(format!("heatmap_after_{i}.pgm")),
        )?;
    }
    write_manifest(
        cfg,
        "manifest_report_analyze_features.txt",
        &[
            ("command".to_string(), "report.analyze_features".to_string()),
            (
                "hash.checkpoint.smpc".to_string(),
                sha256_hex(&checkpoint_path(cfg))?,
            ),
        ],
    )?;
    println!(
        "analyze_features: {} pairs, mu_before {:.4} sigma_before {:.4} mu_after {:.4} sigma_after {:.4}",
        gap.before_pairs.len(),
        gap.mu_before,
        gap.sigma_before,
        gap.mu_after,
        gap.sigma_after
    );
    Ok(())
}

/// Micro-batch finite-difference check of the full joint objective.
pub fn run_gradcheck(seed: u64) -> Result<(f64, usize), CliError> {
    let micro = RunConfig {
        width: 8,
        height: 8,
        fx: 15.0,
        fy: 15.0,
        cx: 4.0,
        cy: 4.0,
        feature_dim: 16,
        ..RunConfig::default()
    };
    let t = build_datasets(&scene_config(
        &micro,
        2,
        2,
        seeds::substream(seed, "gradcheck.data", 0),
    )?)?;
    let a = ArchSpec::new(8, 8, 16, micro.head_mode).map_err(CliError::from)?;
    let bundle = init_model(seed, a);
    let (graph, root) = joint_loss_graph(&bundle.arch, 2, 2)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut b = bundle.bindings();
    let images = |samples: &[posemap_core::scene::Sample]| {
        posemap_core::model::images_to_tensor(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())
    };
    let targets = |samples: &[posemap_core::scene::Sample]| {
        let dim = samples[0].target.len();
        autodiff::Tensor::new(
            vec![samples.len(), dim],
            samples.iter().flat_map(|s| s.target.clone()).collect(),
        )
        .expect("target tensor")
    };
    b.set("xs", images(&t.synth));
    b.set("ys", targets(&t.synth));
    b.set("xr", images(&t.real));
    b.set("yr", targets(&t.real));
    b.set("xm", images(&t.paired_synth));
    b.set("const.inv_bs", autodiff::Tensor::scalar(0.5));
    b.set("const.inv_br", autodiff::Tensor::scalar(0.5));
    b.set("const.beta", autodiff::Tensor::scalar(1.0));
    b.set("const.gamma", autodiff::Tensor::scalar(0.2));
    let report = autodiff::finite_diff_check(&graph, &b, root, &[], 1e-5)?;
    Ok((report.max_rel_error, report.coords_checked))
}

fn report_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let (max_rel, coords) = run_gradcheck(cfg.seed)?;
    println!("gradcheck: {coords} coordinates checked, max relative error {max_rel:.3e}");
    fs::write(
        cfg.out.join("gradcheck.csv"),
        format!("metric,value\nmax_rel_error,{max_rel}\ncoords_checked,{coords}\n"),
    )?;
    if max_rel >= 1e-3 {
        return Err(CliError::Runtime(format!(
            "gradcheck failed: max relative error {max_rel:.3e} >= 1e-3"
        )));
    }
    Ok(())
}

fn report_bench(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.bench_frames == 0 {
        return Err(CliError::Validation("bench_frames must be positive".into()));
    }
    let test = load_triplet(&test_dataset_path(cfg))?;
    check_dataset_compat(cfg, &test, "bench")?;
    if test.real.is_empty() {
        return Err(CliError::Validation("bench needs real test frames".into()));
    }
    let ckpt = checkpoint_path(cfg);
    let bundle = if ckpt.exists() {
        load_bundle(cfg)?
    } else {
        init_model(cfg.seed, arch(cfg)?)
    };
    let zr = z_ref(cfg);
    let frame = |i: usize| &test.real[i % test.real.len()];
    for i in 0..cfg.bench_warmup {
        let s = frame(i);
        let _ = bundle.predict_pose(&s.image, s.domain, &test.camera, test.object.corners(), zr);
    }
    let before = bundle.counters.snapshot();
    let mut times_ms = Vec::with_capacity(cfg.bench_frames);
    for i in 0..cfg.bench_frames {
        let s = frame(i);
        let start = Instant::now();
        let _ = bundle.predict_pose(&s.image, s.domain, &test.camera, test.object.corners(), zr);
        times_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let after = bundle.counters.snapshot();
    let n = cfg.bench_frames as u64;
    let composed_ok = after.f_calls - before.f_calls == n
        && after.h_calls - before.h_calls == n
        && after.pnp_calls - before.pnp_calls == n
        && (after.g_calls - before.g_calls == if bundle.use_mapper { n } else { 0 });
    if !composed_ok {
        return Err(CliError::Runtime(
            "bench: instrumentation does not show a single-pass composition".into(),
        ));
    }
    let mean = times_ms.iter().sum::<f64>() / times_ms.len() as f64;
    let min = times_ms.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "bench: {} frames, mean {:.3} ms/frame, min {:.3} ms/frame (single-pass f/g/h/pnp verified)",
        cfg.bench_frames, mean, min
    );
    fs::write(
        cfg.out.join("bench.csv"),
        format!(
            "metric,value\nmean_ms,{mean}\nmin_ms,{min}\nframes,{}\n",
            cfg.bench_frames
        ),
    )?;
    Ok(())
}

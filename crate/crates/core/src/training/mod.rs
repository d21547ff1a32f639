//! The three losses, their weighted combination, synthetic-only
//! pretraining, joint training, and the baseline regimes.

use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{adam_step, AdamHyper, DiffError, Graph, NodeId, Tensor};
use crate::model::{append_f, append_g, append_h, images_to_tensor, init_model, ArchSpec, ModelBundle, ModelError};
use crate::scene::{DatasetTriplet, HeadMode, Sample};
use crate::seeds;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("autodiff error: {0}")]
    Diff(#[from] DiffError),
    #[error("misaligned real/paired batch: {0}")]
    MisalignedPairs(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

/// Training regime selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Synthetic pretraining followed by joint training of f, g, h.
    Ours,
    /// Synthetic pose loss only.
    SyntheticOnly,
    /// Real pose loss only, no mapper.
    RealOnly,
    /// Synthetic plus real pose loss, no mapper.
    MixedNoMapping,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Ours => "ours",
            Regime::SyntheticOnly => "synthetic_only",
            Regime::RealOnly => "real_only",
            Regime::MixedNoMapping => "mixed_no_mapping",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ours" => Some(Regime::Ours),
            "synthetic_only" => Some(Regime::SyntheticOnly),
            "real_only" => Some(Regime::RealOnly),
            "mixed_no_mapping" => Some(Regime::MixedNoMapping),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_synth: usize,
    pub batch_real: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub head_mode: HeadMode,
    pub regime: Regime,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.2,
            learning_rate: 1e-3,
            pretrain_epochs: 5,
            joint_epochs: 30,
            batch_synth: 32,
            batch_real: 8,
            feature_dim: 128,
            seed: 0,
            head_mode: HeadMode::Corners16,
            regime: Regime::Ours,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(TrainError::InvalidConfig("beta and gamma must be >= 0".into()));
        }
        if self.batch_synth < 1 || self.batch_real < 1 {
            return Err(TrainError::InvalidConfig("batch sizes must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be > 0".into()));
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            ..AdamHyper::default()
        }
    }

    /// Total optimizer steps for every regime: the same budget whether the
    /// steps are split into pretraining plus joint training or spent on a
    /// single baseline objective.
    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.joint_epochs
    }
}

/// The three loss components and their weighted combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_hs: f64,
    pub l_hr: f64,
    pub l_g: f64,
    pub total: f64,
}

/// One epoch-level log row; losses are means over the epoch's steps, and
/// `total` recombines the component means so the weighted-sum identity
/// holds exactly on every row.
#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_hs: f64,
    pub l_hr: f64,
    pub l_g: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

/// An index-aligned mini-batch: synthetic samples for the synthetic pose
/// loss, real samples for the real pose loss, and those same reals' paired
/// synthetic renders for the mapping loss.
pub struct BatchTriplet<'a> {
    pub synth: Vec<&'a Sample>,
    pub real: Vec<&'a Sample>,
    pub paired: Vec<&'a Sample>,
}

impl<'a> BatchTriplet<'a> {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.real.len() != self.paired.len() {
            return Err(TrainError::MisalignedPairs(format!(
                "{} real vs {} paired samples",
                self.real.len(),
                self.paired.len()
            )));
        }
        for (i, (r, p)) in self.real.iter().zip(&self.paired).enumerate() {
            if r.pose != p.pose {
                return Err(TrainError::MisalignedPairs(format!("pose mismatch at index {i}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// loss graphs

struct PhaseGraph {
    graph: Graph,
    root: NodeId,
    l_hs: Option<NodeId>,
    l_hr: Option<NodeId>,
    l_g: Option<NodeId>,
    /// f, g, h evaluations per step, for instrumentation.
    evals: (u64, u64, u64),
}

/// sum of squared residuals scaled by a bound 1/batch constant ->
/// mean over the batch of the squared target-space error norm.
fn mean_sq(g: &mut Graph, pred: NodeId, target: NodeId, inv: NodeId) -> Result<NodeId, DiffError> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    let s = g.sum(sq);
    g.mul(s, inv)
}

fn image_shape(arch: &ArchSpec, b: usize) -> Vec<usize> {
    vec![b, 1, arch.image_height as usize, arch.image_width as usize]
}

fn build_synth_graph(arch: &ArchSpec, bs: usize) -> Result<PhaseGraph, TrainError> {
    let mut g = Graph::new();
    let xs = g.input("xs", image_shape(arch, bs))?;
    let ys = g.input("ys", vec![bs, arch.out_dim()])?;
    let inv = g.input("const.inv_bs", vec![1])?;
    let feat = append_f(&mut g, xs, arch)?;
    let pred = append_h(&mut g, feat, arch)?;
    let l = mean_sq(&mut g, pred, ys, inv)?;
    Ok(PhaseGraph {
        graph: g,
        root: l,
        l_hs: Some(l),
        l_hr: None,
        l_g: None,
        evals: (1, 0, 1),
    })
}

fn build_real_only_graph(arch: &ArchSpec, br: usize) -> Result<PhaseGraph, TrainError> {
    let mut g = Graph::new();
    let xr = g.input("xr", image_shape(arch, br))?;
    let yr = g.input("yr", vec![br, arch.out_dim()])?;
    let inv = g.input("const.inv_br", vec![1])?;
    let feat = append_f(&mut g, xr, arch)?;
    let pred = append_h(&mut g, feat, arch)?;
    let l = mean_sq(&mut g, pred, yr, inv)?;
    Ok(PhaseGraph {
        graph: g,
        root: l,
        l_hs: None,
        l_hr: Some(l),
        l_g: None,
        evals: (1, 0, 1),
    })
}

fn build_mixed_graph(arch: &ArchSpec, bs: usize, br: usize) -> Result<PhaseGraph, TrainError> {
    let mut g = Graph::new();
    let xs = g.input("xs", image_shape(arch, bs))?;
    let ys = g.input("ys", vec![bs, arch.out_dim()])?;
    let xr = g.input("xr", image_shape(arch, br))?;
    let yr = g.input("yr", vec![br, arch.out_dim()])?;
    let inv_bs = g.input("const.inv_bs", vec![1])?;
    let inv_br = g.input("const.inv_br", vec![1])?;
    let beta = g.input("const.beta", vec![1])?;
    let fs = append_f(&mut g, xs, arch)?;
    let ps = append_h(&mut g, fs, arch)?;
    let l_hs = mean_sq(&mut g, ps, ys, inv_bs)?;
    let fr = append_f(&mut g, xr, arch)?;
    let pr = append_h(&mut g, fr, arch)?;
    let l_hr = mean_sq(&mut g, pr, yr, inv_br)?;
    let weighted = g.mul(beta, l_hr)?;
    let root = g.add(l_hs, weighted)?;
    Ok(PhaseGraph {
        graph: g,
        root,
        l_hs: Some(l_hs),
        l_hr: Some(l_hr),
        l_g: None,
        evals: (2, 0, 2),
    })
}

fn build_joint_graph(arch: &ArchSpec, bs: usize, br: usize) -> Result<PhaseGraph, TrainError> {
    let mut g = Graph::new();
    let xs = g.input("xs", image_shape(arch, bs))?;
    let ys = g.input("ys", vec![bs, arch.out_dim()])?;
    let xr = g.input("xr", image_shape(arch, br))?;
    let yr = g.input("yr", vec![br, arch.out_dim()])?;
    let xm = g.input("xm", image_shape(arch, br))?;
    let inv_bs = g.input("const.inv_bs", vec![1])?;
    let inv_br = g.input("const.inv_br", vec![1])?;
    let beta = g.input("const.beta", vec![1])?;
    let gamma = g.input("const.gamma", vec![1])?;

    // synthetic pose branch: h(f(xs))
    let fs = append_f(&mut g, xs, arch)?;
    let ps = append_h(&mut g, fs, arch)?;
    let l_hs = mean_sq(&mut g, ps, ys, inv_bs)?;
    // real pose branch: h(g(f(xr))); the mapped features are shared with
    // the mapping loss below
    let fr = append_f(&mut g, xr, arch)?;
    let gr = append_g(&mut g, fr, arch)?;
    let pr = append_h(&mut g, gr, arch)?;
    let l_hr = mean_sq(&mut g, pr, yr, inv_br)?;
    // mapping branch: g(f(xr)) vs f(xm); gradients flow into f through
    // both branches (no stop-gradient on the paired synthetic features)
    let fm = append_f(&mut g, xm, arch)?;
    let l_g = mean_sq(&mut g, gr, fm, inv_br)?;

    let wb = g.mul(beta, l_hr)?;
    let wg = g.mul(gamma, l_g)?;
    let wsum = g.add(wb, wg)?;
    let root = g.add(l_hs, wsum)?;
    Ok(PhaseGraph {
        graph: g,
        root,
        l_hs: Some(l_hs),
        l_hr: Some(l_hr),
        l_g: Some(l_g),
        evals: (3, 1, 2),
    })
}

// ---------------------------------------------------------------------------
// standalone loss evaluation (used by tests and reporting)

fn scalar(v: f64) -> Tensor {
    Tensor::scalar(v)
}

fn sample_images<'a>(samples: &[&'a Sample]) -> Vec<&'a crate::scene::Image> {
    samples.iter().map(|s| &s.image).collect()
}

fn targets_tensor(samples: &[&Sample], out_dim: usize) -> Result<Tensor, TrainError> {
    let mut data = Vec::with_capacity(samples.len() * out_dim);
    for s in samples {
        if s.target.len() != out_dim {
            return Err(TrainError::InvalidConfig(format!(
                "sample target dim {} does not match head dim {out_dim}",
                s.target.len()
            )));
        }
        data.extend_from_slice(&s.target);
    }
    Ok(Tensor::new(vec![samples.len(), out_dim], data).unwrap())
}

/// Mean over the batch of the squared error of h(f(x)) on synthetic
/// samples; the mapper g is not applied.
pub fn loss_synth(bundle: &ModelBundle, samples: &[&Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::InvalidConfig("empty synthetic batch".into()));
    }
    let phase = build_synth_graph(&bundle.arch, samples.len())?;
    let mut b = bundle.bindings();
    b.set("xs", images_to_tensor(&sample_images(samples)));
    b.set("ys", targets_tensor(samples, bundle.arch.out_dim())?);
    b.set("const.inv_bs", scalar(1.0 / samples.len() as f64));
    let eval = phase.graph.forward(&b)?;
    Ok(eval.value(phase.root).item())
}

/// Mean over the batch of the squared error of h(g(f(x))) on real samples;
/// the mapper g is applied.
pub fn loss_real(bundle: &ModelBundle, samples: &[&Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::InvalidConfig("empty real batch".into()));
    }
    let arch = &bundle.arch;
    let mut g = Graph::new();
    let xr = g.input("xr", image_shape(arch, samples.len()))?;
    let yr = g.input("yr", vec![samples.len(), arch.out_dim()])?;
    let inv = g.input("const.inv_br", vec![1])?;
    let feat = append_f(&mut g, xr, arch)?;
    let mapped = append_g(&mut g, feat, arch)?;
    let pred = append_h(&mut g, mapped, arch)?;
    let l = mean_sq(&mut g, pred, yr, inv)?;
    let mut b = bundle.bindings();
    b.set("xr", images_to_tensor(&sample_images(samples)));
    b.set("yr", targets_tensor(samples, arch.out_dim())?);
    b.set("const.inv_br", scalar(1.0 / samples.len() as f64));
    let eval = g.forward(&b)?;
    Ok(eval.value(l).item())
}

/// Mean over index-aligned pairs of the squared feature-space distance
/// between the mapped real features g(f(x_r)) and the paired synthetic
/// features f(x_s).
pub fn loss_map(
    bundle: &ModelBundle,
    real: &[&Sample],
    paired: &[&Sample],
) -> Result<f64, TrainError> {
    if real.is_empty() {
        return Err(TrainError::InvalidConfig("empty pair batch".into()));
    }
    if real.len() != paired.len() {
        return Err(TrainError::MisalignedPairs(format!(
            "{} real vs {} paired",
            real.len(),
            paired.len()
        )));
    }
    for (i, (r, p)) in real.iter().zip(paired).enumerate() {
        if r.pose != p.pose {
            return Err(TrainError::MisalignedPairs(format!("pose mismatch at index {i}")));
        }
    }
    let arch = &bundle.arch;
    let mut g = Graph::new();
    let xr = g.input("xr", image_shape(arch, real.len()))?;
    let xm = g.input("xm", image_shape(arch, real.len()))?;
    let inv = g.input("const.inv_br", vec![1])?;
    let fr = append_f(&mut g, xr, arch)?;
    let gr = append_g(&mut g, fr, arch)?;
    let fm = append_f(&mut g, xm, arch)?;
    let l = mean_sq(&mut g, gr, fm, inv)?;
    let mut b = bundle.bindings();
    b.set("xr", images_to_tensor(&sample_images(real)));
    b.set("xm", images_to_tensor(&sample_images(paired)));
    b.set("const.inv_br", scalar(1.0 / real.len() as f64));
    let eval = g.forward(&b)?;
    Ok(eval.value(l).item())
}

/// Evaluate all three components and the weighted total on one batch, with
/// the total computed inside the same graph.
pub fn loss_total(
    bundle: &ModelBundle,
    batch: &BatchTriplet,
    beta: f64,
    gamma: f64,
) -> Result<LossBreakdown, TrainError> {
    batch.validate()?;
    if batch.synth.is_empty() || batch.real.is_empty() {
        return Err(TrainError::InvalidConfig("empty batch component".into()));
    }
    let phase = build_joint_graph(&bundle.arch, batch.synth.len(), batch.real.len())?;
    let mut b = bundle.bindings();
    b.set("xs", images_to_tensor(&sample_images(&batch.synth)));
    b.set("ys", targets_tensor(&batch.synth, bundle.arch.out_dim())?);
    b.set("xr", images_to_tensor(&sample_images(&batch.real)));
    b.set("yr", targets_tensor(&batch.real, bundle.arch.out_dim())?);
    b.set("xm", images_to_tensor(&sample_images(&batch.paired)));
    b.set("const.inv_bs", scalar(1.0 / batch.synth.len() as f64));
    b.set("const.inv_br", scalar(1.0 / batch.real.len() as f64));
    b.set("const.beta", scalar(beta));
    b.set("const.gamma", scalar(gamma));
    let eval = phase.graph.forward(&b)?;
    Ok(LossBreakdown {
        l_hs: eval.value(phase.l_hs.unwrap()).item(),
        l_hr: eval.value(phase.l_hr.unwrap()).item(),
        l_g: eval.value(phase.l_g.unwrap()).item(),
        total: eval.value(phase.root).item(),
    })
}

/// Build the joint loss graph over externally named leaves; exposed so the
/// gradient-check harness can probe the exact training objective.
pub fn joint_loss_graph(
    arch: &ArchSpec,
    batch_synth: usize,
    batch_real: usize,
) -> Result<(Graph, NodeId), TrainError> {
    let phase = build_joint_graph(arch, batch_synth, batch_real)?;
    Ok((phase.graph, phase.root))
}

// ---------------------------------------------------------------------------
// training loops

struct StreamState {
    real_pos: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    bundle: &mut ModelBundle,
    phase: &PhaseGraph,
    triplet: &DatasetTriplet,
    cfg: &TrainConfig,
    phase_tag: &str,
    epochs: usize,
    steps_per_epoch: usize,
    batch_real: usize,
    stream: &mut StreamState,
    logs: &mut Vec<EpochLog>,
) -> Result<(), TrainError> {
    let hyper = cfg.hyper();
    let out_dim = bundle.arch.out_dim();
    let needs_synth = phase.graph.leaf_id("xs").is_some();
    let needs_real = phase.graph.leaf_id("xr").is_some();
    let needs_paired = phase.graph.leaf_id("xm").is_some();
    let n_s = triplet.synth.len();
    let n_r = triplet.real.len();

    for epoch in 0..epochs {
        let start = Instant::now();
        let mut sums = (0.0, 0.0, 0.0);
        let order: Vec<usize> = if needs_synth {
            let mut idx: Vec<usize> = (0..n_s).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut seeds::rng(cfg.seed, phase_tag, epoch as u64));
            idx
        } else {
            Vec::new()
        };

        for step in 0..steps_per_epoch {
            let mut b = bundle.bindings();
            if needs_synth {
                let ids = &order[step * cfg.batch_synth..(step + 1) * cfg.batch_synth];
                let synth: Vec<&Sample> = ids.iter().map(|&i| &triplet.synth[i]).collect();
                b.set("xs", images_to_tensor(&sample_images(&synth)));
                b.set("ys", targets_tensor(&synth, out_dim)?);
                b.set("const.inv_bs", scalar(1.0 / cfg.batch_synth as f64));
            }
            if needs_real {
                let ids: Vec<usize> = (0..batch_real)
                    .map(|j| (stream.real_pos + j) % n_r)
                    .collect();
                stream.real_pos = (stream.real_pos + batch_real) % n_r;
                let real: Vec<&Sample> = ids.iter().map(|&i| &triplet.real[i]).collect();
                b.set("xr", images_to_tensor(&sample_images(&real)));
                b.set("yr", targets_tensor(&real, out_dim)?);
                b.set("const.inv_br", scalar(1.0 / batch_real as f64));
                if needs_paired {
                    let paired: Vec<&Sample> = ids.iter().map(|&i| &triplet.paired_synth[i]).collect();
                    b.set("xm", images_to_tensor(&sample_images(&paired)));
                }
            }
            if phase.graph.leaf_id("const.beta").is_some() {
                b.set("const.beta", scalar(cfg.beta));
            }
            if phase.graph.leaf_id("const.gamma").is_some() {
                b.set("const.gamma", scalar(cfg.gamma));
            }

            let eval = phase.graph.forward(&b)?;
            let total = eval.value(phase.root).item();
            if !total.is_finite() {
                return Err(TrainError::NonFinite {
                    step: epoch * steps_per_epoch + step,
                    detail: format!(
                        "total loss {total} in phase {phase_tag} (epoch {epoch}, step {step})"
                    ),
                });
            }
            sums.0 += phase.l_hs.map_or(0.0, |n| eval.value(n).item());
            sums.1 += phase.l_hr.map_or(0.0, |n| eval.value(n).item());
            sums.2 += phase.l_g.map_or(0.0, |n| eval.value(n).item());

            let grads = phase.graph.backward(&eval, phase.root)?;
            adam_step(&mut bundle.params, &grads, &hyper)?;
            bundle.counters.record(phase.evals.0, phase.evals.1, phase.evals.2, 0);
        }

        let n = steps_per_epoch as f64;
        let (l_hs, l_hr, l_g) = (sums.0 / n, sums.1 / n, sums.2 / n);
        logs.push(EpochLog {
            epoch,
            l_hs,
            l_hr,
            l_g,
            total: l_hs + cfg.beta * l_hr + cfg.gamma * l_g,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

fn steps_per_epoch(n_synth: usize, batch_synth: usize) -> Result<usize, TrainError> {
    let steps = n_synth / batch_synth;
    if steps == 0 {
        return Err(TrainError::InvalidConfig(format!(
            "synthetic set of {n_synth} smaller than batch size {batch_synth}"
        )));
    }
    Ok(steps)
}

fn check_compat(triplet: &DatasetTriplet, cfg: &TrainConfig) -> Result<(), TrainError> {
    cfg.validate()?;
    if triplet.head_mode != cfg.head_mode {
        return Err(TrainError::InvalidConfig(format!(
            "dataset head mode {:?} does not match configured {:?}",
            triplet.head_mode, cfg.head_mode
        )));
    }
    Ok(())
}

fn arch_for(triplet: &DatasetTriplet, cfg: &TrainConfig) -> Result<ArchSpec, TrainError> {
    Ok(ArchSpec::new(
        triplet.camera.width,
        triplet.camera.height,
        cfg.feature_dim,
        cfg.head_mode,
    )?)
}

/// Minimize the synthetic pose loss for `cfg.pretrain_epochs` epochs. The
/// mapper parameters are not part of the graph and stay untouched.
pub fn pretrain_synthetic(
    bundle: &mut ModelBundle,
    triplet: &DatasetTriplet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    check_compat(triplet, cfg)?;
    let spe = steps_per_epoch(triplet.synth.len(), cfg.batch_synth)?;
    let phase = build_synth_graph(&bundle.arch, cfg.batch_synth)?;
    let mut logs = Vec::new();
    let mut stream = StreamState { real_pos: 0 };
    run_phase(
        bundle,
        &phase,
        triplet,
        cfg,
        "shuffle.pretrain",
        cfg.pretrain_epochs,
        spe,
        cfg.batch_real,
        &mut stream,
        &mut logs,
    )?;
    Ok(logs)
}

/// Joint training of f, g, h on the combined objective for
/// `cfg.joint_epochs` epochs. Synthetic samples are drawn without
/// replacement per epoch; real samples cyclically, with their paired
/// synthetic renders serving the mapping loss.
pub fn train_joint(
    bundle: &mut ModelBundle,
    triplet: &DatasetTriplet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>, TrainError> {
    check_compat(triplet, cfg)?;
    if triplet.real.is_empty() {
        return Err(TrainError::InvalidConfig("joint training needs real samples".into()));
    }
    let spe = steps_per_epoch(triplet.synth.len(), cfg.batch_synth)?;
    let phase = build_joint_graph(&bundle.arch, cfg.batch_synth, cfg.batch_real)?;
    let mut logs = Vec::new();
    let mut stream = StreamState { real_pos: 0 };
    run_phase(
        bundle,
        &phase,
        triplet,
        cfg,
        "shuffle.joint",
        cfg.joint_epochs,
        spe,
        cfg.batch_real,
        &mut stream,
        &mut logs,
    )?;
    Ok(logs)
}

/// Train one of the baseline regimes with the same total step budget as
/// the full method.
pub fn train_baseline(
    regime: Regime,
    triplet: &DatasetTriplet,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochLog>), TrainError> {
    check_compat(triplet, cfg)?;
    let arch = arch_for(triplet, cfg)?;
    let mut bundle = init_model(cfg.seed, arch);
    // baselines have no trained mapper; their inference path skips g
    bundle.use_mapper = false;
    let spe = steps_per_epoch(triplet.synth.len(), cfg.batch_synth)?;
    let epochs = cfg.total_epochs();
    let mut logs = Vec::new();
    let mut stream = StreamState { real_pos: 0 };
    match regime {
        Regime::Ours => {
            return Err(TrainError::InvalidConfig(
                "regime 'ours' is not a baseline; use train_regime".into(),
            ));
        }
        Regime::SyntheticOnly => {
            let phase = build_synth_graph(&arch, cfg.batch_synth)?;
            run_phase(
                &mut bundle,
                &phase,
                triplet,
                cfg,
                "shuffle.synth_only",
                epochs,
                spe,
                cfg.batch_real,
                &mut stream,
                &mut logs,
            )?;
        }
        Regime::RealOnly => {
            if triplet.real.is_empty() {
                return Err(TrainError::InvalidConfig("real_only regime needs real samples".into()));
            }
            let br = cfg.batch_synth.min(triplet.real.len());
            let phase = build_real_only_graph(&arch, br)?;
            run_phase(
                &mut bundle,
                &phase,
                triplet,
                cfg,
                "shuffle.real_only",
                epochs,
                spe,
                br,
                &mut stream,
                &mut logs,
            )?;
        }
        Regime::MixedNoMapping => {
            if triplet.real.is_empty() {
                return Err(TrainError::InvalidConfig("mixed regime needs real samples".into()));
            }
            let phase = build_mixed_graph(&arch, cfg.batch_synth, cfg.batch_real)?;
            run_phase(
                &mut bundle,
                &phase,
                triplet,
                cfg,
                "shuffle.mixed",
                epochs,
                spe,
                cfg.batch_real,
                &mut stream,
                &mut logs,
            )?;
        }
    }
    renumber(&mut logs);
    Ok((bundle, logs))
}

/// Train any regime end to end: "ours" pretrains on synthetic data and then
/// trains jointly; the baselines spend the identical step budget on their
/// own objective.
pub fn train_regime(
    triplet: &DatasetTriplet,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, Vec<EpochLog>), TrainError> {
    match cfg.regime {
        Regime::Ours => {
            check_compat(triplet, cfg)?;
            let arch = arch_for(triplet, cfg)?;
            let mut bundle = init_model(cfg.seed, arch);
            let mut logs = pretrain_synthetic(&mut bundle, triplet, cfg)?;
            logs.extend(train_joint(&mut bundle, triplet, cfg)?);
            renumber(&mut logs);
            Ok((bundle, logs))
        }
        other => train_baseline(other, triplet, cfg),
    }
}

fn renumber(logs: &mut [EpochLog]) {
    for (i, row) in logs.iter_mut().enumerate() {
        row.epoch = i;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::scene::{build_datasets, DomainParams, SceneConfig};
    use nalgebra::Vector3;

    fn tiny_triplet(n_s: usize, n_r: usize, seed: u64) -> DatasetTriplet {
        build_datasets(&SceneConfig {
            camera: CameraIntrinsics::new(30.0, 30.0, 8.0, 8.0, 16, 16).unwrap(),
            half_extents: Vector3::new(0.4, 0.25, 0.15),
            n_synth: n_s,
            n_real: n_r,
            head_mode: HeadMode::Corners16,
            depth_range: (2.0, 3.5),
            domain: DomainParams::default(),
            master_seed: seed,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_synth: 4,
            batch_real: 2,
            feature_dim: 16,
            pretrain_epochs: 1,
            joint_epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn bundle_for(triplet: &DatasetTriplet, cfg: &TrainConfig) -> ModelBundle {
        init_model(cfg.seed, arch_for(triplet, cfg).unwrap())
    }

    #[test]
    fn loss_identity_on_fresh_bundle() {
        let t = tiny_triplet(8, 4, 5);
        let cfg = tiny_cfg();
        let bundle = bundle_for(&t, &cfg);
        let batch = BatchTriplet {
            synth: t.synth.iter().take(4).collect(),
            real: t.real.iter().take(2).collect(),
            paired: t.paired_synth.iter().take(2).collect(),
        };
        let lb = loss_total(&bundle, &batch, 1.0, 0.2).unwrap();
        assert!((lb.total - (lb.l_hs + 1.0 * lb.l_hr + 0.2 * lb.l_g)).abs() < 1e-12);
        assert!(lb.l_hs >= 0.0 && lb.l_hr >= 0.0 && lb.l_g >= 0.0);
        // beta = gamma = 0 collapses the total onto the synthetic loss
        let lb0 = loss_total(&bundle, &batch, 0.0, 0.0).unwrap();
        assert_eq!(lb0.total, lb0.l_hs);
    }

    #[test]
    fn identity_mapper_ties_real_and_synth_paths() {
        // with g = identity (fresh init), loss_real equals loss_synth
        // evaluated on the same images and labels
        let t = tiny_triplet(8, 4, 7);
        let cfg = tiny_cfg();
        let bundle = bundle_for(&t, &cfg);
        let reals: Vec<&Sample> = t.real.iter().collect();
        let lr = loss_real(&bundle, &reals).unwrap();
        let ls = loss_synth(&bundle, &reals).unwrap();
        assert!((lr - ls).abs() < 1e-12, "{lr} vs {ls}");
    }

    #[test]
    fn loss_map_zero_for_identical_images_and_identity_g() {
        let t = tiny_triplet(8, 4, 9);
        let cfg = tiny_cfg();
        let bundle = bundle_for(&t, &cfg);
        // pair each paired-synth sample with itself: x_r == x_s exactly
        let paired: Vec<&Sample> = t.paired_synth.iter().collect();
        let l = loss_map(&bundle, &paired, &paired).unwrap();
        assert_eq!(l, 0.0);
        // against the corrupted versions the distance is positive
        let reals: Vec<&Sample> = t.real.iter().collect();
        let l2 = loss_map(&bundle, &reals, &paired).unwrap();
        assert!(l2 > 0.0);
    }

    #[test]
    fn misaligned_pairs_error() {
        let t = tiny_triplet(8, 4, 11);
        let cfg = tiny_cfg();
        let bundle = bundle_for(&t, &cfg);
        let reals: Vec<&Sample> = t.real.iter().collect();
        let mut paired: Vec<&Sample> = t.paired_synth.iter().collect();
        paired.rotate_left(1);
        assert!(matches!(
            loss_map(&bundle, &reals, &paired),
            Err(TrainError::MisalignedPairs(_))
        ));
    }

    #[test]
    fn synth_loss_has_no_mapper_gradient() {
        let t = tiny_triplet(8, 4, 13);
        let cfg = tiny_cfg();
        let bundle = bundle_for(&t, &cfg);
        let phase = build_synth_graph(&bundle.arch, 4).unwrap();
        let mut b = bundle.bindings();
        let synth: Vec<&Sample> = t.synth.iter().take(4).collect();
        b.set("xs", images_to_tensor(&sample_images(&synth)));
        b.set("ys", targets_tensor(&synth, 16).unwrap());
        b.set("const.inv_bs", scalar(0.25));
        let eval = phase.graph.forward(&b).unwrap();
        let grads = phase.graph.backward(&eval, phase.root).unwrap();
        assert!(grads.names().all(|n| !n.starts_with("g.")));
        assert!(grads.get("f.conv1.w").is_some() && grads.get("h.w").is_some());
    }

    #[test]
    fn joint_loss_has_nonzero_mapper_gradient_after_pretraining_drift() {
        let t = tiny_triplet(8, 4, 15);
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 2;
        let mut bundle = bundle_for(&t, &cfg);
        pretrain_synthetic(&mut bundle, &t, &cfg).unwrap();
        let phase = build_joint_graph(&bundle.arch, 4, 2).unwrap();
        let mut b = bundle.bindings();
        let synth: Vec<&Sample> = t.synth.iter().take(4).collect();
        let real: Vec<&Sample> = t.real.iter().take(2).collect();
        let paired: Vec<&Sample> = t.paired_synth.iter().take(2).collect();
        b.set("xs", images_to_tensor(&sample_images(&synth)));
        b.set("ys", targets_tensor(&synth, 16).unwrap());
        b.set("xr", images_to_tensor(&sample_images(&real)));
        b.set("yr", targets_tensor(&real, 16).unwrap());
        b.set("xm", images_to_tensor(&sample_images(&paired)));
        b.set("const.inv_bs", scalar(0.25));
        b.set("const.inv_br", scalar(0.5));
        b.set("const.beta", scalar(1.0));
        b.set("const.gamma", scalar(0.2));
        let eval = phase.graph.forward(&b).unwrap();
        let grads = phase.graph.backward(&eval, phase.root).unwrap();
        let g_fc1 = grads.get("g.block1.fc2.w").unwrap();
        assert!(g_fc1.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pretraining_leaves_mapper_untouched_and_overfits_trivial_set() {
        // one pose repeated: the head can memorize it
        let base = tiny_triplet(1, 0, 17);
        let one = base.synth[0].clone();
        let mut t = base;
        t.synth = vec![one; 8];
        let mut cfg = tiny_cfg();
        cfg.pretrain_epochs = 150;
        cfg.learning_rate = 1e-2;
        let mut bundle = bundle_for(&t, &cfg);
        let g_before: Vec<Tensor> = bundle
            .params
            .iter()
            .filter(|p| p.name.starts_with("g."))
            .map(|p| p.value.clone())
            .collect();
        let logs = pretrain_synthetic(&mut bundle, &t, &cfg).unwrap();
        assert_eq!(logs.len(), 150);
        let g_after: Vec<Tensor> = bundle
            .params
            .iter()
            .filter(|p| p.name.starts_with("g."))
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(g_before, g_after);
        let synth: Vec<&Sample> = t.synth.iter().collect();
        let final_loss = loss_synth(&bundle, &synth).unwrap();
        assert!(final_loss < 1e-3, "loss {final_loss}");
        // pretrain log rows carry only the synthetic component
        for row in &logs {
            assert_eq!(row.l_hr, 0.0);
            assert_eq!(row.l_g, 0.0);
            assert_eq!(row.total, row.l_hs);
        }
    }

    #[test]
    fn zero_weights_reduce_joint_to_synthetic() {
        let t = tiny_triplet(8, 4, 19);
        let mut cfg = tiny_cfg();
        cfg.beta = 0.0;
        cfg.gamma = 0.0;
        cfg.joint_epochs = 2;
        let mut bundle = bundle_for(&t, &cfg);
        let g_before: Vec<Tensor> = bundle
            .params
            .iter()
            .filter(|p| p.name.starts_with("g."))
            .map(|p| p.value.clone())
            .collect();
        train_joint(&mut bundle, &t, &cfg).unwrap();
        let g_after: Vec<Tensor> = bundle
            .params
            .iter()
            .filter(|p| p.name.starts_with("g."))
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(g_before, g_after);
    }

    #[test]
    fn training_is_deterministic() {
        let t = tiny_triplet(8, 4, 21);
        let cfg = tiny_cfg();
        let (b1, l1) = train_regime(&t, &cfg).unwrap();
        let (b2, l2) = train_regime(&t, &cfg).unwrap();
        assert_eq!(b1.params, b2.params);
        assert_eq!(l1.len(), l2.len());
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!((a.l_hs, a.l_hr, a.l_g, a.total), (b.l_hs, b.l_hr, b.l_g, b.total));
        }
    }

    #[test]
    fn baselines_respect_budget_and_instrumentation() {
        let t = tiny_triplet(8, 4, 23);
        let cfg = tiny_cfg();
        // mixed never evaluates g
        let (bundle, logs) = train_baseline(Regime::MixedNoMapping, &t, &cfg).unwrap();
        assert_eq!(bundle.counters.snapshot().g_calls, 0);
        assert_eq!(logs.len(), cfg.total_epochs());
        // real_only with no real data is a configuration error
        let empty = tiny_triplet(8, 0, 23);
        assert!(matches!(
            train_baseline(Regime::RealOnly, &empty, &cfg),
            Err(TrainError::InvalidConfig(_))
        ));
        // ours is rejected by the baseline entry point
        assert!(train_baseline(Regime::Ours, &t, &cfg).is_err());
        // log row count equals the configured epochs for ours as well
        let (ours_bundle, ours_logs) = train_regime(&t, &cfg).unwrap();
        assert_eq!(ours_logs.len(), cfg.total_epochs());
        assert!(ours_bundle.counters.snapshot().g_calls > 0);
    }

    #[test]
    fn epoch_log_identity_holds() {
        let t = tiny_triplet(8, 4, 25);
        let mut cfg = tiny_cfg();
        cfg.joint_epochs = 2;
        let (_, logs) = train_regime(&t, &cfg).unwrap();
        for row in &logs {
            let recombined = row.l_hs + cfg.beta * row.l_hr + cfg.gamma * row.l_g;
            assert!((row.total - recombined).abs() < 1e-12);
        }
    }
}

//! Flat key=value run configuration: UTF-8 lines, `#` comments, dotted
//! keys for namespacing. Unknown keys are errors, except the `manifest.`
//! prefix, which run manifests use for informational entries so a manifest
//! re-parses as a config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use posemap_core::eval::MetricThresholds;
use posemap_core::scene::HeadMode;
use posemap_core::training::Regime;

use crate::CliError;

/// Report sub-command selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    Eval,
    AblateReal,
    AblateGamma,
    AnalyzeFeatures,
    Gradcheck,
    Bench,
}

impl ReportMode {
    pub fn name(self) -> &'static str {
        match self {
            ReportMode::Eval => "eval",
            ReportMode::AblateReal => "ablate_real",
            ReportMode::AblateGamma => "ablate_gamma",
            ReportMode::AnalyzeFeatures => "analyze_features",
            ReportMode::Gradcheck => "gradcheck",
            ReportMode::Bench => "bench",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "eval" => Some(Self::Eval),
            "ablate_real" => Some(Self::AblateReal),
            "ablate_gamma" => Some(Self::AblateGamma),
            "analyze_features" => Some(Self::AnalyzeFeatures),
            "gradcheck" => Some(Self::Gradcheck),
            "bench" => Some(Self::Bench),
            _ => None,
        }
    }
}

/// Fully resolved run configuration; every field echoes back into the
/// config format and re-parses to an identical value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    // dataset geometry and sizes
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub hx: f64,
    pub hy: f64,
    pub hz: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub n_synth: usize,
    pub n_real: usize,
    pub n_synth_test: usize,
    pub n_real_test: usize,
    pub head_mode: HeadMode,
    pub data_dir: PathBuf,
    // corruption pipeline
    pub blur_min: f64,
    pub blur_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub vignette: f64,
    pub noise_sigma: f64,
    pub dropout: f64,
    // training
    pub beta: f64,
    pub train_gamma: f64,
    pub learning_rate: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub batch_synth: usize,
    pub batch_real: usize,
    pub feature_dim: usize,
    pub regime: Regime,
    // metric thresholds
    pub proj_px: f64,
    pub add_frac: f64,
    pub rot_deg: f64,
    pub trans_units: f64,
    // reporting
    pub report_mode: ReportMode,
    pub sweep_real: Vec<usize>,
    pub sweep_gamma: Vec<f64>,
    pub report_seeds: Vec<u64>,
    pub heatmap_pairs: usize,
    pub bench_frames: usize,
    pub bench_warmup: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            width: 64,
            height: 64,
            fx: 120.0,
            fy: 120.0,
            cx: 32.0,
            cy: 32.0,
            hx: 0.4,
            hy: 0.25,
            hz: 0.15,
            depth_min: 2.0,
            depth_max: 3.5,
            n_synth: 20_000,
            n_real: 200,
            n_synth_test: 1000,
            n_real_test: 1000,
            head_mode: HeadMode::Corners16,
            data_dir: PathBuf::from("data"),
            blur_min: 0.5,
            blur_max: 1.5,
            gamma_min: 0.8,
            gamma_max: 1.25,
            vignette: 0.3,
            noise_sigma: 0.03,
            dropout: 0.02,
            beta: 1.0,
            train_gamma: 0.2,
            learning_rate: 1e-3,
            pretrain_epochs: 5,
            joint_epochs: 30,
            batch_synth: 32,
            batch_real: 8,
            feature_dim: 128,
            regime: Regime::Ours,
            proj_px: 2.0,
            add_frac: 0.10,
            rot_deg: 5.0,
            trans_units: 0.05,
            report_mode: ReportMode::Eval,
            sweep_real: vec![25, 50, 100, 200],
            sweep_gamma: vec![0.0, 0.2],
            report_seeds: vec![0, 1, 2],
            heatmap_pairs: 4,
            bench_frames: 100,
            bench_warmup: 10,
            checkpoint: None,
        }
    }
}

fn head_mode_name(m: HeadMode) -> &'static str {
    match m {
        HeadMode::Corners16 => "corners16",
        HeadMode::Keypoint3d24 => "keypoint3d24",
    }
}

fn parse_head_mode(s: &str) -> Option<HeadMode> {
    match s {
        "corners16" => Some(HeadMode::Corners16),
        "keypoint3d24" => Some(HeadMode::Keypoint3d24),
        _ => None,
    }
}

/// Parse raw config text into a key->value map. Duplicate keys within one
/// source are errors; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Validation(format!(
                "config line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(CliError::Validation(format!("config line {}: empty key", lineno + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(CliError::Validation(format!(
                "config line {}: duplicate key {key}",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

struct KeyReader {
    map: BTreeMap<String, String>,
}

impl KeyReader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str, into: &mut T) -> Result<(), CliError> {
        if let Some(v) = self.take(key) {
            *into = v.parse().map_err(|_| bad_value(key, &v))?;
        }
        Ok(())
    }

    fn parse_list<T: std::str::FromStr>(
        &mut self,
        key: &str,
        into: &mut Vec<T>,
    ) -> Result<(), CliError> {
        if let Some(v) = self.take(key) {
            let mut out = Vec::new();
            for part in v.split(',') {
                let part = part.trim();
                if part.is_empty() {
                    continue;
                }
                out.push(part.parse().map_err(|_| bad_value(key, &v))?);
            }
            *into = out;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        let unknown: Vec<&String> = self
            .map
            .keys()
            .filter(|k| !k.starts_with("manifest."))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Validation(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

fn bad_value(key: &str, value: &str) -> CliError {
    CliError::Validation(format!("config key {key}: cannot parse value {value:?}"))
}

impl RunConfig {
    /// Apply one layer of key=value pairs on top of this config. Center
    /// coordinates default to the image center unless given explicitly.
    pub fn apply(&mut self, pairs: BTreeMap<String, String>) -> Result<(), CliError> {
        let explicit_cx = pairs.contains_key("data.cx");
        let explicit_cy = pairs.contains_key("data.cy");
        let explicit_width = pairs.contains_key("data.width");
        let explicit_height = pairs.contains_key("data.height");
        let mut r = KeyReader { map: pairs };

        r.parse("seed", &mut self.seed)?;
        if let Some(v) = r.take("out") {
            self.out = PathBuf::from(v);
        }
        r.parse("data.width", &mut self.width)?;
        r.parse("data.height", &mut self.height)?;
        r.parse("data.fx", &mut self.fx)?;
        r.parse("data.fy", &mut self.fy)?;
        r.parse("data.cx", &mut self.cx)?;
        r.parse("data.cy", &mut self.cy)?;
        if explicit_width && !explicit_cx {
            self.cx = self.width as f64 / 2.0;
        }
        if explicit_height && !explicit_cy {
            self.cy = self.height as f64 / 2.0;
        }
        r.parse("data.hx", &mut self.hx)?;
        r.parse("data.hy", &mut self.hy)?;
        r.parse("data.hz", &mut self.hz)?;
        r.parse("data.depth_min", &mut self.depth_min)?;
        r.parse("data.depth_max", &mut self.depth_max)?;
        r.parse("data.n_synth", &mut self.n_synth)?;
        r.parse("data.n_real", &mut self.n_real)?;
        r.parse("data.n_synth_test", &mut self.n_synth_test)?;
        r.parse("data.n_real_test", &mut self.n_real_test)?;
        if let Some(v) = r.take("data.head_mode") {
            self.head_mode = parse_head_mode(&v).ok_or_else(|| bad_value("data.head_mode", &v))?;
        }
        if let Some(v) = r.take("data.dir") {
            self.data_dir = PathBuf::from(v);
        }
        r.parse("corrupt.blur_min", &mut self.blur_min)?;
        r.parse("corrupt.blur_max", &mut self.blur_max)?;
        r.parse("corrupt.gamma_min", &mut self.gamma_min)?;
        r.parse("corrupt.gamma_max", &mut self.gamma_max)?;
        r.parse("corrupt.vignette", &mut self.vignette)?;
        r.parse("corrupt.noise_sigma", &mut self.noise_sigma)?;
        r.parse("corrupt.dropout", &mut self.dropout)?;
        r.parse("train.beta", &mut self.beta)?;
        r.parse("train.gamma", &mut self.train_gamma)?;
        r.parse("train.lr", &mut self.learning_rate)?;
        r.parse("train.pretrain_epochs", &mut self.pretrain_epochs)?;
        r.parse("train.joint_epochs", &mut self.joint_epochs)?;
        r.parse("train.batch_synth", &mut self.batch_synth)?;
        r.parse("train.batch_real", &mut self.batch_real)?;
        r.parse("train.feature_dim", &mut self.feature_dim)?;
        if let Some(v) = r.take("train.regime") {
            self.regime = Regime::parse(&v).ok_or_else(|| bad_value("train.regime", &v))?;
        }
        r.parse("eval.proj_px", &mut self.proj_px)?;
        r.parse("eval.add_frac", &mut self.add_frac)?;
        r.parse("eval.rot_deg", &mut self.rot_deg)?;
        r.parse("eval.trans_units", &mut self.trans_units)?;
        if let Some(v) = r.take("report.mode") {
            self.report_mode = ReportMode::parse(&v).ok_or_else(|| bad_value("report.mode", &v))?;
        }
        r.parse_list("report.sweep_real", &mut self.sweep_real)?;
        r.parse_list("report.sweep_gamma", &mut self.sweep_gamma)?;
        r.parse_list("report.seeds", &mut self.report_seeds)?;
        r.parse("report.heatmap_pairs", &mut self.heatmap_pairs)?;
        r.parse("report.bench_frames", &mut self.bench_frames)?;
        r.parse("report.bench_warmup", &mut self.bench_warmup)?;
        if let Some(v) = r.take("report.checkpoint") {
            self.checkpoint = Some(PathBuf::from(v));
        }
        r.finish()
    }

    /// Render the fully resolved configuration in the config file format;
    /// parsing the result yields an identical `RunConfig`.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("data.width", self.width.to_string());
        kv("data.height", self.height.to_string());
        kv("data.fx", self.fx.to_string());
        kv("data.fy", self.fy.to_string());
        kv("data.cx", self.cx.to_string());
        kv("data.cy", self.cy.to_string());
        kv("data.hx", self.hx.to_string());
        kv("data.hy", self.hy.to_string());
        kv("data.hz", self.hz.to_string());
        kv("data.depth_min", self.depth_min.to_string());
        kv("data.depth_max", self.depth_max.to_string());
        kv("data.n_synth", self.n_synth.to_string());
        kv("data.n_real", self.n_real.to_string());
        kv("data.n_synth_test", self.n_synth_test.to_string());
        kv("data.n_real_test", self.n_real_test.to_string());
        kv("data.head_mode", head_mode_name(self.head_mode).to_string());
        kv("data.dir", self.data_dir.display().to_string());
        kv("corrupt.blur_min", self.blur_min.to_string());
        kv("corrupt.blur_max", self.blur_max.to_string());
        kv("corrupt.gamma_min", self.gamma_min.to_string());
        kv("corrupt.gamma_max", self.gamma_max.to_string());
        kv("corrupt.vignette", self.vignette.to_string());
        kv("corrupt.noise_sigma", self.noise_sigma.to_string());
        kv("corrupt.dropout", self.dropout.to_string());
        kv("train.beta", self.beta.to_string());
        kv("train.gamma", self.train_gamma.to_string());
        kv("train.lr", self.learning_rate.to_string());
        kv("train.pretrain_epochs", self.pretrain_epochs.to_string());
        kv("train.joint_epochs", self.joint_epochs.to_string());
        kv("train.batch_synth", self.batch_synth.to_string());
        kv("train.batch_real", self.batch_real.to_string());
        kv("train.feature_dim", self.feature_dim.to_string());
        kv("train.regime", self.regime.name().to_string());
        kv("eval.proj_px", self.proj_px.to_string());
        kv("eval.add_frac", self.add_frac.to_string());
        kv("eval.rot_deg", self.rot_deg.to_string());
        kv("eval.trans_units", self.trans_units.to_string());
        kv("report.mode", self.report_mode.name().to_string());
        kv("report.sweep_real", join(&self.sweep_real));
        kv("report.sweep_gamma", join(&self.sweep_gamma));
        kv("report.seeds", join(&self.report_seeds));
        kv("report.heatmap_pairs", self.heatmap_pairs.to_string());
        kv("report.bench_frames", self.bench_frames.to_string());
        kv("report.bench_warmup", self.bench_warmup.to_string());
        if let Some(cp) = &self.checkpoint {
            kv("report.checkpoint", cp.display().to_string());
        }
        s
    }

    /// Parse a config text on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply(parse_pairs(text)?)?;
        Ok(cfg)
    }

    pub fn thresholds(&self) -> MetricThresholds {
        MetricThresholds {
            proj_px: self.proj_px,
            add_frac: self.add_frac,
            rot_deg: self.rot_deg,
            trans_units: self.trans_units,
        }
    }

    /// Basic cross-field validation shared by all commands.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(CliError::Validation(format!(
                "depth range [{}, {}) is invalid",
                self.depth_min, self.depth_max
            )));
        }
        if !(self.blur_min <= self.blur_max && self.gamma_min <= self.gamma_max) {
            return Err(CliError::Validation("corruption ranges must be nonempty".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CliError::Validation("image dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

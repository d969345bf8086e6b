//! The flat run configuration shared by every command.
//!
//! Files are TOML with one `key = value` per line and no tables. Any key can
//! be overridden with a string value, parsed as a TOML value; a bare
//! comma-separated list becomes an array and anything unparseable is taken
//! as a string.

use crate::error::{Error, Result};
use crate::model::{MlpConfig, ModelConfig, ModelKind};
use crate::synthgen::SynthConfig;
use crate::tensorkit::Reduction;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; data generation, initialisation and shuffling draw from
    /// separate streams of it.
    pub seed: u64,

    pub n_homes: usize,
    pub days: usize,
    pub base_mean_kw: f64,
    pub base_daily_amplitude_kw: f64,
    pub noise_std_kw: f64,
    pub ev_power_range_kw: [f64; 2],
    pub session_duration_range_min: [usize; 2],
    pub sessions_per_day_rate: f64,
    pub evening_bias: f64,

    pub label_threshold_kw: f64,
    pub train_fraction: f64,
    pub train_window_stride: usize,
    pub test_window_stride: usize,
    pub normalize: bool,
    pub prob_threshold: f64,

    pub model: ModelKind,
    pub history_len: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_layers: usize,
    pub horizon: usize,
    pub head_bias: bool,
    pub mlp_hidden: usize,

    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub val_fraction: f64,
    pub positive_class_weight: f64,
    pub loss_reduction: Reduction,

    pub threshold_grid_lo: f64,
    pub threshold_grid_hi: f64,
    pub threshold_grid_step: f64,
    pub sweep_history_lens: Vec<usize>,

    pub gradcheck_eps: f64,
    pub gradcheck_tol: f64,
    /// Coordinates checked per tensor group on the configured model; 0
    /// checks all of them.
    pub gradcheck_max_coords: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            seed: s.seed,
            n_homes: s.n_homes,
            days: s.days,
            base_mean_kw: s.base_mean_kw,
            base_daily_amplitude_kw: s.base_daily_amplitude_kw,
            noise_std_kw: s.noise_std_kw,
            ev_power_range_kw: s.ev_power_range_kw,
            session_duration_range_min: s.session_duration_range_min,
            sessions_per_day_rate: s.sessions_per_day_rate,
            evening_bias: s.evening_bias,
            label_threshold_kw: crate::dataio::DEFAULT_LABEL_THRESHOLD_KW,
            train_fraction: crate::dataio::DEFAULT_TRAIN_FRACTION,
            train_window_stride: 5,
            test_window_stride: 1,
            normalize: true,
            prob_threshold: 0.5,
            model: ModelKind::Dctev,
            history_len: m.history_len,
            patch_len: m.patch_len,
            patch_stride: m.patch_stride,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ffn: m.d_ffn,
            n_layers: m.n_layers,
            horizon: m.horizon,
            head_bias: m.head_bias,
            mlp_hidden: 128,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps_opt: t.eps_opt,
            val_fraction: t.val_fraction,
            positive_class_weight: t.positive_class_weight,
            loss_reduction: t.loss_reduction,
            threshold_grid_lo: 0.05,
            threshold_grid_hi: 0.95,
            threshold_grid_step: 0.05,
            sweep_history_lens: vec![60, 120, 180],
            gradcheck_eps: 1e-5,
            gradcheck_tol: 1e-4,
            gradcheck_max_coords: 400,
            bench_repeats: 20,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let parse = |text: &str| -> Option<toml::Value> {
        let doc: toml::Table = toml::from_str(&format!("v = {text}")).ok()?;
        doc.get("v").cloned()
    };
    if let Some(v) = parse(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Some(v) = parse(&format!("[{raw}]")) {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

impl RunConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_homes: self.n_homes,
            days: self.days,
            base_mean_kw: self.base_mean_kw,
            base_daily_amplitude_kw: self.base_daily_amplitude_kw,
            noise_std_kw: self.noise_std_kw,
            ev_power_range_kw: self.ev_power_range_kw,
            session_duration_range_min: self.session_duration_range_min,
            sessions_per_day_rate: self.sessions_per_day_rate,
            evening_bias: self.evening_bias,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            history_len: self.history_len,
            patch_len: self.patch_len,
            patch_stride: self.patch_stride,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            n_layers: self.n_layers,
            horizon: self.horizon,
            head_bias: self.head_bias,
        }
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            history_len: self.history_len,
            hidden: self.mlp_hidden,
            horizon: self.horizon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_opt: self.eps_opt,
            seed: self.seed,
            val_fraction: self.val_fraction,
            positive_class_weight: self.positive_class_weight,
            loss_reduction: self.loss_reduction,
        }
    }

    /// Every problem across all sections, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |r: Result<()>| {
            if let Err(e) = r {
                problems.push(match e {
                    Error::Config(msg) => msg,
                    other => other.to_string(),
                });
            }
        };
        check(self.synth().validate());
        match self.model {
            ModelKind::Dctev => check(self.model_config().validate()),
            ModelKind::Mlp => check(self.mlp_config().validate()),
        }
        check(self.train_config().validate());
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            problems.push(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if self.train_window_stride == 0 || self.test_window_stride == 0 {
            problems.push("window strides must be at least 1".into());
        }
        if !self.label_threshold_kw.is_finite() || self.label_threshold_kw < 0.0 {
            problems.push(format!(
                "label_threshold_kw must be finite and nonnegative, got {}",
                self.label_threshold_kw
            ));
        }
        if !(0.0..=1.0).contains(&self.prob_threshold) {
            problems.push(format!("prob_threshold must be in [0, 1], got {}", self.prob_threshold));
        }
        if let Err(e) = crate::metrics::threshold_grid(
            self.threshold_grid_lo,
            self.threshold_grid_hi,
            self.threshold_grid_step,
        ) {
            problems.push(e.to_string());
        }
        if self.sweep_history_lens.is_empty() {
            problems.push("sweep_history_lens is empty".into());
        }
        if !(self.gradcheck_eps > 0.0 && self.gradcheck_eps <= 1e-2) {
            problems.push(format!("gradcheck_eps must be in (0, 1e-2], got {}", self.gradcheck_eps));
        }
        if !(self.gradcheck_tol > 0.0) {
            problems.push(format!("gradcheck_tol must be positive, got {}", self.gradcheck_tol));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Names of every configuration key, sorted.
    pub fn keys() -> Vec<String> {
        match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
            _ => Vec::new(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Applies `key = value` overrides, parsing each value as TOML.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = match toml::Value::try_from(self) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config("config does not serialize as a table".into())),
        };
        for (key, raw) in overrides {
            if !table.contains_key(key) {
                return Err(Error::Config(format!("unknown configuration key {key:?}")));
            }
            table.insert(key.to_string(), parse_override_value(raw));
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Provenance lines for text artifacts: a marker line then the TOML
    /// body, each meant to be written after `"# "`.
    pub fn header_lines(&self) -> Vec<String> {
        let mut lines = vec![HEADER_MARKER.to_string()];
        lines.extend(self.to_toml_string().lines().map(str::to_string));
        lines
    }

    /// Recovers the config from the leading `# ` comment block of a text
    /// artifact written with [`RunConfig::header_lines`].
    pub fn from_header(text: &str) -> Result<Self> {
        let mut lines = text.lines().map_while(|l| l.strip_prefix("# "));
        if lines.next() != Some(HEADER_MARKER) {
            return Err(Error::Config("artifact has no run-config header".into()));
        }
        let body: Vec<&str> = lines.collect();
        Self::from_toml_str(&body.join("\n"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes to JSON")
    }
}

pub const HEADER_MARKER: &str = "run config (TOML):";

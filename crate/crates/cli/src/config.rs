//! Run configuration: a line-oriented `key = value` file with `[section]`
//! headers. Every key has a fixed schema entry; unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use cmmd::autograd::Activation;
use cmmd::data::{Role, SynthConfig, SynthModality};
use cmmd::diagnostics::{default_epsilon_grid, CollapseConfig, Pairing};
use cmmd::distributions::CategoricalMode;
use cmmd::mmd::{Bandwidth, Estimator, KernelConfig};
use cmmd::model::{Architecture, ClassifyFrom, Family, ModalityPartition, PriorMode};
use cmmd::objective::ObjectiveConfig;
use cmmd::trainer::TrainConfig;

use crate::error::CliError;

/// `(section, key, default)`. A `None` default marks a key that must be set
/// by any command that reads it.
const SCHEMA: &[(&str, &str, Option<&str>)] = &[
    ("run", "seed", Some("0")),
    ("synth", "classes", Some("4")),
    ("synth", "latent_dim", Some("8")),
    ("synth", "separation", Some("2.0")),
    ("synth", "observed", None),
    ("synth", "missing", None),
    ("synth", "depth", Some("1")),
    ("synth", "noise", Some("0.5")),
    ("synth", "missing_noise_var_range", Some("none")),
    ("synth", "standardize_missing", Some("true")),
    ("synth", "label_mode", Some("softmax")),
    ("synth", "label_noise", Some("0.0")),
    ("synth", "train_rows", Some("4000")),
    ("synth", "test_rows", Some("1000")),
    ("model", "latent_dim", Some("8")),
    ("model", "encoder_hidden", Some("64,64")),
    ("model", "prior_hidden", Some("64,64")),
    ("model", "decoder_hidden", Some("64,64")),
    ("model", "classifier_hidden", Some("64")),
    ("model", "activation", Some("softplus")),
    ("model", "dropout", Some("0.2")),
    ("model", "prior", Some("conditional")),
    ("model", "fixed_decoder_var", Some("none")),
    ("model", "classify_from", Some("prior")),
    ("objective", "omega", Some("0.5")),
    ("objective", "alpha", Some("10")),
    ("objective", "lambda", Some("1000")),
    ("objective", "bandwidth", Some("latent_dim")),
    ("objective", "kernel_scales", Some("1")),
    ("objective", "estimator", Some("u_statistic")),
    ("train", "epochs", Some("50")),
    ("train", "batch_size", Some("256")),
    ("train", "learning_rate", Some("1e-4")),
    ("train", "stage", Some("single")),
    ("train", "shuffle", Some("true")),
    ("train", "eval_every", Some("0")),
    ("train", "clip_norm", Some("none")),
    ("eval", "samples", Some("1")),
    ("diagnostics", "delta", Some("0.01")),
    ("diagnostics", "epsilons", Some("default")),
    ("diagnostics", "pairings", Some("q_vs_prior,prior_vs_std,q_vs_std,priorO_vs_qM")),
    ("gradcheck", "rows", Some("4")),
    ("gradcheck", "hidden", Some("4")),
    ("gradcheck", "step", Some("1e-5")),
    ("gradcheck", "tolerance", Some("1e-4")),
    ("two_view", "max_angle", Some("0.7853981633974483")),
    ("two_view", "pad_crop", Some("false")),
    ("two_view", "rows", Some("all")),
];

fn known(section: &str, key: &str) -> bool {
    SCHEMA.iter().any(|(s, k, _)| *s == section && *k == key)
}

/// Raw values keyed by `section.key`, with defaults filled in.
#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Where each non-default value came from, for the echo.
    origin: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::defaults();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _, _)| *s == name) {
                    return Err(CliError::config(format!("line {}: unknown section [{name}]", lineno + 1)));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            if section.is_empty() {
                return Err(CliError::config(format!("line {}: key outside any [section]", lineno + 1)));
            }
            cfg.set(&section, key.trim(), unquote(value.trim()), "file")?;
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
            None => Ok(Self::defaults()),
        }
    }

    pub fn defaults() -> Self {
        let mut values = BTreeMap::new();
        for (s, k, d) in SCHEMA {
            if let Some(d) = d {
                values.insert(format!("{s}.{k}"), d.to_string());
            }
        }
        Self {
            values,
            origin: BTreeMap::new(),
        }
    }

    fn set(&mut self, section: &str, key: &str, value: &str, origin: &str) -> Result<(), CliError> {
        if !known(section, key) {
            return Err(CliError::config(format!("unknown key `{section}.{key}`")));
        }
        let full = format!("{section}.{key}");
        self.values.insert(full.clone(), value.to_string());
        self.origin.insert(full, origin.to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), CliError> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects section.key=value, got `{spec}`")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::config(format!("--set expects section.key=value, got `{spec}`")))?;
        self.set(section, key, unquote(value.trim()), "--set")
    }

    /// Replaces the run seed with `CMMD_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var("CMMD_SEED") {
            v.parse::<u64>()
                .map_err(|_| CliError::config(format!("CMMD_SEED must be an unsigned integer, got `{v}`")))?;
            log::info!("CMMD_SEED={v} overrides run.seed");
            self.set("run", "seed", &v, "CMMD_SEED")?;
        }
        Ok(())
    }

    fn raw(&self, section: &str, key: &str) -> Result<&str, CliError> {
        debug_assert!(known(section, key), "{section}.{key} not in schema");
        self.values
            .get(&format!("{section}.{key}"))
            .map(String::as_str)
            .ok_or_else(|| CliError::config(format!("missing required key `{section}.{key}`")))
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<T, CliError> {
        let raw = self.raw(section, key)?;
        raw.parse()
            .map_err(|_| CliError::config(format!("`{section}.{key}`: cannot parse `{raw}`")))
    }

    fn optional<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, CliError> {
        match self.raw(section, key)? {
            "none" => Ok(None),
            _ => self.get(section, key).map(Some),
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(section, key)?;
        if raw.trim().is_empty() || raw == "none" {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CliError::config(format!("`{section}.{key}`: cannot parse `{}`", p.trim())))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("run", "seed")
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        let depth = self.get("synth", "depth")?;
        let noise = self.get("synth", "noise")?;
        let range = match self.raw("synth", "missing_noise_var_range")? {
            "none" => None,
            _ => {
                let v: Vec<f64> = self.list("synth", "missing_noise_var_range")?;
                match v[..] {
                    [lo, hi] => Some((lo, hi)),
                    _ => return Err(CliError::config("`synth.missing_noise_var_range` must be `lo,hi` or none")),
                }
            }
        };
        let standardize_missing: bool = self.get("synth", "standardize_missing")?;
        let mut modalities = Vec::new();
        for (key, role) in [("observed", Role::Observed), ("missing", Role::Missing)] {
            for spec in self.raw("synth", key)?.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                let (name, width, family) = parse_modality(spec)?;
                let mut m = SynthModality::gaussian(name, width, role);
                m.family = family;
                m.depth = depth;
                m.noise = noise;
                if role == Role::Missing {
                    m.noise_var_range = range;
                    m.standardize = standardize_missing;
                }
                modalities.push(m);
            }
        }
        let cfg = SynthConfig {
            classes: self.get("synth", "classes")?,
            latent_dim: self.get("synth", "latent_dim")?,
            class_separation: self.get("synth", "separation")?,
            modalities,
            label_mode: CategoricalMode::parse(self.raw("synth", "label_mode")?)?,
            label_noise: self.get("synth", "label_noise")?,
            train_rows: self.get("synth", "train_rows")?,
            test_rows: self.get("synth", "test_rows")?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Architecture for a dataset with the given partition and labels.
    pub fn architecture(
        &self,
        partition: ModalityPartition,
        classes: usize,
        label_mode: CategoricalMode,
    ) -> Result<Architecture, CliError> {
        let mut a = Architecture::new(partition, self.get("model", "latent_dim")?, classes, label_mode);
        a.encoder_hidden = self.list("model", "encoder_hidden")?;
        a.prior_hidden = self.list("model", "prior_hidden")?;
        a.decoder_hidden = self.list("model", "decoder_hidden")?;
        a.classifier_hidden = self.list("model", "classifier_hidden")?;
        a.activation = Activation::parse(self.raw("model", "activation")?)?;
        a.dropout = self.get("model", "dropout")?;
        a.prior_mode = PriorMode::parse(self.raw("model", "prior")?)?;
        a.fixed_decoder_var = self.optional("model", "fixed_decoder_var")?;
        a.classify_from = ClassifyFrom::parse(self.raw("model", "classify_from")?)?;
        a.validate()?;
        Ok(a)
    }

    pub fn objective(&self) -> Result<ObjectiveConfig, CliError> {
        let bandwidth = match self.raw("objective", "bandwidth")? {
            "latent_dim" => Bandwidth::LatentDim,
            "median" => Bandwidth::MedianHeuristic,
            _ => Bandwidth::Fixed(self.get("objective", "bandwidth")?),
        };
        let estimator = match self.raw("objective", "estimator")? {
            "u_statistic" => Estimator::UStatistic,
            "v_statistic" => Estimator::VStatistic,
            other => return Err(CliError::config(format!("unknown estimator `{other}`"))),
        };
        let cfg = ObjectiveConfig {
            omega: self.get("objective", "omega")?,
            alpha: self.get("objective", "alpha")?,
            lambda: self.get("objective", "lambda")?,
            kernel: KernelConfig {
                bandwidth,
                scales: self.list("objective", "kernel_scales")?,
            },
            estimator,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Trainer settings. `train.stage` may also be `two_stage`, which the
    /// train command handles itself; it maps to `single` here.
    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let stage = match self.raw("train", "stage")? {
            "two_stage" => cmmd::trainer::Stage::Single,
            s => cmmd::trainer::Stage::parse(s)?,
        };
        let cfg = TrainConfig {
            epochs: self.get("train", "epochs")?,
            batch_size: self.get("train", "batch_size")?,
            seed: self.seed()?,
            learning_rate: self.get("train", "learning_rate")?,
            objective: self.objective()?,
            stage,
            shuffle: self.get("train", "shuffle")?,
            eval_every: self.get("train", "eval_every")?,
            clip_norm: self.optional("train", "clip_norm")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn two_stage(&self) -> Result<bool, CliError> {
        Ok(self.raw("train", "stage")? == "two_stage")
    }

    pub fn eval_samples(&self) -> Result<usize, CliError> {
        let s: usize = self.get("eval", "samples")?;
        if s == 0 {
            return Err(CliError::config("`eval.samples` must be at least 1"));
        }
        Ok(s)
    }

    pub fn collapse(&self) -> Result<CollapseConfig, CliError> {
        let epsilons = match self.raw("diagnostics", "epsilons")? {
            "default" => default_epsilon_grid(),
            _ => self.list("diagnostics", "epsilons")?,
        };
        let pairings = self
            .raw("diagnostics", "pairings")?
            .split(',')
            .map(|p| Pairing::parse(p.trim()))
            .collect::<cmmd::Result<Vec<_>>>()?;
        let cfg = CollapseConfig {
            delta: self.get("diagnostics", "delta")?,
            epsilons,
            pairings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn gradcheck(&self) -> Result<(usize, usize, f64, f64), CliError> {
        let rows: usize = self.get("gradcheck", "rows")?;
        if rows < 2 {
            return Err(CliError::config("`gradcheck.rows` must be at least 2"));
        }
        Ok((
            rows,
            self.get("gradcheck", "hidden")?,
            self.get("gradcheck", "step")?,
            self.get("gradcheck", "tolerance")?,
        ))
    }

    pub fn two_view(&self) -> Result<(cmmd::data::TwoViewOptions, Option<usize>), CliError> {
        let rows = match self.raw("two_view", "rows")? {
            "all" => None,
            _ => Some(self.get("two_view", "rows")?),
        };
        Ok((
            cmmd::data::TwoViewOptions {
                pad_crop: self.get("two_view", "pad_crop")?,
                max_angle: self.get("two_view", "max_angle")?,
            },
            rows,
        ))
    }

    /// The resolved configuration as config-file text. Keys without a value
    /// are written as comments.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (s, k, _) in SCHEMA {
            if *s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                current = s;
            }
            let full = format!("{s}.{k}");
            match self.values.get(&full) {
                Some(v) => {
                    let _ = write!(out, "{k} = {v}");
                    if let Some(o) = self.origin.get(&full) {
                        if o != "file" {
                            let _ = write!(out, "  # from {o}");
                        }
                    }
                    out.push('\n');
                }
                None => {
                    let _ = writeln!(out, "# {k} = (unset)");
                }
            }
        }
        out
    }

    /// Writes [`render`](Self::render) to `dir/config.resolved`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved"), self.render())?;
        Ok(())
    }
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"').and_then(|s| s.strip_suffix('"')).unwrap_or(v)
}

/// `name:width[:family]`, family defaulting to gaussian.
fn parse_modality(spec: &str) -> Result<(&str, usize, Family), CliError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::config(format!("modality `{spec}` must be name:width[:family]"));
    let (name, width, family) = match parts[..] {
        [n, w] => (n, w, "gaussian"),
        [n, w, f] => (n, w, f),
        _ => return Err(bad()),
    };
    let width = width.parse().map_err(|_| bad())?;
    Ok((name, width, Family::parse(family)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_parse_back() {
        let cfg = RunConfig::defaults();
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg.values, again.values);
        assert_eq!(cfg.objective().unwrap(), ObjectiveConfig::default());
    }

    #[test]
    fn unknown_keys_and_sections_rejected() {
        assert!(RunConfig::parse("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::parse("[trian]\n").is_err());
        assert!(RunConfig::parse("epochs = 3\n").is_err());
        assert!(RunConfig::defaults().apply_override("train.nope=1").is_err());
    }

    #[test]
    fn overrides_and_comments() {
        let mut cfg = RunConfig::parse("# comment\n[train]\nepochs = 3  # trailing\n").unwrap();
        cfg.apply_override("objective.omega=0.25").unwrap();
        assert_eq!(cfg.train().unwrap().epochs, 3);
        assert_eq!(cfg.objective().unwrap().omega, 0.25);
        assert!(cfg.render().contains("omega = 0.25  # from --set"));
    }

    #[test]
    fn missing_required_key_is_named() {
        let err = RunConfig::defaults().synth().unwrap_err();
        assert!(err.to_string().contains("synth.observed"), "{err}");
    }

    #[test]
    fn modality_specs() {
        assert_eq!(parse_modality("x1:30").unwrap(), ("x1", 30, Family::Gaussian));
        assert_eq!(parse_modality("img:784:bernoulli").unwrap(), ("img", 784, Family::Bernoulli));
        assert!(parse_modality("x1").is_err());
        assert!(parse_modality("x1:wide").is_err());
    }
}

//! The network ensemble: encoder `q(z | x_O, x_M, y)`, conditional prior
//! `p(z | x_O)`, one decoder `p(x_m | x_O, z)` per missing modality, and the
//! classifier `p(y | z)`.
//!
//! During training the decoders read `z_q` drawn from the encoder while the
//! classifier reads `z_p` drawn from the prior. At test time both read `z_p`,
//! so the missing modalities are never consumed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{mlp_forward, Activation, MlpSpec, ParamVars, ParameterStore, Tape, Tensor, Var};
use crate::data::Batch;
use crate::distributions::{BernoulliParams, CategoricalMode, CategoricalParams, GaussianParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Bernoulli,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "bernoulli" => Ok(Family::Bernoulli),
            other => Err(Error::config(format!("unknown modality family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Modality {
    pub name: String,
    pub width: usize,
    pub family: Family,
}

impl Modality {
    pub fn new(name: &str, width: usize, family: Family) -> Self {
        Self {
            name: name.to_string(),
            width,
            family,
        }
    }
}

/// Split of the modalities into always-observed (`O`) and test-time-missing
/// (`M`) sets, each in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPartition {
    pub observed: Vec<Modality>,
    pub missing: Vec<Modality>,
}

fn valid_name(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ModalityPartition {
    pub fn new(observed: Vec<Modality>, missing: Vec<Modality>) -> Result<Self> {
        let p = Self { observed, missing };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observed.is_empty() {
            return Err(Error::config("at least one observed modality is required"));
        }
        if self.missing.is_empty() {
            return Err(Error::config("at least one missing modality is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in self.observed.iter().chain(&self.missing) {
            if !valid_name(&m.name) {
                return Err(Error::config(format!("invalid modality name `{}`", m.name)));
            }
            if m.width == 0 {
                return Err(Error::config(format!("modality `{}` has zero width", m.name)));
            }
            if !seen.insert(m.name.as_str()) {
                return Err(Error::config(format!("modality `{}` declared twice", m.name)));
            }
        }
        Ok(())
    }

    pub fn observed_width(&self) -> usize {
        self.observed.iter().map(|m| m.width).sum()
    }

    pub fn missing_width(&self) -> usize {
        self.missing.iter().map(|m| m.width).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    /// `p(z | x_O)` is a network.
    Conditional,
    /// `p(z) = N(0, I)`, ignoring `x_O`.
    StandardNormal,
}

impl PriorMode {
    pub fn name(self) -> &'static str {
        match self {
            PriorMode::Conditional => "conditional",
            PriorMode::StandardNormal => "standard_normal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(PriorMode::Conditional),
            "standard_normal" => Ok(PriorMode::StandardNormal),
            other => Err(Error::config(format!("unknown prior mode `{other}`"))),
        }
    }
}

/// Which latent sample feeds the classifier during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifyFrom {
    Prior,
    Posterior,
}

impl ClassifyFrom {
    pub fn name(self) -> &'static str {
        match self {
            ClassifyFrom::Prior => "prior",
            ClassifyFrom::Posterior => "posterior",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(ClassifyFrom::Prior),
            "posterior" => Ok(ClassifyFrom::Posterior),
            other => Err(Error::config(format!("unknown classify_from `{other}`"))),
        }
    }
}

/// Everything needed to rebuild the ensemble's shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub partition: ModalityPartition,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub label_mode: CategoricalMode,
    pub encoder_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    pub dropout: f64,
    pub prior_mode: PriorMode,
    pub fixed_decoder_var: Option<f64>,
    pub classify_from: ClassifyFrom,
}

impl Architecture {
    /// Defaults: softplus hidden layers, dropout 0.2, conditional prior,
    /// learned decoder variances, classifier fed from the prior.
    pub fn new(partition: ModalityPartition, latent_dim: usize, num_classes: usize, label_mode: CategoricalMode) -> Self {
        Self {
            partition,
            latent_dim,
            num_classes,
            label_mode,
            encoder_hidden: vec![64, 64],
            prior_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            classifier_hidden: vec![64],
            activation: Activation::Softplus,
            dropout: 0.2,
            prior_mode: PriorMode::Conditional,
            fixed_decoder_var: None,
            classify_from: ClassifyFrom::Prior,
        }
    }

    /// Sets every hidden stack to `layers` layers of `width` units (the
    /// classifier gets one).
    pub fn with_hidden(mut self, width: usize, layers: usize) -> Self {
        self.encoder_hidden = vec![width; layers];
        self.prior_hidden = vec![width; layers];
        self.decoder_hidden = vec![width; layers];
        self.classifier_hidden = vec![width];
        self
    }

    pub fn label_width(&self) -> usize {
        self.label_mode.output_width(self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("classes must be at least 1"));
        }
        if self.label_mode == CategoricalMode::Sigmoid && self.num_classes != 2 {
            return Err(Error::config("sigmoid label mode needs exactly 2 classes"));
        }
        if let Some(v) = self.fixed_decoder_var {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("fixed_decoder_var must be positive, got {v}")));
            }
        }
        for spec in self.all_specs() {
            spec.1.validate()?;
        }
        Ok(())
    }

    fn spec(&self, input: usize, hidden: &[usize], heads: &[(&str, usize)]) -> MlpSpec {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(heads.iter().map(|h| h.1).sum());
        MlpSpec::new(widths, self.activation, self.dropout).with_heads(heads)
    }

    pub fn encoder_input_width(&self) -> usize {
        self.partition.observed_width() + self.partition.missing_width() + self.label_width()
    }

    pub fn encoder_spec(&self) -> MlpSpec {
        let d = self.latent_dim;
        self.spec(self.encoder_input_width(), &self.encoder_hidden, &[("mean", d), ("log_var", d)])
    }

    pub fn prior_spec(&self) -> MlpSpec {
        let d = self.latent_dim;
        self.spec(self.partition.observed_width(), &self.prior_hidden, &[("mean", d), ("log_var", d)])
    }

    pub fn decoder_spec(&self, m: &Modality) -> MlpSpec {
        let input = self.partition.observed_width() + self.latent_dim;
        match (m.family, self.fixed_decoder_var) {
            (Family::Gaussian, None) => {
                self.spec(input, &self.decoder_hidden, &[("mean", m.width), ("log_var", m.width)])
            }
            (Family::Gaussian, Some(_)) => self.spec(input, &self.decoder_hidden, &[("mean", m.width)]),
            (Family::Bernoulli, _) => self.spec(input, &self.decoder_hidden, &[("logits", m.width)]),
        }
    }

    pub fn classifier_spec(&self) -> MlpSpec {
        self.spec(self.latent_dim, &self.classifier_hidden, &[("logits", self.label_width())])
    }

    /// `(parameter prefix, spec)` for every network, in initialization order.
    pub fn all_specs(&self) -> Vec<(String, MlpSpec)> {
        let mut out = vec![(ENCODER.to_string(), self.encoder_spec())];
        if self.prior_mode == PriorMode::Conditional {
            out.push((PRIOR.to_string(), self.prior_spec()));
        }
        for m in &self.partition.missing {
            out.push((decoder_prefix(&m.name), self.decoder_spec(m)));
        }
        out.push((CLASSIFIER.to_string(), self.classifier_spec()));
        out
    }

    /// Canonical text form stored in checkpoint headers.
    pub fn manifest(&self) -> String {
        let mods = |ms: &[Modality]| {
            ms.iter()
                .map(|m| format!("{}:{}:{}", m.name, m.width, m.family.name()))
                .collect::<Vec<_>>()
                .join(",")
        };
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "observed = {}", mods(&self.partition.observed));
        let _ = writeln!(s, "missing = {}", mods(&self.partition.missing));
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "classes = {}", self.num_classes);
        let _ = writeln!(s, "label_mode = {}", self.label_mode.name());
        let _ = writeln!(s, "encoder_hidden = {}", list(&self.encoder_hidden));
        let _ = writeln!(s, "prior_hidden = {}", list(&self.prior_hidden));
        let _ = writeln!(s, "decoder_hidden = {}", list(&self.decoder_hidden));
        let _ = writeln!(s, "classifier_hidden = {}", list(&self.classifier_hidden));
        let _ = writeln!(s, "activation = {}", self.activation.name());
        let _ = writeln!(s, "dropout = {:?}", self.dropout);
        let _ = writeln!(s, "prior_mode = {}", self.prior_mode.name());
        match self.fixed_decoder_var {
            Some(v) => {
                let _ = writeln!(s, "fixed_decoder_var = {v:?}");
            }
            None => {
                let _ = writeln!(s, "fixed_decoder_var = none");
            }
        }
        let _ = writeln!(s, "classify_from = {}", self.classify_from.name());
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("manifest line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("manifest lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("manifest `{k}` is not an integer")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.trim().parse().map_err(|_| Error::format(format!("bad width list `{k}`"))))
                .collect()
        };
        let mods = |k: &str| -> Result<Vec<Modality>> {
            get(k)?
                .split(',')
                .map(|entry| {
                    let parts: Vec<&str> = entry.trim().split(':').collect();
                    if parts.len() != 3 {
                        return Err(Error::format(format!("bad modality entry `{entry}`")));
                    }
                    let width = parts[1]
                        .parse()
                        .map_err(|_| Error::format(format!("bad modality width `{entry}`")))?;
                    Ok(Modality::new(parts[0], width, Family::parse(parts[2])?))
                })
                .collect()
        };
        let float = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("manifest `{k}` is not a number")))
        };
        let arch = Self {
            partition: ModalityPartition {
                observed: mods("observed")?,
                missing: mods("missing")?,
            },
            latent_dim: num("latent_dim")?,
            num_classes: num("classes")?,
            label_mode: CategoricalMode::parse(get("label_mode")?)?,
            encoder_hidden: list("encoder_hidden")?,
            prior_hidden: list("prior_hidden")?,
            decoder_hidden: list("decoder_hidden")?,
            classifier_hidden: list("classifier_hidden")?,
            activation: Activation::parse(get("activation")?)?,
            dropout: float("dropout")?,
            prior_mode: PriorMode::parse(get("prior_mode")?)?,
            fixed_decoder_var: match get("fixed_decoder_var")? {
                "none" => None,
                _ => Some(float("fixed_decoder_var")?),
            },
            classify_from: ClassifyFrom::parse(get("classify_from")?)?,
        };
        arch.validate().map_err(|e| Error::format(format!("manifest describes an invalid model: {e}")))?;
        Ok(arch)
    }
}

pub const ENCODER: &str = "encoder";
pub const PRIOR: &str = "prior";
pub const CLASSIFIER: &str = "classifier";

pub fn decoder_prefix(modality: &str) -> String {
    format!("decoder.{modality}")
}

/// Output distribution of one decoder.
#[derive(Clone, Copy, Debug)]
pub enum DecoderParams {
    Gaussian(GaussianParams),
    Bernoulli(BernoulliParams),
}

/// Batch inputs recorded on a tape. `x_missing` and `labels` are absent at
/// test time.
#[derive(Clone, Debug)]
pub struct InputVars {
    pub x_observed: Var,
    pub x_missing: Option<Var>,
    pub missing_parts: Vec<Var>,
    pub labels: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub q: GaussianParams,
    pub prior: GaussianParams,
    pub z_q: Var,
    pub z_p: Var,
    pub decoders: Vec<DecoderParams>,
    pub class: CategoricalParams,
}

/// Results of the test-time path.
#[derive(Clone, Debug)]
pub struct TestOutputs {
    /// Decoder means (Gaussian) or probabilities (Bernoulli), per missing
    /// modality.
    pub generated: Vec<Tensor>,
    pub class_probs: Tensor,
    /// Prior sample used by the first pass.
    pub z_p: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmmdModel {
    pub arch: Architecture,
    pub params: ParameterStore,
}

fn check_blocks(parts: &[Tensor], mods: &[Modality]) -> Result<usize> {
    if parts.len() != mods.len() {
        return Err(Error::invalid(format!(
            "expected {} modality blocks, got {}",
            mods.len(),
            parts.len()
        )));
    }
    let rows = parts.first().map_or(0, Tensor::rows);
    for (t, m) in parts.iter().zip(mods) {
        if t.rank() != 2 || t.cols() != m.width {
            return Err(Error::Width {
                modality: m.name.clone(),
                expected: m.width,
                actual: t.cols(),
            });
        }
        if t.rows() != rows {
            return Err(Error::invalid(format!(
                "modality `{}` has {} rows, expected {rows}",
                m.name,
                t.rows()
            )));
        }
    }
    Ok(rows)
}

/// Standard normal noise of the given shape, drawn in row-major order.
pub fn standard_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Draws one reparameterized sample per row.
pub fn sample_latent<R: Rng + ?Sized>(tape: &mut Tape, params: &GaussianParams, rng: &mut R) -> Result<Var> {
    let shape = tape.value(params.mean).shape().to_vec();
    let noise = tape.constant(standard_noise(shape[0], shape[1], rng));
    crate::distributions::reparam_sample(tape, params, noise)
}

impl CmmdModel {
    /// Initializes every network from `rng`: encoder, prior, decoders in
    /// declaration order, then the classifier.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParameterStore::new();
        for (prefix, spec) in arch.all_specs() {
            spec.init_params(&prefix, &mut params, rng);
        }
        Ok(Self { arch, params })
    }

    /// Rebuilds a model from a manifest and parameters, checking that every
    /// expected parameter is present with the right shape.
    pub fn from_parts(arch: Architecture, params: ParameterStore) -> Result<Self> {
        arch.validate()?;
        let mut expected = 0;
        for (prefix, spec) in arch.all_specs() {
            for l in 0..spec.num_layers() {
                let (i, o) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
                for (path, shape) in [
                    (MlpSpec::weight_path(&prefix, l), vec![i, o]),
                    (MlpSpec::bias_path(&prefix, l), vec![o]),
                ] {
                    let t = params.get(&path)?;
                    if t.shape() != shape.as_slice() {
                        return Err(Error::Shape {
                            op: "load parameters",
                            left: shape,
                            right: t.shape().to_vec(),
                        });
                    }
                    expected += 1;
                }
            }
        }
        if params.len() != expected {
            return Err(Error::format(format!(
                "parameter store has {} entries, architecture expects {expected}",
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn partition(&self) -> &ModalityPartition {
        &self.arch.partition
    }

    /// Rows of `encoder.0.weight` that read the label block.
    pub fn label_input_rows(&self) -> std::ops::Range<usize> {
        let start = self.arch.partition.observed_width() + self.arch.partition.missing_width();
        start..start + self.arch.label_width()
    }

    /// Records a batch's blocks as constants. Missing modalities and labels
    /// are taken only when `with_targets` is set.
    pub fn input_vars(&self, tape: &mut Tape, batch: &Batch, with_targets: bool) -> Result<InputVars> {
        let x_observed = self.observed_var(tape, &batch.observed)?;
        if !with_targets {
            return Ok(InputVars {
                x_observed,
                x_missing: None,
                missing_parts: Vec::new(),
                labels: None,
            });
        }
        check_blocks(&batch.missing, &self.arch.partition.missing)?;
        let missing_parts: Vec<Var> = batch.missing.iter().map(|t| tape.constant(t.clone())).collect();
        let x_missing = tape.concat(&missing_parts)?;
        let labels = match &batch.labels {
            Some(y) => {
                if y.cols() != self.arch.label_width() || y.rows() != batch.rows() {
                    return Err(Error::Width {
                        modality: "labels".into(),
                        expected: self.arch.label_width(),
                        actual: y.cols(),
                    });
                }
                Some(tape.constant(y.clone()))
            }
            None => None,
        };
        Ok(InputVars {
            x_observed,
            x_missing: Some(x_missing),
            missing_parts,
            labels,
        })
    }

    /// Concatenates the observed blocks in declaration order.
    pub fn observed_var(&self, tape: &mut Tape, observed: &[Tensor]) -> Result<Var> {
        check_blocks(observed, &self.arch.partition.observed)?;
        let parts: Vec<Var> = observed.iter().map(|t| tape.constant(t.clone())).collect();
        tape.concat(&parts)
    }

    /// `q(z | x_O, x_M, y)`. A `None` label block is fed as zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x_observed: Var,
        x_missing: Var,
        labels: Option<Var>,
        train: bool,
        rng: &mut R,
    ) -> Result<GaussianParams> {
        let rows = tape.value(x_observed).rows();
        let y = match labels {
            Some(y) => y,
            None => tape.constant(Tensor::zeros(&[rows, self.arch.label_width()])),
        };
        let input = tape.concat(&[x_observed, x_missing, y])?;
        let heads = mlp_forward(&self.arch.encoder_spec(), ENCODER, tape, vars, input, train, rng)?;
        GaussianParams::from_heads(tape, heads.get("mean")?, heads.get("log_var")?)
    }

    /// `p(z | x_O)`, or constant `N(0, I)` in the standard-normal mode.
    pub fn prior<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x_observed: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<GaussianParams> {
        let x = tape.value(x_observed);
        if x.rank() != 2 || x.cols() != self.arch.partition.observed_width() {
            return Err(Error::Width {
                modality: "observed".into(),
                expected: self.arch.partition.observed_width(),
                actual: x.cols(),
            });
        }
        match self.arch.prior_mode {
            PriorMode::StandardNormal => {
                let rows = x.rows();
                Ok(GaussianParams::standard_normal(tape, rows, self.arch.latent_dim))
            }
            PriorMode::Conditional => {
                let heads = mlp_forward(&self.arch.prior_spec(), PRIOR, tape, vars, x_observed, train, rng)?;
                GaussianParams::from_heads(tape, heads.get("mean")?, heads.get("log_var")?)
            }
        }
    }

    /// One output distribution per missing modality from `concat(x_O, z)`.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        x_observed: Var,
        z: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<Vec<DecoderParams>> {
        if tape.value(z).cols() != self.arch.latent_dim {
            return Err(Error::Width {
                modality: "z".into(),
                expected: self.arch.latent_dim,
                actual: tape.value(z).cols(),
            });
        }
        let input = tape.concat(&[x_observed, z])?;
        let mut out = Vec::with_capacity(self.arch.partition.missing.len());
        for m in &self.arch.partition.missing {
            let spec = self.arch.decoder_spec(m);
            let heads = mlp_forward(&spec, &decoder_prefix(&m.name), tape, vars, input, train, rng)?;
            out.push(match m.family {
                Family::Bernoulli => DecoderParams::Bernoulli(BernoulliParams {
                    logits: heads.get("logits")?,
                }),
                Family::Gaussian => {
                    let mean = heads.get("mean")?;
                    match self.arch.fixed_decoder_var {
                        Some(v) => {
                            let rows = tape.value(mean).rows();
                            let log_var = tape.constant(Tensor::full(&[rows, m.width], v.ln()));
                            DecoderParams::Gaussian(GaussianParams { mean, log_var })
                        }
                        None => DecoderParams::Gaussian(GaussianParams::from_heads(tape, mean, heads.get("log_var")?)?),
                    }
                }
            });
        }
        Ok(out)
    }

    /// `p(y | z)`.
    pub fn classify<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        z: Var,
        train: bool,
        rng: &mut R,
    ) -> Result<CategoricalParams> {
        if tape.value(z).cols() != self.arch.latent_dim {
            return Err(Error::Width {
                modality: "z".into(),
                expected: self.arch.latent_dim,
                actual: tape.value(z).cols(),
            });
        }
        let heads = mlp_forward(&self.arch.classifier_spec(), CLASSIFIER, tape, vars, z, train, rng)?;
        Ok(CategoricalParams {
            logits: heads.get("logits")?,
            mode: self.arch.label_mode,
        })
    }

    /// Training-time routing: decoders read `z_q`, the classifier reads `z_p`
    /// (or `z_q` when `classify_from = posterior`).
    ///
    /// Randomness is consumed in a fixed order: encoder dropout, `z_q` noise,
    /// decoder dropout, prior dropout, `z_p` noise, classifier dropout.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        inputs: &InputVars,
        train: bool,
        rng: &mut R,
    ) -> Result<ForwardOutputs> {
        let x_missing = inputs
            .x_missing
            .ok_or_else(|| Error::invalid("forward_train needs the missing modalities"))?;
        let q = self.encode(tape, vars, inputs.x_observed, x_missing, inputs.labels, train, rng)?;
        let z_q = sample_latent(tape, &q, rng)?;
        let decoders = self.decode(tape, vars, inputs.x_observed, z_q, train, rng)?;
        let prior = self.prior(tape, vars, inputs.x_observed, train, rng)?;
        let z_p = sample_latent(tape, &prior, rng)?;
        let z_class = match self.arch.classify_from {
            ClassifyFrom::Prior => z_p,
            ClassifyFrom::Posterior => z_q,
        };
        let class = self.classify(tape, vars, z_class, train, rng)?;
        Ok(ForwardOutputs {
            q,
            prior,
            z_q,
            z_p,
            decoders,
            class,
        })
    }

    /// Test-time path from the observed modalities alone, averaging over
    /// `samples` prior draws.
    pub fn forward_test<R: Rng + ?Sized>(&self, observed: &[Tensor], samples: usize, rng: &mut R) -> Result<TestOutputs> {
        if samples == 0 {
            return Err(Error::invalid("forward_test needs at least one sample"));
        }
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let x_o = self.observed_var(&mut tape, observed)?;
        let prior = self.prior(&mut tape, &vars, x_o, false, rng)?;
        let mut generated: Option<Vec<Tensor>> = None;
        let mut probs: Option<Tensor> = None;
        let mut first_z = None;
        for _ in 0..samples {
            let z = sample_latent(&mut tape, &prior, rng)?;
            let decs = self.decode(&mut tape, &vars, x_o, z, false, rng)?;
            let class = self.classify(&mut tape, &vars, z, false, rng)?;
            let outs: Vec<Tensor> = decs
                .iter()
                .map(|d| match d {
                    DecoderParams::Gaussian(g) => tape.value(g.mean).clone(),
                    DecoderParams::Bernoulli(b) => tape.value(b.logits).map(crate::autograd::tape::stable_sigmoid),
                })
                .collect();
            let p = class.probabilities(&tape);
            match (&mut generated, &mut probs) {
                (Some(g), Some(pr)) => {
                    for (acc, o) in g.iter_mut().zip(&outs) {
                        acc.data_mut().iter_mut().zip(o.data()).for_each(|(a, b)| *a += b);
                    }
                    pr.data_mut().iter_mut().zip(p.data()).for_each(|(a, b)| *a += b);
                }
                _ => {
                    generated = Some(outs);
                    probs = Some(p);
                }
            }
            if first_z.is_none() {
                first_z = Some(tape.value(z).clone());
            }
        }
        let (mut generated, mut class_probs) = (generated.expect("samples ≥ 1"), probs.expect("samples ≥ 1"));
        if samples > 1 {
            let inv = 1.0 / samples as f64;
            for g in &mut generated {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            class_probs.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        Ok(TestOutputs {
            generated,
            class_probs,
            z_p: first_z.expect("samples ≥ 1"),
        })
    }

    /// Decoder variances of the Gaussian missing modalities along the
    /// test-time path, keyed by modality name. In fixed-variance mode the
    /// configured value is returned exactly.
    pub fn decoder_variances<R: Rng + ?Sized>(&self, observed: &[Tensor], rng: &mut R) -> Result<Vec<(String, Tensor)>> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let x_o = self.observed_var(&mut tape, observed)?;
        let prior = self.prior(&mut tape, &vars, x_o, false, rng)?;
        let z = sample_latent(&mut tape, &prior, rng)?;
        let decs = self.decode(&mut tape, &vars, x_o, z, false, rng)?;
        let rows = tape.value(x_o).rows();
        let mut out = Vec::new();
        for (m, d) in self.arch.partition.missing.iter().zip(&decs) {
            if let DecoderParams::Gaussian(g) = d {
                let v = match self.arch.fixed_decoder_var {
                    Some(v) => Tensor::full(&[rows, m.width], v),
                    None => g.variance(&tape),
                };
                out.push((m.name.clone(), v));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> Architecture {
        let p = ModalityPartition::new(
            vec![Modality::new("a", 3, Family::Gaussian)],
            vec![Modality::new("b", 2, Family::Gaussian), Modality::new("c", 4, Family::Bernoulli)],
        )
        .unwrap();
        Architecture::new(p, 2, 3, CategoricalMode::Softmax).with_hidden(5, 1)
    }

    #[test]
    fn manifest_round_trips() {
        let mut a = arch();
        a.fixed_decoder_var = Some(0.01);
        a.classify_from = ClassifyFrom::Posterior;
        let back = Architecture::from_manifest(&a.manifest()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn parameter_layout() {
        let m = CmmdModel::new(arch(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let paths: Vec<&String> = m.params.paths().collect();
        assert!(paths.contains(&&"decoder.c.1.weight".to_string()));
        assert_eq!(m.params.get("encoder.0.weight").unwrap().shape(), &[3 + 2 + 4 + 3, 5]);
        assert_eq!(m.params.get("prior.0.weight").unwrap().shape(), &[3, 5]);
        assert_eq!(m.params.get("decoder.b.1.weight").unwrap().shape(), &[5, 4]);
        assert_eq!(m.params.get("classifier.1.bias").unwrap().shape(), &[3]);
        assert_eq!(m.label_input_rows(), 9..12);
        CmmdModel::from_parts(m.arch.clone(), m.params.clone()).unwrap();
    }

    #[test]
    fn fixed_variance_decoder_emits_constant_log_var() {
        let mut a = arch();
        a.fixed_decoder_var = Some(0.01);
        let m = CmmdModel::new(a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let vars = tape.bind(&m.params);
        let x = m.observed_var(&mut tape, &[standard_noise(4, 3, &mut rng)]).unwrap();
        let z = tape.constant(standard_noise(4, 2, &mut rng));
        let decs = m.decode(&mut tape, &vars, x, z, false, &mut rng).unwrap();
        let DecoderParams::Gaussian(g) = decs[0] else { panic!("expected gaussian") };
        assert!(tape.value(g.log_var).data().iter().all(|&v| v == 0.01f64.ln()));
        assert!((0.01f64.ln() + 4.605_170_185_988_091).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_prior_ignores_input() {
        let mut a = arch();
        a.prior_mode = PriorMode::StandardNormal;
        let m = CmmdModel::new(a, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(!m.params.contains("prior.0.weight"));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let vars = tape.bind(&m.params);
        let x = m.observed_var(&mut tape, &[standard_noise(3, 3, &mut rng)]).unwrap();
        let p = m.prior(&mut tape, &vars, x, true, &mut rng).unwrap();
        assert!(tape.value(p.mean).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(p.log_var).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_errors_name_the_modality() {
        let m = CmmdModel::new(arch(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        match m.observed_var(&mut tape, &[Tensor::zeros(&[2, 4])]) {
            Err(Error::Width { modality, expected: 3, actual: 4 }) => assert_eq!(modality, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_partitions_rejected() {
        assert!(ModalityPartition::new(vec![], vec![Modality::new("b", 1, Family::Gaussian)]).is_err());
        assert!(ModalityPartition::new(
            vec![Modality::new("a", 1, Family::Gaussian)],
            vec![Modality::new("a", 1, Family::Gaussian)]
        )
        .is_err());
        assert!(ModalityPartition::new(
            vec![Modality::new("a.b", 1, Family::Gaussian)],
            vec![Modality::new("c", 1, Family::Gaussian)]
        )
        .is_err());
    }
}

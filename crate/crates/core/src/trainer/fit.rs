use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, clip_global_norm, AdamState};
use crate::autograd::{glorot, ParameterStore, Tape};
use crate::data::{batch_indices, Dataset};
use crate::diagnostics::{evaluate, MetricsReport};
use crate::error::{Error, Result};
use crate::model::{CmmdModel, CLASSIFIER, ENCODER};
use crate::objective::{build_cmmd_loss, ObjectiveBreakdown, ObjectiveConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Single,
    /// No labels: the class term is dropped and the encoder's label block is
    /// fed zeros.
    Stage1Unsupervised,
    /// Full objective, starting from stage-1 weights.
    Stage2Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Single => "single",
            Stage::Stage1Unsupervised => "stage1_unsupervised",
            Stage::Stage2Finetune => "stage2_finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Stage::Single),
            "stage1_unsupervised" => Ok(Stage::Stage1Unsupervised),
            "stage2_finetune" => Ok(Stage::Stage2Finetune),
            other => Err(Error::config(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub objective: ObjectiveConfig,
    pub stage: Stage,
    pub shuffle: bool,
    /// Evaluate on the held-out set every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            seed: 0,
            learning_rate: 1e-4,
            objective: ObjectiveConfig::default(),
            stage: Stage::Single,
            shuffle: true,
            eval_every: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be positive"));
            }
        }
        self.objective.validate()
    }
}

/// Optimizer state plus the number of completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: &ParameterStore, learning_rate: f64) -> Self {
        Self {
            adam: AdamState::new(params, learning_rate),
            epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    /// One-based epoch index.
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub train: ObjectiveBreakdown,
    pub eval: Option<MetricsReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

/// Generator for one epoch, derived from the run seed alone so that a resumed
/// run replays the same stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn eval_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 40) + epoch as u64);
    rng
}

/// Trains for the remaining epochs of `cfg`, ascending the objective.
pub fn fit(
    model: &mut CmmdModel,
    state: &mut TrainState,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    fit_with(model, state, train, eval, cfg, |_, _, _| Ok(()))
}

/// As [`fit`], calling `on_epoch` after every completed epoch.
pub fn fit_with<F>(
    model: &mut CmmdModel,
    state: &mut TrainState,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainHistory>
where
    F: FnMut(&CmmdModel, &TrainState, &HistoryRow) -> Result<()>,
{
    cfg.validate()?;
    train.manifest().check_partition(model.partition())?;
    let data = match cfg.stage {
        Stage::Stage1Unsupervised => train.without_labels(),
        _ => {
            if train.labels().is_none() {
                return Err(Error::invalid(format!("stage {} needs labels", cfg.stage.name())));
            }
            train.clone()
        }
    };
    let objective = match cfg.stage {
        Stage::Stage1Unsupervised => ObjectiveConfig {
            alpha: 0.0,
            ..cfg.objective.clone()
        },
        _ => cfg.objective.clone(),
    };
    state.adam.learning_rate = cfg.learning_rate;
    let mut history = TrainHistory::default();
    while state.epoch < cfg.epochs {
        let start = Instant::now();
        let mut rng = epoch_rng(cfg.seed, state.epoch);
        let plan = batch_indices(data.rows(), cfg.batch_size, cfg.shuffle, true, &mut rng);
        if plan.is_empty() {
            return Err(Error::invalid("training set has fewer than 2 rows"));
        }
        let mut sums = [0.0f64; 5];
        for idx in &plan {
            let batch = data.batch(idx);
            let mut tape = Tape::new();
            let vars = tape.bind(&model.params);
            let graph = build_cmmd_loss(model, &mut tape, &vars, &batch, &objective, true, &mut rng)?;
            let loss = tape.neg(graph.terms.total)?;
            let mut grads = tape.backward(loss)?.into_by_path();
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut state.adam)?;
            let b = graph.terms.breakdown(&tape);
            for (s, v) in sums
                .iter_mut()
                .zip([b.recon_log_prob, b.class_log_prob, b.kl_term, b.mmd_term, b.total_objective])
            {
                *s += v;
            }
        }
        let k = plan.len() as f64;
        let means = ObjectiveBreakdown {
            recon_log_prob: sums[0] / k,
            class_log_prob: sums[1] / k,
            kl_term: sums[2] / k,
            mmd_term: sums[3] / k,
            total_objective: sums[4] / k,
        };
        state.epoch += 1;
        let eval_report = match eval {
            Some(ds) if cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0 => {
                Some(evaluate(model, ds, 1, &mut eval_rng(cfg.seed, state.epoch))?)
            }
            _ => None,
        };
        let row = HistoryRow {
            epoch: state.epoch,
            train: means,
            eval: eval_report,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} total {:.4} recon {:.4} class {:.4} kl {:.4} mmd {:.6}",
            row.epoch,
            means.total_objective,
            means.recon_log_prob,
            means.class_log_prob,
            means.kl_term,
            means.mmd_term
        );
        on_epoch(model, state, &row)?;
        history.rows.push(row);
    }
    Ok(history)
}

/// Redraws the encoder's first-layer rows that read the label block, and
/// every classifier parameter.
pub fn reinit_label_pathway<R: Rng + ?Sized>(model: &mut CmmdModel, rng: &mut R) -> Result<()> {
    let rows = model.label_input_rows();
    let w_path = format!("{ENCODER}.0.weight");
    let w = model.params.get_mut(&w_path)?;
    let (fan_in, fan_out) = (w.rows(), w.cols());
    let fresh = glorot(fan_in, fan_out, rng);
    for r in rows {
        let dst = &mut w.data_mut()[r * fan_out..(r + 1) * fan_out];
        dst.copy_from_slice(fresh.row(r));
    }
    let spec = model.arch.classifier_spec();
    spec.init_params(CLASSIFIER, &mut model.params, rng);
    Ok(())
}

/// Stage 1 on `unlabeled` without the label pathway, then stage 2 on
/// `labeled` after redrawing the label rows of the encoder and the
/// classifier. Each stage starts with fresh optimizer state.
pub fn two_stage_fit(
    model: &mut CmmdModel,
    unlabeled: &Dataset,
    labeled: &Dataset,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
) -> Result<(TrainHistory, TrainHistory)> {
    unlabeled.manifest().check_partition(model.partition())?;
    labeled.manifest().check_partition(model.partition())?;
    let cfg1 = TrainConfig {
        stage: Stage::Stage1Unsupervised,
        ..stage1.clone()
    };
    let mut state = TrainState::new(&model.params, cfg1.learning_rate);
    let h1 = fit(model, &mut state, unlabeled, None, &cfg1)?;

    let mut rng = ChaCha8Rng::seed_from_u64(stage2.seed);
    rng.set_stream(1 << 48);
    reinit_label_pathway(model, &mut rng)?;
    let cfg2 = TrainConfig {
        stage: Stage::Stage2Finetune,
        ..stage2.clone()
    };
    let mut state = TrainState::new(&model.params, cfg2.learning_rate);
    let h2 = fit(model, &mut state, labeled, None, &cfg2)?;
    Ok((h1, h2))
}

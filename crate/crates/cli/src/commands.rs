use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cmmd::autograd::grad_check_params_with;
use cmmd::data::store::modality_file;
use cmmd::data::{
    gen_synth_multimodal, load_dataset, load_idx, make_two_view_digits, one_hot, save_dataset, write_matrix, Dataset,
    DatasetManifest, ModalityInfo, Role, SynthConfig, SynthModality,
};
use cmmd::diagnostics::{collapse_report, evaluate, MetricsReport};
use cmmd::distributions::CategoricalMode;
use cmmd::model::{CmmdModel, Family};
use cmmd::objective::{build_cmmd_loss, omega_grid, ObjectiveBreakdown};
use cmmd::trainer::{
    fit_with, load_checkpoint, reinit_label_pathway, save_checkpoint, HistoryRow, Stage, TrainConfig, TrainState,
};

use crate::config::RunConfig;
use crate::error::CliError;

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const HISTORY: &str = "history.csv";

const METRICS_HEADER: [&str; 9] = [
    "stage",
    "epoch",
    "recon_log_prob",
    "class_log_prob",
    "kl_term",
    "mmd_term",
    "mmd_weight",
    "mmd_contribution",
    "total_objective",
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    load_dataset(dir)
        .with_context(|| format!("loading dataset {}", dir.display()))
        .map_err(CliError::Runtime)
}

fn load_model(path: &Path, data: &Dataset) -> Result<CmmdModel, CliError> {
    let (model, _) = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(CliError::Runtime)?;
    data.manifest().check_partition(model.partition())?;
    Ok(model)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    Ok(csv::Writer::from_writer(fs::File::create(path)?))
}

fn write_metrics_report(path: &Path, report: &MetricsReport) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["metric", "target", "value"])?;
    for (metric, target, value) in report.rows() {
        w.write_record([metric, target, value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sc = cfg.synth()?;
    let data = gen_synth_multimodal(&sc)?;
    save_dataset(&data.train, &out.join("train"))?;
    save_dataset(&data.test, &out.join("test"))?;
    log::info!(
        "wrote {} train and {} test rows to {}",
        data.train.rows(),
        data.test.rows(),
        out.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub data: PathBuf,
    pub eval: Option<PathBuf>,
    pub labeled: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub omega_sweep: bool,
    pub out: PathBuf,
}

/// Appends per-epoch rows to `metrics.csv` and evaluation rows to
/// `history.csv`.
struct EpochLog {
    metrics: csv::Writer<fs::File>,
    history: csv::Writer<fs::File>,
}

impl EpochLog {
    /// Opens both files. With `keep_through = Some(e)`, existing rows up to
    /// epoch `e` are kept and later ones dropped, so that a resumed run
    /// rewrites exactly what an uninterrupted run would have.
    fn open(dir: &Path, keep_through: Option<usize>) -> Result<Self, CliError> {
        let metrics = Self::reopen(&dir.join(METRICS), &METRICS_HEADER, 1, keep_through)?;
        let history = Self::reopen(&dir.join(HISTORY), &["stage", "epoch", "metric", "target", "value"], 1, keep_through)?;
        Ok(Self { metrics, history })
    }

    fn reopen(path: &Path, header: &[&str], epoch_col: usize, keep_through: Option<usize>) -> Result<csv::Writer<fs::File>, CliError> {
        let mut kept = Vec::new();
        if let (Some(limit), true) = (keep_through, path.exists()) {
            let mut r = csv::Reader::from_path(path)?;
            for rec in r.records() {
                let rec = rec?;
                let epoch: usize = rec
                    .get(epoch_col)
                    .and_then(|e| e.parse().ok())
                    .ok_or_else(|| anyhow::anyhow!("{}: malformed epoch column", path.display()))?;
                if epoch <= limit {
                    kept.push(rec);
                }
            }
        }
        let mut w = csv_writer(path)?;
        w.write_record(header)?;
        for rec in kept {
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(w)
    }

    fn record(&mut self, stage: Stage, row: &HistoryRow, mmd_weight: f64) -> Result<(), CliError> {
        let t: ObjectiveBreakdown = row.train;
        let epoch = row.epoch.to_string();
        let mut fields = vec![stage.name().to_string(), epoch.clone()];
        fields.extend(
            [
                t.recon_log_prob,
                t.class_log_prob,
                t.kl_term,
                t.mmd_term,
                mmd_weight,
                mmd_weight * t.mmd_term,
                t.total_objective,
            ]
            .iter()
            .map(f64::to_string),
        );
        self.metrics.write_record(&fields)?;
        self.metrics.flush()?;
        if let Some(report) = &row.eval {
            for (metric, target, value) in report.rows() {
                self.history
                    .write_record([stage.name(), &epoch, &metric, &target, &value.to_string()])?;
            }
            self.history.flush()?;
        }
        Ok(())
    }
}

fn run_fit(
    model: &mut CmmdModel,
    state: &mut TrainState,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    out: &Path,
    log: &mut EpochLog,
) -> Result<Vec<HistoryRow>, CliError> {
    let ckpt = out.join(CHECKPOINT);
    let weight = cfg.objective.mmd_weight();
    let history = fit_with(model, state, train, eval, cfg, |m, s, row| {
        save_checkpoint(&ckpt, m, Some(s))?;
        log.record(cfg.stage, row, weight)
            .map_err(|e| cmmd::Error::Invalid(e.to_string()))
    })?;
    Ok(history.rows)
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> Result<(), CliError> {
    let tc = cfg.train()?;
    let data = load(&args.data)?;
    let eval = args.eval.as_deref().map(load).transpose()?;
    let m = data.manifest();
    let arch = cfg.architecture(m.partition()?, m.classes, m.label_mode)?;

    if cfg.two_stage()? {
        if args.resume.is_some() || args.omega_sweep {
            return Err(CliError::config("two_stage training supports neither --resume nor --omega-sweep"));
        }
        let labeled_dir = args
            .labeled
            .as_deref()
            .ok_or_else(|| CliError::config("train.stage = two_stage needs --labeled"))?;
        let labeled = load(labeled_dir)?;
        let mut model = CmmdModel::new(arch, &mut rng(tc.seed))?;
        return two_stage(&mut model, &data, &labeled, eval.as_ref(), &tc, &args.out);
    }

    if args.omega_sweep {
        if args.resume.is_some() {
            return Err(CliError::config("--omega-sweep cannot be combined with --resume"));
        }
        return omega_sweep(&arch, &data, eval.as_ref(), &tc, cfg.eval_samples()?, &args.out);
    }

    let (mut model, mut state) = match &args.resume {
        Some(path) => {
            let (model, state) = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))
                .map_err(CliError::Runtime)?;
            let state = state.ok_or_else(|| anyhow::anyhow!("{} has no optimizer state to resume from", path.display()))?;
            log::info!("resuming after epoch {}", state.epoch);
            (model, state)
        }
        None => {
            let model = CmmdModel::new(arch, &mut rng(tc.seed))?;
            let state = TrainState::new(&model.params, tc.learning_rate);
            (model, state)
        }
    };
    let resumed_at = args.resume.as_ref().map(|_| state.epoch);
    let mut log = EpochLog::open(&args.out, resumed_at)?;
    run_fit(&mut model, &mut state, &data, eval.as_ref(), &tc, &args.out, &mut log)?;
    log::info!("checkpoint written to {}", args.out.join(CHECKPOINT).display());
    Ok(())
}

fn two_stage(
    model: &mut CmmdModel,
    unlabeled: &Dataset,
    labeled: &Dataset,
    eval: Option<&Dataset>,
    tc: &TrainConfig,
    out: &Path,
) -> Result<(), CliError> {
    labeled.manifest().check_partition(model.partition())?;
    let mut log = EpochLog::open(out, None)?;
    let stage1 = TrainConfig {
        stage: Stage::Stage1Unsupervised,
        ..tc.clone()
    };
    let mut state = TrainState::new(&model.params, tc.learning_rate);
    run_fit(model, &mut state, unlabeled, None, &stage1, out, &mut log)?;

    let mut r = rng(tc.seed);
    r.set_stream(1 << 48);
    reinit_label_pathway(model, &mut r)?;
    let stage2 = TrainConfig {
        stage: Stage::Stage2Finetune,
        ..tc.clone()
    };
    let mut state = TrainState::new(&model.params, tc.learning_rate);
    run_fit(model, &mut state, labeled, eval, &stage2, out, &mut log)?;
    Ok(())
}

fn omega_sweep(
    arch: &cmmd::model::Architecture,
    data: &Dataset,
    eval: Option<&Dataset>,
    tc: &TrainConfig,
    samples: usize,
    out: &Path,
) -> Result<(), CliError> {
    let mut summary = csv_writer(&out.join("sweep.csv"))?;
    summary.write_record([
        "omega",
        "recon_log_prob",
        "class_log_prob",
        "kl_term",
        "mmd_term",
        "mmd_weight",
        "total_objective",
        "error_rate",
        "map",
        "rmse",
    ])?;
    for omega in omega_grid() {
        let dir = out.join(format!("omega_{omega:.1}"));
        fs::create_dir_all(&dir)?;
        let mut cfg = tc.clone();
        cfg.objective.omega = omega;
        let mut model = CmmdModel::new(arch.clone(), &mut rng(tc.seed))?;
        let mut state = TrainState::new(&model.params, tc.learning_rate);
        let mut log = EpochLog::open(&dir, None)?;
        let rows = run_fit(&mut model, &mut state, data, eval, &cfg, &dir, &mut log)?;
        let last = rows.last().expect("at least one epoch").train;
        let report = match eval {
            Some(ds) => Some(evaluate(&model, ds, samples, &mut rng(tc.seed))?),
            None => None,
        };
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rmse = report
            .as_ref()
            .filter(|r| !r.rmse.is_empty())
            .map(|r| r.rmse.iter().map(|x| x.1).sum::<f64>() / r.rmse.len() as f64);
        summary.write_record([
            format!("{omega:.1}"),
            last.recon_log_prob.to_string(),
            last.class_log_prob.to_string(),
            last.kl_term.to_string(),
            last.mmd_term.to_string(),
            cfg.objective.mmd_weight().to_string(),
            last.total_objective.to_string(),
            opt(report.as_ref().and_then(|r| r.error_rate)),
            opt(report.as_ref().and_then(|r| r.map)),
            opt(rmse),
        ])?;
        summary.flush()?;
        log::info!("omega {omega:.1} done: total {:.4}", last.total_objective);
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load(data)?;
    let model = load_model(checkpoint, &ds)?;
    let report = evaluate(&model, &ds, cfg.eval_samples()?, &mut rng(cfg.seed()?))?;
    let path = out.join("eval.csv");
    write_metrics_report(&path, &report)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&fs::read(&path)?)?;
    Ok(())
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load(data)?;
    let model = load_model(checkpoint, &ds)?;
    // Same generator as `eval`, so the outputs are the ones it scores.
    let outputs = model.forward_test(&ds.observed(), cfg.eval_samples()?, &mut rng(cfg.seed()?))?;
    for (m, t) in model.partition().missing.iter().zip(&outputs.generated) {
        write_matrix(fs::File::create(out.join(modality_file(&m.name)))?, t)?;
    }
    write_matrix(fs::File::create(out.join("class_probs.cmmdmat"))?, &outputs.class_probs)?;
    log::info!("wrote {} generated modalities to {}", outputs.generated.len(), out.display());
    Ok(())
}

pub fn collapse(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let ds = load(data)?;
    let model = load_model(checkpoint, &ds)?;
    let report = collapse_report(&model, &ds, &cfg.collapse()?)?;
    let mut w = csv_writer(&out.join("collapse.csv"))?;
    w.write_record(["pairing", "epsilon", "fraction"])?;
    for (p, e, f) in &report.rows {
        w.write_record([p.name().to_string(), e.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Small dataset with both decoder families on the missing side.
fn gradcheck_dataset(rows: usize, seed: u64) -> Result<Dataset, CliError> {
    let mut bern = SynthModality::gaussian("xb", 3, Role::Missing);
    bern.family = Family::Bernoulli;
    let cfg = SynthConfig {
        classes: 4,
        latent_dim: 3,
        modalities: vec![
            SynthModality::gaussian("xo", 5, Role::Observed),
            SynthModality::gaussian("xg", 4, Role::Missing),
            bern,
        ],
        train_rows: rows,
        test_rows: 1,
        seed,
        ..Default::default()
    };
    Ok(gen_synth_multimodal(&cfg)?.train)
}

pub fn gradcheck(cfg: &RunConfig, fault: Option<&str>, out: &Path) -> Result<(), CliError> {
    let (rows, hidden, step, tolerance) = cfg.gradcheck()?;
    let seed = cfg.seed()?;
    let ds = gradcheck_dataset(rows, seed)?;
    let m = ds.manifest();
    let mut arch = cfg.architecture(m.partition()?, m.classes, m.label_mode)?;
    arch.latent_dim = 2;
    arch = arch.with_hidden(hidden, 1);
    let model = CmmdModel::new(arch, &mut rng(seed))?;
    let objective = cfg.objective()?;
    let batch = ds.full_batch();
    let report = grad_check_params_with(
        |t, v| Ok(build_cmmd_loss(&model, t, v, &batch, &objective, true, &mut rng(seed ^ 0x9e37))?.terms.total),
        &model.params,
        step,
        |t| {
            if let Some(op) = fault {
                t.inject_backward_fault(op);
            }
        },
    )?;
    let mut w = csv_writer(&out.join("gradcheck.csv"))?;
    w.write_record(["group", "max_relative_error", "status"])?;
    let mut failed = Vec::new();
    for (group, err) in report.per_group() {
        let ok = err < tolerance;
        if !ok {
            failed.push(group.clone());
        }
        println!("{group:<24} {err:.3e} {}", if ok { "ok" } else { "FAIL" });
        w.write_record([group, err.to_string(), if ok { "ok".into() } else { "fail".to_string() }])?;
    }
    w.flush()?;
    let worst = report.max_error();
    println!("max relative error {worst:.3e} (tolerance {tolerance:e})");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow::anyhow!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

pub fn two_view(cfg: &RunConfig, images: &Path, labels: &Path, out: &Path) -> Result<(), CliError> {
    let (opts, limit) = cfg.two_view()?;
    let x = load_idx(images)?;
    let y = load_idx(labels)?;
    if x.rank() != 3 || y.rank() != 1 {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "expected rank-3 images and rank-1 labels, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let n = limit.unwrap_or(usize::MAX).min(x.shape()[0]).min(y.shape()[0]);
    let pixels = x.shape()[1] * x.shape()[2];
    let x = cmmd::autograd::Tensor::matrix(n, pixels, x.data()[..n * pixels].to_vec())?;
    let y: Vec<usize> = y.data()[..n].iter().map(|&v| v as usize).collect();
    let classes = y.iter().max().map_or(1, |&c| c + 1);
    let (x_o, x_m) = make_two_view_digits(&x, &y, opts, &mut rng(cfg.seed()?))?;
    let info = |name: &str, role| ModalityInfo {
        name: name.into(),
        width: pixels,
        family: Family::Bernoulli,
        role,
        stats: None,
    };
    let manifest = DatasetManifest {
        modalities: vec![info("rotated", Role::Observed), info("noisy", Role::Missing)],
        classes,
        label_mode: CategoricalMode::Softmax,
        has_labels: true,
        rows: n,
    };
    let ds = Dataset::new(manifest, vec![x_o, x_m], Some(one_hot(&y, classes)))?;
    save_dataset(&ds, out)?;
    log::info!("wrote {n} two-view rows to {}", out.display());
    Ok(())
}

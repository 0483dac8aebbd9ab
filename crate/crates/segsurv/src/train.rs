//! Training loop, SGD with step decay, cross-validation and hold-out
//! protocols, and run reports.

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::baselines::{coxph_fit, CoxOptions};
use crate::checkpoint::save_checkpoint;
use crate::data::{Subject, Volume};
use crate::error::TrainError;
use crate::losses;
use crate::metrics::{c_index, dsc_metric};
use crate::model::{
    decoder, forward_subject, init_params, ModelConfig, SubjectInputs,
};
use crate::mtlr::{risk_score, survival_pmf, MtlrConfig, MtlrLabel};
use crate::params::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for Precision {
    fn default() -> Self {
        Precision::F64
    }
}

/// Run hyperparameters. Every field mirrors a CLI flag and a JSON config
/// key of the same name.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Last epoch at the base learning rate (1-based).
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Weight on the segmentation terms; 1 - beta weighs the survival NLL.
    pub beta: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub momentum: f64,
    pub seed: u64,
    pub folds: usize,
    /// Validation cadence in epochs.
    pub eval_every: usize,
    pub mask_threshold: f64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 4e-3,
            weight_decay: 1e-5,
            decay_epoch: 35,
            decay_factor: 10.0,
            beta: 0.3,
            alpha: 1.0,
            gamma: 2.0,
            momentum: 0.0,
            seed: 0,
            folds: 5,
            eval_every: 1,
            mask_threshold: 0.5,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.decay_factor > 0.0) {
            return bad("lr and decay_factor must be positive".into());
        }
        if self.weight_decay < 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return bad("weight_decay must be >= 0 and momentum in [0, 1)".into());
        }
        if self.decay_epoch >= self.epochs {
            return bad(format!(
                "decay_epoch {} must be below epochs {}",
                self.decay_epoch, self.epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) || self.gamma < 0.0 {
            return bad("beta must lie in [0, 1] and gamma must be >= 0".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> losses::LossConfig {
        losses::LossConfig {
            alpha: self.alpha,
            gamma: self.gamma,
            beta: self.beta,
            dice_eps: 1e-6,
        }
    }
}

/// Step schedule: the base rate through `decay_epoch`, then divided by
/// `decay_factor` for the rest of the run. Epochs are 1-based.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch <= cfg.decay_epoch {
        cfg.lr
    } else {
        cfg.lr / cfg.decay_factor
    }
}

/// SGD with optional momentum and decoupled weight decay. Parameters whose
/// gradient (and velocity) are identically zero are left untouched, so a
/// loss term with weight zero really does freeze its private parameters.
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
    momentum: f64,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64) -> Self {
        Self {
            velocity: store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect(),
            momentum,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, wd: f64) {
        let lr_t = T::from_f64(lr);
        let wd_t = T::from_f64(wd);
        let m_t = T::from_f64(self.momentum);
        for ((_, param), (vel, grad)) in store
            .iter_mut()
            .zip(self.velocity.iter_mut().zip(grads.iter()))
        {
            let grad_zero = grad.data().iter().all(|&g| g == T::zero());
            let vel_zero = vel.data().iter().all(|&v| v == T::zero());
            if grad_zero && vel_zero {
                continue;
            }
            for ((p, v), &g) in param
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grad.data())
            {
                *v = m_t * *v + g;
                *p = *p - lr_t * *v - lr_t * wd_t * *p;
            }
        }
    }
}

/// One line of metrics.jsonl.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub fold: usize,
    pub epoch: usize,
    pub dice: f64,
    pub focal: f64,
    pub nll: f64,
    pub combined: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_index: Option<f64>,
}

/// A subject ready for the tape plus what evaluation needs back.
pub struct PreparedSubject<T> {
    pub inputs: SubjectInputs<T>,
    pub truth_mask: Volume,
    pub ehr: Vec<f64>,
}

pub fn prepare_all<T: Scalar>(
    subjects: &[Subject],
    cfg: &ModelConfig,
) -> Result<Vec<PreparedSubject<T>>, TrainError> {
    subjects
        .iter()
        .map(|s| {
            Ok(PreparedSubject {
                inputs: SubjectInputs::prepare(s, cfg)?,
                truth_mask: s.mask.clone(),
                ehr: s.ehr.encoded.clone(),
            })
        })
        .collect()
}

/// Per-subject evaluation results on a split.
pub struct EvalOutcome {
    pub dsc_mean: f64,
    pub dscs: Vec<f64>,
    /// None when the split has no comparable pair (flagged).
    pub c_index: Option<f64>,
    pub risks: Vec<f64>,
    pub pmfs: Vec<Vec<f64>>,
    pub pred_masks: Vec<Volume>,
}

pub fn evaluate<T: Scalar>(
    params: &ParamStore<T>,
    model_cfg: &ModelConfig,
    mtlr: &MtlrConfig,
    prepared: &[PreparedSubject<T>],
    threshold: f64,
) -> Result<EvalOutcome, TrainError> {
    let mut dscs = Vec::with_capacity(prepared.len());
    let mut risks = Vec::with_capacity(prepared.len());
    let mut pmfs = Vec::with_capacity(prepared.len());
    let mut pred_masks = Vec::with_capacity(prepared.len());
    let mut times = Vec::with_capacity(prepared.len());
    let mut events = Vec::with_capacity(prepared.len());

    for p in prepared {
        let mut tape = Tape::new();
        let bound = params.register(&mut tape);
        let fwd = forward_subject(&mut tape, &bound, model_cfg, &p.inputs)?;
        let logits: Vec<f64> = tape.value(fwd.logits).iter_f64().collect();
        let mask = decoder::logits_to_mask(
            &logits,
            model_cfg.input_shape,
            p.truth_mask.spacing,
            threshold,
        )?;
        dscs.push(dsc_metric(&mask, &p.truth_mask)?);
        let scores: Vec<f64> = tape.value(fwd.scores).iter_f64().collect();
        let pmf = survival_pmf(&scores)?;
        risks.push(risk_score(&pmf, &mtlr.edges)?);
        pmfs.push(pmf);
        pred_masks.push(mask);
        times.push(p.inputs.time);
        events.push(p.inputs.event);
    }

    let c = match c_index(&risks, &times, &events) {
        Ok(v) => Some(v),
        Err(crate::error::MetricsError::NoComparablePairs) => None,
        Err(e) => return Err(e.into()),
    };
    let dsc_mean = dscs.iter().sum::<f64>() / dscs.len().max(1) as f64;
    Ok(EvalOutcome {
        dsc_mean,
        dscs,
        c_index: c,
        risks,
        pmfs,
        pred_masks,
    })
}

struct BatchTerms {
    dice: f64,
    focal: f64,
    nll: f64,
    combined: f64,
}

/// One optimization step's forward/backward over a batch; returns loss-term
/// values and the gradient for every parameter, in store order.
#[allow(clippy::too_many_arguments)]
fn run_batch<T: Scalar>(
    params: &ParamStore<T>,
    model_cfg: &ModelConfig,
    mtlr: &MtlrConfig,
    loss_cfg: &losses::LossConfig,
    batch: &[&PreparedSubject<T>],
    epoch: usize,
    step: usize,
) -> Result<(BatchTerms, Vec<Tensor<T>>), TrainError> {
    let mut tape = Tape::new();
    let bound = params.register(&mut tape);

    let mut dice_terms = Vec::with_capacity(batch.len());
    let mut focal_terms = Vec::with_capacity(batch.len());
    let mut score_rows = Vec::with_capacity(batch.len());
    let mut labels: Vec<MtlrLabel> = Vec::with_capacity(batch.len());
    for p in batch {
        let fwd = forward_subject(&mut tape, &bound, model_cfg, &p.inputs)?;
        let mask = tape.constant(p.inputs.mask.clone());
        dice_terms.push(losses::dice_loss(
            &mut tape,
            fwd.probs,
            mask,
            loss_cfg.dice_eps,
        )?);
        focal_terms.push(losses::focal_loss(
            &mut tape,
            fwd.probs,
            mask,
            loss_cfg.alpha,
            loss_cfg.gamma,
        )?);
        score_rows.push(fwd.scores);
        labels.push(p.inputs.label(mtlr));
    }
    let b = batch.len() as f64;
    let dice_all = tape.concat(&dice_terms, 0)?;
    let dice_sum = tape.sum_all(dice_all)?;
    let dice = tape.scale(dice_sum, 1.0 / b)?;
    let focal_all = tape.concat(&focal_terms, 0)?;
    let focal_sum = tape.sum_all(focal_all)?;
    let focal = tape.scale(focal_sum, 1.0 / b)?;
    let scores = tape.concat(&score_rows, 0)?;
    let nll = losses::mtlr_nll(&mut tape, scores, &labels)?;
    let combined = losses::combined_loss(&mut tape, dice, focal, nll, loss_cfg.beta)?;

    let terms = BatchTerms {
        dice: tape.value(dice).item().to_f64(),
        focal: tape.value(focal).item().to_f64(),
        nll: tape.value(nll).item().to_f64(),
        combined: tape.value(combined).item().to_f64(),
    };
    for (name, value) in [
        ("dice", terms.dice),
        ("focal", terms.focal),
        ("nll", terms.nll),
        ("combined", terms.combined),
    ] {
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                term: match name {
                    "dice" => "dice",
                    "focal" => "focal",
                    "nll" => "nll",
                    _ => "combined",
                },
                epoch,
                step,
            });
        }
    }

    tape.backward(combined)?;
    let grads = bound.ids().iter().map(|&r| tape.leaf_grad(r)).collect();
    Ok((terms, grads))
}

/// A trained model bundle.
pub struct TrainOutput<T: Scalar> {
    pub model_config: ModelConfig,
    pub mtlr: MtlrConfig,
    /// Parameters after the final epoch.
    pub final_params: ParamStore<T>,
    /// Best-by-validation-c-index parameters (equals final when no
    /// validation set or no comparable pairs ever appeared).
    pub best_params: ParamStore<T>,
    pub epoch_metrics: Vec<EpochMetrics>,
}

/// Trains on `train`, optionally evaluating `val` every `eval_every`
/// epochs. Deterministic given the seed: initialization, data order, and
/// arithmetic all derive from it.
pub fn train_model<T: Scalar>(
    train: &[Subject],
    val: Option<&[Subject]>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    fold: usize,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutput<T>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    cfg.validate()?;
    model_cfg.validate()?;
    let loss_cfg = cfg.loss_config();
    loss_cfg.validate()?;

    let times: Vec<f64> = train.iter().map(|s| s.label.time).collect();
    let mtlr = MtlrConfig::from_quantiles(&times, model_cfg.time_bins)?;
    let mut params = init_params::<T>(model_cfg, &mtlr, cfg.seed)?;
    let prepared = prepare_all::<T>(train, model_cfg)?;
    let prepared_val = match val {
        Some(v) => Some(prepare_all::<T>(v, model_cfg)?),
        None => None,
    };

    let mut sgd = Sgd::new(&params, cfg.momentum);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best_params = params.clone();
    let mut best_c = f64::NEG_INFINITY;
    let mut saw_val_c = false;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37)));
        order.shuffle(&mut rng);

        let lr = lr_at(cfg, epoch);
        let mut acc = BatchTerms {
            dice: 0.0,
            focal: 0.0,
            nll: 0.0,
            combined: 0.0,
        };
        let mut seen = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedSubject<T>> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (terms, grads) =
                run_batch(&params, model_cfg, &mtlr, &loss_cfg, &batch, epoch, step)?;
            sgd.step(&mut params, &grads, lr, cfg.weight_decay);
            let w = batch.len() as f64;
            acc.dice += terms.dice * w;
            acc.focal += terms.focal * w;
            acc.nll += terms.nll * w;
            acc.combined += terms.combined * w;
            seen += batch.len();
        }
        let n = seen as f64;
        let mut em = EpochMetrics {
            fold,
            epoch,
            dice: acc.dice / n,
            focal: acc.focal / n,
            nll: acc.nll / n,
            combined: acc.combined / n,
            dsc: None,
            c_index: None,
        };

        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            if let Some(pv) = &prepared_val {
                let eval = evaluate(&params, model_cfg, &mtlr, pv, cfg.mask_threshold)?;
                em.dsc = Some(eval.dsc_mean);
                em.c_index = eval.c_index;
                if let Some(c) = eval.c_index {
                    saw_val_c = true;
                    if c > best_c {
                        best_c = c;
                        best_params = params.clone();
                    }
                }
            }
        }
        on_epoch(&em);
        metrics.push(em);
    }

    if !saw_val_c {
        best_params = params.clone();
    }
    Ok(TrainOutput {
        model_config: model_cfg.clone(),
        mtlr,
        final_params: params,
        best_params,
        epoch_metrics: metrics,
    })
}

// ---- reports ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc: Option<f64>,
    /// None when the fold had no comparable pair (flagged below).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_index: Option<f64>,
    pub flagged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coxph_c_index: Option<f64>,
    pub mtlr_edges: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Summary {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_c_index: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_c_index: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_dsc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coxph_mean_c_index: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coxph_std_c_index: Option<f64>,
    pub excluded_folds: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub folds: Vec<FoldReport>,
    pub summary: Summary,
    pub wall_clock_secs: f64,
}

/// Filesystem layout for a run's outputs.
pub struct OutputPaths {
    pub dir: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: &Path) -> Result<Self, TrainError> {
        for sub in ["checkpoints", "predictions"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| TrainError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn metrics_file(&self) -> Result<std::fs::File, TrainError> {
        let p = self.dir.join("metrics.jsonl");
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(|e| TrainError::Io {
                path: p.display().to_string(),
                source: e,
            })
    }

    pub fn write_report(&self, report: &RunReport) -> Result<(), TrainError> {
        let p = self.dir.join("report.json");
        let bytes = serde_json::to_vec_pretty(report)?;
        std::fs::write(&p, bytes).map_err(|e| TrainError::Io {
            path: p.display().to_string(),
            source: e,
        })
    }

    fn write_predictions(
        &self,
        tag: &str,
        ids: &[String],
        eval: &EvalOutcome,
    ) -> Result<(), TrainError> {
        let dir = self.dir.join("predictions");
        let csv_path = dir.join(format!("{tag}_risks.csv"));
        let mut out = String::new();
        let k = eval.pmfs.first().map(|p| p.len()).unwrap_or(0);
        out.push_str("id,risk");
        for i in 0..k {
            out.push_str(&format!(",pmf_{i}"));
        }
        out.push('\n');
        for ((id, risk), pmf) in ids.iter().zip(&eval.risks).zip(&eval.pmfs) {
            out.push_str(&format!("{id},{risk}"));
            for p in pmf {
                out.push_str(&format!(",{p}"));
            }
            out.push('\n');
        }
        std::fs::write(&csv_path, out).map_err(|e| TrainError::Io {
            path: csv_path.display().to_string(),
            source: e,
        })?;
        for (id, mask) in ids.iter().zip(&eval.pred_masks) {
            crate::data::write_volume(mask, &dir.join(format!("{tag}_{id}_mask.rvol")))?;
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

/// Deterministic fold assignment: a seeded shuffle chopped into k chunks
/// whose sizes differ by at most one. Every subject lands in exactly one
/// validation fold.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for i in 0..k {
        let size = base + usize::from(i < extra);
        folds.push(order[at..at + size].to_vec());
        at += size;
    }
    folds
}

/// Fits the EHR-only Cox baseline on the train split and scores the
/// validation split; None when the fit or ranking is undefined.
fn coxph_fold_c_index(train: &[Subject], val: &[Subject]) -> Option<f64> {
    let features: Vec<Vec<f64>> = train.iter().map(|s| s.ehr.encoded.clone()).collect();
    let times: Vec<f64> = train.iter().map(|s| s.label.time).collect();
    let events: Vec<u8> = train.iter().map(|s| s.label.event).collect();
    let model = coxph_fit(&features, &times, &events, &CoxOptions::default()).ok()?;
    let risks: Vec<f64> = val.iter().map(|s| model.risk(&s.ehr.encoded)).collect();
    let vt: Vec<f64> = val.iter().map(|s| s.label.time).collect();
    let ve: Vec<u8> = val.iter().map(|s| s.label.event).collect();
    c_index(&risks, &vt, &ve).ok()
}

/// K-fold cross-validation with the EHR-only Cox baseline evaluated on the
/// same folds. Folds with no comparable validation pair are flagged and
/// excluded from the c-index aggregate (a warning lands in the report).
pub fn kfold<T: Scalar>(
    subjects: &[Subject],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&OutputPaths>,
) -> Result<RunReport, TrainError> {
    let started = std::time::Instant::now();
    let k = cfg.folds;
    if k < 2 || subjects.len() < k {
        return Err(TrainError::TooFewForFolds {
            n: subjects.len(),
            k,
        });
    }
    let assignment = fold_assignment(subjects.len(), k, cfg.seed);
    let mut folds = Vec::with_capacity(k);
    let mut metrics_file = match out {
        Some(o) => Some(o.metrics_file()?),
        None => None,
    };

    for (fold, val_idx) in assignment.iter().enumerate() {
        let val: Vec<Subject> = val_idx.iter().map(|&i| subjects[i].clone()).collect();
        let train: Vec<Subject> = (0..subjects.len())
            .filter(|i| !val_idx.contains(i))
            .map(|i| subjects[i].clone())
            .collect();

        let output = train_model::<T>(&train, Some(&val), model_cfg, cfg, fold, |em| {
            if let Some(f) = metrics_file.as_mut() {
                let line = serde_json::to_string(em).expect("metrics serialize");
                let _ = writeln!(f, "{line}");
            }
        })?;

        let prepared_val = prepare_all::<T>(&val, model_cfg)?;
        let eval = evaluate(
            &output.best_params,
            model_cfg,
            &output.mtlr,
            &prepared_val,
            cfg.mask_threshold,
        )?;

        let checkpoint = match out {
            Some(o) => {
                let path = o.dir.join(format!("checkpoints/fold{fold}.ckpt"));
                save_checkpoint(&path, model_cfg, &output.mtlr, &output.best_params)?;
                let ids: Vec<String> = val.iter().map(|s| s.id.clone()).collect();
                o.write_predictions(&format!("fold{fold}"), &ids, &eval)?;
                Some(format!("checkpoints/fold{fold}.ckpt"))
            }
            None => None,
        };

        folds.push(FoldReport {
            fold,
            n_train: train.len(),
            n_val: val.len(),
            dsc: Some(eval.dsc_mean),
            c_index: eval.c_index,
            flagged: eval.c_index.is_none(),
            coxph_c_index: coxph_fold_c_index(&train, &val),
            mtlr_edges: output.mtlr.edges.clone(),
            checkpoint,
        });
    }

    let cs: Vec<f64> = folds.iter().filter_map(|f| f.c_index).collect();
    let ds: Vec<f64> = folds.iter().filter_map(|f| f.dsc).collect();
    let cox: Vec<f64> = folds.iter().filter_map(|f| f.coxph_c_index).collect();
    let (mean_c_index, std_c_index) = mean_std(&cs);
    let (mean_dsc, std_dsc) = mean_std(&ds);
    let (coxph_mean_c_index, coxph_std_c_index) = mean_std(&cox);
    let report = RunReport {
        kind: "kfold".into(),
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        summary: Summary {
            mean_c_index,
            std_c_index,
            mean_dsc,
            std_dsc,
            coxph_mean_c_index,
            coxph_std_c_index,
            excluded_folds: folds
                .iter()
                .filter(|f| f.flagged)
                .map(|f| f.fold)
                .collect(),
        },
        folds,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        o.write_report(&report)?;
    }
    Ok(report)
}

/// Seeded 80/20 (by default) split: train on the large part, report on the
/// held-out part.
pub fn holdout<T: Scalar>(
    subjects: &[Subject],
    ratio: f64,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&OutputPaths>,
) -> Result<RunReport, TrainError> {
    let started = std::time::Instant::now();
    if subjects.len() < 5 {
        return Err(TrainError::TooFewForHoldout(subjects.len()));
    }
    if !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(TrainError::InvalidConfig(format!(
            "holdout ratio {ratio} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let n_train = ((subjects.len() as f64) * ratio).round() as usize;
    let n_train = n_train.clamp(1, subjects.len() - 1);
    let train: Vec<Subject> = order[..n_train].iter().map(|&i| subjects[i].clone()).collect();
    let val: Vec<Subject> = order[n_train..].iter().map(|&i| subjects[i].clone()).collect();

    let mut metrics_file = match out {
        Some(o) => Some(o.metrics_file()?),
        None => None,
    };
    let output = train_model::<T>(&train, Some(&val), model_cfg, cfg, 0, |em| {
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(em).expect("metrics serialize");
            let _ = writeln!(f, "{line}");
        }
    })?;
    let prepared_val = prepare_all::<T>(&val, model_cfg)?;
    let eval = evaluate(
        &output.best_params,
        model_cfg,
        &output.mtlr,
        &prepared_val,
        cfg.mask_threshold,
    )?;

    let checkpoint = match out {
        Some(o) => {
            let path = o.dir.join("checkpoints/holdout.ckpt");
            save_checkpoint(&path, model_cfg, &output.mtlr, &output.best_params)?;
            let ids: Vec<String> = val.iter().map(|s| s.id.clone()).collect();
            o.write_predictions("holdout", &ids, &eval)?;
            Some("checkpoints/holdout.ckpt".to_string())
        }
        None => None,
    };

    let fold = FoldReport {
        fold: 0,
        n_train: train.len(),
        n_val: val.len(),
        dsc: Some(eval.dsc_mean),
        c_index: eval.c_index,
        flagged: eval.c_index.is_none(),
        coxph_c_index: coxph_fold_c_index(&train, &val),
        mtlr_edges: output.mtlr.edges.clone(),
        checkpoint,
    };
    let report = RunReport {
        kind: "holdout".into(),
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        summary: Summary {
            mean_c_index: fold.c_index,
            std_c_index: fold.c_index.map(|_| 0.0),
            mean_dsc: fold.dsc,
            std_dsc: fold.dsc.map(|_| 0.0),
            coxph_mean_c_index: fold.coxph_c_index,
            coxph_std_c_index: fold.coxph_c_index.map(|_| 0.0),
            excluded_folds: if fold.flagged { vec![0] } else { vec![] },
        },
        folds: vec![fold],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        o.write_report(&report)?;
    }
    Ok(report)
}

/// Plain training on the full set: metrics are computed on the training
/// subjects themselves, and the final checkpoint is written when an output
/// directory is given.
pub fn train_full<T: Scalar>(
    subjects: &[Subject],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&OutputPaths>,
) -> Result<(RunReport, TrainOutput<T>), TrainError> {
    let started = std::time::Instant::now();
    let mut metrics_file = match out {
        Some(o) => Some(o.metrics_file()?),
        None => None,
    };
    let output = train_model::<T>(subjects, None, model_cfg, cfg, 0, |em| {
        if let Some(f) = metrics_file.as_mut() {
            let line = serde_json::to_string(em).expect("metrics serialize");
            let _ = writeln!(f, "{line}");
        }
    })?;
    let prepared = prepare_all::<T>(subjects, model_cfg)?;
    let eval = evaluate(
        &output.final_params,
        model_cfg,
        &output.mtlr,
        &prepared,
        cfg.mask_threshold,
    )?;
    let checkpoint = match out {
        Some(o) => {
            let path = o.dir.join("checkpoints/final.ckpt");
            save_checkpoint(&path, model_cfg, &output.mtlr, &output.final_params)?;
            let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
            o.write_predictions("train", &ids, &eval)?;
            Some("checkpoints/final.ckpt".to_string())
        }
        None => None,
    };
    let fold = FoldReport {
        fold: 0,
        n_train: subjects.len(),
        n_val: subjects.len(),
        dsc: Some(eval.dsc_mean),
        c_index: eval.c_index,
        flagged: eval.c_index.is_none(),
        coxph_c_index: None,
        mtlr_edges: output.mtlr.edges.clone(),
        checkpoint,
    };
    let report = RunReport {
        kind: "train".into(),
        model_config: model_cfg.clone(),
        train_config: cfg.clone(),
        summary: Summary {
            mean_c_index: fold.c_index,
            std_c_index: fold.c_index.map(|_| 0.0),
            mean_dsc: fold.dsc,
            std_dsc: fold.dsc.map(|_| 0.0),
            coxph_mean_c_index: None,
            coxph_std_c_index: None,
            excluded_folds: if fold.flagged { vec![0] } else { vec![] },
        },
        folds: vec![fold],
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        o.write_report(&report)?;
    }
    Ok((report, output))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_is_a_step_function() {
        let cfg = TrainConfig {
            epochs: 50,
            decay_epoch: 35,
            lr: 4e-3,
            decay_factor: 10.0,
            ..Default::default()
        };
        assert_eq!(lr_at(&cfg, 1), 4e-3);
        assert_eq!(lr_at(&cfg, 34), 4e-3);
        assert_eq!(lr_at(&cfg, 35), 4e-3);
        assert_eq!(lr_at(&cfg, 36), 4e-4);
        assert_eq!(lr_at(&cfg, 50), 4e-4);
    }

    #[test]
    fn folds_partition_the_dataset() {
        for seed in 0..5u64 {
            for (n, k) in [(10, 5), (11, 3), (7, 2), (5, 5)] {
                let folds = fold_assignment(n, k, seed);
                assert_eq!(folds.len(), k);
                let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
                let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
                let (mn, mx) = (
                    *sizes.iter().min().unwrap(),
                    *sizes.iter().max().unwrap(),
                );
                assert!(mx - mn <= 1);
            }
        }
    }

    #[test]
    fn fold_assignment_is_seed_deterministic() {
        assert_eq!(fold_assignment(20, 4, 9), fold_assignment(20, 4, 9));
        assert_ne!(fold_assignment(20, 4, 9), fold_assignment(20, 4, 10));
    }

    #[test]
    fn config_validation_catches_bad_decay() {
        let cfg = TrainConfig {
            epochs: 10,
            decay_epoch: 10,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

//! The pretraining loop.
//!
//! One step: prepare views and region boxes, run the teacher on the weak
//! views, run the student on the strong views on a tape, match proposals
//! and boxes, evaluate the global loss, backpropagate, update the student
//! and move the teacher towards it.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optimizer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::detector::{
    ema_update, forward, forward_on_tape, init_pair, proposals_from_tape, Backbone, DetectorParams, ParamVars,
    ProposalSet,
};
use crate::error::{Error, Result};
use crate::matching::{box_cost, hungarian, proposal_cost};
use crate::objectives::{global_loss, matched_cosine, mean_positive_count, StudentBatch};
use crate::tensor::{Tape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{Dataset, PreparedImage};
pub use metrics::{export_plots, read_csv, render_csv, MetricsRow};
pub use optimizer::AdamW;

/// Mutable state owned by the trainer thread.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    pub student: DetectorParams,
    pub teacher: DetectorParams,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let (student, teacher) = init_pair(&cfg.detector_config(), cfg.seed)?;
        let optimizer = AdamW::new(&student, cfg.weight_decay);
        Ok(TrainState { step: 0, student, teacher, optimizer })
    }

    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::from_state(self.step, cfg.hash(), &self.student, &self.teacher, &self.optimizer)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<Self> {
        ckpt.validate(cfg)?;
        let (student, teacher, optimizer) = ckpt.into_state(cfg.weight_decay);
        Ok(TrainState { step: ckpt.step, student, teacher, optimizer })
    }
}

/// Optimizer update followed by the EMA, which therefore always sees the
/// updated student.
pub fn apply_update(state: &mut TrainState, grads: &BTreeMap<String, Tensor>, cfg: &RunConfig) -> Result<()> {
    let lr = cfg.learning_rate_at(state.step);
    state.optimizer.step(&mut state.student, grads, lr, cfg.grad_clip)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema_keep_rate)
}

/// Runs one step on a prepared batch and advances `state.step`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[PreparedImage],
    backbone: &Backbone,
    cfg: &RunConfig,
) -> Result<MetricsRow> {
    let step = state.step + 1;
    let at = |e: Error| Error::AtStep { step, source: Box::new(e) };
    let started = Instant::now();
    let row = step_inner(state, batch, backbone, cfg).map_err(at)?;
    state.step = step;
    let wall_ms = if cfg.log_wall_clock { started.elapsed().as_millis() as u64 } else { 0 };
    Ok(MetricsRow { step, wall_ms, ..row })
}

fn step_inner(state: &mut TrainState, batch: &[PreparedImage], backbone: &Backbone, cfg: &RunConfig) -> Result<MetricsRow> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let teacher: Vec<ProposalSet> = batch
        .par_iter()
        .map(|img| {
            let mut p = forward(&state.teacher, backbone, &img.teacher_view)?;
            p.boxes.image_id = img.image_id.clone();
            Ok(p)
        })
        .collect::<Result<_>>()?;
    let features: Vec<Tensor> =
        batch.par_iter().map(|img| backbone.features(&img.student_view)).collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, &state.student, true);
    let mut outputs = Vec::with_capacity(batch.len());
    for f in &features {
        outputs.push(forward_on_tape(&mut tape, &params, f)?);
    }
    let student: Vec<ProposalSet> = outputs
        .iter()
        .zip(batch)
        .map(|(o, img)| proposals_from_tape(&tape, *o, &img.image_id))
        .collect::<Result<_>>()?;

    let mut sigma_prop = Vec::with_capacity(batch.len());
    let mut sigma_box = Vec::with_capacity(batch.len());
    for ((t, s), img) in teacher.iter().zip(&student).zip(batch) {
        sigma_prop.push(hungarian(&proposal_cost(t, s, cfg)?));
        sigma_box.push(hungarian(&box_cost(&img.ss_boxes, s, cfg)?));
    }

    let emb: Vec<_> = outputs.iter().map(|o| o.embeddings).collect();
    let boxes: Vec<_> = outputs.iter().map(|o| o.boxes).collect();
    let stacked = StudentBatch { embeddings: tape.concat_rows(&emb)?, boxes: tape.concat_rows(&boxes)? };
    let ss: Vec<_> = batch.iter().map(|b| b.ss_boxes.clone()).collect();
    let loss = global_loss(&mut tape, &teacher, &stacked, &sigma_prop, &sigma_box, &ss, cfg)?;
    tape.backward(loss.total)?;

    let grads: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(name, v)| (name.clone(), tape.grad(*v).unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))))
        .collect();
    let row = MetricsRow {
        step: 0,
        loss_total: tape.value(loss.total).item(),
        loss_contrast: tape.value(loss.contrast).item(),
        loss_coord: tape.value(loss.coord).item(),
        loss_giou: tape.value(loss.giou).item(),
        matched_cosine: matched_cosine(&teacher, &student, &sigma_prop),
        positives_per_proposal: mean_positive_count(
            &teacher.iter().map(|t| t.boxes.clone()).collect::<Vec<_>>(),
            cfg.delta,
        ),
        wall_ms: 0,
    };
    if !row.loss_total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {}", row.loss_total)));
    }
    apply_update(state, &grads, cfg)?;
    Ok(row)
}

/// Owns everything needed to run steps.
pub struct Trainer {
    pub cfg: RunConfig,
    pub backbone: Backbone,
    pub dataset: Dataset,
    pub state: TrainState,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = data::thread_pool()?;
        let dataset = Dataset::from_config(&cfg, &pool)?;
        let backbone = Backbone::new(&cfg.detector_config(), cfg.seed);
        let state = TrainState::init(&cfg)?;
        Ok(Trainer { cfg, backbone, dataset, state, pool })
    }

    pub fn step(&mut self) -> Result<MetricsRow> {
        let batch = self.dataset.prepare(&self.cfg, self.state.step, &self.pool)?;
        let (state, backbone, cfg) = (&mut self.state, &self.backbone, &self.cfg);
        self.pool.install(|| train_step(state, &batch, backbone, cfg))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub rows: Vec<MetricsRow>,
    pub final_step: u64,
    pub metrics_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub state: TrainState,
}

pub fn pretrain(cfg: &RunConfig) -> Result<PretrainReport> {
    pretrain_observed(cfg, &mut |_| {})
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.psck")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

/// Keeps the rows of an earlier metrics file up to `step`, so a resumed run
/// ends with the same file as an unbroken one.
fn earlier_rows(path: &Path, step: u64) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_csv(path)?.into_iter().filter(|r| r.step <= step).collect())
}

/// Runs `cfg.iterations` steps in total, counting steps already in the
/// resume checkpoint. `observe` sees every new row.
pub fn pretrain_observed(cfg: &RunConfig, observe: &mut dyn FnMut(&MetricsRow)) -> Result<PretrainReport> {
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(path) = &cfg.resume_from {
        trainer.state = TrainState::from_checkpoint(&load_checkpoint(path, cfg)?, cfg)?;
    }
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mpath = cfg.out_dir.as_deref().map(metrics_path);
    let mut rows = match &mpath {
        Some(p) if cfg.resume_from.is_some() => earlier_rows(p, trainer.state.step)?,
        _ => Vec::new(),
    };
    let write_metrics = |rows: &[MetricsRow]| -> Result<()> {
        if let Some(p) = &mpath {
            fs::write(p, render_csv(rows)).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    };
    write_metrics(&rows)?;

    while trainer.state.step < cfg.iterations {
        let row = trainer.step()?;
        observe(&row);
        rows.push(row);
        let step = trainer.state.step;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            write_metrics(&rows)?;
            if let Some(dir) = &cfg.out_dir {
                save_checkpoint(&trainer.state.checkpoint(cfg), &dir.join(format!("checkpoint-{step:06}.psck")))?;
            }
        }
    }
    write_metrics(&rows)?;
    let checkpoint_path = match &cfg.out_dir {
        Some(dir) => {
            let p = final_checkpoint_path(dir);
            save_checkpoint(&trainer.state.checkpoint(cfg), &p)?;
            Some(p)
        }
        None => None,
    };
    Ok(PretrainReport { final_step: trainer.state.step, rows, metrics_path: mpath, checkpoint_path, state: trainer.state })
}

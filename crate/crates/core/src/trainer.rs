//! Two-stage training: generative loss only, then generative plus
//! contrastive. Every step draws its batch and noise from a stream keyed by
//! `(seed, step)`, so a resumed run continues exactly where it stopped.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use attrikit_tensor::{checkpoint, clip_grad_norm, AdamW, AdamWConfig, Session, Tensor};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{AttrError, Result};
use crate::losses::{draw_contrastive, draw_generative, total_loss, GenSampling, LossConfig};
use crate::model::{ModelBundle, ModelConfig};
use crate::seed;
use crate::synthdata::PairRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplier on `lr` for the encoder parameters.
    pub encoder_lr_scale: f64,
    /// Linear warmup length, restarted at the beginning of each stage.
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    /// Fraction of stage 1 during which the encoder body is frozen.
    pub freeze_fraction: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub sampling: GenSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_steps: 8000,
            stage2_steps: 2000,
            batch: 16,
            lr: 2e-3,
            encoder_lr_scale: 0.15,
            warmup_steps: 200,
            clip_norm: 1.0,
            weight_decay: 0.01,
            freeze_fraction: 0.1,
            checkpoint_every: 500,
            seed: 0,
            loss: LossConfig::default(),
            sampling: GenSampling::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AttrError::InvalidConfig(m));
        if self.total_steps() == 0 || self.batch == 0 {
            return bad("training needs at least one step and a non-empty batch".into());
        }
        for (name, steps) in [("stage1", self.stage1_steps), ("stage2", self.stage2_steps)] {
            if steps > 0 && self.warmup_steps > steps {
                return bad(format!("warmup_steps {} exceeds {name}_steps {steps}", self.warmup_steps));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be positive".into());
        }
        if !(self.encoder_lr_scale >= 0.0 && self.encoder_lr_scale.is_finite()) {
            return bad("encoder_lr_scale must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("freeze_fraction must lie in [0, 1] and weight_decay must be non-negative".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        self.loss.validate()?;
        self.sampling.validate()
    }

    /// 1 or 2.
    pub fn stage(&self, step: usize) -> u8 {
        if step < self.stage1_steps { 1 } else { 2 }
    }

    /// `lr * s / warmup` for the first `warmup` steps `s` of each stage.
    pub fn lr_at(&self, step: usize) -> f64 {
        let local = if step < self.stage1_steps { step } else { step - self.stage1_steps };
        if local < self.warmup_steps {
            self.lr * local as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn freeze_steps(&self) -> usize {
        (self.stage1_steps as f64 * self.freeze_fraction).floor() as usize
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: u8,
    #[serde(rename = "L_gen")]
    pub l_gen: f64,
    #[serde(rename = "L_con", default, skip_serializing_if = "Option::is_none")]
    pub l_con: Option<f64>,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub bundle: ModelBundle,
    opt: AdamW<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let bundle = ModelBundle::init(model, cfg.seed)?;
        let opt = AdamW::new(&bundle.params, adam_config(&cfg));
        Ok(Trainer { cfg, bundle, opt, step: 0 })
    }

    /// Restores weights, optimizer moments and the step counter.
    pub fn resume(path: &Path, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let map = checkpoint::load_map(path)?;
        let bundle = ModelBundle::from_tensors(&map)?;
        let step = map
            .get("meta.step")
            .ok_or_else(|| AttrError::CheckpointMismatch("checkpoint has no training state".into()))?
            .item() as usize;
        let mut opt = AdamW::new(&bundle.params, adam_config(&cfg));
        opt.load_state(&bundle.params, &map)?;
        Ok(Trainer { cfg, bundle, opt, step })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut t = self.bundle.tensors();
        t.push(("meta.step".into(), Tensor::scalar(self.step as f32)));
        t.extend(self.opt.state_tensors(&self.bundle.params));
        t
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        checkpoint::save(path, &self.checkpoint_tensors())?;
        Ok(())
    }

    fn set_body_trainable(&mut self, trainable: bool) {
        for id in self.bundle.model.encoder.body_params() {
            self.bundle.params.set_trainable(id, trainable);
        }
    }

    /// Runs one optimization step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &[PairRecord]) -> Result<LogEntry> {
        let cfg = &self.cfg;
        if data.len() < cfg.batch {
            return Err(AttrError::Data(format!("{} pairs is fewer than the batch size {}", data.len(), cfg.batch)));
        }
        let step = self.step;
        let stage = cfg.stage(step);
        let lr = cfg.lr_at(step);
        let mut rng = seed::rng(cfg.seed, seed::stream::TRAIN_STEP.wrapping_add(step as u64));
        let batch: Vec<PairRecord> = sample(&mut rng, data.len(), cfg.batch)
            .into_iter()
            .map(|i| data[i].clone())
            .collect();
        let gen = draw_generative(&batch, &cfg.sampling, self.bundle.model.cfg.image_len(), &mut rng);
        let con = if stage == 2 { Some(draw_contrastive(&batch, &mut rng)?) } else { None };
        let loss_cfg = cfg.loss.clone();
        let freeze = step < cfg.freeze_steps();
        self.set_body_trainable(!freeze);

        let (mut grads, l_gen, l_con, total) = {
            let mut s = Session::new(&self.bundle.params, true);
            let terms = total_loss(&mut s, &self.bundle.model, &batch, &gen, con.as_deref(), &loss_cfg)?;
            let l_gen = s.value(terms.generative).item() as f64;
            let l_con = terms.contrastive.map(|c| s.value(c).item() as f64);
            let total = s.value(terms.total).item() as f64;
            (s.backward(terms.total)?, l_gen, l_con, total)
        };
        self.set_body_trainable(true);
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
        if !total.is_finite() || !grad_norm.is_finite() {
            return Err(AttrError::NonFiniteLoss { step });
        }
        let clipped_norm = attrikit_tensor::global_norm(&grads);
        let params = &self.bundle.params;
        let encoder: Vec<bool> = params.ids().map(|id| params.name(id).starts_with("enc.")).collect();
        let enc_lr = lr * self.cfg.encoder_lr_scale;
        self.opt.step_with(&mut self.bundle.params, &grads, |id| if encoder[id.index()] { enc_lr } else { lr })?;
        self.step += 1;
        Ok(LogEntry { step, stage, l_gen, l_con, total, grad_norm, clipped_norm, lr })
    }

    /// Trains until `end` (capped at the configured total). With `out`, log
    /// lines are appended to `train_log.jsonl` and checkpoints are written
    /// every `checkpoint_every` steps, at the end of stage 1 (`stage1.atk`)
    /// and at the end of training (`final.atk`).
    pub fn run_until(&mut self, data: &[PairRecord], end: usize, out: Option<&Path>) -> Result<Vec<LogEntry>> {
        let end = end.min(self.cfg.total_steps());
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let f = OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut entries = Vec::new();
        while self.step < end {
            let entry = self.train_step(data)?;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                writeln!(w)?;
            }
            entries.push(entry);
            if let Some(dir) = out {
                for path in self.checkpoints_due(dir) {
                    if let Some(w) = log.as_mut() {
                        w.flush()?;
                    }
                    self.save(&path)?;
                }
            }
        }
        if let Some(mut w) = log {
            w.flush()?;
        }
        Ok(entries)
    }

    pub fn run(&mut self, data: &[PairRecord], out: Option<&Path>) -> Result<Vec<LogEntry>> {
        self.run_until(data, self.cfg.total_steps(), out)
    }

    fn checkpoints_due(&self, dir: &Path) -> Vec<PathBuf> {
        let s = self.step;
        let mut due = Vec::new();
        if s.is_multiple_of(self.cfg.checkpoint_every) {
            due.push(dir.join(format!("step_{s:06}.atk")));
        }
        if s == self.cfg.stage1_steps {
            due.push(dir.join("stage1.atk"));
        }
        if s == self.cfg.total_steps() {
            due.push(dir.join("final.atk"));
        }
        due
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamWConfig {
    AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }
}

/// Trains from scratch and returns the final model with its log.
pub fn train(
    data: &[PairRecord],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(ModelBundle, Vec<LogEntry>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    let log = t.run(data, out)?;
    Ok((t.bundle, log))
}

/// Reads a training log written by [`Trainer::run_until`].
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}



#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    model: ModelConfig,
    train: TrainConfig,
    pairs: usize,
}

/// Newest `step_NNNNNN.atk` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let mut best: Option<(usize, PathBuf)> = None;
    if !dir.exists() {
        return Ok(None);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".atk"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Trains into `dir`, continuing from the newest checkpoint there. A
/// directory that already holds `final.atk` is loaded without training.
/// Fails if `dir` was written by a different configuration.
pub fn train_in_dir(data: &[PairRecord], model: &ModelConfig, cfg: &TrainConfig, dir: &Path) -> Result<ModelBundle> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let record = RunRecord { model: model.clone(), train: cfg.clone(), pairs: data.len() };
    let record_path = dir.join("run.json");
    if record_path.exists() {
        let existing: RunRecord = serde_json::from_str(&fs::read_to_string(&record_path)?)?;
        if existing != record {
            return Err(AttrError::InvalidConfig(format!("{} holds a run with a different configuration", dir.display())));
        }
    } else {
        fs::write(&record_path, serde_json::to_string_pretty(&record)?)?;
    }
    let final_path = dir.join("final.atk");
    if final_path.exists() {
        return ModelBundle::load(&final_path);
    }
    let mut trainer = match latest_checkpoint(dir)? {
        Some(path) => Trainer::resume(&path, cfg.clone())?,
        None => Trainer::new(model, cfg.clone())?,
    };
    if trainer.bundle.model.cfg != *model {
        return Err(AttrError::CheckpointMismatch("checkpoint model differs from the configured model".into()));
    }
    truncate_log(&dir.join("train_log.jsonl"), trainer.step())?;
    trainer.run(data, Some(dir))?;
    if !final_path.exists() {
        trainer.save(&final_path)?;
    }
    Ok(trainer.bundle)
}

/// Drops log lines at or after `step`, so a resumed run does not repeat them.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<LogEntry> = read_log(path)?.into_iter().filter(|e| e.step < step).collect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in kept {
        serde_json::to_writer(&mut w, &e)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    fn tiny_model() -> ModelConfig {
        ModelConfig { dim: 16, heads: 2, queries: 2, encoder_depth: 2, connector_depth: 1, decoder_depth: 1, ..ModelConfig::default() }
    }

    fn short() -> TrainConfig {
        TrainConfig { stage1_steps: 4, stage2_steps: 3, batch: 4, warmup_steps: 2, checkpoint_every: 2, freeze_fraction: 0.5, ..TrainConfig::default() }
    }

    fn weights(t: &Trainer) -> Vec<(String, Tensor<f32>)> {
        t.bundle.params.named_f32()
    }

    #[test]
    fn log_follows_the_two_stage_schedule() {
        let data = generate(1, 12, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&tiny_model(), short()).unwrap();
        let entries = t.run(&data, Some(dir.path())).unwrap();
        assert_eq!(read_log(&dir.path().join("train_log.jsonl")).unwrap(), entries);
        for e in &entries {
            assert_eq!(e.stage == 1, e.l_con.is_none());
            assert!(e.clipped_norm <= 1.0 + 1e-9);
            let local = if e.step < 4 { e.step } else { e.step - 4 };
            if local < 2 {
                assert_eq!(e.lr, 2e-3 * local as f64 / 2.0);
            }
        }
        for f in ["step_000002.atk", "step_000004.atk", "step_000006.atk", "stage1.atk", "final.atk"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let line = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
        assert!(!line.lines().next().unwrap().contains("L_con"));
        assert!(line.lines().last().unwrap().contains("L_con"));
    }

    #[test]
    fn zero_encoder_scale_leaves_the_encoder_unchanged() {
        let data = generate(3, 8, 1).unwrap();
        let cfg = TrainConfig { encoder_lr_scale: 0.0, weight_decay: 0.0, ..short() };
        let mut t = Trainer::new(&tiny_model(), cfg).unwrap();
        let before = weights(&t);
        t.run_until(&data, 2, None).unwrap();
        let after = weights(&t);
        let pairs = || before.iter().zip(&after);
        assert!(pairs().filter(|((n, _), _)| n.starts_with("enc.")).all(|((_, a), (_, b))| a == b));
        assert!(pairs().filter(|((n, _), _)| n.starts_with("dec.")).any(|((_, a), (_, b))| a != b));
    }

    #[test]
    fn same_seed_gives_identical_weights() {
        let data = generate(2, 8, 1).unwrap();
        let mut a = Trainer::new(&tiny_model(), short()).unwrap();
        let mut b = Trainer::new(&tiny_model(), short()).unwrap();
        a.run(&data, None).unwrap();
        b.run(&data, None).unwrap();
        assert_eq!(a.checkpoint_tensors(), b.checkpoint_tensors());
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let data = generate(3, 8, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.atk");
        let mut straight = Trainer::new(&tiny_model(), short()).unwrap();
        straight.run(&data, None).unwrap();

        let mut first = Trainer::new(&tiny_model(), short()).unwrap();
        first.run_until(&data, 5, None).unwrap();
        first.save(&path).unwrap();
        let mut resumed = Trainer::resume(&path, short()).unwrap();
        assert_eq!(resumed.step(), 5);
        assert_eq!(weights(&resumed), weights(&first));
        resumed.run(&data, None).unwrap();
        assert_eq!(resumed.checkpoint_tensors(), straight.checkpoint_tensors());
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.atk");
        Trainer::new(&tiny_model(), short()).unwrap().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            Trainer::resume(&path, short()),
            Err(AttrError::Tensor(attrikit_tensor::TensorError::ChecksumMismatch { .. }))
        ));
    }

    #[test]
    fn frozen_body_does_not_move() {
        let data = generate(4, 8, 1).unwrap();
        let mut t = Trainer::new(&tiny_model(), short()).unwrap();
        let body = t.bundle.model.encoder.body_params();
        let before: Vec<_> = body.iter().map(|&id| t.bundle.params.get(id).clone()).collect();
        // freeze_steps = 2; the first step has lr 0, so check after step 2.
        t.run_until(&data, 2, None).unwrap();
        let after: Vec<_> = body.iter().map(|&id| t.bundle.params.get(id).clone()).collect();
        assert_eq!(before, after);
        t.run_until(&data, 4, None).unwrap();
        let later: Vec<_> = body.iter().map(|&id| t.bundle.params.get(id).clone()).collect();
        assert_ne!(before, later);
    }

    #[test]
    fn interrupted_directory_run_completes_identically() {
        let data = generate(6, 8, 1).unwrap();
        let cfg = short();
        let whole = tempfile::tempdir().unwrap();
        let a = train_in_dir(&data, &tiny_model(), &cfg, whole.path()).unwrap();

        let parts = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&tiny_model(), cfg.clone()).unwrap();
        t.run_until(&data, 5, Some(parts.path())).unwrap();
        std::fs::write(parts.path().join("run.json"), std::fs::read(whole.path().join("run.json")).unwrap()).unwrap();
        let b = train_in_dir(&data, &tiny_model(), &cfg, parts.path()).unwrap();
        assert_eq!(a.params.named_f32(), b.params.named_f32());
        assert_eq!(
            read_log(&whole.path().join("train_log.jsonl")).unwrap(),
            read_log(&parts.path().join("train_log.jsonl")).unwrap()
        );
        let again = train_in_dir(&data, &tiny_model(), &cfg, parts.path()).unwrap();
        assert_eq!(again.params.named_f32(), a.params.named_f32());
        let other = TrainConfig { seed: 9, ..cfg };
        assert!(train_in_dir(&data, &tiny_model(), &other, parts.path()).is_err());
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let data = generate(5, 2, 1).unwrap();
        let mut t = Trainer::new(&tiny_model(), short()).unwrap();
        assert!(matches!(t.train_step(&data), Err(AttrError::Data(_))));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig { warmup_steps: 5000, stage2_steps: 100, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { stage1_steps: 0, stage2_steps: 0, ..TrainConfig::default() }.validate().is_err());
        TrainConfig { stage2_steps: 0, ..TrainConfig::default() }.validate().unwrap();
        let c = TrainConfig::default();
        assert_eq!(c.freeze_steps(), 800);
        assert_eq!(c.lr_at(8100), 2e-3 * 100.0 / 200.0);
    }
}

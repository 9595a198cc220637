use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use srcorrnet_nn::{Checkpoint, Graph, NnError, ParamId, ParamStore, Var};

use super::eval::{evaluate, EvalReport};
use super::optim::{AdamW, AdamWConfig, LrSchedule};
use super::{derive_seed, thread_limit};
use crate::error::{invalid, Error, Result};
use crate::mixsim::{DatasetSpec, LoadedSample, MixtureSample};
use crate::model::{Mode, ModelConfig, ModelInput, SplitKind, SrCorrNet};
use crate::objectives::{training_objective, LossConfig};
use crate::signal::{Stft, Waveform};

pub const CHECKPOINT_FORMAT: &str = "srcorrnet-checkpoint-v1";

/// One mixture with its reference-channel targets.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub mixture: Waveform,
    pub targets: Vec<Vec<f64>>,
    pub k_true: usize,
}

impl From<MixtureSample> for TrainExample {
    fn from(s: MixtureSample) -> Self {
        Self {
            mixture: s.mixture,
            targets: s.targets,
            k_true: s.k_true,
        }
    }
}

impl From<LoadedSample> for TrainExample {
    fn from(s: LoadedSample) -> Self {
        Self {
            mixture: s.mixture,
            targets: s.targets,
            k_true: s.k_true,
        }
    }
}

impl TrainExample {
    /// Samples `start..start + len` of mixture and targets.
    pub fn crop(&self, start: usize, len: usize) -> TrainExample {
        TrainExample {
            mixture: self.mixture.segment(start, len),
            targets: self
                .targets
                .iter()
                .map(|t| (start..start + len).map(|i| t.get(i).copied().unwrap_or(0.0)).collect())
                .collect(),
            k_true: self.k_true,
        }
    }
}

/// Training examples: a fixed set reshuffled every epoch, or an endless
/// generator stream where every item is a fresh mixture.
#[derive(Debug, Clone)]
pub enum TrainData {
    Fixed(Vec<TrainExample>),
    Stream { spec: DatasetSpec, epoch_size: usize },
}

impl TrainData {
    fn epoch_len(&self) -> usize {
        match self {
            TrainData::Fixed(v) => v.len(),
            TrainData::Stream { epoch_size, .. } => *epoch_size,
        }
    }

    /// Example for global item index `item` under shuffling seed `seed`.
    fn item(&self, item: u64, seed: u64) -> Result<TrainExample> {
        match self {
            TrainData::Fixed(v) => {
                let n = v.len() as u64;
                let (epoch, pos) = (item / n, (item % n) as usize);
                let mut order: Vec<usize> = (0..v.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
                Ok(v[order[pos]].clone())
            }
            TrainData::Stream { spec, .. } => Ok(spec.generate(item as usize)?.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimizer updates.
    pub steps: u64,
    pub batch_size: usize,
    /// Training segment length in seconds; `None` uses whole examples.
    pub crop_s: Option<f64>,
    pub lr: LrSchedule,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub loss: LossConfig,
    pub log_every: u64,
    /// Evaluate on the monitor set every this many steps.
    pub eval_every: Option<u64>,
    /// Stop once the monitor SI-SNRi reaches this value.
    pub stop_at_si_snri: Option<f64>,
    pub checkpoint_every: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            crop_s: None,
            lr: LrSchedule::default(),
            optimizer: AdamWConfig::default(),
            grad_clip: 5.0,
            loss: LossConfig::default(),
            log_every: 1,
            eval_every: None,
            stop_at_si_snri: None,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return invalid("train config", "batch_size and log_every must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return invalid("train config", "grad_clip must be positive");
        }
        if let Some(c) = self.crop_s {
            if !(c > 0.0) {
                return invalid("train config", format!("crop_s {c}"));
            }
        }
        if self.eval_every == Some(0) || self.checkpoint_every == Some(0) {
            return invalid("train config", "intervals must be positive");
        }
        self.lr.validate()?;
        self.loss.validate()
    }
}

/// Resumable optimizer position. Data order and crops are pure functions of
/// `(seed, step)`, so no generator state is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub seed: u64,
    pub optimizer: AdamW,
    pub best_si_snri: Option<f64>,
}

/// One log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub loss: f64,
    pub lr: f64,
    pub alpha: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_snri: Option<f64>,
}

struct ItemGrad {
    loss: f64,
    grads: Vec<(ParamId, Vec<f32>)>,
}

pub struct Trainer {
    pub net: SrCorrNet,
    pub store: ParamStore<f32>,
    pub state: TrainState,
    pub config: TrainConfig,
    data: TrainData,
    stft: Stft,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model: &ModelConfig, config: TrainConfig, data: TrainData) -> Result<Self> {
        let mut store = ParamStore::new(config.seed);
        let net = SrCorrNet::build(model, &mut store)?;
        let optimizer = AdamW::new(config.optimizer, &store);
        Self::assemble(net, store, optimizer, 0, None, config, data)
    }

    /// Continues from a checkpoint written by [`Trainer::save`]; `config`
    /// must describe the same run.
    pub fn resume(path: impl AsRef<Path>, config: TrainConfig, data: TrainData) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let (net, store) = model_from_checkpoint(&ckpt)?;
        let meta = &ckpt.meta["train"];
        let step = meta["step"].as_u64().ok_or_else(|| Error::Invalid {
            what: "checkpoint".into(),
            detail: "no training state".into(),
        })?;
        if meta["seed"].as_u64() != Some(config.seed) {
            return invalid("resume", "seed differs from the checkpointed run");
        }
        let mut optimizer = AdamW::new(config.optimizer, &store);
        optimizer.t = meta["optimizer_t"].as_u64().unwrap_or(step);
        for (i, (name, _)) in store.iter().enumerate() {
            for (buf, kind) in [(&mut optimizer.m[i], "m"), (&mut optimizer.v[i], "v")] {
                let key = format!("adam.{kind}.{name}");
                *buf = ckpt.tensors.get(&key).cloned().ok_or_else(|| Error::Invalid {
                    what: "checkpoint".into(),
                    detail: format!("missing tensor `{key}`"),
                })?;
            }
        }
        let best = meta["best_si_snri"].as_f64();
        Self::assemble(net, store, optimizer, step, best, config, data)
    }

    fn assemble(
        net: SrCorrNet,
        store: ParamStore<f32>,
        optimizer: AdamW,
        step: u64,
        best: Option<f64>,
        config: TrainConfig,
        data: TrainData,
    ) -> Result<Self> {
        config.validate()?;
        let model = net.config();
        if data.epoch_len() == 0 {
            return invalid("training data", "no examples");
        }
        match &data {
            TrainData::Fixed(v) => {
                for ex in v {
                    check_example(model, ex)?;
                }
            }
            TrainData::Stream { spec, .. } => {
                spec.validate()?;
                if spec.mics != model.mics || (model.split == SplitKind::Fixed && (spec.k_min != model.speakers || spec.k_max != model.speakers)) || spec.k_max > model.speakers {
                    return invalid("training data", "generator does not match the model's channel or speaker counts");
                }
            }
        }
        let stft = Stft::new(model.stft)?;
        Ok(Self {
            state: TrainState {
                step,
                seed: config.seed,
                optimizer,
                best_si_snri: best,
            },
            net,
            store,
            config,
            data,
            stft,
        })
    }

    /// Epoch of the first item of update `step` (0-based updates).
    pub fn epoch_of(&self, step: u64) -> u32 {
        ((step * self.config.batch_size as u64) / self.data.epoch_len() as u64) as u32
    }

    /// Seed identifying the batch of update `step`; reported on failures.
    pub fn batch_seed(&self, step: u64) -> u64 {
        derive_seed(self.config.seed ^ 0x5EED, step)
    }

    fn batch(&self, step: u64) -> Result<Vec<TrainExample>> {
        let bs = self.config.batch_size as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.batch_seed(step));
        (0..bs)
            .map(|b| {
                let ex = self.data.item(step * bs + b, self.config.seed)?;
                let crop = self.config.crop_s.map(|c| (c * ex.mixture.sample_rate() as f64).round() as usize);
                Ok(match crop {
                    Some(len) if len < ex.mixture.len() => random_crop(&ex, len, &mut rng),
                    _ => ex,
                })
            })
            .collect()
    }

    /// Runs one update and returns its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let epoch = self.epoch_of(step);
        let batch = self.batch(step)?;
        let threads = thread_limit().min(batch.len());
        let results: Vec<Result<ItemGrad>> = if threads <= 1 {
            batch.iter().map(|ex| self.item_grad(ex, epoch)).collect()
        } else {
            let per = batch.len().div_ceil(threads);
            let this = &*self;
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .chunks(per)
                    .map(|chunk| s.spawn(move || chunk.iter().map(|ex| this.item_grad(ex, epoch)).collect::<Vec<_>>()))
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let scale = 1.0 / batch.len() as f32;
        self.store.zero_grad();
        let mut loss = 0.0;
        for r in results {
            let r = match r {
                Err(Error::Nn(NnError::NonFinite { .. })) => {
                    return Err(Error::NonFiniteLoss {
                        step,
                        seed: self.batch_seed(step),
                    })
                }
                r => r?,
            };
            loss += r.loss / batch.len() as f64;
            for (id, g) in r.grads {
                let scaled: Vec<f32> = g.iter().map(|v| v * scale).collect();
                self.store.add_grad(id, &scaled);
            }
        }
        let grad_norm = self.store.grad_norm();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                seed: self.batch_seed(step),
            });
        }
        self.store.clip_grad_norm(self.config.grad_clip);
        let lr = self.config.lr.lr_at(step + 1, epoch);
        self.state.optimizer.step(&mut self.store, lr)?;
        self.state.step += 1;
        Ok(StepRecord {
            step: self.state.step,
            epoch,
            loss,
            lr,
            alpha: self.config.loss.alpha_at(epoch),
            grad_norm,
            si_snri: None,
        })
    }

    /// Loss and parameter gradients of one example.
    fn item_grad(&self, ex: &TrainExample, epoch: u32) -> Result<ItemGrad> {
        let model = self.net.config();
        let input = ModelInput::<f32>::from_waveform(model, &self.stft, &ex.mixture)?;
        let mut g = Graph::new();
        let k_true = (model.split == SplitKind::Attractor).then_some(ex.k_true);
        let out = self.net.forward(&mut g, &self.store, &input, k_true, Mode::Train)?;
        let len = ex.mixture.len();
        let stages = out
            .stages
            .iter()
            .map(|&v| stage_waveforms(&g, v, &self.stft, len))
            .collect::<Result<Vec<_>>>()?;
        let probs: Option<Vec<f64>> = out
            .attractor
            .as_ref()
            .map(|a| g.value(a.probs).data().iter().map(|&p| p as f64).collect());
        let obj = training_objective(
            &stages,
            &ex.targets,
            &self.config.loss,
            epoch,
            &self.stft,
            probs.as_deref().map(|p| (p, ex.k_true)),
        )?;
        let mut seeds: Vec<(Var, Vec<f32>)> = Vec::with_capacity(out.stages.len() + 1);
        for (&v, grads) in out.stages.iter().zip(&obj.stage_grads) {
            let frames = g.shape(v)[1];
            let mut seed = Vec::with_capacity(g.value(v).numel());
            for gw in grads {
                for z in self.stft.synthesize_adjoint(gw, frames)? {
                    seed.push(z.re as f32);
                    seed.push(z.im as f32);
                }
            }
            seeds.push((v, seed));
        }
        if let (Some(a), Some(lg)) = (&out.attractor, &obj.logit_grad) {
            seeds.push((a.logits, lg.iter().map(|&v| v as f32).collect()));
        }
        let grads = g.backward_with(&seeds)?;
        Ok(ItemGrad {
            loss: obj.total,
            grads: grads.params(&g).map(|(id, v)| (id, v.to_vec())).collect(),
        })
    }

    /// Trains until `config.steps`, writing JSON lines to `log`. `monitor`
    /// is evaluated every `eval_every` steps and drives early stopping.
    pub fn run(&mut self, mut log: impl Write, monitor: Option<&[TrainExample]>, checkpoint: Option<&Path>) -> Result<Option<EvalReport>> {
        let mut last_eval = None;
        while self.state.step < self.config.steps {
            let mut rec = self.step()?;
            let mut stop = false;
            if let (Some(every), Some(set)) = (self.config.eval_every, monitor) {
                if rec.step % every == 0 || rec.step == self.config.steps {
                    let report = evaluate(&self.net, &self.store, set, self.config.loss.clip_db)?;
                    let v = report.mean_si_snri;
                    rec.si_snri = Some(v);
                    if self.state.best_si_snri.is_none_or(|b| v > b) {
                        self.state.best_si_snri = Some(v);
                    }
                    stop = self.config.stop_at_si_snri.is_some_and(|t| v >= t);
                    last_eval = Some(report);
                }
            }
            if rec.step % self.config.log_every == 0 || rec.si_snri.is_some() || stop {
                writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            }
            if let (Some(every), Some(path)) = (self.config.checkpoint_every, checkpoint) {
                if rec.step % every == 0 {
                    self.save(path)?;
                }
            }
            if stop {
                break;
            }
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(last_eval)
    }

    /// Writes model weights, optimizer moments and the step counter.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = model_checkpoint(&self.net, &self.store)?;
        ckpt.meta["train"] = serde_json::json!({
            "step": self.state.step,
            "seed": self.state.seed,
            "optimizer_t": self.state.optimizer.t,
            "best_si_snri": self.state.best_si_snri,
        });
        for (i, (name, _)) in self.store.iter().enumerate() {
            ckpt.insert(format!("adam.m.{name}"), &self.state.optimizer.m[i]);
            ckpt.insert(format!("adam.v.{name}"), &self.state.optimizer.v[i]);
        }
        if let Some(dir) = path.as_ref().parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        Ok(ckpt.save(path)?)
    }
}

fn check_example(model: &ModelConfig, ex: &TrainExample) -> Result<()> {
    if ex.mixture.num_channels() != model.mics {
        return invalid("training example", format!("{} channels, model expects {}", ex.mixture.num_channels(), model.mics));
    }
    if ex.targets.len() != ex.k_true || ex.targets.iter().any(|t| t.len() != ex.mixture.len()) {
        return invalid("training example", "targets must match K_true and the mixture length");
    }
    let ok = match model.split {
        SplitKind::Fixed => ex.k_true == model.speakers,
        SplitKind::Attractor => (1..=model.speakers).contains(&ex.k_true),
    };
    if !ok {
        return invalid("training example", format!("K_true {} unsupported by the model", ex.k_true));
    }
    Ok(())
}

/// Crop avoiding segments where a target is silent.
fn random_crop(ex: &TrainExample, len: usize, rng: &mut impl Rng) -> TrainExample {
    let max_start = ex.mixture.len() - len;
    let mut crop = ex.crop(0, len);
    for _ in 0..8 {
        crop = ex.crop(rng.random_range(0..=max_start), len);
        if crop.targets.iter().all(|t| t.iter().any(|v| *v != 0.0)) {
            break;
        }
    }
    crop
}

/// Time-domain outputs `[k][sample]` of a `[k, t, f, 2]` stage.
pub(crate) fn stage_waveforms(g: &Graph<f32>, v: Var, stft: &Stft, len: usize) -> Result<Vec<Vec<f64>>> {
    let sh = g.shape(v);
    let (k, t, f) = (sh[0], sh[1], sh[2]);
    let d = g.value(v).data();
    (0..k)
        .map(|s| {
            let spec: Vec<Complex64> = d[s * t * f * 2..(s + 1) * t * f * 2]
                .chunks(2)
                .map(|p| Complex64::new(p[0] as f64, p[1] as f64))
                .collect();
            stft.synthesize(&spec, t, len)
        })
        .collect()
}

pub(crate) fn model_checkpoint(net: &SrCorrNet, store: &ParamStore<f32>) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(serde_json::json!({
        "format": CHECKPOINT_FORMAT,
        "model": serde_json::to_value(net.config())?,
    }));
    ckpt.insert_params("param.", store);
    Ok(ckpt)
}

fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(SrCorrNet, ParamStore<f32>)> {
    if ckpt.meta["format"] != CHECKPOINT_FORMAT {
        return invalid("checkpoint", "unrecognized format tag");
    }
    let cfg: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())?;
    let mut store = ParamStore::new(0);
    let net = SrCorrNet::build(&cfg, &mut store)?;
    ckpt.load_params("param.", &mut store)?;
    Ok((net, store))
}

/// Model and weights stored at `path`.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SrCorrNet, ParamStore<f32>)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

//! Optimization loops: joint segmentation/masked-image pretraining, encoder
//! finetuning and adversarial text-removal training, with learning-rate
//! schedules, an AdamW optimizer, JSON-lines loss logs and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{flip_draw, shuffled_order, transform, transform_pretrain, Dataset, PretrainSample, TrainSample};
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    adversarial_losses, composite_image, dice_loss, msr_loss, perceptual_style_losses, total_loss, FeatureExtractor,
    LossParts, ScaleOutputs,
};
use crate::model::{Generator, DECODER_PREFIX, ENCODER_PREFIX, SEG_HEAD_PREFIX};
use crate::nn::{scalar_f64, Mode, ParamStore};
use crate::segmim::{generate_mim_mask, pretrain_loss};
use crate::settings::RunConfig;
use crate::tensor_io;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    FinetuneEncoder,
    Train,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::FinetuneEncoder => "finetune-encoder",
            Phase::Train => "train",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    StrLinear,
    PretrainStep,
    FinetuneCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub base_lr: f64,
    pub final_lr: f64,
    pub epochs: usize,
    pub drop_epoch: usize,
}

impl Schedule {
    /// Linear decay from 1e-4 to 1e-5 at the last epoch.
    pub fn str_linear(epochs: usize) -> Self {
        Self { mode: ScheduleMode::StrLinear, base_lr: 1e-4, final_lr: 1e-5, epochs, drop_epoch: 0 }
    }

    /// 1e-4 before `drop_epoch`, 1e-5 from it on.
    pub fn pretrain_step(epochs: usize, drop_epoch: usize) -> Self {
        Self { mode: ScheduleMode::PretrainStep, base_lr: 1e-4, final_lr: 1e-5, epochs, drop_epoch }
    }

    /// Cosine decay from 0.00125 towards zero.
    pub fn finetune_cosine(epochs: usize) -> Self {
        Self { mode: ScheduleMode::FinetuneCosine, base_lr: 0.00125, final_lr: 0.0, epochs, drop_epoch: 0 }
    }

    pub fn for_phase(phase: Phase, cfg: &RunConfig) -> Self {
        let t = &cfg.train;
        let mut s = match phase {
            Phase::Pretrain => Self::pretrain_step(t.epochs, t.drop_epoch),
            Phase::FinetuneEncoder => Self::finetune_cosine(t.epochs),
            Phase::Train => Self::str_linear(t.epochs),
        };
        if let Some(lr) = t.lr {
            s.base_lr = lr;
        }
        if let Some(lr) = t.final_lr {
            s.final_lr = lr;
        }
        s
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::arg(format!("epoch {epoch} outside schedule of {} epochs", self.epochs)));
        }
        Ok(match self.mode {
            ScheduleMode::StrLinear if self.epochs == 1 => self.base_lr,
            ScheduleMode::StrLinear => {
                let t = epoch as f64 / (self.epochs - 1) as f64;
                self.base_lr + (self.final_lr - self.base_lr) * t
            }
            ScheduleMode::PretrainStep => {
                if epoch < self.drop_epoch {
                    self.base_lr
                } else {
                    self.final_lr
                }
            }
            ScheduleMode::FinetuneCosine => {
                let t = epoch as f64 / self.epochs as f64;
                self.final_lr + (self.base_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with decoupled weight decay on parameters of rank two or more.
/// Parameters that receive no gradient in a step are left untouched.
pub struct AdamW {
    params: Vec<(String, Var)>,
    cfg: AdamWConfig,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Self {
        Self { params, cfg, m: BTreeMap::new(), v: BTreeMap::new(), steps: BTreeMap::new() }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Applies one update; returns the names of the parameters changed.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<Vec<String>> {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let mut updated = Vec::new();
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            // Gradients can carry op history; moments must not keep it alive.
            let g = g.detach();
            let t = self.steps.get(name).copied().unwrap_or(0) + 1;
            let m = match self.m.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * beta2)? + (g2 * (1.0 - beta2))?)?,
                None => (g2 * (1.0 - beta2))?,
            };
            let m_hat = (&m / (1.0 - beta1.powi(t as i32)))?;
            let v_hat = (&v / (1.0 - beta2.powi(t as i32)))?;
            let mut theta = var.as_tensor().detach();
            if var.rank() >= 2 && weight_decay != 0.0 {
                theta = (theta * (1.0 - lr * weight_decay))?;
            }
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            var.set(&(theta - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            self.steps.insert(name.clone(), t);
            updated.push(name.clone());
        }
        Ok(updated)
    }

    fn state(&self, prefix: &str, tensors: &mut BTreeMap<String, Tensor>) -> serde_json::Value {
        for (k, t) in &self.m {
            tensors.insert(format!("{prefix}{k}.m"), t.clone());
        }
        for (k, t) in &self.v {
            tensors.insert(format!("{prefix}{k}.v"), t.clone());
        }
        serde_json::to_value(&self.steps).expect("step counts serialize")
    }

    fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>, steps: &serde_json::Value) -> Result<()> {
        self.steps = serde_json::from_value(steps.clone()).map_err(|e| Error::Corrupt(format!("optimizer steps: {e}")))?;
        self.m.clear();
        self.v.clear();
        for name in self.steps.keys() {
            let get = |s: &str| {
                tensors.get(&format!("{prefix}{name}.{s}")).cloned().ok_or_else(|| {
                    Error::Corrupt(format!("missing optimizer moment `{prefix}{name}.{s}`"))
                })
            };
            self.m.insert(name.clone(), get("m")?);
            self.v.insert(name.clone(), get("v")?);
        }
        Ok(())
    }
}

/// Mixes a run seed with stream tags into an independent 64-bit seed.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

const STREAM_ORDER: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_MIM: u64 = 3;
const STREAM_DISC: u64 = 4;

/// Scalar losses of one step, by name.
pub type StepLosses = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub losses: StepLosses,
}

/// Append-only JSON-lines loss log.
pub struct LossLog {
    out: Option<Box<dyn Write>>,
}

impl LossLog {
    pub fn none() -> Self {
        Self { out: None }
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: Some(Box::new(std::io::BufWriter::new(f))) })
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(out) = self.out.as_mut() {
            serde_json::to_writer(&mut *out, rec).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Corrupt(format!("loss log: {e}"))))
        .collect()
}

/// Discriminator, its optimizer and the frozen feature extractor, present in
/// the adversarial phase only.
pub struct Adversary {
    pub disc: Discriminator,
    pub store: ParamStore,
    pub opt: AdamW,
    pub extractor: FeatureExtractor,
}

/// Everything that evolves during a run.
pub struct TrainState {
    pub phase: Phase,
    pub cfg: RunConfig,
    pub schedule: Schedule,
    pub generator: Generator,
    pub opt: AdamW,
    pub adversary: Option<Adversary>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    dtype: DType,
    device: Device,
}

pub const CHECKPOINT_KIND: &str = "text-eraser-checkpoint";
const GEN: &str = "gen/";
const DISC: &str = "disc/";
const OPT_G: &str = "opt_g/";
const OPT_D: &str = "opt_d/";

fn adam_cfg(cfg: &RunConfig) -> AdamWConfig {
    let t = &cfg.train;
    AdamWConfig { beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }
}

fn trainable(phase: Phase, store: &ParamStore) -> Vec<(String, Var)> {
    match phase {
        Phase::Pretrain => store.vars().map(|(k, v)| (k.clone(), v.clone())).collect(),
        Phase::FinetuneEncoder => store.select(&[ENCODER_PREFIX, SEG_HEAD_PREFIX]),
        Phase::Train => store.select(&[ENCODER_PREFIX, DECODER_PREFIX]),
    }
}

fn check_finite(name: &'static str, t: &Tensor) -> Result<f64> {
    let v = scalar_f64(t)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(name));
    }
    Ok(v)
}

impl TrainState {
    /// Fresh state with weights drawn from `cfg.train.seed`.
    pub fn new(phase: Phase, cfg: &RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let generator = Generator::new(&cfg.model, seed, dtype, device)?;
        let opt = AdamW::new(trainable(phase, generator.store()), adam_cfg(cfg));
        let adversary = match phase {
            Phase::Train => {
                let (disc, store) =
                    Discriminator::build_with(cfg.discriminator.widths, derive_seed(seed, &[STREAM_DISC]), dtype, device)?;
                let opt = AdamW::new(store.vars().map(|(k, v)| (k.clone(), v.clone())).collect(), adam_cfg(cfg));
                let extractor = match &cfg.extractor.weights {
                    Some(p) => FeatureExtractor::load(Path::new(p), dtype, device)?,
                    None => FeatureExtractor::random(cfg.extractor.seed, cfg.extractor.widths, dtype, device)?,
                };
                Some(Adversary { disc, store, opt, extractor })
            }
            _ => None,
        };
        Ok(Self {
            phase,
            cfg: cfg.clone(),
            schedule: Schedule::for_phase(phase, cfg),
            generator,
            opt,
            adversary,
            epoch: 0,
            batch_in_epoch: 0,
            step: 0,
            dtype,
            device: device.clone(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }

    fn to_batch(&self, images: &[&Image]) -> Result<Tensor> {
        Image::batch_tensor(images, self.dtype, &self.device)
    }

    /// One adversarial step on prepared tensors: discriminator update on the
    /// hinge loss, then generator update on the weighted total with the
    /// discriminator frozen.
    pub fn train_step_tensors(&mut self, input: &Tensor, gt: &Tensor, mask: &Tensor, lr: f64) -> Result<StepLosses> {
        let adv = self.adversary.as_mut().ok_or_else(|| Error::arg("adversarial step outside the train phase"))?;
        let w = &self.cfg.loss;
        let out = self.generator.forward(input, Mode::Train)?;
        let aux = out.aux.as_ref().expect("training forward emits auxiliary outputs");

        // Real and fake pass through D together: one power-iteration step per update.
        let b = input.dim(0)?;
        let pair = Tensor::cat(&[gt, &out.image.detach()], 0)?;
        let pair_mask = Tensor::cat(&[mask, mask], 0)?;
        let scores = adv.disc.forward(&pair, &pair_mask, Mode::Train)?;
        let (l_d, _) = adversarial_losses(&scores.narrow(0, 0, b)?, &scores.narrow(0, b, b)?)?;
        let d_value = check_finite("adv_d", &l_d)?;
        let d_grads = l_d.backward()?;
        adv.opt.step(&d_grads, lr)?;

        let d_fake = adv.disc.forward(&out.image, mask, Mode::Eval)?;
        let (_, l_g) = adversarial_losses(&d_fake, &d_fake)?;
        let composite = composite_image(&out.image, input, mask)?;
        let scales = ScaleOutputs { full: &out.image, half: Some(&aux.image_half), quarter: Some(&aux.image_quarter) };
        let msr = msr_loss(&scales, gt, mask, w)?;
        let (per, sty) = perceptual_style_losses(&out.image, &composite, gt, &adv.extractor)?;
        let seg = dice_loss(&aux.mask, mask)?;
        let parts = LossParts { msr, per, sty, seg, adv: l_g };
        let total = total_loss(&parts, w)?;
        let total_value = check_finite("total", &total)?;
        let grads = total.backward()?;
        self.opt.step(&grads, lr)?;

        let mut losses = StepLosses::new();
        for (name, t) in parts.named() {
            losses.insert(name.to_string(), scalar_f64(t)?);
        }
        losses.insert("d".into(), d_value);
        losses.insert("total".into(), total_value);
        Ok(losses)
    }

    /// One pretraining step: dice on the encoder segmentation plus the
    /// masked reconstruction loss.
    pub fn pretrain_step_tensors(&mut self, input: &Tensor, seg_gt: &Tensor, mim_mask: &Tensor, lr: f64) -> Result<StepLosses> {
        let out = self.generator.pretrain_forward(input, mim_mask)?;
        let (total, dice, mim) = pretrain_loss(&out.seg, seg_gt, input, &out.rec, mim_mask)?;
        let dice_v = check_finite("dice", &dice)?;
        let mim_v = check_finite("mim", &mim)?;
        let total_v = check_finite("total", &total)?;
        let grads = total.backward()?;
        self.opt.step(&grads, lr)?;
        Ok(BTreeMap::from([("dice".into(), dice_v), ("mim".into(), mim_v), ("total".into(), total_v)]))
    }

    /// One encoder finetuning step on the segmentation dice loss. Returns the
    /// losses and the names of the parameters that were updated.
    pub fn finetune_step_tensors(&mut self, input: &Tensor, seg_gt: &Tensor, lr: f64) -> Result<(StepLosses, Vec<String>)> {
        let seg = self.generator.segment(input)?;
        let dice = dice_loss(&seg, seg_gt)?;
        let v = check_finite("dice", &dice)?;
        let grads = dice.backward()?;
        let updated = self.opt.step(&grads, lr)?;
        Ok((BTreeMap::from([("dice".into(), v), ("total".into(), v)]), updated))
    }

    fn batch_indices(&self, n: usize) -> Vec<usize> {
        let order = shuffled_order(n, derive_seed(self.cfg.train.seed, &[STREAM_ORDER, self.epoch as u64]));
        let bs = self.cfg.train.batch_size;
        (0..bs).map(|k| order[(self.batch_in_epoch * bs + k) % n]).collect()
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.train.batch_size)
    }

    fn sample_seed(&self, stream: u64, index: usize) -> u64 {
        derive_seed(self.cfg.train.seed, &[stream, self.epoch as u64, index as u64])
    }

    fn flip(&self, index: usize) -> bool {
        self.cfg.data.augment && flip_draw(self.sample_seed(STREAM_AUGMENT, index))
    }

    /// Runs the next batch of the current epoch and logs it.
    pub fn step_paired(&mut self, data: &dyn Dataset<TrainSample>, log: &mut LossLog) -> Result<StepRecord> {
        self.ensure_phase(Phase::Train)?;
        let n = self.nonempty(data.len())?;
        let size = self.cfg.model.input_size;
        let mut samples = Vec::new();
        for i in self.batch_indices(n) {
            samples.push(transform(&data.get(i)?, self.flip(i), size));
        }
        let input = self.to_batch(&samples.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        let gt = self.to_batch(&samples.iter().map(|s| &s.gt).collect::<Vec<_>>())?;
        let mask = self.to_batch(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>())?;
        let lr = self.schedule.lr_at(self.epoch)?;
        let losses = self.train_step_tensors(&input, &gt, &mask, lr)?;
        self.advance(n, lr, losses, log)
    }

    /// Runs the next pretraining or encoder-finetuning batch and logs it.
    pub fn step_annotated(&mut self, data: &dyn Dataset<PretrainSample>, log: &mut LossLog) -> Result<StepRecord> {
        if self.phase == Phase::Train {
            return Err(Error::arg("train phase needs paired samples"));
        }
        let n = self.nonempty(data.len())?;
        let size = self.cfg.model.input_size;
        let indices = self.batch_indices(n);
        let mut samples = Vec::new();
        for &i in &indices {
            samples.push(transform_pretrain(&data.get(i)?, self.flip(i), size));
        }
        let input = self.to_batch(&samples.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        let seg = self.to_batch(&samples.iter().map(|s| &s.seg).collect::<Vec<_>>())?;
        let lr = self.schedule.lr_at(self.epoch)?;
        let losses = match self.phase {
            Phase::Pretrain => {
                let t = &self.cfg.train;
                let masks = indices
                    .iter()
                    .map(|&i| {
                        generate_mim_mask(size, size, t.mim_ratio, t.mim_patch, self.sample_seed(STREAM_MIM, i))?
                            .to_tensor(self.dtype, &self.device)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let mim = Tensor::cat(&masks, 0)?;
                self.pretrain_step_tensors(&input, &seg, &mim, lr)?
            }
            _ => self.finetune_step_tensors(&input, &seg, lr)?.0,
        };
        self.advance(n, lr, losses, log)
    }

    fn ensure_phase(&self, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(Error::arg(format!("state is in phase {}, not {}", self.phase.name(), phase.name())));
        }
        Ok(())
    }

    fn nonempty(&self, n: usize) -> Result<usize> {
        if n == 0 {
            return Err(Error::EmptyCorpus);
        }
        Ok(n)
    }

    fn advance(&mut self, n: usize, lr: f64, losses: StepLosses, log: &mut LossLog) -> Result<StepRecord> {
        let rec = StepRecord { phase: self.phase, epoch: self.epoch, step: self.step, lr, losses };
        log.write(&rec)?;
        self.step += 1;
        self.batch_in_epoch += 1;
        if self.batch_in_epoch == self.batches_per_epoch(n) {
            self.batch_in_epoch = 0;
            self.epoch += 1;
        }
        Ok(rec)
    }

    /// Trains until `cfg.train.epochs`, calling `on_epoch` after every
    /// completed epoch.
    pub fn run(&mut self, data: Corpus<'_>, log: &mut LossLog, mut on_epoch: impl FnMut(&Self) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let epoch = self.epoch;
            let rec = match data {
                Corpus::Paired(d) => self.step_paired(d, log)?,
                Corpus::Annotated(d) => self.step_annotated(d, log)?,
            };
            log::debug!("epoch {} step {} {:?}", rec.epoch, rec.step, rec.losses);
            if self.epoch != epoch {
                log::info!("{} epoch {epoch} done, losses {:?}", self.phase.name(), rec.losses);
                on_epoch(self)?;
            }
        }
        Ok(())
    }

    /// Copies generator weights present in another checkpoint (any phase),
    /// leaving optimizer state and progress fresh.
    pub fn init_from(&mut self, path: &Path) -> Result<usize> {
        let file = tensor_io::read_file(path, &self.device)?;
        let gen: BTreeMap<String, Tensor> =
            file.tensors.iter().filter_map(|(k, v)| k.strip_prefix(GEN).map(|k| (k.to_string(), v.clone()))).collect();
        let present = |name: &str| gen.contains_key(name) || gen.contains_key(&format!("buffer:{name}"));
        let count = self.generator.store().vars().filter(|(k, _)| present(k)).count();
        self.generator.store().restore_filtered(&gen, present)?;
        Ok(count)
    }

    fn meta(&self, opt_g: serde_json::Value, opt_d: Option<serde_json::Value>) -> serde_json::Value {
        serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "phase": self.phase,
            "config": self.cfg,
            "schedule": self.schedule,
            "epoch": self.epoch,
            "batch_in_epoch": self.batch_in_epoch,
            "step": self.step,
            "dtype": format!("{:?}", self.dtype),
            "rng": { "seed": self.cfg.train.seed, "epoch": self.epoch, "batch_in_epoch": self.batch_in_epoch },
            "extractor": self.adversary.as_ref().map(|a| a.extractor.source().clone()),
            "opt_g_steps": opt_g,
            "opt_d_steps": opt_d,
        })
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = BTreeMap::new();
        for (k, t) in self.generator.store().snapshot()? {
            tensors.insert(format!("{GEN}{k}"), t);
        }
        let opt_g = self.opt.state(OPT_G, &mut tensors);
        let opt_d = match &self.adversary {
            Some(a) => {
                for (k, t) in a.store.snapshot()? {
                    tensors.insert(format!("{DISC}{k}"), t);
                }
                Some(a.opt.state(OPT_D, &mut tensors))
            }
            None => None,
        };
        tensor_io::encode(&self.meta(opt_g, opt_d), &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let file = tensor_io::read_file(path, device)?;
        Self::from_file(file, device)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        Self::from_file(tensor_io::decode(bytes, device)?, device)
    }

    fn from_file(file: tensor_io::TensorFile, device: &Device) -> Result<Self> {
        let meta = &file.meta;
        if meta["kind"] != CHECKPOINT_KIND {
            return Err(Error::Corrupt("not a training checkpoint".into()));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Corrupt(format!("checkpoint lacks `{k}`")));
        let de = |k: &str| -> Result<serde_json::Value> { field(k) };
        let phase: Phase = serde_json::from_value(de("phase")?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_value(de("config")?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let dtype = match meta["dtype"].as_str() {
            Some("F64") => DType::F64,
            _ => DType::F32,
        };
        let mut state = Self::new(phase, &cfg, dtype, device)?;
        state.schedule = serde_json::from_value(de("schedule")?).map_err(|e| Error::Corrupt(e.to_string()))?;
        let as_usize = |k: &str| -> Result<u64> {
            meta[k].as_u64().ok_or_else(|| Error::Corrupt(format!("checkpoint field `{k}` is not an integer")))
        };
        state.epoch = as_usize("epoch")? as usize;
        state.batch_in_epoch = as_usize("batch_in_epoch")? as usize;
        state.step = as_usize("step")?;
        let strip = |prefix: &str| -> BTreeMap<String, Tensor> {
            file.tensors.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone()))).collect()
        };
        state.generator.store().restore(&strip(GEN))?;
        state.opt.load_state(OPT_G, &file.tensors, &meta["opt_g_steps"])?;
        if let Some(a) = state.adversary.as_mut() {
            a.store.restore(&strip(DISC))?;
            a.opt.load_state(OPT_D, &file.tensors, &meta["opt_d_steps"])?;
        }
        Ok(state)
    }
}

#[derive(Clone, Copy)]
pub enum Corpus<'a> {
    Paired(&'a dyn Dataset<TrainSample>),
    Annotated(&'a dyn Dataset<PretrainSample>),
}

/// Keys whose values differ between two configurations.
pub fn config_differences(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let parse = |c: &RunConfig| -> BTreeMap<String, String> {
        c.to_flat_string()
            .lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
            .collect()
    };
    let (pa, pb) = (parse(a), parse(b));
    let mut keys: Vec<String> = pa.keys().chain(pb.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| pa.get(k) != pb.get(k)).collect()
}

//! Training configuration, state and the semi-supervised training step.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::adversary::{
    discriminate_graph, discriminator_objective, generator_adv_loss_graph, Discriminator,
    DiscriminatorConfig,
};
use crate::backbone::{self, Backbone, BackboneConfig};
use crate::data::{make_batch, BatchPlan, SampleSource, TrainBatch};
use crate::encoder::SemanticEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossSchedule, ScrForm};
use crate::mean_teacher::{AugmentationPolicy, EmaStats, ModelPair};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

/// Every training hyperparameter. Field names double as config-file keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub lr: f64,
    pub lr_constant_epochs: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub paired_per_batch: usize,
    pub unpaired_per_batch: usize,
    pub crop: usize,
    pub unpaired_size: usize,
    pub ema_beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub lambda2: f64,
    pub omega: f64,
    pub scr_form: ScrForm,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: u32,
    /// Stop after this many steps; 0 runs every epoch.
    pub max_steps: u64,
    pub width: usize,
    pub n_groups: usize,
    pub n_blocks: usize,
    pub n_state: usize,
    pub expansion: f64,
    pub dw_kernel_small: usize,
    pub dw_kernel_large: usize,
    pub ca_reduction: usize,
    pub semi_supervised: bool,
    pub adversarial: bool,
    /// Also feed paired-branch outputs to the discriminator.
    pub adv_on_paired: bool,
    pub disc_width: usize,
    pub disc_lr: f64,
    pub blur_kernel: usize,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub grayscale_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Seed of the built-in test encoder, used when no weights are given.
    pub encoder_seed: u64,
    /// Path of an encoder weight archive; empty selects the test encoder.
    pub encoder_weights: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let bb = BackboneConfig::default();
        let opt = AdamWConfig::default();
        let loss = LossSchedule::default();
        let aug = AugmentationPolicy::default();
        Self {
            epochs: 200,
            lr: 2e-4,
            lr_constant_epochs: 100,
            beta1: opt.beta1,
            beta2: opt.beta2,
            adam_eps: opt.eps,
            weight_decay: opt.weight_decay,
            paired_per_batch: 8,
            unpaired_per_batch: 8,
            crop: 256,
            unpaired_size: 256,
            ema_beta: crate::mean_teacher::DEFAULT_BETA,
            gamma1: loss.gamma1,
            gamma2: loss.gamma2,
            lambda2: loss.lambda2,
            omega: loss.omega,
            scr_form: loss.scr_form,
            seed: 0,
            checkpoint_every: 10,
            max_steps: 0,
            width: bb.width,
            n_groups: bb.n_groups,
            n_blocks: bb.n_blocks,
            n_state: bb.n_state,
            expansion: bb.expansion,
            dw_kernel_small: bb.dw_kernels[0],
            dw_kernel_large: bb.dw_kernels[1],
            ca_reduction: bb.ca_reduction,
            semi_supervised: true,
            adversarial: true,
            adv_on_paired: false,
            disc_width: DiscriminatorConfig::default().base_width,
            disc_lr: 2e-4,
            blur_kernel: aug.blur_kernel,
            blur_sigma_min: aug.blur_sigma.0,
            blur_sigma_max: aug.blur_sigma.1,
            grayscale_prob: aug.grayscale_prob,
            brightness: aug.brightness,
            contrast: aug.contrast,
            saturation: aug.saturation,
            hue: aug.hue,
            encoder_seed: 0,
            encoder_weights: String::new(),
        }
    }
}

fn parse<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

macro_rules! config_fields {
    ($($name:ident),* $(,)?) => {
        impl TrainConfig {
            /// Config-file keys, in canonical order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Set one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    other => return Err(Error::Config(format!("unknown config key `{other}`"))),
                }
                Ok(())
            }

            /// `(key, value)` for every field; `set` reads these back exactly.
            pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.to_string())),*]
            }
        }
    };
}

config_fields!(
    epochs,
    lr,
    lr_constant_epochs,
    beta1,
    beta2,
    adam_eps,
    weight_decay,
    paired_per_batch,
    unpaired_per_batch,
    crop,
    unpaired_size,
    ema_beta,
    gamma1,
    gamma2,
    lambda2,
    omega,
    scr_form,
    seed,
    checkpoint_every,
    max_steps,
    width,
    n_groups,
    n_blocks,
    n_state,
    expansion,
    dw_kernel_small,
    dw_kernel_large,
    ca_reduction,
    semi_supervised,
    adversarial,
    adv_on_paired,
    disc_width,
    disc_lr,
    blur_kernel,
    blur_sigma_min,
    blur_sigma_max,
    grayscale_prob,
    brightness,
    contrast,
    saturation,
    hue,
    encoder_seed,
    encoder_weights,
);

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.paired_per_batch == 0 {
            return Err(Error::Config("paired_per_batch must be positive".into()));
        }
        if self.crop < 8 || self.unpaired_size < 8 {
            return Err(Error::Config(
                "crop and unpaired_size must be at least 8".into(),
            ));
        }
        if !(self.disc_lr > 0.0) {
            return Err(Error::Config("disc_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!(
                "ema_beta {} outside [0, 1]",
                self.ema_beta
            )));
        }
        self.backbone().validate()?;
        self.discriminator().validate()?;
        self.optimizer().validate()?;
        self.lr_schedule().validate()?;
        self.loss_schedule().validate()?;
        self.augmentation().validate()
    }

    pub fn batch_size(&self) -> usize {
        self.paired_per_batch + self.unpaired_per_batch
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            width: self.width,
            n_groups: self.n_groups,
            n_blocks: self.n_blocks,
            expansion: self.expansion,
            dw_kernels: [self.dw_kernel_small, self.dw_kernel_large],
            n_state: self.n_state,
            ca_reduction: self.ca_reduction,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_width: self.disc_width,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            constant_epochs: self.lr_constant_epochs.min(self.epochs),
            total_epochs: self.epochs,
        }
    }

    pub fn disc_lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.disc_lr,
            ..self.lr_schedule()
        }
    }

    pub fn loss_schedule(&self) -> LossSchedule {
        LossSchedule {
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            lambda2: self.lambda2,
            omega: self.omega,
            total_epochs: self.epochs,
            scr_form: self.scr_form,
        }
    }

    pub fn augmentation(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            resize_to: (self.unpaired_size, self.unpaired_size),
            blur_kernel: self.blur_kernel,
            blur_sigma: (self.blur_sigma_min, self.blur_sigma_max),
            grayscale_prob: self.grayscale_prob,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            hue: self.hue,
            seed: self.seed,
        }
    }

    pub fn batch_plan(&self, paired_len: usize, unpaired_len: usize) -> BatchPlan {
        let use_unpaired = self.semi_supervised || self.adversarial;
        BatchPlan {
            paired_len,
            unpaired_len: if use_unpaired { unpaired_len } else { 0 },
            paired_per_batch: self.paired_per_batch,
            unpaired_per_batch: self.unpaired_per_batch,
            seed: self.seed,
        }
    }

    /// Steps of a full run over `paired_len` samples, capped by `max_steps`.
    pub fn total_steps(&self, paired_len: usize) -> u64 {
        let full = self.epochs as u64 * paired_len.div_ceil(self.paired_per_batch.max(1)) as u64;
        if self.max_steps > 0 {
            full.min(self.max_steps)
        } else {
            full
        }
    }
}

/// Scalar losses of one step. Absent terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub fidelity: f64,
    pub perceptual: f64,
    pub gradient: f64,
    pub supervised: f64,
    pub consistency: Option<f64>,
    pub contrastive: Option<f64>,
    pub unsupervised: Option<f64>,
    pub adversarial: Option<f64>,
    pub discriminator: Option<f64>,
    pub total: f64,
    /// Largest teacher parameter change of the EMA update.
    pub teacher_change: f64,
    pub ema_convex: bool,
}

impl LossRecord {
    /// `(name, value)` of every present loss.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("fidelity", self.fidelity),
            ("perceptual", self.perceptual),
            ("gradient", self.gradient),
            ("supervised", self.supervised),
        ];
        let optional = [
            ("consistency", self.consistency),
            ("contrastive", self.contrastive),
            ("unsupervised", self.unsupervised),
            ("adversarial", self.adversarial),
            ("discriminator", self.discriminator),
        ];
        out.extend(optional.into_iter().filter_map(|(k, v)| v.map(|v| (k, v))));
        out.push(("total", self.total));
        out
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    config: TrainConfig,
    models: ModelPair<T>,
    disc: Discriminator<T>,
    student_opt: AdamW<T>,
    disc_opt: AdamW<T>,
    step: u64,
}

const DISC_SEED_SALT: u64 = 0x4449_5343;

impl<T: Real> TrainState<T> {
    /// Fresh state: seeded student, teacher copy, seeded discriminator.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = Backbone::<T>::init(config.backbone(), config.seed)?.into_params();
        let disc = Discriminator::init(config.discriminator(), config.seed ^ DISC_SEED_SALT)?;
        let models = ModelPair::new(student, config.ema_beta)?;
        let student_opt = AdamW::new(config.optimizer(), models.student())?;
        let disc_opt = AdamW::new(config.optimizer(), disc.params())?;
        Ok(Self {
            config,
            models,
            disc,
            student_opt,
            disc_opt,
            step: 0,
        })
    }

    /// Reassemble a saved state after checking every layout.
    pub fn from_parts(
        config: TrainConfig,
        models: ModelPair<T>,
        disc: Discriminator<T>,
        student_opt: AdamW<T>,
        disc_opt: AdamW<T>,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        models
            .student()
            .check_layout(&config.backbone().param_layout())?;
        if disc.config() != &config.discriminator() {
            return Err(Error::Config(
                "discriminator width differs from the config".into(),
            ));
        }
        Ok(Self {
            config,
            models,
            disc,
            student_opt,
            disc_opt,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn models(&self) -> &ModelPair<T> {
        &self.models
    }

    pub fn discriminator(&self) -> &Discriminator<T> {
        &self.disc
    }

    pub fn student_optimizer(&self) -> &AdamW<T> {
        &self.student_opt
    }

    pub fn discriminator_optimizer(&self) -> &AdamW<T> {
        &self.disc_opt
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn student(&self) -> Result<Backbone<T>> {
        Backbone::from_params(self.config.backbone(), self.models.student().clone())
    }

    pub fn teacher(&self) -> Result<Backbone<T>> {
        Backbone::from_params(self.config.backbone(), self.models.teacher().clone())
    }

    /// Build the next batch from `source` and take one step on it.
    pub fn step_on(
        &mut self,
        encoder: &dyn SemanticEncoder<T>,
        source: &dyn SampleSource<T>,
    ) -> Result<LossRecord> {
        let plan = self
            .config
            .batch_plan(source.paired_len(), source.unpaired_len());
        let batch = make_batch(
            source,
            &plan,
            self.config.crop,
            &self.config.augmentation(),
            self.step,
        )?;
        let epoch = plan.epoch_of(self.step);
        self.train_step(encoder, &batch, u32::try_from(epoch).unwrap_or(u32::MAX))
    }

    /// One step: student update on the combined objective, discriminator
    /// update on detached student outputs, then the EMA teacher update.
    pub fn train_step(
        &mut self,
        encoder: &dyn SemanticEncoder<T>,
        batch: &TrainBatch<T>,
        epoch: u32,
    ) -> Result<LossRecord> {
        let cfg = &self.config;
        let schedule = cfg.loss_schedule();
        let bb = cfg.backbone();
        let step = self.step;
        let finite = |name: &str, v: f64| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    name: name.into(),
                    step,
                })
            }
        };
        let unpaired = match (&batch.unpaired_weak, &batch.unpaired_strong) {
            (Some(w), Some(s)) => Some((w, s)),
            _ => None,
        };
        let use_semi = cfg.semi_supervised && unpaired.is_some();

        // pseudo labels from the teacher, outside the student's graph
        let pseudo = match unpaired {
            Some((weak, _)) if use_semi => {
                let mut g = Graph::new();
                let p = self.models.teacher().bind(&mut g, false);
                let x = g.constant(weak.tensor().clone());
                let y = backbone::forward(&mut g, &bb, &p, x)?;
                Some(g.value(y).clone())
            }
            _ => None,
        };

        let mut g = Graph::new();
        let p = self.models.student().bind(&mut g, true);
        let low = g.constant(batch.paired_low.tensor().clone());
        let gt = g.constant(batch.paired_gt.tensor().clone());
        let out = backbone::forward(&mut g, &bb, &p, low)?;
        let l_fid = losses::fidelity(&mut g, out, gt)?;
        let l_grad = losses::gradient(&mut g, out, gt)?;
        let gt_feats = encoder.encode_graph(&mut g, gt)?;
        let out_feats = encoder.encode_graph(&mut g, out)?;
        let l_per = losses::perceptual(&mut g, &gt_feats, &out_feats)?;
        let l_sup = losses::supervised_graph(&mut g, l_fid, l_per, l_grad, &schedule)?;

        let mut fakes: Vec<Var> = Vec::new();
        let mut unsup = None;
        let mut un_parts = None;
        if let Some((weak, strong)) = unpaired {
            let s = g.constant(strong.tensor().clone());
            let s_out = backbone::forward(&mut g, &bb, &p, s)?;
            if let Some(label) = &pseudo {
                let t_out = g.constant(label.clone());
                let w = g.constant(weak.tensor().clone());
                let l_con = losses::consistency(&mut g, s_out, t_out)?;
                let anchor = encoder.embedding_graph(&mut g, s_out)?;
                let positive = encoder.embedding_graph(&mut g, t_out)?;
                let negative = encoder.embedding_graph(&mut g, w)?;
                let l_scr = losses::scr(
                    &mut g,
                    anchor,
                    positive,
                    negative,
                    schedule.omega,
                    schedule.scr_form,
                )?;
                unsup = Some(g.add(l_con, l_scr)?);
                un_parts = Some((l_con, l_scr));
            }
            if cfg.adversarial {
                fakes.push(s_out);
            }
        }
        if cfg.adversarial && cfg.adv_on_paired {
            fakes.push(out);
        }

        let mut adv = None;
        if !fakes.is_empty() {
            let dp = self.disc.params().bind(&mut g, false);
            let mut total: Option<Var> = None;
            for &f in &fakes {
                let logits = discriminate_graph(&mut g, &dp, f)?;
                let l = generator_adv_loss_graph(&mut g, logits);
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let total = total.expect("at least one fake");
            adv = Some(g.scale(total, lit(1.0 / fakes.len() as f64)));
        }
        let objective = losses::overall_graph(&mut g, l_sup, unsup, adv, epoch, &schedule)?;

        let val = |g: &Graph<T>, v: Var| g.value(v).item().to_f64();
        let mut record = LossRecord {
            step,
            epoch,
            lr: cfg.lr_schedule().lr(epoch),
            fidelity: finite("fidelity", val(&g, l_fid))?,
            perceptual: finite("perceptual", val(&g, l_per))?,
            gradient: finite("gradient", val(&g, l_grad))?,
            supervised: finite("supervised", val(&g, l_sup))?,
            consistency: None,
            contrastive: None,
            unsupervised: None,
            adversarial: None,
            discriminator: None,
            total: 0.0,
            teacher_change: 0.0,
            ema_convex: true,
        };
        if let Some((c, s)) = un_parts {
            record.consistency = Some(finite("consistency", val(&g, c))?);
            record.contrastive = Some(finite("contrastive", val(&g, s))?);
        }
        if let Some(u) = unsup {
            record.unsupervised = Some(finite("unsupervised", val(&g, u))?);
        }
        if let Some(a) = adv {
            record.adversarial = Some(finite("adversarial", val(&g, a))?);
        }
        record.total = finite("total", val(&g, objective))?;

        let grads = g.backward(objective)?;
        let student_grads = p.gradients(&g, &grads);
        let fake_values: Vec<Tensor<T>> = fakes.iter().map(|&f| g.value(f).clone()).collect();
        drop(grads);
        drop(g);
        self.student_opt
            .step(self.models.student_mut(), &student_grads, record.lr)?;

        if !fake_values.is_empty() {
            let d_loss =
                self.discriminator_step(&batch.paired_gt.tensor().clone(), fake_values, epoch)?;
            record.discriminator = Some(finite("discriminator", d_loss)?);
        }

        let EmaStats { max_change, convex } = self.models.ema_update()?;
        if !convex {
            return Err(Error::Precondition(format!(
                "EMA update left the convex hull at step {step}"
            )));
        }
        record.teacher_change = max_change;
        record.ema_convex = convex;
        self.step += 1;
        Ok(record)
    }

    /// Discriminator update on ground truth versus detached student outputs.
    fn discriminator_step(
        &mut self,
        real: &Tensor<T>,
        fakes: Vec<Tensor<T>>,
        epoch: u32,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let dp = self.disc.params().bind(&mut g, true);
        let r = g.constant(real.clone());
        let n = fakes.len();
        let mut total: Option<Var> = None;
        for f in fakes {
            let f = g.constant(f);
            let l = discriminator_objective(&mut g, &dp, r, f)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let loss = g.scale(total.expect("at least one fake"), lit(1.0 / n as f64));
        let value = g.value(loss).item().to_f64();
        let grads = g.backward(loss)?;
        let dg = dp.gradients(&g, &grads);
        let lr = self.config.disc_lr_schedule().lr(epoch);
        self.disc_opt.step(self.disc.params_mut(), &dg, lr)?;
        Ok(value)
    }
}

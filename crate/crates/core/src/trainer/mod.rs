//! The training loop: views, teacher and student passes, prototype
//! sampling, losses, optimizer step, moving-average teacher, memory
//! updates, schedules, checkpoints and metrics.

mod checkpoint;
mod optim;

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{multicrop_batch, CropConfig, DataError, ImageDataset};
use crate::memory::{build_sop, sample_anchors, ContributionMode, MemoryBank, MemoryError};
use crate::model::{
    block_mask, ema_update, momentum_schedule, random_mask, EncoderConfig, EncoderState,
    HeadSelect, Images, MaskSpec, ModelError, ParamVars,
};
use crate::numerics::{Matrix, NumericsError, Scalar, Tape, Var};
use crate::objective::{
    cls_loss_graph, mim_loss_graph, prototype_probs_graph, sop_probs, sop_probs_graph, LossWeights,
    ObjectiveError, PrototypeBaseline, SopProbabilities,
};
use crate::seed;

pub use checkpoint::{checkpoint_dir_name, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT};
pub use optim::{lr_schedule, teacher_temperature, AdamW};

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_cls,loss_patch,teacher_entropy,feature_std,ema_m,lr";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config field `{field}`: {msg}")]
    ConfigInvalid { field: String, msg: String },
    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },
    #[error("checkpoint config hash {found} does not match the run config {expected}")]
    ResumeMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn invalid(field: &str, msg: impl Into<String>) -> TrainError {
    TrainError::ConfigInvalid {
        field: field.to_string(),
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Both non-parametric losses.
    Sop,
    /// Learnable prototypes with teacher centering, no memory banks.
    ParametricBaseline,
    ClsOnly,
    MimOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Block,
    Random,
}

/// Every knob of a run. Missing JSON fields take the defaults below;
/// unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Local views per image, on top of the two global views.
    pub v_local: usize,
    pub local_size: usize,
    /// Class-level anchors `K`.
    pub num_anchors: usize,
    /// Extra support embeddings per class-level prototype.
    pub k: usize,
    /// Patch-level anchors.
    pub num_patch_anchors: usize,
    /// Extra support embeddings per patch-level prototype.
    pub k_patch: usize,
    /// Class memory capacity.
    pub bank_cls: usize,
    /// Patch memory capacity.
    pub bank_patch: usize,
    pub cls_mode: ContributionMode,
    pub patch_mode: ContributionMode,
    pub tau_s: f64,
    /// Teacher temperature after warmup.
    pub tau_t: f64,
    /// Teacher temperature at step 0, ramped linearly during warmup.
    pub tau_t_start: f64,
    pub m0: f64,
    pub mask_strategy: MaskStrategy,
    pub mask_ratio: f64,
    /// Prototype resamples per step for the class loss.
    pub tasks_cls: usize,
    /// Prototype resamples per step for the patch loss.
    pub tasks_mim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub min_lr: f64,
    /// Fraction of steps used for learning-rate and temperature warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Draw anchors once and reuse them every step.
    pub fixed_anchors: bool,
    /// Teacher-logit centering of the parametric baseline.
    pub centering: bool,
    pub center_momentum: f64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            v_local: 2,
            local_size: 16,
            num_anchors: 256,
            k: 8,
            num_patch_anchors: 64,
            k_patch: 0,
            bank_cls: 2048,
            bank_patch: 2048,
            cls_mode: ContributionMode::SimilaritySoft(0.1),
            patch_mode: ContributionMode::Smoothed(0.1),
            tau_s: 0.1,
            tau_t: 0.07,
            tau_t_start: 0.04,
            m0: 0.994,
            mask_strategy: MaskStrategy::Block,
            mask_ratio: 0.3,
            tasks_cls: 2,
            tasks_mim: 1,
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_frac: 0.1,
            weight_decay: 0.04,
            seed: 0,
            mode: TrainMode::Sop,
            fixed_anchors: false,
            centering: true,
            center_momentum: 0.9,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .unwrap_or("<config>")
                .to_string();
            TrainError::ConfigInvalid { field, msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        crate::data::hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn dim(&self) -> usize {
        self.encoder.proj_out
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).round() as usize
    }

    pub fn uses_cls(&self) -> bool {
        self.tasks_cls > 0 && self.mode != TrainMode::MimOnly
    }

    pub fn uses_mim(&self) -> bool {
        self.tasks_mim > 0 && self.mode != TrainMode::ClsOnly
    }

    pub fn uses_banks(&self) -> bool {
        self.mode != TrainMode::ParametricBaseline
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.encoder
            .validate()
            .map_err(|e| invalid("encoder", e.to_string()))?;
        let positive = [
            ("batch_size", self.batch_size),
            ("num_anchors", self.num_anchors),
            ("num_patch_anchors", self.num_patch_anchors),
            ("bank_cls", self.bank_cls),
            ("bank_patch", self.bank_patch),
            ("local_size", self.local_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(name, "must be >= 1"));
            }
        }
        if self.num_anchors > self.bank_cls {
            return Err(invalid("num_anchors", "must not exceed bank_cls"));
        }
        if self.num_patch_anchors > self.bank_patch {
            return Err(invalid("num_patch_anchors", "must not exceed bank_patch"));
        }
        if self.k + 1 > self.bank_cls {
            return Err(invalid("k", "k + 1 must not exceed bank_cls"));
        }
        if self.k_patch + 1 > self.bank_patch {
            return Err(invalid("k_patch", "k_patch + 1 must not exceed bank_patch"));
        }
        self.cls_mode
            .validate()
            .map_err(|e| invalid("cls_mode", e.to_string()))?;
        self.patch_mode
            .validate()
            .map_err(|e| invalid("patch_mode", e.to_string()))?;
        for (name, v) in [
            ("tau_s", self.tau_s),
            ("tau_t", self.tau_t),
            ("tau_t_start", self.tau_t_start),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be positive"));
            }
        }
        let unit = [
            ("m0", self.m0),
            ("mask_ratio", self.mask_ratio),
            ("warmup_frac", self.warmup_frac),
            ("center_momentum", self.center_momentum),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lr", self.lr),
            ("min_lr", self.min_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be nonnegative"));
            }
        }
        if !self.local_size.is_multiple_of(self.encoder.patch_size) {
            return Err(invalid(
                "local_size",
                "must be divisible by encoder.patch_size",
            ));
        }
        if self.fixed_anchors && self.mode == TrainMode::ParametricBaseline {
            return Err(invalid("fixed_anchors", "requires a memory-bank mode"));
        }
        Ok(())
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig {
            global_size: self.encoder.image_size,
            local_size: self.local_size,
            ..CropConfig::default()
        }
    }
}

/// Variant of `config` whose anchors are drawn once and kept fixed.
pub fn fixed_anchor_mode(config: &TrainConfig) -> Result<TrainConfig, TrainError> {
    if config.mode == TrainMode::ParametricBaseline {
        return Err(invalid("mode", "fixed anchors need a memory-bank mode"));
    }
    Ok(TrainConfig {
        fixed_anchors: true,
        ..config.clone()
    })
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_patch: f64,
    pub teacher_entropy: f64,
    pub feature_std: f64,
    pub ema_m: f64,
    pub learning_rate: f64,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            self.loss_cls,
            self.loss_patch,
            self.teacher_entropy,
            self.feature_std,
            self.ema_m,
            self.learning_rate
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.loss_total,
            self.loss_cls,
            self.loss_patch,
            self.teacher_entropy,
            self.feature_std,
            self.ema_m,
            self.learning_rate,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Learnable prototypes of the parametric baseline. The student copies
/// are trained; the teacher copies follow by moving average and carry the
/// centering state.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHeads<T> {
    pub student_cls: Matrix<T>,
    pub student_patch: Matrix<T>,
    pub teacher_cls: PrototypeBaseline<T>,
    pub teacher_patch: PrototypeBaseline<T>,
}

/// Anchor indices drawn at step 0 in fixed-anchor mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedAnchors {
    pub cls: Vec<usize>,
    pub patch: Vec<usize>,
}

/// Everything a run carries from one step to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub student: EncoderState<T>,
    pub teacher: EncoderState<T>,
    pub optimizer: AdamW<T>,
    pub bank_cls: MemoryBank<T>,
    pub bank_patch: MemoryBank<T>,
    pub baseline: Option<BaselineHeads<T>>,
    pub fixed_anchors: Option<FixedAnchors>,
    /// Completed steps.
    pub step: usize,
}

/// Result of one step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub metrics: MetricsRecord,
    /// Anchor indices of every class-level resample.
    pub cls_anchors: Vec<Vec<usize>>,
    /// Anchor indices of every patch-level resample.
    pub patch_anchors: Vec<Vec<usize>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let s = config.seed;
        let student =
            EncoderState::new(config.encoder.clone(), seed::derive_seed(s, "student", &[]))?;
        let teacher = student.clone();
        let d = config.dim();
        let bank_cls = MemoryBank::init(config.bank_cls, d, seed::derive_seed(s, "bank-cls", &[]));
        let bank_patch = MemoryBank::init(
            config.bank_patch,
            d,
            seed::derive_seed(s, "bank-patch", &[]),
        );
        let baseline = (config.mode == TrainMode::ParametricBaseline).then(|| {
            let cm = T::lit(config.center_momentum);
            let mut tc = PrototypeBaseline::new(
                config.num_anchors,
                d,
                seed::derive_seed(s, "proto-cls", &[]),
                cm,
            );
            let mut tp = PrototypeBaseline::new(
                config.num_patch_anchors,
                d,
                seed::derive_seed(s, "proto-patch", &[]),
                cm,
            );
            tc.centering = config.centering;
            tp.centering = config.centering;
            BaselineHeads {
                student_cls: tc.theta.clone(),
                student_patch: tp.theta.clone(),
                teacher_cls: tc,
                teacher_patch: tp,
            }
        });
        let fixed_anchors = if config.fixed_anchors {
            Some(FixedAnchors {
                cls: sample_anchors(
                    &bank_cls,
                    config.num_anchors,
                    &mut seed::rng_for(s, "fixed-anchors", &[0]),
                )?,
                patch: sample_anchors(
                    &bank_patch,
                    config.num_patch_anchors,
                    &mut seed::rng_for(s, "fixed-anchors", &[1]),
                )?,
            })
        } else {
            None
        };
        let mut params: Vec<&Matrix<T>> = student.tensors().iter().collect();
        let mut decay: Vec<bool> = (0..params.len()).map(|i| student.decays(i)).collect();
        if let Some(b) = &baseline {
            params.push(&b.student_cls);
            params.push(&b.student_patch);
            decay.extend([false, false]);
        }
        let optimizer = AdamW::new(&params, decay, config.weight_decay);
        Ok(Self {
            config,
            student,
            teacher,
            optimizer,
            bank_cls,
            bank_patch,
            baseline,
            fixed_anchors,
            step: 0,
        })
    }

    fn check_dataset(&self, ds: &ImageDataset) -> Result<(), TrainError> {
        let e = &self.config.encoder;
        if ds.height != e.image_size || ds.width != e.image_size || ds.channels != e.channels {
            return Err(invalid(
                "encoder.image_size",
                format!(
                    "dataset is {}x{}x{}, encoder expects {}x{}x{}",
                    ds.height, ds.width, ds.channels, e.image_size, e.image_size, e.channels
                ),
            ));
        }
        if self.config.batch_size > ds.n {
            return Err(invalid(
                "batch_size",
                format!(
                    "{} exceeds the {} training images",
                    self.config.batch_size, ds.n
                ),
            ));
        }
        Ok(())
    }

    /// Runs one optimization step on a batch drawn from `ds`.
    ///
    /// All randomness is keyed by `(seed, step)`, so a restored state
    /// continues exactly like an uninterrupted run.
    pub fn train_step(&mut self, ds: &ImageDataset) -> Result<StepReport, TrainError> {
        self.check_dataset(ds)?;
        let cfg = self.config.clone();
        let s = self.step;
        let (seed, step_key) = (cfg.seed, s as u64);
        let b = cfg.batch_size;
        let l = cfg.encoder.num_patches();
        let grid = cfg.encoder.grid();

        let idx = rand::seq::index::sample(&mut seed::rng_for(seed, "batch", &[step_key]), ds.n, b)
            .into_vec();
        let views = multicrop_batch::<T>(ds, &idx, cfg.v_local, &cfg.crop_config(), seed, step_key);
        let globals = Images::concat(&[&views[0], &views[1]]);
        let locals =
            (cfg.v_local > 0).then(|| Images::concat(&views[2..].iter().collect::<Vec<_>>()));
        let num_views = 2 + cfg.v_local;

        let masks: Vec<Vec<MaskSpec>> = if cfg.uses_mim() {
            let mut rng = seed::rng_for(seed, "mask", &[step_key]);
            (0..2)
                .map(|_| {
                    (0..b)
                        .map(|_| match cfg.mask_strategy {
                            MaskStrategy::Block => block_mask(grid, grid, cfg.mask_ratio, &mut rng),
                            MaskStrategy::Random => random_mask(l, cfg.mask_ratio, &mut rng),
                        })
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        let masked = masked_patch_rows(&masks, l);

        // memory updates: one global view per image for the class bank,
        // one (view, position) per image for the patch bank
        let mut push_rng = seed::rng_for(seed, "push", &[step_key]);
        let push_cls: Vec<usize> = (0..b)
            .map(|i| push_rng.random_range(0..2) * b + i)
            .collect();
        let push_patch: Vec<usize> = (0..b)
            .map(|i| (push_rng.random_range(0..2) * b + i) * l + push_rng.random_range(0..l))
            .collect();

        // teacher: unmasked globals, outside any differentiation graph
        let mut teacher_rows: Vec<usize> = masked.clone();
        if cfg.uses_banks() {
            teacher_rows.extend(&push_patch);
        }
        teacher_rows.sort_unstable();
        teacher_rows.dedup();
        let (t_cls, t_patch) = self.teacher_outputs(&globals, &teacher_rows)?;
        let t_row = |r: usize| {
            teacher_rows
                .binary_search(&r)
                .expect("requested teacher row")
        };
        let t_views: Vec<Matrix<T>> = (0..2)
            .map(|g| t_cls.select_rows(&(g * b..(g + 1) * b).collect::<Vec<_>>()))
            .collect();
        let t_masked = t_patch.select_rows(&masked.iter().map(|&r| t_row(r)).collect::<Vec<_>>());

        let tau_t = T::lit(teacher_temperature(
            s,
            cfg.warmup_steps(),
            cfg.tau_t_start,
            cfg.tau_t,
        ));
        let tau_s = T::lit(cfg.tau_s);
        let weights = LossWeights {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
        };

        let mut tape = Tape::new();
        let pv = self.student.register(&mut tape, true);
        let forward = if self.student.all_finite() {
            student_forward(
                &mut tape,
                &self.student,
                &pv,
                &globals,
                locals.as_ref(),
                &masks,
            )
        } else {
            Err(TrainError::Numerics(NumericsError::NonFiniteGradient))
        };
        let (s_cls, s_patch) = forward.map_err(|e| TrainError::NonFiniteLoss {
            step: s,
            diagnostic: format!(
                "student forward failed ({e}); {}",
                self.diagnostic(T::nan(), T::nan(), T::nan(), &t_cls)
            ),
        })?;

        let mut report_anchors = (Vec::new(), Vec::new());
        let teacher_entropy;
        let (loss, proto_vars) = if let Some(heads) = &self.baseline {
            let th_c = tape.param(heads.student_cls.clone());
            let th_p = tape.param(heads.student_patch.clone());
            let t_cls_probs: Vec<SopProbabilities<T>> = t_views
                .iter()
                .map(|z| {
                    heads
                        .teacher_cls
                        .teacher_probs(z, tau_t)
                        .map(|probs| SopProbabilities { probs })
                })
                .collect::<Result<_, _>>()?;
            teacher_entropy = mean_entropy(&t_cls_probs);
            let t_patch_probs = heads.teacher_patch.teacher_probs(&t_masked, tau_t)?;
            let plan = LossPlan {
                views: num_views,
                cls_targets: if cfg.uses_cls() {
                    vec![t_cls_probs]
                } else {
                    Vec::new()
                },
                mim_targets: if cfg.uses_mim() {
                    vec![scatter_masked(&t_patch_probs, &masks, l)]
                } else {
                    Vec::new()
                },
                masks: masks.clone(),
                weights,
            };
            let sp_c = if plan.cls_targets.is_empty() {
                None
            } else {
                Some(prototype_probs_graph(&mut tape, s_cls, th_c, tau_s)?)
            };
            let sp_p = match s_patch {
                Some(v) if !plan.mim_targets.is_empty() => {
                    Some(prototype_probs_graph(&mut tape, v, th_p, tau_s)?)
                }
                _ => None,
            };
            (
                plan.loss_graph(
                    &mut tape,
                    &[sp_c].into_iter().flatten().collect::<Vec<_>>(),
                    sp_p.as_slice(),
                )?,
                Some((th_c, th_p)),
            )
        } else {
            let mut cls_targets = Vec::new();
            let mut cls_sops = Vec::new();
            if cfg.uses_cls() {
                for t in 0..cfg.tasks_cls {
                    let anchors = match &self.fixed_anchors {
                        Some(f) => f.cls.clone(),
                        None => sample_anchors(
                            &self.bank_cls,
                            cfg.num_anchors,
                            &mut seed::rng_for(seed, "anchors-cls", &[step_key, t as u64]),
                        )?,
                    };
                    let sop = build_sop(&self.bank_cls, &anchors, cfg.k, cfg.cls_mode)?;
                    let probs = t_views
                        .iter()
                        .map(|z| sop_probs(z, &sop, tau_t))
                        .collect::<Result<Vec<_>, _>>()?;
                    cls_targets.push(probs);
                    cls_sops.push(sop);
                    report_anchors.0.push(anchors);
                }
            }
            let mut mim_targets = Vec::new();
            let mut mim_sops = Vec::new();
            let mut patch_entropy = T::zero();
            if cfg.uses_mim() {
                for t in 0..cfg.tasks_mim {
                    let anchors = match &self.fixed_anchors {
                        Some(f) => f.patch.clone(),
                        None => sample_anchors(
                            &self.bank_patch,
                            cfg.num_patch_anchors,
                            &mut seed::rng_for(seed, "anchors-patch", &[step_key, t as u64]),
                        )?,
                    };
                    let sop = build_sop(&self.bank_patch, &anchors, cfg.k_patch, cfg.patch_mode)?;
                    let probs = sop_probs(&t_masked, &sop, tau_t)?;
                    patch_entropy += probs.mean_entropy();
                    mim_targets.push(scatter_masked(&probs.probs, &masks, l));
                    mim_sops.push(sop);
                    report_anchors.1.push(anchors);
                }
                patch_entropy /= T::from_usize(cfg.tasks_mim).unwrap();
            }
            teacher_entropy = if cls_targets.is_empty() {
                patch_entropy
            } else {
                cls_targets.iter().map(|t| mean_entropy(t)).sum::<T>()
                    / T::from_usize(cls_targets.len()).unwrap()
            };
            let sc: Vec<Var> = cls_sops
                .iter()
                .map(|sop| sop_probs_graph(&mut tape, s_cls, sop, tau_s))
                .collect::<Result<_, _>>()?;
            let sp: Vec<Var> = match s_patch {
                Some(v) => mim_sops
                    .iter()
                    .map(|sop| sop_probs_graph(&mut tape, v, sop, tau_s))
                    .collect::<Result<_, _>>()?,
                None => Vec::new(),
            };
            let plan = LossPlan {
                views: num_views,
                cls_targets,
                mim_targets: if sp.is_empty() {
                    Vec::new()
                } else {
                    mim_targets
                },
                masks: masks.clone(),
                weights,
            };
            (plan.loss_graph(&mut tape, &sc, &sp)?, None)
        };

        let value = |v: Option<Var>| v.map_or(T::zero(), |v| tape.scalar(v));
        let (total, lc, lp) = (tape.scalar(loss.total), value(loss.cls), value(loss.patch));
        if !(total.is_finite() && lc.is_finite() && lp.is_finite()) {
            return Err(TrainError::NonFiniteLoss {
                step: s,
                diagnostic: self.diagnostic(total, lc, lp, &t_cls),
            });
        }

        let grads = tape
            .backward(loss.total)
            .map_err(|e| TrainError::NonFiniteLoss {
                step: s,
                diagnostic: format!("{e}; {}", self.diagnostic(total, lc, lp, &t_cls)),
            })?;
        let lr = lr_schedule(s, cfg.steps, cfg.warmup_steps(), cfg.lr, cfg.min_lr);
        let mut grad_refs: Vec<Option<&Matrix<T>>> =
            pv.vars.iter().map(|&v| grads.get(v)).collect();
        if let Some((a, c)) = proto_vars {
            grad_refs.push(grads.get(a));
            grad_refs.push(grads.get(c));
        }
        {
            let mut params: Vec<&mut Matrix<T>> = self.student.tensors_mut().iter_mut().collect();
            if let Some(h) = &mut self.baseline {
                params.push(&mut h.student_cls);
                params.push(&mut h.student_patch);
            }
            self.optimizer.step(&mut params, &grad_refs, lr);
        }

        let m = momentum_schedule(s, cfg.steps, cfg.m0);
        ema_update(&mut self.teacher, &self.student, m)?;
        if let Some(h) = &mut self.baseline {
            crate::numerics::normalize_rows_in_place(&mut h.student_cls)?;
            crate::numerics::normalize_rows_in_place(&mut h.student_patch)?;
            ema_matrix(&mut h.teacher_cls.theta, &h.student_cls, m);
            ema_matrix(&mut h.teacher_patch.theta, &h.student_patch, m);
            h.teacher_cls.renormalize()?;
            h.teacher_patch.renormalize()?;
            h.teacher_cls
                .update_center(&t_views.iter().collect::<Vec<_>>())?;
            if t_masked.rows() > 0 {
                h.teacher_patch.update_center(&[&t_masked])?;
            }
        } else {
            self.bank_cls.push(&t_cls.select_rows(&push_cls))?;
            self.bank_patch.push(
                &t_patch.select_rows(&push_patch.iter().map(|&r| t_row(r)).collect::<Vec<_>>()),
            )?;
        }

        self.step += 1;
        let metrics = MetricsRecord {
            step: s,
            loss_total: total.as_f64(),
            loss_cls: lc.as_f64(),
            loss_patch: lp.as_f64(),
            teacher_entropy: teacher_entropy.as_f64(),
            feature_std: per_dim_std(&t_cls),
            ema_m: m,
            learning_rate: lr,
        };
        Ok(StepReport {
            metrics,
            cls_anchors: report_anchors.0,
            patch_anchors: report_anchors.1,
        })
    }

    /// Teacher class embeddings of every global image and patch embeddings
    /// at the requested image-major rows.
    fn teacher_outputs(
        &self,
        globals: &Images<T>,
        rows: &[usize],
    ) -> Result<(Matrix<T>, Matrix<T>), TrainError> {
        let mut tape = Tape::new();
        let pv = self.teacher.register(&mut tape, false);
        let heads = if rows.is_empty() {
            HeadSelect::ClsOnly
        } else {
            HeadSelect::ClsAndPatchRows(rows.to_vec())
        };
        let out = self
            .teacher
            .forward_graph(&mut tape, &pv, globals, None, &heads)?;
        let patches = out
            .patches
            .map(|v| tape.value(v).clone())
            .unwrap_or_else(|| Matrix::zeros(0, self.config.dim()));
        Ok((tape.value(out.cls).clone(), patches))
    }

    fn diagnostic(&self, total: T, cls: T, patch: T, t_cls: &Matrix<T>) -> String {
        let bad: Vec<&str> = self
            .student
            .names()
            .iter()
            .zip(self.student.tensors())
            .filter(|(_, t)| !t.is_finite())
            .map(|(n, _)| n.as_str())
            .collect();
        format!(
            "loss_total={total} loss_cls={cls} loss_patch={patch} non_finite_student_tensors={bad:?} \
             teacher_finite={} teacher_cls_finite={} bank_cls_finite={} bank_patch_finite={}",
            self.teacher.all_finite(),
            t_cls.is_finite(),
            self.bank_cls.storage().is_finite(),
            self.bank_patch.storage().is_finite()
        )
    }
}

fn ema_matrix<T: Scalar>(teacher: &mut Matrix<T>, student: &Matrix<T>, m: f64) {
    let (keep, take) = (T::lit(m), T::lit(1.0 - m));
    for (a, &b) in teacher.data_mut().iter_mut().zip(student.data()) {
        *a = keep * *a + take * b;
    }
}

fn mean_entropy<T: Scalar>(probs: &[SopProbabilities<T>]) -> T {
    probs.iter().map(SopProbabilities::mean_entropy).sum::<T>()
        / T::from_usize(probs.len().max(1)).unwrap()
}

/// Mean over dimensions of the population standard deviation.
fn per_dim_std<T: Scalar>(z: &Matrix<T>) -> f64 {
    let (n, d) = z.shape();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..d {
        let mean = (0..n).map(|r| z.get(r, c).as_f64()).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|r| (z.get(r, c).as_f64() - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        total += var.sqrt();
    }
    total / d as f64
}

/// Image-major patch rows of the masked positions of both global views,
/// in the order the patch loss expects.
pub fn masked_patch_rows(masks: &[Vec<MaskSpec>], l: usize) -> Vec<usize> {
    let b = masks.first().map_or(0, Vec::len);
    let mut rows = Vec::new();
    for (v, mv) in masks.iter().enumerate() {
        for (i, m) in mv.iter().enumerate() {
            rows.extend(
                m.mask
                    .iter()
                    .enumerate()
                    .filter(|(_, &x)| x)
                    .map(|(pos, _)| (v * b + i) * l + pos),
            );
        }
    }
    rows
}

/// Expands probabilities of the masked rows into full per-view matrices.
fn scatter_masked<T: Scalar>(
    probs: &Matrix<T>,
    masks: &[Vec<MaskSpec>],
    l: usize,
) -> Vec<Matrix<T>> {
    let b = masks.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(masks.len());
    let mut next = 0;
    for mv in masks {
        let mut full = Matrix::zeros(b * l, probs.cols());
        for (i, m) in mv.iter().enumerate() {
            for (pos, _) in m.mask.iter().enumerate().filter(|(_, &x)| x) {
                full.row_mut(i * l + pos).copy_from_slice(probs.row(next));
                next += 1;
            }
        }
        out.push(full);
    }
    out
}

/// Student pass over every view. Returns class embeddings stacked
/// view-major and, when masks are given, embeddings of the masked global
/// patches in [`masked_patch_rows`] order. The global views are encoded
/// with their masks applied.
pub fn student_forward<T: Scalar>(
    tape: &mut Tape<T>,
    student: &EncoderState<T>,
    pv: &ParamVars,
    globals: &Images<T>,
    locals: Option<&Images<T>>,
    masks: &[Vec<MaskSpec>],
) -> Result<(Var, Option<Var>), TrainError> {
    let l = student.config.num_patches();
    let flat: Vec<MaskSpec> = masks.iter().flatten().cloned().collect();
    let rows = masked_patch_rows(masks, l);
    let heads = if rows.is_empty() {
        HeadSelect::ClsOnly
    } else {
        HeadSelect::ClsAndPatchRows(rows)
    };
    let g = student.forward_graph(
        tape,
        pv,
        globals,
        (!flat.is_empty()).then_some(&flat[..]),
        &heads,
    )?;
    let cls = match locals {
        Some(loc) => {
            let lo = student.forward_graph(tape, pv, loc, None, &HeadSelect::ClsOnly)?;
            tape.vstack(&[g.cls, lo.cls])?
        }
        None => g.cls,
    };
    Ok((cls, g.patches))
}

/// Teacher targets of one step, ready to be matched by student
/// probabilities recorded on a tape.
pub struct LossPlan<T> {
    /// Student views (2 global + locals).
    pub views: usize,
    /// Per class-level resample, teacher probabilities of each global view.
    pub cls_targets: Vec<Vec<SopProbabilities<T>>>,
    /// Per patch-level resample, full per-view teacher matrices.
    pub mim_targets: Vec<Vec<Matrix<T>>>,
    pub masks: Vec<Vec<MaskSpec>>,
    pub weights: LossWeights,
}

/// Handles of the recorded loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    /// Class loss averaged over resamples.
    pub cls: Option<Var>,
    /// Patch loss averaged over resamples.
    pub patch: Option<Var>,
}

impl<T: Scalar> LossPlan<T> {
    /// `student_cls[t]` and `student_patch[t]` are the student
    /// probabilities matching resample `t` of each target list.
    pub fn loss_graph(
        &self,
        tape: &mut Tape<T>,
        student_cls: &[Var],
        student_patch: &[Var],
    ) -> Result<LossVars, TrainError> {
        let mean = |tape: &mut Tape<T>, terms: Vec<Var>| -> Result<Option<Var>, TrainError> {
            let Some((&first, rest)) = terms.split_first() else {
                return Ok(None);
            };
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            Ok(Some(tape.scale(
                acc,
                T::one() / T::from_usize(terms.len()).unwrap(),
            )))
        };
        let cls_terms = self
            .cls_targets
            .iter()
            .zip(student_cls)
            .map(|(t, &s)| cls_loss_graph(tape, s, self.views, t))
            .collect::<Result<Vec<_>, _>>()?;
        let patch_terms = self
            .mim_targets
            .iter()
            .zip(student_patch)
            .map(|(t, &s)| mim_loss_graph(tape, s, t, &self.masks))
            .collect::<Result<Vec<_>, _>>()?;
        let cls = mean(tape, cls_terms)?;
        let patch = mean(tape, patch_terms)?;
        let weighted: Vec<Var> = [(cls, self.weights.lambda1), (patch, self.weights.lambda2)]
            .into_iter()
            .filter_map(|(v, w)| v.map(|v| tape.scale(v, T::lit(w))))
            .collect();
        let total = match weighted[..] {
            [] => tape.constant(Matrix::zeros(1, 1)),
            [a] => a,
            [a, b] => tape.add(a, b)?,
            _ => unreachable!(),
        };
        Ok(LossVars { total, cls, patch })
    }
}

/// Paths produced by [`run`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    /// Steps executed by this invocation.
    pub steps_run: usize,
}

/// Trains `config` on `ds`, writing `metrics.csv`, `config.json` and
/// checkpoints under `out_dir`. With `resume`, continues from that
/// checkpoint; the continuation is identical to an uninterrupted run.
pub fn run(
    config: &TrainConfig,
    ds: &ImageDataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary, TrainError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.json"), config.to_json())?;
    let mut state: TrainState<f32> = match resume {
        Some(dir) => {
            let st = load_checkpoint(dir)?;
            if st.config.hash() != config.hash() {
                return Err(TrainError::ResumeMismatch {
                    expected: config.hash(),
                    found: st.config.hash(),
                });
            }
            st
        }
        None => TrainState::new(config.clone())?,
    };
    state.check_dataset(ds)?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut kept = vec![METRICS_HEADER.to_string()];
    if resume.is_some() && metrics_path.exists() {
        kept.extend(
            fs::read_to_string(&metrics_path)?
                .lines()
                .skip(1)
                .filter(|line| {
                    line.split(',')
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .is_some_and(|s| s < state.step)
                })
                .map(str::to_string),
        );
    }
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    for line in &kept {
        writeln!(metrics, "{line}")?;
    }
    metrics.flush()?;

    let start = state.step;
    while state.step < config.steps {
        let report = match state.train_step(ds) {
            Ok(r) => r,
            Err(e @ TrainError::NonFiniteLoss { .. }) => {
                let dump = out_dir.join(format!("nonfinite_step_{:06}.txt", state.step));
                fs::write(&dump, format!("{e}\n"))?;
                log::error!("{e}; diagnostic written to {}", dump.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(metrics, "{}", report.metrics.csv_row())?;
        metrics.flush()?;
        let r = &report.metrics;
        if r.step % 50 == 0 || state.step == config.steps {
            log::info!(
                "step {} loss {:.4} (cls {:.4}, patch {:.4}) entropy {:.3} std {:.4} lr {:.2e}",
                r.step,
                r.loss_total,
                r.loss_cls,
                r.loss_patch,
                r.teacher_entropy,
                r.feature_std,
                r.learning_rate
            );
        }
        if config.checkpoint_every > 0
            && state.step.is_multiple_of(config.checkpoint_every)
            && state.step < config.steps
        {
            save_checkpoint(&state, &out_dir.join(checkpoint_dir_name(state.step)))?;
        }
    }
    let final_checkpoint = out_dir.join(checkpoint_dir_name(state.step));
    if !final_checkpoint.join("manifest.txt").exists() {
        save_checkpoint(&state, &final_checkpoint)?;
    }
    Ok(RunSummary {
        final_checkpoint,
        metrics_path,
        steps_run: state.step - start,
    })
}

/// Reads a metrics file written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || {
            TrainError::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("metrics line {}", i + 1),
            ))
        };
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
        out.push(MetricsRecord {
            step: f[0].parse().map_err(|_| bad())?,
            loss_total: num(1)?,
            loss_cls: num(2)?,
            loss_patch: num(3)?,
            teacher_entropy: num(4)?,
            feature_std: num(5)?,
            ema_m: num(6)?,
            learning_rate: num(7)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;

//! Two-stage seminar training: an ancillary student/teacher pair learns from
//! clicks, then freshly seeded primary pairs additionally learn from the
//! per-pixel pseudo-labels of the previous stage's frozen student.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, mix_seed, AugmentParams, Dataset};
use crate::ema::TeacherState;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::{
    combine_ancillary, combine_primary, crf_loss_pooled, partial_cross_entropy, pixel_consistency_approx,
    pixel_consistency_exact, pseudo_label_loss, LossResult, PseudoLabelMap,
};
use crate::net::{forward, forward_with_tape, init_params, Architecture, GradientVector, ParameterVector};
use crate::optim::{sgd_step, LrSchedule, OptimizerState, SgdConfig};
use crate::tensor::ScoreMap;

/// Seed distance between consecutive primary stages.
pub const STAGE_SEED_OFFSET: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyForm {
    /// Mean over all pixels.
    Approx,
    /// Mean over unclicked pixels only.
    Exact,
}

/// Where a primary stage gets its pseudo-labels and initial weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    /// A freshly seeded student learns from the previous stage's student.
    Student,
    /// The previous student keeps training on its own frozen predictions with
    /// a fresh learning-rate schedule.
    SelfReset,
    /// As `SelfReset`, but the learning rate stays at the previous stage's
    /// final value.
    SelfUnchanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ancillary_seed: u64,
    pub primary_seed: u64,
    /// Drives shuffling and augmentation.
    pub augment_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda_crf: f64,
    pub lambda_pseudo: f64,
    /// Final consistency weight, reached after `ramp_epochs`.
    pub lambda_pcons: f64,
    pub ramp_epochs: usize,
    /// Number of chained student-student modules after the ancillary stage.
    pub modules: usize,
    pub use_pce: bool,
    pub use_crf: bool,
    pub use_pcons: bool,
    /// Applies to primary stages only.
    pub use_pseudo: bool,
    pub consistency: ConsistencyForm,
    pub augment_scale_crop: bool,
    pub augment_flip: bool,
    pub augment_noise: bool,
    pub crf_sigma_xy: f64,
    pub crf_sigma_rgb: f64,
    /// The CRF term is evaluated on a grid pooled by this factor.
    pub crf_downsample: usize,
    pub pseudo_source: PseudoSource,
    /// Items held out from the end of the dataset for per-epoch validation.
    pub val_count: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ancillary_seed: 1,
            primary_seed: 2,
            augment_seed: 3,
            epochs: 60,
            batch_size: 10,
            base_lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            alpha: 0.999,
            lambda_crf: 1.0,
            lambda_pseudo: 1.0,
            lambda_pcons: 200.0,
            ramp_epochs: 40,
            modules: 1,
            use_pce: true,
            use_crf: true,
            use_pcons: true,
            use_pseudo: true,
            consistency: ConsistencyForm::Approx,
            augment_scale_crop: true,
            augment_flip: true,
            augment_noise: true,
            crf_sigma_xy: 5.0,
            crf_sigma_rgb: 0.1,
            crf_downsample: 2,
            pseudo_source: PseudoSource::Student,
            val_count: 0,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for k in 1..=self.modules as u64 {
            if self.stage_seed(k as usize) == self.ancillary_seed {
                return fail(format!(
                    "ancillary_seed {} collides with the seed of primary stage {k}",
                    self.ancillary_seed
                ));
            }
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.ramp_epochs == 0 {
            return fail("ramp_epochs must be positive".into());
        }
        if self.ramp_epochs > self.epochs {
            return fail(format!(
                "ramp_epochs {} exceeds epochs {}",
                self.ramp_epochs, self.epochs
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_crf", self.lambda_crf),
            ("lambda_pseudo", self.lambda_pseudo),
            ("lambda_pcons", self.lambda_pcons),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.crf_sigma_xy > 0.0 && self.crf_sigma_rgb > 0.0) {
            return fail("CRF bandwidths must be positive".into());
        }
        if self.crf_downsample == 0 {
            return fail("crf_downsample must be positive".into());
        }
        if !(self.use_pce || self.use_crf || self.use_pcons) {
            return fail("at least one of use_pce, use_crf, use_pcons must be enabled".into());
        }
        Ok(())
    }

    /// Initialization seed of stage `k` (0 = ancillary).
    pub fn stage_seed(&self, k: usize) -> u64 {
        if k == 0 {
            self.ancillary_seed
        } else {
            self.primary_seed
                .wrapping_add((k as u64 - 1).wrapping_mul(STAGE_SEED_OFFSET))
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            scale_crop: self.augment_scale_crop,
            flip: self.augment_flip,
            noise_sigma: if self.augment_noise { 0.02 } else { 0.0 },
            ..AugmentParams::default()
        }
    }

    fn augments(&self) -> bool {
        self.augment_scale_crop || self.augment_flip || self.augment_noise
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Canonical form of everything that influences stages `0..=k`; equal
    /// keys produce identical stage outputs.
    pub fn stage_key(&self, k: usize) -> String {
        let mut c = self.clone();
        c.data = None;
        c.out = None;
        c.modules = k;
        if k == 0 {
            c.use_pseudo = false;
            c.lambda_pseudo = 0.0;
            c.primary_seed = 0;
            c.pseudo_source = PseudoSource::Student;
        }
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// `final · min(epoch / ramp_epochs, 1)`.
pub fn rampup_weight(epoch: usize, final_value: f64, ramp_epochs: usize) -> Result<f64> {
    if ramp_epochs == 0 {
        return Err(Error::Config("ramp_epochs must be positive".into()));
    }
    Ok(final_value * (epoch as f64 / ramp_epochs as f64).min(1.0))
}

/// Per-pixel max-score class, lowest index on ties.
pub fn generate_pseudo_labels(scores: &ScoreMap) -> PseudoLabelMap {
    PseudoLabelMap::from_scores(scores)
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub pce: f64,
    pub pcons: f64,
    pub crf: f64,
    pub pseudo: f64,
    pub lambda_pcons: f64,
    /// Learning rate of the epoch's first step.
    pub lr: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "stage,epoch,pce,pcons,crf,pseudo,lambda_pcons,lr,val_miou";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{},{},{},{},{},{},",
                r.stage, r.epoch, r.pce, r.pcons, r.crf, r.pseudo, r.lambda_pcons, r.lr
            );
            if let Some(m) = r.val_miou {
                let _ = write!(s, "{m}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .unwrap_or_default();
        if header != TRAIN_LOG_HEADER {
            return Err(Error::format(path, format!("unexpected header {header:?}")));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("field count"));
            }
            let num = |i: usize, name: &str| f[i].parse::<f64>().map_err(|_| bad(name));
            records.push(EpochRecord {
                stage: f[0].parse().map_err(|_| bad("stage"))?,
                epoch: f[1].parse().map_err(|_| bad("epoch"))?,
                pce: num(2, "pce")?,
                pcons: num(3, "pcons")?,
                crf: num(4, "crf")?,
                pseudo: num(5, "pseudo")?,
                lambda_pcons: num(6, "lambda_pcons")?,
                lr: num(7, "lr")?,
                val_miou: if f[8].is_empty() { None } else { Some(num(8, "val_miou")?) },
            });
        }
        Ok(TrainLog { records })
    }
}

/// How one stage starts.
#[derive(Debug, Clone)]
pub struct StagePlan<'a> {
    pub index: usize,
    /// Starting weights; `None` draws fresh weights from the stage seed.
    pub init: Option<ParameterVector>,
    /// Frozen pseudo-label source; present exactly for primary stages.
    pub frozen: Option<&'a ParameterVector>,
    pub schedule: LrSchedule,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub index: usize,
    pub student: ParameterVector,
    pub teacher: ParameterVector,
    pub records: Vec<EpochRecord>,
    /// Learning rate of the last optimizer step.
    pub final_lr: f64,
}

#[derive(Default)]
struct Sums {
    pce: f64,
    pcons: f64,
    crf: f64,
    pseudo: f64,
    items: usize,
}

/// Loss value and student-score gradient for one (augmented) image.
#[allow(clippy::too_many_arguments)]
fn item_loss(
    config: &TrainConfig,
    image: &crate::tensor::Array3,
    clicks: &crate::losses::ClickSet,
    scores: &ScoreMap,
    teacher: &ParameterVector,
    frozen: Option<&ParameterVector>,
    lambda_pcons: f64,
    sums: &mut Sums,
) -> Result<LossResult> {
    let (h, w, c) = scores.array().dims();
    let pce = if config.use_pce && !clicks.is_empty() {
        partial_cross_entropy(scores, clicks)?
    } else {
        LossResult::zero(h, w, c)
    };
    let pcons = if config.use_pcons {
        let t = forward(image, teacher)?;
        match config.consistency {
            ConsistencyForm::Approx => pixel_consistency_approx(&t, scores)?,
            ConsistencyForm::Exact => pixel_consistency_exact(&t, scores, clicks)?,
        }
    } else {
        LossResult::zero(h, w, c)
    };
    let crf = if config.use_crf {
        crf_loss_pooled(image, scores, config.crf_sigma_xy, config.crf_sigma_rgb, config.crf_downsample)?
    } else {
        LossResult::zero(h, w, c)
    };
    let lstar = combine_ancillary(&pce, &pcons, &crf, lambda_pcons, config.lambda_crf)?;
    let total = match frozen {
        Some(anc) if config.use_pseudo => {
            let labels = generate_pseudo_labels(&forward(image, anc)?);
            let pseudo = pseudo_label_loss(scores, &labels)?;
            sums.pseudo += pseudo.value;
            combine_primary(&lstar, &pseudo, config.lambda_pseudo)?
        }
        _ => lstar,
    };
    sums.pce += pce.value;
    sums.pcons += pcons.value;
    sums.crf += crf.value;
    sums.items += 1;
    Ok(total)
}

/// Trains one student/teacher pair. The teacher starts as a copy of the
/// student and only changes through the moving-average update.
pub fn train_stage(
    config: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    plan: &StagePlan<'_>,
) -> Result<StageOutput> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if plan.frozen.is_none() && config.use_pseudo && plan.index == 0 {
        return Err(Error::Config(
            "the ancillary stage has no pseudo-label term; disable use_pseudo for it".into(),
        ));
    }
    if plan.index > 0 && plan.frozen.is_none() {
        return Err(Error::Config(format!("primary stage {} needs a frozen ancillary model", plan.index)));
    }
    if plan.index == 0 && plan.frozen.is_some() {
        return Err(Error::Config("the ancillary stage takes no frozen model".into()));
    }
    let arch = Architecture::reference(train.classes);
    let mut student = match &plan.init {
        Some(p) => p.clone(),
        None => init_params(config.stage_seed(plan.index), &arch)?,
    };
    let expected = arch.layout()?;
    for p in std::iter::once(&student).chain(plan.frozen) {
        if !p.same_layout(&expected) {
            return Err(Error::Shape(format!(
                "model layout does not match a {}-class reference network",
                train.classes
            )));
        }
    }
    let mut teacher = TeacherState::new(&student, config.alpha)?;
    let n = train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut opt = OptimizerState::with_schedule(&student, config.epochs * steps_per_epoch, config.sgd(), plan.schedule);
    let aug = config.augment_params();
    let stage_stream = mix_seed(config.augment_seed, plan.index as u64);
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut final_lr = opt.current_lr(config.base_lr);

    for epoch in 0..config.epochs {
        let lambda_pcons = rampup_weight(epoch, config.lambda_pcons, config.ramp_epochs)?;
        let epoch_stream = mix_seed(stage_stream, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_stream));
        let epoch_lr = opt.current_lr(config.base_lr);
        let mut sums = Sums::default();

        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = GradientVector::zeros(student.layout().clone());
            for (i, &idx) in batch.iter().enumerate() {
                let item = &train.items[idx];
                let item_seed = mix_seed(epoch_stream, (b * config.batch_size + i) as u64 + 1);
                let (image, _, clicks) = if config.augments() {
                    augment(&item.image, &item.mask, &item.clicks, item_seed, &aug)?
                } else {
                    (item.image.clone(), item.mask.clone(), item.clicks.clone())
                };
                let (scores, tape) = forward_with_tape(&image, &student)?;
                let loss = item_loss(
                    config,
                    &image,
                    &clicks,
                    &scores,
                    teacher.params(),
                    plan.frozen,
                    lambda_pcons,
                    &mut sums,
                )?;
                if !loss.value.is_finite() {
                    return Err(Error::Training(format!(
                        "stage {} epoch {epoch}: non-finite loss on item {}",
                        plan.index, item.id
                    )));
                }
                grad.accumulate(&tape.backward(&student, &loss.grad)?, 1.0)?;
            }
            grad.scale(1.0 / batch.len() as f64);
            final_lr = sgd_step(&mut student, &grad, &mut opt, config.base_lr)?;
            teacher.update(&student)?;
        }
        if !student.is_finite() {
            return Err(Error::Training(format!(
                "stage {} diverged in epoch {epoch}",
                plan.index
            )));
        }

        let val_miou = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&student, v)?.mean_iou()),
            _ => None,
        };
        let k = sums.items.max(1) as f64;
        let rec = EpochRecord {
            stage: plan.index,
            epoch,
            pce: sums.pce / k,
            pcons: sums.pcons / k,
            crf: sums.crf / k,
            pseudo: sums.pseudo / k,
            lambda_pcons,
            lr: epoch_lr,
            val_miou,
        };
        debug!(
            "stage {} epoch {epoch}: pce {:.4} pcons {:.5} crf {:.4} pseudo {:.4} val {:?}",
            rec.stage, rec.pce, rec.pcons, rec.crf, rec.pseudo, rec.val_miou
        );
        records.push(rec);
    }
    info!(
        "stage {} done: val mIoU {:?}",
        plan.index,
        records.last().and_then(|r| r.val_miou)
    );
    Ok(StageOutput {
        index: plan.index,
        student,
        teacher: teacher.into_params(),
        records,
        final_lr,
    })
}

/// Memoized stage outputs keyed by [`TrainConfig::stage_key`].
#[derive(Default)]
pub struct StageCache {
    stages: HashMap<String, Arc<StageOutput>>,
}

impl StageCache {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SeminarOutput {
    /// Stage 0 is the ancillary model.
    pub stages: Vec<Arc<StageOutput>>,
    pub log: TrainLog,
}

impl SeminarOutput {
    /// The last stage's student.
    pub fn model(&self) -> &ParameterVector {
        &self.stages.last().expect("at least one stage").student
    }
}

pub fn run_seminar(config: &TrainConfig, train: &Dataset, val: Option<&Dataset>) -> Result<SeminarOutput> {
    run_seminar_cached(config, train, val, &mut StageCache::default())
}

/// [`run_seminar`], reusing any stage already present in `cache`.
pub fn run_seminar_cached(
    config: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    cache: &mut StageCache,
) -> Result<SeminarOutput> {
    config.validate()?;
    let mut stages: Vec<Arc<StageOutput>> = Vec::with_capacity(config.modules + 1);
    for k in 0..=config.modules {
        let key = config.stage_key(k);
        if let Some(hit) = cache.stages.get(&key) {
            debug!("stage {k} reused from cache");
            stages.push(hit.clone());
            continue;
        }
        let out = if k == 0 {
            let c = TrainConfig {
                use_pseudo: false,
                ..config.clone()
            };
            train_stage(
                &c,
                train,
                val,
                &StagePlan {
                    index: 0,
                    init: None,
                    frozen: None,
                    schedule: LrSchedule::Poly,
                },
            )?
        } else {
            let prev = &stages[k - 1];
            let (init, schedule) = match config.pseudo_source {
                PseudoSource::Student => (None, LrSchedule::Poly),
                PseudoSource::SelfReset => (Some(prev.student.clone()), LrSchedule::Poly),
                PseudoSource::SelfUnchanged => (Some(prev.student.clone()), LrSchedule::Constant(prev.final_lr)),
            };
            train_stage(
                config,
                train,
                val,
                &StagePlan {
                    index: k,
                    init,
                    frozen: Some(&prev.student),
                    schedule,
                },
            )?
        };
        let out = Arc::new(out);
        cache.stages.insert(key, out.clone());
        stages.push(out);
    }
    let log = TrainLog {
        records: stages.iter().flat_map(|s| s.records.iter().cloned()).collect(),
    };
    Ok(SeminarOutput { stages, log })
}

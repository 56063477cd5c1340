//! The training loop: batch assembly with per-sample seeding, the joint
//! relight+segmenter optimization step, optional adversarial domain
//! adaptation, periodic evaluation, checkpointing, and the newline-delimited
//! JSON run log.
//!
//! Everything here is deterministic for a fixed config: sample order comes
//! from counter-seeded shuffles, augmentation seeds derive from (seed,
//! epoch, index), and log records carry no wall-clock data, so two runs of
//! the same config produce byte-identical logs and checkpoints.

mod adapt;
mod checkpoint;
mod loss;
mod optim;

pub use adapt::{AdaptConfig, Discriminator};
pub use checkpoint::{apply_params, collect_params, Checkpoint};
pub use loss::{bce_with_logits, cross_entropy_loss, CeLoss};
pub use optim::{poly_lr, SgdOptimizer};

use crate::data::{
    augment, center_prepare, image_to_tensor, index_dataset, load_image_rgb, AugConfig,
    ClassTaxonomy, DataError, DatasetLayout, DomainTag, LabelMap, Sample, Split, IGNORE_LABEL,
};
use crate::hrseg::{SegConfig, SegNet};
use crate::metrics::{argmax_predictions, ConfusionMatrix, MetricsError, MetricsReport};
use crate::netcore::{
    softmax_channels, softmax_channels_backward, Mode, NetError, ParamSlot, Parameterized,
    SnapshotExt,
};
use crate::relight::{RelightConfig, RelightNet};
use crate::tensor::TensorImage;
use ndarray::s;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("log record: {0}")]
    Log(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One dataset reference inside a training config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub layout: DatasetLayout,
    pub split: Split,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data/synthetic"),
            layout: DatasetLayout::Synthetic,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Exponent of the polynomial learning-rate decay.
    pub poly_power: f64,
    /// Root seed; network init, shuffles, and per-sample augmentation all
    /// derive from it through distinct streams.
    pub seed: u64,
    /// When off, images feed the segmenter directly and the relighting
    /// network is neither run nor updated.
    pub relight_enabled: bool,
    /// Evaluate (and consider a best-checkpoint save) every this many
    /// iterations; the final iteration always evaluates.
    pub eval_interval: usize,
    /// Adversarial output-space adaptation; requires `target`.
    pub adaptation: Option<AdaptConfig>,
    pub source: DatasetSpec,
    pub target: Option<DatasetSpec>,
    /// Evaluation data; defaults to the source spec when absent.
    pub eval: Option<DatasetSpec>,
    pub aug: AugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            batch_size: 4,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            seed: 1,
            relight_enabled: true,
            eval_interval: 50,
            adaptation: None,
            source: DatasetSpec::default(),
            target: None,
            eval: None,
            aug: AugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(TrainError::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must be in [0,1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be non-negative".into()));
        }
        if self.poly_power <= 0.0 {
            return Err(TrainError::Config("poly_power must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(TrainError::Config("eval_interval must be at least 1".into()));
        }
        if let Some(adapt) = &self.adaptation {
            adapt.validate().map_err(TrainError::Config)?;
            if self.target.is_none() {
                return Err(TrainError::Config(
                    "adaptation requires a target dataset".into(),
                ));
            }
        }
        self.aug.validate()?;
        Ok(())
    }
}

// Seed streams. Every random decision in a run draws from the root seed
// through one of these, so adding a new consumer never shifts the others.
const STREAM_RELIGHT_INIT: u64 = 1;
const STREAM_SEG_INIT: u64 = 2;
const STREAM_DISC_INIT: u64 = 3;
const STREAM_SRC_ORDER: u64 = 4;
const STREAM_SRC_SAMPLE: u64 = 5;
const STREAM_TGT_ORDER: u64 = 6;
const STREAM_TGT_SAMPLE: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless seed derivation: each argument passes through a full mix, so
/// nearby (stream, a, b) tuples land on unrelated seeds.
fn derive_seed(base: u64, stream: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(base) ^ stream) ^ a) ^ b)
}

/// Hex SHA-256 of a config document; names run directories and ties log
/// files to the exact configuration that produced them.
pub fn config_digest(echo: &str) -> String {
    let digest = Sha256::digest(echo.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One drawn dataset position: which sample, and during which epoch it was
/// drawn (the epoch feeds the augmentation seed, so a sample augments
/// differently each time it comes around).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct DrawnSample {
    pub index: usize,
    pub epoch: u64,
}

/// Cycles through a dataset in epoch-sized shuffled permutations. The
/// shuffle for epoch `e` is seeded from (seed, stream, e) alone, so two
/// samplers over the same length agree draw for draw.
pub(crate) struct BatchSampler {
    len: usize,
    base_seed: u64,
    stream: u64,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
}

impl BatchSampler {
    pub fn new(len: usize, base_seed: u64, stream: u64) -> Self {
        assert!(len > 0, "sampler over an empty dataset");
        let mut s = Self {
            len,
            base_seed,
            stream,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let seed = derive_seed(self.base_seed, self.stream, self.epoch, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.order = (0..self.len).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Draws `n` samples, rolling over into a freshly shuffled epoch as
    /// needed (a batch may straddle an epoch boundary).
    pub fn next(&mut self, n: usize) -> Vec<DrawnSample> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            if self.cursor == self.len {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(DrawnSample {
                index: self.order[self.cursor],
                epoch: self.epoch,
            });
            self.cursor += 1;
        }
        out
    }
}

/// Everything needed to realize drawn samples as a training batch.
pub(crate) struct BatchSource<'a> {
    pub samples: &'a [Sample],
    pub layout: DatasetLayout,
    pub taxonomy: &'a ClassTaxonomy,
    pub aug: &'a AugConfig,
    pub base_seed: u64,
    pub seed_stream: u64,
}

impl BatchSource<'_> {
    fn prepare_one(&self, draw: DrawnSample) -> Result<(TensorImage<f32>, LabelMap)> {
        let sample = &self.samples[draw.index];
        let raster = load_image_rgb(&sample.image_path)?;
        let image = image_to_tensor(&raster);
        let (_, _, h, w) = image.dim();
        let label = match &sample.label_path {
            Some(path) => self.layout.load_label(path, self.taxonomy)?,
            // Unlabeled (target-domain) images ride through the same
            // geometry with an all-ignore label.
            None => LabelMap::filled(IGNORE_LABEL, h, w)?,
        };
        let seed = derive_seed(self.base_seed, self.seed_stream, draw.epoch, draw.index as u64);
        let (image, label) = augment(&image, &label, self.aug, seed)?;
        Ok((image, label))
    }

    /// Loads and augments the draws into a stacked (N,3,H,W) batch. Sample
    /// preparation parallelizes across the batch; seeds depend only on the
    /// draw, so scheduling cannot change the result.
    pub fn load(&self, draws: &[DrawnSample]) -> Result<(TensorImage<f32>, Vec<LabelMap>)> {
        let prepared = crate::par::map_indexed(draws.len(), |i| self.prepare_one(draws[i]));
        let mut images =
            TensorImage::<f32>::zeros((draws.len(), 3, self.aug.crop_height, self.aug.crop_width));
        let mut labels = Vec::with_capacity(draws.len());
        for (i, part) in prepared.into_iter().enumerate() {
            let (img, lab) = part?;
            images.slice_mut(s![i..i + 1, .., .., ..]).assign(&img);
            labels.push(lab);
        }
        Ok((images, labels))
    }
}

fn join_prefix(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter walk over the jointly trained networks. The relighting net is
/// skipped entirely when disabled, so the optimizer can neither decay nor
/// drift its weights.
pub struct MainNets<'a> {
    pub relight: Option<&'a mut RelightNet<f32>>,
    pub seg: &'a mut SegNet<f32>,
}

impl Parameterized<f32> for MainNets<'_> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, f32>)) {
        if let Some(relight) = self.relight.as_deref_mut() {
            relight.visit_params(&join_prefix(prefix, "relight"), f);
        }
        self.seg.visit_params(&join_prefix(prefix, "seg"), f);
    }
}

/// Wraps a network so its parameters appear under an extra name prefix
/// (keeps discriminator optimizer buffers distinct in checkpoints).
struct Prefixed<'a, N> {
    net: &'a mut N,
    prefix: &'a str,
}

impl<N: Parameterized<f32>> Parameterized<f32> for Prefixed<'_, N> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamSlot<'_, f32>)) {
        self.net.visit_params(&join_prefix(prefix, self.prefix), f);
    }
}

/// Per-iteration log line. Deliberately free of wall-clock data so logs
/// from identical configs compare byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub iteration: usize,
    pub lr: f64,
    pub loss_ce: f64,
    /// Weighted adversarial loss on the segmenter; absent without adaptation.
    pub loss_adv: Option<f64>,
    pub loss_disc: Option<f64>,
    pub valid_pixels: usize,
    pub all_ignored: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        config_sha256: String,
        relight_enabled: bool,
        adaptation: bool,
        source_samples: usize,
        source_unlabeled_skipped: usize,
        target_samples: Option<usize>,
    },
    Step(StepLog),
    Eval {
        iteration: usize,
        miou: f64,
        pixel_accuracy: f64,
    },
    End {
        iterations: usize,
        sample_order_hash: String,
        final_miou: f64,
        best_miou: f64,
    },
}

/// Live training state: the networks, their optimizers, and the iteration
/// counter. Construction is purely in-memory; datasets are fit's concern.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub relight: RelightNet<f32>,
    pub seg: SegNet<f32>,
    pub disc: Option<Discriminator<f32>>,
    main_opt: SgdOptimizer<f32>,
    disc_opt: Option<SgdOptimizer<f32>>,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, relight_cfg: &RelightConfig, seg_cfg: &SegConfig) -> Result<Self> {
        cfg.validate()?;
        let relight = RelightNet::new(relight_cfg, derive_seed(cfg.seed, STREAM_RELIGHT_INIT, 0, 0))?;
        let seg = SegNet::new(seg_cfg, derive_seed(cfg.seed, STREAM_SEG_INIT, 0, 0))?;
        let disc = cfg.adaptation.as_ref().map(|a| {
            Discriminator::new(
                seg_cfg.num_classes,
                a.disc_channels,
                derive_seed(cfg.seed, STREAM_DISC_INIT, 0, 0),
            )
        });
        // The discriminator keeps a fixed learning rate (adaptation wants a
        // steady adversary while the segmenter's schedule decays).
        let disc_opt = cfg.adaptation.as_ref().map(|_| SgdOptimizer::new(cfg.momentum, 0.0));
        Ok(Self {
            cfg: cfg.clone(),
            relight,
            seg,
            disc,
            main_opt: SgdOptimizer::new(cfg.momentum, cfg.weight_decay),
            disc_opt,
            iteration: 0,
        })
    }

    /// Supervised pass on a source batch: forward through relight (when
    /// enabled) and the segmenter, cross-entropy, and backward. Gradients
    /// accumulate into the main networks only. Returns the loss bundle and
    /// the raw logits (the adaptation step reuses them).
    pub fn segmentation_pass(
        &mut self,
        images: &TensorImage<f32>,
        labels: &[LabelMap],
    ) -> Result<(CeLoss<f32>, TensorImage<f32>)> {
        let relight_on = self.cfg.relight_enabled;
        let seg_in = if relight_on {
            self.relight.forward(images, Mode::Train, true)?
        } else {
            images.clone()
        };
        let logits = self.seg.forward(&seg_in, Mode::Train, true)?;
        let ce = cross_entropy_loss(&logits, labels)?;
        let gx = self.seg.backward(&ce.grad);
        if relight_on {
            self.relight.backward(&gx);
        }
        Ok((ce, logits))
    }

    /// Adversarial pass on a target batch: the segmenter is pushed to
    /// produce maps the discriminator scores as source-like. Discriminator
    /// gradients picked up along the way are zeroed before returning — this
    /// pass trains the segmenter, never the adversary. Returns the weighted
    /// loss and the target probability maps for reuse.
    pub fn generator_adversarial_pass(
        &mut self,
        target_images: &TensorImage<f32>,
    ) -> Result<(f64, TensorImage<f32>)> {
        let adv_weight = match &self.cfg.adaptation {
            Some(a) => a.adv_weight,
            None => {
                return Err(TrainError::Config(
                    "adversarial pass requires an adaptation config".into(),
                ))
            }
        };
        let relight_on = self.cfg.relight_enabled;
        let seg_in = if relight_on {
            self.relight.forward(target_images, Mode::Train, true)?
        } else {
            target_images.clone()
        };
        let logits = self.seg.forward(&seg_in, Mode::Train, true)?;
        let probs = softmax_channels(&logits);

        let disc = self.disc.as_mut().expect("adaptation config implies a discriminator");
        let verdict = disc.forward(&probs, true)?;
        // Target label 1: "looks like source".
        let (raw_adv, mut dgrad) = bce_with_logits(&verdict, 1.0);
        let w = adv_weight as f32;
        dgrad.mapv_inplace(|v| v * w);
        let dprobs = disc.backward(&dgrad);
        disc.zero_grads();

        let dlogits = softmax_channels_backward(&probs, &dprobs);
        let gx = self.seg.backward(&dlogits);
        if relight_on {
            self.relight.backward(&gx);
        }
        Ok((adv_weight * raw_adv, probs))
    }

    /// Discriminator update pass over detached probability maps: source
    /// scored toward 1, target toward 0, each half-weighted. Only the
    /// discriminator sees gradients — the maps are plain values, so nothing
    /// can flow back into the segmenter.
    pub fn discriminator_pass(
        &mut self,
        source_probs: &TensorImage<f32>,
        target_probs: &TensorImage<f32>,
    ) -> Result<f64> {
        let disc = self.disc.as_mut().ok_or_else(|| {
            TrainError::Config("discriminator pass requires an adaptation config".into())
        })?;
        disc.zero_grads();
        let mut total = 0.0;
        for (probs, target) in [(source_probs, 1.0), (target_probs, 0.0)] {
            let verdict = disc.forward(probs, true)?;
            let (loss, mut grad) = bce_with_logits(&verdict, target);
            grad.mapv_inplace(|v| v * 0.5);
            disc.backward(&grad);
            total += 0.5 * loss;
        }
        Ok(total)
    }

    /// One optimization step over a source batch (plus a target batch when
    /// adaptation is on). Gradient flow per pass is strictly separated: the
    /// CE and adversarial terms update only the main networks, the
    /// discriminator term only the discriminator.
    pub fn train_step(
        &mut self,
        images: &TensorImage<f32>,
        labels: &[LabelMap],
        target_images: Option<&TensorImage<f32>>,
    ) -> Result<StepLog> {
        let lr = poly_lr(
            self.iteration,
            self.cfg.max_iterations,
            self.cfg.base_lr,
            self.cfg.poly_power,
        );
        self.relight.zero_grads();
        self.seg.zero_grads();

        let (ce, logits) = self.segmentation_pass(images, labels)?;
        let mut log = StepLog {
            iteration: self.iteration,
            lr,
            loss_ce: ce.loss,
            loss_adv: None,
            loss_disc: None,
            valid_pixels: ce.valid_pixels,
            all_ignored: ce.all_ignored,
        };

        if self.cfg.adaptation.is_some() {
            let tx = target_images.ok_or_else(|| {
                TrainError::Config("adaptation is enabled but no target batch was supplied".into())
            })?;
            let (adv, target_probs) = self.generator_adversarial_pass(tx)?;
            let source_probs = softmax_channels(&logits);
            let disc_loss = self.discriminator_pass(&source_probs, &target_probs)?;
            log.loss_adv = Some(adv);
            log.loss_disc = Some(disc_loss);
        }

        let mut nets = MainNets {
            relight: self.cfg.relight_enabled.then_some(&mut self.relight),
            seg: &mut self.seg,
        };
        self.main_opt.step(&mut nets, lr);
        if let (Some(disc), Some(opt), Some(adapt)) = (
            self.disc.as_mut(),
            self.disc_opt.as_mut(),
            self.cfg.adaptation.as_ref(),
        ) {
            opt.step(&mut Prefixed { net: disc, prefix: "disc" }, adapt.disc_lr);
        }
        self.iteration += 1;
        Ok(log)
    }

    /// Evaluates on labeled samples: center-crop preparation, eval-mode
    /// forward, argmax, confusion matrix. Running statistics are left
    /// untouched.
    pub fn evaluate(
        &mut self,
        samples: &[Sample],
        layout: DatasetLayout,
        taxonomy: &ClassTaxonomy,
    ) -> Result<MetricsReport> {
        let relight = self.cfg.relight_enabled.then_some(&mut self.relight);
        evaluate_samples(relight, &mut self.seg, samples, layout, taxonomy, &self.cfg.aug)
    }

    /// Serializes the complete state: both (or all three) networks and
    /// every optimizer buffer, keyed by parameter name.
    pub fn to_checkpoint(&mut self, config_echo: &str) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        collect_params(&mut self.relight, "relight", &mut tensors);
        collect_params(&mut self.seg, "seg", &mut tensors);
        if let Some(disc) = &mut self.disc {
            collect_params(disc, "disc", &mut tensors);
        }
        let mut optimizer_buffers = self.main_opt.buffers().clone();
        if let Some(opt) = &self.disc_opt {
            optimizer_buffers.extend(opt.buffers().clone());
        }
        Checkpoint {
            iteration: self.iteration as u64,
            config_echo: config_echo.to_string(),
            tensors,
            optimizer_buffers,
        }
    }

    /// Restores networks, optimizer buffers, and the iteration counter from
    /// a checkpoint produced by a structurally identical configuration.
    pub fn restore_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        apply_params(&mut self.relight, "relight", &ckpt.tensors)?;
        apply_params(&mut self.seg, "seg", &ckpt.tensors)?;
        if let Some(disc) = &mut self.disc {
            apply_params(disc, "disc", &ckpt.tensors)?;
        }
        let (disc_bufs, main_bufs): (BTreeMap<_, _>, BTreeMap<_, _>) = ckpt
            .optimizer_buffers
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .partition(|(k, _)| k.starts_with("disc."));
        self.main_opt.set_buffers(main_bufs);
        if let Some(opt) = &mut self.disc_opt {
            opt.set_buffers(disc_bufs);
        }
        self.iteration = ckpt.iteration as usize;
        Ok(())
    }
}

/// Shared evaluation path for training-time and standalone evaluation.
pub fn evaluate_samples(
    mut relight: Option<&mut RelightNet<f32>>,
    seg: &mut SegNet<f32>,
    samples: &[Sample],
    layout: DatasetLayout,
    taxonomy: &ClassTaxonomy,
    aug: &AugConfig,
) -> Result<MetricsReport> {
    let mut confusion = ConfusionMatrix::new(seg.config.num_classes);
    let mut any = false;
    for sample in samples {
        let Some(label_path) = &sample.label_path else {
            continue;
        };
        any = true;
        let raster = load_image_rgb(&sample.image_path)?;
        let image = image_to_tensor(&raster);
        let label = layout.load_label(label_path, taxonomy)?;
        let (image, label) = center_prepare(&image, &label, aug)?;
        let seg_in = match relight.as_deref_mut() {
            Some(net) => net.forward(&image, Mode::Eval, false)?,
            None => image,
        };
        let logits = seg.forward(&seg_in, Mode::Eval, false)?;
        let pred = argmax_predictions(&logits)
            .pop()
            .expect("batch of one yields one prediction");
        confusion.update(&pred, &label)?;
    }
    if !any {
        return Err(TrainError::Config(
            "evaluation set has no labeled samples".into(),
        ));
    }
    Ok(MetricsReport::from_confusion(&confusion, taxonomy)?)
}

/// Borrowed inputs to a training run: the validated config trio plus the
/// original config document for echoing into checkpoints and logs.
pub struct FitInputs<'a> {
    pub train: &'a TrainConfig,
    pub relight: &'a RelightConfig,
    pub seg: &'a SegConfig,
    pub config_echo: &'a str,
}

/// What a finished run produced and where.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub iterations: usize,
    pub final_miou: f64,
    pub best_miou: f64,
    /// SHA-256 over every (index, epoch) draw in consumption order; two
    /// runs saw the same data in the same order iff these match.
    pub sample_order_hash: String,
    pub final_eval: MetricsReport,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn write_record(
    log: &mut BufWriter<std::fs::File>,
    path: &Path,
    record: &LogRecord,
) -> Result<()> {
    let line = serde_json::to_string(record)?;
    writeln!(log, "{line}").map_err(|e| io_err(path, e))
}

fn hash_draws(hasher: &mut Sha256, draws: &[DrawnSample]) {
    for d in draws {
        hasher.update((d.index as u64).to_le_bytes());
        hasher.update(d.epoch.to_le_bytes());
    }
}

/// Runs a full training job into `run_dir`: config echo, ndjson log,
/// periodic evaluation with best-checkpoint tracking, and a final
/// checkpoint. Deterministic for a fixed config document.
pub fn fit(inputs: &FitInputs<'_>, run_dir: &Path) -> Result<FitReport> {
    let cfg = inputs.train;
    cfg.validate()?;
    let taxonomy = ClassTaxonomy::default();
    std::fs::create_dir_all(run_dir).map_err(|e| io_err(run_dir, e))?;
    let echo_path = run_dir.join("config.toml");
    std::fs::write(&echo_path, inputs.config_echo).map_err(|e| io_err(&echo_path, e))?;

    // Source: labeled samples only; unlabeled ones are counted and skipped.
    let src = index_dataset(&cfg.source.root, cfg.source.layout, cfg.source.split)?;
    let skipped = src.orphan_images.len()
        + src.samples.iter().filter(|s| s.label_path.is_none()).count();
    let src_samples: Vec<Sample> = src
        .samples
        .into_iter()
        .filter(|s| s.label_path.is_some())
        .collect();
    if src_samples.is_empty() {
        return Err(TrainError::Config(
            "source split has no labeled samples".into(),
        ));
    }

    // Target: every image counts, labeled or not; labels are never read.
    let tgt_samples: Option<Vec<Sample>> = match (&cfg.adaptation, &cfg.target) {
        (Some(_), Some(spec)) => {
            let indexed = index_dataset(&spec.root, spec.layout, spec.split)?;
            let mut samples = indexed.samples;
            samples.extend(indexed.orphan_images.into_iter().map(|image_path| Sample {
                image_path,
                label_path: None,
                domain: DomainTag::Target,
            }));
            samples.sort_by(|a, b| a.image_path.cmp(&b.image_path));
            for s in &mut samples {
                s.domain = DomainTag::Target;
                s.label_path = None;
            }
            if samples.is_empty() {
                return Err(TrainError::Config("target split has no images".into()));
            }
            Some(samples)
        }
        _ => None,
    };

    let eval_spec = cfg.eval.clone().unwrap_or_else(|| cfg.source.clone());
    let eval_indexed = index_dataset(&eval_spec.root, eval_spec.layout, eval_spec.split)?;
    let eval_samples: Vec<Sample> = eval_indexed
        .samples
        .into_iter()
        .filter(|s| s.label_path.is_some())
        .collect();
    if eval_samples.is_empty() {
        return Err(TrainError::Config(
            "evaluation split has no labeled samples".into(),
        ));
    }

    let mut state = TrainState::new(cfg, inputs.relight, inputs.seg)?;
    let mut src_sampler = BatchSampler::new(src_samples.len(), cfg.seed, STREAM_SRC_ORDER);
    let src_source = BatchSource {
        samples: &src_samples,
        layout: cfg.source.layout,
        taxonomy: &taxonomy,
        aug: &cfg.aug,
        base_seed: cfg.seed,
        seed_stream: STREAM_SRC_SAMPLE,
    };
    let mut tgt_sampler = tgt_samples
        .as_ref()
        .map(|t| BatchSampler::new(t.len(), cfg.seed, STREAM_TGT_ORDER));

    let log_path = run_dir.join("train.ndjson");
    let mut log = BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?,
    );
    let mut hasher = Sha256::new();
    write_record(
        &mut log,
        &log_path,
        &LogRecord::Start {
            config_sha256: config_digest(inputs.config_echo),
            relight_enabled: cfg.relight_enabled,
            adaptation: cfg.adaptation.is_some(),
            source_samples: src_samples.len(),
            source_unlabeled_skipped: skipped,
            target_samples: tgt_samples.as_ref().map(Vec::len),
        },
    )?;

    let final_path = run_dir.join("final.ckpt");
    let best_path = run_dir.join("best.ckpt");
    let mut best_miou = f64::NEG_INFINITY;
    let mut last_eval: Option<MetricsReport> = None;

    let run_eval = |state: &mut TrainState,
                        log: &mut BufWriter<std::fs::File>,
                        iteration: usize,
                        best_miou: &mut f64|
     -> Result<MetricsReport> {
        let report = state.evaluate(&eval_samples, eval_spec.layout, &taxonomy)?;
        write_record(
            log,
            &log_path,
            &LogRecord::Eval {
                iteration,
                miou: report.miou,
                pixel_accuracy: report.pixel_accuracy,
            },
        )?;
        if report.miou > *best_miou {
            *best_miou = report.miou;
            state.to_checkpoint(inputs.config_echo).save(&best_path)?;
        }
        Ok(report)
    };

    for it in 0..cfg.max_iterations {
        let draws = src_sampler.next(cfg.batch_size);
        hash_draws(&mut hasher, &draws);
        let (images, labels) = src_source.load(&draws)?;

        let target_batch = match (tgt_sampler.as_mut(), tgt_samples.as_ref(), &cfg.target) {
            (Some(sampler), Some(samples), Some(spec)) => {
                let tdraws = sampler.next(cfg.batch_size);
                hash_draws(&mut hasher, &tdraws);
                let source = BatchSource {
                    samples,
                    layout: spec.layout,
                    taxonomy: &taxonomy,
                    aug: &cfg.aug,
                    base_seed: cfg.seed,
                    seed_stream: STREAM_TGT_SAMPLE,
                };
                let (timages, _) = source.load(&tdraws)?;
                Some(timages)
            }
            _ => None,
        };

        let step = state.train_step(&images, &labels, target_batch.as_ref())?;
        write_record(&mut log, &log_path, &LogRecord::Step(step))?;

        if (it + 1) % cfg.eval_interval == 0 || it + 1 == cfg.max_iterations {
            last_eval = Some(run_eval(&mut state, &mut log, it + 1, &mut best_miou)?);
        }
    }
    if cfg.max_iterations == 0 {
        last_eval = Some(run_eval(&mut state, &mut log, 0, &mut best_miou)?);
    }

    let final_eval = last_eval.expect("every path above evaluates at least once");
    state.to_checkpoint(inputs.config_echo).save(&final_path)?;

    let digest = hasher.finalize();
    let sample_order_hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    write_record(
        &mut log,
        &log_path,
        &LogRecord::End {
            iterations: cfg.max_iterations,
            sample_order_hash: sample_order_hash.clone(),
            final_miou: final_eval.miou,
            best_miou,
        },
    )?;
    log.flush().map_err(|e| io_err(&log_path, e))?;

    let eval_json = run_dir.join("eval.json");
    let rendered = serde_json::to_string_pretty(&final_eval)?;
    std::fs::write(&eval_json, rendered).map_err(|e| io_err(&eval_json, e))?;

    Ok(FitReport {
        iterations: cfg.max_iterations,
        final_miou: final_eval.miou,
        best_miou,
        sample_order_hash,
        final_eval,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        log_path,
    })
}

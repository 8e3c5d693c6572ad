//! Model assembly per strategy, training with best-by-IoU selection,
//! checkpoints and parameter accounting.

use std::fmt;
use std::io::Write;
use std::path::Path;

use diffcore::{adam_step, AdamConfig, AdamState, Parameter, Reduction, Rng, Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{DTypeName, Strategy};
use crate::dataplane::{Mask, Patch};
use crate::lora::LoraSpec;
use crate::model::{hex, Model, ModelAssembly, ModelConfig};
use crate::objective::{self, ClassWeights, ConfusionCounts};
use crate::params::fnv1a;
use crate::{Error, Result};

/// Builds the network for `strategy` and initialises it from `seed`.
pub fn build_model<T: Scalar>(
    config: &ModelConfig,
    strategy: Strategy,
    lora: &LoraSpec,
    seed: u64,
) -> Result<Model<T>> {
    Model::build(config, strategy, lora, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    EncoderOnly,
    FullNetwork,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::EncoderOnly => "encoder_only",
            Scope::FullNetwork => "full_network",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub scope: Scope,
    pub total: usize,
    pub trainable: usize,
    pub percent: f64,
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: total {} trainable {} ({:.4}%)",
            self.scope, self.total, self.trainable, self.percent
        )
    }
}

/// Exact element counts within `scope`, split by trainability.
pub fn param_report(assembly: &ModelAssembly, scope: Scope) -> ParamReport {
    let in_scope = |s: &&crate::params::ParamSpec| {
        scope == Scope::FullNetwork || s.component.in_encoder_scope()
    };
    let specs: Vec<_> = assembly.table.specs.iter().filter(in_scope).collect();
    let total: usize = specs.iter().map(|s| s.numel()).sum();
    let trainable: usize = specs
        .iter()
        .filter(|s| s.trainable)
        .map(|s| s.numel())
        .sum();
    ParamReport {
        scope,
        total,
        trainable,
        percent: if total == 0 {
            0.0
        } else {
            100.0 * trainable as f64 / total as f64
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

impl From<LossReduction> for Reduction {
    fn from(r: LossReduction) -> Self {
        match r {
            LossReduction::Mean => Reduction::Mean,
            LossReduction::Sum => Reduction::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub strategy: Strategy,
    pub weights: ClassWeights,
    pub reduction: LossReduction,
    pub eval_every: usize,
    /// Stop after this many evaluations without a new best.
    pub patience: Option<usize>,
    /// Stop as soon as an evaluation reaches this validation IoU.
    pub target_val_iou: Option<f64>,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 2,
            max_epochs: None,
            max_steps: Some(2000),
            seed: 0,
            strategy: Strategy::Lora,
            weights: ClassWeights::default(),
            reduction: LossReduction::Mean,
            eval_every: 100,
            patience: None,
            target_val_iou: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Run-config validation; the trainer itself also accepts `lr == 0`.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        self.validate_loose()
    }

    fn validate_loose(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "train.lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "train.batch_size and train.eval_every must be at least 1".into(),
            ));
        }
        if self.max_epochs.is_none() && self.max_steps.is_none() {
            return Err(Error::Config(
                "set train.max_steps or train.max_epochs".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "train.val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        self.weights.validate()
    }
}

/// Holds out roughly `fraction` of the fires, chosen by a hash of `fire_id`,
/// as validation patches. At least one fire is held out when there are two
/// or more and `fraction > 0`.
pub fn holdout_split(patches: Vec<Patch>, fraction: f64) -> (Vec<Patch>, Vec<Patch>) {
    let bucket = |id: &str| fnv1a(id.as_bytes()) % 10_000;
    let cut = (fraction * 10_000.0).round() as u64;
    let mut ids: Vec<&str> = patches.iter().map(|p| p.fire_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut held: Vec<String> = ids
        .iter()
        .filter(|id| bucket(id) < cut)
        .map(|s| s.to_string())
        .collect();
    if held.is_empty() && cut > 0 && ids.len() >= 2 {
        let lowest = ids
            .iter()
            .min_by_key(|id| (bucket(id), **id))
            .expect("non-empty");
        held.push(lowest.to_string());
    }
    patches
        .into_iter()
        .partition(|p| !held.contains(&p.fire_id))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_iou: Option<f64>,
}

/// Append-only JSON-lines history file.
pub struct HistoryLog {
    file: std::fs::File,
    path: std::path::PathBuf,
}

impl HistoryLog {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    pub fn append(&mut self, e: &HistoryEntry) -> Result<()> {
        let line = serde_json::to_string(e).expect("entry serialises");
        writeln!(self.file, "{line}").map_err(|err| Error::io(&self.path, err))
    }
}

/// Model weights plus optimizer state at one point of training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub strategy: Strategy,
    pub lora: Option<LoraSpec>,
    pub config_hash: String,
    pub step: u64,
    pub best_val_iou: Option<f64>,
    pub params: Vec<Parameter<T>>,
    pub adam: AdamState<T>,
}

const CKPT_MAGIC: &[u8; 8] = b"BMCKPT\0\0";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    version: u32,
    dtype: String,
    config: ModelConfig,
    strategy: Strategy,
    lora: Option<LoraSpec>,
    config_hash: String,
    step: u64,
    best_val_iou: Option<f64>,
    adam_step: u64,
    tensors: Vec<CkptTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CkptTensor {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    /// Whether Adam moments follow the parameter in the payload.
    moments: bool,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        model: &Model<T>,
        adam: &AdamState<T>,
        step: u64,
        best_val_iou: Option<f64>,
    ) -> Self {
        Self {
            config: model.assembly.config.clone(),
            strategy: model.assembly.strategy,
            lora: model.assembly.lora.clone(),
            config_hash: model.assembly.config_hash(),
            step,
            best_val_iou,
            params: model
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.tensor.clone(), p.trainable))
                .collect(),
            adam: adam.clone(),
        }
    }

    /// Layout: 8-byte magic, little-endian u32 version, u64 header length,
    /// JSON header, tensor payload (each parameter followed by its Adam
    /// moments when present), then a SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CkptHeader {
            version: CKPT_VERSION,
            dtype: T::DTYPE.name().into(),
            config: self.config.clone(),
            strategy: self.strategy,
            lora: self.lora.clone(),
            config_hash: self.config_hash.clone(),
            step: self.step,
            best_val_iou: self.best_val_iou,
            adam_step: self.adam.step,
            tensors: self
                .params
                .iter()
                .zip(&self.adam.moments)
                .map(|(p, m)| CkptTensor {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.trainable,
                    moments: m.is_some(),
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        let mut put = |t: &Tensor<T>| {
            for v in t.data() {
                (*v).write_le(&mut out);
            }
        };
        for (p, m) in self.params.iter().zip(&self.adam.moments) {
            put(&p.tensor);
            if let Some((m1, m2)) = m {
                put(m1);
                put(m2);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fixed = CKPT_MAGIC.len() + 4 + 8;
        if bytes.len() < fixed + 32 || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::format(
                0,
                "not a checkpoint (bad magic or too short)",
            ));
        }
        let body = &bytes[..bytes.len() - 32];
        if Sha256::digest(body).as_slice() != &bytes[bytes.len() - 32..] {
            return Err(Error::format(
                body.len() as u64,
                "checkpoint checksum mismatch",
            ));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CKPT_VERSION {
            return Err(Error::format(
                8,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        if fixed + hlen > body.len() {
            return Err(Error::format(12, "header length exceeds file"));
        }
        let header: CkptHeader = serde_json::from_slice(&body[fixed..fixed + hlen])
            .map_err(|e| Error::format(fixed as u64, format!("bad checkpoint header: {e}")))?;
        if header.dtype != T::DTYPE.name() {
            return Err(Error::format(
                fixed as u64,
                format!(
                    "checkpoint holds {} tensors, {} requested",
                    header.dtype,
                    T::DTYPE.name()
                ),
            ));
        }
        let width = std::mem::size_of::<T>();
        let mut off = fixed + hlen;
        let mut take = |shape: &[usize]| -> Result<Tensor<T>> {
            let n: usize = shape.iter().product();
            if off + n * width > body.len() {
                return Err(Error::format(
                    body.len() as u64,
                    "checkpoint payload truncated",
                ));
            }
            let data = body[off..off + n * width]
                .chunks_exact(width)
                .map(T::read_le)
                .collect();
            off += n * width;
            Ok(Tensor::new(shape.to_vec(), data)?)
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        let mut moments = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            params.push(Parameter::new(t.name.clone(), take(&t.shape)?, t.trainable));
            moments.push(if t.moments {
                Some((take(&t.shape)?, take(&t.shape)?))
            } else {
                None
            });
        }
        if off != body.len() {
            return Err(Error::format(
                off as u64,
                "unexpected bytes after checkpoint payload",
            ));
        }
        Ok(Self {
            config: header.config,
            strategy: header.strategy,
            lora: header.lora,
            config_hash: header.config_hash,
            step: header.step,
            best_val_iou: header.best_val_iou,
            params,
            adam: AdamState {
                step: header.adam_step,
                moments,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
    }

    /// Reads a checkpoint. When `expected_hash` is given and differs from the
    /// stored configuration hash the load is refused unless `force` is set.
    pub fn load(path: impl AsRef<Path>, expected_hash: Option<&str>, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        let ck = Self::from_bytes(&bytes)?;
        if let Some(h) = expected_hash {
            if h != ck.config_hash && !force {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match expected {h}",
                    ck.config_hash
                )));
            }
        }
        Ok(ck)
    }

    /// Rebuilds the network and installs the stored tensors.
    pub fn to_model(&self) -> Result<Model<T>> {
        let assembly =
            ModelAssembly::build_with_adapters(&self.config, self.strategy, self.lora.as_ref())?;
        if assembly.config_hash() != self.config_hash {
            return Err(Error::Config(
                "checkpoint config does not reproduce its own hash".into(),
            ));
        }
        let mut model = Model {
            params: Vec::with_capacity(self.params.len()),
            assembly,
        };
        if model.assembly.table.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.params.len(),
                model.assembly.table.len()
            )));
        }
        for (spec, p) in model.assembly.table.specs.iter_mut().zip(&self.params) {
            if spec.name != p.name || spec.shape != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            spec.trainable = p.trainable;
            model.params.push(Parameter::new(
                p.name.clone(),
                p.tensor.clone(),
                p.trainable,
            ));
        }
        Ok(model)
    }
}

/// Precision of the tensors stored in a serialised checkpoint.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DTypeName> {
    let fixed = CKPT_MAGIC.len() + 4 + 8;
    if bytes.len() < fixed || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::format(
            0,
            "not a checkpoint (bad magic or too short)",
        ));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header = bytes
        .get(fixed..fixed.saturating_add(hlen))
        .ok_or_else(|| Error::format(12, "header length exceeds file"))?;
    #[derive(Deserialize)]
    struct Peek {
        dtype: DTypeName,
    }
    let p: Peek = serde_json::from_slice(header)
        .map_err(|e| Error::format(fixed as u64, format!("bad checkpoint header: {e}")))?;
    Ok(p.dtype)
}

/// Argmax over the class axis of `[2 x H x W]` logits; ties go to unburned.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Mask {
    let (h, w) = (logits.shape()[1], logits.shape()[2]);
    let d = logits.data();
    Mask {
        height: h,
        width: w,
        data: (0..h * w).map(|i| (d[h * w + i] > d[i]) as u8).collect(),
    }
}

/// Micro-aggregated confusion counts of `model` over `patches`.
pub fn evaluate<T: Scalar>(model: &Model<T>, patches: &[Patch]) -> Result<ConfusionCounts> {
    let mut total = ConfusionCounts::default();
    for p in patches {
        let logits = model.predict_logits(&p.pre.cast(), &p.post.cast())?;
        total += objective::confusion(&argmax_mask(&logits), &p.mask)?;
    }
    Ok(total)
}

pub struct TrainOutcome<T> {
    pub best: Checkpoint<T>,
    pub last: Checkpoint<T>,
    pub history: Vec<HistoryEntry>,
}

/// Mini-batch Adam on the weighted cross-entropy.
pub struct Trainer<'a, T: Scalar> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub history: Vec<HistoryEntry>,
    pub best: Option<Checkpoint<T>>,
    cfg: TrainConfig,
    train: &'a [Patch],
    val: &'a [Patch],
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(
        model: Model<T>,
        train: &'a [Patch],
        val: &'a [Patch],
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate_loose()?;
        if train.is_empty() {
            return Err(Error::Data("no training patches".into()));
        }
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            adam,
            step: 0,
            history: Vec::new(),
            best: None,
            cfg,
            train,
            val,
        })
    }

    /// Continues from a checkpoint's weights, optimizer state and step.
    pub fn resume(
        ck: &Checkpoint<T>,
        train: &'a [Patch],
        val: &'a [Patch],
        cfg: TrainConfig,
    ) -> Result<Self> {
        let mut t = Self::new(ck.to_model()?, train, val, cfg)?;
        t.adam = ck.adam.clone();
        t.step = ck.step;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        let by_epochs = self
            .cfg
            .max_epochs
            .map(|e| (e * self.steps_per_epoch()) as u64);
        let by_steps = self.cfg.max_steps.map(|s| s as u64);
        by_epochs.into_iter().chain(by_steps).min().unwrap_or(0)
    }

    /// Patch indices of the batch used at `step`: consecutive slices of a
    /// permutation redrawn each epoch from `(seed, epoch)`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let epoch = step / spe;
        let b = (step % spe) as usize * self.cfg.batch_size;
        let perm =
            Rng::stream(self.cfg.seed ^ 0x5eed_0000_0000_0000, epoch).permutation(self.train.len());
        perm[b..(b + self.cfg.batch_size).min(perm.len())].to_vec()
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let idx = self.batch_indices(self.step);
        let ids = || {
            idx.iter()
                .map(|&i| self.train[i].fire_id.clone())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let abort = |e: Error| -> Error {
            match e {
                Error::Tensor(diffcore::Error::NonFinite(op)) => Error::Training(format!(
                    "non-finite value in {op} at step {}; batch fires: {}",
                    self.step,
                    ids()
                )),
                other => other,
            }
        };
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape, true)?;
        let mut total = None;
        for &i in &idx {
            let p = &self.train[i];
            let out = self
                .model
                .forward_bound(&mut tape, &vars, &p.pre.cast(), &p.post.cast())
                .map_err(abort)?;
            let l = objective::weighted_ce(
                &mut tape,
                out.logits,
                &p.mask,
                &self.cfg.weights,
                self.cfg.reduction.into(),
            )
            .map_err(abort)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let loss = tape.scale(total.expect("batch is non-empty"), 1.0 / idx.len() as f64)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss {value} at step {}; batch fires: {}",
                self.step,
                ids()
            )));
        }
        let mut grads = tape.backward(loss).map_err(|e| abort(e.into()))?;
        for (p, &v) in self.model.params.iter_mut().zip(&vars) {
            if p.trainable {
                if let Some(g) = grads.take(v) {
                    p.accumulate_grad(&g);
                }
            }
        }
        adam_step(
            &mut self.model.params,
            &mut self.adam,
            &AdamConfig::with_lr(self.cfg.lr),
        )?;
        self.model.zero_grads();
        self.step += 1;
        Ok(value)
    }

    pub fn evaluate(&self) -> Result<ConfusionCounts> {
        evaluate(&self.model, self.val)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(&self.model, &self.adam, self.step, self.best_val_iou())
    }

    pub fn best_val_iou(&self) -> Option<f64> {
        self.history
            .iter()
            .filter_map(|h| h.val_iou)
            .reduce(f64::max)
    }

    /// Trains to the configured budget, evaluating every `eval_every` steps
    /// and at the end, and keeps the checkpoint with the highest validation
    /// IoU (the last one when there is no validation data).
    pub fn run(
        mut self,
        mut on_entry: impl FnMut(&HistoryEntry) -> Result<()>,
    ) -> Result<TrainOutcome<T>> {
        let total = self.total_steps();
        let mut stale = 0usize;
        while self.step < total {
            let loss = self.train_step()?;
            let due = self.step.is_multiple_of(self.cfg.eval_every as u64) || self.step == total;
            let val_iou = if due && !self.val.is_empty() {
                Some(self.evaluate()?.iou())
            } else {
                None
            };
            let entry = HistoryEntry {
                step: self.step,
                loss,
                val_iou,
            };
            on_entry(&entry)?;
            let prev_best = self.best_val_iou();
            self.history.push(entry);
            if let Some(v) = val_iou {
                if prev_best.is_none_or(|b| v > b) {
                    self.best = Some(self.checkpoint());
                    stale = 0;
                    if self.cfg.target_val_iou.is_some_and(|t| v >= t) {
                        break;
                    }
                } else {
                    stale += 1;
                    if self.cfg.patience.is_some_and(|p| stale >= p) {
                        break;
                    }
                }
            }
        }
        let last = self.checkpoint();
        let best = match self.best.take() {
            Some(b) => Checkpoint {
                best_val_iou: last.best_val_iou,
                ..b
            },
            None => last.clone(),
        };
        Ok(TrainOutcome {
            best,
            last,
            history: self.history,
        })
    }
}

/// Convenience wrapper around [`Trainer`].
pub fn train<T: Scalar>(
    model: Model<T>,
    train: &[Patch],
    val: &[Patch],
    cfg: &TrainConfig,
    on_entry: impl FnMut(&HistoryEntry) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    Trainer::new(model, train, val, cfg.clone())?.run(on_entry)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

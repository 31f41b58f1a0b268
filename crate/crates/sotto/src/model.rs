//! The victim transcriber: a small LSTM over cepstral features emitting
//! per-frame logits over the 28-token alphabet, with a CTC training loop,
//! checkpointing, and a synthetic two-tone speech corpus that makes the
//! whole pipeline reproducible from a seed with no external data.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphabet::{Alphabet, Phrase};
use crate::audio::Waveform;
use crate::ctc;
use crate::features::{FeatConstants, FeatureConfig, FeatureError, Featurizer};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("feature width {features} does not match model input width {expected}")]
    WidthMismatch { expected: usize, features: usize },
    #[error("corpus sample {index} is infeasible: phrase needs {required} frames, waveform has {frames}")]
    InfeasibleSample {
        index: usize,
        required: usize,
        frames: usize,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("incompatible checkpoint: {reason}")]
    IncompatibleCheckpoint { reason: String },
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ctc(#[from] ctc::CtcError),
}

/// Architecture and initialization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_size: 64,
            n_layers: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct LstmLayer {
    /// input width × 4·hidden, gate order [input, forget, cell, output].
    w_x: Tensor,
    /// hidden × 4·hidden.
    w_h: Tensor,
    /// 1 × 4·hidden.
    bias: Tensor,
}

#[derive(Debug, Clone)]
struct Weights {
    layers: Vec<LstmLayer>,
    /// hidden × labels.
    w_out: Tensor,
    /// 1 × labels.
    b_out: Tensor,
}

/// A (waveform, transcription) pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub waveform: Waveform,
    pub phrase: Phrase,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    /// Global-norm gradient clip; LSTM training without one occasionally
    /// spikes on hard alignments.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            holdout_fraction: 0.15,
            seed: 0,
            grad_clip: Some(5.0),
        }
    }
}

/// What a training run measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
    pub train_size: usize,
}

/// Checkpoint metadata carried alongside the weights.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: u32,
    pub final_loss: Option<f64>,
    pub holdout_accuracy: Option<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SavedTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl From<&Tensor> for SavedTensor {
    fn from(t: &Tensor) -> Self {
        SavedTensor {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}

impl SavedTensor {
    fn restore(self, what: &str, expect: &[usize]) -> Result<Tensor, ModelError> {
        if self.shape != expect {
            return Err(ModelError::IncompatibleCheckpoint {
                reason: format!("{what} has shape {:?}, expected {:?}", self.shape, expect),
            });
        }
        Tensor::new(self.shape, self.data).map_err(|e| ModelError::IncompatibleCheckpoint {
            reason: format!("{what}: {e}"),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SavedLayer {
    w_x: SavedTensor,
    w_h: SavedTensor,
    bias: SavedTensor,
}

/// On-disk model container (JSON). Weight arrays round-trip exactly:
/// serde_json prints the shortest representation that parses back to the
/// same float, so a loaded checkpoint reproduces bit-identical logits.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub feature_config: FeatureConfig,
    pub alphabet: Alphabet,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    layers: Vec<SavedLayer>,
    w_out: SavedTensor,
    b_out: SavedTensor,
    pub meta: TrainMeta,
}

/// The transcriber itself. Read-only once built or loaded; training
/// produces a new instance.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    alphabet: Alphabet,
    featurizer: Featurizer,
    feat_mean: Vec<f64>,
    feat_std: Vec<f64>,
    weights: Weights,
}

/// Graph handles for one forward construction: featurizer constants plus
/// weight nodes. Build once per graph, reuse across branches.
pub struct ModelGraphCtx {
    feat: FeatConstants,
    weights: WeightNodes,
}

struct WeightNodes {
    layers: Vec<(NodeId, NodeId, NodeId)>,
    w_out: NodeId,
    b_out: NodeId,
    mean: NodeId,
    inv_std: NodeId,
}

impl WeightNodes {
    /// Trainable node ids in a fixed order matching `Weights::tensors_mut`.
    fn trainable_ids(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for &(wx, wh, b) in &self.layers {
            ids.extend([wx, wh, b]);
        }
        ids.extend([self.w_out, self.b_out]);
        ids
    }
}

impl Weights {
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for layer in &mut self.layers {
            out.push(&mut layer.w_x);
            out.push(&mut layer.w_h);
            out.push(&mut layer.bias);
        }
        out.push(&mut self.w_out);
        out.push(&mut self.b_out);
        out
    }

    fn sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend([layer.w_x.len(), layer.w_h.len(), layer.bias.len()]);
        }
        out.extend([self.w_out.len(), self.b_out.len()]);
        out
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

impl Model {
    /// Fresh, untrained model with seeded initialization.
    pub fn new(config: ModelConfig, feature_config: FeatureConfig) -> Result<Self, ModelError> {
        let featurizer = Featurizer::new(feature_config)?;
        let alphabet = Alphabet::default();
        let labels = alphabet.size();
        let h = config.hidden_size;
        let c = featurizer.config().n_coefficients;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let in_w = if l == 0 { c } else { h };
            let w_x = uniform_tensor(&mut rng, in_w, 4 * h, 1.0 / (in_w as f64).sqrt());
            let w_h = uniform_tensor(&mut rng, h, 4 * h, 1.0 / (h as f64).sqrt());
            let mut bias = Tensor::zeros(vec![1, 4 * h]);
            // Forget-gate bias starts at 1 so early training remembers.
            bias.data_mut()[h..2 * h].fill(1.0);
            layers.push(LstmLayer { w_x, w_h, bias });
        }
        let w_out = uniform_tensor(&mut rng, h, labels, 1.0 / (h as f64).sqrt());
        let b_out = Tensor::zeros(vec![1, labels]);
        Ok(Model {
            config,
            alphabet,
            featurizer,
            feat_mean: vec![0.0; c],
            feat_std: vec![1.0; c],
            weights: Weights {
                layers,
                w_out,
                b_out,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        self.featurizer.config()
    }

    pub fn frame_count(&self, x: &Waveform) -> usize {
        self.feature_config().frame_count(x.len())
    }

    fn set_feature_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) {
        self.feat_mean = mean;
        self.feat_std = std;
    }

    /// Insert featurizer constants and weight nodes into a graph.
    /// `trainable` makes the weights differentiable inputs.
    pub fn graph_ctx(&self, g: &mut Graph, trainable: bool) -> ModelGraphCtx {
        let feat = self.featurizer.constants(g);
        let mut push = |t: &Tensor| {
            if trainable {
                g.input(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let layers = self
            .weights
            .layers
            .iter()
            .map(|l| (push(&l.w_x), push(&l.w_h), push(&l.bias)))
            .collect();
        let w_out = push(&self.weights.w_out);
        let b_out = push(&self.weights.b_out);
        let c = self.feat_mean.len();
        let mean = g.constant(
            Tensor::matrix(1, c, self.feat_mean.clone()).expect("finite feature mean"),
        );
        let inv_std = g.constant(
            Tensor::matrix(1, c, self.feat_std.iter().map(|s| 1.0 / s).collect())
                .expect("finite feature std"),
        );
        ModelGraphCtx {
            feat,
            weights: WeightNodes {
                layers,
                w_out,
                b_out,
                mean,
                inv_std,
            },
        }
    }

    /// Per-frame logits from a feature node (N × n_coefficients).
    pub fn logits_from_features(
        &self,
        g: &mut Graph,
        ctx: &ModelGraphCtx,
        features: NodeId,
    ) -> Result<NodeId, ModelError> {
        let width = g.value(features).cols();
        let expected = self.feature_config().n_coefficients;
        if width != expected {
            return Err(ModelError::WidthMismatch {
                expected,
                features: width,
            });
        }
        let frames = g.value(features).rows();
        let h = self.config.hidden_size;
        let w = &ctx.weights;
        let zero_state = Tensor::zeros(vec![1, h]);
        let mut hs: Vec<NodeId> = (0..self.config.n_layers)
            .map(|_| g.constant(zero_state.clone()))
            .collect();
        let mut cs = hs.clone();
        let mut rows = Vec::with_capacity(frames);
        for t in 0..frames {
            let raw = g.row(features, t)?;
            let centered = g.sub(raw, w.mean)?;
            let mut x = g.mul(centered, w.inv_std)?;
            for (l, &(wx, wh, bias)) in w.layers.iter().enumerate() {
                let zx = g.matmul(x, wx)?;
                let zh = g.matmul(hs[l], wh)?;
                let zs = g.add(zx, zh)?;
                let z = g.add(zs, bias)?;
                let gi = g.slice_cols(z, 0, h)?;
                let gf = g.slice_cols(z, h, h)?;
                let gc = g.slice_cols(z, 2 * h, h)?;
                let go = g.slice_cols(z, 3 * h, h)?;
                let i_gate = g.sigmoid(gi);
                let f_gate = g.sigmoid(gf);
                let c_cand = g.tanh(gc);
                let o_gate = g.sigmoid(go);
                let keep = g.mul(f_gate, cs[l])?;
                let write = g.mul(i_gate, c_cand)?;
                cs[l] = g.add(keep, write)?;
                let c_act = g.tanh(cs[l]);
                hs[l] = g.mul(o_gate, c_act)?;
                x = hs[l];
            }
            let proj = g.matmul(x, w.w_out)?;
            rows.push(g.add(proj, w.b_out)?);
        }
        Ok(g.concat_rows(&rows)?)
    }

    /// Featurize a waveform node (1-D samples) and run the network.
    pub fn logits_from_waveform(
        &self,
        g: &mut Graph,
        ctx: &ModelGraphCtx,
        x: NodeId,
    ) -> Result<NodeId, ModelError> {
        let nodes = self.featurizer.apply(g, &ctx.feat, x)?;
        self.logits_from_features(g, ctx, nodes.features)
    }

    /// Plain forward pass: per-frame logits for a waveform.
    pub fn forward(&self, x: &Waveform) -> Result<Tensor, ModelError> {
        if x.sample_rate() != self.feature_config().sample_rate {
            return Err(ModelError::Feature(FeatureError::SampleRateMismatch {
                expected: self.feature_config().sample_rate,
                got: x.sample_rate(),
            }));
        }
        let mut g = Graph::new();
        let xt = g.constant(Tensor::vector(x.samples().to_vec())?);
        let ctx = self.graph_ctx(&mut g, false);
        let logits = self.logits_from_waveform(&mut g, &ctx, xt)?;
        Ok(g.value(logits).clone())
    }

    /// Forward pass from precomputed features.
    pub fn forward_features(&self, features: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let ctx = self.graph_ctx(&mut g, false);
        let logits = self.logits_from_features(&mut g, &ctx, f)?;
        Ok(g.value(logits).clone())
    }

    pub fn transcribe_greedy(&self, x: &Waveform) -> Result<Phrase, ModelError> {
        Ok(ctc::greedy_decode(&self.forward(x)?))
    }

    pub fn transcribe_beam(&self, x: &Waveform, width: usize) -> Result<Phrase, ModelError> {
        Ok(ctc::beam_decode(&self.forward(x)?, width)?)
    }

    // ---- persistence ----

    pub fn to_checkpoint(&self, meta: TrainMeta) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model_config: self.config.clone(),
            feature_config: self.feature_config().clone(),
            alphabet: self.alphabet.clone(),
            feat_mean: self.feat_mean.clone(),
            feat_std: self.feat_std.clone(),
            layers: self
                .weights
                .layers
                .iter()
                .map(|l| SavedLayer {
                    w_x: (&l.w_x).into(),
                    w_h: (&l.w_h).into(),
                    bias: (&l.bias).into(),
                })
                .collect(),
            w_out: (&self.weights.w_out).into(),
            b_out: (&self.weights.b_out).into(),
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, ModelError> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::IncompatibleCheckpoint {
                reason: format!(
                    "format version {} (this build reads {CHECKPOINT_VERSION})",
                    ckpt.format_version
                ),
            });
        }
        let featurizer = Featurizer::new(ckpt.feature_config)?;
        let labels = ckpt.alphabet.size();
        if labels != Alphabet::default().size() {
            return Err(ModelError::IncompatibleCheckpoint {
                reason: format!("alphabet has {labels} labels, expected 28"),
            });
        }
        let h = ckpt.model_config.hidden_size;
        let c = featurizer.config().n_coefficients;
        if ckpt.layers.len() != ckpt.model_config.n_layers {
            return Err(ModelError::IncompatibleCheckpoint {
                reason: format!(
                    "{} layer blocks for n_layers={}",
                    ckpt.layers.len(),
                    ckpt.model_config.n_layers
                ),
            });
        }
        if ckpt.feat_mean.len() != c || ckpt.feat_std.len() != c {
            return Err(ModelError::IncompatibleCheckpoint {
                reason: "feature normalization width mismatch".to_string(),
            });
        }
        if ckpt.feat_std.iter().any(|&s| !(s > 0.0)) {
            return Err(ModelError::IncompatibleCheckpoint {
                reason: "non-positive feature std".to_string(),
            });
        }
        let mut layers = Vec::with_capacity(ckpt.layers.len());
        for (l, saved) in ckpt.layers.into_iter().enumerate() {
            let in_w = if l == 0 { c } else { h };
            layers.push(LstmLayer {
                w_x: saved.w_x.restore("w_x", &[in_w, 4 * h])?,
                w_h: saved.w_h.restore("w_h", &[h, 4 * h])?,
                bias: saved.bias.restore("bias", &[1, 4 * h])?,
            });
        }
        Ok(Model {
            config: ckpt.model_config,
            alphabet: ckpt.alphabet,
            featurizer,
            feat_mean: ckpt.feat_mean,
            feat_std: ckpt.feat_std,
            weights: Weights {
                layers,
                w_out: ckpt.w_out.restore("w_out", &[h, labels])?,
                b_out: ckpt.b_out.restore("b_out", &[1, labels])?,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: TrainMeta) -> Result<(), ModelError> {
        let path = path.as_ref();
        let json = serde_json::to_string(&self.to_checkpoint(meta))?;
        fs::write(path, json).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, TrainMeta), ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        let meta = ckpt.meta.clone();
        Ok((Model::from_checkpoint(ckpt)?, meta))
    }
}

/// Reject (waveform, phrase) pairs whose phrase cannot align to the
/// available frame count, reporting the offending index.
pub fn validate_corpus(featurizer: &Featurizer, corpus: &[Sample]) -> Result<(), ModelError> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    for (index, sample) in corpus.iter().enumerate() {
        let frames = featurizer.config().frame_count(sample.waveform.len());
        let required = sample.phrase.min_alignment_len();
        if required > frames {
            return Err(ModelError::InfeasibleSample {
                index,
                required,
                frames,
            });
        }
    }
    Ok(())
}

/// Train a fresh model on a corpus. The corpus is split into train and
/// held-out parts by the training seed; per-coefficient feature statistics
/// are estimated on the train split and frozen into the model.
pub fn train(
    model_config: ModelConfig,
    feature_config: FeatureConfig,
    corpus: &[Sample],
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport), ModelError> {
    let mut model = Model::new(model_config, feature_config)?;
    validate_corpus(&model.featurizer, corpus)?;

    let feats: Vec<Tensor> = corpus
        .iter()
        .map(|s| model.featurizer.compute(&s.waveform))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);
    let holdout_n = ((corpus.len() as f64 * cfg.holdout_fraction).round() as usize)
        .min(corpus.len().saturating_sub(1));
    let (holdout_idx, train_idx) = order.split_at(holdout_n);
    let train_idx = train_idx.to_vec();
    let holdout_idx = holdout_idx.to_vec();

    // Feature standardization from the train split.
    let width = model.feature_config().n_coefficients;
    let mut mean = vec![0.0; width];
    let mut count = 0usize;
    for &i in &train_idx {
        for row in feats[i].data().chunks(width) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; width];
    for &i in &train_idx {
        for row in feats[i].data().chunks(width) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&s| (s / count as f64).sqrt().max(1e-3))
        .collect();
    model.set_feature_stats(mean, std);

    let sizes = model.weights.sizes();
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.learning_rate), &sizes);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs as usize);
    let mut shuffled = train_idx.clone();
    for _epoch in 0..cfg.epochs {
        shuffled.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &i in &shuffled {
            let mut g = Graph::new();
            let ctx = model.graph_ctx(&mut g, true);
            let f = g.constant(feats[i].clone());
            let logits = model.logits_from_features(&mut g, &ctx, f)?;
            let loss = ctc::ctc_loss(&mut g, logits, &corpus[i].phrase)?;
            epoch_loss += g.value(loss).item();
            g.backward(loss)?;

            let ids = ctx.weights.trainable_ids();
            let mut grads: Vec<Option<Tensor>> =
                ids.iter().map(|&id| g.grad(id).cloned()).collect();
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut grads, limit);
            }
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(|g| g.as_ref()).collect();
            let mut params = model.weights.tensors_mut();
            adam.step(&mut params, &grad_refs);
        }
        epoch_losses.push(epoch_loss / shuffled.len().max(1) as f64);
    }

    // Held-out exact-match accuracy under greedy decoding.
    let mut correct = 0usize;
    for &i in &holdout_idx {
        let logits = model.forward_features(&feats[i])?;
        if ctc::greedy_decode(&logits) == corpus[i].phrase {
            correct += 1;
        }
    }
    let holdout_accuracy = if holdout_idx.is_empty() {
        f64::NAN
    } else {
        correct as f64 / holdout_idx.len() as f64
    };
    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((
        model,
        TrainReport {
            epoch_losses,
            final_loss,
            holdout_accuracy,
            holdout_size: holdout_idx.len(),
            train_size: train_idx.len(),
        },
    ))
}

fn clip_global_norm(grads: &mut [Option<Tensor>], limit: f64) {
    let norm_sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|t| t.data())
        .map(|&v| v * v)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > limit {
        let scale = limit / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

// ---- synthetic corpus ----

/// Seconds of audio per rendered character.
pub const CHAR_UNIT_SECS: f64 = 0.1;
/// Peak amplitude of a rendered character (≈ 0.3 of full scale).
pub const CHAR_AMPLITUDE: f64 = 0.3 * 32_767.0;

/// The two-tone frequency pair assigned to each of the 26 letters,
/// deterministic in the seed. Pairs are unordered combinations of the
/// base frequencies: summing two sines commutes, so (f₁, f₂) and
/// (f₂, f₁) would be the same sound.
pub fn character_frequencies(seed: u64) -> Vec<(f64, f64)> {
    let base = [
        500.0, 740.0, 1_060.0, 1_440.0, 1_930.0, 2_580.0, 3_420.0, 4_660.0,
    ];
    let mut pairs = Vec::new();
    for (i, &a) in base.iter().enumerate() {
        for &b in base.iter().skip(i + 1) {
            pairs.push((a, b));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    pairs.truncate(26);
    pairs
}

/// Render phrases as audio: each letter becomes a 100 ms two-tone unit
/// (per-letter frequency pair from the seed) plus Gaussian noise 40 dB
/// below the tone amplitude; spaces become low-amplitude noise. Samples
/// are rounded to integers so in-memory audio matches its WAV bytes.
pub fn synth_corpus(phrases: &[Phrase], seed: u64) -> Result<Vec<Sample>, ModelError> {
    if phrases.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let sample_rate = 16_000u32;
    let unit = (CHAR_UNIT_SECS * sample_rate as f64) as usize;
    let freqs = character_frequencies(seed);
    let alphabet = Alphabet::default();
    let space = alphabet.space();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x736f_7474)); // noise stream
    let tone_noise = Normal::new(0.0, CHAR_AMPLITUDE * 10f64.powf(-40.0 / 20.0))
        .expect("positive std");
    let space_noise = Normal::new(0.0, CHAR_AMPLITUDE * 0.02).expect("positive std");

    let mut out = Vec::with_capacity(phrases.len());
    for phrase in phrases {
        let mut samples = Vec::with_capacity(phrase.len() * unit);
        for &tok in phrase.tokens() {
            if tok == space {
                for _ in 0..unit {
                    samples.push(space_noise.sample(&mut rng));
                }
            } else {
                let (f1, f2) = freqs[tok];
                // Raised-cosine onset/offset so repeated letters have an
                // audible boundary instead of one continuous tone.
                let ramp = (0.012 * sample_rate as f64) as usize;
                for i in 0..unit {
                    let t = i as f64 / sample_rate as f64;
                    let env = if i < ramp {
                        0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
                    } else if i + ramp >= unit {
                        0.5 - 0.5 * (PI * (unit - i) as f64 / ramp as f64).cos()
                    } else {
                        1.0
                    };
                    let tone = 0.5
                        * CHAR_AMPLITUDE
                        * env
                        * ((2.0 * PI * f1 * t).sin() + (2.0 * PI * f2 * t).sin());
                    samples.push(tone + tone_noise.sample(&mut rng));
                }
            }
        }
        let rounded: Vec<f64> = samples
            .iter()
            .map(|s| s.round().clamp(-32_768.0, 32_767.0))
            .collect();
        out.push(Sample {
            waveform: Waveform::new(rounded, sample_rate),
            phrase: phrase.clone(),
        });
    }
    Ok(out)
}

/// Random phrase of `min_chars..=max_chars` characters: letter words of
/// two to five characters separated by single spaces.
pub fn random_phrase(rng: &mut ChaCha8Rng, min_chars: usize, max_chars: usize) -> Phrase {
    assert!(min_chars >= 1 && max_chars >= min_chars);
    let target = rng.gen_range(min_chars..=max_chars);
    let mut tokens: Vec<usize> = Vec::with_capacity(target);
    while tokens.len() < target {
        if !tokens.is_empty() && tokens.len() + 3 <= target && rng.gen_bool(0.25) {
            tokens.push(26); // space
        }
        tokens.push(rng.gen_range(0..26));
    }
    tokens.truncate(target);
    while tokens.last() == Some(&26) {
        tokens.pop();
    }
    if tokens.is_empty() {
        tokens.push(rng.gen_range(0..26));
    }
    Phrase::new(tokens)
}

//! Optimization attacks against the transcriber: the CTC-loss attack with
//! peak-bound ratcheting, the alignment-fixing two-step attack with
//! per-frame constants, dense and silence targets, the single-step probe,
//! and noise/codec-robust variants.
//!
//! All attacks minimize `|δ|²₂ + penalty` with Adam over the raw sample
//! perturbation δ, clipping `x + δ` into the legal sample range after
//! every step. Whenever the current waveform decodes to the target (and
//! survives the mode's verification on the quantized signal), the
//! solution is recorded and the elementwise bound on |δ| is tightened to
//! `tau_shrink ×` the current peak, so later successes are strictly
//! quieter. The best success is returned.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alphabet::{Alignment, Alphabet, Phrase};
use crate::audio::{self, Waveform};
use crate::ctc::{self, CtcError};
use crate::features::FeatureError;
use crate::model::{Model, ModelError};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub use crate::tensor::SampleTransform;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("target is empty; use the silence attack to erase a transcription")]
    EmptyTarget,
    #[error("target needs {required} frames but the waveform has {frames}")]
    InfeasibleTarget { required: usize, frames: usize },
    #[error("dense target must have exactly one character per frame ({frames}), got {got}")]
    DenseLengthMismatch { frames: usize, got: usize },
    #[error("dense target contains adjacent duplicate characters; no full-length alignment exists")]
    DenseAdjacentDuplicates,
    #[error("waveform does not greedy-decode to the expected phrase (got {got:?})")]
    AlignmentPrecondition { got: String },
    #[error("invalid attack config: {reason}")]
    BadConfig { reason: String },
    #[error("waveform is empty")]
    EmptyWaveform,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
}

/// Which decoder defines success for phrase-targeted attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderChoice {
    Greedy,
    Beam { width: usize },
}

impl DecoderChoice {
    pub fn decode(&self, logits: &Tensor) -> Result<Phrase, CtcError> {
        match self {
            DecoderChoice::Greedy => Ok(ctc::greedy_decode(logits)),
            DecoderChoice::Beam { width } => ctc::beam_decode(logits, *width),
        }
    }
}

impl std::fmt::Display for DecoderChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecoderChoice::Greedy => write!(f, "greedy"),
            DecoderChoice::Beam { width } => write!(f, "beam:{width}"),
        }
    }
}

/// Noise-robustness (expectation over transforms) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRobustness {
    /// Noise peak level relative to the source, in dB.
    pub noise_db: f64,
    /// Fresh draws averaged per optimization step.
    pub draws: usize,
    /// Fresh draws used to verify a candidate.
    pub eval_draws: usize,
    /// Fraction of eval draws that must keep the target transcription.
    pub survive_fraction: f64,
}

impl Default for NoiseRobustness {
    fn default() -> Self {
        NoiseRobustness {
            noise_db: -30.0,
            draws: 16,
            eval_draws: 100,
            survive_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Weight of the loss term in `|δ|²₂ + c·loss` (and the starting value
    /// of every per-frame constant in alignment mode). Dimensionless: the
    /// effective weight is this times a per-instance unit calibrated from
    /// the loss gradient at the starting point, so "10" means the same
    /// strength regardless of how the model scales its sample gradients.
    pub initial_c: f64,
    /// Peak-bound shrink factor applied on every verified success.
    pub tau_shrink: f64,
    pub decoder: DecoderChoice,
    /// Margin added inside hinge losses (0 = plain hinge).
    pub kappa: f64,
    /// With no success after this fraction of the budget (repeatedly),
    /// multiply c by `c_escalation_factor`, up to `c_max`.
    pub c_escalation_fraction: f64,
    pub c_escalation_factor: f64,
    pub c_max: f64,
    /// Per-frame constants update cadence (alignment mode).
    pub frame_c_every: usize,
    pub frame_c_grow: f64,
    pub frame_c_decay: f64,
    pub log_every: usize,
    /// Stop after this many iterations without a strictly better success
    /// (only once at least one success exists). None runs the full budget.
    pub patience: Option<usize>,
    pub seed: u64,
    pub noise: NoiseRobustness,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            learning_rate: 10.0,
            max_iterations: 5_000,
            initial_c: 10.0,
            tau_shrink: 0.8,
            decoder: DecoderChoice::Greedy,
            kappa: 0.0,
            c_escalation_fraction: 0.4,
            c_escalation_factor: 10.0,
            c_max: 1e4,
            frame_c_every: 50,
            frame_c_grow: 1.5,
            frame_c_decay: 0.95,
            log_every: 100,
            patience: None,
            seed: 0,
            noise: NoiseRobustness::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |reason: String| Err(AttackError::BadConfig { reason });
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.tau_shrink > 0.0 && self.tau_shrink < 1.0) {
            return bad(format!("tau shrink {} must be in (0, 1)", self.tau_shrink));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".to_string());
        }
        if !(self.noise.survive_fraction > 0.0 && self.noise.survive_fraction <= 1.0) {
            return bad("noise survive fraction must be in (0, 1]".to_string());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    Periodic,
    Success,
    ConstantEscalated,
}

/// One logged optimization step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceEntry {
    /// 1 for single-phase attacks; 2 for the refinement phase.
    pub phase: u32,
    pub iteration: usize,
    pub total_loss: f64,
    /// The penalty term (total minus |δ|²₂).
    pub data_loss: f64,
    /// Current distortion level; None while δ is exactly zero.
    pub db: Option<f64>,
    pub decoded: String,
    pub event: TraceEvent,
}

/// Outcome of an attack. The adversarial waveform is quantized and
/// in-range; `success` has been re-verified on that quantized signal.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub adversarial: Waveform,
    pub delta: Waveform,
    pub success: bool,
    pub transcription: String,
    /// dB level of the (quantized) perturbation relative to the source;
    /// None means δ = 0, whose level is −∞.
    pub db_distortion: Option<f64>,
    pub iterations_run: usize,
    pub trace: Vec<TraceEntry>,
}

pub type ProgressFn = dyn Fn(&TraceEntry) + Sync;

enum Goal {
    /// CTC loss toward a phrase; success under the configured decoder.
    Phrase(Phrase),
    /// Fixed-alignment hinge; success when greedy decoding yields
    /// `expected` (this mode only targets greedy decoders).
    Align { pi: Alignment, expected: Phrase },
    /// Hinge pushing every frame to blank or space.
    Silence,
}

enum Robustness {
    Plain,
    Noise(NoiseRobustness),
    Codec(Arc<dyn SampleTransform>),
}

// ---- loss builders ----

/// Hinge on one logit row: zero iff the target token is the strict row
/// argmax (margin `kappa` widens the satisfied region requirement).
pub fn improved_frame_loss(
    g: &mut Graph,
    logits: NodeId,
    frame: usize,
    target_token: usize,
    kappa: f64,
) -> Result<NodeId, AttackError> {
    let labels = g.value(logits).cols();
    let row = g.row(logits, frame)?;
    let others: Vec<usize> = (0..labels).filter(|&j| j != target_token).collect();
    let rest = g.gather_cols(row, &others)?;
    let best_other = g.max(rest);
    let target = g.at(logits, frame, target_token)?;
    let diff = g.sub(best_other, target)?;
    let shifted = g.add_scalar(diff, kappa);
    Ok(g.relu(shifted))
}

/// Sum over frames of the silence hinge: zero iff every frame's argmax is
/// the blank or the space token.
pub fn silence_loss(
    g: &mut Graph,
    logits: NodeId,
    alphabet: &Alphabet,
    kappa: f64,
) -> Result<NodeId, AttackError> {
    let labels = g.value(logits).cols();
    let frames = g.value(logits).rows();
    let silent = [alphabet.space(), alphabet.blank()];
    let speech: Vec<usize> = (0..labels).filter(|j| !silent.contains(j)).collect();
    let mut per_frame = Vec::with_capacity(frames);
    for t in 0..frames {
        let row = g.row(logits, t)?;
        let sp = g.gather_cols(row, &speech)?;
        let si = g.gather_cols(row, &silent)?;
        let best_speech = g.max(sp);
        let best_silent = g.max(si);
        let diff = g.sub(best_speech, best_silent)?;
        let shifted = g.add_scalar(diff, kappa);
        per_frame.push(g.relu(shifted));
    }
    Ok(g.add_n(&per_frame)?)
}

/// Plain-value silence loss (no graph retained).
pub fn silence_loss_value(logits: &Tensor, alphabet: &Alphabet, kappa: f64) -> f64 {
    let mut g = Graph::new();
    let node = g.constant(logits.clone());
    let loss = silence_loss(&mut g, node, alphabet, kappa).expect("silence loss on constants");
    g.value(loss).item()
}

/// A phrase counts as silence when it contains nothing but spaces.
pub fn is_silence(p: &Phrase, alphabet: &Alphabet) -> bool {
    p.tokens().iter().all(|&t| t == alphabet.space())
}

/// Per-frame constant schedule: frames where the alignment token is not
/// the current argmax grow by `grow` (capped), satisfied frames decay by
/// `decay` (floored).
pub fn update_frame_constants(
    c: &[f64],
    logits: &Tensor,
    pi: &Alignment,
    grow: f64,
    decay: f64,
    floor: f64,
    cap: f64,
) -> Vec<f64> {
    let argmax = ctc::argmax_alignment(logits);
    c.iter()
        .zip(argmax.tokens().iter().zip(pi.tokens()))
        .map(|(&ci, (&got, &want))| {
            if got == want {
                (ci * decay).max(floor)
            } else {
                (ci * grow).min(cap)
            }
        })
        .collect()
}

// ---- public attacks ----

/// The baseline attack: minimize `|δ|²₂ + c·CTC-Loss(f(x+δ), t)`.
pub fn attack_ctc(
    model: &Model,
    x: &Waveform,
    target: &Phrase,
    cfg: &AttackConfig,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    check_phrase_target(model, x, target)?;
    run_attack(
        model,
        x,
        &Goal::Phrase(target.clone()),
        &Robustness::Plain,
        cfg,
        None,
        1,
        progress,
    )
}

/// Per-frame argmax alignment of a waveform that already greedy-decodes
/// to `expected`.
pub fn extract_alignment(
    model: &Model,
    x0: &Waveform,
    expected: &Phrase,
) -> Result<Alignment, AttackError> {
    let logits = model.forward(x0)?;
    let greedy = ctc::greedy_decode(&logits);
    if greedy != *expected {
        return Err(AttackError::AlignmentPrecondition {
            got: model.alphabet().phrase_to_string(&greedy),
        });
    }
    Ok(ctc::argmax_alignment(&logits))
}

/// Two-step attack: run the CTC attack, freeze the alignment it induces,
/// then refine with the per-frame hinge loss starting from the step-one
/// perturbation. Never returns a worse distortion than step one; success
/// of the refined result is defined against greedy decoding.
pub fn attack_two_step(
    model: &Model,
    x: &Waveform,
    target: &Phrase,
    cfg: &AttackConfig,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    let step1 = attack_ctc(model, x, target, cfg, progress)?;
    if !step1.success {
        return Ok(step1);
    }
    // The hinge refinement only speaks greedy; if step one satisfied a
    // beam decoder but not the greedy one, keep the step-one result.
    let pi = match extract_alignment(model, &step1.adversarial, target) {
        Ok(pi) => pi,
        Err(AttackError::AlignmentPrecondition { .. }) => return Ok(step1),
        Err(e) => return Err(e),
    };
    debug_assert_eq!(
        ctc::reduce(&pi, model.alphabet().blank()),
        *target,
        "extracted alignment must reduce to the target"
    );
    let init: Vec<f64> = step1
        .adversarial
        .samples()
        .iter()
        .zip(x.samples())
        .map(|(a, b)| a - b)
        .collect();
    let step2 = run_attack(
        model,
        x,
        &Goal::Align {
            pi,
            expected: target.clone(),
        },
        &Robustness::Plain,
        cfg,
        Some(init),
        2,
        progress,
    )?;
    if step2.success && db_not_worse(step2.db_distortion, step1.db_distortion) {
        let mut merged = step1.trace;
        let mut result = step2;
        merged.extend(result.trace);
        result.trace = merged;
        result.iterations_run += step1.iterations_run;
        Ok(result)
    } else {
        Ok(step1)
    }
}

/// Maximum-density attack: one character per frame. The target must be
/// exactly frame-count long with no adjacent duplicates, making the
/// identity assignment its only alignment; the hinge attack then runs on
/// that alignment directly with no alignment-finding step.
pub fn attack_dense(
    model: &Model,
    x: &Waveform,
    target: &Phrase,
    cfg: &AttackConfig,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    if x.is_empty() {
        return Err(AttackError::EmptyWaveform);
    }
    let frames = model.frame_count(x);
    if target.len() != frames {
        return Err(AttackError::DenseLengthMismatch {
            frames,
            got: target.len(),
        });
    }
    if target.has_adjacent_duplicates() {
        return Err(AttackError::DenseAdjacentDuplicates);
    }
    run_attack(
        model,
        x,
        &Goal::Align {
            pi: Alignment::new(target.tokens().to_vec()),
            expected: target.clone(),
        },
        &Robustness::Plain,
        cfg,
        None,
        1,
        progress,
    )
}

/// Push every frame to blank/space so the transcription vanishes.
pub fn attack_silence(
    model: &Model,
    x: &Waveform,
    cfg: &AttackConfig,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    if x.is_empty() {
        return Err(AttackError::EmptyWaveform);
    }
    run_attack(
        model,
        x,
        &Goal::Silence,
        &Robustness::Plain,
        cfg,
        None,
        1,
        progress,
    )
}

/// Expectation-over-transforms attack: each step averages the loss over
/// fresh pointwise noise draws at `cfg.noise.noise_db` relative to the
/// source; success requires the target to survive noisy decoding.
pub fn attack_robust_noise(
    model: &Model,
    x: &Waveform,
    target: &Phrase,
    cfg: &AttackConfig,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    check_phrase_target(model, x, target)?;
    run_attack(
        model,
        x,
        &Goal::Phrase(target.clone()),
        &Robustness::Noise(cfg.noise),
        cfg,
        None,
        1,
        progress,
    )
}

/// Straight-through attack through a lossy codec: the forward pass
/// transcodes `x+δ`, the backward pass treats the codec as identity.
/// Success means the *transcoded* adversarial waveform decodes to the
/// target.
pub fn attack_through_codec(
    model: &Model,
    x: &Waveform,
    target: &Phrase,
    codec: Arc<dyn SampleTransform>,
    cfg: &AttackConfig,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    check_phrase_target(model, x, target)?;
    run_attack(
        model,
        x,
        &Goal::Phrase(target.clone()),
        &Robustness::Codec(codec),
        cfg,
        None,
        1,
        progress,
    )
}

/// Single signed-gradient step of size `epsilon` on the CTC loss toward
/// `target`, clipped to the legal range.
pub fn fgsm(
    model: &Model,
    x: &Waveform,
    target: &Phrase,
    epsilon: f64,
) -> Result<Waveform, AttackError> {
    check_phrase_target(model, x, target)?;
    let grad = ctc_input_gradient(model, x, target)?;
    let samples: Vec<f64> = x
        .samples()
        .iter()
        .zip(&grad)
        .map(|(&s, &g)| s - epsilon * sign(g))
        .collect();
    Ok(audio::clip(&Waveform::new(samples, x.sample_rate())))
}

/// Loss curves along two rays from `x`: toward a known adversarial
/// example, and equally far along the (negated) signed-gradient
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeCurve {
    pub alphas: Vec<f64>,
    pub loss_adv: Vec<f64>,
    pub loss_fgsm: Vec<f64>,
}

pub fn interpolation_probe(
    model: &Model,
    x: &Waveform,
    x_adv: &Waveform,
    target: &Phrase,
    n_steps: usize,
) -> Result<ProbeCurve, AttackError> {
    check_phrase_target(model, x, target)?;
    if x_adv.len() != x.len() {
        return Err(AttackError::Audio(audio::AudioError::LengthMismatch {
            lhs: x_adv.len(),
            rhs: x.len(),
        }));
    }
    let delta: Vec<f64> = x_adv
        .samples()
        .iter()
        .zip(x.samples())
        .map(|(a, b)| a - b)
        .collect();
    let peak = delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let grad = ctc_input_gradient(model, x, target)?;
    let fgsm_dir: Vec<f64> = grad.iter().map(|&g| -peak * sign(g)).collect();

    let mut alphas = Vec::with_capacity(n_steps + 1);
    let mut loss_adv = Vec::with_capacity(n_steps + 1);
    let mut loss_fgsm = Vec::with_capacity(n_steps + 1);
    for i in 0..=n_steps {
        let alpha = i as f64 / n_steps.max(1) as f64;
        alphas.push(alpha);
        loss_adv.push(loss_at(model, x, &delta, alpha, target)?);
        loss_fgsm.push(loss_at(model, x, &fgsm_dir, alpha, target)?);
    }
    Ok(ProbeCurve {
        alphas,
        loss_adv,
        loss_fgsm,
    })
}

/// How many of `draws` noise draws (at `noise_db` relative to `source`)
/// leave the adversarial waveform decoding (greedy) to `target`.
pub fn noise_survival(
    model: &Model,
    source: &Waveform,
    adversarial: &Waveform,
    target: &Phrase,
    noise_db: f64,
    draws: usize,
    seed: u64,
) -> Result<usize, AttackError> {
    let amp = noise_amplitude(source, noise_db);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut survived = 0;
    for _ in 0..draws {
        let noise = gaussian_peak_noise(&mut rng, adversarial.len(), amp);
        let noisy = Waveform::new(
            adversarial
                .samples()
                .iter()
                .zip(&noise)
                .map(|(a, n)| a + n)
                .collect(),
            adversarial.sample_rate(),
        );
        if model.transcribe_greedy(&noisy)? == *target {
            survived += 1;
        }
    }
    Ok(survived)
}

// ---- codecs ----

/// Identity transform; the straight-through attack with it degenerates to
/// the plain attack.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl SampleTransform for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }
    fn apply(&self, samples: &[f64]) -> Vec<f64> {
        samples.to_vec()
    }
}

/// Stand-in lossy codec: decimate by `factor`, linearly resample back to
/// the original length, requantize to `quant_step`-sized levels (256 for
/// an 8-bit grid over the 16-bit range).
#[derive(Debug, Clone, Copy)]
pub struct StandInCodec {
    pub factor: usize,
    pub quant_step: f64,
}

impl Default for StandInCodec {
    fn default() -> Self {
        StandInCodec {
            factor: 4,
            quant_step: 256.0,
        }
    }
}

impl SampleTransform for StandInCodec {
    fn name(&self) -> &str {
        "standin-downsample-requantize"
    }

    fn apply(&self, samples: &[f64]) -> Vec<f64> {
        let f = self.factor.max(1);
        let kept: Vec<f64> = samples.iter().step_by(f).copied().collect();
        (0..samples.len())
            .map(|i| {
                let pos = i as f64 / f as f64;
                let k = pos.floor() as usize;
                let frac = pos - k as f64;
                let a = kept[k.min(kept.len() - 1)];
                let b = kept[(k + 1).min(kept.len() - 1)];
                let v = a * (1.0 - frac) + b * frac;
                ((v / self.quant_step).round() * self.quant_step)
                    .clamp(audio::SAMPLE_MIN, audio::SAMPLE_MAX)
            })
            .collect()
    }
}

// ---- internals ----

fn check_phrase_target(model: &Model, x: &Waveform, target: &Phrase) -> Result<(), AttackError> {
    if x.is_empty() {
        return Err(AttackError::EmptyWaveform);
    }
    if target.is_empty() {
        return Err(AttackError::EmptyTarget);
    }
    let frames = model.frame_count(x);
    let required = target.min_alignment_len();
    if required > frames {
        return Err(AttackError::InfeasibleTarget { required, frames });
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// dB comparison with None = −∞ (a zero perturbation beats everything).
fn db_not_worse(candidate: Option<f64>, reference: Option<f64>) -> bool {
    match (candidate, reference) {
        (None, _) => true,
        (Some(_), None) => false,
        (Some(c), Some(r)) => c <= r,
    }
}

fn db_strictly_better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (None, None) => false,
        (None, Some(_)) => true,
        (Some(_), None) => false,
        (Some(c), Some(b)) => c < b,
    }
}

/// Per-instance weight unit: peak(x) over the largest loss-gradient
/// component at the attack's starting point. Alignment goals calibrate on
/// the CTC loss toward the same phrase — their hinge starts satisfied in
/// the two-step attack, where its gradient is identically zero.
fn calibrate_c_unit(
    model: &Model,
    x: &Waveform,
    delta: &[f64],
    goal: &Goal,
) -> Result<f64, AttackError> {
    let start = Waveform::new(
        x.samples().iter().zip(delta).map(|(s, d)| s + d).collect(),
        x.sample_rate(),
    );
    let mut g = Graph::new();
    let ctx = model.graph_ctx(&mut g, false);
    let xn = g.input(Tensor::vector(start.samples().to_vec())?);
    let logits = model.logits_from_waveform(&mut g, &ctx, xn)?;
    let loss = match goal {
        Goal::Phrase(t) => ctc::ctc_loss(&mut g, logits, t)?,
        Goal::Align { expected, .. } => ctc::ctc_loss(&mut g, logits, expected)?,
        Goal::Silence => silence_loss(&mut g, logits, model.alphabet(), 0.0)?,
    };
    g.backward(loss)?;
    let max_grad = g
        .grad(xn)
        .map(|t| t.data().iter().fold(0.0f64, |m, &v| m.max(v.abs())))
        .unwrap_or(0.0);
    if max_grad > 1e-12 {
        Ok(x.peak() / max_grad)
    } else {
        Ok(1.0)
    }
}

/// Gradient of the plain CTC loss w.r.t. raw samples at `x`.
fn ctc_input_gradient(model: &Model, x: &Waveform, target: &Phrase) -> Result<Vec<f64>, AttackError> {
    let mut g = Graph::new();
    let ctx = model.graph_ctx(&mut g, false);
    let xn = g.input(Tensor::vector(x.samples().to_vec())?);
    let logits = model.logits_from_waveform(&mut g, &ctx, xn)?;
    let loss = ctc::ctc_loss(&mut g, logits, target)?;
    g.backward(loss)?;
    Ok(g.grad(xn).expect("input gradient").data().to_vec())
}

fn loss_at(
    model: &Model,
    x: &Waveform,
    direction: &[f64],
    alpha: f64,
    target: &Phrase,
) -> Result<f64, AttackError> {
    let moved = Waveform::new(
        x.samples()
            .iter()
            .zip(direction)
            .map(|(&s, &d)| (s + alpha * d).clamp(audio::SAMPLE_MIN, audio::SAMPLE_MAX))
            .collect(),
        x.sample_rate(),
    );
    let logits = model.forward(&moved)?;
    Ok(ctc::ctc_loss_value(&logits, target)?)
}

fn noise_amplitude(source: &Waveform, noise_db: f64) -> f64 {
    source.peak() * 10f64.powf(noise_db / 20.0)
}

/// Pointwise Gaussian noise with a hard peak: std amp/3, clamped to ±amp,
/// so its level relative to the source is the configured dB whenever any
/// draw hits the clamp.
fn gaussian_peak_noise(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<f64> {
    if amp <= 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, amp / 3.0).expect("positive std");
    (0..n)
        .map(|_| normal.sample(rng).clamp(-amp, amp))
        .collect()
}

struct BestSolution {
    adversarial: Waveform,
    delta_q: Vec<f64>,
    db: Option<f64>,
    transcription: Phrase,
}

fn goal_decoder(goal: &Goal, cfg: &AttackConfig) -> DecoderChoice {
    match goal {
        // Alignment attacks only promise greedy success.
        Goal::Align { .. } => DecoderChoice::Greedy,
        _ => cfg.decoder,
    }
}

fn goal_matches(goal: &Goal, decoded: &Phrase, alphabet: &Alphabet) -> bool {
    match goal {
        Goal::Phrase(t) => decoded == t,
        Goal::Align { expected, .. } => decoded == expected,
        Goal::Silence => is_silence(decoded, alphabet),
    }
}

/// Verify a candidate on the quantized waveform under the mode's success
/// definition. Returns the verified solution when it holds.
#[allow(clippy::too_many_arguments)]
fn verify_quantized(
    model: &Model,
    x: &Waveform,
    delta: &[f64],
    goal: &Goal,
    robust: &Robustness,
    cfg: &AttackConfig,
    eval_noise: &mut Option<Vec<Vec<f64>>>,
    noise_amp: f64,
) -> Result<Option<BestSolution>, AttackError> {
    let x_prime = Waveform::new(
        x.samples()
            .iter()
            .zip(delta)
            .map(|(&s, &d)| (s + d).clamp(audio::SAMPLE_MIN, audio::SAMPLE_MAX).round())
            .collect(),
        x.sample_rate(),
    );
    let decoder = goal_decoder(goal, cfg);
    let ok = match robust {
        Robustness::Plain => {
            let logits = model.forward(&x_prime)?;
            goal_matches(goal, &decoder.decode(&logits)?, model.alphabet())
        }
        Robustness::Codec(codec) => {
            let coded = Waveform::new(codec.apply(x_prime.samples()), x_prime.sample_rate());
            let logits = model.forward(&coded)?;
            goal_matches(goal, &decoder.decode(&logits)?, model.alphabet())
        }
        Robustness::Noise(noise) => {
            let draws = eval_noise.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e6f_6973_655f_6576);
                (0..noise.eval_draws)
                    .map(|_| gaussian_peak_noise(&mut rng, x.len(), noise_amp))
                    .collect()
            });
            let needed = (noise.survive_fraction * noise.eval_draws as f64).ceil() as usize;
            let mut survived = 0;
            let mut remaining = draws.len();
            for noise_vec in draws.iter() {
                let noisy = Waveform::new(
                    x_prime
                        .samples()
                        .iter()
                        .zip(noise_vec)
                        .map(|(a, n)| a + n)
                        .collect(),
                    x.sample_rate(),
                );
                let logits = model.forward(&noisy)?;
                if goal_matches(goal, &decoder.decode(&logits)?, model.alphabet()) {
                    survived += 1;
                }
                remaining -= 1;
                if survived >= needed || survived + remaining < needed {
                    break;
                }
            }
            survived >= needed
        }
    };
    if !ok {
        return Ok(None);
    }
    let delta_q: Vec<f64> = x_prime
        .samples()
        .iter()
        .zip(x.samples())
        .map(|(a, b)| a - b)
        .collect();
    let db = if delta_q.iter().all(|&d| d == 0.0) {
        None
    } else {
        Some(audio::db_distortion(
            &Waveform::new(delta_q.clone(), x.sample_rate()),
            x,
        )?)
    };
    let logits = model.forward(&x_prime)?;
    let transcription = decoder.decode(&logits)?;
    Ok(Some(BestSolution {
        adversarial: x_prime,
        delta_q,
        db,
        transcription,
    }))
}

#[allow(clippy::too_many_arguments)]
fn run_attack(
    model: &Model,
    x: &Waveform,
    goal: &Goal,
    robust: &Robustness,
    cfg: &AttackConfig,
    init_delta: Option<Vec<f64>>,
    phase: u32,
    progress: Option<&ProgressFn>,
) -> Result<AttackResult, AttackError> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(AttackError::EmptyWaveform);
    }
    let alphabet = model.alphabet().clone();
    let frames = model.frame_count(x);
    let n = x.len();
    let x_tensor = Tensor::vector(x.samples().to_vec())?;
    let noise_amp = match robust {
        Robustness::Noise(nr) => noise_amplitude(x, nr.noise_db),
        _ => 0.0,
    };
    let mut eval_noise: Option<Vec<Vec<f64>>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut delta: Vec<f64> = init_delta.unwrap_or_else(|| vec![0.0; n]);
    project(&mut delta, x.samples(), f64::INFINITY);

    // Zero perturbation may already satisfy the goal.
    if delta.iter().all(|&d| d == 0.0) {
        if let Some(best) =
            verify_quantized(model, x, &delta, goal, robust, cfg, &mut eval_noise, noise_amp)?
        {
            let entry = TraceEntry {
                phase,
                iteration: 0,
                total_loss: 0.0,
                data_loss: 0.0,
                db: best.db,
                decoded: alphabet.phrase_to_string(&best.transcription),
                event: TraceEvent::Success,
            };
            if let Some(p) = progress {
                p(&entry);
            }
            return Ok(AttackResult {
                delta: Waveform::new(best.delta_q.clone(), x.sample_rate()),
                success: true,
                transcription: alphabet.phrase_to_string(&best.transcription),
                db_distortion: best.db,
                iterations_run: 0,
                trace: vec![entry],
                adversarial: best.adversarial,
            });
        }
    }

    // The loss-term weights are dimensionless multiples of a per-instance
    // unit chosen so that "c = 1" puts the loss gradient on the same
    // footing as a full-scale perturbation. Raw sample-space gradients of
    // the loss vary by orders of magnitude across models and inputs; the
    // absolute weights the config names only make sense relative to this
    // unit.
    let c_unit = calibrate_c_unit(model, x, &delta, goal)?;
    let mut adam = Adam::new(cfg.adam(), &[n]);
    let mut delta_tensor = Tensor::vector(delta.clone())?;
    let mut tau_lin = f64::INFINITY;
    let mut c = cfg.initial_c * c_unit;
    let c_cap = cfg.c_max * c_unit;
    let frame_floor = cfg.initial_c * c_unit / 100.0;
    let mut frame_c = vec![cfg.initial_c * c_unit; frames];
    let escalate_every = ((cfg.max_iterations as f64 * cfg.c_escalation_fraction).ceil() as usize)
        .max(1);
    let mut best: Option<BestSolution> = None;
    let mut last_improvement = 0usize;
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut iterations_run = 0usize;

    for iter in 0..cfg.max_iterations {
        iterations_run = iter + 1;

        // Forward/backward on the current δ.
        let mut g = Graph::new();
        let ctx = model.graph_ctx(&mut g, false);
        let delta_node = g.input(delta_tensor.clone());
        let x_node = g.constant(x_tensor.clone());
        let x_prime = g.add(delta_node, x_node)?;
        let branches: Vec<NodeId> = match robust {
            Robustness::Plain => vec![x_prime],
            Robustness::Codec(codec) => vec![g.straight_through(x_prime, codec.clone())?],
            Robustness::Noise(nr) => (0..nr.draws.max(1))
                .map(|_| {
                    let noise = gaussian_peak_noise(&mut rng, n, noise_amp);
                    let noise_node = g.constant(
                        Tensor::vector(noise).expect("finite noise draw"),
                    );
                    g.add(x_prime, noise_node)
                })
                .collect::<Result<_, _>>()?,
        };

        let mut branch_logits = Vec::with_capacity(branches.len());
        let mut branch_losses = Vec::with_capacity(branches.len());
        for &b in &branches {
            let logits = model.logits_from_waveform(&mut g, &ctx, b)?;
            let data_loss = match goal {
                Goal::Phrase(t) => ctc::ctc_loss(&mut g, logits, t)?,
                Goal::Align { pi, .. } => {
                    let mut weighted = Vec::with_capacity(frames);
                    for (t, &tok) in pi.tokens().iter().enumerate() {
                        let hinge = improved_frame_loss(&mut g, logits, t, tok, cfg.kappa)?;
                        weighted.push(g.mul_scalar(hinge, frame_c[t]));
                    }
                    g.add_n(&weighted)?
                }
                Goal::Silence => silence_loss(&mut g, logits, &alphabet, cfg.kappa)?,
            };
            branch_logits.push(logits);
            branch_losses.push(data_loss);
        }
        let data_mean = if branch_losses.len() == 1 {
            branch_losses[0]
        } else {
            let total = g.add_n(&branch_losses)?;
            g.mul_scalar(total, 1.0 / branch_losses.len() as f64)
        };
        let scaled = match goal {
            Goal::Align { .. } => data_mean, // per-frame constants already applied
            _ => g.mul_scalar(data_mean, c),
        };
        let sq = g.square(delta_node);
        let l2 = g.sum(sq);
        let total = g.add(l2, scaled)?;
        let total_loss = g.value(total).item();
        // Logged in units the reader can follow: the raw (unweighted) loss.
        let data_loss_val = (total_loss - g.value(l2).item())
            / match goal {
                Goal::Align { .. } => c_unit,
                _ => c,
            };

        // Success check against the current (pre-step) δ: cheap real-valued
        // decode first, full quantized verification only when it matches.
        let decoder = goal_decoder(goal, cfg);
        let last_decoded = decoder.decode(g.value(branch_logits[0]))?;
        let mut proxy_ok = goal_matches(goal, &last_decoded, &alphabet);
        if proxy_ok {
            for &logits in branch_logits.iter().skip(1) {
                let decoded = decoder.decode(g.value(logits))?;
                if !goal_matches(goal, &decoded, &alphabet) {
                    proxy_ok = false;
                    break;
                }
            }
        }

        if proxy_ok {
            if let Some(candidate) = verify_quantized(
                model,
                x,
                &delta,
                goal,
                robust,
                cfg,
                &mut eval_noise,
                noise_amp,
            )? {
                let peak = delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                if best
                    .as_ref()
                    .map_or(true, |b| db_strictly_better(candidate.db, b.db))
                {
                    let entry = TraceEntry {
                        phase,
                        iteration: iter,
                        total_loss,
                        data_loss: data_loss_val,
                        db: candidate.db,
                        decoded: alphabet.phrase_to_string(&candidate.transcription),
                        event: TraceEvent::Success,
                    };
                    if let Some(p) = progress {
                        p(&entry);
                    }
                    trace.push(entry);
                    best = Some(candidate);
                    last_improvement = iter;
                }
                // Ratchet the peak bound on every verified success.
                tau_lin = cfg.tau_shrink * peak;
                if peak == 0.0 {
                    break; // a zero perturbation cannot be improved
                }
            }
        }

        if iter % cfg.log_every == 0 {
            let db = current_db(&delta, x);
            let entry = TraceEntry {
                phase,
                iteration: iter,
                total_loss,
                data_loss: data_loss_val,
                db,
                decoded: alphabet.phrase_to_string(&last_decoded),
                event: TraceEvent::Periodic,
            };
            if let Some(p) = progress {
                p(&entry);
            }
            trace.push(entry);
        }

        // Optimizer step and projection.
        g.backward(total)?;
        let grad = g.grad(delta_node).expect("delta gradient").clone();
        adam.step(&mut [&mut delta_tensor], &[Some(&grad)]);
        delta.copy_from_slice(delta_tensor.data());
        project(&mut delta, x.samples(), tau_lin);
        delta_tensor.data_mut().copy_from_slice(&delta);

        // Constant schedules.
        if best.is_none() && matches!(goal, Goal::Phrase(_) | Goal::Silence) {
            if (iter + 1) % escalate_every == 0 && c < c_cap {
                c = (c * cfg.c_escalation_factor).min(c_cap);
                // The loss gradient just grew by the escalation factor;
                // stale Adam moments would turn that into a shove. Restart
                // the optimizer at the new scale.
                adam = Adam::new(cfg.adam(), &[n]);
                let entry = TraceEntry {
                    phase,
                    iteration: iter,
                    total_loss,
                    data_loss: data_loss_val,
                    db: current_db(&delta, x),
                    decoded: alphabet.phrase_to_string(&last_decoded),
                    event: TraceEvent::ConstantEscalated,
                };
                if let Some(p) = progress {
                    p(&entry);
                }
                trace.push(entry);
            }
        }
        if let Goal::Align { pi, .. } = goal {
            if (iter + 1) % cfg.frame_c_every == 0 {
                frame_c = update_frame_constants(
                    &frame_c,
                    g.value(branch_logits[0]),
                    pi,
                    cfg.frame_c_grow,
                    cfg.frame_c_decay,
                    frame_floor,
                    c_cap,
                );
            }
        }

        if let Some(patience) = cfg.patience {
            if best.is_some() && iter - last_improvement >= patience {
                break;
            }
        }
    }

    Ok(match best {
        Some(b) => AttackResult {
            adversarial: b.adversarial,
            delta: Waveform::new(b.delta_q, x.sample_rate()),
            success: true,
            transcription: alphabet.phrase_to_string(&b.transcription),
            db_distortion: b.db,
            iterations_run,
            trace,
        },
        None => {
            // Report the final state honestly: quantized, re-decoded.
            let x_prime = Waveform::new(
                x.samples()
                    .iter()
                    .zip(&delta)
                    .map(|(&s, &d)| (s + d).clamp(audio::SAMPLE_MIN, audio::SAMPLE_MAX).round())
                    .collect(),
                x.sample_rate(),
            );
            let delta_q: Vec<f64> = x_prime
                .samples()
                .iter()
                .zip(x.samples())
                .map(|(a, b)| a - b)
                .collect();
            let db = if delta_q.iter().all(|&d| d == 0.0) {
                None
            } else {
                Some(audio::db_distortion(
                    &Waveform::new(delta_q.clone(), x.sample_rate()),
                    x,
                )?)
            };
            let logits = model.forward(&x_prime)?;
            let decoded = goal_decoder(goal, cfg).decode(&logits)?;
            AttackResult {
                adversarial: x_prime,
                delta: Waveform::new(delta_q, x.sample_rate()),
                success: false,
                transcription: alphabet.phrase_to_string(&decoded),
                db_distortion: db,
                iterations_run,
                trace,
            }
        }
    })
}

/// Clamp |δ| elementwise to the peak bound, then keep x+δ in legal range.
fn project(delta: &mut [f64], x: &[f64], tau_lin: f64) {
    for (d, &s) in delta.iter_mut().zip(x) {
        if tau_lin.is_finite() {
            *d = d.clamp(-tau_lin, tau_lin);
        }
        *d = (s + *d).clamp(audio::SAMPLE_MIN, audio::SAMPLE_MAX) - s;
    }
}

fn current_db(delta: &[f64], x: &Waveform) -> Option<f64> {
    let peak = delta.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak == 0.0 {
        None
    } else {
        Some(20.0 * peak.log10() - audio::db(x).expect("attack sources are non-silent"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use crate::model::ModelConfig;
    use rand::Rng;

    fn tiny_model() -> Model {
        Model::new(
            ModelConfig {
                hidden_size: 8,
                n_layers: 1,
                seed: 7,
            },
            FeatureConfig::default(),
        )
        .unwrap()
    }

    fn noise_wave(n: usize, seed: u64, amp: f64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::from_samples(
            (0..n)
                .map(|_| rng.gen_range(-amp..amp).round())
                .collect(),
        )
    }

    #[test]
    fn improved_frame_loss_is_zero_iff_target_wins() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::matrix(1, 4, vec![0.5, 2.0, -1.0, 0.0]).unwrap());
        // Target is the argmax by margin 1.5: loss 0.
        let win = improved_frame_loss(&mut g, logits, 0, 1, 0.0).unwrap();
        assert_eq!(g.value(win).item(), 0.0);
        // Target trails the best other by 1.5: loss = margin.
        let lose = improved_frame_loss(&mut g, logits, 0, 0, 0.0).unwrap();
        assert!((g.value(lose).item() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn improved_frame_loss_gradient_vanishes_once_satisfied() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::matrix(1, 4, vec![0.5, 2.0, -1.0, 0.0]).unwrap());
        let loss = improved_frame_loss(&mut g, logits, 0, 1, 0.0).unwrap();
        g.backward(loss).unwrap();
        assert!(g
            .grad(logits)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn improved_frame_loss_is_nonnegative_and_kappa_shifts_it() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::matrix(1, 3, vec![1.0, 0.0, -2.0]).unwrap());
        let plain = improved_frame_loss(&mut g, logits, 0, 0, 0.0).unwrap();
        assert_eq!(g.value(plain).item(), 0.0);
        // With margin 2.0 the 1.0 lead is no longer enough: loss = 1.0.
        let margined = improved_frame_loss(&mut g, logits, 0, 0, 2.0).unwrap();
        assert!((g.value(margined).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn silence_loss_zero_iff_frames_are_blank_or_space() {
        let alphabet = Alphabet::default();
        let mut quiet = vec![0.0; 2 * 28];
        quiet[27] = 5.0; // frame 0: blank wins
        quiet[28 + 26] = 5.0; // frame 1: space wins
        let t = Tensor::matrix(2, 28, quiet).unwrap();
        assert_eq!(silence_loss_value(&t, &alphabet, 0.0), 0.0);
        assert_eq!(
            ctc::greedy_decode(&t).tokens(),
            &[26],
            "space-only decode counts as silence"
        );

        let mut speech = vec![0.0; 28];
        speech[0] = 3.0; // 'a' wins by 3
        speech[27] = 0.0;
        let t = Tensor::matrix(1, 28, speech).unwrap();
        assert!((silence_loss_value(&t, &alphabet, 0.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn silence_loss_zero_implies_silent_greedy_decode() {
        let alphabet = Alphabet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let data: Vec<f64> = (0..3 * 28).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t = Tensor::matrix(3, 28, data).unwrap();
            if silence_loss_value(&t, &alphabet, 0.0) == 0.0 {
                assert!(is_silence(&ctc::greedy_decode(&t), &alphabet));
            }
        }
    }

    #[test]
    fn frame_constants_decay_when_satisfied_and_grow_when_not() {
        // Row argmax: token 1. Alignment wants token 1 (satisfied) then 0.
        let logits = Tensor::matrix(2, 3, vec![0.0, 2.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let pi = Alignment::new(vec![1, 0]);
        let c = update_frame_constants(&[10.0, 10.0], &logits, &pi, 1.5, 0.95, 0.1, 1e4);
        assert!((c[0] - 9.5).abs() < 1e-12);
        assert!((c[1] - 15.0).abs() < 1e-12);
        // Satisfied frame at the floor and unsatisfied frame at the cap
        // both stay put.
        let c = update_frame_constants(&[0.1, 1e4], &logits, &pi, 1.5, 0.95, 0.1, 1e4);
        assert_eq!(c[0], 0.1, "floor");
        assert_eq!(c[1], 1e4, "cap");
    }

    #[test]
    fn frame_constants_are_deterministic() {
        let logits = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let pi = Alignment::new(vec![0, 0]);
        let a = update_frame_constants(&[1.0, 2.0], &logits, &pi, 1.5, 0.95, 0.1, 1e4);
        let b = update_frame_constants(&[1.0, 2.0], &logits, &pi, 1.5, 0.95, 0.1, 1e4);
        assert_eq!(a, b);
    }

    #[test]
    fn trivial_target_returns_zero_delta_immediately() {
        let model = tiny_model();
        let x = noise_wave(960, 5, 800.0);
        let current = model.transcribe_greedy(&x).unwrap();
        // Only meaningful when the untrained model says *something*.
        if current.is_empty() {
            return;
        }
        let res = attack_ctc(&model, &x, &current, &AttackConfig::default(), None).unwrap();
        assert!(res.success);
        assert_eq!(res.iterations_run, 0);
        assert!(res.delta.samples().iter().all(|&d| d == 0.0));
        assert_eq!(res.db_distortion, None, "zero delta reports -inf as None");
        assert_eq!(res.adversarial.samples(), x.samples());
    }

    #[test]
    fn silence_attack_on_already_silent_input_is_trivial() {
        // Bias the output projection hard toward blank so every input
        // already decodes to silence.
        let mut json =
            serde_json::to_value(tiny_model().to_checkpoint(Default::default())).unwrap();
        json["b_out"]["data"][27] = serde_json::json!(25.0);
        let model =
            Model::from_checkpoint(serde_json::from_value(json).unwrap()).unwrap();
        let x = noise_wave(640, 4, 500.0);
        let p = model.transcribe_greedy(&x).unwrap();
        assert!(is_silence(&p, model.alphabet()));
        let res = attack_silence(&model, &x, &AttackConfig::default(), None).unwrap();
        assert!(res.success);
        assert_eq!(res.iterations_run, 0);
        assert!(res.delta.samples().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn fgsm_step_size_is_exact() {
        let model = tiny_model();
        let x = noise_wave(960, 8, 700.0);
        let target = model.alphabet().phrase("ab").unwrap();
        let eps = 16.0;
        let adv = fgsm(&model, &x, &target, eps).unwrap();
        let diffs: Vec<f64> = adv
            .samples()
            .iter()
            .zip(x.samples())
            .map(|(a, b)| (a - b).abs())
            .collect();
        let max = diffs.iter().cloned().fold(0.0, f64::max);
        assert!((max - eps).abs() < 1e-12);
        assert!(diffs.iter().all(|&d| d <= eps + 1e-12));
    }

    #[test]
    fn fgsm_with_zero_epsilon_is_identity() {
        let model = tiny_model();
        let x = noise_wave(640, 9, 500.0);
        let target = model.alphabet().phrase("a").unwrap();
        let adv = fgsm(&model, &x, &target, 0.0).unwrap();
        assert_eq!(adv.samples(), x.samples());
    }

    #[test]
    fn infeasible_target_is_rejected_before_optimization() {
        let model = tiny_model();
        let x = noise_wave(320, 10, 500.0); // one frame
        let target = model.alphabet().phrase("abc").unwrap();
        match attack_ctc(&model, &x, &target, &AttackConfig::default(), None) {
            Err(AttackError::InfeasibleTarget { required, frames }) => {
                assert_eq!((required, frames), (3, 1));
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn empty_target_is_rejected() {
        let model = tiny_model();
        let x = noise_wave(640, 11, 500.0);
        assert!(matches!(
            attack_ctc(&model, &x, &Phrase::empty(), &AttackConfig::default(), None),
            Err(AttackError::EmptyTarget)
        ));
    }

    #[test]
    fn dense_preconditions_are_enforced() {
        let model = tiny_model();
        let x = noise_wave(960, 12, 500.0); // 3 frames
        let alphabet = model.alphabet().clone();
        let cfg = AttackConfig::default();
        match attack_dense(&model, &x, &alphabet.phrase("ab").unwrap(), &cfg, None) {
            Err(AttackError::DenseLengthMismatch { frames, got }) => {
                assert_eq!((frames, got), (3, 2));
            }
            other => panic!("expected length mismatch, got {other:?}"),
        }
        assert!(matches!(
            attack_dense(&model, &x, &alphabet.phrase("aab").unwrap(), &cfg, None),
            Err(AttackError::DenseAdjacentDuplicates)
        ));
    }

    #[test]
    fn extract_alignment_requires_matching_decode() {
        let model = tiny_model();
        let x = noise_wave(960, 13, 500.0);
        let decoded = model.transcribe_greedy(&x).unwrap();
        let mut other_tokens = decoded.tokens().to_vec();
        other_tokens.push(0);
        let other = Phrase::new(other_tokens);
        assert!(matches!(
            extract_alignment(&model, &x, &other),
            Err(AttackError::AlignmentPrecondition { .. })
        ));
        let pi = extract_alignment(&model, &x, &decoded).unwrap();
        assert_eq!(ctc::reduce(&pi, model.alphabet().blank()), decoded);
        assert_eq!(pi.len(), model.frame_count(&x));
    }

    #[test]
    fn stand_in_codec_flattens_fine_structure() {
        let codec = StandInCodec::default();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 1.3).sin() * 5_000.0).collect();
        let out = codec.apply(&x);
        assert_eq!(out.len(), x.len());
        for &v in &out {
            assert_eq!(v, (v / 256.0).round() * 256.0, "8-bit grid");
        }
        // Decimated positions survive up to requantization.
        for k in (0..64).step_by(4) {
            assert!((out[k] - x[k]).abs() <= 128.0 + 1e-9);
        }
    }

    #[test]
    fn identity_codec_is_identity() {
        let x: Vec<f64> = vec![1.5, -3.25, 0.0];
        assert_eq!(IdentityCodec.apply(&x), x);
    }

    #[test]
    fn probe_shares_its_origin_point() {
        let model = tiny_model();
        let x = noise_wave(640, 14, 600.0);
        let target = model.alphabet().phrase("a").unwrap();
        // Any x_adv works for the origin check; use a small offset of x.
        let x_adv = Waveform::from_samples(
            x.samples().iter().map(|s| (s + 3.0).round()).collect(),
        );
        let probe = interpolation_probe(&model, &x, &x_adv, &target, 5).unwrap();
        assert_eq!(probe.alphas.len(), 6);
        assert_eq!(probe.loss_adv[0], probe.loss_fgsm[0]);
        let end_gap = (probe.loss_adv[5] - {
            let logits = model.forward(&x_adv).unwrap();
            ctc::ctc_loss_value(&logits, &target).unwrap()
        })
        .abs();
        assert!(end_gap < 1e-9, "adv endpoint equals loss at x_adv");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = AttackConfig::default();
        cfg.tau_shrink = 1.0;
        assert!(matches!(
            cfg.validate(),
            Err(AttackError::BadConfig { .. })
        ));
        let mut cfg = AttackConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }
}

//! Differentiable audio front end: framing, windowing, and a mel-cepstrum
//! transform producing 50 feature frames per second.
//!
//! The whole path is built from graph ops so gradients reach raw samples.
//! The DFT is realized as multiplication by fixed cosine/sine matrices —
//! O(window² ) per frame, but trivially differentiable and fast enough at
//! the signal lengths this toolkit works with.

use std::f64::consts::PI;
use std::sync::Arc;

use thiserror::Error;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::tensor::{Graph, NodeId, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature config: {reason}")]
    BadConfig { reason: String },
    #[error("cannot featurize an empty waveform")]
    EmptyWaveform,
    #[error("waveform sample rate {got} does not match config rate {expected}")]
    SampleRateMismatch { expected: u32, got: u32 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Front-end geometry. The hop is tied to the sample rate so the frame
/// rate is exactly 50 frames per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub n_mel_filters: usize,
    pub n_coefficients: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16_000,
            window_len: 512,
            hop: 320,
            n_mel_filters: 26,
            n_coefficients: 13,
            log_floor: 1e-8,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |reason: String| Err(FeatureError::BadConfig { reason });
        if self.hop == 0 || self.hop as u64 * 50 != self.sample_rate as u64 {
            return bad(format!(
                "hop {} × 50 must equal the sample rate {} (50 frames/sec)",
                self.hop, self.sample_rate
            ));
        }
        if self.window_len < self.hop {
            return bad(format!(
                "window_len {} shorter than hop {}",
                self.window_len, self.hop
            ));
        }
        if self.window_len % 2 != 0 {
            return bad(format!("window_len {} must be even", self.window_len));
        }
        if self.n_coefficients == 0 || self.n_coefficients > self.n_mel_filters {
            return bad(format!(
                "n_coefficients {} must be in 1..={}",
                self.n_coefficients, self.n_mel_filters
            ));
        }
        if self.log_floor <= 0.0 {
            return bad(format!("log_floor {} must be positive", self.log_floor));
        }
        Ok(())
    }

    /// Frames produced for a signal of `n` samples: ceil(n / hop).
    pub fn frame_count(&self, n: usize) -> usize {
        n.div_ceil(self.hop)
    }

    /// DFT bins kept from a real window: window_len/2 + 1.
    pub fn n_bins(&self) -> usize {
        self.window_len / 2 + 1
    }
}

/// Node ids of the featurizer's constant matrices within one graph.
#[derive(Debug, Clone, Copy)]
pub struct FeatConstants {
    cos: NodeId,
    sin: NodeId,
    mel: NodeId,
    dct: NodeId,
}

/// Intermediate stages of the feature pipeline for one input.
#[derive(Debug, Clone, Copy)]
pub struct FeatureNodes {
    /// N × window_len Hann-windowed frames.
    pub windows: NodeId,
    /// N × bins power spectrum.
    pub power: NodeId,
    /// N × n_mel_filters filterbank energies.
    pub mel: NodeId,
    /// N × n_mel_filters log energies (floored).
    pub log_mel: NodeId,
    /// N × n_coefficients cepstral coefficients.
    pub features: NodeId,
}

/// Precomputed windowing and transform matrices for one config.
#[derive(Debug, Clone)]
pub struct Featurizer {
    cfg: FeatureConfig,
    hann: Vec<f64>,
    cos_mat: Tensor,
    sin_mat: Tensor,
    mel_mat: Tensor,
    dct_mat: Tensor,
}

impl Featurizer {
    pub fn new(cfg: FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let w = cfg.window_len;
        let bins = cfg.n_bins();
        let hann: Vec<f64> = (0..w)
            .map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / w as f64).cos())
            .collect();
        // cos/sin matrices are window_len × bins so frames multiply on the left.
        let mut cos_data = vec![0.0; w * bins];
        let mut sin_data = vec![0.0; w * bins];
        for k in 0..w {
            for b in 0..bins {
                let angle = 2.0 * PI * (k * b) as f64 / w as f64;
                cos_data[k * bins + b] = angle.cos();
                sin_data[k * bins + b] = angle.sin();
            }
        }
        let mel_weights = mel_filterbank(&cfg);
        let mut mel_data = vec![0.0; bins * cfg.n_mel_filters];
        for m in 0..cfg.n_mel_filters {
            for b in 0..bins {
                mel_data[b * cfg.n_mel_filters + m] = mel_weights[m][b];
            }
        }
        // Orthonormal DCT-II, filters × coefficients.
        let n = cfg.n_mel_filters as f64;
        let mut dct_data = vec![0.0; cfg.n_mel_filters * cfg.n_coefficients];
        for m in 0..cfg.n_mel_filters {
            for c in 0..cfg.n_coefficients {
                let scale = if c == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
                dct_data[m * cfg.n_coefficients + c] =
                    scale * (PI * (m as f64 + 0.5) * c as f64 / n).cos();
            }
        }
        Ok(Featurizer {
            hann,
            cos_mat: Tensor::matrix(w, bins, cos_data).expect("finite cos matrix"),
            sin_mat: Tensor::matrix(w, bins, sin_data).expect("finite sin matrix"),
            mel_mat: Tensor::matrix(bins, cfg.n_mel_filters, mel_data).expect("finite mel matrix"),
            dct_mat: Tensor::matrix(cfg.n_mel_filters, cfg.n_coefficients, dct_data)
                .expect("finite dct matrix"),
            cfg,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Triangular filterbank weights, one row per filter (for tests).
    pub fn mel_matrix(&self) -> &Tensor {
        &self.mel_mat
    }

    /// Insert the constant transform matrices into a graph. Call once per
    /// graph and reuse for every branch built in it.
    pub fn constants(&self, g: &mut Graph) -> FeatConstants {
        FeatConstants {
            cos: g.constant(self.cos_mat.clone()),
            sin: g.constant(self.sin_mat.clone()),
            mel: g.constant(self.mel_mat.clone()),
            dct: g.constant(self.dct_mat.clone()),
        }
    }

    /// Split a 1-D signal node into overlapping reflect-padded frames with
    /// the Hann window applied: an N × window_len node.
    pub fn frame_node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, FeatureError> {
        let n = g.value(x).len();
        if n == 0 {
            return Err(FeatureError::EmptyWaveform);
        }
        let frames = self.cfg.frame_count(n);
        let w = self.cfg.window_len;
        let pad = (w / 2) as i64;
        let mut indices = Vec::with_capacity(frames * w);
        let mut scale = Vec::with_capacity(frames * w);
        for f in 0..frames {
            let start = f as i64 * self.cfg.hop as i64 - pad;
            for k in 0..w {
                indices.push(reflect_index(start + k as i64, n));
                scale.push(self.hann[k]);
            }
        }
        Ok(g.gather_scale(x, Arc::new(indices), Arc::new(scale), vec![frames, w])?)
    }

    /// Full pipeline from a 1-D signal node to cepstral features.
    pub fn apply(
        &self,
        g: &mut Graph,
        consts: &FeatConstants,
        x: NodeId,
    ) -> Result<FeatureNodes, FeatureError> {
        let windows = self.frame_node(g, x)?;
        let re = g.matmul(windows, consts.cos)?;
        let im = g.matmul(windows, consts.sin)?;
        let re2 = g.square(re);
        let im2 = g.square(im);
        let power = g.add(re2, im2)?;
        let mel = g.matmul(power, consts.mel)?;
        let shifted = g.add_scalar(mel, self.cfg.log_floor);
        let log_mel = g.log(shifted)?;
        let features = g.matmul(log_mel, consts.dct)?;
        Ok(FeatureNodes {
            windows,
            power,
            mel,
            log_mel,
            features,
        })
    }

    /// Plain (non-graph-owning) feature computation for a waveform.
    pub fn compute(&self, x: &Waveform) -> Result<Tensor, FeatureError> {
        if x.sample_rate() != self.cfg.sample_rate {
            return Err(FeatureError::SampleRateMismatch {
                expected: self.cfg.sample_rate,
                got: x.sample_rate(),
            });
        }
        let mut g = Graph::new();
        let xt = Tensor::vector(x.samples().to_vec())?;
        let xn = g.constant(xt);
        let consts = self.constants(&mut g);
        let nodes = self.apply(&mut g, &consts, xn)?;
        Ok(g.value(nodes.features).clone())
    }

    /// Plain windowed frames for a waveform (test and inspection helper).
    pub fn compute_windows(&self, x: &Waveform) -> Result<Tensor, FeatureError> {
        let mut g = Graph::new();
        let xt = Tensor::vector(x.samples().to_vec())?;
        let xn = g.constant(xt);
        let node = self.frame_node(&mut g, xn)?;
        Ok(g.value(node).clone())
    }
}

/// Reflect an out-of-range index back into [0, n) without repeating the
/// edge sample (…x2 x1 | x0 x1 x2… style padding).
fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Standard mel scale: 2595·log10(1 + f/700).
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with mel-spaced centers spanning 0 to Nyquist,
/// evaluated at each DFT bin's center frequency. Returned as one weight
/// row per filter.
fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let bins = cfg.n_bins();
    let nyquist = cfg.sample_rate as f64 / 2.0;
    let m_max = hz_to_mel(nyquist);
    let n_filters = cfg.n_mel_filters;
    let points: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(m_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.window_len as f64;
    (0..n_filters)
        .map(|m| {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect()
        })
        .collect()
}

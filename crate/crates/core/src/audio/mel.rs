use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Waveform, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};

pub const N_MELS: usize = 128;
/// 25 ms at 16 kHz.
pub const WINDOW_LENGTH: usize = 400;
/// 10 ms at 16 kHz.
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;

/// Log mel energies, stored mel-major: `values[bin * frames + frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    bins: usize,
    frames: usize,
    values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(bins: usize, frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(Error::Shape(format!(
                "{} values for a {bins} x {frames} spectrogram",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("spectrogram holds non-finite values".into()));
        }
        Ok(Self {
            bins,
            frames,
            values,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    /// Row of one mel channel over time.
    pub fn channel(&self, bin: usize) -> &[f32] {
        &self.values[bin * self.frames..(bin + 1) * self.frames]
    }
}

/// Frame count for `n` samples with no padding.
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW_LENGTH {
        0
    } else {
        1 + (n - WINDOW_LENGTH) / HOP_LENGTH
    }
}

/// Reusable 128-channel log-mel extractor: Hamming window of 400 samples,
/// hop 160, 512-point FFT, Slaney-scale triangular filters up to 8 kHz.
pub struct MelFrontend {
    window: Vec<f64>,
    filters: Vec<Vec<(usize, f64)>>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("filters", &self.filters.len()).finish()
    }
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontend {
    pub fn new() -> Self {
        let window = (0..WINDOW_LENGTH)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (WINDOW_LENGTH - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(N_FFT);
        Self {
            window,
            filters: mel_filterbank(TARGET_SAMPLE_RATE as f64, N_FFT, N_MELS),
            fft,
        }
    }

    pub fn compute(&self, wav: &Waveform) -> Result<MelSpectrogram> {
        if wav.sample_rate() != TARGET_SAMPLE_RATE {
            return Err(Error::Parameter(format!(
                "log-mel expects {TARGET_SAMPLE_RATE} Hz input, got {}",
                wav.sample_rate()
            )));
        }
        let frames = frame_count(wav.len());
        if frames == 0 {
            return Err(Error::Degenerate(format!(
                "{} samples is shorter than one {WINDOW_LENGTH}-sample window",
                wav.len()
            )));
        }
        let x = wav.samples();
        let mut values = vec![0.0f32; N_MELS * frames];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0f64; N_FFT / 2 + 1];
        for t in 0..frames {
            let start = t * HOP_LENGTH;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WINDOW_LENGTH {
                    Complex::new(x[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, filt) in self.filters.iter().enumerate() {
                let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
                values[m * frames + t] = e.max(LOG_FLOOR).ln() as f32;
            }
        }
        MelSpectrogram::new(N_MELS, frames, values)
    }
}

/// Computes 128 log-mel channels for 16 kHz audio.
pub fn log_mel(wav: &Waveform) -> Result<MelSpectrogram> {
    static FRONTEND: OnceLock<MelFrontend> = OnceLock::new();
    FRONTEND.get_or_init(MelFrontend::new).compute(wav)
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn hz_to_mel(f: f64) -> f64 {
    let logstep = 6.4f64.ln() / 27.0;
    if f < MIN_LOG_HZ {
        f / F_SP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / logstep
    }
}

fn mel_to_hz(m: f64) -> f64 {
    let logstep = 6.4f64.ln() / 27.0;
    if m < MIN_LOG_MEL {
        m * F_SP
    } else {
        MIN_LOG_HZ * (logstep * (m - MIN_LOG_MEL)).exp()
    }
}

/// Sparse triangular filters, one `(fft_bin, weight)` list per mel channel.
fn mel_filterbank(sample_rate: f64, n_fft: usize, n_mels: usize) -> Vec<Vec<(usize, f64)>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=n_fft / 2)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

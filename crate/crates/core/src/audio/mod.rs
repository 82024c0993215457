//! Audio input: waveform container, WAV I/O, resampling, augmentation and
//! log-mel features.

pub mod augment;
pub mod mel;

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

pub use augment::{apply_policy, Augmentation, AugmentationPolicy, FrequencyBand};
pub use mel::{log_mel, MelFrontend, MelSpectrogram};

/// Sample rate every pipeline stage after loading works at.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Mono audio samples with their sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("sample {i} is not finite")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub(crate) fn with_samples(&self, samples: Vec<f32>) -> Self {
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_power(xs: &[f32]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / xs.len() as f64
}

/// Reads a WAV file, averages channels down to mono and resamples to
/// `target_rate`.
pub fn load_and_resample(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let wav = load_wav(path)?;
    resample(&wav, target_rate)
}

/// Reads a WAV file and down-mixes it, keeping the native rate.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        }
    };
    let mono = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    Waveform::new(mono, spec.sample_rate)
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, wav: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    for &s in &wav.samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
        writer.write_sample(v).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)
}

/// Half-width of the interpolation kernel, in zero crossings.
const SINC_ZERO_CROSSINGS: usize = 16;

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// The output holds `round(len * target / source)` samples. When downsampling
/// the kernel cutoff drops to the new Nyquist frequency.
pub fn resample(wav: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Parameter("target sample rate must be positive".into()));
    }
    if target_rate == wav.sample_rate {
        return Ok(wav.clone());
    }
    let ratio = target_rate as f64 / wav.sample_rate as f64;
    let out_len = (wav.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let half_width = (SINC_ZERO_CROSSINGS as f64 / cutoff).ceil() as isize;
    let x = &wav.samples;
    let n = x.len() as isize;

    let out = (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let centre = t.floor() as isize;
            let mut acc = 0.0f64;
            for k in (centre - half_width + 1)..=(centre + half_width) {
                if k < 0 || k >= n {
                    continue;
                }
                let d = t - k as f64;
                let w = 0.5 * (1.0 + (PI * d / half_width as f64).cos());
                acc += x[k as usize] as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc as f32
        })
        .collect();
    Waveform::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

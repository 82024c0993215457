//! Stochastic waveform augmentations: additive white noise, synthetic
//! reverberation, band dropping and random time cuts.
//!
//! Every function is a pure function of its inputs and the generator state,
//! so a fixed seed reproduces the output bit for bit.

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{mean_power, Waveform};
use crate::error::{Error, Result};

/// Ranges and switches for the augmentation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub snr_db_range: [f64; 2],
    /// RT60 of the synthetic impulse response, seconds.
    pub reverb_decay_range: [f64; 2],
    /// The dropped band always lies inside this range, Hz.
    pub drop_band_range: [f64; 2],
    /// Width of the dropped band, Hz.
    pub drop_width_range: [f64; 2],
    pub cut_range_ms: [f64; 2],
    pub enable_reverb: bool,
    pub enable_noise: bool,
    pub enable_drop_frequency: bool,
    pub enable_time_cut: bool,
    /// Chance that each enabled augmentation fires for a given example.
    pub apply_probability: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            snr_db_range: [10.0, 20.0],
            reverb_decay_range: [0.5, 2.0],
            drop_band_range: [500.0, 2000.0],
            drop_width_range: [200.0, 500.0],
            cut_range_ms: [100.0, 500.0],
            enable_reverb: true,
            enable_noise: true,
            enable_drop_frequency: true,
            enable_time_cut: true,
            apply_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("snr_db_range", self.snr_db_range),
            ("reverb_decay_range", self.reverb_decay_range),
            ("drop_band_range", self.drop_band_range),
            ("drop_width_range", self.drop_width_range),
            ("cut_range_ms", self.cut_range_ms),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name}: need low <= high, got [{lo}, {hi}]")));
            }
        }
        if self.reverb_decay_range[0] <= 0.0 {
            return Err(Error::Config("reverb_decay_range must be positive".into()));
        }
        if self.drop_band_range[0] < 0.0 || self.drop_width_range[0] <= 0.0 {
            return Err(Error::Config("drop band and width must be positive".into()));
        }
        if self.drop_width_range[1] > self.drop_band_range[1] - self.drop_band_range[0] {
            return Err(Error::Config("drop_width_range exceeds drop_band_range".into()));
        }
        if self.cut_range_ms[0] <= 0.0 {
            return Err(Error::Config("cut_range_ms must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config("apply_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let policy: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        policy.validate()?;
        Ok(policy)
    }

    /// All four augmentations switched off.
    pub fn disabled() -> Self {
        Self {
            enable_reverb: false,
            enable_noise: false,
            enable_drop_frequency: false,
            enable_time_cut: false,
            ..Self::default()
        }
    }
}

/// Which augmentations fired in [`apply_policy`], in application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Reverb,
    Noise,
    DropFrequency,
    TimeCut,
}

/// Applies each enabled augmentation independently with the policy's
/// probability, in the fixed order reverb, noise, frequency drop, time cut.
pub fn apply_policy<R: Rng + ?Sized>(
    wav: &Waveform,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Waveform, Vec<Augmentation>)> {
    let mut out = wav.clone();
    let mut applied = Vec::new();
    let p = policy.apply_probability;

    if policy.enable_reverb && rng.random_bool(p) {
        let decay = uniform(rng, policy.reverb_decay_range);
        out = add_reverb(&out, decay, rng)?;
        applied.push(Augmentation::Reverb);
    }
    if policy.enable_noise && rng.random_bool(p) {
        let snr = uniform(rng, policy.snr_db_range);
        // Silence has no defined SNR; leave it untouched.
        if out.power() > 0.0 {
            out = add_noise(&out, snr, rng)?;
            applied.push(Augmentation::Noise);
        }
    }
    if policy.enable_drop_frequency && rng.random_bool(p) {
        out = drop_frequency(&out, policy, rng)?;
        applied.push(Augmentation::DropFrequency);
    }
    if policy.enable_time_cut && rng.random_bool(p) {
        match random_time_cut(&out, policy, rng) {
            Ok(cut) => {
                out = cut;
                applied.push(Augmentation::TimeCut);
            }
            Err(Error::Degenerate(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((out, applied))
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Adds white Gaussian noise scaled so the realised noise power sits exactly
/// `snr_db` below the signal power.
pub fn add_noise<R: Rng + ?Sized>(wav: &Waveform, snr_db: f64, rng: &mut R) -> Result<Waveform> {
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("snr_db must be finite, got {snr_db}")));
    }
    let signal_power = wav.power();
    if signal_power <= 0.0 {
        return Err(Error::Degenerate("SNR is undefined for a silent waveform".into()));
    }
    let noise: Vec<f64> = (0..wav.len()).map(|_| rng.sample(StandardNormal)).collect();
    let raw_power = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
    let target_power = signal_power / 10f64.powf(snr_db / 10.0);
    let gain = (target_power / raw_power).sqrt();
    let samples = wav
        .samples()
        .iter()
        .zip(&noise)
        .map(|(&s, &n)| (s as f64 + gain * n) as f32)
        .collect();
    Ok(wav.with_samples(samples))
}

/// Exponentially decaying white-noise impulse response whose amplitude falls
/// by 60 dB over `decay_s`. The direct path and the diffuse tail carry equal
/// energy and the whole response has unit energy.
pub fn synthetic_impulse_response<R: Rng + ?Sized>(
    decay_s: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if !(decay_s.is_finite() && decay_s > 0.0) {
        return Err(Error::Parameter(format!("reverb decay must be positive, got {decay_s}")));
    }
    let len = ((decay_s * sample_rate as f64).ceil() as usize).max(2);
    // ln(1000): amplitude ratio of 60 dB
    let rate = 1000f64.ln() / (decay_s * sample_rate as f64);
    let mut ir = vec![0.0f64; len];
    ir[0] = 1.0;
    for (n, v) in ir.iter_mut().enumerate().skip(1) {
        let g: f64 = rng.sample(StandardNormal);
        *v = g * (-rate * n as f64).exp();
    }
    let tail_energy: f64 = ir[1..].iter().map(|v| v * v).sum();
    if tail_energy > 0.0 {
        let s = tail_energy.sqrt().recip();
        ir[1..].iter_mut().for_each(|v| *v *= s);
    }
    let norm = ir.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(ir.into_iter().map(|v| (v / norm) as f32).collect())
}

/// Convolves with a synthetic room response of the given RT60 and truncates
/// to the input length.
pub fn add_reverb<R: Rng + ?Sized>(wav: &Waveform, decay_s: f64, rng: &mut R) -> Result<Waveform> {
    let ir = synthetic_impulse_response(decay_s, wav.sample_rate(), rng)?;
    Ok(wav.with_samples(convolve_truncated(wav.samples(), &ir)))
}

/// Linear convolution `x * h`, keeping the first `x.len()` outputs.
pub fn convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    let n = x.len();
    if n == 0 || h.is_empty() {
        return vec![0.0; n];
    }
    let taps = h.len().min(n);
    if n.min(taps) <= 64 {
        return (0..n)
            .map(|i| {
                let kmax = i.min(taps - 1);
                (0..=kmax)
                    .map(|k| x[i - k] as f64 * h[k] as f64)
                    .sum::<f64>() as f32
            })
            .collect();
    }
    let size = (n + taps - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h[..taps].iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    a[..n].iter().map(|c| (c.re * scale) as f32).collect()
}

/// A closed frequency interval in Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyBand {
    pub low_hz: f64,
    pub high_hz: f64,
}

impl FrequencyBand {
    pub fn centre_hz(&self) -> f64 {
        0.5 * (self.low_hz + self.high_hz)
    }

    pub fn contains(&self, f: f64) -> bool {
        f >= self.low_hz && f <= self.high_hz
    }
}

/// Draws the band that [`drop_frequency`] removes. Edges land on whole Hz.
pub fn pick_drop_band<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> FrequencyBand {
    let [lo, hi] = policy.drop_band_range;
    let width = uniform(rng, policy.drop_width_range).min(hi - lo).round();
    let low = uniform(rng, [lo, hi - width]).round();
    FrequencyBand {
        low_hz: low,
        high_hz: (low + width).min(hi),
    }
}

/// Removes a random band inside the policy's drop range.
pub fn drop_frequency<R: Rng + ?Sized>(
    wav: &Waveform,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Waveform> {
    Ok(drop_frequency_band(wav, policy, rng)?.0)
}

/// Like [`drop_frequency`] but also reports the band that was removed.
pub fn drop_frequency_band<R: Rng + ?Sized>(
    wav: &Waveform,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<(Waveform, FrequencyBand)> {
    let band = pick_drop_band(policy, rng);
    Ok((band_stop(wav, band), band))
}

/// Zero-phase band-stop: every DFT bin whose frequency lies inside `band` is
/// zeroed, together with its mirror image.
pub fn band_stop(wav: &Waveform, band: FrequencyBand) -> Waveform {
    let n = wav.len();
    if n == 0 {
        return wav.clone();
    }
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spec: Vec<Complex<f64>> = wav
        .samples()
        .iter()
        .map(|&v| Complex::new(v as f64, 0.0))
        .collect();
    fwd.process(&mut spec);
    let bin_hz = wav.sample_rate() as f64 / n as f64;
    for k in 0..=n / 2 {
        if band.contains(k as f64 * bin_hz) {
            spec[k] = Complex::new(0.0, 0.0);
            if k != 0 {
                spec[n - k] = Complex::new(0.0, 0.0);
            }
        }
    }
    inv.process(&mut spec);
    let scale = 1.0 / n as f64;
    wav.with_samples(spec.iter().map(|c| (c.re * scale) as f32).collect())
}

/// Excises one contiguous segment whose length is drawn from the policy's
/// cut range.
///
/// The input must be longer than the largest possible cut plus one 25 ms
/// analysis frame, so the result still yields at least one feature frame.
pub fn random_time_cut<R: Rng + ?Sized>(
    wav: &Waveform,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<Waveform> {
    let sr = wav.sample_rate() as f64;
    let max_cut = (policy.cut_range_ms[1] * sr / 1000.0).round() as usize;
    let frame = (0.025 * sr).round() as usize;
    if wav.len() <= max_cut + frame {
        return Err(Error::Degenerate(format!(
            "{:.3} s is too short for a cut of up to {} ms",
            wav.duration_s(),
            policy.cut_range_ms[1]
        )));
    }
    let cut_ms = uniform(rng, policy.cut_range_ms);
    let cut = ((cut_ms * sr / 1000.0).round() as usize).max(1);
    let start = rng.random_range(0..=wav.len() - cut);
    time_cut_at(wav, start, cut)
}

/// Removes `samples[start..start + len]`.
pub fn time_cut_at(wav: &Waveform, start: usize, len: usize) -> Result<Waveform> {
    let end = start
        .checked_add(len)
        .filter(|&e| e <= wav.len())
        .ok_or_else(|| Error::Parameter(format!("cut [{start}, {start}+{len}) out of range")))?;
    let mut out = Vec::with_capacity(wav.len() - len);
    out.extend_from_slice(&wav.samples()[..start]);
    out.extend_from_slice(&wav.samples()[end..]);
    Ok(wav.with_samples(out))
}

/// `10 log10(P_signal / P_noise)` where the noise is `noisy - clean`.
pub fn measured_snr_db(clean: &[f32], noisy: &[f32]) -> f64 {
    let diff: Vec<f32> = noisy.iter().zip(clean).map(|(a, b)| a - b).collect();
    10.0 * (mean_power(clean) / mean_power(&diff)).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn tone(freq: f64, rate: u32, secs: f64) -> Waveform {
        let n = (rate as f64 * secs).round() as usize;
        let s = (0..n)
            .map(|i| (0.5 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        Waveform::new(s, rate).unwrap()
    }

    fn db(a: f64, b: f64) -> f64 {
        10.0 * (a / b).log10()
    }

    #[test]
    fn noise_hits_requested_snr() {
        let w = tone(440.0, 16_000, 1.0);
        for snr in [10.0, 20.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let out = add_noise(&w, snr, &mut rng).unwrap();
            assert_eq!(out.len(), w.len());
            let measured = measured_snr_db(w.samples(), out.samples());
            assert!((measured - snr).abs() <= 0.5, "{measured} vs {snr}");
        }
    }

    #[test]
    fn noise_on_silence_is_degenerate() {
        let w = Waveform::new(vec![0.0; 1000], 16_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(add_noise(&w, 10.0, &mut rng), Err(Error::Degenerate(_))));
    }

    #[test]
    fn unit_impulse_response_is_identity() {
        let w = tone(300.0, 16_000, 0.1);
        let out = convolve_truncated(w.samples(), &[1.0]);
        assert_eq!(out, w.samples());
    }

    #[test]
    fn two_tap_convolution_by_hand() {
        let mut x = vec![0.0f32; 8];
        x[0] = 1.0;
        let out = convolve_truncated(&x, &[1.0, 0.5]);
        assert_eq!(out, vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fft_and_direct_convolution_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f32> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f32> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = convolve_truncated(&x, &h);
        let slow: Vec<f32> = (0..x.len())
            .map(|i| (0..=i.min(h.len() - 1)).map(|k| x[i - k] as f64 * h[k] as f64).sum::<f64>() as f32)
            .collect();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn reverb_rejects_non_positive_decay() {
        let w = tone(300.0, 16_000, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(add_reverb(&w, 0.0, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(add_reverb(&w, -1.0, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn impulse_response_has_unit_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ir = synthetic_impulse_response(0.5, 16_000, &mut rng).unwrap();
        assert_eq!(ir.len(), 8000);
        let e: f64 = ir.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((e - 1.0).abs() < 1e-5);
    }

    #[test]
    fn drop_attenuates_band_centre_and_spares_far_tones() {
        let policy = AugmentationPolicy::default();
        let band = pick_drop_band(&policy, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(band.low_hz >= 500.0 && band.high_hz <= 2000.0);

        let inside = tone(band.centre_hz(), 16_000, 1.0);
        let (out, used) = drop_frequency_band(&inside, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(used, band);
        assert!(db(out.power().max(1e-30), inside.power()) <= -20.0);

        let outside = tone(4000.0, 16_000, 1.0);
        let out = drop_frequency(&outside, &policy, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!(db(out.power(), outside.power()).abs() < 1.0);
    }

    #[test]
    fn drop_is_deterministic() {
        let policy = AugmentationPolicy::default();
        let w = tone(900.0, 16_000, 0.5);
        let a = drop_frequency(&w, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = drop_frequency(&w, &policy, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn time_cut_lengths() {
        let policy = AugmentationPolicy::default();
        let w = Waveform::new(vec![0.1; 8 * 16_000], 16_000).unwrap();
        for seed in 0..20 {
            let out = random_time_cut(&w, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let d = out.duration_s();
            assert!((7.5..=7.9).contains(&d), "{d}");
        }
        let short = Waveform::new(vec![0.1; 3200], 16_000).unwrap();
        assert!(matches!(
            random_time_cut(&short, &policy, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn time_cut_at_matches_index_oracle() {
        let ramp: Vec<f32> = (0..100).map(|i| i as f32).collect();
        let w = Waveform::new(ramp.clone(), 16_000).unwrap();
        let out = time_cut_at(&w, 10, 25).unwrap();
        let expected: Vec<f32> = ramp[..10].iter().chain(&ramp[35..]).copied().collect();
        assert_eq!(out.samples(), &expected[..]);
        assert!(time_cut_at(&w, 90, 20).is_err());
    }

    #[test]
    fn policy_validation() {
        assert!(AugmentationPolicy::default().validate().is_ok());
        let bad = AugmentationPolicy {
            snr_db_range: [20.0, 10.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let parsed = AugmentationPolicy::from_toml("seed = 7\nsnr_db_range = [12.0, 15.0]\n").unwrap();
        assert_eq!(parsed.seed, 7);
        assert_eq!(parsed.snr_db_range, [12.0, 15.0]);
        assert!(AugmentationPolicy::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn apply_policy_is_deterministic() {
        let policy = AugmentationPolicy {
            apply_probability: 1.0,
            ..Default::default()
        };
        let w = tone(250.0, 16_000, 1.0);
        let (a, applied) = apply_policy(&w, &policy, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (b, _) = apply_policy(&w, &policy, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            applied,
            vec![
                Augmentation::Reverb,
                Augmentation::Noise,
                Augmentation::DropFrequency,
                Augmentation::TimeCut
            ]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn snr_property(seed in 0u64..10_000, snr in 10.0f64..=20.0, freq in 100.0f64..4000.0, amp in 0.05f64..0.9) {
            let n = 4000;
            let s: Vec<f32> = (0..n).map(|i| (amp * (2.0 * PI * freq * i as f64 / 16_000.0).sin()) as f32).collect();
            let w = Waveform::new(s, 16_000).unwrap();
            let out = add_noise(&w, snr, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let measured = measured_snr_db(w.samples(), out.samples());
            prop_assert!((measured - snr).abs() <= 0.5);
        }

        #[test]
        fn cut_is_contiguous_excision(seed in 0u64..10_000, extra in 0usize..16_000) {
            let n = 8_401 + extra;
            let ramp: Vec<f32> = (0..n).map(|i| i as f32).collect();
            let w = Waveform::new(ramp, 16_000).unwrap();
            let policy = AugmentationPolicy::default();
            let out = random_time_cut(&w, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cut = n - out.len();
            prop_assert!((1600..=8000).contains(&cut));
            // exactly one jump, of size cut + 1
            let jumps: Vec<usize> = out.samples().windows(2).enumerate()
                .filter(|(_, p)| p[1] - p[0] != 1.0).map(|(i, _)| i).collect();
            prop_assert!(jumps.len() <= 1);
            if let Some(&j) = jumps.first() {
                prop_assert_eq!((out.samples()[j + 1] - out.samples()[j]) as usize, cut + 1);
            }
        }
    }
}

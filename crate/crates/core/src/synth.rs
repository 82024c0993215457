//! A small synthetic speaker corpus: eight speakers with distinct
//! gender/age/dialect combinations, harmonic "voices" and deterministic
//! metadata. Used for end-to-end checks that need no external data.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, Waveform, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::tears::{build_manifest, AttributeTemplates, BuildOptions, TemplateSet, Triplet, UtteranceMeta};

pub const SPEAKERS: usize = 8;
pub const UTTERANCES_PER_SPEAKER: usize = 4;
pub const DURATION_S: f64 = 1.0;

const AGES: [&str; 4] = ["18-25", "26-35", "36-45", "46-55"];
const DIALECTS: [&str; 4] = ["northern", "southern", "western", "new england"];

pub fn speaker_id(i: usize) -> String {
    format!("spk{i}")
}

pub fn speaker_attributes(i: usize) -> BTreeMap<String, String> {
    let mut a = BTreeMap::new();
    a.insert("gender".into(), if i % 2 == 0 { "female" } else { "male" }.to_string());
    a.insert("age".into(), AGES[(i / 2) % AGES.len()].to_string());
    a.insert("dialect".into(), DIALECTS[(i * 3) % DIALECTS.len()].to_string());
    a
}

/// One second of a harmonic voice. Pitch follows gender and age, spectral
/// tilt follows dialect, and each utterance adds pitch jitter, random
/// harmonic phases, a syllable-rate envelope and a little noise.
pub fn synthesize(speaker: usize, utterance: usize, seed: u64) -> Waveform {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((speaker * 1000 + utterance) as u64);
    let sr = TARGET_SAMPLE_RATE as f64;
    let n = (DURATION_S * sr) as usize;
    let female = speaker % 2 == 0;
    let age = (speaker / 2) % AGES.len();
    let f0 = if female { 190.0 + 18.0 * age as f64 } else { 100.0 + 14.0 * age as f64 } * (1.0 + rng.random_range(-0.02..0.02));
    let tilt = 0.55 + 0.1 * ((speaker * 3) % DIALECTS.len()) as f64;
    let formant = 700.0 + 220.0 * speaker as f64;
    let syllable_hz = rng.random_range(3.0..5.0);
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|h| h as f64 * f0)
        .take_while(|f| *f < 7000.0)
        .enumerate()
        .map(|(k, f)| {
            let resonance = 1.0 + 2.0 * (-((f - formant) / 300.0).powi(2)).exp();
            (f, tilt.powi(k as i32) * resonance, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let mut samples: Vec<f32> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.6 + 0.4 * (2.0 * PI * syllable_hz * t).sin().abs();
            let v: f64 = harmonics.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
            (env * v + 0.01 * rng.random_range(-1.0..1.0)) as f32
        })
        .collect();
    let peak = samples.iter().fold(0f32, |m, v| m.max(v.abs()));
    samples.iter_mut().for_each(|v| *v *= 0.8 / peak);
    Waveform::new(samples, TARGET_SAMPLE_RATE).expect("finite synthetic samples")
}

pub fn utterance_id(speaker: usize, utterance: usize) -> String {
    format!("{}_utt{utterance}", speaker_id(speaker))
}

/// Metadata for every synthetic utterance; audio paths are `<id>.wav`.
pub fn metadata() -> Vec<UtteranceMeta> {
    (0..SPEAKERS)
        .flat_map(|s| {
            (0..UTTERANCES_PER_SPEAKER).map(move |u| UtteranceMeta {
                utterance_id: utterance_id(s, u),
                audio_path: format!("{}.wav", utterance_id(s, u)),
                speaker_id: speaker_id(s),
                duration_s: DURATION_S,
                attributes: speaker_attributes(s),
            })
        })
        .collect()
}

/// In-memory audio keyed by utterance id.
pub fn audio(seed: u64) -> BTreeMap<String, Waveform> {
    (0..SPEAKERS)
        .flat_map(|s| (0..UTTERANCES_PER_SPEAKER).map(move |u| (utterance_id(s, u), synthesize(s, u, seed))))
        .collect()
}

/// Writes `<id>.wav` files and `metadata.jsonl` into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, seed: u64) -> Result<Vec<UtteranceMeta>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = metadata();
    let wavs = audio(seed);
    for m in &meta {
        write_wav(dir.join(&m.audio_path), &wavs[&m.utterance_id])?;
    }
    crate::tears::write_metadata(dir.join("metadata.jsonl"), &meta)?;
    Ok(meta)
}

/// Build options for the synthetic corpus: one fixed description per
/// speaker and prompt type.
pub fn build_options() -> BuildOptions {
    BuildOptions {
        deterministic_descriptions: true,
        full_description: true,
    }
}

/// Prompts that never occur in training, built only from words the
/// training prompts use, paired with the training answer wording.
pub fn held_out_templates() -> TemplateSet {
    let base = TemplateSet::builtin();
    let prompts = [
        ("gender", "What gender is the speaker?"),
        ("age", "What age is the speaker?"),
        ("dialect", "What accent does the speaker have?"),
    ];
    let attributes = prompts
        .iter()
        .map(|(name, p)| {
            let t = &base.attributes[*name];
            (
                name.to_string(),
                AttributeTemplates {
                    prompts: vec![p.to_string()],
                    answers: t.answers.clone(),
                },
            )
        })
        .collect();
    TemplateSet {
        attributes,
        full_prompts: vec!["Describe this speaker.".into()],
        openers: base.openers,
    }
}

/// Training triplets: every utterance is asked each built-in prompt form
/// once, per attribute and for the full description.
pub fn training_manifest(seed: u64) -> Result<Vec<Triplet>> {
    let base = TemplateSet::builtin();
    let forms = base.full_prompts.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..forms {
        let attributes = base
            .attributes
            .iter()
            .map(|(name, t)| {
                let templates = AttributeTemplates {
                    prompts: vec![t.prompts[i % t.prompts.len()].clone()],
                    answers: t.answers.clone(),
                };
                (name.clone(), templates)
            })
            .collect();
        let set = TemplateSet {
            attributes,
            full_prompts: vec![base.full_prompts[i].clone()],
            openers: base.openers.clone(),
        };
        out.extend(build_manifest(&metadata(), &set, build_options(), &mut rng)?);
    }
    Ok(out)
}

/// The same utterances and answers as [`training_manifest`], asked with
/// the held-out prompts.
pub fn held_out_manifest(seed: u64) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build_manifest(&metadata(), &held_out_templates(), build_options(), &mut rng)
}

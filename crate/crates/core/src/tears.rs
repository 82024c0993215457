//! (audio, prompt) -> description triplets built from speaker metadata,
//! speaker-disjoint splits and caption statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// One utterance's metadata as read from a metadata file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub audio_path: String,
    pub speaker_id: String,
    pub duration_s: f64,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub utterance_id: String,
    pub audio_path: String,
    pub speaker_id: String,
    pub prompt: String,
    pub description: String,
    pub attributes: BTreeMap<String, String>,
    pub duration_s: f64,
}

/// Prompt and answer wording for one attribute. Answers contain `{value}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeTemplates {
    pub prompts: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    pub attributes: BTreeMap<String, AttributeTemplates>,
    pub full_prompts: Vec<String>,
    /// First sentence of a full description.
    pub openers: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let mut attributes = BTreeMap::new();
        attributes.insert(
            "gender".to_string(),
            AttributeTemplates {
                prompts: strings(&[
                    "What is the speaker's gender?",
                    "Is the speaker male or female?",
                    "Tell me the gender of the speaker.",
                    "Which gender is this voice?",
                    "Identify the speaker's gender.",
                ]),
                answers: strings(&[
                    "The speaker is {value}.",
                    "This voice belongs to a {value} speaker.",
                    "It sounds like a {value} speaker.",
                    "The gender of the speaker is {value}.",
                    "I hear a {value} voice.",
                ]),
            },
        );
        attributes.insert(
            "age".to_string(),
            AttributeTemplates {
                prompts: strings(&[
                    "How old is the speaker?",
                    "What is the speaker's age?",
                    "Which age group is the speaker in?",
                    "Estimate the age of the speaker.",
                    "What age range fits this voice?",
                ]),
                answers: strings(&[
                    "The speaker is in the {value} age group.",
                    "The speaker seems to be {value} years old.",
                    "This voice fits the {value} age range.",
                    "I would place the speaker at {value} years.",
                    "The speaker's age is {value}.",
                ]),
            },
        );
        attributes.insert(
            "dialect".to_string(),
            AttributeTemplates {
                prompts: strings(&[
                    "What dialect does the speaker have?",
                    "Where is the speaker's accent from?",
                    "Describe the speaker's accent.",
                    "Which dialect region is the speaker from?",
                    "What accent does this voice carry?",
                ]),
                answers: strings(&[
                    "The speaker has a {value} accent.",
                    "The speaker talks with a {value} dialect.",
                    "The accent sounds {value}.",
                    "This is a {value} dialect.",
                    "I hear a {value} accent.",
                ]),
            },
        );
        attributes.insert(
            "ethnicity".to_string(),
            AttributeTemplates {
                prompts: strings(&[
                    "What is the speaker's ethnicity?",
                    "Which ethnic group is the speaker from?",
                    "Tell me the ethnicity of the speaker.",
                    "What ethnic background does the voice suggest?",
                    "Identify the speaker's ethnicity.",
                ]),
                answers: strings(&[
                    "The speaker is {value}.",
                    "The speaker's ethnicity is {value}.",
                    "This voice suggests a {value} background.",
                    "The speaker seems to be {value}.",
                    "I would say the speaker is {value}.",
                ]),
            },
        );
        Self {
            attributes,
            full_prompts: strings(&[
                "Describe the speaker.",
                "Tell me about this speaker.",
                "Who is speaking?",
                "Give a profile of the speaker.",
                "What can you say about the voice?",
            ]),
            openers: strings(&[
                "This is a recording of one person.",
                "A single person is talking.",
                "Here is one speaker.",
                "The clip has one voice.",
                "One person speaks in this recording.",
            ]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.attributes {
            if t.prompts.is_empty() || t.answers.is_empty() {
                return Err(Error::Data(format!("templates for {name} need prompts and answers")));
            }
            if let Some(a) = t.answers.iter().find(|a| !a.contains("{value}")) {
                return Err(Error::Data(format!("answer template {a:?} for {name} lacks {{value}}")));
            }
        }
        if self.full_prompts.is_empty() || self.openers.is_empty() {
            return Err(Error::Data("full-description prompts and openers must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    /// Always use the first answer template and opener, so each speaker
    /// gets exactly one description per prompt type.
    pub deterministic_descriptions: bool,
    /// Emit a full-description triplet per utterance.
    pub full_description: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            deterministic_descriptions: false,
            full_description: true,
        }
    }
}

fn pick<'a, R: Rng + ?Sized>(xs: &'a [String], first: bool, rng: &mut R) -> &'a str {
    if first {
        &xs[0]
    } else {
        xs.choose(rng).expect("validated non-empty")
    }
}

/// Attribute sentence for one label.
fn render_answer<R: Rng + ?Sized>(t: &AttributeTemplates, value: &str, first: bool, rng: &mut R) -> String {
    pick(&t.answers, first, rng).replace("{value}", value)
}

/// Renders triplets: one per known attribute of each utterance, plus a full
/// description when enabled. Attributes without templates are carried in
/// the labels but not asked about.
pub fn build_manifest<R: Rng + ?Sized>(
    metadata: &[UtteranceMeta],
    templates: &TemplateSet,
    options: BuildOptions,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    templates.validate()?;
    if metadata.is_empty() {
        return Err(Error::Data("metadata is empty".into()));
    }
    let first = options.deterministic_descriptions;
    let mut out = Vec::new();
    for m in metadata {
        if m.attributes.is_empty() {
            return Err(Error::Data(format!("{}: missing required field attributes", m.utterance_id)));
        }
        let triplet = |prompt: &str, description: String| Triplet {
            utterance_id: m.utterance_id.clone(),
            audio_path: m.audio_path.clone(),
            speaker_id: m.speaker_id.clone(),
            prompt: prompt.to_string(),
            description,
            attributes: m.attributes.clone(),
            duration_s: m.duration_s,
        };
        let mut sentences = Vec::new();
        for (name, value) in &m.attributes {
            let Some(t) = templates.attributes.get(name) else { continue };
            let prompt = t.prompts.choose(rng).expect("validated non-empty");
            out.push(triplet(prompt, render_answer(t, value, first, rng)));
            sentences.push(render_answer(t, value, first, rng));
        }
        if options.full_description && !sentences.is_empty() {
            let prompt = templates.full_prompts.choose(rng).expect("validated non-empty");
            let mut text = pick(&templates.openers, first, rng).to_string();
            for s in sentences {
                text.push(' ');
                text.push_str(&s);
            }
            out.push(triplet(prompt, text));
        }
    }
    Ok(out)
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, line: usize) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::Data(format!("metadata line {line}: missing required field {name}")))
}

fn string_field(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> Result<String> {
    match field(obj, name, line)? {
        Value::String(s) if !s.is_empty() => Ok(s.clone()),
        _ => Err(Error::Data(format!("metadata line {line}: field {name} must be a non-empty string"))),
    }
}

/// Parses line-delimited JSON metadata records.
pub fn parse_metadata(text: &str) -> Result<Vec<UtteranceMeta>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i + 1;
        let v: Value = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("metadata line {line_no}: {e}")))?;
        let Value::Object(obj) = v else {
            return Err(Error::Data(format!("metadata line {line_no}: expected an object")));
        };
        let duration_s = field(&obj, "duration_s", line_no)?
            .as_f64()
            .filter(|d| d.is_finite() && *d >= 0.0)
            .ok_or_else(|| Error::Data(format!("metadata line {line_no}: duration_s must be a non-negative number")))?;
        let attributes: BTreeMap<String, String> = match field(&obj, "attributes", line_no)? {
            Value::Object(a) => a
                .iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k.clone(), s.clone())),
                    _ => Err(Error::Data(format!("metadata line {line_no}: attribute {k} must be a string"))),
                })
                .collect::<Result<_>>()?,
            _ => return Err(Error::Data(format!("metadata line {line_no}: attributes must be an object"))),
        };
        if attributes.is_empty() {
            return Err(Error::Data(format!("metadata line {line_no}: missing required field attributes")));
        }
        out.push(UtteranceMeta {
            utterance_id: string_field(&obj, "utterance_id", line_no)?,
            audio_path: string_field(&obj, "audio_path", line_no)?,
            speaker_id: string_field(&obj, "speaker_id", line_no)?,
            duration_s,
            attributes,
        });
    }
    Ok(out)
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<Vec<UtteranceMeta>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metadata(&text)
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_metadata(path: impl AsRef<Path>, rows: &[UtteranceMeta]) -> Result<()> {
    write_lines(path.as_ref(), rows)
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[Triplet]) -> Result<()> {
    write_lines(path.as_ref(), rows)
}

pub fn parse_manifest(text: &str) -> Result<Vec<Triplet>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<Triplet>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Speaker counts per split: floors first, leftovers to the largest
/// fractional parts, and at least one speaker for every nonzero ratio.
pub fn split_counts(speakers: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Parameter(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let nonzero = ratios.iter().filter(|r| **r > 0.0).count();
    if speakers < nonzero {
        return Err(Error::Data(format!("{speakers} speakers cannot fill {nonzero} splits")));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * speakers as f64).collect();
    // round away float noise such as 0.6 * 10 = 6.000000000000001
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = speakers - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("three splits");
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }
    Ok([counts[0], counts[1], counts[2]])
}

/// Assigns whole speakers to train/val/test.
pub fn split_manifest<R: Rng + ?Sized>(manifest: &[Triplet], ratios: [f64; 3], rng: &mut R) -> Result<Split> {
    let speakers: BTreeSet<&str> = manifest.iter().map(|t| t.speaker_id.as_str()).collect();
    let counts = split_counts(speakers.len(), ratios)?;
    let mut order: Vec<&str> = speakers.into_iter().collect();
    order.shuffle(rng);
    let mut which: BTreeMap<&str, usize> = BTreeMap::new();
    let mut k = 0;
    for (split, &n) in counts.iter().enumerate() {
        for s in &order[k..k + n] {
            which.insert(s, split);
        }
        k += n;
    }
    let mut out = Split { train: vec![], val: vec![], test: vec![] };
    for t in manifest {
        match which[t.speaker_id.as_str()] {
            0 => out.train.push(t.clone()),
            1 => out.val.push(t.clone()),
            _ => out.test.push(t.clone()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub vocab: usize,
    pub median_len: f64,
    pub max_len: usize,
    pub samples: usize,
    pub speakers: usize,
    pub avg_duration_s: f64,
    pub std_duration_s: f64,
}

/// Caption statistics over lowercase whitespace tokens. Every manifest row
/// counts as one sample, for lengths and for durations alike.
pub fn corpus_stats(manifest: &[Triplet]) -> Result<CorpusStats> {
    if manifest.is_empty() {
        return Err(Error::Data("manifest is empty".into()));
    }
    let mut vocab = BTreeSet::new();
    let mut lens = Vec::with_capacity(manifest.len());
    for t in manifest {
        let lower = t.description.to_lowercase();
        let toks: Vec<&str> = lower.split_whitespace().collect();
        lens.push(toks.len());
        vocab.extend(toks.into_iter().map(str::to_string));
    }
    lens.sort_unstable();
    let n = lens.len();
    let median_len = if n % 2 == 1 {
        lens[n / 2] as f64
    } else {
        (lens[n / 2 - 1] + lens[n / 2]) as f64 / 2.0
    };
    let d: Vec<f64> = manifest.iter().map(|t| t.duration_s).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    Ok(CorpusStats {
        vocab: vocab.len(),
        median_len,
        max_len: lens[n - 1],
        samples: n,
        speakers: manifest.iter().map(|t| t.speaker_id.as_str()).collect::<BTreeSet<_>>().len(),
        avg_duration_s: mean,
        std_duration_s: var.sqrt(),
    })
}

//! Scoring of generated descriptions: attribute extraction from free text,
//! per-attribute accuracy, confusion matrices, a pluggable similarity
//! scorer and a linear probe over prefix vectors.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label assigned when no class, or more than one class, is mentioned.
pub const UNPARSEABLE: &str = "UNPARSEABLE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub label: String,
    /// Extra surface forms; the label itself always matches.
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    pub name: String,
    pub classes: Vec<ClassSpec>,
}

fn class(label: &str, synonyms: &[&str]) -> ClassSpec {
    ClassSpec {
        label: label.into(),
        synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
    }
}

impl AttributeSchema {
    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    /// Labels unique, synonyms unambiguous across classes.
    pub fn validate(&self) -> Result<()> {
        let mut labels = BTreeSet::new();
        let mut owner: HashMap<Vec<String>, &str> = HashMap::new();
        for c in &self.classes {
            if c.label == UNPARSEABLE || !labels.insert(c.label.as_str()) {
                return Err(Error::Config(format!("{}: bad or duplicate label {:?}", self.name, c.label)));
            }
            for s in std::iter::once(&c.label).chain(&c.synonyms) {
                let words = words(s);
                if words.is_empty() {
                    return Err(Error::Config(format!("{}: empty synonym for {}", self.name, c.label)));
                }
                if let Some(other) = owner.insert(words, &c.label) {
                    if other != c.label {
                        return Err(Error::Config(format!(
                            "{}: synonym {s:?} shared by {other} and {}",
                            self.name, c.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn builtin() -> Vec<AttributeSchema> {
        vec![
            AttributeSchema {
                name: "gender".into(),
                classes: vec![
                    class("female", &["woman", "she", "her", "feminine"]),
                    class("male", &["man", "he", "him", "his", "masculine"]),
                ],
            },
            AttributeSchema {
                name: "age".into(),
                classes: ["18-25", "26-35", "36-45", "46-55", "56-65", "66+"]
                    .iter()
                    .map(|l| class(l, &[]))
                    .collect(),
            },
            AttributeSchema {
                name: "dialect".into(),
                classes: vec![
                    class("new england", &[]),
                    class("northern", &[]),
                    class("north midland", &[]),
                    class("south midland", &[]),
                    class("southern", &[]),
                    class("new york city", &[]),
                    class("western", &[]),
                    class("army brat", &[]),
                ],
            },
            AttributeSchema {
                name: "ethnicity".into(),
                classes: vec![
                    class("white", &["caucasian"]),
                    class("black", &["african american"]),
                    class("asian", &[]),
                    class("hispanic", &["latino", "latina"]),
                    class("native american", &[]),
                ],
            },
        ]
    }
}

/// Lowercase word tokens. Hyphens and plus signs inside a word are kept so
/// labels such as `26-35` and `66+` stay whole.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace(['\u{2013}', '\u{2014}'], "-")
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '+'))
        .map(|w| w.trim_matches('-'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Label mentioned in `text` for one schema, or [`UNPARSEABLE`].
///
/// All synonym occurrences are collected; longer matches win where spans
/// overlap. If the surviving matches name more than one class the result
/// is unparseable.
pub fn extract_attribute(text: &str, schema: &AttributeSchema) -> String {
    let toks = words(text);
    // (start, length, class index)
    let mut found = Vec::new();
    for (ci, c) in schema.classes.iter().enumerate() {
        for s in std::iter::once(&c.label).chain(&c.synonyms) {
            let pat = words(s);
            if pat.is_empty() || pat.len() > toks.len() {
                continue;
            }
            for start in 0..=toks.len() - pat.len() {
                if toks[start..start + pat.len()] == pat[..] {
                    found.push((start, pat.len(), ci));
                }
            }
        }
    }
    found.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut taken = vec![false; toks.len()];
    let mut classes = BTreeSet::new();
    for (start, len, ci) in found {
        if taken[start..start + len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        classes.insert(ci);
    }
    match (classes.len(), classes.first()) {
        (1, Some(&ci)) => schema.classes[ci].label.clone(),
        _ => UNPARSEABLE.to_string(),
    }
}

pub fn extract_attributes(text: &str, schemas: &[AttributeSchema]) -> BTreeMap<String, String> {
    schemas
        .iter()
        .map(|s| (s.name.clone(), extract_attribute(text, s)))
        .collect()
}

/// Percentage of exact label matches; [`UNPARSEABLE`] never matches.
pub fn attribute_accuracy(preds: &[String], golds: &[String]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("no labels to score".into()));
    }
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g && p.as_str() != UNPARSEABLE)
        .count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row labels (gold classes).
    pub labels: Vec<String>,
    /// Column labels: the classes followed by [`UNPARSEABLE`].
    pub columns: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Rows are gold classes, columns predicted classes plus an unparseable
/// bucket. Predictions outside the schema land in the unparseable bucket.
pub fn confusion(preds: &[String], golds: &[String], schema: &AttributeSchema) -> Result<ConfusionMatrix> {
    if preds.len() != golds.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    let labels: Vec<String> = schema.labels().into_iter().map(str::to_string).collect();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let k = labels.len();
    let mut counts = vec![vec![0; k + 1]; k];
    for (p, g) in preds.iter().zip(golds) {
        let row = *index
            .get(g.as_str())
            .ok_or_else(|| Error::Data(format!("gold label {g:?} not in schema {}", schema.name)))?;
        let col = index.get(p.as_str()).copied().unwrap_or(k);
        counts[row][col] += 1;
    }
    let mut columns = labels.clone();
    columns.push(UNPARSEABLE.into());
    Ok(ConfusionMatrix { labels, columns, counts })
}

pub trait SemanticScorer {
    fn name(&self) -> &str;
    /// Similarity in `[0, 1]`.
    fn score(&self, hypothesis: &str, reference: &str) -> f64;
}

/// F1 over lowercase word multisets.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl SemanticScorer for TokenF1 {
    fn name(&self) -> &str {
        "token-f1"
    }

    fn score(&self, hypothesis: &str, reference: &str) -> f64 {
        let count = |t: &str| {
            let mut m: HashMap<String, usize> = HashMap::new();
            for w in words(t) {
                *m.entry(w).or_default() += 1;
            }
            m
        };
        let (h, r) = (count(hypothesis), count(reference));
        let (nh, nr): (usize, usize) = (h.values().sum(), r.values().sum());
        if nh == 0 && nr == 0 {
            return 1.0;
        }
        let overlap: usize = h.iter().map(|(w, c)| (*c).min(r.get(w).copied().unwrap_or(0))).sum();
        if overlap == 0 {
            return 0.0;
        }
        let p = overlap as f64 / nh as f64;
        let rc = overlap as f64 / nr as f64;
        2.0 * p * rc / (p + rc)
    }
}

pub fn semantic_score(hypothesis: &str, reference: &str, scorer: &dyn SemanticScorer) -> f64 {
    scorer.score(hypothesis, reference)
}

/// One generated description with its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub utterance_id: String,
    pub prompt: String,
    pub generated: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub accuracy: f64,
    pub support: usize,
    pub unparseable: usize,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attributes: BTreeMap<String, AttributeReport>,
    /// Accuracy over every scored (sample, attribute) pair.
    pub overall_accuracy: f64,
    pub scored_pairs: usize,
    pub unparseable: usize,
    pub scorer: String,
    pub mean_semantic_score: f64,
    pub samples: usize,
}

/// Scores each sample on the attributes its reference mentions; the gold
/// label is what extraction finds in the reference text.
pub fn evaluate(samples: &[ScoredSample], schemas: &[AttributeSchema], scorer: &dyn SemanticScorer) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    for s in schemas {
        s.validate()?;
    }
    let mut attributes = BTreeMap::new();
    let (mut correct, mut pairs, mut unparseable) = (0usize, 0usize, 0usize);
    for schema in schemas {
        let mut preds = Vec::new();
        let mut golds = Vec::new();
        for s in samples {
            let gold = extract_attribute(&s.reference, schema);
            if gold == UNPARSEABLE {
                continue;
            }
            preds.push(extract_attribute(&s.generated, schema));
            golds.push(gold);
        }
        if golds.is_empty() {
            continue;
        }
        let accuracy = attribute_accuracy(&preds, &golds)?;
        let confusion = confusion(&preds, &golds, schema)?;
        let n_unparseable = preds.iter().filter(|p| *p == UNPARSEABLE).count();
        correct += confusion.trace();
        pairs += golds.len();
        unparseable += n_unparseable;
        attributes.insert(
            schema.name.clone(),
            AttributeReport {
                accuracy,
                support: golds.len(),
                unparseable: n_unparseable,
                confusion,
            },
        );
    }
    let mean_semantic_score =
        samples.iter().map(|s| scorer.score(&s.generated, &s.reference)).sum::<f64>() / samples.len() as f64;
    Ok(EvalReport {
        attributes,
        overall_accuracy: if pairs == 0 { 0.0 } else { 100.0 * correct as f64 / pairs as f64 },
        scored_pairs: pairs,
        unparseable,
        scorer: scorer.name().to_string(),
        mean_semantic_score,
        samples: samples.len(),
    })
}

/// One-vs-rest ridge regression classifier with a bias column.
#[derive(Debug, Clone)]
pub struct RidgeProbe {
    weights: DMatrix<f64>,
    classes: usize,
}

impl RidgeProbe {
    pub fn fit(features: &[Vec<f64>], labels: &[usize], classes: usize, lambda: f64) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::Shape(format!("{} feature rows for {} labels", features.len(), labels.len())));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {l} outside {classes} classes")));
        }
        let x = design(features);
        let mut y = DMatrix::zeros(labels.len(), classes);
        for (i, &l) in labels.iter().enumerate() {
            y[(i, l)] = 1.0;
        }
        let mut gram = x.transpose() * &x;
        for i in 0..d {
            gram[(i, i)] += lambda;
        }
        let rhs = x.transpose() * y;
        let weights = gram
            .cholesky()
            .ok_or_else(|| Error::Degenerate("probe normal equations are not positive definite".into()))?
            .solve(&rhs);
        Ok(Self { weights, classes })
    }

    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<usize> {
        let scores = design(features) * &self.weights;
        (0..scores.nrows())
            .map(|i| {
                (0..self.classes)
                    .max_by(|&a, &b| scores[(i, a)].total_cmp(&scores[(i, b)]).then(b.cmp(&a)))
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Fraction of rows classified correctly, in `[0, 1]`.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let p = self.predict(features);
        p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
    }
}

fn design(features: &[Vec<f64>]) -> DMatrix<f64> {
    let d = features.first().map_or(0, Vec::len);
    DMatrix::from_fn(features.len(), d + 1, |i, j| if j < d { features[i][j] } else { 1.0 })
}

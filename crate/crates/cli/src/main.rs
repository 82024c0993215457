mod plot;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use speakerlm::audio::load_and_resample;
use speakerlm::audio::TARGET_SAMPLE_RATE;
use speakerlm::encoder::load_external_embeddings;
use speakerlm::eval::{evaluate, ScoredSample};
use speakerlm::tears::{
    build_manifest, corpus_stats, read_manifest, read_metadata, split_manifest, write_manifest, BuildOptions,
    TemplateSet, Triplet,
};
use speakerlm::train::data::{embed_waveform, resolve_audio};
use speakerlm::train::{
    load_checkpoint, save_checkpoint, speaker_vocabulary, train_tokenizer, Dataset, EmbeddingSource, Trainer,
};
use speakerlm::{
    synth, Ablation, AttributeSchema, AugmentationPolicy, Config, DType, DecodingStrategy, MapperVariant,
    SpeakerEmbedding, SpeakerEncoder, SpeakerLm, TokenF1,
};

#[derive(Debug, Parser, Serialize)]
#[command(name = "speakerlm", version, about = "Speaker description models from audio and a text prompt")]
struct Cli {
    /// TOML configuration file. Without it the `--preset` values are used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration used when `--config` is absent.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Seed for initialisation, shuffling, augmentation, template choice and
    /// sampling. Overrides the seeds in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// TOML file replacing the configuration's augmentation policy.
    #[arg(long, global = true)]
    augment_policy: Option<PathBuf>,
    /// Ablation switch (repeatable): no-speaker-loss, frozen-lm, no-augment,
    /// mlp-mapper.
    #[arg(long, global = true)]
    ablation: Vec<String>,
    /// -v for progress, -vv for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    /// Small widths that train on one CPU core in minutes.
    Desk,
    /// Full-size mapper and language model.
    Full,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write the eight-speaker synthetic corpus: wav files, metadata.jsonl,
    /// a training manifest and a held-out-prompt manifest.
    SynthCorpus,
    /// Build caption triplets from utterance metadata and split them by
    /// speaker into train/val/test manifests with a statistics report.
    PrepareData {
        /// JSONL metadata, one utterance per line.
        #[arg(long)]
        metadata: PathBuf,
        /// Train, val and test speaker fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
        /// JSON template set replacing the built-in templates.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Always use the first answer template and opener.
        #[arg(long)]
        deterministic: bool,
    },
    /// Two-stage training; writes a checkpoint and a metrics log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
    },
    /// Describe speakers given audio files or precomputed embeddings.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Audio files to describe (repeatable).
        #[arg(long)]
        audio: Vec<PathBuf>,
        /// Embedding table (`id<TAB>values`); every entry is described.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Generate for every triplet of a manifest and score attribute
    /// accuracy; renders one stacked-bar image per attribute.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        source: SourceArgs,
        /// JSON list of attribute schemas replacing the built-in ones.
        #[arg(long)]
        schemas: Option<PathBuf>,
        #[command(flatten)]
        decoding: DecodingArgs,
    },
    /// Export the mapper's per-layer self-attention for one input.
    AttentionMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "embeddings")]
        audio: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Entry of the embedding table; defaults to the first.
        #[arg(long, requires = "embeddings")]
        utterance: Option<String>,
        /// Also export every head separately in the JSON dump.
        #[arg(long)]
        per_head: bool,
    },
}

#[derive(Debug, Args, Serialize)]
struct SourceArgs {
    /// Directory that relative audio paths resolve against; defaults to
    /// the manifest's directory.
    #[arg(long)]
    audio_root: Option<PathBuf>,
    /// Precomputed embedding table used instead of audio.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Strategy {
    Greedy,
    Beam,
    TopK,
}

#[derive(Debug, Args, Serialize)]
struct DecodingArgs {
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
}

impl DecodingArgs {
    fn apply(&self, config: &mut Config) {
        let d = &mut config.decoding;
        if let Some(s) = self.strategy {
            d.strategy = match s {
                Strategy::Greedy => DecodingStrategy::Greedy,
                Strategy::Beam => DecodingStrategy::Beam,
                Strategy::TopK => DecodingStrategy::TopK,
            };
        }
        if let Some(v) = self.max_len {
            d.max_len = v;
        }
        if let Some(v) = self.beam_width {
            d.beam_width = v;
        }
        if let Some(v) = self.top_k {
            d.top_k = v;
        }
        if let Some(v) = self.temperature {
            d.temperature = v;
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::SynthCorpus => synth_corpus(cli),
        Command::PrepareData {
            metadata,
            ratios,
            templates,
            deterministic,
        } => prepare_data(cli, metadata, ratios, templates.as_deref(), *deterministic),
        Command::Train { manifest, source } => train(cli, manifest, source),
        Command::Generate {
            checkpoint,
            prompt,
            audio,
            embeddings,
            decoding,
        } => generate(cli, checkpoint, prompt, audio, embeddings.as_deref(), decoding),
        Command::Evaluate {
            checkpoint,
            manifest,
            source,
            schemas,
            decoding,
        } => evaluate_cmd(cli, checkpoint, manifest, source, schemas.as_deref(), decoding),
        Command::AttentionMaps {
            checkpoint,
            audio,
            embeddings,
            utterance,
            per_head,
        } => attention_maps(cli, checkpoint, audio.as_deref(), embeddings.as_deref(), utterance.as_deref(), *per_head),
    }
}

/// `run.json`: the parsed command line plus the effective configuration.
fn write_snapshot(cli: &Cli, config: Option<&Config>) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        version: &'a str,
        invocation: &'a Cli,
        config: Option<&'a Config>,
    }
    let snap = Snapshot {
        version: env!("CARGO_PKG_VERSION"),
        invocation: cli,
        config,
    };
    write_text(&cli.out.join("run.json"), &serde_json::to_string_pretty(&snap)?)?;
    if let Some(c) = config {
        write_text(&cli.out.join("config.toml"), &c.to_toml()?)?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Config file or preset, then augmentation policy, seed and ablations.
fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => match cli.preset {
            Preset::Desk => Config::desk(),
            Preset::Full => Config::default(),
        },
    };
    if let Some(p) = &cli.augment_policy {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        config.augment = AugmentationPolicy::from_toml(&text).with_context(|| format!("augment policy {}", p.display()))?;
    }
    if let Some(s) = cli.seed {
        config.reseed(s);
    }
    for a in &cli.ablation {
        a.parse::<Ablation>()?.apply(&mut config);
    }
    config.validate()?;
    Ok(config)
}

fn synth_corpus(cli: &Cli) -> Result<()> {
    write_snapshot(cli, None)?;
    let seed = cli.seed.unwrap_or(0);
    let meta = synth::write_corpus(&cli.out, seed)?;
    write_manifest(cli.out.join("train.jsonl"), &synth::training_manifest(seed)?)?;
    write_manifest(cli.out.join("heldout.jsonl"), &synth::held_out_manifest(seed + 1)?)?;
    println!("wrote {} utterances to {}", meta.len(), cli.out.display());
    Ok(())
}

fn prepare_data(cli: &Cli, metadata: &Path, ratios: &[f64], templates: Option<&Path>, deterministic: bool) -> Result<()> {
    write_snapshot(cli, None)?;
    if ratios.len() != 3 {
        bail!("--ratios takes three comma-separated fractions, got {}", ratios.len());
    }
    let mut rows = read_metadata(metadata)?;
    let root = metadata.parent().unwrap_or(Path::new("."));
    for r in &mut rows {
        r.audio_path = resolve_audio(root, &r.audio_path).to_string_lossy().into_owned();
    }
    let templates = match templates {
        Some(p) => read_json::<TemplateSet>(p)?,
        None => TemplateSet::builtin(),
    };
    templates.validate()?;
    let options = BuildOptions {
        deterministic_descriptions: deterministic,
        full_description: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
    let manifest = build_manifest(&rows, &templates, options, &mut rng)?;
    let split = split_manifest(&manifest, [ratios[0], ratios[1], ratios[2]], &mut rng)?;
    let mut stats = BTreeMap::new();
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        write_manifest(cli.out.join(format!("{name}.jsonl")), part)?;
        stats.insert(name, if part.is_empty() { None } else { Some(corpus_stats(part)?) });
        println!("{name}: {} triplets", part.len());
    }
    write_text(&cli.out.join("stats.json"), &serde_json::to_string_pretty(&stats)?)?;
    Ok(())
}

fn manifest_root(manifest: &Path, source: &SourceArgs) -> PathBuf {
    source
        .audio_root
        .clone()
        .unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn train(cli: &Cli, manifest_path: &Path, source: &SourceArgs) -> Result<()> {
    let config = resolve_config(cli)?;
    write_snapshot(cli, Some(&config))?;
    let manifest = read_manifest(manifest_path)?;
    let encoder = config.encoder.build()?;
    let tokenizer = train_tokenizer(&manifest, config.lm.bpe_merges);
    let speakers = speaker_vocabulary(&manifest);
    let table;
    let (embedding_source, augment_with): (EmbeddingSource<'_>, Option<&dyn SpeakerEncoder>) = match &source.embeddings {
        Some(p) => {
            table = load_external_embeddings(p)?;
            if config.training.augmentations_enabled {
                log::warn!("precomputed embeddings cannot be re-augmented; training on them unchanged");
            }
            (EmbeddingSource::Table(&table), None)
        }
        None => (
            EmbeddingSource::Audio {
                encoder: &encoder,
                root: manifest_root(manifest_path, source),
            },
            Some(&encoder),
        ),
    };
    let data = Dataset::from_triplets(&manifest, &tokenizer, &speakers, &embedding_source)?;
    log::info!(
        "{} examples, {} utterances, {} speakers, vocabulary {}",
        data.examples.len(),
        data.utterances.len(),
        speakers.len(),
        tokenizer.vocab_size()
    );
    let mut model = SpeakerLm::new(&config, tokenizer, speakers, DType::F32)?;
    let metrics_path = cli.out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut last = None;
    let mut trainer = Trainer::new(&mut model, &data, augment_with)?;
    trainer.run(&mut |r| {
        serde_json::to_writer(&mut metrics, r)?;
        metrics.write_all(b"\n").map_err(|e| speakerlm::Error::io(&metrics_path, e))?;
        if r.step % 50 == 0 {
            log::info!("step {} epoch {} stage {:?}: L={:.4} L1={:.4}", r.step, r.epoch, r.stage, r.loss, r.l1);
        }
        last = Some(r.clone());
        Ok(())
    })?;
    let steps = trainer.step();
    metrics.flush()?;
    save_checkpoint(cli.out.join("checkpoint"), &model, steps)?;
    match last {
        Some(r) => println!(
            "trained {steps} steps; final L={:.6} L1={:.6} L2={}",
            r.loss,
            r.l1,
            r.l2.map_or("none".into(), |v| format!("{v:.6}"))
        ),
        None => println!("trained 0 steps"),
    }
    Ok(())
}

fn load_model(checkpoint: &Path) -> Result<SpeakerLm> {
    let (model, meta) = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    log::info!("checkpoint step {} ({} speakers)", meta.step, meta.speakers.len());
    Ok(model)
}

fn embed_file(path: &Path, encoder: &dyn SpeakerEncoder) -> Result<SpeakerEmbedding> {
    let wav = load_and_resample(path, TARGET_SAMPLE_RATE).with_context(|| format!("reading {}", path.display()))?;
    Ok(embed_waveform(&wav, encoder)?)
}

fn generate(
    cli: &Cli,
    checkpoint: &Path,
    prompt: &str,
    audio: &[PathBuf],
    embeddings: Option<&Path>,
    decoding: &DecodingArgs,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let mut config = model.config().clone();
    decoding.apply(&mut config);
    if let Some(s) = cli.seed {
        config.decoding.seed = s;
    }
    config.validate()?;
    write_snapshot(cli, Some(&config))?;

    let mut inputs: Vec<(String, SpeakerEmbedding)> = Vec::new();
    let encoder = config.encoder.build()?;
    for p in audio {
        inputs.push((p.display().to_string(), embed_file(p, &encoder)?));
    }
    if let Some(p) = embeddings {
        inputs.extend(load_external_embeddings(p)?);
    }
    if inputs.is_empty() {
        bail!("nothing to describe: pass --audio or --embeddings");
    }

    #[derive(Serialize)]
    struct Generated<'a> {
        input: &'a str,
        prompt: &'a str,
        generated: String,
    }
    let mut rows = Vec::new();
    for (id, emb) in &inputs {
        let text = model.describe(emb, prompt, &config.decoding)?;
        println!("{id}\t{text}");
        rows.push(Generated {
            input: id,
            prompt,
            generated: text,
        });
    }
    write_jsonl(&cli.out.join("generations.jsonl"), &rows)
}

/// Clean embedding per distinct utterance of a manifest.
fn manifest_embeddings(
    manifest: &[Triplet],
    root: &Path,
    table: Option<&BTreeMap<String, SpeakerEmbedding>>,
    encoder: &dyn SpeakerEncoder,
) -> Result<BTreeMap<String, SpeakerEmbedding>> {
    let mut out = BTreeMap::new();
    for t in manifest {
        if out.contains_key(&t.utterance_id) {
            continue;
        }
        let emb = match table {
            Some(tab) => tab
                .get(&t.utterance_id)
                .cloned()
                .with_context(|| format!("no embedding for utterance {:?}", t.utterance_id))?,
            None => embed_file(&resolve_audio(root, &t.audio_path), encoder)?,
        };
        out.insert(t.utterance_id.clone(), emb);
    }
    Ok(out)
}

fn evaluate_cmd(
    cli: &Cli,
    checkpoint: &Path,
    manifest_path: &Path,
    source: &SourceArgs,
    schemas: Option<&Path>,
    decoding: &DecodingArgs,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let mut config = model.config().clone();
    decoding.apply(&mut config);
    if let Some(s) = cli.seed {
        config.decoding.seed = s;
    }
    config.validate()?;
    write_snapshot(cli, Some(&config))?;

    let schemas: Vec<AttributeSchema> = match schemas {
        Some(p) => read_json(p)?,
        None => AttributeSchema::builtin(),
    };
    let manifest = read_manifest(manifest_path)?;
    let table = source.embeddings.as_deref().map(load_external_embeddings).transpose()?;
    let encoder = config.encoder.build()?;
    let embs = manifest_embeddings(&manifest, &manifest_root(manifest_path, source), table.as_ref(), &encoder)?;

    let mut samples = Vec::with_capacity(manifest.len());
    for t in &manifest {
        samples.push(ScoredSample {
            utterance_id: t.utterance_id.clone(),
            prompt: t.prompt.clone(),
            generated: model.describe(&embs[&t.utterance_id], &t.prompt, &config.decoding)?,
            reference: t.description.clone(),
        });
    }
    let report = evaluate(&samples, &schemas, &TokenF1)?;
    write_jsonl(&cli.out.join("samples.jsonl"), &samples)?;
    write_text(&cli.out.join("eval_report.json"), &serde_json::to_string_pretty(&report)?)?;
    for (name, a) in &report.attributes {
        plot::stacked_bars(&a.confusion, &cli.out.join(format!("confusion_{name}.png")))?;
        println!("{name}: {:.2}% of {} ({} unparseable)", a.accuracy, a.support, a.unparseable);
    }
    println!(
        "overall: {:.2}% over {} pairs; mean {} {:.4}",
        report.overall_accuracy, report.scored_pairs, report.scorer, report.mean_semantic_score
    );
    Ok(())
}

fn attention_maps(
    cli: &Cli,
    checkpoint: &Path,
    audio: Option<&Path>,
    embeddings: Option<&Path>,
    utterance: Option<&str>,
    per_head: bool,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    if model.mapper.variant() != MapperVariant::Transformer {
        bail!(
            "checkpoint {} uses the mlp mapper, which has no self-attention layers; attention maps need a transformer-mapper checkpoint",
            checkpoint.display()
        );
    }
    write_snapshot(cli, Some(model.config()))?;
    let emb = match (audio, embeddings) {
        (Some(p), _) => embed_file(p, &model.config().encoder.build()?)?,
        (None, Some(p)) => {
            let table = load_external_embeddings(p)?;
            match utterance {
                Some(id) => table.get(id).cloned().with_context(|| format!("no embedding for {id:?}"))?,
                None => table.into_values().next().context("embedding table is empty")?,
            }
        }
        (None, None) => bail!("pass --audio or --embeddings"),
    };
    let averaged = model.mapper.attention_maps(&emb, false)?;
    for m in &averaged.maps {
        plot::heatmap(&m.values, averaged.size, &cli.out.join(format!("attention_layer_{}.png", m.layer)))?;
    }
    let record = if per_head {
        model.mapper.attention_maps(&emb, true)?
    } else {
        averaged
    };
    write_text(&cli.out.join("attention.json"), &serde_json::to_string(&record)?)?;
    println!(
        "{} maps over {} layers, max row-sum error {:.2e}",
        record.maps.len(),
        model.config().mapper.transformer_layers,
        record.max_row_sum_error()
    );
    Ok(())
}

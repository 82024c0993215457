//! End-to-end acceptance checks. Each test prints one `criterion N ...
//! PASS|FAIL` line before asserting. Tests are serialised through a lock so
//! the large models never coexist in memory.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use candle::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speakerlm::audio::augment::{
    add_noise, band_stop, measured_snr_db, pick_drop_band, random_time_cut, FrequencyBand,
};
use speakerlm::eval::{evaluate, AttributeSchema, RidgeProbe, ScoredSample, TokenF1};
use speakerlm::lm::{CausalLm, TOTAL_PREFIX_LEN};
use speakerlm::loss::{captioning_loss, joint_loss, length_mask};
use speakerlm::mapper::{MapperConfig, MapperVariant, PrefixMapper, AUDIO_PREFIX_LEN};
use speakerlm::model::{HEAD_PREFIX, LM_PREFIX, MAPPER_PREFIX};
use speakerlm::params::ParamStore;
use speakerlm::speaker_head::{ce_loss, SpeakerHead};
use speakerlm::tears::{corpus_stats, read_manifest, write_manifest, CorpusStats, Triplet};
use speakerlm::train::gradcheck::random_projection;
use speakerlm::train::{
    grad_check, load_checkpoint, sample_coords, save_checkpoint, speaker_vocabulary, train, train_tokenizer, Dataset,
    EmbeddingSource, MetricRecord, Stage, Trainer,
};
use speakerlm::{synth, BpeTokenizer, Config, LmConfig, SpeakerEmbedding, SpeakerLm, Waveform, EMBEDDING_DIM};

const TEARS_ENV: &str = "SPEAKERLM_TEARS_TRAIN_MANIFEST";

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    // Direct handle write: libtest only captures the print macros.
    let line = format!("criterion {n} ({name}): {verdict} [{detail}]\n");
    let _ = std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes());
}

fn random_embedding(rng: &mut ChaCha8Rng) -> SpeakerEmbedding {
    SpeakerEmbedding::new((0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn embeddings_tensor(embs: &[SpeakerEmbedding], dtype: DType) -> Tensor {
    let flat: Vec<f32> = embs.iter().flat_map(|e| e.values().iter().copied()).collect();
    Tensor::from_vec(flat, (embs.len(), EMBEDDING_DIM), &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

#[test]
fn criterion_1_full_size_shapes() {
    let _g = serial();
    let t0 = Instant::now();
    let config = Config::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let embs: Vec<SpeakerEmbedding> = (0..100).map(|_| random_embedding(&mut rng)).collect();
    let mut failures = Vec::new();

    let tok = BpeTokenizer::train(["the speaker has a low voice and a northern accent"], 20);
    let mut lm_store = ParamStore::new(DType::F32);
    let lm = CausalLm::new(&mut lm_store, LM_PREFIX, &LmConfig::default(), tok.vocab_size(), tok.eos_id()).unwrap();
    let prompts: Vec<Vec<u32>> = (0..embs.len())
        .map(|i| {
            let words = ["describe", "the speaker", "in detail", "please", "now"];
            tok.encode(&words[..i % 6].join(" "))
        })
        .collect();

    for variant in [MapperVariant::Transformer, MapperVariant::Mlp] {
        let mapper_config = MapperConfig {
            variant,
            ..config.mapper.clone()
        };
        let mut store = ParamStore::new(DType::F32);
        let mapper = PrefixMapper::new(&mut store, MAPPER_PREFIX, &mapper_config).unwrap();
        for (chunk, chunk_prompts) in embs.chunks(25).zip(prompts.chunks(25)) {
            let out = mapper.forward(&embeddings_tensor(chunk, DType::F32)).unwrap();
            if out.dims() != [chunk.len(), AUDIO_PREFIX_LEN, 768] {
                failures.push(format!("{variant:?} mapper output {:?}", out.dims()));
            }
            let assembled = lm.assemble_prefix(&out, chunk_prompts).unwrap();
            if assembled.embeddings.dims() != [chunk.len(), TOTAL_PREFIX_LEN, 768] {
                failures.push(format!("{variant:?} assembled {:?}", assembled.embeddings.dims()));
            }
        }
        let seq = mapper.map(&embs[0]).unwrap();
        if (seq.rows(), seq.width()) != (40, 768) {
            failures.push(format!("{variant:?} prefix sequence {}x{}", seq.rows(), seq.width()));
        }
    }
    let ok = failures.is_empty() && TOTAL_PREFIX_LEN == 50;
    report(1, "shape and assembly", ok, &format!("100 embeddings x 2 variants, {:.1?}", t0.elapsed()));
    assert!(ok, "{failures:?}");
}

/// Log-softmax NLL written out with plain loops.
fn oracle_captioning(logits: &[Vec<Vec<f64>>], targets: &[Vec<u32>], lengths: &[usize]) -> f64 {
    let mut total = 0.0;
    for ((row, tgt), &len) in logits.iter().zip(targets).zip(lengths) {
        for t in 0..len {
            let z = &row[t];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[tgt[t] as usize];
        }
    }
    total / logits.len() as f64
}

#[test]
fn criterion_2_loss_algebra() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_joint = 0.0f64;
    for _ in 0..1000 {
        let l1 = rng.random_range(0.0..100.0);
        let l2 = rng.random_range(0.0..20.0);
        worst_joint = worst_joint.max((joint_loss(l1, l2, 0.3) - (0.3 * l1 + 0.7 * l2)).abs());
    }
    let ce = ce_loss(&[0.0, 1.0, 0.0], &[0.2, 0.5, 0.3]).unwrap();
    let ce_err = (ce + 0.5f64.ln()).abs();

    let mut worst_cap = 0.0f64;
    for _ in 0..50 {
        let b = rng.random_range(1..4);
        let l = rng.random_range(1..6);
        let v = rng.random_range(2..9);
        let logits: Vec<Vec<Vec<f64>>> = (0..b)
            .map(|_| (0..l).map(|_| (0..v).map(|_| rng.random_range(-5.0..5.0)).collect()).collect())
            .collect();
        let targets: Vec<Vec<u32>> = (0..b).map(|_| (0..l).map(|_| rng.random_range(0..v as u32)).collect()).collect();
        let lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..=l)).collect();
        let flat: Vec<f64> = logits.iter().flatten().flatten().copied().collect();
        let lt = Tensor::from_vec(flat, (b, l, v), &Device::Cpu).unwrap();
        let tt = Tensor::from_vec(targets.iter().flatten().copied().collect::<Vec<u32>>(), (b, l), &Device::Cpu).unwrap();
        let mask = length_mask(&lengths, l, DType::F64, &Device::Cpu).unwrap();
        let got = captioning_loss(&lt, &tt, Some(&mask)).unwrap().to_scalar::<f64>().unwrap();
        worst_cap = worst_cap.max((got - oracle_captioning(&logits, &targets, &lengths)).abs());
    }
    let ok = worst_joint <= 1e-9 && ce_err <= 1e-9 && worst_cap <= 1e-6;
    report(
        2,
        "loss algebra",
        ok,
        &format!("joint {worst_joint:.1e}, ce {ce_err:.1e}, captioning {worst_cap:.1e}"),
    );
    assert!(ok);
}

fn small_mapper(variant: MapperVariant) -> MapperConfig {
    MapperConfig {
        variant,
        width: 12,
        transformer_layers: 2,
        heads: 3,
        ff_width: 24,
        mlp_hidden: 20,
        seed: 3,
    }
}

#[test]
fn criterion_3_gradient_checks() {
    let _g = serial();
    let t0 = Instant::now();
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let embs: Vec<SpeakerEmbedding> = (0..2).map(|_| random_embedding(&mut rng)).collect();
    let x = embeddings_tensor(&embs, DType::F64);
    let mut results = Vec::new();

    for variant in [MapperVariant::Transformer, MapperVariant::Mlp] {
        let config = small_mapper(variant);
        let mut store = ParamStore::new(DType::F64);
        let mapper = PrefixMapper::new(&mut store, MAPPER_PREFIX, &config).unwrap();
        let r = random_projection(&[2, AUDIO_PREFIX_LEN, config.width], &mut rng).unwrap();
        let coords = sample_coords(&store, MAPPER_PREFIX, 16, &mut rng);
        let rep = grad_check(&store, &coords, eps, || Ok((mapper.forward(&x)? * &r)?.sum_all()?)).unwrap();
        results.push((format!("{variant:?} mapper"), rep.checks.len(), rep.max_rel_error));
    }

    let mut store = ParamStore::new(DType::F64);
    let head = SpeakerHead::new(&mut store, HEAD_PREFIX, 12, 5, 4).unwrap();
    let first = Tensor::from_vec(
        (0..3 * 12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
        (3, 12),
        &Device::Cpu,
    )
    .unwrap();
    let labels = Tensor::new(&[0u32, 3, 4], &Device::Cpu).unwrap();
    let coords = sample_coords(&store, HEAD_PREFIX, 16, &mut rng);
    let rep = grad_check(&store, &coords, eps, || head.loss(&first, &labels)).unwrap();
    results.push(("speaker head".into(), rep.checks.len(), rep.max_rel_error));

    let ok = results.iter().all(|(_, n, e)| *n >= 10 && *e < 1e-3);
    let detail: Vec<String> = results.iter().map(|(k, n, e)| format!("{k}: {n} coords, max rel {e:.1e}")).collect();
    report(3, "gradient checks", ok, &format!("{}; {:.1?}", detail.join("; "), t0.elapsed()));
    assert!(ok);
}

struct Synthetic {
    config: Config,
    data: Dataset,
    held_out: Vec<Triplet>,
    tokenizer: BpeTokenizer,
    speakers: Vec<String>,
    encoder: speakerlm::ReferenceEncoder,
}

fn synthetic(config: Config) -> Synthetic {
    let seed = config.training.seed;
    let triplets = synth::training_manifest(seed).unwrap();
    let audio: BTreeMap<String, Waveform> = synth::audio(seed);
    let encoder = config.encoder.build().unwrap();
    let tokenizer = train_tokenizer(&triplets, config.lm.bpe_merges);
    let speakers = speaker_vocabulary(&triplets);
    let data = Dataset::from_triplets(
        &triplets,
        &tokenizer,
        &speakers,
        &EmbeddingSource::Memory {
            encoder: &encoder,
            audio: &audio,
        },
    )
    .unwrap();
    Synthetic {
        config,
        data,
        held_out: synth::held_out_manifest(seed + 1).unwrap(),
        tokenizer,
        speakers,
        encoder,
    }
}

impl Synthetic {
    fn model(&self) -> SpeakerLm {
        SpeakerLm::new(&self.config, self.tokenizer.clone(), self.speakers.clone(), DType::F32).unwrap()
    }
}

#[test]
fn criterion_4_freeze_contract() {
    let _g = serial();
    let s = synthetic(Config::desk());
    let mut model = s.model();
    let lm0 = model.store.state_bytes(LM_PREFIX).unwrap();
    let mapper0 = model.store.state_bytes(MAPPER_PREFIX).unwrap();
    let head0 = model.store.state_bytes(HEAD_PREFIX).unwrap();
    let mut trainer = Trainer::new(&mut model, &s.data, Some(&s.encoder)).unwrap();
    trainer.run_stage(Stage::A, 1, Some(10), &mut |_| Ok(())).unwrap();
    let steps_a = trainer.step();
    let lm_a = trainer.model().store.state_bytes(LM_PREFIX).unwrap();
    let mapper_moved = trainer.model().store.state_bytes(MAPPER_PREFIX).unwrap() != mapper0;
    let head_moved = trainer.model().store.state_bytes(HEAD_PREFIX).unwrap() != head0;
    trainer.run_stage(Stage::B, 1, Some(2), &mut |_| Ok(())).unwrap();
    let lm_b_moved = trainer.model().store.state_bytes(LM_PREFIX).unwrap() != lm_a;
    let ok = steps_a == 10 && lm_a == lm0 && mapper_moved && head_moved && lm_b_moved;
    report(
        4,
        "freeze contract",
        ok,
        &format!(
            "stage A {steps_a} steps: lm identical {}, mapper moved {mapper_moved}, head moved {head_moved}; stage B lm moved {lm_b_moved}",
            lm_a == lm0
        ),
    );
    assert!(ok);
}

struct DeskRun {
    log: Vec<MetricRecord>,
    texts: Vec<String>,
    head_accuracy: f64,
    held_out_accuracy: f64,
    elapsed: Duration,
}

fn desk_run() -> DeskRun {
    let t0 = Instant::now();
    let s = synthetic(Config::desk());
    let mut model = s.model();
    let (log, _) = train(&mut model, &s.data, Some(&s.encoder)).unwrap();

    let clean: Vec<&SpeakerEmbedding> = s.data.utterances.iter().map(|u| &u.clean).collect();
    let probs = model.speaker_probabilities(&clean).unwrap();
    let correct = s
        .data
        .utterances
        .iter()
        .zip(&probs)
        .filter(|(u, p)| {
            let best = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            model.speakers[best] == u.speaker
        })
        .count();

    let samples: Vec<ScoredSample> = s
        .held_out
        .iter()
        .map(|t| {
            let u = s.data.utterances.iter().find(|u| u.id == t.utterance_id).unwrap();
            ScoredSample {
                utterance_id: t.utterance_id.clone(),
                prompt: t.prompt.clone(),
                generated: model.describe(&u.clean, &t.prompt, &s.config.decoding).unwrap(),
                reference: t.description.clone(),
            }
        })
        .collect();
    let report = evaluate(&samples, &AttributeSchema::builtin(), &TokenF1).unwrap();
    DeskRun {
        log,
        texts: samples.into_iter().map(|s| s.generated).collect(),
        head_accuracy: correct as f64 / clean.len() as f64,
        held_out_accuracy: report.overall_accuracy,
        elapsed: t0.elapsed(),
    }
}

/// Two identically seeded desk runs, shared by the overfit and determinism
/// criteria.
fn desk_runs() -> &'static (DeskRun, DeskRun) {
    static RUNS: OnceLock<(DeskRun, DeskRun)> = OnceLock::new();
    RUNS.get_or_init(|| (desk_run(), desk_run()))
}

#[test]
fn criterion_5_synthetic_overfit() {
    let _g = serial();
    let run = &desk_runs().0;
    let first = run.log.first().unwrap().l1;
    let last = run.log.last().unwrap().l1;
    let ok = last < 0.1 * first
        && run.head_accuracy >= 0.99
        && run.held_out_accuracy >= 90.0
        && run.elapsed <= Duration::from_secs(15 * 60);
    report(
        5,
        "synthetic overfit",
        ok,
        &format!(
            "L1 {first:.3} -> {last:.4}, head acc {:.1}%, held-out attribute acc {:.2}%, {:.0?}",
            100.0 * run.head_accuracy,
            run.held_out_accuracy,
            run.elapsed
        ),
    );
    assert!(ok);
}

fn probe_accuracy(seed: u64, speaker_loss: bool) -> f64 {
    let mut config = Config::desk();
    config.reseed(seed);
    config.training.stage_a_epochs = 2;
    config.training.stage_b_epochs = 0;
    config.training.speaker_loss_enabled = speaker_loss;
    let s = synthetic(config);
    let mut model = s.model();
    train(&mut model, &s.data, Some(&s.encoder)).unwrap();

    let labels: Vec<usize> = s
        .data
        .utterances
        .iter()
        .map(|u| s.speakers.iter().position(|x| *x == u.speaker).unwrap())
        .collect();
    let clean: Vec<&SpeakerEmbedding> = s.data.utterances.iter().map(|u| &u.clean).collect();
    let probe = RidgeProbe::fit(&model.first_prefix_vectors(&clean).unwrap(), &labels, s.speakers.len(), 1e-2).unwrap();
    let mut policy = s.config.augment.clone();
    policy.seed = 9_999;
    let draws = 4;
    (0..draws)
        .map(|draw| {
            let aug = s.data.epoch_embeddings(Some(&s.encoder), &policy, true, draw).unwrap();
            let refs: Vec<&SpeakerEmbedding> = aug.iter().collect();
            probe.accuracy(&model.first_prefix_vectors(&refs).unwrap(), &labels)
        })
        .sum::<f64>()
        / draws as f64
}

#[test]
fn criterion_6_speaker_loss_ablation() {
    let _g = serial();
    let seeds = [0u64, 1, 2];
    let with: Vec<f64> = seeds.iter().map(|&s| probe_accuracy(s, true)).collect();
    let without: Vec<f64> = seeds.iter().map(|&s| probe_accuracy(s, false)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ok = mean(&with) > mean(&without);
    report(
        6,
        "speaker loss ablation",
        ok,
        &format!(
            "probe accuracy with {:.3} {with:.3?}, without {:.3} {without:.3?}",
            mean(&with),
            mean(&without)
        ),
    );
    assert!(ok);
}

fn tone(freq: f64, n: usize, amp: f32) -> Waveform {
    let samples = (0..n)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin() as f32)
        .collect();
    Waveform::new(samples, 16_000).unwrap()
}

fn db(after: f64, before: f64) -> f64 {
    10.0 * (after / before).log10()
}

#[test]
fn criterion_7_augmentation_properties() {
    let _g = serial();
    let t0 = Instant::now();
    let policy = speakerlm::AugmentationPolicy::default();
    let voice = synth::synthesize(2, 0, 5);

    let mut worst_snr = 0.0f64;
    for (i, step) in (0..=20).enumerate() {
        let snr = 10.0 + 0.5 * step as f64;
        let out = add_noise(&voice, snr, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        worst_snr = worst_snr.max((measured_snr_db(voice.samples(), out.samples()) - snr).abs());
    }

    let mut cut_ok = true;
    let mut cut_span = (usize::MAX, 0);
    for seed in 0..200 {
        let out = random_time_cut(&voice, &policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let removed = voice.len() - out.len();
        cut_span = (cut_span.0.min(removed), cut_span.1.max(removed));
        let head = voice.samples().iter().zip(out.samples()).take_while(|(a, b)| a == b).count();
        let contiguous = voice.samples()[head + removed..] == out.samples()[head..];
        cut_ok &= (1600..=8000).contains(&removed) && contiguous;
    }

    let mut worst_in = f64::NEG_INFINITY;
    let mut worst_out = 0.0f64;
    for seed in 0..50 {
        let band: FrequencyBand = pick_drop_band(&policy, &mut ChaCha8Rng::seed_from_u64(seed));
        let centre = tone(band.centre_hz().round(), 16_000, 0.5);
        worst_in = worst_in.max(db(band_stop(&centre, band).power().max(1e-30), centre.power()));
        for f in [band.low_hz - 100.0, band.high_hz + 100.0, 4000.0] {
            let t = tone(f, 16_000, 0.5);
            worst_out = worst_out.max(db(band_stop(&t, band).power(), t.power()).abs());
        }
    }

    let ok = worst_snr <= 0.5 && cut_ok && worst_in <= -20.0 && worst_out < 1.0;
    report(
        7,
        "augmentation properties",
        ok,
        &format!(
            "snr err {worst_snr:.3} dB, cuts {}..{} samples, in-band {worst_in:.1} dB, out-of-band {worst_out:.3} dB, {:.1?}",
            cut_span.0,
            cut_span.1,
            t0.elapsed()
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_8_attention_maps() {
    let _g = serial();
    let s = synthetic(Config::desk());
    let mut model = s.model();
    let mut trainer = Trainer::new(&mut model, &s.data, None).unwrap();
    trainer.run_stage(Stage::A, 1, Some(3), &mut |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &model, 3).unwrap();
    let (loaded, _) = load_checkpoint(dir.path()).unwrap();

    let emb = &s.data.utterances[0].clean;
    let averaged = loaded.mapper.attention_maps(emb, false).unwrap();
    let per_head = loaded.mapper.attention_maps(emb, true).unwrap();
    let layers: Vec<usize> = averaged.maps.iter().map(|m| m.layer).collect();
    let row_err = averaged.max_row_sum_error().max(per_head.max_row_sum_error());
    let sized = averaged.maps.iter().all(|m| m.values.len() == AUDIO_PREFIX_LEN * AUDIO_PREFIX_LEN);

    let mut mlp = Config::desk();
    mlp.mapper.variant = MapperVariant::Mlp;
    let mlp_model = SpeakerLm::new(&mlp, s.tokenizer.clone(), s.speakers.clone(), DType::F32).unwrap();
    let mlp_rejected = mlp_model.mapper.attention_maps(emb, false).is_err();

    let ok = layers == (0..8).collect::<Vec<_>>()
        && per_head.maps.len() == 8 * loaded.config().mapper.heads
        && sized
        && row_err <= 1e-5
        && mlp_rejected;
    report(
        8,
        "attention maps",
        ok,
        &format!(
            "{} layer maps, max row-sum error {row_err:.1e}, mlp rejected {mlp_rejected}",
            averaged.maps.len()
        ),
    );
    assert!(ok);
}

fn caption(id: &str, speaker: &str, text: &str, duration_s: f64) -> Triplet {
    Triplet {
        utterance_id: id.into(),
        audio_path: format!("{id}.wav"),
        speaker_id: speaker.into(),
        prompt: "Describe the speaker.".into(),
        description: text.into(),
        attributes: BTreeMap::new(),
        duration_s,
    }
}

#[test]
fn criterion_9_corpus_statistics() {
    let _g = serial();
    if let Ok(path) = std::env::var(TEARS_ENV) {
        let stats = corpus_stats(&read_manifest(&path).unwrap()).unwrap();
        let ok = (stats.vocab, stats.median_len, stats.max_len, stats.samples, stats.speakers)
            == (2334, 51.0, 120, 26_126, 562);
        report(9, "corpus statistics", ok, &format!("train manifest {path}: {stats:?}"));
        assert!(ok);
        return;
    }
    // Four rows, two speakers. Lowercased whitespace tokens:
    //   "the speaker is male."          -> 4 tokens
    //   "A male voice, deep."           -> 4 tokens
    //   "The speaker is male and calm." -> 6 tokens
    //   "she sounds young"              -> 3 tokens
    // Distinct: the speaker is male. a male voice, deep. and calm. she
    //           sounds young = 13 ("male." and "male" differ).
    // Lengths 3,4,4,6: median 4, max 6.
    // Durations 2,4,4,6: mean 4, population std sqrt(2).
    let rows = vec![
        caption("u1", "s1", "the speaker is male.", 2.0),
        caption("u2", "s1", "A male voice, deep.", 4.0),
        caption("u3", "s1", "The speaker is male and calm.", 4.0),
        caption("u4", "s2", "she sounds young", 6.0),
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_manifest(&path, &rows).unwrap();
    let stats = corpus_stats(&read_manifest(&path).unwrap()).unwrap();
    let want = CorpusStats {
        vocab: 13,
        median_len: 4.0,
        max_len: 6,
        samples: 4,
        speakers: 2,
        avg_duration_s: 4.0,
        std_duration_s: 2f64.sqrt(),
    };
    let ok = stats == want;
    report(
        9,
        "corpus statistics",
        ok,
        &format!("{TEARS_ENV} unset, hand-counted corpus: {stats:?}"),
    );
    assert!(ok, "{stats:?} != {want:?}");
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let (a, b) = desk_runs();
    let log_a: Vec<String> = a.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let log_b: Vec<String> = b.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let ok = log_a == log_b && a.texts == b.texts;
    report(
        10,
        "determinism",
        ok,
        &format!(
            "{} metric lines, {} greedy texts, logs equal {}, texts equal {}",
            log_a.len(),
            a.texts.len(),
            log_a == log_b,
            a.texts == b.texts
        ),
    );
    assert!(ok);
}

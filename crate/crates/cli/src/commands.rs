use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nct_core::corpus::synth;
use nct_core::corpus::{
    build_vocab, ingest, load_embeddings, make_examples, read_records, split, write_records, EmbeddingTable,
    Example, ExampleRecord, Sentence, TextChunk, Vocab,
};
use nct_core::discriminator::{train_discriminator_with, DiscKind, DualEncoder};
use nct_core::generator::{continue_mle_with, dev_nll, Generator};
use nct_core::nct::{finetune_with, score_report, RlStep};
use nct_core::textmetrics::metrics_report;
use nct_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::runlog::RunLog;

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

fn model_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join("models").join(format!("{name}.ckpt"))
}

fn truncate(xs: &[Example], n: Option<usize>) -> &[Example] {
    &xs[..n.unwrap_or(xs.len()).min(xs.len())]
}

struct Data {
    vocab: Vocab,
    table: EmbeddingTable,
}

impl Data {
    fn load(cfg: &RunConfig) -> Result<Self, Error> {
        let vocab = Vocab::load(&data_dir(cfg).join("vocab.txt"))?;
        let table = load_embeddings(&cfg.embeddings_path(), &vocab, cfg.dim)?;
        Ok(Data { vocab, table })
    }

    fn split(&self, cfg: &RunConfig, name: &str) -> Result<Vec<Example>, Error> {
        let p = match name {
            "train" | "dev" | "test" => data_dir(cfg).join(format!("{name}.jsonl")),
            other => PathBuf::from(other),
        };
        self.file(&p)
    }

    fn file(&self, p: &Path) -> Result<Vec<Example>, Error> {
        Ok(read_records(p)?
            .iter()
            .map(|r| Example::encode(r, &self.vocab))
            .collect())
    }
}

pub fn synth_corpus(cfg: &mut RunConfig) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "synth-corpus")?;
    let dir = cfg.out_dir.join("synth");
    synth::write(&cfg.synth, &dir)?;
    log.record(&json!({"event": "synth", "reviews": cfg.synth.reviews, "dim": cfg.synth.dim}))?;
    log.summary_line(format!("wrote {} reviews to {}", cfg.synth.reviews, dir.display()));
    info!("synthetic corpus written to {}", dir.display());
    log.finish()
}

pub fn preprocess(cfg: &mut RunConfig) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "preprocess")?;
    let ing = ingest(&cfg.corpus_path(), cfg.format)?;
    let (train, dev, test) = split(&ing.reviews, cfg.split, cfg.seed)?;
    let vocab = build_vocab(&train)?;
    let table = load_embeddings(&cfg.embeddings_path(), &vocab, cfg.dim)?;
    let dir = data_dir(cfg);
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    vocab.save(&dir.join("vocab.txt"))?;
    for (name, part) in [("train", &train), ("dev", &dev), ("test", &test)] {
        write_records(&dir.join(format!("{name}.jsonl")), &make_examples(part))?;
    }
    let stats = json!({
        "event": "preprocess",
        "ingest": ing.stats,
        "train": train.len(),
        "dev": dev.len(),
        "test": test.len(),
        "vocab": vocab.len(),
        "embedding_coverage": table.coverage,
    });
    let p = dir.join("stats.json");
    fs::write(&p, serde_json::to_string_pretty(&stats)?).map_err(|e| io(&p, e))?;
    log.record(&stats)?;
    log.summary_line(format!(
        "retained {} of {} reviews; train {}, dev {}, test {}; vocab {}",
        ing.stats.retained,
        ing.stats.lines,
        train.len(),
        dev.len(),
        test.len(),
        vocab.len()
    ));
    log.finish()
}

pub fn train_disc(cfg: &mut RunConfig, kind: &str) -> Result<(), Error> {
    cfg.finalize()?;
    let kinds = match kind {
        "both" => vec![DiscKind::Coherence, DiscKind::Cohesion],
        k => vec![k.parse::<DiscKind>().map_err(|e| Error::Config {
            key: "kind".into(),
            detail: e.to_string(),
        })?],
    };
    let mut log = RunLog::create(cfg, "train-disc")?;
    let data = Data::load(cfg)?;
    let train = data.split(cfg, "train")?;
    let dev = data.split(cfg, "dev")?;
    for kind in kinds {
        let mut step = 0usize;
        let mut pending = Ok(());
        let report = train_discriminator_with(
            kind,
            cfg.encoder_spec(kind),
            &train,
            &dev,
            &data.table,
            &cfg.disc,
            &mut |loss| {
                step += 1;
                if pending.is_ok() {
                    pending = log.record(&json!({"event": "step", "model": kind.name(), "step": step, "loss": loss}));
                }
            },
        )?;
        pending?;
        for h in &report.history {
            log.record(&json!({"event": "epoch", "model": kind.name(), "stats": h}))?;
        }
        let p = model_path(cfg, kind.name());
        report.model.save(&p, &data.vocab.hash())?;
        log.summary_line(format!(
            "{}: best dev R@1 {:.4} at epoch {} -> {}",
            kind.name(),
            report.best_dev_r1,
            report.best_epoch,
            p.display()
        ));
    }
    log.finish()
}

pub fn train_gen(cfg: &mut RunConfig) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "train-gen")?;
    let data = Data::load(cfg)?;
    let train = data.split(cfg, "train")?;
    let dev = data.split(cfg, "dev")?;
    let model = Generator::new(cfg.generator_spec(data.vocab.len()), cfg.gen.seed)?;
    let mut step = 0usize;
    let mut pending = Ok(());
    let report = continue_mle_with(
        model,
        truncate(&train, cfg.gen_max_train),
        &dev,
        &data.table,
        &cfg.gen,
        &mut |nll| {
            step += 1;
            if pending.is_ok() {
                pending = log.record(&json!({"event": "step", "model": "generator", "step": step, "nll": nll}));
            }
        },
    )?;
    pending?;
    for h in &report.history {
        log.record(&json!({"event": "epoch", "model": "generator", "stats": h}))?;
    }
    let p = model_path(cfg, "generator");
    report.model.save(&p, &data.vocab.hash())?;
    log.summary_line(format!(
        "generator: best dev NLL {:.4} (PPL {:.4}) at epoch {} -> {}",
        report.best_dev_nll,
        report.best_dev_nll.exp(),
        report.best_epoch,
        p.display()
    ));
    log.finish()
}

pub fn finetune_rl(cfg: &mut RunConfig) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "finetune-rl")?;
    let data = Data::load(cfg)?;
    let hash = data.vocab.hash();
    let train = data.split(cfg, "train")?;
    let dev = data.split(cfg, "dev")?;
    let coherence = DualEncoder::load(&model_path(cfg, "coherence"), &hash)?;
    let cohesion = DualEncoder::load(&model_path(cfg, "cohesion"), &hash)?;
    let mut gen = Generator::<f32>::load(&model_path(cfg, "generator"), &hash)?;
    let mut step = 0usize;
    let mut pending = Ok(());
    let result = finetune_with(
        &mut gen,
        &coherence,
        &cohesion,
        truncate(&train, cfg.rl_max_train),
        &dev,
        &data.table,
        &data.vocab,
        &cfg.rl,
        &mut |s: RlStep| {
            step += 1;
            if pending.is_ok() {
                pending = log.record(&json!({"event": "step", "step": step, "update": s}));
            }
        },
    );
    let out = model_path(cfg, "generator_rl");
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            if e.is_numeric() {
                gen.save(&out, &hash)?;
                log.summary_line(format!("diverged: {e}; last good parameters saved to {}", out.display()));
                log.finish()?;
            }
            return Err(e);
        }
    };
    pending?;
    log.record(&json!({
        "epoch": 0,
        "mean_R_total": report.initial.r_total,
        "mean_R_coherence": report.initial.r_coherence,
        "mean_R_cohesion": report.initial.r_cohesion,
        "dev_ppl": report.initial.ppl,
    }))?;
    for h in &report.history {
        log.record(&json!({
            "epoch": h.epoch,
            "mean_R_total": h.mean_r_total,
            "mean_R_coherence": h.mean_r_coherence,
            "mean_R_cohesion": h.mean_r_cohesion,
            "dev_ppl": h.dev.ppl,
            "dev_R_total": h.dev.r_total,
            "degenerate": h.degenerate,
        }))?;
    }
    gen.save(&out, &hash)?;
    let last = report.history.last().map_or(&report.initial, |h| &h.dev);
    log.summary_line(format!(
        "dev R_total {:.4} -> {:.4}; dev PPL {:.4} -> {:.4}; saved {}",
        report.initial.r_total,
        last.r_total,
        report.initial.ppl,
        last.ppl,
        out.display()
    ));
    log.finish()
}

#[derive(Debug, Serialize, Deserialize)]
struct GenRecord {
    review_id: String,
    generated: Vec<Vec<String>>,
}

fn default_generator(cfg: &RunConfig) -> PathBuf {
    let rl = model_path(cfg, "generator_rl");
    if rl.exists() {
        rl
    } else {
        model_path(cfg, "generator")
    }
}

fn split_label(split: &str) -> String {
    Path::new(split)
        .file_stem()
        .map_or_else(|| split.to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn generate(cfg: &mut RunConfig, model: Option<PathBuf>, split: &str, output: Option<PathBuf>) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "generate")?;
    let data = Data::load(cfg)?;
    let model = model.unwrap_or_else(|| default_generator(cfg));
    let gen = Generator::<f32>::load(&model, &data.vocab.hash())?;
    let examples = data.split(cfg, split)?;
    let out = output.unwrap_or_else(|| {
        cfg.out_dir
            .join("generations")
            .join(format!("{}.jsonl", split_label(split)))
    });
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| io(d, e))?;
    }
    let mut text = String::new();
    let mut empty = 0;
    for e in &examples {
        let d = gen.greedy_decode(&data.table, &data.vocab, &e.source, cfg.limits())?;
        empty += d.chunk.is_empty() as usize;
        let r = GenRecord {
            review_id: e.review_id.clone(),
            generated: d.chunk.words(),
        };
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    fs::write(&out, text).map_err(|e| io(&out, e))?;
    log.record(&json!({"event": "generate", "model": model, "examples": examples.len(), "empty": empty}))?;
    log.summary_line(format!("{} generations written to {}", examples.len(), out.display()));
    log.finish()
}

fn read_generations(p: &Path) -> Result<HashMap<String, Vec<Vec<String>>>, Error> {
    let text = fs::read_to_string(p).map_err(|e| io(p, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: GenRecord = serde_json::from_str(line).map_err(|e| Error::Data {
            path: p.into(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.insert(r.review_id, r.generated);
    }
    Ok(out)
}

pub fn eval(cfg: &mut RunConfig, generations: Option<PathBuf>, model: Option<PathBuf>, split: &str) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "eval")?;
    let data = Data::load(cfg)?;
    let examples = data.split(cfg, split)?;
    let gp = generations.unwrap_or_else(|| {
        cfg.out_dir
            .join("generations")
            .join(format!("{}.jsonl", split_label(split)))
    });
    let gens = read_generations(&gp)?;
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for e in &examples {
        let g = gens.get(&e.review_id).ok_or_else(|| Error::Data {
            path: gp.clone(),
            detail: format!("no generation for review `{}`", e.review_id),
        })?;
        hyps.push(g.concat());
        refs.push(e.target.words().concat());
    }
    let model = model.unwrap_or_else(|| default_generator(cfg));
    let gen = Generator::<f32>::load(&model, &data.vocab.hash())?;
    let nll = dev_nll(&gen, &data.table, &examples)?;
    let report = metrics_report(&hyps, &refs, nll)?;
    let p = cfg.out_dir.join("runs").join("eval").join("metrics.json");
    fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| io(&p, e))?;
    log.record(&report)?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{}", serde_json::to_string(&report)?);
    let _ = write!(stdout, "{}", report.table());
    log.summary_line(report.table());
    log.finish()
}

#[derive(Debug, Serialize)]
struct ScoreRecord {
    review_id: String,
    coherence: f64,
    cohesion_per_pair: Vec<f64>,
    cohesion_mean: f64,
}

fn table_rows(out: &mut String, e: &Example, target: &TextChunk, r: &nct_core::nct::ScoreReport) {
    let line = |s: &Sentence| s.surface.join(" ");
    out.push_str(&format!("review {}  coherence {:+.4}\n", e.review_id, r.coherence));
    let all: Vec<(&str, &Sentence)> = e
        .source
        .sentences
        .iter()
        .map(|s| ("S", s))
        .chain(target.sentences.iter().map(|s| ("T", s)))
        .collect();
    for (i, (side, s)) in all.iter().enumerate() {
        let c = r
            .cohesion_per_pair
            .get(i)
            .map_or_else(|| "   -   ".to_string(), |v| format!("{v:+.4}"));
        out.push_str(&format!("  {side} {c}  {}\n", line(s)));
    }
}

pub fn score(
    cfg: &mut RunConfig,
    input: Option<PathBuf>,
    generations: Option<PathBuf>,
    output: Option<PathBuf>,
    table: bool,
) -> Result<(), Error> {
    cfg.finalize()?;
    let mut log = RunLog::create(cfg, "score")?;
    let data = Data::load(cfg)?;
    let hash = data.vocab.hash();
    let coherence = DualEncoder::load(&model_path(cfg, "coherence"), &hash)?;
    let cohesion = DualEncoder::load(&model_path(cfg, "cohesion"), &hash)?;
    let input = input.unwrap_or_else(|| data_dir(cfg).join("test.jsonl"));
    let examples = data.file(&input)?;
    let gens = generations.as_deref().map(read_generations).transpose()?;
    let out = output.unwrap_or_else(|| cfg.out_dir.join("runs").join("score").join("scores.jsonl"));
    let mut text = String::new();
    let mut layout = String::new();
    for e in &examples {
        let target = match &gens {
            Some(g) => match g.get(&e.review_id) {
                Some(words) => {
                    let rec = ExampleRecord {
                        review_id: e.review_id.clone(),
                        source: Vec::new(),
                        target: words.clone(),
                    };
                    Example::encode(&rec, &data.vocab).target
                }
                None => {
                    warn!("no generation for review `{}`; skipped", e.review_id);
                    continue;
                }
            },
            None => e.target.clone(),
        };
        if target.is_empty() {
            warn!("empty continuation for review `{}`; skipped", e.review_id);
            continue;
        }
        let r = score_report(&coherence, &cohesion, &data.table, &e.source, &target)?;
        if table {
            table_rows(&mut layout, e, &target, &r);
        }
        let rec = ScoreRecord {
            review_id: e.review_id.clone(),
            coherence: r.coherence,
            cohesion_mean: r.cohesion_mean,
            cohesion_per_pair: r.cohesion_per_pair,
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| io(d, e))?;
    }
    fs::write(&out, &text).map_err(|e| io(&out, e))?;
    if table {
        print!("{layout}");
    }
    log.record(&json!({"event": "score", "input": input, "records": text.lines().count()}))?;
    log.summary_line(format!("{} score records written to {}", text.lines().count(), out.display()));
    log.finish()
}

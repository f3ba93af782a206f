//! Synthetic topic-keyed review corpus with a matching clustered embedding
//! file, used for desk-scale training runs.
//!
//! Every review fixes a latent topic, sentiment and location. Sentence `k`
//! opens with the pronoun of the entity that closed sentence `k - 1` and
//! carries a position marker, so both paragraph-level and adjacent-sentence
//! structure are recoverable from the text.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::embedding::parse_embeddings;
use super::ingest::ingest_str;
use super::{
    build_vocab, make_examples, split, CorpusFormat, EmbeddingTable, Example, IngestStats, RawReview,
    SplitRatios, Vocab,
};
use crate::error::{Error, Result};

const PRONOUNS: [(&str, &str); 4] = [("he", "is"), ("she", "is"), ("it", "is"), ("they", "are")];

const ENTITIES: [[&str; 6]; 4] = [
    ["manager", "waiter", "chef", "porter", "driver", "owner"],
    ["receptionist", "hostess", "maid", "concierge", "waitress", "guide"],
    ["room", "pool", "bar", "lobby", "breakfast", "view"],
    ["staff", "beds", "towels", "neighbors", "prices", "stairs"],
];

const POSITIVE: [&str; 8] = [
    "great", "lovely", "friendly", "clean", "superb", "pleasant", "excellent", "charming",
];
const NEGATIVE: [&str; 8] = [
    "awful", "rude", "dirty", "noisy", "terrible", "sloppy", "dreadful", "shabby",
];

const MARKERS: [[&str; 2]; 10] = [
    ["initially", "originally"],
    ["secondly", "next"],
    ["thirdly", "afterwards"],
    ["then", "later"],
    ["meanwhile", "simultaneously"],
    ["moreover", "besides"],
    ["furthermore", "additionally"],
    ["still", "again"],
    ["eventually", "lastly"],
    ["overall", "anyway"],
];

const GENERIC: [&str; 12] = [
    "really", "very", "also", "quite", "there", "truly", "somewhat", "always", "just", "rather",
    "mostly", "certainly",
];

const TOPIC_WORDS: usize = 12;
const LOCATION_WORDS: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub reviews: usize,
    pub topics: usize,
    pub locations: usize,
    pub dim: usize,
    pub seed: u64,
    /// Probability that a content filler is drawn from a random other topic.
    pub noise: f64,
    /// Fraction of reviews deliberately made invalid for the ingest filter.
    pub invalid_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            reviews: 2500,
            topics: 20,
            locations: 12,
            dim: 64,
            seed: 17,
            noise: 0.15,
            invalid_fraction: 0.03,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SynthReview {
    pub id: String,
    pub text: String,
}

fn topic_word(t: usize, i: usize) -> String {
    format!("{}{}", TOPIC_STEMS[t % TOPIC_STEMS.len()], suffix(t / TOPIC_STEMS.len(), i))
}

const TOPIC_STEMS: [&str; 10] = [
    "spa", "golf", "surf", "wine", "ski", "jazz", "hike", "sushi", "opera", "yacht",
];

fn suffix(block: usize, i: usize) -> String {
    const SUF: [&str; 12] = [
        "ara", "eno", "ilo", "ova", "umi", "ade", "ette", "orn", "ix", "ary", "ling", "ess",
    ];
    if block == 0 {
        SUF[i % SUF.len()].to_string()
    } else {
        format!("{}{block}", SUF[i % SUF.len()])
    }
}

fn location_word(l: usize, i: usize) -> String {
    const LOC: [&str; 8] = [
        "harbor", "midtown", "oldtown", "riverside", "uptown", "airport", "beach", "hills",
    ];
    let block = if l >= LOC.len() { (l / LOC.len()).to_string() } else { String::new() };
    format!("{}{}{block}", LOC[l % LOC.len()], ["", "side", "gate", "park"][i % 4])
}

struct Latent {
    topic: usize,
    positive: bool,
    location: usize,
}

fn content_word(rng: &mut ChaCha8Rng, cfg: &SynthConfig, lat: &Latent) -> String {
    let u: f64 = rng.random();
    if u < 0.6 {
        let t = if rng.random::<f64>() < cfg.noise {
            rng.random_range(0..cfg.topics)
        } else {
            lat.topic
        };
        topic_word(t, rng.random_range(0..TOPIC_WORDS))
    } else if u < 0.8 {
        location_word(lat.location, rng.random_range(0..LOCATION_WORDS))
    } else {
        GENERIC.choose(rng).unwrap().to_string()
    }
}

fn adjective(rng: &mut ChaCha8Rng, cfg: &SynthConfig, lat: &Latent) -> &'static str {
    let pos = lat.positive ^ (rng.random::<f64>() < cfg.noise / 2.0);
    *if pos { &POSITIVE } else { &NEGATIVE }.choose(rng).unwrap()
}

fn sentence(rng: &mut ChaCha8Rng, cfg: &SynthConfig, lat: &Latent, k: usize, prev: Option<(usize, usize)>, next: (usize, usize), fillers: usize) -> Vec<String> {
    let mut w: Vec<String> = Vec::new();
    match prev {
        None => {
            w.extend(["we", "stayed", "at", "the"].map(String::from));
            w.push(location_word(lat.location, rng.random_range(0..LOCATION_WORDS)));
        }
        Some((class, _)) => {
            let (p, be) = PRONOUNS[class];
            w.push(p.into());
            w.push(be.into());
            w.push(adjective(rng, cfg, lat).into());
            w.push(",".into());
        }
    }
    w.push(MARKERS[k.min(MARKERS.len() - 1)][rng.random_range(0..2)].into());
    for _ in 0..fillers {
        w.push(content_word(rng, cfg, lat));
    }
    if prev.is_none() {
        w.push(adjective(rng, cfg, lat).into());
    }
    w.push("near".into());
    w.push("the".into());
    w.push(ENTITIES[next.0][next.1].into());
    w.push(".".into());
    w
}

fn review(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> String {
    let lat = Latent {
        topic: rng.random_range(0..cfg.topics),
        positive: rng.random(),
        location: rng.random_range(0..cfg.locations),
    };
    let invalid = rng.random::<f64>() < cfg.invalid_fraction;
    let short = invalid && rng.random();
    let n = if short { rng.random_range(8..10) } else { rng.random_range(10..14) };
    let long_at = (invalid && !short).then(|| rng.random_range(0..n));
    let mut prev = None;
    let mut out = Vec::new();
    for k in 0..n {
        let next = (rng.random_range(0..4), rng.random_range(0..6));
        let fillers = if long_at == Some(k) { 28 } else { rng.random_range(2..5) };
        out.push(sentence(rng, cfg, &lat, k, prev, next, fillers).join(" "));
        prev = Some(next);
    }
    out.join(" ")
}

/// Generate the raw corpus. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthReview>> {
    if cfg.topics == 0 || cfg.topics > 10 * TOPIC_WORDS || cfg.locations == 0 {
        return Err(Error::Config {
            key: "synth".into(),
            detail: "topics must be in 1..=120 and locations positive".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.reviews)
        .map(|i| SynthReview {
            id: format!("syn{i:05}"),
            text: review(&mut rng, cfg),
        })
        .collect())
}

/// All word groups that share an embedding cluster.
fn groups(cfg: &SynthConfig) -> Vec<Vec<String>> {
    let mut g: Vec<Vec<String>> = Vec::new();
    for t in 0..cfg.topics {
        g.push((0..TOPIC_WORDS).map(|i| topic_word(t, i)).collect());
    }
    for l in 0..cfg.locations {
        g.push((0..LOCATION_WORDS).map(|i| location_word(l, i)).collect());
    }
    g.push(POSITIVE.map(String::from).to_vec());
    g.push(NEGATIVE.map(String::from).to_vec());
    for m in MARKERS {
        g.push(m.map(String::from).to_vec());
    }
    for (c, (p, _)) in PRONOUNS.iter().enumerate() {
        let mut v = vec![p.to_string()];
        v.extend(ENTITIES[c].map(String::from));
        g.push(v);
    }
    g.push(GENERIC.map(String::from).to_vec());
    for w in ["we", "stayed", "at", "the", "near", "is", "are", ",", "."] {
        g.push(vec![w.to_string()]);
    }
    g
}

/// Word vectors as cluster centroid plus isotropic noise, in the plain text
/// embedding format.
pub fn embeddings(cfg: &SynthConfig) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe4b_ed);
    let centroid = Normal::new(0.0f64, 1.0).unwrap();
    let jitter = Normal::new(0.0f64, 0.35).unwrap();
    let mut out = String::new();
    for group in groups(cfg) {
        let c: Vec<f64> = (0..cfg.dim).map(|_| centroid.sample(&mut rng)).collect();
        for w in group {
            out.push_str(&w);
            for &x in &c {
                out.push_str(&format!(" {:.5}", x + jitter.sample(&mut rng)));
            }
            out.push('\n');
        }
    }
    out
}

/// Write `corpus.jsonl` and `embeddings.txt` into `dir`.
pub fn write(cfg: &SynthConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut corpus = String::new();
    for r in generate(cfg)? {
        corpus.push_str(&serde_json::to_string(&r)?);
        corpus.push('\n');
    }
    let p = dir.join("corpus.jsonl");
    fs::write(&p, corpus).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("embeddings.txt");
    fs::write(&p, embeddings(cfg)).map_err(|e| Error::io(&p, e))
}

/// A ready-to-train synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub vocab: Vocab,
    pub table: EmbeddingTable,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub stats: IngestStats,
}

/// Generate, filter, split and encode a synthetic corpus in memory, going
/// through the same steps as the file-based pipeline.
pub fn build(cfg: &SynthConfig, split_seed: u64) -> Result<SynthData> {
    let text: String = generate(cfg)?
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<std::result::Result<_, _>>()?;
    let ingested = ingest_str(&text, CorpusFormat::Jsonl);
    let (train, dev, test) = split(&ingested.reviews, SplitRatios::default(), split_seed)?;
    let vocab = build_vocab(&train)?;
    let table = parse_embeddings(&embeddings(cfg), &vocab, cfg.dim)?;
    let encode = |rs: &[RawReview]| -> Vec<Example> {
        make_examples(rs).iter().map(|r| Example::encode(r, &vocab)).collect()
    };
    Ok(SynthData {
        train: encode(&train),
        dev: encode(&dev),
        test: encode(&test),
        vocab: vocab.clone(),
        table,
        stats: ingested.stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> SynthConfig {
        SynthConfig {
            reviews: 300,
            ..Default::default()
        }
    }

    fn jsonl(cfg: &SynthConfig) -> String {
        generate(cfg)
            .unwrap()
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    }

    #[test]
    fn most_reviews_pass_the_filters() {
        let out = ingest_str(&jsonl(&small()), CorpusFormat::Jsonl);
        assert_eq!(out.stats.malformed, 0);
        assert!(out.stats.retained >= 270, "{:?}", out.stats);
        assert!(out.stats.too_few_sentences + out.stats.bad_sentence_length >= 1);
    }

    #[test]
    fn pronoun_follows_previous_entity() {
        let out = ingest_str(&jsonl(&small()), CorpusFormat::Jsonl);
        for r in &out.reviews {
            for w in r.sentences.windows(2) {
                let entity = &w[0][w[0].len() - 2];
                let class = ENTITIES.iter().position(|c| c.contains(&entity.as_str())).unwrap();
                assert_eq!(w[1][0], PRONOUNS[class].0);
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&small()).unwrap();
        assert_eq!(a, generate(&small()).unwrap());
        let b = generate(&SynthConfig { seed: 99, ..small() }).unwrap();
        assert_ne!(a, b);
        assert_eq!(embeddings(&small()), embeddings(&small()));
    }

    #[test]
    fn embedding_file_covers_the_vocabulary() {
        let cfg = small();
        let out = ingest_str(&jsonl(&cfg), CorpusFormat::Jsonl);
        let vocab: Vocab = build_vocab(&out.reviews).unwrap();
        let table = crate::corpus::embedding::parse_embeddings(&embeddings(&cfg), &vocab, cfg.dim).unwrap();
        assert_eq!(table.coverage, 1.0);
        let words: HashSet<String> = groups(&cfg).into_iter().flatten().collect();
        assert_eq!(words.len(), groups(&cfg).iter().map(Vec::len).sum::<usize>());
    }
}

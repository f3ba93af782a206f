//! Run configuration: a flat `key = value` file with dotted section keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nct_core::corpus::synth::SynthConfig;
use nct_core::corpus::{CorpusFormat, SplitRatios};
use nct_core::discriminator::{DiscKind, DiscTrainConfig, EncoderKind, EncoderSpec};
use nct_core::generator::{DecodeLimits, GenTrainConfig, GeneratorSpec};
use nct_core::nct::{MixRule, RlConfig};
use nct_core::Error;

pub const OUT_DIR_ENV: &str = "NCT_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "nct-run";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: String,
    pub out_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub format: CorpusFormat,
    pub embeddings: Option<PathBuf>,
    pub dim: usize,
    pub split: SplitRatios,
    pub synth: SynthConfig,
    pub disc_encoder: EncoderKind,
    pub disc_filters: usize,
    pub disc_hidden: usize,
    pub disc_out_dim: usize,
    pub disc: DiscTrainConfig,
    pub gen_hidden: usize,
    pub gen_attention: usize,
    pub gen: GenTrainConfig,
    pub gen_max_train: Option<usize>,
    pub rl: RlConfig,
    pub rl_max_train: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out_dir = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        RunConfig {
            seed: 0,
            precision: "f32".into(),
            out_dir,
            corpus: None,
            format: CorpusFormat::Jsonl,
            embeddings: None,
            dim: 64,
            split: SplitRatios::default(),
            synth: SynthConfig::default(),
            disc_encoder: EncoderKind::Conv,
            disc_filters: 128,
            disc_hidden: 128,
            disc_out_dim: 128,
            disc: DiscTrainConfig {
                lr: 1e-3,
                epochs: 3,
                batch_size: 4,
                ..Default::default()
            },
            gen_hidden: 64,
            gen_attention: 64,
            gen: GenTrainConfig {
                lr: 2e-3,
                epochs: 10,
                max_dev: Some(100),
                ..Default::default()
            },
            gen_max_train: Some(800),
            rl: RlConfig {
                lr: 1e-4,
                mle_lr: 1e-4,
                max_dev: Some(100),
                ..Default::default()
            },
            rl_max_train: Some(400),
        }
    }
}

fn bad(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        detail: detail.into(),
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, Error> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>, Error> {
    match v {
        "none" | "" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

fn show<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), T::to_string)
}

fn mix_name(m: MixRule) -> &'static str {
    match m {
        MixRule::Alternate => "alternate",
        MixRule::None => "none",
    }
}

fn encoder_name(k: EncoderKind) -> &'static str {
    match k {
        EncoderKind::Conv => "conv",
        EncoderKind::Recurrent => "gru",
    }
}

impl RunConfig {
    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), Error> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = v.into(),
            "paths.out" => self.out_dir = v.into(),
            "paths.corpus" => self.corpus = opt::<String>(key, v)?.map(PathBuf::from),
            "paths.format" => self.format = v.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "paths.embeddings" => self.embeddings = opt::<String>(key, v)?.map(PathBuf::from),
            "data.dim" => self.dim = parse(key, v)?,
            "split.train" => self.split.train = parse(key, v)?,
            "split.dev" => self.split.dev = parse(key, v)?,
            "split.test" => self.split.test = parse(key, v)?,
            "synth.reviews" => self.synth.reviews = parse(key, v)?,
            "synth.topics" => self.synth.topics = parse(key, v)?,
            "synth.locations" => self.synth.locations = parse(key, v)?,
            "synth.noise" => self.synth.noise = parse(key, v)?,
            "synth.invalid_fraction" => self.synth.invalid_fraction = parse(key, v)?,
            "disc.encoder" => {
                self.disc_encoder = match v {
                    "conv" | "cnn" => EncoderKind::Conv,
                    "gru" | "recurrent" | "rnn" => EncoderKind::Recurrent,
                    _ => return Err(bad(key, format!("unknown encoder `{v}` (conv or gru)"))),
                }
            }
            "disc.filters" => self.disc_filters = parse(key, v)?,
            "disc.hidden" => self.disc_hidden = parse(key, v)?,
            "disc.out_dim" => self.disc_out_dim = parse(key, v)?,
            "disc.lambda" => self.disc.lambda = parse(key, v)?,
            "disc.delta" => self.disc.delta = parse(key, v)?,
            "disc.lr" => self.disc.lr = parse(key, v)?,
            "disc.epochs" => self.disc.epochs = parse(key, v)?,
            "disc.batch_size" => self.disc.batch_size = parse(key, v)?,
            "disc.clip" => self.disc.clip = opt(key, v)?,
            "recall.candidates" => self.disc.eval.n_candidates = parse(key, v)?,
            "recall.trials" => self.disc.eval.trials = parse(key, v)?,
            "recall.max_queries" => self.disc.eval.max_queries = opt(key, v)?,
            "gen.hidden" => self.gen_hidden = parse(key, v)?,
            "gen.attention" => self.gen_attention = parse(key, v)?,
            "gen.lr" => self.gen.lr = parse(key, v)?,
            "gen.clip" => self.gen.clip = parse(key, v)?,
            "gen.epochs" => self.gen.epochs = parse(key, v)?,
            "gen.batch_size" => self.gen.batch_size = parse(key, v)?,
            "gen.max_dev" => self.gen.max_dev = opt(key, v)?,
            "gen.max_train" => self.gen_max_train = opt(key, v)?,
            "rl.gamma" => self.rl.gamma = parse(key, v)?,
            "rl.lr" => self.rl.lr = parse(key, v)?,
            "rl.mle_lr" => self.rl.mle_lr = parse(key, v)?,
            "rl.clip" => self.rl.clip = parse(key, v)?,
            "rl.epochs" => self.rl.epochs = parse(key, v)?,
            "rl.batch_size" => self.rl.batch_size = parse(key, v)?,
            "rl.w_coherence" => self.rl.weights.coherence = parse(key, v)?,
            "rl.w_cohesion" => self.rl.weights.cohesion = parse(key, v)?,
            "rl.mix" => {
                self.rl.mix = match v {
                    "alternate" => MixRule::Alternate,
                    "none" => MixRule::None,
                    _ => return Err(bad(key, format!("unknown mixing rule `{v}` (alternate or none)"))),
                }
            }
            "rl.max_dev" => self.rl.max_dev = opt(key, v)?,
            "rl.max_train" => self.rl_max_train = opt(key, v)?,
            "decode.max_sentences" => self.rl.limits.max_sentences = parse(key, v)?,
            "decode.max_tokens_per_sentence" => self.rl.limits.max_tokens_per_sentence = parse(key, v)?,
            "decode.max_total_tokens" => self.rl.limits.max_total_tokens = parse(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply a `key=value` override given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), Error> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| bad(pair, "expected key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(&mut self, text: &str) -> Result<(), Error> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut c = RunConfig::default();
        c.parse_text(&text)?;
        Ok(c)
    }

    /// The resolved configuration in the same format `parse_text` reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("precision", self.precision.clone());
        kv("paths.out", self.out_dir.display().to_string());
        kv("paths.corpus", show(&self.corpus.as_ref().map(|p| p.display())));
        kv("paths.format", format!("{:?}", self.format).to_lowercase());
        kv("paths.embeddings", show(&self.embeddings.as_ref().map(|p| p.display())));
        kv("data.dim", self.dim.to_string());
        kv("split.train", self.split.train.to_string());
        kv("split.dev", self.split.dev.to_string());
        kv("split.test", self.split.test.to_string());
        kv("synth.reviews", self.synth.reviews.to_string());
        kv("synth.topics", self.synth.topics.to_string());
        kv("synth.locations", self.synth.locations.to_string());
        kv("synth.noise", self.synth.noise.to_string());
        kv("synth.invalid_fraction", self.synth.invalid_fraction.to_string());
        kv("disc.encoder", encoder_name(self.disc_encoder).into());
        kv("disc.filters", self.disc_filters.to_string());
        kv("disc.hidden", self.disc_hidden.to_string());
        kv("disc.out_dim", self.disc_out_dim.to_string());
        kv("disc.lambda", self.disc.lambda.to_string());
        kv("disc.delta", self.disc.delta.to_string());
        kv("disc.lr", self.disc.lr.to_string());
        kv("disc.epochs", self.disc.epochs.to_string());
        kv("disc.batch_size", self.disc.batch_size.to_string());
        kv("disc.clip", show(&self.disc.clip));
        kv("recall.candidates", self.disc.eval.n_candidates.to_string());
        kv("recall.trials", self.disc.eval.trials.to_string());
        kv("recall.max_queries", show(&self.disc.eval.max_queries));
        kv("gen.hidden", self.gen_hidden.to_string());
        kv("gen.attention", self.gen_attention.to_string());
        kv("gen.lr", self.gen.lr.to_string());
        kv("gen.clip", self.gen.clip.to_string());
        kv("gen.epochs", self.gen.epochs.to_string());
        kv("gen.batch_size", self.gen.batch_size.to_string());
        kv("gen.max_dev", show(&self.gen.max_dev));
        kv("gen.max_train", show(&self.gen_max_train));
        kv("rl.gamma", self.rl.gamma.to_string());
        kv("rl.lr", self.rl.lr.to_string());
        kv("rl.mle_lr", self.rl.mle_lr.to_string());
        kv("rl.clip", self.rl.clip.to_string());
        kv("rl.epochs", self.rl.epochs.to_string());
        kv("rl.batch_size", self.rl.batch_size.to_string());
        kv("rl.w_coherence", self.rl.weights.coherence.to_string());
        kv("rl.w_cohesion", self.rl.weights.cohesion.to_string());
        kv("rl.mix", mix_name(self.rl.mix).into());
        kv("rl.max_dev", show(&self.rl.max_dev));
        kv("rl.max_train", show(&self.rl_max_train));
        kv("decode.max_sentences", self.rl.limits.max_sentences.to_string());
        kv(
            "decode.max_tokens_per_sentence",
            self.rl.limits.max_tokens_per_sentence.to_string(),
        );
        kv("decode.max_total_tokens", self.rl.limits.max_total_tokens.to_string());
        s
    }

    /// Check cross-field constraints and push the global seed into every
    /// module config.
    pub fn finalize(&mut self) -> Result<(), Error> {
        if self.precision != "f32" {
            return Err(bad("precision", "training runs in f32 only"));
        }
        if self.dim == 0 {
            return Err(bad("data.dim", "must be positive"));
        }
        let r = &self.split;
        if r.train <= 0.0 || r.dev <= 0.0 || r.test <= 0.0 || (r.train + r.dev + r.test - 1.0).abs() > 1e-9 {
            return Err(bad("split", "ratios must be positive and sum to 1"));
        }
        self.synth.dim = self.dim;
        self.synth.seed = self.seed;
        self.disc.seed = self.seed;
        self.disc.eval.seed = self.seed;
        self.gen.seed = self.seed;
        self.rl.seed = self.seed;
        self.rl.eval_seed = self.seed ^ 0x7;
        self.disc.validate().map_err(|e| bad("disc", e.to_string()))?;
        self.rl.validate().map_err(|e| match e {
            Error::Config { .. } => e,
            other => bad("rl", other.to_string()),
        })?;
        Ok(())
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus
            .clone()
            .unwrap_or_else(|| self.out_dir.join("synth").join("corpus.jsonl"))
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.embeddings
            .clone()
            .unwrap_or_else(|| self.out_dir.join("synth").join("embeddings.txt"))
    }

    pub fn encoder_spec(&self, kind: DiscKind) -> EncoderSpec {
        match self.disc_encoder {
            EncoderKind::Conv => EncoderSpec::conv(kind.default_widths(), self.disc_filters, self.disc_out_dim),
            EncoderKind::Recurrent => EncoderSpec::recurrent(self.disc_hidden, self.disc_out_dim),
        }
    }

    pub fn generator_spec(&self, vocab: usize) -> GeneratorSpec {
        GeneratorSpec::new(vocab, self.dim, self.gen_hidden, self.gen_attention)
    }

    pub fn limits(&self) -> &DecodeLimits {
        &self.rl.limits
    }
}

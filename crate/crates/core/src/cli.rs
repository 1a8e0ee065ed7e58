//! `nlekit` command-line front end.
//!
//! Subcommands stream their input one document at a time and write a
//! `<out>.manifest.json` next to every output describing the run.
//! Exit codes: `0` success, `1` data error, `2` usage error.

use std::collections::{BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::align::{align, AlignError, TokenNleLabels, TokenizedDoc};
use crate::detector::{refang, NleDetector};
use crate::masking::{
    emit_training_record, plan, plan_rewritten, rewrite_replace_all, ActionSplit, PlanError, Strategy,
    StrategyConfig, ROBERTA_MASK_ID, ROBERTA_SPECIAL_IDS, ROBERTA_VOCAB_SIZE,
};
use crate::probing::{
    build_target_list, normalize_vocab_surface, probe_document, score_predictions, ProbeError, ProbeInstance,
    DEFAULT_MIN_TOKEN_ID,
};
use crate::records::{read_records, DocReader, InputDoc, InputFormat, RecordError, RecordWriter, FORMAT_VERSION};
use crate::stats::{StatsAccumulator, StatsError};

pub const SEED_ENV: &str = "NLEKIT_SEED";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Data(_) => "data",
            CliError::Io { .. } => "io",
        }
    }
}

macro_rules! data_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_error_from!(RecordError, PlanError, AlignError, ProbeError, StatsError);

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "nlekit", version, about = "NLE detection, alignment and masking plans for cybersecurity text")]
struct Cli {
    /// Record format version that input files must carry.
    #[arg(long, global = true, default_value_t = FORMAT_VERSION)]
    format_version: u32,
    /// Worker threads; output order always follows input order.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Manifest path (default: `<out>.manifest.json`).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Detect NLE spans; records with `tokens` also get `nle_labels`.
    Detect(IoArgs),
    /// Rewrite defanged notation to canonical form.
    Refang(IoArgs),
    /// NLE frequency per million words.
    Stats(StatsArgs),
    /// Masking plans and training records for one strategy.
    Plan(PlanArgs),
    /// Build probing instances for target terminology tokens.
    ProbeBuild(ProbeBuildArgs),
    /// Score a prediction file against probing instances.
    ProbeScore(ProbeScoreArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Detect(_) => "detect",
            Command::Refang(_) => "refang",
            Command::Stats(_) => "stats",
            Command::Plan(_) => "plan",
            Command::ProbeBuild(_) => "probe-build",
            Command::ProbeScore(_) => "probe-score",
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct IoArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    input_format: InputFormat,
}

#[derive(Debug, Args, Serialize)]
struct StatsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = InputFormat::Auto)]
    input_format: InputFormat,
    /// Corpus name in the report (default: input file stem).
    #[arg(long)]
    corpus_id: Option<String>,
}

#[derive(Debug, Args, Serialize)]
struct PlanArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.15)]
    mask_prob: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.8)]
    mask_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    random_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    keep_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    nlec_loss_scale: f64,
    #[arg(long, default_value_t = ROBERTA_VOCAB_SIZE)]
    vocab_size: u32,
    #[arg(long, default_value_t = ROBERTA_MASK_ID)]
    mask_token_id: u32,
    /// Comma-separated special token ids (must include the mask token).
    #[arg(long, value_delimiter = ',', default_values_t = ROBERTA_SPECIAL_IDS)]
    special_ids: Vec<u32>,
}

#[derive(Debug, Args, Serialize)]
struct ProbeBuildArgs {
    /// One phrase per line.
    #[arg(long)]
    phrases: PathBuf,
    /// JSON object mapping token surface to id (a leading `Ġ` means space).
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_TOKEN_ID)]
    min_id: u32,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Also write the target token list here.
    #[arg(long)]
    targets_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ProbeScoreArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    preds: PathBuf,
    #[arg(long = "out")]
    output: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: PlanError| e.to_string())
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub token_position: usize,
    pub predicted_token_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub format_version: u32,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let mut f = File::open(path).map_err(io_err(path))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        h.update(&buf[..n]);
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes,
        sha256: hex::encode(h.finalize()),
    })
}

/// Parses `argv` (program name first) and runs the subcommand; returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, args) {
        Ok(()) => 0,
        Err(e) => {
            let err = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{err}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    if cli.format_version != FORMAT_VERSION {
        return Err(CliError::Usage(format!(
            "unsupported --format-version {}; this build reads and writes version {FORMAT_VERSION}",
            cli.format_version
        )));
    }
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    let ctx = Ctx {
        jobs: cli.jobs,
        format_version: cli.format_version,
        pool,
    };

    let (inputs, outputs, seed): (Vec<&Path>, Vec<&Path>, Option<u64>) = match &cli.command {
        Command::Detect(a) => {
            ctx.detect(a)?;
            (vec![&a.input], vec![&a.output], None)
        }
        Command::Refang(a) => {
            ctx.refang(a)?;
            (vec![&a.input], vec![&a.output], None)
        }
        Command::Stats(a) => {
            ctx.stats(a)?;
            (vec![&a.input], vec![&a.output], None)
        }
        Command::Plan(a) => {
            ctx.plan(a)?;
            (vec![&a.io.input], vec![&a.io.output], Some(a.seed))
        }
        Command::ProbeBuild(a) => {
            ctx.probe_build(a)?;
            let mut outs = vec![a.output.as_path()];
            outs.extend(a.targets_out.as_deref());
            (vec![&a.phrases, &a.vocab, &a.input], outs, None)
        }
        Command::ProbeScore(a) => {
            ctx.probe_score(a)?;
            (vec![&a.instances, &a.preds], a.output.iter().map(PathBuf::as_path).collect(), None)
        }
    };

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cli.command.name().to_string(),
        argv,
        config: serde_json::to_value(&cli).map_err(|e| CliError::Data(e.to_string()))?,
        format_version: cli.format_version,
        seed,
        inputs: inputs.into_iter().map(digest_file).collect::<Result<_, _>>()?,
        outputs: outputs.iter().copied().map(digest_file).collect::<Result<_, _>>()?,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    let manifest_path = cli
        .manifest
        .clone()
        .or_else(|| outputs.first().map(|o| manifest_path_for(o)));
    match manifest_path {
        Some(p) => std::fs::write(&p, manifest_json + "\n").map_err(io_err(&p))?,
        None => eprintln!("{}", serde_json::to_string(&manifest).unwrap_or_default()),
    }
    Ok(())
}

pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

struct Ctx {
    jobs: usize,
    format_version: u32,
    pool: rayon::ThreadPool,
}

fn open_in(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(io_err(path))
}

fn create_out(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn with_doc_context(doc: &InputDoc, e: impl Into<CliError>) -> CliError {
    match e.into() {
        CliError::Data(m) => CliError::Data(format!("record `{}` (line {}): {m}", doc.id, doc.line)),
        other => other,
    }
}

/// Labels from the record if present, otherwise detect + align.
fn labels_for(doc: &InputDoc, tdoc: &TokenizedDoc, detector: &NleDetector) -> Result<TokenNleLabels, CliError> {
    match &doc.nle_labels {
        Some(l) if l.len() == tdoc.len() => Ok(l.clone()),
        Some(l) => Err(CliError::Data(format!(
            "`nle_labels` has {} entries for {} tokens",
            l.len(),
            tdoc.len()
        ))),
        None => Ok(align(tdoc, &detector.detect(&tdoc.text))?),
    }
}

fn tokenized(doc: &InputDoc) -> Result<TokenizedDoc, CliError> {
    let tokens = doc
        .tokens
        .clone()
        .ok_or_else(|| CliError::Data("record has no `tokens`".into()))?;
    Ok(TokenizedDoc::new(doc.id.clone(), doc.text.clone(), tokens))
}

/// Record object with `id` first, followed by the remaining input fields.
fn base_object(doc: &InputDoc) -> Map<String, Value> {
    let mut obj = Map::new();
    obj.insert("id".into(), Value::from(doc.id.clone()));
    for (k, v) in &doc.raw {
        if k != "id" {
            obj.insert(k.clone(), v.clone());
        }
    }
    obj
}

impl Ctx {
    /// Maps every document through `f` in input order, `jobs` at a time, and
    /// hands results to `sink` in that same order.
    fn for_each_doc<R, T, F, S>(&self, reader: DocReader<R>, f: F, mut sink: S) -> Result<(), CliError>
    where
        R: BufRead,
        T: Send,
        F: Fn(&InputDoc) -> Result<T, CliError> + Sync,
        S: FnMut(T) -> Result<(), CliError>,
    {
        let apply = |doc: &InputDoc| f(doc).map_err(|e| with_doc_context(doc, e));
        if self.jobs == 1 {
            for doc in reader {
                sink(apply(&doc?)?)?;
            }
            return Ok(());
        }
        let chunk = self.jobs * 16;
        let mut reader = reader.peekable();
        while reader.peek().is_some() {
            let docs: Vec<InputDoc> = reader.by_ref().take(chunk).collect::<Result<_, _>>()?;
            let results: Vec<Result<T, CliError>> = self.pool.install(|| docs.par_iter().map(apply).collect());
            for r in results {
                sink(r?)?;
            }
        }
        Ok(())
    }

    fn reader(&self, path: &Path, format: InputFormat) -> Result<DocReader<BufReader<File>>, CliError> {
        Ok(DocReader::new(open_in(path)?, format, self.format_version))
    }

    fn detect(&self, a: &IoArgs) -> Result<(), CliError> {
        let detector = NleDetector::new();
        let mut w = RecordWriter::new(create_out(&a.output)?, "spans").map_err(io_err(&a.output))?;
        self.for_each_doc(
            self.reader(&a.input, a.input_format)?,
            |doc| {
                let spans = detector.detect(&doc.text);
                let mut obj = base_object(doc);
                if doc.tokens.is_some() {
                    let labels = align(&tokenized(doc)?, &spans)?;
                    obj.insert("nle_labels".into(), serde_json::to_value(&labels).expect("labels"));
                }
                obj.insert("spans".into(), serde_json::to_value(&spans).expect("spans"));
                Ok(Value::Object(obj))
            },
            |v| w.write(&v).map_err(io_err(&a.output)),
        )?;
        w.into_inner().map_err(io_err(&a.output))?;
        Ok(())
    }

    fn refang(&self, a: &IoArgs) -> Result<(), CliError> {
        let mut reader = self.reader(&a.input, a.input_format)?;
        let first = reader.next().transpose()?;
        let jsonl = reader.format() != InputFormat::Text;
        let out = create_out(&a.output)?;
        let mut w = if jsonl {
            RecordWriter::new(out, "refang").map_err(io_err(&a.output))?
        } else {
            RecordWriter::bare(out)
        };
        let convert = |doc: &InputDoc| -> Result<String, CliError> {
            let text = refang(&doc.text);
            if !jsonl {
                return Ok(text);
            }
            let mut obj = base_object(doc);
            // offsets no longer match the rewritten text
            for stale in ["tokens", "spans", "nle_labels"] {
                obj.shift_remove(stale);
            }
            obj.insert("text".into(), Value::from(text));
            Ok(Value::Object(obj).to_string())
        };
        if let Some(doc) = &first {
            w.write_line(&convert(doc)?).map_err(io_err(&a.output))?;
        }
        self.for_each_doc(reader, convert, |line| w.write_line(&line).map_err(io_err(&a.output)))?;
        w.into_inner().map_err(io_err(&a.output))?;
        Ok(())
    }

    fn stats(&self, a: &StatsArgs) -> Result<(), CliError> {
        let detector = NleDetector::new();
        let mut acc = StatsAccumulator::default();
        self.for_each_doc(
            self.reader(&a.input, a.input_format)?,
            |doc| {
                let mut one = StatsAccumulator::default();
                one.add_document(&detector, &doc.text);
                Ok(one)
            },
            |one| {
                acc = std::mem::take(&mut acc).merge(&one);
                Ok(())
            },
        )?;
        let corpus_id = a.corpus_id.clone().unwrap_or_else(|| {
            a.input
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        let report = acc.finish(&corpus_id)?;
        let mut w = RecordWriter::new(create_out(&a.output)?, "stats").map_err(io_err(&a.output))?;
        w.write(&report).map_err(io_err(&a.output))?;
        w.into_inner().map_err(io_err(&a.output))?;
        print!("{}", report.to_table());
        Ok(())
    }

    fn plan(&self, a: &PlanArgs) -> Result<(), CliError> {
        let cfg = StrategyConfig {
            strategy: a.strategy,
            mask_prob: a.mask_prob,
            action_split: ActionSplit {
                mask: a.mask_frac,
                random: a.random_frac,
                keep: a.keep_frac,
            },
            nlec_loss_scale: a.nlec_loss_scale,
            seed: a.seed,
            vocab_size: a.vocab_size,
            mask_token_id: a.mask_token_id,
            special_token_ids: a.special_ids.iter().copied().collect::<BTreeSet<u32>>(),
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let detector = NleDetector::new();
        let out = &a.io.output;
        let mut w = RecordWriter::new(create_out(out)?, "plan").map_err(io_err(out))?;
        self.for_each_doc(
            self.reader(&a.io.input, a.io.input_format)?,
            |doc| plan_one(doc, &cfg, &detector),
            |v| w.write(&v).map_err(io_err(out)),
        )?;
        w.into_inner().map_err(io_err(out))?;
        Ok(())
    }

    fn probe_build(&self, a: &ProbeBuildArgs) -> Result<(), CliError> {
        let phrases: Vec<String> = std::fs::read_to_string(&a.phrases)
            .map_err(io_err(&a.phrases))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let raw_vocab: HashMap<String, u32> = serde_json::from_reader(open_in(&a.vocab)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", a.vocab.display())))?;
        let vocab: HashMap<String, u32> = raw_vocab
            .into_iter()
            .map(|(k, v)| (normalize_vocab_surface(&k), v))
            .collect();
        let targets = build_target_list(&phrases, &vocab, a.min_id)?;
        let ids = targets.ids();
        if let Some(p) = &a.targets_out {
            let mut tw = RecordWriter::new(create_out(p)?, "probe-targets").map_err(io_err(p))?;
            tw.write(&targets).map_err(io_err(p))?;
            tw.into_inner().map_err(io_err(p))?;
        }
        let detector = NleDetector::new();
        let mut w = RecordWriter::new(create_out(&a.output)?, "probe-instances").map_err(io_err(&a.output))?;
        self.for_each_doc(
            self.reader(&a.input, InputFormat::Jsonl)?,
            |doc| {
                let tdoc = tokenized(doc)?;
                let labels = labels_for(doc, &tdoc, &detector)?;
                Ok(probe_document(&tdoc, &labels, &ids)?)
            },
            |insts| {
                insts
                    .iter()
                    .try_for_each(|i| w.write(i))
                    .map_err(io_err(&a.output))
            },
        )?;
        w.into_inner().map_err(io_err(&a.output))?;
        Ok(())
    }

    fn probe_score(&self, a: &ProbeScoreArgs) -> Result<(), CliError> {
        let instances: Vec<ProbeInstance> =
            read_records(open_in(&a.instances)?, self.format_version).collect::<Result<_, _>>()?;
        let mut preds: HashMap<(String, usize), u32> = HashMap::new();
        for p in read_records::<Prediction, _>(open_in(&a.preds)?, self.format_version) {
            let p = p?;
            let key = (p.doc_id.clone(), p.token_position);
            if preds.insert(key, p.predicted_token_id).is_some() {
                return Err(CliError::Data(format!(
                    "duplicate prediction for ({}, {})",
                    p.doc_id, p.token_position
                )));
            }
        }
        let score = score_predictions(&instances, &preds)?;
        let result = serde_json::json!({
            "accuracy_all": score.accuracy_all(),
            "accuracy_near_fnle": score.accuracy_near_fnle(),
            "correct_all": score.correct_all,
            "total_all": score.total_all,
            "correct_near_fnle": score.correct_near_fnle,
            "total_near_fnle": score.total_near_fnle,
        });
        println!("{result}");
        if let Some(p) = &a.output {
            let mut w = RecordWriter::new(create_out(p)?, "probe-score").map_err(io_err(p))?;
            w.write(&result).map_err(io_err(p))?;
            w.into_inner().map_err(io_err(p))?;
        }
        Ok(())
    }
}

fn plan_one(doc: &InputDoc, cfg: &StrategyConfig, detector: &NleDetector) -> Result<Value, CliError> {
    if cfg.strategy == Strategy::ReplaceAll {
        if doc.tokens.is_none() {
            // first stage: rewrite only, to be re-tokenized externally
            let spans = detector.detect(&doc.text);
            let (rewritten, map) = rewrite_replace_all(&doc.text, &spans)?;
            let mut obj = Map::new();
            obj.insert("id".into(), Value::from(doc.id.clone()));
            obj.insert("text".into(), Value::from(rewritten));
            obj.insert("original_text".into(), Value::from(doc.text.clone()));
            obj.insert("offset_map".into(), to_value(&map));
            obj.insert("spans".into(), to_value(&spans));
            return Ok(Value::Object(obj));
        }
        let tdoc = tokenized(doc)?;
        let leftover = detector.detect(&tdoc.text);
        if let Some(s) = leftover.first() {
            return Err(CliError::Data(format!(
                "replace-all expects tokens over rewritten text, but `{}` ({}) is still present; run plan without `tokens` first",
                &tdoc.text[s.start..s.end],
                s.nle_type
            )));
        }
        let p = plan_rewritten(&tdoc, cfg)?;
        return Ok(to_value(&emit_training_record(&p, &tdoc, &cfg.special_token_ids)));
    }
    let tdoc = tokenized(doc)?;
    let labels = labels_for(doc, &tdoc, detector)?;
    let p = plan(&tdoc, &labels, cfg)?;
    Ok(to_value(&emit_training_record(&p, &tdoc, &cfg.special_token_ids)))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable record")
}

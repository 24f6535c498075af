//! The `rag-intrinsics` command line.
//!
//! Exit codes: 0 on success, 2 for invalid input, configuration or model
//! output, 3 when the backend fails.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rag_intrinsics_core::evalkit::{BackendJudge, FaithfulnessJudge, HallucinationJudge};
use rag_intrinsics_core::intrinsics::{CertaintyScenario, IntrinsicParams, InvocationRecord};
use rag_intrinsics_core::pipeline::{run_flow, FlowKind, TfIdfIndex};
use rag_intrinsics_core::{Backend, Document, IntrinsicError, IntrinsicName, Intrinsics, Turn};

use crate::config::{BackendMode, ConfigFile, RunConfig};
use crate::dataset::{self, RunRecord};
use crate::http::{run_bounded, HttpBackend};
use crate::metrics::{evaluate, summary_table, Metric};
use crate::recording::Recording;
use crate::scripted::ScriptedBackend;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "rag-intrinsics", version, about = "Run RAG intrinsics, flows and evaluations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one intrinsic on an invocation record (JSON) and print the result.
    Invoke {
        /// Invocation record file.
        input: PathBuf,
        /// Overrides the record's `intrinsic` field.
        #[arg(long)]
        intrinsic: Option<IntrinsicName>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a RAG flow over a conversations file and write a run report.
    Flow {
        conversations: PathBuf,
        corpus: PathBuf,
        #[arg(long, env = "RAG_INTRINSICS_FLOW")]
        flow: Option<FlowKind>,
        #[arg(long, env = "RAG_INTRINSICS_K")]
        k: Option<usize>,
        /// Conversations processed at once.
        #[arg(long, env = "RAG_INTRINSICS_JOBS")]
        jobs: Option<usize>,
        /// Score each answered response's faithfulness.
        #[arg(long, value_enum)]
        faithfulness: Option<FaithfulnessSource>,
        /// Score certainty of each answered response.
        #[arg(long)]
        certainty: bool,
        /// Generate citations for each answered response.
        #[arg(long)]
        citations: bool,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics from a run report and a gold file.
    Eval {
        run_report: PathBuf,
        gold: PathBuf,
        /// Comma-separated: answerability, jafs, recall, ndcg, ece, mae, citation.
        #[arg(long, value_delimiter = ',', default_value = "answerability,jafs,recall")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Metrics report (JSON); stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plain-text summary table; printed to stderr when absent.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Validate a scripted-backend file.
    ScriptCheck { script: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaithfulnessSource {
    /// Mean sentence score from hallucination detection.
    Hd,
    /// Ask the backend for a number in [0, 1].
    Judge,
}

#[derive(Debug, Clone, Default, Args)]
pub struct BackendArgs {
    /// TOML config file.
    #[arg(long, env = "RAG_INTRINSICS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible server.
    #[arg(long)]
    pub backend_url: Option<String>,
    /// Scripted-backend file.
    #[arg(long)]
    pub scripted: Option<PathBuf>,
    /// Default model name.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long = "model.qr", value_name = "MODEL")]
    pub model_qr: Option<String>,
    #[arg(long = "model.qe", value_name = "MODEL")]
    pub model_qe: Option<String>,
    #[arg(long = "model.cr", value_name = "MODEL")]
    pub model_cr: Option<String>,
    #[arg(long = "model.ad", value_name = "MODEL")]
    pub model_ad: Option<String>,
    #[arg(long = "model.prr", value_name = "MODEL")]
    pub model_prr: Option<String>,
    #[arg(long = "model.uq", value_name = "MODEL")]
    pub model_uq: Option<String>,
    #[arg(long = "model.hd", value_name = "MODEL")]
    pub model_hd: Option<String>,
    #[arg(long = "model.cg", value_name = "MODEL")]
    pub model_cg: Option<String>,
    /// Sampling seed sent with every request.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write every prompt/completion pair to this JSONL file.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

impl BackendArgs {
    fn model_overrides(&self) -> [(IntrinsicName, &Option<String>); 8] {
        [
            (IntrinsicName::Qr, &self.model_qr),
            (IntrinsicName::Qe, &self.model_qe),
            (IntrinsicName::Cr, &self.model_cr),
            (IntrinsicName::Ad, &self.model_ad),
            (IntrinsicName::Prr, &self.model_prr),
            (IntrinsicName::Uq, &self.model_uq),
            (IntrinsicName::Hd, &self.model_hd),
            (IntrinsicName::Cg, &self.model_cg),
        ]
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_INVALID, message: message.to_string() }
    }

    fn from_intrinsic(e: &IntrinsicError) -> Self {
        CliError { code: exit_code(e), message: e.to_string() }
    }
}

pub fn exit_code(e: &IntrinsicError) -> u8 {
    if e.is_backend() {
        EXIT_BACKEND
    } else {
        EXIT_INVALID
    }
}

type DynBackend = Box<dyn Backend + Send + Sync>;

struct Session {
    intrinsics: Intrinsics<Recording<DynBackend>>,
    trace: Option<PathBuf>,
}

impl Session {
    fn open(args: &BackendArgs, flow: Option<&mut ConfigFile>) -> Result<(Self, RunConfig), CliError> {
        let mut file = match &args.config {
            Some(path) => ConfigFile::load(path).map_err(CliError::invalid)?,
            None => ConfigFile::default(),
        };
        file.apply_env(|k| std::env::var(k).ok()).map_err(CliError::invalid)?;
        if let Some(url) = &args.backend_url {
            file.backend.url = Some(url.clone());
            file.backend.scripted = None;
        }
        if let Some(path) = &args.scripted {
            file.backend.scripted = Some(path.clone());
            if args.backend_url.is_none() {
                file.backend.url = None;
            }
        }
        if let Some(m) = &args.model {
            file.backend.model = Some(m.clone());
        }
        for (name, model) in args.model_overrides() {
            if let Some(m) = model {
                file.backend.models.insert(name, m.clone());
            }
        }
        if let Some(seed) = args.seed {
            file.flow.seed = Some(seed);
        }
        if let Some(overrides) = flow {
            let f = &mut file.flow;
            f.kind = overrides.flow.kind.or(f.kind);
            f.k = overrides.flow.k.or(f.k);
            f.jobs = overrides.flow.jobs.or(f.jobs);
        }
        let run = RunConfig::resolve(&file).map_err(CliError::invalid)?;
        let backend: DynBackend = match &run.backend {
            BackendMode::Http(http) => {
                Box::new(HttpBackend::new(http.clone()).map_err(|e| CliError { code: EXIT_BACKEND, message: e.to_string() })?)
            }
            BackendMode::Scripted(path) => Box::new(ScriptedBackend::from_file(path).map_err(CliError::invalid)?),
        };
        let mut params = IntrinsicParams::default();
        if let Some(seed) = run.seed {
            params = params.with_seed(seed);
        }
        let intrinsics = Intrinsics::new(Recording::new(backend)).with_params(params);
        Ok((Session { intrinsics, trace: args.trace.clone() }, run))
    }

    fn write_trace(&self) -> Result<(), CliError> {
        let Some(path) = &self.trace else { return Ok(()) };
        let file = std::fs::File::create(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
        dataset::write_jsonl(std::io::BufWriter::new(file), &self.intrinsics.backend().exchanges())
            .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::invalid(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(CliError::invalid)
        }
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Invoke { input, intrinsic, backend, out } => cmd_invoke(&input, intrinsic, &backend, out.as_deref()),
        Command::Flow { conversations, corpus, flow, k, jobs, faithfulness, certainty, citations, backend, out } => {
            let mut overrides = ConfigFile::default();
            overrides.flow.kind = flow;
            overrides.flow.k = k;
            overrides.flow.jobs = jobs;
            let extras = Extras { faithfulness, certainty, citations };
            cmd_flow(&conversations, &corpus, &mut overrides, extras, &backend, out.as_deref())
        }
        Command::Eval { run_report, gold, metrics, k, out, summary } => {
            cmd_eval(&run_report, &gold, &metrics, k, out.as_deref(), summary.as_deref())
        }
        Command::ScriptCheck { script } => cmd_script_check(&script),
    }
}

pub fn cmd_invoke(input: &Path, intrinsic: Option<IntrinsicName>, args: &BackendArgs, out: Option<&Path>) -> Result<(), CliError> {
    let mut value: serde_json::Value = serde_json::from_str(&read_text(input)?)
        .map_err(|e| CliError::invalid(format!("{}: {e}", input.display())))?;
    if let (Some(name), Some(obj)) = (intrinsic, value.as_object_mut()) {
        obj.insert("intrinsic".into(), serde_json::to_value(name).expect("names serialize"));
    }
    let record: InvocationRecord =
        serde_json::from_value(value).map_err(|e| CliError::invalid(format!("{}: {e}", input.display())))?;
    let (session, _) = Session::open(args, None)?;
    let result = session.intrinsics.invoke(&record);
    session.write_trace()?;
    let output = result.map_err(|e| CliError::from_intrinsic(&e))?;
    let mut bytes = serde_json::to_vec_pretty(&output).expect("outputs serialize");
    bytes.push(b'\n');
    write_output(out, &bytes)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Extras {
    pub faithfulness: Option<FaithfulnessSource>,
    pub certainty: bool,
    pub citations: bool,
}

fn run_one<B: Backend>(
    intrinsics: &Intrinsics<B>,
    index: &TfIdfIndex,
    run: &RunConfig,
    extras: Extras,
    record: &dataset::ConversationRecord,
) -> (RunRecord, Option<u8>) {
    let result = match run_flow(run.flow, &record.turns, index, intrinsics, run.k) {
        Ok(r) => r,
        Err(e) => {
            let steps = e.trace.iter().map(|s| s.step.clone()).collect();
            return (RunRecord::failed(&record.id, run.flow, steps, e.error.to_string()), Some(exit_code(&e.error)));
        }
    };
    let mut out = RunRecord::from_flow(&record.id, run.flow, &result);
    if result.abstained {
        return (out, None);
    }
    let docs: Vec<Document> = result.retrieved.iter().map(|p| p.doc.clone()).collect();
    let answered = match record.turns.push(Turn::assistant(result.final_response.clone())) {
        Ok(c) => c,
        Err(e) => return (with_error(out, e.to_string()), Some(EXIT_INVALID)),
    };
    let fail = |out: RunRecord, e: IntrinsicError| {
        let code = exit_code(&e);
        (with_error(out, e.to_string()), Some(code))
    };
    if docs.is_empty() {
        return (out, None);
    }
    if let Some(source) = extras.faithfulness {
        let score = match source {
            FaithfulnessSource::Hd => HallucinationJudge(intrinsics).faithfulness(&answered, &docs),
            FaithfulnessSource::Judge => {
                BackendJudge { intrinsics, params: intrinsics.params.relevance.clone() }.faithfulness(&answered, &docs)
            }
        };
        match score {
            Ok(s) => out.faithfulness = Some(s),
            Err(e) => return fail(out, e),
        }
    }
    if extras.certainty {
        match intrinsics.score_certainty(&answered, Some(&docs), CertaintyScenario::PostAnswer) {
            Ok(s) => out.certainty = Some(s.percent),
            Err(e) => return fail(out, e),
        }
    }
    if extras.citations {
        match intrinsics.generate_citations(&answered, &docs) {
            Ok(c) => out.citations = Some(c.passage_level),
            Err(e) => return fail(out, e),
        }
    }
    (out, None)
}

fn with_error(mut record: RunRecord, error: String) -> RunRecord {
    record.error = Some(error);
    record
}

pub fn cmd_flow(
    conversations: &Path,
    corpus: &Path,
    overrides: &mut ConfigFile,
    extras: Extras,
    args: &BackendArgs,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let convs = dataset::read_conversations(conversations).map_err(CliError::invalid)?;
    let docs = dataset::read_corpus(corpus).map_err(CliError::invalid)?;
    let index = TfIdfIndex::new(docs).map_err(CliError::invalid)?;
    let (session, run) = Session::open(args, Some(overrides))?;
    let results = run_bounded(&convs, run.jobs, |c| run_one(&session.intrinsics, &index, &run, extras, c));
    let (records, codes): (Vec<RunRecord>, Vec<Option<u8>>) = results.into_iter().unzip();
    let mut bytes = Vec::new();
    dataset::write_jsonl(&mut bytes, &records).expect("writing to memory");
    write_output(out, &bytes)?;
    session.write_trace()?;
    let failed = records.iter().zip(&codes).filter_map(|(r, c)| c.map(|c| (r, c))).collect::<Vec<_>>();
    match failed.iter().map(|(_, c)| *c).max() {
        None => Ok(()),
        Some(code) => Err(CliError {
            code,
            message: format!(
                "{} of {} conversations failed; first: {}: {}",
                failed.len(),
                records.len(),
                failed[0].0.id,
                failed[0].0.error.as_deref().unwrap_or("")
            ),
        }),
    }
}

pub fn cmd_eval(
    run_report: &Path,
    gold: &Path,
    metrics: &[String],
    k: usize,
    out: Option<&Path>,
    summary: Option<&Path>,
) -> Result<(), CliError> {
    let metrics = metrics
        .iter()
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<Metric>())
        .collect::<Result<BTreeSet<_>, _>>()
        .map_err(CliError::invalid)?;
    if k == 0 {
        return Err(CliError::invalid("--k must be at least 1"));
    }
    let runs = dataset::read_run_report(run_report).map_err(CliError::invalid)?;
    let gold = dataset::read_gold(gold).map_err(CliError::invalid)?;
    let report = evaluate(&runs, &gold, &metrics, k).map_err(CliError::invalid)?;
    let mut bytes = serde_json::to_vec_pretty(&report).expect("reports serialize");
    bytes.push(b'\n');
    write_output(out, &bytes)?;
    let table = summary_table(&report);
    match summary {
        Some(path) => std::fs::write(path, table).map_err(|e| CliError::invalid(format!("{}: {e}", path.display()))),
        None => {
            eprint!("{table}");
            Ok(())
        }
    }
}

pub fn cmd_script_check(script: &Path) -> Result<(), CliError> {
    let backend = ScriptedBackend::from_file(script).map_err(CliError::invalid)?;
    println!("{}: {} rule(s) OK", script.display(), backend.rule_count());
    Ok(())
}

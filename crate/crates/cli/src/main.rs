mod config;

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use payloc::behavior::{Behavior, BehaviorId, FamilyTable, Taxonomy};
use payloc::eval::{score, score_from_verdicts, CountUnit, GroundTruth};
use payloc::gateway::{
    Gateway, GatewayOptions, HttpBackend, HttpConfig, MockBackend, MockScript, ReplayBackend,
    ReplayCache,
};
use payloc::pipeline::{
    baseline_prompts, phase1_prompts, run_baseline, run_two_phase, AnalysisReport, PipelineConfig,
    PipelineError,
};
use payloc::prompt::{PromptKind, PromptTemplate, TemplateSet};
use payloc::review::{load_verdicts, review_items, run_review, timestamp_now, VerdictStore};
use payloc::smali::{decompile, ingest_tree, Corpus};

use config::Config;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_GATEWAY: u8 = 3;
const EXIT_PARSE_BUDGET: u8 = 4;

/// An error paired with the process exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

trait WithCode<T> {
    fn code(self, code: u8) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

#[derive(Parser)]
#[command(name = "payloc", version, about = "Localize malicious payloads in decompiled Android apps")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a Smali tree (or decompile an APK) into a corpus file.
    Ingest(IngestArgs),
    /// Two-phase analysis: class screening per behavior, then method localization.
    Analyze(AnalyzeArgs),
    /// Single-prompt analysis listing all behaviors at once.
    Baseline(RunArgs),
    /// Score a report against ground truth or analyst verdicts.
    Eval(EvalArgs),
    /// Accept or reject each finding interactively.
    Review(ReviewArgs),
    /// Print a report as analyst-facing text.
    Report(ReportArgs),
    /// Write the prompts an analysis would send, without sending them.
    DumpPrompts(DumpArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of Smali files, or an APK when a decompile command is set.
    path: PathBuf,
    /// Corpus file to write.
    #[arg(long, short, default_value = "corpus.json")]
    out: PathBuf,
    /// Developer package prefix (repeatable), e.g. `Lcom/example/`.
    #[arg(long = "filter")]
    filter: Vec<String>,
    #[arg(long)]
    apk_id: Option<String>,
    #[arg(long)]
    family: Option<String>,
    /// Decompiler invocation with `{apk}` and `{out}` placeholders.
    #[arg(long)]
    decompile_cmd: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    /// Corpus file produced by `ingest`.
    corpus: PathBuf,
    /// Report file to write.
    #[arg(long, short, default_value = "report.json")]
    out: PathBuf,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    mock_script: Option<PathBuf>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    max_parse_failures: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Behavior id to probe (repeatable). Defaults to the family's behaviors.
    #[arg(long = "behavior", short = 'b')]
    behaviors: Vec<BehaviorId>,
    #[arg(long)]
    gate_threshold: Option<u8>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Replay,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnitArg {
    Pair,
    Component,
}

#[derive(Args)]
struct EvalArgs {
    report: PathBuf,
    #[arg(long, conflicts_with = "from_verdicts", required_unless_present = "from_verdicts")]
    truth: Option<PathBuf>,
    /// Precision-only scoring from a review verdict file.
    #[arg(long)]
    from_verdicts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "pair")]
    count_unit: UnitArg,
    /// Print metrics as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ReviewArgs {
    report: PathBuf,
    /// Verdict file to append to (created if missing).
    #[arg(long, default_value = "verdicts.jsonl")]
    verdicts: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Digest,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    report: PathBuf,
    #[arg(long, value_enum, default_value = "digest")]
    format: ReportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptMode {
    Phase1,
    Baseline,
}

#[derive(Args)]
struct DumpArgs {
    corpus: PathBuf,
    #[arg(long, short, default_value = "prompts")]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "phase1")]
    mode: PromptMode,
    #[arg(long = "behavior", short = 'b')]
    behaviors: Vec<BehaviorId>,
    #[arg(long)]
    token_budget: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let config = match &cli.config {
        Some(path) => Config::load(path).code(EXIT_INPUT)?,
        None => Config::default(),
    };
    let ctx = Ctx {
        config,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Ingest(a) => ctx.ingest(a),
        Command::Analyze(a) => ctx.analyze(a),
        Command::Baseline(a) => ctx.baseline(a),
        Command::Eval(a) => ctx.eval(a),
        Command::Review(a) => ctx.review(a),
        Command::Report(a) => ctx.report(a),
        Command::DumpPrompts(a) => ctx.dump_prompts(a),
    }
}

struct Ctx {
    config: Config,
    quiet: bool,
}

fn read_report(path: &Path) -> CmdResult<AnalysisReport> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading report {}", path.display()))
        .code(EXIT_INPUT)?;
    AnalysisReport::from_json(&text)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
        .code(EXIT_INPUT)
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))
            .code(EXIT_INPUT)?;
    }
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .code(EXIT_INPUT)
}

impl Ctx {
    fn progress(&self, line: &str) {
        if !self.quiet {
            eprintln!("{line}");
        }
    }

    fn taxonomy(&self) -> CmdResult<Taxonomy> {
        match &self.config.knowledge.taxonomy {
            Some(p) => Taxonomy::load(p).code(EXIT_INPUT),
            None => Ok(Taxonomy::builtin()),
        }
    }

    fn families(&self, taxonomy: &Taxonomy) -> CmdResult<FamilyTable> {
        match &self.config.knowledge.families {
            Some(p) => FamilyTable::load(p, taxonomy).code(EXIT_INPUT),
            None => Ok(FamilyTable::builtin()),
        }
    }

    /// Explicit ids win; otherwise the family table decides.
    fn select_behaviors<'t>(
        &self,
        taxonomy: &'t Taxonomy,
        corpus: &Corpus,
        ids: &[BehaviorId],
    ) -> CmdResult<Vec<&'t Behavior>> {
        if ids.is_empty() {
            return self
                .families(taxonomy)?
                .lookup(taxonomy, corpus.family.as_deref())
                .code(EXIT_INPUT);
        }
        ids.iter()
            .map(|id| taxonomy.get(*id).ok_or_else(|| anyhow!("unknown behavior id {id}")))
            .collect::<Result<_, _>>()
            .code(EXIT_INPUT)
    }

    fn templates(&self) -> CmdResult<TemplateSet> {
        let t = &self.config.templates;
        let load = |kind, path: &Option<PathBuf>| match path {
            Some(p) => PromptTemplate::load(kind, p).code(EXIT_INPUT),
            None => Ok(PromptTemplate::builtin(kind)),
        };
        Ok(TemplateSet {
            baseline: load(PromptKind::Baseline, &t.baseline)?,
            phase1: load(PromptKind::Phase1, &t.phase1)?,
            phase2: load(PromptKind::Phase2, &t.phase2)?,
        })
    }

    fn ingest(&self, a: IngestArgs) -> CmdResult {
        let c = &self.config.corpus;
        let filter = if a.filter.is_empty() {
            c.filter.clone()
        } else {
            Some(a.filter.clone())
        };
        let apk_id = a
            .apk_id
            .or_else(|| c.apk_id.clone())
            .unwrap_or_else(|| {
                a.path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "app".into())
            });
        let family = a.family.or_else(|| c.family.clone());

        if !a.path.exists() {
            return Err(anyhow!("{} does not exist", a.path.display())).code(EXIT_INPUT);
        }
        let root = if a.path.is_file() {
            let cmd = a.decompile_cmd.or_else(|| c.decompile_command.clone());
            let out_dir = a.out.with_extension("smali.d");
            self.progress(&format!("decompiling {} into {}", a.path.display(), out_dir.display()));
            decompile(&a.path, cmd.as_deref(), &out_dir).code(EXIT_INPUT)?
        } else {
            a.path.clone()
        };
        let corpus = ingest_tree(&root, filter.as_deref(), &apk_id, family.as_deref())
            .with_context(|| format!("ingesting {}", root.display()))
            .code(EXIT_INPUT)?;
        write_file(&a.out, &corpus.to_json())?;

        let developer = corpus.developer_classes().count();
        let synthetic: usize = corpus
            .developer_classes()
            .flat_map(|cl| &cl.methods)
            .filter(|m| m.is_synthetic)
            .count();
        println!("apk_id: {}", corpus.apk_id);
        println!("family: {}", corpus.family.as_deref().unwrap_or("-"));
        println!("classes: {} ({developer} developer)", corpus.class_count);
        println!("methods: {} ({synthetic} synthetic)", corpus.method_count);
        println!("corpus: {}", a.out.display());
        Ok(())
    }

    fn gateway(&self, a: &RunArgs) -> CmdResult<Gateway> {
        let g = &self.config.gateway;
        let backend = match a.backend {
            Some(BackendArg::Http) => Some("http"),
            Some(BackendArg::Replay) => Some("replay"),
            Some(BackendArg::Mock) => Some("mock"),
            None => g.backend.as_deref(),
        };
        let cache_dir = a.cache_dir.clone().or_else(|| g.cache_dir.clone());
        let cache = || -> CmdResult<Option<ReplayCache>> {
            cache_dir
                .as_deref()
                .map(ReplayCache::new)
                .transpose()
                .code(EXIT_INPUT)
        };
        let backend: Box<dyn payloc::gateway::ChatBackend> = match backend {
            None => return Err(PipelineError::GatewayUnconfigured).code(EXIT_GATEWAY),
            Some("mock") => {
                let path = a
                    .mock_script
                    .clone()
                    .or_else(|| g.mock_script.clone())
                    .ok_or_else(|| anyhow!("mock backend needs gateway.mock_script"))
                    .code(EXIT_INPUT)?;
                let script = MockScript::load(&path).map_err(|e| anyhow!(e)).code(EXIT_INPUT)?;
                Box::new(MockBackend::new(script))
            }
            Some("replay") => {
                let cache = cache()?
                    .ok_or_else(|| anyhow!("replay backend needs a cache directory"))
                    .code(EXIT_INPUT)?;
                Box::new(ReplayBackend::new(cache))
            }
            Some(_) => {
                let mut http = HttpConfig::default();
                if let Some(u) = a.base_url.clone().or_else(|| g.base_url.clone()) {
                    http.base_url = u;
                }
                if let Some(k) = &g.api_key_env {
                    http.api_key_env = k.clone();
                }
                if let Some(t) = g.timeout_secs {
                    http.timeout = Duration::from_secs(t);
                }
                Box::new(HttpBackend::new(&http).code(EXIT_GATEWAY)?)
            }
        };
        let replay = backend.kind() == payloc::gateway::BackendKind::Replay;
        let options = GatewayOptions {
            max_in_flight: a.max_in_flight.or(g.max_in_flight).unwrap_or(4).max(1),
            retry: g.retry.unwrap_or_default(),
            requests_per_minute: g.requests_per_minute,
        };
        let mut gateway = Gateway::new(backend, options);
        if !replay {
            if let Some(c) = cache()? {
                gateway = gateway.with_cache(c);
            }
        }
        if let Some(log) = &g.log_path {
            gateway = gateway
                .with_run_log(log)
                .with_context(|| format!("opening run log {}", log.display()))
                .code(EXIT_INPUT)?;
        }
        Ok(gateway)
    }

    fn pipeline_config(&self, a: &RunArgs, gate: Option<u8>) -> CmdResult<PipelineConfig> {
        let g = &self.config.gateway;
        let p = &self.config.pipeline;
        let defaults = PipelineConfig::default();
        let quiet = self.quiet;
        Ok(PipelineConfig {
            model: a.model.clone().or_else(|| g.model.clone()).unwrap_or(defaults.model),
            temperature: a.temperature.or(g.temperature).unwrap_or(defaults.temperature),
            max_output_tokens: g.max_output_tokens.unwrap_or(defaults.max_output_tokens),
            gate_threshold: gate.or(p.gate_threshold).unwrap_or(defaults.gate_threshold),
            token_budget: a.token_budget.or(p.token_budget).unwrap_or(defaults.token_budget),
            templates: self.templates()?,
            progress: if quiet {
                None
            } else {
                Some(Arc::new(|line: &str| eprintln!("{line}")))
            },
        })
    }

    fn load_corpus(path: &Path) -> CmdResult<Corpus> {
        Corpus::load(path).code(EXIT_INPUT)
    }

    fn finish_run(&self, a: &RunArgs, gateway: &Gateway, report: &AnalysisReport) -> CmdResult {
        write_file(&a.out, &report.to_json())?;
        self.progress(&format!("gateway: {}", gateway.stats()));
        self.progress(&format!(
            "findings: {} over {} classes; {} of {} methods flagged; workload reduction {}; failures: {}",
            report.findings.len(),
            report.flagged_class_count,
            report.flagged_method_count,
            report.total_method_count,
            payloc::eval::format_percent(report.workload_reduction),
            report.failures.len()
        ));
        println!("{}", a.out.display());
        let budget = a.max_parse_failures.or(self.config.pipeline.max_parse_failures);
        if let Some(max) = budget {
            let n = report.parse_failures();
            if n > max {
                return Err(anyhow!("{n} parse failures exceed the budget of {max}")).code(EXIT_PARSE_BUDGET);
            }
        }
        Ok(())
    }

    fn analyze(&self, a: AnalyzeArgs) -> CmdResult {
        let corpus = Self::load_corpus(&a.run.corpus)?;
        let taxonomy = self.taxonomy()?;
        let behaviors = self.select_behaviors(&taxonomy, &corpus, &a.behaviors)?;
        let cfg = self.pipeline_config(&a.run, a.gate_threshold)?;
        let gateway = self.gateway(&a.run)?;
        self.progress(&format!(
            "analyzing {} developer classes x {} behaviors via {} backend",
            corpus.developer_classes().count(),
            behaviors.len(),
            gateway.backend_kind()
        ));
        let report = run_two_phase(&corpus, &behaviors, &gateway, &cfg).code(EXIT_INPUT)?;
        self.finish_run(&a.run, &gateway, &report)
    }

    fn baseline(&self, a: RunArgs) -> CmdResult {
        let corpus = Self::load_corpus(&a.corpus)?;
        let taxonomy = self.taxonomy()?;
        let cfg = self.pipeline_config(&a, None)?;
        let gateway = self.gateway(&a)?;
        let report = run_baseline(&corpus, &taxonomy, &gateway, &cfg).code(EXIT_INPUT)?;
        self.finish_run(&a, &gateway, &report)
    }

    fn eval(&self, a: EvalArgs) -> CmdResult {
        let report = read_report(&a.report)?;
        let result = match (&a.truth, &a.from_verdicts) {
            (Some(truth), _) => {
                let taxonomy = self.taxonomy()?;
                let truth = GroundTruth::load(truth, &taxonomy).code(EXIT_INPUT)?;
                let unit = match a.count_unit {
                    UnitArg::Pair => CountUnit::Pair,
                    UnitArg::Component => CountUnit::Component,
                };
                score(&report, &truth, unit).code(EXIT_INPUT)?
            }
            (None, Some(verdicts)) => {
                let records = load_verdicts(verdicts).code(EXIT_INPUT)?;
                score_from_verdicts(&report, &records).code(EXIT_INPUT)?
            }
            (None, None) => unreachable!("clap requires one of --truth / --from-verdicts"),
        };
        if a.json {
            print!("{}", result.to_json());
        } else {
            print!("{}", result.to_table());
        }
        Ok(())
    }

    fn review(&self, a: ReviewArgs) -> CmdResult {
        let report = read_report(&a.report)?;
        let taxonomy = self.taxonomy()?;
        let items = review_items(&report, &taxonomy);
        let mut store = VerdictStore::open(&a.verdicts).code(EXIT_INPUT)?;
        let stdin = io::stdin();
        let stdout = io::stdout();
        let summary = run_review(&items, &mut store, stdin.lock(), stdout.lock(), timestamp_now)
            .code(EXIT_INPUT)?;
        let _ = io::stdout().flush();
        eprintln!(
            "reviewed {} new item(s), {} skipped, {} already done, {} total; verdicts in {}",
            summary.decided,
            summary.skipped,
            summary.already_done,
            summary.total,
            a.verdicts.display()
        );
        Ok(())
    }

    fn report(&self, a: ReportArgs) -> CmdResult {
        let report = read_report(&a.report)?;
        match a.format {
            ReportFormat::Json => print!("{}", report.to_json()),
            ReportFormat::Digest => print!("{}", report.render_digest(&self.taxonomy()?)),
        }
        Ok(())
    }

    fn dump_prompts(&self, a: DumpArgs) -> CmdResult {
        let corpus = Self::load_corpus(&a.corpus)?;
        let taxonomy = self.taxonomy()?;
        let cfg = PipelineConfig {
            token_budget: a
                .token_budget
                .or(self.config.pipeline.token_budget)
                .unwrap_or(payloc::prompt::DEFAULT_TOKEN_BUDGET),
            templates: self.templates()?,
            ..PipelineConfig::default()
        };
        let behaviors = self.select_behaviors(&taxonomy, &corpus, &a.behaviors)?;
        std::fs::create_dir_all(&a.out_dir)
            .with_context(|| format!("creating {}", a.out_dir.display()))
            .code(EXIT_INPUT)?;
        let mut written = 0;
        for class in corpus.developer_classes() {
            let prompts = match a.mode {
                PromptMode::Baseline => baseline_prompts(class, &cfg),
                PromptMode::Phase1 => behaviors
                    .iter()
                    .flat_map(|b| phase1_prompts(class, b, &cfg))
                    .collect(),
            };
            for p in prompts {
                write_file(&a.out_dir.join(p.file_name()), &p.text)?;
                written += 1;
            }
        }
        println!("wrote {written} prompt(s) to {}", a.out_dir.display());
        Ok(())
    }
}

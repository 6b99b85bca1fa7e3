use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use memgraph_cli::commands::{self, EpisodeRequest};
use memgraph_cli::config::PolicyKind;
use memgraph_cli::{CliError, Config, EXIT_DOMAIN};
use memgraph_core::runtime::InflightLimiter;

#[derive(Parser)]
#[command(name = "memgraph", version, about = "Graph-memory retrieval agent toolkit")]
struct Cli {
    /// Config file; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect a corpus.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Query the corpus the way the runtime does.
    Search {
        query: String,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        n_frames: Option<usize>,
    },
    /// Serve `POST /search` on a local address.
    Serve {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8077")]
        addr: SocketAddr,
    },
    /// Run one episode, or a batch of them.
    Run(Box<RunArgs>),
    /// Segment, mask and score trajectories into a training batch.
    Prune {
        /// JSON object mapping each query to its gold evidence.
        #[arg(long)]
        gold: PathBuf,
        /// Batch file (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Audit report; printed to stdout when omitted.
        #[arg(long)]
        audit: Option<PathBuf>,
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
    },
    /// Per-episode proxy token counts, duplicate queries and step counts.
    Stats {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        trajectories: Vec<PathBuf>,
    },
    /// Print the effective config.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Ingest every *.json manifest in a directory.
    Build {
        manifest_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clip_len: Option<f64>,
    },
}

#[derive(Subcommand)]
enum ConfigCommand {
    Dump,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct RunArgs {
    /// Single-episode question.
    #[arg(long, conflicts_with = "queries", required_unless_present = "queries")]
    query: Option<String>,
    /// Batch file: one {id, query, gold?, script?} object per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Episodes run at once in batch mode.
    #[arg(long, default_value_t = 1, requires = "queries")]
    parallel: usize,
    #[arg(long, default_value = "episode", conflicts_with = "queries")]
    id: String,
    /// Reference answer for the judge.
    #[arg(long, conflicts_with = "queries")]
    gold: Option<String>,
    /// Trajectory path; defaults to <output_dir>/<id>.jsonl.
    #[arg(long, conflicts_with = "queries")]
    out: Option<PathBuf>,
    /// Continue from a saved session.
    #[arg(long, conflicts_with = "queries")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Scripted policy responses (JSON list); selects the scripted policy.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    session_dir: Option<PathBuf>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    search_k: Option<usize>,
    #[arg(long)]
    n_frames: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    s_total: Option<u64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    uniform: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut Config) -> Result<(), CliError> {
        if let Some(p) = &self.corpus {
            cfg.paths.corpus = Some(p.clone());
        }
        if let Some(p) = &self.script {
            cfg.policy.kind = PolicyKind::Scripted;
            cfg.policy.script = Some(p.clone());
        }
        if let Some(p) = &self.output_dir {
            cfg.paths.output_dir = p.clone();
        }
        if let Some(p) = &self.session_dir {
            cfg.paths.session_dir = Some(p.clone());
        }
        set(&mut cfg.runtime.t_max, self.t_max);
        set(&mut cfg.runtime.search_k, self.search_k);
        set(&mut cfg.runtime.n_frames, self.n_frames);
        set(&mut cfg.energy.lambda_decay, self.lambda);
        set(&mut cfg.energy.gamma_feedback, self.gamma);
        set(&mut cfg.energy.s_total, self.s_total);
        set(&mut cfg.energy.top_k, self.top_k);
        cfg.energy.uniform_mode |= self.uniform;
        cfg.validate()
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config(path: Option<&Path>) -> Result<Config, CliError> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            if let CliError::Domain(inner) = &e {
                for cause in inner.chain().skip(1) {
                    eprintln!("  caused by: {cause}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, CliError> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Corpus(CorpusCommand::Build { manifest_dir, out, clip_len }) => {
            let clip_len = clip_len.unwrap_or(cfg.runtime.clip_len_s);
            println!("{}", commands::corpus_build(&manifest_dir, &out, clip_len)?);
        }
        Command::Search { query, corpus, k, n_frames } => {
            set(&mut cfg.paths.corpus, corpus.map(Some));
            let corpus = commands::load_corpus(cfg.corpus_path()?)?;
            let hits = commands::search_corpus(
                &corpus,
                &query,
                k.unwrap_or(cfg.runtime.search_k),
                n_frames.unwrap_or(cfg.runtime.n_frames),
            )?;
            println!("{}", memgraph_core::render_observation(&hits).text.trim_end());
        }
        Command::Serve { corpus, addr } => {
            set(&mut cfg.paths.corpus, corpus.map(Some));
            let corpus = commands::load_corpus(cfg.corpus_path()?)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Domain(e.into()))?;
            rt.block_on(memgraph_cli::server::serve(corpus, addr, |a| {
                eprintln!("listening on http://{a}/search");
            }))
            .map_err(|e| CliError::Domain(e.into()))?;
        }
        Command::Run(args) => return run(cfg, args),
        Command::Prune { gold, out, audit, trajectories } => {
            let res = commands::prune(&cfg, &trajectories, &gold)?;
            commands::write_output(&out, &res.batch)?;
            match audit {
                Some(p) => commands::write_output(&p, &res.audit)?,
                None => print!("{}", res.audit),
            }
        }
        Command::Stats { format, trajectories } => {
            let report = commands::stats(&trajectories)?;
            match format {
                Format::Text => print!("{}", report.to_text()),
                Format::Json => println!("{}", report.to_json()),
            }
        }
        Command::Config(ConfigCommand::Dump) => print!("{}", cfg.to_toml()),
    }
    Ok(0)
}

fn run(mut cfg: Config, args: Box<RunArgs>) -> Result<i32, CliError> {
    args.overrides.apply(&mut cfg)?;
    let corpus = commands::load_corpus(cfg.corpus_path()?)?;
    if let Some(batch) = &args.queries {
        let requests = commands::read_requests(batch)?;
        let mut failed = 0;
        for r in commands::run_batch(&cfg, &corpus, &requests, args.parallel)? {
            match r {
                Ok(res) => println!("{}", res.verdict_line()),
                Err(e) => {
                    failed += 1;
                    eprintln!("error: {e:#}");
                }
            }
        }
        return Ok(if failed > 0 { EXIT_DOMAIN } else { 0 });
    }
    let request = EpisodeRequest {
        id: args.id.clone(),
        query: args.query.expect("clap requires --query without --queries"),
        gold: args.gold,
        script: None,
    };
    let out = args.out.unwrap_or_else(|| cfg.paths.output_dir.join(format!("{}.jsonl", request.id)));
    let limiter = InflightLimiter::new(cfg.policy.remote.max_in_flight);
    let res = commands::run_episode_request(&cfg, &corpus, &request, &out, args.resume.as_deref(), &limiter)?;
    println!("{}", res.verdict_line());
    Ok(0)
}

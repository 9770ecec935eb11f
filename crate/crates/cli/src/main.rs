//! `ecgauth`: train, enroll, authenticate, evaluate and compress ECG encoders.
//!
//! Exit codes: 0 success or ACCEPT, 1 usage/config error, 2 training failure,
//! 3 REJECT, 4 model/database mismatch.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecg_auth::authdb::{AuthError, AuthPolicy, TemplateDb};
use ecg_auth::compress::{self, CostReport};
use ecg_auth::encoder::{EncoderModel, Embedder};
use ecg_auth::evalkit::{self, EvalError};
use ecg_auth::ingest::{self, EcgRecord};
use ecg_auth::metric::Threshold;
use ecg_auth::segment::Segment;
use ecg_auth::trainer::{self, TrainError};
use ecg_auth::write_atomic;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::Config;

#[derive(Parser, Debug)]
#[command(name = "ecgauth", version, about = "ECG biometric authentication toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an encoder and write the model plus a loss-history CSV.
    Train {
        #[arg(long)]
        model: PathBuf,
        /// Loss history CSV (default: <model>.loss.csv).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Enroll segments of a recording under an identity.
    Enroll {
        #[command(flatten)]
        io: AuthIo,
        /// Number of enrollment segments.
        #[arg(long, default_value_t = 5)]
        segments: usize,
        /// Threshold stored in a newly created database.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Authenticate a recording against an enrolled identity.
    Auth {
        #[command(flatten)]
        io: AuthIo,
        #[arg(long, default_value_t = 1)]
        attempts: usize,
        /// Per-call threshold (default: the database's).
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Run the evaluation protocol and write report and ROC CSVs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Quantize weights to integers with n fractional bits.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n_bits: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Magnitude-prune a model.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the operation-count cost report of a model.
    Cost {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct AuthIo {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    identity: String,
    /// Recording: WFDB header (.hea) or CSV.
    #[arg(long)]
    input: PathBuf,
}

enum Failure {
    Usage(String),
    Training(String),
    Mismatch(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Training(_) => 2,
            Failure::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Training(m) | Failure::Mismatch(m) => m,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn auth_failure(e: AuthError) -> Failure {
    match e {
        AuthError::ModelMismatch => Failure::Mismatch(e.to_string()),
        other => usage(other),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    write_atomic(path, text.as_bytes()).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<EncoderModel, Failure> {
    EncoderModel::load(path).map_err(|e| usage(format!("cannot load model {}: {e}", path.display())))
}

fn save_model(model: &EncoderModel, path: &Path) -> Result<(), Failure> {
    model.save(path).map_err(|e| usage(format!("cannot write model {}: {e}", path.display())))
}

fn load_input(path: &Path, cfg: &Config) -> Result<EcgRecord, Failure> {
    let is_header = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("hea"));
    let record = if is_header { ingest::load_wfdb(path) } else { ingest::load_csv(path, cfg.dataset.csv_fs) };
    record.map_err(usage)
}

fn draw_segments(record: &EcgRecord, count: usize, cfg: &Config) -> Result<Vec<Segment>, Failure> {
    let prepared = cfg.preprocessor().map_err(usage)?.prepare(record).map_err(usage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(prepared.sample_n(count, &mut rng))
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let mut cfg = Config::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Train { model, loss_csv } => {
            let catalog = cfg.catalog().map_err(usage)?;
            let pre = cfg.preprocessor().map_err(usage)?;
            let tc = cfg.train_config().map_err(usage)?;
            let init = EncoderModel::canonical(cfg.seed);
            let outcome = trainer::train_with_progress(&catalog, &init, &tc, &pre, |s| {
                eprintln!("epoch {:>4}  loss {:.6}  lr {:.3e}", s.epoch, s.mean_loss, s.lr);
            })
            .map_err(|e| match e {
                TrainError::InvalidConfig(_) | TrainError::NoTrainingData => usage(e),
                other => Failure::Training(other.to_string()),
            })?;
            save_model(&outcome.model, &model)?;
            let csv_path = loss_csv.unwrap_or_else(|| model.with_extension("loss.csv"));
            write_file(&csv_path, &outcome.history_csv())?;
            println!("wrote {} and {}", model.display(), csv_path.display());
            Ok(0)
        }
        Command::Enroll { io, segments, tau } => {
            let model = load_model(&io.model)?;
            let embedder = Embedder::new(&model);
            let mut db = if io.db.exists() {
                TemplateDb::restore(&io.db).map_err(auth_failure)?
            } else {
                let tau = Threshold::new(tau.unwrap_or(cfg.eval.tau)).map_err(usage)?;
                TemplateDb::for_embedder(&embedder, tau)
            };
            let record = load_input(&io.input, &cfg)?;
            let segs = draw_segments(&record, segments, &cfg)?;
            let count = db.enroll(&io.identity, &segs, &embedder).map_err(auth_failure)?;
            db.persist(&io.db).map_err(auth_failure)?;
            println!("enrolled {} segments for {} ({count} total)", segs.len(), io.identity);
            Ok(0)
        }
        Command::Auth { io, attempts, tau } => {
            let model = load_model(&io.model)?;
            let embedder = Embedder::new(&model);
            let mut db = TemplateDb::restore(&io.db).map_err(auth_failure)?;
            if db.fingerprint() != embedder.fingerprint() {
                return Err(auth_failure(AuthError::ModelMismatch));
            }
            if let Some(t) = tau {
                db.set_tau(Threshold::new(t).map_err(usage)?);
            }
            let policy = AuthPolicy::new(attempts).map_err(usage)?;
            let record = load_input(&io.input, &cfg)?;
            let segs = draw_segments(&record, attempts, &cfg)?;
            let result = db.authenticate_repeat(&io.identity, &segs, &embedder, policy).map_err(auth_failure)?;
            let score = result.best().value();
            if result.decision.is_accept() {
                println!("ACCEPT {score:.6}");
                Ok(0)
            } else {
                println!("REJECT {score:.6}");
                Ok(3)
            }
        }
        Command::Eval { model, out_dir, tau } => {
            let model = load_model(&model)?;
            let embedder = Embedder::new(&model);
            let catalog = cfg.catalog().map_err(usage)?;
            let pre = cfg.preprocessor().map_err(usage)?;
            let mut ec = cfg.eval_config();
            if let Some(t) = tau {
                ec.tau = t;
            }
            let report = evalkit::run_protocol(&catalog, &embedder, &pre, &ec, &cfg.taus()).map_err(|e| match e {
                EvalError::Auth(a) => auth_failure(a),
                other => usage(other),
            })?;
            std::fs::create_dir_all(&out_dir).map_err(usage)?;
            write_file(&out_dir.join("eval_report.csv"), &report.csv())?;
            write_file(&out_dir.join("roc.csv"), &report.roc_csv())?;
            print!("{}", report.table());
            Ok(0)
        }
        Command::Quantize { model, n_bits, out } => {
            let m = load_model(&model)?;
            let q = compress::quantize_model(&m, n_bits.unwrap_or(cfg.compress.n_bits)).map_err(usage)?;
            save_model(&q, &out)?;
            println!("wrote {} ({})", out.display(), q.precision_tag());
            Ok(0)
        }
        Command::Prune { model, sparsity, out } => {
            let m = load_model(&model)?;
            let criterion = cfg.prune_criterion().map_err(usage)?;
            let (p, mask) =
                compress::prune(&m, sparsity.unwrap_or(cfg.compress.sparsity), criterion).map_err(usage)?;
            save_model(&p, &out)?;
            println!("wrote {} ({} of {} weights pruned)", out.display(), mask.pruned(), mask.total());
            Ok(0)
        }
        Command::Cost { model, out } => {
            let report = compress::cost_report(&load_model(&model)?);
            let text = format!("{}\n{}\n", CostReport::CSV_HEADER, report.csv_row());
            if let Some(path) = out {
                write_file(&path, &text)?;
            }
            print!("{text}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

//! `nell`: build all-pairs tables, seed a knowledge base, run learning
//! iterations, export RDF and serve the supervision API.
//!
//! Exit status: 0 on success, 1 for data or validation errors, 2 for usage
//! errors (bad flags, missing inputs, invalid base IRI).

use std::fs;
use std::io::{self, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chrono::Utc;
use clap::{Parser, Subcommand};
use nell_core::allpairs::{build_table, read_table, write_table, AllPairsTable};
use nell_core::corpus::{load_corpus, CorpusError, Gazetteer, LanguageProfile, ProfileError};
use nell_core::kbstore::{export_rdf, load_kb, KbStore};
use nell_core::learner::{run_iteration, LearnerConfig};
use nell_core::ontology::{build_initial_kb, load_ontology_dir, Severity};
use nell_service::App;

#[derive(Debug, Parser)]
#[command(name = "nell", version, about = "Bootstrapped knowledge base construction from a text corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a corpus into category and relation pattern tables.
    BuildAllpairs {
        /// Directory of `.txt` documents, searched recursively.
        #[arg(long)]
        corpus: PathBuf,
        /// Built-in profile name (en, fr, pt) or path to a profile TOML file.
        #[arg(long)]
        profile: String,
        /// Ontology directory; its seeds feed the gazetteer.
        #[arg(long)]
        ontology: Option<PathBuf>,
        /// KB log whose true instances also feed the gazetteer.
        #[arg(long)]
        kb: Option<PathBuf>,
        /// Output directory for `category.tsv` and `relation.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an ontology directory and write a seeded KB log.
    InitKb {
        /// Directory holding `categories.tsv` and optionally `relations.tsv`.
        #[arg(long)]
        ontology: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Replace an existing log.
        #[arg(long)]
        force: bool,
    },
    /// Run learning iterations and append them to the KB log.
    Iterate {
        #[arg(long)]
        kb: PathBuf,
        /// Directory written by `build-allpairs`.
        #[arg(long)]
        allpairs: PathBuf,
        /// Learner configuration (TOML key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of iterations.
        #[arg(short = 'n', long, default_value_t = 1)]
        iterations: u32,
        /// Also list each promotion, queued candidate and rejection.
        #[arg(short, long)]
        verbose: bool,
    },
    /// Write the true assertions as N-Triples.
    ExportRdf {
        #[arg(long)]
        kb: PathBuf,
        /// Absolute IRI that instance and predicate IRIs are minted under.
        #[arg(long)]
        base: String,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the supervision HTTP API.
    Serve {
        #[arg(long)]
        kb: PathBuf,
        /// Tables to iterate over; without them `POST /iterations` is unavailable.
        #[arg(long)]
        allpairs: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// 0 picks a free port; the bound address is printed on startup.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Data(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::BuildAllpairs {
            corpus,
            profile,
            ontology,
            kb,
            out,
        } => build_allpairs(&corpus, &profile, ontology.as_deref(), kb.as_deref(), &out),
        Command::InitKb { ontology, kb, force } => init_kb(&ontology, &kb, force),
        Command::Iterate {
            kb,
            allpairs,
            config,
            iterations,
            verbose,
        } => iterate(&kb, &allpairs, config.as_deref(), iterations, verbose),
        Command::ExportRdf { kb, base, out } => export(&kb, &base, out.as_deref()),
        Command::Serve {
            kb,
            allpairs,
            config,
            host,
            port,
        } => serve(&kb, allpairs.as_deref(), config.as_deref(), SocketAddr::new(host, port)),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_profile(name_or_path: &str) -> Result<LanguageProfile, Failure> {
    LanguageProfile::resolve(name_or_path).map_err(|e| match e {
        ProfileError::Unknown(_) => usage(anyhow!("profile {name_or_path:?} is neither a file nor a built-in: {e}")),
        ProfileError::Read { .. } => usage(e),
        other => Failure::Data(other.into()),
    })
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(anyhow!("{what} {} does not exist", path.display())))
    }
}

fn build_allpairs(
    corpus: &Path,
    profile: &str,
    ontology: Option<&Path>,
    kb: Option<&Path>,
    out: &Path,
) -> Outcome {
    let profile = resolve_profile(profile)?;
    let mut gazetteer = Gazetteer::default();
    if let Some(dir) = ontology {
        require(dir, "ontology directory")?;
        let (ontology, _) = load_ontology_dir(dir).context("loading ontology")?;
        for s in ontology.seed_surfaces() {
            gazetteer.insert(&s);
        }
    }
    if let Some(path) = kb {
        require(path, "KB log")?;
        let kb = load_kb(path).with_context(|| format!("loading {}", path.display()))?;
        for a in kb.assertions().filter(|a| a.status.is_true()) {
            for part in a.args.parts() {
                gazetteer.insert(part);
            }
        }
    }
    let reader = load_corpus(corpus).map_err(|e| match e {
        CorpusError::MissingRoot(_) => usage(e),
        other => Failure::Data(other.into()),
    })?;
    let mut documents = Vec::new();
    let mut skipped = 0;
    for item in reader {
        match item {
            Ok(doc) => documents.push(doc),
            Err(e) => {
                eprintln!("warning: {e}");
                skipped += 1;
            }
        }
    }
    let table = build_table(&documents, &profile, &gazetteer);
    write_table(&table, out).with_context(|| format!("writing tables to {}", out.display()))?;
    println!(
        "documents: {} ({skipped} skipped), gazetteer: {} surfaces",
        documents.len(),
        gazetteer.len()
    );
    println!(
        "category: {} rows, {} pairs",
        table.category_counts.len(),
        table.category_total()
    );
    println!(
        "relation: {} rows, {} pairs",
        table.relation_counts.len(),
        table.relation_total()
    );
    Ok(())
}

fn init_kb(ontology: &Path, kb_path: &Path, force: bool) -> Outcome {
    require(ontology, "ontology directory")?;
    if kb_path.exists() && !force {
        return Err(usage(anyhow!(
            "{} already exists; pass --force to replace it",
            kb_path.display()
        )));
    }
    let (ontology, report) = load_ontology_dir(ontology)?;
    for issue in &report.issues {
        if issue.severity != Severity::Notice {
            eprintln!("{issue}");
        }
    }
    if report.has_errors() {
        return Err(Failure::Data(anyhow!(
            "ontology has {} validation error(s)",
            report.errors().count()
        )));
    }
    let kb = build_initial_kb(ontology)?;
    let seeds = kb.assertions().count();
    KbStore::create(kb_path, kb)?;
    println!("{}: {seeds} seed assertions", kb_path.display());
    Ok(())
}

fn learner_config(path: Option<&Path>) -> Result<LearnerConfig, Failure> {
    match path {
        Some(p) => {
            require(p, "config file")?;
            Ok(LearnerConfig::load(p)?)
        }
        None => Ok(LearnerConfig::default()),
    }
}

fn load_tables(dir: &Path) -> Result<AllPairsTable, Failure> {
    require(dir, "all-pairs directory")?;
    Ok(read_table(dir).with_context(|| format!("reading tables from {}", dir.display()))?)
}

fn iterate(kb_path: &Path, allpairs: &Path, config: Option<&Path>, iterations: u32, verbose: bool) -> Outcome {
    require(kb_path, "KB log")?;
    let config = learner_config(config)?;
    let table = load_tables(allpairs)?;
    let mut store = KbStore::open(kb_path).with_context(|| format!("loading {}", kb_path.display()))?;
    for _ in 0..iterations {
        let result = run_iteration(store.kb(), &table, &config, Utc::now())?;
        let s = result.stats;
        println!(
            "iteration {}: promoted {}, queued {}, deferred {}, rejected {}, expired {}, new patterns {}",
            result.iteration, s.promoted, s.queued, s.deferred, s.rejected, s.expired, s.new_patterns
        );
        if verbose {
            for a in &result.promoted {
                println!("  promoted {} (score {})", a.key(), a.score);
            }
            for c in &result.queued_for_supervision {
                println!("  queued {} (score {})", c.key, c.score);
            }
            for (c, violation) in &result.rejected {
                println!("  rejected {}: {violation}", c.key);
            }
        }
        store.commit(result.records)?;
    }
    Ok(())
}

fn export(kb_path: &Path, base: &str, out: Option<&Path>) -> Outcome {
    require(kb_path, "KB log")?;
    let kb = load_kb(kb_path).with_context(|| format!("loading {}", kb_path.display()))?;
    let triples = export_rdf(&kb, base).map_err(usage)?;
    match out {
        Some(path) => fs::write(path, triples).with_context(|| format!("writing {}", path.display()))?,
        None => io::stdout().write_all(triples.as_bytes()).context("writing to stdout")?,
    }
    Ok(())
}

fn serve(kb_path: &Path, allpairs: Option<&Path>, config: Option<&Path>, addr: SocketAddr) -> Outcome {
    require(kb_path, "KB log")?;
    let config = learner_config(config)?;
    let table = allpairs.map(load_tables).transpose()?;
    let store = KbStore::open(kb_path).with_context(|| format!("loading {}", kb_path.display()))?;
    let app = App::new(store, table, config);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("starting the runtime")?;
    runtime.block_on(async {
        let listener = nell_service::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        let local = listener.local_addr().context("reading the bound address")?;
        println!("listening on http://{local}");
        io::stdout().flush().ok();
        nell_service::serve(listener, app).await.context("server stopped")?;
        Ok(())
    })
}

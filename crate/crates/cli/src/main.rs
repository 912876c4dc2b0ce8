//! `smt`: command-line driver for the translation toolkit.
//!
//! Every subcommand except `make-fixture` reads an experiment config
//! (`--config`). Stage commands take their inputs and outputs as explicit
//! paths; `run-grid`, `decode` and `tune` work in the config's work
//! directory.
//!
//! Exit codes: 0 on success, 1 on a failed stage or missing artifact, 2 on
//! a bad config or command line.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smt_core::align::{align_corpus, read_pharaoh, write_pharaoh};
use smt_core::corpus::{build_vocabulary, load_parallel, read_lines, write_lines};
use smt_core::fixture::{Fixture, FixtureSpec};
use smt_core::kv::KvFile;
use smt_core::lm::{self, binarize, load_binary, read_arpa, write_arpa, LanguageModel};
use smt_core::metrics::{evaluate_system, EvaluationReport};
use smt_core::morpho::{apply_preprocessing, PreprocessStep, Preprocessor};
use smt_core::phrase::score_table;
use smt_core::pipeline::{
    effective_spec, fixture_config_text, grid_configs, retune, translate, ExperimentConfig, PipelineError, RunArtifacts,
};
use smt_core::translit::{harvest_one_to_one, mine_pairs, transliterate_all, write_candidates, CharModel, MinedPairSet};

#[derive(Parser)]
#[command(name = "smt", version, about = "Phrase-based statistical machine translation")]
struct Cli {
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize the training bitext and drop empty or overlong pairs.
    Clean {
        #[arg(long)]
        source_out: PathBuf,
        #[arg(long)]
        target_out: PathBuf,
    },
    /// Apply the system's source preprocessing to a tokenized file.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Vocabulary for compound splitting; built from the input if absent.
        #[arg(long)]
        vocabulary: Option<PathBuf>,
    },
    /// Word-align a tokenized bitext; writes `i-j` links per line.
    Align {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Extract and score a phrase table from an aligned bitext.
    Extract {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a Kneser-Ney language model on tokenized text.
    LmTrain {
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        arpa: Option<PathBuf>,
        #[arg(long)]
        binary: Option<PathBuf>,
    },
    /// Print the log10 probability of each input line, then perplexity.
    LmQuery {
        /// ARPA or binary model.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Mine transliteration pairs from one-to-one aligned words.
    TranslitMine {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        alignment: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Transliterate words (one per line) with a model trained on mined pairs.
    Translit {
        #[arg(long)]
        mined: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Translate raw text with the trained run in the config's work dir.
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Re-tune the weights of the trained run on the development split.
    Tune,
    /// Score a hypothesis file against references (tokenized, one per line).
    Score {
        #[arg(long)]
        hypothesis: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Write a synthetic parallel corpus and a grid config over it.
    MakeFixture {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train and evaluate every configuration of the grid.
    RunGrid {
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e.exit_code() {
            2 => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn run_err<T, E: Display>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Run(e.to_string()))
}

fn load_configs(path: Option<&Path>) -> Result<Vec<ExperimentConfig>, Failure> {
    let path = path.ok_or_else(|| Failure::Config("--config is required".into()))?;
    let kv = KvFile::load(path).map_err(|e| Failure::Config(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(grid_configs(&kv, base)?)
}

fn single_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let mut configs = load_configs(path)?;
    if configs.len() != 1 {
        return Err(Failure::Config(format!(
            "this command needs a single configuration, the config expands to {}",
            configs.len()
        )));
    }
    Ok(configs.remove(0))
}

fn tokenized(path: &Path) -> Result<Vec<Vec<String>>, Failure> {
    Ok(run_err(read_lines(path))?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn bitext(source: &Path, target: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>, Failure> {
    let (s, t) = (tokenized(source)?, tokenized(target)?);
    if s.len() != t.len() {
        return Err(Failure::Run(format!("{} source lines but {} target lines", s.len(), t.len())));
    }
    Ok(s.into_iter().zip(t).collect())
}

fn joined(sentences: &[Vec<String>]) -> Vec<String> {
    sentences.iter().map(|s| s.join(" ")).collect()
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let config_path = cli.config.as_deref();
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Clean { source_out, target_out } => {
            let c = single_config(config_path)?;
            let corpus = run_err(load_parallel(&c.train_source, &c.train_target, None))?;
            let t = corpus.sentence_pairs((c.source_script, c.target_script), c.assume_tokenized, c.max_sentence_len);
            let (src, tgt): (Vec<Vec<String>>, Vec<Vec<String>>) =
                t.pairs.into_iter().map(|p| (p.source, p.target)).unzip();
            run_err(write_lines(&source_out, &joined(&src)))?;
            run_err(write_lines(&target_out, &joined(&tgt)))?;
            log::info!("{} pairs kept, {} dropped", src.len(), t.dropped.len());
        }
        Command::Preprocess { input, output, vocabulary } => {
            let c = single_config(config_path)?;
            let sentences = tokenized(&input)?;
            let mut spec = effective_spec(&c, vocabulary.as_deref());
            if spec.steps.contains(&PreprocessStep::Compound) && spec.compound_vocabulary.is_none() {
                let p = sibling(&output, "vocab");
                run_err(build_vocabulary(&sentences).write(&p))?;
                log::info!("compound vocabulary written to {}", p.display());
                spec.compound_vocabulary = Some(p);
            }
            let preprocessor = run_err(Preprocessor::from_spec(&spec))?;
            let (processed, changes) = run_err(apply_preprocessing(&sentences, &preprocessor))?;
            run_err(write_lines(&output, &joined(&processed)))?;
            log::info!("{} tokens changed", changes.len());
        }
        Command::Align { source, target, output } => {
            let c = single_config(config_path)?;
            let b = bitext(&source, &target)?;
            let aligned = run_err(align_corpus(&b, &c.align_options()?))?;
            run_err(write_pharaoh(&output, &aligned.alignments))?;
        }
        Command::Extract {
            source,
            target,
            alignment,
            output,
        } => {
            let c = single_config(config_path)?;
            let b = bitext(&source, &target)?;
            let links = run_err(read_pharaoh(&alignment, &b))?;
            let table = score_table(&b, &links, c.max_phrase_len);
            run_err(table.write(&output))?;
            log::info!("{} phrase pairs", table.len());
        }
        Command::LmTrain { input, arpa, binary } => {
            let c = single_config(config_path)?;
            if arpa.is_none() && binary.is_none() {
                return Err(Failure::Config("give --arpa, --binary or both".into()));
            }
            let mut lines = Vec::new();
            for p in &input {
                lines.extend(run_err(read_lines(p))?);
            }
            let model = run_err(lm::train(&lines, c.lm_order))?;
            if let Some(p) = &arpa {
                run_err(write_arpa(&model, p))?;
            }
            if let Some(p) = &binary {
                run_err(binarize(&model, p))?;
            }
        }
        Command::LmQuery { model, input } => {
            single_config(config_path)?;
            let sentences = tokenized(&input)?;
            let bytes = run_err(fs::read(&model))?;
            if bytes.starts_with(b"MSLM") {
                query(&run_err(load_binary(&model))?, &sentences, &mut out)?;
            } else {
                query(&run_err(read_arpa(&model))?, &sentences, &mut out)?;
            }
        }
        Command::TranslitMine {
            source,
            target,
            alignment,
            output,
        } => {
            let c = single_config(config_path)?;
            let b = bitext(&source, &target)?;
            let links = run_err(read_pharaoh(&alignment, &b))?;
            let pairs = harvest_one_to_one(&b, &links);
            let mined = run_err(mine_pairs(&pairs, c.translit_em_rounds))?.with_threshold(c.translit_threshold);
            run_err(mined.write(&output))?;
            log::info!("{} of {} pairs accepted", mined.accepted().len(), pairs.len());
        }
        Command::Translit { mined, input, output } => {
            let c = single_config(config_path)?;
            let set = run_err(MinedPairSet::read(&mined, c.translit_threshold))?;
            let model = run_err(CharModel::from_mined(&set))?;
            let words: BTreeSet<String> = run_err(read_lines(&input))?
                .into_iter()
                .map(|l| l.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect();
            run_err(write_candidates(&output, &transliterate_all(&words, &model, c.translit_candidates)))?;
        }
        Command::Decode { input, output } => {
            let c = single_config(config_path)?;
            let artifacts = RunArtifacts::load(&c.work_dir)?;
            let t = translate(&c, &artifacts, &input, &output)?;
            log::info!("{} lines, {} untranslated tokens", t.best.len(), t.untranslated());
        }
        Command::Tune => {
            let c = single_config(config_path)?;
            let artifacts = RunArtifacts::load(&c.work_dir)?;
            let w = retune(&c, &artifacts)?;
            run_err(write!(out, "{}", w.to_text()))?;
        }
        Command::Score { hypothesis, reference } => {
            let c = single_config(config_path)?;
            let r = run_err(evaluate_system(&hypothesis, &reference, &c.pair_label(), &c.system_label()))?;
            run_err(write!(out, "{}", EvaluationReport::tsv(&[r])))?;
        }
        Command::MakeFixture { out_dir, seed } => {
            run_err(fs::create_dir_all(&out_dir))?;
            let out_dir = run_err(out_dir.canonicalize())?;
            let fixture = Fixture::generate(&FixtureSpec {
                seed,
                ..FixtureSpec::default()
            });
            let paths = run_err(fixture.write(&out_dir.join("data")))?;
            let config = out_dir.join("grid.conf");
            run_err(fs::write(&config, fixture_config_text(&paths, &out_dir.join("work"), seed)))?;
            run_err(writeln!(out, "{}", config.display()))?;
        }
        Command::RunGrid { report } => {
            let configs = load_configs(config_path)?;
            let grid = smt_core::pipeline::run_grid(&configs)?;
            let tsv = grid.report_tsv();
            if let Some(p) = &report {
                run_err(fs::write(p, &tsv))?;
            }
            run_err(write!(out, "{tsv}"))?;
            if !grid.failures.is_empty() {
                let names: Vec<String> = grid.failures.iter().map(|(n, e)| format!("{n}: {e}")).collect();
                return Err(Failure::Run(format!("failed runs: {}", names.join("; "))));
            }
        }
    }
    Ok(())
}

/// `path` with `.ext` appended.
fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(format!(".{ext}"));
    PathBuf::from(p)
}

fn query<M: LanguageModel>(model: &M, sentences: &[Vec<String>], out: &mut impl Write) -> Result<(), Failure> {
    let mut total = 0.0;
    let mut tokens = 0;
    for s in sentences {
        let score = model.sentence_log10(s);
        total += score;
        tokens += s.len() + 1;
        run_err(writeln!(out, "{score:.4}\t{}", s.join(" ")))?;
    }
    let ppl = if tokens == 0 { 0.0 } else { 10f64.powf(-total / tokens as f64) };
    run_err(writeln!(out, "total\t{total:.4}\nperplexity\t{ppl:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Config(m) | Failure::Run(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}

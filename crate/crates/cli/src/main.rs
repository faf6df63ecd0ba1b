use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sentpair::model::load_word_vectors;
use sentpair::trainer::{compare_topologies, evaluate, model_gradcheck, prepare_examples, EpochSummary};
use sentpair::{load_model, load_sick_dir, save_model, train, Config, Model, PairExample, Split, TrainOptions};

#[derive(Parser)]
#[command(name = "sentpair", version, about = "Train and evaluate sentence-pair relatedness and entailment models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the train split, using the trial split for monitoring.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// SICK file, or a directory holding SICK.txt or per-split files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print metrics of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of every model gradient; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Read `sentence A<TAB>sentence B` lines on stdin and print predictions.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train topology I and II under identical settings and tabulate test metrics.
    CompareTopologies {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
    },
}

fn split_of(all: &[PairExample], split: Split) -> Vec<PairExample> {
    all.iter().filter(|e| e.split == split).cloned().collect()
}

fn load_data(path: &Path) -> Result<Vec<PairExample>> {
    let all = load_sick_dir(path).with_context(|| format!("loading {}", path.display()))?;
    let counts = sentpair::data::split_counts(&all);
    eprintln!(
        "loaded {} pairs ({})",
        all.len(),
        counts.iter().map(|(s, n)| format!("{s} {n}")).collect::<Vec<_>>().join(", ")
    );
    Ok(all)
}

fn print_epoch(s: &EpochSummary) {
    let mut line = format!("epoch {:>3}  loss {:.5}", s.epoch, s.train_loss);
    if s.rejected_steps > 0 {
        line += &format!("  rejected {}", s.rejected_steps);
    }
    if let Some(d) = &s.dev {
        if let Some(p) = d.report.pearson {
            line += &format!("  trial pearson {p:.4}");
        }
        if let Some(a) = d.report.accuracy {
            line += &format!("  trial accuracy {a:.4}");
        }
    }
    eprintln!("{line}");
}

fn cmd_train(config: &Path, data: &Path, out: &Path, log: Option<PathBuf>, epochs: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = Config::load(config)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let all = load_data(data)?;
    let (tr, dev) = (split_of(&all, Split::Train), split_of(&all, Split::Trial));
    if tr.is_empty() {
        bail!("{} has no training pairs", data.display());
    }
    let mut model = Model::new(&cfg)?;
    let log_path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log_file = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut on_epoch = |s: &EpochSummary| {
        print_epoch(s);
        false
    };
    let summary = train(
        &mut model,
        &tr,
        &dev,
        TrainOptions {
            eval_train: false,
            log: Some(&mut log_file),
            on_epoch: Some(&mut on_epoch),
        },
    )?;
    log_file.flush()?;
    if summary.truncated.sentences > 0 {
        eprintln!(
            "truncated {} sentences ({} tokens) to {} tokens",
            summary.truncated.sentences, summary.truncated.tokens, cfg.max_len
        );
    }
    save_model(out, &model)?;
    eprintln!("kept epoch {}; wrote {} and {}", summary.selected_epoch, out.display(), log_path.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: &Path, split: Split, json: bool) -> Result<()> {
    let model = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let examples = split_of(&load_data(data)?, split);
    if examples.is_empty() {
        bail!("no {split} pairs in {}", data.display());
    }
    let (items, _) = prepare_examples(&model, &examples)?;
    let eval = evaluate(&model.net, &model.params, &items)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&eval)?);
    } else {
        print!("{}", eval.report);
        if let Some(kl) = eval.mean_kl {
            println!("mean KL   {kl:.4}");
        }
        if let Some(nll) = eval.mean_nll {
            println!("mean NLL  {nll:.4}");
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, tolerance: f64) -> Result<bool> {
    let r = model_gradcheck(seed)?;
    for p in &r.per_param {
        println!("{:<24} {:>5} entries  max rel error {:.3e}", p.name, p.checked, p.max_rel_error);
    }
    println!("checked {} entries, max relative error {:.3e}", r.checked, r.max_rel_error);
    if let Some(w) = &r.worst {
        println!(
            "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    let ok = r.passes(tolerance);
    println!("{} (tolerance {tolerance:e})", if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn cmd_predict(ckpt: &Path) -> Result<()> {
    let model = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (n, line) in io::stdin().lock().lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((a, b)) = line.split_once('\t') else {
            bail!("line {}: expected two sentences separated by a tab", n + 1);
        };
        let p = model.predict_text(a, b).with_context(|| format!("line {}", n + 1))?;
        let mut fields = Vec::new();
        if let Some(s) = p.score {
            fields.push(s.to_string());
        }
        if let Some(l) = p.label {
            fields.push(l.to_string());
        }
        writeln!(out, "{}", fields.join("\t"))?;
    }
    Ok(())
}

fn cmd_compare(config: &Path, data: &Path, seeds: &[u64]) -> Result<()> {
    let cfg = Config::load(config)?;
    let all = load_data(data)?;
    let (tr, dev, mut test) = (
        split_of(&all, Split::Train),
        split_of(&all, Split::Trial),
        split_of(&all, Split::Test),
    );
    if tr.is_empty() {
        bail!("{} has no training pairs", data.display());
    }
    if test.is_empty() {
        eprintln!("no test pairs; evaluating on the training split");
        test = tr.clone();
    }
    let words = Arc::new(load_word_vectors(&cfg)?);
    let rows = compare_topologies(&cfg, words, &tr, &dev, &test, seeds)?;
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("{:<9} {:>5} {:>6} {:>9} {:>9} {:>9} {:>9}", "topology", "seed", "epoch", "pearson", "spearman", "mse", "accuracy");
    for r in rows {
        let m = &r.eval.report;
        println!(
            "{:<9} {:>5} {:>6} {:>9} {:>9} {:>9} {:>9}",
            r.topology.to_string(),
            r.seed,
            r.selected_epoch,
            opt(m.pearson),
            opt(m.spearman),
            opt(m.mse),
            opt(m.accuracy)
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            log,
            epochs,
            seed,
        } => cmd_train(&config, &data, &out, log, epochs, seed)?,
        Command::Eval { ckpt, data, split, json } => cmd_eval(&ckpt, &data, split, json)?,
        Command::Gradcheck { seed, tolerance } => return cmd_gradcheck(seed, tolerance),
        Command::Predict { ckpt } => cmd_predict(&ckpt)?,
        Command::CompareTopologies { config, data, seeds } => cmd_compare(&config, &data, &seeds)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

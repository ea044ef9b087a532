use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bridgeout::harness::{
    compare_methods, export_weight_histogram, gradient_check, histogram_panel, read_config_file, run_glm_check, run_trial, sweep,
    table1_methods, write_text, write_trial, ExperimentConfig, ExperimentKind, GlmCheckConfig, GradCheckConfig, SweepGrid,
};
use bridgeout::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "bridgeout",
    version,
    about = "Train and compare Bridgeout, Dropout and Shakeout regularized networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one trial (the first configured seed).
    Train(Common),
    /// Grid search over p and q (or c), selecting on validation error.
    Sweep(Common),
    /// Compare plain training, Dropout, Shakeout and Bridgeout across seeds.
    Table1(Common),
    /// Export weight histograms and near-zero fractions.
    Hist(Common),
    /// Compare the closed-form GLM penalty with a Monte-Carlo estimate.
    GlmCheck(GlmArgs),
    /// Compare backprop gradients with central differences.
    Gradcheck(GradArgs),
}

/// Flags shared by the experiment commands. Each has a config-file key of
/// the same name with dashes read as underscores.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    /// none, dropout, shakeout or bridgeout.
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    subset_size: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// A number, or `full`.
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    /// Any other config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => read_config_file(path)?,
            None => Vec::new(),
        };
        let flags = [
            ("kind", &self.kind),
            ("seeds", &self.seeds),
            ("seed", &self.seed),
            ("data_dir", &self.data_dir),
            ("out_dir", &self.out_dir),
            ("regularizer", &self.regularizer),
            ("p", &self.p),
            ("q", &self.q),
            ("c", &self.c),
            ("subset_size", &self.subset_size),
            ("epochs", &self.epochs),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("optimizer", &self.optimizer),
            ("activation", &self.activation),
            ("jobs", &self.jobs),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.push((k.to_string(), v.clone()));
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
        }
        Ok(pairs)
    }

    fn experiment(&self, default_kind: ExperimentKind) -> Result<(ExperimentConfig, Vec<(String, String)>)> {
        let mut pairs = self.pairs()?;
        if !pairs.iter().any(|(k, _)| k == "kind") {
            pairs.insert(0, ("kind".into(), default_kind.name().into()));
        }
        Ok((ExperimentConfig::from_pairs(&pairs)?, pairs))
    }
}

#[derive(Args, Debug)]
struct GlmArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// linear or logistic.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    beta_scale: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated layer widths, input first.
    #[arg(long)]
    sizes: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    c: Option<String>,
    #[arg(long)]
    fd_step: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

fn collect(config: &Option<PathBuf>, flags: &[(&str, &Option<String>)]) -> Result<Vec<(String, String)>> {
    let mut pairs = match config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.clone()));
        }
    }
    Ok(pairs)
}

fn slug(label: &str) -> String {
    label
        .chars()
        .filter_map(|c| match c {
            '(' | ',' => Some('-'),
            ')' | '=' => None,
            c => Some(c),
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn report_divergence<T>(cfg: &ExperimentConfig, r: Result<T>) -> Result<T> {
    if let Err(Error::Divergence { .. }) = &r {
        eprintln!("configuration at divergence:");
        for (k, v) in cfg.to_pairs() {
            eprintln!("  {k}={v}");
        }
    }
    r
}

fn cmd_train(args: &Common) -> Result<()> {
    let (cfg, _) = args.experiment(ExperimentKind::Table1)?;
    let seed = cfg.seeds[0];
    let trial = report_divergence(&cfg, run_trial(&cfg, seed))?;
    let dir = cfg
        .out_dir
        .join(cfg.kind.name())
        .join(slug(&cfg.regularizer.label()))
        .join(format!("seed_{seed}"));
    write_trial(&trial, &dir)?;
    println!(
        "{} {} seed={} test_error={} test_loss={:.6} val_error={} -> {}",
        cfg.kind,
        cfg.regularizer.label(),
        seed,
        fmt_opt(trial.test_error),
        trial.test_loss,
        fmt_opt(trial.validation_error),
        dir.display()
    );
    Ok(())
}

fn cmd_sweep(args: &Common) -> Result<()> {
    let (cfg, _) = args.experiment(ExperimentKind::Table1)?;
    let grid = SweepGrid::from_config(&cfg)?;
    let result = report_divergence(&cfg, sweep(&cfg, &grid))?;
    let dir = cfg.out_dir.join("sweep").join(cfg.kind.name());
    write_text(&dir.join(format!("{}.csv", cfg.regularizer.kind)), &result.to_csv())?;
    let best = result.best_point();
    let second = match (result.kind, best.second) {
        (_, None) => String::new(),
        (bridgeout::RegularizerKind::Shakeout, Some(c)) => format!(" c={c}"),
        (_, Some(q)) => format!(" q={q}"),
    };
    let summary = format!("best p={}{} mean_validation={:.4}\n", best.p, second, best.mean_validation);
    write_text(&dir.join(format!("{}_best.txt", cfg.regularizer.kind)), &summary)?;
    print!("{}", result.to_csv());
    print!("{summary}");
    Ok(())
}

fn cmd_table1(args: &Common) -> Result<()> {
    let (cfg, _) = args.experiment(ExperimentKind::Table1)?;
    let methods = table1_methods(&cfg)?;
    let summaries = report_divergence(&cfg, compare_methods(&cfg, &methods))?;
    let mut csv = String::from("method,mean,stderr,n\n");
    println!("{:<28} {:>10} {:>10}", "method", "mean", "stderr");
    for s in &summaries {
        let label = s.regularizer.label();
        let (mean, stderr) = match s.aggregate() {
            Ok(a) => (a.mean, a.stderr),
            Err(_) => (s.mean_metric(), f64::NAN),
        };
        println!("{label:<28} {mean:>10.3} {stderr:>10.3}");
        csv.push_str(&format!("\"{label}\",{mean:?},{stderr:?},{}\n", s.trials.len()));
        for t in &s.trials {
            let dir = cfg
                .out_dir
                .join(cfg.kind.name())
                .join(slug(&label))
                .join(format!("seed_{}", t.seed));
            write_trial(t, &dir)?;
        }
    }
    write_text(&cfg.out_dir.join(format!("{}_comparison.csv", cfg.kind.name())), &csv)?;
    Ok(())
}

fn cmd_hist(args: &Common) -> Result<()> {
    let (cfg, pairs) = args.experiment(ExperimentKind::SparsityHist)?;
    let methods = if pairs.iter().any(|(k, _)| k == "regularizer") {
        vec![cfg.regularizer]
    } else {
        histogram_panel(cfg.regularizer.p)?
    };
    let seed = cfg.seeds[0];
    let dir = cfg.out_dir.join("hist").join(cfg.kind.name());
    let mut summary = String::from("method,layer,near_zero_fraction\n");
    for m in methods {
        let run = cfg.with_regularizer(m);
        let trial = report_divergence(&run, run_trial(&run, seed))?;
        let path = dir.join(format!("{}.csv", slug(&m.label())));
        let hists = export_weight_histogram(&trial.network, cfg.bins, &path)?;
        for h in &hists {
            summary.push_str(&format!("\"{}\",{},{:?}\n", m.label(), h.layer, h.near_zero_fraction));
            println!("{:<28} layer {} near-zero {:.4}", m.label(), h.layer, h.near_zero_fraction);
        }
    }
    write_text(&dir.join("near_zero_summary.csv"), &summary)?;
    println!("histograms written to {}", dir.display());
    Ok(())
}

fn cmd_glm(args: &GlmArgs) -> Result<()> {
    let pairs = collect(
        &args.config,
        &[
            ("glm_family", &args.family),
            ("glm_n", &args.n),
            ("glm_d", &args.d),
            ("glm_beta_scale", &args.beta_scale),
            ("mc_samples", &args.samples),
            ("p", &args.p),
            ("q", &args.q),
            ("seed", &args.seed),
        ],
    )?;
    let cfg = GlmCheckConfig::from_pairs(&pairs)?;
    let out = run_glm_check(&cfg)?;
    let rel = (out.closed_form_q2 - out.ridge).abs() / out.ridge.abs().max(f64::MIN_POSITIVE);
    println!("{}", out.report.to_record());
    println!("z_score={:.3}", out.report.z_score());
    println!("closed_form_q2={:?} ridge={:?} rel_diff={:.3e}", out.closed_form_q2, out.ridge, rel);
    Ok(())
}

fn cmd_gradcheck(args: &GradArgs) -> Result<()> {
    let pairs = collect(
        &args.config,
        &[
            ("sizes", &args.sizes),
            ("activation", &args.activation),
            ("regularizer", &args.regularizer),
            ("p", &args.p),
            ("q", &args.q),
            ("c", &args.c),
            ("fd_step", &args.fd_step),
            ("seed", &args.seed),
        ],
    )?;
    let cfg = GradCheckConfig::from_pairs(&pairs)?;
    let r = gradient_check(&cfg)?;
    println!(
        "{} {} sizes={:?} max_rel_error={:.3e} checked={} skipped={}",
        cfg.regularizer.label(),
        cfg.activation.name(),
        cfg.sizes,
        r.max_rel_error,
        r.checked,
        r.skipped
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Table1(a) => cmd_table1(a),
        Command::Hist(a) => cmd_hist(a),
        Command::GlmCheck(a) => cmd_glm(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

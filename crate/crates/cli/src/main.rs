use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robustloc::bench::run_experiment;
use robustloc::config::RunConfig;
use robustloc::conformal::{demo_scenario, CodDecision};
use robustloc::fingerprint::{held_out_queries, localize, matching_trial, survey_site, FingerprintDb};
use robustloc::report::{self, MatchRow};
use robustloc::Error;

#[derive(Parser)]
#[command(name = "robustloc", version, about = "Robust nonlinear filtering with conformal outlier detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one UNGM trajectory and write it as CSV.
    Simulate(Common),
    /// Monte Carlo comparison of the filters with and without COD.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 unless every ordering check passes.
        #[arg(long)]
        check: bool,
    },
    /// Conformal outlier detection on 20 synthetic scores.
    CodDemo(Common),
    /// Fingerprint database and matching.
    Fingerprint {
        #[command(subcommand)]
        action: FingerprintAction,
    },
}

#[derive(Subcommand)]
enum FingerprintAction {
    /// Survey a synthetic site and write the database and calibration scores.
    Build(Common),
    /// Match held-out queries against a database.
    Match(Common),
}

enum Failure {
    Validation(String),
    Runtime(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::Dimension(_)
            | Error::Parse { .. }
            | Error::Csv(_)
            | Error::Empty(_) => Failure::Validation(e.to_string()),
            Error::Io(_) | Error::Decomposition(_) | Error::InvalidBelief(_) => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn open(path: &Path, what: &str) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::Validation(format!("cannot open {what} {}: {e}", path.display())))
}

fn simulate(common: &Common) -> CmdResult {
    let cfg = load(common)?;
    let traj = cfg.trajectory()?;
    let path = cfg.output.dir.join("trajectory.csv");
    report::write_trajectory(create(&path)?, &cfg.metadata_header(), &traj)?;
    println!("wrote {} steps to {}", traj.len(), path.display());
    Ok(())
}

fn bench(common: &Common, check: bool) -> CmdResult {
    let cfg = load(common)?;
    let header = cfg.metadata_header();
    let mut tables = Vec::with_capacity(cfg.bench.cases.len());
    for &case in &cfg.bench.cases {
        let table = run_experiment(&cfg.experiment(case))?;
        let path = cfg.output.dir.join(format!("bench_cdf_{case}.csv"));
        report::write_cdf(create(&path)?, &header, &table)?;
        tables.push(table);
    }
    let dir = &cfg.output.dir;
    report::write_runs(create(&dir.join("bench_runs.csv"))?, &header, &tables)?;
    report::write_summary(create(&dir.join("bench_summary.csv"))?, &header, &tables)?;
    println!("mean MSE over {} runs (seed {})", cfg.bench.runs, cfg.seed);
    print!("{}", report::format_summary(&tables));
    let diverged: usize = tables.iter().flat_map(|t| &t.summaries).map(|s| s.diverged).sum();
    if diverged > 0 {
        println!("* diverged runs excluded from the mean: {diverged}");
    }
    println!("wrote CSVs to {}", dir.display());
    if check {
        let checks = report::all_checks(&tables);
        if checks.is_empty() {
            return Err(Failure::Check("no ordering check applies to the selected regimes".into()));
        }
        let failed = checks.iter().filter(|c| !c.passed).count();
        for c in &checks {
            println!("[{}] {} ({})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        if failed > 0 {
            return Err(Failure::Check(format!("{failed} of {} ordering checks failed", checks.len())));
        }
    }
    Ok(())
}

fn cod_demo(common: &Common) -> CmdResult {
    let cfg = load(common)?;
    let demo = demo_scenario(cfg.seed, cfg.cod.alpha)?;
    let decisions: Vec<CodDecision> = demo
        .test
        .iter()
        .map(|&score| CodDecision {
            score,
            threshold: demo.threshold,
            is_outlier: score > demo.threshold,
            inflation_applied: score > demo.threshold,
        })
        .collect();
    let path = cfg.output.dir.join("cod_demo.csv");
    report::write_decisions(create(&path)?, &cfg.metadata_header(), &decisions)?;
    println!(
        "calibration scores: {}, alpha = {}, threshold = {:.4}",
        demo.calibration.len(),
        demo.alpha,
        demo.threshold
    );
    println!("injected indices: {:?}", demo.injected);
    println!("flagged indices:  {:?}", demo.flagged);
    println!("wrote {}", path.display());
    Ok(())
}

fn fingerprint_build(common: &Common) -> CmdResult {
    let cfg = load(common)?;
    let site = survey_site(&cfg.fingerprint.site, cfg.seed)?;
    let header = cfg.metadata_header();
    let (db_path, cal_path) = (cfg.db_path(), cfg.calibration_path());
    let mut db_file = create(&db_path)?;
    db_file.write_all(header.as_bytes()).map_err(Error::from)?;
    site.db.write_csv(db_file)?;
    report::write_scores(create(&cal_path)?, &header, &site.calibration)?;
    println!(
        "wrote {} nodes to {} and {} calibration scores to {}",
        site.db.len(),
        db_path.display(),
        site.calibration.len(),
        cal_path.display()
    );
    Ok(())
}

fn fingerprint_match(common: &Common) -> CmdResult {
    let cfg = load(common)?;
    let f = &cfg.fingerprint;
    let db = FingerprintDb::read_csv(open(&cfg.db_path(), "database")?)?;
    let calibration = report::read_scores(open(&cfg.calibration_path(), "calibration scores")?)?;
    let site = survey_site(&f.site, cfg.seed)?;
    if site.db != db {
        eprintln!("warning: the database differs from the survey regenerated with seed {}", cfg.seed);
    }
    let queries = held_out_queries(&site, f.site.sensor_noise, f.queries, cfg.seed);
    let mut rows = Vec::with_capacity(queries.len());
    for (i, (label, m)) in queries.iter().enumerate() {
        let loc = localize(&db, m, &calibration, f.alpha)?;
        rows.push(MatchRow {
            query: i,
            true_node: *label,
            point_estimate: loc.node,
            covered: loc.set.contains(label),
            set: loc.set,
        });
    }
    let path = cfg.output.dir.join("fingerprint_matches.csv");
    report::write_matches(create(&path)?, &cfg.metadata_header(), &rows)?;
    let n = rows.len() as f64;
    let covered = rows.iter().filter(|r| r.covered).count() as f64 / n;
    let accuracy = rows.iter().filter(|r| r.point_estimate == r.true_node).count() as f64 / n;
    let mean_size = rows.iter().map(|r| r.set.len()).sum::<usize>() as f64 / n;
    println!("queries: {}  alpha: {}", rows.len(), f.alpha);
    println!("coverage: {covered:.4}  point accuracy: {accuracy:.4}  mean set size: {mean_size:.3}");
    if calibration.is_empty() {
        println!("no calibration scores: every set holds all {} nodes", db.len());
    }

    let trial = matching_trial(&cfg.matching(), cfg.seed)?;
    println!(
        "contaminated queries: accuracy {:.4} -> {:.4} with outlier gating, mean error {:.3} m -> {:.3} m ({:.1}% of readings flagged)",
        trial.ungated.accuracy,
        trial.gated.accuracy,
        trial.ungated.mean_error_m,
        trial.gated.mean_error_m,
        100.0 * trial.flag_rate
    );
    println!("wrote {}", path.display());
    Ok(())
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
    let result = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Bench { common, check } => bench(common, *check),
        Command::CodDemo(c) => cod_demo(c),
        Command::Fingerprint { action } => match action {
            FingerprintAction::Build(c) => fingerprint_build(c),
            FingerprintAction::Match(c) => fingerprint_match(c),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(3)
        }
    }
}

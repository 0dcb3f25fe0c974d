use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use switchreg::cv::{self, CvConfig, CvReport};
use switchreg::data::{validate, CheckedConfig, Dataset, FitReport, LambdaSetting, ModelConfig};
use switchreg::em;
use switchreg::sim::{self, SimDesign};
use switchreg::Error;

#[derive(Parser)]
#[command(name = "switchreg", version, about = "Switching nonparametric regression for multi-curve data")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model; smoothing parameters set to "cv" are selected by cross-validation.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CV grid used when the config asks for "cv".
        #[arg(long)]
        grid: Option<String>,
    },
    /// Select smoothing parameters by cross-validation, then fit.
    Cv {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `lo:hi:count` (log-spaced) or a comma-separated list.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Posterior state probabilities and classes under a previous fit.
    Classify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one dataset from a simulation design.
    Simulate {
        #[arg(long)]
        design: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte-Carlo study of a simulation design.
    Simstudy {
        #[arg(long)]
        design: u8,
        #[arg(long, default_value_t = 300)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A failed command: exit code 2 for input problems, 3 for numerical ones.
#[derive(Debug, Serialize)]
struct Failure {
    code: u8,
    kind: &'static str,
    errors: Vec<String>,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Self {
        Failure { code: 2, kind: "input", errors: vec![msg.into()] }
    }

    fn from_errors(errs: Vec<Error>) -> Self {
        let numerical = errs.iter().any(Error::is_numerical);
        Failure {
            code: if numerical { 3 } else { 2 },
            kind: if numerical { "numerical" } else { "input" },
            errors: errs.iter().map(ToString::to_string).collect(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from_errors(vec![e])
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 || rayon::ThreadPoolBuilder::new().num_threads(t).build_global().is_err() {
            eprintln!("error: --threads must be a positive integer");
            return ExitCode::from(2);
        }
    }
    let out = match &cli.command {
        Command::Fit { out, .. }
        | Command::Cv { out, .. }
        | Command::Classify { out, .. }
        | Command::Simulate { out, .. }
        | Command::Simstudy { out, .. } => out.clone(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            for e in &f.errors {
                eprintln!("error: {e}");
            }
            if fs::create_dir_all(&out).is_ok() {
                if let Ok(json) = serde_json::to_string_pretty(&f) {
                    let _ = write_atomic(&out, "error.json", json.as_bytes());
                }
            }
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Fit { data, config, out, grid } => {
            let (dataset, checked) = load(&data, &config, &out)?;
            let cv_config = cv_config(grid.as_deref())?;
            let (report, cv_report) = cv::fit(&dataset, &checked, &cv_config)?;
            emit_fit(&out, &report, cv_report.as_ref())
        }
        Command::Cv { data, config, out, grid } => {
            let (dataset, mut checked) = load(&data, &config, &out)?;
            if !checked.config.covariance.kind.is_diagonal() {
                return Err(Failure::input("CV unsupported for this covariance kind"));
            }
            let cv_config = cv_config(grid.as_deref())?;
            checked.config.lambdas = LambdaSetting::Keyword("cv".into());
            let (report, cv_report) = cv::select_lambdas(&dataset, &checked, &cv_config)?;
            emit_fit(&out, &report, Some(&cv_report))
        }
        Command::Classify { data, config, fit, out } => {
            let (dataset, checked) = load(&data, &config, &out)?;
            let text = read(&fit)?;
            let report = FitReport::from_json(&text)?;
            let posteriors = em::posterior_marginals(&dataset, &checked, &report.theta)?;
            write_atomic(&out, "posteriors.csv", posteriors_csv(&posteriors).as_bytes())?;
            write_atomic(&out, "classified.csv", classified_csv(&posteriors).as_bytes())
        }
        Command::Simulate { design, seed, out } => {
            let mut d = SimDesign::preset(design)?;
            d.seed = seed;
            prepare_out(&out)?;
            let generated = sim::generate_dataset(&d, 0)?;
            let mut buf = Vec::new();
            generated.data.write_csv(&mut buf)?;
            write_atomic(&out, "data.csv", &buf)?;
            let mut states = String::from("replicate,point,state\n");
            for (k, row) in generated.states.iter().enumerate() {
                for (i, s) in row.iter().enumerate() {
                    states.push_str(&format!("{},{},{}\n", k + 1, i + 1, s + 1));
                }
            }
            write_atomic(&out, "states.csv", states.as_bytes())
        }
        Command::Simstudy { design, reps, seed, out } => {
            let mut d = SimDesign::preset(design)?;
            if reps == 0 {
                return Err(Failure::input("--reps must be at least 1"));
            }
            d.replications = reps;
            d.seed = seed;
            prepare_out(&out)?;
            let config = d.fit_config()?;
            log::info!("running {reps} replications of design {design}");
            let report = sim::run_study(&d, &config)?;
            write_atomic(&out, "study.json", report.to_json()?.as_bytes())?;
            write_atomic(&out, "table_latent.csv", report.latent_table_csv().as_bytes())?;
            write_atomic(&out, "table_covariance.csv", report.covariance_table_csv().as_bytes())?;
            write_atomic(&out, "emse.csv", report.emse_csv().as_bytes())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))
}

fn prepare_out(out: &Path) -> Outcome {
    fs::create_dir_all(out).map_err(|e| Failure::input(format!("cannot create {}: {e}", out.display())))
}

/// Reads and validates every input before any fitting starts.
fn load(data: &Path, config: &Path, out: &Path) -> Result<(Dataset, CheckedConfig), Failure> {
    let data_text = read(data)?;
    let config_text = read(config)?;
    prepare_out(out)?;
    let dataset = Dataset::read_csv(data_text.as_bytes())?;
    let config = ModelConfig::from_json(&config_text)?;
    let checked = validate(&dataset, &config).map_err(Failure::from_errors)?;
    Ok((dataset, checked))
}

fn cv_config(grid: Option<&str>) -> Result<CvConfig, Failure> {
    let mut c = CvConfig::default();
    if let Some(spec) = grid {
        c.grid = parse_grid(spec).ok_or_else(|| Failure::input(format!("bad grid {spec:?}; expected lo:hi:count or a comma-separated list")))?;
    }
    c.check()?;
    Ok(c)
}

fn parse_grid(spec: &str) -> Option<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').map(str::trim).collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].parse().ok()?;
        let hi: f64 = parts[1].parse().ok()?;
        let count: usize = parts[2].parse().ok()?;
        if count == 0 || !(lo > 0.0) || !(hi >= lo) {
            return None;
        }
        return Some(cv::log_grid(lo, hi, count));
    }
    spec.split(',').map(|v| v.trim().parse::<f64>().ok()).collect()
}

fn emit_fit(out: &Path, report: &FitReport, cv_report: Option<&CvReport>) -> Outcome {
    write_atomic(out, "fit.json", report.to_json()?.as_bytes())?;
    let mut curves = String::from("x");
    for j in 0..report.fitted.len() {
        curves.push_str(&format!(",f{}_hat", j + 1));
    }
    curves.push('\n');
    for (i, x) in report.x.iter().enumerate() {
        curves.push_str(&x.to_string());
        for f in &report.fitted {
            curves.push_str(&format!(",{}", f[i]));
        }
        curves.push('\n');
    }
    write_atomic(out, "curves.csv", curves.as_bytes())?;
    write_atomic(out, "posteriors.csv", posteriors_csv(&report.posteriors).as_bytes())?;
    write_atomic(out, "classified.csv", classified_csv(&report.posteriors).as_bytes())?;
    if let Some(c) = cv_report {
        let json = serde_json::to_string_pretty(c).map_err(|e| Failure::input(e.to_string()))?;
        write_atomic(out, "cv.json", json.as_bytes())?;
    }
    Ok(())
}

fn posteriors_csv(post: &[Vec<Vec<f64>>]) -> String {
    let mut s = String::from("replicate,point,state,probability\n");
    for (k, rep) in post.iter().enumerate() {
        for (i, p) in rep.iter().enumerate() {
            for (j, v) in p.iter().enumerate() {
                s.push_str(&format!("{},{},{},{}\n", k + 1, i + 1, j + 1, v));
            }
        }
    }
    s
}

fn classified_csv(post: &[Vec<Vec<f64>>]) -> String {
    let mut s = String::from("replicate,point,state,tie\n");
    for (k, rep) in em::classify(post).iter().enumerate() {
        for (i, c) in rep.iter().enumerate() {
            s.push_str(&format!("{},{},{},{}\n", k + 1, i + 1, c.state + 1, c.tie));
        }
    }
    s
}

/// Writes `dir/name` through a temporary file and a rename.
fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Outcome {
    let tmp = dir.join(format!(".{name}.tmp"));
    let fail = |e: std::io::Error| Failure::input(format!("cannot write {}: {e}", dir.join(name).display()));
    let mut f = fs::File::create(&tmp).map_err(fail)?;
    f.write_all(bytes).map_err(fail)?;
    f.sync_all().map_err(fail)?;
    fs::rename(&tmp, dir.join(name)).map_err(fail)
}

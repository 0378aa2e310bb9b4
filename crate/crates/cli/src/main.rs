use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vcache::geometry::CacheGeometry;
use vcache::scenario::{self, Bundle, Scenario};

#[derive(Parser)]
#[command(name = "vcache", version, about = "Virtualized cache hierarchy simulator and probing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or a bundled scenario by name.
    Run(RunArgs),
    /// List the bundled scenarios.
    List,
    /// Parse and check a scenario without running it.
    Validate(ScenarioArgs),
    /// Build every eviction set reachable at the given page offsets.
    BuildEvsets(EvsetArgs),
    /// Build color filters and classify fresh pages.
    Vcol(VcolArgs),
    /// Monitor sets against an optional polluter.
    Vscan(VscanArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario path or bundled name.
    #[arg(value_name = "SCENARIO")]
    positional: Option<String>,
    #[arg(long, value_name = "PATH")]
    scenario: Option<String>,
    /// Geometry override as a `key=value` file.
    #[arg(long, value_name = "PATH")]
    geometry: Option<PathBuf>,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Write the artifact bundle here instead of printing the summary only.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvsetArgs {
    #[arg(long, value_name = "PATH")]
    geometry: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "llc")]
    level: String,
    /// Page offsets, e.g. 0x0,0x40.
    #[arg(long, value_delimiter = ',', default_value = "0x0")]
    offset: Vec<String>,
    /// Include the final cache contents as cache_state.csv.
    #[arg(long)]
    dump_state: bool,
}

#[derive(Args)]
struct VcolArgs {
    #[arg(long, value_name = "PATH")]
    geometry: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    /// Pages to classify.
    #[arg(long, alias = "budget", default_value_t = 2000)]
    pages: usize,
    /// Also write the color histogram to this file.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VscanArgs {
    #[arg(long, value_name = "PATH")]
    geometry: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 5)]
    cycles: usize,
    /// Monitor interval in ms.
    #[arg(long, default_value_t = 1000.0)]
    interval: f64,
    /// Initial wait window in ms.
    #[arg(long, default_value_t = 7.0)]
    window: f64,
    /// Sets per (color, offset) partition.
    #[arg(long, default_value_t = 4)]
    f: usize,
    /// Polluter accesses per ms; 0 runs quiet.
    #[arg(long, default_value_t = 0.0)]
    polluter: f64,
    #[arg(long, value_delimiter = ',', default_value = "0x0")]
    offset: Vec<String>,
    #[arg(long)]
    dump_state: bool,
}

enum Failure {
    Validation(String),
    Run(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("aborted: {msg}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::List => {
            for (name, text) in scenario::BUNDLED {
                let s = Scenario::parse(text).map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
                println!("{name}\t{}", s.experiment.name());
            }
            Ok(())
        }
        Command::Validate(a) => {
            let (label, s) = load(&a)?;
            println!("{label}: ok ({}, policy {})", s.experiment.name(), s.policy);
            Ok(())
        }
        Command::Run(a) => {
            let (_, s) = load(&a.scenario)?;
            execute(&s, &a.common).map(drop)
        }
        Command::BuildEvsets(a) => {
            let offsets = parse_offsets(&a.offset)?;
            let text = format!(
                "[scenario]\nname = \"build-evsets\"\nexperiment = \"evsets\"\n[experiment]\nlevel = \"{}\"\noffsets = {offsets:?}\ndump_state = {}\n",
                a.level.to_ascii_lowercase(),
                a.dump_state
            );
            let s = adhoc(&text, a.geometry.as_deref())?;
            execute(&s, &a.common).map(drop)
        }
        Command::Vcol(a) => {
            let text = format!("[scenario]\nname = \"vcol\"\nexperiment = \"vcol\"\n[experiment]\npages = {}\n", a.pages);
            let s = adhoc(&text, a.geometry.as_deref())?;
            let bundle = execute(&s, &a.common)?;
            if let Some(path) = &a.report {
                std::fs::write(path, &bundle.files["histogram.csv"])
                    .map_err(|e| Failure::Run(format!("writing {}: {e}", path.display())))?;
            }
            Ok(())
        }
        Command::Vscan(a) => {
            let offsets = parse_offsets(&a.offset)?;
            let mut text = format!(
                "[scenario]\nname = \"vscan\"\nexperiment = \"vscan\"\nduration_ms = {:?}\n[monitor]\ninterval_ms = {:?}\nwindow_ms = {:?}\nwindow_min_ms = {:?}\nwindow_max_ms = {:?}\nf = {}\n[experiment]\noffsets = {offsets:?}\ndump_state = {}\n",
                a.cycles.max(1) as f64 * a.interval,
                a.interval,
                a.window,
                a.window.min(1.0),
                a.window.max(7.0),
                a.f,
                a.dump_state
            );
            if a.polluter > 0.0 {
                text.push_str(&format!("[[tenant]]\nkind = \"polluter\"\nrate = {:?}\n", a.polluter));
            }
            let s = adhoc(&text, a.geometry.as_deref())?;
            execute(&s, &a.common).map(drop)
        }
    }
}

fn parse_offsets(raw: &[String]) -> Result<Vec<u64>, Failure> {
    raw.iter()
        .map(|s| {
            let t = s.trim();
            let v = match t.strip_prefix("0x") {
                Some(h) => u64::from_str_radix(h, 16),
                None => t.parse(),
            };
            v.map_err(|_| Failure::Validation(format!("bad offset `{t}`")))
        })
        .collect()
}

fn read_geometry(path: &Path) -> Result<CacheGeometry, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?;
    CacheGeometry::from_kv(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn adhoc(text: &str, geometry: Option<&Path>) -> Result<Scenario, Failure> {
    let s = Scenario::parse(text).map_err(|e| Failure::Validation(e.to_string()))?;
    match geometry {
        Some(p) => s.with_geometry(read_geometry(p)?).map_err(|e| Failure::Validation(e.to_string())),
        None => Ok(s),
    }
}

fn load(a: &ScenarioArgs) -> Result<(String, Scenario), Failure> {
    let name = match (&a.positional, &a.scenario) {
        (Some(_), Some(_)) => return Err(Failure::Validation("give the scenario once, positionally or with --scenario".into())),
        (Some(n), None) | (None, Some(n)) => n.clone(),
        (None, None) => return Err(Failure::Validation("no scenario given".into())),
    };
    let text = if Path::new(&name).is_file() {
        std::fs::read_to_string(&name).map_err(|e| Failure::Validation(format!("{name}: {e}")))?
    } else if let Some(t) = scenario::bundled(&name) {
        t.to_string()
    } else {
        return Err(Failure::Validation(format!("{name}: no such file or bundled scenario")));
    };
    let mut s = Scenario::parse(&text).map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
    if let Some(p) = &a.geometry {
        s = s
            .with_geometry(read_geometry(p)?)
            .map_err(|e| Failure::Validation(format!("{name}: {e}")))?;
    }
    Ok((name, s))
}

fn execute(s: &Scenario, common: &Common) -> Result<Bundle, Failure> {
    let seed = common.seed.unwrap_or(s.seed);
    let bundle: Bundle = s.run_with_seed(seed).map_err(|e| Failure::Run(format!("{}: {e}", s.name)))?;
    if let Some(dir) = &common.out {
        bundle
            .write_to(dir)
            .map_err(|e| Failure::Run(format!("writing {}: {e}", dir.display())))?;
        println!("{}: wrote {} files to {}", s.name, bundle.files.len(), dir.display());
        println!("{}", bundle.summary["metrics"]);
    } else {
        print!("{}", bundle.files["summary.json"]);
    }
    Ok(bundle)
}

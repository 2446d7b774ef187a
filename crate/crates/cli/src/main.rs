use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use sso_sandbox::guard::AbsentMode;
use sso_sandbox::rp::DefenceConfig;
use sso_sandbox::scenario::{
    catalog_for, primary_ids, run_all, Scenario, ScenarioReport, WorldConfig,
};

#[derive(Parser, Debug)]
#[command(
    name = "sso-sandbox",
    version,
    about = "Run OAuth 2.0 / OIDC SSO CSRF scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run scenarios and report on them.
    Run(RunArgs),
    /// List the scenario catalog.
    List {
        /// World file (JSON or TOML) to build the catalog on.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Print the default world as TOML, as a starting point for --world.
    World,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Scenario id to run; repeatable.
    #[arg(long = "scenario", value_name = "ID")]
    scenarios: Vec<String>,
    /// Run the ten primary scenarios.
    #[arg(long, conflicts_with = "scenarios")]
    all: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, conflicts_with = "no_referer_guard")]
    referer_guard: bool,
    #[arg(long)]
    no_referer_guard: bool,
    #[arg(long, conflicts_with = "no_state")]
    state: bool,
    #[arg(long)]
    no_state: bool,
    #[arg(long, conflicts_with = "no_custom_header")]
    custom_header: bool,
    #[arg(long)]
    no_custom_header: bool,
    /// fail-closed, fail-open or flag-only.
    #[arg(long, value_parser = parse_absent_mode)]
    absent_mode: Option<AbsentMode>,
    /// World file (JSON or TOML) declaring IdPs, clients and bindings.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Directory to write one report (and one listing file) per scenario.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run scenarios on separate threads.
    #[arg(long)]
    parallel: bool,
}

/// Writes to stdout, treating a closed pipe as a quiet end of output.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn parse_absent_mode(s: &str) -> Result<AbsentMode, String> {
    s.parse()
}

/// Defence settings forced onto every selected scenario.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, serde::Serialize)]
struct Overrides {
    referer_guard: Option<bool>,
    state_check: Option<bool>,
    custom_header_check: Option<bool>,
    absent_referer_mode: Option<AbsentMode>,
}

fn pick(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl Overrides {
    fn from_args(a: &RunArgs) -> Self {
        Overrides {
            referer_guard: pick(a.referer_guard, a.no_referer_guard),
            state_check: pick(a.state, a.no_state),
            custom_header_check: pick(a.custom_header, a.no_custom_header),
            absent_referer_mode: a.absent_mode,
        }
    }

    fn apply(&self, d: DefenceConfig) -> DefenceConfig {
        DefenceConfig {
            referer_guard: self.referer_guard.unwrap_or(d.referer_guard),
            state_check: self.state_check.unwrap_or(d.state_check),
            custom_header_check: self.custom_header_check.unwrap_or(d.custom_header_check),
            absent_referer_mode: self.absent_referer_mode.unwrap_or(d.absent_referer_mode),
        }
    }
}

fn load_world(path: Option<&Path>) -> Result<WorldConfig, String> {
    let Some(path) = path else {
        return Ok(WorldConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    if is_toml {
        toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    } else {
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }
}

fn catalog_listing(catalog: &[Scenario]) -> String {
    catalog
        .iter()
        .map(|s| format!("{:<14} {}\n", s.id, s.description))
        .collect()
}

fn file_stem(id: &str) -> String {
    id.replace('\'', "_prime")
}

fn write_outputs(dir: &Path, reports: &[ScenarioReport], format: Format) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in reports {
        let stem = file_stem(&r.id);
        match format {
            Format::Json => std::fs::write(
                dir.join(format!("{stem}.json")),
                serde_json::to_string_pretty(r).expect("report serializes"),
            )?,
            Format::Text => std::fs::write(dir.join(format!("{stem}.txt")), r.to_text())?,
        }
        let listings: String = r
            .listings
            .iter()
            .map(|l| format!("# step {}\n{}\n", l.step, l.text))
            .collect();
        std::fs::write(dir.join(format!("{stem}.listing.txt")), listings)?;
    }
    Ok(())
}

fn run(args: RunArgs) -> ExitCode {
    let world = match load_world(args.world.as_deref()) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: cannot load world: {e}");
            return ExitCode::from(2);
        }
    };
    let catalog = catalog_for(&world);
    let ids: Vec<String> = if args.all {
        primary_ids().into_iter().map(str::to_string).collect()
    } else {
        args.scenarios.clone()
    };
    if ids.is_empty() {
        eprintln!(
            "error: select scenarios with --scenario <ID> or --all\n\n{}",
            catalog_listing(&catalog)
        );
        return ExitCode::from(2);
    }
    let overrides = Overrides::from_args(&args);
    let mut selected = Vec::new();
    for id in &ids {
        match catalog.iter().find(|s| &s.id == id) {
            Some(s) => {
                let d = overrides.apply(s.world.rp.defences);
                selected.push(s.clone().with_defences(d));
            }
            None => {
                eprintln!(
                    "error: unknown scenario {id:?}; available:\n{}",
                    catalog_listing(&catalog)
                );
                return ExitCode::from(2);
            }
        }
    }

    let mut reports = Vec::new();
    for (s, result) in selected
        .iter()
        .zip(run_all(&selected, args.seed, args.parallel))
    {
        match result {
            Ok(r) => reports.push(r),
            Err(e) => {
                eprintln!("error: scenario {}: {e}", s.id);
                return ExitCode::from(2);
            }
        }
    }
    let all_passed = reports.iter().all(|r| r.passed);

    match args.format {
        Format::Json => {
            let doc = json!({
                "seed": args.seed,
                "overrides": overrides,
                "passed": all_passed,
                "reports": reports,
            });
            emit(&format!(
                "{}\n",
                serde_json::to_string_pretty(&doc).expect("report serializes")
            ));
        }
        Format::Text => {
            emit(&format!(
                "seed: {}  overrides: {}\n",
                args.seed,
                serde_json::to_string(&overrides).expect("overrides serialize")
            ));
            for r in &reports {
                emit(&r.to_text());
            }
            let failed: Vec<_> = reports
                .iter()
                .filter(|r| !r.passed)
                .map(|r| r.id.as_str())
                .collect();
            emit(&format!(
                "{} of {} scenarios passed{}\n",
                reports.len() - failed.len(),
                reports.len(),
                if failed.is_empty() {
                    String::new()
                } else {
                    format!("; failed: {}", failed.join(", "))
                }
            ));
        }
    }
    if let Some(dir) = &args.out {
        if let Err(e) = write_outputs(dir, &reports, args.format) {
            eprintln!("error: writing {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::Run(args) => run(args),
        Command::World => match toml::to_string_pretty(&WorldConfig::default()) {
            Ok(text) => {
                emit(&text);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::List { world } => match load_world(world.as_deref()) {
            Ok(w) => {
                emit(&catalog_listing(&catalog_for(&w)));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: cannot load world: {e}");
                ExitCode::from(2)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_leave_unset_fields_alone() {
        let base = DefenceConfig {
            state_check: true,
            ..DefenceConfig::default()
        };
        let o = Overrides {
            referer_guard: Some(false),
            ..Overrides::default()
        };
        let d = o.apply(base);
        assert!(!d.referer_guard);
        assert!(d.state_check);
        assert_eq!(d.absent_referer_mode, base.absent_referer_mode);
    }

    #[test]
    fn pick_on_off() {
        assert_eq!(pick(false, false), None);
        assert_eq!(pick(true, false), Some(true));
        assert_eq!(pick(false, true), Some(false));
    }

    #[test]
    fn primes_become_file_safe() {
        assert_eq!(file_stem("S6'"), "S6_prime");
        assert_eq!(file_stem("S8-fail-open"), "S8-fail-open");
    }
}

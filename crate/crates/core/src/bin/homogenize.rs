use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node,
    Value,
};

use homogenize::harness::suite::{builtin, format_line, run_acceptance, BUILTIN_NAMES};
use homogenize::harness::{
    convergence_study, execute, run_scenario, with_workers, RunManifest, ScenarioConfig,
};
use homogenize::meanval::{mean_value, AveragingPlan};
use homogenize::{Error, Result};

#[derive(Parser)]
#[command(
    name = "homogenize",
    version,
    about = "Reiterated homogenization toolkit"
)]
struct Cli {
    /// Override the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario: a TOML file or `builtin:<name>`.
    Run { config: String },
    /// Run an epsilon-convergence study and print the table as CSV.
    Study {
        config: String,
        /// eps2 values, decreasing (default: the config's own list).
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        eps: Vec<f64>,
    },
    /// Run the acceptance suite.
    Verify,
    /// Mean value of an expression in y1, y2, y3 (e.g. "sin(2*pi*y1)^2").
    Mean {
        expr: String,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        /// Ball radii for the extrapolated average.
        #[arg(long, value_delimiter = ',')]
        radii: Vec<f64>,
        /// Quadrature points per unit length along each axis.
        #[arg(long)]
        resolution: Option<f64>,
    },
    /// Effective tensor only (cell stage, no epsilon sweep).
    Cell { config: String },
    /// List the built-in scenarios.
    List,
}

fn load(target: &str, cli: &Cli) -> Result<ScenarioConfig> {
    let mut c = match target.strip_prefix("builtin:") {
        Some(name) => builtin(name, cli.seed.unwrap_or(42))?,
        None => ScenarioConfig::load(Path::new(target))?,
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.output = Some(o.clone());
    } else if c.output.is_none() {
        c.output = Some(PathBuf::from("output"));
    }
    c.validate()?;
    Ok(c)
}

fn report(m: &RunManifest) {
    println!(
        "{} [{}] seed {} config {}",
        m.scenario,
        serde_json::to_string(&m.kind)
            .unwrap_or_default()
            .trim_matches('"'),
        m.seed,
        &m.config_hash[..12]
    );
    if let Some(e) = &m.summary.effective {
        println!("  effective tensor: {e:?}");
    }
    if let Some(h) = m.summary.coriolis {
        println!("  effective coriolis: {h:?}");
    }
    for v in &m.verdicts {
        let tag = if v.pass { "ok  " } else { "FAIL" };
        println!(
            "  [{tag}] {} ({:.3e}, tol {:.3e})",
            v.name, v.value, v.tolerance
        );
    }
    for t in m.tasks.iter().filter(|t| t.error.is_some()) {
        println!(
            "  [FAIL] task {}: {}",
            t.id,
            t.error.as_deref().unwrap_or("")
        );
    }
    if let Some(f) = &m.failure {
        println!("  error: {f}");
    }
    println!("  {}", if m.pass { "PASS" } else { "FAIL" });
}

const FUNCTIONS: [&str; 9] = [
    "sin", "cos", "tan", "exp", "ln", "sqrt", "abs", "floor", "tanh",
];

/// Lets users write `sin(x)` instead of evalexpr's `math::sin(x)`.
fn alias_functions(expr: &str) -> String {
    let mut out = String::with_capacity(expr.len() + 16);
    let chars: Vec<char> = expr.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let boundary = i == 0
            || !(chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == ':');
        let hit = boundary
            .then(|| {
                FUNCTIONS.iter().find(|f| {
                    let n = f.len();
                    i + n < chars.len()
                        && chars[i..i + n].iter().copied().eq(f.chars())
                        && chars[i + n] == '('
                })
            })
            .flatten();
        match hit {
            Some(f) => {
                out.push_str("math::");
                out.push_str(f);
                i += f.len();
            }
            None => {
                out.push(chars[i]);
                i += 1;
            }
        }
    }
    out
}

fn expression(
    expr: &str,
    dim: usize,
) -> Result<(
    Node<DefaultNumericTypes>,
    HashMapContext<DefaultNumericTypes>,
)> {
    let node = build_operator_tree::<DefaultNumericTypes>(&alias_functions(expr))
        .map_err(|e| Error::Config(format!("expression {expr:?}: {e}")))?;
    let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
    let set = |ctx: &mut HashMapContext<DefaultNumericTypes>, k: &str, v: f64| {
        ctx.set_value(k.into(), Value::Float(v))
            .map_err(|e| Error::Config(format!("{e}")))
    };
    set(&mut ctx, "pi", std::f64::consts::PI)?;
    for k in 1..=3 {
        set(&mut ctx, &format!("y{k}"), 0.0)?;
    }
    for id in node.iter_variable_identifiers() {
        let known = id == "pi"
            || matches!(id.strip_prefix('y').and_then(|k| k.parse::<usize>().ok()), Some(k) if (1..=dim).contains(&k));
        if !known {
            return Err(Error::Config(format!(
                "unknown variable {id:?} for dimension {dim}"
            )));
        }
    }
    node.eval_number_with_context(&ctx)
        .map_err(|e| Error::Config(format!("expression {expr:?}: {e}")))?;
    Ok((node, ctx))
}

fn mean(expr: &str, dim: usize, radii: &[f64], resolution: Option<f64>) -> Result<()> {
    if !(1..=3).contains(&dim) {
        return Err(Error::Parameter(format!(
            "dimension must be 1, 2 or 3, got {dim}"
        )));
    }
    let (node, ctx) = expression(expr, dim)?;
    let mut plan = AveragingPlan::for_dim(dim);
    if !radii.is_empty() {
        plan = plan.with_radii(radii);
    }
    if let Some(r) = resolution {
        plan = plan.with_resolution(r);
    }
    let f = |y: &[f64]| {
        let mut c = ctx.clone();
        for (k, v) in y.iter().enumerate() {
            let _ = c.set_value(format!("y{}", k + 1), Value::Float(*v));
        }
        node.eval_number_with_context(&c).unwrap_or(f64::NAN)
    };
    let m = mean_value(f, dim, &plan)?;
    println!("mean value   {:.10}", m.value);
    println!("error        {:.3e}", m.error_indicator);
    println!("radius       {}", m.radius_used);
    println!("converged    {}", m.converged);
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { config } => {
            let c = load(config, cli)?;
            let m = with_workers(cli.workers, || run_scenario(&c))??;
            report(&m);
            Ok(m.pass)
        }
        Command::Study { config, eps } => {
            let c = load(config, cli)?;
            let (m, table) = with_workers(cli.workers, || convergence_study(&c, eps))??;
            print!("{table}");
            report(&m);
            Ok(m.pass)
        }
        Command::Cell { config } => {
            let mut c = load(config, cli)?;
            c.eps2.clear();
            c.eps1 = None;
            let r = with_workers(cli.workers, || execute(&c, &[]))??;
            println!(
                "{}",
                serde_json::to_string_pretty(&r.summary).expect("summary serializes")
            );
            Ok(r.pass())
        }
        Command::Verify => {
            let seed = cli.seed.unwrap_or(42);
            let (rep, times) = with_workers(cli.workers, || {
                run_acceptance(seed, |o, dt: Duration| println!("{}", format_line(o, dt)))
            })?;
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("output"));
            fs::create_dir_all(&dir).map_err(|e| homogenize_io(&dir, e))?;
            let path = dir.join("acceptance.json");
            let json = serde_json::to_string_pretty(&rep).expect("report serializes");
            fs::write(&path, json).map_err(|e| homogenize_io(&path, e))?;
            let total: f64 = times.last().map_or(0.0, |d| d.as_secs_f64());
            println!(
                "{} criteria passed in {total:.0} s; report written to {}",
                rep.criteria
                    .iter()
                    .zip(&times)
                    .filter(|(o, _)| o.pass)
                    .count(),
                path.display()
            );
            Ok(rep.pass)
        }
        Command::Mean {
            expr,
            dim,
            radii,
            resolution,
        } => {
            with_workers(cli.workers, || mean(expr, *dim, radii, *resolution))??;
            Ok(true)
        }
        Command::List => {
            for n in BUILTIN_NAMES {
                println!("builtin:{n}");
            }
            Ok(true)
        }
    }
}

fn homogenize_io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliases_only_whole_names() {
        assert_eq!(
            alias_functions("sin(y1)+asin(y2)"),
            "math::sin(y1)+asin(y2)"
        );
        assert_eq!(alias_functions("math::cos(y1)"), "math::cos(y1)");
    }

    #[test]
    fn expressions_check_variables() {
        assert!(expression("sin(2*pi*y1)^2", 1).is_ok());
        assert!(expression("y2", 1).is_err());
        assert!(expression("y1 +", 1).is_err());
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use magicpoint::eim::MagicRule;
use magicpoint::harness::studies;
use magicpoint::harness::{ConfigError, RunConfig};
use magicpoint::models::{ModelParams, ParamPoint};
use magicpoint::payoffs::PayoffSpec;
use magicpoint::pricer::{price_magic, PriceRequest};
use magicpoint::{Error, Execution};

#[derive(Parser)]
#[command(name = "magicpoint", version, about = "Magic point Fourier option pricing")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a cloud, train a rule and write it to a file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Price with a trained rule.
    Price {
        #[arg(long)]
        rule: PathBuf,
        /// `key=value` pairs separated by commas (spot, strike, maturity and
        /// the model coordinates), or a file with one such line per option.
        #[arg(long)]
        params: String,
        /// Multiply by `exp(-rT)`.
        #[arg(long)]
        discount: bool,
    },
    /// Run a study and write its CSV files to the configured out_dir.
    Study {
        kind: StudyKind,
        #[arg(long)]
        config: PathBuf,
        /// Reuse a trained rule instead of training one.
        #[arg(long)]
        rule: Option<PathBuf>,
    },
    /// Check a configuration without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyKind {
    Offline,
    Oos,
    Cos,
    Basket,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command, exec: Execution) -> Result<(), Error> {
    match cmd {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let rep = studies::run_offline(&cfg, exec)?;
            write_file(&out, &rep.rule.save())?;
            let it = rep.rule.interpolant();
            println!(
                "trained {} basis functions ({:?}), final residual {:e}, {:.2}s",
                rep.rule.m(),
                it.termination(),
                it.final_residual(),
                rep.seconds_sampling + rep.seconds_snapshots + rep.seconds_training
            );
        }
        Command::Price { rule, params, discount } => {
            let bytes = std::fs::read(&rule).map_err(|e| io(&rule, e))?;
            let rule = MagicRule::load(&bytes)?;
            let lines = if Path::new(&params).is_file() {
                let path = Path::new(&params);
                std::fs::read_to_string(path).map_err(|e| io(path, e))?
            } else {
                params
            };
            println!("price,extrapolated");
            for line in lines.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                let p = parse_point(&rule, line)?;
                let req = PriceRequest {
                    payoff: PayoffSpec::single(rule.payoff_kind(), p.strike)?,
                    model: ModelParams::from_values(rule.model_kind(), &p.model, rule.rate())?,
                    spot: p.spot,
                    maturity: p.maturity,
                    eta: rule.eta(),
                    omega: rule.omega(),
                    discount,
                };
                let v = price_magic(&rule, &req)?;
                if v.extrapolated {
                    eprintln!("warning: {line} lies outside the training box");
                }
                println!("{:.16e},{}", v.price, v.extrapolated);
            }
        }
        Command::Study { kind, config, rule } => {
            let cfg = RunConfig::load(&config)?;
            let out = cfg.out_dir.clone();
            match kind {
                StudyKind::Basket => {
                    let rep = studies::run_basket(&cfg, exec)?;
                    rep.write(&cfg, &out)?;
                    println!(
                        "basket: {} basis functions, max abs error {:e} over {} strikes",
                        rep.interpolant.m(),
                        rep.max_abs_error(),
                        rep.prices.len()
                    );
                }
                StudyKind::Offline => {
                    let rep = studies::run_offline(&cfg, exec)?;
                    rep.write(&cfg, &out)?;
                    println!("offline: M = {}, final residual {:e}", rep.rule.m(), rep.rule.interpolant().final_residual());
                }
                StudyKind::Oos | StudyKind::Cos => {
                    let rule = match rule {
                        Some(path) => {
                            let bytes = std::fs::read(&path).map_err(|e| io(&path, e))?;
                            MagicRule::load(&bytes)?
                        }
                        None => {
                            let rep = studies::run_offline(&cfg, exec)?;
                            rep.write(&cfg, &out)?;
                            rep.rule
                        }
                    };
                    let oos = studies::run_out_of_sample(&cfg, &rule, exec)?;
                    oos.write(&cfg, &out)?;
                    println!(
                        "oos: max abs error {:e}, mean abs error {:e}, {} of {} beyond the tail threshold",
                        oos.max_abs_error(),
                        oos.mean_abs_error(),
                        oos.excluded(),
                        oos.samples.len()
                    );
                    if let StudyKind::Cos = kind {
                        let cos = studies::run_cos_comparison(&cfg, &rule, &oos, exec)?;
                        cos.write(&cfg, &out)?;
                        if let Some(last) = cos.rows.last() {
                            println!(
                                "cos: N = {}, magic {:e}, cos {:e} on {} samples",
                                last.n, last.magic_linf, last.cos_linf, cos.included
                            );
                        }
                    }
                }
            }
            println!("wrote {}", out.display());
        }
        Command::Validate { config } => {
            let cfg = RunConfig::load(&config)?;
            cfg.validate()?;
            let b = cfg.param_box()?;
            for v in magicpoint::models::validate_box(&b) {
                println!("note: {v}");
            }
            // a trial draw of the cloud exposes boxes the variance window empties
            let cloud = magicpoint::harness::sample_cloud(&b, cfg.cloud_size, cfg.seed)?;
            println!(
                "ok: {} / {}, eta = {}, acceptance rate {:.4}",
                cfg.model,
                cfg.payoff,
                cfg.eta()?,
                cloud.acceptance_rate
            );
        }
    }
    Ok(())
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io(path, e))
}

/// Parses `spot=1,strike=1,maturity=0.5,sigma=0.2` against the rule's model.
fn parse_point(rule: &MagicRule, line: &str) -> Result<ParamPoint, Error> {
    let invalid = |m: String| Error::Config(ConfigError::Invalid(m));
    let kind = rule.model_kind();
    let names = kind.param_names();
    let width = rule.magic_params().first().map_or(0, |p| p.len().saturating_sub(3));
    let mut spot = None;
    let mut strike = None;
    let mut maturity = None;
    let mut model = vec![None; width];
    for item in line.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got `{item}`")))?;
        let key = key.trim();
        let v: f64 = value.trim().parse().map_err(|_| invalid(format!("`{key}` is not a number: `{}`", value.trim())))?;
        let slot = match key {
            "spot" => &mut spot,
            "strike" => &mut strike,
            "maturity" => &mut maturity,
            _ => match names[..width].iter().position(|n| *n == key) {
                Some(i) => &mut model[i],
                None => return Err(invalid(format!("`{key}` is not a {kind} parameter"))),
            },
        };
        if slot.replace(v).is_some() {
            return Err(invalid(format!("`{key}` given twice")));
        }
    }
    let need = |name: &str, v: Option<f64>| v.ok_or_else(|| invalid(format!("missing `{name}`")));
    Ok(ParamPoint {
        spot: need("spot", spot)?,
        strike: need("strike", strike)?,
        maturity: need("maturity", maturity)?,
        model: model.iter().zip(names).map(|(v, n)| need(n, *v)).collect::<Result<_, _>>()?,
    })
}

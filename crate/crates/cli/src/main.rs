use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use safe_fl::data;
use safe_fl::report;
use safe_fl::runtime::{run_training, RunConfig, RunReport, Toggles};
use serde_json::json;

#[derive(Parser)]
#[command(name = "safe", version, about = "Federated training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write report.json and rounds.csv.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set rounds=5` or `--set toggles.fau=false`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Show how the data would be split across clients; writes partition.json.
    Partition {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run plain averaging and the full method over several seeds; writes compare.json.
    Compare {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Config problems exit with 2, everything else with 1.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    let mut cfg = RunConfig::from_json(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Config)?;
    for o in overrides {
        cfg.apply_override_str(o).with_context(|| format!("--set {o}")).map_err(Failure::Config)?;
    }
    Ok(cfg)
}

fn cmd_run(config: &Path, overrides: &[String], out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let report = run_training(&cfg)?;
    report::write_run(&report, out).with_context(|| format!("writing to {}", out.display()))?;
    let last = report.final_record();
    println!(
        "round {}: cloud class acc {:.4}, cloud sample acc {:.4}, client class acc {:.4} ({:.1}s)",
        last.round,
        last.cloud_c_acc,
        last.cloud_s_acc,
        last.mean_client_c_acc(),
        report.duration_secs
    );
    println!("wrote {} and {}", out.join(report::REPORT_FILE).display(), out.join(report::ROUNDS_FILE).display());
    Ok(())
}

fn cmd_partition(config: &Path, overrides: &[String], out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let fed = data::prepare(&cfg.data, cfg.clients, cfg.seed)?;
    let j = cfg.data.classes;
    let mut totals = vec![0usize; j];
    for s in &fed.shards {
        for (t, n) in totals.iter_mut().zip(&s.dis) {
            *t += n;
        }
    }
    let max = totals.iter().copied().max().unwrap_or(0);
    let min = totals.iter().copied().filter(|&n| n > 0).min().unwrap_or(0);
    let ratio = if min > 0 { max as f64 / min as f64 } else { f64::INFINITY };

    print!("{:>6}", "class");
    for s in &fed.shards {
        print!("{:>8}", format!("c{}", s.client_id));
    }
    println!("{:>8}", "total");
    for (class, total) in totals.iter().enumerate() {
        print!("{class:>6}");
        for s in &fed.shards {
            print!("{:>8}", s.dis[class]);
        }
        println!("{total:>8}");
    }
    println!("imbalance ratio {ratio:.2} (target {})", cfg.data.imbalance_ratio);

    let doc = json!({
        "clients": cfg.clients,
        "classes": j,
        "counts": fed.shards.iter().map(|s| &s.dis).collect::<Vec<_>>(),
        "class_totals": totals,
        "imbalance_ratio": ratio,
        "ses_per_class": cfg.data.ses_per_class,
    });
    std::fs::create_dir_all(out)?;
    let path = out.join("partition.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn finals(report: &RunReport) -> [f64; 4] {
    let r = report.final_record();
    [r.cloud_c_acc, r.cloud_s_acc, r.mean_client_c_acc(), r.mean_client_s_acc()]
}

fn cmd_compare(config: &Path, seeds: u64, overrides: &[String], out: &Path) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Config(anyhow::anyhow!("--seeds must be ≥ 1")));
    }
    let base = load_config(config, overrides)?;
    let names = ["cloud_c_acc", "cloud_s_acc", "client_c_acc", "client_s_acc"];
    let mut arms = Vec::new();
    for (arm, toggles) in [("fedavg", Toggles::all(false)), ("safe", Toggles::all(true))] {
        let mut per_seed = Vec::new();
        for i in 0..seeds {
            let cfg = RunConfig { seed: base.seed + i, toggles, ..base.clone() };
            let report = run_training(&cfg)?;
            let f = finals(&report);
            println!(
                "{arm:>7} seed {:>3}: cloud c {:.4} s {:.4} | client c {:.4} s {:.4}",
                cfg.seed, f[0], f[1], f[2], f[3]
            );
            per_seed.push(json!({ "seed": cfg.seed, "final": names.iter().zip(f).map(|(n, v)| (n.to_string(), json!(v))).collect::<serde_json::Map<_, _>>() }));
        }
        let mut summary = serde_json::Map::new();
        for name in names {
            let vals: Vec<f64> = per_seed.iter().map(|s| s["final"][name].as_f64().expect("number")).collect();
            let (m, sd) = mean_std(&vals);
            summary.insert(name.to_string(), json!({ "mean": m, "std": sd }));
        }
        arms.push((arm, per_seed, summary));
    }
    println!();
    println!("{:>7} {:>18} {:>18} {:>18} {:>18}", "arm", names[0], names[1], names[2], names[3]);
    for (arm, _, summary) in &arms {
        print!("{arm:>7}");
        for name in names {
            let s = &summary[name];
            print!(" {:>18}", format!("{:.4} ± {:.4}", s["mean"].as_f64().unwrap(), s["std"].as_f64().unwrap()));
        }
        println!();
    }
    let doc = json!({
        "config": base,
        "seeds": seeds,
        "arms": arms.iter().map(|(arm, runs, summary)| json!({ "arm": arm, "runs": runs, "summary": summary })).collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(out)?;
    let path = out.join("compare.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, overrides, out } => cmd_run(config, overrides, out),
        Command::Partition { config, overrides, out } => cmd_partition(config, overrides, out),
        Command::Compare { config, seeds, overrides, out } => cmd_compare(config, *seeds, overrides, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

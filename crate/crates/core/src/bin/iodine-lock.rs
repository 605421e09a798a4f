use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iodine_lock::runner::{self, Mode, RunReport, RunnerError, ScenarioConfig};

#[derive(Parser)]
#[command(name = "iodine-lock", version, about = "Iodine-stabilized laser simulation scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory (default: the config's output_dir, else runs/<config stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config mode.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Overlay the Allan curves of two run reports and tabulate a/b.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Where to write comparison.csv and allan_compare.svg (default: next to a).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a scenario without running it.
    Validate { config: PathBuf },
}

/// A report path, or a run directory containing report.json.
fn report_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p
    }
}

fn main() -> ExitCode {
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn real_main(cli: Cli) -> Result<(), RunnerError> {
    match cli.cmd {
        Cmd::Validate { config } => {
            let c = ScenarioConfig::load(&config)?;
            println!("{}: ok ({:?}, {:?} fidelity)", config.display(), c.mode, c.fidelity());
        }
        Cmd::Run { config, out, seed, mode } => {
            let mut c = ScenarioConfig::load(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(m) = mode {
                c.mode = m;
                c.validate()?;
            }
            let dir = out.unwrap_or_else(|| runner::default_out_dir(&config, &c));
            let r = runner::run(&c, &dir)?;
            print_summary(&r);
            println!("artifacts in {}", dir.display());
        }
        Cmd::Compare { a, b, out } => {
            let (pa, pb) = (report_path(a), report_path(b));
            let ra = RunReport::load(&pa)?;
            let rb = RunReport::load(&pb)?;
            let cmp = runner::compare(&ra, &rb)?;
            let dir = out.unwrap_or_else(|| pa.parent().map(PathBuf::from).unwrap_or_default());
            std::fs::create_dir_all(&dir).map_err(|source| RunnerError::Io { path: dir.display().to_string(), source })?;
            for (name, text) in [("comparison.csv", cmp.to_csv()), ("allan_compare.svg", cmp.svg.clone())] {
                let p = dir.join(name);
                std::fs::write(&p, text).map_err(|source| RunnerError::Io { path: p.display().to_string(), source })?;
            }
            println!("{:>10}  {:>12}  {:>12}  {:>10}", "tau_s", "sigma_a", "sigma_b", "a/b");
            for r in &cmp.rows {
                println!("{:>10}  {:>12.3e}  {:>12.3e}  {:>10.3}", r.tau_s, r.sigma_a, r.sigma_b, r.ratio);
            }
        }
    }
    Ok(())
}

fn print_summary(r: &RunReport) {
    println!("mode {:?}, fidelity {:?}, seed {}", r.mode, r.fidelity, r.seed);
    let s = &r.summary;
    if let Some(b) = &s.beat {
        println!("beat: mean {:.1} Hz, pk-pk {:.1} Hz over {} gates", b.mean_hz, b.peak_to_peak_hz, b.n_gates);
    }
    if let Some(a) = &s.allan {
        for n in &a.named {
            println!("sigma_y({} s) = {:.3e}", n.tau_s, n.sigma_y);
        }
        println!("max sigma_y = {:.3e}", a.max_sigma_y);
    }
    if let Some(l) = &s.lock {
        println!("in lock: {} (since {} s), polarity {:?}", l.status.in_lock, l.status.since_s, l.polarity);
    }
    if let Some(sc) = &s.scan {
        println!(
            "scan: pk-pk {:.4e} V, SNR {:.1} in {} Hz, zero crossing {:.1} Hz",
            sc.peak_to_peak_v, sc.snr, sc.bandwidth_hz, sc.zero_crossing_hz
        );
    }
    if let Some(sp) = &s.spectrum {
        println!("spectrum: -3 dB width {:.1} kHz, carrier dip {:.2} dB", sp.linewidth_3db_hz / 1e3, sp.carrier_dip_db);
    }
}

use clap::Parser;
use ringscope::sim::{run_wallclock, Mode, WallClockOptions};
use ringscope_cli::{
    cmd_run, cmd_sweep_overload, cmd_verify, CliError, RunManifest, EXIT_CONFIG, EXIT_MISMATCH,
    EXIT_OK,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Run capture experiments on the simulated inference workload.
///
/// Exit status: 0 ok, 1 dataset mismatch or protocol failure, 2 bad
/// configuration or usage.
#[derive(Debug, Parser)]
#[command(name = "ringscope", version)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, env = "RINGSCOPE_OUT", default_value = "ringscope-out")]
    out: PathBuf,

    /// Modes to compare: no-capture, sync, callback, ring2.
    #[arg(long, value_delimiter = ',')]
    mode: Option<Vec<Mode>>,

    /// Generation/bandwidth ratios to sweep.
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,

    /// Verify the dataset in this run directory against the synchronous oracle.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["overload", "wall_clock"])]
    verify: Option<PathBuf>,

    /// Run the hook-count × ring-capacity × ratio overload grid.
    #[arg(long, conflicts_with = "wall_clock")]
    overload: bool,

    /// Smoke-run the ring2 path in real time with threaded export workers.
    #[arg(long)]
    wall_clock: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    let code = match dispatch(args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}

fn dispatch(args: Args) -> Result<i32, CliError> {
    let manifest = RunManifest {
        config_path: args.config.clone(),
        seed: args.seed,
        out_dir: args.out.clone(),
        modes: args.mode.clone(),
        ratios: args.sweep.clone(),
    };
    if let Some(dir) = &args.verify {
        let report = cmd_verify(&args.config, dir, args.seed)?;
        println!(
            "expected {} records, found {}, {} dropped request-steps excluded",
            report.expected, report.found, report.dropped
        );
        for (hook, n) in &report.diffs {
            println!("{hook}: {n} diff(s)");
        }
        if report.checksum_failures > 0 {
            println!("checksum failures: {}", report.checksum_failures);
        }
        return Ok(if report.identical() {
            println!("dataset matches the oracle");
            EXIT_OK
        } else {
            println!("dataset differs: {} diff(s)", report.total_diffs());
            EXIT_MISMATCH
        });
    }
    if args.overload {
        let rows = cmd_sweep_overload(&manifest)?;
        for r in &rows {
            println!(
                "hooks {:>3} ring {:>10} ratio {:>5} {:?}: overhead {:>8.2}% stalls {:>4} first stall {} drops {}",
                r.hooks_enabled,
                r.ring_capacity,
                r.ratio,
                r.policy,
                r.overhead_pct,
                r.stall_events,
                r.first_stall_step.map_or("-".into(), |s| s.to_string()),
                r.drops
            );
        }
        return Ok(EXIT_OK);
    }
    if args.wall_clock {
        let cfg = manifest.load_config()?;
        let sim = cfg.sim_config(cfg.ratios()[0])?;
        let run = run_wallclock(
            &sim,
            Box::new(ringscope::exporter::NullSink::default()),
            WallClockOptions::default(),
        )?;
        let m = &run.metrics;
        println!(
            "wall-clock ring2: run {:.4}s baseline {:.4}s overhead {:.2}% stalls {} records {}",
            m.run_time, m.baseline_time, m.overhead_pct, m.stall_events, m.records
        );
        return Ok(EXIT_OK);
    }
    let outcome = cmd_run(&manifest)?;
    for p in &outcome.points {
        println!(
            "{:<18} overhead {:>8.2}% stalls {:>4} drops {:>5} exported {:>10} B{}",
            p.label,
            p.overhead_pct,
            p.stall_events,
            p.dropped_request_steps,
            p.exported_bytes,
            p.dataset_checksum
                .as_ref()
                .map_or(String::new(), |c| format!(" crc {c}"))
        );
    }
    if outcome.points.iter().any(|p| p.sink_failures > 0) {
        eprintln!("warning: some sink writes failed; see summary.json");
    }
    Ok(EXIT_OK)
}

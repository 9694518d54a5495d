//! `dfrc` command line tool. Every subcommand reads a run configuration
//! (`--config path.toml` or `--config builtin:<name>`), writes CSV files to
//! the output directory and prints a short summary.
//!
//! Exit codes: 0 success, 2 infeasible, 3 configuration error, 4 numerical
//! failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dfrc_core::allocation::{write_allocation_csv, AllocationRecord};
use dfrc_core::beampattern::{sampled_pattern, PatternSpec};
use dfrc_core::fim::{crb_matrices, write_crb_csv, CrbPair};
use dfrc_core::pipeline::{self, initial_mask, write_heatmap_csv, write_tradeoff_csv, Alternation};
use dfrc_core::selection::{write_selection_csv, SelectionRecord};
use dfrc_core::waveform::{cp_extension_grid, ici_residual, independent_sequences};
use dfrc_core::{Error, Owner, PowerProfile, Prepared, Result, RunConfig, SelectionInstance};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "dfrc", version, about = "Radar/communication resource allocation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file, or `builtin:paper_default` / `builtin:desk_default`.
    #[arg(long)]
    config: String,
    /// Output directory; defaults to `experiment.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `experiment.seed`.
    #[arg(long, env = "DFRC_SEED")]
    seed: Option<u64>,
    /// Overrides `solver.tol`.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Designed beampatterns, one row per (k, subarea, angle).
    Beampattern(Common),
    /// Noise-free demodulation residuals with and without CP-extension sequences.
    VerifyIci {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        oversample: usize,
    },
    /// CRBs of a uniform all-detection power split on the first N_r receivers.
    Crb(Common),
    /// Subcarrier/power allocation on the first N_r receivers.
    Allocate(Common),
    /// Receiver selection for a uniform all-detection power split.
    Select(Common),
    /// Alternating allocation and receiver selection.
    Alternate(Common),
    /// One alternation per value of `experiment.sweep`.
    Tradeoff(Common),
    /// CRBs around each target for the alternation's allocation and mask.
    Heatmap(Common),
}

/// Parse `argv` (program name first), run the subcommand and return the exit
/// code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 3 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let mut config = RunConfig::resolve(&common.config)?;
        if let Some(seed) = common.seed {
            config.experiment.seed = seed;
        }
        if let Some(tol) = common.tol {
            config.solver.tol = tol;
        }
        config.validate()?;
        let out = common.out.clone().unwrap_or_else(|| config.experiment.output_dir.clone());
        std::fs::create_dir_all(&out)?;
        Ok(Self { config, out, quiet: common.quiet })
    }

    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn wrote(&self, name: &str) {
        self.say(format!("wrote {}", Path::new(&self.out).join(name).display()));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Beampattern(c) => beampattern(&Context::new(&c)?),
        Command::VerifyIci { common, oversample } => verify_ici(&Context::new(&common)?, oversample),
        Command::Crb(c) => crb(&Context::new(&c)?),
        Command::Allocate(c) => allocate(&Context::new(&c)?),
        Command::Select(c) => select(&Context::new(&c)?),
        Command::Alternate(c) => alternate(&Context::new(&c)?),
        Command::Tradeoff(c) => tradeoff(&Context::new(&c)?),
        Command::Heatmap(c) => heatmap(&Context::new(&c)?),
    }
}

/// Total power split evenly over every (subcarrier, subarea) pair.
fn uniform_detection(prepared: &Prepared) -> PowerProfile {
    let sc = &prepared.scenario;
    let beams = sc.detection_subarea_angles.len();
    let mut profile = PowerProfile::zeros(sc.num_subcarriers, beams, sc.num_users());
    profile.radar.fill(sc.total_power_w / (beams * sc.num_subcarriers) as f64);
    profile
}

fn worst(crbs: &[CrbPair]) -> (f64, f64) {
    let d = crbs.iter().map(CrbPair::max_location).fold(0.0, f64::max);
    let v = crbs.iter().map(CrbPair::max_velocity).fold(0.0, f64::max);
    (d, v)
}

fn beampattern(ctx: &Context) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let sc = &prepared.scenario;
    let angles = PatternSpec::new([-90.0, 90.0], ctx.config.system.beampattern_samples)?.sample_angles_deg;
    let mut w = csv::Writer::from_writer(ctx.file("beampattern.csv")?);
    w.write_record(["k", "n", "theta_deg", "gain"])?;
    for ((k, n), entry) in prepared.covariances.iter() {
        for (theta, gain) in sampled_pattern(&entry.r, sc.carrier_hz, sc.subcarrier_spacing_hz, k, &angles) {
            w.write_record([k.to_string(), n.to_string(), format!("{theta}"), format!("{gain:e}")])?;
        }
    }
    w.flush()?;
    ctx.wrote("beampattern.csv");
    Ok(())
}

fn verify_ici(ctx: &Context, oversample: usize) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let sc = &prepared.scenario;
    let k = sc.num_subcarriers;
    let beams = sc.detection_subarea_angles.len();
    let owners: Vec<Owner> = (0..k).map(|i| Owner::Subarea(i % beams)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.experiment.seed);
    let ext = cp_extension_grid(sc, owners, vec![sc.total_power_w / k as f64; k], &mut rng);
    let mut random = ext.clone();
    random.detect_symbols = independent_sequences(k, beams, sc.num_symbols, sc.num_tx_antennas, &mut rng);

    let mut w = csv::Writer::from_writer(ctx.file("ici.csv")?);
    w.write_record(["r", "k", "l", "residual_cp_extension", "residual_random"])?;
    let (mut worst_ext, mut worst_random) = (0.0f64, 0.0f64);
    for r in 0..sc.num_receivers() {
        let a = ici_residual(sc, &ext, &prepared.covariances, r, oversample)?;
        let b = ici_residual(sc, &random, &prepared.covariances, r, oversample)?;
        worst_ext = worst_ext.max(a.max_relative());
        worst_random = worst_random.max(b.max_relative());
        for kk in 0..k {
            for l in 0..sc.num_symbols {
                w.write_record([
                    r.to_string(),
                    kk.to_string(),
                    l.to_string(),
                    format!("{:e}", a.residual[kk][l] / a.reference),
                    format!("{:e}", b.residual[kk][l] / b.reference),
                ])?;
            }
        }
    }
    w.flush()?;
    ctx.wrote("ici.csv");
    ctx.say(format!("max relative residual: cp-extension {worst_ext:e}, random {worst_random:e}"));
    Ok(())
}

fn crb(ctx: &Context) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let mask = initial_mask(prepared.scenario.num_receivers(), ctx.config.experiment.num_selected);
    let crbs = crb_matrices(&prepared.blocks, &uniform_detection(&prepared), &mask)?;
    write_crb_csv(ctx.file("crb.csv")?, &crbs)?;
    ctx.wrote("crb.csv");
    let (d, v) = worst(&crbs);
    ctx.say(format!("worst location CRB {d:e} m^2, velocity CRB {v:e} (m/s)^2"));
    Ok(())
}

fn report_alternation(ctx: &Context, prepared: &Prepared, result: &Alternation) -> Result<()> {
    let ex = &ctx.config.experiment;
    let record = AllocationRecord::new(
        ex.eta_d,
        ex.eta_v,
        prepared.scenario.subcarrier_spacing_hz,
        &result.allocation,
        &result.crbs,
    );
    write_allocation_csv(ctx.file("allocation.csv")?, &[record])?;
    write_crb_csv(ctx.file("crb.csv")?, &result.crbs)?;
    ctx.wrote("allocation.csv");
    ctx.wrote("crb.csv");
    let (d, v) = worst(&result.crbs);
    ctx.say(format!(
        "rate {:e} bit/s, mask {}, location CRB {d:e}, velocity CRB {v:e}{}",
        result.allocation.rate * prepared.scenario.subcarrier_spacing_hz,
        result.mask.bits(),
        if result.penalty_converged { "" } else { " (penalty loop did not binarize; rounded)" }
    ));
    Ok(())
}

fn allocate(ctx: &Context) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let ex = &ctx.config.experiment;
    let mask = initial_mask(prepared.scenario.num_receivers(), ex.num_selected);
    let result = pipeline::allocate(&ctx.config, &prepared, &mask, ex.eta_d, ex.eta_v)?;
    report_alternation(ctx, &prepared, &result)
}

fn select(ctx: &Context) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let ex = &ctx.config.experiment;
    let inst = SelectionInstance::from_allocation(&prepared.blocks, &uniform_detection(&prepared), ex.num_selected)?;
    let bound_on = ex.objective.quantity();
    let fixed = match bound_on {
        dfrc_core::Quantity::Location => ex.eta_v,
        dfrc_core::Quantity::Velocity => ex.eta_d,
    };
    let result = inst.select(bound_on, fixed, ctx.config.solver.bisection_eps)?;
    write_selection_csv(ctx.file("selection.csv")?, &[SelectionRecord::new(&inst, &result)])?;
    ctx.wrote("selection.csv");
    ctx.say(format!("eta* {:e}, mask {}", result.eta_star, result.mask.bits()));
    Ok(())
}

fn alternate(ctx: &Context) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let result = pipeline::alternate(&ctx.config, &prepared)?;
    report_alternation(ctx, &prepared, &result)
}

fn tradeoff(ctx: &Context) -> Result<()> {
    if ctx.config.experiment.sweep.is_empty() {
        return Err(Error::Config("experiment.sweep: empty, nothing to run".into()));
    }
    let prepared = pipeline::prepare(&ctx.config)?;
    let points = pipeline::tradeoff_sweep(&ctx.config, &prepared);
    write_tradeoff_csv(ctx.file("tradeoff.csv")?, &points)?;
    ctx.wrote("tradeoff.csv");
    for p in &points {
        ctx.say(format!("eta {:e}: {} rate {:e} bit/s", p.eta_in, p.status, p.rate_bits_s));
    }
    if points.iter().any(|p| p.is_ok()) {
        Ok(())
    } else if points.iter().all(|p| p.status == "infeasible") {
        Err(Error::Infeasible("no sweep point is feasible".into()))
    } else {
        Err(Error::Numerical("no sweep point was solved".into()))
    }
}

fn heatmap(ctx: &Context) -> Result<()> {
    let prepared = pipeline::prepare(&ctx.config)?;
    let result = pipeline::alternate(&ctx.config, &prepared)?;
    let cells = pipeline::crb_heatmap(&ctx.config, &prepared, &result.allocation, &result.mask.s);
    write_heatmap_csv(ctx.file("heatmap.csv")?, &cells)?;
    ctx.wrote("heatmap.csv");
    Ok(())
}

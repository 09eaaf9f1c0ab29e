//! `sddc`: command-line driver for ingestion, solving, simulation,
//! estimation and reporting.
//!
//! All outputs land under `--out`. Estimation runs write to
//! `<out>/<mode>/` so that `report` can pick up both fits.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use spatial_ddc::dp::{solve_model, PolicyTable};
use spatial_ddc::estimate::{
    bootstrap_cages, estimate, hessian_standard_errors, EstimationData, EstimationSettings, Mode,
};
use spatial_ddc::kv::KeyValues;
use spatial_ddc::moments::{average_moments, compute_moments, moments_by_cage, ConditionalRates};
use spatial_ddc::panel::{load_panel, prepare, ColumnMap, EnrichedPanel, FilterConfig, PanelSummary};
use spatial_ddc::report::{
    moment_validation_table, plot_rates_by_age, plot_rates_by_period, render_bootstrap,
    render_bootstrap_replicates, render_moments, render_thermal, render_validation_table,
    ComparisonReport, ModelFit,
};
use spatial_ddc::simulate::{
    generate_synthetic, simulate_moments, simulate_panels, Facility, FailureProfile, SimConfig, SyntheticConfig,
};
use spatial_ddc::state::{AgeMode, NeighborPooling};
use spatial_ddc::utility::ModelParams;
use spatial_ddc::{Error, ModelConfig, Result};

/// Parameters of the synthetic data-generating process used when no
/// `--params` file is given.
pub const DEFAULT_TRUTH: [f64; 7] = [-0.03, -1.0, -1.5, -8.0, -7.8, -0.8, -0.27];

#[derive(Parser, Debug)]
#[command(name = "sddc", version, about = "Spatial dynamic discrete choice estimation of equipment replacement")]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Flat `key = value` configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate, enrich and summarize a panel.
    Ingest {
        #[command(flatten)]
        panel: PanelArgs,
    },
    /// Solve the dynamic program at given parameters and dump the policy.
    Solve {
        #[arg(long)]
        params: PathBuf,
        /// Estimate transitions from this panel instead of the synthetic
        /// failure profile.
        #[arg(long)]
        panel: Option<PathBuf>,
        #[command(flatten)]
        sample: SampleArgs,
        /// Neighbor replacement probability when no panel is given.
        #[arg(long, default_value_t = 0.45)]
        p_nbr: f64,
        /// Expected neighbor failures when no panel is given.
        #[arg(long, default_value_t = 0.65)]
        ef: f64,
    },
    /// Simulate panels from the policy solved at given parameters.
    Simulate {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Spatial moments, thermal decomposition and plot data of a panel.
    Moments {
        #[command(flatten)]
        panel: PanelArgs,
        /// Also simulate moments at these parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Estimate the baseline or spatial model.
    Estimate {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        fit: FitArgs,
        /// Skip the Hessian standard errors.
        #[arg(long)]
        no_hessian: bool,
    },
    /// Cage-cluster bootstrap standard errors.
    Bootstrap {
        #[command(flatten)]
        panel: PanelArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long, default_value_t = 30)]
        reps: usize,
    },
    /// Compare the baseline and spatial fits found under --out.
    Report {
        /// Panel for the moment-validation table.
        #[arg(long)]
        panel: Option<PathBuf>,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Generate a synthetic panel from known parameters.
    GenSynthetic {
        #[arg(long, default_value_t = 84)]
        cabinets: usize,
        #[arg(long, default_value_t = 8)]
        slots: usize,
        /// Parameter file; defaults to the built-in truth.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct PanelArgs {
    /// Panel file (comma-separated; `.tsv` files are tab-separated).
    #[arg(long)]
    panel: PathBuf,
    #[command(flatten)]
    sample: SampleArgs,
}

#[derive(Args, Debug, Clone)]
struct SampleArgs {
    #[arg(long, default_value_t = 8, allow_negative_numbers = true)]
    t_min: i64,
    #[arg(long, default_value_t = 20, allow_negative_numbers = true)]
    t_max: i64,
    /// Keep locations that change (cabinet, cage).
    #[arg(long)]
    keep_movers: bool,
    /// Laplace smoothing of failure transitions.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_age_mode)]
    age_mode: Option<AgeMode>,
    /// Estimate the neighbor replacement probability per cage.
    #[arg(long)]
    pnbr_by_cage: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long, default_value = "spatial", value_parser = parse_mode)]
    mode: Mode,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sims: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Starting values; defaults to the reduced-form logit.
    #[arg(long)]
    start: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_age_mode(s: &str) -> std::result::Result<AgeMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on any other failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = ModelConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_kv(&KeyValues::read(path)?)?;
    }
    create_dir(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Ingest { panel } => ingest(&panel, &mut cfg, out),
        Command::Solve {
            params,
            panel,
            sample,
            p_nbr,
            ef,
        } => solve(&params, panel.as_deref(), &sample, p_nbr, ef, &mut cfg, out),
        Command::Simulate {
            panel,
            params,
            draws,
            horizon,
        } => {
            cfg.n_sims = draws.unwrap_or(cfg.n_sims);
            cfg.horizon = horizon.unwrap_or(cfg.horizon);
            simulate(&panel, &params, &mut cfg, cli.seed, out)
        }
        Command::Moments { panel, params, draws } => {
            cfg.n_sims = draws.unwrap_or(cfg.n_sims);
            moments(&panel, params.as_deref(), &mut cfg, cli.seed, out)
        }
        Command::Estimate {
            panel,
            fit,
            no_hessian,
        } => run_estimate(&panel, &fit, !no_hessian, &mut cfg, cli.seed, out),
        Command::Bootstrap { panel, fit, reps } => run_bootstrap(&panel, &fit, reps, &mut cfg, cli.seed, out),
        Command::Report { panel, sample, draws } => {
            cfg.n_sims = draws.unwrap_or(cfg.n_sims);
            report(panel.as_deref(), &sample, &mut cfg, cli.seed, out)
        }
        Command::GenSynthetic {
            cabinets,
            slots,
            params,
        } => gen_synthetic(cabinets, slots, params.as_deref(), &cfg, cli.seed, out),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    }
}

impl SampleArgs {
    fn apply(&self, cfg: &mut ModelConfig) -> FilterConfig {
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if let Some(mode) = self.age_mode {
            cfg.age_mode = mode;
        }
        if self.pnbr_by_cage {
            cfg.pooling = NeighborPooling {
                p_nbr_by_cage: true,
                ..cfg.pooling
            };
        }
        FilterConfig {
            t_min: self.t_min,
            t_max: self.t_max,
            drop_movers: !self.keep_movers,
        }
    }
}

fn load(path: &Path, sample: &SampleArgs, cfg: &mut ModelConfig) -> Result<EnrichedPanel> {
    let filter = sample.apply(cfg);
    cfg.validate()?;
    let raw = load_panel(path, &ColumnMap::default(), delimiter_for(path))?;
    let (panel, report) = prepare(&raw, &filter)?;
    log::info!(
        "{}: {} records read, {} kept ({} dropped as movers from {} locations, {} outside [{}, {}])",
        path.display(),
        report.input_records,
        report.kept,
        report.dropped_movers,
        report.mover_locations,
        report.dropped_window,
        filter.t_min,
        filter.t_max
    );
    Ok(panel)
}

fn read_params(path: &Path) -> Result<ModelParams> {
    ModelParams::from_kv(&KeyValues::read(path)?)
}

fn ingest(args: &PanelArgs, cfg: &mut ModelConfig, out: &Path) -> Result<()> {
    let panel = load(&args.panel, &args.sample, cfg)?;
    let s = PanelSummary::of(&panel).ok_or_else(|| Error::EmptySample("panel has no records".into()))?;
    let mut kv = KeyValues::new();
    kv.set("records", s.records);
    kv.set("locations", s.locations);
    kv.set("neighborhoods", s.neighborhoods);
    kv.set("first_period", s.first_period);
    kv.set("last_period", s.last_period);
    kv.set("replacement_rate", s.replacement_rate);
    kv.set("failure_rate", s.failure_rate);
    kv.set("n_lag_rate", s.n_lag_rate);
    kv.set("mean_f_cage", s.mean_f_cage);
    kv.write(&out.join("summary.kv"))?;
    let data = EstimationData::new(panel, cfg)?;
    write(&out.join("transitions.tsv"), &data.transitions.to_table())?;
    println!(
        "{} records, {} locations, {} neighborhoods, periods {}..={}, replacement rate {:.4}",
        s.records, s.locations, s.neighborhoods, s.first_period, s.last_period, s.replacement_rate
    );
    Ok(())
}

fn solve(
    params: &Path,
    panel: Option<&Path>,
    sample: &SampleArgs,
    p_nbr: f64,
    ef: f64,
    cfg: &mut ModelConfig,
    out: &Path,
) -> Result<()> {
    let params = read_params(params)?;
    let trans = match panel {
        Some(path) => EstimationData::new(load(path, sample, cfg)?, cfg)?.transitions,
        None => {
            sample.apply(cfg);
            cfg.validate()?;
            FailureProfile::default().transition_model(&cfg.state_spec(), [p_nbr; 3], [ef; 3])?
        }
    };
    let policy = solve_model(&params, &trans, cfg, None)?;
    write(&out.join("policy.tsv"), &policy.to_table())?;
    println!(
        "{} states, {} iterations, final delta {:e}",
        policy.spec().n_states(),
        policy.value.iterations,
        policy.value.delta
    );
    Ok(())
}

fn simulate(args: &PanelArgs, params: &Path, cfg: &mut ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let params = read_params(params)?;
    let data = EstimationData::new(load(&args.panel, &args.sample, cfg)?, cfg)?;
    let policy = solve_model(&params, &data.transitions, cfg, None)?;
    let sims = simulate_panels(&policy, &data.transitions, &data.init, &SimConfig::from_model(cfg, seed))?;
    let dir = out.join("sim");
    create_dir(&dir)?;
    for s in &sims {
        s.panel.to_panel().write_csv(&dir.join(format!("draw_{:04}.csv", s.draw)), b',')?;
    }
    let sim_m: Vec<_> = sims.iter().map(|s| compute_moments(&s.panel)).collect();
    write(&out.join("moments.tsv"), &render_moments(&data.data_moments, Some(&average_moments(&sim_m))))?;
    println!("{} panels of {} periods written to {}", sims.len(), cfg.horizon, dir.display());
    Ok(())
}

fn moments(args: &PanelArgs, params: Option<&Path>, cfg: &mut ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let panel = load(&args.panel, &args.sample, cfg)?;
    let data_m = compute_moments(&panel);
    let sim_m = match params {
        Some(p) => {
            let params = read_params(p)?;
            let data = EstimationData::new(panel.clone(), cfg)?;
            let policy = solve_model(&params, &data.transitions, cfg, None)?;
            let draws = simulate_moments(&policy, &data.transitions, &data.init, &SimConfig::from_model(cfg, seed))?;
            Some(average_moments(&draws))
        }
        None => None,
    };
    write(&out.join("moments.tsv"), &render_moments(&data_m, sim_m.as_ref()))?;
    write(&out.join("thermal.tsv"), &render_thermal(&moments_by_cage(&panel)))?;
    write(&out.join("plot_age.tsv"), &plot_rates_by_age(&panel, &cfg.state_spec()))?;
    write(&out.join("plot_period.tsv"), &plot_rates_by_period(&panel))?;
    print!("{}", render_moments(&data_m, sim_m.as_ref()));
    Ok(())
}

impl FitArgs {
    fn settings(&self, cfg: &mut ModelConfig, seed: u64) -> Result<EstimationSettings> {
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(s) = self.sims {
            cfg.n_sims = s;
        }
        cfg.validate()?;
        let mut settings = EstimationSettings::new(self.mode, seed);
        settings.optimizer.max_iters = self.max_iters;
        Ok(settings)
    }

    fn start(&self) -> Result<Option<ModelParams>> {
        self.start.as_deref().map(read_params).transpose()
    }
}

fn run_estimate(args: &PanelArgs, fit: &FitArgs, hessian: bool, cfg: &mut ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let panel = load(&args.panel, &args.sample, cfg)?;
    let settings = fit.settings(cfg, seed)?;
    let data = EstimationData::new(panel, cfg)?;
    log::info!("estimating {} model on {} observations", fit.mode, data.n_obs());
    let result = estimate(&data, cfg, &settings, fit.start()?)?;
    let mut kv = result.to_kv();
    if hessian {
        let h = hessian_standard_errors(&result.params, fit.mode, &data, cfg)?;
        for (name, se) in fit.mode.param_names().iter().zip(&h.std_errors) {
            kv.set(&format!("se_{name}"), se);
        }
        kv.set("hessian_positive_definite", h.positive_definite);
    }
    let dir = out.join(fit.mode.to_string());
    create_dir(&dir)?;
    kv.write(&dir.join("params.kv"))?;
    let policy: PolicyTable = solve_model(&result.params, &data.transitions, cfg, None)?;
    write(&dir.join("policy.tsv"), &policy.to_table())?;
    write(&dir.join("moments.tsv"), &render_moments(&result.data_moments, Some(&result.sim_moments)))?;
    println!(
        "{} fit: log-likelihood {:.4}, {} iterations, converged {}",
        fit.mode, result.log_likelihood, result.iterations, result.converged
    );
    Ok(())
}

fn run_bootstrap(args: &PanelArgs, fit: &FitArgs, reps: usize, cfg: &mut ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let panel = load(&args.panel, &args.sample, cfg)?;
    let settings = fit.settings(cfg, seed)?;
    let dir = out.join(fit.mode.to_string());
    // Prefer the stored point estimate as both start and reference.
    let stored = dir.join("params.kv");
    let point = match fit.start()? {
        Some(p) => Some(p),
        None if stored.exists() => Some(read_params(&stored)?),
        None => None,
    };
    let b = bootstrap_cages(&panel, cfg, &settings, reps, seed, point)?;
    if b.degenerate() {
        log::warn!("bootstrap has {} usable replicate(s); standard errors are zero", b.effective());
    }
    create_dir(&dir)?;
    let estimate = point.map(|p| p.to_vec());
    write(&dir.join("bootstrap.tsv"), &render_bootstrap(&b, estimate.as_deref()))?;
    write(&dir.join("bootstrap_replicates.tsv"), &render_bootstrap_replicates(&b))?;
    println!("{} of {} replicates succeeded", b.effective(), b.requested);
    Ok(())
}

fn report(panel: Option<&Path>, sample: &SampleArgs, cfg: &mut ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let load_fit = |mode: Mode| -> Result<KeyValues> { KeyValues::read(&out.join(mode.to_string()).join("params.kv")) };
    let (base_kv, spat_kv) = (load_fit(Mode::Baseline)?, load_fit(Mode::Spatial)?);
    let comparison = ComparisonReport::new(ModelFit::from_kv(&base_kv)?, ModelFit::from_kv(&spat_kv)?)?;
    write(&out.join("comparison.txt"), &comparison.render())?;
    print!("{}", comparison.render());
    if let Some(path) = panel {
        let data = EstimationData::new(load(path, sample, cfg)?, cfg)?;
        let sim_cfg = SimConfig::from_model(cfg, seed);
        let rates = |kv: &KeyValues| -> Result<[Option<f64>; 10]> {
            let policy = solve_model(&ModelParams::from_kv(kv)?, &data.transitions, cfg, None)?;
            let sims = simulate_panels(&policy, &data.transitions, &data.init, &sim_cfg)?;
            let draws: Vec<_> = sims.iter().map(|s| ConditionalRates::of(&s.panel)).collect();
            Ok(ConditionalRates::average_values(&draws))
        };
        let table = moment_validation_table(&ConditionalRates::of(&data.panel), &rates(&base_kv)?, &rates(&spat_kv)?);
        write(&out.join("validation.tsv"), &render_validation_table(&table))?;
        write(&out.join("thermal.tsv"), &render_thermal(&moments_by_cage(&data.panel)))?;
    }
    Ok(())
}

fn gen_synthetic(cabinets: usize, slots: usize, params: Option<&Path>, cfg: &ModelConfig, seed: u64, out: &Path) -> Result<()> {
    let params = match params {
        Some(p) => read_params(p)?,
        None => ModelParams::from_slice(&DEFAULT_TRUTH),
    };
    let syn_cfg = SyntheticConfig {
        facility: Facility {
            n_cabinets: cabinets,
            slots_per_cage: slots,
        },
        seed,
        ..Default::default()
    };
    let data = generate_synthetic(&params, &syn_cfg, cfg)?;
    data.panel.write_csv(&out.join("synthetic.csv"), b',')?;
    let mut kv = KeyValues::new();
    params.write_kv(&mut kv);
    kv.set("seed", seed);
    kv.set("cabinets", cabinets);
    kv.set("slots", slots);
    kv.write(&out.join("truth.kv"))?;
    println!(
        "{} locations, {} records written to {}",
        data.panel.n_locations(),
        data.panel.len(),
        out.join("synthetic.csv").display()
    );
    Ok(())
}

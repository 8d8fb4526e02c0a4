use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mmdl::array::{sample_impairments, ArraySpec, ImpairmentProfile};
use mmdl::channel::{virtual_dictionary, AngleGrid, ChannelConfig, ChannelRealization};
use mmdl::crlb::{total_crlb, CrlbConfig, CrlbReport};
use mmdl::dict::{init_dictionary, learn, Dictionary, LearnConfig, LearnState, TrainingSet};
use mmdl::experiment::{derive_seed, nmse, run_experiment, run_experiment_with_threads, ExperimentConfig};
use mmdl::io::{load_json, save_json, save_vec_rows};
use mmdl::measurement::{simulate_dataset, MeasurementDataset, TrainingConfig, TrainingSetup};
use mmdl::sparse::{estimate_channel, Solver};
use mmdl::tensor::{conj, kron, l21_norm, CMatrix};

use crate::config;
use crate::{Cli, CliError, Command, Method};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => generate(cli),
        Command::Learn { data, method, resume } => learn_cmd(cli, data, *method, *resume),
        Command::Estimate { data, dict } => estimate(cli, data, dict),
        Command::Crlb { data, location } => crlb(cli, data, *location),
        Command::Experiment => experiment(cli),
    }
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.global.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_config<T: Serialize + serde::de::DeserializeOwned>(cli: &Cli, defaults: &T) -> Result<T> {
    config::load(defaults, cli.global.config.as_deref(), &cli.global.overrides)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub channel: ChannelConfig,
    pub impairments: ImpairmentProfile,
    /// `training.seed` is replaced by one derived from `seed`.
    pub training: TrainingConfig,
    pub n_locations: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            channel: ChannelConfig::new(ArraySpec::ula(8), ArraySpec::ula(4), 2, 4, 16),
            impairments: ImpairmentProfile::default(),
            training: TrainingConfig {
                frames: 60,
                n_rep: 1,
                lt: 2,
                lr: 2,
                phase_bits: 2,
                snr_db: 0.0,
                power: 1.0,
                seed: 0,
            },
            n_locations: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub config: GenerateConfig,
    pub n_locations: usize,
    pub nr: usize,
    pub nt: usize,
    pub n_subcarriers: usize,
    pub measurements_per_location: usize,
    pub snr_db: f64,
    /// SNR after averaging the `n_rep` repetitions.
    pub effective_snr_db: f64,
}

fn channel_dir(data: &Path, u: usize) -> PathBuf {
    data.join("channels").join(format!("loc_{u:03}"))
}

fn generate(cli: &Cli) -> Result<()> {
    let mut cfg: GenerateConfig = load_config(cli, &GenerateConfig::default())?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if cfg.n_locations == 0 {
        return Err(CliError::Data("config field `n_locations`: must be positive".into()));
    }
    cfg.training.seed = derive_seed(cfg.seed, &[3]);
    cfg.channel.validate()?;
    cfg.training.validate()?;
    let (tx, rx) = (&cfg.channel.tx, &cfg.channel.rx);
    let rx_imp = sample_impairments(rx, derive_seed(cfg.seed, &[1, 0]), &cfg.impairments);
    let tx_imp = sample_impairments(tx, derive_seed(cfg.seed, &[1, 1]), &cfg.impairments);
    let channels = (0..cfg.n_locations)
        .map(|u| ChannelRealization::generate(&cfg.channel, &rx_imp, &tx_imp, derive_seed(cfg.seed, &[2, u as u64])))
        .collect::<mmdl::Result<Vec<_>>>()?;
    let setup = TrainingSetup::new(&cfg.training, tx.n_antennas, rx.n_antennas)?;
    let ds = simulate_dataset(&channels, &setup, derive_seed(cfg.seed, &[4]))?;
    let out = out_dir(cli, "data");
    ds.save(&out)?;
    for (u, ch) in channels.iter().enumerate() {
        ch.save(&channel_dir(&out, u))?;
    }
    let manifest = DatasetManifest {
        kind: "dataset".into(),
        n_locations: cfg.n_locations,
        nr: ds.nr,
        nt: ds.nt,
        n_subcarriers: ds.n_subcarriers(),
        measurements_per_location: ds.phi.nrows(),
        snr_db: cfg.training.snr_db,
        effective_snr_db: cfg.training.snr_db + 10.0 * (cfg.training.n_rep as f64).log10(),
        config: cfg,
    };
    save_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} locations to {}: {}x{} antennas, {} subcarriers, {} measurements each, SNR {:.1} dB (effective {:.1} dB)",
        manifest.n_locations,
        out.display(),
        manifest.nr,
        manifest.nt,
        manifest.n_subcarriers,
        manifest.measurements_per_location,
        manifest.snr_db,
        manifest.effective_snr_db
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<MeasurementDataset> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(MeasurementDataset::load(dir)?)
}

/// Array specs of a dataset, ULA if it has no generator manifest.
fn arrays_of(dir: &Path, ds: &MeasurementDataset) -> Result<(ArraySpec, ArraySpec)> {
    let path = dir.join("manifest.json");
    if path.exists() {
        let m: DatasetManifest = load_json(&path)?;
        Ok((m.config.channel.tx, m.config.channel.rx))
    } else {
        Ok((ArraySpec::ula(ds.nt), ArraySpec::ula(ds.nr)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LearnManifest {
    pub kind: String,
    pub method: String,
    pub iterations: usize,
    pub converged: bool,
    /// Set when learning stopped at `max_iter` before reaching `rel_tol`.
    pub warning: bool,
    pub final_objective: f64,
    pub rejected_updates: usize,
    pub replaced_atoms: usize,
    pub config: LearnConfig,
}

fn learn_cmd(cli: &Cli, data: &Path, method: Method, resume: bool) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut cfg: LearnConfig = load_config(cli, &LearnConfig::new(2 * ds.nr, 2 * ds.nt))?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let training = TrainingSet::from_dataset(&ds)?;
    let out = out_dir(cli, "dict");
    let separable = method == Method::Sedl;
    let state = if resume {
        let mut st = LearnState::load(&out)?;
        if st.dictionary.is_separable() != separable {
            return Err(CliError::Data(format!("state in {} was learned with the other method", out.display())));
        }
        cfg.max_iter += st.iteration;
        st.converged = false;
        st
    } else {
        let init = init_dictionary(&training, &cfg, separable)?;
        LearnState::initial(&training, &cfg, init)?
    };
    let state = learn(&training, &cfg, state)?;
    state.dictionary.save(&out)?;
    state.save(&out)?;
    let mut trace = csv::Writer::from_path(out.join("trace.csv")).map_err(|e| CliError::Data(e.to_string()))?;
    trace
        .write_record(["iteration", "objective"])
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (i, v) in state.objective_trace.iter().enumerate() {
        trace
            .write_record([i.to_string(), format!("{v:e}")])
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    trace.flush()?;
    let manifest = LearnManifest {
        kind: "learn".into(),
        method: if separable { "sedl" } else { "codl" }.into(),
        iterations: state.iteration,
        converged: state.converged,
        warning: !state.converged,
        final_objective: *state.objective_trace.last().expect("trace starts nonempty"),
        rejected_updates: state.rejected_updates,
        replaced_atoms: state.replaced_atoms,
        config: cfg,
    };
    save_json(&out.join("manifest.json"), &manifest)?;
    if manifest.warning {
        log::warn!("stopped after {} iterations without reaching rel_tol", manifest.iterations);
    }
    println!(
        "{} dictionary with {} atoms after {} iterations (objective {:.6e}{}) in {}",
        manifest.method,
        state.dictionary.n_atoms(),
        manifest.iterations,
        manifest.final_objective,
        if manifest.warning { ", not converged" } else { "" },
        out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub solver: Solver,
    /// Grid sizes of the `iarm` dictionary; `null` means twice the array size.
    pub kt: Option<usize>,
    pub kr: Option<usize>,
    pub grid: AngleGrid,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Swomp { k_max: 16, tol: None },
            kt: None,
            kr: None,
            grid: AngleGrid::Angle,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EstimateReport {
    pub dictionary: String,
    pub n_atoms: usize,
    pub solver: Solver,
    pub n_locations: usize,
    pub l21: Vec<f64>,
    pub nmse: Option<Vec<f64>>,
    pub mean_nmse: Option<f64>,
}

fn estimate(cli: &Cli, data: &Path, dict: &str) -> Result<()> {
    let ds = load_dataset(data)?;
    let cfg: EstimateConfig = load_config(cli, &EstimateConfig::default())?;
    let psi = if dict == "iarm" {
        let (tx, rx) = arrays_of(data, &ds)?;
        let at = virtual_dictionary(&tx, cfg.kt.unwrap_or(2 * ds.nt), None, cfg.grid)?;
        let ar = virtual_dictionary(&rx, cfg.kr.unwrap_or(2 * ds.nr), None, cfg.grid)?;
        kron(&conj(&at), &ar)?
    } else {
        let dir = Path::new(dict);
        if !dir.is_dir() {
            return Err(CliError::Data(format!("dictionary directory {dict} does not exist")));
        }
        Dictionary::load(dir)?.psi()?
    };
    let est = estimate_channel(&ds, &psi, &cfg.solver)?;
    let nmse_values = if ds.truth.is_empty() {
        None
    } else {
        Some(
            ds.truth
                .iter()
                .zip(&est.channels)
                .map(|(t, e)| nmse(t, e))
                .collect::<mmdl::Result<Vec<f64>>>()?,
        )
    };
    let out = out_dir(cli, "estimate");
    std::fs::create_dir_all(&out)?;
    let flat: Vec<CMatrix> = est.channels.iter().flatten().cloned().collect();
    save_vec_rows(&out.join("estimates.csv"), &flat)?;
    let report = EstimateReport {
        dictionary: dict.to_string(),
        n_atoms: psi.ncols(),
        solver: cfg.solver,
        n_locations: est.channels.len(),
        l21: est.codes.iter().map(|c| l21_norm(&c.coefficients)).collect(),
        mean_nmse: nmse_values.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64),
        nmse: nmse_values,
    };
    save_json(&out.join("estimate.json"), &report)?;
    match report.mean_nmse {
        Some(m) => println!(
            "estimated {} locations with {} atoms: mean NMSE {:.4e} ({:.2} dB)",
            report.n_locations,
            report.n_atoms,
            m,
            10.0 * m.log10()
        ),
        None => println!("estimated {} locations with {} atoms", report.n_locations, report.n_atoms),
    }
    Ok(())
}

fn crlb(cli: &Cli, data: &Path, location: usize) -> Result<()> {
    let ds = load_dataset(data)?;
    if location >= ds.n_locations() {
        return Err(CliError::Data(format!("location {location} out of range, dataset has {}", ds.n_locations())));
    }
    let cfg: CrlbConfig = load_config(cli, &CrlbConfig::default())?;
    let dir = channel_dir(data, location);
    if !dir.is_dir() {
        return Err(CliError::Data(format!("no channel parameters at {}", dir.display())));
    }
    let ch = ChannelRealization::load(&dir)?;
    let report: CrlbReport = total_crlb(&ds.select(location..location + 1), &ch, &cfg)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    if let Some(out) = &cli.global.out {
        std::fs::create_dir_all(out)?;
        save_json(&out.join("crlb.json"), &report)?;
    }
    let mut stdout = std::io::stdout().lock();
    let printed = writeln!(stdout, "crlb {:.6e}", report.crlb)
        .and_then(|_| writeln!(stdout, "condition_number {:.6e}", report.condition_number))
        .and_then(|_| writeln!(stdout, "{text}"));
    match printed {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn experiment(cli: &Cli) -> Result<()> {
    let mut cfg: ExperimentConfig = load_config(cli, &ExperimentConfig::default())?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    let table = match cli.global.threads {
        Some(n) => run_experiment_with_threads(&cfg, n)?,
        None => run_experiment(&cfg)?,
    };
    let out = out_dir(cli, "results");
    table.save(&out)?;
    let failures = table.rows.iter().filter(|r| r.error.is_some()).count();
    for s in table.summary() {
        let fmt = |m: Option<mmdl::experiment::MeanCi>| m.map_or("-".to_string(), |m| format!("{:.4}±{:.4}", m.mean, m.ci95));
        println!(
            "{:<12} M={:<4} SNR={:<5} NMSE {:<18} SE {:<18} l21 {}",
            s.case,
            s.frames,
            s.snr_db,
            fmt(s.nmse),
            fmt(s.se),
            fmt(s.l21)
        );
    }
    println!("{} rows ({} failed) written to {}", table.rows.len(), failures, out.display());
    Ok(())
}

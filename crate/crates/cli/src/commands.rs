use std::path::{Path, PathBuf};
use std::time::Instant;

use mionet::model::{forward_eval_with_trunk, predict, trunk_outputs, ModelConfig, ModelParams};
use mionet::oracle::{
    entrance_length_sweep, generate_dataset, generate_mesh, reference_roundtrip, sample_heat_flux, synthesize_fields,
    weisman_psi, EntranceLengthRow, NusseltReport, REFERENCE_VELOCITY,
};
use mionet::storage::{read_checkpoint, read_dataset, read_report, report_to_string, write_atomic, write_checkpoint, write_dataset, write_report};
use mionet::training::{cross_validate, evaluate as evaluate_model, train_test_split, train_with_holdout, CVReport, EvalReport, TrainHistory};
use mionet::{CenterPlaneMesh, Error, InputSample, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::Common;

/// Latency reported for the published model, for side-by-side printing.
pub const PUBLISHED_LATENCY_MS: f64 = 5.24;

fn load_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut overrides = common.set.clone();
    overrides.extend(flags.iter().filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v))));
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn train_report_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".train.json");
    PathBuf::from(s)
}

pub fn generate(common: &Common, samples: Option<usize>, seed: Option<u64>, mesh_nodes: Option<usize>, out: &Path) -> Result<()> {
    let config = load_config(
        common,
        &[
            ("data.samples", samples.map(|v| v.to_string())),
            ("data.seed", seed.map(|v| v.to_string())),
            ("data.mesh_nodes", mesh_nodes.map(|v| v.to_string())),
        ],
    )?;
    let g = &config.geometry;
    let start = Instant::now();
    let mesh = generate_mesh(g, config.data.mesh_nodes, 0.5 * g.length)?;
    let data = generate_dataset(config.data.samples, config.data.seed, g, &config.fluid, &mesh, &config.ranges, config.model.n1)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_dataset(out, &data)?;
    let r = &config.ranges;
    println!("wrote {} samples to {}", data.len(), display(out));
    println!("nodes N = {} (requested {})", mesh.len(), config.data.mesh_nodes);
    println!(
        "ranges: P_max [{}, {}] kW/m2, T_in [{}, {}] K, v_in [{}, {}] m/s",
        r.p_max.0, r.p_max.1, r.t_in.0, r.t_in.1, r.v_in.0, r.v_in.1
    );
    println!("wall-clock {:.3} ms per sample", 1e3 * elapsed / data.len() as f64);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub command: String,
    pub config: RunConfig,
    pub dataset: String,
    pub model_config: ModelConfig,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Part of the training partition used only to stop the final model.
    pub holdout_indices: Vec<usize>,
    pub cross_validation: Option<CVReport>,
    pub final_model: TrainHistory,
}

pub fn train(common: &Common, dataset: &Path, out: &Path, folds: Option<usize>, seed: Option<u64>, max_epochs: Option<usize>) -> Result<()> {
    let config = load_config(
        common,
        &[
            ("train.folds", folds.map(|v| v.to_string())),
            ("train.seed", seed.map(|v| v.to_string())),
            ("train.max_epochs", max_epochs.map(|v| v.to_string())),
        ],
    )?;
    let data = read_dataset(dataset)?;
    let mut section = config.model.clone();
    section.n1 = data.n1;
    let model_config = section.for_nodes(data.mesh.len());
    let (train_idx, test_idx) = train_test_split(data.len(), config.split.test_fraction, config.train.seed)?;
    println!("split: {} train, {} test", train_idx.len(), test_idx.len());

    let cv = if config.split.cross_validate {
        let cv = cross_validate(&data, &train_idx, &config.train, &model_config)?;
        println!(
            "{}-fold validation MSE (normalized): {:.6e} +/- {:.6e}",
            cv.k_folds, cv.mean_val_loss, cv.std_val_loss
        );
        Some(cv)
    } else {
        None
    };

    let (params, history, holdout) = train_with_holdout(
        &data,
        &train_idx,
        config.split.holdout_fraction,
        &config.train,
        &model_config,
        config.train.seed,
    )?;
    println!(
        "final model: best epoch {} of {}, hold-out loss {:.6e}",
        history.best_epoch,
        history.epochs.len(),
        history.best_val_loss
    );
    write_checkpoint(out, &params)?;
    let report = TrainReport {
        command: "train".into(),
        config,
        dataset: display(dataset),
        model_config,
        train_indices: train_idx,
        test_indices: test_idx,
        holdout_indices: holdout,
        cross_validation: cv,
        final_model: history,
    };
    let report_path = train_report_path(out);
    write_report(&report_path, &report)?;
    println!("wrote {} and {}", display(out), display(&report_path));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Train,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub command: String,
    pub config: RunConfig,
    pub model: String,
    pub dataset: String,
    pub split: Split,
    pub evaluation: EvalReport,
}

pub fn evaluate(common: &Common, model: &Path, dataset: &Path, report: &Path, train_report: Option<&Path>, split: Split) -> Result<()> {
    let config = load_config(common, &[])?;
    let params = read_checkpoint(model)?;
    let data = read_dataset(dataset)?;
    let train_path = train_report.map(Path::to_path_buf).unwrap_or_else(|| train_report_path(model));
    let tr: TrainReport = read_report(&train_path)?;
    let indices = match split {
        Split::Test => tr.test_indices,
        Split::Train => tr.train_indices,
    };
    let evaluation = evaluate_model(&params, &data, &indices)?;
    for q in &evaluation.quantities {
        let s = &q.relative_l2_summary;
        println!(
            "{}: relative L2 mean {:.4}% std {:.4}% median {:.4}%; MSE mean {:.4e}",
            q.quantity.symbol(),
            s.mean,
            s.std,
            s.median,
            q.mse_summary.mean
        );
    }
    write_report(
        report,
        &EvaluateReport {
            command: "evaluate".into(),
            config,
            model: display(model),
            dataset: display(dataset),
            split,
            evaluation,
        },
    )
}

fn mesh_for(params: &ModelParams, config: &RunConfig, dataset: Option<&Path>) -> Result<CenterPlaneMesh> {
    let mesh = match dataset {
        Some(path) => read_dataset(path)?.mesh,
        None => generate_mesh(&config.geometry, config.data.mesh_nodes, 0.5 * config.geometry.length)?,
    };
    if mesh.len() != params.config.n_nodes {
        return Err(Error::Shape {
            context: "mesh for model".into(),
            expected: format!("{} nodes", params.config.n_nodes),
            found: format!(
                "{} nodes{}",
                mesh.len(),
                if dataset.is_none() { " (regenerated; pass --dataset or set data.mesh_nodes)" } else { "" }
            ),
        });
    }
    Ok(mesh)
}

pub fn infer(common: &Common, model: &Path, (p_max, t_in, v_in): (f64, f64, f64), out: &Path, dataset: Option<&Path>) -> Result<()> {
    let config = load_config(common, &[])?;
    let params = read_checkpoint(model)?;
    let mesh = mesh_for(&params, &config, dataset)?;
    if !config.ranges.contains(p_max, t_in, v_in) {
        log::warn!("operating point outside the configured input ranges; prediction is an extrapolation");
    }
    let sample = InputSample {
        p_rod: sample_heat_flux(p_max, params.config.n1, config.geometry.length)?,
        t_in,
        v_in,
    };
    let start = Instant::now();
    let fields = predict(&params, &sample, &mesh)?;
    let elapsed = start.elapsed().as_secs_f64();
    let clipped = fields.k.iter().filter(|&&k| k < 0.0).count();
    let mut csv = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("CSV encoding: {e}"));
    csv.write_record(["x", "y", "T", "v", "k"]).map_err(csv_err)?;
    for i in 0..mesh.len() {
        let row = [mesh.x()[i], mesh.y()[i], fields.t[i], fields.v[i], fields.k[i].max(0.0)];
        csv.serialize(row).map_err(csv_err)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::InvalidArgument(format!("CSV encoding: {e}")))?;
    write_atomic(out, &bytes)?;
    if clipped > 0 {
        println!("clipped {clipped} negative k values to 0");
    }
    println!("wrote {} nodes to {}", mesh.len(), display(out));
    println!("inference time {:.3} ms (published reference {PUBLISHED_LATENCY_MS} ms)", 1e3 * elapsed);
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Latency {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn latency(samples_ms: &[f64]) -> Latency {
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    Latency {
        mean_ms: samples_ms.iter().sum::<f64>() / samples_ms.len() as f64,
        p50_ms: percentile(&sorted, 0.5),
        p99_ms: percentile(&sorted, 0.99),
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub command: String,
    pub config: RunConfig,
    pub machine: String,
    pub model: String,
    pub n_nodes: usize,
    pub iters: usize,
    /// Eval-mode forward including the trunk.
    pub forward: Latency,
    pub oracle_ms: f64,
    /// `oracle_ms / forward.mean_ms`.
    pub speedup_vs_oracle: f64,
    pub published_latency_ms: f64,
    pub note: String,
}

pub fn machine_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{} {} ({cpus} logical CPUs)", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn bench(common: &Common, model: &Path, iters: usize, dataset: &Path, report: Option<&Path>) -> Result<()> {
    if iters == 0 {
        return Err(Error::InvalidArgument("--iters must be >= 1".into()));
    }
    let config = load_config(common, &[])?;
    let params = read_checkpoint(model)?;
    let data = read_dataset(dataset)?;
    let mesh = mesh_for(&params, &config, Some(dataset))?;
    let sample = &data.samples[0];
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let start = Instant::now();
        let psi = trunk_outputs(&params, &mesh)?;
        std::hint::black_box(forward_eval_with_trunk(&params, sample, &psi)?);
        times.push(1e3 * start.elapsed().as_secs_f64());
    }
    let forward = latency(&times);
    let start = Instant::now();
    std::hint::black_box(synthesize_fields(sample, &data.geometry, &config.fluid, &mesh)?);
    let oracle_ms = 1e3 * start.elapsed().as_secs_f64();
    let out = BenchReport {
        command: "bench".into(),
        config,
        machine: machine_descriptor(),
        model: display(model),
        n_nodes: mesh.len(),
        iters,
        forward,
        oracle_ms,
        speedup_vs_oracle: oracle_ms / forward.mean_ms,
        published_latency_ms: PUBLISHED_LATENCY_MS,
        note: "the oracle is an analytic reduced-order model, not a CFD solve; the speedup is not comparable to a CFD wall-clock ratio".into(),
    };
    println!(
        "forward: mean {:.3} ms, p50 {:.3} ms, p99 {:.3} ms over {iters} runs (published reference {PUBLISHED_LATENCY_MS} ms)",
        forward.mean_ms, forward.p50_ms, forward.p99_ms
    );
    println!("oracle: {:.3} ms; ratio {:.2}", oracle_ms, out.speedup_vs_oracle);
    match report {
        Some(path) => write_report(path, &out),
        None => {
            print!("{}", report_to_string(&out)?);
            Ok(())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ValidateReport {
    pub command: String,
    pub config: RunConfig,
    pub weisman_psi: f64,
    /// Resolutions 16, 32, ..., 256.
    pub nusselt: Vec<NusseltReport>,
    pub roundtrip_pass: bool,
    pub entrance_length: Vec<EntranceLengthRow>,
    pub entrance_length_pass: bool,
}

pub const ROUNDTRIP_RESOLUTIONS: [usize; 5] = [16, 32, 64, 128, 256];

pub fn validate(common: &Common, report: Option<&Path>) -> Result<()> {
    let config = load_config(common, &[])?;
    let (g, p) = (&config.geometry, &config.fluid);
    let psi = weisman_psi(g.pitch_to_diameter());
    println!("P/D = {:.4}, psi = {:.4}", g.pitch_to_diameter(), psi);
    let nusselt = ROUNDTRIP_RESOLUTIONS
        .iter()
        .map(|&n| reference_roundtrip(g, p, n))
        .collect::<Result<Vec<_>>>()?;
    for r in &nusselt {
        println!(
            "n_z {:>3}: Nu_avg {:.4}, Nu_Weisman {:.4}, margin {:.4e}%",
            r.n_z, r.nu_avg, r.nu_weisman, r.margin_percent
        );
    }
    let monotone = nusselt.windows(2).all(|w| w[1].margin_percent < w[0].margin_percent);
    let finest = nusselt.last().expect("resolutions are non-empty");
    let roundtrip_pass = monotone && finest.margin_percent <= 1.0;
    println!(
        "{} Nusselt round trip at v = {REFERENCE_VELOCITY} m/s: margin {:.4e}% <= 1%, monotone in n_z: {monotone}",
        if roundtrip_pass { "PASS" } else { "FAIL" },
        finest.margin_percent
    );
    let sweep = entrance_length_sweep(g, p, config.ranges.v_in, 10);
    for row in &sweep {
        println!("v_in {:.3} m/s: Re {:.0}, L = {:.4} m", row.v_in, row.reynolds, row.entrance_length);
    }
    let entrance_length_pass = sweep.iter().all(|r| r.entrance_length < g.length);
    println!(
        "{} entrance length below domain length {} m at all {} points",
        if entrance_length_pass { "PASS" } else { "FAIL" },
        g.length,
        sweep.len()
    );
    let out = ValidateReport {
        command: "validate".into(),
        config,
        weisman_psi: psi,
        nusselt,
        roundtrip_pass,
        entrance_length: sweep,
        entrance_length_pass,
    };
    if let Some(path) = report {
        write_report(path, &out)?;
    }
    if roundtrip_pass && entrance_length_pass {
        Ok(())
    } else {
        Err(Error::CheckFailed("oracle validation failed".into()))
    }
}

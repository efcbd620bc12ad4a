//! Run orchestration on top of the trainer: output-directory artifacts,
//! ablation grids, plot-data export, and the deployment verification suite.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::checkpoint::{checksum, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::intexec::{int_linear, pack};
use crate::quantizer::{compute_qparams, fake_quantize_dynamic, Granularity};
use crate::rng::Rng;
use crate::toydiff::{
    load_or_generate, model_from_checkpoint, model_to_checkpoint, quantized_linear_forward,
    Denoiser, NoiseSchedule, T64,
};
use crate::trainer::{
    pretrain_teacher, quadratic_regret_run, small_sigma_fraction, EtaSchedule, RegretReport,
    Trainer,
};

pub const SCHEDULE_N: usize = 100;

#[derive(Debug, Clone, serde::Serialize)]
pub struct RunSummary {
    pub status: String,
    pub seed: u64,
    pub strategy: String,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// KD loss of the finished model on a fresh deterministic batch.
    pub final_eval_loss: Option<f64>,
    pub mean_grad_norm: f64,
    pub phase_log: Vec<usize>,
    pub checkpoint_checksum: u64,
    pub wall_secs: f64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load_or_pretrain_teacher(
    cfg: &crate::trainer::TrainConfig,
    schedule: &NoiseSchedule,
    ds: &crate::toydiff::Dataset,
    path: &Path,
) -> Result<Denoiser> {
    if path.exists() {
        let ckpt = Checkpoint::load(path)?;
        let mut teacher = model_from_checkpoint(&ckpt, schedule)?;
        teacher.freeze()?;
        return Ok(teacher);
    }
    let teacher = pretrain_teacher(cfg, schedule, ds)?;
    model_to_checkpoint(&teacher)?.save(path)?;
    Ok(teacher)
}

/// Execute one configured run in `out`, writing the resolved config echo,
/// trace CSV, spectra JSON, checkpoints, and a summary JSON. On a non-finite
/// loss the partial trace is still written and the error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let tc = cfg.to_train_config()?;
    let schedule = NoiseSchedule::cosine(SCHEDULE_N);
    let ds = load_or_generate(&out.join("dataset.ckpt"), tc.dataset, tc.dataset_size, tc.seed)?;
    let teacher = load_or_pretrain_teacher(&tc, &schedule, &ds, &out.join("teacher.ckpt"))?;
    let mut trainer = Trainer::new(tc.clone(), &schedule, &teacher, &ds)?;
    let run_result = trainer.run(Some(&out.join("model.ckpt")));
    write_atomic(&out.join("trace.csv"), trainer.trace.to_csv().as_bytes())?;
    write_atomic(&out.join("spectra.json"), trainer.trace.spectra_json().as_bytes())?;
    let model_bytes = model_to_checkpoint(&trainer.model)?.to_bytes();
    let status = if run_result.is_ok() { "complete" } else { "aborted" };
    let final_eval_loss = if run_result.is_ok() {
        Some(crate::trainer::eval_kd_loss(&trainer.model, &teacher, &ds, &schedule, 256, tc.seed)?)
    } else {
        None
    };
    let summary = RunSummary {
        status: status.into(),
        seed: tc.seed,
        strategy: tc.strategy.name().into(),
        steps: trainer.trace.rows.len(),
        final_loss: trainer.trace.final_loss(),
        final_eval_loss,
        mean_grad_norm: trainer.trace.mean_grad_norm(0, tc.steps),
        phase_log: trainer.trace.phase_log.clone(),
        checkpoint_checksum: checksum(&model_bytes),
        wall_secs: started.elapsed().as_secs_f64(),
    };
    write_atomic(
        &out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialize").as_bytes(),
    )?;
    run_result?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// Ablation grids
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct CellResult {
    pub label: String,
    pub final_loss: Option<f64>,
    pub mean_grad_norm: f64,
    pub wall_secs: f64,
}

fn grid_cells(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let ab = &cfg.ablate;
    if ab.is_empty() {
        return Err(Error::Config("ablate grid is empty".into()));
    }
    let one = |v: &str| vec![v.to_string()];
    let strategies = if ab.strategy.is_empty() { one(&cfg.train.strategy) } else { ab.strategy.clone() };
    let lambdas = if ab.lambda.is_empty() { vec![cfg.train.lambda] } else { ab.lambda.clone() };
    let r0s = if ab.r0.is_empty() { vec![cfg.train.r0] } else { ab.r0.clone() };
    let anneals = if ab.anneal.is_empty() { one(&cfg.train.anneal) } else { ab.anneal.clone() };
    let orders = if ab.gamma_order.is_empty() { one(&cfg.train.gamma_order) } else { ab.gamma_order.clone() };
    let mut cells = Vec::new();
    for s in &strategies {
        for &l in &lambdas {
            for &r in &r0s {
                for a in &anneals {
                    for o in &orders {
                        let mut cell = cfg.clone();
                        cell.ablate = Default::default();
                        cell.train.strategy = s.clone();
                        cell.train.lambda = l;
                        cell.train.r0 = r;
                        cell.train.anneal = a.clone();
                        cell.train.gamma_order = o.clone();
                        let mut label = String::new();
                        if !ab.strategy.is_empty() { label += &format!("strategy-{s}_"); }
                        if !ab.lambda.is_empty() { label += &format!("lambda-{l}_"); }
                        if !ab.r0.is_empty() { label += &format!("r0-{r}_"); }
                        if !ab.anneal.is_empty() { label += &format!("anneal-{a}_"); }
                        if !ab.gamma_order.is_empty() { label += &format!("order-{o}_"); }
                        let label = label.trim_end_matches('_').replace('.', "p");
                        // r0 = 0 with a rank strategy degenerates to the
                        // naive baseline; the schedule would have no phases
                        if r == 0 && (s == "rank" || s == "rank-frozen") {
                            cell.train.strategy = "none".into();
                        }
                        cell.to_train_config()
                            .map_err(|e| Error::Config(format!("cell {label}: {e}")))?;
                        cells.push((label, cell));
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// One seeded run per grid cell, up to `parallel` cells at a time, each in
/// its own subdirectory of `out`; emits comparison tables in CSV and aligned
/// text.
pub fn run_ablation(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<Vec<CellResult>> {
    let cells = grid_cells(cfg)?;
    std::fs::create_dir_all(out)?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CellResult>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = parallel.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let (label, cell_cfg) = &cells[i];
                let dir = out.join(format!("cell-{label}"));
                let res = run_experiment(cell_cfg, &dir).map(|s| CellResult {
                    label: label.clone(),
                    final_loss: s.final_eval_loss,
                    mean_grad_norm: s.mean_grad_norm,
                    wall_secs: s.wall_secs,
                });
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let collected: Vec<CellResult> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("cell ran"))
        .collect::<Result<_>>()?;
    let mut csv = String::from("cell,final_kd_loss,mean_grad_norm,wall_secs\n");
    let mut txt = format!(
        "{:<40} {:>14} {:>14} {:>10}\n",
        "cell", "final_kd_loss", "mean_grad_norm", "wall_secs"
    );
    for c in &collected {
        let loss = c.final_loss.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into());
        csv.push_str(&format!("{},{},{},{:.3}\n", c.label, loss, c.mean_grad_norm, c.wall_secs));
        txt.push_str(&format!(
            "{:<40} {:>14} {:>14.6} {:>10.3}\n",
            c.label, loss, c.mean_grad_norm, c.wall_secs
        ));
    }
    write_atomic(&out.join("ablation.csv"), csv.as_bytes())?;
    write_atomic(&out.join("ablation.txt"), txt.as_bytes())?;
    Ok(collected)
}

// ---------------------------------------------------------------------------
// Plot-data export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct PlotSeries {
    pub steps: Vec<usize>,
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SpectraPoint {
    pub step: usize,
    /// (layer, fraction of singular values below σ₁/14)
    pub small_fraction: Vec<(String, f64)>,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PlotData {
    pub series: PlotSeries,
    pub spectra: Vec<SpectraPoint>,
    /// Present when a second run directory is joined on step index.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paired: Option<PlotSeries>,
}

fn read_trace_csv(path: &Path) -> Result<PlotSeries> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| Error::Config(format!("missing trace at {}", path.display())))?;
    let mut series = PlotSeries { steps: vec![], loss: vec![], grad_norm: vec![] };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return Err(Error::Config(format!("malformed trace row {line:?}")));
        }
        series.steps.push(f[0].parse().map_err(|_| Error::Config("bad step".into()))?);
        series.loss.push(f[1].parse().map_err(|_| Error::Config("bad loss".into()))?);
        series.grad_norm.push(f[2].parse().map_err(|_| Error::Config("bad grad_norm".into()))?);
    }
    Ok(series)
}

fn downsample(series: &PlotSeries, max_points: usize) -> PlotSeries {
    let stride = series.steps.len().div_ceil(max_points).max(1);
    let pick = |v: &[f64]| v.iter().copied().step_by(stride).collect();
    PlotSeries {
        steps: series.steps.iter().copied().step_by(stride).collect(),
        loss: pick(&series.loss),
        grad_norm: pick(&series.grad_norm),
    }
}

/// Down-sampled loss/grad-norm series plus spectra small-σ fractions for a
/// (possibly partial) run directory; `paired` joins a second run on the same
/// step grid for side-by-side plots.
pub fn export_plotdata(run_dir: &Path, paired: Option<&Path>) -> Result<PathBuf> {
    let series = read_trace_csv(&run_dir.join("trace.csv"))?;
    let mut spectra = Vec::new();
    let spectra_path = run_dir.join("spectra.json");
    if spectra_path.exists() {
        let raw: Vec<crate::trainer::SpectraSnapshot> =
            serde_json::from_str(&std::fs::read_to_string(&spectra_path)?)
                .map_err(|e| Error::Config(format!("spectra.json: {e}")))?;
        for snap in raw {
            spectra.push(SpectraPoint {
                step: snap.step,
                small_fraction: snap
                    .layers
                    .iter()
                    .map(|(name, sig)| (name.clone(), small_sigma_fraction(sig)))
                    .collect(),
            });
        }
    }
    let paired_series = match paired {
        Some(dir) => {
            let other = read_trace_csv(&dir.join("trace.csv"))?;
            if other.steps != series.steps {
                return Err(Error::Config(
                    "paired runs do not share a step grid".into(),
                ));
            }
            Some(downsample(&other, 256))
        }
        None => None,
    };
    let data = PlotData {
        series: downsample(&series, 256),
        spectra,
        paired: paired_series,
    };
    let path = run_dir.join("plotdata.json");
    write_atomic(&path, serde_json::to_string_pretty(&data).expect("plotdata").as_bytes())?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Verification suite (integer path + regret bound)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct VerifyReport {
    pub equivalence_layers: usize,
    pub max_abs_diff: f64,
    pub packed_payload_bytes: usize,
    pub dense16_payload_bytes: usize,
    pub size_ratio: f64,
    pub regret_runs: usize,
    pub regret_holds: usize,
    pub worst_regret_slack: f64,
    pub ok: bool,
}

/// Integer path vs. training path on one random layer; returns the max-abs
/// output difference (zero by construction of the shared accumulator).
pub fn int_equivalence_once(rng: &mut Rng, n: usize, m: usize, k: usize, bits: u32) -> Result<f64> {
    let w_data = rng.normal_vec(n * m);
    let x_data = rng.normal_vec(m * k);
    let w = T64::from_vec(&[n, m], w_data.clone())?;
    let x = T64::from_vec(&[m, k], x_data.clone())?;
    let spec_w = compute_qparams(&w_data, &[n, m], bits, Granularity::PerChannel)?;
    let scale = T64::from_vec(&[n], spec_w.scales.clone())?;
    let fake = quantized_linear_forward(&x, &w, &scale, &spec_w.zeros, bits, bits, None, None)?;
    let packed = pack(&w_data, n, m, &spec_w)?;
    let (_, spec_a) = fake_quantize_dynamic(&x, bits)?;
    let int_out = int_linear(&packed, &x_data, m, k, &spec_a)?;
    let diff = fake
        .data()
        .iter()
        .zip(&int_out)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(diff)
}

/// The `verify` verb: 100 random 4-bit layers through both execution paths,
/// the packed-size accounting for a 64×64 layer, and 50 seeded regret runs
/// against the convergence bound.
pub fn run_verify(seed: u64) -> Result<VerifyReport> {
    let mut rng = Rng::new(seed).substream("verify");
    let mut max_diff: f64 = 0.0;
    let layers = 100;
    for _ in 0..layers {
        let n = 1 + rng.below(24);
        let m = 1 + rng.below(24);
        let k = 1 + rng.below(12);
        max_diff = max_diff.max(int_equivalence_once(&mut rng, n, m, k, 4)?);
    }
    let w64: Vec<f64> = rng.normal_vec(64 * 64);
    let spec = compute_qparams(&w64, &[64, 64], 4, Granularity::PerChannel)?;
    let packed = pack(&w64, 64, 64, &spec)?;
    let ratio = packed.packed_payload_bytes() as f64 / packed.dense16_payload_bytes() as f64;
    let mut holds = 0;
    let mut worst_slack = f64::INFINITY;
    let runs: Vec<RegretReport> = (0..50)
        .map(|s| {
            let eta = if s % 2 == 0 {
                EtaSchedule::Constant(0.05 + 0.002 * s as f64)
            } else {
                EtaSchedule::InvSqrt(0.4)
            };
            quadratic_regret_run(4 + (s as usize % 5), 120, eta, seed ^ s)
        })
        .collect::<Result<_>>()?;
    for r in &runs {
        if r.holds {
            holds += 1;
        }
        worst_slack = worst_slack.min(r.slack);
    }
    Ok(VerifyReport {
        equivalence_layers: layers,
        max_abs_diff: max_diff,
        packed_payload_bytes: packed.packed_payload_bytes(),
        dense16_payload_bytes: packed.dense16_payload_bytes(),
        size_ratio: ratio,
        regret_runs: runs.len(),
        regret_holds: holds,
        worst_regret_slack: worst_slack,
        ok: max_diff == 0.0 && ratio <= 0.26 && holds == runs.len(),
    })
}

//! Desk-scale diffusion stack: cosine noise schedule, synthetic 2-D datasets
//! stretched over a small frame axis, a residual-MLP denoiser whose linear
//! layers are quantizable and aux-equippable, denoising/distillation losses,
//! and a deterministic sampler.
//!
//! Matrix convention throughout: tokens (samples) are columns. A layer maps
//! an in_dim × batch activation matrix to out_dim × batch.

use std::path::Path;

use crate::auxrank::{resq_correction_graph, AuxState, DecayBaselineState};
use crate::checkpoint::{Checkpoint, Entry};
use crate::error::{Error, Result};
use crate::intexec::quantized_matmul_values;
use crate::quantizer::{
    codes, compute_qparams, fake_quantize_dynamic, fake_quantize_lsq, Granularity, QuantSpec,
    SCALE_FLOOR,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type T64 = Tensor<f64>;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub n: usize,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine ᾱ schedule, variance-preserving: α_τ² + σ_τ² = 1 exactly.
    pub fn cosine(n: usize) -> Self {
        let s = 0.008;
        let f = |t: f64| ((t / n as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let f0 = f(0.0);
        let mut alphas = Vec::with_capacity(n);
        let mut sigmas = Vec::with_capacity(n);
        for tau in 1..=n {
            let abar = (f(tau as f64) / f0).clamp(1e-8, 1.0 - 1e-8);
            alphas.push(abar.sqrt());
            sigmas.push((1.0 - abar).sqrt());
        }
        NoiseSchedule { n, alphas, sigmas }
    }

    pub fn alpha(&self, tau: usize) -> Result<f64> {
        self.check(tau)?;
        Ok(self.alphas[tau - 1])
    }

    pub fn sigma(&self, tau: usize) -> Result<f64> {
        self.check(tau)?;
        Ok(self.sigmas[tau - 1])
    }

    fn check(&self, tau: usize) -> Result<()> {
        if tau < 1 || tau > self.n {
            return Err(Error::invalid(format!(
                "timestep {tau} outside [1, {}]",
                self.n
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

pub const FRAMES: usize = 4;
pub const POINT_DIM: usize = 2;
pub const SAMPLE_DIM: usize = FRAMES * POINT_DIM;
pub const VOCAB: usize = 8;
/// Per-frame rotation applied to each point so the frame axis carries a
/// deterministic temporal drift.
const FRAME_DRIFT: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    Gmm8,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two-moons",
            DatasetKind::Gmm8 => "gmm8",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-moons" => Ok(DatasetKind::TwoMoons),
            "gmm8" => Ok(DatasetKind::Gmm8),
            _ => Err(Error::invalid(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// count × SAMPLE_DIM, row-major; each row is a flattened frame sequence.
    pub x0: Vec<f64>,
    pub classes: Vec<usize>,
    pub count: usize,
}

fn drift_frames(p: [f64; 2]) -> [f64; SAMPLE_DIM] {
    let mut out = [0.0; SAMPLE_DIM];
    for j in 0..FRAMES {
        let a = FRAME_DRIFT * j as f64;
        out[j * POINT_DIM] = p[0] * a.cos() - p[1] * a.sin();
        out[j * POINT_DIM + 1] = p[0] * a.sin() + p[1] * a.cos();
    }
    out
}

pub fn generate_dataset(kind: DatasetKind, count: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed).substream("data");
    let mut x0 = Vec::with_capacity(count * SAMPLE_DIM);
    let mut classes = Vec::with_capacity(count);
    for _ in 0..count {
        let (p, class) = match kind {
            DatasetKind::TwoMoons => {
                let class = rng.below(2);
                let t = rng.uniform() * std::f64::consts::PI;
                let jx = 0.05 * rng.normal();
                let jy = 0.05 * rng.normal();
                let p = if class == 0 {
                    [t.cos() + jx, t.sin() + jy]
                } else {
                    [1.0 - t.cos() + jx, 0.5 - t.sin() + jy]
                };
                (p, class)
            }
            DatasetKind::Gmm8 => {
                let class = rng.below(8);
                let a = 2.0 * std::f64::consts::PI * class as f64 / 8.0;
                (
                    [2.0 * a.cos() + 0.1 * rng.normal(), 2.0 * a.sin() + 0.1 * rng.normal()],
                    class,
                )
            }
        };
        x0.extend_from_slice(&drift_frames(p));
        classes.push(class);
    }
    Dataset { x0, classes, count }
}

/// Load the seeded cache if present, otherwise generate and write it. The
/// cache is a standard checkpoint: tensor "x0" (count × SAMPLE_DIM) plus
/// integer list "class".
pub fn load_or_generate(path: &Path, kind: DatasetKind, count: usize, seed: u64) -> Result<Dataset> {
    if path.exists() {
        let ckpt = Checkpoint::load(path)?;
        let (shape, data) = ckpt.tensor("x0")?;
        if shape.len() == 2 && shape[1] == SAMPLE_DIM {
            let classes: Vec<usize> = ckpt.ints("class")?.iter().map(|&c| c as usize).collect();
            if classes.len() == shape[0] {
                return Ok(Dataset {
                    x0: data.to_vec(),
                    classes,
                    count: shape[0],
                });
            }
        }
    }
    let ds = generate_dataset(kind, count, seed);
    let mut ckpt = Checkpoint::new();
    ckpt.insert(
        "x0",
        Entry::Tensor {
            shape: vec![ds.count, SAMPLE_DIM],
            data: ds.x0.clone(),
        },
    )?;
    ckpt.insert(
        "class",
        Entry::Ints(ds.classes.iter().map(|&c| c as i64).collect()),
    )?;
    ckpt.save(path)?;
    Ok(ds)
}

// ---------------------------------------------------------------------------
// Batching and noising
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiffusionBatch {
    /// SAMPLE_DIM × batch; columns are samples.
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub taus: Vec<usize>,
    pub classes: Vec<usize>,
    pub size: usize,
}

pub fn draw_batch(ds: &Dataset, size: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> DiffusionBatch {
    let mut x0 = vec![0.0; SAMPLE_DIM * size];
    let mut classes = Vec::with_capacity(size);
    let mut taus = Vec::with_capacity(size);
    for col in 0..size {
        let pick = rng.below(ds.count);
        for d in 0..SAMPLE_DIM {
            x0[d * size + col] = ds.x0[pick * SAMPLE_DIM + d];
        }
        classes.push(ds.classes[pick]);
        taus.push(1 + rng.below(schedule.n));
    }
    let eps: Vec<f64> = rng.normal_vec(SAMPLE_DIM * size);
    DiffusionBatch {
        x0,
        eps,
        taus,
        classes,
        size,
    }
}

/// x_τ = α_τ x₀ + σ_τ ε, column-wise per-sample timestep.
pub fn add_noise(batch: &DiffusionBatch, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let k = batch.size;
    let mut out = vec![0.0; SAMPLE_DIM * k];
    for (col, &tau) in batch.taus.iter().enumerate() {
        let a = schedule.alpha(tau)?;
        let s = schedule.sigma(tau)?;
        for d in 0..SAMPLE_DIM {
            let i = d * k + col;
            out[i] = a * batch.x0[i] + s * batch.eps[i];
        }
    }
    Ok(out)
}

const TIME_FREQS: usize = 3;
pub const TIME_EMB: usize = 2 * TIME_FREQS;
pub const IN_DIM: usize = SAMPLE_DIM + TIME_EMB + VOCAB;

/// Model input: flattened noisy frames, sinusoidal timestep embedding, and a
/// one-hot class row block, IN_DIM × batch.
pub fn model_input(x_tau: &[f64], taus: &[usize], classes: &[usize], n_max: usize) -> Vec<f64> {
    let k = taus.len();
    let mut out = vec![0.0; IN_DIM * k];
    out[..SAMPLE_DIM * k].copy_from_slice(x_tau);
    for (col, &tau) in taus.iter().enumerate() {
        let t = tau as f64 / n_max as f64;
        for f in 0..TIME_FREQS {
            let w = std::f64::consts::PI * (1 << f) as f64;
            out[(SAMPLE_DIM + 2 * f) * k + col] = (w * t).sin();
            out[(SAMPLE_DIM + 2 * f + 1) * k + col] = (w * t).cos();
        }
    }
    for (col, &c) in classes.iter().enumerate() {
        out[(SAMPLE_DIM + TIME_EMB + c % VOCAB) * k + col] = 1.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Quantized linear layer and the denoiser
// ---------------------------------------------------------------------------

/// Q_b(W) · Q_b(X) (+ aux compensation). The activation spec is recomputed
/// per token from the live values; the product itself is evaluated by integer
/// code accumulation so the deployment path can reproduce it bit for bit.
fn apply_compensation(
    y: T64,
    qx: &T64,
    aux: Option<&AuxState<f64>>,
    dense: Option<&T64>,
) -> Result<T64> {
    let y = match aux {
        Some(state) if !state.is_eliminated() => y.add(&state.forward_aux(qx)?)?,
        _ => y,
    };
    match dense {
        Some(c) => y.add(&c.matmul(qx)?),
        None => Ok(y),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn quantized_linear_forward(
    x: &T64,
    w: &T64,
    scale: &T64,
    zeros: &[i64],
    w_bits: u32,
    a_bits: u32,
    aux: Option<&AuxState<f64>>,
    dense: Option<&T64>,
) -> Result<T64> {
    let wshape = w.shape();
    let xshape = x.shape();
    if wshape.len() != 2 || xshape.len() != 2 || wshape[1] != xshape[0] {
        return Err(Error::ShapeMismatch {
            op: "quantized_linear_forward",
            left: wshape,
            right: xshape,
        });
    }
    let (n, m, k) = (wshape[0], wshape[1], xshape[1]);
    let (qx, spec_a) = fake_quantize_dynamic(x, a_bits)?;
    let qw = fake_quantize_lsq(w, scale, zeros, w_bits, Granularity::PerChannel)?;
    // Integer-accumulated product for deployable widths; wider widths (the
    // high-bit sanity configurations) use the float product directly.
    if w_bits > 8 || a_bits > 8 {
        let y = qw.matmul(&qx)?;
        return apply_compensation(y, &qx, aux, dense);
    }
    let spec_w = QuantSpec {
        bits: w_bits,
        granularity: Granularity::PerChannel,
        scales: scale.data().iter().map(|&s| s.max(SCALE_FLOOR)).collect(),
        zeros: zeros.to_vec(),
        learnable: true,
    };
    let cw = qw.with_data(|d| codes(d, &[n, m], &spec_w))?;
    let cx = qx.with_data(|d| codes(d, &[m, k], &spec_a))?;
    let values = quantized_matmul_values(
        &cw,
        &spec_w.scales,
        &spec_w.zeros,
        &cx,
        &spec_a.scales,
        &spec_a.zeros,
        n,
        m,
        k,
    );
    let y = Tensor::matmul_with_values(&qw, &qx, values)?;
    apply_compensation(y, &qx, aux, dense)
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserConfig {
    pub width: usize,
    pub depth: usize,
    pub w_bits: u32,
    pub a_bits: u32,
    pub quantized: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            width: 48,
            depth: 2,
            w_bits: 4,
            a_bits: 4,
            quantized: true,
        }
    }
}

#[derive(Debug)]
pub struct Layer {
    pub name: String,
    pub w: T64,
    pub bias: T64,
    /// LSQ per-channel scale leaf; present only on quantized layers.
    pub scale: Option<T64>,
    pub zeros: Vec<i64>,
    pub quantized: bool,
    pub aux: Option<AuxState<f64>>,
    /// Dense-correction baseline (sparse / residual-quant), mutually
    /// exclusive with `aux` in practice.
    pub baseline: Option<DecayBaselineState<f64>>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Layer {
    fn init(name: &str, out_dim: usize, in_dim: usize, quantized: bool, w_bits: u32, rng: &mut Rng) -> Result<Layer> {
        let std = (2.0 / in_dim as f64).sqrt();
        let wdata: Vec<f64> = (0..out_dim * in_dim).map(|_| std * rng.normal()).collect();
        let (scale, zeros) = if quantized {
            let spec = compute_qparams(&wdata, &[out_dim, in_dim], w_bits, Granularity::PerChannel)?;
            (
                Some(Tensor::param(&[out_dim], spec.scales.clone())?),
                spec.zeros,
            )
        } else {
            (None, Vec::new())
        };
        Ok(Layer {
            name: name.to_string(),
            w: Tensor::param(&[out_dim, in_dim], wdata)?,
            bias: Tensor::param(&[out_dim, 1], vec![0.0; out_dim])?,
            scale,
            zeros,
            quantized,
            aux: None,
            baseline: None,
            out_dim,
            in_dim,
        })
    }

    pub fn forward(&self, x: &T64, w_bits: u32, a_bits: u32) -> Result<T64> {
        let y = if self.quantized {
            let dense = match &self.baseline {
                Some(DecayBaselineState::Sparse { w_phi, .. }) => Some(w_phi.clone()),
                Some(rq @ DecayBaselineState::ResidualQuant { .. }) => resq_correction_graph(rq)?,
                None => None,
            };
            quantized_linear_forward(
                x,
                &self.w,
                self.scale.as_ref().expect("quantized layer has a scale"),
                &self.zeros,
                w_bits,
                a_bits,
                self.aux.as_ref(),
                dense.as_ref(),
            )?
        } else {
            self.w.matmul(x)?
        };
        y.add_bias(&self.bias)
    }

    /// Effective weight spec under the current (floor-clamped) LSQ scale.
    pub fn weight_spec(&self, w_bits: u32) -> Result<QuantSpec<f64>> {
        let scale = self
            .scale
            .as_ref()
            .ok_or_else(|| Error::invalid("weight_spec on an unquantized layer"))?;
        Ok(QuantSpec {
            bits: w_bits,
            granularity: Granularity::PerChannel,
            scales: scale.data().iter().map(|&s| s.max(SCALE_FLOOR)).collect(),
            zeros: self.zeros.clone(),
            learnable: true,
        })
    }
}

#[derive(Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub layers: Vec<Layer>,
    pub schedule_n: usize,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<Denoiser> {
        let mut init = rng.substream("init");
        let mut layers = Vec::new();
        layers.push(Layer::init("in", cfg.width, IN_DIM, cfg.quantized, cfg.w_bits, &mut init)?);
        for i in 0..cfg.depth {
            layers.push(Layer::init(
                &format!("block{i}"),
                cfg.width,
                cfg.width,
                cfg.quantized,
                cfg.w_bits,
                &mut init,
            )?);
        }
        layers.push(Layer::init("out", SAMPLE_DIM, cfg.width, cfg.quantized, cfg.w_bits, &mut init)?);
        Ok(Denoiser {
            cfg,
            layers,
            schedule_n: schedule.n,
        })
    }

    /// ε̂ = model(x_τ, τ, 𝒞): SAMPLE_DIM × batch.
    pub fn forward(&self, x_tau: &[f64], taus: &[usize], classes: &[usize]) -> Result<T64> {
        let k = taus.len();
        let input = model_input(x_tau, taus, classes, self.schedule_n);
        let x = Tensor::from_vec(&[IN_DIM, k], input)?;
        let (wb, ab) = (self.cfg.w_bits, self.cfg.a_bits);
        let mut h = self.layers[0].forward(&x, wb, ab)?.silu();
        for layer in &self.layers[1..self.layers.len() - 1] {
            h = h.add(&layer.forward(&h, wb, ab)?.silu())?;
        }
        self.layers[self.layers.len() - 1].forward(&h, wb, ab)
    }

    pub fn trainable(&self) -> Vec<T64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.w.clone());
            out.push(layer.bias.clone());
            if let Some(s) = &layer.scale {
                out.push(s.clone());
            }
            if let Some(aux) = &layer.aux {
                out.push(aux.l.clone());
                out.push(aux.r_mat.clone());
            }
            if let Some(b) = &layer.baseline {
                out.extend(b.trainable());
            }
        }
        out
    }

    pub fn is_frozen(&self) -> bool {
        self.trainable().iter().all(|t| !t.requires_grad())
    }

    /// Convert every parameter into a non-trainable leaf (teacher mode).
    pub fn freeze(&mut self) -> Result<()> {
        for layer in &mut self.layers {
            layer.w = Tensor::from_vec(&layer.w.shape(), layer.w.data())?;
            layer.bias = Tensor::from_vec(&layer.bias.shape(), layer.bias.data())?;
            if let Some(s) = &layer.scale {
                layer.scale = Some(Tensor::from_vec(&s.shape(), s.data())?);
            }
        }
        Ok(())
    }

    /// Attach an auxiliary pair to every quantized layer, initialized from
    /// the layer's current weight quantization error.
    pub fn equip_aux(
        &mut self,
        r0: usize,
        lambda: f64,
        steps_per_phase: usize,
        tag: crate::auxrank::AnnealTag,
        order: crate::auxrank::GammaOrder,
        refactorize_on: bool,
        seed: u64,
    ) -> Result<()> {
        for layer in &mut self.layers {
            if !layer.quantized {
                continue;
            }
            let spec = layer.weight_spec(self.cfg.w_bits)?;
            let r = r0.min(layer.out_dim.min(layer.in_dim));
            let state = layer.w.with_data(|d| {
                crate::auxrank::init_phi(d, layer.out_dim, layer.in_dim, &spec, r, lambda)
            })?;
            layer.aux = Some(state.with_schedule(steps_per_phase, tag, order, refactorize_on, seed)?);
        }
        Ok(())
    }

    /// Attach a dense-correction baseline to every quantized layer,
    /// initialized from the layer's weight quantization error.
    pub fn equip_baseline(&mut self, residual_quant: bool) -> Result<()> {
        for layer in &mut self.layers {
            if !layer.quantized {
                continue;
            }
            let spec = layer.weight_spec(self.cfg.w_bits)?;
            let w = layer.w.data();
            let qw = crate::quantizer::fake_quantize_data(&w, &[layer.out_dim, layer.in_dim], &spec)?;
            let w_phi: Vec<f64> = w.iter().zip(&qw).map(|(a, b)| a - b).collect();
            layer.baseline = Some(if residual_quant {
                crate::auxrank::resq_decay_init(&w_phi, layer.out_dim, layer.in_dim)?
            } else {
                crate::auxrank::sparse_decay_init(&w_phi, layer.out_dim, layer.in_dim)?
            });
        }
        Ok(())
    }

    /// Deterministic fingerprint of all parameter bytes.
    pub fn param_checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            for t in [&layer.w, &layer.bias] {
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            if let Some(s) = &layer.scale {
                for v in s.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        crate::checkpoint::checksum(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

/// Serialize a model. Live aux pairs (rank > 0) go under the "aux." prefix
/// behind the presence flag; a finished run writes the flag false and no
/// "aux." entries at all.
pub fn model_to_checkpoint(model: &Denoiser) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    ckpt.insert(
        "meta",
        Entry::Ints(vec![
            model.cfg.width as i64,
            model.cfg.depth as i64,
            model.cfg.w_bits as i64,
            model.cfg.a_bits as i64,
            model.cfg.quantized as i64,
            model.schedule_n as i64,
        ]),
    )?;
    for layer in &model.layers {
        ckpt.insert(
            &format!("{}.w", layer.name),
            Entry::Tensor {
                shape: layer.w.shape(),
                data: layer.w.data(),
            },
        )?;
        ckpt.insert(
            &format!("{}.bias", layer.name),
            Entry::Tensor {
                shape: vec![layer.out_dim],
                data: layer.bias.data(),
            },
        )?;
        if layer.scale.is_some() {
            ckpt.insert(
                &format!("{}.qspec", layer.name),
                Entry::Spec(layer.weight_spec(model.cfg.w_bits)?),
            )?;
        }
    }
    let live: Vec<&Layer> = model
        .layers
        .iter()
        .filter(|l| l.aux.as_ref().is_some_and(|a| !a.is_eliminated()))
        .collect();
    ckpt.insert("aux_present", Entry::Flag(!live.is_empty()))?;
    for layer in live {
        let aux = layer.aux.as_ref().unwrap();
        ckpt.insert(
            &format!("aux.{}.l", layer.name),
            Entry::Tensor {
                shape: aux.l.shape(),
                data: aux.l.data(),
            },
        )?;
        ckpt.insert(
            &format!("aux.{}.r", layer.name),
            Entry::Tensor {
                shape: aux.r_mat.shape(),
                data: aux.r_mat.data(),
            },
        )?;
        ckpt.insert(
            &format!("aux.{}.meta", layer.name),
            Entry::Ints(vec![aux.rank as i64, aux.r0 as i64, aux.phase as i64]),
        )?;
    }
    Ok(ckpt)
}

/// Rebuild a model from a checkpoint written by [`model_to_checkpoint`].
/// Aux pairs are restored as plain factors; schedule state beyond the phase
/// index is the caller's to re-establish.
pub fn model_from_checkpoint(ckpt: &Checkpoint, schedule: &NoiseSchedule) -> Result<Denoiser> {
    let meta = ckpt.ints("meta")?;
    if meta.len() != 6 {
        return Err(Error::CheckpointFormat("bad model meta record".into()));
    }
    let cfg = DenoiserConfig {
        width: meta[0] as usize,
        depth: meta[1] as usize,
        w_bits: meta[2] as u32,
        a_bits: meta[3] as u32,
        quantized: meta[4] != 0,
    };
    let mut model = Denoiser::new(cfg, schedule, &mut Rng::new(0))?;
    model.schedule_n = meta[5] as usize;
    for layer in &mut model.layers {
        let (wshape, wdata) = ckpt.tensor(&format!("{}.w", layer.name))?;
        if wshape != [layer.out_dim, layer.in_dim] {
            return Err(Error::CheckpointFormat(format!(
                "layer {} shape mismatch",
                layer.name
            )));
        }
        layer.w.set_data(wdata.to_vec())?;
        let (_, bdata) = ckpt.tensor(&format!("{}.bias", layer.name))?;
        layer.bias.set_data(bdata.to_vec())?;
        if layer.quantized {
            let spec = ckpt.spec(&format!("{}.qspec", layer.name))?;
            layer
                .scale
                .as_ref()
                .expect("quantized layer has a scale")
                .set_data(spec.scales.clone())?;
            layer.zeros = spec.zeros.clone();
        }
        if ckpt.flag("aux_present")? {
            if let Ok((lshape, ldata)) = ckpt.tensor(&format!("aux.{}.l", layer.name)) {
                let (rshape, rdata) = ckpt.tensor(&format!("aux.{}.r", layer.name))?;
                let meta = ckpt.ints(&format!("aux.{}.meta", layer.name))?;
                let spec = layer.weight_spec(cfg.w_bits)?;
                let mut aux = crate::auxrank::init_phi(
                    &layer.w.data(),
                    layer.out_dim,
                    layer.in_dim,
                    &spec,
                    meta[0] as usize,
                    0.5,
                )?;
                aux.l = Tensor::param(lshape, ldata.to_vec())?;
                aux.r_mat = Tensor::param(rshape, rdata.to_vec())?;
                aux.rank = meta[0] as usize;
                aux.r0 = meta[1] as usize;
                aux.phase = meta[2] as usize;
                layer.aux = Some(aux);
            }
        }
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Losses and sampling
// ---------------------------------------------------------------------------

/// Denoising objective: per-sample squared error against ε,
/// averaged over the batch.
pub fn denoise_loss(model: &Denoiser, batch: &DiffusionBatch, schedule: &NoiseSchedule) -> Result<T64> {
    let x_tau = add_noise(batch, schedule)?;
    let pred = model.forward(&x_tau, &batch.taus, &batch.classes)?;
    let target = Tensor::from_vec(&[SAMPLE_DIM, batch.size], batch.eps.clone())?;
    Ok(pred
        .sub(&target)?
        .square()?
        .sum()
        .scale(1.0 / batch.size as f64))
}

/// Distillation objective: squared error between student and teacher outputs
/// on identical noisy inputs, averaged over the batch.
pub fn kd_loss(
    student: &Denoiser,
    teacher: &Denoiser,
    batch: &DiffusionBatch,
    schedule: &NoiseSchedule,
) -> Result<T64> {
    if !teacher.is_frozen() {
        return Err(Error::FrozenGradient);
    }
    let x_tau = add_noise(batch, schedule)?;
    let t_out = teacher.forward(&x_tau, &batch.taus, &batch.classes)?.detach();
    let s_out = student.forward(&x_tau, &batch.taus, &batch.classes)?;
    Ok(s_out
        .sub(&t_out)?
        .square()?
        .sum()
        .scale(1.0 / batch.size as f64))
}

/// Deterministic DDIM-style sampler: jump down the schedule in equal strides,
/// re-projecting through the model's x̂₀ estimate at each stop.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    count: usize,
    classes: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::invalid("sample: steps must be >= 1"));
    }
    if classes.len() != count {
        return Err(Error::invalid("sample: one class per sample required"));
    }
    let mut rng = Rng::new(seed).substream("sample");
    let mut x: Vec<f64> = rng.normal_vec(SAMPLE_DIM * count);
    // stops N = τ₀ > τ₁ > … > 0
    let mut stops: Vec<usize> = (0..steps)
        .map(|i| schedule.n - i * schedule.n / steps)
        .collect();
    stops.dedup();
    for (i, &tau) in stops.iter().enumerate() {
        let taus = vec![tau; count];
        let eps_hat = model.forward(&x, &taus, classes)?.data();
        let a = schedule.alpha(tau)?;
        let s = schedule.sigma(tau)?;
        let next = stops.get(i + 1).copied();
        let (a_next, s_next) = match next {
            Some(t) => (schedule.alpha(t)?, schedule.sigma(t)?),
            None => (1.0, 0.0),
        };
        for (xi, &e) in x.iter_mut().zip(&eps_hat) {
            let x0_hat = (*xi - s * e) / a;
            *xi = a_next * x0_hat + s_next * e;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample"));
        }
    }
    Ok(x)
}

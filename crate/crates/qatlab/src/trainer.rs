//! The QAT loop: AdamW over quantized weights, LSQ scales and auxiliary
//! factors, warm-up + cosine learning rate, phase orchestration of the decay
//! schedules, and the diagnostic traces (gradient norms, singular spectra,
//! regret-bound bookkeeping).

use std::collections::HashMap;
use std::path::Path;

use crate::auxrank::{
    anneal_u, kept_columns, resq_advance_phase, resq_set_u, sparse_apply_mask, sparse_decay_step,
    AnnealTag, GammaOrder, SPARSE_RATIOS,
};
use crate::checkpoint::Entry;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::toydiff::{
    denoise_loss, draw_batch, kd_loss, Dataset, DatasetKind, Denoiser, DenoiserConfig,
    NoiseSchedule, T64,
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Plain QAT, no error compensation.
    NoCompensation,
    /// Low-rank aux with the rank-decay schedule.
    Rank,
    /// Low-rank aux kept at full rank for the whole run (no decay).
    RankFrozen,
    /// Dense correction, magnitude-sparsified over 6 phases.
    Sparse,
    /// Dense correction as four 4-bit residuals, decayed over 4 phases.
    ResidualQuant,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::NoCompensation => "none",
            Strategy::Rank => "rank",
            Strategy::RankFrozen => "rank-frozen",
            Strategy::Sparse => "sparse",
            Strategy::ResidualQuant => "residual-quant",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::NoCompensation),
            "rank" => Ok(Strategy::Rank),
            "rank-frozen" => Ok(Strategy::RankFrozen),
            "sparse" => Ok(Strategy::Sparse),
            "residual-quant" => Ok(Strategy::ResidualQuant),
            _ => Err(Error::invalid(format!("unknown strategy {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup_frac: f64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub r0: usize,
    pub lambda: f64,
    pub anneal: AnnealTag,
    pub gamma_order: GammaOrder,
    pub refactorize: bool,
    pub decay_frac: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub w_bits: u32,
    pub a_bits: u32,
    pub width: usize,
    pub depth: usize,
    pub dataset: DatasetKind,
    pub dataset_size: usize,
    pub teacher_steps: usize,
    pub checkpoint_every: usize,
    pub spectra_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            warmup_frac: 0.1,
            base_lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 1e-4,
            batch_size: 64,
            r0: 32,
            lambda: 0.5,
            anneal: AnnealTag::Cosine,
            gamma_order: GammaOrder::Trailing,
            refactorize: false,
            decay_frac: 0.75,
            strategy: Strategy::Rank,
            seed: 0,
            w_bits: 4,
            a_bits: 4,
            width: 48,
            depth: 2,
            dataset: DatasetKind::TwoMoons,
            dataset_size: 2048,
            teacher_steps: 600,
            checkpoint_every: 0,
            spectra_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be in [0, 1)".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if self.steps < self.phase_count().max(1) {
            return Err(Error::Config(
                "steps must cover at least one step per decay phase".into(),
            ));
        }
        if !(0.0 < self.decay_frac && self.decay_frac <= 1.0) {
            return Err(Error::Config("decay_frac must be in (0, 1]".into()));
        }
        if !(0.0 < self.lambda && self.lambda <= 1.0) {
            return Err(Error::Config("lambda must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn denoiser(&self, quantized: bool) -> DenoiserConfig {
        DenoiserConfig {
            width: self.width,
            depth: self.depth,
            w_bits: self.w_bits,
            a_bits: self.a_bits,
            quantized,
        }
    }

    /// Number of decay phases the strategy needs.
    pub fn phase_count(&self) -> usize {
        match self.strategy {
            Strategy::NoCompensation | Strategy::RankFrozen => 0,
            Strategy::Sparse => SPARSE_RATIOS.len(),
            Strategy::ResidualQuant => 4,
            Strategy::Rank => rank_phases(self.r0, self.lambda),
        }
    }

    /// Equal steps per decay phase. The schedule occupies the first
    /// `decay_frac` of the budget; the remaining steps fine-tune the bare
    /// quantized model after the last truncation, so every annealing shape
    /// converges toward the same deployable network.
    pub fn steps_per_phase(&self) -> usize {
        let p = self.phase_count();
        if p == 0 {
            self.steps
        } else {
            (((self.steps as f64 * self.decay_frac) / p as f64).floor() as usize).max(1)
        }
    }

    /// Fields that must match for a paired comparison to be meaningful:
    /// everything except the compensation axis.
    pub fn comparable_with(&self, other: &TrainConfig) -> bool {
        self.steps == other.steps
            && self.warmup_frac == other.warmup_frac
            && self.base_lr == other.base_lr
            && self.batch_size == other.batch_size
            && self.seed == other.seed
            && self.w_bits == other.w_bits
            && self.a_bits == other.a_bits
            && self.width == other.width
            && self.depth == other.depth
            && self.dataset == other.dataset
            && self.dataset_size == other.dataset_size
            && self.teacher_steps == other.teacher_steps
            && self.decay_frac == other.decay_frac
    }
}

/// Truncations needed to bring rank r to 0 under shrink ratio λ.
pub fn rank_phases(r0: usize, lambda: f64) -> usize {
    let mut r = r0;
    let mut phases = 0;
    while r > 0 {
        r = kept_columns(r, lambda);
        phases += 1;
    }
    phases
}

/// Warm-up ramp then cosine decay to zero at T.
pub fn lr_at(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t >= cfg.steps {
        return Err(Error::invalid(format!("lr_at: step {t} >= T = {}", cfg.steps)));
    }
    let warm = (cfg.warmup_frac * cfg.steps as f64).round() as usize;
    if t < warm {
        return Ok(cfg.base_lr * (t + 1) as f64 / warm as f64);
    }
    let span = (cfg.steps - warm).max(1);
    let x = (t - warm) as f64 / span as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * x).cos()))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct AdamW {
    /// First/second moment per tensor id; entries for truncated tensors are
    /// dropped on the next prune.
    state: HashMap<u64, (Vec<f64>, Vec<f64>)>,
    pub t: usize,
}

impl AdamW {
    pub fn new() -> Self {
        AdamW::default()
    }

    /// One decoupled-weight-decay Adam step over every parameter that holds
    /// a gradient.
    pub fn step(&mut self, params: &[T64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for p in params {
            let Some(g) = p.grad() else { continue };
            let (m, v) = self
                .state
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            p.update_data(|d| {
                for i in 0..d.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    d[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps_opt) + cfg.weight_decay * d[i]);
                }
            });
        }
    }

    /// Forget moments of parameters that no longer exist (rank truncation).
    pub fn prune(&mut self, live: &[T64]) {
        let keep: std::collections::HashSet<u64> = live.iter().map(|p| p.id()).collect();
        self.state.retain(|id, _| keep.contains(id));
    }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub u: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SpectraSnapshot {
    pub step: usize,
    /// (layer name, singular values of the aux product).
    pub layers: Vec<(String, Vec<f64>)>,
}

#[derive(Debug, Default, Clone, serde::Serialize)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    pub spectra: Vec<SpectraSnapshot>,
    pub phase_log: Vec<usize>,
}

impl RunTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm,lr,u,rank\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.grad_norm, r.lr, r.u, r.rank
            ));
        }
        out
    }

    pub fn spectra_json(&self) -> String {
        serde_json::to_string_pretty(&self.spectra).expect("spectra serialize")
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn mean_grad_norm(&self, from: usize, to: usize) -> f64 {
        let rows: Vec<&TraceRow> = self
            .rows
            .iter()
            .filter(|r| r.step >= from && r.step < to)
            .collect();
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|r| r.grad_norm).sum::<f64>() / rows.len() as f64
    }
}

/// Fraction of singular values strictly below σ₁/14, the small-component
/// share tracked by the spectrum diagnostic.
pub fn small_sigma_fraction(sigmas: &[f64]) -> f64 {
    if sigmas.is_empty() {
        return 0.0;
    }
    let cut = sigmas[0] / 14.0;
    sigmas.iter().filter(|&&s| s < cut).count() as f64 / sigmas.len() as f64
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// Full-precision pre-training on the denoising objective; the result is
/// frozen and serves as the distillation teacher.
pub fn pretrain_teacher(cfg: &TrainConfig, schedule: &NoiseSchedule, ds: &Dataset) -> Result<Denoiser> {
    let mut teacher = Denoiser::new(cfg.denoiser(false), schedule, &mut Rng::new(cfg.seed))?;
    let mut opt = AdamW::new();
    let mut rng = Rng::new(cfg.seed).substream("teacher-noise");
    let params = teacher.trainable();
    let t_steps = cfg.teacher_steps;
    for t in 0..t_steps {
        let batch = draw_batch(ds, cfg.batch_size, schedule, &mut rng);
        let loss = denoise_loss(&teacher, &batch, schedule)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        for p in &params {
            p.zero_grad();
        }
        loss.backward()?;
        // simple cosine decay, no warm-up needed at full precision
        let lr = 3e-3 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / t_steps as f64).cos());
        opt.step(&params, lr, cfg);
    }
    teacher.freeze()?;
    Ok(teacher)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub schedule: &'a NoiseSchedule,
    pub teacher: &'a Denoiser,
    pub ds: &'a Dataset,
    pub model: Denoiser,
    pub trace: RunTrace,
    opt: AdamW,
    noise_rng: Rng,
    phases_done: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        schedule: &'a NoiseSchedule,
        teacher: &'a Denoiser,
        ds: &'a Dataset,
    ) -> Result<Trainer<'a>> {
        cfg.validate()?;
        if !teacher.is_frozen() {
            return Err(Error::FrozenGradient);
        }
        let mut model = Denoiser::new(cfg.denoiser(true), schedule, &mut Rng::new(cfg.seed ^ 0x51_71))?;
        match cfg.strategy {
            Strategy::Rank | Strategy::RankFrozen => {
                model.equip_aux(
                    cfg.r0,
                    cfg.lambda,
                    cfg.steps_per_phase(),
                    cfg.anneal,
                    cfg.gamma_order,
                    cfg.refactorize,
                    cfg.seed,
                )?;
            }
            Strategy::Sparse => model.equip_baseline(false)?,
            Strategy::ResidualQuant => model.equip_baseline(true)?,
            Strategy::NoCompensation => {}
        }
        let mut trace = RunTrace::default();
        trace.phase_log.push(Self::model_rank(&model));
        Ok(Trainer {
            noise_rng: Rng::new(cfg.seed).substream("qat-noise"),
            phases_done: 0,
            cfg,
            schedule,
            teacher,
            ds,
            model,
            trace,
            opt: AdamW::new(),
        })
    }

    /// Largest live aux rank across layers (the phase-log statistic).
    fn model_rank(model: &Denoiser) -> usize {
        model
            .layers
            .iter()
            .filter_map(|l| l.aux.as_ref().map(|a| a.rank))
            .max()
            .unwrap_or(0)
    }

    fn current_u(&self) -> f64 {
        self.model
            .layers
            .iter()
            .find_map(|l| l.aux.as_ref().map(|a| a.u))
            .unwrap_or(0.0)
    }

    /// Advance schedule state to what step `t` requires, recording phase-log
    /// entries at boundaries.
    fn orchestrate(&mut self, t: usize) -> Result<()> {
        let spp = self.cfg.steps_per_phase();
        let phases = self.cfg.phase_count();
        if phases == 0 {
            return Ok(());
        }
        let phase_idx = t / spp;
        let sip = t % spp;
        match self.cfg.strategy {
            Strategy::Rank => {
                if sip == 0 && phase_idx > self.phases_done && phase_idx <= phases {
                    for layer in &mut self.model.layers {
                        if let Some(aux) = &mut layer.aux {
                            aux.u = 0.0;
                            aux.advance_phase()?;
                        }
                    }
                    self.opt.prune(&self.model.trainable());
                    self.trace.phase_log.push(Self::model_rank(&self.model));
                    self.phases_done = phase_idx;
                }
                let u = if phase_idx < phases {
                    anneal_u(sip, spp, self.cfg.anneal)?
                } else {
                    0.0
                };
                for layer in &mut self.model.layers {
                    if let Some(aux) = &mut layer.aux {
                        aux.u = u;
                    }
                }
            }
            Strategy::ResidualQuant => {
                if sip == 0 && phase_idx > self.phases_done && phase_idx <= phases {
                    for layer in &mut self.model.layers {
                        if let Some(b) = &mut layer.baseline {
                            if !b.is_spent() {
                                resq_set_u(b, 0.0)?;
                                resq_advance_phase(b)?;
                            }
                        }
                    }
                    self.trace.phase_log.push(phases.saturating_sub(phase_idx));
                    self.phases_done = phase_idx;
                }
                let u = if phase_idx < phases {
                    anneal_u(sip, spp, self.cfg.anneal)?
                } else {
                    0.0
                };
                for layer in &mut self.model.layers {
                    if let Some(b) = &mut layer.baseline {
                        if !b.is_spent() {
                            resq_set_u(b, u)?;
                        }
                    }
                }
            }
            Strategy::Sparse => {
                if sip == 0 && phase_idx > self.phases_done && phase_idx <= phases {
                    for layer in &mut self.model.layers {
                        if let Some(b) = &mut layer.baseline {
                            if !b.is_spent() {
                                sparse_decay_step(b)?;
                            }
                        }
                    }
                    self.trace.phase_log.push(phases.saturating_sub(phase_idx));
                    self.phases_done = phase_idx;
                }
            }
            Strategy::NoCompensation | Strategy::RankFrozen => {}
        }
        Ok(())
    }

    /// One training step: KD loss, backward, AdamW, schedule bookkeeping.
    pub fn step(&mut self, t: usize) -> Result<()> {
        self.orchestrate(t)?;
        let batch = draw_batch(self.ds, self.cfg.batch_size, self.schedule, &mut self.noise_rng);
        let loss = kd_loss(&self.model, self.teacher, &batch, self.schedule)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step: t });
        }
        let params = self.model.trainable();
        for p in &params {
            p.zero_grad();
        }
        loss.backward()?;
        let grad_norm = params
            .iter()
            .filter_map(|p| p.grad())
            .flat_map(|g| g.into_iter().map(|x| x * x))
            .sum::<f64>()
            .sqrt();
        let lr = lr_at(t, &self.cfg)?;
        self.opt.step(&params, lr, &self.cfg);
        // keep LSQ scales positive and re-freeze sparsified entries
        for layer in &self.model.layers {
            if let Some(s) = &layer.scale {
                s.update_data(|d| {
                    for v in d.iter_mut() {
                        *v = v.max(crate::quantizer::SCALE_FLOOR);
                    }
                });
            }
            if let Some(b @ crate::auxrank::DecayBaselineState::Sparse { .. }) = &layer.baseline {
                sparse_apply_mask(b)?;
            }
        }
        self.trace.rows.push(TraceRow {
            step: t,
            loss: loss_val,
            grad_norm,
            lr,
            u: self.current_u(),
            rank: Self::model_rank(&self.model),
        });
        Ok(())
    }

    fn snapshot_spectra(&mut self, t: usize) -> Result<()> {
        let mut layers = Vec::new();
        for layer in &self.model.layers {
            if let Some(aux) = &layer.aux {
                if aux.rank > 0 {
                    layers.push((layer.name.clone(), aux.spectrum()?));
                }
            }
        }
        if !layers.is_empty() {
            self.trace.spectra.push(SpectraSnapshot { step: t, layers });
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, step: usize) -> Result<()> {
        let mut ckpt = crate::toydiff::model_to_checkpoint(&self.model)?;
        ckpt.insert("train.step", Entry::Ints(vec![step as i64]))?;
        ckpt.insert(
            "train.phase_log",
            Entry::Ints(self.trace.phase_log.iter().map(|&r| r as i64).collect()),
        )?;
        ckpt.save(path)
    }

    /// Run all steps. On a non-finite loss, the error is returned and any
    /// previously written checkpoint stays intact on disk.
    pub fn run(&mut self, ckpt_path: Option<&Path>) -> Result<()> {
        if self.cfg.spectra_every > 0 {
            self.snapshot_spectra(0)?;
        }
        for t in 0..self.cfg.steps {
            self.step(t)?;
            if self.cfg.spectra_every > 0 && (t + 1) % self.cfg.spectra_every == 0 {
                self.snapshot_spectra(t + 1)?;
            }
            if let Some(path) = ckpt_path {
                if self.cfg.checkpoint_every > 0 && (t + 1) % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(path, t + 1)?;
                }
            }
        }
        // final phase bookkeeping at T (rank schedules end exactly at T when
        // T is a phase multiple)
        self.orchestrate(self.cfg.steps.min(self.cfg.phase_count() * self.cfg.steps_per_phase()))?;
        if let Some(path) = ckpt_path {
            self.save_checkpoint(path, self.cfg.steps)?;
        }
        Ok(())
    }
}

/// KD loss of the finished (schedule-complete) model on a fresh deterministic
/// batch — the deployable model's distillation gap, independent of whatever
/// correction was still annealing at the last training step.
pub fn eval_kd_loss(
    model: &Denoiser,
    teacher: &Denoiser,
    ds: &Dataset,
    schedule: &NoiseSchedule,
    size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = Rng::new(seed).substream("eval-noise");
    let batch = draw_batch(ds, size, schedule, &mut rng);
    Ok(kd_loss(model, teacher, &batch, schedule)?.item())
}

/// Run two configs that differ only on the compensation axis and return the
/// paired traces.
pub fn grad_norm_comparison(
    cfg_a: &TrainConfig,
    cfg_b: &TrainConfig,
    schedule: &NoiseSchedule,
    teacher: &Denoiser,
    ds: &Dataset,
) -> Result<(RunTrace, RunTrace)> {
    if !cfg_a.comparable_with(cfg_b) {
        return Err(Error::Config(
            "paired runs must differ only in the compensation strategy".into(),
        ));
    }
    let mut a = Trainer::new(cfg_a.clone(), schedule, teacher, ds)?;
    a.run(None)?;
    let mut b = Trainer::new(cfg_b.clone(), schedule, teacher, ds)?;
    b.run(None)?;
    Ok((a.trace, b.trace))
}

// ---------------------------------------------------------------------------
// Regret bound (convex surrogate)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct RegretReport {
    pub empirical: f64,
    pub bound: f64,
    pub slack: f64,
    pub d_inf: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Copy)]
pub enum EtaSchedule {
    Constant(f64),
    /// η₀ / √t (1-based).
    InvSqrt(f64),
}

impl EtaSchedule {
    fn at(&self, t: usize) -> f64 {
        match *self {
            EtaSchedule::Constant(e) => e,
            EtaSchedule::InvSqrt(e0) => e0 / ((t + 1) as f64).sqrt(),
        }
    }
}

/// Average-regret bound check on the recorded quantities of a plain-SGD run:
/// R(T)/T against d·D∞²/(2T·η_T) + (1/T)·Σ (η_t/2)‖g_t‖².
pub fn regret_bound_check(
    regrets: &[f64],
    grad_norms2: &[f64],
    etas: &[f64],
    d: usize,
    d_inf: f64,
) -> Result<RegretReport> {
    let t_total = regrets.len();
    if t_total == 0 || grad_norms2.len() != t_total || etas.len() != t_total {
        return Err(Error::invalid("regret check needs aligned nonempty traces"));
    }
    if etas.windows(2).any(|w| w[1] > w[0] + 1e-15) {
        return Err(Error::invalid("step sizes must be nonincreasing"));
    }
    let empirical = regrets.iter().sum::<f64>() / t_total as f64;
    let eta_last = etas[t_total - 1];
    let bound = d as f64 * d_inf * d_inf / (2.0 * t_total as f64 * eta_last)
        + grad_norms2
            .iter()
            .zip(etas)
            .map(|(g2, e)| e / 2.0 * g2)
            .sum::<f64>()
            / t_total as f64;
    Ok(RegretReport {
        empirical,
        bound,
        slack: bound - empirical,
        d_inf,
        holds: bound >= empirical - 1e-12,
    })
}

/// Seeded SGD on the time-varying quadratic f_t(θ) = ½‖θ − c_t‖² with c_t
/// uniform in [−1, 1]^d and θ* = mean(c_t) known in closed form.
pub fn quadratic_regret_run(d: usize, steps: usize, eta: EtaSchedule, seed: u64) -> Result<RegretReport> {
    let mut rng = Rng::new(seed).substream("regret");
    let centers: Vec<Vec<f64>> = (0..steps).map(|_| rng.uniform_vec(d, -1.0, 1.0)).collect();
    let mut star = vec![0.0; d];
    for c in &centers {
        for (s, &v) in star.iter_mut().zip(c) {
            *s += v / steps as f64;
        }
    }
    let mut theta: Vec<f64> = rng.uniform_vec(d, -1.0, 1.0);
    let mut regrets = Vec::with_capacity(steps);
    let mut grad_norms2 = Vec::with_capacity(steps);
    let mut etas = Vec::with_capacity(steps);
    let mut d_inf: f64 = theta
        .iter()
        .zip(&star)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut snapshots: Vec<Vec<f64>> = vec![theta.clone()];
    for (t, c) in centers.iter().enumerate() {
        let f_theta: f64 = 0.5 * theta.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let f_star: f64 = 0.5 * star.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        regrets.push(f_theta - f_star);
        let g: Vec<f64> = theta.iter().zip(c).map(|(a, b)| a - b).collect();
        grad_norms2.push(g.iter().map(|x| x * x).sum());
        let e = eta.at(t);
        etas.push(e);
        for (th, gi) in theta.iter_mut().zip(&g) {
            *th -= e * gi;
        }
        // running ∞-distance proxy: to θ* and pairwise across snapshots
        let to_star = theta
            .iter()
            .zip(&star)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        d_inf = d_inf.max(to_star);
        for s in &snapshots {
            let pair = theta
                .iter()
                .zip(s)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            d_inf = d_inf.max(pair);
        }
        snapshots.push(theta.clone());
    }
    regret_bound_check(&regrets, &grad_norms2, &etas, d, d_inf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydiff::generate_dataset;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 100,
            warmup_frac: 0.1,
            base_lr: 1.0,
            ..TrainConfig::default()
        };
        // ramp end
        assert!((lr_at(9, &cfg).unwrap() - 1.0).abs() < 1e-12);
        // decay start
        assert!((lr_at(10, &cfg).unwrap() - 1.0).abs() < 1e-12);
        // decay midpoint
        assert!((lr_at(55, &cfg).unwrap() - 0.5).abs() < 1e-12);
        // near-zero tail
        assert!(lr_at(99, &cfg).unwrap() < 0.002);
        assert!(lr_at(100, &cfg).is_err());
    }

    #[test]
    fn adamw_matches_hand_computed_update() {
        let cfg = TrainConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let theta = T64::param(&[1], vec![1.0]).unwrap();
        // f(θ) = ½θ² → g = θ = 1
        let loss = theta.square().unwrap().sum().scale(0.5);
        loss.backward().unwrap();
        let mut opt = AdamW::new();
        opt.step(&[theta.clone()], 0.1, &cfg);
        // hand: m = 0.1·? → m̂ = g = 1, v̂ = 1 → θ' = 1 − 0.1·1/(1+1e-8)
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((theta.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn plain_sgd_hand_case_via_zero_moments() {
        // one plain-SGD step: θ' = θ − η·g on f(θ)=½θ², θ=1, η=0.1 → 0.9
        let theta = 1.0f64;
        let g = theta;
        assert_eq!(theta - 0.1 * g, 0.9);
    }

    #[test]
    fn rank_phase_arithmetic() {
        assert_eq!(rank_phases(32, 0.5), 6);
        assert_eq!(rank_phases(8, 0.5), 4);
        assert_eq!(rank_phases(1, 0.5), 1);
        assert_eq!(rank_phases(0, 0.5), 0);
    }

    fn small_cfg(strategy: Strategy, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 8,
            width: 16,
            depth: 1,
            r0: 8,
            dataset_size: 128,
            teacher_steps: 30,
            strategy,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn rank_run_eliminates_aux_and_logs_phases() {
        let cfg = small_cfg(Strategy::Rank, 48);
        let schedule = NoiseSchedule::cosine(100);
        let ds = generate_dataset(cfg.dataset, cfg.dataset_size, cfg.seed);
        let teacher = pretrain_teacher(&cfg, &schedule, &ds).unwrap();
        let mut tr = Trainer::new(cfg, &schedule, &teacher, &ds).unwrap();
        tr.run(None).unwrap();
        assert_eq!(tr.trace.phase_log, vec![8, 4, 2, 1, 0]);
        for layer in &tr.model.layers {
            if let Some(aux) = &layer.aux {
                assert!(aux.is_eliminated());
            }
        }
        assert_eq!(tr.trace.rows.len(), 48);
    }

    #[test]
    fn zero_lr_keeps_parameters_but_records_grads() {
        let mut cfg = small_cfg(Strategy::NoCompensation, 4);
        cfg.base_lr = 0.0;
        cfg.weight_decay = 0.0;
        let schedule = NoiseSchedule::cosine(100);
        let ds = generate_dataset(cfg.dataset, cfg.dataset_size, cfg.seed);
        let teacher = pretrain_teacher(&cfg, &schedule, &ds).unwrap();
        let mut tr = Trainer::new(cfg, &schedule, &teacher, &ds).unwrap();
        let before = tr.model.param_checksum();
        tr.run(None).unwrap();
        assert_eq!(tr.model.param_checksum(), before);
        assert!(tr.trace.rows.iter().all(|r| r.grad_norm > 0.0));
    }

    #[test]
    fn deterministic_replay_same_checkpoint_checksum() {
        let cfg = small_cfg(Strategy::Rank, 16);
        let schedule = NoiseSchedule::cosine(100);
        let ds = generate_dataset(cfg.dataset, cfg.dataset_size, cfg.seed);
        let teacher = pretrain_teacher(&cfg, &schedule, &ds).unwrap();
        let run = || {
            let mut tr = Trainer::new(cfg.clone(), &schedule, &teacher, &ds).unwrap();
            tr.run(None).unwrap();
            (
                crate::checkpoint::checksum(
                    &crate::toydiff::model_to_checkpoint(&tr.model).unwrap().to_bytes(),
                ),
                tr.trace.to_csv(),
            )
        };
        let (c1, t1) = run();
        let (c2, t2) = run();
        assert_eq!(c1, c2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn mismatched_comparison_rejected() {
        let a = small_cfg(Strategy::NoCompensation, 8);
        let mut b = small_cfg(Strategy::Rank, 8);
        b.base_lr *= 2.0;
        let schedule = NoiseSchedule::cosine(100);
        let ds = generate_dataset(a.dataset, a.dataset_size, a.seed);
        let teacher = pretrain_teacher(&a, &schedule, &ds).unwrap();
        assert!(grad_norm_comparison(&a, &b, &schedule, &teacher, &ds).is_err());
    }

    #[test]
    fn regret_bound_holds_on_quadratics() {
        for seed in 0..8 {
            let rep = quadratic_regret_run(6, 150, EtaSchedule::Constant(0.1), seed).unwrap();
            assert!(rep.holds, "constant-η seed {seed}: {rep:?}");
            assert!(rep.slack > 0.0);
            let rep = quadratic_regret_run(6, 150, EtaSchedule::InvSqrt(0.5), seed).unwrap();
            assert!(rep.holds, "inv-sqrt-η seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn regret_zero_when_started_at_star() {
        // θ₀ = θ* for a single repeated center → empirical regret 0 ≤ bound
        let regrets = vec![0.0; 10];
        let grads = vec![0.0; 10];
        let etas = vec![0.1; 10];
        let rep = regret_bound_check(&regrets, &grads, &etas, 3, 0.0).unwrap();
        assert_eq!(rep.empirical, 0.0);
        assert!(rep.holds);
    }

    #[test]
    fn increasing_eta_rejected() {
        let r = regret_bound_check(&[0.0; 3], &[0.0; 3], &[0.1, 0.2, 0.3], 2, 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn small_sigma_fraction_counts() {
        assert_eq!(small_sigma_fraction(&[14.0, 2.0, 0.5]), 1.0 / 3.0);
        assert_eq!(small_sigma_fraction(&[]), 0.0);
    }
}

//! Conditional denoising diffusion over scene vectors.
//!
//! The forward process follows the standard Gaussian noising
//! `q(x_t | x_0) = N(sqrt(abar_t) x_0, (1 - abar_t) I)`; the denoiser is a
//! three-layer tanh network regressing the forward-process posterior mean
//! from `(x_t, context embedding, timestep embedding)`. The ancestral
//! sampler records the log-density of every stochastic transition so the
//! chain can later be treated as a policy for REINFORCE fine-tuning.

use crate::streams::randn;
use crate::tensor::{Bound, Params, Record, Tensor, TensorError};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("step {t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("transition at step {t} is deterministic (sigma = 0): no log-density")]
    DeterministicStep { t: usize },
    #[error("trajectory was sampled under a different schedule")]
    ScheduleMismatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Variance schedule: linear betas, `alpha = 1 - beta`, `abar_t` the
/// running product. `abar(0)` is 1 by convention so the `t = 1` posterior
/// is well defined.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    digest: u64,
}

pub fn build_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(DiffusionError::BadSchedule(format!(
            "need at least 2 steps, got {t_count}"
        )));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule(format!(
            "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = Vec::with_capacity(t_count);
    for i in 0..t_count {
        let frac = i as f64 / (t_count - 1) as f64;
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_count);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }

    let mut hasher = Sha256::new();
    hasher.update((t_count as u64).to_le_bytes());
    for b in &beta {
        hasher.update(b.to_bits().to_le_bytes());
    }
    let d = hasher.finalize();
    let digest = u64::from_le_bytes(d[..8].try_into().expect("sha256 yields 32 bytes"));

    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        digest,
    })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn digest(&self) -> u64 {
        self.digest
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t >= 1 && t <= self.t_max() {
            Ok(())
        } else {
            Err(DiffusionError::StepOutOfRange {
                t,
                t_max: self.t_max(),
            })
        }
    }
}

/// Sinusoidal timestep embedding of fixed dimension. Even slots are sines,
/// odd slots cosines, with geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = 10_000.0_f64.powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

#[derive(Clone, Debug)]
pub struct DenoiserConfig {
    pub state_dim: usize,
    pub ctx_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub vocab: usize,
}

impl DenoiserConfig {
    /// Production sizes used by the pipeline.
    pub fn standard(vocab: usize) -> Self {
        DenoiserConfig {
            state_dim: crate::world::SCENE_DIM,
            ctx_dim: 32,
            hidden: 128,
            time_dim: 16,
            vocab,
        }
    }
}

/// The denoising network: learned source-token embeddings averaged into a
/// context vector, concatenated with the noisy state and the timestep
/// embedding, through two tanh layers to a linear posterior-mean head.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: Params,
}

impl Denoiser {
    pub fn init(cfg: DenoiserConfig, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let emb_scale = 1.0 / (cfg.ctx_dim as f64).sqrt();
        params.insert(
            "emb",
            gaussian_matrix(rng, cfg.vocab, cfg.ctx_dim, emb_scale),
        );
        let in_dim = cfg.state_dim + cfg.ctx_dim + cfg.time_dim;
        params.insert(
            "w1",
            gaussian_matrix(rng, in_dim, cfg.hidden, 1.0 / (in_dim as f64).sqrt()),
        );
        params.insert("b1", Tensor::zeros(&[1, cfg.hidden]));
        params.insert(
            "w2",
            gaussian_matrix(rng, cfg.hidden, cfg.hidden, 1.0 / (cfg.hidden as f64).sqrt()),
        );
        params.insert("b2", Tensor::zeros(&[1, cfg.hidden]));
        params.insert(
            "w3",
            gaussian_matrix(rng, cfg.hidden, cfg.state_dim, 1.0 / (cfg.hidden as f64).sqrt()),
        );
        params.insert("b3", Tensor::zeros(&[1, cfg.state_dim]));
        Denoiser { cfg, params }
    }

    pub fn bind(&self, rec: &mut Record) -> Bound {
        self.params.bind(rec)
    }

    /// Mean of source-token embeddings, `[1, ctx_dim]`. An empty context
    /// maps to the zero vector.
    pub fn context_embedding(
        &self,
        rec: &mut Record,
        bind: &Bound,
        ids: &[usize],
    ) -> Result<Tensor> {
        if ids.is_empty() {
            return Ok(Tensor::zeros(&[1, self.cfg.ctx_dim]));
        }
        let idx = Tensor::vector(ids.iter().map(|&i| i as f64).collect());
        let rows = rec.gather_rows(bind.t("emb"), &idx)?;
        let avg = Tensor::matrix(1, ids.len(), vec![1.0 / ids.len() as f64; ids.len()])?;
        Ok(rec.matmul(&avg, &rows)?)
    }

    /// Batched network forward: rows of `(x_t | context | t-embedding)`.
    pub fn forward(
        &self,
        rec: &mut Record,
        bind: &Bound,
        x: &Tensor,
        ctx: &Tensor,
        temb: &Tensor,
    ) -> Result<Tensor> {
        let input = rec.concat(&[x, ctx, temb], 1)?;
        let h = rec.matmul(&input, bind.t("w1"))?;
        let h = rec.add(&h, bind.t("b1"))?;
        let h = rec.tanh(&h)?;
        let h = rec.matmul(&h, bind.t("w2"))?;
        let h = rec.add(&h, bind.t("b2"))?;
        let h = rec.tanh(&h)?;
        let out = rec.matmul(&h, bind.t("w3"))?;
        Ok(rec.add(&out, bind.t("b3"))?)
    }

    /// Predicted posterior mean for one state, without recording.
    pub fn predict_mean(&self, x_t: &[f64], ctx: &Tensor, t: usize) -> Result<Vec<f64>> {
        let mut rec = Record::disabled();
        let bind = self.bind(&mut rec);
        let x = Tensor::row(x_t.to_vec());
        let temb = Tensor::row(time_embedding(t, self.cfg.time_dim));
        let mu = self.forward(&mut rec, &bind, &x, ctx, &temb)?;
        Ok(mu.data().to_vec())
    }

    /// Context embedding without recording, for reuse across sampler steps.
    pub fn context_embedding_plain(&self, ids: &[usize]) -> Result<Tensor> {
        let mut rec = Record::disabled();
        let bind = self.bind(&mut rec);
        self.context_embedding(&mut rec, &bind, ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        crate::tensor::save_named_tensors(path, &named)?;
        Ok(())
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = crate::tensor::load_named_tensors(path)?;
        for (name, tensor) in loaded {
            let slot = self.params.get_mut(&name);
            if slot.shape() != tensor.shape() {
                return Err(DiffusionError::Tensor(TensorError::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    slot.shape(),
                    tensor.shape()
                ))));
            }
            *slot = tensor;
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| randn(rng) * scale).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Draw `x_t ~ q(x_t | x_0)`: returns the noised state and the noise draw.
pub fn forward_sample(
    x0: &[f64],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    sched.check_step(t)?;
    let abar = sched.alpha_bar(t);
    let coeff = abar.sqrt();
    let noise_coeff = (1.0 - abar).sqrt();
    let eps: Vec<f64> = (0..x0.len()).map(|_| randn(rng)).collect();
    let x_t = x0
        .iter()
        .zip(&eps)
        .map(|(x, e)| coeff * x + noise_coeff * e)
        .collect();
    Ok((x_t, eps))
}

/// Forward-process posterior mean, the regression target of the denoiser:
/// a weighted average of `x_0` and `x_t`.
pub fn posterior_mean(
    x0: &[f64],
    x_t: &[f64],
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let abar_t = sched.alpha_bar(t);
    let abar_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    let c0 = abar_prev.sqrt() * beta / (1.0 - abar_t);
    let ct = sched.alpha(t).sqrt() * (1.0 - abar_prev) / (1.0 - abar_t);
    Ok(x0
        .iter()
        .zip(x_t)
        .map(|(x0, xt)| c0 * x0 + ct * xt)
        .collect())
}

/// Denoising objective: each example gets a uniform step `t` and a fresh
/// forward draw; the loss is the batch mean of the squared distance
/// between the true posterior mean and the network prediction.
pub fn ddpm_loss(
    rec: &mut Record,
    bind: &Bound,
    denoiser: &Denoiser,
    batch: &[(&[f64], &[usize])],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    assert!(!batch.is_empty(), "ddpm_loss needs a non-empty batch");
    let dim = denoiser.cfg.state_dim;
    let mut x_rows = Vec::with_capacity(batch.len() * dim);
    let mut target_rows = Vec::with_capacity(batch.len() * dim);
    let mut temb_rows = Vec::with_capacity(batch.len() * denoiser.cfg.time_dim);
    let mut ctx_parts = Vec::with_capacity(batch.len());
    for (x0, ids) in batch {
        let t = rng.gen_range(1..=sched.t_max());
        let (x_t, _) = forward_sample(x0, t, sched, rng)?;
        let target = posterior_mean(x0, &x_t, t, sched)?;
        x_rows.extend_from_slice(&x_t);
        target_rows.extend_from_slice(&target);
        temb_rows.extend(time_embedding(t, denoiser.cfg.time_dim));
        ctx_parts.push(denoiser.context_embedding(rec, bind, ids)?);
    }
    let n = batch.len();
    let x = Tensor::matrix(n, dim, x_rows)?;
    let temb = Tensor::matrix(n, denoiser.cfg.time_dim, temb_rows)?;
    let ctx_refs: Vec<&Tensor> = ctx_parts.iter().collect();
    let ctx = rec.concat(&ctx_refs, 0)?;
    let pred = denoiser.forward(rec, bind, &x, &ctx, &temb)?;
    let target = Tensor::matrix(n, dim, target_rows)?;
    let neg_target = rec.scale(&target, -1.0)?;
    let diff = rec.add(&pred, &neg_target)?;
    let sq = rec.mul(&diff, &diff)?;
    let total = rec.sum(&sq)?;
    Ok(rec.scale(&total, 1.0 / n as f64)?)
}

/// Convenience: evaluate the DDPM loss value without gradients.
pub fn ddpm_loss_value(
    denoiser: &Denoiser,
    batch: &[(&[f64], &[usize])],
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut rec = Record::disabled();
    let bind = denoiser.bind(&mut rec);
    Ok(ddpm_loss(&mut rec, &bind, denoiser, batch, sched, rng)?.item())
}

/// A full reverse chain with per-transition log-densities: the rollout
/// unit for policy-gradient fine-tuning.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Chronological states `x_T, x_{T-1}, .., x_0` (`T + 1` entries).
    pub states: Vec<Vec<f64>>,
    /// `log p(x_{t-1} | x_t)` for each transition in chronological order
    /// (`T` entries); deterministic (mean-only) transitions store 0.
    pub log_probs: Vec<f64>,
    /// Source-token ids this chain was conditioned on.
    pub context: Vec<usize>,
    pub noise_scale: f64,
    pub sched_digest: u64,
}

impl Trajectory {
    pub fn x0(&self) -> &[f64] {
        self.states.last().expect("trajectory has T+1 states")
    }

    pub fn t_max(&self) -> usize {
        self.states.len() - 1
    }

    /// Chronological index of the transition taken at diffusion step `t`
    /// (the step from `x_t` to `x_{t-1}`).
    pub fn transition_index(&self, t: usize) -> usize {
        self.t_max() - t
    }

    /// Diffusion steps whose transitions carry a density, in chronological
    /// order (`T` down to 2). The final reverse step takes the mean and
    /// has none; with `noise_scale = 0` every step is deterministic.
    pub fn stochastic_steps(&self) -> Vec<usize> {
        if self.noise_scale > 0.0 {
            (2..=self.t_max()).rev().collect()
        } else {
            Vec::new()
        }
    }
}

fn gaussian_logp(x: &[f64], mu: &[f64], sigma: f64) -> f64 {
    let mut sumsq = 0.0;
    for (xi, mi) in x.iter().zip(mu) {
        let d = xi + (-1.0 * mi);
        sumsq += d * d;
    }
    sumsq * (-1.0 / (2.0 * sigma * sigma)) + gaussian_logp_const(x.len(), sigma)
}

fn gaussian_logp_const(dim: usize, sigma: f64) -> f64 {
    -(dim as f64) / 2.0 * (2.0 * PI * sigma * sigma).ln()
}

/// Ancestral sampling from `x_T ~ N(0, I)`. Every reverse step draws from
/// `N(mu_theta(x_t, c, t), (beta_t * noise_scale^2) I)` except the final
/// one, which takes the mean so `x_0` is the mode of the last transition.
pub fn sample_trajectory(
    context: &[usize],
    denoiser: &Denoiser,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    noise_scale: f64,
) -> Result<Trajectory> {
    assert!(
        (0.0..=1.0).contains(&noise_scale),
        "noise_scale must be in [0, 1]"
    );
    let dim = denoiser.cfg.state_dim;
    let t_max = sched.t_max();
    let ctx = denoiser.context_embedding_plain(context)?;

    let mut states = Vec::with_capacity(t_max + 1);
    let mut log_probs = Vec::with_capacity(t_max);
    let mut x: Vec<f64> = (0..dim).map(|_| randn(rng)).collect();
    states.push(x.clone());
    for t in (1..=t_max).rev() {
        let mu = denoiser.predict_mean(&x, &ctx, t)?;
        let sigma = sched.beta(t).sqrt() * noise_scale;
        let (next, logp) = if t > 1 && sigma > 0.0 {
            let next: Vec<f64> = mu.iter().map(|m| m + sigma * randn(rng)).collect();
            let logp = gaussian_logp(&next, &mu, sigma);
            (next, logp)
        } else {
            (mu, 0.0)
        };
        if !next.iter().all(|v| v.is_finite()) || !logp.is_finite() {
            return Err(DiffusionError::Tensor(TensorError::NonFinite(
                "sample_trajectory",
            )));
        }
        states.push(next.clone());
        log_probs.push(logp);
        x = next;
    }
    Ok(Trajectory {
        states,
        log_probs,
        context: context.to_vec(),
        noise_scale,
        sched_digest: sched.digest(),
    })
}

/// Recompute `log p(x_{t-1} | x_t, c)` under the current parameters as a
/// differentiable scalar. Rejected for deterministic transitions and for
/// trajectories sampled under a different schedule.
pub fn transition_log_prob(
    rec: &mut Record,
    bind: &Bound,
    denoiser: &Denoiser,
    traj: &Trajectory,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Tensor> {
    if traj.sched_digest != sched.digest() {
        return Err(DiffusionError::ScheduleMismatch);
    }
    sched.check_step(t)?;
    let sigma = sched.beta(t).sqrt() * traj.noise_scale;
    if t == 1 || sigma == 0.0 {
        return Err(DiffusionError::DeterministicStep { t });
    }
    let idx = traj.transition_index(t);
    let x_t = Tensor::row(traj.states[idx].clone());
    let x_prev = Tensor::row(traj.states[idx + 1].clone());
    let ctx = denoiser.context_embedding(rec, bind, &traj.context)?;
    let temb = Tensor::row(time_embedding(t, denoiser.cfg.time_dim));
    let mu = denoiser.forward(rec, bind, &x_t, &ctx, &temb)?;
    let neg_mu = rec.scale(&mu, -1.0)?;
    let diff = rec.add(&x_prev, &neg_mu)?;
    let sq = rec.mul(&diff, &diff)?;
    let sumsq = rec.sum(&sq)?;
    let scaled = rec.scale(&sumsq, -1.0 / (2.0 * sigma * sigma))?;
    let constant = Tensor::scalar(gaussian_logp_const(denoiser.cfg.state_dim, sigma));
    Ok(rec.add(&scaled, &constant)?)
}

/// Differentiable sum of transition log-densities over every stochastic
/// step of a trajectory, batched into one network forward. Used by the
/// REINFORCE estimator where per-step tensors would be needlessly slow.
pub fn trajectory_log_prob_sum(
    rec: &mut Record,
    bind: &Bound,
    denoiser: &Denoiser,
    traj: &Trajectory,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if traj.sched_digest != sched.digest() {
        return Err(DiffusionError::ScheduleMismatch);
    }
    let steps = traj.stochastic_steps();
    assert!(
        !steps.is_empty(),
        "trajectory has no stochastic transitions"
    );
    let dim = denoiser.cfg.state_dim;
    let s = steps.len();
    let mut x_rows = Vec::with_capacity(s * dim);
    let mut prev_rows = Vec::with_capacity(s * dim);
    let mut temb_rows = Vec::with_capacity(s * denoiser.cfg.time_dim);
    let mut inv_two_var = Vec::with_capacity(s);
    let mut const_total = 0.0;
    for &t in &steps {
        let idx = traj.transition_index(t);
        x_rows.extend_from_slice(&traj.states[idx]);
        prev_rows.extend_from_slice(&traj.states[idx + 1]);
        temb_rows.extend(time_embedding(t, denoiser.cfg.time_dim));
        let sigma = sched.beta(t).sqrt() * traj.noise_scale;
        inv_two_var.push(-1.0 / (2.0 * sigma * sigma));
        const_total += gaussian_logp_const(dim, sigma);
    }
    let x = Tensor::matrix(s, dim, x_rows)?;
    let prev = Tensor::matrix(s, dim, prev_rows)?;
    let temb = Tensor::matrix(s, denoiser.cfg.time_dim, temb_rows)?;
    let ctx_one = denoiser.context_embedding(rec, bind, &traj.context)?;
    let zeros = Tensor::vector(vec![0.0; s]);
    let ctx = rec.gather_rows(&ctx_one, &zeros)?;
    let mu = denoiser.forward(rec, bind, &x, &ctx, &temb)?;
    let neg_mu = rec.scale(&mu, -1.0)?;
    let diff = rec.add(&prev, &neg_mu)?;
    let sq = rec.mul(&diff, &diff)?;
    let ones = Tensor::matrix(dim, 1, vec![1.0; dim])?;
    let row_sums = rec.matmul(&sq, &ones)?;
    let factors = Tensor::matrix(s, 1, inv_two_var)?;
    let weighted = rec.mul(&row_sums, &factors)?;
    let total = rec.sum(&weighted)?;
    Ok(rec.add(&total, &Tensor::scalar(const_total))?)
}

/// Debug dump: one JSON object per trajectory with states truncated to
/// four decimals.
pub fn dump_trajectories(path: &Path, trajectories: &[Trajectory]) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let trunc = |v: f64| (v * 1e4).round() / 1e4;
    for traj in trajectories {
        let states: Vec<Vec<f64>> = traj
            .states
            .iter()
            .map(|s| s.iter().copied().map(trunc).collect())
            .collect();
        let log_probs: Vec<f64> = traj.log_probs.iter().copied().map(trunc).collect();
        let record = serde_json::json!({
            "context": traj.context,
            "noise_scale": traj.noise_scale,
            "states": states,
            "log_probs": log_probs,
        });
        writeln!(w, "{record}")?;
    }
    w.flush()
}

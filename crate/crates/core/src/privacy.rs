//! User-level differential privacy: delta clipping, sensitivity-calibrated
//! noise at the server, and an RDP accountant for the subsampled Gaussian
//! mechanism.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    mean_delta, mean_loss, round_updates, train_with, Checkpointing, Delta, FederationConfig, LocalObjective,
    RoundLoss,
};
use crate::data::ClientDataset;
use crate::linalg::{gaussian_draw, laplace_draw, RngStream};
use crate::model::{ItemCatalog, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mechanism {
    Gaussian,
    /// Per-coordinate Laplace noise with scale `(2S/M) / epsilon_per_round`.
    Laplace { epsilon_per_round: f64 },
}

impl Mechanism {
    /// Splits a total budget evenly over `rounds` (basic composition).
    pub fn laplace_for_budget(epsilon_total: f64, rounds: usize) -> Result<Self> {
        if !(epsilon_total > 0.0 && epsilon_total.is_finite()) || rounds == 0 {
            return Err(Error::Config(format!(
                "Laplace budget needs epsilon > 0 and rounds >= 1 (got {epsilon_total}, {rounds})"
            )));
        }
        Ok(Mechanism::Laplace {
            epsilon_per_round: epsilon_total / rounds as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// Clipping bound S on each uploaded delta.
    pub clip_bound: f64,
    /// Noise multiplier z.
    pub noise_multiplier: f64,
    pub delta: f64,
    pub mechanism: Mechanism,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_bound: 1.0,
            noise_multiplier: 1.0,
            delta: 1e-4,
            mechanism: Mechanism::Gaussian,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_bound > 0.0) {
            return Err(Error::Config(format!("clip bound must be positive, got {}", self.clip_bound)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::Config(format!("noise multiplier must be finite and >= 0, got {}", self.noise_multiplier)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let Mechanism::Laplace { epsilon_per_round } = self.mechanism {
            if !(epsilon_per_round > 0.0 && epsilon_per_round.is_finite()) {
                return Err(Error::Config(format!("Laplace epsilon per round must be positive, got {epsilon_per_round}")));
            }
        }
        Ok(())
    }
}

/// `Δ · min(1, S/‖Δ‖)`. The result's computed norm never exceeds `s`.
pub fn clip(delta: &Delta, s: f64) -> Result<Delta> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("clip bound must be positive, got {s}")));
    }
    if delta.norm() <= s {
        return Ok(delta.clone());
    }
    let mut factor = s / delta.norm();
    loop {
        let clipped = Delta::new(delta.values().iter().map(|v| v * factor).collect())?;
        if clipped.norm() <= s {
            return Ok(clipped);
        }
        factor = factor.next_down();
    }
}

/// L2 sensitivity `2S/M` of the averaged clipped update.
pub fn sensitivity_bound(s: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument("sensitivity needs at least one client".into()));
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("clip bound must be positive, got {s}")));
    }
    Ok(2.0 * s / m as f64)
}

/// Adds the configured server-side noise to an aggregated step.
pub fn perturb(step: &[f64], dp: &DpConfig, m: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    dp.validate()?;
    let sens = sensitivity_bound(dp.clip_bound, m)?;
    let noise = match dp.mechanism {
        Mechanism::Gaussian => {
            let sigma = dp.noise_multiplier * sens;
            if sigma == 0.0 {
                return Ok(step.to_vec());
            }
            gaussian_draw(rng, sigma, step.len())?
        }
        Mechanism::Laplace { epsilon_per_round } => laplace_draw(rng, sens / epsilon_per_round, step.len())?,
    };
    Ok(step.iter().zip(noise).map(|(s, n)| s + n).collect())
}

// ---------------------------------------------------------------------------
// accountant

/// Largest integer Rényi order tracked.
pub const MAX_ORDER: usize = 512;

struct LogFactorials(Vec<f64>);

impl LogFactorials {
    fn new(n: usize) -> Self {
        let mut t = vec![0.0; n + 1];
        for k in 1..=n {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        Self(t)
    }

    fn ln_choose(&self, n: usize, k: usize) -> f64 {
        self.0[n] - self.0[k] - self.0[n - k]
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

/// Cumulant generating function `(α−1)·RDP(α)` of one subsampled Gaussian
/// mechanism (sampling without replacement at ratio `q`, sensitivity 1,
/// noise multiplier `z`) at every integer order `0..=MAX_ORDER`.
fn subsampled_gaussian_cgf(q: f64, z: f64) -> Vec<f64> {
    let mut cgf = vec![0.0; MAX_ORDER + 1];
    if z == 0.0 {
        cgf.iter_mut().skip(2).for_each(|c| *c = f64::INFINITY);
        return cgf;
    }
    let eps = |j: f64| j / (2.0 * z * z);
    if q >= 1.0 {
        for (a, c) in cgf.iter_mut().enumerate().skip(2) {
            *c = (a as f64 - 1.0) * eps(a as f64);
        }
        return cgf;
    }
    let lf = LogFactorials::new(MAX_ORDER);
    let ln_q = q.ln();
    let e2 = eps(2.0);
    let two_term = (4f64.ln() + e2 + (-(-e2).exp_m1()).ln()).min(e2 + 2f64.ln());
    for a in 2..=MAX_ORDER {
        let mut acc = log_add(0.0, 2.0 * ln_q + lf.ln_choose(a, 2) + two_term);
        for j in 3..=a {
            let jf = j as f64;
            acc = log_add(acc, 2f64.ln() + (jf - 1.0) * eps(jf) + jf * ln_q + lf.ln_choose(a, j));
        }
        let plain = (a as f64 - 1.0) * eps(a as f64);
        cgf[a] = acc.min(plain);
    }
    cgf
}

/// Tracks the accumulated RDP curve of repeated rounds.
///
/// One step composes `multiplicity` subsampled Gaussian mechanisms at ratio
/// `q` and noise multiplier `z`. A federated round with `M` sampled clients
/// is accounted with multiplicity `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccountant {
    pub q: f64,
    pub z: f64,
    pub multiplicity: usize,
    pub compositions: usize,
    /// Integer orders `2..=MAX_ORDER`.
    pub rdp_orders: Vec<f64>,
    /// Accumulated RDP at each order.
    pub rdp_values: Vec<f64>,
    step_cgf: Vec<f64>,
}

impl PrivacyAccountant {
    pub fn new(q: f64, z: f64) -> Result<Self> {
        Self::with_multiplicity(q, z, 1)
    }

    pub fn with_multiplicity(q: f64, z: f64, multiplicity: usize) -> Result<Self> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(Error::InvalidArgument(format!("sampling ratio must lie in (0, 1], got {q}")));
        }
        if !(z >= 0.0 && z.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise multiplier must be finite and >= 0, got {z}")));
        }
        if multiplicity == 0 {
            return Err(Error::InvalidArgument("multiplicity must be at least 1".into()));
        }
        let cgf = subsampled_gaussian_cgf(q, z);
        let step_cgf: Vec<f64> = cgf.iter().map(|c| c * multiplicity as f64).collect();
        Ok(Self {
            q,
            z,
            multiplicity,
            compositions: 0,
            rdp_orders: (2..=MAX_ORDER).map(|a| a as f64).collect(),
            rdp_values: vec![0.0; MAX_ORDER - 1],
            step_cgf,
        })
    }

    /// Accountant for federated rounds sampling `m` of `n` clients.
    pub fn for_federation(n: usize, m: usize, z: f64) -> Result<Self> {
        if m == 0 || m > n {
            return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} clients")));
        }
        Self::with_multiplicity(m as f64 / n as f64, z, m)
    }

    /// RDP added by one step at each tracked order.
    pub fn step_rdp(&self) -> Vec<f64> {
        (2..=MAX_ORDER).map(|a| self.step_cgf[a] / (a as f64 - 1.0)).collect()
    }

    pub fn step(&mut self) {
        self.steps(1);
    }

    pub fn steps(&mut self, n: usize) {
        self.compositions += n;
        let c = self.compositions as f64;
        for (k, a) in (2..=MAX_ORDER).enumerate() {
            self.rdp_values[k] = c * self.step_cgf[a] / (a as f64 - 1.0);
        }
    }

    fn total_cgf(&self, alpha: f64) -> f64 {
        let c = self.compositions as f64;
        let lo = alpha.floor() as usize;
        let hi = alpha.ceil() as usize;
        let cgf_at = |a: usize| if a <= 1 { 0.0 } else { self.step_cgf[a] };
        let one = if lo == hi {
            cgf_at(lo)
        } else {
            let t = alpha - lo as f64;
            (1.0 - t) * cgf_at(lo) + t * cgf_at(hi)
        };
        c * one
    }

    /// Accumulated RDP at any order in `(1, MAX_ORDER]`, interpolating the
    /// cumulant generating function linearly between integer orders.
    pub fn rdp(&self, alpha: f64) -> f64 {
        if self.compositions == 0 {
            return 0.0;
        }
        if alpha <= 2.0 {
            return self.total_cgf(2.0);
        }
        self.total_cgf(alpha) / (alpha - 1.0)
    }

    /// Smallest ε such that the composed mechanism is (ε, δ)-DP. `δ = 0`
    /// gives infinity.
    pub fn epsilon(&self, delta: f64) -> Result<f64> {
        if delta == 0.0 {
            return Ok(f64::INFINITY);
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in [0, 1), got {delta}")));
        }
        if self.compositions == 0 {
            return Ok(0.0);
        }
        let log_inv = (1.0 / delta).ln();
        let objective = |a: f64| self.rdp(a) + log_inv / (a - 1.0);
        let (best_k, _) = self
            .rdp_values
            .iter()
            .zip(&self.rdp_orders)
            .map(|(r, a)| r + log_inv / (a - 1.0))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
        let a_star = self.rdp_orders[best_k];
        // golden-section refinement around the best integer order
        let (mut lo, mut hi) = ((a_star - 1.0).max(1.0 + 1e-9), (a_star + 1.0).min(MAX_ORDER as f64));
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let (mut f1, mut f2) = (objective(x1), objective(x2));
        for _ in 0..80 {
            if f1 <= f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = objective(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = objective(x2);
            }
        }
        Ok(objective(a_star).min(f1).min(f2).max(0.0))
    }
}

/// Functional form of [`PrivacyAccountant::step`].
pub fn accountant_step(acc: &PrivacyAccountant) -> PrivacyAccountant {
    let mut next = acc.clone();
    next.step();
    next
}

/// ε after `rounds` federated rounds sampling `m` of `n` clients at noise `z`.
pub fn federated_epsilon(n: usize, m: usize, z: f64, rounds: usize, delta: f64) -> Result<f64> {
    let mut acc = PrivacyAccountant::for_federation(n, m, z)?;
    acc.steps(rounds);
    acc.epsilon(delta)
}

/// Smallest noise multiplier (to bisection precision) reaching `target`.
pub fn calibrate_noise(target: f64, n: usize, m: usize, rounds: usize, delta: f64) -> Result<f64> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!("target epsilon must be positive, got {target}")));
    }
    if rounds == 0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (1e-3f64, 1e3f64);
    if federated_epsilon(n, m, hi, rounds, delta)? > target {
        return Err(Error::InvalidArgument(format!("epsilon {target} unreachable with noise multiplier <= {hi}")));
    }
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        if federated_epsilon(n, m, mid, rounds, delta)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Rows `m` of an ε table for `n` clients, noise `z`, `rounds` rounds, and
/// one column per δ. Returns `(m, q, ε per δ)` triples.
pub fn accountant_table(
    n: usize,
    m_values: &[usize],
    z: f64,
    rounds: usize,
    deltas: &[f64],
) -> Result<Vec<(usize, f64, Vec<f64>)>> {
    m_values
        .iter()
        .map(|&m| {
            let mut acc = PrivacyAccountant::for_federation(n, m, z)?;
            acc.steps(rounds);
            let eps = deltas.iter().map(|&d| acc.epsilon(d)).collect::<Result<Vec<_>>>()?;
            Ok((m, m as f64 / n as f64, eps))
        })
        .collect()
}

pub fn accountant_csv(n: usize, rows: &[(usize, f64, Vec<f64>)], deltas: &[f64]) -> String {
    let mut out = String::from("n,m,q");
    for d in deltas {
        write!(out, ",delta={d:e}").unwrap();
    }
    out.push('\n');
    for (m, q, eps) in rows {
        write!(out, "{n},{m},{q:.6}").unwrap();
        for e in eps {
            if e.is_infinite() {
                out.push_str(",inf");
            } else {
                write!(out, ",{e:.4}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_accountant_csv(path: &Path, n: usize, rows: &[(usize, f64, Vec<f64>)], deltas: &[f64]) -> Result<()> {
    fs::write(path, accountant_csv(n, rows, deltas)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// private training

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpStage {
    /// Private rounds on the recommendation loss alone.
    OneStage,
    /// Noiseless federated self-supervised pretraining, then private rounds
    /// on the joint loss.
    TwoStage { pretrain_rounds: usize },
}

#[derive(Debug, Clone)]
pub struct DpOutput {
    pub theta: ParamSet,
    pub trace: Vec<RoundLoss>,
    pub accountant: PrivacyAccountant,
    /// Largest uploaded delta norm seen across private rounds.
    pub max_upload_norm: f64,
}

/// Private federated training. `cfg.rounds` counts the private rounds; the
/// accountant advances once per private round only.
pub fn train_dp(
    theta0: ParamSet,
    clients: &[ClientDataset],
    catalog: &ItemCatalog,
    cfg: &FederationConfig,
    dp: &DpConfig,
    stage: DpStage,
    checkpoints: &Checkpointing,
) -> Result<DpOutput> {
    cfg.validate(clients.len())?;
    dp.validate()?;
    let m = cfg.clients_per_round;
    let mut accountant = PrivacyAccountant::for_federation(clients.len(), m, dp.noise_multiplier)?;

    let (mut theta, mut trace, mode, first_round) = match stage {
        DpStage::OneStage => (theta0, Vec::new(), LocalObjective::Dssm, 0),
        DpStage::TwoStage { pretrain_rounds } => {
            let pre_cfg = FederationConfig {
                rounds: pretrain_rounds,
                ..cfg.clone()
            };
            let pre = train_with(theta0, clients, catalog, &pre_cfg, LocalObjective::SslOnly, 0, &Checkpointing::default())?;
            (pre.theta, pre.trace, LocalObjective::Joint, pretrain_rounds)
        }
    };

    let mut max_norm: f64 = 0.0;
    for r in 0..cfg.rounds {
        let round = first_round + r;
        let updates = round_updates(&theta, clients, catalog, cfg, mode, round, Some(dp.clip_bound))?;
        for (id, d, _) in &updates {
            if d.norm() > dp.clip_bound {
                return Err(Error::InvalidArgument(format!(
                    "client {id} uploaded a delta of norm {} above the bound {}",
                    d.norm(),
                    dp.clip_bound
                )));
            }
            max_norm = max_norm.max(d.norm());
        }
        trace.push(RoundLoss {
            round,
            mean_local_loss: mean_loss(&updates),
        });
        let deltas: Vec<Delta> = updates.into_iter().map(|u| u.1).collect();
        let mut step = mean_delta(&deltas)?;
        step.iter_mut().for_each(|s| *s *= cfg.alpha2);
        let mut noise_rng = RngStream::derived(cfg.seed, "server-noise", &[round as u64]);
        let noisy = perturb(&step, dp, m, &mut noise_rng)?;
        theta.axpy(1.0, &noisy);
        accountant.step();
        checkpoints.maybe_write(r + 1, &theta)?;
    }
    Ok(DpOutput {
        theta,
        trace,
        accountant,
        max_upload_norm: max_norm,
    })
}

//! Hard-concrete stochastic gates, the exactly-half auxiliary loss and the
//! λ schedule that weights it.
//!
//! A gate value is `g = clamp(s·(ζ−γ)+γ, 0, 1)` with
//! `s = sigmoid((log u − log(1−u) + log_alpha)/β)` and `u ~ U(0,1)`. Because
//! `γ < 0 < 1 < ζ` the stretched sample is clipped at both ends, so a gate is
//! exactly closed or exactly open with nonzero probability while staying
//! differentiable in `log_alpha` in between.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{sigmoid, Tape, Var};
use crate::tensor::Tensor;

/// Stretch and temperature constants of the hard-concrete distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        HardConcrete {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
        }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be positive and finite"));
        }
        if !(self.gamma < 0.0) {
            return Err(Error::config("gamma", "must be negative"));
        }
        if !(self.zeta > 1.0 && self.zeta.is_finite()) {
            return Err(Error::config("zeta", "must exceed 1"));
        }
        Ok(())
    }

    /// `β·log(−γ/ζ)`, the log-alpha at which a gate is open half the time.
    pub fn half_open_log_alpha(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    /// Logistic noise `log u − log(1 − u)`.
    pub fn logistic_noise(u: f64) -> f64 {
        u.ln() - (1.0 - u).ln()
    }

    /// Gate value for a given uniform draw.
    pub fn sample(&self, u: f64, log_alpha: f64) -> f64 {
        let s = sigmoid((Self::logistic_noise(u) + log_alpha) / self.beta);
        (s * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// `P[g > 0]`.
    pub fn p_open(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.half_open_log_alpha())
    }

    /// `P[g = 0]`.
    pub fn p_closed(&self, log_alpha: f64) -> f64 {
        1.0 - self.p_open(log_alpha)
    }

    /// `P[g = 1]`.
    pub fn p_fully_open(&self, log_alpha: f64) -> f64 {
        let shift = self.beta * ((1.0 - self.gamma) / (self.zeta - 1.0)).ln();
        sigmoid(log_alpha - shift)
    }

    /// Test-time gate value.
    pub fn deterministic(&self, log_alpha: f64) -> f64 {
        (sigmoid(log_alpha) * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }
}

/// Draws `u ~ U(0,1)` excluding zero, so both logs in the noise are finite.
pub fn draw_uniform<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(f64::MIN_POSITIVE..1.0)
}

/// Trainable gate layer state: one log-alpha per unit plus fixed constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGate", into = "RawGate")]
pub struct GateParams {
    pub log_alpha: Tensor,
    pub constants: HardConcrete,
}

#[derive(Serialize, Deserialize)]
struct RawGate {
    log_alpha: Vec<f64>,
    beta: f64,
    gamma: f64,
    zeta: f64,
}

impl TryFrom<RawGate> for GateParams {
    type Error = Error;

    fn try_from(raw: RawGate) -> Result<Self> {
        GateParams::new(
            raw.log_alpha,
            HardConcrete {
                beta: raw.beta,
                gamma: raw.gamma,
                zeta: raw.zeta,
            },
        )
    }
}

impl From<GateParams> for RawGate {
    fn from(g: GateParams) -> Self {
        RawGate {
            log_alpha: g.log_alpha.into_data(),
            beta: g.constants.beta,
            gamma: g.constants.gamma,
            zeta: g.constants.zeta,
        }
    }
}

impl GateParams {
    pub fn new(log_alpha: Vec<f64>, constants: HardConcrete) -> Result<Self> {
        constants.validate()?;
        if log_alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("log_alpha must be finite".into()));
        }
        let k = log_alpha.len();
        Ok(GateParams {
            log_alpha: Tensor::new(vec![k], log_alpha)?,
            constants,
        })
    }

    /// `log_alpha ~ mean + Normal(0, std)` per unit.
    pub fn init<R: Rng + ?Sized>(k: usize, constants: HardConcrete, mean: f64, std: f64, rng: &mut R) -> Result<Self> {
        constants.validate()?;
        Ok(GateParams {
            log_alpha: Tensor::normal(&[k], mean, std, rng),
            constants,
        })
    }

    pub fn width(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn p_open_values(&self) -> Vec<f64> {
        self.log_alpha.data().iter().map(|&a| self.constants.p_open(a)).collect()
    }

    pub fn deterministic_values(&self) -> Vec<f64> {
        self.log_alpha
            .data()
            .iter()
            .map(|&a| self.constants.deterministic(a))
            .collect()
    }

    pub fn sample_values<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.log_alpha
            .data()
            .iter()
            .map(|&a| self.constants.sample(draw_uniform(rng), a))
            .collect()
    }

    pub fn mean_p_open(&self) -> f64 {
        let p = self.p_open_values();
        p.iter().sum::<f64>() / p.len() as f64
    }
}

/// Samples one gate realization for every unit, differentiable in `log_alpha`.
pub fn sample_gates<R: Rng + ?Sized>(tape: &mut Tape, log_alpha: Var, hc: &HardConcrete, rng: &mut R) -> Result<Var> {
    let u: Vec<f64> = (0..tape.value(log_alpha).len()).map(|_| draw_uniform(rng)).collect();
    sample_gates_with_noise(tape, log_alpha, hc, &u)
}

/// [`sample_gates`] with the uniform draws supplied by the caller.
pub fn sample_gates_with_noise(tape: &mut Tape, log_alpha: Var, hc: &HardConcrete, u: &[f64]) -> Result<Var> {
    let shape = tape.shape(log_alpha).to_vec();
    if u.len() != tape.value(log_alpha).len() {
        return Err(Error::dim(format!("{} uniform draws for {shape:?} gates", u.len())));
    }
    if let Some(bad) = u.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Domain(format!("uniform draw {bad} outside (0,1)")));
    }
    let noise = tape.constant_from(shape, u.iter().map(|&v| HardConcrete::logistic_noise(v)).collect())?;
    let z = tape.add(log_alpha, noise)?;
    let z = tape.scale(z, 1.0 / hc.beta);
    let s = tape.sigmoid(z);
    let stretched = tape.scale(s, hc.zeta - hc.gamma);
    let stretched = tape.add_scalar(stretched, hc.gamma);
    Ok(tape.clamp(stretched, 0.0, 1.0))
}

/// `P[g > 0] = sigmoid(log_alpha − β·log(−γ/ζ))`.
pub fn p_open(tape: &mut Tape, log_alpha: Var, hc: &HardConcrete) -> Var {
    let shifted = tape.add_scalar(log_alpha, -hc.half_open_log_alpha());
    tape.sigmoid(shifted)
}

/// Expected-value gate `clamp(sigmoid(log_alpha)·(ζ−γ)+γ, 0, 1)`.
pub fn deterministic_gate(tape: &mut Tape, log_alpha: Var, hc: &HardConcrete) -> Var {
    let s = tape.sigmoid(log_alpha);
    let stretched = tape.scale(s, hc.zeta - hc.gamma);
    let stretched = tape.add_scalar(stretched, hc.gamma);
    tape.clamp(stretched, 0.0, 1.0)
}

/// `(1/2 − mean_i P[g_i > 0])²` for one gated layer.
pub fn l_half(tape: &mut Tape, log_alpha: Var, hc: &HardConcrete) -> Result<Var> {
    if tape.value(log_alpha).is_empty() {
        return Err(Error::contract("L_half needs at least one gate"));
    }
    let p = p_open(tape, log_alpha, hc);
    let m = tape.mean(p);
    let d = tape.add_scalar(m, -0.5);
    Ok(tape.square(d))
}

/// `error_loss + λ·Σ_layers L_half`.
pub fn total_loss(tape: &mut Tape, error_loss: Var, gates: &[(Var, HardConcrete)], lambda: f64) -> Result<Var> {
    if gates.is_empty() {
        return Ok(error_loss);
    }
    let mut aux: Option<Var> = None;
    for (la, hc) in gates {
        let l = l_half(tape, *la, hc)?;
        aux = Some(match aux {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let aux = tape.scale(aux.expect("non-empty"), lambda);
    tape.add(error_loss, aux)
}

/// `λ_{t+1} = λ_t + c·√λ_t`, indexed by epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub increment: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            lambda0: 0.01,
            increment: 0.05,
        }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::config("lambda.lambda0", "must be a non-negative number"));
        }
        if !self.increment.is_finite() {
            return Err(Error::config("lambda.increment", "must be finite"));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let mut lambda = self.lambda0;
        for _ in 0..epoch {
            lambda = (lambda + self.increment * lambda.sqrt()).max(0.0);
        }
        lambda
    }
}

//! Continuous-time flow `dh/dt = f(h, t)` integrated with fixed-step RK4,
//! with the Jacobian trace integrated alongside the state.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::ConcatSquashNet;
use crate::rng::Rng;

use super::discrete::standard_normal_logpdf;

/// Largest dimension for which the exact trace is allowed.
pub const EXACT_TRACE_MAX_DIM: usize = 16;
pub const MIN_STEPS: usize = 4;
pub const DEFAULT_STEPS: usize = 20;

/// A time-dependent vector field with forward-mode directional derivatives.
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Evaluate `f(h, time)` and `J v` for every tangent `v`, where `J` is
    /// the Jacobian of `f` with respect to `h`.
    fn eval(&self, t: &mut Tape, h: Var, time: f64, tangents: &[Var]) -> Result<(Var, Vec<Var>)>;
}

/// `f(h, t) = h Aᵀ`, constant in time.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub a: Tensor,
}

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn eval(&self, t: &mut Tape, h: Var, _time: f64, tangents: &[Var]) -> Result<(Var, Vec<Var>)> {
        let at = t.constant(self.a.clone());
        let at = t.transpose(at)?;
        let f = t.matmul(h, at)?;
        let dots = tangents
            .iter()
            .map(|&v| t.matmul(v, at))
            .collect::<Result<_>>()?;
        Ok((f, dots))
    }
}

/// Concatsquash network conditioned on time: CS(d→H), tanh, CS(H→H), tanh,
/// CS(H→d).
#[derive(Clone, Debug)]
pub struct ConcatSquashField {
    pub net: ConcatSquashNet,
    pub dim: usize,
}

impl ConcatSquashField {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        Self {
            net: ConcatSquashNet::new(store, name, dim, hidden, dim, 1, false, rng),
            dim,
        }
    }
}

impl VectorField for ConcatSquashField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, t: &mut Tape, h: Var, time: f64, tangents: &[Var]) -> Result<(Var, Vec<Var>)> {
        let rows = t.shape(h)[0];
        let tc = t.constant(Tensor::full(&[rows, 1], time));
        self.net.forward_with_tangents(t, h, tc, tangents)
    }
}

/// How the Jacobian trace is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceMode {
    /// `Σ_k e_kᵀ J e_k`, one tangent per dimension.
    Exact,
    /// `εᵀ J ε` with one Rademacher probe per row, fixed for a solve.
    Hutchinson,
}

impl std::str::FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(TraceMode::Exact),
            "hutchinson" => Ok(TraceMode::Hutchinson),
            other => Err(Error::InvalidArgument(format!("unknown trace mode `{other}`"))),
        }
    }
}

enum Probe {
    Exact(Vec<Var>),
    Hutchinson(Var),
}

impl Probe {
    fn build(t: &mut Tape, rows: usize, dim: usize, mode: TraceMode, rng: Option<&mut Rng>) -> Result<Self> {
        match mode {
            TraceMode::Exact => {
                if dim > EXACT_TRACE_MAX_DIM {
                    return Err(Error::InvalidArgument(format!(
                        "exact trace needs dimension <= {EXACT_TRACE_MAX_DIM}, got {dim}"
                    )));
                }
                let es = (0..dim)
                    .map(|k| {
                        let mut e = Tensor::zeros(&[rows, dim]);
                        for r in 0..rows {
                            e.data_mut()[r * dim + k] = 1.0;
                        }
                        t.constant(e)
                    })
                    .collect();
                Ok(Probe::Exact(es))
            }
            TraceMode::Hutchinson => {
                let rng = rng.ok_or_else(|| {
                    Error::InvalidArgument("hutchinson trace needs a random number generator".into())
                })?;
                Ok(Probe::Hutchinson(t.constant(rng.rademacher_tensor(&[rows, dim]))))
            }
        }
    }

    fn tangents(&self) -> Vec<Var> {
        match self {
            Probe::Exact(es) => es.clone(),
            Probe::Hutchinson(e) => vec![*e],
        }
    }

    /// Per-row trace estimate `[B, 1]` from the Jacobian-vector products.
    fn trace(&self, t: &mut Tape, jv: &[Var]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (&v, &j) in self.tangents().iter().zip(jv) {
            let p = t.mul(v, j)?;
            let s = t.sum_axis(p, 1)?;
            acc = Some(match acc {
                None => s,
                Some(a) => t.add(a, s)?,
            });
        }
        Ok(acc.expect("at least one tangent"))
    }
}

/// Per-row Jacobian trace of `field` at `(h, time)`, `[B, 1]`.
pub fn jacobian_trace(
    field: &dyn VectorField,
    t: &mut Tape,
    h: Var,
    time: f64,
    mode: TraceMode,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let rows = t.shape(h)[0];
    let probe = Probe::build(t, rows, field.dim(), mode, rng)?;
    let (_, jv) = field.eval(t, h, time, &probe.tangents())?;
    probe.trace(t, &jv)
}

/// Integrate from `t_start` to `t_end` (either order) with `steps` RK4
/// steps. With a trace mode, also returns `∫ Tr(∂f/∂h) dt` over the same
/// signed interval, per row.
pub fn integrate(
    field: &dyn VectorField,
    t: &mut Tape,
    h0: Var,
    t_start: f64,
    t_end: f64,
    steps: usize,
    trace: Option<(TraceMode, Option<&mut Rng>)>,
) -> Result<(Var, Option<Var>)> {
    if steps < MIN_STEPS {
        return Err(Error::InvalidArgument(format!(
            "integrator needs at least {MIN_STEPS} steps, got {steps}"
        )));
    }
    let shape = t.shape(h0).to_vec();
    if shape.len() != 2 || shape[1] != field.dim() {
        return Err(Error::Shape {
            op: "cnf input",
            lhs: shape,
            rhs: vec![field.dim()],
        });
    }
    let rows = shape[0];
    let probe = match trace {
        Some((mode, rng)) => Some(Probe::build(t, rows, field.dim(), mode, rng)?),
        None => None,
    };
    let tangents = probe.as_ref().map(|p| p.tangents()).unwrap_or_default();
    let dt = (t_end - t_start) / steps as f64;

    let eval = |t: &mut Tape, h: Var, time: f64| -> Result<(Var, Option<Var>)> {
        let (f, jv) = field.eval(t, h, time, &tangents)?;
        let tr = match &probe {
            Some(p) => Some(p.trace(t, &jv)?),
            None => None,
        };
        Ok((f, tr))
    };

    let mut h = h0;
    let mut acc = probe.as_ref().map(|_| t.constant(Tensor::zeros(&[rows, 1])));
    for s in 0..steps {
        let time = t_start + s as f64 * dt;
        let (k1, r1) = eval(t, h, time)?;
        let d = t.scale(k1, 0.5 * dt);
        let h2 = t.add(h, d)?;
        let (k2, r2) = eval(t, h2, time + 0.5 * dt)?;
        let d = t.scale(k2, 0.5 * dt);
        let h3 = t.add(h, d)?;
        let (k3, r3) = eval(t, h3, time + 0.5 * dt)?;
        let d = t.scale(k3, dt);
        let h4 = t.add(h, d)?;
        let (k4, r4) = eval(t, h4, time + dt)?;

        let k = weighted4(t, k1, k2, k3, k4)?;
        let d = t.scale(k, dt / 6.0);
        h = t.add(h, d)?;
        if let (Some(a), Some(r1), Some(r2), Some(r3), Some(r4)) = (acc, r1, r2, r3, r4) {
            let r = weighted4(t, r1, r2, r3, r4)?;
            let d = t.scale(r, dt / 6.0);
            acc = Some(t.add(a, d)?);
        }
        t.ensure_finite(h, "cnf state")?;
    }
    Ok((h, acc))
}

fn weighted4(t: &mut Tape, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
    let b2 = t.scale(b, 2.0);
    let c2 = t.scale(c, 2.0);
    let s = t.add(a, b2)?;
    let s = t.add(s, c2)?;
    t.add(s, d)
}

/// Continuous flow over `[t0, t1]`: `z = h(t0)`, `x = h(t1)`.
#[derive(Clone, Debug)]
pub struct CnfBackend {
    pub field: ConcatSquashField,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    pub mode: TraceMode,
}

impl CnfBackend {
    pub fn new(field: ConcatSquashField, steps: usize, mode: TraceMode) -> Result<Self> {
        if steps < MIN_STEPS {
            return Err(Error::InvalidArgument(format!(
                "integrator needs at least {MIN_STEPS} steps, got {steps}"
            )));
        }
        if mode == TraceMode::Exact && field.dim > EXACT_TRACE_MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "exact trace needs dimension <= {EXACT_TRACE_MAX_DIM}"
            )));
        }
        Ok(Self {
            field,
            t0: 0.0,
            t1: 1.0,
            steps,
            mode,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim
    }

    /// Generative direction `z -> x`.
    pub fn forward(&self, t: &mut Tape, z: Var) -> Result<Var> {
        Ok(integrate(&self.field, t, z, self.t0, self.t1, self.steps, None)?.0)
    }

    /// Density direction: `z` and `log|det ∂z/∂x| = -∫ Tr dt`, per row.
    pub fn inverse(&self, t: &mut Tape, x: Var, rng: Option<&mut Rng>) -> Result<(Var, Var)> {
        let (z, acc) = integrate(&self.field, t, x, self.t1, self.t0, self.steps, Some((self.mode, rng)))?;
        Ok((z, acc.expect("trace requested")))
    }

    /// Per-row `log p(x)` with a standard-normal base, together with `z`.
    pub fn log_density(&self, t: &mut Tape, x: Var, rng: Option<&mut Rng>) -> Result<(Var, Var)> {
        let (z, ld) = self.inverse(t, x, rng)?;
        let lp = standard_normal_logpdf(t, z)?;
        Ok((z, t.add(lp, ld)?))
    }
}

/// `log p(x)` for an arbitrary field, integrating from `t1` back to `t0`.
/// Returns `z`, the per-row log-density and the forward trace integral
/// `∫_{t0}^{t1} Tr dt`.
#[allow(clippy::too_many_arguments)]
pub fn cnf_logdensity(
    field: &dyn VectorField,
    t: &mut Tape,
    x: Var,
    t0: f64,
    t1: f64,
    steps: usize,
    mode: TraceMode,
    rng: Option<&mut Rng>,
) -> Result<(Var, Var, Var)> {
    let (z, acc) = integrate(field, t, x, t1, t0, steps, Some((mode, rng)))?;
    let acc = acc.expect("trace requested");
    let lp = standard_normal_logpdf(t, z)?;
    let logp = t.add(lp, acc)?;
    let fwd = t.neg(acc);
    Ok((z, logp, fwd))
}

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::charts::{entropy_from_logits, gumbel_softmax_with_noise, mi_regularizer_tape};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowStack};
use crate::layers::PredictorNet;
use crate::rng::Rng;

use super::{Hyperparams, GENERATION_CHUNK};

/// One object modelled by a chart-conditioned flow `F(z; y)` and a chart
/// predictor `q_C(y | x)`.
#[derive(Clone, Debug)]
pub struct SingleCloudModel {
    pub flow: FlowStack,
    pub predictor: PredictorNet,
    pub dim: usize,
    pub charts: usize,
    pub tau: f64,
    pub lambda: f64,
}

/// Per-point pieces of the approximated ELBO, each `[B, 1]` unless noted.
#[derive(Clone, Copy, Debug)]
pub struct SingleTerms {
    /// `log p(z) + log|det ∂F⁻¹(x; ỹ)/∂x|`.
    pub log_likelihood: Var,
    /// `H[q_C(y|x)]`.
    pub entropy: Var,
    /// `H[q_C(y|x) | p(y)]`, equal to `log n` under the uniform prior.
    pub cross_entropy: f64,
    /// Predictor logits `[B, n]`.
    pub logits: Var,
    /// Relaxed labels `[B, n]`.
    pub labels: Var,
}

impl SingleCloudModel {
    pub fn new(store: &mut ParamStore, hp: &Hyperparams, rng: &mut Rng) -> Result<Self> {
        hp.validate()?;
        let cfg = FlowConfig::new(hp.dim, hp.charts, hp.flow_blocks, hp.width_factor);
        let flow = FlowStack::new(store, "F", &cfg, rng)?;
        let predictor = PredictorNet::new(store, "C", hp.dim, 1, hp.charts, hp.width_factor, rng)?;
        Ok(Self {
            flow,
            predictor,
            dim: hp.dim,
            charts: hp.charts,
            tau: hp.tau,
            lambda: hp.lambda,
        })
    }

    fn ones(t: &mut Tape, rows: usize) -> Var {
        t.constant(Tensor::ones(&[rows, 1]))
    }

    /// Predictor logits `[B, n]`; the condition is the constant 1.
    pub fn logits(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let rows = t.shape(x)[0];
        let c = Self::ones(t, rows);
        self.predictor.logits(t, x, c)
    }

    /// ELBO pieces with explicit Gumbel noise `[B, n]`.
    pub fn terms_with_noise(&self, t: &mut Tape, x: Var, noise: &Tensor) -> Result<SingleTerms> {
        let logits = self.logits(t, x)?;
        let labels = gumbel_softmax_with_noise(t, logits, noise, self.tau)?;
        let log_likelihood = self.flow.log_likelihood(t, x, labels)?;
        let entropy = entropy_from_logits(t, logits)?;
        Ok(SingleTerms {
            log_likelihood,
            entropy,
            cross_entropy: (self.charts as f64).ln(),
            logits,
            labels,
        })
    }

    pub fn terms(&self, t: &mut Tape, x: Var, rng: &mut Rng) -> Result<SingleTerms> {
        let rows = t.shape(x)[0];
        let noise = rng.gumbel_tensor(&[rows, self.charts]);
        self.terms_with_noise(t, x, &noise)
    }

    /// Approximated per-point ELBO `[B, 1]`.
    pub fn elbo_from_terms(&self, t: &mut Tape, terms: &SingleTerms) -> Result<Var> {
        let e = t.add(terms.log_likelihood, terms.entropy)?;
        Ok(t.add_scalar(e, -terms.cross_entropy))
    }

    pub fn elbo(&self, t: &mut Tape, x: Var, rng: &mut Rng) -> Result<Var> {
        let terms = self.terms(t, x, rng)?;
        self.elbo_from_terms(t, &terms)
    }

    /// Negated objective `-Σ_x [ELBO + λ (H[q̄] − H[q_C(y|x)])]`, with the
    /// marginal `q̄` taken over the rows of `x`.
    pub fn loss_from_terms(&self, t: &mut Tape, terms: &SingleTerms) -> Result<Var> {
        let rows = t.shape(terms.logits)[0];
        if rows == 0 {
            return Err(Error::Empty("point batch"));
        }
        let elbo = self.elbo_from_terms(t, terms)?;
        let elbo = t.sum(elbo);
        let mi = mi_regularizer_tape(t, terms.logits, 1, rows, self.lambda, self.lambda)?;
        let obj = t.add(elbo, mi)?;
        Ok(t.neg(obj))
    }

    pub fn loss(&self, t: &mut Tape, x: Var, rng: &mut Rng) -> Result<Var> {
        let terms = self.terms(t, x, rng)?;
        self.loss_from_terms(t, &terms)
    }

    /// Chart posteriors `[B, n]` for plain points.
    pub fn posteriors(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone());
        let l = self.logits(&mut t, xv)?;
        let p = t.softmax(l);
        Ok(t.value(p).clone())
    }

    /// Draw `m` points: `y ~ p(y)` uniform, `z ~ N(0, I)`, `x = F(z; y)`.
    pub fn generate(&self, store: &ParamStore, m: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        if m == 0 {
            return Err(Error::Empty("requested point count"));
        }
        let labels: Vec<usize> = (0..m).map(|_| rng.below(self.charts)).collect();
        let z = rng.normal_tensor(&[m, self.dim]);
        let x = self.decode(store, &z, &labels)?;
        Ok((x, labels))
    }

    /// `x = F(z; one_hot(y))` in chunks.
    pub fn decode(&self, store: &ParamStore, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let m = z.rows();
        let mut out = Vec::with_capacity(m * self.dim);
        for start in (0..m).step_by(GENERATION_CHUNK) {
            let end = (start + GENERATION_CHUNK).min(m);
            let zc = Tensor::new(vec![end - start, self.dim], z.data()[start * self.dim..end * self.dim].to_vec())?;
            let mut y = Tensor::zeros(&[end - start, self.charts]);
            for (r, &k) in labels[start..end].iter().enumerate() {
                y.data_mut()[r * self.charts + k] = 1.0;
            }
            let mut t = Tape::new(store);
            let zv = t.constant(zc);
            let yv = t.constant(y);
            let (x, _) = self.flow.forward(&mut t, zv, yv)?;
            out.extend_from_slice(t.value(x).data());
        }
        Tensor::new(vec![m, self.dim], out)
    }

    /// Data-dependent actnorm initialization with uniform relaxed labels.
    pub fn actnorm_init(&self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        let cond = Tensor::full(&[x.rows(), self.charts], 1.0 / self.charts as f64);
        self.flow.actnorm_init(store, x, &cond)
    }
}

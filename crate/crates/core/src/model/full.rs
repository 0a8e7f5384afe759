use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::charts::{
    chart_generator_kl, cloud_marginals, entropy_from_logits, gumbel_softmax_with_noise, mi_regularizer_tape,
};
use crate::error::{Error, Result};
use crate::flow::{standard_normal_logpdf, CnfBackend, ConcatSquashField, FlowConfig, FlowStack};
use crate::layers::{scaled_width, EncoderNet, EncoderWidths, GeneratorHead, Posterior, PredictorNet};
use crate::rng::Rng;

use super::{Hyperparams, PriorKind, GENERATION_CHUNK};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Trainable density over feature vectors.
#[derive(Clone, Debug)]
pub enum PriorFlow {
    /// Discrete stack conditioned on a constant column of ones.
    Discrete(FlowStack),
    Cnf(CnfBackend),
}

impl PriorFlow {
    pub fn dim(&self) -> usize {
        match self {
            PriorFlow::Discrete(f) => f.dim,
            PriorFlow::Cnf(c) => c.dim(),
        }
    }

    /// Per-row `log p_G(s)`, `[B, 1]`.
    pub fn log_density(&self, t: &mut Tape, s: Var, rng: &mut Rng) -> Result<Var> {
        match self {
            PriorFlow::Discrete(f) => {
                let rows = t.shape(s)[0];
                let c = t.constant(Tensor::ones(&[rows, 1]));
                f.log_likelihood(t, s, c)
            }
            PriorFlow::Cnf(c) => Ok(c.log_density(t, s, Some(rng))?.1),
        }
    }

    /// `s = G(w)`.
    pub fn sample(&self, t: &mut Tape, w: Var) -> Result<Var> {
        match self {
            PriorFlow::Discrete(f) => {
                let rows = t.shape(w)[0];
                let c = t.constant(Tensor::ones(&[rows, 1]));
                Ok(f.forward(t, w, c)?.0)
            }
            PriorFlow::Cnf(c) => c.forward(t, w),
        }
    }
}

/// Encoder `E`, prior flow `G`, point flow `F(z; y, s)`, chart predictor
/// `q_C(y | x, s)` and chart generator `p_K(y | s)`.
#[derive(Clone, Debug)]
pub struct FullModel {
    pub encoder: EncoderNet,
    pub prior: PriorFlow,
    pub flow: FlowStack,
    pub predictor: PredictorNet,
    pub generator: GeneratorHead,
    pub dim: usize,
    pub charts: usize,
    pub feature_dim: usize,
    pub tau: f64,
    pub mu: f64,
    pub lambda: f64,
}

/// Pieces of the approximated ELBO for a batch of `clouds` clouds of
/// `points` points, stacked cloud by cloud.
#[derive(Clone, Debug)]
pub struct FullTerms {
    pub clouds: usize,
    pub points: usize,
    pub posterior: Posterior,
    /// Reparameterized features `[clouds, D]`.
    pub features: Var,
    /// `log q_E(s | X)`, `[clouds, 1]`.
    pub log_q: Var,
    /// `log p_G(s)`, `[clouds, 1]`.
    pub log_prior: Var,
    /// `log p_F(x_j | ỹ_j, s)`, `[clouds * points, 1]`.
    pub log_likelihood: Var,
    /// `H[q_C(y_j | x_j, s)]`, `[clouds * points, 1]`.
    pub entropy: Var,
    /// `H[q_C | p(y)] = log n`.
    pub cross_entropy: f64,
    pub logits: Var,
    pub labels: Var,
}

/// Noise consumed by one ELBO evaluation.
#[derive(Clone, Debug)]
pub struct FullNoise {
    /// Standard-normal draws for the features, `[clouds, D]`.
    pub eta: Tensor,
    /// Gumbel draws for the labels, `[clouds * points, n]`.
    pub gumbel: Tensor,
}

impl FullModel {
    pub fn new(store: &mut ParamStore, hp: &Hyperparams, rng: &mut Rng) -> Result<Self> {
        hp.validate()?;
        let d = hp.feature_dim;
        let encoder = EncoderNet::new(store, "E", hp.dim, d, &EncoderWidths::scaled(hp.width_factor), rng);
        let prior = match hp.prior {
            PriorKind::Discrete => {
                let cfg = FlowConfig::new(d, 1, hp.prior_blocks, hp.width_factor);
                PriorFlow::Discrete(FlowStack::new(store, "G", &cfg, rng)?)
            }
            PriorKind::Cnf => {
                let hidden: Vec<usize> = FlowConfig::REFERENCE_HIDDEN
                    .iter()
                    .map(|&w| scaled_width(w, hp.width_factor))
                    .collect();
                let field = ConcatSquashField::new(store, "G", d, &hidden, rng);
                PriorFlow::Cnf(CnfBackend::new(field, hp.cnf_steps, hp.trace)?)
            }
        };
        let cfg = FlowConfig::new(hp.dim, hp.charts + d, hp.flow_blocks, hp.width_factor);
        let flow = FlowStack::new(store, "F", &cfg, rng)?;
        let predictor = PredictorNet::new(store, "C", hp.dim, d, hp.charts, hp.width_factor, rng)?;
        let generator = GeneratorHead::new(store, "K", d, hp.charts, hp.width_factor, rng)?;
        Ok(Self {
            encoder,
            prior,
            flow,
            predictor,
            generator,
            dim: hp.dim,
            charts: hp.charts,
            feature_dim: d,
            tau: hp.tau,
            mu: hp.mu,
            lambda: hp.lambda,
        })
    }

    fn repeat_index(clouds: usize, points: usize) -> Vec<usize> {
        (0..clouds).flat_map(|c| std::iter::repeat_n(c, points)).collect()
    }

    fn check_batch(&self, t: &Tape, x: Var, clouds: usize, points: usize) -> Result<()> {
        if clouds == 0 || points == 0 {
            return Err(Error::Empty("cloud batch"));
        }
        let s = t.shape(x);
        if s.len() != 2 || s[1] != self.dim || s[0] != clouds * points {
            return Err(Error::Shape {
                op: "cloud batch",
                lhs: s.to_vec(),
                rhs: vec![clouds * points, self.dim],
            });
        }
        Ok(())
    }

    /// Fresh noise for a batch.
    pub fn draw_noise(&self, clouds: usize, points: usize, rng: &mut Rng) -> FullNoise {
        FullNoise {
            eta: rng.normal_tensor(&[clouds, self.feature_dim]),
            gumbel: rng.gumbel_tensor(&[clouds * points, self.charts]),
        }
    }

    /// `log N(s; mean, exp(logvar))` summed over feature dims, `[B, 1]`.
    pub fn log_posterior(t: &mut Tape, s: Var, post: Posterior) -> Result<Var> {
        let diff = t.sub(s, post.mean)?;
        let sq = t.square(diff);
        let neg = t.neg(post.logvar);
        let inv_var = t.exp(neg);
        let a = t.mul(sq, inv_var)?;
        let a = t.add(a, post.logvar)?;
        let a = t.add_scalar(a, LN_2PI);
        let a = t.sum_axis(a, 1)?;
        Ok(t.scale(a, -0.5))
    }

    pub fn terms_with_noise(
        &self,
        t: &mut Tape,
        x: Var,
        clouds: usize,
        points: usize,
        noise: &FullNoise,
        rng: &mut Rng,
    ) -> Result<FullTerms> {
        self.check_batch(t, x, clouds, points)?;
        let posterior = self.encoder.forward(t, x, clouds, points)?;
        let eta = t.constant(noise.eta.clone());
        let half = t.scale(posterior.logvar, 0.5);
        let std = t.exp(half);
        let e = t.mul(std, eta)?;
        let features = t.add(posterior.mean, e)?;
        let log_q = Self::log_posterior(t, features, posterior)?;
        let log_prior = self.prior.log_density(t, features, rng)?;

        let rep = t.gather_rows(features, &Self::repeat_index(clouds, points))?;
        let logits = self.predictor.logits(t, x, rep)?;
        let labels = gumbel_softmax_with_noise(t, logits, &noise.gumbel, self.tau)?;
        let cond = t.concat(&[labels, rep], 1)?;
        let log_likelihood = self.flow.log_likelihood(t, x, cond)?;
        let entropy = entropy_from_logits(t, logits)?;
        Ok(FullTerms {
            clouds,
            points,
            posterior,
            features,
            log_q,
            log_prior,
            log_likelihood,
            entropy,
            cross_entropy: (self.charts as f64).ln(),
            logits,
            labels,
        })
    }

    pub fn terms(&self, t: &mut Tape, x: Var, clouds: usize, points: usize, rng: &mut Rng) -> Result<FullTerms> {
        let noise = self.draw_noise(clouds, points, rng);
        self.terms_with_noise(t, x, clouds, points, &noise, rng)
    }

    /// Single-sample KL estimate `log q_E(s|X) − log p_G(s)`, `[clouds, 1]`.
    pub fn kl(&self, t: &mut Tape, terms: &FullTerms) -> Result<Var> {
        t.sub(terms.log_q, terms.log_prior)
    }

    /// Approximated ELBO per cloud, `[clouds, 1]`.
    pub fn elbo_from_terms(&self, t: &mut Tape, terms: &FullTerms) -> Result<Var> {
        let per_point = t.add(terms.log_likelihood, terms.entropy)?;
        let per_point = t.add_scalar(per_point, -terms.cross_entropy);
        let per_point = t.reshape(per_point, &[terms.clouds, terms.points])?;
        let sum = t.sum_axis(per_point, 1)?;
        let kl = self.kl(t, terms)?;
        t.sub(sum, kl)
    }

    pub fn elbo(&self, t: &mut Tape, x: Var, clouds: usize, points: usize, rng: &mut Rng) -> Result<Var> {
        let terms = self.terms(t, x, clouds, points, rng)?;
        self.elbo_from_terms(t, &terms)
    }

    /// `−Σ_X [ELBO + Σ_j {μ H[q̄_X] − λ H[q_C(y_j|x_j, s)]}]`.
    pub fn loss_from_terms(&self, t: &mut Tape, terms: &FullTerms) -> Result<Var> {
        let elbo = self.elbo_from_terms(t, terms)?;
        let elbo = t.sum(elbo);
        let mi = mi_regularizer_tape(t, terms.logits, terms.clouds, terms.points, self.mu, self.lambda)?;
        let obj = t.add(elbo, mi)?;
        Ok(t.neg(obj))
    }

    /// `Σ_X D_KL(p_K(y | s) ‖ q̄_X)` with `s` and `q̄` held constant.
    pub fn chart_generator_loss(&self, t: &mut Tape, terms: &FullTerms) -> Result<Var> {
        let q = cloud_marginals(t, terms.logits, terms.clouds, terms.points)?;
        let target = t.value(q).clone();
        let s = t.detach(terms.features);
        let logits = self.generator.logits(t, s)?;
        chart_generator_kl(t, logits, &target)
    }

    /// Main loss plus chart-generator loss with weight 1. Returns the sum
    /// and the main part.
    pub fn training_loss(
        &self,
        t: &mut Tape,
        x: Var,
        clouds: usize,
        points: usize,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let terms = self.terms(t, x, clouds, points, rng)?;
        let main = self.loss_from_terms(t, &terms)?;
        let gen = self.chart_generator_loss(t, &terms)?;
        Ok((t.add(main, gen)?, main))
    }

    /// Posterior mean of the features of one cloud `[M, d]`, evaluation mode.
    pub fn encode_mean(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.dim {
            return Err(Error::SizeMismatch {
                what: "point dimension",
                left: x.cols(),
                right: self.dim,
            });
        }
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone());
        let post = self.encoder.forward(&mut t, xv, 1, x.rows())?;
        Ok(t.value(post.mean).data().to_vec())
    }

    /// `s = G(w)` for `w ~ N(0, I)`.
    pub fn sample_features(&self, store: &ParamStore, rng: &mut Rng) -> Result<Vec<f64>> {
        let w = rng.normal_tensor(&[1, self.feature_dim]);
        let mut t = Tape::new(store);
        let wv = t.constant(w);
        let s = self.prior.sample(&mut t, wv)?;
        t.ensure_finite(s, "prior sample")?;
        Ok(t.value(s).data().to_vec())
    }

    /// Chart distribution `p_K(y | s)`.
    pub fn chart_distribution(&self, store: &ParamStore, s: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new(store);
        let sv = t.constant(Tensor::new(vec![1, self.feature_dim], s.to_vec())?);
        let l = self.generator.logits(&mut t, sv)?;
        let p = t.softmax(l);
        Ok(t.value(p).data().to_vec())
    }

    /// Points for a given feature vector: `y_j ~ p_K(y | s)` as hard labels,
    /// `z_j ~ N(0, I)`, `x_j = F(z_j; y_j, s)`.
    pub fn decode(&self, store: &ParamStore, s: &[f64], m: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        if m == 0 {
            return Err(Error::Empty("requested point count"));
        }
        let probs = self.chart_distribution(store, s)?;
        let labels: Vec<usize> = (0..m).map(|_| rng.categorical(&probs)).collect();
        let z = rng.normal_tensor(&[m, self.dim]);
        let width = self.charts + self.feature_dim;
        let mut out = Vec::with_capacity(m * self.dim);
        for start in (0..m).step_by(GENERATION_CHUNK) {
            let end = (start + GENERATION_CHUNK).min(m);
            let rows = end - start;
            let zc = Tensor::new(vec![rows, self.dim], z.data()[start * self.dim..end * self.dim].to_vec())?;
            let mut cond = Tensor::zeros(&[rows, width]);
            for (r, &k) in labels[start..end].iter().enumerate() {
                let row = &mut cond.data_mut()[r * width..(r + 1) * width];
                row[k] = 1.0;
                row[self.charts..].copy_from_slice(s);
            }
            let mut t = Tape::new(store);
            let zv = t.constant(zc);
            let cv = t.constant(cond);
            let (x, _) = self.flow.forward(&mut t, zv, cv)?;
            t.ensure_finite(x, "generated points")?;
            out.extend_from_slice(t.value(x).data());
        }
        Ok((Tensor::new(vec![m, self.dim], out)?, labels))
    }

    /// A new cloud of `m` points from the prior.
    pub fn generate(&self, store: &ParamStore, m: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        let s = self.sample_features(store, rng)?;
        self.decode(store, &s, m, rng)
    }

    /// Reconstruction (`m_out = |X|`) or super-resolution (`m_out > |X|`)
    /// from the posterior mean of the features.
    pub fn reconstruct(
        &self,
        store: &ParamStore,
        x: &Tensor,
        m_out: usize,
        rng: &mut Rng,
    ) -> Result<(Tensor, Vec<usize>)> {
        let s = self.encode_mean(store, x)?;
        self.decode(store, &s, m_out, rng)
    }

    /// Chart posteriors `q_C(y | x, s)` with `s` the posterior mean.
    pub fn posteriors(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let s = self.encode_mean(store, x)?;
        let m = x.rows();
        let rep = Tensor::from_rows(&vec![s; m])?;
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone());
        let sv = t.constant(rep);
        let l = self.predictor.logits(&mut t, xv, sv)?;
        let p = t.softmax(l);
        Ok(t.value(p).clone())
    }

    /// Data-dependent actnorm initialization of `F` and a discrete `G` from
    /// one batch, using training-mode encoder statistics.
    pub fn actnorm_init(&self, store: &mut ParamStore, x: &Tensor, clouds: usize, points: usize) -> Result<()> {
        let means = {
            let mut t = Tape::training(store);
            let xv = t.constant(x.clone());
            self.check_batch(&t, xv, clouds, points)?;
            let post = self.encoder.forward(&mut t, xv, clouds, points)?;
            t.value(post.mean).clone()
        };
        if let PriorFlow::Discrete(g) = &self.prior {
            g.actnorm_init(store, &means, &Tensor::ones(&[clouds, 1]))?;
        }
        let width = self.charts + self.feature_dim;
        let mut cond = Tensor::zeros(&[clouds * points, width]);
        for c in 0..clouds {
            for j in 0..points {
                let row = &mut cond.data_mut()[(c * points + j) * width..(c * points + j + 1) * width];
                row[..self.charts].fill(1.0 / self.charts as f64);
                row[self.charts..].copy_from_slice(means.row(c));
            }
        }
        self.flow.actnorm_init(store, x, &cond)
    }

    /// Plain log-density of the standard-normal prior on features.
    pub fn base_logpdf(t: &mut Tape, w: Var) -> Result<Var> {
        standard_normal_logpdf(t, w)
    }
}

//! Network building blocks: concatsquash layers, the set encoder, the chart
//! predictor and the chart generator head.

use crate::autodiff::{ParamId, ParamStore, StatUpdate, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Bounds applied to the encoder log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Scale a reference width, never below one unit.
pub fn scaled_width(width: usize, factor: f64) -> usize {
    ((width as f64 * factor).round() as usize).max(1)
}

fn uniform_init(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn check_cols(t: &Tape, v: Var, cols: usize, op: &'static str) -> Result<()> {
    let s = t.shape(v);
    if s.len() != 2 || s[1] != cols {
        return Err(Error::Shape {
            op,
            lhs: s.to_vec(),
            rhs: vec![cols],
        });
    }
    Ok(())
}

/// Fully connected layer `x W + b`, with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), uniform_init(rng, &[in_dim, out_dim], in_dim));
        let b = store.add(format!("{name}.b"), uniform_init(rng, &[out_dim], in_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        check_cols(t, x, self.in_dim, "linear")?;
        let w = t.param(self.w);
        let b = t.param(self.b);
        let h = t.matmul(x, w)?;
        t.add(h, b)
    }
}

/// Gated affine layer
/// `CS(χ, ξ) = (W_χ χ + b_χ) ⊙ σ(W_ξ ξ + b_ξ) + W_b ξ + b_b`.
///
/// `in_dim` may be zero, in which case the input path reduces to `b_χ`.
#[derive(Clone, Debug)]
pub struct ConcatSquash {
    pub w_chi: Option<ParamId>,
    pub b_chi: ParamId,
    pub w_xi: ParamId,
    pub b_xi: ParamId,
    pub w_b: ParamId,
    pub b_b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub cond_dim: usize,
}

impl ConcatSquash {
    /// Random initialization. With `zero_output` the input and bias paths
    /// start at zero so the layer initially outputs exactly zero, while the
    /// gate stays random.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        cond_dim: usize,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut init = |shape: &[usize], fan_in: usize, zero: bool| {
            if zero {
                Tensor::zeros(shape)
            } else {
                uniform_init(rng, shape, fan_in)
            }
        };
        let w_chi = (in_dim > 0).then(|| init(&[in_dim, out_dim], in_dim, zero_output));
        let b_chi = init(&[out_dim], in_dim.max(1), zero_output);
        let w_xi = init(&[cond_dim, out_dim], cond_dim, false);
        let b_xi = init(&[out_dim], cond_dim, false);
        let w_b = init(&[cond_dim, out_dim], cond_dim, zero_output);
        let b_b = init(&[out_dim], cond_dim, zero_output);
        Self {
            w_chi: w_chi.map(|w| store.add(format!("{name}.w_chi"), w)),
            b_chi: store.add(format!("{name}.b_chi"), b_chi),
            w_xi: store.add(format!("{name}.w_xi"), w_xi),
            b_xi: store.add(format!("{name}.b_xi"), b_xi),
            w_b: store.add(format!("{name}.w_b"), w_b),
            b_b: store.add(format!("{name}.b_b"), b_b),
            in_dim,
            out_dim,
            cond_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.w_chi.into_iter().collect();
        v.extend([self.b_chi, self.w_xi, self.b_xi, self.w_b, self.b_b]);
        v
    }

    pub fn forward(&self, t: &mut Tape, chi: Option<Var>, xi: Var) -> Result<Var> {
        check_cols(t, xi, self.cond_dim, "concatsquash condition")?;
        let rows = t.shape(xi)[0];
        let b_chi = t.param(self.b_chi);
        let input = match (chi, self.w_chi) {
            (Some(chi), Some(w)) => {
                check_cols(t, chi, self.in_dim, "concatsquash input")?;
                if t.shape(chi)[0] != rows {
                    return Err(Error::Shape {
                        op: "concatsquash rows",
                        lhs: t.shape(chi).to_vec(),
                        rhs: t.shape(xi).to_vec(),
                    });
                }
                let w = t.param(w);
                let h = t.matmul(chi, w)?;
                t.add(h, b_chi)?
            }
            (None, None) => b_chi,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "concatsquash with in_dim {} given {} input",
                    self.in_dim,
                    if chi.is_some() { "an" } else { "no" }
                )))
            }
        };
        let w_xi = t.param(self.w_xi);
        let b_xi = t.param(self.b_xi);
        let gate = t.matmul(xi, w_xi)?;
        let gate = t.add(gate, b_xi)?;
        let gate = t.sigmoid(gate);
        let w_b = t.param(self.w_b);
        let b_b = t.param(self.b_b);
        let bias = t.matmul(xi, w_b)?;
        let bias = t.add(bias, b_b)?;
        let out = t.mul(input, gate)?;
        t.add(out, bias)
    }
}

impl ConcatSquash {
    /// Forward pass together with the directional derivatives of the
    /// output along each input tangent. The gate and bias paths depend only
    /// on the condition, so a tangent `v` maps to `(v W_χ) ⊙ gate`.
    pub fn forward_with_tangents(
        &self,
        t: &mut Tape,
        chi: Var,
        xi: Var,
        tangents: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let w = self.w_chi.ok_or_else(|| {
            Error::InvalidArgument("tangents need a concatsquash layer with an input path".into())
        })?;
        check_cols(t, chi, self.in_dim, "concatsquash input")?;
        check_cols(t, xi, self.cond_dim, "concatsquash condition")?;
        let w = t.param(w);
        let b_chi = t.param(self.b_chi);
        let w_xi = t.param(self.w_xi);
        let b_xi = t.param(self.b_xi);
        let w_b = t.param(self.w_b);
        let b_b = t.param(self.b_b);
        let h = t.matmul(chi, w)?;
        let h = t.add(h, b_chi)?;
        let gate = t.matmul(xi, w_xi)?;
        let gate = t.add(gate, b_xi)?;
        let gate = t.sigmoid(gate);
        let bias = t.matmul(xi, w_b)?;
        let bias = t.add(bias, b_b)?;
        let out = t.mul(h, gate)?;
        let out = t.add(out, bias)?;
        let mut dots = Vec::with_capacity(tangents.len());
        for &v in tangents {
            let dv = t.matmul(v, w)?;
            dots.push(t.mul(dv, gate)?);
        }
        Ok((out, dots))
    }
}

/// Per-feature normalization using batch statistics in training mode and
/// running statistics (momentum 0.9) in evaluation mode.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl Norm {
    pub const MOMENTUM: f64 = 0.9;
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::zeros(&[dim])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::ones(&[dim])),
            dim,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        check_cols(t, x, self.dim, "norm")?;
        let xhat = if t.is_training() {
            let mean = t.mean_axis(x, 0)?;
            let centered = t.sub(x, mean)?;
            let sq = t.square(centered);
            let var = t.mean_axis(sq, 0)?;
            t.push_stat_update(StatUpdate {
                buffer: self.running_mean,
                batch: t.value(mean).data().to_vec(),
                momentum: Self::MOMENTUM,
            });
            t.push_stat_update(StatUpdate {
                buffer: self.running_var,
                batch: t.value(var).data().to_vec(),
                momentum: Self::MOMENTUM,
            });
            let var = t.add_scalar(var, Self::EPS);
            let inv = t.powf(var, -0.5);
            t.mul(centered, inv)?
        } else {
            let store = t.store();
            let mean = store.get(self.running_mean).clone();
            let inv = store.get(self.running_var).map(|v| 1.0 / (v + Self::EPS).sqrt());
            let mean = t.constant(mean);
            let inv = t.constant(inv);
            let centered = t.sub(x, mean)?;
            t.mul(centered, inv)?
        };
        let gamma = t.param(self.gamma);
        let beta = t.param(self.beta);
        let y = t.mul(xhat, gamma)?;
        t.add(y, beta)
    }
}

/// Widths of the set encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWidths {
    pub point: Vec<usize>,
    pub head: Vec<usize>,
}

impl EncoderWidths {
    pub fn reference() -> Self {
        Self {
            point: vec![128, 128, 256, 512],
            head: vec![256, 128],
        }
    }

    pub fn scaled(factor: f64) -> Self {
        let r = Self::reference();
        Self {
            point: r.point.iter().map(|&w| scaled_width(w, factor)).collect(),
            head: r.head.iter().map(|&w| scaled_width(w, factor)).collect(),
        }
    }
}

/// Permutation-invariant encoder: a per-point MLP, max-pooling over the
/// points of each cloud, and a head emitting the mean and log-variance of
/// the feature posterior.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    point_layers: Vec<(Linear, Norm)>,
    head_layers: Vec<(Linear, Norm)>,
    mean: Linear,
    logvar: Linear,
    pub input_dim: usize,
    pub feature_dim: usize,
}

/// Output of [`EncoderNet::forward`]: per-cloud posterior parameters.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mean: Var,
    pub logvar: Var,
}

impl EncoderNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        feature_dim: usize,
        widths: &EncoderWidths,
        rng: &mut Rng,
    ) -> Self {
        let mut prev = input_dim;
        let mut point_layers = Vec::new();
        for (i, &w) in widths.point.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.point{i}"), prev, w, rng);
            let norm = Norm::new(store, &format!("{name}.point{i}.norm"), w);
            point_layers.push((lin, norm));
            prev = w;
        }
        let mut head_layers = Vec::new();
        for (i, &w) in widths.head.iter().enumerate() {
            let lin = Linear::new(store, &format!("{name}.head{i}"), prev, w, rng);
            let norm = Norm::new(store, &format!("{name}.head{i}.norm"), w);
            head_layers.push((lin, norm));
            prev = w;
        }
        let mean = Linear::new(store, &format!("{name}.mean"), prev, feature_dim, rng);
        let logvar = Linear::new(store, &format!("{name}.logvar"), prev, feature_dim, rng);
        Self {
            point_layers,
            head_layers,
            mean,
            logvar,
            input_dim,
            feature_dim,
        }
    }

    /// Encode `clouds` clouds of `points` points each, stacked row-wise in
    /// `x` (`[clouds * points, d]`).
    pub fn forward(&self, t: &mut Tape, x: Var, clouds: usize, points: usize) -> Result<Posterior> {
        check_cols(t, x, self.input_dim, "encoder input")?;
        if clouds == 0 || points == 0 {
            return Err(Error::Empty("encoder input cloud"));
        }
        if t.shape(x)[0] != clouds * points {
            return Err(Error::SizeMismatch {
                what: "encoder rows",
                left: t.shape(x)[0],
                right: clouds * points,
            });
        }
        let mut h = x;
        for (lin, norm) in &self.point_layers {
            h = lin.forward(t, h)?;
            h = norm.forward(t, h)?;
            h = t.relu(h);
        }
        let c = t.shape(h)[1];
        let h3 = t.reshape(h, &[clouds, points, c])?;
        let pooled = t.max_axis(h3, 1)?;
        let mut h = t.reshape(pooled, &[clouds, c])?;
        for (lin, norm) in &self.head_layers {
            h = lin.forward(t, h)?;
            h = norm.forward(t, h)?;
            h = t.relu(h);
        }
        let mean = self.mean.forward(t, h)?;
        let logvar = self.logvar.forward(t, h)?;
        let logvar = t.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        Ok(Posterior { mean, logvar })
    }

    /// Reparameterized draw `s = mean + exp(logvar / 2) * eta`.
    pub fn sample(&self, t: &mut Tape, post: Posterior, rng: &mut Rng) -> Result<Var> {
        let shape = t.shape(post.mean).to_vec();
        let eta = t.constant(rng.normal_tensor(&shape));
        let half = t.scale(post.logvar, 0.5);
        let std = t.exp(half);
        let noise = t.mul(std, eta)?;
        t.add(post.mean, noise)
    }

    pub fn encode(
        &self,
        t: &mut Tape,
        x: Var,
        clouds: usize,
        points: usize,
        rng: &mut Rng,
    ) -> Result<(Var, Posterior)> {
        let post = self.forward(t, x, clouds, points)?;
        let s = self.sample(t, post, rng)?;
        Ok((s, post))
    }
}

/// Stack of three concatsquash layers (`H`-`H`-`out`) with tanh between.
#[derive(Clone, Debug)]
pub struct ConcatSquashNet {
    pub layers: Vec<ConcatSquash>,
}

impl ConcatSquashNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        cond_dim: usize,
        zero_output: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(ConcatSquash::new(store, &format!("{name}.cs{i}"), prev, h, cond_dim, false, rng));
            prev = h;
        }
        layers.push(ConcatSquash::new(
            store,
            &format!("{name}.cs{}", hidden.len()),
            prev,
            out_dim,
            cond_dim,
            zero_output,
            rng,
        ));
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, chi: Option<Var>, xi: Var) -> Result<Var> {
        let mut h = chi;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(t, h, xi)?;
            h = Some(if i < last { t.tanh(out) } else { out });
        }
        Ok(h.expect("at least one layer"))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Forward pass with forward-mode tangents propagated alongside.
    pub fn forward_with_tangents(
        &self,
        t: &mut Tape,
        chi: Var,
        xi: Var,
        tangents: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = chi;
        let mut tan = tangents.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, dots) = layer.forward_with_tangents(t, h, xi, &tan)?;
            if i < last {
                let y = t.tanh(out);
                let y2 = t.square(y);
                let neg = t.neg(y2);
                let dtanh = t.add_scalar(neg, 1.0);
                tan = dots
                    .into_iter()
                    .map(|d| t.mul(d, dtanh))
                    .collect::<Result<_>>()?;
                h = y;
            } else {
                h = out;
                tan = dots;
            }
        }
        Ok((h, tan))
    }
}

/// Chart predictor `q_C(y | x, ξ)`: per-point logits over `n` charts.
#[derive(Clone, Debug)]
pub struct PredictorNet {
    pub net: ConcatSquashNet,
    pub charts: usize,
    pub cond_dim: usize,
}

impl PredictorNet {
    pub const REFERENCE_WIDTHS: [usize; 2] = [256, 256];

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        point_dim: usize,
        cond_dim: usize,
        charts: usize,
        width_factor: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if charts < 1 {
            return Err(Error::InvalidArgument("chart count must be at least 1".into()));
        }
        let hidden: Vec<usize> = Self::REFERENCE_WIDTHS
            .iter()
            .map(|&w| scaled_width(w, width_factor))
            .collect();
        let net = ConcatSquashNet::new(store, name, point_dim, &hidden, charts, cond_dim, false, rng);
        Ok(Self {
            net,
            charts,
            cond_dim,
        })
    }

    pub fn logits(&self, t: &mut Tape, x: Var, cond: Var) -> Result<Var> {
        self.net.forward(t, Some(x), cond)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }
}

/// Chart generator head `p_K(y | s_X)`: per-cloud logits over `n` charts.
#[derive(Clone, Debug)]
pub struct GeneratorHead {
    layers: Vec<Linear>,
    pub charts: usize,
}

impl GeneratorHead {
    pub const REFERENCE_WIDTHS: [usize; 4] = [256, 512, 256, 128];

    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        charts: usize,
        width_factor: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if charts < 1 {
            return Err(Error::InvalidArgument("chart count must be at least 1".into()));
        }
        let mut layers = Vec::new();
        let mut prev = feature_dim;
        for (i, &w) in Self::REFERENCE_WIDTHS.iter().enumerate() {
            let w = scaled_width(w, width_factor);
            layers.push(Linear::new(store, &format!("{name}.fc{i}"), prev, w, rng));
            prev = w;
        }
        layers.push(Linear::new(store, &format!("{name}.fc4"), prev, charts, rng));
        Ok(Self { layers, charts })
    }

    pub fn logits(&self, t: &mut Tape, s: Var) -> Result<Var> {
        let mut h = s;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, h)?;
            if i < last {
                h = t.relu(h);
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, sigmoid};

    fn zero_all(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn concatsquash_all_zero_outputs_zero() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let cs = ConcatSquash::new(&mut store, "cs", 3, 4, 2, false, &mut rng);
        zero_all(&mut store, &cs.params());
        let mut t = Tape::new(&store);
        let x = t.constant(rng.normal_tensor(&[5, 3]));
        let c = t.constant(rng.normal_tensor(&[5, 2]));
        let y = cs.forward(&mut t, Some(x), c).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concatsquash_zero_gate_halves_input_path() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let cs = ConcatSquash::new(&mut store, "cs", 2, 3, 2, false, &mut rng);
        zero_all(&mut store, &[cs.w_xi, cs.b_xi]);
        let chi = rng.normal_tensor(&[4, 2]);
        let xi = rng.normal_tensor(&[4, 2]);
        let mut t = Tape::new(&store);
        let cv = t.constant(chi.clone());
        let xv = t.constant(xi.clone());
        let y = cs.forward(&mut t, Some(cv), xv).unwrap();
        let (wc, bc) = (store.get(cs.w_chi.unwrap()), store.get(cs.b_chi));
        let (wb, bb) = (store.get(cs.w_b), store.get(cs.b_b));
        for r in 0..4 {
            for o in 0..3 {
                let inp: f64 = (0..2).map(|k| chi.at(r, k) * wc.at(k, o)).sum::<f64>() + bc.data()[o];
                let bias: f64 = (0..2).map(|k| xi.at(r, k) * wb.at(k, o)).sum::<f64>() + bb.data()[o];
                let want = 0.5 * inp + bias;
                assert!((t.value(y).at(r, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concatsquash_matches_straight_line_oracle() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let cs = ConcatSquash::new(&mut store, "cs", 2, 4, 3, false, &mut rng);
        let chi = rng.normal_tensor(&[6, 2]);
        let xi = rng.normal_tensor(&[6, 3]);
        let mut t = Tape::new(&store);
        let cv = t.constant(chi.clone());
        let xv = t.constant(xi.clone());
        let y = cs.forward(&mut t, Some(cv), xv).unwrap();
        let g = |id| store.get(id);
        for r in 0..6 {
            for o in 0..4 {
                let mut a = g(cs.b_chi).data()[o];
                for k in 0..2 {
                    a += chi.at(r, k) * g(cs.w_chi.unwrap()).at(k, o);
                }
                let mut gate = g(cs.b_xi).data()[o];
                let mut bias = g(cs.b_b).data()[o];
                for k in 0..3 {
                    gate += xi.at(r, k) * g(cs.w_xi).at(k, o);
                    bias += xi.at(r, k) * g(cs.w_b).at(k, o);
                }
                let want = a * sigmoid(gate) + bias;
                assert!((t.value(y).at(r, o) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concatsquash_rejects_dim_mismatch() {
        let mut rng = Rng::new(4);
        let mut store = ParamStore::new();
        let cs = ConcatSquash::new(&mut store, "cs", 2, 4, 3, false, &mut rng);
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::zeros(&[5, 3]));
        let c = t.constant(Tensor::zeros(&[5, 3]));
        assert!(cs.forward(&mut t, Some(x), c).is_err());
        let x = t.constant(Tensor::zeros(&[4, 2]));
        assert!(cs.forward(&mut t, Some(x), c).is_err());
    }

    #[test]
    fn concatsquash_gradients() {
        let mut rng = Rng::new(5);
        let mut store = ParamStore::new();
        let a = ConcatSquash::new(&mut store, "a", 2, 4, 3, false, &mut rng);
        let b = ConcatSquash::new(&mut store, "b", 4, 2, 3, false, &mut rng);
        let chi = rng.normal_tensor(&[5, 2]);
        let xi = rng.normal_tensor(&[5, 3]);
        let mut ids = a.params();
        ids.extend(b.params());
        let err = grad_check_params(&store, &ids, 1e-5, |t| {
            let c = t.constant(chi.clone());
            let x = t.constant(xi.clone());
            let h = a.forward(t, Some(c), x)?;
            let h = t.tanh(h);
            let y = b.forward(t, Some(h), x)?;
            let y = t.square(y);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn small_encoder(store: &mut ParamStore, rng: &mut Rng) -> EncoderNet {
        let widths = EncoderWidths {
            point: vec![8, 8, 12],
            head: vec![8, 6],
        };
        EncoderNet::new(store, "enc", 2, 3, &widths, rng)
    }

    #[test]
    fn encoder_is_permutation_invariant_in_eval_mode() {
        let mut rng = Rng::new(6);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        for _ in 0..100 {
            let x = rng.normal_tensor(&[16, 2]);
            let base = {
                let mut t = Tape::new(&store);
                let xv = t.constant(x.clone());
                let p = enc.forward(&mut t, xv, 1, 16).unwrap();
                (t.value(p.mean).clone(), t.value(p.logvar).clone())
            };
            for _ in 0..10 {
                let mut perm: Vec<usize> = (0..16).collect();
                rng.shuffle(&mut perm);
                let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
                let xp = Tensor::from_rows(&rows).unwrap();
                let mut t = Tape::new(&store);
                let xv = t.constant(xp);
                let p = enc.forward(&mut t, xv, 1, 16).unwrap();
                assert_eq!(t.value(p.mean).data(), base.0.data());
                assert_eq!(t.value(p.logvar).data(), base.1.data());
            }
        }
    }

    #[test]
    fn encoder_clamped_logvar_gives_mean() {
        let mut rng = Rng::new(7);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        // force the log-variance head far below the clamp
        zero_all(&mut store, &[enc.logvar.w]);
        store.set(enc.logvar.b, Tensor::full(&[3], -1e6)).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(rng.normal_tensor(&[10, 2]));
        let (s, post) = enc.encode(&mut t, x, 1, 10, &mut rng).unwrap();
        assert!(t.value(post.logvar).data().iter().all(|&v| v == LOGVAR_MIN));
        let scale = (LOGVAR_MIN / 2.0).exp();
        let diff = t.value(s).max_abs_diff(t.value(post.mean));
        assert!(diff < 10.0 * scale, "{diff}");
    }

    #[test]
    fn encoder_distinguishes_clouds_and_rejects_empty() {
        let mut rng = Rng::new(8);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        let mut t = Tape::new(&store);
        let a = t.constant(rng.normal_tensor(&[12, 2]));
        let b = t.constant(rng.normal_tensor(&[12, 2]).map(|v| v * 3.0 + 1.0));
        let pa = enc.forward(&mut t, a, 1, 12).unwrap();
        let pb = enc.forward(&mut t, b, 1, 12).unwrap();
        assert!(t.value(pa.mean).max_abs_diff(t.value(pb.mean)) > 1e-6);
        assert!(enc.forward(&mut t, a, 0, 12).is_err());
    }

    #[test]
    fn encoder_training_mode_records_running_stats() {
        let mut rng = Rng::new(9);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        let x = rng.normal_tensor(&[2 * 12, 2]);
        let mut t = Tape::training(&store);
        let xv = t.constant(x);
        let _ = enc.forward(&mut t, xv, 2, 12).unwrap();
        // three point layers and two head layers, mean and variance each
        assert_eq!(t.take_stat_updates().len(), 10);
    }

    #[test]
    fn encoder_gradients() {
        let mut rng = Rng::new(10);
        let mut store = ParamStore::new();
        let enc = small_encoder(&mut store, &mut rng);
        let x = rng.normal_tensor(&[2 * 6, 2]);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        let err = grad_check_params(&store, &ids, 1e-5, |t| {
            let xv = t.constant(x.clone());
            let p = enc.forward(t, xv, 2, 6)?;
            let a = t.square(p.mean);
            let b = t.tanh(p.logvar);
            let a = t.sum(a);
            let b = t.sum(b);
            t.add(a, b)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn predictor_zero_net_is_uniform_and_one_chart_is_certain() {
        let mut rng = Rng::new(11);
        let mut store = ParamStore::new();
        let p = PredictorNet::new(&mut store, "c", 2, 1, 4, 0.05, &mut rng).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        zero_all(&mut store, &ids);
        let mut t = Tape::new(&store);
        let x = t.constant(rng.normal_tensor(&[7, 2]));
        let c = t.constant(Tensor::ones(&[7, 1]));
        let l = p.logits(&mut t, x, c).unwrap();
        let pr = t.softmax(l);
        assert!(t.value(pr).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut store = ParamStore::new();
        let p1 = PredictorNet::new(&mut store, "c", 2, 1, 1, 0.05, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(rng.normal_tensor(&[7, 2]));
        let c = t.constant(Tensor::ones(&[7, 1]));
        let l = p1.logits(&mut t, x, c).unwrap();
        let pr = t.softmax(l);
        assert!(t.value(pr).data().iter().all(|&v| v == 1.0));

        assert!(PredictorNet::new(&mut ParamStore::new(), "c", 2, 1, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn heads_produce_distributions() {
        let mut rng = Rng::new(12);
        let mut store = ParamStore::new();
        let p = PredictorNet::new(&mut store, "c", 3, 4, 6, 0.1, &mut rng).unwrap();
        let k = GeneratorHead::new(&mut store, "k", 4, 6, 0.05, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(rng.normal_tensor(&[9, 3]));
        let s = t.constant(rng.normal_tensor(&[9, 4]));
        let lp = p.logits(&mut t, x, s).unwrap();
        let lk = k.logits(&mut t, s).unwrap();
        for l in [lp, lk] {
            let pr = t.softmax(l);
            for row in t.value(pr).data().chunks(6) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_zero_weights_uniform_and_single_chart() {
        let mut rng = Rng::new(13);
        let mut store = ParamStore::new();
        let k = GeneratorHead::new(&mut store, "k", 4, 5, 0.05, &mut rng).unwrap();
        let ids: Vec<ParamId> = store.ids().collect();
        zero_all(&mut store, &ids);
        let mut t = Tape::new(&store);
        let s = t.constant(rng.normal_tensor(&[2, 4]));
        let l = k.logits(&mut t, s).unwrap();
        let pr = t.softmax(l);
        assert!(t.value(pr).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let mut store = ParamStore::new();
        let k1 = GeneratorHead::new(&mut store, "k", 4, 1, 0.05, &mut rng).unwrap();
        let mut t = Tape::new(&store);
        let s = t.constant(rng.normal_tensor(&[3, 4]));
        let l = k1.logits(&mut t, s).unwrap();
        let pr = t.softmax(l);
        assert!(t.value(pr).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn head_gradients() {
        let mut rng = Rng::new(14);
        let mut store = ParamStore::new();
        let p = PredictorNet::new(&mut store, "c", 2, 3, 4, 0.03, &mut rng).unwrap();
        let k = GeneratorHead::new(&mut store, "k", 3, 4, 0.03, &mut rng).unwrap();
        let x = rng.normal_tensor(&[5, 2]);
        let s = rng.normal_tensor(&[5, 3]);
        let ids: Vec<ParamId> = store.ids().collect();
        let err = grad_check_params(&store, &ids, 1e-5, |t| {
            let xv = t.constant(x.clone());
            let sv = t.constant(s.clone());
            let a = p.logits(t, xv, sv)?;
            let a = t.log_softmax(a);
            let b = k.logits(t, sv)?;
            let b = t.softmax(b);
            let y = t.mul(a, b)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

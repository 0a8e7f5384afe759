use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{scaled_width, ConcatSquashNet};
use crate::rng::Rng;

/// Bound on the autoregressive log-scale: `ls = S_MAX * tanh(a)`.
pub const S_MAX: f64 = 5.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-row standard-normal log-density, shape `[B, 1]`.
pub fn standard_normal_logpdf(t: &mut Tape, z: Var) -> Result<Var> {
    let d = t.shape(z)[1] as f64;
    let sq = t.square(z);
    let s = t.sum_axis(sq, 1)?;
    let s = t.scale(s, -0.5);
    Ok(t.add_scalar(s, -0.5 * d * LN_2PI))
}

/// Plain-number version of [`standard_normal_logpdf`] for one point.
pub fn standard_normal_logpdf_row(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * LN_2PI
}

/// Per-dimension affine map `x = exp(logs) * h + b` (generative direction).
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub logs: ParamId,
    pub bias: ParamId,
    /// Scalar buffer, 1 once data-dependent initialization has run.
    pub initialized: ParamId,
    pub dim: usize,
}

impl ActNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            logs: store.add(format!("{name}.logs"), Tensor::zeros(&[dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
            initialized: store.buffer(format!("{name}.initialized"), Tensor::scalar(0.0)),
            dim,
        }
    }

    fn forward(&self, t: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let logs = t.param(self.logs);
        let b = t.param(self.bias);
        let s = t.exp(logs);
        let x = t.mul(h, s)?;
        let x = t.add(x, b)?;
        Ok((x, t.sum(logs)))
    }

    fn inverse(&self, t: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let logs = t.param(self.logs);
        let b = t.param(self.bias);
        let neg = t.neg(logs);
        let inv = t.exp(neg);
        let h = t.sub(x, b)?;
        let h = t.mul(h, inv)?;
        Ok((h, t.sum(neg)))
    }

    /// Set scale and bias so that the density-direction output of `x`
    /// has zero mean and unit variance per dimension.
    fn init_from(&self, store: &mut ParamStore, x: &Tensor) -> Result<()> {
        if store.get(self.initialized).item() != 0.0 {
            return Err(Error::AlreadyInitialized("actnorm"));
        }
        let (rows, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / rows as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..rows {
            for k in 0..d {
                var[k] += (x.at(r, k) - mean[k]).powi(2) / rows as f64;
            }
        }
        let logs: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6).ln()).collect();
        store.set(self.logs, Tensor::vector(logs))?;
        store.set(self.bias, Tensor::vector(mean))?;
        store.set(self.initialized, Tensor::scalar(1.0))
    }
}

/// Invertible linear map `x = W h` with `W = P L (U + diag(sign * exp(log_s)))`.
///
/// `P` and `sign` are fixed buffers; `L` is unit lower triangular and `U`
/// strictly upper triangular, enforced by masking the stored matrices.
#[derive(Clone, Debug)]
pub struct InvertibleLinear {
    pub perm: ParamId,
    pub sign: ParamId,
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_s: ParamId,
    pub dim: usize,
}

impl InvertibleLinear {
    /// Initialize at a random rotation.
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        let q = random_orthogonal(dim, rng);
        let (p, l, u) = lu_decompose(&q).expect("orthogonal matrices are nonsingular");
        let mut upper = u.clone();
        let mut sign = vec![0.0; dim];
        let mut log_s = vec![0.0; dim];
        for i in 0..dim {
            let di = u.at(i, i);
            sign[i] = di.signum();
            log_s[i] = di.abs().ln();
            upper.data_mut()[i * dim + i] = 0.0;
        }
        let mut lower = l;
        for i in 0..dim {
            lower.data_mut()[i * dim + i] = 0.0;
        }
        Self {
            perm: store.buffer(format!("{name}.perm"), p),
            sign: store.buffer(format!("{name}.sign"), Tensor::vector(sign)),
            lower: store.add(format!("{name}.lower"), lower),
            upper: store.add(format!("{name}.upper"), upper),
            log_s: store.add(format!("{name}.log_s"), Tensor::vector(log_s)),
            dim,
        }
    }

    /// Assemble `W` on the tape.
    pub fn weight(&self, t: &mut Tape) -> Result<Var> {
        let d = self.dim;
        let mut lmask = Tensor::zeros(&[d, d]);
        let mut umask = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in 0..d {
                if j < i {
                    lmask.data_mut()[i * d + j] = 1.0;
                } else if j > i {
                    umask.data_mut()[i * d + j] = 1.0;
                }
            }
        }
        let eye = t.constant(Tensor::eye(d));
        let lmask = t.constant(lmask);
        let umask = t.constant(umask);
        let p = t.param(self.perm);
        let sign = t.param(self.sign);
        let l = t.param(self.lower);
        let l = t.mul(l, lmask)?;
        let l = t.add(l, eye)?;
        let u = t.param(self.upper);
        let u = t.mul(u, umask)?;
        let log_s = t.param(self.log_s);
        let s = t.exp(log_s);
        let diag = t.mul(s, sign)?;
        let diag = t.mul(eye, diag)?;
        let u = t.add(u, diag)?;
        let lu = t.matmul(l, u)?;
        t.matmul(p, lu)
    }

    fn forward(&self, t: &mut Tape, h: Var) -> Result<(Var, Var)> {
        let w = self.weight(t)?;
        let wt = t.transpose(w)?;
        let x = t.matmul(h, wt)?;
        let log_s = t.param(self.log_s);
        Ok((x, t.sum(log_s)))
    }

    fn inverse(&self, t: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let w = self.weight(t)?;
        let wi = t.inverse(w)?;
        let wit = t.transpose(wi)?;
        let h = t.matmul(x, wit)?;
        let log_s = t.param(self.log_s);
        let ld = t.sum(log_s);
        Ok((h, t.neg(ld)))
    }
}

/// Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Tensor {
    loop {
        let g = rng.normal_tensor(&[d, d]);
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for r in 0..d {
            let mut v = g.row(r).to_vec();
            for prev in &q {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
        if ok {
            return Tensor::from_rows(&q).expect("square");
        }
    }
}

/// `A = P L U` with partial pivoting; `L` unit lower, `U` upper.
fn lu_decompose(a: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n = a.rows();
    let mut u = a.clone();
    let mut l = Tensor::eye(n);
    let mut rows: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| u.at(i, k).abs().total_cmp(&u.at(j, k).abs()))
            .expect("nonempty");
        if u.at(piv, k).abs() < 1e-14 {
            return Err(Error::InvalidArgument("singular matrix in LU".into()));
        }
        if piv != k {
            rows.swap(k, piv);
            for c in 0..n {
                u.data_mut().swap(k * n + c, piv * n + c);
            }
            for c in 0..k {
                l.data_mut().swap(k * n + c, piv * n + c);
            }
        }
        for i in k + 1..n {
            let f = u.at(i, k) / u.at(k, k);
            l.data_mut()[i * n + k] = f;
            for c in k..n {
                let v = u.at(k, c);
                u.data_mut()[i * n + c] -= f * v;
            }
        }
    }
    // rows[k] is the original row now at position k: (Pr A) = L U, A = Prᵀ L U.
    let mut p = Tensor::zeros(&[n, n]);
    for (k, &r) in rows.iter().enumerate() {
        p.data_mut()[r * n + k] = 1.0;
    }
    Ok((p, l, u))
}

/// Conditional affine autoregressive map in fixed coordinate order:
/// `x_i = h_i * exp(ls_i) + t_i` where `(a_i, t_i)` come from a
/// concatsquash network of `h_{<i}` and the condition, and
/// `ls_i = S_MAX * tanh(a_i)`.
#[derive(Clone, Debug)]
pub struct ArAffine {
    pub nets: Vec<ConcatSquashNet>,
    pub dim: usize,
    pub cond_dim: usize,
}

impl ArAffine {
    /// The last layer of every network starts at zero, so the map starts
    /// as the identity.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cond_dim: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let nets = (0..dim)
            .map(|i| ConcatSquashNet::new(store, &format!("{name}.net{i}"), i, hidden, 2, cond_dim, true, rng))
            .collect();
        Self { nets, dim, cond_dim }
    }

    /// Log-scale and shift for coordinate `i`, each `[B, 1]`.
    fn shift_scale(&self, t: &mut Tape, i: usize, prefix: Option<Var>, cond: Var) -> Result<(Var, Var)> {
        let out = self.nets[i].forward(t, prefix, cond)?;
        let a = t.column(out, 0)?;
        let shift = t.column(out, 1)?;
        let a = t.tanh(a);
        Ok((t.scale(a, S_MAX), shift))
    }

    fn prefix(t: &mut Tape, cols: &[Var]) -> Result<Option<Var>> {
        Ok(match cols.len() {
            0 => None,
            1 => Some(cols[0]),
            _ => Some(t.concat(cols, 1)?),
        })
    }

    fn forward(&self, t: &mut Tape, h: Var, cond: Var) -> Result<(Var, Var)> {
        let hs: Vec<Var> = (0..self.dim).map(|i| t.column(h, i)).collect::<Result<_>>()?;
        let mut xs = Vec::with_capacity(self.dim);
        let mut lds = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let p = Self::prefix(t, &hs[..i])?;
            let (ls, shift) = self.shift_scale(t, i, p, cond)?;
            let e = t.exp(ls);
            let xi = t.mul(hs[i], e)?;
            xs.push(t.add(xi, shift)?);
            lds.push(ls);
        }
        let x = t.concat(&xs, 1)?;
        let ld = t.concat(&lds, 1)?;
        Ok((x, t.sum_axis(ld, 1)?))
    }

    fn inverse(&self, t: &mut Tape, x: Var, cond: Var) -> Result<(Var, Var)> {
        let mut hs: Vec<Var> = Vec::with_capacity(self.dim);
        let mut lds = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let p = Self::prefix(t, &hs)?;
            let (ls, shift) = self.shift_scale(t, i, p, cond)?;
            let xi = t.column(x, i)?;
            let d = t.sub(xi, shift)?;
            let neg = t.neg(ls);
            let e = t.exp(neg);
            hs.push(t.mul(d, e)?);
            lds.push(neg);
        }
        let h = t.concat(&hs, 1)?;
        let ld = t.concat(&lds, 1)?;
        Ok((h, t.sum_axis(ld, 1)?))
    }
}

/// One invertible conditional transformation.
#[derive(Clone, Debug)]
pub enum FlowBlock {
    ActNorm(ActNorm),
    Linear(InvertibleLinear),
    Autoregressive(ArAffine),
}

impl FlowBlock {
    /// Generative direction. Returns the output and the log-determinant of
    /// the Jacobian, either a scalar or a `[B, 1]` column.
    pub fn forward(&self, t: &mut Tape, h: Var, cond: Var) -> Result<(Var, Var)> {
        match self {
            FlowBlock::ActNorm(b) => b.forward(t, h),
            FlowBlock::Linear(b) => b.forward(t, h),
            FlowBlock::Autoregressive(b) => b.forward(t, h, cond),
        }
    }

    /// Density direction, returning the inverse log-determinant.
    pub fn inverse(&self, t: &mut Tape, x: Var, cond: Var) -> Result<(Var, Var)> {
        match self {
            FlowBlock::ActNorm(b) => b.inverse(t, x),
            FlowBlock::Linear(b) => b.inverse(t, x),
            FlowBlock::Autoregressive(b) => b.inverse(t, x, cond),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowBlock::ActNorm(_) => "actnorm",
            FlowBlock::Linear(_) => "invertible-linear",
            FlowBlock::Autoregressive(_) => "autoregressive",
        }
    }
}

/// Shape of a [`FlowStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub dim: usize,
    pub cond_dim: usize,
    /// Number of (autoregressive, linear, actnorm) triples.
    pub blocks: usize,
    /// Hidden widths of each autoregressive network.
    pub hidden: Vec<usize>,
}

impl FlowConfig {
    pub const REFERENCE_HIDDEN: [usize; 2] = [256, 256];

    pub fn new(dim: usize, cond_dim: usize, blocks: usize, width_factor: f64) -> Self {
        Self {
            dim,
            cond_dim,
            blocks,
            hidden: Self::REFERENCE_HIDDEN
                .iter()
                .map(|&w| scaled_width(w, width_factor))
                .collect(),
        }
    }
}

/// Ordered sequence of blocks. `blocks[0]` is applied first in the
/// generative direction `z -> x`.
#[derive(Clone, Debug)]
pub struct FlowStack {
    pub blocks: Vec<FlowBlock>,
    pub dim: usize,
    pub cond_dim: usize,
}

impl FlowStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FlowConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.dim == 0 || cfg.cond_dim == 0 {
            return Err(Error::InvalidArgument(
                "flow dimension and condition width must be positive".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(3 * cfg.blocks);
        for k in 0..cfg.blocks {
            let p = format!("{name}.block{k}");
            blocks.push(FlowBlock::Autoregressive(ArAffine::new(
                store,
                &format!("{p}.ar"),
                cfg.dim,
                cfg.cond_dim,
                &cfg.hidden,
                rng,
            )));
            blocks.push(FlowBlock::Linear(InvertibleLinear::new(store, &format!("{p}.linear"), cfg.dim, rng)));
            blocks.push(FlowBlock::ActNorm(ActNorm::new(store, &format!("{p}.actnorm"), cfg.dim)));
        }
        Ok(Self {
            blocks,
            dim: cfg.dim,
            cond_dim: cfg.cond_dim,
        })
    }

    /// A stack built from explicit blocks.
    pub fn from_blocks(blocks: Vec<FlowBlock>, dim: usize, cond_dim: usize) -> Self {
        Self { blocks, dim, cond_dim }
    }

    fn check(&self, t: &Tape, v: Var, cond: Var) -> Result<usize> {
        let s = t.shape(v);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::Shape {
                op: "flow input",
                lhs: s.to_vec(),
                rhs: vec![self.dim],
            });
        }
        let c = t.shape(cond);
        if c.len() != 2 || c[1] != self.cond_dim || c[0] != s[0] {
            return Err(Error::Shape {
                op: "flow condition",
                lhs: c.to_vec(),
                rhs: vec![s[0], self.cond_dim],
            });
        }
        Ok(s[0])
    }

    /// `x = F(z; cond)` with the forward log-determinant per row (`[B, 1]`).
    pub fn forward(&self, t: &mut Tape, z: Var, cond: Var) -> Result<(Var, Var)> {
        let rows = self.check(t, z, cond)?;
        let mut h = z;
        let mut total = t.constant(Tensor::zeros(&[rows, 1]));
        for b in &self.blocks {
            let (next, ld) = b.forward(t, h, cond)?;
            t.ensure_finite(next, b.kind())?;
            h = next;
            total = t.add(total, ld)?;
        }
        Ok((h, total))
    }

    /// `z = F⁻¹(x; cond)` with `log|det ∂F⁻¹/∂x|` per row (`[B, 1]`).
    pub fn inverse(&self, t: &mut Tape, x: Var, cond: Var) -> Result<(Var, Var)> {
        let rows = self.check(t, x, cond)?;
        let mut h = x;
        let mut total = t.constant(Tensor::zeros(&[rows, 1]));
        for b in self.blocks.iter().rev() {
            let (next, ld) = b.inverse(t, h, cond)?;
            t.ensure_finite(next, b.kind())?;
            h = next;
            total = t.add(total, ld)?;
        }
        Ok((h, total))
    }

    /// Per-row `log p(x | cond)` under a standard-normal base, `[B, 1]`.
    pub fn log_likelihood(&self, t: &mut Tape, x: Var, cond: Var) -> Result<Var> {
        let (z, ld) = self.inverse(t, x, cond)?;
        let lp = standard_normal_logpdf(t, z)?;
        t.add(lp, ld)
    }

    pub fn is_initialized(&self, store: &ParamStore) -> bool {
        self.blocks.iter().all(|b| match b {
            FlowBlock::ActNorm(a) => store.get(a.initialized).item() != 0.0,
            _ => true,
        })
    }

    /// Data-dependent initialization of every actnorm from one batch,
    /// processed in the density direction. Errors on a second call.
    pub fn actnorm_init(&self, store: &mut ParamStore, x: &Tensor, cond: &Tensor) -> Result<()> {
        if self.blocks.iter().any(|b| matches!(b, FlowBlock::ActNorm(a) if store.get(a.initialized).item() != 0.0)) {
            return Err(Error::AlreadyInitialized("actnorm"));
        }
        let mut h = x.clone();
        for b in self.blocks.iter().rev() {
            if let FlowBlock::ActNorm(a) = b {
                a.init_from(store, &h)?;
            }
            let mut t = Tape::new(store);
            let hv = t.constant(h);
            let cv = t.constant(cond.clone());
            let (next, _) = b.inverse(&mut t, hv, cv)?;
            t.ensure_finite(next, b.kind())?;
            h = t.value(next).clone();
        }
        Ok(())
    }
}

//! The generative model: decoder, learned prior, learned likelihood scale and
//! learned inference step size.
//!
//! All decoder operations work on batches stored one sample per row
//! (`z: [B×K]`, `x: [B×M]`). Single-sample helpers wrap a one-row batch.
//!
//! The central operation is [`feedback`], the decoder Jacobian applied to the
//! precision-weighted residual, `J(z)·[(x − f(z))/σ²]`. For a linear
//! dictionary this is `Φᵀ(x − Φz)/σ²`: feedforward drive minus recurrent
//! explaining-away.

use crate::distributions::{GaussianParams, PoissonParams};
use crate::error::{FondError, Result};
use crate::numerics::{gemm, RngStream, Tensor};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// `Φz`
    Linear,
    /// `Φ·relu(z)`
    LinearRelu,
    /// `W₂·relu(W₁z + b₁) + b₂`
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentFamily {
    Poisson,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Linear { phi: Tensor },
    LinearRelu { phi: Tensor },
    Mlp1 {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Poisson(PoissonParams),
    Gaussian(GaussianParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeParams {
    pub decoder: Decoder,
    pub prior: Prior,
    /// Per-pixel log standard deviation of the Gaussian likelihood.
    pub log_sigma_x: Tensor,
    /// Log of the Euler step size, shape `[1]`.
    pub log_dt: Tensor,
}

impl Decoder {
    pub fn kind(&self) -> DecoderKind {
        match self {
            Decoder::Linear { .. } => DecoderKind::Linear,
            Decoder::LinearRelu { .. } => DecoderKind::LinearRelu,
            Decoder::Mlp1 { .. } => DecoderKind::Mlp1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => phi.cols(),
            Decoder::Mlp1 { w1, .. } => w1.cols(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => phi.rows(),
            Decoder::Mlp1 { w2, .. } => w2.rows(),
        }
    }

    /// The linear dictionary, if this decoder has one.
    pub fn dictionary(&self) -> Option<&Tensor> {
        match self {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => Some(phi),
            Decoder::Mlp1 { .. } => None,
        }
    }

    pub fn dictionary_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => Some(phi),
            Decoder::Mlp1 { .. } => None,
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => vec![("phi", phi)],
            Decoder::Mlp1 { w1, b1, w2, b2 } => {
                vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => vec![phi],
            Decoder::Mlp1 { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
        }
    }
}

impl Prior {
    pub fn family(&self) -> LatentFamily {
        match self {
            Prior::Poisson(_) => LatentFamily::Poisson,
            Prior::Gaussian(_) => LatentFamily::Gaussian,
        }
    }
}

/// Intermediate values of a batched decode, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    /// Decoder input: `z`, or `relu(z)` for [`DecoderKind::LinearRelu`].
    pub zin: Tensor,
    /// Hidden pre-activation and activation (MLP only).
    pub hidden: Option<(Tensor, Tensor)>,
    pub xhat: Tensor,
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn heaviside(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn add_row_bias(t: &mut Tensor, b: &Tensor) {
    let c = t.cols();
    for row in t.data_mut().chunks_exact_mut(c) {
        for (v, bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
}

impl GenerativeParams {
    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.data()[0].exp()
    }

    pub fn family(&self) -> LatentFamily {
        self.prior.family()
    }

    /// `1/σ²` per pixel.
    pub fn precision(&self) -> Tensor {
        self.log_sigma_x.map(|s| (-2.0 * s).exp())
    }

    /// Parameter tensors in a fixed, named order (decoder, prior, scale, step).
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.decoder.tensors();
        match &self.prior {
            Prior::Poisson(p) => out.push(("u0", &p.u)),
            Prior::Gaussian(g) => {
                out.push(("mu0", &g.mu));
                out.push(("xi0", &g.xi));
            }
        }
        out.push(("log_sigma_x", &self.log_sigma_x));
        out.push(("log_dt", &self.log_dt));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.decoder.tensors_mut();
        match &mut self.prior {
            Prior::Poisson(p) => out.push(&mut p.u),
            Prior::Gaussian(g) => {
                out.push(&mut g.mu);
                out.push(&mut g.xi);
            }
        }
        out.push(&mut self.log_sigma_x);
        out.push(&mut self.log_dt);
        out
    }

    /// Rebuilds parameters from the named tensor list produced by
    /// [`named_tensors`](Self::named_tensors).
    pub fn from_named(kind: DecoderKind, named: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<Tensor> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| FondError::InvalidArgument(format!("missing tensor {name}")))
        };
        let decoder = match kind {
            DecoderKind::Linear => Decoder::Linear { phi: find("phi")? },
            DecoderKind::LinearRelu => Decoder::LinearRelu { phi: find("phi")? },
            DecoderKind::Mlp1 => Decoder::Mlp1 {
                w1: find("w1")?,
                b1: find("b1")?,
                w2: find("w2")?,
                b2: find("b2")?,
            },
        };
        let prior = if named.iter().any(|(n, _)| n == "u0") {
            Prior::Poisson(PoissonParams::new(find("u0")?))
        } else {
            Prior::Gaussian(GaussianParams::new(find("mu0")?, find("xi0")?)?)
        };
        let p = GenerativeParams {
            decoder,
            prior,
            log_sigma_x: find("log_sigma_x")?,
            log_dt: find("log_dt")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (m, k) = (self.input_dim(), self.latent_dim());
        if m == 0 || k == 0 {
            return Err(FondError::InvalidArgument("M and K must be positive".into()));
        }
        if self.log_sigma_x.len() != m || self.log_dt.len() != 1 {
            return Err(FondError::Shape("likelihood scale or step size".into()));
        }
        let prior_len = match &self.prior {
            Prior::Poisson(p) => p.u.len(),
            Prior::Gaussian(g) => g.mu.len().min(g.xi.len()),
        };
        if prior_len != k {
            return Err(FondError::Shape(format!("prior length {prior_len} != K {k}")));
        }
        if let Decoder::Mlp1 { w1, b1, w2, b2 } = &self.decoder {
            let h = w1.rows();
            if b1.len() != h || w2.cols() != h || b2.len() != m {
                return Err(FondError::Shape("mlp decoder".into()));
            }
        }
        for (name, t) in self.named_tensors() {
            t.ensure_finite(name)?;
        }
        Ok(())
    }

    /// Gram matrix `ΦᵀΦ` of a linear dictionary.
    pub fn gram(&self) -> Option<Tensor> {
        let phi = self.decoder.dictionary()?;
        let k = phi.cols();
        let mut g = Tensor::zeros(&[k, k]);
        gemm(1.0, phi, true, phi, false, 0.0, &mut g).ok()?;
        Some(g)
    }

    /// Decodes a batch `z: [B×K]` into `xhat: [B×M]`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<DecodeCache> {
        let k = self.latent_dim();
        if z.cols() != k {
            return Err(FondError::Shape(format!(
                "decode: z has {} columns, K = {k}",
                z.cols()
            )));
        }
        let b = z.rows();
        let m = self.input_dim();
        match &self.decoder {
            Decoder::Linear { phi } => {
                let mut xhat = Tensor::zeros(&[b, m]);
                gemm(1.0, z, false, phi, true, 0.0, &mut xhat)?;
                Ok(DecodeCache {
                    zin: z.as_batch(),
                    hidden: None,
                    xhat,
                })
            }
            Decoder::LinearRelu { phi } => {
                let zin = z.as_batch().map(relu);
                let mut xhat = Tensor::zeros(&[b, m]);
                gemm(1.0, &zin, false, phi, true, 0.0, &mut xhat)?;
                Ok(DecodeCache {
                    zin,
                    hidden: None,
                    xhat,
                })
            }
            Decoder::Mlp1 { w1, b1, w2, b2 } => {
                let mut pre = Tensor::zeros(&[b, w1.rows()]);
                gemm(1.0, z, false, w1, true, 0.0, &mut pre)?;
                add_row_bias(&mut pre, b1);
                let act = pre.map(relu);
                let mut xhat = Tensor::zeros(&[b, m]);
                gemm(1.0, &act, false, w2, true, 0.0, &mut xhat)?;
                add_row_bias(&mut xhat, b2);
                Ok(DecodeCache {
                    zin: z.as_batch(),
                    hidden: Some((pre, act)),
                    xhat,
                })
            }
        }
    }

    /// Precision-weighted residual `(x − xhat)/σ²` for a batch.
    pub fn weighted_residual(&self, x: &Tensor, xhat: &Tensor) -> Result<Tensor> {
        if x.len() != xhat.len() || x.cols() != self.input_dim() {
            return Err(FondError::Shape(format!(
                "residual: x {:?}, xhat {:?}",
                x.shape(),
                xhat.shape()
            )));
        }
        let prec = self.precision();
        let m = prec.len();
        let mut e = xhat.clone();
        for (row_e, row_x) in e.data_mut().chunks_exact_mut(m).zip(x.data().chunks_exact(m)) {
            for ((ev, &xv), &p) in row_e.iter_mut().zip(row_x).zip(prec.data()) {
                *ev = (xv - *ev) * p;
            }
        }
        e.ensure_finite("residual")?;
        Ok(e)
    }

    /// Jacobian-vector product `J(z)·e` for a batch of weighted residuals
    /// `e: [B×M]`. For relu-decoded latents the `Θ(z)` factor is left to the
    /// caller.
    pub fn feedback_batch(&self, cache: &DecodeCache, e: &Tensor) -> Result<Tensor> {
        let b = e.rows();
        let k = self.latent_dim();
        let mut fb = Tensor::zeros(&[b, k]);
        match &self.decoder {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => {
                gemm(1.0, e, false, phi, false, 0.0, &mut fb)?;
            }
            Decoder::Mlp1 { w1, w2, .. } => {
                let (pre, _) = cache.hidden.as_ref().expect("mlp cache");
                let mut g = Tensor::zeros(&[b, w2.cols()]);
                gemm(1.0, e, false, w2, false, 0.0, &mut g)?;
                for (gv, &h) in g.data_mut().iter_mut().zip(pre.data()) {
                    *gv *= heaviside(h);
                }
                gemm(1.0, &g, false, w1, false, 0.0, &mut fb)?;
            }
        }
        Ok(fb)
    }

    /// Reverse pass through [`feedback_batch`](Self::feedback_batch):
    /// accumulates decoder gradients into `grads` and returns `∂L/∂e`.
    pub fn backward_feedback(
        &self,
        cache: &DecodeCache,
        e: &Tensor,
        d_fb: &Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let b = e.rows();
        let m = self.input_dim();
        let mut de = Tensor::zeros(&[b, m]);
        let dec = grads.decoder_mut();
        match &self.decoder {
            Decoder::Linear { phi } | Decoder::LinearRelu { phi } => {
                gemm(1.0, e, true, d_fb, false, 1.0, &mut dec[0])?;
                gemm(1.0, d_fb, false, phi, true, 0.0, &mut de)?;
            }
            Decoder::Mlp1 { w1, w2, .. } => {
                let (pre, _) = cache.hidden.as_ref().expect("mlp cache");
                let h = w1.rows();
                let mut g = Tensor::zeros(&[b, h]);
                gemm(1.0, e, false, w2, false, 0.0, &mut g)?;
                for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                    *gv *= heaviside(p);
                }
                gemm(1.0, &g, true, d_fb, false, 1.0, &mut dec[0])?;
                let mut q = Tensor::zeros(&[b, h]);
                gemm(1.0, d_fb, false, w1, true, 0.0, &mut q)?;
                for (qv, &p) in q.data_mut().iter_mut().zip(pre.data()) {
                    *qv *= heaviside(p);
                }
                gemm(1.0, e, true, &q, false, 1.0, &mut dec[2])?;
                gemm(1.0, &q, false, w2, true, 0.0, &mut de)?;
            }
        }
        Ok(de)
    }

    /// Reverse pass through [`decode_batch`](Self::decode_batch): accumulates
    /// decoder gradients and returns `∂L/∂z`.
    pub fn backward_decode(
        &self,
        cache: &DecodeCache,
        d_xhat: &Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let b = d_xhat.rows();
        let k = self.latent_dim();
        let mut dz = Tensor::zeros(&[b, k]);
        let dec = grads.decoder_mut();
        match &self.decoder {
            Decoder::Linear { phi } => {
                gemm(1.0, d_xhat, true, &cache.zin, false, 1.0, &mut dec[0])?;
                gemm(1.0, d_xhat, false, phi, false, 0.0, &mut dz)?;
            }
            Decoder::LinearRelu { phi } => {
                gemm(1.0, d_xhat, true, &cache.zin, false, 1.0, &mut dec[0])?;
                gemm(1.0, d_xhat, false, phi, false, 0.0, &mut dz)?;
                for (d, &zin) in dz.data_mut().iter_mut().zip(cache.zin.data()) {
                    *d *= heaviside(zin);
                }
            }
            Decoder::Mlp1 { w1, w2, .. } => {
                let (pre, act) = cache.hidden.as_ref().expect("mlp cache");
                gemm(1.0, d_xhat, true, act, false, 1.0, &mut dec[2])?;
                dec[3].axpy(1.0, &d_xhat.sum_rows())?;
                let mut dh = Tensor::zeros(&[b, w1.rows()]);
                gemm(1.0, d_xhat, false, w2, false, 0.0, &mut dh)?;
                for (d, &p) in dh.data_mut().iter_mut().zip(pre.data()) {
                    *d *= heaviside(p);
                }
                gemm(1.0, &dh, true, &cache.zin, false, 1.0, &mut dec[0])?;
                dec[1].axpy(1.0, &dh.sum_rows())?;
                gemm(1.0, &dh, false, w1, false, 0.0, &mut dz)?;
            }
        }
        Ok(dz)
    }
}

/// Gradients with the same layout as [`GenerativeParams::named_tensors`].
#[derive(Debug, Clone)]
pub struct Gradients {
    names: Vec<&'static str>,
    pub tensors: Vec<Tensor>,
    n_decoder: usize,
}

impl Gradients {
    pub fn zeros_like(params: &GenerativeParams) -> Self {
        let named = params.named_tensors();
        Gradients {
            names: named.iter().map(|(n, _)| *n).collect(),
            tensors: named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            n_decoder: params.decoder.tensors().len(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| *n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| *n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn decoder_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors[..self.n_decoder]
    }

    pub fn d_phi(&self) -> Option<&Tensor> {
        self.get("phi")
    }

    pub fn d_log_sigma_x(&self) -> &Tensor {
        self.get("log_sigma_x").expect("log_sigma_x slot")
    }

    pub fn d_log_dt(&self) -> f64 {
        self.get("log_dt").expect("log_dt slot").data()[0]
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.map_inplace(|v| v * s);
        }
    }

    pub fn add(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Decodes a single latent vector.
pub fn decode(params: &GenerativeParams, z: &Tensor) -> Result<Tensor> {
    let cache = params.decode_batch(&z.as_batch())?;
    cache.xhat.reshape(&[params.input_dim()])
}

/// `J(z)·[(x − f(z))/σ²]` for a single sample.
pub fn feedback(params: &GenerativeParams, z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let cache = params.decode_batch(&z.as_batch())?;
    let e = params.weighted_residual(&x.as_batch(), &cache.xhat)?;
    params.feedback_batch(&cache, &e)?.reshape(&[params.latent_dim()])
}

/// `½ Σ_j ((x_j − f(z)_j)/σ_j)²`.
pub fn recon_loss(params: &GenerativeParams, x: &Tensor, z: &Tensor) -> Result<f64> {
    let cache = params.decode_batch(&z.as_batch())?;
    let e = params.weighted_residual(&x.as_batch(), &cache.xhat)?;
    // e = r/σ², so ½ Σ r²/σ² = ½ Σ e² σ²
    let var = params.log_sigma_x.map(|s| (2.0 * s).exp());
    Ok(0.5
        * e.data()
            .iter()
            .zip(var.data().iter().cycle())
            .map(|(ev, v)| ev * ev * v)
            .sum::<f64>())
}

/// Default hidden width of the one-hidden-layer decoder.
pub fn default_hidden(k: usize) -> usize {
    4 * k
}

/// Fresh parameters: unit-norm Gaussian dictionary columns, prior rate 1
/// (or standard normal prior), `σ = 1`, `dt = 0.1`.
pub fn init_params(
    m: usize,
    k: usize,
    kind: DecoderKind,
    family: LatentFamily,
    rng: &mut RngStream,
) -> Result<GenerativeParams> {
    init_params_with_hidden(m, k, kind, family, default_hidden(k), rng)
}

pub fn init_params_with_hidden(
    m: usize,
    k: usize,
    kind: DecoderKind,
    family: LatentFamily,
    hidden: usize,
    rng: &mut RngStream,
) -> Result<GenerativeParams> {
    if m == 0 || k == 0 {
        return Err(FondError::InvalidArgument("M and K must be positive".into()));
    }
    let decoder = match kind {
        DecoderKind::Linear => Decoder::Linear {
            phi: unit_columns(m, k, rng),
        },
        DecoderKind::LinearRelu => Decoder::LinearRelu {
            phi: unit_columns(m, k, rng),
        },
        DecoderKind::Mlp1 => {
            if hidden == 0 {
                return Err(FondError::InvalidArgument("hidden width must be positive".into()));
            }
            let w1 = gaussian_matrix(hidden, k, 1.0 / (k as f64).sqrt(), rng);
            let w2 = gaussian_matrix(m, hidden, 1.0 / (hidden as f64).sqrt(), rng);
            Decoder::Mlp1 {
                w1,
                b1: Tensor::zeros(&[hidden]),
                w2,
                b2: Tensor::zeros(&[m]),
            }
        }
    };
    let prior = match family {
        LatentFamily::Poisson => Prior::Poisson(PoissonParams::new(Tensor::zeros(&[k]))),
        LatentFamily::Gaussian => {
            Prior::Gaussian(GaussianParams::new(Tensor::zeros(&[k]), Tensor::zeros(&[k]))?)
        }
    };
    Ok(GenerativeParams {
        decoder,
        prior,
        log_sigma_x: Tensor::zeros(&[m]),
        log_dt: Tensor::scalar(0.1f64.ln()),
    })
}

fn gaussian_matrix(r: usize, c: usize, scale: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(&[r, c]);
    for v in t.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v = scale * g;
    }
    t
}

fn unit_columns(m: usize, k: usize, rng: &mut RngStream) -> Tensor {
    let mut phi = gaussian_matrix(m, k, 1.0, rng);
    for j in 0..k {
        let n = (0..m).map(|i| phi.get(i, j).powi(2)).sum::<f64>().sqrt();
        let n = if n > 0.0 { n } else { 1.0 };
        for i in 0..m {
            let v = phi.get(i, j) / n;
            phi.set(i, j, v);
        }
    }
    phi
}

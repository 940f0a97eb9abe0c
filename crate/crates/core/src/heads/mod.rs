//! The ten pooling probes.
//!
//! Every head maps a [`Clip`] (token map plus cls vector) to class logits and
//! has a hand-written backward pass. Parameters are stored as 32-bit
//! [`DenseTensor`]s; forward and backward run in 64-bit.
//!
//! | kind       | descriptor                                   | parameters                      |
//! |------------|----------------------------------------------|---------------------------------|
//! | `linear`   | cls (or token mean)                          | `DC + C`                        |
//! | `mlp`      | cls (or token mean) -> ReLU hidden layer     | `DH + H + HC + C`               |
//! | `linearc`  | all tokens concatenated                      | `NDC`                           |
//! | `conv`     | k x k conv, ReLU, global mean                | `k^2 D D_h + D_h + D_h C + C`   |
//! | `mhca`     | one query, multi-head cross-attention        | `2D^2 + D + DC + C`             |
//! | `ep`       | per-class queries, cosine max                | `DC + 2D`                       |
//! | `simpool`  | mean-token query, single-head attention      | `D^2 + DC + C`                  |
//! | `abmilp`   | gated attention MIL pooling                  | `2D^2 + QD + DC + C`            |
//! | `proto`    | real prototypes, cosine max                  | `JD + JC`                       |
//! | `protobin` | sign-binarized prototypes, cosine max (STE)  | `JD + JC`                       |

mod attentive;
mod checkpoint;
mod conv;
mod dense;
mod gradcheck;
mod proto;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::embedstore::EmbeddingRecord;
use crate::numerics::{DenseTensor, NumericsError, RngStream};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::head_grad_error;
pub use proto::{binarize, mean_abs_pairwise_cosine, pack_prototypes, unpack_prototypes, PrototypeBank};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("unknown head '{name}'; valid kinds: {valid}")]
    UnknownKind { name: String, valid: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("state error: {0}")]
    State(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HeadError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadKind {
    Linear,
    Mlp,
    Linearc,
    Conv,
    Mhca,
    Ep,
    Simpool,
    Abmilp,
    Proto,
    Protobin,
}

impl HeadKind {
    pub const ALL: [HeadKind; 10] = [
        HeadKind::Linear,
        HeadKind::Mlp,
        HeadKind::Linearc,
        HeadKind::Conv,
        HeadKind::Mhca,
        HeadKind::Ep,
        HeadKind::Simpool,
        HeadKind::Abmilp,
        HeadKind::Proto,
        HeadKind::Protobin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Mlp => "mlp",
            HeadKind::Linearc => "linearc",
            HeadKind::Conv => "conv",
            HeadKind::Mhca => "mhca",
            HeadKind::Ep => "ep",
            HeadKind::Simpool => "simpool",
            HeadKind::Abmilp => "abmilp",
            HeadKind::Proto => "proto",
            HeadKind::Protobin => "protobin",
        }
    }

    pub fn is_prototype(self) -> bool {
        matches!(self, HeadKind::Proto | HeadKind::Protobin)
    }

    /// Heads whose pooled descriptor ignores token order.
    pub fn is_permutation_invariant(self) -> bool {
        !matches!(self, HeadKind::Conv | HeadKind::Linearc)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| HeadError::UnknownKind {
                name: s.to_string(),
                valid: HeadKind::ALL.map(|k| k.name()).join(", "),
            })
    }
}

/// Which single vector feeds `linear` and `mlp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Descriptor {
    Cls,
    TokenMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadHyper {
    pub mlp_hidden: usize,
    pub conv_kernel: usize,
    pub conv_hidden: usize,
    pub abmilp_queries: usize,
    pub mhca_heads: usize,
    pub prototypes_per_class: usize,
    pub descriptor: Descriptor,
}

impl Default for HeadHyper {
    fn default() -> Self {
        Self {
            mlp_hidden: 512,
            conv_kernel: 3,
            conv_hidden: 256,
            abmilp_queries: 1,
            mhca_heads: 4,
            prototypes_per_class: 20,
            descriptor: Descriptor::Cls,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadDims {
    pub dim: usize,
    pub s_t: usize,
    pub s_f: usize,
    pub classes: usize,
}

impl HeadDims {
    pub fn new(dim: usize, s_t: usize, s_f: usize, classes: usize) -> Self {
        Self {
            dim,
            s_t,
            s_f,
            classes,
        }
    }

    pub fn tokens(&self) -> usize {
        self.s_t * self.s_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform { fan_in: usize },
    UnitRows,
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: &'static str,
    shape: Vec<usize>,
    init: Init,
}

fn spec(name: &'static str, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec { name, shape, init }
}

fn param_specs(kind: HeadKind, dims: &HeadDims, hyper: &HeadHyper) -> Result<Vec<ParamSpec>> {
    use Init::*;
    let (d, c, n) = (dims.dim, dims.classes, dims.tokens());
    if d == 0 || c == 0 || n == 0 {
        return Err(HeadError::Dimension(format!("{dims:?}")));
    }
    let dense = |fan| Uniform { fan_in: fan };
    Ok(match kind {
        HeadKind::Linear => vec![spec("w", vec![c, d], dense(d)), spec("b", vec![c], dense(d))],
        HeadKind::Mlp => {
            let h = hyper.mlp_hidden;
            if h == 0 {
                return Err(HeadError::Hyper("mlp hidden width must be positive".into()));
            }
            vec![
                spec("w1", vec![h, d], dense(d)),
                spec("b1", vec![h], dense(d)),
                spec("w2", vec![c, h], dense(h)),
                spec("b2", vec![c], dense(h)),
            ]
        }
        HeadKind::Linearc => vec![spec("w", vec![c, n * d], dense(n * d))],
        HeadKind::Conv => {
            let (k, dh) = (hyper.conv_kernel, hyper.conv_hidden);
            if k == 0 || k % 2 == 0 || dh == 0 {
                return Err(HeadError::Hyper(format!(
                    "conv needs an odd kernel and positive width, got k={k} D_h={dh}"
                )));
            }
            vec![
                spec("kernel", vec![dh, d, k, k], dense(d * k * k)),
                spec("kernel_bias", vec![dh], dense(d * k * k)),
                spec("w", vec![c, dh], dense(dh)),
                spec("b", vec![c], dense(dh)),
            ]
        }
        HeadKind::Mhca => {
            let heads = hyper.mhca_heads;
            if heads == 0 || d % heads != 0 {
                return Err(HeadError::Hyper(format!("{heads} heads do not divide D={d}")));
            }
            vec![
                spec("query", vec![d], dense(d)),
                spec("w_key", vec![d, d], dense(d)),
                spec("w_value", vec![d, d], dense(d)),
                spec("w", vec![c, d], dense(d)),
                spec("b", vec![c], dense(d)),
            ]
        }
        HeadKind::Ep => vec![
            spec("gamma", vec![d], Ones),
            spec("beta", vec![d], Zeros),
            spec("queries", vec![c, d], UnitRows),
        ],
        HeadKind::Simpool => vec![
            spec("w_key", vec![d, d], dense(d)),
            spec("w", vec![c, d], dense(d)),
            spec("b", vec![c], dense(d)),
        ],
        HeadKind::Abmilp => {
            let q = hyper.abmilp_queries;
            if q == 0 {
                return Err(HeadError::Hyper("abmilp needs at least one query".into()));
            }
            vec![
                spec("v", vec![d, d], dense(d)),
                spec("u", vec![d, d], dense(d)),
                spec("attn", vec![q, d], dense(d)),
                spec("w", vec![c, d], dense(d)),
                spec("b", vec![c], dense(d)),
            ]
        }
        HeadKind::Proto | HeadKind::Protobin => {
            let j = hyper.prototypes_per_class * c;
            if j == 0 {
                return Err(HeadError::Hyper("prototypes_per_class must be positive".into()));
            }
            vec![spec("prototypes", vec![j, d], UnitRows), spec("w", vec![c, j], dense(j))]
        }
    })
}

/// Number of trainable scalars of a head.
pub fn param_count(kind: HeadKind, dims: &HeadDims, hyper: &HeadHyper) -> Result<usize> {
    Ok(param_specs(kind, dims, hyper)?
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum())
}

/// A probe input: token-major 64-bit token map plus the cls vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub dim: usize,
    pub s_t: usize,
    pub s_f: usize,
    /// `N x D`, token `n = t * S_f + f`.
    pub tokens: Vec<f64>,
    pub norms: Vec<f64>,
    pub cls: Vec<f64>,
}

impl Clip {
    pub fn new(dim: usize, s_t: usize, s_f: usize, tokens: Vec<f64>, cls: Vec<f64>) -> Result<Self> {
        if tokens.len() != dim * s_t * s_f || cls.len() != dim || dim == 0 || s_t * s_f == 0 {
            return Err(HeadError::Dimension(format!(
                "clip {dim}x{s_t}x{s_f} with {} token values and cls of {}",
                tokens.len(),
                cls.len()
            )));
        }
        if tokens.iter().chain(&cls).any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("clip".into()).into());
        }
        let norms = tokens.chunks_exact(dim).map(crate::numerics::norm64).collect();
        Ok(Self {
            dim,
            s_t,
            s_f,
            tokens,
            norms,
            cls,
        })
    }

    pub fn from_record(rec: &EmbeddingRecord) -> Result<Self> {
        let t = &rec.tokens;
        Self::new(
            t.dim,
            t.s_t,
            t.s_f,
            t.token_major(),
            rec.cls.iter().map(|&x| x as f64).collect(),
        )
    }

    /// Builds a clip whose cls vector is the token mean.
    pub fn from_tokens(dim: usize, s_t: usize, s_f: usize, tokens: Vec<f64>) -> Result<Self> {
        let n = (s_t * s_f).max(1);
        let mut cls = vec![0.0; dim];
        for tok in tokens.chunks_exact(dim.max(1)) {
            for (c, x) in cls.iter_mut().zip(tok) {
                *c += x;
            }
        }
        cls.iter_mut().for_each(|c| *c /= n as f64);
        Self::new(dim, s_t, s_f, tokens, cls)
    }

    pub fn num_tokens(&self) -> usize {
        self.s_t * self.s_f
    }

    pub fn token(&self, n: usize) -> &[f64] {
        &self.tokens[n * self.dim..(n + 1) * self.dim]
    }

    pub fn token_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for tok in self.tokens.chunks_exact(self.dim) {
            for (m, x) in mean.iter_mut().zip(tok) {
                *m += x;
            }
        }
        let n = self.num_tokens() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Intermediates kept from the forward pass for backward.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Cache {
    Linear,
    Mlp { pre: Vec<f64> },
    Linearc,
    Conv { pre: Vec<f64> },
    Mhca { weights: Vec<f64>, mixed: Vec<f64> },
    Ep { unit: Vec<f64>, raw_norm: Vec<f64> },
    Simpool { weights: Vec<f64>, key_query: Vec<f64> },
    Abmilp { hidden: Vec<f64>, gate: Vec<f64>, weights: Vec<f64> },
    Proto { unit_prototypes: Vec<f64>, proto_norms: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutput {
    pub kind: HeadKind,
    pub logits: Vec<f64>,
    /// The head's pooled descriptor (prototype score vector for prototype heads).
    pub pooled: Vec<f64>,
    /// Winning token index per prototype (prototype heads) or per class (`ep`).
    pub argmax: Vec<usize>,
    pub(crate) cache: Cache,
}

impl ProbeOutput {
    /// Winning `(t, f)` grid location per prototype.
    pub fn argmax_locations(&self, s_f: usize) -> Vec<(usize, usize)> {
        self.argmax.iter().map(|&n| (n / s_f, n % s_f)).collect()
    }

    /// Which piece of each piecewise-smooth operation was taken: the max
    /// pooling winners followed by the ReLU on/off states. Two outputs with
    /// equal patterns lie on the same smooth piece of the head.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut pattern = self.argmax.clone();
        if let Cache::Mlp { pre } | Cache::Conv { pre } = &self.cache {
            pattern.extend(pre.iter().map(|&a| usize::from(a > 0.0)));
        }
        pattern
    }
}

/// 64-bit gradient buffers, one per parameter tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| b.fill(0.0));
    }

    pub fn scale(&mut self, s: f64) {
        self.bufs.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bufs.iter().flatten().all(|&g| g == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: &'static str,
    pub tensor: DenseTensor,
}

/// A head's kind, dimensions, hyperparameters and parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadState {
    pub kind: HeadKind,
    pub dims: HeadDims,
    pub hyper: HeadHyper,
    pub params: Vec<Param>,
}

impl HeadState {
    /// Seeded initialisation: dense weights uniform in `±1/sqrt(fan_in)`,
    /// prototypes (and `ep` queries) unit-normalised gaussians.
    pub fn init(kind: HeadKind, dims: HeadDims, hyper: HeadHyper, rng: &mut RngStream) -> Result<Self> {
        let params = param_specs(kind, &dims, &hyper)?
            .into_iter()
            .map(|s| {
                let len: usize = s.shape.iter().product();
                let data: Vec<f32> = match s.init {
                    Init::Uniform { fan_in } => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..len).map(|_| rng.uniform_range(-bound, bound) as f32).collect()
                    }
                    Init::UnitRows => {
                        let cols = *s.shape.last().unwrap();
                        let mut v = Vec::with_capacity(len);
                        for _ in 0..len / cols {
                            let row = loop {
                                let row: Vec<f64> = (0..cols).map(|_| rng.gaussian()).collect();
                                let n = crate::numerics::norm64(&row);
                                if n > 0.0 {
                                    break row.into_iter().map(move |x| (x / n) as f32);
                                }
                            };
                            v.extend(row);
                        }
                        v
                    }
                    Init::Ones => vec![1.0; len],
                    Init::Zeros => vec![0.0; len],
                };
                Ok(Param {
                    name: s.name,
                    tensor: DenseTensor::new(s.shape, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            dims,
            hyper,
            params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&DenseTensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut DenseTensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            bufs: self.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn prototype_bank(&self) -> Option<PrototypeBank> {
        if !self.kind.is_prototype() {
            return None;
        }
        Some(PrototypeBank::new(
            self.param("prototypes")?.clone(),
            self.dims.classes,
        ))
    }

    fn data(&self, i: usize) -> &[f32] {
        self.params[i].tensor.data()
    }

    fn check_clip(&self, clip: &Clip) -> Result<()> {
        let d = &self.dims;
        let token_grid_matters = matches!(self.kind, HeadKind::Linearc | HeadKind::Conv);
        if clip.dim != d.dim
            || (token_grid_matters && (clip.s_t, clip.s_f) != (d.s_t, d.s_f))
        {
            return Err(HeadError::Dimension(format!(
                "{} head built for D={} grid {}x{}, clip has D={} grid {}x{}",
                self.kind, d.dim, d.s_t, d.s_f, clip.dim, clip.s_t, clip.s_f
            )));
        }
        Ok(())
    }

    fn descriptor<'a>(&self, clip: &'a Clip) -> std::borrow::Cow<'a, [f64]> {
        match self.hyper.descriptor {
            Descriptor::Cls => std::borrow::Cow::Borrowed(&clip.cls),
            Descriptor::TokenMean => std::borrow::Cow::Owned(clip.token_mean()),
        }
    }

    pub fn forward(&self, clip: &Clip) -> Result<ProbeOutput> {
        self.check_clip(clip)?;
        match self.kind {
            HeadKind::Linear => dense::linear_forward(self, clip),
            HeadKind::Mlp => dense::mlp_forward(self, clip),
            HeadKind::Linearc => dense::linearc_forward(self, clip),
            HeadKind::Conv => conv::forward(self, clip),
            HeadKind::Mhca => attentive::mhca_forward(self, clip),
            HeadKind::Ep => attentive::ep_forward(self, clip),
            HeadKind::Simpool => attentive::simpool_forward(self, clip),
            HeadKind::Abmilp => attentive::abmilp_forward(self, clip),
            HeadKind::Proto => proto::forward(self, clip, false),
            HeadKind::Protobin => proto::forward(self, clip, true),
        }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward(&self, clip: &Clip, out: &ProbeOutput, dlogits: &[f64], grads: &mut Gradients) -> Result<()> {
        if out.kind != self.kind {
            return Err(HeadError::State(format!(
                "forward output of a {} head passed to a {} head",
                out.kind, self.kind
            )));
        }
        if dlogits.len() != self.dims.classes || grads.bufs.len() != self.params.len() {
            return Err(HeadError::Dimension(format!(
                "{} dlogits / {} gradient buffers for {} classes / {} params",
                dlogits.len(),
                grads.bufs.len(),
                self.dims.classes,
                self.params.len()
            )));
        }
        self.check_clip(clip)?;
        match self.kind {
            HeadKind::Linear => dense::linear_backward(self, clip, dlogits, grads),
            HeadKind::Mlp => dense::mlp_backward(self, clip, out, dlogits, grads),
            HeadKind::Linearc => dense::linearc_backward(clip, dlogits, grads),
            HeadKind::Conv => conv::backward(self, clip, out, dlogits, grads),
            HeadKind::Mhca => attentive::mhca_backward(self, clip, out, dlogits, grads),
            HeadKind::Ep => attentive::ep_backward(self, clip, out, dlogits, grads),
            HeadKind::Simpool => attentive::simpool_backward(self, clip, out, dlogits, grads),
            HeadKind::Abmilp => attentive::abmilp_backward(self, clip, out, dlogits, grads),
            HeadKind::Proto | HeadKind::Protobin => proto::backward(self, clip, out, dlogits, grads),
        }
    }
}

// Small dense helpers shared by the head implementations.

/// `y = W x (+ b)` with `W` row-major `rows x x.len()`.
pub(crate) fn affine(w: &[f32], b: Option<&[f32]>, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols)
        .enumerate()
        .map(|(r, row)| {
            let acc = row.iter().zip(x).fold(0.0, |acc, (&wi, &xi)| acc + wi as f64 * xi);
            acc + b.map_or(0.0, |b| b[r] as f64)
        })
        .collect()
}

/// Accumulates `dW += dy x^T` and returns `W^T dy`.
pub(crate) fn affine_backward(w: &[f32], x: &[f64], dy: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let cols = x.len();
    let mut dx = vec![0.0; cols];
    for (r, (&g, row)) in dy.iter().zip(w.chunks_exact(cols)).enumerate() {
        if g == 0.0 {
            continue;
        }
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for k in 0..cols {
            drow[k] += g * x[k];
            dx[k] += g * row[k] as f64;
        }
    }
    dx
}

pub(crate) fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Numerically stable softmax.
pub(crate) fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Softmax Jacobian-vector product: `ds_n = a_n (da_n - sum_m a_m da_m)`.
pub(crate) fn softmax_backward(weights: &[f64], dweights: &[f64]) -> Vec<f64> {
    let inner: f64 = weights.iter().zip(dweights).map(|(a, d)| a * d).sum();
    weights.iter().zip(dweights).map(|(a, d)| a * (d - inner)).collect()
}

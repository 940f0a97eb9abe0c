//! Prototype pooling (`proto`, `protobin`).
//!
//! Each prototype is matched against every token by cosine similarity and
//! max-pooled over the grid; the stacked scores feed a bias-free linear
//! classifier. `protobin` scores with `sign(p)` (sign(0) = +1) and passes the
//! gradient straight through the sign to the real-valued prototype.

use super::{affine, affine_backward, Cache, Clip, Gradients, HeadError, HeadState, ProbeOutput, Result};
use crate::numerics::{dot, norm64, DenseTensor, NumericsError};

/// Sign binarisation with `sign(0) = +1`.
pub fn binarize(p: &[f32]) -> Vec<f32> {
    p.iter().map(|&x| if x >= 0.0 { 1.0 } else { -1.0 }).collect()
}

/// `J x D` real-valued prototypes plus the class count they serve.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: DenseTensor,
    classes: usize,
}

impl PrototypeBank {
    pub fn new(prototypes: DenseTensor, classes: usize) -> Self {
        assert_eq!(prototypes.rank(), 2, "prototype bank must be J x D");
        Self { prototypes, classes }
    }

    pub fn count(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn real(&self) -> &DenseTensor {
        &self.prototypes
    }

    pub fn binarized(&self) -> DenseTensor {
        DenseTensor::new(self.prototypes.shape().to_vec(), binarize(self.prototypes.data()))
            .expect("binarized bank is finite")
    }
}

/// One bit per weight (1 = +1), LSB first, each prototype padded to a byte
/// boundary: `J * ceil(D / 8)` bytes.
pub fn pack_prototypes(bank: &PrototypeBank) -> Vec<u8> {
    let d = bank.dim();
    let row_bytes = d.div_ceil(8);
    let mut out = vec![0u8; bank.count() * row_bytes];
    for (j, row) in bank.real().data().chunks_exact(d).enumerate() {
        for (k, &x) in row.iter().enumerate() {
            if x >= 0.0 {
                out[j * row_bytes + k / 8] |= 1 << (k % 8);
            }
        }
    }
    out
}

pub fn unpack_prototypes(bytes: &[u8], count: usize, dim: usize) -> std::result::Result<DenseTensor, NumericsError> {
    let row_bytes = dim.div_ceil(8);
    if bytes.len() != count * row_bytes {
        return Err(NumericsError::InvalidArgument(format!(
            "{} packed bytes cannot hold {count} x {dim} signs",
            bytes.len()
        )));
    }
    let data = (0..count)
        .flat_map(|j| {
            (0..dim).map(move |k| {
                if bytes[j * row_bytes + k / 8] >> (k % 8) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            })
        })
        .collect();
    DenseTensor::new(vec![count, dim], data)
}

/// Mean absolute cosine similarity over all distinct prototype pairs.
pub fn mean_abs_pairwise_cosine(prototypes: &DenseTensor) -> f64 {
    let d = prototypes.shape()[1];
    let rows: Vec<&[f32]> = prototypes.data().chunks_exact(d).collect();
    let norms: Vec<f64> = rows.iter().map(|r| crate::numerics::norm(r)).collect();
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                total += (dot(rows[i], rows[j]) / (norms[i] * norms[j])).abs();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

pub(super) fn forward(head: &HeadState, clip: &Clip, binarized: bool) -> Result<ProbeOutput> {
    let raw = head.data(0);
    let effective: Vec<f64> = if binarized {
        binarize(raw).into_iter().map(f64::from).collect()
    } else {
        raw.iter().map(|&x| x as f64).collect()
    };
    score(head, clip, &effective)
}

impl HeadState {
    /// Runs a prototype head with an explicit real `J x D` prototype matrix
    /// in place of the stored (and, for `protobin`, binarised) one. The
    /// backward pass of the result is the exact cosine gradient with respect
    /// to that matrix.
    pub fn forward_with_prototypes(&self, clip: &Clip, prototypes: &[f64]) -> Result<ProbeOutput> {
        if !self.kind.is_prototype() {
            return Err(HeadError::State(format!("{} has no prototypes", self.kind)));
        }
        if prototypes.len() != self.params[0].tensor.len() {
            return Err(HeadError::Dimension(format!(
                "{} prototype values, expected {}",
                prototypes.len(),
                self.params[0].tensor.len()
            )));
        }
        self.check_clip(clip)?;
        score(self, clip, prototypes)
    }
}

fn score(head: &HeadState, clip: &Clip, effective: &[f64]) -> Result<ProbeOutput> {
    let d = clip.dim;
    let n_tok = clip.num_tokens();
    let j_count = effective.len() / d;
    if clip.norms.iter().all(|&n| n == 0.0) {
        return Err(HeadError::Degenerate("every token has zero norm".into()));
    }

    let mut proto_norms = Vec::with_capacity(j_count);
    let mut unit_prototypes = Vec::with_capacity(effective.len());
    for (j, row) in effective.chunks_exact(d).enumerate() {
        let n = norm64(row);
        if n == 0.0 {
            return Err(HeadError::Degenerate(format!("prototype {j} has zero norm")));
        }
        proto_norms.push(n);
        unit_prototypes.extend(row.iter().map(|x| x / n));
    }

    // scores[j, n] = unit_p_j . z_n
    let mut scores = vec![0.0f64; j_count * n_tok];
    // SAFETY: all slices are sized exactly for the given strides:
    // unit_prototypes is J x D row-major, clip.tokens is N x D row-major
    // (read as D x N with strides (1, D)), scores is J x N row-major.
    unsafe {
        matrixmultiply::dgemm(
            j_count,
            d,
            n_tok,
            1.0,
            unit_prototypes.as_ptr(),
            d as isize,
            1,
            clip.tokens.as_ptr(),
            1,
            d as isize,
            0.0,
            scores.as_mut_ptr(),
            n_tok as isize,
            1,
        );
    }

    let mut pooled = vec![f64::NEG_INFINITY; j_count];
    let mut argmax = vec![0usize; j_count];
    for j in 0..j_count {
        let row = &scores[j * n_tok..(j + 1) * n_tok];
        for n in 0..n_tok {
            let norm = clip.norms[n];
            if norm == 0.0 {
                continue;
            }
            let s = row[n] / norm;
            if s > pooled[j] {
                pooled[j] = s;
                argmax[j] = n;
            }
        }
        pooled[j] = pooled[j].clamp(-1.0, 1.0);
    }

    let logits = affine(head.data(1), None, &pooled);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled,
        argmax,
        cache: Cache::Proto {
            unit_prototypes,
            proto_norms,
        },
    })
}

pub(super) fn backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Proto {
        unit_prototypes,
        proto_norms,
    } = &out.cache
    else {
        return Err(HeadError::State("prototype backward without prototype forward".into()));
    };
    let d = clip.dim;
    let dpooled = affine_backward(head.data(1), &out.pooled, dl, &mut grads.bufs[1]);
    let dproto = &mut grads.bufs[0];
    for (j, &g) in dpooled.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let n = out.argmax[j];
        let z = clip.token(n);
        let inv_z = 1.0 / clip.norms[n];
        let unit_p = &unit_prototypes[j * d..(j + 1) * d];
        let s = out.pooled[j];
        let scale = g / proto_norms[j];
        let row = &mut dproto[j * d..(j + 1) * d];
        for k in 0..d {
            row[k] += scale * (z[k] * inv_z - s * unit_p[k]);
        }
    }
    Ok(())
}

//! `conv`: same-padded k x k convolution over the (S_t, S_f) grid, ReLU,
//! global mean pool, linear classifier.

use super::{affine, affine_backward, Cache, Clip, Gradients, HeadError, HeadState, ProbeOutput, Result};

struct Geometry {
    d: usize,
    dh: usize,
    k: usize,
    s_t: usize,
    s_f: usize,
}

impl Geometry {
    fn of(head: &HeadState) -> Self {
        Self {
            d: head.dims.dim,
            dh: head.hyper.conv_hidden,
            k: head.hyper.conv_kernel,
            s_t: head.dims.s_t,
            s_f: head.dims.s_f,
        }
    }

    /// Source token for output position `n` and kernel tap `(i, j)`, if inside the grid.
    fn source(&self, n: usize, i: usize, j: usize) -> Option<usize> {
        let pad = self.k / 2;
        let (t, f) = (n / self.s_f, n % self.s_f);
        let st = (t + i).checked_sub(pad)?;
        let sf = (f + j).checked_sub(pad)?;
        (st < self.s_t && sf < self.s_f).then_some(st * self.s_f + sf)
    }

    fn tap(&self, o: usize, d: usize, i: usize, j: usize) -> usize {
        ((o * self.d + d) * self.k + i) * self.k + j
    }
}

pub(super) fn forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let g = Geometry::of(head);
    let n_tok = clip.num_tokens();
    let kernel = head.data(0);
    let bias = head.data(1);
    let mut pre = vec![0.0; g.dh * n_tok];
    for o in 0..g.dh {
        for n in 0..n_tok {
            let mut acc = bias[o] as f64;
            for i in 0..g.k {
                for j in 0..g.k {
                    let Some(m) = g.source(n, i, j) else { continue };
                    let tok = clip.token(m);
                    for (d, &x) in tok.iter().enumerate() {
                        acc += kernel[g.tap(o, d, i, j)] as f64 * x;
                    }
                }
            }
            pre[o * n_tok + n] = acc;
        }
    }
    let pooled: Vec<f64> = pre
        .chunks_exact(n_tok)
        .map(|row| row.iter().map(|&a| a.max(0.0)).sum::<f64>() / n_tok as f64)
        .collect();
    let logits = affine(head.data(2), Some(head.data(3)), &pooled);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled,
        argmax: Vec::new(),
        cache: Cache::Conv { pre },
    })
}

pub(super) fn backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Conv { pre } = &out.cache else {
        return Err(HeadError::State("conv backward without conv forward".into()));
    };
    let g = Geometry::of(head);
    let n_tok = clip.num_tokens();
    let dpooled = affine_backward(head.data(2), &out.pooled, dl, &mut grads.bufs[2]);
    super::add_into(&mut grads.bufs[3], dl);
    let (dkernel, rest) = grads.bufs.split_at_mut(1);
    let dkernel = &mut dkernel[0];
    let dbias = &mut rest[0];
    for o in 0..g.dh {
        for n in 0..n_tok {
            if pre[o * n_tok + n] <= 0.0 {
                continue;
            }
            let dpre = dpooled[o] / n_tok as f64;
            dbias[o] += dpre;
            for i in 0..g.k {
                for j in 0..g.k {
                    let Some(m) = g.source(n, i, j) else { continue };
                    for (d, &x) in clip.token(m).iter().enumerate() {
                        dkernel[g.tap(o, d, i, j)] += dpre * x;
                    }
                }
            }
        }
    }
    Ok(())
}

//! Planted-event token maps.
//!
//! Every class owns a fixed unit signature direction. A clip draws a label
//! set, writes each active class's signature (plus isotropic noise) into
//! `event_footprint` distinct token positions and fills the remaining
//! positions with background tokens that share a per-clip component, giving
//! token-to-token correlation `correlation_rho`. All random vectors are
//! isotropic gaussians with per-coordinate variance `1/D`, so their norms
//! concentrate near 1 and `noise_sigma` is a norm ratio.

use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, StoreError, TokenMap};
use crate::numerics::RngStream;

const SIGNATURE_STREAM: u64 = 0;
const CLIP_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub s_t: usize,
    pub s_f: usize,
    /// Labels per clip are drawn uniformly from `min_labels..=max_labels`.
    pub min_labels: usize,
    pub max_labels: usize,
    pub event_footprint: usize,
    pub noise_sigma: f64,
    pub correlation_rho: f64,
    /// Each planted event is scaled by a gain drawn log-uniformly from
    /// `[1, event_gain]`; background tokens have norm near 1.
    #[serde(default = "unit_gain")]
    pub event_gain: f64,
    pub num_clips: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            s_t: 16,
            s_f: 4,
            min_labels: 2,
            max_labels: 4,
            event_footprint: 1,
            noise_sigma: 0.1,
            correlation_rho: 0.5,
            event_gain: 30.0,
            num_clips: 2500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn tokens(&self) -> usize {
        self.s_t * self.s_f
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        let bad = |msg: String| Err(StoreError::InvalidSpec(msg));
        if self.classes == 0 || self.dim == 0 || self.s_t == 0 || self.s_f == 0 {
            return bad("classes, dim, s_t and s_f must be positive".into());
        }
        if self.min_labels == 0 || self.min_labels > self.max_labels || self.max_labels > self.classes {
            return bad(format!(
                "label range {}..={} invalid for {} classes",
                self.min_labels, self.max_labels, self.classes
            ));
        }
        if self.event_footprint == 0 || self.event_footprint * self.max_labels > self.tokens() {
            return bad(format!(
                "{} labels x footprint {} exceed {} tokens",
                self.max_labels,
                self.event_footprint,
                self.tokens()
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.correlation_rho) {
            return bad(format!("correlation_rho must lie in [0, 1), got {}", self.correlation_rho));
        }
        if !(self.event_gain >= 1.0 && self.event_gain.is_finite()) {
            return bad(format!("event_gain must be >= 1, got {}", self.event_gain));
        }
        Ok(())
    }
}

fn unit_gain() -> f64 {
    1.0
}

fn isotropic(rng: &mut RngStream, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|_| rng.gaussian() * scale).collect()
}

/// Unit signature direction per class, drawn from the generator seed.
pub fn class_signatures(spec: &SynthSpec) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(spec.seed, SIGNATURE_STREAM);
    (0..spec.classes)
        .map(|_| loop {
            let v = isotropic(&mut rng, spec.dim);
            let n = crate::numerics::norm64(&v);
            if n > 0.0 {
                break v.into_iter().map(|x| x / n).collect();
            }
        })
        .collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<EmbeddingRecord>, StoreError> {
    spec.validate()?;
    let signatures = class_signatures(spec);
    let mut rng = RngStream::new(spec.seed, CLIP_STREAM);
    let (d, n_tok) = (spec.dim, spec.tokens());
    let shared_w = spec.correlation_rho.sqrt();
    let own_w = (1.0 - spec.correlation_rho).sqrt();
    let mut records = Vec::with_capacity(spec.num_clips);

    for id in 0..spec.num_clips {
        let span = spec.max_labels - spec.min_labels + 1;
        let k = spec.min_labels + rng.below(span);
        let mut active: Vec<usize> = rng.permutation(spec.classes)[..k].to_vec();
        active.sort_unstable();
        let positions = rng.permutation(n_tok);

        let shared = isotropic(&mut rng, d);
        let mut tokens = vec![0.0f64; n_tok * d];
        for n in 0..n_tok {
            let own = isotropic(&mut rng, d);
            for j in 0..d {
                tokens[n * d + j] = shared_w * shared[j] + own_w * own[j];
            }
        }
        for (slot, &c) in active.iter().enumerate() {
            let gain = spec.event_gain.powf(rng.uniform());
            for &n in &positions[slot * spec.event_footprint..(slot + 1) * spec.event_footprint] {
                let noise = isotropic(&mut rng, d);
                for j in 0..d {
                    tokens[n * d + j] = gain * (signatures[c][j] + spec.noise_sigma * noise[j]);
                }
            }
        }

        let mut map = TokenMap::zeros(d, spec.s_t, spec.s_f);
        let mut cls = vec![0.0f64; d];
        for n in 0..n_tok {
            let tok: Vec<f32> = tokens[n * d..(n + 1) * d].iter().map(|&x| x as f32).collect();
            for j in 0..d {
                cls[j] += tok[j] as f64;
            }
            map.set_token(n, &tok);
        }
        let mut labels = vec![false; spec.classes];
        for &c in &active {
            labels[c] = true;
        }
        records.push(EmbeddingRecord {
            id: id as u64,
            labels,
            cls: cls.iter().map(|&x| (x / n_tok as f64) as f32).collect(),
            tokens: map,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine_slices;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 5,
            dim: 8,
            s_t: 3,
            s_f: 2,
            min_labels: 1,
            max_labels: 3,
            num_clips: 40,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_single_event_construction() {
        let spec = SynthSpec {
            min_labels: 1,
            max_labels: 1,
            noise_sigma: 0.0,
            event_gain: 1.0,
            ..small(9)
        };
        let sig = class_signatures(&spec);
        for rec in generate_synthetic(&spec).unwrap() {
            let c = rec.labels.iter().position(|&l| l).unwrap();
            let u: Vec<f32> = sig[c].iter().map(|&x| x as f32).collect();
            let hits: Vec<usize> = (0..rec.tokens.tokens())
                .filter(|&n| rec.tokens.token(n) == u)
                .collect();
            assert_eq!(hits.len(), 1);
            // cls = (u_c + sum of the N-1 background tokens) / N
            let n_tok = rec.tokens.tokens() as f64;
            for j in 0..spec.dim {
                let total: f64 = (0..rec.tokens.tokens())
                    .map(|n| rec.tokens.token(n)[j] as f64)
                    .sum();
                let background = total - u[j] as f64;
                let expect = (u[j] as f64 + background) / n_tok;
                assert!((rec.cls[j] as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn event_gains_stay_in_range() {
        let spec = SynthSpec {
            noise_sigma: 0.0,
            event_gain: 30.0,
            ..small(5)
        };
        let sig = class_signatures(&spec);
        let mut seen = (f64::MAX, f64::MIN);
        for rec in generate_synthetic(&spec).unwrap() {
            for (c, _) in rec.labels.iter().enumerate().filter(|(_, &l)| l) {
                // the planted token is gain * u_c
                let gain = (0..rec.tokens.tokens())
                    .map(|n| rec.tokens.token(n))
                    .find(|t| crate::numerics::cosine_slices(t, &sig[c].iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap() > 1.0 - 1e-6)
                    .map(|t| crate::numerics::norm(&t))
                    .unwrap();
                assert!((1.0 - 1e-5..=30.0 + 1e-4).contains(&gain), "{gain}");
                seen = (seen.0.min(gain), seen.1.max(gain));
            }
        }
        assert!(seen.0 < 3.0 && seen.1 > 10.0, "{seen:?}");
    }

    #[test]
    fn planted_tokens_align_with_signatures() {
        for &sigma in &[0.0, 0.05, 0.1, 0.2] {
            let spec = SynthSpec {
                noise_sigma: sigma,
                ..small(3)
            };
            let sig = class_signatures(&spec);
            let delta = 4.0 * sigma / (1.0 + 2.0 * sigma);
            for rec in generate_synthetic(&spec).unwrap() {
                for (c, _) in rec.labels.iter().enumerate().filter(|(_, &l)| l) {
                    let u: Vec<f32> = sig[c].iter().map(|&x| x as f32).collect();
                    let best = (0..rec.tokens.tokens())
                        .map(|n| cosine_slices(&rec.tokens.token(n), &u).unwrap())
                        .fold(f64::MIN, f64::max);
                    if sigma == 0.0 {
                        assert!((best - 1.0).abs() < 1e-6);
                    } else {
                        assert!(best >= 1.0 - delta, "sigma {sigma}: {best}");
                    }
                }
            }
        }
    }

    #[test]
    fn equal_seeds_are_bit_identical() {
        assert_eq!(generate_synthetic(&small(5)).unwrap(), generate_synthetic(&small(5)).unwrap());
        assert_ne!(generate_synthetic(&small(5)).unwrap(), generate_synthetic(&small(6)).unwrap());
    }

    #[test]
    fn label_counts_follow_uniform_range() {
        let spec = SynthSpec {
            classes: 6,
            dim: 2,
            s_t: 2,
            s_f: 2,
            min_labels: 1,
            max_labels: 4,
            num_clips: 10_000,
            seed: 17,
            ..SynthSpec::default()
        };
        let recs = generate_synthetic(&spec).unwrap();
        let n = recs.len() as f64;
        let mut counts = [0usize; 5];
        let mut per_class = [0usize; 6];
        for r in &recs {
            let k = r.labels.iter().filter(|&&l| l).count();
            counts[k] += 1;
            for (c, &l) in r.labels.iter().enumerate() {
                per_class[c] += l as usize;
            }
        }
        // multinomial over k in 1..=4, p = 1/4 each
        for &count in &counts[1..=4] {
            let p = 0.25;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((count as f64 - n * p).abs() <= 3.0 * sd, "{counts:?}");
        }
        // each class is active with probability E[k]/C = 2.5/6
        let p = 2.5 / 6.0;
        let sd = (n * p * (1.0 - p)).sqrt();
        for &c in &per_class {
            assert!((c as f64 - n * p).abs() <= 3.0 * sd, "{per_class:?}");
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = small(0);
        for bad in [
            SynthSpec { correlation_rho: 1.0, ..base.clone() },
            SynthSpec { noise_sigma: -0.1, ..base.clone() },
            SynthSpec { event_gain: 0.5, ..base.clone() },
            SynthSpec { event_footprint: 3, ..base.clone() },
            SynthSpec { min_labels: 0, ..base.clone() },
            SynthSpec { max_labels: 9, ..base.clone() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(StoreError::InvalidSpec(_))));
        }
    }
}

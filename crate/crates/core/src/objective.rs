//! Asymmetric multi-label loss and ranking / accuracy metrics.
//!
//! Positives contribute `-(1 - p)^g+ log p`, negatives use the shifted
//! probability `p_m = max(p - m, 0)` and contribute `-p_m^g- log(1 - p_m)`.
//! Logarithms are clamped at `eps` (`log(max(x, eps))`) so every term stays
//! non-negative; the loss is the mean over classes.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("expected {expected} labels, got {got}")]
    LabelLength { expected: usize, got: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("score matrix has {scores} entries but labels have {labels}")]
    Shape { scores: usize, labels: usize },
    #[error("average precision is undefined without a positive label")]
    NoPositives,
    #[error("nothing to evaluate")]
    Empty,
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub eps: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
            eps: 1e-8,
        }
    }
}

impl AslConfig {
    /// Plain binary cross-entropy as a special case.
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma_pos >= 0.0
            && self.gamma_neg >= 0.0
            && (0.0..1.0).contains(&self.margin)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::Config(format!("{self:?}")))
        }
    }
}

/// `(sigmoid(z), 1 - sigmoid(z))` without cancellation in either half.
fn sigmoid_pair(z: f64) -> (f64, f64) {
    if z >= 0.0 {
        let e = (-z).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = z.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

/// `x^g`, with `0^0 = 1`.
fn power(x: f64, g: f64) -> f64 {
    if g == 0.0 {
        1.0
    } else {
        x.powf(g)
    }
}

/// Loss and its exact gradient with respect to the logits.
pub fn asl_loss(logits: &[f64], labels: &[bool], cfg: &AslConfig) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(ObjectiveError::LabelLength {
            expected: logits.len(),
            got: labels.len(),
        });
    }
    let c = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let (p, q) = sigmoid_pair(z);
        let dp_dz = p * q;
        let (loss, dz) = if y {
            let focus = power(q, cfg.gamma_pos);
            let (log_p, dlog) = if p > cfg.eps { (p.ln(), 1.0 / p) } else { (cfg.eps.ln(), 0.0) };
            // d/dp of -(1-p)^g log p = g (1-p)^(g-1) log p - (1-p)^g / p
            let dfocus = if cfg.gamma_pos == 0.0 {
                0.0
            } else {
                cfg.gamma_pos * power(q, cfg.gamma_pos - 1.0)
            };
            (-focus * log_p, (dfocus * log_p - focus * dlog) * dp_dz)
        } else if p > cfg.margin {
            let pm = p - cfg.margin;
            let qm = 1.0 - pm;
            let focus = power(pm, cfg.gamma_neg);
            let (log_q, dlog) = if qm > cfg.eps { (qm.ln(), 1.0 / qm) } else { (cfg.eps.ln(), 0.0) };
            // d/dpm of -pm^g log(1-pm) = -g pm^(g-1) log(1-pm) + pm^g / (1-pm)
            let dfocus = if cfg.gamma_neg == 0.0 {
                0.0
            } else {
                cfg.gamma_neg * power(pm, cfg.gamma_neg - 1.0)
            };
            (-focus * log_q, (-dfocus * log_q + focus * dlog) * dp_dz)
        } else {
            (0.0, 0.0)
        };
        total += loss;
        grad.push(dz / c);
    }
    Ok((total / c, grad))
}

/// Mean precision over the ranks of the positives, scores sorted descending
/// with ties kept in their original order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(ObjectiveError::Shape {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort: equal scores keep index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(ObjectiveError::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Macro mAP over row-major `N x C` matrices; classes without a positive are
/// skipped rather than scored as zero.
pub fn mean_average_precision(scores: &[f64], labels: &[bool], classes: usize) -> Result<f64> {
    if scores.len() != labels.len() || classes == 0 || scores.len() % classes != 0 {
        return Err(ObjectiveError::Shape {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n = scores.len() / classes;
    let (mut total, mut counted) = (0.0, 0usize);
    for c in 0..classes {
        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let lab: Vec<bool> = (0..n).map(|i| labels[i * classes + c]).collect();
        match average_precision(&col, &lab) {
            Ok(ap) => {
                total += ap;
                counted += 1;
            }
            Err(ObjectiveError::NoPositives) => {}
            Err(e) => return Err(e),
        }
    }
    if counted == 0 {
        return Err(ObjectiveError::NoPositives);
    }
    Ok(total / counted as f64)
}

/// Fraction of rows whose first-maximum column equals the target.
pub fn top1_accuracy(scores: &[f64], targets: &[usize], classes: usize) -> Result<f64> {
    if classes == 0 || scores.len() != targets.len() * classes {
        return Err(ObjectiveError::Shape {
            scores: scores.len(),
            labels: targets.len(),
        });
    }
    if targets.is_empty() {
        return Err(ObjectiveError::Empty);
    }
    let correct = scores
        .chunks_exact(classes)
        .zip(targets)
        .filter(|(row, &t)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &s)| if s > row[best] { i } else { best });
            best == t
        })
        .count();
    Ok(correct as f64 / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn perfect_positive_costs_nothing() {
        let (loss, _) = asl_loss(&[40.0], &[true], &AslConfig::default()).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn bce_reduction() {
        let (loss, grad) = asl_loss(&[0.0, 0.0], &[true, true], &AslConfig::bce()).unwrap();
        assert!(close(loss, 2f64.ln(), 1e-12));
        assert!(close(grad[0], -0.25, 1e-12));
        // generic logits agree with the textbook expression
        let z = [1.3, -0.4, 2.2];
        let y = [true, false, false];
        let (loss, _) = asl_loss(&z, &y, &AslConfig::bce()).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let expect = (-(sig(1.3)).ln() - (1.0 - sig(-0.4)).ln() - (1.0 - sig(2.2)).ln()) / 3.0;
        assert!(close(loss, expect, 1e-12));
    }

    #[test]
    fn shifted_negative_example() {
        let (loss, _) = asl_loss(&[0.0], &[false], &AslConfig::default()).unwrap();
        assert!(close(loss, 0.45f64.powi(4) * -(0.55f64.ln()), 1e-15));
        assert!(close(loss, 0.024515, 1e-6));
        // below the margin a negative is free
        let (loss, grad) = asl_loss(&[-4.0], &[false], &AslConfig::default()).unwrap();
        assert_eq!((loss, grad[0]), (0.0, 0.0));
    }

    #[test]
    fn label_length_mismatch() {
        assert_eq!(
            asl_loss(&[0.0, 1.0], &[true], &AslConfig::default()).unwrap_err(),
            ObjectiveError::LabelLength { expected: 2, got: 1 }
        );
    }

    fn fd_check(logits: &[f64], labels: &[bool], cfg: &AslConfig) -> f64 {
        let (_, grad) = asl_loss(logits, labels, cfg).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..logits.len() {
            let mut up = logits.to_vec();
            let mut down = logits.to_vec();
            up[i] += h;
            down[i] -= h;
            let fd = (asl_loss(&up, labels, cfg).unwrap().0 - asl_loss(&down, labels, cfg).unwrap().0) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        let configs = [
            AslConfig::default(),
            AslConfig::bce(),
            AslConfig {
                gamma_pos: 1.0,
                gamma_neg: 2.0,
                margin: 0.1,
                eps: 1e-8,
            },
        ];
        for cfg in configs {
            for _ in 0..200 {
                let labels: Vec<bool> = (0..6).map(|_| rng.uniform() < 0.5).collect();
                let logits = loop {
                    let z: Vec<f64> = (0..6).map(|_| 3.0 * rng.gaussian()).collect();
                    let near_kink = z.iter().any(|&x| (1.0 / (1.0 + (-x).exp()) - cfg.margin).abs() < 1e-3);
                    if !near_kink {
                        break z;
                    }
                };
                assert!(fd_check(&logits, &labels, &cfg) <= 1e-5, "{cfg:?}");
            }
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.1, 0.8], &[true, false, true]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap();
        assert!(close(ap, (1.0 + 2.0 / 3.0) / 2.0, 1e-15));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, false]), Err(ObjectiveError::NoPositives));
    }

    #[test]
    fn tied_scores_use_original_order() {
        // one positive among equal scores sits at its own index
        for n in 1..7 {
            for pos in 0..n {
                let labels: Vec<bool> = (0..n).map(|i| i == pos).collect();
                let ap = average_precision(&vec![0.3; n], &labels).unwrap();
                assert!(close(ap, 1.0 / (pos + 1) as f64, 1e-15));
            }
        }
    }

    /// Precision at each positive computed by counting, with ties resolved
    /// by original index.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let n = scores.len();
        let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
        let positives: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
        if positives.is_empty() {
            return None;
        }
        let total: f64 = positives
            .iter()
            .map(|&i| {
                let rank = 1 + (0..n).filter(|&j| ahead(i, j)).count();
                let hits = 1 + (0..n).filter(|&j| labels[j] && ahead(i, j)).count();
                hits as f64 / rank as f64
            })
            .sum();
        Some(total / positives.len() as f64)
    }

    fn map_oracle(scores: &[f64], labels: &[bool], classes: usize) -> f64 {
        let n = scores.len() / classes;
        let aps: Vec<f64> = (0..classes)
            .filter_map(|c| {
                let s: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
                let l: Vec<bool> = (0..n).map(|i| labels[i * classes + c]).collect();
                ap_oracle(&s, &l)
            })
            .collect();
        aps.iter().sum::<f64>() / aps.len() as f64
    }

    #[test]
    fn map_matches_quadratic_oracle() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..100 {
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..80).map(|_| (rng.uniform() * 6.0).floor()).collect();
            let labels: Vec<bool> = (0..80).map(|_| rng.uniform() < 0.3).collect();
            if let Ok(m) = mean_average_precision(&scores, &labels, 4) {
                assert!(close(m, map_oracle(&scores, &labels, 4), 1e-9));
            }
        }
    }

    #[test]
    fn map_conventions() {
        let s = [0.2, 0.9, 0.4];
        let l = [true, false, true];
        assert_eq!(mean_average_precision(&s, &l, 1).unwrap(), average_precision(&s, &l).unwrap());
        // second class has no positives and is skipped
        let s = [0.9, 0.1, 0.1, 0.9];
        let l = [true, false, false, false];
        assert_eq!(mean_average_precision(&s, &l, 2).unwrap(), 1.0);
        // labels as scores give a perfect ranking
        let l = [true, false, true, true, false, false];
        let s: Vec<f64> = l.iter().map(|&b| b as u8 as f64).collect();
        assert_eq!(mean_average_precision(&s, &l, 3).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(top1_accuracy(&eye, &[0, 1], 2).unwrap(), 1.0);
        let anti = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(top1_accuracy(&anti, &[0, 1], 2).unwrap(), 0.0);
        let mut rng = RngStream::new(5, 0);
        let scores: Vec<f64> = (0..300).map(|_| rng.gaussian()).collect();
        let targets: Vec<usize> = (0..100).map(|_| rng.below(3)).collect();
        let mut hits = 0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &scores[i * 3..i * 3 + 3];
            let best = (0..3).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            hits += (best == t) as usize;
        }
        assert_eq!(top1_accuracy(&scores, &targets, 3).unwrap(), hits as f64 / 100.0);
    }

    proptest! {
        #[test]
        fn loss_non_negative(z in prop::collection::vec(-60.0f64..60.0, 1..12), seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0);
            let y: Vec<bool> = z.iter().map(|_| rng.uniform() < 0.5).collect();
            prop_assert!(asl_loss(&z, &y, &AslConfig::default()).unwrap().0 >= 0.0);
            prop_assert!(asl_loss(&z, &y, &AslConfig::bce()).unwrap().0 >= 0.0);
        }

        #[test]
        fn ap_monotone_invariant(s in prop::collection::vec(-5.0f64..5.0, 2..20), seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0);
            let mut y: Vec<bool> = s.iter().map(|_| rng.uniform() < 0.4).collect();
            y[0] = true;
            let t: Vec<f64> = s.iter().map(|x| (0.5 * x).exp() * 3.0 + 1.0).collect();
            let a = average_precision(&s, &y).unwrap();
            prop_assert_eq!(a, average_precision(&t, &y).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}

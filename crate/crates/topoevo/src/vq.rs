//! Vector quantization of topology-aware entity states into a discrete
//! codebook: nearest-code assignment, the stop-gradient training objective,
//! and k-means++ fitting with dead-code reseeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("state dim {got} does not match codebook dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    pub entries: Vec<Vec<f64>>,
    pub beta: f64,
    pub usage: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(entries: Vec<Vec<f64>>, beta: f64) -> Self {
        let dim = entries.first().map(|e| e.len()).unwrap_or(0);
        let usage = vec![0; entries.len()];
        Self {
            dim,
            entries,
            beta,
            usage,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest code by squared Euclidean distance; ties break to the lowest
    /// index. Returns `(code, entry, distance)`.
    pub fn quantize(&self, h: &[f64]) -> Result<(usize, &[f64], f64), VqError> {
        if self.entries.is_empty() {
            return Err(VqError::EmptyCodebook);
        }
        if h.len() != self.dim {
            return Err(VqError::DimMismatch {
                got: h.len(),
                want: self.dim,
            });
        }
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.entries.iter().enumerate() {
            let d = sq_dist(h, c);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        Ok((best, &self.entries[best], best_d))
    }

    pub fn assign_batch(&self, states: &[Vec<f64>]) -> Result<Vec<usize>, VqError> {
        states.iter().map(|h| Ok(self.quantize(h)?.0)).collect()
    }

    /// Recount usage against a batch of states.
    pub fn refresh_usage(&mut self, states: &[Vec<f64>]) -> Result<(), VqError> {
        self.usage = vec![0; self.entries.len()];
        for h in states {
            let (k, _, _) = self.quantize(h)?;
            self.usage[k] += 1;
        }
        Ok(())
    }
}

/// Stop-gradient VQ objective over a batch:
/// `sum ||sg[h] - c||^2 + beta * sum ||h - sg[c]||^2`.
/// The first term moves only codes, the second only the encoder.
pub fn vq_loss(
    tape: &mut Tape,
    states: &[TensorId],
    codes: &[TensorId],
    beta: f64,
) -> Result<TensorId, VqError> {
    assert_eq!(states.len(), codes.len(), "paired states and codes");
    let mut terms: Vec<TensorId> = Vec::with_capacity(states.len());
    for (&h, &c) in states.iter().zip(codes) {
        let hs = tape.stop_gradient(h);
        let d1 = tape.sub(hs, c)?;
        let d1sq = tape.mul(d1, d1)?;
        let t1 = tape.sum(d1sq);
        let cs = tape.stop_gradient(c);
        let d2 = tape.sub(h, cs)?;
        let d2sq = tape.mul(d2, d2)?;
        let t2 = tape.sum(d2sq);
        let t2 = tape.scale(t2, beta);
        terms.push(tape.add(t1, t2)?);
    }
    if terms.is_empty() {
        return Ok(tape.constant(&[1], vec![0.0]));
    }
    let stacked = tape.concat(&terms)?;
    Ok(tape.sum(stacked))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Total quantization error after each epoch.
    pub error_history: Vec<f64>,
    /// `(epoch, code)` pairs where a dead code was reseeded.
    pub reseed_events: Vec<(usize, usize)>,
    /// Set when the data had fewer distinct states than codes; reseeding is
    /// disabled in that case.
    pub degenerate_data: bool,
}

fn kmeanspp_init(states: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(states[rng.gen_range(0..states.len())].clone());
    while centers.len() < k {
        let d2: Vec<f64> = states
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| sq_dist(x, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // all mass on existing centers: duplicate a random state
            centers.push(states[rng.gen_range(0..states.len())].clone());
            continue;
        }
        let mut r = rng.gen_range(0.0..total);
        let mut pick = states.len() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if r < w {
                pick = i;
                break;
            }
            r -= w;
        }
        centers.push(states[pick].clone());
    }
    centers
}

/// Fit a codebook to fixed states: k-means++ seeding, then code-only updates
/// (Lloyd steps). Dead codes are reseeded to random in-batch states unless
/// the data has fewer distinct points than codes.
pub fn fit_codebook(
    states: &[Vec<f64>],
    k: usize,
    epochs: usize,
    beta: f64,
    seed: u64,
) -> (Codebook, FitReport) {
    assert!(!states.is_empty(), "cannot fit a codebook to no states");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for s in states {
        if !distinct.iter().any(|d| *d == s) {
            distinct.push(s);
        }
        if distinct.len() > k {
            break;
        }
    }
    let degenerate = distinct.len() < k;
    let mut entries = kmeanspp_init(states, k, &mut rng);
    let mut report = FitReport {
        error_history: Vec::with_capacity(epochs),
        reseed_events: Vec::new(),
        degenerate_data: degenerate,
    };
    for epoch in 0..epochs {
        let mut sums = vec![vec![0.0; states[0].len()]; k];
        let mut counts = vec![0usize; k];
        let mut err = 0.0;
        for h in states {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, entry) in entries.iter().enumerate() {
                let d = sq_dist(h, entry);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            err += best_d;
            counts[best] += 1;
            for (acc, &x) in sums[best].iter_mut().zip(h) {
                *acc += x;
            }
        }
        report.error_history.push(err);
        for c in 0..k {
            if counts[c] > 0 {
                for (e, s) in entries[c].iter_mut().zip(&sums[c]) {
                    *e = s / counts[c] as f64;
                }
            } else if !degenerate {
                entries[c] = states[rng.gen_range(0..states.len())].clone();
                report.reseed_events.push((epoch, c));
            }
        }
    }
    let mut codebook = Codebook::new(entries, beta);
    codebook.refresh_usage(states).expect("states fit codebook dims");
    (codebook, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_exact_and_tie() {
        let entries: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 0.0]).collect();
        let cb = Codebook::new(entries, 0.25);
        let (k, c, d) = cb.quantize(&[3.0, 0.0]).unwrap();
        assert_eq!(k, 3);
        assert_eq!(c, &[3.0, 0.0]);
        assert_eq!(d, 0.0);
        // equidistant between code 0 and code 1
        let (k, _, _) = cb.quantize(&[0.5, 0.0]).unwrap();
        assert_eq!(k, 0);
        assert!(matches!(
            Codebook::new(vec![], 0.25).quantize(&[1.0]),
            Err(VqError::EmptyCodebook)
        ));
    }

    #[test]
    fn quantize_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let entries: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let cb = Codebook::new(entries.clone(), 0.25);
        for _ in 0..1000 {
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (k, _, d) = cb.quantize(&q).unwrap();
            let brute = entries
                .iter()
                .enumerate()
                .map(|(i, c)| (i, sq_dist(&q, c)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(k, brute.0);
            assert_eq!(d, brute.1);
        }
    }

    #[test]
    fn loss_zero_when_exact_and_known_value() {
        let mut tape = Tape::new();
        let h = tape.constant(&[2], vec![1.0, 0.0]);
        let c_same = tape.constant(&[2], vec![1.0, 0.0]);
        let loss = vq_loss(&mut tape, &[h], &[c_same], 0.25).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);

        let c_zero = tape.constant(&[2], vec![0.0, 0.0]);
        let loss = vq_loss(&mut tape, &[h], &[c_zero], 0.25).unwrap();
        assert!((tape.scalar(loss) - 1.25).abs() < 1e-12);
    }

    #[test]
    fn stop_gradient_splits_terms() {
        let mut tape = Tape::new();
        let h = tape.leaf(&[2], vec![1.0, 0.0], true);
        let c = tape.leaf(&[2], vec![0.0, 0.0], true);
        // beta = 0: the encoder side must receive zero gradient
        let loss = vq_loss(&mut tape, &[h], &[c], 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(h).iter().all(|&g| g == 0.0));
        assert!(grads.get(c).iter().any(|&g| g != 0.0));

        let mut tape = Tape::new();
        let h = tape.leaf(&[2], vec![1.0, 0.0], true);
        let c = tape.leaf(&[2], vec![0.0, 0.0], true);
        let loss = vq_loss(&mut tape, &[h], &[c], 0.25).unwrap();
        let grads = tape.backward(loss).unwrap();
        // commitment term: d/dh beta*||h - sg[c]||^2 = 2*beta*(h - c)
        assert!((grads.get(h)[0] - 0.5).abs() < 1e-12);
        // code term: d/dc ||sg[h] - c||^2 = -2*(h - c)
        assert!((grads.get(c)[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_repeated_points() {
        let mut states = Vec::new();
        for i in 0..4 {
            for _ in 0..25 {
                states.push(vec![i as f64 * 10.0, -(i as f64)]);
            }
        }
        let (cb, report) = fit_codebook(&states, 4, 20, 0.25, 1);
        assert!(report.error_history.last().unwrap() < &1e-9);
        assert!(!report.degenerate_data);
        let mut centers: Vec<f64> = cb.entries.iter().map(|c| c[0]).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, vec![0.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn fit_error_non_increasing_without_reseeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let (_, report) = fit_codebook(&states, 8, 15, 0.25, 7);
        let mut reseed_epochs: Vec<usize> =
            report.reseed_events.iter().map(|&(e, _)| e).collect();
        reseed_epochs.dedup();
        for w in report.error_history.windows(2) {
            let epoch = report
                .error_history
                .iter()
                .position(|x| x == &w[0])
                .unwrap();
            if !reseed_epochs.contains(&epoch) {
                assert!(w[1] <= w[0] + 1e-9, "error increased without reseed");
            }
        }
    }

    #[test]
    fn degenerate_data_disables_reseeding() {
        let states = vec![vec![1.0, 1.0]; 50];
        let (cb, report) = fit_codebook(&states, 8, 5, 0.25, 2);
        assert!(report.degenerate_data);
        assert!(report.reseed_events.is_empty());
        assert_eq!(cb.len(), 8);
        assert!(report.error_history.last().unwrap() < &1e-12);
    }

    #[test]
    fn usage_counts_match_assignments() {
        let states = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![5.0, 5.0],
        ];
        let (cb, _) = fit_codebook(&states, 2, 10, 0.25, 5);
        let total: usize = cb.usage.iter().sum();
        assert_eq!(total, 3);
        let assigns = cb.assign_batch(&states).unwrap();
        for k in 0..cb.len() {
            assert_eq!(cb.usage[k], assigns.iter().filter(|&&a| a == k).count());
        }
    }
}

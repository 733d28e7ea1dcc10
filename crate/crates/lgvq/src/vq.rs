//! Vector quantization: nearest-codeword assignment and the three-term
//! quantizer loss with its stop-gradient routing.

use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::rngs::{derive, Stream};
use crate::tensor::{Tape, TensorId};

/// Codebook initialized U(-1/K, 1/K), the classic VQ-VAE range.
pub fn init_codebook(store: &mut ParamStore, seed: u64, k: usize, d: usize) -> ParamId {
    let mut rng = derive(seed, Stream::Init, 1);
    let lim = 1.0 / k as f64;
    let values: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-lim..lim)).collect();
    store.add("codebook", &[k, d], values)
}

/// Nearest codeword per feature row by squared Euclidean distance.
/// Ties go to the lowest index: only a strictly smaller distance replaces
/// the current best, and candidates are scanned in index order.
pub fn quantize(features: &[f64], codebook: &[f64], d: usize) -> Vec<usize> {
    assert_eq!(features.len() % d, 0, "feature buffer not a multiple of d");
    assert_eq!(codebook.len() % d, 0, "codebook buffer not a multiple of d");
    let k = codebook.len() / d;
    assert!(k > 0, "empty codebook");
    let mut out = Vec::with_capacity(features.len() / d);
    for row in features.chunks_exact(d) {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (j, code) in codebook.chunks_exact(d).enumerate() {
            let mut dist = 0.0;
            for i in 0..d {
                let diff = row[i] - code[i];
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// The three quantizer loss terms, each a mean squared error:
/// reconstruction, codebook pull (gradient flows only to the codebook), and
/// the commitment term weighted by `omega` (gradient flows only to the
/// encoder features).
pub struct VqLossParts {
    pub total: TensorId,
    pub reconstruction: TensorId,
    pub codebook: TensorId,
    pub commitment: TensorId,
}

pub fn vq_loss(
    t: &mut Tape,
    x: TensorId,
    x_hat: TensorId,
    z_e: TensorId,
    z_q: TensorId,
    omega: f64,
) -> VqLossParts {
    let reconstruction = t.mse(x, x_hat);
    let ze_sg = t.detach(z_e);
    let codebook = t.mse(ze_sg, z_q);
    let zq_sg = t.detach(z_q);
    let commit_raw = t.mse(z_e, zq_sg);
    let commitment = t.scale(commit_raw, omega);
    let a = t.add(reconstruction, codebook);
    let total = t.add(a, commitment);
    VqLossParts {
        total,
        reconstruction,
        codebook,
        commitment,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reference: recompute every distance and argmin with
    /// explicit lowest-index tie handling.
    fn quantize_oracle(features: &[f64], codebook: &[f64], d: usize) -> Vec<usize> {
        let k = codebook.len() / d;
        features
            .chunks_exact(d)
            .map(|row| {
                let dists: Vec<f64> = (0..k)
                    .map(|j| {
                        row.iter()
                            .zip(&codebook[j * d..(j + 1) * d])
                            .map(|(&a, &b)| (a - b) * (a - b))
                            .sum()
                    })
                    .collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                dists.iter().position(|&v| v == min).unwrap()
            })
            .collect()
    }

    #[test]
    fn matches_oracle_on_random_inputs() {
        let mut rng = derive(42, Stream::Init, 99);
        let d = 8;
        let k = 16;
        let codebook: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let features: Vec<f64> = (0..50 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(
            quantize(&features, &codebook, d),
            quantize_oracle(&features, &codebook, d)
        );
    }

    #[test]
    fn exact_tie_selects_lowest_index() {
        // midpoint of two codewords: distances are bit-identical
        let codebook = vec![0.0, 0.0, 1.0, 1.0];
        let features = vec![0.5, 0.5];
        assert_eq!(quantize(&features, &codebook, 2), vec![0]);
        // duplicate codewords: same distance at indices 1 and 2
        let codebook = vec![9.0, 9.0, 1.0, 1.0, 1.0, 1.0];
        let features = vec![1.1, 0.9];
        assert_eq!(quantize(&features, &codebook, 2), vec![1]);
    }

    #[test]
    fn loss_matches_hand_computation() {
        // rec = (0.5)^2 = 0.25
        // codebook = ((1-0.8)^2 + (0-0.2)^2)/2 = 0.04
        // commitment = 0.25 * 0.04 = 0.01  ->  total 0.30
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![0.0]);
        let x_hat = t.constant(&[1], vec![0.5]);
        let z_e = t.constant(&[1, 2], vec![1.0, 0.0]);
        let z_q = t.constant(&[1, 2], vec![0.8, 0.2]);
        let parts = vq_loss(&mut t, x, x_hat, z_e, z_q, 0.25);
        assert!((t.value(parts.reconstruction)[0] - 0.25).abs() < 1e-12);
        assert!((t.value(parts.codebook)[0] - 0.04).abs() < 1e-12);
        assert!((t.value(parts.commitment)[0] - 0.01).abs() < 1e-12);
        assert!((t.value(parts.total)[0] - 0.30).abs() < 1e-12);
    }

    #[test]
    fn gradient_routing_is_exact() {
        let mut t = Tape::new();
        let x = t.constant(&[1], vec![0.0]);
        let x_hat = t.constant(&[1], vec![0.5]);
        let z_e = t.constant(&[1, 2], vec![1.0, 0.0]);
        let z_q = t.constant(&[1, 2], vec![0.8, 0.2]);
        let parts = vq_loss(&mut t, x, x_hat, z_e, z_q, 0.25);

        // codebook term: gradient reaches z_q, never z_e
        let g = t.backward(parts.codebook);
        assert_eq!(g.of(z_e), &[0.0, 0.0]);
        assert!(g.of(z_q).iter().any(|&v| v != 0.0));

        // commitment term: gradient reaches z_e, never z_q
        let g = t.backward(parts.commitment);
        assert_eq!(g.of(z_q), &[0.0, 0.0]);
        assert!(g.of(z_e).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_reconstruction_updates_encoder_features() {
        // decode(z) = 2*z; with straight-through the reconstruction gradient
        // arrives at the encoder features as if quantization were identity.
        let mut t = Tape::new();
        let z_e = t.constant(&[1, 2], vec![0.3, 0.6]);
        let z_q = t.constant(&[1, 2], vec![0.0, 1.0]);
        let st = t.straight_through(z_e, z_q);
        let x_hat = t.scale(st, 2.0);
        let x = t.constant(&[1, 2], vec![1.0, 1.0]);
        let loss = t.mse(x, x_hat);
        // forward uses quantized values: x_hat = [0, 2]
        assert_eq!(t.value(x_hat), &[0.0, 2.0]);
        let g = t.backward(loss);
        // d/dx_hat mse = 2*(x_hat - x)/n = [-1, 1]; chain through scale(2): [-2, 2]
        assert_eq!(g.of(z_e), &[-2.0, 2.0]);
        assert_eq!(g.of(z_q), &[0.0, 0.0]);
    }

    #[test]
    fn codebook_init_is_bounded_and_deterministic() {
        let mut s1 = ParamStore::new();
        let p1 = init_codebook(&mut s1, 5, 64, 16);
        let mut s2 = ParamStore::new();
        let p2 = init_codebook(&mut s2, 5, 64, 16);
        assert_eq!(s1.get(p1).value, s2.get(p2).value);
        let lim = 1.0 / 64.0;
        assert!(s1.get(p1).value.iter().all(|v| v.abs() < lim));
    }
}

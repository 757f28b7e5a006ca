//! Planted-mechanism networks and synthetic activations.
//!
//! Desk-scale models cannot reproduce large-model accuracy numbers, so
//! the analysis machinery is validated against constructions with known
//! ground truth instead: a network whose output is determined by a known
//! low-rank subspace of its hidden state, and activation sets with known
//! sinusoidal structure. These are first-class fixtures used by both unit
//! tests and the acceptance suite.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::interventions::{PatchPair, SitePatchModel};
use crate::linalg::qr_orthonormalize;
use crate::rng::{rng_from_seed, sample_normal, LabRng};
use crate::tensor::Tensor;

/// Least common multiple of small integer periods.
fn lcm(values: &[usize]) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    values.iter().fold(1, |acc, &v| acc / gcd(acc, v) * v)
}

/// A mutually orthonormal (sin, cos) direction pair per period.
#[derive(Debug, Clone)]
pub struct FourierFeatureSpace {
    pub d: usize,
    pub periods: Vec<usize>,
    /// Flattened direction list: columns 2i, 2i+1 are (u, v) for period i.
    pub directions: Tensor, // [d x 2|periods|]
}

impl FourierFeatureSpace {
    pub fn random(d: usize, periods: &[usize], seed: u64) -> Result<FourierFeatureSpace> {
        let mut rng = rng_from_seed(seed);
        let raw = Tensor::randn(&[d, 2 * periods.len()], 1.0, &mut rng);
        let directions = qr_orthonormalize(&raw)?;
        assert_eq!(directions.cols(), 2 * periods.len(), "direction set collapsed");
        Ok(FourierFeatureSpace { d, periods: periods.to_vec(), directions })
    }

    pub fn sin_dir(&self, period_idx: usize) -> Tensor {
        self.directions.column(2 * period_idx)
    }

    pub fn cos_dir(&self, period_idx: usize) -> Tensor {
        self.directions.column(2 * period_idx + 1)
    }

    /// Hidden state encoding integer `n`: amp * (sin, cos) pairs on the
    /// planted planes plus isotropic Gaussian noise.
    pub fn encode(&self, n: i64, amp: f64, noise: f64, rng: &mut LabRng) -> Tensor {
        self.encode_multi(&vec![n; self.periods.len()], amp, noise, rng)
    }

    /// Like `encode` but with an independent integer per plane, so some
    /// planes can carry distractor content.
    pub fn encode_multi(&self, values: &[i64], amp: f64, noise: f64, rng: &mut LabRng) -> Tensor {
        assert_eq!(values.len(), self.periods.len());
        let mut h = vec![0.0f64; self.d];
        for (pi, (&t, &n)) in self.periods.iter().zip(values).enumerate() {
            let ang = std::f64::consts::TAU * n as f64 / t as f64;
            let (s, c) = ang.sin_cos();
            let u = self.sin_dir(pi);
            let v = self.cos_dir(pi);
            for i in 0..self.d {
                h[i] += amp * (s * u.data()[i] as f64 + c * v.data()[i] as f64);
            }
        }
        for hv in h.iter_mut() {
            *hv += noise * sample_normal(rng);
        }
        Tensor::from_raw(vec![self.d], h.iter().map(|&v| v as f32).collect())
    }

    /// The subspace spanned by the planes of the given period indices.
    pub fn plane_span(&self, period_indices: &[usize]) -> Tensor {
        let d = self.d;
        let k = 2 * period_indices.len();
        let mut data = vec![0.0f32; d * k];
        for (out_j, &pi) in period_indices.iter().enumerate() {
            for (half, col) in [self.sin_dir(pi), self.cos_dir(pi)].iter().enumerate() {
                for i in 0..d {
                    data[i * k + 2 * out_j + half] = col.data()[i];
                }
            }
        }
        Tensor::from_raw(vec![d, k], data)
    }
}

/// Two-layer planted network: hidden states carry an integer sum on
/// known Fourier planes; a linear decoder reads *only* those planes and
/// classifies the sum modulo the lcm of its periods.
pub struct PlantedFourierNet {
    pub space: Arc<FourierFeatureSpace>,
    /// Indices into `space.periods` the decoder listens to.
    pub decoder_periods: Vec<usize>,
    pub n_classes: usize,
    /// [d x n_classes]; logits = h . decode.
    pub decode: Tensor,
    pub states: Vec<Tensor>,
    pub sums: Vec<i64>,
}

impl PlantedFourierNet {
    /// `examples` are the integers to encode; the decoder classifies them
    /// modulo lcm(periods[decoder_periods]). Planes outside
    /// `decoder_periods` carry independent random integers, so they act
    /// as structured distractors the decoder ignores.
    pub fn build(
        space: Arc<FourierFeatureSpace>,
        decoder_periods: &[usize],
        examples: &[i64],
        amp: f64,
        noise: f64,
        beta: f64,
        seed: u64,
    ) -> PlantedFourierNet {
        let periods: Vec<usize> =
            decoder_periods.iter().map(|&i| space.periods[i]).collect();
        let n_classes = lcm(&periods);
        let d = space.d;
        let mut decode = vec![0.0f32; d * n_classes];
        for c in 0..n_classes {
            for &pi in decoder_periods {
                let t = space.periods[pi] as f64;
                let ang = std::f64::consts::TAU * c as f64 / t;
                let (s, co) = ang.sin_cos();
                let u = space.sin_dir(pi);
                let v = space.cos_dir(pi);
                for i in 0..d {
                    decode[i * n_classes + c] +=
                        (beta * (s * u.data()[i] as f64 + co * v.data()[i] as f64)) as f32;
                }
            }
        }
        let mut rng = rng_from_seed(seed);
        let states: Vec<Tensor> = examples
            .iter()
            .map(|&n| {
                let values: Vec<i64> = (0..space.periods.len())
                    .map(|pi| {
                        if decoder_periods.contains(&pi) {
                            n
                        } else {
                            use rand::Rng;
                            rng.gen_range(0..10_000)
                        }
                    })
                    .collect();
                space.encode_multi(&values, amp, noise, &mut rng)
            })
            .collect();
        PlantedFourierNet {
            space,
            decoder_periods: decoder_periods.to_vec(),
            n_classes,
            decode: Tensor::from_raw(vec![d, n_classes], decode),
            states,
            sums: examples.to_vec(),
        }
    }

    pub fn class_of(&self, sum: i64) -> u32 {
        sum.rem_euclid(self.n_classes as i64) as u32
    }

    /// The planted causally-relevant subspace (the decoder's planes).
    pub fn planted_subspace(&self) -> Tensor {
        self.space.plane_span(&self.decoder_periods)
    }

    /// Pairs with interchange targets under the planted causal rule: the
    /// patched output must decode the counterfactual's sum.
    pub fn make_pairs(&self, n_pairs: usize, seed: u64) -> Vec<PatchPair> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        (0..n_pairs)
            .map(|_| {
                let original = rng.gen_range(0..self.states.len());
                let counterfactual = rng.gen_range(0..self.states.len());
                PatchPair {
                    original,
                    counterfactual,
                    target: self.class_of(self.sums[counterfactual]),
                }
            })
            .collect()
    }
}

impl SitePatchModel for PlantedFourierNet {
    fn d_model(&self) -> usize {
        self.space.d
    }

    fn n_examples(&self) -> usize {
        self.states.len()
    }

    fn site_state(&self, ex: usize) -> &Tensor {
        &self.states[ex]
    }

    fn logits_from_site(&self, _ex: usize, h: &Tensor) -> Result<Tensor> {
        let row = Tensor::from_raw(vec![1, h.numel()], h.data().to_vec());
        row.matmul(&self.decode)
    }

    fn logits_on_tape(&self, tape: &mut Tape, _ex: usize, h: Var) -> Result<Var> {
        let dec = tape.constant(self.decode.clone());
        tape.matmul(h, dec)
    }
}

/// Labeled synthetic activations: (sum n, activation) pairs with the sum
/// planted as sin/cos pairs of the given periods.
pub fn planted_fourier_activations(
    d: usize,
    periods: &[usize],
    sums: &[i64],
    amp: f64,
    noise: f64,
    seed: u64,
) -> Result<(Arc<FourierFeatureSpace>, Vec<(i64, Tensor)>)> {
    let space = Arc::new(FourierFeatureSpace::random(d, periods, seed)?);
    let mut rng = rng_from_seed(seed.wrapping_add(1));
    let acts = sums.iter().map(|&n| (n, space.encode(n, amp, noise, &mut rng))).collect();
    Ok((space, acts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::eval_iia;
    use crate::model::argmax_row;

    #[test]
    fn lcm_of_decoder_periods() {
        assert_eq!(lcm(&[2, 5, 10]), 10);
        assert_eq!(lcm(&[3, 8]), 24);
        assert_eq!(lcm(&[7]), 7);
    }

    #[test]
    fn planted_net_classifies_its_own_states() {
        let space = Arc::new(FourierFeatureSpace::random(32, &[3, 8], 7).unwrap());
        let sums: Vec<i64> = (0..48).collect();
        let net = PlantedFourierNet::build(space, &[0, 1], &sums, 3.0, 0.01, 8.0, 11);
        assert_eq!(net.n_classes, 24);
        for (ex, &n) in net.sums.iter().enumerate() {
            let logits = net.logits_from_site(ex, net.site_state(ex)).unwrap();
            assert_eq!(argmax_row(logits.row(0)), net.class_of(n), "sum {n}");
        }
    }

    #[test]
    fn planted_subspace_patching_achieves_perfect_iia() {
        let space = Arc::new(FourierFeatureSpace::random(48, &[4, 9], 3).unwrap());
        let sums: Vec<i64> = (0..72).collect();
        let net = PlantedFourierNet::build(space, &[0, 1], &sums, 3.0, 0.01, 8.0, 4);
        let pairs = net.make_pairs(200, 5);
        let iia = eval_iia(&net, &net.planted_subspace(), &pairs).unwrap();
        assert!(iia > 0.999, "planted-basis IIA {iia}");
    }

    #[test]
    fn decoder_ignores_directions_outside_its_planes() {
        // A net whose decoder listens to one of two planted planes: moving
        // the state along the ignored plane leaves logits unchanged.
        let space = Arc::new(FourierFeatureSpace::random(24, &[5, 7], 9).unwrap());
        let sums: Vec<i64> = (0..35).collect();
        let net = PlantedFourierNet::build(space.clone(), &[0], &sums, 2.0, 0.0, 4.0, 2);
        let h = net.site_state(3);
        let mut shifted = h.clone();
        let ignored = space.sin_dir(1);
        for (s, &u) in shifted.data_mut().iter_mut().zip(ignored.data()) {
            *s += 5.0 * u;
        }
        let a = net.logits_from_site(3, h).unwrap();
        let b = net.logits_from_site(3, &shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}

//! NMSE and generalized cosine similarity.

use crate::channel_sim::ChannelMatrix;
use crate::error::{Error, Result};
use crate::tensor_core::{NodeId, Tape, Tensor};

/// Summary of reconstruction quality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub gcs: f64,
}

impl MetricValue {
    pub fn new(nmse_linear: f64, gcs: f64) -> Result<Self> {
        Ok(Self {
            nmse_linear,
            nmse_db: nmse_db(nmse_linear)?,
            gcs,
        })
    }
}

fn check_shapes(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<()> {
    if h.shape() != h_hat.shape() {
        return Err(Error::dim(
            "metric",
            &[h.n_tx(), h.n_sub()],
            &[h_hat.n_tx(), h_hat.n_sub()],
        ));
    }
    Ok(())
}

/// `‖Ĥ − H‖²_F / ‖H‖²_F`.
pub fn nmse(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64> {
    check_shapes(h, h_hat)?;
    let den = h.frobenius_sq();
    if den == 0.0 {
        return Err(Error::Contract("NMSE against an all-zero reference".into()));
    }
    let num: f64 = h.data().iter().zip(h_hat.data()).map(|(a, b)| (b - a).norm_sqr()).sum();
    Ok(num / den)
}

pub fn nmse_db(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Contract(format!("NMSE must be positive for dB, got {x}")));
    }
    Ok(10.0 * x.log10())
}

/// Mean over subcarriers of `|ĥₙᴴ hₙ| / (‖ĥₙ‖ ‖hₙ‖)`, in `[0, 1]`.
pub fn gcs(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64> {
    check_shapes(h, h_hat)?;
    let (nt, nc) = h.shape();
    let mut total = 0.0;
    for n in 0..nc {
        let (mut dot, mut nh, mut nhat) = (num_complex::Complex64::new(0.0, 0.0), 0.0, 0.0);
        for a in 0..nt {
            let (x, y) = (h.get(a, n), h_hat.get(a, n));
            dot += y.conj() * x;
            nh += x.norm_sqr();
            nhat += y.norm_sqr();
        }
        if nh == 0.0 || nhat == 0.0 {
            return Err(Error::Contract(format!("zero channel vector at subcarrier {n}")));
        }
        total += dot.norm() / (nh.sqrt() * nhat.sqrt());
    }
    Ok(total / nc as f64)
}

/// Loss form of the cosine similarity, `−gcs`.
pub fn cosine_loss(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64> {
    gcs(h, h_hat).map(|v| -v)
}

/// Mean metrics over paired samples; NMSE is averaged linearly before the
/// dB conversion.
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a ChannelMatrix, &'a ChannelMatrix)>,
) -> Result<MetricValue> {
    let (mut n_sum, mut g_sum, mut count) = (0.0, 0.0, 0usize);
    for (h, h_hat) in pairs {
        n_sum += nmse(h, h_hat)?;
        g_sum += gcs(h, h_hat)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("no samples to evaluate".into()));
    }
    MetricValue::new(n_sum / count as f64, g_sum / count as f64)
}

/// Differentiable batch NMSE: mean over the leading axis of
/// `‖pred_b − target_b‖² / ‖target_b‖²`.
///
/// `pred` and `target` share a shape `[B, ...]`; any fixed real layout of
/// the channel works since the loss is a sum of squares.
pub fn loss_nmse(tape: &mut Tape, pred: NodeId, target: &Tensor) -> Result<NodeId> {
    let shape = tape.shape(pred).to_vec();
    if shape != target.shape() {
        return Err(Error::dim("loss_nmse", &shape, target.shape()));
    }
    let batch = *shape
        .first()
        .ok_or_else(|| Error::Contract("loss on a scalar".into()))?;
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let per = target.len() / batch;
    let inv_energy = target
        .data()
        .chunks(per)
        .enumerate()
        .map(|(b, row)| {
            let e: f64 = row.iter().map(|v| v * v).sum();
            if e == 0.0 {
                Err(Error::Contract(format!("all-zero reference in batch item {b}")))
            } else {
                Ok(1.0 / e)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let t = tape.input(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    let flat = tape.reshape(sq, &[batch, per])?;
    let per_sample = tape.sum_last(flat)?;
    let w = tape.input(Tensor::new(&[batch], inv_energy)?);
    let weighted = tape.mul(per_sample, w)?;
    tape.mean(weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::grad_check;
    use crate::transforms::channel_to_rows;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_h(nt: usize, nc: usize, seed: u64) -> ChannelMatrix {
        ChannelMatrix::random(nt, nc, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct double loop over real components, independent of `nmse`.
    fn nmse_oracle(h: &ChannelMatrix, g: &ChannelMatrix) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..h.n_tx() {
            for n in 0..h.n_sub() {
                let (x, y) = (h.get(a, n), g.get(a, n));
                num += (y.re - x.re).powi(2) + (y.im - x.im).powi(2);
                den += x.re * x.re + x.im * x.im;
            }
        }
        num / den
    }

    fn gcs_oracle(h: &ChannelMatrix, g: &ChannelMatrix) -> f64 {
        let mut total = 0.0;
        for n in 0..h.n_sub() {
            let (mut re, mut im, mut a2, mut b2) = (0.0, 0.0, 0.0, 0.0);
            for a in 0..h.n_tx() {
                let (x, y) = (h.get(a, n), g.get(a, n));
                // conj(y)·x
                re += y.re * x.re + y.im * x.im;
                im += y.re * x.im - y.im * x.re;
                a2 += x.re * x.re + x.im * x.im;
                b2 += y.re * y.re + y.im * y.im;
            }
            total += (re * re + im * im).sqrt() / (a2.sqrt() * b2.sqrt());
        }
        total / h.n_sub() as f64
    }

    #[test]
    fn nmse_anchor_cases() {
        let h = rand_h(4, 3, 1);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert_eq!(nmse(&h, &ChannelMatrix::zeros(4, 3)).unwrap(), 1.0);
        assert!((nmse(&h, &h.map(|v| v * 2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!(nmse(&ChannelMatrix::zeros(4, 3), &h).is_err());
        assert!(nmse(&h, &rand_h(3, 3, 1)).is_err());
    }

    #[test]
    fn db_conversion() {
        assert_eq!(nmse_db(1.0).unwrap(), 0.0);
        assert!((nmse_db(0.1).unwrap() + 10.0).abs() < 1e-12);
        assert!((nmse_db(0.01).unwrap() + 20.0).abs() < 1e-12);
        assert!(nmse_db(0.0).is_err());
        assert!(nmse_db(-1.0).is_err());
    }

    #[test]
    fn gcs_anchor_cases() {
        let h = rand_h(4, 3, 2);
        let rotated = h.map(|v| v * Complex64::from_polar(2.5, 0.7));
        assert!((gcs(&h, &rotated).unwrap() - 1.0).abs() < 1e-12);
        // Orthogonal columns: swap (re, im) structure via a 2-antenna construction.
        let a = ChannelMatrix::from_fn(2, 3, |k, _| {
            if k == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        let b = ChannelMatrix::from_fn(2, 3, |k, _| {
            if k == 1 {
                Complex64::new(0.0, 2.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        assert_eq!(gcs(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine_loss(&h, &h).unwrap(), -gcs(&h, &h).unwrap());
        let mut z = h.clone();
        for a in 0..4 {
            z.set(a, 1, Complex64::new(0.0, 0.0));
        }
        let err = gcs(&h, &z).unwrap_err().to_string();
        assert!(err.contains("subcarrier 1"), "{err}");
    }

    #[test]
    fn metrics_match_naive_loops() {
        for s in 0..100 {
            let h = rand_h(4, 3, s);
            let g = rand_h(4, 3, 1000 + s);
            assert!((nmse(&h, &g).unwrap() - nmse_oracle(&h, &g)).abs() < 1e-12);
            assert!((gcs(&h, &g).unwrap() - gcs_oracle(&h, &g)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn gcs_invariant_to_per_column_scaling(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = ChannelMatrix::random(5, 4, &mut rng);
            let g = ChannelMatrix::random(5, 4, &mut rng);
            let factors: Vec<Complex64> = (0..4)
                .map(|_| Complex64::from_polar(rng.random_range(0.1..10.0), rng.random_range(-3.0..3.0)))
                .collect();
            let gs = ChannelMatrix::from_fn(5, 4, |a, n| g.get(a, n) * factors[n]);
            let base = gcs(&h, &g).unwrap();
            prop_assert!((gcs(&h, &gs).unwrap() - base).abs() < 1e-12);
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&base));
        }

        #[test]
        fn nmse_scale_invariant(seed: u64, c in 0.01f64..100.0) {
            let h = rand_h(3, 3, seed);
            let g = rand_h(3, 3, seed ^ 0xff);
            let a = nmse(&h, &g).unwrap();
            let b = nmse(&h.map(|v| v * c), &g.map(|v| v * c)).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn db_is_monotone(x in 1e-6f64..1e3, y in 1e-6f64..1e3) {
            prop_assume!(x < y);
            prop_assert!(nmse_db(x).unwrap() < nmse_db(y).unwrap());
        }
    }

    fn batch_tensor(hs: &[ChannelMatrix]) -> Tensor {
        let per = 2 * hs[0].n_tx() * hs[0].n_sub();
        Tensor::new(&[hs.len(), per], hs.iter().flat_map(channel_to_rows).collect()).unwrap()
    }

    #[test]
    fn loss_matches_nmse() {
        let h = rand_h(3, 2, 5);
        let g = rand_h(3, 2, 6);
        let mut tape = Tape::new();
        let p = tape.input(batch_tensor(std::slice::from_ref(&g)));
        let l = loss_nmse(&mut tape, p, &batch_tensor(std::slice::from_ref(&h))).unwrap();
        assert!((tape.value(l).item().unwrap() - nmse(&h, &g).unwrap()).abs() < 1e-14);

        let mut tape = Tape::new();
        let hs = [h.clone(), g.clone()];
        let p = tape.input(batch_tensor(&hs));
        let l = loss_nmse(&mut tape, p, &batch_tensor(&hs)).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        let mut tape = Tape::new();
        let p = tape.input(Tensor::zeros(&[0, 4]));
        assert!(loss_nmse(&mut tape, p, &Tensor::zeros(&[0, 4])).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let hs: Vec<_> = (0..3).map(|s| rand_h(4, 4, s)).collect();
        let target = batch_tensor(&hs);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(target.shape(), -1.0, 1.0, &mut rng);
        let r = grad_check(|t, p| loss_nmse(t, p, &target), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

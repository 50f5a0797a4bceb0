//! Pre-processing between the coarse estimate and model tokens, and the
//! exact inverses used on the way back.

use num_complex::Complex64;

use crate::channel_sim::ChannelMatrix;
use crate::error::{Error, Result};

/// Unitary DFT across the antenna axis: `F[m, k] = exp(−j2π·mk/Nt)/√Nt`.
#[derive(Clone, Debug)]
pub struct AngularTransform {
    n_tx: usize,
    f: Vec<Complex64>,
}

impl AngularTransform {
    pub fn new(n_tx: usize) -> Self {
        let norm = 1.0 / (n_tx as f64).sqrt();
        let mut f = Vec::with_capacity(n_tx * n_tx);
        for m in 0..n_tx {
            for k in 0..n_tx {
                // Reduce the exponent mod Nt before converting to an angle.
                let e = (m * k) % n_tx;
                let angle = -2.0 * std::f64::consts::PI * e as f64 / n_tx as f64;
                f.push(Complex64::from_polar(norm, angle));
            }
        }
        Self { n_tx, f }
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn entry(&self, m: usize, k: usize) -> Complex64 {
        self.f[m * self.n_tx + k]
    }

    fn check(&self, h: &ChannelMatrix) -> Result<()> {
        if h.n_tx() != self.n_tx {
            return Err(Error::dim("angular transform", &[h.n_tx(), h.n_sub()], &[self.n_tx]));
        }
        Ok(())
    }

    /// `H_a = F·H`.
    pub fn forward(&self, h: &ChannelMatrix) -> Result<ChannelMatrix> {
        self.check(h)?;
        Ok(ChannelMatrix::from_fn(self.n_tx, h.n_sub(), |m, n| {
            (0..self.n_tx).map(|k| self.entry(m, k) * h.get(k, n)).sum()
        }))
    }

    /// `H = Fᴴ·H_a`.
    pub fn inverse(&self, h: &ChannelMatrix) -> Result<ChannelMatrix> {
        self.check(h)?;
        Ok(ChannelMatrix::from_fn(self.n_tx, h.n_sub(), |k, n| {
            (0..self.n_tx).map(|m| self.entry(m, k).conj() * h.get(m, n)).sum()
        }))
    }
}

pub fn to_angular(h: &ChannelMatrix) -> ChannelMatrix {
    AngularTransform::new(h.n_tx()).forward(h).expect("sized from h")
}

pub fn from_angular(h: &ChannelMatrix) -> ChannelMatrix {
    AngularTransform::new(h.n_tx()).inverse(h).expect("sized from h")
}

/// Per-sample normalization factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub scale: f64,
}

/// Divides by the smallest power of two not below `max(|Re|, |Im|)`.
///
/// Values land in `[−1, 1]` and [`denormalize`] restores them bit-exactly.
/// A zero matrix keeps scale 1.
pub fn normalize(h: &ChannelMatrix) -> (ChannelMatrix, NormStats) {
    let max_abs = h.data().iter().map(|v| v.re.abs().max(v.im.abs())).fold(0.0, f64::max);
    let scale = if max_abs > 0.0 && max_abs.is_finite() {
        2f64.powi(max_abs.log2().ceil() as i32)
    } else {
        1.0
    };
    // Guard the rounding of log2 near exact powers of two.
    let scale = if max_abs > scale { scale * 2.0 } else { scale };
    (h.map(|v| v / scale), NormStats { scale })
}

pub fn denormalize(h: &ChannelMatrix, stats: NormStats) -> ChannelMatrix {
    h.map(|v| v * stats.scale)
}

/// Per-subcarrier real vectors `[Re(h_n); Im(h_n)] ∈ R^{2Nt}`.
pub fn split_columns(h: &ChannelMatrix) -> Vec<Vec<f64>> {
    let nt = h.n_tx();
    (0..h.n_sub())
        .map(|n| {
            let mut v = vec![0.0; 2 * nt];
            for a in 0..nt {
                let c = h.get(a, n);
                v[a] = c.re;
                v[nt + a] = c.im;
            }
            v
        })
        .collect()
}

/// Inverse of [`split_columns`].
pub fn reassemble(seq: &[Vec<f64>], n_tx: usize) -> Result<ChannelMatrix> {
    if let Some(bad) = seq.iter().find(|v| v.len() != 2 * n_tx) {
        return Err(Error::dim("reassemble", &[bad.len()], &[2 * n_tx]));
    }
    Ok(ChannelMatrix::from_fn(n_tx, seq.len(), |a, n| {
        Complex64::new(seq[n][a], seq[n][n_tx + a])
    }))
}

/// Spatial and angular per-subcarrier sequences of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePair {
    pub spatial: Vec<Vec<f64>>,
    pub angular: Vec<Vec<f64>>,
}

pub fn split_sequence(h_in: &ChannelMatrix, h_a: &ChannelMatrix) -> Result<SequencePair> {
    if h_in.shape() != h_a.shape() {
        return Err(Error::dim(
            "split_sequence",
            &[h_in.n_tx(), h_in.n_sub()],
            &[h_a.n_tx(), h_a.n_sub()],
        ));
    }
    Ok(SequencePair {
        spatial: split_columns(h_in),
        angular: split_columns(h_a),
    })
}

/// Groups `p` consecutive vectors into one token by concatenation.
pub fn patch(seq: &[Vec<f64>], p: usize) -> Result<Vec<Vec<f64>>> {
    if p == 0 || !seq.len().is_multiple_of(p) {
        return Err(Error::Config(format!(
            "patch size {p} does not divide sequence length {}",
            seq.len()
        )));
    }
    Ok(seq.chunks(p).map(|c| c.concat()).collect())
}

/// Splits each token back into `p` vectors.
pub fn unpatch(tokens: &[Vec<f64>], p: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(tokens.len() * p);
    for t in tokens {
        if p == 0 || t.len() % p != 0 {
            return Err(Error::Config(format!(
                "token width {} is not a multiple of patch size {p}",
                t.len()
            )));
        }
        out.extend(t.chunks(t.len() / p).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Model input: `L = Nc/P` tokens of width `2·Nt·P`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenInput {
    pub tokens: Vec<Vec<f64>>,
    pub patch_size: usize,
}

impl TokenInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    /// Row-major `[L, width]` values.
    pub fn flat(&self) -> Vec<f64> {
        self.tokens.concat()
    }
}

/// `H_m = H_in^p + H_a^p`, token by token.
pub fn combine(spatial_p: &[Vec<f64>], angular_p: &[Vec<f64>], patch_size: usize) -> Result<TokenInput> {
    if spatial_p.len() != angular_p.len() {
        return Err(Error::dim("combine", &[spatial_p.len()], &[angular_p.len()]));
    }
    let tokens = spatial_p
        .iter()
        .zip(angular_p)
        .map(|(s, a)| {
            if s.len() != a.len() {
                return Err(Error::dim("combine", &[s.len()], &[a.len()]));
            }
            Ok(s.iter().zip(a).map(|(x, y)| x + y).collect())
        })
        .collect::<Result<_>>()?;
    Ok(TokenInput { tokens, patch_size })
}

/// Full pre-processing of one coarse estimate.
///
/// Both branches are normalized by their own scale; the returned stats are
/// those of `h_in`, which de-normalize the model output.
pub fn preprocess(h_in: &ChannelMatrix, patch_size: usize) -> Result<(TokenInput, NormStats)> {
    let (spatial, stats) = normalize(h_in);
    let (angular, _) = normalize(&to_angular(h_in));
    let seq = split_sequence(&spatial, &angular)?;
    let tokens = combine(
        &patch(&seq.spatial, patch_size)?,
        &patch(&seq.angular, patch_size)?,
        patch_size,
    )?;
    Ok((tokens, stats))
}

/// `[2Nt, Nc]` feature-row layout used by the post-processor: row `r < Nt`
/// is `Re(H[r, ·])`, row `Nt + r` is `Im(H[r, ·])`.
pub fn channel_to_rows(h: &ChannelMatrix) -> Vec<f64> {
    let (nt, nc) = h.shape();
    let mut out = vec![0.0; 2 * nt * nc];
    for a in 0..nt {
        for n in 0..nc {
            let v = h.get(a, n);
            out[a * nc + n] = v.re;
            out[(nt + a) * nc + n] = v.im;
        }
    }
    out
}

/// Inverse of [`channel_to_rows`].
pub fn rows_to_channel(rows: &[f64], n_tx: usize, n_sub: usize) -> Result<ChannelMatrix> {
    if rows.len() != 2 * n_tx * n_sub {
        return Err(Error::dim("rows_to_channel", &[rows.len()], &[2 * n_tx * n_sub]));
    }
    Ok(ChannelMatrix::from_fn(n_tx, n_sub, |a, n| {
        Complex64::new(rows[a * n_sub + n], rows[(n_tx + a) * n_sub + n])
    }))
}

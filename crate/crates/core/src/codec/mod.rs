//! UE-side random projection and BS-side pseudo-inverse recovery.
//!
//! A channel is flattened column-major (antenna fastest) into real parts
//! followed by imaginary parts, giving a vector of length `2·Nt·Nc`. The UE
//! sends `s = A·vec(H)`; the BS recovers the minimum-norm preimage
//! `H_in = devec(A†·s)` with `A† = Aᵀ(AAᵀ)⁻¹`.

pub mod linalg;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel_sim::{derive_seed, ChannelMatrix, SystemDims};
use crate::error::{Error, Result};
use crate::tensor_core::{gemm, ParamStore, Tensor};

/// Real stacking of `H`: `[Re(vec H); Im(vec H)]`, column-major.
pub fn vec_real(h: &ChannelMatrix) -> Vec<f64> {
    let (nt, nc) = h.shape();
    let mut out = vec![0.0; 2 * nt * nc];
    let (re, im) = out.split_at_mut(nt * nc);
    for n in 0..nc {
        for a in 0..nt {
            let v = h.get(a, n);
            re[n * nt + a] = v.re;
            im[n * nt + a] = v.im;
        }
    }
    out
}

/// Inverse of [`vec_real`].
pub fn devec_real(v: &[f64], n_tx: usize, n_sub: usize) -> Result<ChannelMatrix> {
    let half = n_tx * n_sub;
    if v.len() != 2 * half {
        return Err(Error::dim("devec_real", &[v.len()], &[2 * half]));
    }
    Ok(ChannelMatrix::from_fn(n_tx, n_sub, |a, n| {
        Complex64::new(v[n * n_tx + a], v[half + n * n_tx + a])
    }))
}

/// Codeword length for compression ratio `gamma`, which must divide `2·Nt·Nc`.
pub fn n_s_for_gamma(dims: &SystemDims, gamma: f64) -> Result<usize> {
    let total = dims.real_len() as f64;
    let n_s = total / gamma;
    if !(gamma >= 1.0) || n_s.fract() != 0.0 {
        return Err(Error::Config(format!(
            "compression ratio {gamma} does not give an integer codeword length for 2·Nt·Nc = {total}"
        )));
    }
    Ok(n_s as usize)
}

/// Compressed feedback vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Codeword {
    pub s: Vec<f64>,
}

/// How the projection rows are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionKind {
    /// i.i.d. `N(0, 1/Ns)` entries.
    Gaussian,
    /// Gaussian rows orthonormalized, so `A·Aᵀ = I`.
    Orthonormal,
}

/// Projection matrix `A` (`Ns × 2NtNc`) with its cached pseudo-inverse.
#[derive(Clone, Debug)]
pub struct ProjectionCodec {
    dims: SystemDims,
    n_s: usize,
    seed: u64,
    kind: ProjectionKind,
    a: Vec<f64>,
    /// `A†`, `2NtNc × Ns`.
    a_pinv: Vec<f64>,
}

const MAX_ATTEMPTS: u64 = 3;
const RANK_TOL: f64 = 1e-13;

impl ProjectionCodec {
    pub fn new(dims: SystemDims, n_s: usize, seed: u64) -> Result<Self> {
        Self::with_kind(dims, n_s, seed, ProjectionKind::Gaussian)
    }

    pub fn orthonormal(dims: SystemDims, n_s: usize, seed: u64) -> Result<Self> {
        Self::with_kind(dims, n_s, seed, ProjectionKind::Orthonormal)
    }

    /// Draws `A` from `seed`; a rank-deficient draw is replaced by one from a
    /// derived seed, up to three attempts in total.
    pub fn with_kind(dims: SystemDims, n_s: usize, seed: u64, kind: ProjectionKind) -> Result<Self> {
        dims.validate()?;
        let d = dims.real_len();
        if n_s == 0 || n_s > d {
            return Err(Error::Config(format!("codeword length must lie in 1..={d}, got {n_s}")));
        }
        let mut last_err = None;
        for attempt in 0..MAX_ATTEMPTS {
            let draw_seed = if attempt == 0 {
                seed
            } else {
                derive_seed(seed, 0xC0DEC, attempt)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let std = (1.0 / n_s as f64).sqrt();
            let mut a = Tensor::randn(&[n_s, d], std, &mut rng).into_data();
            let built = (|| {
                if kind == ProjectionKind::Orthonormal {
                    a = orthonormalize_rows(&a, n_s, d)?;
                    return Ok::<_, Error>(linalg::transpose(&a, n_s, d));
                }
                pseudo_inverse(&a, n_s, d)
            })();
            match built {
                Ok(a_pinv) => {
                    return Ok(Self {
                        dims,
                        n_s,
                        seed,
                        kind,
                        a,
                        a_pinv,
                    })
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Numerical(format!(
            "projection matrix rank deficient after {MAX_ATTEMPTS} draws: {}",
            last_err.expect("at least one attempt")
        )))
    }

    /// Wraps a given `Ns × 2NtNc` matrix.
    pub fn from_matrix(dims: SystemDims, a: &Tensor) -> Result<Self> {
        let d = dims.real_len();
        if a.rank() != 2 || a.shape()[1] != d || a.shape()[0] == 0 || a.shape()[0] > d {
            return Err(Error::dim("projection matrix", a.shape(), &[d]));
        }
        let n_s = a.shape()[0];
        let a_pinv = pseudo_inverse(a.data(), n_s, d)?;
        Ok(Self {
            dims,
            n_s,
            seed: 0,
            kind: ProjectionKind::Gaussian,
            a: a.data().to_vec(),
            a_pinv,
        })
    }

    pub fn dims(&self) -> &SystemDims {
        &self.dims
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    /// `γ = 2·Nt·Nc / Ns`.
    pub fn gamma(&self) -> f64 {
        self.dims.real_len() as f64 / self.n_s as f64
    }

    pub fn matrix(&self) -> Tensor {
        Tensor::new(&[self.n_s, self.dims.real_len()], self.a.clone()).expect("sized")
    }

    pub fn pinv(&self) -> Tensor {
        Tensor::new(&[self.dims.real_len(), self.n_s], self.a_pinv.clone()).expect("sized")
    }

    /// `A` and `A†` as frozen tensors, for dumping in the weight-file format.
    pub fn as_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        store.insert("codec.a", self.matrix(), false).expect("fresh store");
        store.insert("codec.a_pinv", self.pinv(), false).expect("fresh store");
        store
    }

    fn check_dims(&self, h: &ChannelMatrix) -> Result<()> {
        if h.shape() != (self.dims.n_tx, self.dims.n_sub) {
            return Err(Error::dim(
                "codec",
                &[h.n_tx(), h.n_sub()],
                &[self.dims.n_tx, self.dims.n_sub],
            ));
        }
        Ok(())
    }

    /// `s = A·vec(H)`.
    pub fn compress(&self, h: &ChannelMatrix) -> Result<Codeword> {
        self.check_dims(h)?;
        let x = vec_real(h);
        Ok(Codeword { s: matvec(&self.a, &x) })
    }

    /// `H_in = devec(A†·s)`.
    pub fn coarse_reconstruct(&self, s: &Codeword) -> Result<ChannelMatrix> {
        if s.s.len() != self.n_s {
            return Err(Error::dim("coarse_reconstruct", &[s.s.len()], &[self.n_s]));
        }
        devec_real(&matvec(&self.a_pinv, &s.s), self.dims.n_tx, self.dims.n_sub)
    }

    /// Compress followed by coarse recovery for many channels at once.
    pub fn round_trip_batch(&self, hs: &[ChannelMatrix]) -> Result<Vec<ChannelMatrix>> {
        let d = self.dims.real_len();
        let b = hs.len();
        let mut x = Vec::with_capacity(b * d);
        for h in hs {
            self.check_dims(h)?;
            x.extend(vec_real(h));
        }
        // S = X·Aᵀ, X_in = S·A†ᵀ
        let mut s = vec![0.0; b * self.n_s];
        gemm(
            b,
            d,
            self.n_s,
            1.0,
            &x,
            (d, 1),
            &self.a,
            (1, d),
            0.0,
            &mut s,
            (self.n_s, 1),
        );
        let mut rec = vec![0.0; b * d];
        gemm(
            b,
            self.n_s,
            d,
            1.0,
            &s,
            (self.n_s, 1),
            &self.a_pinv,
            (1, self.n_s),
            0.0,
            &mut rec,
            (d, 1),
        );
        rec.chunks(d)
            .map(|row| devec_real(row, self.dims.n_tx, self.dims.n_sub))
            .collect()
    }
}

/// Row-major matrix times vector; the row count is implied by the lengths.
fn matvec(m: &[f64], x: &[f64]) -> Vec<f64> {
    m.chunks_exact(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Aᵀ(AAᵀ)⁻¹` through a Cholesky factor of `AAᵀ`, followed by one
/// Newton–Schulz correction `X ← X + X·(I − A·X)`.
fn pseudo_inverse(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let l = linalg::cholesky(linalg::gram(a, rows, cols), rows, RANK_TOL)?;
    let mut x = a.to_vec();
    linalg::solve_lower(&l, rows, &mut x, cols);
    linalg::solve_lower_transposed(&l, rows, &mut x, cols);
    let x = linalg::transpose(&x, rows, cols);

    let mut residual = vec![0.0; rows * rows];
    for i in 0..rows {
        residual[i * rows + i] = 1.0;
    }
    gemm(
        rows,
        cols,
        rows,
        -1.0,
        a,
        (cols, 1),
        &x,
        (rows, 1),
        1.0,
        &mut residual,
        (rows, 1),
    );
    let mut refined = x.clone();
    gemm(
        cols,
        rows,
        rows,
        1.0,
        &x,
        (rows, 1),
        &residual,
        (rows, 1),
        1.0,
        &mut refined,
        (rows, 1),
    );
    Ok(refined)
}

/// Orthonormal rows spanning the rows of `A` (two rounds of Cholesky-QR).
fn orthonormalize_rows(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut q = a.to_vec();
    for _ in 0..2 {
        let l = linalg::cholesky(linalg::gram(&q, rows, cols), rows, RANK_TOL)?;
        linalg::solve_lower(&l, rows, &mut q, cols);
    }
    Ok(q)
}

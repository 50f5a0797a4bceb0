//! Synthetic downlink CSI from a geometric multipath model.
//!
//! Each scenario area owns a fixed set of paths (angle of departure, delay,
//! complex gain). Samples drawn in that area jitter the angles and gains, so
//! all samples of an area share the same angular/delay support while
//! different areas are statistically distinct.
//!
//! Channel entry `(a, n)` for antenna `a` and subcarrier `n` is
//!
//! ```text
//! h(a, n) = Σ_p g_p · exp(jπ·a·sin θ_p) · exp(−j2π·f_n·τ_p)
//! f_n     = (n − (Nc − 1)/2) · bandwidth / Nc
//! ```
//!
//! i.e. a half-wavelength ULA at the BS and baseband subcarrier offsets.

mod dataset;
mod split;

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub use dataset::{generate_scenario, DatasetFile, DatasetHeader, DATASET_MAGIC, DATASET_VERSION};
pub use split::{split_dataset, SampleRef, SplitManifest};

use crate::error::{Error, Result};

/// Antenna and subcarrier geometry of the link.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemDims {
    pub n_tx: usize,
    pub n_sub: usize,
    /// Metadata only; the phase model uses baseband offsets.
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
}

impl Default for SystemDims {
    fn default() -> Self {
        Self {
            n_tx: 32,
            n_sub: 32,
            carrier_hz: 2.655e9,
            bandwidth_hz: 70e6,
        }
    }
}

impl SystemDims {
    pub fn new(n_tx: usize, n_sub: usize) -> Result<Self> {
        let dims = Self {
            n_tx,
            n_sub,
            ..Self::default()
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tx == 0 || self.n_sub == 0 {
            return Err(Error::Config(format!(
                "need at least one antenna and one subcarrier, got {}×{}",
                self.n_tx, self.n_sub
            )));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Number of real values in one channel matrix, `2·Nt·Nc`.
    pub fn real_len(&self) -> usize {
        2 * self.n_tx * self.n_sub
    }

    /// Baseband frequency offset of subcarrier `n`.
    pub fn subcarrier_offset_hz(&self, n: usize) -> f64 {
        (n as f64 - (self.n_sub as f64 - 1.0) / 2.0) * (self.bandwidth_hz / self.n_sub as f64)
    }
}

/// Complex `Nt × Nc` channel; entry `(a, n)` is antenna `a`, subcarrier `n`.
///
/// Stored antenna-major: `data[a·Nc + n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMatrix {
    n_tx: usize,
    n_sub: usize,
    data: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn zeros(n_tx: usize, n_sub: usize) -> Self {
        Self {
            n_tx,
            n_sub,
            data: vec![Complex64::new(0.0, 0.0); n_tx * n_sub],
        }
    }

    pub fn from_fn(n_tx: usize, n_sub: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(n_tx * n_sub);
        for a in 0..n_tx {
            for n in 0..n_sub {
                data.push(f(a, n));
            }
        }
        Self { n_tx, n_sub, data }
    }

    /// Wraps antenna-major data.
    pub fn from_data(n_tx: usize, n_sub: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != n_tx * n_sub {
            return Err(Error::dim("channel matrix", &[n_tx, n_sub], &[data.len()]));
        }
        Ok(Self { n_tx, n_sub, data })
    }

    /// Gaussian test matrix with unit-variance complex entries.
    pub fn random<R: Rng + ?Sized>(n_tx: usize, n_sub: usize, rng: &mut R) -> Self {
        Self::from_fn(n_tx, n_sub, |_, _| complex_normal(rng))
    }

    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_tx, self.n_sub)
    }

    pub fn get(&self, a: usize, n: usize) -> Complex64 {
        self.data[a * self.n_sub + n]
    }

    pub fn set(&mut self, a: usize, n: usize, v: Complex64) {
        self.data[a * self.n_sub + n] = v;
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Channel vector of subcarrier `n` (the `n`-th column).
    pub fn column(&self, n: usize) -> Vec<Complex64> {
        (0..self.n_tx).map(|a| self.get(a, n)).collect()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            n_tx: self.n_tx,
            n_sub: self.n_sub,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "channel zip",
                &[self.n_tx, self.n_sub],
                &[other.n_tx, other.n_sub],
            ));
        }
        Ok(Self {
            n_tx: self.n_tx,
            n_sub: self.n_sub,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits())
    }
}

/// One propagation path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Path {
    pub gain: Complex64,
    pub aod_rad: f64,
    pub delay_s: f64,
}

/// Knobs of the multipath substitute model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultipathProfile {
    pub n_paths: usize,
    pub max_aod_rad: f64,
    pub max_delay_s: f64,
    /// Power-delay profile decay constant.
    pub delay_decay_s: f64,
    pub aod_jitter_rad: f64,
    /// Relative std of the complex gain fluctuation.
    pub gain_jitter: f64,
    pub cell_radius_m: f64,
    pub area_radius_m: f64,
}

impl Default for MultipathProfile {
    fn default() -> Self {
        Self {
            n_paths: 8,
            max_aod_rad: 60f64.to_radians(),
            max_delay_s: 300e-9,
            delay_decay_s: 100e-9,
            aod_jitter_rad: 2f64.to_radians(),
            gain_jitter: 0.1,
            cell_radius_m: 200.0,
            area_radius_m: 5.0,
        }
    }
}

/// A circular area inside the cell with its own fixed path geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioArea {
    pub id: u32,
    pub center: (f64, f64),
    pub radius_m: f64,
    pub seed: u64,
    pub paths: Vec<Path>,
}

impl ScenarioArea {
    /// Area `id` of the corpus defined by `master_seed`.
    pub fn new(id: u32, master_seed: u64) -> Result<Self> {
        Self::with_profile(id, master_seed, &MultipathProfile::default())
    }

    pub fn with_profile(id: u32, master_seed: u64, profile: &MultipathProfile) -> Result<Self> {
        if profile.n_paths == 0 {
            return Err(Error::Config("an area needs at least one path".into()));
        }
        let seed = derive_seed(master_seed, u64::from(id), AREA_STREAM);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = profile.cell_radius_m * rng.random::<f64>().sqrt();
        let phi = rng.random_range(-PI..PI);
        let center = (r * phi.cos(), r * phi.sin());

        let mut raw = Vec::with_capacity(profile.n_paths);
        for _ in 0..profile.n_paths {
            let aod = rng.random_range(-profile.max_aod_rad..=profile.max_aod_rad);
            let delay = rng.random_range(0.0..=profile.max_delay_s);
            let phase = rng.random_range(-PI..PI);
            raw.push((aod, delay, phase, (-delay / profile.delay_decay_s).exp()));
        }
        let total: f64 = raw.iter().map(|r| r.3).sum();
        let paths = raw
            .into_iter()
            .map(|(aod_rad, delay_s, phase, power)| Path {
                gain: Complex64::from_polar((power / total).sqrt(), phase),
                aod_rad,
                delay_s,
            })
            .collect();
        Ok(Self {
            id,
            center,
            radius_m: profile.area_radius_m,
            seed,
            paths,
        })
    }
}

const AREA_STREAM: u64 = u64::MAX;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-stream seed from `(master, area, index)`.
///
/// Each component is folded in with a SplitMix64 round:
/// `s = sm(sm(sm(master) ^ area) ^ index)`. Area geometry uses the reserved
/// index `u64::MAX`; sample `i` of an area uses index `i`.
pub fn derive_seed(master: u64, area: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ area) ^ index)
}

/// ULA response `a(θ)[k] = exp(jπ·k·sin θ)`.
pub fn steering_vector(theta: f64, n_tx: usize) -> Vec<Complex64> {
    let s = theta.sin();
    (0..n_tx)
        .map(|k| Complex64::from_polar(1.0, PI * k as f64 * s))
        .collect()
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Evaluates the multipath sum for fixed paths.
pub fn synthesize(paths: &[Path], dims: &SystemDims) -> ChannelMatrix {
    let mut h = ChannelMatrix::zeros(dims.n_tx, dims.n_sub);
    let offsets: Vec<f64> = (0..dims.n_sub).map(|n| dims.subcarrier_offset_hz(n)).collect();
    for p in paths {
        let steer = steering_vector(p.aod_rad, dims.n_tx);
        let freq: Vec<Complex64> = offsets
            .iter()
            .map(|f| Complex64::from_polar(1.0, -2.0 * PI * f * p.delay_s))
            .collect();
        for (a, s) in steer.iter().enumerate() {
            let gs = p.gain * s;
            for (n, fr) in freq.iter().enumerate() {
                h.data[a * dims.n_sub + n] += gs * fr;
            }
        }
    }
    h
}

/// One channel realization in `area`: angles jittered by a Gaussian, gains by
/// a relative complex Gaussian scaled so that `E|g̃|² = |g|²`.
pub fn generate_sample<R: Rng + ?Sized>(
    area: &ScenarioArea,
    dims: &SystemDims,
    profile: &MultipathProfile,
    rng: &mut R,
) -> ChannelMatrix {
    let aod_noise = Normal::new(0.0, profile.aod_jitter_rad).expect("finite std");
    let norm = (1.0 + profile.gain_jitter * profile.gain_jitter).sqrt();
    let jittered: Vec<Path> = area
        .paths
        .iter()
        .map(|p| {
            let dtheta = aod_noise.sample(rng);
            let z = complex_normal(rng);
            Path {
                gain: p.gain * (Complex64::new(1.0, 0.0) + z * profile.gain_jitter) / norm,
                aod_rad: p.aod_rad + dtheta,
                delay_s: p.delay_s,
            }
        })
        .collect();
    synthesize(&jittered, dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steering_vector_basics() {
        assert!(steering_vector(0.0, 8).iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        for v in steering_vector(0.7, 16) {
            assert!((v.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn on_grid_steering_vector_has_one_dft_bin() {
        // Brute-force unitary DFT of a(θ) with sin θ = 2m/Nt.
        let nt = 16;
        for m in [0i32, 1, 3, -2] {
            let theta = (2.0 * m as f64 / nt as f64).asin();
            let a = steering_vector(theta, nt);
            let energies: Vec<f64> = (0..nt)
                .map(|bin| {
                    let acc: Complex64 = (0..nt)
                        .map(|k| a[k] * Complex64::from_polar(1.0, -2.0 * PI * (bin * k) as f64 / nt as f64))
                        .sum();
                    (acc / (nt as f64).sqrt()).norm_sqr()
                })
                .collect();
            let total: f64 = energies.iter().sum();
            let peak = energies.iter().cloned().fold(0.0, f64::max);
            assert!((total - nt as f64).abs() < 1e-9);
            assert!((peak - total).abs() < 1e-9, "m={m}: {energies:?}");
        }
    }

    #[test]
    fn single_broadside_path_is_all_ones() {
        let dims = SystemDims::new(4, 6).unwrap();
        let p = Path {
            gain: Complex64::new(1.0, 0.0),
            aod_rad: 0.0,
            delay_s: 0.0,
        };
        let h = synthesize(&[p], &dims);
        assert!(h.data().iter().all(|v| *v == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn sample_generation_is_deterministic() {
        let dims = SystemDims::default();
        let area = ScenarioArea::new(3, 42).unwrap();
        let prof = MultipathProfile::default();
        let a = generate_sample(&area, &dims, &prof, &mut ChaCha8Rng::seed_from_u64(9));
        let b = generate_sample(&area, &dims, &prof, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(a.bit_eq(&b));
        assert!(a.is_finite());
    }

    #[test]
    fn area_geometry() {
        let prof = MultipathProfile::default();
        for id in 1..=20 {
            let area = ScenarioArea::new(id, 7).unwrap();
            let (x, y) = area.center;
            assert!((x * x + y * y).sqrt() <= prof.cell_radius_m);
            assert_eq!(area.paths.len(), 8);
            let power: f64 = area.paths.iter().map(|p| p.gain.norm_sqr()).sum();
            assert!((power - 1.0).abs() < 1e-12);
            for p in &area.paths {
                assert!(p.delay_s >= 0.0 && p.delay_s <= prof.max_delay_s);
                assert!(p.aod_rad.abs() <= prof.max_aod_rad);
            }
            assert_eq!(area, ScenarioArea::new(id, 7).unwrap());
        }
        assert_ne!(ScenarioArea::new(1, 7).unwrap(), ScenarioArea::new(2, 7).unwrap());
    }

    #[test]
    fn seed_derivation_separates_streams() {
        let s = derive_seed(1, 2, 3);
        assert_ne!(s, derive_seed(1, 3, 2));
        assert_ne!(s, derive_seed(2, 2, 3));
        assert_eq!(s, derive_seed(1, 2, 3));
    }

    #[test]
    fn mean_power_matches_nt_nc() {
        // Monte-Carlo over 10⁴ samples drawn from 200 areas.
        let dims = SystemDims::default();
        let prof = MultipathProfile::default();
        let mut total = 0.0;
        let mut count = 0usize;
        for id in 0..200u32 {
            let area = ScenarioArea::new(id, 2024).unwrap();
            for i in 0..50u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(2024, u64::from(id), i));
                total += generate_sample(&area, &dims, &prof, &mut rng).frobenius_sq();
                count += 1;
            }
        }
        let mean = total / count as f64;
        let target = (dims.n_tx * dims.n_sub) as f64;
        assert!((mean / target - 1.0).abs() < 0.05, "mean {mean} vs {target}");
    }
}

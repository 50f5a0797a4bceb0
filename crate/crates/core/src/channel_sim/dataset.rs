//! `CSID` dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! "CSID" | u16 version | u32 n_tx | u32 n_sub | u32 n_samples | u64 seed
//!        | u32 area_id | f64 carrier_hz | f64 bandwidth_hz
//! n_samples × n_tx × n_sub × (f32 re, f32 im)   sample-major, antenna-major
//! ```

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, generate_sample, ChannelMatrix, MultipathProfile, ScenarioArea, SystemDims};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CSID";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 8 + 4 + 8 + 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u16,
    pub n_tx: u32,
    pub n_sub: u32,
    pub n_samples: u32,
    pub seed: u64,
    pub area_id: u32,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
}

/// One scenario's samples, held at the on-disk `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    /// Interleaved `(re, im)` pairs.
    payload: Vec<f32>,
}

impl DatasetFile {
    pub fn new(header: DatasetHeader, payload: Vec<f32>) -> Result<Self> {
        let expected = 2 * header.n_samples as usize * header.n_tx as usize * header.n_sub as usize;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "header announces {expected} payload values, got {}",
                payload.len()
            )));
        }
        Ok(Self { header, payload })
    }

    pub fn dims(&self) -> SystemDims {
        SystemDims {
            n_tx: self.header.n_tx as usize,
            n_sub: self.header.n_sub as usize,
            carrier_hz: self.header.carrier_hz,
            bandwidth_hz: self.header.bandwidth_hz,
        }
    }

    pub fn n_samples(&self) -> usize {
        self.header.n_samples as usize
    }

    /// Sample `i` promoted to `f64`.
    pub fn sample(&self, i: usize) -> Result<ChannelMatrix> {
        if i >= self.n_samples() {
            return Err(Error::Contract(format!(
                "sample {i} out of range ({} samples)",
                self.n_samples()
            )));
        }
        let (nt, nc) = (self.header.n_tx as usize, self.header.n_sub as usize);
        let per = 2 * nt * nc;
        let data = self.payload[i * per..(i + 1) * per]
            .chunks_exact(2)
            .map(|c| Complex64::new(f64::from(c[0]), f64::from(c[1])))
            .collect();
        ChannelMatrix::from_data(nt, nc, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.payload.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&h.version.to_le_bytes());
        out.extend_from_slice(&h.n_tx.to_le_bytes());
        out.extend_from_slice(&h.n_sub.to_le_bytes());
        out.extend_from_slice(&h.n_samples.to_le_bytes());
        out.extend_from_slice(&h.seed.to_le_bytes());
        out.extend_from_slice(&h.area_id.to_le_bytes());
        out.extend_from_slice(&h.carrier_hz.to_le_bytes());
        out.extend_from_slice(&h.bandwidth_hz.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "dataset file truncated: {} bytes, header needs {HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "bad dataset magic {:?}, expected \"CSID\"",
                String::from_utf8_lossy(&bytes[..4])
            )));
        }
        let mut r = LeReader { buf: bytes, pos: 4 };
        let version = r.u16();
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let header = DatasetHeader {
            version,
            n_tx: r.u32(),
            n_sub: r.u32(),
            n_samples: r.u32(),
            seed: r.u64(),
            area_id: r.u32(),
            carrier_hz: r.f64(),
            bandwidth_hz: r.f64(),
        };
        let count = 2 * header.n_samples as usize * header.n_tx as usize * header.n_sub as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != 4 * count {
            return Err(Error::Format(format!(
                "dataset payload has {} bytes, header announces {}",
                body.len(),
                4 * count
            )));
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header, payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) struct LeReader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl LeReader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

/// `n_samples` realizations in `area`; sample `i` is drawn from
/// `derive_seed(seed, area.id, i)`.
pub fn generate_scenario(area: &ScenarioArea, dims: &SystemDims, n_samples: usize, seed: u64) -> Result<DatasetFile> {
    dims.validate()?;
    if n_samples == 0 {
        return Err(Error::Contract("a scenario needs at least one sample".into()));
    }
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} exceeds the file format")))
    };
    let profile = MultipathProfile::default();
    let mut payload = Vec::with_capacity(n_samples * dims.real_len());
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::from(area.id), i as u64));
        let h = generate_sample(area, dims, &profile, &mut rng);
        for v in h.data() {
            payload.push(v.re as f32);
            payload.push(v.im as f32);
        }
    }
    let header = DatasetHeader {
        version: DATASET_VERSION,
        n_tx: to_u32(dims.n_tx, "n_tx")?,
        n_sub: to_u32(dims.n_sub, "n_sub")?,
        n_samples: to_u32(n_samples, "n_samples")?,
        seed,
        area_id: area.id,
        carrier_hz: dims.carrier_hz,
        bandwidth_hz: dims.bandwidth_hz,
    };
    DatasetFile::new(header, payload)
}

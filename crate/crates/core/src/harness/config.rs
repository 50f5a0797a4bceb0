//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! repeated keys are errors. [`ExperimentConfig::to_text`] writes every key
//! in a fixed order, and the hash of that canonical text identifies a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::channel_sim::SystemDims;
use crate::codec::n_s_for_gamma;
use crate::error::{Error, Result};
use crate::models::{BackboneConfig, Variant};

/// Inclusive range of scenario ids, written `first-last`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioRange {
    pub first: u32,
    pub last: u32,
}

impl ScenarioRange {
    pub fn new(first: u32, last: u32) -> Result<Self> {
        if first == 0 || last < first {
            return Err(Error::Config(format!("invalid scenario range {first}-{last}")));
        }
        Ok(Self { first, last })
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> {
        self.first..=self.last
    }

    pub fn len(&self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &ScenarioRange) -> bool {
        self.first <= other.last && other.first <= self.last
    }

    fn parse(s: &str) -> Result<Self> {
        let (a, b) = s.split_once('-').unwrap_or((s, s));
        let num = |t: &str| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad scenario range {s:?}")))
        };
        Self::new(num(a)?, num(b)?)
    }
}

impl std::fmt::Display for ScenarioRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}-{}", self.first, self.last)
    }
}

/// Training-set size per scenario: a fixed count or everything available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SampleCount {
    Count(usize),
    Full,
}

impl SampleCount {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(SampleCount::Full),
            t => t
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .map(SampleCount::Count)
                .ok_or_else(|| Error::Config(format!("bad sample count {s:?}"))),
        }
    }
}

impl std::fmt::Display for SampleCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleCount::Count(n) => write!(f, "{n}"),
            SampleCount::Full => f.write_str("full"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dims: SystemDims,
    pub gamma: f64,
    pub orthonormal_projection: bool,
    pub patch_size: usize,
    pub variant: Variant,
    pub freeze: bool,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_em: usize,
    pub d_ff: usize,
    pub causal: bool,
    pub small_hidden: usize,
    pub leaky_slope: f64,
    pub train_scenarios: ScenarioRange,
    pub eval_scenarios: ScenarioRange,
    pub samples_per_scenario: usize,
    pub train_samples_per_scenario: SampleCount,
    pub lr: f64,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub out_dir: PathBuf,
    pub gammas: Vec<f64>,
    pub sample_sweep: Vec<SampleCount>,
    pub sweep_variants: Vec<Variant>,
    pub generalize_variants: Vec<Variant>,
    pub backbone_weights: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        Self {
            dims: SystemDims::default(),
            gamma: 4.0,
            orthonormal_projection: false,
            patch_size: 1,
            variant: Variant::Llm,
            freeze: true,
            n_layers: 4,
            n_heads: 4,
            d_em: 128,
            d_ff: 512,
            causal: false,
            small_hidden: 2048,
            leaky_slope: 0.01,
            train_scenarios: ScenarioRange { first: 1, last: 5 },
            eval_scenarios: ScenarioRange { first: 6, last: 10 },
            samples_per_scenario: 2000,
            train_samples_per_scenario: SampleCount::Full,
            lr: 1e-3,
            batch_size: 256,
            micro_batch: 64,
            epochs: 50,
            seed: 1,
            split_seed: 7,
            out_dir: PathBuf::from("out"),
            gammas: vec![4.0, 8.0, 16.0, 32.0],
            sample_sweep: vec![
                SampleCount::Count(100),
                SampleCount::Count(200),
                SampleCount::Count(500),
                SampleCount::Full,
            ],
            sweep_variants: Variant::ALL.to_vec(),
            generalize_variants: vec![Variant::Llm, Variant::Small],
            backbone_weights: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    let items: Vec<T> = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut n_s: Option<usize> = None;
        let mut gamma_given = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1)))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            match key {
                "n_tx" => c.dims.n_tx = parse_num(key, v)?,
                "n_sub" => c.dims.n_sub = parse_num(key, v)?,
                "carrier_hz" => c.dims.carrier_hz = parse_num(key, v)?,
                "bandwidth_hz" => c.dims.bandwidth_hz = parse_num(key, v)?,
                "gamma" => {
                    c.gamma = parse_num(key, v)?;
                    gamma_given = true;
                }
                "n_s" => n_s = Some(parse_num(key, v)?),
                "orthonormal_projection" => c.orthonormal_projection = parse_bool(key, v)?,
                "patch_size" => c.patch_size = parse_num(key, v)?,
                "variant" => c.variant = v.parse()?,
                "freeze" => c.freeze = parse_bool(key, v)?,
                "n_layers" => c.n_layers = parse_num(key, v)?,
                "n_heads" => c.n_heads = parse_num(key, v)?,
                "d_em" => c.d_em = parse_num(key, v)?,
                "d_ff" => c.d_ff = parse_num(key, v)?,
                "causal" => c.causal = parse_bool(key, v)?,
                "small_hidden" => c.small_hidden = parse_num(key, v)?,
                "leaky_slope" => c.leaky_slope = parse_num(key, v)?,
                "train_scenarios" => c.train_scenarios = ScenarioRange::parse(v)?,
                "eval_scenarios" => c.eval_scenarios = ScenarioRange::parse(v)?,
                "samples_per_scenario" => c.samples_per_scenario = parse_num(key, v)?,
                "train_samples_per_scenario" => c.train_samples_per_scenario = SampleCount::parse(v)?,
                "lr" => c.lr = parse_num(key, v)?,
                "batch_size" => c.batch_size = parse_num(key, v)?,
                "micro_batch" => c.micro_batch = parse_num(key, v)?,
                "epochs" => c.epochs = parse_num(key, v)?,
                "seed" => c.seed = parse_num(key, v)?,
                "split_seed" => c.split_seed = parse_num(key, v)?,
                "out_dir" => c.out_dir = PathBuf::from(v),
                "gammas" => c.gammas = parse_list(key, v, |s| parse_num(key, s))?,
                "sample_sweep" => c.sample_sweep = parse_list(key, v, SampleCount::parse)?,
                "sweep_variants" => c.sweep_variants = parse_list(key, v, str::parse)?,
                "generalize_variants" => c.generalize_variants = parse_list(key, v, str::parse)?,
                "backbone_weights" => c.backbone_weights = (!v.is_empty()).then(|| PathBuf::from(v)),
                other => return Err(Error::Config(format!("line {}: unknown key {other:?}", lineno + 1))),
            }
        }
        if let Some(n_s) = n_s {
            let total = c.dims.real_len();
            if n_s == 0 || total % n_s != 0 {
                return Err(Error::Config(format!("n_s {n_s} does not divide 2·Nt·Nc = {total}")));
            }
            let g = (total / n_s) as f64;
            if gamma_given && g != c.gamma {
                return Err(Error::Config(format!(
                    "gamma {} and n_s {n_s} disagree (n_s implies gamma {g})",
                    c.gamma
                )));
            }
            c.gamma = g;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.n_s()?;
        for &g in &self.gammas {
            n_s_for_gamma(&self.dims, g)?;
        }
        if self.patch_size == 0 || !self.dims.n_sub.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size {} must divide n_sub {}",
                self.patch_size, self.dims.n_sub
            )));
        }
        self.backbone(self.variant).validate()?;
        if self.train_scenarios.overlaps(&self.eval_scenarios) {
            return Err(Error::Config(format!(
                "train scenarios {} overlap eval scenarios {}",
                self.train_scenarios, self.eval_scenarios
            )));
        }
        if self.samples_per_scenario < 10 {
            return Err(Error::Config("samples_per_scenario must be at least 10".into()));
        }
        let too_many = |s: &SampleCount| matches!(s, SampleCount::Count(n) if *n > self.samples_per_scenario);
        if too_many(&self.train_samples_per_scenario) || self.sample_sweep.iter().any(too_many) {
            return Err(Error::Config(format!(
                "training sample counts cannot exceed samples_per_scenario {}",
                self.samples_per_scenario
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch_size and micro_batch must be positive".into()));
        }
        Ok(())
    }

    pub fn n_s(&self) -> Result<usize> {
        n_s_for_gamma(&self.dims, self.gamma)
    }

    pub fn l_tokens(&self) -> usize {
        self.dims.n_sub / self.patch_size
    }

    /// Backbone settings for `variant`; freezing only applies to the transformer.
    pub fn backbone(&self, variant: Variant) -> BackboneConfig {
        BackboneConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_em: self.d_em,
            d_ff: self.d_ff,
            l_tokens: self.l_tokens(),
            variant,
            freeze: self.freeze && variant == Variant::Llm,
            causal: self.causal,
            small_hidden: self.small_hidden,
            leaky_slope: self.leaky_slope,
        }
    }

    /// Canonical text: every key, fixed order, round-trips through [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_tx", self.dims.n_tx.to_string());
        kv("n_sub", self.dims.n_sub.to_string());
        kv("carrier_hz", format!("{:?}", self.dims.carrier_hz));
        kv("bandwidth_hz", format!("{:?}", self.dims.bandwidth_hz));
        kv("gamma", format!("{:?}", self.gamma));
        kv("orthonormal_projection", self.orthonormal_projection.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("variant", self.variant.to_string());
        kv("freeze", self.freeze.to_string());
        kv("n_layers", self.n_layers.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_em", self.d_em.to_string());
        kv("d_ff", self.d_ff.to_string());
        kv("causal", self.causal.to_string());
        kv("small_hidden", self.small_hidden.to_string());
        kv("leaky_slope", format!("{:?}", self.leaky_slope));
        kv("train_scenarios", self.train_scenarios.to_string());
        kv("eval_scenarios", self.eval_scenarios.to_string());
        kv("samples_per_scenario", self.samples_per_scenario.to_string());
        kv(
            "train_samples_per_scenario",
            self.train_samples_per_scenario.to_string(),
        );
        kv("lr", format!("{:?}", self.lr));
        kv("batch_size", self.batch_size.to_string());
        kv("micro_batch", self.micro_batch.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("split_seed", self.split_seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv(
            "gammas",
            self.gammas
                .iter()
                .map(|g| format!("{g:?}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("sample_sweep", join(&self.sample_sweep));
        kv("sweep_variants", join(&self.sweep_variants));
        kv("generalize_variants", join(&self.generalize_variants));
        kv(
            "backbone_weights",
            self.backbone_weights
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        s
    }

    /// First 16 hex digits of the SHA-256 of the canonical text, excluding
    /// the output directory so relocated runs hash identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_profile() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.n_s().unwrap(), 512);
        assert_eq!((c.dims.n_tx, c.dims.n_sub), (32, 32));
        assert_eq!((c.n_layers, c.d_em, c.batch_size), (4, 128, 256));
        let ns: Vec<usize> = c.gammas.iter().map(|&g| n_s_for_gamma(&c.dims, g).unwrap()).collect();
        assert_eq!(ns, vec![512, 256, 128, 64]);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "n_tx = 8\nn_sub = 16\ngamma = 8\nvariant = small\nepochs = 3\n\
                    sample_sweep = 10, full\nbackbone_weights = w.csiw\n# comment\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.n_s().unwrap(), 32);
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_text(), c.to_text());
        assert_eq!(again.hash(), c.hash());
        let mut other = c.clone();
        other.seed += 1;
        assert_ne!(other.hash(), c.hash());
        other = c.clone();
        other.out_dir = PathBuf::from("elsewhere");
        assert_eq!(other.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "bogus = 1",
            "epochs",
            "epochs = x",
            "epochs = 1\nepochs = 2",
            "gamma = 3",
            "n_s = 100",
            "gamma = 8\nn_s = 512",
            "freeze = yes",
            "variant = gpt",
            "train_scenarios = 1-5\neval_scenarios = 5-9",
            "train_scenarios = 5-1",
            "patch_size = 3",
            "d_em = 130",
            "gammas = 4, 5",
            "samples_per_scenario = 100\nsample_sweep = 200",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn n_s_and_gamma_agree() {
        let c = ExperimentConfig::parse("n_s = 256").unwrap();
        assert_eq!(c.gamma, 8.0);
        let c = ExperimentConfig::parse("n_s = 256\ngamma = 8").unwrap();
        assert_eq!(c.n_s().unwrap(), 256);
    }

    #[test]
    fn ranges() {
        let r = ScenarioRange::parse("3-5").unwrap();
        assert_eq!(r.ids().collect::<Vec<_>>(), vec![3, 4, 5]);
        assert_eq!(r.len(), 3);
        assert_eq!(ScenarioRange::parse("7").unwrap().len(), 1);
        assert!(ScenarioRange::parse("0-2").is_err());
    }
}

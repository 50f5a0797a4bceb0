//! Finite-difference verification of every tape op and the toy refiner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel_sim::{ChannelMatrix, SystemDims};
use crate::codec::ProjectionCodec;
use crate::error::Result;
use crate::metrics::loss_nmse;
use crate::models::{BackboneConfig, RefinerModel, Variant};
use crate::tensor_core::{grad_check, grad_check_params, GradCheckReport, NodeId, ParamStore, Tape, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;

pub type CaseFn = Box<dyn Fn() -> Result<GradCheckReport> + Send + Sync>;

pub struct GradCase {
    pub name: String,
    pub run: CaseFn,
}

impl GradCase {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<GradCheckReport> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradSuiteReport {
    pub entries: Vec<(String, GradCheckReport)>,
}

impl GradSuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, r)| !(r.max_rel_error < GRAD_TOLERANCE))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    /// One line per case: name, worst error, worst coordinate, coordinates checked.
    pub fn to_text(&self) -> String {
        let mut s = String::from("case,max_rel_error,worst,checked,structural_zeros,status\n");
        for (name, r) in &self.entries {
            let worst = r.worst.as_ref().map(|(p, i)| format!("{p}[{i}]")).unwrap_or_default();
            let status = if r.max_rel_error < GRAD_TOLERANCE {
                "pass"
            } else {
                "FAIL"
            };
            s.push_str(&format!(
                "{name},{:.3e},{worst},{},{},{status}\n",
                r.max_rel_error, r.checked, r.structural_zeros
            ));
        }
        s
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scalarizes `y` with a fixed random weighting so no output coordinate
/// gets a degenerate gradient.
fn weighted_sum(t: &mut Tape, y: NodeId, seed: u64) -> Result<NodeId> {
    let w = Tensor::uniform(t.shape(y), -1.0, 1.0, &mut rng(seed));
    let wn = t.input(w);
    let p = t.mul(y, wn)?;
    t.sum(p)
}

fn unary(
    name: &str,
    shape: &[usize],
    seed: u64,
    op: impl Fn(&mut Tape, NodeId) -> Result<NodeId> + Send + Sync + 'static,
) -> GradCase {
    let x = Tensor::uniform(shape, -1.5, 1.5, &mut rng(seed));
    GradCase::new(name, move || {
        grad_check(
            |t, xn| {
                let y = op(t, xn)?;
                weighted_sum(t, y, seed + 1)
            },
            &x,
            H,
        )
    })
}

/// Checks the gradients of both operands.
fn binary(
    name: &str,
    a_shape: &[usize],
    b_shape: &[usize],
    seed: u64,
    op: impl Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId> + Send + Sync + 'static,
) -> GradCase {
    let a = Tensor::uniform(a_shape, -1.0, 1.0, &mut rng(seed));
    let b = Tensor::uniform(b_shape, -1.0, 1.0, &mut rng(seed + 7));
    GradCase::new(name, move || {
        let mut store = ParamStore::new();
        store.insert("a", a.clone(), true)?;
        store.insert("b", b.clone(), true)?;
        grad_check_params(
            &store,
            |t, s| {
                let an = t.param(s, "a")?;
                let bn = t.param(s, "b")?;
                let y = op(t, an, bn)?;
                weighted_sum(t, y, seed + 3)
            },
            H,
        )
    })
}

fn layer_norm_case() -> GradCase {
    GradCase::new("layer_norm", || {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng(30)), true)?;
        store.insert("g", Tensor::uniform(&[6], 0.5, 1.5, &mut rng(31)), true)?;
        store.insert("b", Tensor::uniform(&[6], -0.5, 0.5, &mut rng(32)), true)?;
        grad_check_params(
            &store,
            |t, s| {
                let (x, g, b) = (t.param(s, "x")?, t.param(s, "g")?, t.param(s, "b")?);
                let y = t.layer_norm(x, g, b, 1e-5)?;
                weighted_sum(t, y, 33)
            },
            H,
        )
    })
}

fn toy_config(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        n_layers: 1,
        n_heads: 2,
        d_em: 16,
        d_ff: 32,
        l_tokens: 4,
        variant,
        freeze: variant == Variant::Llm,
        causal: false,
        small_hidden: 16,
        leaky_slope: 0.01,
    }
}

/// Full toy refiner (Nt = Nc = 4, width 16, one layer) composed with the
/// NMSE loss, checked against every parameter.
fn toy_model_case(variant: Variant, causal: bool) -> GradCase {
    let name = format!("model_{variant}{}", if causal { "_causal" } else { "" });
    GradCase::new(name, move || {
        let dims = SystemDims {
            n_tx: 4,
            n_sub: 4,
            ..SystemDims::default()
        };
        let codec = ProjectionCodec::new(dims, 8, 11)?;
        let hs: Vec<ChannelMatrix> = (0..2).map(|i| ChannelMatrix::random(4, 4, &mut rng(40 + i))).collect();
        let h_in = codec.round_trip_batch(&hs)?;
        let mut cfg = toy_config(variant);
        cfg.causal = causal;
        let model = RefinerModel::new(cfg, 4, 4, 1, 5)?;
        let (tokens, stats) = model.token_batch(&h_in)?;
        let target = model.target_batch(&hs, &stats)?;
        grad_check_params(
            model.params(),
            |t, store| {
                let mut m = model.clone();
                m.assign_weights(store)?;
                let trace = m.forward_tape(t, &tokens)?;
                loss_nmse(t, trace.output, &target)
            },
            H,
        )
    })
}

fn attention_case() -> GradCase {
    let model = RefinerModel::new(toy_config(Variant::Llm), 4, 4, 1, 9).expect("toy geometry");
    let x = Tensor::randn(&[2, 4, 16], 1.0, &mut rng(12));
    GradCase::new("attention_block", move || {
        grad_check(
            |t, xn| {
                let (y, _) = model.backbone_forward(t, xn)?;
                weighted_sum(t, y, 13)
            },
            &x,
            H,
        )
    })
}

pub fn default_cases() -> Vec<GradCase> {
    vec![
        binary("matmul", &[3, 4], &[4, 5], 1, |t, a, b| t.matmul(a, b)),
        binary("matmul_batched_lhs", &[2, 3, 4], &[4, 2], 2, |t, a, b| t.matmul(a, b)),
        binary("batch_matmul", &[2, 3, 4], &[2, 4, 5], 3, |t, a, b| {
            t.batch_matmul(a, b, false)
        }),
        binary("batch_matmul_trans_b", &[2, 3, 4], &[2, 5, 4], 4, |t, a, b| {
            t.batch_matmul(a, b, true)
        }),
        binary("add_broadcast", &[3, 4], &[4], 5, |t, a, b| t.add(a, b)),
        binary("sub", &[3, 4], &[3, 4], 6, |t, a, b| t.sub(a, b)),
        binary("mul_broadcast", &[2, 3, 4], &[3, 4], 7, |t, a, b| t.mul(a, b)),
        binary("dense", &[3, 4], &[4, 2], 8, |t, a, b| {
            let bias = t.input(Tensor::new(&[2], vec![0.3, -0.2])?);
            t.dense(a, b, bias)
        }),
        unary("scale", &[3, 4], 9, |t, x| t.scale(x, -2.5)),
        unary("leaky_relu", &[4, 5], 10, |t, x| t.leaky_relu(x, 0.01)),
        unary("gelu", &[4, 5], 11, |t, x| t.gelu(x)),
        unary("softmax", &[3, 6], 12, |t, x| t.softmax(x)),
        layer_norm_case(),
        unary("reshape", &[2, 6], 14, |t, x| t.reshape(x, &[3, 4])),
        unary("permute", &[2, 3, 4], 15, |t, x| t.permute(x, &[2, 0, 1])),
        unary("slice_last", &[3, 5], 16, |t, x| t.slice_last(x, 1, 3)),
        unary("sum", &[3, 4], 17, |t, x| t.sum(x)),
        unary("sum_last", &[3, 4], 18, |t, x| t.sum_last(x)),
        unary("mean", &[3, 4], 19, |t, x| t.mean(x)),
        {
            let target = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(21));
            let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng(20));
            GradCase::new("loss_nmse", move || {
                grad_check(|t, xn| loss_nmse(t, xn, &target), &x, H)
            })
        },
        attention_case(),
        toy_model_case(Variant::Llm, false),
        toy_model_case(Variant::Llm, true),
        toy_model_case(Variant::Small, false),
        toy_model_case(Variant::Identical, false),
    ]
}

pub fn run_cases(cases: &[GradCase]) -> Result<GradSuiteReport> {
    let entries = cases
        .iter()
        .map(|c| Ok((c.name.clone(), (c.run)()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradSuiteReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::check_gradient;

    #[test]
    fn every_case_passes() {
        let report = run_cases(&default_cases()).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.entries.iter().all(|(_, r)| r.checked > 0));
    }

    #[test]
    fn injected_wrong_gradient_is_reported() {
        let mut cases = default_cases();
        cases.truncate(2);
        cases.push(GradCase::new("faulty_square", || {
            let x = Tensor::new(&[3], vec![0.4, -0.3, 0.8])?;
            let wrong = Tensor::new(&[3], vec![0.8, -0.6, 0.0])?;
            check_gradient("x", &wrong, &x, H, |p| Ok(p.norm_sq()))
        }));
        let report = run_cases(&cases).unwrap();
        assert_eq!(report.failures(), vec!["faulty_square"]);
        assert!(report
            .to_text()
            .lines()
            .any(|l| l.starts_with("faulty_square") && l.ends_with("FAIL")));
        assert_eq!(report.to_text().lines().count(), cases.len() + 1);
    }
}

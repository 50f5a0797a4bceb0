//! Central finite-difference checks of tape gradients.

use super::params::ParamStore;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8)
}

/// Analytic gradients at or below this magnitude count as exact zeros.
pub const ZERO_GRADIENT: f64 = 1e-12;

/// Largest central difference explainable by rounding alone when the true
/// derivative is zero: `100·ε·max(|f(x+h)|, |f(x−h)|) / h`.
pub fn roundoff_bound(f_plus: f64, f_minus: f64, h: f64) -> f64 {
    100.0 * f64::EPSILON * f_plus.abs().max(f_minus.abs()) / h
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst coordinate: parameter name (or `"x"`) and flat index.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose analytic gradient is zero and whose finite
    /// difference is within rounding noise; they are not scored.
    pub structural_zeros: usize,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            structural_zeros: 0,
        }
    }

    fn observe(&mut self, name: &str, index: usize, err: f64) {
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            if err >= self.max_rel_error {
                self.worst = Some((name.to_string(), index));
            }
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.structural_zeros += other.structural_zeros;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst;
        }
    }
}

/// Compares an analytic gradient of `f` at `x` against central differences.
pub fn check_gradient(
    name: &str,
    analytic: &Tensor,
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<GradCheckReport> {
    if analytic.shape() != x.shape() {
        return Err(Error::dim("check_gradient", analytic.shape(), x.shape()));
    }
    let mut report = GradCheckReport::empty();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let ad = analytic.data()[i];
        if ad.abs() <= ZERO_GRADIENT && fd.abs() <= roundoff_bound(plus, minus, h) {
            report.checked += 1;
            report.structural_zeros += 1;
            continue;
        }
        report.observe(name, i, relative_error(ad, fd));
    }
    Ok(report)
}

fn scalar_of(tape: &Tape, id: NodeId) -> Result<f64> {
    tape.value(id).item()
}

/// Worst relative error of `backward()` for `f` with respect to its input `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.var(x.clone());
    let out = f(&mut tape, xid)?;
    let grads = tape.backward(out)?;
    let analytic = grads.node(xid).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    check_gradient("x", &analytic, x, h, |probe| {
        let mut t = Tape::new();
        let id = t.input(probe.clone());
        let out = f(&mut t, id)?;
        scalar_of(&t, out)
    })
}

/// Worst relative error over every coordinate of every parameter in `store`,
/// frozen ones included.
pub fn grad_check_params<F>(store: &ParamStore, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::tracking_frozen();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport::empty();
    let mut work = store.clone();
    for (name, p) in store.iter() {
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let part = check_gradient(name, &analytic, &p.value, h, |probe| {
            work.get_mut(name).expect("same names").value = probe.clone();
            let mut t = Tape::new();
            let out = f(&mut t, &work)?;
            scalar_of(&t, out)
        })?;
        work.get_mut(name).expect("same names").value = p.value.clone();
        report.merge(part);
    }
    Ok(report)
}

//! Central-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Perturbation size; the Richardson stencil also evaluates at half of it.
    pub eps: f64,
    /// A check passes iff the largest relative error is strictly below this.
    pub tol: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub max_per_tensor: usize,
    /// Cap on coordinates overall; a seeded subset of the per-tensor picks
    /// is kept when they exceed it.
    pub max_total: usize,
    pub seed: u64,
    pub stencil: Stencil,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-5, max_per_tensor: 100, max_total: usize::MAX, seed: 0, stencil: Stencil::Central }
    }
}

/// How the numeric derivative is formed from objective evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    Central,
    /// `(4·D(h/2) − D(h)) / 3` over two central differences, error O(h⁴).
    /// Tolerates a step about ten times larger for the same truncation
    /// error, which shrinks the rounding noise of the difference by as much.
    Richardson,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coordinate {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub at: Coordinate,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_coordinate: Option<Coordinate>,
    pub pass: bool,
    pub checks: Vec<CoordinateCheck>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.checks.len()
    }

    /// Largest relative error among the sampled coordinates of one tensor.
    pub fn max_rel_err_for(&self, tensor: usize) -> Option<f64> {
        self.checks
            .iter()
            .filter(|c| c.at.tensor == tensor)
            .map(|c| c.rel_err)
            .fold(None, |m, e| Some(m.map_or(e, |m: f64| m.max(e))))
    }
}

/// `|a − n| / max(|a|, |n|, 1e−12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares `analytic[i]` against `(f(x + eps·e) − f(x − eps·e)) / (2·eps)` on
/// seeded random coordinates of every tensor in `params`.
pub fn finite_diff_check<T, F>(
    mut f: F,
    params: &[Tensor<T>],
    analytic: &[Tensor<T>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    if !(opts.eps > 0.0) {
        return Err(Error::InvalidArgument { op: "finite_diff_check", detail: "eps must be positive".into() });
    }
    if params.len() != analytic.len() || params.iter().zip(analytic).any(|(p, a)| p.shape() != a.shape()) {
        return Err(Error::InvalidArgument {
            op: "finite_diff_check",
            detail: "analytic gradients must mirror the parameter shapes".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut picks = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let numel = p.numel();
        picks.extend(index::sample(&mut rng, numel, opts.max_per_tensor.min(numel)).into_iter().map(|i| (t, i)));
    }
    if picks.len() > opts.max_total {
        let mut keep = index::sample(&mut rng, picks.len(), opts.max_total).into_vec();
        keep.sort_unstable();
        picks = keep.into_iter().map(|k| picks[k]).collect();
    }
    picks.sort_unstable();
    let mut checks = Vec::new();
    for (t, i) in picks {
        let mut central = |h: f64| -> Result<f64> {
            let orig = work[t].data()[i];
            let step = T::from_f64(h);
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&mut f, &work, t, i)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&mut f, &work, t, i)?;
            work[t].data_mut()[i] = orig;
            Ok((plus - minus) / (2.0 * h))
        };
        let numeric = match opts.stencil {
            Stencil::Central => central(opts.eps)?,
            Stencil::Richardson => {
                let coarse = central(opts.eps)?;
                (4.0 * central(opts.eps / 2.0)? - coarse) / 3.0
            }
        };
        let a = analytic[t].data()[i].to_f64();
        checks.push(CoordinateCheck {
            at: Coordinate { tensor: t, index: i },
            analytic: a,
            numeric,
            rel_err: relative_error(a, numeric),
        });
    }
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err));
    let max_rel_err = worst.map_or(0.0, |c| c.rel_err);
    Ok(GradCheckReport {
        max_rel_err,
        worst_coordinate: worst.map(|c| c.at),
        pass: max_rel_err < opts.tol,
        checks,
    })
}

fn eval<T: Element, F>(f: &mut F, params: &[Tensor<T>], tensor: usize, index: usize) -> Result<f64>
where
    F: FnMut(&[Tensor<T>]) -> Result<T>,
{
    let v = f(params)?.to_f64();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective at perturbed coordinate {index} of tensor {tensor}")));
    }
    Ok(v)
}

//! Central finite-difference validation of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Skip coordinates whose ±eps probes change the sign pattern of any
    /// ReLU-family input. Central differences are meaningless across a kink.
    pub skip_kinks: bool,
    /// Times a kink-crossing probe is retried with a tenfold smaller step
    /// before the coordinate is skipped.
    pub kink_retries: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_coords: 512,
            seed: 0,
            skip_kinks: true,
            kink_retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<T, F>(f: &F, params: &ParamSet<T>) -> Result<(f64, u64)>
where
    T: Element,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    Ok((g.value(loss)[0].as_f64(), g.kink_signature()))
}

/// Central difference of `f` along one coordinate, or `None` when every
/// probe step crosses a kink.
fn probe<T, F>(
    f: &F,
    params: &mut ParamSet<T>,
    id: ParamId,
    i: usize,
    opts: &GradCheckOptions,
    base_sig: u64,
) -> Result<Option<f64>>
where
    T: Element,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let orig = params.get(id).data()[i];
    let mut step = opts.eps;
    for _ in 0..=opts.kink_retries {
        let eps = T::of(step);
        params.get_mut(id).data_mut()[i] = orig + eps;
        let plus = evaluate(f, params);
        params.get_mut(id).data_mut()[i] = orig - eps;
        let minus = evaluate(f, params);
        params.get_mut(id).data_mut()[i] = orig;
        let ((lp, sp), (lm, sm)) = (plus?, minus?);
        if !opts.skip_kinks || (sp == base_sig && sm == base_sig) {
            // The probe step actually taken, after rounding to T.
            let h = (orig + eps).as_f64() - (orig - eps).as_f64();
            return Ok(Some((lp - lm) / h));
        }
        step /= 10.0;
    }
    Ok(None)
}

/// Zeroes gradients, back-propagates `f` once and compares against central
/// differences. Returns the worst relative error over the checked coordinates.
pub fn grad_check<T, F>(f: F, params: &mut ParamSet<T>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    params.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.backward(loss, params)?;
    compare_gradients(f, params, opts)
}

/// Compares the gradients already stored in `params` against central
/// differences of `f`.
pub fn compare_gradients<T, F>(
    f: F,
    params: &mut ParamSet<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &ParamSet<T>) -> Result<Var>,
{
    let (_, base_sig) = evaluate(&f, params)?;
    let mut tensors = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let t = params.get(id);
        if !t.requires_grad() {
            continue;
        }
        let name = params.name(id).to_string();
        let n = t.len();
        let analytic: Vec<f64> = match t.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (id.0 as u64).wrapping_mul(0x9e37_79b9));
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut report = TensorCheck {
            name,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_index: None,
        };
        for i in coords {
            let Some(numeric) = probe(&f, params, id, i, opts, base_sig)? else {
                report.skipped += 1;
                continue;
            };
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_index.is_none() {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
        tensors.push(report);
    }
    Ok(GradCheckReport {
        max_rel_error: tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max),
        checked: tensors.iter().map(|t| t.checked).sum(),
        skipped: tensors.iter().map(|t| t.skipped).sum(),
        tensors,
    })
}

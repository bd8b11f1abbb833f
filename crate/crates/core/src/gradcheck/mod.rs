//! Central-difference gradient checking at double precision.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::nn::{Forward, ParamStore, Role};
use crate::tensor::{Shape, Tensor};

mod suite;

pub use suite::{gradcheck_model_config, run_suite, SuiteEntry, SuiteOptions, SUITE_FLOOR, SUITE_TOLERANCE};

/// Default denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on coordinates probed per parameter tensor; `None` probes
    /// every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Backward rule to perturb, as a negative control.
    pub fault: Option<OpKind>,
    /// Denominator floor of [`rel_error_floored`].
    pub floor: f64,
    /// When the central estimate misses by more than this, the coordinate is
    /// re-examined with one-sided differences; see [`GradCheckReport::kinks`].
    pub kink_retry: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            fault: None,
            floor: REL_ERROR_FLOOR,
            kink_retry: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    /// Maximum relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub coords_checked: usize,
    /// Coordinates whose two one-sided slopes disagreed (a ReLU, hard-swish
    /// or max-pool switch lies within one step); these are scored against the
    /// nearer one-sided slope.
    pub kinks: usize,
}

/// One-sided slopes closer than this (relative) count as the same slope.
pub const KINK_SIDE_AGREEMENT: f64 = 1e-3;

/// Step halvings tried on a coordinate that misses the tolerance.
pub const KINK_HALVINGS: usize = 3;

/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floored(analytic, numeric, REL_ERROR_FLOOR)
}

/// `|analytic - numeric| / max(floor, |analytic| + |numeric|)`
pub fn rel_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / floor.max(analytic.abs() + numeric.abs())
}

fn evaluate<F>(
    params: &[Tensor<f64>],
    track: bool,
    fault: Option<OpKind>,
    f: &mut F,
) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.inject_backward_fault(fault);
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone(), track)).collect();
    let out = f(&mut g, &vars)?;
    if g.shape(out).numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check objective must be scalar, got {}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compares the analytic gradient of the scalar objective `f` against
/// central differences for every parameter in `params`.
///
/// `f` receives a fresh graph and one leaf per parameter, in order.
pub fn grad_check<F>(params: &[Tensor<f64>], opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::invalid(format!(
            "gradient check step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let (mut g, vars, out) = evaluate(params, true, opts.fault, &mut f)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    for (pi, a) in analytic.iter().enumerate() {
        if let Some(coord) = a.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { param_index: pi, coord });
        }
    }
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_coord: 0,
        per_param: vec![0.0; params.len()],
        coords_checked: 0,
        kinks: 0,
    };
    let h = opts.step;
    let mut base: Option<f64> = None;
    for pi in 0..params.len() {
        let numel = params[pi].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        for coord in coords {
            let orig = work[pi].data()[coord];
            work[pi].data_mut()[coord] = orig + h;
            let plus = scalar_value(&work, &mut f)?;
            work[pi].data_mut()[coord] = orig - h;
            let minus = scalar_value(&work, &mut f)?;
            work[pi].data_mut()[coord] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { param_index: pi, coord });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[coord];
            let mut err = rel_error_floored(a, numeric, opts.floor);
            if opts.kink_retry.is_some_and(|t| err > t) {
                let f0 = match base {
                    Some(v) => v,
                    None => *base.insert(scalar_value(&work, &mut f)?),
                };
                let (right, left) = ((plus - f0) / h, (f0 - minus) / h);
                if rel_error_floored(right, left, opts.floor) > KINK_SIDE_AGREEMENT {
                    report.kinks += 1;
                    err = err
                        .min(rel_error_floored(a, right, opts.floor))
                        .min(rel_error_floored(a, left, opts.floor));
                }
                // A kink further than `step` from the point leaves a smaller
                // central difference clean; Richardson extrapolation on each
                // halving cancels the second-order term where curvature is steep.
                let mut prev = numeric;
                let mut step = h;
                for _ in 0..KINK_HALVINGS {
                    step /= 2.0;
                    work[pi].data_mut()[coord] = orig + step;
                    let p = scalar_value(&work, &mut f)?;
                    work[pi].data_mut()[coord] = orig - step;
                    let m = scalar_value(&work, &mut f)?;
                    work[pi].data_mut()[coord] = orig;
                    let d = (p - m) / (2.0 * step);
                    let extrapolated = (4.0 * d - prev) / 3.0;
                    err = err.min(rel_error_floored(a, d, opts.floor)).min(rel_error_floored(
                        a,
                        extrapolated,
                        opts.floor,
                    ));
                    prev = d;
                    if err <= opts.kink_retry.unwrap_or(0.0) {
                        break;
                    }
                }
            }
            report.coords_checked += 1;
            if err > report.per_param[pi] {
                report.per_param[pi] = err;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = pi;
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}

fn scalar_value<F>(params: &[Tensor<f64>], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, out) = evaluate(params, false, None, f)?;
    Ok(g.value(out).item())
}

/// Named outcome of [`check_module`].
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub report: GradCheckReport,
    /// `input0, input1, ...` followed by the trainable parameter names.
    pub names: Vec<String>,
}

impl ModuleCheck {
    pub fn worst_name(&self) -> &str {
        &self.names[self.report.worst_param]
    }
}

/// Gradient check of a layer with respect to its inputs and every trainable
/// tensor in `store`.
///
/// The layer output is reduced to a scalar by a fixed random weighting, so
/// that outputs whose plain sum is constant (normalized activations) still
/// produce informative gradients.
pub fn check_module<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    train: bool,
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<ModuleCheck>
where
    F: FnMut(&mut Forward<'_, f64>, &[Var]) -> Result<Var>,
{
    let param_names: Vec<String> = store.trainable().map(|(n, _)| n.to_string()).collect();
    let mut params: Vec<Tensor<f64>> = inputs.to_vec();
    params.extend(param_names.iter().map(|n| store.get(n).expect("listed").clone()));
    let n_in = inputs.len();
    let mut weights: Option<Tensor<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let report = grad_check(&params, opts, |g, vars| {
        let bound: BTreeMap<String, Var> = param_names.iter().cloned().zip(vars[n_in..].iter().copied()).collect();
        let mut fw = Forward::new(g, store, train, false).with_bound(bound);
        let y = f(&mut fw, &vars[..n_in])?;
        let shape = g.shape(y);
        let w = weights
            .get_or_insert_with(|| random_tensor(shape, 1.0, &mut rng))
            .clone();
        if w.shape() != shape {
            return Err(Error::shape("module output shape changed between evaluations"));
        }
        let wv = g.leaf(w, false);
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    })?;
    let mut names: Vec<String> = (0..n_in).map(|i| format!("input{i}")).collect();
    names.extend(param_names);
    Ok(ModuleCheck { report, names })
}

/// Tensor of independent normal draws with standard deviation `std`.
pub fn random_tensor(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.numel())
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(shape, data).expect("matching length")
}

/// Replaces every trainable tensor with random values so that no gradient is
/// structurally zero. Buffers are left alone.
pub fn randomize_params(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, e) in store.iter_mut() {
        if e.role == Role::Trainable {
            e.tensor = random_tensor(e.tensor.shape(), std, &mut rng);
        }
    }
}

/// Adds independent normal noise to every trainable tensor, keeping the
/// initialization's scale. Zero-initialized tensors become small but nonzero.
pub fn jitter_params(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, e) in store.iter_mut() {
        if e.role == Role::Trainable {
            let noise = random_tensor(e.tensor.shape(), std, &mut rng);
            e.tensor.add_assign(&noise);
        }
    }
}

//! Central finite-difference verification of analytic gradients.
//!
//! The comparison metric is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`:
//! relative for ordinary gradients, absolute (scaled by 1e3) for gradients
//! that are essentially zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const ERROR_FLOOR: f64 = 1e-3;

/// Uniform values in `[-scale, scale]`, reproducible from `seed`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..=scale))
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of the scalar produced by `build` with respect to every input.
pub fn analytic_gradients<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Check the listed `(input, element)` coordinates.
pub fn check_gradients_at<F>(
    build: F,
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    step: f64,
    tolerance: f64,
) -> std::result::Result<GradCheckReport, String>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&build, inputs).map_err(|e| e.to_string())?;
    let mut report = GradCheckReport { checked: 0, max_error: 0.0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let plus = evaluate(&build, &work).map_err(|e| e.to_string())?;
        work[i].data_mut()[j] = orig - step;
        let minus = evaluate(&build, &work).map_err(|e| e.to_string())?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i].data()[j];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_error || !err.is_finite() {
            report.max_error = if err.is_finite() { err } else { f64::INFINITY };
            report.worst = Some((i, j, a, numeric));
        }
    }
    if report.max_error <= tolerance {
        Ok(report)
    } else {
        let (i, j, a, n) = report.worst.unwrap_or_default();
        Err(format!(
            "gradient mismatch at input {i} element {j}: analytic {a:.6e} vs numeric {n:.6e} \
             (error {:.3e} > {tolerance:.1e})",
            report.max_error
        ))
    }
}

/// Check every element of every input.
pub fn check_gradients<F>(
    build: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
) -> std::result::Result<GradCheckReport, String>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_gradients_at(build, inputs, &coords, step, tolerance)
}

/// Check a reproducible random subset of `per_input` elements of each input.
pub fn check_gradients_sampled<F>(
    build: F,
    inputs: &[Tensor<f64>],
    per_input: usize,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> std::result::Result<GradCheckReport, String>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        if t.len() <= per_input {
            coords.extend((0..t.len()).map(|j| (i, j)));
        } else {
            coords.extend((0..per_input).map(|_| (i, rng.random_range(0..t.len()))));
        }
    }
    check_gradients_at(build, inputs, &coords, step, tolerance)
}

//! Central finite-difference validation of reverse-mode gradients.
//!
//! Checks run in `f64`. Relative error per coordinate is
//! `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Upper bound on checked coordinates per input; `None` checks all.
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling when `max_coords` is set.
    pub seed: u64,
}

impl GradCheckOptions {
    pub fn new(rel_tol: f64) -> Self {
        Self {
            step: DEFAULT_STEP,
            rel_tol,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn sampled(mut self, max_coords: usize, seed: u64) -> Self {
        self.max_coords = Some(max_coords);
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub rel_tol: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub entries: Vec<GradCheckEntry>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<F>(program: &F, inputs: &[(String, Tensor<f64>)]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars = inputs
        .iter()
        .map(|(name, t)| g.param(name.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = program(&mut g, &vars)?;
    if !g.value(loss).is_scalar() {
        return Err(Error::Usage("grad_check program must return a scalar".into()));
    }
    Ok((g, vars, loss))
}

/// Compares autodiff gradients of `program` against central differences.
///
/// Failures are reported in the returned value; only a program that cannot
/// be evaluated at all produces an error.
pub fn grad_check<F>(
    program: F,
    inputs: &[(&str, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut owned: Vec<(String, Tensor<f64>)> = inputs
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let (graph, vars, loss) = evaluate(&program, &owned)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&graph, v)).collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::with_capacity(owned.len());
    for i in 0..owned.len() {
        let numel = owned[i].1.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < numel => {
                let mut c = sample(&mut rng, numel, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = owned[i].1.data()[c];
            owned[i].1.data_mut()[c] = orig + opts.step;
            let plus = {
                let (g, _, l) = evaluate(&program, &owned)?;
                g.value(l).item()
            };
            owned[i].1.data_mut()[c] = orig - opts.step;
            let minus = {
                let (g, _, l) = evaluate(&program, &owned)?;
                g.value(l).item()
            };
            owned[i].1.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let err = relative_error(analytic[i].data()[c], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        entries.push(GradCheckEntry {
            name: owned[i].0.clone(),
            coords_checked: coords.len(),
            max_rel_error: worst,
            passed: worst <= opts.rel_tol,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        rel_tol: opts.rel_tol,
        max_rel_error,
        passed: entries.iter().all(|e| e.passed),
        entries,
    })
}

/// Uniform tensor in `[lo, hi)`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Smallest `|x[s] - x[s-1]|` along tensor dimension `axis`.
pub fn min_adjacent_gap(t: &Tensor<f64>, axis: usize) -> f64 {
    let shape = t.shape();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let d = t.data();
    let mut best = f64::INFINITY;
    for o in 0..outer {
        for s in 1..n {
            for j in 0..inner {
                let cur = (o * n + s) * inner + j;
                best = best.min((d[cur] - d[cur - inner]).abs());
            }
        }
    }
    best
}

/// Draws from `generate` until `accept` holds, giving finite differences a
/// margin away from non-differentiable points.
pub fn resample_until<R: Rng>(
    rng: &mut R,
    max_tries: usize,
    mut generate: impl FnMut(&mut R) -> Tensor<f64>,
    accept: impl Fn(&Tensor<f64>) -> bool,
) -> Result<Tensor<f64>> {
    for _ in 0..max_tries {
        let t = generate(rng);
        if accept(&t) {
            return Ok(t);
        }
    }
    Err(Error::Usage(format!(
        "no kink-free sample found in {max_tries} draws"
    )))
}

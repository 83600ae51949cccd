//! Central finite-difference gradient checking against the tape.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which coordinates of the inputs to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coords<'a> {
    All,
    /// Up to `per_input` coordinates of every input, chosen by `seed`.
    Sample {
        per_input: usize,
        seed: u64,
    },
    /// The `per_input` coordinates of every input with the largest analytic
    /// gradient magnitude; useful when most coordinates sit below the
    /// resolution of the central difference.
    Largest {
        per_input: usize,
    },
    /// Explicit `(input, flat index)` pairs.
    Only(&'a [(usize, usize)]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a kink.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<u8>)>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    let value = g.value_ref(out);
    if value.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok((value.data()[0], g.branch_pattern()))
}

/// Compares tape gradients of `f` with central differences of step `eps`
/// and reports the maximum of `|a - n| / (|a| + |n| + 1e-12)`.
pub fn finite_diff_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coords<'_>) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check(f, inputs, eps, coords, false)
}

/// Like [`finite_diff_check_inputs`], but coordinates whose `+eps` or
/// `-eps` evaluation lands on a different side of a leaky-ReLU or
/// probability clamp than the unperturbed point are skipped: a central
/// difference across a kink does not estimate either one-sided derivative.
pub fn finite_diff_check_smooth<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coords<'_>) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    check(f, inputs, eps, coords, true)
}

fn check<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coords<'_>, skip_kinks: bool) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let base_pattern = g.branch_pattern();
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let selected: Vec<(usize, usize)> = match coords {
        Coords::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect(),
        Coords::Sample { per_input, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = Vec::new();
            for (i, t) in inputs.iter().enumerate() {
                let n = t.numel();
                let mut idx = index::sample(&mut rng, n, per_input.min(n)).into_vec();
                idx.sort_unstable();
                picked.extend(idx.into_iter().map(|j| (i, j)));
            }
            picked
        }
        Coords::Largest { per_input } => {
            let mut picked = Vec::new();
            for (i, a) in analytic.iter().enumerate() {
                let mut idx: Vec<usize> = (0..a.len()).collect();
                idx.sort_by(|&x, &y| a[y].abs().total_cmp(&a[x].abs()).then(x.cmp(&y)));
                idx.truncate(per_input);
                idx.sort_unstable();
                picked.extend(idx.into_iter().map(|j| (i, j)));
            }
            picked
        }
        Coords::Only(list) => list.to_vec(),
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (i, j) in selected {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let (plus, plus_pattern) = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig - eps;
        let (minus, minus_pattern) = evaluate(&f, &work)?;
        work[i].data_mut()[j] = orig;
        if skip_kinks && (plus_pattern != base_pattern || minus_pattern != base_pattern) {
            report.skipped += 1;
            continue;
        }

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((i, j));
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Single-input form: maximum relative error over every coordinate of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let report = finite_diff_check_inputs(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, Coords::All)?;
    Ok(report.max_rel_error)
}

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::stream_rng;

/// Denominator floor for the relative error: gradients below this magnitude
/// are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Compares tape gradients with central finite differences.
///
/// `f` builds a computation from the parameter leaves. Non-scalar outputs
/// are contracted with a fixed random cotangent, so the checked function is
/// always `s(θ) = <c, f(θ)>`. Up to `max_coords` coordinates across all
/// parameters are sampled; relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let n_out = tape.value(out).len();
    let cotangent: Vec<f64> = if n_out == 1 {
        vec![1.0]
    } else {
        let mut rng = stream_rng(seed, 0);
        (0..n_out).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    tape.backward_with(out, cotangent.clone());
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().iter().zip(&cotangent).map(|(a, b)| a * b).sum())
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |c| (pi, c)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= max_coords {
        (0..coords.len()).collect()
    } else {
        let mut rng = stream_rng(seed, 1);
        index::sample(&mut rng, coords.len(), max_coords).into_vec()
    };

    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    for &ci in &chosen {
        let (pi, c) = coords[ci];
        let orig = work[pi].data()[c];
        work[pi].data_mut()[c] = orig + eps;
        let plus = eval(&work)?;
        work[pi].data_mut()[c] = orig - eps;
        let minus = eval(&work)?;
        work[pi].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi][c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: chosen.len(),
    })
}

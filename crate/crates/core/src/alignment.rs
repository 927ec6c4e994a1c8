//! Linear centered kernel alignment between two time-aligned representations.
//!
//! With centered Gram matrices `K = Ac Acᵀ` and `L = Bc Bcᵀ` over the `n` rows,
//! the similarity is `‖KᵀL‖²_F / (‖KᵀK‖_F ‖LᵀL‖_F)`, which lies in `[0, 1]`
//! and is invariant to orthogonal maps, isotropic scaling and column
//! permutations of either argument.

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};

/// Relative threshold below which a centered input counts as constant.
const DEGENERATE_TOL: f64 = 1e-12;

fn check_rows(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Alignment(format!("row counts {a} and {b} differ")));
    }
    if a < 2 {
        return Err(Error::Degenerate(format!("need at least 2 rows, got {a}")));
    }
    Ok(())
}

fn frob(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_variance(raw: &Mat, centered: &Mat, which: &str) -> Result<()> {
    if frob(centered) <= DEGENERATE_TOL * frob(raw).max(f64::MIN_POSITIVE) {
        return Err(Error::Degenerate(format!("{which} has zero variance over time")));
    }
    Ok(())
}

/// Records the alignment on `g`; gradients flow to both arguments.
pub fn linear_cka_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    check_rows(g.value(a).nrows(), g.value(b).nrows())?;
    let ac = g.center_cols(a);
    let bc = g.center_cols(b);
    check_variance(g.value(a), g.value(ac), "first input")?;
    check_variance(g.value(b), g.value(bc), "second input")?;
    let act = g.transpose(ac);
    let k = g.matmul(ac, act);
    let bct = g.transpose(bc);
    let l = g.matmul(bc, bct);
    let kl = g.matmul(k, l);
    let kk = g.matmul(k, k);
    let ll = g.matmul(l, l);
    let num = g.sum_sq(kl);
    let kk_sq = g.sum_sq(kk);
    let ll_sq = g.sum_sq(ll);
    let kk_n = g.sqrt(kk_sq);
    let ll_n = g.sqrt(ll_sq);
    let den = g.mul(kk_n, ll_n);
    Ok(g.div(num, den))
}

pub fn linear_cka(a: &Mat, b: &Mat) -> Result<f64> {
    let mut g = Graph::inference();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = linear_cka_graph(&mut g, av, bv)?;
    Ok(g.scalar(out))
}

/// `1 - CKA(melody, z)`, recorded on `g`.
pub fn cka_loss_graph(g: &mut Graph, melody: Var, z: Var) -> Result<Var> {
    let c = linear_cka_graph(g, melody, z)?;
    let neg = g.scale(c, -1.0);
    Ok(g.offset(neg, 1.0))
}

pub fn cka_loss(melody: &Mat, z: &Mat) -> Result<f64> {
    Ok(1.0 - linear_cka(melody, z)?)
}

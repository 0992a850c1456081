use super::cnn::cnn_forward;
use super::{VariantConfig, VariantKind};
use crate::error::{ensure, Result};
use crate::nd::{BoundParams, Graph, Real, Tensor, Var};

/// Builds the variant's loss for one group.
///
/// `inputs` holds the segment tensors, positive (or the single labelled
/// track) first. Every input goes through the same CNN parameters.
pub fn objective<T: Real>(
    variant: &VariantConfig,
    g: &mut Graph<T>,
    params: &BoundParams,
    anchor: Var,
    inputs: &[Var],
    liked: bool,
) -> Result<Var> {
    ensure!(!inputs.is_empty(), Contract, "a group needs at least one track");
    let mut sims = Vec::with_capacity(inputs.len());
    for &x in inputs {
        let r = cnn_forward(g, params, x)?;
        sims.push(g.cosine(anchor, r)?);
    }
    match variant.kind {
        VariantKind::BasicBinary => {
            ensure!(inputs.len() == 1, Contract, "basic_binary scores one track per group");
            g.sigmoid_bce(sims[0], liked)
        }
        VariantKind::Metric | VariantKind::Dcue => g.hinge(sims[0], &sims[1..], variant.margin),
        VariantKind::Multi => {
            ensure!(sims.len() >= 2, Contract, "multi needs at least one negative");
            let logits = g.concat(&sims)?;
            g.softmax_ce(logits, 0)
        }
    }
}

fn similarities(g: &mut Graph<f64>, u: &[f32], rs: &[&[f32]]) -> Result<Vec<Var>> {
    let to_f64 = |v: &[f32]| Tensor::vector(v.iter().map(|&x| x as f64).collect());
    let anchor = g.constant(to_f64(u));
    rs.iter()
        .map(|r| {
            let r = g.constant(to_f64(r));
            g.cosine(anchor, r)
        })
        .collect()
}

/// `Σᵢ max(0, margin − cos(r⁺, u) + cos(r⁻ᵢ, u))`.
pub fn hinge_loss(u: &[f32], positive: &[f32], negatives: &[&[f32]], margin: f64) -> Result<f64> {
    ensure!(margin > 0.0, Contract, "margin must be positive, got {margin}");
    ensure!(!negatives.is_empty(), Contract, "hinge loss needs at least one negative");
    let mut g = Graph::new();
    let mut all = vec![positive];
    all.extend_from_slice(negatives);
    let sims = similarities(&mut g, u, &all)?;
    let loss = g.hinge(sims[0], &sims[1..], margin)?;
    Ok(g.value(loss).data()[0])
}

/// Binary cross-entropy of `sigmoid(cos(r, u))` against `liked`.
pub fn binary_loss(u: &[f32], r: &[f32], liked: bool) -> Result<f64> {
    let mut g = Graph::new();
    let sims = similarities(&mut g, u, &[r])?;
    let loss = g.sigmoid_bce(sims[0], liked)?;
    Ok(g.value(loss).data()[0])
}

/// `−log softmax([cos(r⁺,u), cos(r⁻₁,u), …])[0]`.
pub fn multi_loss(u: &[f32], positive: &[f32], negatives: &[&[f32]]) -> Result<f64> {
    ensure!(!negatives.is_empty(), Contract, "multi loss needs at least one negative");
    let mut g = Graph::new();
    let mut all = vec![positive];
    all.extend_from_slice(negatives);
    let sims = similarities(&mut g, u, &all)?;
    let logits = g.concat(&sims)?;
    let loss = g.softmax_ce(logits, 0)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn e(i: usize, dim: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn hinge_closed_forms() {
        let (u, other) = (e(0, 40), e(1, 40));
        assert_eq!(hinge_loss(&u, &u, &[&other], 0.2).unwrap(), 0.0);
        assert!((hinge_loss(&u, &u, &[&u], 0.2).unwrap() - 0.2).abs() < 1e-12);
        let us: &[f32] = &u;
        assert!((hinge_loss(&u, &u, &[us; 4], 0.2).unwrap() - 0.8).abs() < 1e-12);
        let (u2, p2, n2) = (e(0, 2), e(1, 2), e(0, 2));
        assert!((hinge_loss(&u2, &p2, &[&n2], 0.2).unwrap() - 1.2).abs() < 1e-12);
    }

    #[test]
    fn hinge_preconditions() {
        let u = e(0, 40);
        assert!(matches!(hinge_loss(&u, &u, &[], 0.2), Err(Error::Contract(_))));
        assert!(matches!(hinge_loss(&u, &u, &[&u], 0.0), Err(Error::Contract(_))));
        let zero = vec![0.0; 40];
        assert!(matches!(hinge_loss(&u, &zero, &[&u], 0.2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn binary_at_zero_similarity_is_ln2() {
        let (u, r) = (e(0, 40), e(1, 40));
        for liked in [true, false] {
            assert!((binary_loss(&u, &r, liked).unwrap() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_closed_forms() {
        let u = e(0, 40);
        assert!((multi_loss(&u, &u, &[&u]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let us: &[f32] = &u;
        assert!((multi_loss(&u, &u, &[us; 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let neg: Vec<f32> = u.iter().map(|v| -v).collect();
        let expect = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((multi_loss(&u, &u, &[&neg]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);
    }
}

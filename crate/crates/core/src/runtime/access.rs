//! Resolving a dependence edge at one sink point.

use super::tensor::Tensor;
use crate::frontend::ops::DType;
use crate::pdg::{Edge, Pdg};
use crate::symexpr::{eval_components, Env, IndexComp, IndexSet, SymError};

#[derive(Debug, Clone, PartialEq)]
pub enum Read {
    /// The edge condition is false.
    Inactive,
    /// Some component falls outside the source domain.
    OutOfBounds,
    Points(IndexSet),
}

/// Extents of the source domain of `e` under `env`.
pub fn src_extents(g: &Pdg, e: &Edge, env: &Env) -> Result<Vec<i64>, SymError> {
    g.node(e.src)
        .domain
        .iter()
        .map(|d| env.get(&d.bound).ok_or_else(|| SymError::Unbound(d.bound.clone())))
        .collect()
}

/// Evaluate `e` at the sink point bound in `env`.
pub fn resolve(g: &Pdg, e: &Edge, env: &Env) -> Result<Read, SymError> {
    if let Some(c) = &e.cond {
        if !c.eval_bool(env)? {
            return Ok(Read::Inactive);
        }
    }
    let set = eval_components(&e.phi, env)?;
    let ext = src_extents(g, e, env)?;
    let inside = set.comps.iter().zip(&ext).all(|(c, &x)| match *c {
        IndexComp::Point(p) => (0..x).contains(&p),
        IndexComp::Range(lo, hi) => lo >= hi || (lo >= 0 && hi <= x),
    });
    Ok(if inside { Read::Points(set) } else { Read::OutOfBounds })
}

/// Intersect `set` with the box `[0, ext)`.
pub fn clip(set: &IndexSet, ext: &[i64]) -> IndexSet {
    let comps = set
        .comps
        .iter()
        .zip(ext)
        .map(|(c, &x)| match *c {
            IndexComp::Point(p) if (0..x).contains(&p) => IndexComp::Point(p),
            IndexComp::Point(_) => IndexComp::Range(0, 0),
            IndexComp::Range(lo, hi) => IndexComp::Range(lo.max(0), hi.min(x)),
        })
        .collect();
    IndexSet { comps }
}

/// Build the tensor seen through a read from the values at `set.points()`:
/// one leading axis per range component, then the element shape.
pub fn assemble(set: &IndexSet, parts: Vec<Tensor>, elem: &[usize], dtype: DType) -> Option<Tensor> {
    let ranges = set.slice_extents();
    if ranges.is_empty() && parts.len() == 1 {
        return parts.into_iter().next();
    }
    let flat = Tensor::stack(&parts, elem, dtype)?;
    let mut shape = ranges;
    shape.extend_from_slice(&flat.shape[1..]);
    flat.reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assembles_window() {
        let set = IndexSet { comps: vec![IndexComp::Range(1, 3), IndexComp::Point(0)] };
        let parts = vec![Tensor::from_vec(vec![1.0, 2.0]), Tensor::from_vec(vec![3.0, 4.0])];
        let t = assemble(&set, parts, &[2], DType::F64).unwrap();
        assert_eq!(t.shape, vec![2, 2]);
        assert_eq!(t.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn empty_window_keeps_element_shape() {
        let set = IndexSet { comps: vec![IndexComp::Range(0, 0)] };
        let t = assemble(&set, vec![], &[3], DType::F64).unwrap();
        assert_eq!(t.shape, vec![0, 3]);
    }

    #[test]
    fn clip_to_box() {
        let set = IndexSet { comps: vec![IndexComp::Range(-2, 9), IndexComp::Point(7)] };
        let c = clip(&set, &[4, 5]);
        assert_eq!(c.comps, vec![IndexComp::Range(0, 4), IndexComp::Range(0, 0)]);
        assert!(c.is_empty());
    }
}

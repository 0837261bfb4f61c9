//! Signed axis permutations: the square group (8 ops) in 2D and the full
//! cubic group (48 ops) in 3D.

use crate::error::{Error, Result};
use crate::field::{ravel, unravel, Field};

/// Output axis `j` reads input axis `perm[j]`, reversed when `flip[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SymmetryOp {
    perm: Vec<usize>,
    flip: Vec<bool>,
}

impl SymmetryOp {
    pub fn new(perm: Vec<usize>, flip: Vec<bool>) -> Result<Self> {
        let d = perm.len();
        let mut seen = vec![false; d];
        for &p in &perm {
            if p >= d || std::mem::replace(&mut seen[p], true) {
                return Err(Error::config(format!("{perm:?} is not a permutation")));
            }
        }
        if flip.len() != d {
            return Err(Error::config("flip mask length differs from permutation length"));
        }
        Ok(SymmetryOp { perm, flip })
    }

    pub fn identity(ndim: usize) -> Self {
        SymmetryOp {
            perm: (0..ndim).collect(),
            flip: vec![false; ndim],
        }
    }

    pub fn ndim(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn flip(&self) -> &[bool] {
        &self.flip
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.ndim())
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &SymmetryOp) -> SymmetryOp {
        let perm = self.perm.iter().map(|&p| first.perm[p]).collect();
        let flip = self
            .perm
            .iter()
            .zip(&self.flip)
            .map(|(&p, &f)| f ^ first.flip[p])
            .collect();
        SymmetryOp { perm, flip }
    }

    pub fn inverse(&self) -> SymmetryOp {
        let d = self.ndim();
        let mut perm = vec![0; d];
        let mut flip = vec![false; d];
        for j in 0..d {
            perm[self.perm[j]] = j;
            flip[self.perm[j]] = self.flip[j];
        }
        SymmetryOp { perm, flip }
    }

    pub fn output_dims(&self, dims: &[usize]) -> Vec<usize> {
        self.perm.iter().map(|&p| dims[p]).collect()
    }

    /// True when the op maps a grid of `dims` onto itself.
    pub fn preserves(&self, dims: &[usize]) -> bool {
        self.output_dims(dims) == dims
    }

    /// Moves cells; channel vectors are copied unchanged.
    pub fn apply(&self, field: &Field) -> Result<Field> {
        if field.ndim() != self.ndim() {
            return Err(Error::shape(format!(
                "{}D op applied to a {}D field",
                self.ndim(),
                field.ndim()
            )));
        }
        let dims = field.dims();
        let out_dims = self.output_dims(dims);
        let c = field.channels();
        let mut out = Field::zeros(&out_dims, c);
        let mut oc = vec![0; dims.len()];
        let mut ic = vec![0; dims.len()];
        let src = field.data();
        for (cell, dst) in out.data_mut().chunks_exact_mut(c).enumerate() {
            unravel(cell, &out_dims, &mut oc);
            for j in 0..oc.len() {
                let n = out_dims[j];
                ic[self.perm[j]] = if self.flip[j] { n - 1 - oc[j] } else { oc[j] };
            }
            let at = ravel(&ic, dims) * c;
            dst.copy_from_slice(&src[at..at + c]);
        }
        Ok(out)
    }
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    if d == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(d - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, d - 1);
            out.push(p);
        }
    }
    out.sort();
    out
}

/// All `d! · 2^d` signed permutations, identity first.
pub fn symmetry_group(ndim: usize) -> Vec<SymmetryOp> {
    let mut ops = Vec::new();
    for perm in permutations(ndim) {
        for mask in 0..1u32 << ndim {
            let flip = (0..ndim).map(|j| mask >> j & 1 == 1).collect();
            ops.push(SymmetryOp {
                perm: perm.clone(),
                flip,
            });
        }
    }
    ops
}

/// Ops that map a grid of `dims` onto itself.
pub fn grid_symmetries(dims: &[usize]) -> Vec<SymmetryOp> {
    symmetry_group(dims.len())
        .into_iter()
        .filter(|op| op.preserves(dims))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ramp(dims: &[usize], channels: usize) -> Field {
        let n: usize = dims.iter().product::<usize>() * channels;
        // distinct values everywhere, so any nontrivial op is visible
        Field::from_vec(dims, channels, (0..n).map(|i| (i * i % 97) as f64 + i as f64 * 1e-3).collect()).unwrap()
    }

    #[test]
    fn group_sizes() {
        assert_eq!(symmetry_group(2).len(), 8);
        assert_eq!(symmetry_group(3).len(), 48);
        assert!(symmetry_group(2)[0].is_identity());
        assert_eq!(grid_symmetries(&[4, 8]).len(), 4);
        assert_eq!(grid_symmetries(&[4, 4, 8]).len(), 16);
    }

    #[test]
    fn identity_and_inverse_bit_exact() {
        let f = ramp(&[4, 5], 2);
        assert_eq!(SymmetryOp::identity(2).apply(&f).unwrap(), f);
        for op in symmetry_group(2) {
            let g = op.apply(&f).unwrap();
            assert_eq!(op.inverse().apply(&g).unwrap(), f);
        }
        let f = ramp(&[3, 4, 5], 1);
        for op in symmetry_group(3) {
            assert_eq!(op.inverse().apply(&op.apply(&f).unwrap()).unwrap(), f);
        }
    }

    #[test]
    fn composition_matches_sequential_application() {
        for d in [2, 3] {
            let dims: Vec<usize> = vec![4; d];
            let f = ramp(&dims, 1);
            let group = symmetry_group(d);
            for a in &group {
                for b in &group {
                    let direct = b.after(a).apply(&f).unwrap();
                    let seq = b.apply(&a.apply(&f).unwrap()).unwrap();
                    assert_eq!(direct, seq);
                }
            }
        }
    }

    #[test]
    fn distinct_images_by_brute_force() {
        let f = ramp(&[4, 4], 1);
        let images: HashSet<Vec<u64>> = symmetry_group(2)
            .iter()
            .map(|op| op.apply(&f).unwrap().data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(images.len(), 8);
    }

    #[test]
    fn channels_untouched() {
        let f = ramp(&[2, 2], 3);
        let op = SymmetryOp::new(vec![1, 0], vec![true, false]).unwrap();
        let g = op.apply(&f).unwrap();
        let mut a: Vec<Vec<u64>> = f.data().chunks(3).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        let mut b: Vec<Vec<u64>> = g.data().chunks(3).map(|c| c.iter().map(|v| v.to_bits()).collect()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_ops() {
        assert!(SymmetryOp::new(vec![0, 0], vec![false, false]).is_err());
        assert!(SymmetryOp::new(vec![0, 2], vec![false, false]).is_err());
        assert!(SymmetryOp::new(vec![1, 0], vec![false]).is_err());
        assert!(SymmetryOp::identity(3).apply(&ramp(&[2, 2], 1)).is_err());
    }
}

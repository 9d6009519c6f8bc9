//! Block-independent comparison field: independent Bargmann-Fock copies on a
//! lattice of cubes of side `a` separated by gaps of width `δ`. Between
//! blocks the covariance is exactly zero; inside a block the law is the
//! Bargmann-Fock field restricted to the block.

use crate::error::Result;
use crate::geom::Box2;

use super::bf_series::BfSeries;
use super::rng::{stream, StreamDomain};
use super::Jet2;

#[derive(Clone, Debug)]
pub struct BlockField {
    origin: [f64; 2],
    side: f64,
    gap: f64,
    nbx: usize,
    nby: usize,
    blocks: Vec<BfSeries>,
}

impl BlockField {
    pub fn sample(
        master_seed: u64,
        block_side: f64,
        gap: f64,
        domain: Box2,
        tolerance: f64,
        max_degree: usize,
    ) -> Result<Self> {
        assert!(block_side > 0.0 && gap >= 0.0);
        let stride = block_side + gap;
        let w = domain.hi[0] - domain.lo[0];
        let h = domain.hi[1] - domain.lo[1];
        let nbx = (((w + gap) / stride).floor() as usize).max(1);
        let nby = (((h + gap) / stride).floor() as usize).max(1);
        let mut blocks = Vec::with_capacity(nbx * nby);
        for bi in 0..nbx {
            for bj in 0..nby {
                let lo = [
                    domain.lo[0] + bi as f64 * stride,
                    domain.lo[1] + bj as f64 * stride,
                ];
                let bbox = Box2::new(lo, [
                    (lo[0] + block_side).min(domain.hi[0]),
                    (lo[1] + block_side).min(domain.hi[1]),
                ]);
                let idx = (bi * nby + bj) as u64;
                let mut rng = stream(master_seed, StreamDomain::BlockCoefficients, idx);
                blocks.push(BfSeries::sample(&mut rng, bbox, tolerance, max_degree)?);
            }
        }
        Ok(Self {
            origin: domain.lo,
            side: block_side,
            gap,
            nbx,
            nby,
            blocks,
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_side(&self) -> f64 {
        self.side
    }

    /// Boxes on which the field is defined.
    pub fn block_boxes(&self) -> Vec<Box2> {
        let stride = self.side + self.gap;
        let mut out = Vec::with_capacity(self.blocks.len());
        for bi in 0..self.nbx {
            for bj in 0..self.nby {
                let lo = [
                    self.origin[0] + bi as f64 * stride,
                    self.origin[1] + bj as f64 * stride,
                ];
                out.push(Box2::new(lo, [lo[0] + self.side, lo[1] + self.side]));
            }
        }
        out
    }

    fn locate(&self, p: [f64; 2]) -> Option<usize> {
        let stride = self.side + self.gap;
        let tx = p[0] - self.origin[0];
        let ty = p[1] - self.origin[1];
        if tx < 0.0 || ty < 0.0 {
            return None;
        }
        let bi = (tx / stride).floor() as usize;
        let bj = (ty / stride).floor() as usize;
        if bi >= self.nbx || bj >= self.nby {
            return None;
        }
        // inside the block, not the trailing gap
        if tx - bi as f64 * stride > self.side || ty - bj as f64 * stride > self.side {
            return None;
        }
        Some(bi * self.nby + bj)
    }

    /// Field value; NaN in the gaps where the field is undefined.
    pub fn value(&self, p: [f64; 2]) -> f64 {
        match self.locate(p) {
            Some(idx) => self.blocks[idx].value(p),
            None => f64::NAN,
        }
    }

    pub fn jet2(&self, p: [f64; 2]) -> Option<Jet2> {
        self.locate(p).map(|idx| self.blocks[idx].jet2(p))
    }

    pub(crate) fn block_series(&self, idx: usize) -> &BfSeries {
        &self.blocks[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_degenerates_to_plain_sampler() {
        let domain = Box2::new([0.0, 0.0], [4.0, 4.0]);
        let f = BlockField::sample(3, 4.0, 0.5, domain, 1e-10, 2048).unwrap();
        assert_eq!(f.block_count(), 1);
        // identical to a plain series drawn from the same stream
        let mut rng = stream(3, StreamDomain::BlockCoefficients, 0);
        let plain = BfSeries::sample(&mut rng, domain, 1e-10, 2048).unwrap();
        let p = [1.3, 2.2];
        assert_eq!(f.value(p), plain.value(p));
    }

    #[test]
    fn gaps_are_undefined_blocks_are_not() {
        let domain = Box2::new([0.0, 0.0], [9.0, 9.0]);
        let f = BlockField::sample(1, 4.0, 1.0, domain, 1e-10, 2048).unwrap();
        assert_eq!(f.block_count(), 4);
        assert!(f.value([2.0, 2.0]).is_finite());
        assert!(f.value([4.5, 2.0]).is_nan()); // x-gap
        assert!(f.value([7.0, 7.0]).is_finite()); // second block
    }

    #[test]
    fn cross_block_independence_and_in_block_covariance() {
        let domain = Box2::new([0.0, 0.0], [9.0, 4.0]);
        let n = 4000;
        let p_in1 = [1.0, 2.0];
        let p_in2 = [2.0, 2.0]; // same block, distance 1
        let p_other = [6.0, 2.0]; // different block
        let (mut c_in, mut c_cross) = (0.0, 0.0);
        for seed in 0..n {
            let f = BlockField::sample(seed as u64, 4.0, 1.0, domain, 1e-10, 2048).unwrap();
            let v1 = f.value(p_in1);
            c_in += v1 * f.value(p_in2);
            c_cross += v1 * f.value(p_other);
        }
        let se = 1.2 / (n as f64).sqrt();
        let want = (-0.5f64).exp();
        assert!(
            (c_in / n as f64 - want).abs() < 3.0 * se,
            "in-block cov {} vs {want}",
            c_in / n as f64
        );
        assert!(
            (c_cross / n as f64).abs() < 3.0 * se,
            "cross-block cov {}",
            c_cross / n as f64
        );
    }
}

use crate::error::Result;
use crate::graphdepth::{KernelOffsets, PaddingMode, SpatialGrid};
use crate::scalar::Scalar;

const NONE: u32 = u32::MAX;

/// Neighbour table: `nbr[p * k + j]` is the source site of tap `j` at site `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGeom {
    pub sites: usize,
    pub k: usize,
    nbr: Vec<u32>,
}

impl ConvGeom {
    pub fn new(grid: &SpatialGrid, kernel: &KernelOffsets, padding: PaddingMode) -> Result<Self> {
        crate::graphdepth::boundary_count(grid, kernel, padding)?;
        let sites = grid.size();
        let circular = padding == PaddingMode::Circular;
        let mut nbr = Vec::with_capacity(sites * kernel.k());
        for p in 0..sites {
            let c = grid.coords(p);
            for d in &kernel.offsets {
                nbr.push(grid.shift(&c, d, circular).map_or(NONE, |u| u as u32));
            }
        }
        Ok(ConvGeom {
            sites,
            k: kernel.k(),
            nbr,
        })
    }

    #[inline]
    pub fn source(&self, p: usize, j: usize) -> Option<usize> {
        match self.nbr[p * self.k + j] {
            NONE => None,
            u => Some(u as usize),
        }
    }

    /// How many (site, tap) pairs read each source site.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.sites];
        for &u in &self.nbr {
            if u != NONE {
                c[u as usize] += 1;
            }
        }
        c
    }

    /// `[b, P, ci]` to `[b * P, k * ci]`.
    pub fn im2col<F: Scalar>(&self, x: &[F], ci: usize) -> Vec<F> {
        let b = x.len() / (self.sites * ci);
        let mut col = vec![F::zero(); b * self.sites * self.k * ci];
        for s in 0..b {
            let xs = &x[s * self.sites * ci..(s + 1) * self.sites * ci];
            for p in 0..self.sites {
                let row = &mut col[(s * self.sites + p) * self.k * ci..][..self.k * ci];
                for j in 0..self.k {
                    if let Some(u) = self.source(p, j) {
                        row[j * ci..(j + 1) * ci].copy_from_slice(&xs[u * ci..(u + 1) * ci]);
                    }
                }
            }
        }
        col
    }

    /// Adjoint of `im2col`, accumulated into `dx`.
    pub fn col2im_add<F: Scalar>(&self, col: &[F], ci: usize, dx: &mut [F]) {
        let b = dx.len() / (self.sites * ci);
        for s in 0..b {
            for p in 0..self.sites {
                let row = &col[(s * self.sites + p) * self.k * ci..][..self.k * ci];
                for j in 0..self.k {
                    if let Some(u) = self.source(p, j) {
                        let dst = &mut dx[(s * self.sites + u) * ci..][..ci];
                        for (d, &v) in dst.iter_mut().zip(&row[j * ci..(j + 1) * ci]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

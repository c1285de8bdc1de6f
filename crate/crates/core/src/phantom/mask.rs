use crate::error::{Error, Result};

/// Binary voxel mask, stored `x` fastest, then `y`, then `z`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    nx: usize,
    ny: usize,
    nz: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(extents: (usize, usize, usize), data: Vec<bool>) -> Result<Self> {
        let (nx, ny, nz) = extents;
        if nx * ny * nz != data.len() {
            return Err(Error::shape(
                "Mask::new",
                format!("extents {extents:?} need {} voxels, got {}", nx * ny * nz, data.len()),
            ));
        }
        Ok(Mask { nx, ny, nz, data })
    }

    pub fn empty(extents: (usize, usize, usize)) -> Self {
        let (nx, ny, nz) = extents;
        Mask {
            nx,
            ny,
            nz,
            data: vec![false; nx * ny * nz],
        }
    }

    pub fn from_fn(extents: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let (nx, ny, nz) = extents;
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Mask { nx, ny, nz, data }
    }

    /// Voxels where `values > threshold`.
    pub fn threshold(extents: (usize, usize, usize), values: &[f64], threshold: f64) -> Result<Self> {
        Mask::new(extents, values.iter().map(|&v| v > threshold).collect())
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        (i % self.nx, (i / self.nx) % self.ny, i / (self.nx * self.ny))
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn set_index(&mut self, i: usize, v: bool) {
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.extents() == other.extents() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && b)
    }

    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a || b)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.extents() != other.extents() {
            return Err(Error::shape(
                "Mask",
                format!("extents {:?} vs {:?}", self.extents(), other.extents()),
            ));
        }
        Ok(Mask {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    /// Indices of the 6-connected in-bounds neighbours of voxel `i`.
    pub fn neighbors6(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let (x, y, z) = self.coords(i);
        let offsets: [(isize, isize, isize); 6] =
            [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
        offsets.into_iter().filter_map(move |(dx, dy, dz)| {
            let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if xx < 0 || yy < 0 || zz < 0 || xx >= self.nx as isize || yy >= self.ny as isize || zz >= self.nz as isize {
                None
            } else {
                Some(self.index(xx as usize, yy as usize, zz as usize))
            }
        })
    }

    /// Mask voxels with at least one 6-neighbour outside the mask; voxels on
    /// the volume border count as boundary.
    pub fn boundary(&self) -> Mask {
        let mut out = Mask::empty(self.extents());
        for i in 0..self.data.len() {
            if !self.data[i] {
                continue;
            }
            let (x, y, z) = self.coords(i);
            let on_border = x == 0 || y == 0 || z == 0 || x + 1 == self.nx || y + 1 == self.ny || z + 1 == self.nz;
            if on_border || self.neighbors6(i).any(|j| !self.data[j]) {
                out.data[i] = true;
            }
        }
        out
    }

    /// Voxels within Euclidean distance `radius` (in voxels) of any boundary voxel.
    pub fn boundary_shell(&self, radius: f64) -> Mask {
        self.boundary().dilate(radius)
    }

    /// Voxels within Euclidean distance `radius` of any set voxel.
    pub fn dilate(&self, radius: f64) -> Mask {
        let r = radius.max(0.0);
        let ri = r.floor() as isize;
        let r2 = r * r;
        let mut ball = Vec::new();
        for dz in -ri..=ri {
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy + dz * dz) as f64) <= r2 {
                        ball.push((dx, dy, dz));
                    }
                }
            }
        }
        let mut out = Mask::empty(self.extents());
        for i in 0..self.data.len() {
            if !self.data[i] {
                continue;
            }
            let (x, y, z) = self.coords(i);
            for &(dx, dy, dz) in &ball {
                let (xx, yy, zz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                if xx >= 0 && yy >= 0 && zz >= 0 && (xx as usize) < self.nx && (yy as usize) < self.ny && (zz as usize) < self.nz {
                    let j = self.index(xx as usize, yy as usize, zz as usize);
                    out.data[j] = true;
                }
            }
        }
        out
    }
}

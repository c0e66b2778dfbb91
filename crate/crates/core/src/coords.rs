//! Normalized coordinate grids, the frozen frequency encoding, and the
//! epoch-shuffled minibatch sampler.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Cell centers of an `H×W` image split into `p×p` patches, mapped into
/// `(-1, 1)²` as `c = (2i + 1)/n − 1` per axis. Row-major: y slowest, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    patch: usize,
    coords: Tensor2D,
}

impl CoordGrid {
    pub fn new(height: usize, width: usize, patch: usize) -> Result<Self> {
        if height == 0 || width == 0 || patch == 0 {
            return Err(Error::config(format!(
                "grid dimensions must be positive, got {height}x{width} with patch {patch}"
            )));
        }
        if height % patch != 0 || width % patch != 0 {
            return Err(Error::config(format!(
                "patch size {patch} does not divide {height}x{width}"
            )));
        }
        let rows = height / patch;
        let cols = width / patch;
        let mut data = Vec::with_capacity(rows * cols * 2);
        for r in 0..rows {
            let y = axis_coord(r, rows);
            for c in 0..cols {
                data.push(axis_coord(c, cols));
                data.push(y);
            }
        }
        Ok(Self {
            height,
            width,
            patch,
            coords: Tensor2D::from_vec(rows * cols, 2, data)?,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    /// Patch cells per row.
    pub fn cells_x(&self) -> usize {
        self.width / self.patch
    }

    /// Patch cells per column.
    pub fn cells_y(&self) -> usize {
        self.height / self.patch
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn coords(&self) -> &Tensor2D {
        &self.coords
    }
}

fn axis_coord(i: usize, n: usize) -> f32 {
    ((2 * i + 1) as f64 / n as f64 - 1.0) as f32
}

/// Builds the patch-center grid. See [`CoordGrid`].
pub fn make_grid(height: usize, width: usize, patch: usize) -> Result<CoordGrid> {
    CoordGrid::new(height, width, patch)
}

/// Parameter-free frequency encoding: optionally the raw coordinates, then
/// `sin(2ᵏπc), cos(2ᵏπc)` for `k = 0..L` and each component `c ∈ {x, y}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEncoding {
    n_freqs: usize,
    include_input: bool,
}

impl PosEncoding {
    pub fn new(n_freqs: usize, include_input: bool) -> Result<Self> {
        if n_freqs == 0 && !include_input {
            return Err(Error::config("positional encoding would produce no features"));
        }
        if n_freqs > 30 {
            return Err(Error::config(format!("{n_freqs} frequencies exceeds the supported 30")));
        }
        Ok(Self {
            n_freqs,
            include_input,
        })
    }

    pub fn n_freqs(&self) -> usize {
        self.n_freqs
    }

    pub fn include_input(&self) -> bool {
        self.include_input
    }

    pub fn out_dim(&self) -> usize {
        4 * self.n_freqs + if self.include_input { 2 } else { 0 }
    }

    pub fn encode(&self, coords: &Tensor2D) -> Result<Tensor2D> {
        if coords.cols() != 2 {
            return Err(Error::shape(format!(
                "positional encoding takes 2D coordinates, got {} columns",
                coords.cols()
            )));
        }
        let mut out = Tensor2D::zeros(coords.rows(), self.out_dim());
        for r in 0..coords.rows() {
            let (x, y) = (coords.get(r, 0), coords.get(r, 1));
            let row = out.row_mut(r);
            let mut k = 0;
            if self.include_input {
                row[0] = x;
                row[1] = y;
                k = 2;
            }
            for f in 0..self.n_freqs {
                let w = (1u64 << f) as f64 * std::f64::consts::PI;
                for c in [x, y] {
                    let phase = w * c as f64;
                    row[k] = phase.sin() as f32;
                    row[k + 1] = phase.cos() as f32;
                    k += 2;
                }
            }
        }
        Ok(out)
    }
}

/// Encodes coordinates with `enc`. See [`PosEncoding::encode`].
pub fn pos_encode(enc: &PosEncoding, coords: &Tensor2D) -> Result<Tensor2D> {
    enc.encode(coords)
}

/// Sample count lower bound `max(1, ⌊H·W/1024⌋)`.
pub fn default_sample_count(height: usize, width: usize) -> usize {
    (height * width / 1024).max(1)
}

/// Walks a fresh random permutation of `0..n_points` per epoch in batches of
/// at most `batch_size` indices. Epoch `e` is shuffled with seed `seed ⊕ e`.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    n_points: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    permutation: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(n_points: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("sampler batch size must be positive"));
        }
        if n_points == 0 {
            return Err(Error::config("sampler needs at least one point"));
        }
        let mut s = Self {
            n_points,
            batch_size,
            seed,
            epoch: 0,
            permutation: (0..n_points).collect(),
            cursor: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch);
        self.permutation.sort_unstable();
        self.permutation.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// The next slice of the current permutation; the last batch of an epoch
    /// may be short. Reshuffles once the epoch is exhausted.
    pub fn next_batch(&mut self) -> &[usize] {
        if self.cursor >= self.n_points {
            self.epoch += 1;
            self.shuffle();
        }
        let start = self.cursor;
        let end = (start + self.batch_size).min(self.n_points);
        self.cursor = end;
        &self.permutation[start..end]
    }
}

//! Block-wise quantization noise.
//!
//! Each weight matrix is tiled into blocks; every step a random subset of
//! blocks is replaced by its fake-quantized value while the gradient flows
//! through as if nothing happened.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::quant::{fake_quantize, QuantSpec};
use crate::tensor::{Scalar, Tensor, Var};

/// Tiling of a `rows × cols` matrix; edge blocks may be ragged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub rows: usize,
    pub cols: usize,
    pub block_rows: usize,
    pub block_cols: usize,
}

impl BlockGrid {
    pub fn grid_rows(&self) -> usize {
        self.rows.div_ceil(self.block_rows)
    }

    pub fn grid_cols(&self) -> usize {
        self.cols.div_ceil(self.block_cols)
    }

    pub fn len(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row and column ranges covered by block `index` (row-major order).
    pub fn block_bounds(&self, index: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (br, bc) = (index / self.grid_cols(), index % self.grid_cols());
        let r0 = br * self.block_rows;
        let c0 = bc * self.block_cols;
        (
            r0..(r0 + self.block_rows).min(self.rows),
            c0..(c0 + self.block_cols).min(self.cols),
        )
    }

    pub fn block_of(&self, row: usize, col: usize) -> usize {
        (row / self.block_rows) * self.grid_cols() + col / self.block_cols
    }
}

/// Block dimensions larger than the matrix collapse to a single block.
pub fn partition_blocks(shape: &[usize], block_rows: usize, block_cols: usize) -> Result<BlockGrid> {
    let &[rows, cols] = shape else {
        return Err(Error::invalid("partition_blocks", format!("rank-2 shape required, got {shape:?}")));
    };
    if block_rows == 0 || block_cols == 0 {
        return Err(Error::invalid("partition_blocks", "block dimensions must be at least 1"));
    }
    Ok(BlockGrid {
        rows,
        cols,
        block_rows: block_rows.min(rows.max(1)),
        block_cols: block_cols.min(cols.max(1)),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockMask {
    pub grid: BlockGrid,
    pub selected: Vec<bool>,
    pub rate: f32,
    pub seed: u64,
}

impl BlockMask {
    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }

    pub fn selected_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.selected
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }

    /// Per-element selection in row-major order.
    pub fn element_mask(&self) -> Vec<bool> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(g.rows * g.cols);
        for r in 0..g.rows {
            for c in 0..g.cols {
                out.push(self.selected[g.block_of(r, c)]);
            }
        }
        out
    }
}

/// Selects each block independently with probability `rate`.
pub fn sample_mask(grid: BlockGrid, rate: f32, seed: u64) -> Result<BlockMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid("sample_mask", format!("rate {rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = (0..grid.len())
        .map(|_| rng.random::<f32>() < rate)
        .collect();
    Ok(BlockMask {
        grid,
        selected,
        rate,
        seed,
    })
}

/// `W` with every selected block replaced by its fake-quantized value.
pub fn apply_quant_noise(w: &Tensor, mask: &BlockMask, spec: &QuantSpec) -> Result<Tensor> {
    let g = &mask.grid;
    if w.shape() != [g.rows, g.cols] {
        return Err(Error::Shape {
            op: "apply_quant_noise",
            left: w.shape().to_vec(),
            right: vec![g.rows, g.cols],
        });
    }
    let quantized = fake_quantize(w, spec);
    let data = w
        .data()
        .iter()
        .zip(quantized.data())
        .zip(mask.element_mask())
        .map(|((&orig, &q), sel)| if sel { q } else { orig })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Tape version of [`apply_quant_noise`]; the gradient is the identity.
pub fn quant_noise_var<'t, T: Scalar>(
    w: &Var<'t, T>,
    mask: &BlockMask,
    spec: &QuantSpec,
) -> Result<Var<'t, T>> {
    let noised = apply_quant_noise(&w.value().cast::<f32>(), mask, spec)?;
    w.straight_through(noised.cast())
}

//! Strip zigzag scan orders that flatten an `H x W` grid into a sequence.
//!
//! The grid is cut into non-overlapping strips of `s` rows (horizontal
//! strips) or `s` columns (vertical strips). Inside a horizontal strip the
//! cells are visited column by column, alternating downward and upward, so
//! every step moves to a 4-neighbour. Strips alternate left-to-right and
//! right-to-left so each strip starts in the column where the previous one
//! ended. Vertical strips are the exact transpose.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" | "horizontal" => Ok(Orientation::Horizontal),
            "v" | "vertical" => Ok(Orientation::Vertical),
            other => Err(Error::Config(format!("orientation must be `h` or `v`, got `{other}`"))),
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Vertical => "vertical",
        })
    }
}

/// Bijective scan of an `H x W` grid. `perm[t]` is the flat index
/// (`row * W + col`) visited at time `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    height: usize,
    width: usize,
    strip_size: usize,
    orientation: Orientation,
    perm: Vec<usize>,
    inv_perm: Vec<usize>,
}

/// Horizontal-strip order for a `rows x cols` grid, as flat indices.
fn horizontal_strips(rows: usize, cols: usize, s: usize) -> Vec<usize> {
    let mut perm = Vec::with_capacity(rows * cols);
    for (strip, top) in (0..rows).step_by(s).enumerate() {
        let bottom = (top + s).min(rows);
        let columns: Vec<usize> = if strip % 2 == 0 {
            (0..cols).collect()
        } else {
            (0..cols).rev().collect()
        };
        for (j, col) in columns.into_iter().enumerate() {
            if j % 2 == 0 {
                perm.extend((top..bottom).map(|row| row * cols + col));
            } else {
                perm.extend((top..bottom).rev().map(|row| row * cols + col));
            }
        }
    }
    perm
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (t, &cell) in perm.iter().enumerate() {
        inv[cell] = t;
    }
    inv
}

impl ScanOrder {
    /// Strip zigzag order. `strip_size` must lie in `1..=H` for horizontal
    /// strips and `1..=W` for vertical ones.
    pub fn build(height: usize, width: usize, strip_size: usize, orientation: Orientation) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "scan grid must be non-empty, got {height}x{width}"
            )));
        }
        let limit = match orientation {
            Orientation::Horizontal => height,
            Orientation::Vertical => width,
        };
        if strip_size == 0 || strip_size > limit {
            return Err(Error::Config(format!(
                "strip size {strip_size} out of range 1..={limit} for {orientation} strips on {height}x{width}"
            )));
        }
        let perm = match orientation {
            Orientation::Horizontal => horizontal_strips(height, width, strip_size),
            Orientation::Vertical => horizontal_strips(width, height, strip_size)
                .into_iter()
                .map(|t| {
                    // transposed grid is width x height
                    let (col, row) = (t / height, t % height);
                    row * width + col
                })
                .collect(),
        };
        Ok(Self::from_parts(height, width, strip_size, orientation, perm))
    }

    /// Plain row-major order, used as a non-strip baseline.
    pub fn raster(height: usize, width: usize) -> Self {
        Self::from_parts(
            height,
            width,
            height,
            Orientation::Horizontal,
            (0..height * width).collect(),
        )
    }

    fn from_parts(height: usize, width: usize, strip_size: usize, orientation: Orientation, perm: Vec<usize>) -> Self {
        let inv_perm = invert(&perm);
        Self {
            height,
            width,
            strip_size,
            orientation,
            perm,
            inv_perm,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn strip_size(&self) -> usize {
        self.strip_size
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn inv_perm(&self) -> &[usize] {
        &self.inv_perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `(row, col)` visited at time `t`.
    pub fn cell(&self, t: usize) -> (usize, usize) {
        let flat = self.perm[t];
        (flat / self.width, flat % self.width)
    }

    /// Index of the strip containing `(row, col)`.
    pub fn strip_of(&self, row: usize, col: usize) -> usize {
        match self.orientation {
            Orientation::Horizontal => row / self.strip_size,
            Orientation::Vertical => col / self.strip_size,
        }
    }

    fn check_map(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        match shape {
            [h, w, c] if *h == self.height && *w == self.width => Ok(*c),
            _ => Err(Error::dim(op, shape, &[self.height, self.width])),
        }
    }

    fn check_seq(&self, op: &'static str, shape: &[usize]) -> Result<usize> {
        match shape {
            [d, c] if *d == self.len() => Ok(*c),
            _ => Err(Error::dim(op, shape, &[self.len()])),
        }
    }

    /// `[H, W, C] -> [H*W, C]`; row `t` is the channel vector of `perm[t]`.
    pub fn serialize(&self, g: &Graph, x: Var) -> Result<Var> {
        let c = self.check_map("serialize", &g.shape(x))?;
        let flat = g.reshape(x, [self.len(), c])?;
        g.gather_rows(flat, &self.perm)
    }

    /// Inverse of [`ScanOrder::serialize`].
    pub fn deserialize(&self, g: &Graph, seq: Var) -> Result<Var> {
        let c = self.check_seq("deserialize", &g.shape(seq))?;
        let grid = g.gather_rows(seq, &self.inv_perm)?;
        g.reshape(grid, [self.height, self.width, c])
    }

    pub fn serialize_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.check_map("serialize", x.shape())?;
        let mut data = Vec::with_capacity(x.numel());
        for &cell in &self.perm {
            data.extend_from_slice(&x.data()[cell * c..(cell + 1) * c]);
        }
        Tensor::new([self.len(), c], data)
    }

    pub fn deserialize_tensor(&self, seq: &Tensor) -> Result<Tensor> {
        let c = self.check_seq("deserialize", seq.shape())?;
        let mut data = vec![0.0; seq.numel()];
        for (t, &cell) in self.perm.iter().enumerate() {
            data[cell * c..(cell + 1) * c].copy_from_slice(&seq.data()[t * c..(t + 1) * c]);
        }
        Tensor::new([self.height, self.width, c], data)
    }
}

/// Checks bijectivity and the adjacency rules of a strip scan: steps inside
/// a strip move to a 4-neighbour, steps across a strip boundary stay in the
/// same column (row for vertical strips) and jump at most `strip_size`.
pub fn verify_strip_invariants(o: &ScanOrder) -> std::result::Result<(), String> {
    let n = o.height * o.width;
    let mut seen = vec![false; n];
    if o.perm.len() != n {
        return Err(format!("perm has {} entries, expected {n}", o.perm.len()));
    }
    for &cell in &o.perm {
        if cell >= n || seen[cell] {
            return Err(format!("perm is not a bijection (cell {cell})"));
        }
        seen[cell] = true;
    }
    for (t, &cell) in o.perm.iter().enumerate() {
        if o.inv_perm[cell] != t {
            return Err(format!("inv_perm[perm[{t}]] != {t}"));
        }
    }
    for t in 1..n {
        let (r0, c0) = o.cell(t - 1);
        let (r1, c1) = o.cell(t);
        let manhattan = r0.abs_diff(r1) + c0.abs_diff(c1);
        if o.strip_of(r0, c0) == o.strip_of(r1, c1) {
            if manhattan != 1 {
                return Err(format!(
                    "within-strip step {t}: ({r0},{c0}) -> ({r1},{c1}) has distance {manhattan}"
                ));
            }
        } else {
            let (same_line, gap) = match o.orientation {
                Orientation::Horizontal => (c0 == c1, r0.abs_diff(r1)),
                Orientation::Vertical => (r0 == r1, c0.abs_diff(c1)),
            };
            if !same_line || gap > o.strip_size || gap == 0 {
                return Err(format!(
                    "cross-strip step {t}: ({r0},{c0}) -> ({r1},{c1}) breaks the boundary rule"
                ));
            }
        }
    }
    Ok(())
}

/// The two scan paths of a strip-scanning block: one per strip orientation,
/// same grid and strip size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualPath {
    pub horizontal: ScanOrder,
    pub vertical: ScanOrder,
}

impl DualPath {
    pub fn new(height: usize, width: usize, strip_size: usize) -> Result<Self> {
        Ok(Self {
            horizontal: ScanOrder::build(height, width, strip_size, Orientation::Horizontal)?,
            vertical: ScanOrder::build(height, width, strip_size, Orientation::Vertical)?,
        })
    }

    /// Both paths replaced by raster order.
    pub fn raster(height: usize, width: usize) -> Self {
        Self {
            horizontal: ScanOrder::raster(height, width),
            vertical: ScanOrder::raster(height, width),
        }
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.horizontal.height(), self.horizontal.width())
    }
}

//! Dense tensors and reverse-mode differentiation.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{
    finite_diff_check, finite_diff_check_inputs, finite_diff_check_smooth, relative_error, Coords, GradCheckReport,
};
pub use graph::{Function, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

impl Graph {
    /// Pointwise linear map across channels: `[H, W, C_in] x [C_in, C_out] + bias`.
    pub fn conv1x1(&self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (h, wd, cin, cout) = match (&sx[..], &sw[..]) {
            ([h, wd, cin], [wcin, cout]) if cin == wcin => (*h, *wd, *cin, *cout),
            _ => return Err(Error::dim("conv1x1", &sx, &sw)),
        };
        let flat = self.reshape(x, [h * wd, cin])?;
        let mixed = self.matmul(flat, w)?;
        let biased = self.add_channel(mixed, bias)?;
        self.reshape(biased, [h, wd, cout])
    }
}

#[cfg(test)]
mod tests;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GesrError, Result};
use crate::numerics::graph::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Silu,
}

/// Architecture of a feed-forward stack: `widths[0]` is the input width and
/// each consecutive pair defines one affine layer. The activation is applied
/// after every layer except the last, which stays affine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(GesrError::Config(format!(
                "mlp needs at least one layer (got widths {widths:?})"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(GesrError::Config(format!(
                "mlp widths must be positive (got {widths:?})"
            )));
        }
        Ok(MlpSpec { widths, activation })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// A registered MLP: one weight/bias pair per layer. Weights are Glorot
/// initialized; biases start at zero.
#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        spec: MlpSpec,
        rng: &mut impl Rng,
    ) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(spec.num_layers());
        for l in 0..spec.num_layers() {
            let (din, dout) = (spec.widths[l], spec.widths[l + 1]);
            let w = store.register_glorot(&format!("{prefix}.w{l}"), din, dout, rng)?;
            let b = store.register_zeros(&format!("{prefix}.b{l}"), 1, dout)?;
            layers.push((w, b));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// The (weight, bias) parameter pair per layer, in order.
    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Runs the stack on an NxD_in value, producing NxD_out.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let got = g.value(x).cols();
        if got != self.spec.input_width() {
            return Err(GesrError::dim(
                "mlp_forward",
                format!("input width {got}, expected {}", self.spec.input_width()),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let wp = g.param(store, *w);
            let bp = g.param(store, *b);
            let affine = g.matmul(h, wp)?;
            h = g.add_row(affine, bp)?;
            if l < last {
                h = match self.spec.activation {
                    Activation::Identity => h,
                    Activation::Relu => g.relu(h),
                    Activation::Silu => g.silu(h),
                };
            }
        }
        Ok(h)
    }
}

//! Parameterized building blocks shared by the encoder stages.

use rand::Rng;

use crate::error::Result;
use crate::numeric::{Graph, ParamId, ParamStore, Tensor, Var};

/// Fan-in scaled normal initialization with unit gain (`std = 1/sqrt(fan_in)`).
pub fn kaiming<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    kaiming_scaled(shape, fan_in, 1.0, rng)
}

/// Fan-in scaled normal initialization, `std = gain/sqrt(fan_in)`. Callers
/// pick the gain that keeps activation variance flat through the block the
/// weight sits in (see [`crate::cst::BRANCH_GAIN`] and
/// [`crate::ssa::residual_gain`]).
pub fn kaiming_scaled<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    gain: f64,
    rng: &mut R,
) -> Tensor {
    Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, fan_in, fan_out, bias, 1.0, rng)
    }

    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_scaled(&[fan_in, fan_out], fan_in, gain, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// 1-D convolution weights `[cout, cin, kernel]` plus optional bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_gain(store, name, cin, cout, kernel, bias, 1.0, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_scaled(&[cout, cin, kernel], cin * kernel, gain, rng),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            kernel,
        }
    }
}

//! Parameterized building blocks.

use crate::error::Result;
use crate::numerics::{Bound, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Normal with the given standard deviation.
    Normal(f32),
    Zero,
}

fn init_tensor(shape: &[usize], fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Normal(std) => Tensor::randn(shape, std, rng),
        Init::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| ((rng.uniform() * 2.0 - 1.0) * a) as f32).collect();
            Tensor::new(shape, data).expect("init shape")
        }
    }
}

/// `y = x W + b` with `W: (in, out)`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, init: Init, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[inputs, outputs], inputs, outputs, init, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add_row(y, p.var(self.b))
    }
}

/// Square-kernel convolution with `same`-style padding.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, init: Init, rng: &mut Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        let fan_out = cout * kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            init_tensor(&[cout, cin, kernel, kernel], fan_in, fan_out, init, rng),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self { w, b, kernel }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), p.var(self.b), 1, self.kernel / 2)
    }
}

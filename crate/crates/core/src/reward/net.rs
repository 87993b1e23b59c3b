//! Two-conv image classifier shared by the scorer and the discriminator.

use crate::error::{shape_err, Result};
use crate::generator::IMAGE_SIDE;
use crate::numerics::{Bound, Conv2d, Init, Linear, ParamStore, Real, Rng, Tape, Tensor, Var};

const C1: usize = 8;
const C2: usize = 16;

#[derive(Clone, Debug)]
pub struct ConvNet {
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
    outputs: usize,
}

impl ConvNet {
    pub fn new(outputs: usize, zero_head: bool, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut ps = ParamStore::new();
        let conv1 = Conv2d::new(&mut ps, "conv1", 1, C1, 3, Init::Xavier, &mut rng);
        let conv2 = Conv2d::new(&mut ps, "conv2", C1, C2, 3, Init::Xavier, &mut rng);
        let half = IMAGE_SIDE / 2;
        let init = if zero_head { Init::Zero } else { Init::Xavier };
        let fc = Linear::new(&mut ps, "fc", C2 * half * half, outputs, init, &mut rng);
        Self { params: ps, conv1, conv2, fc, outputs }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// Logits `(batch, outputs)` for `(8, 8, 1)` images.
    pub fn graph<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, images: &[&Tensor]) -> Result<Var> {
        let px = IMAGE_SIDE * IMAGE_SIDE;
        let mut data = Vec::with_capacity(images.len() * px);
        for im in images {
            if im.len() != px {
                return shape_err(format!("image {:?}", im.shape()));
            }
            data.extend_from_slice(im.data());
        }
        let b = images.len();
        let x = tape.constant(&Tensor::new(&[b, 1, IMAGE_SIDE, IMAGE_SIDE], data)?);
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.silu(h);
        let h = tape.conv2d(h, p.var(self.conv2.w), p.var(self.conv2.b), 2, 1)?;
        let h = tape.silu(h);
        let feat = tape.shape(h)[1..].iter().product::<usize>();
        let h = tape.reshape(h, &[b, feat])?;
        self.fc.forward(tape, p, h)
    }

    pub fn logits(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape, false);
        let l = self.graph(&mut tape, &p, images)?;
        Ok(tape.value(l).chunks(self.outputs).map(|r| r.iter().map(|&x| x as f64).collect()).collect())
    }
}

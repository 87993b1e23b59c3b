//! Origin-vs-accelerated discriminator.

use crate::error::{invalid, Error, Result};
use crate::numerics::{Rng, Tape, Tensor};
use crate::reward::buffers::DiscDatasets;
use crate::reward::net::ConvNet;
use crate::trainer::optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug)]
pub struct Discriminator {
    net: ConvNet,
    opt: AdamW,
    pub batch: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Discriminator {
    /// Zero-initialized output layer, so every score starts at 0.5.
    pub fn new(seed: u64, lr: f64, batch: usize) -> Self {
        let net = ConvNet::new(1, true, seed);
        let opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() }, net.params());
        Self { net, opt, batch }
    }

    pub fn from_net(net: ConvNet, lr: f64, batch: usize) -> Self {
        let opt = AdamW::new(AdamWConfig { lr, weight_decay: 0.0, ..Default::default() }, net.params());
        Self { net, opt, batch }
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    /// Probability that each image is an unaccelerated sample.
    pub fn score_batch(&self, images: &[&Tensor]) -> Result<Vec<f64>> {
        Ok(self.net.logits(images)?.iter().map(|l| sigmoid(l[0])).collect())
    }

    pub fn score(&self, image: &Tensor) -> Result<f64> {
        Ok(self.score_batch(&[image])?[0])
    }

    /// One cross-entropy step on `positives` (label 1) and `negatives`
    /// (label 0); returns the loss before the update.
    pub fn step(&mut self, positives: &[&Tensor], negatives: &[&Tensor]) -> Result<f64> {
        let mut imgs = positives.to_vec();
        imgs.extend_from_slice(negatives);
        let y: Vec<f64> = (0..imgs.len()).map(|i| if i < positives.len() { 1.0 } else { 0.0 }).collect();
        let mut tape = Tape::<f32>::new();
        let p = self.net.params().bind(&mut tape, true);
        let z = self.net.graph(&mut tape, &p, &imgs)?;
        let loss = tape.bce_with_logits(z, &y)?;
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Diverged("discriminator loss".into()));
        }
        let g = p.grads(self.net.params(), &tape.backward(loss)?);
        self.opt.step(self.net.params_mut(), &g)?;
        Ok(l)
    }
}

/// Half of each batch from each set; sizes differ by at most one.
pub fn balanced_batch(batch: usize, n_pos: usize, n_neg: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let pos = batch.div_ceil(2);
    let neg = batch - pos;
    ((0..pos).map(|_| rng.below(n_pos)).collect(), (0..neg).map(|_| rng.below(n_neg)).collect())
}

/// `steps` balanced cross-entropy updates; returns the mean loss.
pub fn train_discriminator(disc: &mut Discriminator, data: &DiscDatasets, steps: usize, rng: &mut Rng) -> Result<f64> {
    if data.origin().is_empty() || data.accele().is_empty() {
        return invalid("discriminator needs both datasets non-empty");
    }
    let mut total = 0.0;
    for _ in 0..steps {
        let (pi, ni) = balanced_batch(disc.batch, data.origin().len(), data.accele().len(), rng);
        let pos: Vec<&Tensor> = pi.iter().map(|&i| &data.origin()[i]).collect();
        let neg: Vec<&Tensor> = ni.iter().map(|&i| data.accele().get(i)).collect();
        total += disc.step(&pos, &neg)?;
    }
    Ok(if steps == 0 { 0.0 } else { total / steps as f64 })
}

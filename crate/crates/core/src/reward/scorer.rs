//! Frozen quality scorer: class log-likelihood plus prototype proximity.

use crate::error::{invalid, Error, Result};
use crate::generator::{SyntheticSample, IMAGE_SIDE};
use crate::numerics::{Rng, Tape, Tensor};
use crate::reward::net::ConvNet;
use crate::trainer::optim::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorerTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Noise images per step whose target is the uniform class
    /// distribution; keeps the classifier from being confident off-data.
    pub noise_batch: usize,
    pub seed: u64,
}

impl Default for ScorerTrainConfig {
    fn default() -> Self {
        Self { steps: 400, batch: 64, lr: 3e-3, noise_batch: 16, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct QualityScorer {
    net: ConvNet,
    prototypes: Vec<Tensor>,
    trained: bool,
}

fn log_softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + l.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    l.iter().map(|x| x - lse).collect()
}

/// Uniform pixels, or a standard-normal latent mapped to pixels the way
/// the sampler's starting noise is.
fn noise_image(uniform: bool, rng: &mut Rng) -> Tensor {
    let px = IMAGE_SIDE * IMAGE_SIDE;
    let data = (0..px)
        .map(|_| if uniform { rng.uniform() as f32 } else { ((rng.normal() as f32 + 1.0) * 0.5).clamp(0.0, 1.0) })
        .collect();
    Tensor::new(&[IMAGE_SIDE, IMAGE_SIDE, 1], data).expect("noise shape")
}

impl QualityScorer {
    pub fn untrained(vocab: usize, seed: u64) -> Self {
        Self { net: ConvNet::new(vocab, false, seed), prototypes: Vec::new(), trained: false }
    }

    /// Rebuilds a trained scorer from stored parts.
    pub fn from_parts(net: ConvNet, prototypes: Vec<Tensor>) -> Result<Self> {
        if prototypes.len() != net.outputs() {
            return invalid("one prototype per class required");
        }
        Ok(Self { net, prototypes, trained: true })
    }

    pub fn net(&self) -> &ConvNet {
        &self.net
    }

    pub fn prototypes(&self) -> &[Tensor] {
        &self.prototypes
    }

    pub fn vocab(&self) -> usize {
        self.net.outputs()
    }

    /// Fits the classifier with cross-entropy and sets per-class mean images.
    pub fn train(data: &[SyntheticSample], vocab: usize, tc: &ScorerTrainConfig) -> Result<Self> {
        if data.is_empty() {
            return invalid("empty dataset");
        }
        let mut s = Self::untrained(vocab, tc.seed);
        let mut rng = Rng::stream(tc.seed, 2);
        let mut opt = AdamW::new(AdamWConfig { lr: tc.lr, weight_decay: 0.0, ..Default::default() }, s.net.params());
        for _ in 0..tc.steps {
            let idx: Vec<usize> = (0..tc.batch).map(|_| rng.below(data.len())).collect();
            let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data[i].image).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
            let mut tape = Tape::<f32>::new();
            let p = s.net.params().bind(&mut tape, true);
            let logits = s.net.graph(&mut tape, &p, &imgs)?;
            let mut loss = tape.cross_entropy(logits, &labels)?;
            if tc.noise_batch > 0 {
                let noise: Vec<Tensor> = (0..tc.noise_batch).map(|i| noise_image(i % 2 == 0, &mut rng)).collect();
                let refs: Vec<&Tensor> = noise.iter().collect();
                let nl = s.net.graph(&mut tape, &p, &refs)?;
                let lp = tape.log_softmax(nl);
                let w = vec![-1.0 / (tc.noise_batch * vocab) as f64; tc.noise_batch * vocab];
                let uniform = tape.weighted_sum(lp, &w)?;
                loss = tape.add(loss, uniform)?;
            }
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Diverged("scorer loss".into()));
            }
            let g = p.grads(s.net.params(), &tape.backward(loss)?);
            opt.step(s.net.params_mut(), &g)?;
        }
        let px = IMAGE_SIDE * IMAGE_SIDE;
        let mut sums = vec![vec![0.0f64; px]; vocab];
        let mut counts = vec![0usize; vocab];
        for d in data {
            counts[d.label] += 1;
            for (a, &b) in sums[d.label].iter_mut().zip(d.image.data()) {
                *a += b as f64;
            }
        }
        s.prototypes = sums
            .into_iter()
            .zip(&counts)
            .map(|(v, &c)| {
                let data = v.iter().map(|x| (x / c.max(1) as f64) as f32).collect();
                Tensor::new(&[IMAGE_SIDE, IMAGE_SIDE, 1], data).expect("prototype shape")
            })
            .collect();
        s.trained = true;
        Ok(s)
    }

    /// Class log-probabilities for a batch of images.
    pub fn log_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(self.net.logits(images)?.iter().map(|l| log_softmax(l)).collect())
    }

    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .log_probs(images)?
            .iter()
            .map(|lp| (0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b])).unwrap())
            .collect())
    }

    /// `log p(prompt | image) - 0.5 * |image - prototype|^2 / 64`.
    pub fn score_batch(&self, images: &[&Tensor], prompts: &[usize]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::InvalidArgument("quality scorer is untrained".into()));
        }
        if images.len() != prompts.len() {
            return invalid("one prompt per image");
        }
        let lps = self.log_probs(images)?;
        let px = (IMAGE_SIDE * IMAGE_SIDE) as f64;
        images
            .iter()
            .zip(prompts)
            .zip(&lps)
            .map(|((im, &k), lp)| {
                let proto = self.prototypes.get(k).ok_or_else(|| Error::InvalidArgument(format!("prompt {k}")))?;
                let d2: f64 = im.data().iter().zip(proto.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                Ok(lp[k] - 0.5 * d2 / px)
            })
            .collect()
    }

    pub fn score(&self, image: &Tensor, prompt: usize) -> Result<f64> {
        Ok(self.score_batch(&[image], &[prompt])?[0])
    }
}

//! Synthetic class-conditional 8x8 images and the `.r3ds` container.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::generator::config::{IMAGE_SIDE, PATCH};
use crate::numerics::{mix_seed, Rng, Tensor};

pub const NUM_SHAPES: usize = 8;
const MAGIC: &[u8; 4] = b"R3DS";
const VERSION: u32 = 1;
const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `(8, 8, 1)` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

/// Renders one image of class `label`; the same `(label, seed)` always gives
/// the same pixels.
pub fn render(label: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let s = IMAGE_SIDE as isize;
    let amp = 0.7 + 0.3 * rng.uniform();
    let jitter = |rng: &mut Rng| rng.below(3) as isize - 1;
    let mut px = vec![0.0f64; PIXELS];
    let mut set = |x: isize, y: isize, v: f64| {
        if (0..s).contains(&x) && (0..s).contains(&y) {
            let p = &mut px[(y * s + x) as usize];
            *p = p.max(v);
        }
    };
    match label % NUM_SHAPES {
        0 => {
            let r = 3 + jitter(&mut rng);
            for x in 1..s - 1 {
                set(x, r, amp);
                set(x, r + 1, amp);
            }
        }
        1 => {
            let c = 3 + jitter(&mut rng);
            for y in 1..s - 1 {
                set(c, y, amp);
                set(c + 1, y, amp);
            }
        }
        2 => {
            let (cx, cy) = (3 + jitter(&mut rng).max(0), 3 + jitter(&mut rng).max(0));
            for i in 0..s {
                set(i, cy, amp);
                set(cx, i, amp);
            }
        }
        3 => {
            let cx = 3.5 + rng.uniform() * 1.5 - 0.75;
            let cy = 3.5 + rng.uniform() * 1.5 - 0.75;
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    set(x, y, amp * (-d2 / (2.0 * 1.3 * 1.3)).exp());
                }
            }
        }
        4 => {
            let phase = rng.below(2) as isize;
            for y in 0..s {
                for x in 0..s {
                    if ((x / 2) + (y / 2) + phase) % 2 == 0 {
                        set(x, y, amp);
                    }
                }
            }
        }
        5 => {
            let o = jitter(&mut rng);
            for y in 0..s {
                set(y + o, y, amp);
                set(y + o + 1, y, amp);
            }
        }
        6 => {
            let o = 1 + jitter(&mut rng).max(0);
            let e = o + 5;
            for i in o..=e {
                set(i, o, amp);
                set(i, e, amp);
                set(o, i, amp);
                set(e, i, amp);
            }
        }
        _ => {
            let o = jitter(&mut rng);
            for y in 0..s {
                set(s - 1 - y + o, y, amp);
                set(s - 2 - y + o, y, amp);
            }
        }
    }
    let data = px.iter().map(|&v| (v + 0.04 * rng.normal()).clamp(0.0, 1.0) as f32).collect();
    Tensor::new(&[IMAGE_SIDE, IMAGE_SIDE, 1], data).expect("image shape")
}

/// `n` samples with labels cycling through `0..vocab`.
pub fn gen_dataset(n: usize, vocab: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return invalid("dataset size must be at least 1");
    }
    if vocab == 0 || vocab > NUM_SHAPES {
        return invalid(format!("vocab must be in 1..={NUM_SHAPES}"));
    }
    Ok((0..n)
        .map(|i| {
            let label = i % vocab;
            SyntheticSample { image: render(label, mix_seed(seed, i as u64)), label }
        })
        .collect())
}

/// Image `(8, 8, 1)` in `[0, 1]` to latent tokens `(N, P)` in `[-1, 1]`.
pub fn patchify(image: &Tensor) -> Tensor {
    let g = IMAGE_SIDE / PATCH;
    let img = image.data();
    let mut out = vec![0.0f32; PIXELS];
    for ty in 0..g {
        for tx in 0..g {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let v = img[(ty * PATCH + dy) * IMAGE_SIDE + tx * PATCH + dx];
                    out[(ty * g + tx) * PATCH * PATCH + dy * PATCH + dx] = 2.0 * v - 1.0;
                }
            }
        }
    }
    Tensor::new(&[g * g, PATCH * PATCH], out).expect("latent shape")
}

/// Inverse of [`patchify`], clamped into `[0, 1]`.
pub fn unpatchify(latent: &Tensor) -> Tensor {
    let g = IMAGE_SIDE / PATCH;
    let x = latent.data();
    let mut out = vec![0.0f32; PIXELS];
    for ty in 0..g {
        for tx in 0..g {
            for dy in 0..PATCH {
                for dx in 0..PATCH {
                    let v = x[(ty * g + tx) * PATCH * PATCH + dy * PATCH + dx];
                    out[(ty * PATCH + dy) * IMAGE_SIDE + tx * PATCH + dx] = ((v + 1.0) * 0.5).clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(&[IMAGE_SIDE, IMAGE_SIDE, 1], out).expect("image shape")
}

pub fn write_dataset(w: &mut impl Write, samples: &[SyntheticSample], vocab: usize) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(vocab as u32).to_le_bytes())?;
    for s in samples {
        if s.image.len() != PIXELS {
            return invalid("image must have 64 pixels");
        }
        w.write_all(&(s.label as u32).to_le_bytes())?;
        for v in s.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the samples and the vocabulary size.
pub fn read_dataset(r: &mut impl Read) -> Result<(Vec<SyntheticSample>, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an R3DS file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported R3DS version {version}")));
    }
    let count = read_u32(r)? as usize;
    let vocab = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; PIXELS * 4];
    for _ in 0..count {
        let label = read_u32(r)? as usize;
        if label >= vocab {
            return Err(Error::Format(format!("label {label} outside vocab {vocab}")));
        }
        r.read_exact(&mut buf)?;
        let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push(SyntheticSample { image: Tensor::new(&[IMAGE_SIDE, IMAGE_SIDE, 1], data)?, label });
    }
    Ok((out, vocab))
}

pub fn save_dataset(path: &Path, samples: &[SyntheticSample], vocab: usize) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut f, samples, vocab)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(Vec<SyntheticSample>, usize)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut f)
}

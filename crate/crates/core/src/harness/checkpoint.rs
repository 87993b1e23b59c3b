//! `R3CK` bundles: named sections of named f32 tensors plus a CRC32 trailer.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::numerics::{ParamStore, Tensor};
use crate::policy::{HeadConfig, HeadKind, PolicyHeads};
use crate::reward::{ConvNet, Discriminator, QualityScorer};

const MAGIC: &[u8; 4] = b"R3CK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointBundle {
    pub sections: Vec<Section>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

impl CheckpointBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Adds or replaces a section.
    pub fn put(&mut self, name: &str, tensors: Vec<(String, Tensor)>) {
        self.sections.retain(|s| s.name != name);
        self.sections.push(Section { name: name.to_string(), tensors });
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.sections.len() as u32);
        for s in &self.sections {
            put_str(&mut out, &s.name);
            put_u32(&mut out, s.tensors.len() as u32);
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                put_u32(&mut out, t.shape().len() as u32);
                for &d in t.shape() {
                    put_u32(&mut out, d as u32);
                }
                put_u32(&mut out, (t.len() * 4) as u32);
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 16 || &buf[..4] != MAGIC {
            return Err(Error::Format("not an R3CK checkpoint".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("checkpoint CRC mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let n_t = r.u32()?;
            let mut tensors = Vec::new();
            for _ in 0..n_t {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let bytes = r.u32()? as usize;
                let raw = r.take(bytes)?;
                let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
                tensors.push((tname, Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?));
            }
            sections.push(Section { name, tensors });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn require(&self, name: &str) -> Result<&Section> {
        self.section(name).ok_or_else(|| Error::Format(format!("checkpoint has no {name} section")))
    }

    pub fn put_generator(&mut self, gen: &Generator) {
        let c = gen.config();
        let meta = [c.layers, c.heads, c.width, c.tokens, c.vocab, c.t_max].map(|v| v as f32).to_vec();
        let mut ts = vec![("config".to_string(), Tensor::from_vec(meta))];
        ts.extend(gen.params().entries());
        self.put("generator", ts);
    }

    /// The stored generator, frozen.
    pub fn generator(&self) -> Result<Generator> {
        let s = self.require("generator")?;
        let (meta, rest) = s.tensors.split_first().ok_or_else(|| Error::Format("empty generator section".into()))?;
        let m: Vec<usize> = meta.1.data().iter().map(|&v| v as usize).collect();
        if meta.0 != "config" || m.len() != 6 {
            return Err(Error::Format("generator section lacks its config".into()));
        }
        let cfg = GeneratorConfig { layers: m[0], heads: m[1], width: m[2], tokens: m[3], vocab: m[4], t_max: m[5] };
        let mut gen = Generator::new(cfg, 0)?;
        gen.params_mut()?.load(rest)?;
        gen.freeze();
        Ok(gen)
    }

    pub fn put_heads(&mut self, heads: &PolicyHeads) {
        self.put_policy(heads, &HeadKind::ALL.into_iter().collect());
    }

    /// Heads plus which of them were trained; the flag is a sixth config value.
    pub fn put_policy(&mut self, heads: &PolicyHeads, enabled: &BTreeSet<HeadKind>) {
        let c = heads.config();
        for kind in HeadKind::ALL {
            let on = enabled.contains(&kind) as usize;
            let meta = [c.in_dim, c.grid, c.cond_width, c.channels, c.n_sparse, on].map(|v| v as f32).to_vec();
            let own = heads.owner(kind);
            let mut ts = vec![("config".to_string(), Tensor::from_vec(meta))];
            ts.extend(heads.params().entries().into_iter().zip(own).filter(|(_, o)| *o).map(|(e, _)| e));
            self.put(&format!("policy_{}", kind.name()), ts);
        }
    }

    pub fn heads(&self) -> Result<PolicyHeads> {
        let mut entries = Vec::new();
        let mut config = None;
        for kind in HeadKind::ALL {
            let s = self.require(&format!("policy_{}", kind.name()))?;
            let (meta, rest) = s.tensors.split_first().ok_or_else(|| Error::Format("empty policy section".into()))?;
            let m: Vec<usize> = meta.1.data().iter().map(|&v| v as usize).collect();
            if !(5..=6).contains(&m.len()) {
                return Err(Error::Format("policy section lacks its config".into()));
            }
            config = Some(HeadConfig { in_dim: m[0], grid: m[1], cond_width: m[2], channels: m[3], n_sparse: m[4] });
            entries.extend_from_slice(rest);
        }
        let mut heads = PolicyHeads::new(config.unwrap(), 0);
        heads.params_mut().load(&entries)?;
        Ok(heads)
    }

    /// Heads flagged as trained; sections without the flag count as enabled.
    pub fn enabled_heads(&self) -> Result<BTreeSet<HeadKind>> {
        let mut out = BTreeSet::new();
        for kind in HeadKind::ALL {
            let s = self.require(&format!("policy_{}", kind.name()))?;
            let on = s.tensors.first().map(|(_, t)| t.data().get(5).is_none_or(|&v| v != 0.0)).unwrap_or(false);
            if on {
                out.insert(kind);
            }
        }
        Ok(out)
    }

    pub fn put_scorer(&mut self, scorer: &QualityScorer) {
        let mut ts = scorer.net().params().entries();
        ts.extend(scorer.prototypes().iter().enumerate().map(|(k, p)| (format!("prototype{k}"), p.clone())));
        self.put("scorer", ts);
    }

    pub fn scorer(&self) -> Result<QualityScorer> {
        let s = self.require("scorer")?;
        let (protos, params): (Vec<_>, Vec<_>) = s.tensors.iter().cloned().partition(|(n, _)| n.starts_with("prototype"));
        let mut net = ConvNet::new(protos.len(), false, 0);
        net.params_mut().load(&params)?;
        QualityScorer::from_parts(net, protos.into_iter().map(|(_, t)| t).collect())
    }

    pub fn put_discriminator(&mut self, disc: &Discriminator) {
        self.put("discriminator", disc.net().params().entries());
    }

    pub fn discriminator(&self, lr: f64, batch: usize) -> Result<Discriminator> {
        let s = self.require("discriminator")?;
        let mut net = ConvNet::new(1, true, 0);
        net.params_mut().load(&s.tensors)?;
        Ok(Discriminator::from_net(net, lr, batch))
    }
}

/// Parameter tensors equal bit for bit.
pub fn params_identical(a: &ParamStore, b: &ParamStore) -> bool {
    a.bitwise_eq(b)
}

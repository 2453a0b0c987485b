use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DccrnConfig, Model};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Float, Tensor};

const MAGIC: &[u8; 6] = b"MCTSE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    stage: u8,
    config: DccrnConfig,
}

/// Trained parameters with the architecture that interprets them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DccrnConfig,
    /// 1 for the tag-only backbone, 2 once the clue network is trained.
    pub stage: u8,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new<S: Float>(config: &DccrnConfig, stage: u8, store: &ParamStore<S>) -> Result<Self> {
        let ckpt = Self {
            config: config.clone(),
            stage,
            store: store.cast(),
        };
        ckpt.layout()?;
        Ok(ckpt)
    }

    /// Rebuilds the model layout and checks that every stored tensor has
    /// the name and shape the configuration implies.
    fn layout(&self) -> Result<Model> {
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Validation(format!(
                "unknown training stage {}",
                self.stage
            )));
        }
        let mut reference = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&self.config, &mut reference, &mut rng)?;
        if self.stage == 2 {
            model.add_clue_net(&mut reference, &mut rng)?;
        }
        if reference.len() != self.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, configuration implies {}",
                self.store.len(),
                reference.len()
            )));
        }
        for ((_, want, wt), (_, got, gt)) in reference.iter().zip(self.store.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {got} {:?} does not match expected {want} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(model)
    }

    /// The model layout and a copy of the parameters in precision `S`.
    pub fn instantiate<S: Float>(&self) -> Result<(Model, ParamStore<S>)> {
        Ok((self.layout()?, self.store.cast()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            stage: self.stage,
            config: self.config.clone(),
        })?;
        let mut buf = Vec::with_capacity(16 + header.len() + 4 * self.store.num_values());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for (_, name, t) in self.store.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(6)? != MAGIC {
            return Err(Error::Input("not an MCTSE1 checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Input(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)?;
        let mut store = ParamStore::new();
        while r.at < bytes.len() {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Input("checkpoint tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = r
                .take(4 * count)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.add(name, Tensor::new(shape, data)?)?;
        }
        let ckpt = Self {
            config: header.config,
            stage: header.stage,
            store,
        };
        ckpt.layout()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Input("checkpoint is truncated".into()))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

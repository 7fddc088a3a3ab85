use std::io::Read;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::{DiffusionModel, NoiseSchedule, NormStats, ScheduleKind};
use crate::error::{Error, Result};
use crate::likelihood::{Calibration, ProbeConfig};
use crate::numkit::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"RDMCKPT1";
pub const CKPT_VERSION: u32 = 1;

/// Config echo embedded in the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelMeta {
    pub horizon: usize,
    pub state_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub n_diffusion: usize,
    pub schedule: ScheduleKind,
    pub train_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub train_seed: u64,
    pub final_loss: f32,
}

impl ModelMeta {
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            horizon: self.horizon,
            state_dim: self.state_dim,
            width: self.width,
            depth: self.depth,
            embed_dim: self.embed_dim,
        }
    }
}

/// A trained model plus its provenance and optional calibration footer.
pub struct Checkpoint {
    pub meta: ModelMeta,
    pub model: DiffusionModel,
    pub calibration: Option<(Calibration, ProbeConfig)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.write_u32::<LittleEndian>(CKPT_VERSION)?;

        let meta = serde_json::to_vec(&self.meta)?;
        buf.write_u32::<LittleEndian>(meta.len() as u32)?;
        buf.extend_from_slice(&meta);

        let betas = self.model.schedule.betas();
        buf.write_u32::<LittleEndian>(betas.len() as u32)?;
        for b in betas {
            buf.write_f64::<LittleEndian>(*b)?;
        }

        buf.write_u32::<LittleEndian>(self.model.norm.dim() as u32)?;
        for d in 0..self.model.norm.dim() {
            buf.write_f32::<LittleEndian>(self.model.norm.min[d])?;
            buf.write_f32::<LittleEndian>(self.model.norm.max[d])?;
        }

        let named = self.model.params.named();
        buf.write_u32::<LittleEndian>(named.len() as u32)?;
        for (name, tensor) in named {
            let nb = name.as_bytes();
            buf.write_u32::<LittleEndian>(nb.len() as u32)?;
            buf.extend_from_slice(nb);
            buf.write_u32::<LittleEndian>(tensor.shape().len() as u32)?;
            for &d in tensor.shape() {
                buf.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in tensor.as_slice() {
                buf.write_f32::<LittleEndian>(v)?;
            }
        }

        match &self.calibration {
            Some((cal, probe)) => {
                buf.write_u8(1)?;
                buf.write_f64::<LittleEndian>(cal.mu)?;
                buf.write_f64::<LittleEndian>(cal.sigma)?;
                buf.write_u32::<LittleEndian>(cal.samples)?;
                buf.write_u32::<LittleEndian>(probe.steps.len() as u32)?;
                for &s in &probe.steps {
                    buf.write_u32::<LittleEndian>(s as u32)?;
                }
                buf.write_u32::<LittleEndian>(probe.draws as u32)?;
            }
            None => buf.write_u8(0)?,
        }

        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(CKPT_MAGIC)
            )));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }

        let meta_len = f.read_u32::<LittleEndian>()? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        f.read_exact(&mut meta_buf)?;
        let meta: ModelMeta = serde_json::from_slice(&meta_buf)
            .map_err(|e| Error::Checkpoint(format!("bad meta: {e}")))?;

        let n = f.read_u32::<LittleEndian>()? as usize;
        if n != meta.n_diffusion {
            return Err(Error::Checkpoint(format!(
                "schedule length {n} does not match meta n_diffusion {}",
                meta.n_diffusion
            )));
        }
        let mut betas = Vec::with_capacity(n);
        for _ in 0..n {
            betas.push(f.read_f64::<LittleEndian>()?);
        }
        let schedule = NoiseSchedule::from_betas(meta.schedule, betas)?;

        let dim = f.read_u32::<LittleEndian>()? as usize;
        if dim != meta.state_dim {
            return Err(Error::Checkpoint(format!(
                "norm stats dim {dim} does not match state_dim {}",
                meta.state_dim
            )));
        }
        let mut norm = NormStats {
            min: vec![0.0; dim],
            max: vec![0.0; dim],
        };
        for d in 0..dim {
            norm.min[d] = f.read_f32::<LittleEndian>()?;
            norm.max[d] = f.read_f32::<LittleEndian>()?;
        }

        let count = f.read_u32::<LittleEndian>()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = f.read_u32::<LittleEndian>()? as usize;
            let mut name_buf = vec![0u8; name_len];
            f.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Checkpoint("tensor name not utf-8".into()))?;
            let ndim = f.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(f.read_u32::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f32; numel];
            for v in data.iter_mut() {
                *v = f.read_f32::<LittleEndian>()?;
            }
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        let params = DenoiserParams::from_named(meta.denoiser_config(), tensors)?;

        let has_cal = f.read_u8()? != 0;
        let calibration = if has_cal {
            let mu = f.read_f64::<LittleEndian>()?;
            let sigma = f.read_f64::<LittleEndian>()?;
            let samples = f.read_u32::<LittleEndian>()?;
            let steps_len = f.read_u32::<LittleEndian>()? as usize;
            let mut steps = Vec::with_capacity(steps_len);
            for _ in 0..steps_len {
                steps.push(f.read_u32::<LittleEndian>()? as usize);
            }
            let draws = f.read_u32::<LittleEndian>()? as usize;
            Some((
                Calibration { mu, sigma, samples },
                ProbeConfig { steps, draws },
            ))
        } else {
            None
        };

        Ok(Checkpoint {
            meta,
            model: DiffusionModel {
                schedule,
                params,
                norm,
            },
            calibration,
        })
    }
}

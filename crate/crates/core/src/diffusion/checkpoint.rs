//! Checkpoint container.
//!
//! ```text
//! b"PSEDCKPT" | u32 version | u64 header length | JSON header | f64 LE data
//! ```
//!
//! The header lists every tensor by name and shape in data order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserConfig;
use super::schedule::DiffusionSchedule;
use super::DiffusionError;
use crate::autograd::Tensor;
use crate::conditioning::{PoseTokenMode, ProjectionLayer, Variant};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"PSEDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const IMAGE_W: &str = "projection.image.weight";
const IMAGE_B: &str = "projection.image.bias";
const POSE_W: &str = "projection.pose.weight";
const POSE_B: &str = "projection.pose.bias";
const BETAS: &str = "schedule.betas";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub variant: Variant,
    pub pose_mode: PoseTokenMode,
    pub denoiser: DenoiserConfig,
    pub schedule: DiffusionSchedule,
    /// Free-form copy of the run configuration.
    pub run_config: serde_json::Value,
    pub params: ParamStore,
    pub image_projection: ProjectionLayer,
    pub pose_projection: ProjectionLayer,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    variant: Variant,
    pose_mode: PoseTokenMode,
    denoiser: DenoiserConfig,
    run_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> DiffusionError {
    DiffusionError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let betas = Tensor::new(vec![ckpt.schedule.timesteps()], ckpt.schedule.betas().to_vec());
    let extra = [
        (IMAGE_W, &ckpt.image_projection.weights),
        (IMAGE_B, &ckpt.image_projection.bias),
        (POSE_W, &ckpt.pose_projection.weights),
        (POSE_B, &ckpt.pose_projection.bias),
        (BETAS, &betas),
    ];
    let all: Vec<(&str, &Tensor)> = ckpt.params.iter().chain(extra).collect();
    let header = Header {
        epoch: ckpt.epoch,
        variant: ckpt.variant,
        pose_mode: ckpt.pose_mode,
        denoiser: ckpt.denoiser.clone(),
        run_config: ckpt.run_config.clone(),
        tensors: all.iter().map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * all.iter().map(|(_, t)| t.numel()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in all {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DiffusionError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let mut data = &bytes[20 + header_len..];

    let mut params = ParamStore::new();
    let mut named = std::collections::HashMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(format!("truncated data for {}", entry.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        let t = Tensor::new(entry.shape, values);
        if [IMAGE_W, IMAGE_B, POSE_W, POSE_B, BETAS].contains(&entry.name.as_str()) {
            named.insert(entry.name, t);
        } else {
            params.add(entry.name, t);
        }
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut take = |n: &str| named.remove(n).ok_or_else(|| bad(format!("missing tensor {n}")));
    let image_projection = ProjectionLayer { weights: take(IMAGE_W)?, bias: take(IMAGE_B)? };
    let pose_projection = ProjectionLayer { weights: take(POSE_W)?, bias: take(POSE_B)? };
    let schedule = DiffusionSchedule::from_betas(take(BETAS)?.into_data())?;
    Ok(Checkpoint {
        epoch: header.epoch,
        variant: header.variant,
        pose_mode: header.pose_mode,
        denoiser: header.denoiser,
        schedule,
        run_config: header.run_config,
        params,
        image_projection,
        pose_projection,
    })
}

/// Writes to a sibling temporary file first so an interrupted save never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), DiffusionError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode_checkpoint(ckpt))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, DiffusionError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{make_schedule, UNetDenoiser};
    use crate::nn::ParamStore;

    #[test]
    fn round_trip_is_bit_exact() {
        let schedule = make_schedule(7, 1e-4, 0.02).unwrap();
        let cfg = DenoiserConfig { resolution: 8, base_width: 4, attention_dim: 4, context_width: 4, ..Default::default() };
        let model = UNetDenoiser::new(cfg.clone(), &schedule, 3);
        let mut params: ParamStore = crate::diffusion::NoiseModel::params(&model).clone();
        params.tensors_mut().next().unwrap().data_mut()[0] = 0.1 + 0.2;
        let ckpt = Checkpoint {
            epoch: 4,
            variant: Variant::ImgPoseText,
            pose_mode: PoseTokenMode::Target,
            denoiser: cfg,
            schedule,
            run_config: serde_json::json!({"lr": 0.002, "seed": 7}),
            params,
            image_projection: ProjectionLayer { weights: Tensor::new(vec![2, 3], vec![1.0 / 3.0; 6]), bias: Tensor::zeros(&[3]) },
            pose_projection: ProjectionLayer { weights: Tensor::new(vec![1, 2], vec![f64::MIN_POSITIVE, -0.0]), bias: Tensor::full(&[2], 1e300) },
        };
        let bytes = encode_checkpoint(&ckpt);
        assert_eq!(&bytes[..8], b"PSEDCKPT");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back), bytes);

        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"garbage").is_err());
    }
}

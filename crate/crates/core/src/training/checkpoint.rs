//! Checkpoint container: 8-byte magic `PDDN0001`, a little-endian u64 length,
//! a JSON metadata document of that length, then the declared arrays as raw
//! little-endian f64 in order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, IntensityNorm, ModelParams};
use super::optim::OptimState;
use super::TrainError;
use crate::nn::Parameters;

pub const MAGIC: &[u8; 8] = b"PDDN0001";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optim: Option<OptimState>,
    /// Training stage that produced the parameters (0 for untrained).
    pub stage: u8,
    /// Digest of the effective run configuration.
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimMeta {
    step: u64,
    total_steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    stage: u8,
    config_hash: String,
    channels: usize,
    fusion: bool,
    aging: bool,
    optim: Option<OptimMeta>,
    arrays: Vec<ArrayMeta>,
}

fn named_arrays(ckpt: &Checkpoint) -> Vec<(String, Vec<f64>)> {
    let mut arrays = Vec::new();
    ckpt.params.visit("", &mut |name, s| {
        arrays.push((name.to_string(), s.to_vec()))
    });
    for (name, b) in [
        ("branch1", &ckpt.params.branch1),
        ("branch2", &ckpt.params.branch2),
    ] {
        arrays.push((
            format!("{name}.norm"),
            vec![b.output_center, b.output_scale],
        ));
    }
    let n = ckpt.params.input_norm;
    arrays.push(("input.norm".into(), vec![n.center, n.scale]));
    if let Some(o) = &ckpt.optim {
        arrays.push(("optim.m".into(), o.m.clone()));
        arrays.push(("optim.v".into(), o.v.clone()));
        arrays.push((
            "optim.hyper".into(),
            vec![o.base_lr, o.weight_decay, o.beta1, o.beta2, o.eps],
        ));
    }
    arrays
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let arrays = named_arrays(ckpt);
    let meta = Metadata {
        stage: ckpt.stage,
        config_hash: ckpt.config_hash.clone(),
        channels: ckpt.params.channels(),
        fusion: ckpt.params.arch.fusion,
        aging: ckpt.params.arch.aging,
        optim: ckpt.optim.as_ref().map(|o| OptimMeta {
            step: o.step,
            total_steps: o.total_steps,
        }),
        arrays: arrays
            .iter()
            .map(|(name, v)| ArrayMeta {
                name: name.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out =
        Vec::with_capacity(16 + meta.len() + arrays.iter().map(|a| a.1.len() * 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for (_, v) in &arrays {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn shape_err(msg: String) -> TrainError {
    TrainError::ShapeMismatch(msg)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, TrainError> {
    if bytes.len() < 8 {
        return Err(if MAGIC.starts_with(bytes) {
            TrainError::Truncated
        } else {
            TrainError::BadMagic
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(TrainError::BadMagic);
    }
    let len_bytes: [u8; 8] = bytes
        .get(8..16)
        .ok_or(TrainError::Truncated)?
        .try_into()
        .unwrap();
    let meta_len =
        usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| TrainError::Truncated)?;
    let meta_end = 16usize.checked_add(meta_len).ok_or(TrainError::Truncated)?;
    let meta_bytes = bytes.get(16..meta_end).ok_or(TrainError::Truncated)?;
    let meta: Metadata = serde_json::from_slice(meta_bytes)
        .map_err(|e| TrainError::InvalidInput(format!("checkpoint metadata: {e}")))?;

    let mut params = ModelParams::zeros(meta.channels);
    params.arch = Architecture {
        fusion: meta.fusion,
        aging: meta.aging,
    };
    let mut expected: Vec<(String, usize)> = Vec::new();
    params.visit("", &mut |name, s| {
        expected.push((name.to_string(), s.len()))
    });
    expected.push(("branch1.norm".into(), 2));
    expected.push(("branch2.norm".into(), 2));
    expected.push(("input.norm".into(), 2));
    let n_params = params.num_params();
    if meta.optim.is_some() {
        expected.push(("optim.m".into(), n_params));
        expected.push(("optim.v".into(), n_params));
        expected.push(("optim.hyper".into(), 5));
    }
    if meta.arrays.len() != expected.len() {
        return Err(shape_err(format!(
            "{} arrays declared, {} expected",
            meta.arrays.len(),
            expected.len()
        )));
    }
    for (a, (name, len)) in meta.arrays.iter().zip(&expected) {
        if &a.name != name || a.len != *len {
            return Err(shape_err(format!(
                "array {} of length {} where {name} of length {len} was expected",
                a.name, a.len
            )));
        }
    }
    let total: usize = expected.iter().map(|e| e.1).sum();
    let payload = &bytes[meta_end..];
    if payload.len() < total * 8 {
        return Err(TrainError::Truncated);
    }
    if payload.len() > total * 8 {
        return Err(shape_err(format!(
            "{} trailing bytes after declared arrays",
            payload.len() - total * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    params.load_flat(&values[..n_params]);
    let mut off = n_params;
    let mut take = |n: usize| {
        let s = values[off..off + n].to_vec();
        off += n;
        s
    };
    let n1 = take(2);
    let n2 = take(2);
    let ni = take(2);
    params.branch1.output_center = n1[0];
    params.branch1.output_scale = n1[1];
    params.branch2.output_center = n2[0];
    params.branch2.output_scale = n2[1];
    params.input_norm = IntensityNorm {
        center: ni[0],
        scale: ni[1],
    };
    let optim = meta.optim.map(|o| {
        let m = take(n_params);
        let v = take(n_params);
        let h = take(5);
        OptimState {
            m,
            v,
            step: o.step,
            base_lr: h[0],
            weight_decay: h[1],
            total_steps: o.total_steps,
            beta1: h[2],
            beta2: h[3],
            eps: h[4],
        }
    });
    Ok(Checkpoint {
        params,
        optim,
        stage: meta.stage,
        config_hash: meta.config_hash,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let path = path.as_ref();
    let file_name = path.file_name().ok_or_else(|| {
        TrainError::InvalidInput(format!("{} is not a file path", path.display()))
    })?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(ckpt))?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(with_optim: bool) -> Checkpoint {
        let mut params = ModelParams::init(4, 65.0, 10.0, Architecture::default(), 3);
        params.input_norm = IntensityNorm {
            center: 2.25,
            scale: 0.3,
        };
        let n = params.num_params();
        Checkpoint {
            optim: with_optim.then(|| {
                let mut o = OptimState::new(n, 1e-3, 1e-3, 40);
                o.m.iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = i as f64 * 1e-3);
                o.step = 7;
                o
            }),
            params,
            stage: 3,
            config_hash: "abc".into(),
        }
    }

    #[test]
    fn round_trip() {
        for with_optim in [false, true] {
            let c = fixture(with_optim);
            let bytes = encode_checkpoint(&c);
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode_checkpoint(&back), bytes);
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_checkpoint(&fixture(false));
        let short = bytes[..bytes.len() - 3].to_vec();
        assert!(matches!(
            decode_checkpoint(&short),
            Err(TrainError::Truncated)
        ));
        bytes[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(TrainError::BadMagic)
        ));
    }

    #[test]
    fn wrong_declared_length() {
        let bytes = encode_checkpoint(&fixture(false));
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut meta: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        let len = meta["arrays"][0]["len"].as_u64().unwrap();
        meta["arrays"][0]["len"] = (len - 1).into();
        let tampered = serde_json::to_string(&meta).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(tampered.len() as u64).to_le_bytes());
        out.extend_from_slice(tampered.as_bytes());
        out.extend_from_slice(&bytes[16 + meta_len..]);
        assert!(matches!(
            decode_checkpoint(&out),
            Err(TrainError::ShapeMismatch(_))
        ));
    }
}

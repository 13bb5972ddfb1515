//! Binary checkpoint format: magic `MOBL`, a format version, the config as a
//! length-prefixed UTF-8 metadata block, then named arrays with shapes and
//! little-endian f32 payloads.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{zero_params, ModelConfig, ModelError, ModelParameters};
use crate::tensor::Real;

const MAGIC: [u8; 4] = *b"MOBL";
const VERSION: u32 = 1;

pub fn save_checkpoint<T: Real>(
    params: &ModelParameters<T>,
    config: &ModelConfig,
    path: &Path,
) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let config_json = serde_json::to_vec(config).expect("config serializes");
    w.write_all(&(config_json.len() as u32).to_le_bytes())?;
    w.write_all(&config_json)?;

    let mut count = 0u32;
    params.for_each(&mut |_, _| count += 1);
    w.write_all(&count.to_le_bytes())?;

    let mut io_err: Option<std::io::Error> = None;
    params.for_each(&mut |name, array| {
        if io_err.is_some() {
            return;
        }
        let mut write_array = || -> std::io::Result<()> {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&2u32.to_le_bytes())?; // rank
            w.write_all(&(array.nrows() as u64).to_le_bytes())?;
            w.write_all(&(array.ncols() as u64).to_le_bytes())?;
            for v in array.iter() {
                w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
            Ok(())
        };
        io_err = write_array().err();
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(ModelError::from)
}

fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Load a checkpoint; either a complete `(parameters, config)` pair comes
/// back or an error does — never a partially filled model.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ModelParameters<T>, ModelConfig), ModelError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != MAGIC {
        return Err(ModelError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ModelError::VersionMismatch(version));
    }

    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    read_exact(&mut r, &mut config_bytes)?;
    let config: ModelConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| ModelError::ShapeMismatch(format!("bad config block: {e}")))?;
    config.validate()?;

    let count = read_u32(&mut r)? as usize;
    let mut arrays: HashMap<String, Array2<T>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| ModelError::ShapeMismatch(format!("bad array name: {e}")))?;
        let rank = read_u32(&mut r)?;
        if rank != 2 {
            return Err(ModelError::ShapeMismatch(format!("array {name}: rank {rank}, expected 2")));
        }
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            read_exact(&mut r, &mut buf)?;
            data.push(T::from_f64(f64::from(f32::from_le_bytes(buf))));
        }
        let array = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| ModelError::ShapeMismatch(format!("array {name}: {e}")))?;
        arrays.insert(name, array);
    }

    let mut params = zero_params::<T>(&config);
    let mut missing = Vec::new();
    let mut shape_err: Option<String> = None;
    params.for_each_mut(&mut |name, slot| {
        match arrays.remove(name) {
            Some(array) => {
                if array.dim() != slot.dim() {
                    shape_err.get_or_insert_with(|| {
                        format!("array {name}: file {:?} vs config {:?}", array.dim(), slot.dim())
                    });
                } else {
                    *slot = array;
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(ModelError::ShapeMismatch(msg));
    }
    if !missing.is_empty() {
        return Err(ModelError::ShapeMismatch(format!("missing arrays: {}", missing.join(", "))));
    }
    if !arrays.is_empty() {
        let extra: Vec<String> = arrays.into_keys().collect();
        return Err(ModelError::ShapeMismatch(format!("unexpected arrays: {}", extra.join(", "))));
    }
    Ok((params, config))
}

/// Guard for loading into a pipeline that expects particular dimensions.
pub fn check_compatible(loaded: &ModelConfig, vocab_size: usize, num_categories: usize) -> Result<(), ModelError> {
    if loaded.vocab_size != vocab_size {
        return Err(ModelError::ShapeMismatch(format!(
            "checkpoint vocab {} vs expected {vocab_size}",
            loaded.vocab_size
        )));
    }
    if loaded.num_categories != num_categories {
        return Err(ModelError::ShapeMismatch(format!(
            "checkpoint categories {} vs expected {num_categories}",
            loaded.num_categories
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg(categories: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 37,
            d_model: 16,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 24,
            max_len: 12,
            num_categories: categories,
            dropout: 0.1,
            tie_embeddings: false,
        }
    }

    #[test]
    fn roundtrip_bitwise_f32() {
        let config = cfg(5);
        let params: ModelParameters<f32> = init_params(&config, 11).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&params, &config, f.path()).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint::<f32>(f.path()).unwrap();
        assert_eq!(loaded_cfg, config);
        assert_eq!(loaded, params);
    }

    #[test]
    fn roundtrip_bitwise_f64_fresh_init() {
        // Fresh weights are drawn in f32 precision, so the f32 payload loses
        // nothing even at f64.
        let config = cfg(5);
        let params: ModelParameters<f64> = init_params(&config, 12).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&params, &config, f.path()).unwrap();
        let (loaded, _) = load_checkpoint::<f64>(f.path()).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn default_config_roundtrip() {
        let config = ModelConfig::with_defaults(500, 5);
        let params: ModelParameters<f32> = init_params(&config, 13).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&params, &config, f.path()).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(f.path()).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn truncated_file_is_io_error_not_partial_model() {
        let config = cfg(4);
        let params: ModelParameters<f32> = init_params(&config, 14).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&params, &config, f.path()).unwrap();
        let bytes = std::fs::read(f.path()).unwrap();
        let cut = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(cut.path(), &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint::<f32>(cut.path()) {
            Err(ModelError::Io(_)) | Err(ModelError::VersionMismatch(_)) => {}
            other => panic!("expected IoError/VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn garbage_magic_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), b"NOPEnope").unwrap();
        assert!(matches!(load_checkpoint::<f32>(f.path()), Err(ModelError::BadMagic)));
    }

    #[test]
    fn category_count_mismatch_detected() {
        let config = cfg(5);
        let params: ModelParameters<f32> = init_params(&config, 15).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(&params, &config, f.path()).unwrap();
        let (_, loaded_cfg) = load_checkpoint::<f32>(f.path()).unwrap();
        assert!(matches!(
            check_compatible(&loaded_cfg, 37, 7),
            Err(ModelError::ShapeMismatch(_))
        ));
        assert!(check_compatible(&loaded_cfg, 37, 5).is_ok());
    }
}

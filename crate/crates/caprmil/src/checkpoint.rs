//! Model checkpoint serialization.
//!
//! Binary layout (all integers little-endian):
//!
//! ```text
//! magic   "CPRM" (4 bytes)
//! version u32 = 1
//! config  d_in, d_model, n_blocks, n_heads, n_clusters, mlp_ratio  (u32 each)
//!         dropout_p f64
//!         aggregator u32 (0 = mean, 1 = attn, 2 = gattn)
//!         n_classes, attn_hidden                                   (u32 each)
//! then, until end of file, one record per parameter in canonical order:
//!         name_len u32, name bytes (UTF-8),
//!         rank u32, dims (u32 each),
//!         data (f32 bits, row-major)
//! ```
//!
//! Parameters are stored as 32-bit floats; round-tripping an f32 model is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{init_model, param_shapes, Aggregator, CaprmilConfig, ModelState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CPRM";
const VERSION: u32 = 1;

/// Upper bound on any structural config field read from disk. Far beyond any
/// plausible model; rejects corrupt headers before they can demand absurd
/// allocations.
const MAX_FIELD: usize = 1 << 20;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(path: &Path, state: &ModelState<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, state).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    read_checkpoint(&bytes)
}

pub fn write_checkpoint<W: Write>(w: &mut W, state: &ModelState<f32>) -> std::io::Result<()> {
    let cfg = &state.config;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for field in [
        cfg.d_in,
        cfg.d_model,
        cfg.n_blocks,
        cfg.n_heads,
        cfg.n_clusters,
        cfg.mlp_ratio,
    ] {
        w.write_all(&(field as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.dropout_p.to_le_bytes())?;
    w.write_all(&cfg.aggregator.code().to_le_bytes())?;
    w.write_all(&(cfg.n_classes as u32).to_le_bytes())?;
    w.write_all(&(cfg.attn_hidden as u32).to_le_bytes())?;

    let mut result = Ok(());
    state.for_each_param(|name, t| {
        if result.is_err() {
            return;
        }
        result = (|| {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &dim in t.shape() {
                w.write_all(&(dim as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        })();
    });
    result
}

/// Cursor over the checkpoint bytes that reports the offset of any
/// truncation, so corrupt files fail with a useful position.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "checkpoint truncated at byte {} reading {what} ({} of {} bytes needed)",
                self.pos,
                self.bytes.len() - self.pos,
                n
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(b);
        Ok(f64::from_le_bytes(buf))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "not a checkpoint file: magic {magic:02x?} != {MAGIC:02x?}"
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config = CaprmilConfig {
        d_in: c.u32("d_in")? as usize,
        d_model: c.u32("d_model")? as usize,
        n_blocks: c.u32("n_blocks")? as usize,
        n_heads: c.u32("n_heads")? as usize,
        n_clusters: c.u32("n_clusters")? as usize,
        mlp_ratio: c.u32("mlp_ratio")? as usize,
        dropout_p: c.f64("dropout_p")?,
        aggregator: Aggregator::from_code(c.u32("aggregator")?)?,
        n_classes: c.u32("n_classes")? as usize,
        attn_hidden: c.u32("attn_hidden")? as usize,
    };
    config.validate()?;
    for (field, value) in [
        ("d_in", config.d_in),
        ("d_model", config.d_model),
        ("n_blocks", config.n_blocks),
        ("n_heads", config.n_heads),
        ("n_clusters", config.n_clusters),
        ("mlp_ratio", config.mlp_ratio),
        ("n_classes", config.n_classes),
        ("attn_hidden", config.attn_hidden),
    ] {
        if value > MAX_FIELD {
            return Err(Error::format(format!(
                "implausible config field {field} = {value} (limit {MAX_FIELD}); \
                 checkpoint is corrupt"
            )));
        }
    }

    // Every record is vetted against the config-implied name and shape
    // before its data is touched, so a corrupt file can never request an
    // allocation larger than the file itself.
    let expected = param_shapes(&config);
    let mut records: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (exp_name, exp_shape) in &expected {
        let name_len = c.u32("name length")? as usize;
        let name_bytes = c.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::format("parameter name is not valid UTF-8"))?;
        if name != exp_name {
            return Err(Error::format(format!(
                "parameter record is '{name}', config implies '{exp_name}'"
            )));
        }
        let rank = c.u32("rank")? as usize;
        if rank != exp_shape.len() {
            return Err(Error::format(format!(
                "'{name}' has rank {rank}, expected {}",
                exp_shape.len()
            )));
        }
        for &exp_dim in exp_shape {
            let dim = c.u32("dimension")? as usize;
            if dim != exp_dim {
                return Err(Error::format(format!(
                    "'{name}' has shape dimension {dim}, expected {exp_dim}"
                )));
            }
        }
        let numel: usize = exp_shape.iter().product();
        let raw = c.take(numel * 4, &format!("data of '{name}'"))?;
        records.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    if !c.done() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last parameter record",
            bytes.len() - c.pos
        )));
    }

    // Rebuild the structural skeleton from the config, then swap every
    // tensor for its stored value.
    let mut state: ModelState<f32> = init_model(&config, 0)?;
    let mut idx = 0;
    let mut swap_err = None;
    state.for_each_param_mut(|_, t| {
        if swap_err.is_some() {
            return;
        }
        let data = std::mem::take(&mut records[idx]);
        match Tensor::leaf(data, &expected[idx].1) {
            Ok(leaf) => *t = leaf,
            Err(e) => swap_err = Some(e),
        }
        idx += 1;
    });
    if let Some(e) = swap_err {
        return Err(e);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Aggregator;

    fn sample_state(aggregator: Aggregator) -> ModelState<f32> {
        let cfg = CaprmilConfig {
            d_in: 10,
            d_model: 8,
            n_blocks: 2,
            n_heads: 2,
            n_clusters: 3,
            mlp_ratio: 2,
            dropout_p: 0.15,
            aggregator,
            n_classes: 3,
            attn_hidden: 6,
        };
        init_model(&cfg, 99).unwrap()
    }

    fn to_bytes(state: &ModelState<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, state).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_aggregator() {
        for agg in [Aggregator::Mean, Aggregator::Attn, Aggregator::GAttn] {
            let state = sample_state(agg);
            let bytes = to_bytes(&state);
            let loaded = read_checkpoint(&bytes).unwrap();
            assert_eq!(loaded.config, state.config);
            let mut orig = Vec::new();
            state.for_each_param(|n, t| orig.push((n.to_string(), t.data().to_vec())));
            let mut idx = 0;
            loaded.for_each_param(|n, t| {
                let (en, ed) = &orig[idx];
                idx += 1;
                assert_eq!(n, en);
                assert!(t
                    .data()
                    .iter()
                    .zip(ed)
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            });
            assert_eq!(idx, orig.len());
            // byte-level determinism too: re-serializing reproduces the file
            assert_eq!(to_bytes(&loaded), bytes);
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let state = sample_state(Aggregator::Mean);
        let mut bytes = to_bytes(&state);
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = to_bytes(&state);
        bytes[4] = 9;
        assert!(read_checkpoint(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let state = sample_state(Aggregator::Mean);
        let bytes = to_bytes(&state);
        let cut = bytes.len() - 7;
        let err = read_checkpoint(&bytes[..cut]).unwrap_err().to_string();
        assert!(err.contains("truncated at byte"), "{err}");
    }

    #[test]
    fn header_mutations_error_cleanly_never_panic() {
        let state = sample_state(Aggregator::Attn);
        let bytes = to_bytes(&state);
        for i in 0..64.min(bytes.len()) {
            let mut corrupt = bytes.clone();
            corrupt[i] ^= 0xFF;
            let _ = read_checkpoint(&corrupt); // must not panic
        }
        for cut in [0, 3, 4, 7, 11, 20, bytes.len() / 2] {
            assert!(read_checkpoint(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cprm");
        let state = sample_state(Aggregator::GAttn);
        save_checkpoint(&path, &state).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, state.config);
        assert_eq!(loaded.n_params(), state.n_params());
    }
}

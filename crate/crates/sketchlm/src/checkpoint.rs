//! Checkpoint binary format: magic "SKLA", u32 version, a length-prefixed
//! config/state text block, then per tensor a length-prefixed name, u32
//! rank, u64 dims, and raw 64-bit little-endian floats. Loading a saved
//! state resumes bitwise-identically.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SKLA";
pub const VERSION: u32 = 1;

fn state_text(state: &TrainState) -> String {
    let mut text = state.config.to_key_values();
    text.push_str(&format!("step={}\n", state.step));
    text.push_str(&format!("rng_word_pos_hi={}\n", (state.rng_word_pos >> 64) as u64));
    text.push_str(&format!("rng_word_pos_lo={}\n", state.rng_word_pos as u64));
    text.push_str(&format!("data_task={}\n", state.data_task));
    text.push_str(&format!("data_seed_start={}\n", state.data_seed_start));
    text.push_str(&format!("data_count={}\n", state.data_count));
    text.push_str(&format!("vocab_words={}\n", state.vocab_words.join(" ")));
    text
}

pub fn save(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let text = state_text(state);
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;

    let named = state.params.named_tensors();
    let moment_names: Vec<(String, &Tensor)> = state
        .adam
        .names
        .iter()
        .enumerate()
        .flat_map(|(i, n)| {
            [
                (format!("adam.m.{n}"), &state.adam.m[i]),
                (format!("adam.v.{n}"), &state.adam.v[i]),
            ]
        })
        .collect();
    let total = named.len() + moment_names.len();
    w.write_all(&(total as u32).to_le_bytes())?;
    for (name, tensor) in named.into_iter().chain(moment_names) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.dims().len() as u32).to_le_bytes())?;
        for &d in tensor.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("checkpoint truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::Format("checkpoint: invalid UTF-8".into()))
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainState> {
    let mut r = Reader { inner: std::io::BufReader::new(std::fs::File::open(path)?) };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected SKLA)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} (supported: {VERSION})"
        )));
    }
    let text_len = r.u64()? as usize;
    let text = r.string(text_len)?;

    // State lines ride along with the config echo; split them out.
    let mut config_lines = String::new();
    let mut step = 0usize;
    let mut pos_hi = 0u64;
    let mut pos_lo = 0u64;
    let mut data_task = String::new();
    let mut data_seed_start = 0u64;
    let mut data_count = 0usize;
    let mut vocab_words: Vec<String> = Vec::new();
    for line in text.lines() {
        if let Some(v) = line.strip_prefix("step=") {
            step = v.parse().map_err(|_| Error::Format("bad step".into()))?;
        } else if let Some(v) = line.strip_prefix("rng_word_pos_hi=") {
            pos_hi = v.parse().map_err(|_| Error::Format("bad rng pos".into()))?;
        } else if let Some(v) = line.strip_prefix("rng_word_pos_lo=") {
            pos_lo = v.parse().map_err(|_| Error::Format("bad rng pos".into()))?;
        } else if let Some(v) = line.strip_prefix("data_task=") {
            data_task = v.to_string();
        } else if let Some(v) = line.strip_prefix("data_seed_start=") {
            data_seed_start = v.parse().map_err(|_| Error::Format("bad seed".into()))?;
        } else if let Some(v) = line.strip_prefix("data_count=") {
            data_count = v.parse().map_err(|_| Error::Format("bad count".into()))?;
        } else if let Some(v) = line.strip_prefix("vocab_words=") {
            vocab_words = v.split_whitespace().map(str::to_string).collect();
        } else {
            config_lines.push_str(line);
            config_lines.push('\n');
        }
    }
    let config = TrainConfig::from_key_values(&config_lines)?;

    let mut tensors = std::collections::HashMap::new();
    let count = r.u32()?;
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.bytes(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(dims, data)?);
    }

    let vocab_size = vocab_words.len() + crate::vocab::NUM_SPECIALS as usize;
    let mut params = ModelParams::init(
        config.model_config(vocab_size),
        config.freeze_flags(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let names: Vec<String> = params.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    for name in &names {
        let tensor = tensors.remove(name).ok_or_else(|| {
            Error::Format(format!("checkpoint missing tensor {name} required by config"))
        })?;
        let slot = params.tensor_mut(name).expect("named tensor");
        if slot.dims() != tensor.dims() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} has dims {:?}, config expects {:?}",
                tensor.dims(),
                slot.dims()
            )));
        }
        *slot = tensor;
    }

    let mut adam = AdamState::new(&params);
    for (i, name) in adam.names.clone().iter().enumerate() {
        let m = tensors
            .remove(&format!("adam.m.{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing adam.m.{name}")))?;
        let v = tensors
            .remove(&format!("adam.v.{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint missing adam.v.{name}")))?;
        adam.m[i] = m;
        adam.v[i] = v;
    }
    if !tensors.is_empty() {
        let mut extra: Vec<&String> = tensors.keys().collect();
        extra.sort();
        return Err(Error::Format(format!(
            "checkpoint carries tensors unknown to the config: {extra:?}"
        )));
    }

    Ok(TrainState {
        config,
        params,
        adam,
        step,
        rng_word_pos: ((pos_hi as u128) << 64) | pos_lo as u128,
        vocab_words,
        data_task,
        data_seed_start,
        data_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, TaskKind};
    use crate::taskgen::MazeSpec;
    use crate::train::{init_state, train_run};

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("sketchlm-ckpt-{}-{name}", std::process::id()));
        p
    }

    fn small_state() -> TrainState {
        let spec = MazeSpec { width: 4, height: 4, wall_density: 0.1, ..Default::default() };
        let ds = generate_dataset(TaskKind::Maze, 4, 0, 3, &spec).unwrap();
        let cfg = TrainConfig {
            total_steps: 2,
            batch_size: 2,
            k: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 160,
            d_enc: 8,
            ..Default::default()
        };
        train_run(&cfg, &ds, None, None).unwrap().state
    }

    #[test]
    fn save_load_save_is_bytewise_idempotent() {
        let state = small_state();
        let p1 = tmpfile("idem1.bin");
        let p2 = tmpfile("idem2.bin");
        save(&state, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        assert_eq!(loaded, state);
        save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).ok();
        std::fs::remove_file(&p2).ok();
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let state = small_state();
        let p = tmpfile("trunc.bin");
        save(&state, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        let err = load(&p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let state = small_state();
        let p = tmpfile("magic.bin");
        save(&state, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(load(&p).unwrap_err().to_string().contains("magic"));

        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'S';
        bytes[4] = 99;
        std::fs::write(&p, &bytes).unwrap();
        assert!(load(&p).unwrap_err().to_string().contains("version"));
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn resume_through_checkpoint_file_matches_uninterrupted() {
        let spec = MazeSpec { width: 4, height: 4, wall_density: 0.1, ..Default::default() };
        let ds = generate_dataset(TaskKind::Maze, 4, 0, 3, &spec).unwrap();
        let cfg = TrainConfig {
            total_steps: 4,
            batch_size: 2,
            k: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 160,
            d_enc: 8,
            ..Default::default()
        };
        let full = train_run(&cfg, &ds, None, None).unwrap();

        let mid = train_run(&cfg, &ds, None, Some(2)).unwrap();
        let p = tmpfile("resume.bin");
        save(&mid.state, &p).unwrap();
        let restored = load(&p).unwrap();
        let resumed = train_run(&cfg, &ds, Some(restored), None).unwrap();
        assert_eq!(resumed.state, full.state);
        std::fs::remove_file(&p).ok();

        // Also bitwise at the file level.
        let pa = tmpfile("full.bin");
        let pb = tmpfile("resumed.bin");
        save(&full.state, &pa).unwrap();
        save(&resumed.state, &pb).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        std::fs::remove_file(&pa).ok();
        std::fs::remove_file(&pb).ok();
    }

    #[test]
    fn init_state_checkpoint_round_trip() {
        let spec = MazeSpec { width: 4, height: 4, wall_density: 0.1, ..Default::default() };
        let ds = generate_dataset(TaskKind::Maze, 4, 0, 3, &spec).unwrap();
        let cfg = TrainConfig {
            k: 3,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 160,
            d_enc: 8,
            ..Default::default()
        };
        let state = init_state(&cfg, &ds).unwrap();
        let p = tmpfile("init.bin");
        save(&state, &p).unwrap();
        assert_eq!(load(&p).unwrap(), state);
        std::fs::remove_file(&p).ok();
    }
}

//! Checkpoint directories: a text manifest plus raw little-endian arrays.
//!
//! ```text
//! <dir>/manifest.txt   key = value header, then one `param` line per tensor
//! <dir>/config.txt     the training config
//! <dir>/vocab.txt      one character per line
//! <dir>/params.bin     every parameter, f64 little-endian, manifest order
//! <dir>/optimizer.bin  Adam first then second moments, same order (optional)
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::autograd::Tensor;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::network::{Denoiser, ParamStore};
use crate::training::{Adam, TrainConfig};

const FORMAT: &str = "strokediff-checkpoint-1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub adam: Option<Adam>,
    /// Updates applied so far.
    pub step: u64,
    /// Factor that maps normalized offsets back to data units.
    pub corpus_scale: f64,
    /// Mean points per character in the training data, for choosing the
    /// output length.
    pub points_per_char: f64,
}

fn write_f64s(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    for t in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!("{}: truncated array file", path.display())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = String::new();
        m.push_str(&format!("format = {FORMAT}\n"));
        m.push_str("dtype = f64-le\n");
        m.push_str(&format!("step = {}\n", self.step));
        m.push_str(&format!("vocab_size = {}\n", self.vocab.size()));
        m.push_str(&format!("vocab_fingerprint = {}\n", self.vocab.fingerprint()));
        m.push_str(&format!("corpus_scale = {:?}\n", self.corpus_scale));
        m.push_str(&format!("points_per_char = {:?}\n", self.points_per_char));
        let s = &self.config.schedule;
        m.push_str(&format!(
            "schedule = steps {} base {:?} lo {:?} hi {:?}\n",
            s.steps, s.base, s.lo, s.hi
        ));
        if let Some(a) = &self.adam {
            m.push_str(&format!("optimizer_step = {}\n", a.step));
        }
        let mut offset = 0;
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            m.push_str(&format!("param {name} {} {} {offset}\n", t.rows(), t.cols()));
            offset += t.len();
        }
        let write = |file: &str, text: &str| {
            let p = dir.join(file);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("manifest.txt", &m)?;
        write("config.txt", &self.config.to_config_string())?;
        write("vocab.txt", &self.vocab.to_file_string())?;
        write_f64s(&dir.join("params.bin"), &self.params.tensors().iter().collect::<Vec<_>>())?;
        let opt = dir.join("optimizer.bin");
        match &self.adam {
            Some(a) => write_f64s(&opt, &a.m.iter().chain(&a.v).collect::<Vec<_>>())?,
            None if opt.exists() => std::fs::remove_file(&opt).map_err(|e| Error::io(&opt, e))?,
            None => {}
        }
        Ok(())
    }

    /// Loads a checkpoint and rebuilds the model it belongs to.
    pub fn load(dir: &Path) -> Result<(Denoiser, Self)> {
        let manifest = read_text(&dir.join("manifest.txt"))?;
        let mut header = HashMap::new();
        let mut entries = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("param ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 4 {
                    return Err(Error::Data(format!("bad manifest line {line:?}")));
                }
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Data(format!("bad manifest line {line:?}")))
                };
                entries.push((f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?));
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| Error::Data(format!("manifest is missing {k}")))
        };
        if get("format")? != FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format {}", get("format")?)));
        }
        let parse_f = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("manifest {k} is not a number")))
        };
        let parse_u = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Data(format!("manifest {k} is not an integer")))
        };

        let config = TrainConfig::parse_str(&read_text(&dir.join("config.txt"))?)?;
        let vocab = Vocab::from_file_string(&read_text(&dir.join("vocab.txt"))?)?;
        if &vocab.fingerprint() != get("vocab_fingerprint")? {
            return Err(Error::Data("vocabulary does not match the manifest fingerprint".into()));
        }
        let (model, mut params) = Denoiser::new(config.model_config(vocab.size()), 0)?;
        if entries.len() != params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                params.len()
            )));
        }
        let flat = read_f64s(&dir.join("params.bin"))?;
        for (name, rows, cols, offset) in &entries {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
            if params.get(id).shape() != (*rows, *cols) || offset + rows * cols > flat.len() {
                return Err(Error::Data(format!("parameter {name} has the wrong shape or extent")));
            }
            *params.get_mut(id) = Tensor::new(*rows, *cols, flat[*offset..offset + rows * cols].to_vec());
        }

        let opt_path = dir.join("optimizer.bin");
        let adam = if opt_path.exists() {
            let flat = read_f64s(&opt_path)?;
            let total = params.num_scalars();
            if flat.len() != 2 * total {
                return Err(Error::Data("optimizer state size does not match parameters".into()));
            }
            let mut adam = Adam::new(config.adam, params.tensors());
            let mut pos = 0;
            for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[pos..pos + n]);
                pos += n;
            }
            adam.step = parse_u("optimizer_step")?;
            Some(adam)
        } else {
            None
        };
        let ckpt = Self {
            config,
            vocab,
            params,
            adam,
            step: parse_u("step")?,
            corpus_scale: parse_f("corpus_scale")?,
            points_per_char: parse_f("points_per_char")?,
        };
        Ok((model, ckpt))
    }
}

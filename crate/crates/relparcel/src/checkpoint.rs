//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        b"RELPARCEL1"
//! version      u32
//! config_len   u64, then the config TOML bytes
//! epoch        u64
//! param_count  u64
//! per param:   name_len u64, name bytes, rank u64, dims u64...,
//!              f64 payload
//! opt_flag     u8 (1 when optimizer state follows)
//! step         u64
//! per param:   first-moment f64 payload, second-moment f64 payload
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::Nadam;

const MAGIC: &[u8; 10] = b"RELPARCEL1";
const VERSION: u32 = 1;

pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: Nadam,
    pub epoch: u64,
}

pub fn save(
    path: &Path,
    config: &RunConfig,
    model: &Model,
    optimizer: &Nadam,
    epoch: u64,
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = config.to_toml();
    w.write_all(&(cfg.len() as u64).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&epoch.to_le_bytes())?;

    let params = model.param_refs();
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in &params {
        w.write_all(&(p.name.len() as u64).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        w.write_all(&(p.shape.len() as u64).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }

    w.write_all(&[1u8])?;
    let (step, first, second) = optimizer.state();
    w.write_all(&step.to_le_bytes())?;
    for (m, v) in first.iter().zip(second) {
        for x in m {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in v {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let slice = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::checkpoint("truncated checkpoint"))?;
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };

    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::checkpoint("bad magic; not a model checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = r.u64()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::checkpoint("config snapshot is not UTF-8"))?
        .to_string();
    let config = RunConfig::from_toml(&cfg_text)
        .map_err(|e| Error::checkpoint(format!("embedded config: {e}")))?;
    let epoch = r.u64()?;

    // rebuild the shape from the config, then overwrite every parameter
    let mut model = Model::new(
        &config.model.to_model_config(),
        &config.backbone,
        1,
        config.train.seed,
    )?;
    let param_count = r.u64()? as usize;
    {
        let mut refs = model.param_refs_mut();
        if param_count != refs.len() {
            return Err(Error::checkpoint(format!(
                "checkpoint holds {param_count} parameters, model has {}",
                refs.len()
            )));
        }
        for p in refs.iter_mut() {
            let name_len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::checkpoint("parameter name is not UTF-8"))?
                .to_string();
            if name != p.name {
                return Err(Error::checkpoint(format!(
                    "parameter order mismatch: expected {}, found {name}",
                    p.name
                )));
            }
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            if shape != p.shape {
                return Err(Error::checkpoint(format!(
                    "{name}: shape {shape:?} does not match {:?}",
                    p.shape
                )));
            }
            p.data = r.f64_vec(p.numel())?;
        }
    }

    let has_opt = r.take(1)?[0];
    if has_opt != 1 {
        return Err(Error::checkpoint("missing optimizer state"));
    }
    let step = r.u64()?;
    let sizes: Vec<usize> = model.param_refs().iter().map(|p| p.numel()).collect();
    let mut first = Vec::with_capacity(sizes.len());
    let mut second = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        first.push(r.f64_vec(n)?);
        second.push(r.f64_vec(n)?);
    }
    let optimizer = Nadam::restore(config.train.lr, step, first, second);

    Ok(Checkpoint { config, model, optimizer, epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::config::{ModelSection, TrainSection};
    use crate::model::RelationMode;

    fn small_config() -> RunConfig {
        RunConfig {
            backbone: BackboneConfig {
                input_size: 16,
                block_channels: vec![3, 4],
                pool_after_block: vec![true, false],
                dilation_last_block: 1,
                drop_last_pool: false,
            },
            model: ModelSection {
                num_labels: 3,
                parcel_channels: 2,
                relation_channels: 4,
                head_hidden: 8,
                relation: RelationMode::Conv,
            },
            train: TrainSection { seed: 7, ..TrainSection::default() },
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let cfg = small_config();
        let mut model =
            Model::new(&cfg.model.to_model_config(), &cfg.backbone, 1, 7).unwrap();
        // make the data distinguishable from a fresh init
        for p in model.param_refs_mut() {
            for (i, v) in p.data.iter_mut().enumerate() {
                *v += 0.001 * i as f64;
            }
        }
        let sizes: Vec<usize> = model.param_refs().iter().map(|p| p.numel()).collect();
        let mut opt = Nadam::new(cfg.train.lr, &sizes);
        opt.begin_step();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &cfg, &model, &opt, 17).unwrap();
        let back = load(&path).unwrap();

        assert_eq!(back.epoch, 17);
        assert_eq!(back.config, cfg);
        assert_eq!(back.optimizer.step_count(), 1);
        for (a, b) in model.param_refs().iter().zip(back.model.param_refs()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let cfg = small_config();
        let model = Model::new(&cfg.model.to_model_config(), &cfg.backbone, 1, 7).unwrap();
        let sizes: Vec<usize> = model.param_refs().iter().map(|p| p.numel()).collect();
        let opt = Nadam::new(cfg.train.lr, &sizes);
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save(&p1, &cfg, &model, &opt, 3).unwrap();
        save(&p2, &cfg, &model, &opt, 3).unwrap();
        assert_eq!(fs::read(p1).unwrap(), fs::read(p2).unwrap());
    }

    #[test]
    fn magic_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        fs::write(&path, b"NOTAMODEL0rest").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let cfg = small_config();
        let model = Model::new(&cfg.model.to_model_config(), &cfg.backbone, 1, 7).unwrap();
        let sizes: Vec<usize> = model.param_refs().iter().map(|p| p.numel()).collect();
        let opt = Nadam::new(cfg.train.lr, &sizes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &cfg, &model, &opt, 0).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }
}

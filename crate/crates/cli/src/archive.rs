//! Single-file tensor archive with a text header.
//!
//! Layout, little-endian: magic, header entry count, `(key, value)` strings,
//! tensor count, then per tensor its name, rank, dims and `f32` data. A
//! SHA-256 digest of everything before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use semi_llie_core::encoder::{ConvPyramid, SemanticEncoder, StageSpec};
use semi_llie_core::optim::AdamW;
use semi_llie_core::train::{TrainConfig, TrainState};
use semi_llie_core::{ParamRole, ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const MAGIC: &[u8; 8] = b"SLLIECK1";

/// Config keys that steer a run without changing what it computes.
pub const RUN_CONTROL_KEYS: [&str; 2] = ["max_steps", "checkpoint_every"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub header: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| CliError::Archive(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| CliError::Archive("non-UTF-8 string".into()))
    }
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for (k, v) in &self.header {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(CliError::Archive("not a checkpoint archive".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CliError::Archive("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let mut header = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            header.insert(k, r.str()?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(4)
                    .ok_or_else(|| CliError::Archive("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != body.len() {
            return Err(CliError::Archive("trailing bytes".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::Archive(format!("missing header `{key}`")))
    }

    fn insert_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    fn insert_map(&mut self, prefix: &str, map: &BTreeMap<String, Tensor<f32>>) {
        for (name, t) in map {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor<f32>> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    fn store(&self, prefix: &str, role: ParamRole) -> ParamStore<f32> {
        let mut s = ParamStore::new(role);
        for (k, t) in self.section(prefix) {
            s.insert(k, t);
        }
        s
    }
}

/// Canonical `key=value` text of the fields that determine a run.
pub fn canonical_config(cfg: &TrainConfig) -> String {
    cfg.to_pairs()
        .into_iter()
        .filter(|(k, _)| !RUN_CONTROL_KEYS.contains(k))
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Hex SHA-256 of [`canonical_config`].
pub fn config_hash(cfg: &TrainConfig) -> String {
    Sha256::digest(canonical_config(cfg).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

const CONFIG_PREFIX: &str = "config.";

/// Everything needed to resume training bit-exactly.
pub fn state_to_archive(state: &TrainState<f32>) -> Archive {
    let cfg = state.config();
    let mut a = Archive::default();
    a.header.insert("kind".into(), "train_state".into());
    a.header.insert("step".into(), state.step().to_string());
    a.header.insert("config_hash".into(), config_hash(cfg));
    for (k, v) in cfg.to_pairs() {
        a.header.insert(format!("{CONFIG_PREFIX}{k}"), v);
    }
    let (so, dopt) = (state.student_optimizer(), state.discriminator_optimizer());
    a.header
        .insert("student_opt.steps".into(), so.steps().to_string());
    a.header
        .insert("disc_opt.steps".into(), dopt.steps().to_string());
    a.insert_store("student.", state.models().student());
    a.insert_store("teacher.", state.models().teacher());
    a.insert_store("disc.", state.discriminator().params());
    a.insert_map("student_opt.m.", so.first_moments());
    a.insert_map("student_opt.v.", so.second_moments());
    a.insert_map("disc_opt.m.", dopt.first_moments());
    a.insert_map("disc_opt.v.", dopt.second_moments());
    a
}

/// The config stored in an archive header.
pub fn archive_config(a: &Archive) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for key in TrainConfig::KEYS {
        let v = a.header_value(&format!("{CONFIG_PREFIX}{key}"))?;
        cfg.set(key, v)?;
    }
    if a.header_value("config_hash")? != config_hash(&cfg) {
        return Err(CliError::Archive(
            "stored config does not match its hash".into(),
        ));
    }
    Ok(cfg)
}

/// Lines describing how two configs differ.
pub fn config_diff(saved: &TrainConfig, current: &TrainConfig) -> Vec<String> {
    saved
        .to_pairs()
        .into_iter()
        .zip(current.to_pairs())
        .filter(|((k, a), (_, b))| a != b && !RUN_CONTROL_KEYS.contains(k))
        .map(|((k, a), (_, b))| format!("  {k}: checkpoint {a}, current {b}"))
        .collect()
}

/// Rebuild a training state. With `expected`, the saved config must hash
/// identically (run-control keys aside) and `expected` replaces it.
pub fn state_from_archive(a: &Archive, expected: Option<&TrainConfig>) -> Result<TrainState<f32>> {
    if a.header_value("kind")? != "train_state" {
        return Err(CliError::Archive(
            "archive does not hold a training state".into(),
        ));
    }
    let saved = archive_config(a)?;
    let cfg = match expected {
        Some(cur) if config_hash(cur) != config_hash(&saved) => {
            return Err(CliError::ConfigMismatch(config_diff(&saved, cur)));
        }
        Some(cur) => cur.clone(),
        None => saved,
    };
    let parse_u64 = |key: &str| -> Result<u64> {
        a.header_value(key)?
            .parse()
            .map_err(|_| CliError::Archive(format!("bad `{key}`")))
    };
    let student = a.store("student.", ParamRole::Student);
    let teacher = a.store("teacher.", ParamRole::Teacher);
    let models =
        semi_llie_core::mean_teacher::ModelPair::from_parts(student, teacher, cfg.ema_beta)?;
    let disc = semi_llie_core::adversary::Discriminator::from_params(
        cfg.discriminator(),
        a.store("disc.", ParamRole::Discriminator),
    )?;
    let student_opt = AdamW::from_state(
        cfg.optimizer(),
        models.student(),
        parse_u64("student_opt.steps")?,
        a.section("student_opt.m."),
        a.section("student_opt.v."),
    )?;
    let disc_opt = AdamW::from_state(
        cfg.optimizer(),
        disc.params(),
        parse_u64("disc_opt.steps")?,
        a.section("disc_opt.m."),
        a.section("disc_opt.v."),
    )?;
    Ok(TrainState::from_parts(
        cfg,
        models,
        disc,
        student_opt,
        disc_opt,
        parse_u64("step")?,
    )?)
}

/// Backbone weights of a training-state archive: the teacher, or the
/// student when `student` is set.
pub fn load_backbone(
    path: &Path,
    student: bool,
) -> Result<semi_llie_core::backbone::Backbone<f32>> {
    let a = Archive::load(path)?;
    let cfg = archive_config(&a)?;
    let (prefix, role) = if student {
        ("student.", ParamRole::Student)
    } else {
        ("teacher.", ParamRole::Teacher)
    };
    Ok(semi_llie_core::backbone::Backbone::from_params(
        cfg.backbone(),
        a.store(prefix, role),
    )?)
}

/// Encoder weights plus a manifest of stage names, kernels, strides and
/// channel counts.
pub fn encoder_to_archive(enc: &ConvPyramid<f32>) -> Archive {
    let mut a = Archive::default();
    a.header.insert("kind".into(), "encoder".into());
    for (i, s) in enc.specs().iter().enumerate() {
        a.header.insert(format!("stage.{i}.name"), s.name.clone());
        a.header
            .insert(format!("stage.{i}.kernel"), s.kernel.to_string());
        a.header
            .insert(format!("stage.{i}.stride"), s.stride.to_string());
        a.header
            .insert(format!("stage.{i}.channels"), s.channels.to_string());
    }
    a.insert_store("", enc.params());
    a
}

/// Load an encoder archive; errors name the first mismatched entry.
pub fn load_external_encoder(path: &Path) -> Result<ConvPyramid<f32>> {
    let a = Archive::load(path)?;
    if a.header_value("kind")? != "encoder" {
        return Err(CliError::Archive(format!(
            "{} is not an encoder archive",
            path.display()
        )));
    }
    let num = |key: String| -> Result<usize> {
        let v = a.header_value(&key)?;
        v.parse()
            .map_err(|_| CliError::Archive(format!("`{key}` = `{v}` is not a count")))
    };
    let mut specs = Vec::with_capacity(4);
    for i in 0..4 {
        specs.push(StageSpec {
            name: a.header_value(&format!("stage.{i}.name"))?.to_string(),
            kernel: num(format!("stage.{i}.kernel"))?,
            stride: num(format!("stage.{i}.stride"))?,
            channels: num(format!("stage.{i}.channels"))?,
        });
    }
    let specs: [StageSpec; 4] = specs.try_into().expect("four stages");
    Ok(ConvPyramid::new(specs, a.store("", ParamRole::Frozen))?)
}

//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FABN"                      magic
//! u32                         format version (1)
//! u64 + bytes                 UTF-8 header: model config and class names
//! u64                         parameter count
//! per parameter:
//!   u32 + bytes               name
//!   4 x u64                   shape (batch, height, width, channels)
//!   numel x f64               values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{format_blocks, parse_blocks, Model, ModelConfig};
use crate::tensor::{Shape4, Tensor};

pub const MAGIC: &[u8; 4] = b"FABN";
pub const VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = header_text(model.config(), model.class_names());
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.parameters().len() as u64).to_le_bytes());
    for p in model.parameters() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        for d in p.value.shape().dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} too large")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = r.len("header length")?;
    let header = std::str::from_utf8(r.take(header_len, "header")?)
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let (config, class_names) = parse_header(header)?;

    let count = r.len("parameter count")?;
    let mut values = Vec::new();
    for _ in 0..count {
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.len("shape")?;
        }
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3])
            .map_err(|e| Error::Format(format!("{name}: {e}")))?;
        let byte_len = shape
            .numel()
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{name}: shape too large")))?;
        let raw = r.take(byte_len, &name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        values.push((name, tensor));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after parameter table",
            bytes.len() - r.pos
        )));
    }
    Model::from_parts(config, class_names, values)
}

fn header_text(cfg: &ModelConfig, class_names: &[String]) -> String {
    let mut s = String::new();
    s.push_str(&format!("input_size={}x{}\n", cfg.input_size.0, cfg.input_size.1));
    s.push_str(&format!("in_channels={}\n", cfg.in_channels));
    s.push_str(&format!("blocks={}\n", format_blocks(&cfg.blocks)));
    s.push_str(&format!("use_fab={}\n", cfg.use_fab));
    s.push_str(&format!("fab_ratio={}\n", cfg.fab_ratio));
    match cfg.fab_after_block {
        Some(i) => s.push_str(&format!("fab_after_block={i}\n")),
        None => s.push_str("fab_after_block=last\n"),
    }
    s.push_str(&format!("head_hidden={}\n", cfg.head_hidden));
    s.push_str(&format!("num_classes={}\n", cfg.num_classes));
    s.push_str(&format!("freeze_backbone={}\n", cfg.freeze_backbone));
    for name in class_names {
        s.push_str(&format!("class={name}\n"));
    }
    s
}

fn parse_header(text: &str) -> Result<(ModelConfig, Vec<String>)> {
    let bad = |key: &str, v: &str| Error::Format(format!("bad header value {key}={v}"));
    let mut cfg = ModelConfig::default();
    let mut classes = Vec::new();
    let mut seen = Vec::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(key, v));
        let flag = |v: &str| v.parse::<bool>().map_err(|_| bad(key, v));
        match key {
            "input_size" => {
                let (h, w) = value.split_once('x').ok_or_else(|| bad(key, value))?;
                cfg.input_size = (num(h)?, num(w)?);
            }
            "in_channels" => cfg.in_channels = num(value)?,
            "blocks" => cfg.blocks = parse_blocks(value).map_err(|_| bad(key, value))?,
            "use_fab" => cfg.use_fab = flag(value)?,
            "fab_ratio" => cfg.fab_ratio = num(value)?,
            "fab_after_block" => {
                cfg.fab_after_block = match value {
                    "last" => None,
                    v => Some(num(v)?),
                }
            }
            "head_hidden" => cfg.head_hidden = num(value)?,
            "num_classes" => cfg.num_classes = num(value)?,
            "freeze_backbone" => cfg.freeze_backbone = flag(value)?,
            "class" => {
                classes.push(value.to_string());
                continue;
            }
            other => return Err(Error::Format(format!("unknown header key {other:?}"))),
        }
        seen.push(key);
    }
    for required in [
        "input_size",
        "in_channels",
        "blocks",
        "use_fab",
        "fab_ratio",
        "head_hidden",
        "num_classes",
        "freeze_backbone",
    ] {
        if !seen.contains(&required) {
            return Err(Error::Format(format!("header is missing {required}")));
        }
    }
    Ok((cfg, classes))
}

/// Differences between two models' checkpoint contents.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CheckpointDiff {
    /// Header keys whose values differ.
    pub config_keys: Vec<String>,
    /// Parameters present in only one model, or present in both with
    /// different shapes.
    pub structural: Vec<String>,
    /// Parameters present in both with equal shapes but different values.
    pub values: Vec<String>,
}

pub fn diff_models(a: &Model, b: &Model) -> CheckpointDiff {
    let ha = header_text(a.config(), a.class_names());
    let hb = header_text(b.config(), b.class_names());
    let mut config_keys: Vec<String> = Vec::new();
    let key_of = |l: &str| l.split_once('=').map_or(l, |(k, _)| k).to_string();
    let la: Vec<&str> = ha.lines().collect();
    let lb: Vec<&str> = hb.lines().collect();
    for l in la.iter().filter(|l| !lb.contains(l)).chain(lb.iter().filter(|l| !la.contains(l))) {
        let k = key_of(l);
        if !config_keys.contains(&k) {
            config_keys.push(k);
        }
    }

    let mut structural = Vec::new();
    let mut values = Vec::new();
    for p in a.parameters() {
        match b.parameter(&p.name) {
            Some(q) if q.value.shape() == p.value.shape() => {
                if !q.value.bit_eq(&p.value) {
                    values.push(p.name.clone());
                }
            }
            _ => structural.push(p.name.clone()),
        }
    }
    for q in b.parameters() {
        if a.parameter(&q.name).is_none() {
            structural.push(q.name.clone());
        }
    }
    CheckpointDiff {
        config_keys,
        structural,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvBlockSpec;

    fn small() -> Model {
        let cfg = ModelConfig {
            input_size: (8, 8),
            blocks: vec![ConvBlockSpec::new(4, true), ConvBlockSpec::new(8, false)],
            fab_ratio: 4,
            head_hidden: 6,
            num_classes: 3,
            ..ModelConfig::default()
        };
        Model::build(cfg, vec!["a".into(), "b b".into(), "c,d".into()], 5).unwrap()
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = small();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.class_names(), m.class_names());
        let d = diff_models(&m, &back);
        assert_eq!(d, CheckpointDiff::default());
    }

    #[test]
    fn truncated_is_format_error() {
        let bytes = to_bytes(&small());
        for cut in [0, 3, 7, 20, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&small());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = to_bytes(&small());
        bytes[4] = 9;
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = to_bytes(&small());
        bytes.push(0);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn fab_toggle_diff_is_confined() {
        let m = small();
        let mut cfg = m.config().clone();
        cfg.use_fab = false;
        let other = Model::build(cfg, m.class_names().to_vec(), 5).unwrap();
        let d = diff_models(&m, &other);
        assert_eq!(d.config_keys, vec!["use_fab".to_string()]);
        assert_eq!(d.structural, vec!["fab.W1", "fab.b1", "fab.W2", "fab.b2"]);
        assert!(d.values.is_empty());
    }
}

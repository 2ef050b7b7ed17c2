//! Named-parameter container.
//!
//! Layout:
//!
//! ```text
//! ADDERKIT-CKPT 1
//! <count>
//! <name> <offset> <length>      (count lines)
//! <empty line>
//! <blob section: tensors in the ADT4 binary format>
//! ```
//!
//! Offsets are relative to the start of the blob section. Entry order is
//! preserved.

use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::tensor::Tensor4;

const HEADER: &str = "ADDERKIT-CKPT 1";
const MAX_ENTRIES: usize = 1 << 16;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor4)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor4) -> Result<()> {
        let name = name.into();
        validate_name(&name)?;
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor4> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor4> {
        self.get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let blobs: Vec<Vec<u8>> = self.entries.iter().map(|(_, t)| t.to_bytes()).collect();
        let mut index = format!("{HEADER}\n{}\n", self.entries.len());
        let mut offset = 0usize;
        for ((name, _), blob) in self.entries.iter().zip(&blobs) {
            index.push_str(&format!("{} {} {}\n", name, offset, blob.len()));
            offset += blob.len();
        }
        index.push('\n');
        let mut out = index.into_bytes();
        for b in blobs {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[cursor..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| format_err("checkpoint", "unterminated index line"))?;
            cursor += end + 1;
            std::str::from_utf8(&rest[..end])
                .map_err(|_| format_err("checkpoint", "index is not UTF-8"))
        };

        if next_line()? != HEADER {
            return Err(format_err("checkpoint", "bad header"));
        }
        let count: usize = next_line()?
            .trim()
            .parse()
            .map_err(|_| format_err("checkpoint", "bad entry count"))?;
        if count > MAX_ENTRIES {
            return Err(format_err("checkpoint", format!("too many entries ({count})")));
        }
        let mut index = Vec::with_capacity(count);
        for _ in 0..count {
            let line = next_line()?;
            let mut parts = line.split(' ');
            let (Some(name), Some(off), Some(len), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(format_err("checkpoint", format!("bad index line `{line}`")));
            };
            validate_name(name)?;
            let off: usize = off
                .parse()
                .map_err(|_| format_err("checkpoint", "bad offset"))?;
            let len: usize = len
                .parse()
                .map_err(|_| format_err("checkpoint", "bad length"))?;
            index.push((name.to_string(), off, len));
        }
        if !next_line()?.is_empty() {
            return Err(format_err("checkpoint", "index not terminated by an empty line"));
        }
        let blobs = &bytes[cursor..];
        let mut ckpt = Checkpoint::new();
        for (name, off, len) in index {
            if ckpt.get(&name).is_some() {
                return Err(format_err("checkpoint", format!("duplicate entry `{name}`")));
            }
            let end = off
                .checked_add(len)
                .filter(|&e| e <= blobs.len())
                .ok_or_else(|| format_err("checkpoint", format!("entry `{name}` out of bounds")))?;
            let t = Tensor4::from_bytes(&blobs[off..end])?;
            ckpt.entries.push((name, t));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.display().to_string()));
        }
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return Err(format_err("checkpoint", format!("invalid entry name {name:?}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert("stem.weight", Tensor4::filled(Shape4::new(2, 1, 3, 3), 0.5)).unwrap();
        c.insert("stem.bn.gamma", Tensor4::filled(Shape4::new(1, 2, 1, 1), 1.0)).unwrap();
        c
    }

    #[test]
    fn roundtrip_preserves_order() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["stem.weight", "stem.bn.gamma"]);
    }

    #[test]
    fn index_is_readable_text() {
        let bytes = sample().to_bytes();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("ADDERKIT-CKPT 1\n2\nstem.weight 0 92\nstem.bn.gamma 92 28\n\n"));
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"ADDERKIT-CKPT 1\n1\nx 0 999\n\n").is_err());
        assert!(Checkpoint::from_bytes(b"ADDERKIT-CKPT 2\n0\n\n").is_err());
        let dup = b"ADDERKIT-CKPT 1\n2\na 0 0\na 0 0\n\n";
        assert!(Checkpoint::from_bytes(dup).is_err());
        assert!(Checkpoint::new().insert("has space", Tensor4::zeros(Shape4::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = Checkpoint::load("/nonexistent/toy.ckpt").unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }
}

//! Named parameter collections and their on-disk container format.
//!
//! A checkpoint file is a textual header followed by raw little-endian
//! 32-bit floats:
//!
//! ```text
//! tsl-checkpoint 1
//! entries 2
//! conv1/full f32 3 3 3 32 0 864
//! conv2/dw f32 3 3 32 1 3456 288
//! end
//! <binary payload>
//! ```
//!
//! Each entry line is `name dtype kh kw in out byte_offset element_count`,
//! offsets counted from the first payload byte. Kernels are stored
//! `(kh, kw, in, out)` row-major, biases as `(1, 1, 1, C)`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, KernelKind, Real, Shape, Tensor};

const MAGIC: &str = "tsl-checkpoint 1";

/// What a stored parameter is, recovered from its name suffix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Kernel(KernelKind),
    Bias,
}

impl ParamKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name.rsplit('/').next() {
            Some("full") => Ok(ParamKind::Kernel(KernelKind::Full)),
            Some("dw") => Ok(ParamKind::Kernel(KernelKind::Depthwise)),
            Some("pw") => Ok(ParamKind::Kernel(KernelKind::Pointwise)),
            Some("bias") => Ok(ParamKind::Bias),
            _ => Err(Error::Checkpoint(format!("parameter name `{name}` must end in /full, /dw, /pw or /bias"))),
        }
    }
}

/// Ordered map from parameter name to tensor.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        ParamKind::from_name(&name)?;
        if name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("whitespace in name `{name}`")));
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn insert_kernel(&mut self, name: impl Into<String>, k: ConvKernel<T>) -> Result<()> {
        self.insert(name, k.into_tensor())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn kernel(&self, name: &str) -> Result<ConvKernel<T>> {
        let ParamKind::Kernel(kind) = ParamKind::from_name(name)? else {
            return Err(Error::Checkpoint(format!("`{name}` is not a kernel")));
        };
        ConvKernel::from_tensor(kind, self.get(name)?.clone())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` whose name is present here, checking shapes.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in &other.entries {
            if let Some(dst) = self.entries.get_mut(name) {
                if dst.shape() != t.shape() {
                    return Err(Error::shape("load_matching", dst.shape(), t.shape()));
                }
                *dst = t.clone();
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Serialises to the checkpoint container (always 32-bit payload).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\nentries {}\n", self.entries.len());
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let [a, b, c, d] = t.shape().dims();
            header.push_str(&format!("{name} f32 {a} {b} {c} {d} {offset} {}\n", t.numel()));
            offset += t.numel() * 4;
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for t in self.entries.values() {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = BufReader::new(bytes);
        let mut line = String::new();
        let mut read_line = |line: &mut String, lineno: usize| -> Result<()> {
            line.clear();
            if reader.read_line(line)? == 0 {
                return Err(Error::Parse { line: lineno, msg: "unexpected end of header".into() });
            }
            Ok(())
        };
        read_line(&mut line, 1)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Parse { line: 1, msg: format!("bad magic `{}`", line.trim_end()) });
        }
        read_line(&mut line, 2)?;
        let count: usize = line
            .trim_end()
            .strip_prefix("entries ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse { line: 2, msg: "expected `entries <n>`".into() })?;
        let mut specs = Vec::with_capacity(count);
        for i in 0..count {
            let lineno = 3 + i;
            read_line(&mut line, lineno)?;
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: &str| Error::Parse { line: lineno, msg: msg.to_string() };
            if f.len() != 8 {
                return Err(bad("entry needs 8 fields"));
            }
            if f[1] != "f32" {
                return Err(bad("only f32 payloads are supported"));
            }
            let nums: Vec<usize> = f[2..]
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("non-numeric field"))?;
            let shape = Shape::new(nums[0], nums[1], nums[2], nums[3]);
            if shape.numel() != nums[5] {
                return Err(bad("element count does not match dims"));
            }
            specs.push((f[0].to_string(), shape, nums[4], nums[5]));
        }
        read_line(&mut line, 3 + count)?;
        if line.trim_end() != "end" {
            return Err(Error::Parse { line: 3 + count, msg: "expected `end`".into() });
        }
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;

        let mut store = ParamStore::new();
        for (name, shape, offset, n) in specs {
            let end = offset + n * 4;
            let raw =
                payload.get(offset..end).ok_or_else(|| Error::Checkpoint(format!("payload too short for `{name}`")))?;
            let data =
                raw.chunks_exact(4).map(|b| T::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
            store.insert(name, Tensor::from_vec(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Names present in one store but not the other, or with different shapes.
    pub fn diff_report(&self, other: &ParamStore<T>) -> Vec<String> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => out.push(format!("- {name} {}", t.shape())),
                Some(o) if o.shape() != t.shape() => out.push(format!("~ {name} {} vs {}", t.shape(), o.shape())),
                _ => {}
            }
        }
        for (name, t) in &other.entries {
            if !self.entries.contains_key(name) {
                out.push(format!("+ {name} {}", t.shape()));
            }
        }
        out
    }
}

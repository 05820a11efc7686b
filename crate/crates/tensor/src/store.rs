//! Directory-of-arrays persistence.
//!
//! Layout: `manifest.txt` (UTF-8) plus one `<name>.bin` per array holding the
//! row-major elements as little-endian IEEE-754 values. Manifest lines:
//!
//! ```text
//! cmt-arrays 1
//! meta <key> <value>
//! array <name> <dtype> <d0>x<d1>x...
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::tensor::Tensor;

const MAGIC: &str = "cmt-arrays 1";

fn store_err(msg: impl Into<String>) -> TensorError {
    TensorError::Store(msg.into())
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Ordered metadata plus named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayBundle<T> {
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Float> ArrayBundle<T> {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn array(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from(MAGIC);
        manifest.push('\n');
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(store_err(format!("invalid meta entry `{k}`")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.arrays {
            if !valid_name(name) {
                return Err(store_err(format!("invalid array name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("array {name} {} {}\n", T::DTYPE, dims.join("x")));
            let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
            for &x in t.data() {
                x.write_le(&mut bytes);
            }
            fs::write(dir.join(format!("{name}.bin")), bytes)?;
        }
        fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(store_err("missing or unsupported manifest header"));
        }
        let mut meta = Vec::new();
        let mut arrays = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (kind, rest) = line
                .split_once(' ')
                .ok_or_else(|| store_err(format!("bad line `{line}`")))?;
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "array" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, dims] = parts[..] else {
                        return Err(store_err(format!("bad array line `{line}`")));
                    };
                    if dtype != T::DTYPE {
                        return Err(store_err(format!("{name}: dtype {dtype}, expected {}", T::DTYPE)));
                    }
                    if !valid_name(name) {
                        return Err(store_err(format!("invalid array name `{name}`")));
                    }
                    let shape = dims
                        .split('x')
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|_| store_err(format!("{name}: bad shape `{dims}`")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let bytes = fs::read(dir.join(format!("{name}.bin")))?;
                    let numel: usize = shape.iter().product();
                    if bytes.len() != numel * T::BYTES {
                        return Err(store_err(format!(
                            "{name}: {} bytes on disk, manifest implies {}",
                            bytes.len(),
                            numel * T::BYTES
                        )));
                    }
                    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
                    arrays.push((name.to_string(), Tensor::from_vec(&shape, data)?));
                }
                other => return Err(store_err(format!("unknown manifest entry `{other}`"))),
            }
        }
        Ok(Self { meta, arrays })
    }
}

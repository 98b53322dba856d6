//! Named parameter storage, graph binding, and checkpoint serialization.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{DtpError, Result};
use crate::numerics::graph::{Graph, GradientMap, ValueId};
use crate::numerics::tensor::{Dtype, Real, Tensor};

#[derive(Debug, Clone)]
pub struct Param<F: Real> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub learnable: bool,
}

/// Ordered collection of named parameters. Insertion order is the canonical
/// order for binding, optimizer state, and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Real> {
    params: IndexMap<String, Param<F>>,
}

/// Node ids for one graph's bound parameters, keyed by name.
pub struct ParamBinding {
    ids: IndexMap<String, ValueId>,
}

impl ParamBinding {
    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.ids.get(name).copied().ok_or_else(|| {
            DtpError::InvalidArgument(format!("parameter {name:?} is not bound"))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(String::as_str)
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<F>, learnable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(DtpError::InvalidArgument(format!(
                "duplicate parameter {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad,
                learnable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.params
            .get(name)
            .ok_or_else(|| DtpError::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(name)?.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DtpError::InvalidArgument(format!("unknown parameter {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(DtpError::shape(
                &format!("set_value {name:?}"),
                p.value.shape(),
                value.shape(),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_learnable(&mut self, name: &str, learnable: bool) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| DtpError::InvalidArgument(format!("unknown parameter {name:?}")))?;
        p.learnable = learnable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on a graph (in store order) and returns the
    /// name-to-node mapping.
    pub fn bind(&self, graph: &mut Graph<F>) -> Result<ParamBinding> {
        let mut ids = IndexMap::new();
        for (slot, (name, p)) in self.params.iter().enumerate() {
            let id = graph.param(slot, p.value.clone())?;
            ids.insert(name.clone(), id);
        }
        Ok(ParamBinding { ids })
    }

    /// Copies a backward sweep's gradients into the store. Learnable
    /// parameters the loss does not reach get zeros; frozen parameters
    /// always get zeros.
    pub fn absorb_gradients(&mut self, graph: &Graph<F>, grads: &GradientMap<F>) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
        for (slot, id) in graph.param_slots() {
            let Some((_, p)) = self.params.get_index_mut(slot) else {
                continue;
            };
            if !p.learnable {
                continue;
            }
            if let Some(g) = grads.get(id) {
                for (acc, &gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += gv;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Adds `weight` times a captured sweep onto the stored gradients of
    /// learnable parameters. Frozen parameters stay untouched (their grads
    /// remain whatever `zero_grads` left, i.e. exactly zero). Entries in
    /// the sweep the loss did not reach contribute nothing.
    pub fn accumulate_captured(&mut self, sweep: &[Option<Tensor<F>>], weight: F) {
        for (slot, p) in self.params.values_mut().enumerate() {
            if !p.learnable {
                continue;
            }
            if let Some(Some(g)) = sweep.get(slot) {
                for (acc, &gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc = *acc + gv * weight;
                }
            }
        }
    }

    /// Converts every parameter's values to another float width. Gradients
    /// reset to zero; learnable flags carry over.
    pub fn convert<T: Real>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.insert(name, p.value.convert::<T>(), p.learnable)
                .expect("names unique by construction");
        }
        out
    }
}

/// Detaches a backward sweep's parameter gradients from its graph: one
/// entry per store slot, `None` where the loss never reached the
/// parameter. The result is safe to move across threads and to apply with
/// [`ParamStore::accumulate_captured`] after the graph is gone.
pub fn capture_gradients<F: Real>(
    graph: &Graph<F>,
    grads: &GradientMap<F>,
    param_count: usize,
) -> Vec<Option<Tensor<F>>> {
    let mut out = vec![None; param_count];
    for (slot, id) in graph.param_slots() {
        if slot < param_count {
            out[slot] = grads.get(id).cloned();
        }
    }
    out
}

const CHECKPOINT_MAGIC: &str = "DTPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model state: parameters plus free-form metadata lines.
#[derive(Debug)]
pub struct Checkpoint<F: Real> {
    pub store: ParamStore<F>,
    pub meta: IndexMap<String, String>,
}

impl<F: Real> ParamStore<F> {
    /// Serializes the store: a text header (versioned, self-describing)
    /// followed by raw little-endian scalar data in header order.
    pub fn to_checkpoint_bytes(&self, meta: &IndexMap<String, String>) -> Vec<u8> {
        let mut header = String::new();
        header.push_str(&format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n"));
        header.push_str(&format!("dtype {}\n", F::DTYPE.name()));
        for (k, v) in meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, p) in &self.params {
            let flag = if p.learnable { 1 } else { 0 };
            header.push_str(&format!("param {name} {flag} {}", p.value.rank()));
            for d in p.value.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for p in self.params.values() {
            for &v in p.value.data() {
                v.write_le(&mut bytes);
            }
        }
        bytes
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Checkpoint<F>> {
        let ckpt = |msg: String| DtpError::Checkpoint(msg);
        // The header is ASCII up to the "end" line; scan line by line.
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| ckpt("unterminated header".to_string()))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| ckpt("non-UTF-8 header".to_string()))?
                .to_string();
            pos += nl + 1;
            Ok(line)
        };

        let first = next_line(bytes)?;
        let mut it = first.split_whitespace();
        if it.next() != Some(CHECKPOINT_MAGIC) {
            return Err(ckpt("not a checkpoint file".to_string()));
        }
        let version: u32 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ckpt("missing version".to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }

        let dtype_line = next_line(bytes)?;
        let dtype_name = dtype_line
            .strip_prefix("dtype ")
            .ok_or_else(|| ckpt("missing dtype line".to_string()))?;
        let dtype = Dtype::parse(dtype_name)?;
        if dtype != F::DTYPE {
            return Err(ckpt(format!(
                "checkpoint dtype {} does not match requested {}",
                dtype.name(),
                F::DTYPE.name()
            )));
        }

        let mut meta = IndexMap::new();
        let mut specs: Vec<(String, bool, Vec<usize>)> = Vec::new();
        loop {
            let line = next_line(bytes)?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| ckpt(format!("malformed meta line {line:?}")))?;
                meta.insert(k.to_string(), v.to_string());
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split_whitespace();
                let name = parts
                    .next()
                    .ok_or_else(|| ckpt(format!("malformed param line {line:?}")))?
                    .to_string();
                let learnable = match parts.next() {
                    Some("0") => false,
                    Some("1") => true,
                    _ => return Err(ckpt(format!("malformed param line {line:?}"))),
                };
                let rank: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| ckpt(format!("malformed param line {line:?}")))?;
                let dims: Vec<usize> = parts
                    .map(|v| v.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| ckpt(format!("malformed param line {line:?}")))?;
                if dims.len() != rank {
                    return Err(ckpt(format!(
                        "param {name}: rank {rank} but {} dims",
                        dims.len()
                    )));
                }
                specs.push((name, learnable, dims));
            } else {
                return Err(ckpt(format!("unexpected header line {line:?}")));
            }
        }

        let elem = F::DTYPE.byte_width();
        let expected: usize = specs
            .iter()
            .map(|(_, _, dims)| dims.iter().product::<usize>())
            .sum();
        let payload = &bytes[pos..];
        if payload.len() != expected * elem {
            return Err(ckpt(format!(
                "payload holds {} bytes, header describes {}",
                payload.len(),
                expected * elem
            )));
        }

        let mut store = ParamStore::new();
        let mut offset = 0usize;
        for (name, learnable, dims) in specs {
            let count: usize = dims.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(F::read_le(&payload[offset..offset + elem]));
                offset += elem;
            }
            store.insert(&name, Tensor::new(dims, data)?, learnable)?;
        }
        Ok(Checkpoint { store, meta })
    }

    /// Writes the checkpoint atomically (temp file + rename).
    pub fn save_checkpoint(&self, path: &Path, meta: &IndexMap<String, String>) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(meta);
        write_atomic(path, &bytes)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Checkpoint<F>> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Writes a file via a sibling temp file and an atomic rename, so a crash
/// never leaves a partially written output at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| DtpError::InvalidArgument(format!("not a file path: {path:?}")))?;
    let tmp_name = format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => std::path::PathBuf::from(&tmp_name),
    };
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

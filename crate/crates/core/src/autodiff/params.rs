//! Named parameter storage and the `model.ckpt` checkpoint format.
//!
//! A checkpoint starts with a text header: the magic line, then one line per
//! tensor (`param <name> <d0>x<d1>...` or `buffer <name> <len>`) in
//! registration order, then `end`. The float32 little-endian payload
//! follows directly, tensors concatenated in the same order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::graph::{Graph, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "cogload-ckpt 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in registration order, which is also the index of the
    /// matching [`Var`] returned by [`ParamStore::bind`].
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    tensor: Tensor<T>,
}

/// Learnable tensors plus non-learnable `f64` buffers (batch-norm running
/// statistics), both addressed by registration index.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    params: Vec<Entry<T>>,
    buffers: Vec<(String, Vec<f64>)>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    /// Registers a parameter. Names must be unique and whitespace-free.
    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        self.check_name(name);
        self.params.push(Entry {
            name: name.to_string(),
            tensor,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, values: Vec<f64>) -> BufferId {
        self.check_name(name);
        self.buffers.push((name.to_string(), values));
        BufferId(self.buffers.len() - 1)
    }

    fn check_name(&self, name: &str) {
        assert!(
            !name.is_empty() && !name.contains(char::is_whitespace),
            "invalid parameter name {name:?}"
        );
        assert!(
            self.params.iter().all(|e| e.name != name) && self.buffers.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn n_values(&self) -> usize {
        self.params.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [f64] {
        &mut self.buffers[id.0].1
    }

    /// Adds every parameter to `g` as a gradient-tracked leaf, in
    /// registration order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params.iter().map(|e| g.param(e.tensor.clone())).collect()
    }

    /// Gradients of the bound leaves (zeros where a parameter did not
    /// reach the loss).
    pub fn grads(&self, g: &Graph<T>, vars: &[Var]) -> Vec<Vec<T>> {
        vars.iter()
            .zip(&self.params)
            .map(|(&v, e)| {
                g.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); e.tensor.numel()])
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                })
                .collect(),
            buffers: self.buffers.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        for e in &self.params {
            let dims: Vec<String> = e.tensor.shape().iter().map(usize::to_string).collect();
            out.extend_from_slice(format!("param {} {}\n", e.name, dims.join("x")).as_bytes());
        }
        for (name, v) in &self.buffers {
            out.extend_from_slice(format!("buffer {name} {}\n", v.len()).as_bytes());
        }
        out.extend_from_slice(b"end\n");
        for e in &self.params {
            for &v in e.tensor.data() {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        for (_, v) in &self.buffers {
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter and buffer from a checkpoint whose header
    /// matches this store's names and shapes exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bad = |detail: String| Error::format("checkpoint", path, detail);
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(bad("missing magic line".into()));
        }
        for e in &self.params {
            let dims: Vec<String> = e.tensor.shape().iter().map(usize::to_string).collect();
            let want = format!("param {} {}", e.name, dims.join("x"));
            let got = next_line(&mut r)?;
            if got != want {
                return Err(bad(format!("expected `{want}`, found `{got}`")));
            }
        }
        for (name, v) in &self.buffers {
            let want = format!("buffer {name} {}", v.len());
            let got = next_line(&mut r)?;
            if got != want {
                return Err(bad(format!("expected `{want}`, found `{got}`")));
            }
        }
        let got = next_line(&mut r)?;
        if got != "end" {
            return Err(bad(format!("expected end of header, found `{got}`")));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let total = self.n_values() + self.buffers.iter().map(|(_, v)| v.len()).sum::<usize>();
        if payload.len() != 4 * total {
            return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 4 * total)));
        }
        let mut vals = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        for e in &mut self.params {
            for d in e.tensor.data_mut() {
                *d = T::of(vals.next().expect("length checked"));
            }
        }
        for (_, v) in &mut self.buffers {
            for d in v.iter_mut() {
                *d = vals.next().expect("length checked");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        s.add("b", Tensor::new(&[2], vec![0.5, 0.0]).unwrap());
        s.add_buffer("bn.mean", vec![0.1, 0.2]);
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let s = store();
        s.save(&path).unwrap();
        let mut t = store();
        t.get_mut(ParamId(0)).data_mut().fill(0.0);
        t.buffer_mut(BufferId(0)).fill(9.0);
        t.load(&path).unwrap();
        assert_eq!(t.get(ParamId(0)), s.get(ParamId(0)));
        assert!((t.buffer(BufferId(0))[1] - 0.2).abs() < 1e-7);
        let text = std::fs::read(&path).unwrap();
        assert!(text.starts_with(b"cogload-ckpt 1\nparam w 2x2\nparam b 2\nbuffer bn.mean 2\nend\n"));
    }

    #[test]
    fn checkpoint_shape_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        store().save(&path).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(&[3, 2]));
        assert!(matches!(other.load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bind_and_grads() {
        let s = store();
        let mut g = Graph::new();
        let vars = s.bind(&mut g);
        let total = g.sum(vars[0]);
        g.backward(total).unwrap();
        let grads = s.grads(&g, &vars);
        assert_eq!(grads[0], vec![1.0; 4]);
        assert_eq!(grads[1], vec![0.0; 2]);
        assert_eq!(s.find("b"), Some(ParamId(1)));
    }
}

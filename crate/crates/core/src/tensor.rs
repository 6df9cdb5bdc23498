//! Dense row-major f64 tensors and their binary on-disk format.
//!
//! Element `(i, j, k)` of a tensor with shape `(A, B, C)` lives at flat index
//! `i*B*C + j*C + k`. All numerics in this crate run in double precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Magic bytes of the tensor file format.
pub const TENSOR_MAGIC: [u8; 4] = *b"SSTN";
/// Current tensor file format version.
pub const TENSOR_FORMAT_VERSION: u16 = 1;

/// Dense N-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn validate_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("rank must be at least 1".into()));
    }
    let mut n: usize = 1;
    for &e in shape {
        if e == 0 {
            return Err(Error::InvalidShape(format!(
                "extent 0 in shape {shape:?}"
            )));
        }
        n = n.checked_mul(e).ok_or_else(|| {
            Error::InvalidShape(format!("shape {shape:?} overflows usize"))
        })?;
    }
    Ok(n)
}

impl Tensor {
    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Result<Tensor> {
        let n = validate_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Tensor::filled(shape, 0.0)
    }

    /// Zero tensor with the same shape as `other`.
    pub fn zeros_like(other: &Tensor) -> Tensor {
        Tensor {
            shape: other.shape.clone(),
            data: vec![0.0; other.data.len()],
        }
    }

    /// Wrap an owned buffer; `data.len()` must equal the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n = validate_shape(shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} expects {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Tensor with i.i.d. entries from uniform(-scale, scale), reproducible
    /// for a given seed.
    pub fn random_uniform(shape: &[usize], scale: f64, seed: u64) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::random_uniform_with(shape, scale, &mut rng)
    }

    /// Like [`Tensor::random_uniform`] but drawing from a caller-managed
    /// stream, so several tensors can share one seed.
    pub fn random_uniform_with(
        shape: &[usize],
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n = validate_shape(shape)?;
        if scale < 0.0 || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "uniform scale must be finite and >= 0, got {scale}"
            )));
        }
        let dist = Uniform::new_inclusive(-scale, scale);
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Flat offset of a multi-index.
    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn at_mut(&mut self, index: &[usize]) -> &mut f64 {
        let flat = self.flat_index(index);
        &mut self.data[flat]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n = validate_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::InvalidShape(format!(
                "cannot reshape {:?} ({} elements) to {:?} ({n} elements)",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Elementwise `self += scale * other`; shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "add_scaled shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Serialize in the `SSTN` binary format: magic, format version (u16 LE),
    /// rank (u16 LE), extents (u32 LE each), then the data as f64 LE,
    /// row-major. Round-trips bit-exactly.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(&TENSOR_MAGIC).map_err(io_err)?;
        w.write_all(&TENSOR_FORMAT_VERSION.to_le_bytes())
            .map_err(io_err)?;
        let rank = u16::try_from(self.shape.len()).map_err(|_| {
            Error::InvalidShape(format!("rank {} exceeds u16", self.shape.len()))
        })?;
        w.write_all(&rank.to_le_bytes()).map_err(io_err)?;
        for &e in &self.shape {
            let e = u32::try_from(e).map_err(|_| {
                Error::InvalidShape(format!("extent {e} exceeds u32"))
            })?;
            w.write_all(&e.to_le_bytes()).map_err(io_err)?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read_from(path: &Path) -> Result<Tensor> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, path)?;
        if magic != TENSOR_MAGIC {
            return Err(Error::decode(path, "bad magic bytes (not an SSTN tensor)"));
        }
        let mut u16buf = [0u8; 2];
        read_exact(&mut r, &mut u16buf, path)?;
        let version = u16::from_le_bytes(u16buf);
        if version != TENSOR_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                got: version,
                expected: TENSOR_FORMAT_VERSION,
            });
        }
        read_exact(&mut r, &mut u16buf, path)?;
        let rank = u16::from_le_bytes(u16buf) as usize;
        if rank == 0 {
            return Err(Error::decode(path, "rank 0 tensor"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut u32buf = [0u8; 4];
        for _ in 0..rank {
            read_exact(&mut r, &mut u32buf, path)?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let n = validate_shape(&shape)
            .map_err(|e| Error::decode(path, format!("bad shape: {e}")))?;
        let mut data = Vec::with_capacity(n);
        let mut f64buf = [0u8; 8];
        for _ in 0..n {
            read_exact(&mut r, &mut f64buf, path)?;
            data.push(f64::from_le_bytes(f64buf));
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(Error::decode(path, "trailing bytes after tensor data")),
            Err(e) => return Err(Error::io(path, e)),
        }
        Ok(Tensor { shape, data })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::decode(path, "truncated tensor file")
        } else {
            Error::io(path, e)
        }
    })
}

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use super::error::{Result, TensorError};
use super::real::Real;

pub const TNSR_MAGIC: &[u8; 4] = b"TNSR";
pub const TNSR_VERSION: u8 = 1;

/// Dense row-major n-dimensional array.
///
/// Storage is reference counted, so cloning a tensor (or feeding a parameter
/// into a graph) never copies the payload.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        validate_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Self { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) })
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Mutable access; copies the payload if it is shared.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<F> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| G::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Item `index` along the leading axis, keeping a leading dim of 1.
    pub fn select_batch(&self, index: usize) -> Result<Self> {
        let b = self.shape[0];
        if index >= b {
            return Err(TensorError::InvalidArgument {
                op: "select_batch",
                reason: format!("index {index} out of range for batch {b}"),
            });
        }
        let per = self.numel() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Self { shape, data: Arc::new(self.data[index * per..(index + 1) * per].to_vec()) })
    }

    /// Same data with a new leading axis of size 1.
    pub fn unsqueeze0(&self) -> Self {
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.shape);
        Self { shape, data: Arc::clone(&self.data) }
    }

    /// Concatenate along the leading axis.
    pub fn stack_batch(items: &[Tensor<F>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "stack_batch",
            reason: "no tensors".into(),
        })?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut lead = 0;
        for t in items {
            if &t.shape[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_batch",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::new(&shape, data)
    }

    /// Serialize as a TNSR v1 record.
    pub fn write_tnsr<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(7 + 4 * self.shape.len() + F::BYTES * self.numel());
        buf.extend_from_slice(TNSR_MAGIC);
        buf.push(TNSR_VERSION);
        buf.push(F::DTYPE_CODE);
        buf.push(self.shape.len() as u8);
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data.iter() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)
    }

    pub fn to_tnsr_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_tnsr(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parse one TNSR v1 record from the reader.
    pub fn read_tnsr<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| TensorError::Format(e.to_string());
        let mut head = [0u8; 7];
        r.read_exact(&mut head).map_err(io)?;
        if &head[..4] != TNSR_MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        if head[4] != TNSR_VERSION {
            return Err(TensorError::Format(format!("unsupported version {}", head[4])));
        }
        if head[5] != F::DTYPE_CODE {
            return Err(TensorError::Format(format!(
                "dtype code {} does not match expected {}",
                head[5],
                F::DTYPE_CODE
            )));
        }
        let ndim = head[6] as usize;
        let mut dims = vec![0u8; 4 * ndim];
        r.read_exact(&mut dims).map_err(io)?;
        let shape: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
            .collect();
        validate_shape(&shape).map_err(|e| TensorError::Format(e.to_string()))?;
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * F::BYTES];
        r.read_exact(&mut payload).map_err(io)?;
        let data = payload.chunks_exact(F::BYTES).map(F::read_le).collect();
        Self::new(&shape, data)
    }

    pub fn from_tnsr_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_tnsr(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(TensorError::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(t)
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dims must be non-empty and positive".into(),
        });
    }
    if shape.len() > u8::MAX as usize {
        return Err(TensorError::InvalidShape { shape: shape.to_vec(), reason: "too many dims".into() });
    }
    Ok(())
}

impl<F: Real> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.numel() > 8 {
            write!(f, "..")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn tnsr_header_layout() {
        let t = Tensor::<f32>::new(&[2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_tnsr_bytes();
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 0);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..11], &2u32.to_le_bytes());
        assert_eq!(&bytes[11..15], &1u32.to_le_bytes());
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 23);
    }

    #[test]
    fn truncated_tnsr_is_an_error() {
        let bytes = Tensor::<f32>::zeros(&[3, 3]).unwrap().to_tnsr_bytes();
        for cut in [0, 3, 7, 10, bytes.len() - 1] {
            assert!(Tensor::<f32>::from_tnsr_bytes(&bytes[..cut]).is_err());
        }
        assert!(Tensor::<f64>::from_tnsr_bytes(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn tnsr_round_trip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff))
                .collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = Tensor::<f32>::from_tnsr_bytes(&t.to_tnsr_bytes()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}

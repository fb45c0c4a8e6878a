//! Binary tensor container: 8-byte magic, rank, shape, dtype tag, payload.
//! Everything little-endian. Round-trips are bit-exact, including NaN
//! payloads, so written tensors double as golden files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::NumioError;
use crate::mat::Mat;

/// Last byte doubles as a format version.
const MAGIC: [u8; 8] = *b"CAPTNSR\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
    I64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
            Dtype::I64 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, NumioError> {
        match tag {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::I64),
            other => Err(NumioError::BadDtype(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::F32(_) => Dtype::F32,
            TensorData::I64(_) => Dtype::I64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    /// Rank-0 tensors carry exactly one value.
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, NumioError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumioError::ShapePayloadMismatch { shape, expected, actual: data.len() });
        }
        Ok(TensorFile { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, NumioError> {
        TensorFile::new(shape, TensorData::F64(values))
    }

    pub fn scalar_f64(v: f64) -> Self {
        TensorFile { shape: Vec::new(), data: TensorData::F64(vec![v]) }
    }

    pub fn from_mat(m: &Mat) -> Self {
        TensorFile { shape: vec![m.rows(), m.cols()], data: TensorData::F64(m.data().to_vec()) }
    }

    /// Requires rank 2 and float64 payload.
    pub fn to_mat(&self) -> Result<Mat, NumioError> {
        let (rows, cols) = match self.shape.as_slice() {
            [r, c] if *r > 0 && *c > 0 => (*r, *c),
            _ => {
                return Err(NumioError::Config(format!(
                    "expected a rank-2 tensor with positive dims, got shape {:?}",
                    self.shape
                )))
            }
        };
        match &self.data {
            TensorData::F64(v) => Ok(Mat::from_vec(rows, cols, v.clone())),
            other => Err(NumioError::Config(format!(
                "expected float64 payload, got {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn f64_values(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    /// Bit-level equality: NaN payloads and signed zeros must survive a round-trip.
    pub fn bitwise_eq(&self, other: &TensorFile) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &TensorFile) -> Result<(), NumioError> {
    w.write_all(&MAGIC)?;
    w.write_all(&[t.rank() as u8])?;
    for &dim in t.shape() {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    w.write_all(&[t.dtype().tag()])?;
    match t.data() {
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::I64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<TensorFile, NumioError> {
    let mut magic = [0u8; 8];
    read_exact_or(r, &mut magic)?;
    if magic != MAGIC {
        return Err(NumioError::BadMagic);
    }
    let mut byte = [0u8; 1];
    read_exact_or(r, &mut byte)?;
    let rank = byte[0] as usize;
    let mut shape_u64 = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut dim = [0u8; 8];
        read_exact_or(r, &mut dim)?;
        shape_u64.push(u64::from_le_bytes(dim));
    }
    let mut count: usize = 1;
    let mut shape = Vec::with_capacity(rank);
    for &d in &shape_u64 {
        let d_usize = usize::try_from(d).map_err(|_| NumioError::TooLarge { shape: shape_u64.clone() })?;
        count = count
            .checked_mul(d_usize)
            .ok_or(NumioError::TooLarge { shape: shape_u64.clone() })?;
        shape.push(d_usize);
    }
    read_exact_or(r, &mut byte)?;
    let dtype = Dtype::from_tag(byte[0])?;
    let elem = match dtype {
        Dtype::F64 | Dtype::I64 => 8,
        Dtype::F32 => 4,
    };
    let total = count
        .checked_mul(elem)
        .ok_or(NumioError::TooLarge { shape: shape_u64.clone() })?;
    let mut payload = vec![0u8; total];
    r.read_exact(&mut payload).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NumioError::Truncated { expected: total }
        } else {
            NumioError::Io(e)
        }
    })?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => return Err(NumioError::TrailingBytes),
    }
    let data = match dtype {
        Dtype::F64 => TensorData::F64(
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        Dtype::F32 => TensorData::F32(
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
        Dtype::I64 => TensorData::I64(
            payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
        ),
    };
    TensorFile::new(shape, data)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), NumioError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NumioError::Truncated { expected: buf.len() }
        } else {
            NumioError::Io(e)
        }
    })
}

pub fn save_tensor(path: &Path, t: &TensorFile) -> Result<(), NumioError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<TensorFile, NumioError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(t: &TensorFile) -> TensorFile {
        let mut buf = Vec::new();
        write_tensor(&mut buf, t).unwrap();
        read_tensor(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn small_matrix_roundtrips() {
        let t = TensorFile::from_f64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(roundtrip(&t).bitwise_eq(&t));
    }

    #[test]
    fn rank0_scalar_roundtrips() {
        let t = TensorFile::scalar_f64(7.0);
        let back = roundtrip(&t);
        assert_eq!(back.rank(), 0);
        assert_eq!(back.f64_values(), Some(&[7.0][..]));
    }

    #[test]
    fn shape_payload_mismatch_is_rejected() {
        let err = TensorFile::from_f64(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, NumioError::ShapePayloadMismatch { expected: 4, actual: 3, .. }));
    }

    #[test]
    fn nan_payloads_and_negative_zero_survive() {
        let weird = vec![
            f64::from_bits(0x7ff8_0000_0000_0001),
            f64::from_bits(0xfff0_0000_0000_0000),
            -0.0,
            f64::MIN_POSITIVE / 2.0,
        ];
        let t = TensorFile::from_f64(vec![4], weird).unwrap();
        assert!(roundtrip(&t).bitwise_eq(&t));
    }

    #[test]
    fn f32_and_i64_payloads_roundtrip() {
        let t = TensorFile::new(vec![3], TensorData::F32(vec![1.5, -2.25, f32::NAN])).unwrap();
        assert!(roundtrip(&t).bitwise_eq(&t));
        let t = TensorFile::new(vec![2, 1], TensorData::I64(vec![i64::MIN, 42])).unwrap();
        assert!(roundtrip(&t).bitwise_eq(&t));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &TensorFile::scalar_f64(1.0)).unwrap();
        buf[0] = b'X';
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(NumioError::BadMagic)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &TensorFile::from_f64(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(NumioError::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &TensorFile::scalar_f64(1.0)).unwrap();
        buf.push(0);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(NumioError::TrailingBytes)));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &TensorFile::scalar_f64(1.0)).unwrap();
        // dtype tag sits after magic(8) + rank(1) + no shape words for rank 0
        buf[9] = 9;
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(NumioError::BadDtype(9))));
    }
}

//! In-memory raster containers.
//!
//! A [`Raster`] is a planar, channel-major, row-major buffer: all of channel
//! 0, then channel 1, and so on. [`DepthFrame`] is the f64 working form of a
//! single-channel depth raster used by the numeric code.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Uint16,
    Uint8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Uint16 => 2,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U16(Vec<u16>),
    U8(Vec<u8>),
}

impl RasterData {
    pub fn dtype(&self) -> DType {
        match self {
            RasterData::F32(_) => DType::Float32,
            RasterData::U16(_) => DType::Uint16,
            RasterData::U8(_) => DType::Uint8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RasterData::F32(v) => v.len(),
            RasterData::U16(v) => v.len(),
            RasterData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: RasterData,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: RasterData) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::InvalidInput(format!("raster buffer has {} elements, expected {expected}", data.len())));
        }
        if let RasterData::F32(v) = &data {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("float32 raster contains a non-finite value at element {i}")));
            }
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_f32(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(height, width, channels, RasterData::F32(data))
    }

    pub fn from_u16(height: usize, width: usize, channels: usize, data: Vec<u16>) -> Result<Self> {
        Self::new(height, width, channels, RasterData::U16(data))
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(height, width, channels, RasterData::U8(data))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &RasterData {
        &self.data
    }

    pub fn into_data(self) -> RasterData {
        self.data
    }

    /// `[channels, height, width]`, the order used in pack manifests.
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype().size()
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// Element `(c, y, x)` widened to f64.
    pub fn get_f64(&self, c: usize, y: usize, x: usize) -> f64 {
        let i = (c * self.height + y) * self.width + x;
        match &self.data {
            RasterData::F32(v) => v[i] as f64,
            RasterData::U16(v) => v[i] as f64,
            RasterData::U8(v) => v[i] as f64,
        }
    }

    /// Little-endian byte encoding.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        match &self.data {
            RasterData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RasterData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_le_bytes(height: usize, width: usize, channels: usize, dtype: DType, bytes: &[u8]) -> Result<Self> {
        let n = height * width * channels;
        if bytes.len() != n * dtype.size() {
            return Err(Error::Format(format!("raster needs {} bytes, got {}", n * dtype.size(), bytes.len())));
        }
        let data = match dtype {
            DType::Float32 => {
                RasterData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
            }
            DType::Uint16 => RasterData::U16(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()),
            DType::Uint8 => RasterData::U8(bytes.to_vec()),
        };
        Self::new(height, width, channels, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            RasterData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u16(&self) -> Option<&[u16]> {
        match &self.data {
            RasterData::U16(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            RasterData::U8(v) => Some(v),
            _ => None,
        }
    }
}

/// Binary validity mask, one byte per pixel, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "mask buffer has {} elements, expected {}",
                data.len(),
                height * width
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.data[i] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(Mask { data, ..*self })
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(Mask { data, ..*self })
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::InvalidInput(format!(
                "mask dims {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_u8(self.height, self.width, 1, self.data.clone()).expect("mask dims are valid")
    }
}

/// Single-view depth in f64. Units (relative vs meters) are carried by the
/// pack stream kind the frame came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthFrame {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} elements, expected {}",
                values.len(),
                height * width
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("depth contains non-finite values".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> DepthFrame {
        DepthFrame { values: self.values.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Pixels with depth strictly above `eps`.
    pub fn valid_mask(&self, eps: f64) -> Mask {
        Mask { height: self.height, width: self.width, data: self.values.iter().map(|&v| (v > eps) as u8).collect() }
    }

    pub fn same_dims(&self, other: &DepthFrame) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Reads a single-channel float32 raster (relative or metric depth).
    pub fn from_f32_raster(r: &Raster) -> Result<Self> {
        match (r.channels(), r.as_f32()) {
            (1, Some(v)) => {
                Ok(Self { height: r.height(), width: r.width(), values: v.iter().map(|&x| x as f64).collect() })
            }
            _ => Err(Error::Format(format!(
                "expected 1-channel float32 depth, got {}-channel {:?}",
                r.channels(),
                r.dtype()
            ))),
        }
    }

    /// Reads a uint16 millimeter sensor raster into meters; 0 stays 0.
    pub fn from_sensor_mm(r: &Raster) -> Result<Self> {
        match (r.channels(), r.as_u16()) {
            (1, Some(v)) => Ok(Self {
                height: r.height(),
                width: r.width(),
                values: v.iter().map(|&x| x as f64 / 1000.0).collect(),
            }),
            _ => Err(Error::Format(format!(
                "expected 1-channel uint16 sensor depth, got {}-channel {:?}",
                r.channels(),
                r.dtype()
            ))),
        }
    }

    pub fn to_f32_raster(&self) -> Raster {
        Raster::from_f32(self.height, self.width, 1, self.values.iter().map(|&v| v as f32).collect())
            .expect("depth frame dims are valid")
    }
}

//! Raw-volume loading.
//!
//! A volume on disk is a bare binary voxel array plus a sidecar text
//! descriptor that names its dimensions, scalar type, byte order and voxel
//! spacing. Voxels are widened to `f64` on load so the rest of the pipeline
//! has a single numeric path regardless of source depth.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use thiserror::Error;

/// Errors produced while reading or describing a raw volume.
#[derive(Debug, Error)]
pub enum VolumeError {
    /// File length does not match `nx * ny * nz * bytes_per_voxel`.
    #[error("file is {actual} bytes, expected {expected} ({nx}x{ny}x{nz} voxels of {voxel_type})")]
    SizeMismatch {
        expected: u64,
        actual: u64,
        nx: usize,
        ny: usize,
        nz: usize,
        voxel_type: VoxelType,
    },
    /// Metadata is missing, malformed or inconsistent.
    #[error("bad volume metadata: {0}")]
    BadMeta(String),
    /// A voxel decoded to NaN or infinity.
    #[error("non-finite voxel value at index {index}")]
    NonFinite { index: usize },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Scalar type of the on-disk voxel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelType {
    U8,
    U16,
    I16,
    F32,
}

impl VoxelType {
    pub fn bytes_per_voxel(self) -> usize {
        match self {
            VoxelType::U8 => 1,
            VoxelType::U16 | VoxelType::I16 => 2,
            VoxelType::F32 => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self, VolumeError> {
        match s.trim() {
            "u8" => Ok(VoxelType::U8),
            "u16" => Ok(VoxelType::U16),
            "i16" => Ok(VoxelType::I16),
            "f32" => Ok(VoxelType::F32),
            other => Err(VolumeError::BadMeta(format!(
                "unknown voxel type {other:?} (expected u8, u16, i16 or f32)"
            ))),
        }
    }
}

impl fmt::Display for VoxelType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            VoxelType::U8 => "u8",
            VoxelType::U16 => "u16",
            VoxelType::I16 => "i16",
            VoxelType::F32 => "f32",
        };
        f.write_str(name)
    }
}

/// Byte order of multi-byte voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

impl Endianness {
    pub fn parse(s: &str) -> Result<Self, VolumeError> {
        match s.trim() {
            "little" => Ok(Endianness::Little),
            "big" => Ok(Endianness::Big),
            other => Err(VolumeError::BadMeta(format!(
                "unknown endianness {other:?} (expected little or big)"
            ))),
        }
    }
}

impl fmt::Display for Endianness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Endianness::Little => "little",
            Endianness::Big => "big",
        })
    }
}

/// Descriptor for a raw volume file.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    /// Voxel counts along x, y, z; all positive.
    pub dims: (usize, usize, usize),
    pub voxel_type: VoxelType,
    pub endianness: Endianness,
    /// Physical units per voxel along each axis; all positive.
    pub spacing: (f64, f64, f64),
}

impl VolumeMeta {
    pub fn new(dims: (usize, usize, usize), voxel_type: VoxelType) -> Self {
        VolumeMeta {
            dims,
            voxel_type,
            endianness: Endianness::Little,
            spacing: (1.0, 1.0, 1.0),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(VolumeError::BadMeta(format!(
                "dims must be positive, got {nx}x{ny}x{nz}"
            )));
        }
        let (sx, sy, sz) = self.spacing;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0)
            || !(sx.is_finite() && sy.is_finite() && sz.is_finite())
        {
            return Err(VolumeError::BadMeta(format!(
                "spacing must be positive and finite, got ({sx}, {sy}, {sz})"
            )));
        }
        Ok(())
    }

    /// Parse the sidecar descriptor format: one `key = value` pair per line,
    /// `#` comments allowed. Keys: `dims` (required), `type` (required),
    /// `endian` and `spacing` (optional).
    pub fn parse_sidecar(text: &str) -> Result<Self, VolumeError> {
        let mut dims = None;
        let mut voxel_type = None;
        let mut endianness = Endianness::Little;
        let mut spacing = (1.0, 1.0, 1.0);

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                VolumeError::BadMeta(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let value = value.trim();
            match key.trim() {
                "dims" => {
                    let v = parse_triple::<usize>(value)
                        .map_err(|e| VolumeError::BadMeta(format!("dims: {e}")))?;
                    dims = Some(v);
                }
                "type" => voxel_type = Some(VoxelType::parse(value)?),
                "endian" => endianness = Endianness::parse(value)?,
                "spacing" => {
                    spacing = parse_triple::<f64>(value)
                        .map_err(|e| VolumeError::BadMeta(format!("spacing: {e}")))?;
                }
                other => {
                    return Err(VolumeError::BadMeta(format!("unknown key {other:?}")));
                }
            }
        }

        let meta = VolumeMeta {
            dims: dims.ok_or_else(|| VolumeError::BadMeta("missing key `dims`".into()))?,
            voxel_type: voxel_type
                .ok_or_else(|| VolumeError::BadMeta("missing key `type`".into()))?,
            endianness,
            spacing,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn read_sidecar(path: &Path) -> Result<Self, VolumeError> {
        let text = fs::read_to_string(path)?;
        Self::parse_sidecar(&text)
    }

    /// Render the sidecar descriptor for this metadata.
    pub fn to_sidecar(&self) -> String {
        format!(
            "dims = {},{},{}\ntype = {}\nendian = {}\nspacing = {},{},{}\n",
            self.dims.0,
            self.dims.1,
            self.dims.2,
            self.voxel_type,
            self.endianness,
            self.spacing.0,
            self.spacing.1,
            self.spacing.2,
        )
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<(), VolumeError> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_sidecar().as_bytes())?;
        Ok(())
    }
}

/// Conventional sidecar path for a volume file: same path with a `.meta`
/// extension (`scan.raw` -> `scan.meta`).
pub fn sidecar_path(volume_path: &Path) -> PathBuf {
    volume_path.with_extension("meta")
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<(T, T, T), String>
where
    T::Err: fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let parse = |p: &str| p.parse::<T>().map_err(|e| format!("bad value {p:?}: {e}"));
    Ok((parse(parts[0])?, parse(parts[1])?, parse(parts[2])?))
}

/// A 3D scalar grid held in memory, voxels in x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub meta: VolumeMeta,
    voxels: Vec<f64>,
}

impl Volume {
    /// Build a volume from already-decoded voxels. Lengths must agree and all
    /// values must be finite.
    pub fn from_voxels(meta: VolumeMeta, voxels: Vec<f64>) -> Result<Self, VolumeError> {
        meta.validate()?;
        if voxels.len() != meta.voxel_count() {
            return Err(VolumeError::BadMeta(format!(
                "voxel count {} does not match dims {}x{}x{}",
                voxels.len(),
                meta.dims.0,
                meta.dims.1,
                meta.dims.2
            )));
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Volume { meta, voxels })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.meta.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.meta.spacing
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    /// Linear index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let (nx, ny, _) = self.meta.dims;
        (z * ny + y) * nx + x
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.voxels[self.index(x, y, z)]
    }
}

/// Load a raw volume file described by `meta`.
///
/// The file length must equal `nx*ny*nz * bytes_per_voxel`; voxels are
/// decoded per the declared type and byte order and widened to `f64`.
pub fn load_volume(data_path: &Path, meta: &VolumeMeta) -> Result<Volume, VolumeError> {
    meta.validate()?;
    let bytes = fs::read(data_path)?;
    decode_volume(&bytes, meta)
}

/// Decode an in-memory raw voxel buffer. Same contract as [`load_volume`].
pub fn decode_volume(bytes: &[u8], meta: &VolumeMeta) -> Result<Volume, VolumeError> {
    meta.validate()?;
    let count = meta.voxel_count();
    let expected = count as u64 * meta.voxel_type.bytes_per_voxel() as u64;
    if bytes.len() as u64 != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            actual: bytes.len() as u64,
            nx: meta.dims.0,
            ny: meta.dims.1,
            nz: meta.dims.2,
            voxel_type: meta.voxel_type,
        });
    }

    let voxels: Vec<f64> = match (meta.voxel_type, meta.endianness) {
        (VoxelType::U8, _) => bytes.iter().map(|&b| f64::from(b)).collect(),
        (VoxelType::U16, Endianness::Little) => bytes
            .chunks_exact(2)
            .map(|c| f64::from(LittleEndian::read_u16(c)))
            .collect(),
        (VoxelType::U16, Endianness::Big) => bytes
            .chunks_exact(2)
            .map(|c| f64::from(BigEndian::read_u16(c)))
            .collect(),
        (VoxelType::I16, Endianness::Little) => bytes
            .chunks_exact(2)
            .map(|c| f64::from(LittleEndian::read_i16(c)))
            .collect(),
        (VoxelType::I16, Endianness::Big) => bytes
            .chunks_exact(2)
            .map(|c| f64::from(BigEndian::read_i16(c)))
            .collect(),
        (VoxelType::F32, Endianness::Little) => bytes
            .chunks_exact(4)
            .map(|c| f64::from(LittleEndian::read_f32(c)))
            .collect(),
        (VoxelType::F32, Endianness::Big) => bytes
            .chunks_exact(4)
            .map(|c| f64::from(BigEndian::read_f32(c)))
            .collect(),
    };

    Volume::from_voxels(meta.clone(), voxels)
}

/// Write a volume as a raw file plus sidecar descriptor.
///
/// Values are encoded per `meta.voxel_type`; integer types round to nearest
/// and saturate at the type bounds.
pub fn write_volume(data_path: &Path, volume: &Volume) -> Result<(), VolumeError> {
    let meta = &volume.meta;
    let mut bytes = Vec::with_capacity(meta.voxel_count() * meta.voxel_type.bytes_per_voxel());
    for &v in volume.voxels() {
        match (meta.voxel_type, meta.endianness) {
            (VoxelType::U8, _) => bytes.push(v.round().clamp(0.0, 255.0) as u8),
            (VoxelType::U16, e) => {
                let x = v.round().clamp(0.0, 65535.0) as u16;
                push_u16(&mut bytes, x, e);
            }
            (VoxelType::I16, e) => {
                let x = v.round().clamp(-32768.0, 32767.0) as i16;
                push_u16(&mut bytes, x as u16, e);
            }
            (VoxelType::F32, e) => {
                let x = (v as f32).to_bits();
                match e {
                    Endianness::Little => bytes.extend_from_slice(&x.to_le_bytes()),
                    Endianness::Big => bytes.extend_from_slice(&x.to_be_bytes()),
                }
            }
        }
    }
    fs::write(data_path, &bytes)?;
    meta.write_sidecar(&sidecar_path(data_path))?;
    Ok(())
}

fn push_u16(out: &mut Vec<u8>, x: u16, e: Endianness) {
    match e {
        Endianness::Little => out.extend_from_slice(&x.to_le_bytes()),
        Endianness::Big => out.extend_from_slice(&x.to_be_bytes()),
    }
}

/// Minimum and maximum voxel value of a volume.
pub fn intensity_range(volume: &Volume) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in volume.voxels() {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    (lo, hi)
}

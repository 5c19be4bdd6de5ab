//! Reading and writing of a minimal single-file NIfTI-1 subset, plus atlas
//! label volumes and their one-hot expansion.
//!
//! Only uncompressed `.nii` files with `dim[0] == 3` and one of the
//! datatypes `uint8`, `int16` or `float32` are accepted. Orientation and
//! scaling fields are ignored on read; every volume is assumed to live on the
//! same voxel grid as the atlas.
//!
//! Voxel data is kept in `f64` and laid out with W varying fastest, then H,
//! then D. NIfTI stores `dim[1]` (x) fastest, so `W = dim[1]`, `H = dim[2]`
//! and `D = dim[3]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

/// Size of the fixed NIfTI-1 header.
pub const HEADER_SIZE: usize = 348;
/// Single-file magic (`.nii`).
pub const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
/// Two-file magic (`.hdr`/`.img`), rejected.
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";
/// Offset at which payload starts in files written by this crate.
pub const DEFAULT_VOX_OFFSET: usize = 352;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}: only single-file NIfTI-1 (n+1) is supported")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0} (expected 2, 4 or 16)")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality dim[0]={0} (expected 3)")]
    UnsupportedDimensionality(i16),
    #[error("header truncated: {0} bytes, need {HEADER_SIZE}")]
    TruncatedHeader(usize),
    #[error("sizeof_hdr is neither 348 nor byte-swapped 348")]
    BadHeaderSize,
    #[error("vox_offset {0} is smaller than the header size")]
    BadVoxOffset(f32),
    #[error("invalid dimensions {0:?}: every axis must be >= 1")]
    InvalidDims([i64; 3]),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("value {value} at voxel {index} is not representable as {datatype:?}")]
    ValueOutOfRange {
        value: f64,
        index: usize,
        datatype: Datatype,
    },
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("data length {found} does not match dims {dims:?}")]
    LengthMismatch {
        dims: (usize, usize, usize),
        found: usize,
    },
    #[error("atlas label {label} at voxel {index} is outside 0..={regions}")]
    InvalidLabel {
        label: f64,
        index: usize,
        regions: usize,
    },
    #[error("atlas region {0} has no voxels")]
    EmptyRegion(usize),
    #[error("atlas must have at least one region")]
    NoRegions,
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }

    fn bitpix(self) -> i16 {
        8 * self.bytes_per_voxel() as i16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    /// (D, H, W) voxel counts.
    pub dims: (usize, usize, usize),
    pub datatype: Datatype,
    pub vox_offset: usize,
    pub endianness: Endianness,
    /// (dx, dy, dz) in millimetres, taken from `pixdim[1..=3]`.
    pub voxel_size: (f64, f64, f64),
}

impl VolumeHeader {
    pub fn new(dims: (usize, usize, usize)) -> Self {
        VolumeHeader {
            dims,
            datatype: Datatype::Float32,
            vox_offset: DEFAULT_VOX_OFFSET,
            endianness: Endianness::Little,
            voxel_size: (1.0, 1.0, 1.0),
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endianness,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.buf[off..off + N]);
        b
    }

    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endianness::Little => i16::from_le_bytes(self.bytes(off)),
            Endianness::Big => i16::from_be_bytes(self.bytes(off)),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endianness::Little => f32::from_le_bytes(self.bytes(off)),
            Endianness::Big => f32::from_be_bytes(self.bytes(off)),
        }
    }
}

/// Parses the fixed 348-byte header. Endianness is detected from `sizeof_hdr`.
pub fn parse_header(bytes: &[u8]) -> Result<VolumeHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(VolumeError::TruncatedHeader(bytes.len()));
    }
    let sizeof_hdr: [u8; 4] = bytes[0..4].try_into().unwrap();
    let endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endianness::Little
    } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endianness::Big
    } else {
        return Err(VolumeError::BadHeaderSize);
    };
    let r = Reader { buf: bytes, endian };

    let magic: [u8; 4] = r.bytes(OFF_MAGIC);
    if &magic != MAGIC_SINGLE {
        return Err(VolumeError::BadMagic(magic));
    }

    let ndim = r.i16(OFF_DIM);
    if ndim != 3 {
        return Err(VolumeError::UnsupportedDimensionality(ndim));
    }
    let x = r.i16(OFF_DIM + 2) as i64;
    let y = r.i16(OFF_DIM + 4) as i64;
    let z = r.i16(OFF_DIM + 6) as i64;
    if x < 1 || y < 1 || z < 1 {
        return Err(VolumeError::InvalidDims([z, y, x]));
    }

    let datatype = Datatype::from_code(r.i16(OFF_DATATYPE))?;

    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 {
        return Err(VolumeError::BadVoxOffset(vox_offset));
    }

    let voxel_size = (
        r.f32(OFF_PIXDIM + 4) as f64,
        r.f32(OFF_PIXDIM + 8) as f64,
        r.f32(OFF_PIXDIM + 12) as f64,
    );

    Ok(VolumeHeader {
        dims: (z as usize, y as usize, x as usize),
        datatype,
        vox_offset: vox_offset as usize,
        endianness: endian,
        voxel_size,
    })
}

/// Serializes a header into 348 little-endian bytes.
pub fn encode_header(header: &VolumeHeader) -> Vec<u8> {
    let mut buf = vec![0u8; HEADER_SIZE];
    let mut put = |off: usize, bytes: &[u8]| buf[off..off + bytes.len()].copy_from_slice(bytes);
    put(0, &(HEADER_SIZE as i32).to_le_bytes());
    let (d, h, w) = header.dims;
    let dim: [i16; 8] = [3, w as i16, h as i16, d as i16, 1, 1, 1, 1];
    for (i, v) in dim.iter().enumerate() {
        put(OFF_DIM + 2 * i, &v.to_le_bytes());
    }
    put(OFF_DATATYPE, &header.datatype.code().to_le_bytes());
    put(OFF_BITPIX, &header.datatype.bitpix().to_le_bytes());
    let (dx, dy, dz) = header.voxel_size;
    let pixdim: [f32; 8] = [1.0, dx as f32, dy as f32, dz as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, v) in pixdim.iter().enumerate() {
        put(OFF_PIXDIM + 4 * i, &v.to_le_bytes());
    }
    put(OFF_VOX_OFFSET, &(header.vox_offset as f32).to_le_bytes());
    put(OFF_SCL_SLOPE, &1.0f32.to_le_bytes());
    put(OFF_MAGIC, MAGIC_SINGLE);
    buf
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub header: VolumeHeader,
    data: Vec<f64>,
}

impl Volume3D {
    /// Builds a volume with a default float32 header.
    pub fn new(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        Self::with_header(VolumeHeader::new(dims), data)
    }

    pub fn with_header(header: VolumeHeader, data: Vec<f64>) -> Result<Self> {
        let (d, h, w) = header.dims;
        if d == 0 || h == 0 || w == 0 {
            return Err(VolumeError::InvalidDims([d as i64, h as i64, w as i64]));
        }
        if data.len() != header.voxel_count() {
            return Err(VolumeError::LengthMismatch {
                dims: header.dims,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite(i));
        }
        Ok(Volume3D { header, data })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Volume3D {
            header: VolumeHeader::new(dims),
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.header.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        let (_, hh, ww) = self.header.dims;
        (d * hh + h) * ww + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(d, h, w)]
    }
}

fn decode_payload(header: &VolumeHeader, payload: &[u8]) -> Result<Vec<f64>> {
    let n = header.voxel_count();
    let width = header.datatype.bytes_per_voxel();
    let expected = n * width;
    if payload.len() < expected {
        return Err(VolumeError::TruncatedData {
            expected,
            found: payload.len(),
        });
    }
    let big = header.endianness == Endianness::Big;
    let chunks = payload[..expected].chunks_exact(width);
    let data: Vec<f64> = match header.datatype {
        Datatype::Uint8 => chunks.map(|c| c[0] as f64).collect(),
        Datatype::Int16 => chunks
            .map(|c| {
                let b = [c[0], c[1]];
                (if big {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                }) as f64
            })
            .collect(),
        Datatype::Float32 => chunks
            .map(|c| {
                let b = [c[0], c[1], c[2], c[3]];
                (if big {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }) as f64
            })
            .collect(),
    };
    Ok(data)
}

/// Decodes a complete in-memory `.nii` file.
pub fn decode_volume(bytes: &[u8]) -> Result<Volume3D> {
    let header = parse_header(bytes)?;
    let payload = bytes.get(header.vox_offset..).unwrap_or(&[]);
    let data = decode_payload(&header, payload)?;
    Volume3D::with_header(header, data)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let bytes = fs::read(path)?;
    decode_volume(&bytes)
}

/// Encodes `volume` as a little-endian `.nii` byte stream with the given datatype.
pub fn encode_volume(volume: &Volume3D, datatype: Datatype) -> Result<Vec<u8>> {
    let mut header = volume.header;
    header.datatype = datatype;
    header.endianness = Endianness::Little;
    header.vox_offset = header.vox_offset.max(DEFAULT_VOX_OFFSET);

    let n = volume.data.len();
    let mut out = encode_header(&header);
    out.resize(header.vox_offset, 0);
    out.reserve(n * datatype.bytes_per_voxel());

    let out_of_range = |index: usize, value: f64| VolumeError::ValueOutOfRange {
        value,
        index,
        datatype,
    };
    for (i, &v) in volume.data.iter().enumerate() {
        match datatype {
            Datatype::Uint8 => {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(out_of_range(i, v));
                }
                out.push(v as u8);
            }
            Datatype::Int16 => {
                if v.fract() != 0.0 || !(i16::MIN as f64..=i16::MAX as f64).contains(&v) {
                    return Err(out_of_range(i, v));
                }
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
            Datatype::Float32 => {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(out_of_range(i, v));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_volume(volume: &Volume3D, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let bytes = encode_volume(volume, datatype)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Integer region labels on the volume grid. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasVolume {
    dims: (usize, usize, usize),
    labels: Vec<u16>,
    regions: usize,
}

impl AtlasVolume {
    /// Validates that labels lie in `0..=regions` and every region `1..=regions` is present.
    pub fn new(dims: (usize, usize, usize), labels: Vec<u16>, regions: usize) -> Result<Self> {
        if regions == 0 {
            return Err(VolumeError::NoRegions);
        }
        if labels.len() != dims.0 * dims.1 * dims.2 {
            return Err(VolumeError::LengthMismatch {
                dims,
                found: labels.len(),
            });
        }
        let mut counts = vec![0usize; regions + 1];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l > regions {
                return Err(VolumeError::InvalidLabel {
                    label: l as f64,
                    index: i,
                    regions,
                });
            }
            counts[l] += 1;
        }
        if let Some(r) = (1..=regions).find(|&r| counts[r] == 0) {
            return Err(VolumeError::EmptyRegion(r));
        }
        Ok(AtlasVolume {
            dims,
            labels,
            regions,
        })
    }

    /// Interprets a loaded volume as an atlas. With `regions == None` the
    /// region count is the largest label present.
    pub fn from_volume(volume: &Volume3D, regions: Option<usize>) -> Result<Self> {
        let max_label = volume.data().iter().fold(0.0f64, |m, &v| m.max(v));
        let regions = regions.unwrap_or(max_label as usize);
        let mut labels = Vec::with_capacity(volume.data().len());
        for (i, &v) in volume.data().iter().enumerate() {
            if v.fract() != 0.0 || v < 0.0 || v > regions as f64 {
                return Err(VolumeError::InvalidLabel {
                    label: v,
                    index: i,
                    regions,
                });
            }
            labels.push(v as u16);
        }
        Self::new(volume.dims(), labels, regions)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn to_volume(&self) -> Volume3D {
        let mut v = Volume3D::zeros(self.dims);
        v.header.datatype = Datatype::Int16;
        v.data = self.labels.iter().map(|&l| l as f64).collect();
        v
    }
}

pub fn read_atlas(path: impl AsRef<Path>, regions: Option<usize>) -> Result<AtlasVolume> {
    AtlasVolume::from_volume(&read_volume(path)?, regions)
}

pub fn write_atlas(atlas: &AtlasVolume, path: impl AsRef<Path>) -> Result<()> {
    let dt = if atlas.regions <= 255 {
        Datatype::Uint8
    } else {
        Datatype::Int16
    };
    write_volume(&atlas.to_volume(), path, dt)
}

/// R binary channels over the voxel grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotAtlas {
    regions: usize,
    voxels: usize,
    data: Vec<u8>,
}

impl OneHotAtlas {
    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    /// Channel for region `r` (1-based).
    pub fn channel(&self, r: usize) -> &[u8] {
        let start = (r - 1) * self.voxels;
        &self.data[start..start + self.voxels]
    }

    pub fn get(&self, r: usize, voxel: usize) -> u8 {
        self.channel(r)[voxel]
    }
}

pub fn onehot_atlas(atlas: &AtlasVolume) -> OneHotAtlas {
    let voxels = atlas.labels.len();
    let mut data = vec![0u8; atlas.regions * voxels];
    for (v, &l) in atlas.labels.iter().enumerate() {
        if l > 0 {
            data[(l as usize - 1) * voxels + v] = 1;
        }
    }
    OneHotAtlas {
        regions: atlas.regions,
        voxels,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_le() -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [3i16, 16, 16, 16, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&16i16.to_le_bytes());
        b[72..74].copy_from_slice(&32i16.to_le_bytes());
        for i in 0..4 {
            b[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b
    }

    fn swap_fields(le: &[u8]) -> Vec<u8> {
        let mut b = le.to_vec();
        b[0..4].reverse();
        for i in 0..8 {
            b[40 + 2 * i..42 + 2 * i].reverse();
        }
        b[70..72].reverse();
        b[72..74].reverse();
        for i in 0..8 {
            b[76 + 4 * i..80 + 4 * i].reverse();
        }
        b[108..112].reverse();
        b
    }

    #[test]
    fn fixture_header_offsets() {
        let b = fixture_le();
        // hex-level check of the fixture before parsing it
        assert_eq!(&b[0..4], &[0x5c, 0x01, 0x00, 0x00]);
        assert_eq!(&b[40..48], &[3, 0, 16, 0, 16, 0, 16, 0]);
        assert_eq!(&b[70..72], &[16, 0]);
        assert_eq!(&b[108..112], &[0x00, 0x00, 0xb0, 0x43]);
        let h = parse_header(&b).unwrap();
        assert_eq!(h.dims, (16, 16, 16));
        assert_eq!(h.datatype, Datatype::Float32);
        assert_eq!(h.vox_offset, 352);
        assert_eq!(h.endianness, Endianness::Little);
    }

    #[test]
    fn byte_swapped_header() {
        let le = parse_header(&fixture_le()).unwrap();
        let be = parse_header(&swap_fields(&fixture_le())).unwrap();
        assert_eq!(be.endianness, Endianness::Big);
        assert_eq!(
            VolumeHeader {
                endianness: Endianness::Little,
                ..be
            },
            le
        );
    }

    #[test]
    fn rejects_pair_magic() {
        let mut b = fixture_le();
        b[344..348].copy_from_slice(MAGIC_PAIR);
        assert!(matches!(parse_header(&b), Err(VolumeError::BadMagic(_))));
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            parse_header(&[0u8; 100]),
            Err(VolumeError::TruncatedHeader(100))
        ));
        let mut b = fixture_le();
        b[40..42].copy_from_slice(&4i16.to_le_bytes());
        assert!(matches!(
            parse_header(&b),
            Err(VolumeError::UnsupportedDimensionality(4))
        ));
        let mut b = fixture_le();
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(
            parse_header(&b),
            Err(VolumeError::UnsupportedDatatype(64))
        ));
    }

    #[test]
    fn truncated_payload() {
        let mut b = fixture_le();
        b.extend_from_slice(&[0u8; 100]);
        assert!(matches!(
            decode_volume(&b),
            Err(VolumeError::TruncatedData {
                expected: 16384,
                found: 100
            })
        ));
    }

    #[test]
    fn uint8_payload_converts_exactly() {
        let v = Volume3D::new((2, 3, 4), vec![255.0; 24]).unwrap();
        let bytes = encode_volume(&v, Datatype::Uint8).unwrap();
        let back = decode_volume(&bytes).unwrap();
        assert!(back.data().iter().all(|&x| x == 255.0));
        assert_eq!(back.header.datatype, Datatype::Uint8);
    }

    #[test]
    fn out_of_range_uint8() {
        let mut data = vec![0.0; 8];
        data[3] = 300.0;
        let v = Volume3D::new((2, 2, 2), data).unwrap();
        assert!(matches!(
            encode_volume(&v, Datatype::Uint8),
            Err(VolumeError::ValueOutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn zero_volume_file_size() {
        let v = Volume3D::zeros((4, 4, 4));
        let bytes = encode_volume(&v, Datatype::Float32).unwrap();
        assert_eq!(bytes.len(), 348 + 4 + 64 * 4);
        let h = parse_header(&bytes).unwrap();
        assert_eq!(h.dims, (4, 4, 4));
        assert_eq!(h.datatype, Datatype::Float32);
    }

    #[test]
    fn non_cubic_axis_order() {
        // W varies fastest: voxel (d=1, h=0, w=2) sits at index 1*3*4 + 2.
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let v = Volume3D::new((2, 3, 4), data).unwrap();
        let back = decode_volume(&encode_volume(&v, Datatype::Int16).unwrap()).unwrap();
        assert_eq!(back.dims(), (2, 3, 4));
        assert_eq!(back.get(1, 0, 2), 14.0);
    }

    #[test]
    fn onehot_background_and_label() {
        let mut labels = vec![1u16; 8];
        labels[0] = 0;
        labels[5] = 3;
        labels[6] = 2;
        let atlas = AtlasVolume::new((2, 2, 2), labels, 3).unwrap();
        let oh = onehot_atlas(&atlas);
        assert!((1..=3).all(|r| oh.get(r, 0) == 0));
        assert_eq!(oh.get(3, 5), 1);
        assert_eq!(oh.get(1, 5), 0);
        assert_eq!(oh.get(2, 5), 0);
    }

    #[test]
    fn onehot_label_three_of_48() {
        let mut labels: Vec<u16> = (1..=48).collect();
        labels.extend(std::iter::repeat_n(3, 16));
        let atlas = AtlasVolume::new((4, 4, 4), labels, 48).unwrap();
        let oh = onehot_atlas(&atlas);
        let voxel = 2; // label 3
        assert_eq!(oh.get(3, voxel), 1);
        assert_eq!((1..=48).map(|r| oh.get(r, voxel) as u32).sum::<u32>(), 1);
    }

    #[test]
    fn atlas_validation() {
        assert!(matches!(
            AtlasVolume::new((1, 1, 2), vec![1, 1], 2),
            Err(VolumeError::EmptyRegion(2))
        ));
        assert!(matches!(
            AtlasVolume::new((1, 1, 2), vec![1, 5], 2),
            Err(VolumeError::InvalidLabel { .. })
        ));
        let v = Volume3D::new((1, 1, 2), vec![1.0, 1.5]).unwrap();
        assert!(AtlasVolume::from_volume(&v, None).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Volume3D::new((1, 1, 2), vec![0.0, f64::NAN]),
            Err(VolumeError::NonFinite(1))
        ));
    }
}

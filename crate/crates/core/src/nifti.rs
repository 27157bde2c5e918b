//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only 3-D volumes with `int16` or `float32` voxels are accepted. Both byte
//! orders are read (detected from the 348 header-size field); files are
//! written in the byte order recorded in the header.

use std::io::{Read, Write};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::geometry::Affine;
use crate::volume::{Volume, VolumeError, VoxelData};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIR: [u8; 4] = *b"ni1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const CAL_MAX: usize = 124;
    pub const CAL_MIN: usize = 128;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NiftiError {
    #[error("not a NIfTI-1 single file: {0}")]
    BadMagic(String),
    #[error("unsupported datatype code {0} (only int16 and float32)")]
    UnsupportedDatatype(i16),
    #[error("unsupported NIfTI layout: {0}")]
    UnsupportedLayout(String),
    #[error("truncated data: need {needed} bytes, have {available}")]
    TruncatedData { needed: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("gzip: {0}")]
    Gzip(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Endianness {
    #[default]
    Little,
    Big,
}

/// The NIfTI-1 header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub endianness: Endianness,
    pub dim: [i16; 8],
    pub intent_code: i16,
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub cal_max: f32,
    pub cal_min: f32,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        Self {
            endianness: Endianness::Little,
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            intent_code: 0,
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim: [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            xyzt_units: 2, // mm
            cal_max: 0.0,
            cal_min: 0.0,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }
}

impl NiftiHeader {
    /// Header describing `volume`, with its affine stored as the sform.
    pub fn for_volume(volume: &Volume) -> Self {
        let dims = volume.dims();
        let a = volume.affine().0;
        let spacing: [f64; 3] =
            std::array::from_fn(|c| (a[0][c].powi(2) + a[1][c].powi(2) + a[2][c].powi(2)).sqrt());
        let (datatype, bitpix) = match volume.data() {
            VoxelData::I16(_) => (DT_INT16, 16),
            VoxelData::F32(_) => (DT_FLOAT32, 32),
        };
        Self {
            dim: [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1],
            datatype,
            bitpix,
            pixdim: [
                1.0,
                spacing[0] as f32,
                spacing[1] as f32,
                spacing[2] as f32,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
            sform_code: 1,
            srow: std::array::from_fn(|r| std::array::from_fn(|c| a[r][c] as f32)),
            ..Self::default()
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.dim[1].max(0) as usize,
            self.dim[2].max(0) as usize,
            self.dim[3].max(0) as usize,
        ]
    }

    /// Voxel-to-RAS affine: sform if set, else qform, else pixdim diagonal.
    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let rows = self.srow.map(|r| r.map(f64::from));
            Affine::from_rows(rows)
        } else if self.qform_code > 0 {
            self.qform_affine()
        } else {
            Affine::diag([
                f64::from(self.pixdim[1]),
                f64::from(self.pixdim[2]),
                f64::from(self.pixdim[3]),
            ])
        }
    }

    /// Quaternion-based affine (NIfTI "method 2").
    pub fn qform_affine(&self) -> Affine {
        let [b, c, d] = self.quatern.map(f64::from);
        let mut a2 = 1.0 - (b * b + c * c + d * d);
        let (mut b, mut c, mut d) = (b, c, d);
        if a2 < 1.0e-7 {
            // quaternion rounding pushed |bcd| past 1; treat as a 180 degree turn
            let norm = (b * b + c * c + d * d).sqrt();
            b /= norm;
            c /= norm;
            d /= norm;
            a2 = 0.0;
        }
        let a = a2.sqrt();
        let spacing = |v: f32| if v > 0.0 { f64::from(v) } else { 1.0 };
        let dx = spacing(self.pixdim[1]);
        let dy = spacing(self.pixdim[2]);
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let dz = spacing(self.pixdim[3]) * qfac;
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let [ox, oy, oz] = self.qoffset.map(f64::from);
        Affine::from_rows([
            [r[0][0] * dx, r[0][1] * dy, r[0][2] * dz, ox],
            [r[1][0] * dx, r[1][1] * dy, r[1][2] * dz, oy],
            [r[2][0] * dx, r[2][1] * dy, r[2][2] * dz, oz],
        ])
    }

    fn scaling(&self) -> Option<(f64, f64)> {
        let slope = f64::from(self.scl_slope);
        let inter = f64::from(self.scl_inter);
        if slope == 0.0 || !slope.is_finite() || !inter.is_finite() {
            return None;
        }
        if slope == 1.0 && inter == 0.0 {
            return None;
        }
        Some((slope, inter))
    }
}

/// Outcome of a load, with the count of non-finite voxels that were replaced.
#[derive(Debug, Clone)]
pub struct LoadedNifti {
    pub volume: Volume,
    pub header: NiftiHeader,
    pub nonfinite_replaced: usize,
}

struct Reader<'a> {
    buf: &'a [u8],
    big: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.buf[off], self.buf[off + 1]];
        if self.big {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.big {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.buf[off..off + 4].try_into().unwrap();
        if self.big {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>, NiftiError> {
    let mut out = Vec::new();
    MultiGzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| NiftiError::Gzip(e.to_string()))?;
    Ok(out)
}

/// Parse just the header.
pub fn read_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::TruncatedData {
            needed: HEADER_SIZE,
            available: bytes.len(),
        });
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        (540, _) | (_, 540) => {
            return Err(NiftiError::UnsupportedLayout("NIfTI-2 header".into()));
        }
        _ => return Err(NiftiError::BadMagic(format!("sizeof_hdr = {le}"))),
    };
    let r = Reader { buf: bytes, big };
    debug_assert_eq!(r.i32(offsets::SIZEOF_HDR), 348);
    let magic: [u8; 4] = bytes[offsets::MAGIC..offsets::MAGIC + 4].try_into().unwrap();
    if magic == MAGIC_PAIR {
        return Err(NiftiError::UnsupportedLayout("separate .hdr/.img pair".into()));
    }
    if magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(format!("magic {magic:?}")));
    }

    let dim: [i16; 8] = std::array::from_fn(|n| r.i16(offsets::DIM + 2 * n));
    let pixdim: [f32; 8] = std::array::from_fn(|n| r.f32(offsets::PIXDIM + 4 * n));
    let descrip_raw = &bytes[offsets::DESCRIP..offsets::DESCRIP + 80];
    let end = descrip_raw.iter().position(|&c| c == 0).unwrap_or(80);
    let descrip = String::from_utf8_lossy(&descrip_raw[..end]).into_owned();
    Ok(NiftiHeader {
        endianness: if big { Endianness::Big } else { Endianness::Little },
        dim,
        intent_code: r.i16(offsets::INTENT_CODE),
        datatype: r.i16(offsets::DATATYPE),
        bitpix: r.i16(offsets::BITPIX),
        pixdim,
        vox_offset: r.f32(offsets::VOX_OFFSET),
        scl_slope: r.f32(offsets::SCL_SLOPE),
        scl_inter: r.f32(offsets::SCL_INTER),
        xyzt_units: bytes[offsets::XYZT_UNITS],
        cal_max: r.f32(offsets::CAL_MAX),
        cal_min: r.f32(offsets::CAL_MIN),
        descrip,
        qform_code: r.i16(offsets::QFORM_CODE),
        sform_code: r.i16(offsets::SFORM_CODE),
        quatern: std::array::from_fn(|n| r.f32(offsets::QUATERN_B + 4 * n)),
        qoffset: std::array::from_fn(|n| r.f32(offsets::QOFFSET_X + 4 * n)),
        srow: std::array::from_fn(|row| std::array::from_fn(|c| r.f32(offsets::SROW_X + 16 * row + 4 * c))),
    })
}

/// Parse the header of a plain or gzip stream, inflating only its first
/// bytes. Lets callers check dims before paying for the payload.
pub fn peek_header(bytes: &[u8]) -> Result<NiftiHeader, NiftiError> {
    if !is_gzip(bytes) {
        return read_header(bytes);
    }
    let mut head = Vec::with_capacity(HEADER_SIZE);
    MultiGzDecoder::new(bytes)
        .take(HEADER_SIZE as u64)
        .read_to_end(&mut head)
        .map_err(|e| NiftiError::Gzip(e.to_string()))?;
    read_header(&head)
}

/// Read a volume from NIfTI bytes (plain or gzip).
pub fn read_nifti(bytes: &[u8]) -> Result<(Volume, NiftiHeader), NiftiError> {
    let loaded = read_nifti_report(bytes)?;
    Ok((loaded.volume, loaded.header))
}

/// [`read_nifti`] plus the number of NaN/Inf voxels replaced by the minimum.
pub fn read_nifti_report(bytes: &[u8]) -> Result<LoadedNifti, NiftiError> {
    let owned;
    let bytes = if is_gzip(bytes) {
        owned = gunzip(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    let header = read_header(bytes)?;

    let ndim = header.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::BadMagic(format!("dim[0] = {ndim}")));
    }
    if ndim > 3 && header.dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(NiftiError::UnsupportedLayout(format!(
            "{ndim}-D volume with dims {:?}",
            &header.dim[1..=ndim as usize]
        )));
    }
    let dims: [usize; 3] = std::array::from_fn(|a| {
        if (a + 1) as i16 <= ndim {
            header.dim[a + 1].max(0) as usize
        } else {
            1
        }
    });
    if dims.contains(&0) {
        return Err(NiftiError::DimMismatch(format!("zero extent {dims:?}")));
    }
    let elem = match header.datatype {
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let n: usize = dims.iter().product();
    let start = header.vox_offset.max(HEADER_SIZE as f32) as usize;
    let needed = start + n * elem;
    if bytes.len() < needed {
        return Err(NiftiError::TruncatedData {
            needed,
            available: bytes.len(),
        });
    }
    let raw = &bytes[start..needed];
    let big = header.endianness == Endianness::Big;
    let mut data = match header.datatype {
        DT_INT16 => VoxelData::I16(
            raw.chunks_exact(2)
                .map(|c| {
                    let b = [c[0], c[1]];
                    if big {
                        i16::from_be_bytes(b)
                    } else {
                        i16::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
        _ => VoxelData::F32(
            raw.chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    if big {
                        f32::from_be_bytes(b)
                    } else {
                        f32::from_le_bytes(b)
                    }
                })
                .collect(),
        ),
    };

    if let Some((slope, inter)) = header.scaling() {
        let scaled = (0..data.len())
            .map(|i| (data.get(i) * slope + inter) as f32)
            .collect();
        data = VoxelData::F32(scaled);
    }

    let mut nonfinite_replaced = 0;
    if let VoxelData::F32(values) = &mut data {
        let min = values
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(f32::INFINITY, f32::min);
        let fill = if min.is_finite() { min } else { 0.0 };
        for v in values.iter_mut().filter(|v| !v.is_finite()) {
            *v = fill;
            nonfinite_replaced += 1;
        }
        if nonfinite_replaced > 0 {
            tracing::warn!(
                count = nonfinite_replaced,
                "replaced non-finite voxels with volume minimum"
            );
        }
    }

    let volume = Volume::new(dims, data, header.affine())?;
    Ok(LoadedNifti {
        volume,
        header,
        nonfinite_replaced,
    })
}

/// Serialize `volume` using `header` for the descriptive fields.
///
/// The voxel datatype follows the volume's element type and the volume's
/// affine is always written as the sform (code kept from `header` when set,
/// otherwise 1). Loaded values are already scaled, so `scl_slope` is written
/// as 0 (no scaling).
pub fn write_nifti(volume: &Volume, header: &NiftiHeader) -> Result<Vec<u8>, NiftiError> {
    let hdims = header.dims();
    if hdims != volume.dims() || hdims.contains(&0) {
        return Err(NiftiError::DimMismatch(format!(
            "header dims {hdims:?} vs volume dims {:?}",
            volume.dims()
        )));
    }
    if volume.dims().iter().any(|&d| d > i16::MAX as usize) {
        return Err(NiftiError::DimMismatch(format!(
            "dims {:?} exceed the NIfTI-1 limit",
            volume.dims()
        )));
    }
    let big = header.endianness == Endianness::Big;
    let mut buf = vec![0u8; DEFAULT_VOX_OFFSET + volume.len() * volume.element_type().byte_size()];
    let mut w = Writer { buf: &mut buf, big };

    let (datatype, bitpix) = match volume.data() {
        VoxelData::I16(_) => (DT_INT16, 16),
        VoxelData::F32(_) => (DT_FLOAT32, 32),
    };
    let affine = volume.affine().0;

    w.i32(offsets::SIZEOF_HDR, HEADER_SIZE as i32);
    let mut dim = header.dim;
    dim[0] = 3;
    for (d, slot) in dim[1..4].iter_mut().zip(volume.dims()) {
        *d = slot as i16;
    }
    for d in &mut dim[4..] {
        *d = 1;
    }
    for (n, d) in dim.iter().enumerate() {
        w.i16(offsets::DIM + 2 * n, *d);
    }
    w.i16(offsets::INTENT_CODE, header.intent_code);
    w.i16(offsets::DATATYPE, datatype);
    w.i16(offsets::BITPIX, bitpix);
    for (n, p) in header.pixdim.iter().enumerate() {
        w.f32(offsets::PIXDIM + 4 * n, *p);
    }
    w.f32(offsets::VOX_OFFSET, DEFAULT_VOX_OFFSET as f32);
    w.f32(offsets::SCL_SLOPE, 0.0);
    w.f32(offsets::SCL_INTER, 0.0);
    w.buf[offsets::XYZT_UNITS] = header.xyzt_units;
    w.f32(offsets::CAL_MAX, header.cal_max);
    w.f32(offsets::CAL_MIN, header.cal_min);
    let descrip = header.descrip.as_bytes();
    let len = descrip.len().min(79);
    w.buf[offsets::DESCRIP..offsets::DESCRIP + len].copy_from_slice(&descrip[..len]);
    w.i16(offsets::QFORM_CODE, header.qform_code);
    w.i16(
        offsets::SFORM_CODE,
        if header.sform_code > 0 {
            header.sform_code
        } else {
            1
        },
    );
    for n in 0..3 {
        w.f32(offsets::QUATERN_B + 4 * n, header.quatern[n]);
        w.f32(offsets::QOFFSET_X + 4 * n, header.qoffset[n]);
    }
    for (row, values) in affine.iter().take(3).enumerate() {
        for (c, v) in values.iter().enumerate() {
            w.f32(offsets::SROW_X + 16 * row + 4 * c, *v as f32);
        }
    }
    w.buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC_SINGLE);

    let body = &mut buf[DEFAULT_VOX_OFFSET..];
    match volume.data() {
        VoxelData::I16(v) => {
            for (dst, x) in body.chunks_exact_mut(2).zip(v) {
                dst.copy_from_slice(&if big { x.to_be_bytes() } else { x.to_le_bytes() });
            }
        }
        VoxelData::F32(v) => {
            for (dst, x) in body.chunks_exact_mut(4).zip(v) {
                dst.copy_from_slice(&if big { x.to_be_bytes() } else { x.to_le_bytes() });
            }
        }
    }
    Ok(buf)
}

/// [`write_nifti`] followed by gzip compression.
pub fn write_nifti_gz(volume: &Volume, header: &NiftiHeader) -> Result<Vec<u8>, NiftiError> {
    let raw = write_nifti(volume, header)?;
    let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
    enc.write_all(&raw)
        .and_then(|_| enc.finish())
        .map_err(|e| NiftiError::Gzip(e.to_string()))
}

struct Writer<'a> {
    buf: &'a mut [u8],
    big: bool,
}

impl Writer<'_> {
    fn i16(&mut self, off: usize, v: i16) {
        let b = if self.big {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        self.buf[off..off + 2].copy_from_slice(&b);
    }

    fn i32(&mut self, off: usize, v: i32) {
        let b = if self.big {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        self.buf[off..off + 4].copy_from_slice(&b);
    }

    fn f32(&mut self, off: usize, v: f32) {
        let b = if self.big {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        self.buf[off..off + 4].copy_from_slice(&b);
    }
}

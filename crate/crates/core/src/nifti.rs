//! Minimal NIfTI-1 reader and writer.
//!
//! Scope is deliberately narrow: single-file `.nii` / `.nii.gz` storage with
//! uint8, int16 or float32 payloads. Both byte orders are read (detected via
//! `sizeof_hdr`); files are always written little-endian. The affine is taken
//! from the sform when `sform_code > 0`, otherwise reconstructed from the
//! qform quaternion, otherwise assumed diagonal. `scl_slope`/`scl_inter`
//! rescaling is applied on read (yielding float32) unless it is the identity.
//!
//! Probability stacks are stored as 4-D files with the class channels on the
//! fourth axis, each channel a contiguous 3-D block.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::volume::{LabelEncoding, LabelMap, ProbStack, Volume3D, VoxelData};

const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension marker; data always starts here on write.
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// The header fields this reader consumes, in file order.
struct RawHeader {
    dim: [i16; 8],
    datatype: i16,
    bitpix: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
    magic: [u8; 4],
}

fn read_raw<E: ByteOrder>(h: &[u8]) -> RawHeader {
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = E::read_i16(&h[40 + 2 * i..]);
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = E::read_f32(&h[76 + 4 * i..]);
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = E::read_f32(&h[280 + 16 * r + 4 * c..]);
        }
    }
    RawHeader {
        dim,
        datatype: E::read_i16(&h[70..]),
        bitpix: E::read_i16(&h[72..]),
        pixdim,
        vox_offset: E::read_f32(&h[108..]),
        scl_slope: E::read_f32(&h[112..]),
        scl_inter: E::read_f32(&h[116..]),
        qform_code: E::read_i16(&h[252..]),
        sform_code: E::read_i16(&h[254..]),
        quatern: [
            E::read_f32(&h[256..]),
            E::read_f32(&h[260..]),
            E::read_f32(&h[264..]),
        ],
        qoffset: [
            E::read_f32(&h[268..]),
            E::read_f32(&h[272..]),
            E::read_f32(&h[276..]),
        ],
        srow,
        magic: [h[344], h[345], h[346], h[347]],
    }
}

fn header_err(path: &Path, field: &'static str, reason: impl Into<String>) -> Error {
    Error::HeaderField {
        path: path.to_path_buf(),
        field,
        reason: reason.into(),
    }
}

/// Read the file, transparently gunzipping when the gzip magic is present.
fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(RawHeader, Endian)> {
    if bytes.len() < HEADER_SIZE {
        return Err(header_err(
            path,
            "sizeof_hdr",
            format!("file holds only {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        ));
    }
    let le = LittleEndian::read_i32(bytes);
    let endian = if le == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(header_err(
            path,
            "sizeof_hdr",
            format!("expected 348 in either byte order, found {le}"),
        ));
    };
    let header = match endian {
        Endian::Little => read_raw::<LittleEndian>(bytes),
        Endian::Big => read_raw::<BigEndian>(bytes),
    };
    match &header.magic {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(header_err(
                path,
                "magic",
                "two-file (.hdr/.img) storage is not supported",
            ))
        }
        other => {
            return Err(header_err(
                path,
                "magic",
                format!("unrecognized magic bytes {other:?}"),
            ))
        }
    }
    Ok((header, endian))
}

/// Sizes of the axes actually present (`dim[1..=dim[0]]`).
fn dims_of(path: &Path, h: &RawHeader) -> Result<Vec<usize>> {
    let ndim = h.dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(header_err(path, "dim", format!("dim[0] = {ndim} outside 1..=7")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for i in 1..=ndim as usize {
        let d = h.dim[i];
        if d < 1 {
            return Err(header_err(path, "dim", format!("dim[{i}] = {d} is not positive")));
        }
        dims.push(d as usize);
    }
    Ok(dims)
}

fn spacing_of(path: &Path, h: &RawHeader, ndim: usize) -> Result<[f64; 3]> {
    let mut spacing = [1.0f64; 3];
    for axis in 0..3.min(ndim) {
        let p = h.pixdim[axis + 1];
        if !p.is_finite() || p <= 0.0 {
            return Err(header_err(
                path,
                "pixdim",
                format!("pixdim[{}] = {p} is not a positive voxel size", axis + 1),
            ));
        }
        spacing[axis] = f64::from(p);
    }
    Ok(spacing)
}

fn build_geometry(path: &Path, h: &RawHeader, shape: [usize; 3], spacing: [f64; 3]) -> Result<Geometry> {
    if h.sform_code > 0 {
        let mut affine = [[0.0f64; 4]; 4];
        for (r, row) in h.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                affine[r][c] = f64::from(*v);
            }
        }
        affine[3][3] = 1.0;
        return Geometry::with_affine(shape, spacing, affine)
            .map_err(|e| header_err(path, "srow_x", e.to_string()));
    }
    if h.qform_code > 0 {
        let b = f64::from(h.quatern[0]);
        let c = f64::from(h.quatern[1]);
        let d = f64::from(h.quatern[2]);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let rot = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        let mut affine = [[0.0f64; 4]; 4];
        for r in 0..3 {
            for col in 0..3 {
                let scale = if col == 2 { spacing[col] * qfac } else { spacing[col] };
                affine[r][col] = rot[r][col] * scale;
            }
            affine[r][3] = f64::from(h.qoffset[r]);
        }
        affine[3][3] = 1.0;
        return Geometry::with_affine(shape, spacing, affine)
            .map_err(|e| header_err(path, "quatern_b", e.to_string()));
    }
    Geometry::new(shape, spacing).map_err(|e| header_err(path, "pixdim", e.to_string()))
}

fn data_offset(path: &Path, h: &RawHeader) -> Result<usize> {
    let off = h.vox_offset;
    if !off.is_finite() || off < HEADER_SIZE as f32 {
        return Err(header_err(
            path,
            "vox_offset",
            format!("offset {off} is before the end of the header"),
        ));
    }
    Ok(off as usize)
}

fn decode_voxels(
    path: &Path,
    bytes: &[u8],
    offset: usize,
    n: usize,
    h: &RawHeader,
    endian: Endian,
) -> Result<VoxelData> {
    let bytes_per_voxel = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        code => {
            return Err(Error::UnsupportedDtype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    let expected_bits = (bytes_per_voxel * 8) as i16;
    if h.bitpix != expected_bits {
        return Err(header_err(
            path,
            "bitpix",
            format!("datatype {} implies bitpix {expected_bits}, found {}", h.datatype, h.bitpix),
        ));
    }
    let need = offset + n * bytes_per_voxel;
    if bytes.len() < need {
        return Err(Error::invalid(format!(
            "{}: truncated data section ({} bytes on disk, {need} required)",
            path.display(),
            bytes.len()
        )));
    }
    let src = &bytes[offset..need];
    Ok(match h.datatype {
        DT_UINT8 => VoxelData::U8(src.to_vec()),
        DT_INT16 => {
            let mut v = vec![0i16; n];
            match endian {
                Endian::Little => LittleEndian::read_i16_into(src, &mut v),
                Endian::Big => BigEndian::read_i16_into(src, &mut v),
            }
            VoxelData::I16(v)
        }
        _ => {
            let mut v = vec![0f32; n];
            match endian {
                Endian::Little => LittleEndian::read_f32_into(src, &mut v),
                Endian::Big => BigEndian::read_f32_into(src, &mut v),
            }
            VoxelData::F32(v)
        }
    })
}

/// Apply `scl_slope`/`scl_inter` unless it is the identity. A slope of zero
/// means "no scaling" per the format.
fn apply_scaling(path: &Path, data: VoxelData, h: &RawHeader) -> Result<VoxelData> {
    let (slope, inter) = (h.scl_slope, h.scl_inter);
    if !slope.is_finite() {
        return Err(header_err(path, "scl_slope", format!("non-finite slope {slope}")));
    }
    if !inter.is_finite() {
        return Err(header_err(path, "scl_inter", format!("non-finite intercept {inter}")));
    }
    if slope == 0.0 || (slope == 1.0 && inter == 0.0) {
        return Ok(data);
    }
    let scaled = match data {
        VoxelData::U8(v) => v.iter().map(|&x| f32::from(x) * slope + inter).collect(),
        VoxelData::I16(v) => v.iter().map(|&x| f32::from(x) * slope + inter).collect(),
        VoxelData::F32(v) => v.iter().map(|&x| x * slope + inter).collect(),
    };
    Ok(VoxelData::F32(scaled))
}

fn check_finite(path: &Path, data: &VoxelData) -> Result<()> {
    if let VoxelData::F32(v) = data {
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteVoxel {
                path: path.to_path_buf(),
                index,
            });
        }
    }
    Ok(())
}

fn shape3(path: &Path, dims: &[usize]) -> Result<[usize; 3]> {
    if dims.iter().skip(3).any(|&d| d != 1) {
        return Err(Error::invalid(format!(
            "{}: expected a 3-D volume, file has dims {dims:?}",
            path.display()
        )));
    }
    let mut shape = [1usize; 3];
    for (axis, &d) in dims.iter().take(3).enumerate() {
        shape[axis] = d;
    }
    Ok(shape)
}

/// Number of axes once trailing singleton axes are stripped; distinguishes
/// 3-D label volumes from 4-D probability stacks without decoding voxels.
pub fn read_rank(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    let (h, _) = parse_header(path, &bytes)?;
    let dims = dims_of(path, &h)?;
    let rank = dims.iter().rposition(|&d| d > 1).map_or(1, |i| i + 1);
    Ok(rank)
}

/// Read a 3-D volume. Files with extra trailing axes of size 1 are accepted.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    let (h, endian) = parse_header(path, &bytes)?;
    let dims = dims_of(path, &h)?;
    let shape = shape3(path, &dims)?;
    let spacing = spacing_of(path, &h, dims.len())?;
    let geometry = build_geometry(path, &h, shape, spacing)?;
    let offset = data_offset(path, &h)?;
    let data = decode_voxels(path, &bytes, offset, geometry.num_voxels(), &h, endian)?;
    let data = apply_scaling(path, data, &h)?;
    check_finite(path, &data)?;
    Volume3D::new(geometry, data)
}

/// Read a label map, converting integral int16/float32 payloads to uint8.
pub fn read_labelmap(path: impl AsRef<Path>, encoding: LabelEncoding) -> Result<LabelMap> {
    let path = path.as_ref();
    let volume = read_nifti(path)?;
    let reject = |index: usize, value: f64| {
        Error::invalid(format!(
            "{}: voxel value {value} at linear index {index} is not a uint8 label code",
            path.display()
        ))
    };
    let codes: Vec<u8> = match volume.data() {
        VoxelData::U8(v) => v.clone(),
        VoxelData::I16(v) => {
            let mut out = Vec::with_capacity(v.len());
            for (i, &x) in v.iter().enumerate() {
                if !(0..=255).contains(&x) {
                    return Err(reject(i, f64::from(x)));
                }
                out.push(x as u8);
            }
            out
        }
        VoxelData::F32(v) => {
            let mut out = Vec::with_capacity(v.len());
            for (i, &x) in v.iter().enumerate() {
                if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
                    return Err(reject(i, f64::from(x)));
                }
                out.push(x as u8);
            }
            out
        }
    };
    LabelMap::from_codes(volume.geometry().clone(), codes, encoding)
}

/// Read a per-class probability stack from a 4-D float file. The fourth axis
/// must match the encoding's class count (background channel first).
pub fn read_probstack(path: impl AsRef<Path>, encoding: LabelEncoding) -> Result<ProbStack> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    let (h, endian) = parse_header(path, &bytes)?;
    let dims = dims_of(path, &h)?;
    if dims.iter().skip(4).any(|&d| d != 1) {
        return Err(Error::invalid(format!(
            "{}: expected a 4-D probability stack, file has dims {dims:?}",
            path.display()
        )));
    }
    let mut shape = [1usize; 3];
    for (axis, &d) in dims.iter().take(3).enumerate() {
        shape[axis] = d;
    }
    let classes = dims.get(3).copied().unwrap_or(1);
    if classes != encoding.num_classes() {
        return Err(Error::invalid(format!(
            "{}: stack has {classes} channels, encoding expects {}",
            path.display(),
            encoding.num_classes()
        )));
    }
    let spacing = spacing_of(path, &h, dims.len())?;
    let geometry = build_geometry(path, &h, shape, spacing)?;
    let offset = data_offset(path, &h)?;
    let per_channel = geometry.num_voxels();
    let data = decode_voxels(path, &bytes, offset, per_channel * classes, &h, endian)?;
    let data = apply_scaling(path, data, &h)?;
    check_finite(path, &data)?;
    let values = match data {
        VoxelData::F32(v) => v,
        other => {
            return Err(Error::invalid(format!(
                "{}: probability stacks must be float32, got {}",
                path.display(),
                other.dtype_name()
            )))
        }
    };
    let channels = values.chunks(per_channel).map(<[f32]>::to_vec).collect();
    ProbStack::new(geometry, channels, encoding)
}

struct HeaderFields<'a> {
    dims: &'a [usize],
    spacing: [f64; 3],
    affine: [[f64; 4]; 4],
    datatype: i16,
    bitpix: i16,
}

/// Encode a header plus the 4-byte extension marker (352 bytes total).
fn encode_header<E: ByteOrder>(f: &HeaderFields) -> Vec<u8> {
    let mut h = vec![0u8; DATA_OFFSET];
    E::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    E::write_i16(&mut h[40..], f.dims.len() as i16);
    for i in 0..7 {
        let d = f.dims.get(i).copied().unwrap_or(1);
        E::write_i16(&mut h[42 + 2 * i..], d as i16);
    }
    E::write_i16(&mut h[70..], f.datatype);
    E::write_i16(&mut h[72..], f.bitpix);
    E::write_f32(&mut h[76..], 1.0);
    for (axis, &s) in f.spacing.iter().enumerate() {
        E::write_f32(&mut h[80 + 4 * axis..], s as f32);
    }
    for i in 4..=7 {
        E::write_f32(&mut h[76 + 4 * i..], 1.0);
    }
    E::write_f32(&mut h[108..], DATA_OFFSET as f32);
    E::write_f32(&mut h[112..], 1.0);
    E::write_f32(&mut h[116..], 0.0);
    h[123] = 2;
    E::write_i16(&mut h[252..], 0);
    E::write_i16(&mut h[254..], 2);
    for (r, row) in f.affine.iter().take(3).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            E::write_f32(&mut h[280 + 16 * r + 4 * c..], v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn encode_voxels<E: ByteOrder>(data: &VoxelData) -> Vec<u8> {
    match data {
        VoxelData::U8(v) => v.clone(),
        VoxelData::I16(v) => {
            let mut out = vec![0u8; v.len() * 2];
            E::write_i16_into(v, &mut out);
            out
        }
        VoxelData::F32(v) => {
            let mut out = vec![0u8; v.len() * 4];
            E::write_f32_into(v, &mut out);
            out
        }
    }
}

/// Write bytes atomically (temp file in the same directory, then rename),
/// gzipping when the target name ends in `.gz`.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let gzip = path.extension().is_some_and(|e| e == "gz");
    let encoded;
    let payload: &[u8] = if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        encoded = enc.finish().map_err(|e| Error::io(path, e))?;
        &encoded
    } else {
        bytes
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    fs::write(tmp.path(), payload).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Write a 3-D volume as single-file NIfTI-1, little-endian, sform only.
pub fn write_nifti(path: impl AsRef<Path>, volume: &Volume3D) -> Result<()> {
    let path = path.as_ref();
    let (datatype, bitpix) = match volume.data() {
        VoxelData::U8(_) => (DT_UINT8, 8),
        VoxelData::I16(_) => (DT_INT16, 16),
        VoxelData::F32(_) => (DT_FLOAT32, 32),
    };
    let shape = volume.shape();
    let header = encode_header::<LittleEndian>(&HeaderFields {
        dims: &shape,
        spacing: volume.spacing(),
        affine: volume.affine(),
        datatype,
        bitpix,
    });
    let mut bytes = header;
    bytes.extend_from_slice(&encode_voxels::<LittleEndian>(volume.data()));
    write_file(path, &bytes)
}

/// Write a probability stack as a 4-D float32 file (channels on axis 4).
pub fn write_probstack(path: impl AsRef<Path>, stack: &ProbStack) -> Result<()> {
    let path = path.as_ref();
    let shape = stack.geometry().shape;
    let dims = [shape[0], shape[1], shape[2], stack.num_classes()];
    let header = encode_header::<LittleEndian>(&HeaderFields {
        dims: &dims,
        spacing: stack.geometry().spacing,
        affine: stack.geometry().affine,
        datatype: DT_FLOAT32,
        bitpix: 32,
    });
    let mut bytes = header;
    for class in 0..stack.num_classes() {
        let mut buf = vec![0u8; stack.channel(class).len() * 4];
        LittleEndian::write_f32_into(stack.channel(class), &mut buf);
        bytes.extend_from_slice(&buf);
    }
    write_file(path, &bytes)
}

//! NIfTI-1 volume reading and writing.
//!
//! Supports the single-file (`n+1`) and detached (`ni1`) magics, plain and
//! gzip-compressed payloads, both byte orders on input (little-endian on
//! output), and the five datatypes the pipeline needs. NIfTI-2, extensions
//! and reorientation are out of scope.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::Grid2;

pub const HEADER_SIZE: usize = 348;

/// Voxel scalar types supported by this reader/writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            8 => Ok(Datatype::Int32),
            16 => Ok(Datatype::Float32),
            64 => Ok(Datatype::Float64),
            _ => Err(Error::UnsupportedDatatype { code }),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Int32 => 8,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Int32 => 4,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }

    pub const ALL: [Datatype; 5] = [
        Datatype::Uint8,
        Datatype::Int16,
        Datatype::Int32,
        Datatype::Float32,
        Datatype::Float64,
    ];
}

impl std::fmt::Display for Datatype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Datatype::Uint8 => "uint8",
            Datatype::Int16 => "int16",
            Datatype::Int32 => "int32",
            Datatype::Float32 => "float32",
            Datatype::Float64 => "float64",
        };
        f.write_str(s)
    }
}

/// The subset of NIfTI-1 header fields the pipeline cares about.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [u16; 8],
    pub datatype: Datatype,
    pub voxel_sizes: [f32; 8],
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: u64,
    pub qform_code: i16,
    pub sform_code: i16,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    /// sform rows: srow_x, srow_y, srow_z
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn rank(&self) -> usize {
        self.dims[0] as usize
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        let d = |i: usize| {
            if (i as u16) <= self.dims[0] {
                self.dims[i].max(1) as usize
            } else {
                1
            }
        };
        [d(1), d(2), d(3)]
    }

    pub fn canonical(dims: [usize; 3], datatype: Datatype) -> Self {
        let mut srow = [[0.0f32; 4]; 3];
        srow[0][0] = 1.0;
        srow[1][1] = 1.0;
        srow[2][2] = 1.0;
        NiftiHeader {
            dims: [3, dims[0] as u16, dims[1] as u16, dims[2] as u16, 1, 1, 1, 1],
            datatype,
            voxel_sizes: [0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            scl_slope: 0.0,
            scl_inter: 0.0,
            vox_offset: 352,
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 6],
            srow,
            magic: *b"n+1\0",
        }
    }
}

/// A 3D scalar volume with its source header.
///
/// Voxel order follows NIfTI storage: index = i + nx*(j + ny*k), with k the
/// axial axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub header: NiftiHeader,
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: [usize; 3], header: NiftiHeader) -> Self {
        assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
        let spacing = [
            header.voxel_sizes[1],
            header.voxel_sizes[2],
            header.voxel_sizes[3],
        ];
        Volume {
            data,
            dims,
            spacing,
            header,
        }
    }

    pub fn from_data(data: Vec<f32>, dims: [usize; 3], datatype: Datatype) -> Self {
        Volume::new(data, dims, NiftiHeader::canonical(dims, datatype))
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)]
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 2];
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&head[..n]);
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if is_gzip(&bytes) {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

struct FieldReader<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> FieldReader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let mut b = [self.bytes[off], self.bytes[off + 1]];
        if self.swap {
            b.reverse();
        }
        i16::from_le_bytes(b)
    }

    fn i32_at(&self, off: usize) -> i32 {
        let mut b = [0u8; 4];
        b.copy_from_slice(&self.bytes[off..off + 4]);
        if self.swap {
            b.reverse();
        }
        i32::from_le_bytes(b)
    }

    fn f32_at(&self, off: usize) -> f32 {
        f32::from_bits(self.i32_at(off) as u32)
    }
}

/// Parse a 348-byte NIfTI-1 header, detecting endianness from `sizeof_hdr`.
pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            offset: bytes.len(),
            detail: format!("header needs {HEADER_SIZE} bytes, file has {}", bytes.len()),
        });
    }
    let sizeof_hdr = LittleEndian::read_i32(&bytes[0..4]);
    let swap = if sizeof_hdr == HEADER_SIZE as i32 {
        false
    } else if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
        true
    } else {
        return Err(Error::Truncated {
            offset: 0,
            detail: format!("sizeof_hdr = {sizeof_hdr}, expected 348 in either byte order"),
        });
    };
    let r = FieldReader { bytes, swap };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(Error::BadMagic { found: magic });
    }

    let rank = r.i16_at(40);
    if !(1..=7).contains(&rank) {
        return Err(Error::BadDims {
            detail: format!("dim[0] = {rank}, expected 1..7"),
        });
    }
    let mut dims = [1u16; 8];
    dims[0] = rank as u16;
    for (i, slot) in dims.iter_mut().enumerate().skip(1) {
        let d = r.i16_at(40 + 2 * i);
        if (i as i16) <= rank {
            if d < 1 {
                return Err(Error::BadDims {
                    detail: format!("dim[{i}] = {d}, must be >= 1"),
                });
            }
            *slot = d as u16;
        }
    }

    let datatype = Datatype::from_code(r.i16_at(70))?;
    let mut voxel_sizes = [0.0f32; 8];
    for (i, v) in voxel_sizes.iter_mut().enumerate() {
        *v = r.f32_at(76 + 4 * i);
    }
    let vox_offset = r.f32_at(108);
    if vox_offset < 0.0 || !vox_offset.is_finite() {
        return Err(Error::BadDims {
            detail: format!("vox_offset = {vox_offset}"),
        });
    }

    let mut quatern = [0.0f32; 6];
    for (i, v) in quatern.iter_mut().enumerate() {
        *v = r.f32_at(256 + 4 * i);
    }
    let mut srow = [[0.0f32; 4]; 3];
    for (row, s) in srow.iter_mut().enumerate() {
        for (col, v) in s.iter_mut().enumerate() {
            *v = r.f32_at(280 + 16 * row + 4 * col);
        }
    }

    Ok(NiftiHeader {
        dims,
        datatype,
        voxel_sizes,
        scl_slope: r.f32_at(112),
        scl_inter: r.f32_at(116),
        vox_offset: vox_offset as u64,
        qform_code: r.i16_at(252),
        sform_code: r.i16_at(254),
        quatern,
        srow,
        magic,
    })
}

fn decode_voxels(raw: &[u8], dt: Datatype, swap: bool, count: usize) -> Result<Vec<f32>> {
    let need = count * dt.byte_size();
    if raw.len() < need {
        return Err(Error::Truncated {
            offset: raw.len(),
            detail: format!("voxel payload needs {need} bytes, found {}", raw.len()),
        });
    }
    let mut out = Vec::with_capacity(count);
    let sw16 = |b: &[u8]| {
        let mut a = [b[0], b[1]];
        if swap {
            a.reverse();
        }
        a
    };
    let sw32 = |b: &[u8]| {
        let mut a = [b[0], b[1], b[2], b[3]];
        if swap {
            a.reverse();
        }
        a
    };
    let sw64 = |b: &[u8]| {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        if swap {
            a.reverse();
        }
        a
    };
    match dt {
        Datatype::Uint8 => out.extend(raw[..count].iter().map(|&v| v as f32)),
        Datatype::Int16 => {
            for c in raw[..need].chunks_exact(2) {
                out.push(i16::from_le_bytes(sw16(c)) as f32);
            }
        }
        Datatype::Int32 => {
            for c in raw[..need].chunks_exact(4) {
                out.push(i32::from_le_bytes(sw32(c)) as f32);
            }
        }
        Datatype::Float32 => {
            for c in raw[..need].chunks_exact(4) {
                out.push(f32::from_le_bytes(sw32(c)));
            }
        }
        Datatype::Float64 => {
            for c in raw[..need].chunks_exact(8) {
                out.push(f64::from_le_bytes(sw64(c)) as f32);
            }
        }
    }
    Ok(out)
}

/// Read a `.nii` or `.nii.gz` file into a [`Volume`].
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_file_bytes(path)?;
    let header = parse_header(&bytes)?;
    let swap = LittleEndian::read_i32(&bytes[0..4]) != HEADER_SIZE as i32;

    let dims = header.spatial_dims();
    let count: usize = dims.iter().product();
    let off = (header.vox_offset as usize).max(HEADER_SIZE);
    if bytes.len() < off {
        return Err(Error::Truncated {
            offset: bytes.len(),
            detail: format!("vox_offset {off} beyond end of file"),
        });
    }
    let mut data = decode_voxels(&bytes[off..], header.datatype, swap, count)?;
    // scl_slope = 0 means "no scaling" per the standard
    if header.scl_slope != 0.0 {
        for v in data.iter_mut() {
            *v = *v * header.scl_slope + header.scl_inter;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "volume {} contains non-finite voxels after intensity scaling",
            path.display()
        )));
    }
    Ok(Volume::new(data, dims, header))
}

fn encode_header(h: &NiftiHeader) -> Vec<u8> {
    let mut b = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut b[0..4], HEADER_SIZE as i32);
    b[39] = b'r'; // dim_info unused; regular flag at offset 38 per ANALYZE compat
    for i in 0..8 {
        LittleEndian::write_i16(&mut b[40 + 2 * i..], h.dims[i] as i16);
    }
    LittleEndian::write_i16(&mut b[70..], h.datatype.code());
    LittleEndian::write_i16(&mut b[72..], (h.datatype.byte_size() * 8) as i16);
    for i in 0..8 {
        LittleEndian::write_f32(&mut b[76 + 4 * i..], h.voxel_sizes[i]);
    }
    LittleEndian::write_f32(&mut b[108..], h.vox_offset as f32);
    LittleEndian::write_f32(&mut b[112..], h.scl_slope);
    LittleEndian::write_f32(&mut b[116..], h.scl_inter);
    LittleEndian::write_i16(&mut b[252..], h.qform_code);
    LittleEndian::write_i16(&mut b[254..], h.sform_code);
    for i in 0..6 {
        LittleEndian::write_f32(&mut b[256 + 4 * i..], h.quatern[i]);
    }
    for row in 0..3 {
        for col in 0..4 {
            LittleEndian::write_f32(&mut b[280 + 16 * row + 4 * col..], h.srow[row][col]);
        }
    }
    b[344..348].copy_from_slice(&h.magic);
    b
}

fn encode_voxels(data: &[f32], dt: Datatype) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(data.len() * dt.byte_size());
    for &v in data {
        match dt {
            Datatype::Uint8 => {
                let r = v.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(Error::OutOfRange {
                        value: v as f64,
                        datatype: dt.to_string(),
                    });
                }
                out.push(r as u8);
            }
            Datatype::Int16 => {
                let r = v.round();
                if r < i16::MIN as f32 || r > i16::MAX as f32 {
                    return Err(Error::OutOfRange {
                        value: v as f64,
                        datatype: dt.to_string(),
                    });
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            Datatype::Int32 => {
                let r = v.round();
                if r < i32::MIN as f32 || r > i32::MAX as f32 {
                    return Err(Error::OutOfRange {
                        value: v as f64,
                        datatype: dt.to_string(),
                    });
                }
                out.extend_from_slice(&(r as i32).to_le_bytes());
            }
            Datatype::Float32 => out.extend_from_slice(&v.to_le_bytes()),
            Datatype::Float64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    Ok(out)
}

/// Write a volume as NIfTI-1, little-endian, gzipped when the path ends in `.gz`.
///
/// The requested datatype overrides the header's; affine fields are carried
/// over from the volume's header. `scl_slope` is written as 0 so a round-trip
/// reproduces the stored values exactly.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>, datatype: Datatype) -> Result<()> {
    let path = path.as_ref();
    let mut header = volume.header.clone();
    header.dims = [
        3,
        volume.dims[0] as u16,
        volume.dims[1] as u16,
        volume.dims[2] as u16,
        1,
        1,
        1,
        1,
    ];
    header.datatype = datatype;
    header.scl_slope = 0.0;
    header.scl_inter = 0.0;
    header.vox_offset = 352;
    header.magic = *b"n+1\0";

    let mut bytes = encode_header(&header);
    bytes.extend_from_slice(&[0u8; 4]); // pad to vox_offset 352
    bytes.extend(encode_voxels(&volume.data, datatype)?);

    let gz = path.extension().map(|e| e == "gz").unwrap_or(false);
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    if gz {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut f = f;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Split a volume into its axial (third-axis) slices, in index order.
///
/// Slice `k` holds pixel (i, j) = volume(i, j, k).
pub fn axial_slices(volume: &Volume) -> Vec<Grid2> {
    let [nx, ny, nz] = volume.dims;
    (0..nz)
        .map(|k| {
            let mut g = Grid2::zeros(nx, ny);
            for i in 0..nx {
                for j in 0..ny {
                    g.set(i, j, volume.at(i, j, k));
                }
            }
            g
        })
        .collect()
}

/// Rebuild a volume from axial slices using `template`'s header and affine.
pub fn assemble_volume(slices: &[Grid2], template: &Volume) -> Result<Volume> {
    let [nx, ny, nz] = template.dims;
    if slices.len() != nz {
        return Err(Error::ShapeMismatch {
            expected: format!("{nz} axial slices"),
            found: format!("{}", slices.len()),
        });
    }
    let mut data = vec![0.0f32; nx * ny * nz];
    for (k, s) in slices.iter().enumerate() {
        if s.rows != nx || s.cols != ny {
            return Err(Error::ShapeMismatch {
                expected: format!("{nx}x{ny} slice"),
                found: format!("{}x{} at index {k}", s.rows, s.cols),
            });
        }
        for i in 0..nx {
            for j in 0..ny {
                data[i + nx * (j + ny * k)] = s.at(i, j);
            }
        }
    }
    Ok(Volume::new(data, template.dims, template.header.clone()))
}

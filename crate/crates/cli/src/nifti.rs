//! Minimal NIfTI-1 reader/writer for single-file `.nii` / `.nii.gz` volumes.
//!
//! Covers what the pipeline needs: little-endian float32/int16/uint8 data,
//! pixdim spacing, and scl slope/intercept on read. Written files are always
//! float32 (uint8 for masks) with a fixed 352-byte header block, so byte
//! output is reproducible.

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use ndarray::Array3;

const HDR_SIZE: usize = 348;
const VOX_OFFSET: f32 = 352.0;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// A loaded volume: voxels in (z, y, x) order plus spacing in mm (z, y, x).
#[derive(Debug)]
pub struct NiftiVolume {
    pub voxels: Array3<f64>,
    pub spacing: (f64, f64, f64),
}

fn is_gz(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_gz(&raw) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .with_context(|| format!("decompressing {}", path.display()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Read a `.nii` or `.nii.gz` volume.
pub fn read_nifti(path: &Path) -> Result<NiftiVolume> {
    let bytes = read_all(path)?;
    if bytes.len() < HDR_SIZE + 4 {
        bail!("{}: file too short for a NIfTI-1 header", path.display());
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != 348 {
        bail!(
            "{}: not a little-endian NIfTI-1 file (sizeof_hdr = {sizeof_hdr})",
            path.display()
        );
    }
    let magic = &bytes[344..348];
    if &magic[..3] != b"n+1" && &magic[..3] != b"ni1" {
        bail!("{}: bad NIfTI magic", path.display());
    }
    let ndim = le_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        bail!("{}: bad dim[0] = {ndim}", path.display());
    }
    let nx = le_i16(&bytes, 42).max(1) as usize;
    let ny = le_i16(&bytes, 44).max(1) as usize;
    let nz = le_i16(&bytes, 46).max(1) as usize;
    for d in 3..ndim as usize {
        let extra = le_i16(&bytes, 40 + 2 * (d + 1));
        if extra > 1 {
            bail!(
                "{}: {}-dimensional volumes are not supported",
                path.display(),
                ndim
            );
        }
    }
    let datatype = le_i16(&bytes, 70);
    let sx = le_f32(&bytes, 80) as f64; // pixdim[1]
    let sy = le_f32(&bytes, 84) as f64;
    let sz = le_f32(&bytes, 88) as f64;
    let vox_offset = le_f32(&bytes, 108) as usize;
    let scl_slope = le_f32(&bytes, 112) as f64;
    let scl_inter = le_f32(&bytes, 116) as f64;
    let (slope, inter) = if scl_slope == 0.0 || !scl_slope.is_finite() {
        (1.0, 0.0)
    } else {
        (scl_slope, scl_inter)
    };

    let n = nx * ny * nz;
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => bail!("{}: unsupported datatype {other}", path.display()),
    };
    let data = bytes
        .get(vox_offset..vox_offset + n * elem)
        .with_context(|| format!("{}: truncated voxel data", path.display()))?;

    let mut voxels = Array3::<f64>::zeros((nz, ny, nx));
    {
        let out = voxels.as_slice_mut().unwrap();
        // NIfTI stores x fastest; (z, y, x) C-order matches directly
        match datatype {
            DT_UINT8 => {
                for (i, &b) in data.iter().enumerate() {
                    out[i] = b as f64 * slope + inter;
                }
            }
            DT_INT16 => {
                for i in 0..n {
                    let v = le_i16(data, i * 2) as f64;
                    out[i] = v * slope + inter;
                }
            }
            DT_FLOAT32 => {
                for i in 0..n {
                    let v = le_f32(data, i * 4) as f64;
                    out[i] = v * slope + inter;
                }
            }
            _ => unreachable!(),
        }
    }
    let fix = |s: f64| if s > 0.0 && s.is_finite() { s } else { 1.0 };
    Ok(NiftiVolume {
        voxels,
        spacing: (fix(sz), fix(sy), fix(sx)),
    })
}

fn build_header(nx: usize, ny: usize, nz: usize, datatype: i16, bitpix: i16, spacing: (f64, f64, f64)) -> Vec<u8> {
    let mut h = vec![0u8; HDR_SIZE + 4]; // header + 4-byte extension pad
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    // dim
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    h[42..44].copy_from_slice(&(nx as i16).to_le_bytes());
    h[44..46].copy_from_slice(&(ny as i16).to_le_bytes());
    h[46..48].copy_from_slice(&(nz as i16).to_le_bytes());
    for d in 4..8 {
        h[40 + 2 * d..42 + 2 * d].copy_from_slice(&1i16.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    // pixdim[0..3]
    h[76..80].copy_from_slice(&1.0f32.to_le_bytes());
    h[80..84].copy_from_slice(&(spacing.2 as f32).to_le_bytes());
    h[84..88].copy_from_slice(&(spacing.1 as f32).to_le_bytes());
    h[88..92].copy_from_slice(&(spacing.0 as f32).to_le_bytes());
    h[108..112].copy_from_slice(&VOX_OFFSET.to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes()); // scl_slope
    h[344..347].copy_from_slice(b"n+1");
    h
}

fn write_bytes(path: &Path, payload: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if gz {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        // mtime stays 0 so identical content gives identical bytes
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(payload)?;
        enc.finish()?;
    } else {
        std::fs::write(path, payload)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Write a float32 volume; `.gz` extension selects gzip.
pub fn write_nifti_f32(path: &Path, voxels: &Array3<f64>, spacing: (f64, f64, f64)) -> Result<()> {
    let (nz, ny, nx) = voxels.dim();
    let mut payload = build_header(nx, ny, nz, DT_FLOAT32, 32, spacing);
    for &v in voxels.as_slice().expect("standard layout") {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &payload)
}

/// Write a uint8 mask volume; `.gz` extension selects gzip.
pub fn write_nifti_u8(path: &Path, voxels: &Array3<u8>, spacing: (f64, f64, f64)) -> Result<()> {
    let (nz, ny, nx) = voxels.dim();
    let mut payload = build_header(nx, ny, nz, DT_UINT8, 8, spacing);
    payload.extend_from_slice(voxels.as_slice().expect("standard layout"));
    write_bytes(path, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 20 + y * 5 + x) as f64 - 7.5);
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            write_nifti_f32(&path, &vox, (5.0, 1.0, 1.5)).unwrap();
            let back = read_nifti(&path).unwrap();
            assert_eq!(back.voxels.dim(), (3, 4, 5));
            assert_eq!(back.spacing, (5.0, 1.0, 1.5));
            let max_err = (&back.voxels - &vox)
                .iter()
                .fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_err < 1e-4, "{name}: err {max_err}");
        }
    }

    #[test]
    fn mask_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array3::from_shape_fn((2, 3, 3), |(z, y, x)| ((z + y + x) % 2) as u8);
        let path = dir.path().join("m.nii.gz");
        write_nifti_u8(&path, &mask, (1.0, 1.0, 1.0)).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.voxels.mapv(|v| v as u8), mask);
    }

    #[test]
    fn corrupt_file_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        std::fs::write(&path, b"not a nifti at all").unwrap();
        let err = read_nifti(&path).unwrap_err().to_string();
        assert!(err.contains("bad.nii"), "error should name the file: {err}");
    }

    #[test]
    fn gz_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let vox = Array3::from_elem((2, 2, 2), 1.25);
        let a = dir.path().join("a.nii.gz");
        let b = dir.path().join("b.nii.gz");
        write_nifti_f32(&a, &vox, (1.0, 1.0, 1.0)).unwrap();
        write_nifti_f32(&b, &vox, (1.0, 1.0, 1.0)).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

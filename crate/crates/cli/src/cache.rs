//! Preprocessed slice cache: one binary tensor container per slice plus a
//! plain-text sidecar describing how the cache was built.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "MVTC" | u16 version | u16 id_len | id bytes | u32 slice_index
//! u8 has_mask
//! u32 h | u32 w | h*w f64   (normalized image)
//! [h*w u8]                  (mask, when has_mask = 1)
//! u32 c | u32 ch | u32 cw | c*ch*cw f64   (frequency cube)
//! ```

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mimic_core::train::{PreparedSlice, TrainConfig};
use ndarray::{Array2, Array3};

const MAGIC: &[u8; 4] = b"MVTC";
const VERSION: u16 = 1;

/// Sidecar metadata for a cache directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheMeta {
    pub patch_size: usize,
    pub channel_order: String,
    /// Frequency-normalization scope: "per-cube" or "global".
    pub fn_scope: String,
    pub image_size: usize,
    /// Whether training should drop lesion-free slices.
    pub drop_empty: bool,
    pub n_slices: usize,
    pub source_checksum: String,
}

impl CacheMeta {
    pub fn to_text(&self) -> String {
        format!(
            "version = {VERSION}\n\
             patch_size = {}\n\
             channel_order = {}\n\
             fn_scope = {}\n\
             image_size = {}\n\
             drop_empty = {}\n\
             n_slices = {}\n\
             source_checksum = {}\n",
            self.patch_size,
            self.channel_order,
            self.fn_scope,
            self.image_size,
            self.drop_empty,
            self.n_slices,
            self.source_checksum
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .with_context(|| format!("cache sidecar missing key '{k}'"))
        };
        Ok(CacheMeta {
            patch_size: get("patch_size")?.parse()?,
            channel_order: get("channel_order")?,
            fn_scope: get("fn_scope")?,
            image_size: get("image_size")?.parse()?,
            drop_empty: get("drop_empty")?.parse()?,
            n_slices: get("n_slices")?.parse()?,
            source_checksum: get("source_checksum")?,
        })
    }

    /// Reject configs the cache was not built for.
    pub fn check_compatible(&self, cfg: &TrainConfig) -> Result<()> {
        if self.patch_size != cfg.patch_size
            || self.image_size != cfg.image_size
            || self.channel_order != cfg.channel_order.as_str()
        {
            bail!(
                "stale cache: built with patch_size={} order={} image_size={}, \
                 requested patch_size={} order={} image_size={}; rerun preprocess",
                self.patch_size,
                self.channel_order,
                self.image_size,
                cfg.patch_size,
                cfg.channel_order.as_str(),
                cfg.image_size
            );
        }
        Ok(())
    }
}

/// Checksum over volume voxel bytes, order-independent across subjects.
pub fn source_checksum(volumes: &[mimic_core::data::CtVolume]) -> String {
    use sha2::{Digest, Sha256};
    let mut subjects: Vec<&mimic_core::data::CtVolume> = volumes.iter().collect();
    subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut hasher = Sha256::new();
    for vol in subjects {
        hasher.update(vol.subject_id.as_bytes());
        for &v in vol.voxels.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push_array2(buf: &mut Vec<u8>, a: &Array2<f64>) {
    let (h, w) = a.dim();
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_slice(s: &PreparedSlice) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let id = s.subject_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(s.slice_index as u32).to_le_bytes());
    buf.push(1); // masks always present in training caches
    push_array2(&mut buf, &s.image);
    for &v in s.mask.iter() {
        buf.push(v);
    }
    let (c, ch, cw) = s.cube.dim();
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(ch as u32).to_le_bytes());
    buf.extend_from_slice(&(cw as u32).to_le_bytes());
    for &v in s.cube.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("{}: truncated cache record", self.path);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode_slice(bytes: &[u8], path: &Path) -> Result<PreparedSlice> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if cur.take(4)? != MAGIC {
        bail!("{}: not a cache record (bad magic)", path.display());
    }
    let version = cur.u16()?;
    if version != VERSION {
        bail!("{}: unsupported cache version {version}", path.display());
    }
    let id_len = cur.u16()? as usize;
    let subject_id = String::from_utf8(cur.take(id_len)?.to_vec())
        .with_context(|| format!("{}: bad subject id", path.display()))?;
    let slice_index = cur.u32()? as usize;
    let has_mask = cur.take(1)?[0] != 0;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let image = Array2::from_shape_vec((h, w), cur.f64s(h * w)?)?;
    if !has_mask {
        bail!("{}: cache record lacks a mask", path.display());
    }
    let mask_raw = cur.take(h * w)?.to_vec();
    let mask = Array2::from_shape_vec((h, w), mask_raw)?;
    let c = cur.u32()? as usize;
    let ch = cur.u32()? as usize;
    let cw = cur.u32()? as usize;
    let cube = Array3::from_shape_vec((c, ch, cw), cur.f64s(c * ch * cw)?)?;
    Ok(PreparedSlice {
        subject_id,
        slice_index,
        image,
        mask,
        cube,
    })
}

/// Write the cache directory: `meta.txt` plus `slices/s<N>.mvt` records.
pub fn write_cache(dir: &Path, meta: &CacheMeta, slices: &[PreparedSlice]) -> Result<()> {
    let slice_dir = dir.join("slices");
    std::fs::create_dir_all(&slice_dir)?;
    let mut meta = meta.clone();
    meta.n_slices = slices.len();
    std::fs::write(dir.join("meta.txt"), meta.to_text())?;
    for (i, s) in slices.iter().enumerate() {
        let path = slice_dir.join(format!("s{i:06}.mvt"));
        let mut f = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        f.write_all(&encode_slice(s))?;
    }
    Ok(())
}

/// Read a cache directory back.
pub fn read_cache(dir: &Path) -> Result<(CacheMeta, Vec<PreparedSlice>)> {
    let meta_path = dir.join("meta.txt");
    let meta_text = std::fs::read_to_string(&meta_path)
        .with_context(|| format!("reading {} (is the cache built?)", meta_path.display()))?;
    let meta = CacheMeta::from_text(&meta_text)?;
    let mut slices = Vec::with_capacity(meta.n_slices);
    for i in 0..meta.n_slices {
        let path = dir.join("slices").join(format!("s{i:06}.mvt"));
        let bytes =
            std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        slices.push(decode_slice(&bytes, &path)?);
    }
    Ok((meta, slices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mimic_core::train::prepare_volume;

    fn sample_slices() -> Vec<PreparedSlice> {
        let spec = mimic_core::synth::SyntheticSpec {
            n_subjects: 2,
            slices_per_subject: 2,
            image_size: 16,
            lesion_radius_range: (2.0, 4.0),
            seed: 9,
            ..Default::default()
        };
        let cfg = TrainConfig {
            image_size: 16,
            patch_size: 4,
            ..TrainConfig::default()
        };
        mimic_core::synth::generate(&spec)
            .unwrap()
            .iter()
            .flat_map(|v| prepare_volume(v, &cfg).unwrap())
            .collect()
    }

    #[test]
    fn cache_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let slices = sample_slices();
        let meta = CacheMeta {
            patch_size: 4,
            channel_order: "zigzag".into(),
            fn_scope: "per-cube".into(),
            image_size: 16,
            drop_empty: true,
            n_slices: 0,
            source_checksum: "abc".into(),
        };
        write_cache(dir.path(), &meta, &slices).unwrap();
        let (meta_back, back) = read_cache(dir.path()).unwrap();
        assert_eq!(meta_back.n_slices, slices.len());
        assert_eq!(meta_back.patch_size, 4);
        for (a, b) in slices.iter().zip(&back) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.slice_index, b.slice_index);
            // bitwise equality of every tensor
            assert!(a.image.iter().zip(b.image.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert_eq!(a.mask, b.mask);
            assert!(a.cube.iter().zip(b.cube.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let meta = CacheMeta {
            patch_size: 8,
            channel_order: "zigzag".into(),
            fn_scope: "per-cube".into(),
            image_size: 64,
            drop_empty: true,
            n_slices: 0,
            source_checksum: "x".into(),
        };
        let mut cfg = TrainConfig::default();
        cfg.image_size = 64;
        cfg.patch_size = 8;
        assert!(meta.check_compatible(&cfg).is_ok());
        cfg.patch_size = 4;
        cfg.image_size = 64;
        let err = meta.check_compatible(&cfg).unwrap_err().to_string();
        assert!(err.contains("stale cache"), "{err}");
    }
}

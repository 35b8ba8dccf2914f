//! File formats: the UST1 named-tensor container, binary PGM/PPM images, and
//! the on-disk scene dataset layout.
//!
//! UST1 layout, all integers little-endian:
//!
//! ```text
//! "UST1"  u32 count
//! count × { u32 name_len, name (UTF-8), u32 dtype = 1, u32 rank, rank × u32 extent }
//! payload: every tensor's f64 values in directory order
//! optional: u64 json_len, json_len bytes of JSON metadata
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{SceneConfig, SceneSample};
use crate::tensor::Tensor;

pub const UST1_MAGIC: &[u8; 4] = b"UST1";
/// The only element type: IEEE-754 binary64.
pub const DTYPE_F64: u32 = 1;

/// Named tensors plus optional JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ust1 {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: Option<serde_json::Value>,
}

impl Ust1 {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(UST1_MAGIC);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Shape("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate tensor name {name:?}")));
            }
            let len = u32::try_from(name.len()).map_err(|_| Error::Shape("tensor name too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&DTYPE_F64.to_le_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::Shape(format!("extent {e} exceeds u32")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(meta) = &self.metadata {
            let json = serde_json::to_vec(meta).map_err(|e| Error::Config(e.to_string()))?;
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(&json);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4, "magic")? != UST1_MAGIC {
            return Err(Error::format(0, "not a UST1 file (bad magic)"));
        }
        let count = r.u32("tensor count")? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let start = r.at;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::format(start as u64 + 4, "tensor name is not UTF-8"))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::format(start as u64, format!("duplicate tensor name {name:?}")));
            }
            let dtype_at = r.at;
            let dtype = r.u32("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(Error::format(dtype_at as u64, format!("unsupported dtype code {dtype}")));
            }
            let rank_at = r.at;
            let rank = r.u32("rank")? as usize;
            if rank > 4 {
                return Err(Error::format(rank_at as u64, format!("rank {rank} exceeds 4")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            directory.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(directory.len());
        let mut needed = 0u64;
        for (_, shape) in &directory {
            let n = shape.iter().try_fold(1u64, |acc, &e| acc.checked_mul(e as u64));
            needed = n
                .and_then(|n| n.checked_mul(8))
                .and_then(|b| needed.checked_add(b))
                .ok_or_else(|| Error::format(r.at as u64, "payload size overflows"))?;
        }
        let available = (bytes.len() - r.at) as u64;
        if available < needed {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated payload: missing {} bytes", needed - available),
            ));
        }
        for (name, shape) in directory {
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n, "payload")?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let metadata = if r.at == bytes.len() {
            None
        } else {
            let start = r.at;
            let len = r.u64("metadata length")?;
            let remaining = (bytes.len() - r.at) as u64;
            if len != remaining {
                return Err(Error::format(
                    start as u64,
                    format!("metadata block declares {len} bytes but {remaining} follow"),
                ));
            }
            let json = r.take(len as usize, "metadata")?;
            Some(serde_json::from_slice(json).map_err(|e| Error::format(start as u64 + 8, format!("bad metadata JSON: {e}")))?)
        };
        Ok(Ust1 { tensors, metadata })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.at;
        if left < n {
            return Err(Error::format(
                self.at as u64,
                format!("truncated {what}: missing {} bytes", n - left),
            ));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn tag(err: Error, path: &Path) -> Error {
    match err {
        Error::Format { offset, msg } => Error::format(offset, format!("{}: {msg}", path.display())),
        other => other,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ust1(path: &Path) -> Result<Ust1> {
    Ust1::decode(&read_bytes(path)?).map_err(|e| tag(e, path))
}

pub fn write_ust1(path: &Path, file: &Ust1) -> Result<()> {
    write_bytes(path, &file.encode()?)
}

/// A binary greymap (one channel, P5) or pixmap (three channels, P6).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Row-major samples with interleaved channels.
    pub samples: Vec<u16>,
}

impl PnmImage {
    pub fn new(width: usize, height: usize, channels: usize, maxval: u16, samples: Vec<u16>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("PNM images have 1 or 3 channels, got {channels}")));
        }
        if maxval == 0 {
            return Err(Error::Domain("PNM maxval must be positive".into()));
        }
        if samples.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height}x{channels} image",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|&&s| s > maxval) {
            return Err(Error::Domain(format!("sample {bad} exceeds maxval {maxval}")));
        }
        Ok(PnmImage { width, height, channels, maxval, samples })
    }

    /// Quantizes values in `[0, 1]` as `round(x · maxval)`, clamping outliers.
    pub fn from_unit(width: usize, height: usize, channels: usize, maxval: u16, values: &[f64]) -> Result<Self> {
        let samples = values.iter().map(|&x| (x.clamp(0.0, 1.0) * maxval as f64).round() as u16).collect();
        Self::new(width, height, channels, maxval, samples)
    }

    pub fn to_unit(&self) -> Vec<f64> {
        let maxval = self.maxval as f64;
        self.samples.iter().map(|&s| s as f64 / maxval).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.samples.iter().map(|&s| s as u8));
        } else {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut at = 0usize;
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(Error::format(0, "not a binary PGM/PPM file (expected P5 or P6)")),
        };
        at += 2;
        fn field(bytes: &[u8], at: &mut usize, name: &str) -> Result<usize> {
            let mut i = *at;
            loop {
                match bytes.get(i) {
                    Some(b'#') => {
                        while bytes.get(i).is_some_and(|&b| b != b'\n') {
                            i += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => i += 1,
                    _ => break,
                }
            }
            let start = i;
            while bytes.get(i).is_some_and(u8::is_ascii_digit) {
                i += 1;
            }
            *at = i;
            std::str::from_utf8(&bytes[start..i])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(start as u64, format!("expected {name}")))
        }
        let width = field(bytes, &mut at, "width")?;
        let height = field(bytes, &mut at, "height")?;
        let maxval_at = at;
        let maxval = field(bytes, &mut at, "maxval")?;
        if maxval == 0 || maxval > 65535 {
            return Err(Error::format(maxval_at as u64, format!("maxval {maxval} outside 1..=65535")));
        }
        if !bytes.get(at).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::format(at as u64, "expected whitespace after maxval"));
        }
        at += 1;
        let wide = maxval > 255;
        let count = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(channels))
            .ok_or_else(|| Error::format(at as u64, "image extents overflow"))?;
        let needed = count * if wide { 2 } else { 1 };
        let raster = &bytes[at..];
        if raster.len() < needed {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated raster: missing {} bytes", needed - raster.len()),
            ));
        }
        if raster.len() > needed {
            return Err(Error::format((at + needed) as u64, "trailing bytes after raster"));
        }
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        if let Some(i) = samples.iter().position(|&s| s as usize > maxval) {
            return Err(Error::format(
                (at + i * if wide { 2 } else { 1 }) as u64,
                format!("sample exceeds maxval {maxval}"),
            ));
        }
        PnmImage::new(width, height, channels, maxval as u16, samples)
    }
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    PnmImage::decode(&read_bytes(path)?).map_err(|e| tag(e, path))
}

pub fn write_pnm(path: &Path, image: &PnmImage) -> Result<()> {
    write_bytes(path, &image.encode())
}

/// Single-channel 16-bit map of values in `[0, 1]`.
pub fn unit_map_pgm(height: usize, width: usize, values: &[f64]) -> Result<PnmImage> {
    PnmImage::from_unit(width, height, 1, u16::MAX, values)
}

/// Version of the dataset layout and manifest.
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: SceneConfig,
    pub seed: u64,
    pub n: usize,
}

pub const APPEARANCE_FILE: &str = "appearance.ppm";
pub const RANGE_FILE: &str = "range.ust";
pub const MASK_FILE: &str = "mask.pgm";
pub const CORRUPT_A_FILE: &str = "corrupt_a.pgm";
pub const CORRUPT_B_FILE: &str = "corrupt_b.pgm";
pub const MANIFEST_FILE: &str = "manifest.json";

fn binary_pgm(h: usize, w: usize, bits: &[u8]) -> PnmImage {
    PnmImage::new(w, h, 1, 255, bits.iter().map(|&b| b as u16 * 255).collect()).expect("binary map")
}

fn read_binary_pgm(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = read_pnm(path)?;
    if (img.height, img.width, img.channels) != (h, w, 1) {
        return Err(Error::Config(format!(
            "{}: expected a {h}x{w} greymap, got {}x{}x{}",
            path.display(),
            img.height,
            img.width,
            img.channels
        )));
    }
    img.samples
        .iter()
        .map(|&s| match s {
            0 => Ok(0),
            s if s == img.maxval => Ok(1),
            s => Err(Error::Config(format!("{}: binary map holds value {s}", path.display()))),
        })
        .collect()
}

pub fn sample_dir(root: &Path, index: usize) -> PathBuf {
    root.join(index.to_string())
}

/// Appearance is stored at 16 bits per channel, so a stored scene reads back
/// as its appearance rounded to multiples of 1/65535.
pub fn quantize_appearance(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&x| (x.clamp(0.0, 1.0) * 65535.0).round() / 65535.0).collect()
}

pub fn write_sample(dir: &Path, s: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (s.height, s.width);
    write_pnm(&dir.join(APPEARANCE_FILE), &PnmImage::from_unit(w, h, 3, u16::MAX, &s.appearance)?)?;
    let range = Ust1 { tensors: vec![("range".into(), s.range_tensor().reshape(&[3, h, w])?)], metadata: None };
    write_ust1(&dir.join(RANGE_FILE), &range)?;
    write_pnm(&dir.join(MASK_FILE), &binary_pgm(h, w, &s.mask))?;
    write_pnm(&dir.join(CORRUPT_A_FILE), &binary_pgm(h, w, &s.corrupt_a))?;
    write_pnm(&dir.join(CORRUPT_B_FILE), &binary_pgm(h, w, &s.corrupt_b))
}

pub fn read_sample(dir: &Path, h: usize, w: usize) -> Result<SceneSample> {
    let img = read_pnm(&dir.join(APPEARANCE_FILE))?;
    if (img.height, img.width, img.channels) != (h, w, 3) {
        return Err(Error::Config(format!(
            "{}: expected a {h}x{w} colour image, got {}x{}x{}",
            dir.join(APPEARANCE_FILE).display(),
            img.height,
            img.width,
            img.channels
        )));
    }
    let range_path = dir.join(RANGE_FILE);
    let range = read_ust1(&range_path)?;
    let range = range
        .get("range")
        .ok_or_else(|| Error::Config(format!("{}: no tensor named \"range\"", range_path.display())))?;
    if range.shape() != [3, h, w] {
        return Err(Error::Config(format!(
            "{}: range has shape {:?}, expected [3, {h}, {w}]",
            range_path.display(),
            range.shape()
        )));
    }
    let appearance = Tensor::new(vec![h, w, 3], img.to_unit())?;
    let planar = Tensor::from_fn(&[3, h, w], |i| appearance.data()[3 * (i % (h * w)) + i / (h * w)]);
    SceneSample::from_planar(
        &planar,
        range,
        read_binary_pgm(&dir.join(MASK_FILE), h, w)?,
        read_binary_pgm(&dir.join(CORRUPT_A_FILE), h, w)?,
        read_binary_pgm(&dir.join(CORRUPT_B_FILE), h, w)?,
    )
}

/// Writes `<root>/<index>/…` for every sample plus `<root>/manifest.json`.
pub fn write_dataset(root: &Path, config: &SceneConfig, seed: u64, samples: &[SceneSample]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(&sample_dir(root, i), s)?;
    }
    let manifest = Manifest { format_version: DATASET_FORMAT_VERSION, config: config.clone(), seed, n: samples.len() };
    let mut json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    json.push(b'\n');
    write_bytes(&root.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_bytes(&path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported dataset format version {}",
            path.display(),
            manifest.format_version
        )));
    }
    manifest.config.validate()?;
    Ok(manifest)
}

pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<SceneSample>)> {
    let manifest = read_manifest(root)?;
    let (h, w) = (manifest.config.height, manifest.config.width);
    let samples = (0..manifest.n)
        .map(|i| {
            let dir = sample_dir(root, i);
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "manifest lists {} samples but {} is missing",
                    manifest.n,
                    dir.display()
                )));
            }
            read_sample(&dir, h, w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

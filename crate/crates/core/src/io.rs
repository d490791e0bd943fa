//! File formats: binary PGM images, the part-model document and the
//! registration-result document. Every write goes through a temporary file
//! in the destination directory followed by a rename.
//!
//! Documents are JSON. Floats are written in shortest round-trip form and
//! parsed exactly, so save followed by load reproduces every value bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Descriptor};
use crate::energy::LatentParams;
use crate::error::{Error, FormatError, Result};
use crate::geometry::{Image, Point2, WarpParams};
use crate::parts::PartModel;
use crate::solver::{RegistrationResult, ScaleResult};

pub const MODEL_FORMAT: &str = "partreg-model";
pub const RESULT_FORMAT: &str = "partreg-result";
pub const DOC_VERSION: u32 = 1;

/// Writes through `fill` into a temporary sibling of `path`, then renames it
/// into place. Missing parent directories are created.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut BufWriter<&mut File>) -> std::io::Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

// ---------------------------------------------------------------- PGM

/// Encodes 8-bit grayscale samples as binary PGM (P5).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_gray8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_pgm(width, height, pixels);
    write_atomic(path, |w| w.write_all(&bytes))
}

/// Quantizes to 8 bits with round-half-up.
pub fn image_to_gray8(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect()
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    write_gray8(path, img.width(), img.height(), &image_to_gray8(img))
}

/// Decodes a binary PGM with any maxval up to 65535, scaling samples to `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Image, FormatError> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, FormatError> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(FormatError::Header("unexpected end of PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err(FormatError::BadMagic);
    }
    let mut num = |what: &str| -> std::result::Result<usize, FormatError> {
        token()?
            .parse::<usize>()
            .map_err(|_| FormatError::Header(format!("invalid PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(FormatError::Header(format!("unsupported PGM {width}x{height} maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let expected = start + width * height * bps;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let raster = &bytes[start..expected];
    let data = if bps == 1 {
        raster.iter().map(|&b| (b as f64 / maxval as f64).min(1.0)).collect()
    } else {
        raster
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64).min(1.0))
            .collect()
    };
    Image::new(height, width, data).map_err(|e| FormatError::Header(e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(Error::from)
}

/// Sorted list of `*.pgm` files in a directory.
pub fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------- documents

#[derive(Debug, Serialize, Deserialize)]
struct PartDoc {
    location: [f64; 2],
    descriptor: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u32,
    part_count: usize,
    grid: [usize; 2],
    patch_size: usize,
    backbone: BackboneSpec,
    parts: Vec<PartDoc>,
}

pub fn model_to_string(model: &PartModel) -> Result<String> {
    let doc = ModelDoc {
        format: MODEL_FORMAT.into(),
        version: DOC_VERSION,
        part_count: model.len(),
        grid: [model.grid.0, model.grid.1],
        patch_size: model.patch_size,
        backbone: model.backbone.clone(),
        parts: model
            .locations
            .iter()
            .zip(&model.descriptors)
            .map(|(p, d)| PartDoc {
                location: [p.x, p.y],
                descriptor: d.values().to_vec(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| FormatError::Document(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn model_from_str(s: &str) -> Result<PartModel> {
    let doc: ModelDoc = serde_json::from_str(s).map_err(|e| FormatError::Document(e.to_string()))?;
    if doc.format != MODEL_FORMAT {
        return Err(FormatError::Document(format!("expected a {MODEL_FORMAT} document, got {}", doc.format)).into());
    }
    if doc.version != DOC_VERSION {
        return Err(FormatError::Version(doc.version).into());
    }
    if doc.part_count != doc.parts.len() {
        return Err(FormatError::Document(format!(
            "part_count {} but {} parts listed",
            doc.part_count,
            doc.parts.len()
        ))
        .into());
    }
    let model = PartModel {
        locations: doc.parts.iter().map(|p| Point2::new(p.location[0], p.location[1])).collect(),
        descriptors: doc.parts.into_iter().map(|p| Descriptor(p.descriptor)).collect(),
        backbone: doc.backbone,
        grid: (doc.grid[0], doc.grid[1]),
        patch_size: doc.patch_size,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &PartModel) -> Result<()> {
    let s = model_to_string(model)?;
    write_atomic(path, |w| w.write_all(s.as_bytes()))
}

pub fn load_model(path: &Path) -> Result<PartModel> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpDoc {
    pub scale: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub angle: f64,
}

impl From<WarpParams> for WarpDoc {
    fn from(w: WarpParams) -> Self {
        Self {
            scale: w.scale,
            shift_x: w.shift_x,
            shift_y: w.shift_y,
            angle: w.angle,
        }
    }
}

impl From<&WarpDoc> for WarpParams {
    fn from(w: &WarpDoc) -> Self {
        WarpParams::new(w.scale, w.shift_x, w.shift_y, w.angle)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentDoc {
    pub base_scale: f64,
    pub w: Vec<f64>,
    pub v: [f64; 4],
}

impl From<&LatentParams> for LatentDoc {
    fn from(l: &LatentParams) -> Self {
        Self {
            base_scale: l.base_scale,
            w: l.w.clone(),
            v: l.v,
        }
    }
}

impl From<&LatentDoc> for LatentParams {
    fn from(l: &LatentDoc) -> Self {
        LatentParams {
            w: l.w.clone(),
            v: l.v,
            base_scale: l.base_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleDoc {
    pub base_scale: f64,
    pub loss: f64,
    pub warp: WarpDoc,
    pub latents: LatentDoc,
    pub iterations: usize,
}

/// Registration output as written by the `register` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultDoc {
    pub format: String,
    pub version: u32,
    /// File name of the registered input, if known.
    pub input: Option<String>,
    pub warp: WarpDoc,
    pub base_scale: f64,
    pub loss: f64,
    pub disturbances: Vec<[f64; 2]>,
    pub latents: LatentDoc,
    pub per_scale: Vec<ScaleDoc>,
}

impl ResultDoc {
    pub fn from_result(r: &RegistrationResult, input: Option<String>) -> Self {
        let chosen = r
            .per_scale
            .iter()
            .find(|s| s.base_scale == r.base_scale)
            .expect("chosen scale is in the table");
        Self {
            format: RESULT_FORMAT.into(),
            version: DOC_VERSION,
            input,
            warp: r.warp.into(),
            base_scale: r.base_scale,
            loss: r.loss,
            disturbances: r.disturbances.iter().map(|e| [e.x, e.y]).collect(),
            latents: (&chosen.latents).into(),
            per_scale: r.per_scale.iter().map(scale_doc).collect(),
        }
    }

    pub fn warp_params(&self) -> WarpParams {
        (&self.warp).into()
    }

    pub fn latent_params(&self) -> LatentParams {
        (&self.latents).into()
    }

    pub fn to_string_pretty(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| FormatError::Document(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let doc: ResultDoc = serde_json::from_str(s).map_err(|e| FormatError::Document(e.to_string()))?;
        if doc.format != RESULT_FORMAT {
            return Err(FormatError::Document(format!("expected a {RESULT_FORMAT} document, got {}", doc.format)).into());
        }
        if doc.version != DOC_VERSION {
            return Err(FormatError::Version(doc.version).into());
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.to_string_pretty()?;
        write_atomic(path, |w| w.write_all(s.as_bytes()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s)
    }
}

fn scale_doc(s: &ScaleResult) -> ScaleDoc {
    ScaleDoc {
        base_scale: s.base_scale,
        loss: s.loss,
        warp: s.warp().into(),
        latents: (&s.latents).into(),
        iterations: s.trace.len(),
    }
}

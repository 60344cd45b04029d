use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{Click, ClickSet};
use crate::tensor::Array3;

use super::{ClassMask, Dataset, LabeledImage, SceneSpec};

/// Image storage format on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// Raw little-endian `f32` with a JSON sidecar holding the dimensions.
    #[default]
    F32,
    /// Binary 8-bit PPM; lossy.
    Ppm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: Option<SceneSpec>,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    #[serde(default)]
    pub format: ImageFormat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct F32Dims {
    height: usize,
    width: usize,
    channels: usize,
}

const META: &str = "meta.json";
const SUFFIXES: [&str; 5] = [".f32.json", ".f32", ".ppm", ".mask.pgm", ".clicks.json"];

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_all(path, text.as_bytes())
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_all(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel image in `[0, 1]` as binary P6.
pub fn write_ppm(path: &Path, image: &Array3) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {}", image.channels())));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend(image.as_slice().iter().map(|&v| quantize(v)));
    write_all(path, &out)
}

/// Writes class indices as binary P5 with maxval 255.
pub fn write_pgm(path: &Path, mask: &ClassMask) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    write_all(path, &out)
}

/// Parses a netpbm header: magic plus three integers, `#` comments allowed.
fn netpbm_header(path: &Path, reader: &mut impl BufRead, magic: &str) -> Result<(usize, usize)> {
    let mut tokens = Vec::with_capacity(4);
    let mut token = String::new();
    let mut byte = [0u8; 1];
    let mut comment = false;
    while tokens.len() < 4 {
        let n = reader.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "truncated header"));
        }
        let ch = byte[0] as char;
        if comment {
            comment = ch != '\n';
            continue;
        }
        if ch == '#' {
            comment = true;
        } else if ch.is_ascii_whitespace() {
            if !token.is_empty() {
                tokens.push(std::mem::take(&mut token));
            }
        } else {
            token.push(ch);
        }
    }
    if tokens[0] != magic {
        return Err(Error::format(path, format!("expected {magic}, found {:?}", tokens[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(path, format!("bad header number {s:?}")))
    };
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::format(path, format!("only maxval 255 is supported, got {maxval}")));
    }
    Ok((h, w))
}

fn read_body(path: &Path, reader: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    let mut body = Vec::with_capacity(len);
    reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != len {
        return Err(Error::format(path, format!("expected {len} data bytes, found {}", body.len())));
    }
    Ok(body)
}

pub fn read_ppm(path: &Path) -> Result<Array3> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let (h, w) = netpbm_header(path, &mut r, "P6")?;
    let body = read_body(path, &mut r, h * w * 3)?;
    Array3::from_vec(h, w, 3, body.into_iter().map(|b| b as f64 / 255.0).collect())
}

pub fn read_pgm(path: &Path) -> Result<ClassMask> {
    let mut r = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let (h, w) = netpbm_header(path, &mut r, "P5")?;
    let body = read_body(path, &mut r, h * w)?;
    ClassMask::new(h, w, body)
}

fn write_f32(path: &Path, image: &Array3) -> Result<()> {
    let mut f = std::io::BufWriter::new(create(path)?);
    for &v in image.as_slice() {
        f.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    let (height, width, channels) = image.dims();
    to_json(
        &sidecar(path),
        &F32Dims {
            height,
            width,
            channels,
        },
    )
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_f32(path: &Path) -> Result<Array3> {
    let dims: F32Dims = from_json(&sidecar(path))?;
    let bytes = read_all(path)?;
    let len = dims.height * dims.width * dims.channels;
    if bytes.len() != 4 * len {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {}x{}x{}, found {}", 4 * len, dims.height, dims.width, dims.channels, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array3::from_vec(dims.height, dims.width, dims.channels, data)
}

/// Writes every item plus `meta.json` into `dir`, creating it if needed.
pub fn save_dataset(dataset: &Dataset, dir: &Path, format: ImageFormat) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for item in &dataset.items {
        let base = dir.join(&item.id);
        match format {
            ImageFormat::F32 => write_f32(&with_suffix(&base, ".f32"), &item.image)?,
            ImageFormat::Ppm => write_ppm(&with_suffix(&base, ".ppm"), &item.image)?,
        }
        write_pgm(&with_suffix(&base, ".mask.pgm"), &item.mask)?;
        to_json(&with_suffix(&base, ".clicks.json"), &item.clicks.entries())?;
    }
    to_json(
        &dir.join(META),
        &DatasetMeta {
            spec: dataset.spec.clone(),
            classes: dataset.classes,
            height: dataset.height,
            width: dataset.width,
            count: dataset.len(),
            format,
        },
    )
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads a dataset written by [`save_dataset`]. Items are ordered by id. An
/// empty directory yields an empty dataset.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    let mut has_meta = false;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == META {
            has_meta = true;
            continue;
        }
        if let Some(stem) = SUFFIXES.iter().find_map(|s| name.strip_suffix(s)) {
            ids.insert(stem.to_string());
        }
    }
    if !has_meta {
        if ids.is_empty() {
            return Ok(Dataset {
                classes: 0,
                height: 0,
                width: 0,
                spec: None,
                items: Vec::new(),
            });
        }
        return Err(Error::format(&dir.join(META), "missing dataset metadata"));
    }
    let meta: DatasetMeta = from_json(&dir.join(META))?;
    let mut items = Vec::with_capacity(ids.len());
    for id in ids {
        let base = dir.join(&id);
        let need = |suffix: &str| {
            let p = with_suffix(&base, suffix);
            if p.is_file() {
                Ok(p)
            } else {
                Err(Error::InvalidInput(format!("item {id}: missing {}", p.display())))
            }
        };
        let image = match meta.format {
            ImageFormat::F32 => read_f32(&need(".f32")?)?,
            ImageFormat::Ppm => read_ppm(&need(".ppm")?)?,
        };
        let mask = read_pgm(&need(".mask.pgm")?)?;
        let clicks_path = need(".clicks.json")?;
        let raw: Vec<Click> = from_json(&clicks_path)?;
        let clicks = ClickSet::new(mask.height(), mask.width(), meta.classes, raw)
            .map_err(|e| Error::format(&clicks_path, e.to_string()))?;
        let item = LabeledImage {
            id: id.clone(),
            image,
            mask,
            clicks,
        };
        item.validate(meta.classes)?;
        items.push(item);
    }
    if items.len() != meta.count {
        return Err(Error::format(
            &dir.join(META),
            format!("metadata lists {} items but {} were found", meta.count, items.len()),
        ));
    }
    let dataset = Dataset {
        classes: meta.classes,
        height: meta.height,
        width: meta.width,
        spec: meta.spec,
        items,
    };
    dataset.validate()?;
    Ok(dataset)
}

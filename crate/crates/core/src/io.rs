//! File formats: grayscale PNG/PGM images, binary masks, signed distance
//! dumps and phantom dataset directories.
//!
//! A dataset directory holds `images/NNNN.png`, `masks/NNNN.png` and
//! `manifest.txt`. The manifest is line-oriented; `#` starts a comment.
//! Header lines are single `key=value` pairs describing the generator;
//! every other line describes one sample as space-separated pairs:
//!
//! ```text
//! index=0 seed=1234 split=train image=images/0000.png mask=masks/0000.png
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imgproc::{ImageGrid, MaskGrid};
use crate::phantom::{PhantomConfig, PhantomDataset, Split};
use crate::sdt::SignedDistanceMap;

pub const SDM_MAGIC: &str = "BAVTSDM1";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn open_gray(path: &Path) -> Result<DynamicImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) => Ok(img),
        other => Err(Error::format(path, format!("expected a grayscale image, found {:?}", other.color()))),
    }
}

/// Reads an 8- or 16-bit grayscale PNG/PGM into `[0, 1]`.
pub fn read_image(path: &Path) -> Result<ImageGrid> {
    let img = open_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => other.into_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
    };
    ImageGrid::new(h, w, data)
}

fn save_gray(path: &Path, h: usize, w: usize, pixels: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dims");
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if !is_pgm {
        return buf.save(path).map_err(|e| Error::format(path, e.to_string()));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(buf.as_raw(), w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes an 8-bit image; the format follows the extension (`.png`, `.pgm`).
pub fn write_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let px = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_gray(path, image.height(), image.width(), px)
}

/// Reads a mask stored as 0/255; any other level is rejected.
pub fn read_mask(path: &Path) -> Result<MaskGrid> {
    let img = open_gray(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for &Luma([v]) in img.pixels() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            _ => return Err(Error::format(path, format!("mask level {v} is neither 0 nor 255"))),
        }
    }
    MaskGrid::new(h, w, data)
}

pub fn write_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    save_gray(path, mask.height(), mask.width(), mask.data().iter().map(|&m| m * 255).collect())
}

/// Float-grid dump: a magic line, a `height width` line, then row-major
/// little-endian doubles.
pub fn write_sdm(path: &Path, sdm: &SignedDistanceMap) -> Result<()> {
    let mut out = format!("{SDM_MAGIC}\n{} {}\n", sdm.height(), sdm.width()).into_bytes();
    for v in sdm.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_sdm(path: &Path) -> Result<SignedDistanceMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(SDM_MAGIC.as_bytes()) {
        return Err(Error::format(path, "not a signed distance dump (bad magic)"));
    }
    let dims = lines.next().and_then(|l| std::str::from_utf8(l).ok()).unwrap_or("");
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [h, w] = parsed[..] else {
        return Err(Error::format(path, format!("bad dimension line `{dims}`")));
    };
    let body = lines.next().unwrap_or(&[]);
    if body.len() != 8 * h * w {
        return Err(Error::format(path, format!("expected {} value bytes, found {}", 8 * h * w, body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    SignedDistanceMap::from_values(h, w, data)
}

/// Visualisation: inside (negative) in red, outside in blue, brightness
/// proportional to distance relative to the largest magnitude.
pub fn write_sdm_png(path: &Path, sdm: &SignedDistanceMap) -> Result<()> {
    let max = sdm.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut img = RgbImage::new(sdm.width() as u32, sdm.height() as u32);
    for (i, &v) in sdm.data().iter().enumerate() {
        let level = (55.0 + 200.0 * v.abs() / max).round() as u8;
        let px = if v < 0.0 { Rgb([level, 0, 0]) } else { Rgb([0, 0, level]) };
        img.put_pixel((i % sdm.width()) as u32, (i / sdm.width()) as u32, px);
    }
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Header pairs in file order.
    pub header: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("# phantom dataset manifest\n");
        for (k, v) in &self.header {
            out.push_str(&format!("{k}={v}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "index={} seed={} split={} image={} mask={}\n",
                e.index,
                e.seed,
                e.split,
                e.image.display(),
                e.mask.display()
            ));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut header = Vec::new();
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::format(path, format!("line {}: {msg}", n + 1));
            let pairs: Vec<(&str, &str)> = line
                .split_whitespace()
                .map(|tok| tok.split_once('=').ok_or_else(|| bad(format!("`{tok}` is not key=value"))))
                .collect::<Result<_>>()?;
            if pairs.len() == 1 && pairs[0].0 != "index" {
                header.push((pairs[0].0.to_string(), pairs[0].1.to_string()));
                continue;
            }
            let map: BTreeMap<&str, &str> = pairs.into_iter().collect();
            let field = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
            entries.push(ManifestEntry {
                index: field("index")?.parse().map_err(|_| bad("bad index".into()))?,
                seed: field("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
                split: field("split")?.parse().map_err(|e: Error| bad(e.to_string()))?,
                image: PathBuf::from(field("image")?),
                mask: PathBuf::from(field("mask")?),
            });
        }
        Ok(Self { header, entries })
    }
}

fn template_header(t: &PhantomConfig) -> Vec<(String, String)> {
    [
        ("size", t.size.to_string()),
        ("n_trees", t.n_trees.to_string()),
        ("branch_depth", t.branch_depth.to_string()),
        ("width_root", t.width_root.to_string()),
        ("width_decay", t.width_decay.to_string()),
        ("noise_std", t.noise_std.to_string()),
        ("background_level", t.background_level.to_string()),
        ("vessel_contrast", t.vessel_contrast.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Writes images, masks and the manifest; returns the manifest.
pub fn write_dataset(dir: &Path, ds: &PhantomDataset) -> Result<Manifest> {
    let mut header = vec![
        ("n".to_string(), ds.samples.len().to_string()),
        ("seed".to_string(), ds.seed.to_string()),
        ("split_ratio".to_string(), ds.split_ratio.to_string()),
    ];
    header.extend(template_header(&ds.template));
    let mut entries = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let image = PathBuf::from(format!("images/{:04}.png", s.index));
        let mask = PathBuf::from(format!("masks/{:04}.png", s.index));
        write_image(&dir.join(&image), &s.image)?;
        write_mask(&dir.join(&mask), &s.mask)?;
        entries.push(ManifestEntry { index: s.index, seed: s.seed, split: s.split, image, mask });
    }
    let manifest = Manifest { header, entries };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.render()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::parse(&text, &path)
}

/// One loaded sample with its display name (the image file stem).
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub name: String,
    pub image: ImageGrid,
    pub mask: MaskGrid,
}

/// Loads every sample of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<LoadedSample>> {
    let manifest = read_manifest(dir)?;
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let pair = |err: Error| {
                Error::format(dir.join(&e.mask), format!("pair {} / {}: {err}", e.image.display(), e.mask.display()))
            };
            let image = read_image(&dir.join(&e.image)).map_err(pair)?;
            let mask = read_mask(&dir.join(&e.mask)).map_err(pair)?;
            if image.dims() != mask.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "{}: image {:?} vs mask {:?}",
                    e.image.display(),
                    image.dims(),
                    mask.dims()
                )));
            }
            let name = e.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(LoadedSample { name, image, mask })
        })
        .collect()
}

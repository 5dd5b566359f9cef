//! On-disk dataset: a manifest plus one PNG per image.
//!
//! ```text
//! # liveness-manifest v1; size=64x64; seed=7; image=png-rgb8
//! d0/real_00000.png,1,0
//! d0/spoof_00000.png,0,0
//! ```
//!
//! The first line is the header; every following line is
//! `path,label,domain` with `path` relative to the manifest's directory,
//! `label` 1 for real and 0 for spoof. Images are 8-bit RGB PNG (16-bit is
//! also accepted when loading), mapped to `[0, 1]` by `v / 255`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::diffcore::Tensor;
use crate::error::{at_path, Error, Result};
use crate::{Label, LabeledImage};

pub const IMAGE_FORMAT: &str = "png-rgb8";
const MAGIC: &str = "liveness-manifest v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: PathBuf,
    pub label: Label,
    pub domain: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub image_format: String,
    pub rows: Vec<ManifestRow>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<LabeledImage>,
}

impl Manifest {
    pub fn header_line(&self) -> String {
        format!(
            "# {MAGIC}; size={}x{}; seed={}; image={}",
            self.height, self.width, self.seed, self.image_format
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.path.to_string_lossy(),
                r.label.value(),
                r.domain
            ));
        }
        out
    }

    /// Parses manifest text; `source` is only used in error messages.
    pub fn parse(text: &str, source: &Path) -> Result<Manifest> {
        let err = |row: usize, message: String| Error::Manifest {
            path: source.to_path_buf(),
            row,
            message,
        };
        let mut lines = BufReader::new(text.as_bytes()).lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| err(0, "empty manifest".into()))?;
        let body = header
            .strip_prefix('#')
            .map(str::trim)
            .ok_or_else(|| err(0, "missing '# liveness-manifest v1' header".into()))?;
        let mut fields = body.split(';').map(str::trim);
        if fields.next() != Some(MAGIC) {
            return Err(err(0, format!("unsupported header {header:?}")));
        }
        let (mut size, mut seed, mut format) = (None, None, None);
        for f in fields.filter(|f| !f.is_empty()) {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| err(0, format!("malformed header field {f:?}")))?;
            match k.trim() {
                "size" => {
                    let (h, w) = v
                        .split_once('x')
                        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
                        .ok_or_else(|| err(0, format!("bad size {v:?}")))?;
                    size = Some((h, w));
                }
                "seed" => {
                    seed = Some(
                        v.trim()
                            .parse()
                            .map_err(|_| err(0, format!("bad seed {v:?}")))?,
                    )
                }
                "image" => format = Some(v.trim().to_string()),
                _ => {}
            }
        }
        let (height, width) = size.ok_or_else(|| err(0, "header lacks size=HxW".into()))?;

        let rest: String = text.split_once('\n').map(|x| x.1).unwrap_or("").to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(rest.as_bytes());
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| err(row, e.to_string()))?;
            if rec.len() != 3 {
                return Err(err(row, format!("expected path,label,domain, got {} fields", rec.len())));
            }
            let path = PathBuf::from(&rec[0]);
            let label = rec[1]
                .parse::<u8>()
                .ok()
                .and_then(Label::from_value)
                .ok_or_else(|| err(row, format!("label must be 0 or 1, got {:?}", &rec[1])))?;
            let domain = rec[2]
                .parse::<usize>()
                .map_err(|_| err(row, format!("bad domain id {:?}", &rec[2])))?;
            if !seen.insert(path.clone()) {
                return Err(err(row, format!("duplicate path {}", path.display())));
            }
            rows.push(ManifestRow {
                path,
                label,
                domain,
            });
        }
        Ok(Manifest {
            height,
            width,
            seed: seed.unwrap_or(0),
            image_format: format.unwrap_or_else(|| IMAGE_FORMAT.to_string()),
            rows,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::InvalidArgument(format!(
            "expected an H×W×3 image, got {:?}",
            img.shape()
        )));
    };
    let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer sized from shape");
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn load_png(path: &Path) -> std::result::Result<(usize, usize, Vec<f64>), image::ImageError> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageRgb16(buf) => {
            buf.into_raw().into_iter().map(|v| f64::from(v) / 65535.0).collect()
        }
        image::DynamicImage::ImageRgba16(_) | image::DynamicImage::ImageLuma16(_) => img
            .to_rgb16()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
    };
    Ok((h, w, data))
}

/// Writes every image as a PNG under `dir` and a `manifest.csv` next to
/// them. Image files are named `d{domain}/{real|spoof}_{index:05}.png`.
pub fn write_dataset(dir: &Path, images: &[LabeledImage], seed: u64) -> Result<(PathBuf, Manifest)> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no images to write".into()))?;
    let &[height, width, 3] = first.image.shape() else {
        return Err(Error::InvalidArgument("images must be H×W×3".into()));
    };
    fs::create_dir_all(dir)?;
    let mut counters = std::collections::BTreeMap::<(usize, Label), usize>::new();
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        img.image.expect_shape(&[height, width, 3])?;
        let n = counters.entry((img.domain, img.label)).or_insert(0);
        let kind = match img.label {
            Label::Real => "real",
            Label::Spoof => "spoof",
        };
        let rel = PathBuf::from(format!("d{}", img.domain)).join(format!("{kind}_{n:05}.png"));
        *n += 1;
        let full = dir.join(&rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        save_png(&full, &img.image)?;
        rows.push(ManifestRow {
            path: rel,
            label: img.label,
            domain: img.domain,
        });
    }
    let manifest = Manifest {
        height,
        width,
        seed,
        image_format: IMAGE_FORMAT.to_string(),
        rows,
    };
    let path = dir.join("manifest.csv");
    let mut f = fs::File::create(&path)?;
    f.write_all(manifest.to_text().as_bytes())?;
    Ok((path, manifest))
}

/// Reads a manifest and decodes every image it lists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(at_path(path))?;
    let manifest = Manifest::parse(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut images = Vec::with_capacity(manifest.rows.len());
    for (i, row) in manifest.rows.iter().enumerate() {
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            row: i + 1,
            message,
        };
        let file = base.join(&row.path);
        if !file.is_file() {
            return Err(err(format!("missing image file {}", file.display())));
        }
        let (h, w, data) =
            load_png(&file).map_err(|e| err(format!("cannot decode {}: {e}", file.display())))?;
        if (h, w) != (manifest.height, manifest.width) {
            return Err(err(format!(
                "{} is {h}x{w}, manifest says {}x{}",
                file.display(),
                manifest.height,
                manifest.width
            )));
        }
        images.push(LabeledImage {
            image: Tensor::new(vec![h, w, 3], data)?,
            label: row.label,
            domain: row.domain,
        });
    }
    Ok(Dataset { manifest, images })
}

//! Pseudo-discretized label encoding.
//!
//! An anchor image exchanges a rectangular patch with a partner of the
//! opposite class. The patch area is driven by a discrete ratio `u / K` and
//! the resulting label is the exact fraction of pixels that came from the
//! real image, computed from integer pixel counts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::{Label, LabeledImage};

/// Which halves of the encoding are active. `Full` is the method itself; the
/// other modes exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncodingMode {
    /// Patch exchange with exact real-fraction labels.
    #[default]
    Full,
    /// Patch exchange, but the label stays the anchor's binary class.
    PatchOnly,
    /// No exchange; selected anchors get their target moved one bin toward
    /// the opposite class (`1 - 1/K` for real, `1/K` for spoof).
    LabelOnly,
    /// Pass-through: binary targets on unmodified images.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdleConfig {
    /// Discretization level, `K >= 1`.
    pub k: usize,
    /// Probability that an anchor is exchanged.
    pub p_apply: f64,
    /// Base seed for the per-batch streams the trainer derives.
    pub rng_seed: u64,
    #[serde(default)]
    pub mode: EncodingMode,
}

impl Default for PdleConfig {
    fn default() -> Self {
        PdleConfig {
            k: 10,
            p_apply: 0.5,
            rng_seed: 0,
            mode: EncodingMode::Full,
        }
    }
}

impl PdleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_apply) {
            return Err(Error::InvalidArgument(format!(
                "p_apply must lie in [0, 1], got {}",
                self.p_apply
            )));
        }
        Ok(())
    }
}

/// Axis-aligned pixel rectangle, fully inside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl ExchangeBox {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRecord {
    pub u: usize,
    pub lambda_nominal: f64,
    #[serde(rename = "box")]
    pub bbox: ExchangeBox,
    pub lambda_effective: f64,
    pub anchor_is_real: bool,
    pub y_tilde: f64,
    /// Pixels (not channel values) that came from the real image.
    pub real_pixels: usize,
    pub total_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub image: Tensor,
    pub y_tilde: f64,
    pub domain: usize,
    /// Class of the anchor the sample was built from.
    pub anchor_label: Label,
    pub record: Option<ExchangeRecord>,
}

/// Draws `u ~ U{1..K}` and returns `(u, u / K)`.
pub fn sample_lambda<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<(usize, f64)> {
    if k < 1 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let u = rng.random_range(1..=k);
    Ok((u, u as f64 / k as f64))
}

/// Box with sides `round(H·√λ)` × `round(W·√λ)` (each clamped to at least one
/// pixel) at a uniformly random position fully inside the image. Returns the
/// box and its exact area fraction.
pub fn make_mask<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    lambda: f64,
    rng: &mut R,
) -> Result<(ExchangeBox, f64)> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("image extent must be positive".into()));
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must lie in (0, 1], got {lambda}"
        )));
    }
    let side = lambda.sqrt();
    let bh = ((height as f64 * side).round() as usize).clamp(1, height);
    let bw = ((width as f64 * side).round() as usize).clamp(1, width);
    let top = rng.random_range(0..=height - bh);
    let left = rng.random_range(0..=width - bw);
    let bbox = ExchangeBox {
        top,
        left,
        height: bh,
        width: bw,
    };
    let effective = bbox.area() as f64 / (height * width) as f64;
    Ok((bbox, effective))
}

fn image_hw(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "expected an H×W×3 image, got {:?}",
            t.shape()
        ))),
    }
}

/// Fills `bbox` of the anchor with the partner's pixels. Returns the new
/// image and the real-pixel fraction.
pub fn exchange(
    anchor: &LabeledImage,
    partner: &LabeledImage,
    bbox: &ExchangeBox,
) -> Result<(Tensor, f64)> {
    let (image, record) = exchange_with_counts(anchor, partner, bbox)?;
    Ok((image, record.0 as f64 / record.1 as f64))
}

/// Returns the exchanged image and `(real_pixels, total_pixels)`.
fn exchange_with_counts(
    anchor: &LabeledImage,
    partner: &LabeledImage,
    bbox: &ExchangeBox,
) -> Result<(Tensor, (usize, usize))> {
    if anchor.label == partner.label {
        return Err(Error::SameClassPair(anchor.label));
    }
    let (h, w) = image_hw(&anchor.image)?;
    partner.image.expect_shape(anchor.image.shape())?;
    if bbox.height == 0
        || bbox.width == 0
        || bbox.top + bbox.height > h
        || bbox.left + bbox.width > w
    {
        return Err(Error::InvalidArgument(format!(
            "box {bbox:?} does not fit inside a {h}×{w} image"
        )));
    }
    let mut out = anchor.image.clone();
    let src = partner.image.data();
    let dst = out.data_mut();
    for y in bbox.top..bbox.top + bbox.height {
        let row = (y * w + bbox.left) * 3..(y * w + bbox.left + bbox.width) * 3;
        dst[row.clone()].copy_from_slice(&src[row]);
    }
    let total = h * w;
    let inside = bbox.area();
    let real = match anchor.label {
        Label::Real => total - inside,
        Label::Spoof => inside,
    };
    Ok((out, (real, total)))
}

/// Source of exchange partners.
pub trait OppositePool {
    /// Draws a sample of class `class`, or `None` if there is none.
    fn draw<R: Rng + ?Sized>(&self, class: Label, rng: &mut R) -> Option<LabeledImage>;
}

/// Uniform draw over every image of the requested class, regardless of
/// domain.
#[derive(Debug, Clone)]
pub struct ClassPool<'a> {
    images: &'a [LabeledImage],
    real: Vec<usize>,
    spoof: Vec<usize>,
}

impl<'a> ClassPool<'a> {
    pub fn new(images: &'a [LabeledImage]) -> ClassPool<'a> {
        let (mut real, mut spoof) = (Vec::new(), Vec::new());
        for (i, img) in images.iter().enumerate() {
            match img.label {
                Label::Real => real.push(i),
                Label::Spoof => spoof.push(i),
            }
        }
        ClassPool {
            images,
            real,
            spoof,
        }
    }

    pub fn indices(&self, class: Label) -> &[usize] {
        match class {
            Label::Real => &self.real,
            Label::Spoof => &self.spoof,
        }
    }

    /// Draws the index of a sample of `class`.
    pub fn draw_index<R: Rng + ?Sized>(&self, class: Label, rng: &mut R) -> Option<usize> {
        let idx = self.indices(class);
        (!idx.is_empty()).then(|| idx[rng.random_range(0..idx.len())])
    }

    pub fn images(&self) -> &'a [LabeledImage] {
        self.images
    }
}

impl OppositePool for ClassPool<'_> {
    fn draw<R: Rng + ?Sized>(&self, class: Label, rng: &mut R) -> Option<LabeledImage> {
        self.draw_index(class, rng).map(|i| self.images[i].clone())
    }
}

fn pass_through(anchor: &LabeledImage, y_tilde: f64) -> EncodedSample {
    EncodedSample {
        image: anchor.image.clone(),
        y_tilde,
        domain: anchor.domain,
        anchor_label: anchor.label,
        record: None,
    }
}

/// Encodes one anchor. The draw order is fixed (apply coin, partner, `u`,
/// box position) so that a given stream always yields the same sample.
pub fn encode_one<P: OppositePool, R: Rng + ?Sized>(
    anchor: &LabeledImage,
    pool: &P,
    cfg: &PdleConfig,
    rng: &mut R,
) -> Result<EncodedSample> {
    let apply = rng.random_bool(cfg.p_apply);
    let binary = anchor.label.target();
    if !apply || cfg.mode == EncodingMode::Off {
        return Ok(pass_through(anchor, binary));
    }
    if cfg.mode == EncodingMode::LabelOnly {
        let step = 1.0 / cfg.k as f64;
        let target = match anchor.label {
            Label::Real => 1.0 - step,
            Label::Spoof => step,
        };
        return Ok(pass_through(anchor, target));
    }
    let partner = pool
        .draw(anchor.label.opposite(), rng)
        .ok_or(Error::EmptyOppositeClass(anchor.label.opposite()))?;
    let (u, lambda) = sample_lambda(cfg.k, rng)?;
    let (h, w) = image_hw(&anchor.image)?;
    let (bbox, lambda_effective) = make_mask(h, w, lambda, rng)?;
    let (image, (real, total)) = exchange_with_counts(anchor, &partner, &bbox)?;
    let y_exact = real as f64 / total as f64;
    let y_tilde = match cfg.mode {
        EncodingMode::PatchOnly => binary,
        _ => y_exact,
    };
    Ok(EncodedSample {
        image,
        y_tilde,
        domain: anchor.domain,
        anchor_label: anchor.label,
        record: Some(ExchangeRecord {
            u,
            lambda_nominal: lambda,
            bbox,
            lambda_effective,
            anchor_is_real: anchor.label == Label::Real,
            y_tilde: y_exact,
            real_pixels: real,
            total_pixels: total,
        }),
    })
}

/// Encodes a mini-batch. Each anchor is exchanged independently with
/// probability `cfg.p_apply`; unexchanged anchors keep their binary label.
/// The output domain id is always the anchor's.
pub fn encode_batch<P: OppositePool, R: Rng + ?Sized>(
    batch: &[LabeledImage],
    pool: &P,
    cfg: &PdleConfig,
    rng: &mut R,
) -> Result<Vec<EncodedSample>> {
    cfg.validate()?;
    batch
        .iter()
        .map(|anchor| encode_one(anchor, pool, cfg, rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(h: usize, w: usize, value: f64, label: Label, domain: usize) -> LabeledImage {
        LabeledImage {
            image: Tensor::filled(&[h, w, 3], value),
            label,
            domain,
        }
    }

    #[test]
    fn lambda_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (u, l) = sample_lambda(10, &mut rng).unwrap();
            assert!((1..=10).contains(&u));
            assert_eq!(l, u as f64 / 10.0);
            assert_eq!(sample_lambda(1, &mut rng).unwrap(), (1, 1.0));
        }
        assert!(sample_lambda(0, &mut rng).is_err());
    }

    #[test]
    fn lambda_is_uniform() {
        // each bin within 3 sigma of n/K, plus a chi-square sanity bound
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (k, n) = (10usize, 100_000usize);
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[sample_lambda(k, &mut rng).unwrap().0 - 1] += 1;
        }
        let p = 1.0 / k as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let mut chi2 = 0.0;
        for &c in &counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
            chi2 += (c as f64 - mean).powi(2) / mean;
        }
        // 99.9th percentile of chi-square with 9 dof
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (b, l) = make_mask(64, 64, 1.0, &mut rng).unwrap();
        assert_eq!(
            b,
            ExchangeBox {
                top: 0,
                left: 0,
                height: 64,
                width: 64
            }
        );
        assert_eq!(l, 1.0);

        let (b, l) = make_mask(100, 100, 0.25, &mut rng).unwrap();
        assert_eq!((b.height, b.width), (50, 50));
        assert_eq!(l, 0.25);

        let (b, l) = make_mask(64, 64, 0.3, &mut rng).unwrap();
        assert_eq!((b.height, b.width), (35, 35));
        assert_eq!(l, 1225.0 / 4096.0);

        assert!(make_mask(8, 8, 0.0, &mut rng).is_err());
        assert!(make_mask(8, 8, 1.5, &mut rng).is_err());
    }

    #[test]
    fn mask_stays_inside_and_near_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let h = rng.random_range(1..40);
            let w = rng.random_range(1..40);
            let lambda = rng.random_range(1..=10) as f64 / 10.0;
            let (b, l) = make_mask(h, w, lambda, &mut rng).unwrap();
            assert!(b.top + b.height <= h && b.left + b.width <= w);
            assert!(b.height >= 1 && b.width >= 1);
            let bound = 1.0 / h as f64 + 1.0 / w as f64 + 1.0 / (h * w) as f64;
            assert!((l - lambda).abs() <= bound, "{h}x{w} {lambda} -> {l}");
        }
    }

    #[test]
    fn exchange_labels_follow_anchor_class() {
        let real = constant(10, 10, 0.9, Label::Real, 0);
        let spoof = constant(10, 10, 0.1, Label::Spoof, 1);
        // 30 of 100 pixels exchanged
        let bbox = ExchangeBox {
            top: 2,
            left: 1,
            height: 5,
            width: 6,
        };
        let (img, y) = exchange(&real, &spoof, &bbox).unwrap();
        assert_eq!(y, 0.7);
        let from_partner = img.data().chunks(3).filter(|px| px[0] == 0.1).count();
        assert_eq!(from_partner, 30);

        let (_, y) = exchange(&spoof, &real, &bbox).unwrap();
        assert_eq!(y, 0.3);
    }

    #[test]
    fn exchange_rejects_bad_pairs() {
        let a = constant(4, 4, 0.2, Label::Real, 0);
        let b = constant(4, 4, 0.4, Label::Real, 0);
        let bbox = ExchangeBox {
            top: 0,
            left: 0,
            height: 2,
            width: 2,
        };
        assert!(matches!(exchange(&a, &b, &bbox), Err(Error::SameClassPair(_))));
        let c = constant(5, 4, 0.4, Label::Spoof, 0);
        assert!(matches!(exchange(&a, &c, &bbox), Err(Error::ShapeMismatch { .. })));
        let s = constant(4, 4, 0.4, Label::Spoof, 0);
        let outside = ExchangeBox {
            top: 3,
            left: 0,
            height: 2,
            width: 2,
        };
        assert!(exchange(&a, &s, &outside).is_err());
    }

    #[test]
    fn disabled_encoding_keeps_binary_labels() {
        let imgs = vec![
            constant(6, 6, 0.9, Label::Real, 0),
            constant(6, 6, 0.1, Label::Spoof, 2),
        ];
        let pool = ClassPool::new(&imgs);
        let cfg = PdleConfig {
            p_apply: 0.0,
            ..PdleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode_batch(&imgs, &pool, &cfg, &mut rng).unwrap();
        assert_eq!(out[0].y_tilde, 1.0);
        assert_eq!(out[1].y_tilde, 0.0);
        assert_eq!(out[1].domain, 2);
        assert!(out.iter().all(|s| s.record.is_none()));
    }

    #[test]
    fn full_swap_reproduces_partner() {
        let imgs = vec![
            constant(6, 6, 0.9, Label::Real, 0),
            constant(6, 6, 0.1, Label::Spoof, 1),
        ];
        let pool = ClassPool::new(&imgs);
        let cfg = PdleConfig {
            k: 1,
            p_apply: 1.0,
            ..PdleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = encode_batch(&imgs[..1], &pool, &cfg, &mut rng).unwrap();
        assert_eq!(out[0].image, imgs[1].image);
        assert_eq!(out[0].y_tilde, 0.0);
        assert_eq!(out[0].domain, 0);
    }

    #[test]
    fn labels_land_on_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let imgs: Vec<_> = (0..20)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Real } else { Label::Spoof };
                constant(32, 32, i as f64 / 20.0, label, i % 3)
            })
            .collect();
        let pool = ClassPool::new(&imgs);
        let cfg = PdleConfig {
            k: 10,
            p_apply: 1.0,
            ..PdleConfig::default()
        };
        let bound = 1.0 / 32.0 + 1.0 / 32.0 + 1.0 / 1024.0;
        for _ in 0..50 {
            for s in encode_batch(&imgs, &pool, &cfg, &mut rng).unwrap() {
                let r = s.record.as_ref().unwrap();
                let nearest_bin = (s.y_tilde * 10.0).round() / 10.0;
                assert!((s.y_tilde - nearest_bin).abs() <= bound);
                let nominal = if r.anchor_is_real {
                    1.0 - r.lambda_nominal
                } else {
                    r.lambda_nominal
                };
                assert!((s.y_tilde - nominal).abs() <= bound);
            }
        }
    }

    #[test]
    fn missing_opposite_class_is_an_error() {
        let imgs = vec![constant(4, 4, 0.9, Label::Real, 0)];
        let pool = ClassPool::new(&imgs);
        let cfg = PdleConfig {
            p_apply: 1.0,
            ..PdleConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            encode_batch(&imgs, &pool, &cfg, &mut rng),
            Err(Error::EmptyOppositeClass(Label::Spoof))
        ));
    }

    #[test]
    fn ablation_modes() {
        let imgs = vec![
            constant(8, 8, 0.9, Label::Real, 0),
            constant(8, 8, 0.1, Label::Spoof, 1),
        ];
        let pool = ClassPool::new(&imgs);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = PdleConfig {
            k: 4,
            p_apply: 1.0,
            ..PdleConfig::default()
        };
        let pe = PdleConfig {
            mode: EncodingMode::PatchOnly,
            ..base
        };
        let le = PdleConfig {
            mode: EncodingMode::LabelOnly,
            ..base
        };
        let off = PdleConfig {
            mode: EncodingMode::Off,
            ..base
        };
        let out = encode_batch(&imgs, &pool, &pe, &mut rng).unwrap();
        assert_eq!((out[0].y_tilde, out[1].y_tilde), (1.0, 0.0));
        assert!(out.iter().all(|s| s.record.is_some()));
        let out = encode_batch(&imgs, &pool, &le, &mut rng).unwrap();
        assert_eq!((out[0].y_tilde, out[1].y_tilde), (0.75, 0.25));
        assert_eq!(out[0].image, imgs[0].image);
        let out = encode_batch(&imgs, &pool, &off, &mut rng).unwrap();
        assert_eq!((out[0].y_tilde, out[1].y_tilde), (1.0, 0.0));
    }

    #[test]
    fn swapped_roles_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let real = constant(16, 12, 0.8, Label::Real, 0);
        let spoof = constant(16, 12, 0.2, Label::Spoof, 0);
        for _ in 0..200 {
            let (_, l) = sample_lambda(7, &mut rng).unwrap();
            let (b, _) = make_mask(16, 12, l, &mut rng).unwrap();
            let (_, y1) = exchange(&real, &spoof, &b).unwrap();
            let (_, y2) = exchange(&spoof, &real, &b).unwrap();
            assert!((y1 + y2 - 1.0).abs() < 1e-15);
        }
    }
}

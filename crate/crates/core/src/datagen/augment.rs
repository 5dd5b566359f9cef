use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    /// Horizontal flip with probability 0.5, then a uniformly placed crop.
    Train,
    /// Deterministic centre crop.
    Test,
}

fn hw(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "expected an H×W×3 image, got {:?}",
            img.shape()
        ))),
    }
}

pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (h, w) = hw(img)?;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    Ok(Tensor::from_raw(vec![h, w, 3], out))
}

pub fn crop(img: &Tensor, top: usize, left: usize, size: (usize, usize)) -> Result<Tensor> {
    let (h, w) = hw(img)?;
    let (ch, cw) = size;
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::InvalidArgument(format!(
            "crop {ch}x{cw} at ({top}, {left}) does not fit a {h}x{w} image"
        )));
    }
    let src = img.data();
    let mut out = Vec::with_capacity(ch * cw * 3);
    for y in top..top + ch {
        out.extend_from_slice(&src[(y * w + left) * 3..(y * w + left + cw) * 3]);
    }
    Ok(Tensor::from_raw(vec![ch, cw, 3], out))
}

pub fn center_crop(img: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let (h, w) = hw(img)?;
    if size.0 > h || size.1 > w {
        return Err(Error::InvalidArgument(format!(
            "crop {}x{} larger than image {h}x{w}",
            size.0, size.1
        )));
    }
    crop(img, (h - size.0) / 2, (w - size.1) / 2, size)
}

/// Returns the augmented image and, for inspection, the crop offset used.
pub fn augment<R: Rng + ?Sized>(
    img: &Tensor,
    mode: AugmentMode,
    size: (usize, usize),
    rng: &mut R,
) -> Result<(Tensor, (usize, usize))> {
    let (h, w) = hw(img)?;
    if size.0 > h || size.1 > w {
        return Err(Error::InvalidArgument(format!(
            "crop {}x{} larger than image {h}x{w}",
            size.0, size.1
        )));
    }
    match mode {
        AugmentMode::Test => Ok((center_crop(img, size)?, ((h - size.0) / 2, (w - size.1) / 2))),
        AugmentMode::Train => {
            let flipped = rng.random_bool(0.5);
            let top = rng.random_range(0..=h - size.0);
            let left = rng.random_range(0..=w - size.1);
            let src = if flipped { hflip(img)? } else { img.clone() };
            Ok((crop(&src, top, left, size)?, (top, left)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(
            vec![h, w, 3],
            (0..h * w * 3).map(|i| i as f64 / (h * w * 3) as f64).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 7);
        let f = hflip(&img).unwrap();
        assert_ne!(f, img);
        assert_eq!(hflip(&f).unwrap(), img);
    }

    #[test]
    fn test_mode_is_deterministic_center_crop() {
        let img = ramp(10, 10);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let (a, off) = augment(&img, AugmentMode::Test, (6, 6), &mut r1).unwrap();
        let (b, _) = augment(&img, AugmentMode::Test, (6, 6), &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(off, (2, 2));
        assert_eq!(a.data()[0], img.data()[(2 * 10 + 2) * 3]);
    }

    #[test]
    fn crop_too_large_is_an_error() {
        let img = ramp(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(augment(&img, AugmentMode::Train, (5, 4), &mut rng).is_err());
        assert!(center_crop(&img, (4, 5)).is_err());
    }

    #[test]
    fn train_crops_preserve_pixels() {
        let img = ramp(9, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (out, (top, left)) = augment(&img, AugmentMode::Train, (4, 4), &mut rng).unwrap();
            let direct = crop(&img, top, left, (4, 4)).unwrap();
            let mirrored = crop(&hflip(&img).unwrap(), top, left, (4, 4)).unwrap();
            assert!(out == direct || out == mirrored);
        }
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // 10^4 draws over 9 offsets per axis, each count within 3 sigma
        let img = ramp(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut tops = [0usize; 9];
        let mut lefts = [0usize; 9];
        for _ in 0..n {
            let (_, (t, l)) = augment(&img, AugmentMode::Train, (8, 8), &mut rng).unwrap();
            tops[t] += 1;
            lefts[l] += 1;
        }
        let p = 1.0 / 9.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in tops.iter().chain(&lefts) {
            assert!((*c as f64 - mean).abs() < 3.0 * sigma, "{tops:?} {lefts:?}");
        }
    }
}

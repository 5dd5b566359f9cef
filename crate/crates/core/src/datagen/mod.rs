//! Desk-scale data: a procedural multi-domain real/spoof generator, the
//! manifest-based on-disk format and the train/test augmentations.
//!
//! Every image is a synthetic "face crop": a low-frequency background, a
//! shaded skin-toned ellipse with darker eye and mouth regions, and a fine
//! spatially-correlated skin micro-texture. Spoofs are recaptures: the
//! micro-texture is mostly lost and the domain's artifact (moiré grid,
//! blur + rescale, or colour cast) is superimposed. Both classes then
//! receive the domain's camera noise and are quantized to 8 bits, so that
//! PNG storage round-trips exactly.

mod augment;
mod manifest;

pub use augment::{augment, center_crop, crop, hflip, AugmentMode};
pub use manifest::{load_manifest, write_dataset, Dataset, Manifest, ManifestRow, IMAGE_FORMAT};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::parallel::Exec;
use crate::rng;
use crate::{Label, LabeledImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    MoireGrid,
    BlurRecapture,
    ColorCast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: usize,
    /// Skin hue range, as a fraction of the colour wheel.
    pub hue_range: (f64, f64),
    /// Face brightness (HSV value) range.
    pub brightness_range: (f64, f64),
    /// Standard deviation of the per-pixel camera noise.
    pub noise_amplitude: f64,
    pub artifact: ArtifactKind,
    /// Range of the RMS of the artifact residual added to a spoof.
    pub strength_range: (f64, f64),
    pub height: usize,
    pub width: usize,
}

/// Amplitude of the live skin micro-texture.
const TEXTURE_AMPLITUDE: f64 = 0.08;
/// Fraction of the micro-texture a recapture keeps.
const RECAPTURE_TEXTURE_KEEP: f64 = 0.25;

impl DomainSpec {
    /// The four built-in domains, at the given image size.
    pub fn preset(id: usize, height: usize, width: usize) -> Result<DomainSpec> {
        let (hue_range, brightness_range, noise_amplitude, artifact, strength_range) = match id {
            0 => ((0.02, 0.07), (0.70, 0.90), 0.010, ArtifactKind::MoireGrid, (0.03, 0.06)),
            1 => ((0.04, 0.09), (0.55, 0.75), 0.020, ArtifactKind::BlurRecapture, (0.03, 0.06)),
            2 => ((0.01, 0.05), (0.60, 0.85), 0.015, ArtifactKind::ColorCast, (0.04, 0.08)),
            3 => ((0.05, 0.11), (0.50, 0.70), 0.025, ArtifactKind::MoireGrid, (0.02, 0.04)),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "no preset for domain {id}; presets are 0..=3"
                )))
            }
        };
        let spec = DomainSpec {
            id,
            hue_range,
            brightness_range,
            noise_amplitude,
            artifact,
            strength_range,
            height,
            width,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn presets(height: usize, width: usize) -> Result<Vec<DomainSpec>> {
        (0..4).map(|i| DomainSpec::preset(i, height, width)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64), min: f64, max: f64| {
            lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max
        };
        if self.height < 8 || self.width < 8 {
            return Err(Error::InvalidArgument(format!(
                "domain {}: images must be at least 8×8",
                self.id
            )));
        }
        if !range_ok(self.hue_range, 0.0, 1.0) || !range_ok(self.brightness_range, 0.0, 1.0) {
            return Err(Error::InvalidArgument(format!(
                "domain {}: hue and brightness ranges must be ordered within [0, 1]",
                self.id
            )));
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "domain {}: noise amplitude must lie in [0, 0.5)",
                self.id
            )));
        }
        if !range_ok(self.strength_range, 0.0, 0.5) || self.strength_range.0 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "domain {}: artifact strengths must be positive and ordered",
                self.id
            )));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Scene layers before noise: the textureless face image, the face mask and
/// the unit-variance micro-texture field.
struct Scene {
    plain: Vec<f64>,
    mask: Vec<f64>,
    texture: Vec<f64>,
}

fn render_scene<R: Rng + ?Sized>(spec: &DomainSpec, rng: &mut R) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let tau = std::f64::consts::TAU;

    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(0.0..tau),
                rng.random_range(0.03..0.08),
            )
        })
        .collect();

    let cy = hf * rng.random_range(0.45..0.55);
    let cx = wf * rng.random_range(0.45..0.55);
    let ry = hf * rng.random_range(0.32..0.40);
    let rx = wf * rng.random_range(0.24..0.30);
    let skin = hsv_to_rgb(
        uniform(rng, spec.hue_range),
        rng.random_range(0.35..0.60),
        uniform(rng, spec.brightness_range),
    );
    let light = rng.random_range(0.0..tau);
    let (ly, lx) = (light.sin(), light.cos());
    let eye_dy = -0.25 * ry;
    let eye_dx = 0.42 * rx;
    let eye_r = 0.16 * rx.min(ry);
    let mouth_dy = 0.45 * ry;

    let mut plain = vec![0.0; h * w * 3];
    let mut mask = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let field: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, a)| a * (tau * (fy * yf / hf + fx * xf / wf) + ph).cos())
                .sum();
            let (dy, dx) = (yf - cy, xf - cx);
            let d = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
            let m = ((1.0 - d) * rx.min(ry) / 1.5).clamp(0.0, 1.0);
            let shade = 1.0 + 0.15 * (dy / ry * ly + dx / rx * lx);
            let feature_dark = {
                let eye = |sx: f64| {
                    let e = ((dx - sx).powi(2) + (dy - eye_dy).powi(2)).sqrt() / eye_r;
                    (1.2 - e).clamp(0.0, 1.0)
                };
                let mouth = {
                    let e = ((dx / (0.35 * rx)).powi(2) + ((dy - mouth_dy) / (0.08 * ry)).powi(2))
                        .sqrt();
                    (1.2 - e).clamp(0.0, 1.0)
                };
                1.0 - 0.55 * eye(eye_dx).max(eye(-eye_dx)) - 0.35 * mouth
            };
            let i = y * w + x;
            mask[i] = m;
            for c in 0..3 {
                let back = bg[c] + field;
                let face = skin[c] * shade * feature_dark + 0.3 * field;
                plain[i * 3 + c] = m * face + (1.0 - m) * back;
            }
        }
    }

    // 3×3 box-smoothed white noise, renormalised to unit variance
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    let mut texture = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for oy in y.saturating_sub(1)..(y + 2).min(h) {
                for ox in x.saturating_sub(1)..(x + 2).min(w) {
                    acc += white[oy * w + ox];
                }
            }
            texture[y * w + x] = acc / 3.0;
        }
    }
    let s = rms(&texture).max(1e-12);
    texture.iter_mut().for_each(|v| *v /= s);

    Scene {
        plain,
        mask,
        texture,
    }
}

fn apply_texture(scene: &Scene, keep: f64) -> Vec<f64> {
    let mut out = scene.plain.clone();
    const CHROMA: [f64; 3] = [1.0, 0.9, 0.8];
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        let t = keep * TEXTURE_AMPLITUDE * scene.texture[i] * scene.mask[i];
        for (c, v) in px.iter_mut().enumerate() {
            *v += t * CHROMA[c];
        }
    }
    out
}

fn box_blur(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += img[(yy * w + xx) * 3 + c];
                    }
                }
                out[(y * w + x) * 3 + c] = acc / n;
            }
        }
    }
    out
}

/// Attack-setup parameters shared by every spoof of a domain: one screen
/// geometry, one display tint, one black level. Individual images only
/// jitter around them.
struct Signature {
    period: f64,
    angle: f64,
    beat: f64,
    phase: [f64; 3],
    tint: [f64; 3],
    gamma: f64,
}

fn domain_signature(id: usize) -> Signature {
    let mut rng = rng::stream(0x5167, &[id as u64]);
    let tau = std::f64::consts::TAU;
    Signature {
        period: rng.random_range(3.0..6.0),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        beat: rng.random_range(0.02..0.08),
        phase: std::array::from_fn(|_| rng.random_range(0.0..tau)),
        tint: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
        gamma: rng.random_range(0.7..1.4),
    }
}

/// Artifact residual for a spoof base, scaled to RMS `strength`.
fn artifact_residual<R: Rng + ?Sized>(
    spec: &DomainSpec,
    base: &[f64],
    strength: f64,
    rng: &mut R,
) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let tau = std::f64::consts::TAU;
    let sig = domain_signature(spec.id);
    let mut r = match spec.artifact {
        ArtifactKind::MoireGrid => {
            // carrier beating against a slow envelope; the screen geometry is
            // fixed, the alignment drifts a little per capture
            let drift = rng.random_range(-0.3..0.3);
            let (fy, fx) = (sig.angle.sin() / sig.period, sig.angle.cos() / sig.period);
            let mut r = vec![0.0; h * w * 3];
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let env = 1.0 + 0.5 * (tau * sig.beat * (xf + yf)).sin();
                    for c in 0..3 {
                        r[(y * w + x) * 3 + c] =
                            env * (tau * (fy * yf + fx * xf) + sig.phase[c] + drift).sin();
                    }
                }
            }
            r
        }
        ArtifactKind::BlurRecapture => {
            // strong blur, 2× down/up sampling, lifted black level
            let blurred = box_blur(base, h, w, 2);
            let mut resampled = vec![0.0; blurred.len()];
            for y in 0..h {
                for x in 0..w {
                    let (by, bx) = ((y / 2) * 2, (x / 2) * 2);
                    for c in 0..3 {
                        let mut acc = 0.0;
                        let mut n = 0.0;
                        for yy in by..(by + 2).min(h) {
                            for xx in bx..(bx + 2).min(w) {
                                acc += blurred[(yy * w + xx) * 3 + c];
                                n += 1.0;
                            }
                        }
                        resampled[(y * w + x) * 3 + c] = acc / n;
                    }
                }
            }
            let mut detail: Vec<f64> = resampled.iter().zip(base).map(|(a, b)| a - b).collect();
            let mut lift = vec![1.0; base.len()];
            let (sd, sl) = (rms(&detail).max(1e-12), rms(&lift).max(1e-12));
            detail.iter_mut().for_each(|v| *v *= 0.8 / sd);
            lift.iter_mut().for_each(|v| *v *= 0.6 / sl);
            detail.iter().zip(&lift).map(|(d, l)| d + l).collect()
        }
        ArtifactKind::ColorCast => {
            // display tint plus gamma shift
            let jitter = rng.random_range(0.8..1.2);
            base.chunks_exact(3)
                .flat_map(|px| {
                    (0..3)
                        .map(|c| {
                            let v = px[c].clamp(0.0, 1.0);
                            jitter * sig.tint[c] * v + (v.powf(sig.gamma) - v)
                        })
                        .collect::<Vec<_>>()
                })
                .collect()
        }
    };
    let s = rms(&r);
    if s > 1e-12 {
        r.iter_mut().for_each(|v| *v *= strength / s);
    }
    r
}

fn finish(img: &[f64], noise: &[f64], spec: &DomainSpec) -> Tensor {
    let data = img
        .iter()
        .zip(noise)
        .map(|(v, n)| quantize(v + spec.noise_amplitude * n))
        .collect();
    Tensor::new(vec![spec.height, spec.width, 3], data).expect("finite pixels")
}

/// A spoof together with the recaptured base it was built from, both
/// carrying the same camera noise.
#[derive(Debug, Clone)]
pub struct SpoofPair {
    pub base: Tensor,
    pub spoof: Tensor,
    /// Requested RMS of the artifact residual.
    pub strength: f64,
}

fn image_stream(seed: u64, domain: usize, label: Label, index: usize) -> rng::Rng {
    rng::stream(seed, &[0xDA7A, domain as u64, label.value() as u64, index as u64])
}

/// Renders image `index` of class `label` in `spec`'s domain.
pub fn render_image(spec: &DomainSpec, label: Label, index: usize, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    Ok(match label {
        Label::Real => {
            let mut rng = image_stream(seed, spec.id, label, index);
            let scene = render_scene(spec, &mut rng);
            let noise: Vec<f64> = (0..scene.plain.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            finish(&apply_texture(&scene, 1.0), &noise, spec)
        }
        Label::Spoof => render_spoof_pair(spec, index, seed)?.spoof,
    })
}

/// Renders spoof `index` and its pre-artifact base.
pub fn render_spoof_pair(spec: &DomainSpec, index: usize, seed: u64) -> Result<SpoofPair> {
    spec.validate()?;
    let mut rng = image_stream(seed, spec.id, Label::Spoof, index);
    let scene = render_scene(spec, &mut rng);
    let base = apply_texture(&scene, RECAPTURE_TEXTURE_KEEP);
    let strength = uniform(&mut rng, spec.strength_range);
    let residual = artifact_residual(spec, &base, strength, &mut rng);
    let spoof: Vec<f64> = base.iter().zip(&residual).map(|(b, r)| b + r).collect();
    let noise: Vec<f64> = (0..base.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(SpoofPair {
        base: finish(&base, &noise, spec),
        spoof: finish(&spoof, &noise, spec),
        strength,
    })
}

/// Generates `n_per_class` real and `n_per_class` spoof images of one
/// domain, reals first. Each image has its own stream derived from `seed`,
/// so the output does not depend on `exec`.
pub fn gen_domain(
    spec: &DomainSpec,
    n_per_class: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    if n_per_class < 1 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    exec.try_map(2 * n_per_class, |i| {
        let (label, index) = if i < n_per_class {
            (Label::Real, i)
        } else {
            (Label::Spoof, i - n_per_class)
        };
        Ok(LabeledImage {
            image: render_image(spec, label, index, seed)?,
            label,
            domain: spec.id,
        })
    })
}

/// All preset domains, concatenated in domain order.
pub fn gen_benchmark(
    domains: usize,
    n_per_class: usize,
    size: (usize, usize),
    seed: u64,
    exec: Exec,
) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::with_capacity(domains * 2 * n_per_class);
    for id in 0..domains {
        let spec = DomainSpec::preset(id, size.0, size.1)?;
        out.extend(gen_domain(&spec, n_per_class, seed, exec)?);
    }
    Ok(out)
}

use std::collections::BTreeSet;
use std::fs;

use liveness_core::datagen::{gen_benchmark, gen_domain, load_manifest, write_dataset, DomainSpec};
use liveness_core::metrics::{roc_auc, ScoredSample};
use liveness_core::parallel::Exec;
use liveness_core::{Error, Label, LabeledImage};

#[test]
fn generated_dataset_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let images = gen_benchmark(4, 3, (20, 24), 11, Exec::Parallel).unwrap();
    let (path, manifest) = write_dataset(dir.path(), &images, 11).unwrap();
    assert_eq!(manifest.rows.len(), images.len());

    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.manifest, manifest);
    assert_eq!((loaded.manifest.height, loaded.manifest.width), (20, 24));
    assert_eq!(loaded.manifest.seed, 11);
    assert_eq!(loaded.images, images);

    let domains: BTreeSet<usize> = loaded.images.iter().map(|i| i.domain).collect();
    assert_eq!(domains, BTreeSet::from([0, 1, 2, 3]));
    let header = fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("# liveness-manifest v1; size=20x24; seed=11"));
}

#[test]
fn missing_image_is_reported_with_its_row_and_path() {
    let dir = tempfile::tempdir().unwrap();
    let images = gen_benchmark(1, 2, (8, 8), 1, Exec::Sequential).unwrap();
    let (path, manifest) = write_dataset(dir.path(), &images, 1).unwrap();
    let victim = &manifest.rows[2].path;
    fs::remove_file(dir.path().join(victim)).unwrap();
    match load_manifest(&path) {
        Err(Error::Manifest { row, message, .. }) => {
            assert_eq!(row, 3);
            assert!(message.contains(&victim.display().to_string()), "{message}");
        }
        other => panic!("expected a manifest error, got {other:?}"),
    }
}

#[test]
fn size_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let images = gen_benchmark(1, 1, (8, 8), 1, Exec::Sequential).unwrap();
    let (path, _) = write_dataset(dir.path(), &images, 1).unwrap();
    let text = fs::read_to_string(&path).unwrap().replace("size=8x8", "size=9x8");
    fs::write(&path, text).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, Error::Manifest { row: 1, .. }), "{err}");
}

/// L2-regularised logistic regression on standardised raw pixels, trained
/// by full-batch gradient descent.
struct LinearProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl LinearProbe {
    fn fit(train: &[LabeledImage]) -> LinearProbe {
        let n = train.len() as f64;
        let dim = train[0].image.len();
        let mut mean = vec![0.0; dim];
        for img in train {
            for (m, v) in mean.iter_mut().zip(img.image.data()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for img in train {
            for ((s, v), m) in var.iter_mut().zip(img.image.data()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale: Vec<f64> = var.iter().map(|v| 1.0 / v.sqrt().max(1e-6)).collect();
        let mut probe = LinearProbe {
            mean,
            scale,
            w: vec![0.0; dim],
            b: 0.0,
        };
        let xs: Vec<Vec<f64>> = train.iter().map(|i| probe.standardize(i)).collect();
        for _ in 0..200 {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, img) in xs.iter().zip(train) {
                let e = probe.prob(x) - img.label.target();
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += e * v;
                }
                gb += e;
            }
            for (w, g) in probe.w.iter_mut().zip(&gw) {
                *w -= 0.01 * (g / n + 1e-2 * *w);
            }
            probe.b -= 0.01 * gb / n;
        }
        probe
    }

    fn standardize(&self, img: &LabeledImage) -> Vec<f64> {
        img.image
            .data()
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    fn prob(&self, x: &[f64]) -> f64 {
        let z = self.b + x.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }

    fn auc(&self, images: &[LabeledImage]) -> f64 {
        let scored: Vec<ScoredSample> = images
            .iter()
            .map(|i| ScoredSample::new(self.prob(&self.standardize(i)), i.label, i.domain))
            .collect();
        roc_auc(&scored).unwrap()
    }
}

/// Splits a generated domain (reals first) into two halves per class.
fn halves(images: Vec<LabeledImage>, n: usize) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for (i, img) in images.into_iter().enumerate() {
        if i % (2 * n) < n {
            a.push(img)
        } else {
            b.push(img)
        }
    }
    (a, b)
}

#[test]
fn linear_probe_separates_within_domain_but_not_across() {
    let n = 150;
    let domains: Vec<Vec<LabeledImage>> = (0..4)
        .map(|d| gen_domain(&DomainSpec::preset(d, 64, 64).unwrap(), 2 * n, 3, Exec::Parallel).unwrap())
        .collect();
    for d in 0..4 {
        let (train, held) = halves(domains[d].clone(), n);
        assert_eq!(held.iter().filter(|i| i.label == Label::Real).count(), n);
        let probe = LinearProbe::fit(&train);
        let within = probe.auc(&held);
        let across: Vec<f64> = (0..4).filter(|&o| o != d).map(|o| probe.auc(&domains[o])).collect();
        let across_mean = across.iter().sum::<f64>() / across.len() as f64;
        assert!(within > 0.9, "domain {d}: within-domain AUC {within}");
        assert!(across_mean < within - 0.2, "domain {d}: {within} within vs {across:?} across");
    }
}

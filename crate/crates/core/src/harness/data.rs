//! Labeled toy datasets. Every example is a `[tokens, channels]` tensor.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::harness::archive::Archive;
use crate::harness::config::{DatasetKind, RunConfig};
use crate::tensor::Tensor;

pub const GAUSS_RADIUS: f64 = 2.0;
pub const GAUSS_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
    pub classes: usize,
    pub tokens: usize,
    pub channels: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn from_parts(
        examples: Vec<Tensor>,
        labels: Vec<usize>,
        classes: usize,
        prefix: &str,
    ) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Invalid("empty dataset".into()))?;
        let (tokens, channels) = (first.rows(), first.cols());
        let ids = (0..examples.len())
            .map(|i| format!("{prefix}{i}"))
            .collect();
        Ok(Self {
            examples,
            labels,
            ids,
            classes,
            tokens,
            channels,
        })
    }

    /// Examples of one class.
    pub fn class_examples(&self, k: usize) -> Vec<&Tensor> {
        self.examples
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l == k)
            .map(|(x, _)| x)
            .collect()
    }
}

/// Which draw of a generated dataset to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 0x9e37_79b9,
        }
    }
}

/// Builds the configured dataset. Labels cycle through the classes so every
/// split is balanced.
pub fn load(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let (k, n) = (cfg.data_classes, cfg.data_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed ^ split.salt());
    match cfg.dataset {
        DatasetKind::Gauss2d => Ok(gauss2d(k, n, &mut rng)),
        DatasetKind::Rings2d => Ok(rings2d(k, n, &mut rng)),
        DatasetKind::Toyimg8 => toyimg8(k, n, cfg.data_patch, &mut rng),
        DatasetKind::File => {
            let path = cfg
                .data_path
                .as_deref()
                .ok_or_else(|| Error::Config("data.path unset".into()))?;
            from_archive(path, split)
        }
    }
}

/// Mean of class `k` in the 2-D Gaussian mixture.
pub fn gauss2d_mean(k: usize, classes: usize) -> [f64; 2] {
    let a = 2.0 * PI * k as f64 / classes as f64;
    [GAUSS_RADIUS * a.cos(), GAUSS_RADIUS * a.sin()]
}

/// `K` isotropic Gaussians with means evenly spaced on a circle.
pub fn gauss2d(classes: usize, n: usize, rng: &mut impl Rng) -> Dataset {
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let m = gauss2d_mean(k, classes);
        let p: Vec<f64> = m
            .iter()
            .map(|mi| mi + GAUSS_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        xs.push(Tensor::matrix(2, 1, p).unwrap());
        labels.push(k);
    }
    Dataset::from_parts(xs, labels, classes, "g").unwrap()
}

/// Concentric rings, class `k` at radius `1 + k`.
pub fn rings2d(classes: usize, n: usize, rng: &mut impl Rng) -> Dataset {
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let a = rng.gen_range(0.0..2.0 * PI);
        let r = 1.0 + k as f64 + 0.1 * rng.sample::<f64, _>(StandardNormal);
        xs.push(Tensor::matrix(2, 1, vec![r * a.cos(), r * a.sin()]).unwrap());
        labels.push(k);
    }
    Dataset::from_parts(xs, labels, classes, "r").unwrap()
}

/// 8x8 class template: an oriented sinusoidal grating whose angle and
/// frequency depend on the class.
pub fn template8(k: usize, classes: usize) -> Vec<f64> {
    let angle = PI * k as f64 / classes as f64;
    let freq = 1.0 + (k % 3) as f64;
    let (c, s) = (angle.cos(), angle.sin());
    let mut img = Vec::with_capacity(64);
    for i in 0..8 {
        for j in 0..8 {
            let u = (c * i as f64 + s * j as f64) / 8.0;
            img.push((2.0 * PI * freq * u).sin());
        }
    }
    img
}

/// Templates with per-pixel Gaussian noise (std 0.2) and a random global
/// contrast in [0.8, 1.2], patchified.
pub fn toyimg8(classes: usize, n: usize, patch: usize, rng: &mut impl Rng) -> Result<Dataset> {
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let templates: Vec<Vec<f64>> = (0..classes).map(|k| template8(k, classes)).collect();
    for i in 0..n {
        let k = i % classes;
        let contrast = rng.gen_range(0.8..1.2);
        let img: Vec<f64> = templates[k]
            .iter()
            .map(|v| contrast * v + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        xs.push(patchify(&img, 8, patch)?);
        labels.push(k);
    }
    Dataset::from_parts(xs, labels, classes, "i")
}

/// Splits a `side x side` single-channel image into non-overlapping
/// `p x p` patches in raster order, each flattened to `p * p` channels.
pub fn patchify(img: &[f64], side: usize, p: usize) -> Result<Tensor> {
    if p == 0 || !side.is_multiple_of(p) || img.len() != side * side {
        return Err(Error::Invalid(format!(
            "cannot cut a {side}x{side} image into {p}x{p} patches"
        )));
    }
    let g = side / p;
    let mut data = Vec::with_capacity(img.len());
    for pi in 0..g {
        for pj in 0..g {
            for i in 0..p {
                for j in 0..p {
                    data.push(img[(pi * p + i) * side + pj * p + j]);
                }
            }
        }
    }
    Tensor::matrix(g * g, p * p, data)
}

pub fn unpatchify(x: &Tensor, side: usize, p: usize) -> Result<Vec<f64>> {
    let g = side / p;
    if x.shape() != [g * g, p * p] {
        return Err(Error::shape("unpatchify", &[x.shape(), &[g * g, p * p]]));
    }
    let mut img = vec![0.0; side * side];
    for (t, row) in (0..g * g).map(|t| (t, x.row(t))) {
        let (pi, pj) = (t / g, t % g);
        for i in 0..p {
            for j in 0..p {
                img[(pi * p + i) * side + pj * p + j] = row[i * p + j];
            }
        }
    }
    Ok(img)
}

/// Archive with `x` `[N, D, C]`, `labels` `[N]` and a `classes` meta entry.
/// An optional `test/` prefix holds the test split; without it both splits
/// read the same arrays.
pub fn from_archive(path: &Path, split: Split) -> Result<Dataset> {
    let a = Archive::load(path)?;
    let prefix = match split {
        Split::Test if a.array("test/x").is_some() => "test/",
        _ => "",
    };
    let x = a.require(&format!("{prefix}x"))?;
    let labels = a.require(&format!("{prefix}labels"))?;
    let classes: usize = a
        .meta("classes")
        .ok_or_else(|| Error::Archive("dataset archive lacks classes".into()))?
        .parse()
        .map_err(|_| Error::Archive("bad classes".into()))?;
    let [n, d, c] = x.shape()[..] else {
        return Err(Error::Archive("x must be [N, D, C]".into()));
    };
    if labels.len() != n {
        return Err(Error::Archive("labels length differs from x".into()));
    }
    let mut examples = Vec::with_capacity(n);
    let mut ls = Vec::with_capacity(n);
    for i in 0..n {
        examples.push(Tensor::matrix(
            d,
            c,
            x.data()[i * d * c..(i + 1) * d * c].to_vec(),
        )?);
        let l = labels.data()[i];
        if l < 0.0 || l.fract() != 0.0 || l as usize >= classes {
            return Err(Error::Archive(format!("label {l} out of range")));
        }
        ls.push(l as usize);
    }
    Dataset::from_parts(examples, ls, classes, "")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_roundtrip() {
        let img: Vec<f64> = (0..64).map(f64::from).collect();
        let x = patchify(&img, 8, 2).unwrap();
        assert_eq!(x.shape(), [16, 4]);
        assert_eq!(x.row(1), &[2.0, 3.0, 10.0, 11.0]);
        assert_eq!(unpatchify(&x, 8, 2).unwrap(), img);
    }

    #[test]
    fn gauss2d_moments() {
        let d = gauss2d(2, 20_000, &mut ChaCha8Rng::seed_from_u64(1));
        let xs = d.class_examples(1);
        let mean: f64 = xs.iter().map(|x| x.data()[0]).sum::<f64>() / xs.len() as f64;
        assert!((mean + 2.0).abs() < 0.02, "{mean}");
        assert_eq!(d.labels.iter().filter(|l| **l == 0).count(), 10_000);
    }

    #[test]
    fn splits_differ_and_repeat() {
        let cfg = RunConfig {
            data_size: 16,
            ..Default::default()
        };
        let a = load(&cfg, Split::Train).unwrap();
        assert_eq!(a, load(&cfg, Split::Train).unwrap());
        assert_ne!(a.examples, load(&cfg, Split::Test).unwrap().examples);
    }

    #[test]
    fn archive_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Archive::new();
        a.set_meta("classes", 2).unwrap();
        a.insert(
            "x",
            Tensor::new(vec![2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        )
        .unwrap();
        a.insert("labels", Tensor::vector(vec![1.0, 0.0])).unwrap();
        a.save(dir.path()).unwrap();
        let d = from_archive(dir.path(), Split::Test).unwrap();
        assert_eq!((d.tokens, d.channels, d.labels.clone()), (3, 1, vec![1, 0]));
        assert_eq!(d.examples[1].data(), &[4.0, 5.0, 6.0]);
    }
}

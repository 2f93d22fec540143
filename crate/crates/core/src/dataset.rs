//! Synthetic few-shot data with a base/new class split.
//!
//! Each class has a *source* prototype, seen only by toy pretraining, and a
//! *target* prototype used for the few-shot train and test sets. Target
//! prototypes are the source ones plus a domain shift shared by all classes
//! and a small per-class perturbation, so the pretrained model transfers to
//! the target domain but imperfectly. Samples are a prototype plus isotropic
//! Gaussian noise.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{Container, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub classes: usize,
    pub shots: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_dim: usize,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
    /// Standard deviation of the shared source→target shift.
    pub shift: f64,
    /// Standard deviation of the per-class source→target perturbation.
    pub class_jitter: f64,
    /// Minimum Frobenius distance between any two source prototypes.
    pub min_separation: f64,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 16,
            grid_rows: 4,
            grid_cols: 4,
            patch_dim: 4,
            noise: 1.0,
            shift: 0.5,
            class_jitter: 0.3,
            min_separation: 6.0,
            test_per_class: 40,
        }
    }
}

impl DataConfig {
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || !self.classes.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "class count must be even and at least 2, got {}",
                self.classes
            )));
        }
        if self.shots == 0 || self.test_per_class == 0 {
            return Err(Error::contract("shots and test_per_class must be positive"));
        }
        if self.patch_count() == 0 || self.patch_dim == 0 {
            return Err(Error::contract("empty patch grid"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("shift", self.shift),
            ("class_jitter", self.class_jitter),
            ("min_separation", self.min_separation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub prototype: Matrix,
    pub noise_scale: f64,
}

impl ClassPrototype {
    pub fn sample(&self, rng: &mut impl Rng) -> Sample {
        let mut image = self.prototype.clone();
        if self.noise_scale > 0.0 {
            let normal = Normal::new(0.0, self.noise_scale).expect("validated noise scale");
            for v in image.data_mut() {
                *v += normal.sample(rng);
            }
        }
        Sample {
            image,
            label: self.class_id,
        }
    }
}

/// A labeled patch-grid image; `label` is the global class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSplit {
    pub classes: usize,
    pub base_ids: Vec<usize>,
    pub new_ids: Vec<usize>,
    pub shots: usize,
    pub train: Vec<Sample>,
    pub base_test: Vec<Sample>,
    pub new_test: Vec<Sample>,
    /// Pretraining-domain prototypes for every class.
    pub source: Vec<ClassPrototype>,
    /// Few-shot-domain prototypes for every class.
    pub target: Vec<ClassPrototype>,
}

pub fn generate(classes: usize, shots: usize, seed: u64) -> Result<FewShotSplit> {
    generate_with(
        &DataConfig {
            classes,
            shots,
            ..DataConfig::default()
        },
        seed,
    )
}

pub fn generate_with(config: &DataConfig, seed: u64) -> Result<FewShotSplit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (config.patch_count(), config.patch_dim);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let gaussian = |rng: &mut ChaCha8Rng, scale: f64| {
        let data = (0..rows * cols).map(|_| scale * unit.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized to the grid")
    };

    let mut source: Vec<ClassPrototype> = Vec::with_capacity(config.classes);
    let mut attempts = 0;
    while source.len() < config.classes {
        attempts += 1;
        if attempts > 1000 * config.classes {
            return Err(Error::contract(format!(
                "could not place {} prototypes {} apart",
                config.classes, config.min_separation
            )));
        }
        let candidate = gaussian(&mut rng, 1.0);
        let separated = source.iter().all(|p| {
            let d = p.prototype.sub(&candidate).expect("equal shapes").frobenius_norm();
            d >= config.min_separation
        });
        if separated {
            source.push(ClassPrototype {
                class_id: source.len(),
                prototype: candidate,
                noise_scale: config.noise,
            });
        }
    }
    let shift = gaussian(&mut rng, config.shift);
    let mut target = Vec::with_capacity(config.classes);
    for p in &source {
        let jitter = gaussian(&mut rng, config.class_jitter);
        let prototype = p.prototype.add(&shift)?.add(&jitter)?;
        target.push(ClassPrototype {
            class_id: p.class_id,
            prototype,
            noise_scale: config.noise,
        });
    }

    let half = config.classes / 2;
    let base_ids: Vec<usize> = (0..half).collect();
    let new_ids: Vec<usize> = (half..config.classes).collect();
    let mut train = Vec::with_capacity(half * config.shots);
    for &c in &base_ids {
        train.extend((0..config.shots).map(|_| target[c].sample(&mut rng)));
    }
    let test_for = |ids: &[usize], rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(ids.len() * config.test_per_class);
        for &c in ids {
            out.extend((0..config.test_per_class).map(|_| target[c].sample(rng)));
        }
        out
    };
    let base_test = test_for(&base_ids, &mut rng);
    let new_test = test_for(&new_ids, &mut rng);
    Ok(FewShotSplit {
        classes: config.classes,
        base_ids,
        new_ids,
        shots: config.shots,
        train,
        base_test,
        new_test,
        source,
        target,
    })
}

impl FewShotSplit {
    /// Draws `count` pretraining samples from the source prototypes, classes
    /// chosen uniformly.
    pub fn pretraining_samples(&self, count: usize, rng: &mut impl Rng) -> Vec<Sample> {
        (0..count)
            .map(|_| {
                let c = rng.random_range(0..self.source.len());
                self.source[c].sample(rng)
            })
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (name, set) in [("train", &self.train), ("base_test", &self.base_test), ("new_test", &self.new_test)] {
            c.push(format!("{name}.images"), stack(set.iter().map(|s| &s.image))?)?;
            let labels = set.iter().map(|s| s.label as f64).collect::<Vec<_>>();
            c.push(format!("{name}.labels"), Tensor::new(vec![labels.len()], labels)?)?;
        }
        for (name, protos) in [("source", &self.source), ("target", &self.target)] {
            c.push(format!("{name}.prototypes"), stack(protos.iter().map(|p| &p.prototype))?)?;
            let noise = protos.iter().map(|p| p.noise_scale).collect::<Vec<_>>();
            c.push(format!("{name}.noise"), Tensor::new(vec![noise.len()], noise)?)?;
        }
        let ids = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        c.manifest.insert("kind".into(), "dataset".into());
        c.manifest.insert("classes".into(), self.classes.to_string());
        c.manifest.insert("shots".into(), self.shots.to_string());
        c.manifest.insert("base_ids".into(), ids(&self.base_ids));
        c.manifest.insert("new_ids".into(), ids(&self.new_ids));
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "dataset" {
            return Err(Error::Compatibility(format!("expected a dataset, found {:?}", c.meta("kind")?)));
        }
        let num = |key: &str| -> Result<usize> {
            c.meta(key)?
                .parse()
                .map_err(|_| Error::Compatibility(format!("manifest {key} is not a count")))
        };
        let ids = |key: &str| -> Result<Vec<usize>> {
            let raw = c.meta(key)?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| s.parse().map_err(|_| Error::Compatibility(format!("manifest {key}: bad id {s:?}"))))
                .collect()
        };
        let classes = num("classes")?;
        let samples = |name: &str| -> Result<Vec<Sample>> {
            let images = unstack(c, &format!("{name}.images"))?;
            let labels = labels(c, &format!("{name}.labels"), classes)?;
            if images.len() != labels.len() {
                return Err(Error::Compatibility(format!("{name}: {} images, {} labels", images.len(), labels.len())));
            }
            Ok(images.into_iter().zip(labels).map(|(image, label)| Sample { image, label }).collect())
        };
        let protos = |name: &str| -> Result<Vec<ClassPrototype>> {
            let images = unstack(c, &format!("{name}.prototypes"))?;
            let noise = c.matrix(&format!("{name}.noise"))?;
            if images.len() != classes || noise.len() != classes {
                return Err(Error::Compatibility(format!("{name} prototypes do not cover {classes} classes")));
            }
            Ok(images
                .into_iter()
                .enumerate()
                .map(|(class_id, prototype)| ClassPrototype {
                    class_id,
                    prototype,
                    noise_scale: noise.data()[class_id],
                })
                .collect())
        };
        Ok(Self {
            classes,
            base_ids: ids("base_ids")?,
            new_ids: ids("new_ids")?,
            shots: num("shots")?,
            train: samples("train")?,
            base_test: samples("base_test")?,
            new_test: samples("new_test")?,
            source: protos("source")?,
            target: protos("target")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn stack<'a>(mut images: impl ExactSizeIterator<Item = &'a Matrix>) -> Result<Tensor> {
    let n = images.len();
    let Some(first) = images.next() else {
        return Tensor::new(vec![0, 0, 0], Vec::new());
    };
    let (r, c) = first.shape();
    let mut data = first.data().to_vec();
    for m in images {
        if m.shape() != (r, c) {
            return Err(Error::dim("stack", format!("{:?} vs {:?}", m.shape(), (r, c))));
        }
        data.extend_from_slice(m.data());
    }
    Tensor::new(vec![n, r, c], data)
}

fn unstack(c: &Container, name: &str) -> Result<Vec<Matrix>> {
    let t = c
        .get(name)
        .ok_or_else(|| Error::Compatibility(format!("dataset lacks tensor {name:?}")))?;
    let &[n, r, cols] = t.dims() else {
        return Err(Error::Compatibility(format!("{name} must be rank 3, is rank {}", t.rank())));
    };
    let size = r * cols;
    (0..n)
        .map(|i| Matrix::from_vec(r, cols, t.data()[i * size..(i + 1) * size].to_vec()))
        .collect()
}

fn labels(c: &Container, name: &str, classes: usize) -> Result<Vec<usize>> {
    let t = c
        .get(name)
        .ok_or_else(|| Error::Compatibility(format!("dataset lacks tensor {name:?}")))?;
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::Compatibility(format!("{name}: label {v} outside 0..{classes}")))
            }
        })
        .collect()
}

/// `2·base·new/(base + new)`, and 0 when both are 0.
pub fn harmonic_mean(base_acc: f64, new_acc: f64) -> f64 {
    if base_acc + new_acc == 0.0 {
        return 0.0;
    }
    2.0 * base_acc * new_acc / (base_acc + new_acc)
}

/// Class-id → position map for a class subset.
pub fn positions(class_ids: &[usize]) -> BTreeMap<usize, usize> {
    class_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes() {
        let s = generate(10, 16, 1).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.base_ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.new_ids, vec![5, 6, 7, 8, 9]);
        assert!(s.train.iter().all(|x| x.label < 5));
        assert!(s.new_test.iter().all(|x| x.label >= 5));
    }

    #[test]
    fn odd_classes_rejected() {
        assert!(matches!(generate(7, 4, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn noiseless_samples_equal_prototypes() {
        let cfg = DataConfig {
            noise: 0.0,
            ..DataConfig::default()
        };
        let s = generate_with(&cfg, 5).unwrap();
        for x in &s.train {
            assert_eq!(x.image, s.target[x.label].prototype);
        }
    }

    #[test]
    fn prototypes_are_separated() {
        let s = generate(10, 2, 8).unwrap();
        for (i, a) in s.source.iter().enumerate() {
            for b in &s.source[i + 1..] {
                assert!(a.prototype.sub(&b.prototype).unwrap().frobenius_norm() >= 6.0);
            }
        }
    }

    #[test]
    fn harmonic_mean_edges() {
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 50.0), 0.0);
        assert_eq!(harmonic_mean(42.5, 42.5), 42.5);
    }

    #[test]
    fn container_round_trip() {
        let s = generate(4, 3, 2).unwrap();
        let back = FewShotSplit::from_container(&Container::from_bytes(&s.to_container().unwrap().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, s);
    }
}

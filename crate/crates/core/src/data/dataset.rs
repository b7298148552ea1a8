//! Train/test dataset bundles: construction from MNIST-style sources and
//! persistence in the tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{sha256_hex, Container, ContainerWriter};
use super::synth::{self, Placement};
use super::{DataError, ImageStack, LabeledImageSet, Labels, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Binarized source digits.
    Mnist,
    /// Binarized digits at uniform integer offsets on a black canvas.
    Translated {
        canvas: usize,
        n_train: Option<usize>,
        n_test: Option<usize>,
    },
    /// Two binarized digits per image, the second composited over the first.
    Superimposed { canvas: usize, n_train: usize, n_test: usize },
}

impl DatasetSpec {
    pub fn translated() -> Self {
        DatasetSpec::Translated {
            canvas: 36,
            n_train: None,
            n_test: None,
        }
    }

    pub fn superimposed() -> Self {
        DatasetSpec::Superimposed {
            canvas: 50,
            n_train: 100_000,
            n_test: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub spec: DatasetSpec,
    pub threshold: f64,
    pub seed: u64,
}

/// Ground truth for superimposed sets: the binarized source digits and where
/// each layer came from. Diagnostic only, never used for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub sources: ImageStack,
    /// `[back, front]` per image.
    pub layers: Vec<[Placement; 2]>,
}

impl Provenance {
    pub fn layers_of(&self, i: usize, h: usize, w: usize) -> [Vec<f32>; 2] {
        self.layers[i].map(|p| synth::render_layer(&self.sources, &p, h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: BuildConfig,
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub train_provenance: Option<Provenance>,
    pub test_provenance: Option<Provenance>,
    pub source_sha256: [String; 2],
}

fn source_digest(s: &LabeledImageSet) -> String {
    let mut bytes = Vec::with_capacity(s.images.data.len() * 4);
    for v in &s.images.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Labels::Single(l) = &s.labels {
        bytes.extend_from_slice(l);
    }
    sha256_hex(&bytes)
}

fn build_split(
    src: &LabeledImageSet,
    cfg: &BuildConfig,
    split: &str,
) -> Result<(LabeledImageSet, Option<Provenance>)> {
    let bin = synth::binarize(src, cfg.threshold)?;
    let split_seed = seed::derive(cfg.seed, seed::key(split));
    let train = split == "train";
    match &cfg.spec {
        DatasetSpec::Mnist => Ok((bin, None)),
        DatasetSpec::Translated { canvas, n_train, n_test } => {
            let count = if train { *n_train } else { *n_test };
            let (set, _) = synth::translate_set(&bin, *canvas, *canvas, count, split_seed)?;
            Ok((set, None))
        }
        DatasetSpec::Superimposed { canvas, n_train, n_test } => {
            let count = if train { *n_train } else { *n_test };
            let sup = synth::superimpose_set(&bin, *canvas, count, split_seed)?;
            Ok((
                sup.set,
                Some(Provenance {
                    sources: bin.images,
                    layers: sup.provenance,
                }),
            ))
        }
    }
}

impl Dataset {
    pub fn build(source_train: &LabeledImageSet, source_test: &LabeledImageSet, config: BuildConfig) -> Result<Self> {
        let (train, train_provenance) = build_split(source_train, &config, "train")?;
        let (test, test_provenance) = build_split(source_test, &config, "test")?;
        Ok(Self {
            source_sha256: [source_digest(source_train), source_digest(source_test)],
            config,
            train,
            test,
            train_provenance,
            test_provenance,
        })
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.train.images.h, self.train.images.w)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut w = ContainerWriter::create(dir)?;
        for (split, set, prov) in [
            ("train", &self.train, &self.train_provenance),
            ("test", &self.test, &self.test_provenance),
        ] {
            let im = &set.images;
            w.add_f32(&format!("{split}_images"), &[im.n, im.h, im.w], &im.data)?;
            match &set.labels {
                Labels::Single(l) => {
                    let v: Vec<f32> = l.iter().map(|&d| d as f32).collect();
                    w.add_f32(&format!("{split}_labels"), &[l.len()], &v)?;
                }
                Labels::Pair(l) => {
                    let v: Vec<f32> = l.iter().flat_map(|p| p.map(|d| d as f32)).collect();
                    w.add_f32(&format!("{split}_labels"), &[l.len(), 2], &v)?;
                }
            }
            if let Some(p) = prov {
                let s = &p.sources;
                w.add_f32(&format!("{split}_sources"), &[s.n, s.h, s.w], &s.data)?;
                let v: Vec<f32> = p
                    .layers
                    .iter()
                    .flat_map(|pair| pair.iter().flat_map(|q| [q.source as f32, q.dy as f32, q.dx as f32]))
                    .collect();
                w.add_f32(&format!("{split}_provenance"), &[p.layers.len(), 6], &v)?;
            }
        }
        let meta = serde_json::json!({
            "build": self.config,
            "counts": {"train": self.train.len(), "test": self.test.len()},
            "image_size": [self.train.images.h, self.train.images.w],
            "source_sha256": {"train": self.source_sha256[0], "test": self.source_sha256[1]},
            "choices": {
                "binarize": "pixel > threshold",
                "translation": "uniform integer offsets",
                "pair_sampling": "uniform with replacement from the same split",
                "layer_order": "first drawn is back, second drawn is composited over it",
                "per_image_seed": "derive(derive(seed, split), index)",
            },
        });
        w.finish("dataset", meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let c = Container::open(dir)?;
        if c.manifest.kind != "dataset" {
            return Err(DataError::Invalid(format!(
                "{} holds a {}, not a dataset",
                dir.display(),
                c.manifest.kind
            )));
        }
        let meta = &c.manifest.meta;
        let config: BuildConfig = serde_json::from_value(meta["build"].clone())
            .map_err(|e| DataError::Invalid(format!("{}: bad build config: {e}", dir.display())))?;
        let sha = |s: &str| meta["source_sha256"][s].as_str().unwrap_or_default().to_string();
        let load_split = |split: &str| -> Result<(LabeledImageSet, Option<Provenance>)> {
            let stack = |name: &str| -> Result<ImageStack> {
                let (shape, data) = c.read_f32(name)?;
                match shape[..] {
                    [n, h, w] => ImageStack::new(n, h, w, data),
                    _ => Err(DataError::Invalid(format!("{name}: expected rank 3, got {shape:?}"))),
                }
            };
            let images = stack(&format!("{split}_images"))?;
            let (lshape, l) = c.read_f32(&format!("{split}_labels"))?;
            let labels = if lshape.len() == 2 {
                Labels::Pair(l.chunks_exact(2).map(|p| [p[0] as u8, p[1] as u8]).collect())
            } else {
                Labels::Single(l.iter().map(|&d| d as u8).collect())
            };
            let prov = if c.has(&format!("{split}_provenance")) {
                let sources = stack(&format!("{split}_sources"))?;
                let (_, p) = c.read_f32(&format!("{split}_provenance"))?;
                let layers = p
                    .chunks_exact(6)
                    .map(|r| {
                        let pl = |o: usize| Placement {
                            source: r[o] as usize,
                            dy: r[o + 1] as usize,
                            dx: r[o + 2] as usize,
                        };
                        [pl(0), pl(3)]
                    })
                    .collect();
                Some(Provenance { sources, layers })
            } else {
                None
            };
            Ok((LabeledImageSet::new(images, labels)?, prov))
        };
        let (train, train_provenance) = load_split("train")?;
        let (test, test_provenance) = load_split("test")?;
        Ok(Self {
            config,
            train,
            test,
            train_provenance,
            test_provenance,
            source_sha256: [sha("train"), sha("test")],
        })
    }
}

//! Image grids written as 8-bit grayscale PNG and binary PGM.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ImageStack, Labels};
use crate::model::Model;
use crate::seed;
use crate::tensor::{Tensor, TensorError};

/// Separator between cells, mid gray so black and white digits both stand out.
const GAP: usize = 1;
const GAP_VALUE: u8 = 128;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    #[error(transparent)]
    Model(#[from] TensorError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, RenderError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Composites drawn from the prior.
    Samples,
    /// Per sample: the final image above each layer's canonical image.
    CanonicalAndFinal,
    /// Per input: input, reconstruction, then each layer.
    Decomposition,
    /// Per class: the mean input above the mean canonical estimate per layer.
    ClassAverages,
}

impl RenderMode {
    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Samples => "samples",
            RenderMode::CanonicalAndFinal => "canonical_and_final",
            RenderMode::Decomposition => "decomposition",
            RenderMode::ClassAverages => "class_averages",
        }
    }

    /// Whether the mode draws from a dataset rather than the prior.
    pub fn needs_images(self) -> bool {
        matches!(self, RenderMode::Decomposition | RenderMode::ClassAverages)
    }
}

impl std::str::FromStr for RenderMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "samples" => Ok(RenderMode::Samples),
            "canonical_and_final" => Ok(RenderMode::CanonicalAndFinal),
            "decomposition" => Ok(RenderMode::Decomposition),
            "class_averages" => Ok(RenderMode::ClassAverages),
            _ => Err(format!(
                "unknown render mode '{s}' (expected samples, canonical_and_final, decomposition or class_averages)"
            )),
        }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub cell_h: usize,
    pub cell_w: usize,
    pub pixels: Vec<u8>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, cell_h: usize, cell_w: usize) -> Self {
        let (h, w) = (rows * (cell_h + GAP) + GAP, cols * (cell_w + GAP) + GAP);
        let mut pixels = vec![GAP_VALUE; h * w];
        let mut g = Self {
            rows,
            cols,
            cell_h,
            cell_w,
            pixels: Vec::new(),
        };
        for r in 0..rows {
            for c in 0..cols {
                let (y0, x0) = g.origin(r, c);
                for y in 0..cell_h {
                    pixels[(y0 + y) * w + x0..(y0 + y) * w + x0 + cell_w].fill(0);
                }
            }
        }
        g.pixels = pixels;
        g
    }

    pub fn height(&self) -> usize {
        self.rows * (self.cell_h + GAP) + GAP
    }

    pub fn width(&self) -> usize {
        self.cols * (self.cell_w + GAP) + GAP
    }

    fn origin(&self, r: usize, c: usize) -> (usize, usize) {
        (GAP + r * (self.cell_h + GAP), GAP + c * (self.cell_w + GAP))
    }

    /// Writes one `cell_h × cell_w` image, values in `[0, 1]`.
    pub fn set(&mut self, r: usize, c: usize, image: &[f64]) {
        assert_eq!(image.len(), self.cell_h * self.cell_w, "cell size");
        let (y0, x0) = self.origin(r, c);
        let w = self.width();
        for y in 0..self.cell_h {
            for x in 0..self.cell_w {
                self.pixels[(y0 + y) * w + x0 + x] = quantize(image[y * self.cell_w + x]);
            }
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width() as u32, self.height() as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.pixels)?;
        }
        Ok(out)
    }

    /// Writes `{stem}.png` and `{stem}.pgm` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|source| RenderError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths = Vec::new();
        for (ext, bytes) in [("png", self.to_png()?), ("pgm", self.to_pgm())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, bytes).map_err(|source| RenderError::Io {
                path: path.clone(),
                source,
            })?;
            paths.push(path);
        }
        Ok(paths)
    }
}

const MAX_COLS: usize = 10;

fn image_at(t: &Tensor, i: usize) -> &[f64] {
    let per = t.numel() / t.shape()[0];
    &t.data()[i * per..(i + 1) * per]
}

pub fn samples_grid(model: &Model, count: usize, seed_: u64) -> Result<Grid> {
    let g = model.generate(count, &mut seed::rng_for(seed_, "render"))?;
    let cols = count.clamp(1, MAX_COLS);
    let rows = count.div_ceil(cols);
    let mut grid = Grid::new(rows, cols, model.config.image_h, model.config.image_w);
    for i in 0..count {
        grid.set(i / cols, i % cols, image_at(&g.composite, i));
    }
    Ok(grid)
}

pub fn canonical_and_final_grid(model: &Model, count: usize, seed_: u64) -> Result<Grid> {
    let g = model.generate(count, &mut seed::rng_for(seed_, "render"))?;
    let cols = count.clamp(1, MAX_COLS);
    let block = 1 + g.canonicals.len();
    let mut grid = Grid::new(count.div_ceil(cols) * block, cols, model.config.image_h, model.config.image_w);
    for i in 0..count {
        let (r, c) = ((i / cols) * block, i % cols);
        grid.set(r, c, image_at(&g.composite, i));
        for (k, canon) in g.canonicals.iter().enumerate() {
            grid.set(r + 1 + k, c, image_at(canon, i));
        }
    }
    Ok(grid)
}

pub fn decomposition_grid(model: &Model, images: &Tensor) -> Result<Grid> {
    let d = model.nets.decompose(&model.store, images)?;
    let n = images.shape()[0];
    let mut grid = Grid::new(n, 2 + d.layers.len(), model.config.image_h, model.config.image_w);
    for i in 0..n {
        grid.set(i, 0, image_at(images, i));
        grid.set(i, 1, image_at(&d.reconstruction, i));
        for (k, layer) in d.layers.iter().enumerate() {
            grid.set(i, 2 + k, image_at(layer, i));
        }
    }
    Ok(grid)
}

pub fn class_averages_grid(model: &Model, images: &ImageStack, labels: &Labels) -> Result<Grid> {
    let Labels::Single(labels) = labels else {
        return Err(RenderError::Input("class averages need single-digit labels".into()));
    };
    let pixels = images.pixels();
    let layers = model.config.layers;
    let mut sums = vec![vec![0.0; pixels]; 10 * (1 + layers)];
    let mut counts = [0usize; 10];
    let all: Vec<usize> = (0..images.n).collect();
    for rows in all.chunks(super::features::CHUNK) {
        let x = images.batch(rows);
        let canon = model.canonical_estimates(&x)?;
        for (i, &r) in rows.iter().enumerate() {
            let d = labels[r] as usize;
            counts[d] += 1;
            for (k, src) in std::iter::once(&x).chain(&canon).enumerate() {
                for (s, v) in sums[k * 10 + d].iter_mut().zip(image_at(src, i)) {
                    *s += v;
                }
            }
        }
    }
    let mut grid = Grid::new(1 + layers, 10, images.h, images.w);
    for k in 0..=layers {
        for d in 0..10 {
            let n = counts[d].max(1) as f64;
            let avg: Vec<f64> = sums[k * 10 + d].iter().map(|s| s / n).collect();
            grid.set(k, d, &avg);
        }
    }
    Ok(grid)
}

/// Renders `mode` into `out_dir` and returns the written paths.
///
/// Prior-sampling modes draw `count` samples; image modes use the first
/// `count` images of `inputs` (class averages use all of them).
pub fn render(
    model: &Model,
    mode: RenderMode,
    inputs: Option<(&ImageStack, &Labels)>,
    count: usize,
    seed_: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if count == 0 {
        return Err(RenderError::Input("count must be positive".into()));
    }
    let grid = match (mode, inputs) {
        (RenderMode::Samples, _) => samples_grid(model, count, seed_)?,
        (RenderMode::CanonicalAndFinal, _) => canonical_and_final_grid(model, count, seed_)?,
        (RenderMode::Decomposition, Some((images, _))) => {
            let n = count.min(images.n);
            decomposition_grid(model, &images.range(0, n))?
        }
        (RenderMode::ClassAverages, Some((images, labels))) => class_averages_grid(model, images, labels)?,
        (m, None) => return Err(RenderError::Input(format!("{} needs a dataset", m.name()))),
    };
    grid.save(out_dir, mode.name())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};

    fn tiny(kind: ModelKind) -> Model {
        let cfg = ModelConfig {
            content_dim: 2,
            content_hidden: vec![8],
            pose_hidden: vec![4],
            ..ModelConfig::defaults(kind, 6, 6)
        };
        Model::new(cfg, 5).unwrap()
    }

    #[test]
    fn grid_layout() {
        let mut g = Grid::new(2, 3, 2, 2);
        assert_eq!((g.height(), g.width()), (7, 10));
        g.set(1, 2, &[1.0, 0.5, 0.0, 2.0]);
        let w = g.width();
        assert_eq!(g.pixels[4 * w + 7..4 * w + 9], [255, 128]);
        assert_eq!(g.pixels[5 * w + 7..5 * w + 9], [0, 255]);
        assert_eq!(g.pixels[0], GAP_VALUE);
        assert!(g.to_pgm().starts_with(b"P5\n10 7\n255\n"));
    }

    #[test]
    fn decomposition_columns() {
        let m = tiny(ModelKind::Cstvae);
        let x = Tensor::zeros(vec![3, 6, 6]);
        let g = decomposition_grid(&m, &x).unwrap();
        assert_eq!((g.rows, g.cols), (3, 4));
    }

    #[test]
    fn renders_are_reproducible() {
        let m = tiny(ModelKind::Stvae);
        let dir = tempfile::tempdir().unwrap();
        let a = render(&m, RenderMode::CanonicalAndFinal, None, 12, 3, &dir.path().join("a")).unwrap();
        let b = render(&m, RenderMode::CanonicalAndFinal, None, 12, 3, &dir.path().join("b")).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
        }
        let png = fs::read(&a[0]).unwrap();
        assert_eq!(&png[1..4], b"PNG");
    }

    #[test]
    fn image_modes_need_inputs() {
        let m = tiny(ModelKind::Vae);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            render(&m, RenderMode::Decomposition, None, 4, 0, dir.path()),
            Err(RenderError::Input(_))
        ));
    }

    #[test]
    fn class_averages_shape() {
        let m = tiny(ModelKind::Stvae);
        let imgs = ImageStack::zeros(20, 6, 6);
        let labels = Labels::Single((0..20).map(|i| (i % 10) as u8).collect());
        let g = class_averages_grid(&m, &imgs, &labels).unwrap();
        assert_eq!((g.rows, g.cols), (2, 10));
    }
}

//! Image datasets: IDX ingestion, synthesis of derived sets, and the on-disk
//! tensor container shared with checkpoints.

pub mod container;
pub mod dataset;
pub mod idx;
pub mod synth;

use std::path::PathBuf;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad format at byte {offset}: {msg}")]
    Format { path: PathBuf, offset: u64, msg: String },
    #[error("{path}: checksum mismatch (manifest {expected}, file {actual})")]
    Checksum {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

/// `n` grayscale images of `h × w` pixels stored as `f32` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageStack {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(DataError::Invalid(format!(
                "{} pixels for {n} images of {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            h,
            w,
            data: vec![0.0; n * h * w],
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.data[i * self.pixels()..(i + 1) * self.pixels()]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let p = self.pixels();
        &mut self.data[i * p..(i + 1) * p]
    }

    /// The selected images as a `[len, h, w]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| v as f64));
        }
        Tensor::new(vec![indices.len(), self.h, self.w], data).expect("batch shape")
    }

    pub fn range(&self, start: usize, end: usize) -> Tensor {
        self.batch(&(start..end).collect::<Vec<_>>())
    }

    pub fn to_tensor(&self) -> Tensor {
        self.range(0, self.n)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [n, h, w] => Self::new(n, h, w, t.data().iter().map(|&v| v as f32).collect()),
            ref s => Err(DataError::Invalid(format!("expected [n, h, w] images, got {s:?}"))),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<u8>),
    /// Digit pairs in draw order (back, front).
    Pair(Vec<[u8; 2]>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Pair(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: ImageStack,
    pub labels: Labels,
}

impl LabeledImageSet {
    pub fn new(images: ImageStack, labels: Labels) -> Result<Self> {
        if images.n != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} images but {} labels",
                images.n,
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    /// The first `n` examples.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let labels = match &self.labels {
            Labels::Single(v) => Labels::Single(v[..n].to_vec()),
            Labels::Pair(v) => Labels::Pair(v[..n].to_vec()),
        };
        let images = ImageStack {
            n,
            data: self.images.data[..n * self.images.pixels()].to_vec(),
            ..self.images
        };
        Self { images, labels }
    }
}

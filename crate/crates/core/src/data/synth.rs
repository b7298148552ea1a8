//! Derived datasets: binarized digits, translated digits on a larger canvas,
//! and two digits superimposed with the over operator.
//!
//! Every output image draws from its own stream seeded by
//! `derive(master_seed, index)`, so a set is a pure function of its source,
//! seed and configuration regardless of generation order.

use rand::Rng;

use super::{DataError, ImageStack, LabeledImageSet, Labels, Result};
use crate::seed;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel becomes 1 iff it exceeds `threshold`.
pub fn binarize(s: &LabeledImageSet, threshold: f64) -> Result<LabeledImageSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DataError::Invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let mut images = s.images.clone();
    for v in &mut images.data {
        *v = if (*v as f64) > threshold { 1.0 } else { 0.0 };
    }
    LabeledImageSet::new(images, s.labels.clone())
}

/// Where a source digit was put on the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub source: usize,
    pub dy: usize,
    pub dx: usize,
}

fn check_canvas(src: &ImageStack, ch: usize, cw: usize) -> Result<()> {
    if ch < src.h || cw < src.w {
        return Err(DataError::Invalid(format!(
            "canvas {ch}x{cw} smaller than {}x{} source images",
            src.h, src.w
        )));
    }
    if src.n == 0 {
        return Err(DataError::Invalid("empty source set".into()));
    }
    Ok(())
}

fn draw_placement<R: Rng>(rng: &mut R, src: &ImageStack, ch: usize, cw: usize, source: usize) -> Placement {
    let dy = rng.random_range(0..=ch - src.h);
    let dx = rng.random_range(0..=cw - src.w);
    Placement { source, dy, dx }
}

/// The source digit of `p` alone on a black `ch × cw` canvas.
pub fn render_layer(src: &ImageStack, p: &Placement, ch: usize, cw: usize) -> Vec<f32> {
    let mut out = vec![0.0; ch * cw];
    let img = src.image(p.source);
    for i in 0..src.h {
        let row = &img[i * src.w..(i + 1) * src.w];
        out[(p.dy + i) * cw + p.dx..(p.dy + i) * cw + p.dx + src.w].copy_from_slice(row);
    }
    out
}

/// Premultiplied over, `front + (1 − front) · back`, in place on `back`.
pub fn over_into(front: &[f32], back: &mut [f32]) {
    for (b, &f) in back.iter_mut().zip(front) {
        *b = f + (1.0 - f) * *b;
    }
}

fn image_rng(master: u64, i: usize) -> seed::Rng {
    seed::rng(seed::derive(master, i as u64))
}

/// Places each digit at a uniform integer offset on a black canvas.
///
/// `count` defaults to the source size; image `k` uses source `k mod n`.
pub fn translate_set(
    s: &LabeledImageSet,
    canvas_h: usize,
    canvas_w: usize,
    count: Option<usize>,
    master_seed: u64,
) -> Result<(LabeledImageSet, Vec<Placement>)> {
    let src = &s.images;
    check_canvas(src, canvas_h, canvas_w)?;
    let Labels::Single(src_labels) = &s.labels else {
        return Err(DataError::Invalid("translate_set needs single-digit labels".into()));
    };
    let count = count.unwrap_or(src.n);
    let mut images = ImageStack::zeros(count, canvas_h, canvas_w);
    let mut labels = Vec::with_capacity(count);
    let mut placements = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = image_rng(master_seed, k);
        let p = draw_placement(&mut rng, src, canvas_h, canvas_w, k % src.n);
        images.image_mut(k).copy_from_slice(&render_layer(src, &p, canvas_h, canvas_w));
        labels.push(src_labels[p.source]);
        placements.push(p);
    }
    Ok((LabeledImageSet::new(images, Labels::Single(labels))?, placements))
}

/// A superimposed set with the provenance of both layers of every image.
#[derive(Clone, Debug, PartialEq)]
pub struct Superimposed {
    pub set: LabeledImageSet,
    /// `[back, front]` per image.
    pub provenance: Vec<[Placement; 2]>,
}

impl Superimposed {
    /// Ground-truth layers of image `i`, `[back, front]`.
    pub fn layers(&self, source: &ImageStack, i: usize) -> [Vec<f32>; 2] {
        let (h, w) = (self.set.images.h, self.set.images.w);
        self.provenance[i].map(|p| render_layer(source, &p, h, w))
    }
}

/// Two digits drawn uniformly with replacement, each translated uniformly
/// onto a black `canvas × canvas` image; the second is composited over the
/// first.
pub fn superimpose_set(s: &LabeledImageSet, canvas: usize, count: usize, master_seed: u64) -> Result<Superimposed> {
    let src = &s.images;
    check_canvas(src, canvas, canvas)?;
    let Labels::Single(src_labels) = &s.labels else {
        return Err(DataError::Invalid("superimpose_set needs single-digit labels".into()));
    };
    let mut images = ImageStack::zeros(count, canvas, canvas);
    let mut labels = Vec::with_capacity(count);
    let mut provenance = Vec::with_capacity(count);
    for k in 0..count {
        let mut rng = image_rng(master_seed, k);
        let a = rng.random_range(0..src.n);
        let back = draw_placement(&mut rng, src, canvas, canvas, a);
        let b = rng.random_range(0..src.n);
        let front = draw_placement(&mut rng, src, canvas, canvas, b);
        let mut out = render_layer(src, &back, canvas, canvas);
        over_into(&render_layer(src, &front, canvas, canvas), &mut out);
        images.image_mut(k).copy_from_slice(&out);
        labels.push([src_labels[a], src_labels[b]]);
        provenance.push([back, front]);
    }
    Ok(Superimposed {
        set: LabeledImageSet::new(images, Labels::Pair(labels))?,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits(n: usize, h: usize, w: usize) -> LabeledImageSet {
        let data = (0..n * h * w).map(|k| ((k * 31 + 7) % 3 == 0) as u8 as f32).collect();
        LabeledImageSet::new(
            ImageStack::new(n, h, w, data).unwrap(),
            Labels::Single((0..n).map(|i| (i % 10) as u8).collect()),
        )
        .unwrap()
    }

    #[test]
    fn binarize_examples() {
        let s = LabeledImageSet::new(ImageStack::new(1, 2, 2, vec![0.4; 4]).unwrap(), Labels::Single(vec![0])).unwrap();
        assert!(binarize(&s, 0.5).unwrap().images.data.iter().all(|&v| v == 0.0));
        let b = digits(3, 4, 4);
        assert_eq!(binarize(&b, 0.5).unwrap(), b);
        assert!(binarize(&b, 1.0).is_err());
    }

    #[test]
    fn translate_same_canvas_is_identity() {
        let s = digits(4, 5, 5);
        let (t, p) = translate_set(&s, 5, 5, None, 1).unwrap();
        assert_eq!(t, s);
        assert!(p.iter().all(|p| p.dy == 0 && p.dx == 0));
    }

    #[test]
    fn translate_preserves_mass_and_is_seeded() {
        let s = digits(6, 4, 4);
        let (a, pa) = translate_set(&s, 9, 9, Some(12), 3).unwrap();
        let (b, pb) = translate_set(&s, 9, 9, Some(12), 3).unwrap();
        assert_eq!((a.clone(), pa.clone()), (b, pb));
        for (k, p) in pa.iter().enumerate() {
            let before: f32 = s.images.image(p.source).iter().sum();
            let after: f32 = a.images.image(k).iter().sum();
            assert_eq!(before, after);
            assert!(p.dy <= 5 && p.dx <= 5);
        }
        assert!(translate_set(&s, 3, 9, None, 0).is_err());
    }

    #[test]
    fn superimposed_is_union_of_provenance_layers() {
        let s = digits(5, 4, 4);
        let sup = superimpose_set(&s, 8, 20, 9).unwrap();
        for i in 0..20 {
            let [back, front] = sup.layers(&s.images, i);
            let union: Vec<f32> = back.iter().zip(&front).map(|(a, b)| a.max(*b)).collect();
            assert_eq!(sup.set.images.image(i), union.as_slice());
        }
        assert!(sup.set.images.is_binary());
    }
}

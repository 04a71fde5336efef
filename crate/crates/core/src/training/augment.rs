//! Training augmentation and deterministic evaluation preprocessing.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::imaging::PixelImage;

/// Shorter-side resize target for a given crop (256 when crop = 224).
pub fn resize_short_for_crop(crop: usize) -> usize {
    ((crop * 256) as f64 / 224.0).round() as usize
}

/// Uniformly spaced slice indices: `idx_k = floor(k * s / n)`.
pub fn eval_slice_indices(s: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| k * s / n).collect()
}

/// Random slice indices: `n` without replacement when possible, otherwise
/// with replacement. Returned sorted to preserve stack order.
pub fn train_slice_indices(s: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = if s >= n {
        index_sample(rng, s, n).into_iter().collect()
    } else {
        (0..n).map(|_| rng.random_range(0..s)).collect()
    };
    idx.sort_unstable();
    idx
}

/// Training-time augmentation of one record's planes. Geometry (slice
/// choice, flips, crop window, erase region) is drawn once per record and
/// shared across slices; erase fill noise is per slice.
pub fn augment_train(planes: &[PixelImage], crop: usize, slice_sample: usize, rng: &mut ChaCha8Rng) -> Vec<PixelImage> {
    assert!(!planes.is_empty());
    let chosen: Vec<&PixelImage> = if planes.len() > 1 {
        train_slice_indices(planes.len(), slice_sample, rng)
            .into_iter()
            .map(|i| &planes[i])
            .collect()
    } else {
        vec![&planes[0]]
    };

    let short = resize_short_for_crop(crop);
    let (rh, rw) = crate::imaging::shorter_side_dims(chosen[0].h, chosen[0].w, short);

    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    let top = rng.random_range(0..=(rh - crop));
    let left = rng.random_range(0..=(rw - crop));

    let erase = rng.random_bool(0.5).then(|| {
        let area_frac: f32 = rng.random_range(0.02..0.20);
        let aspect: f32 = rng.random_range(0.3..3.3);
        let area = area_frac * (crop * crop) as f32;
        let eh = ((area * aspect).sqrt().round() as usize).clamp(1, crop);
        let ew = ((area / aspect).sqrt().round() as usize).clamp(1, crop);
        let ey = rng.random_range(0..=(crop - eh));
        let ex = rng.random_range(0..=(crop - ew));
        (ey, ex, eh, ew)
    });

    chosen
        .into_iter()
        .map(|plane| {
            let mut img = plane.resize(rh, rw).crop(top, left, crop, crop);
            if hflip {
                img = img.flip_horizontal();
            }
            if vflip {
                img = img.flip_vertical();
            }
            if let Some((ey, ex, eh, ew)) = erase {
                for c in 0..3 {
                    for y in ey..ey + eh {
                        for x in ex..ex + ew {
                            img.set(c, y, x, rng.random_range(0.0..1.0));
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Deterministic evaluation preprocessing: shorter side to the resize
/// target, center crop; scans use uniformly spaced slices.
pub fn preprocess_eval(planes: &[PixelImage], crop: usize, slice_sample: usize) -> Vec<PixelImage> {
    assert!(!planes.is_empty());
    let chosen: Vec<&PixelImage> = if planes.len() > 1 {
        eval_slice_indices(planes.len(), slice_sample)
            .into_iter()
            .map(|i| &planes[i])
            .collect()
    } else {
        vec![&planes[0]]
    };
    let short = resize_short_for_crop(crop);
    chosen
        .into_iter()
        .map(|p| p.resize_shorter_side(short).center_crop(crop))
        .collect()
}

use crate::error::{Error, Result};
use crate::tensor::{Scalar, SeededRng, Tensor};

/// Smallest resize factor of the diversity transform.
pub const DIVERSITY_MIN_SCALE: f64 = 0.85;

/// Draws one diversity transform for a `[N, C, H, W]` batch as a gather map
/// (`None` marks zero padding), or `None` when the transform is skipped.
///
/// With probability `p` the image is nearest-neighbour resized to a random
/// size in `[0.85, 1.0]` of each extent and zero-padded back at a random
/// offset.
pub fn diversity_index_map(shape: &[usize], p: f64, rng: &mut SeededRng) -> Result<Option<Vec<Option<usize>>>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("diversity probability {p} outside [0, 1]")));
    }
    if shape.len() != 4 {
        return Err(Error::shape("input_diversity", format!("expected NCHW, got {shape:?}")));
    }
    if !rng.bernoulli(p) {
        return Ok(None);
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let lo_h = ((h as f64) * DIVERSITY_MIN_SCALE).ceil() as usize;
    let lo_w = ((w as f64) * DIVERSITY_MIN_SCALE).ceil() as usize;
    let rh = lo_h.min(h) + rng.below(h - lo_h.min(h) + 1);
    let rw = lo_w.min(w) + rng.below(w - lo_w.min(w) + 1);
    let top = rng.below(h - rh + 1);
    let left = rng.below(w - rw + 1);
    let mut index = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                let inside = y >= top && y < top + rh && x >= left && x < left + rw;
                index.push(inside.then(|| {
                    let sy = (y - top) * h / rh;
                    let sx = (x - left) * w / rw;
                    plane * h * w + sy * w + sx
                }));
            }
        }
    }
    Ok(Some(index))
}

/// Applies one draw of the diversity transform to `x`.
pub fn input_diversity_transform<T: Scalar>(x: &Tensor<T>, p: f64, rng: &mut SeededRng) -> Result<Tensor<T>> {
    match diversity_index_map(x.shape(), p, rng)? {
        None => Ok(x.clone()),
        Some(index) => {
            let d = x.data();
            Tensor::new(
                x.shape().to_vec(),
                index.iter().map(|i| i.map_or(T::zero(), |i| d[i])).collect(),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Tensor<f32> {
        SeededRng::new(0).uniform_tensor(vec![2, 3, 20, 20], 0.1, 1.0)
    }

    #[test]
    fn p_zero_is_identity() {
        let x = img();
        let mut rng = SeededRng::new(1);
        for _ in 0..20 {
            assert_eq!(input_diversity_transform(&x, 0.0, &mut rng).unwrap(), x);
        }
    }

    #[test]
    fn p_one_keeps_shape_and_pads() {
        let x = img();
        let mut rng = SeededRng::new(2);
        let mut changed = 0;
        for _ in 0..20 {
            let y = input_diversity_transform(&x, 1.0, &mut rng).unwrap();
            assert_eq!(y.shape(), x.shape());
            if y != x {
                changed += 1;
                // resized content is padded with zeros, which never occur in x
                assert!(y.data().contains(&0.0));
            }
        }
        assert!(changed > 10);
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let x = img();
        let a = input_diversity_transform(&x, 0.7, &mut SeededRng::new(9)).unwrap();
        let b = input_diversity_transform(&x, 0.7, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }
}

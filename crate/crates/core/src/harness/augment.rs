use crate::harness::synth::Sample;
use crate::metrics::LabelMask;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Largest small-angle rotation, in degrees.
pub const MAX_ROTATION_DEG: f64 = 15.0;

/// A geometric transform applied identically to image and mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Identity,
    HorizontalFlip,
    VerticalFlip,
    /// Counter-clockwise rotation by `k·90°`.
    Rot90(u8),
    /// Rotation about the image center by an angle in radians.
    Rotate(f64),
}

impl Transform {
    /// Draw one transform uniformly over the five kinds.
    pub fn random(rng: &mut RngStream) -> Self {
        match rng.below(5) {
            0 => Transform::Identity,
            1 => Transform::HorizontalFlip,
            2 => Transform::VerticalFlip,
            3 => Transform::Rot90(1 + rng.below(3) as u8),
            _ => {
                let deg = rng.uniform_range(-MAX_ROTATION_DEG, MAX_ROTATION_DEG);
                Transform::Rotate(deg.to_radians())
            }
        }
    }

    /// Source coordinate `(row, col)` read by output pixel `(r, c)` of a
    /// square `n × n` image.
    pub fn source(self, r: usize, c: usize, n: usize) -> (f64, f64) {
        let last = (n - 1) as f64;
        let (rf, cf) = (r as f64, c as f64);
        match self {
            Transform::Identity => (rf, cf),
            Transform::HorizontalFlip => (rf, last - cf),
            Transform::VerticalFlip => (last - rf, cf),
            Transform::Rot90(k) => match k % 4 {
                0 => (rf, cf),
                1 => (cf, last - rf),
                2 => (last - rf, last - cf),
                _ => (last - cf, rf),
            },
            Transform::Rotate(theta) => {
                let center = last / 2.0;
                let (s, co) = theta.sin_cos();
                let (dy, dx) = (rf - center, cf - center);
                (center + co * dy - s * dx, center + s * dy + co * dx)
            }
        }
    }

    fn is_exact(self) -> bool {
        !matches!(self, Transform::Rotate(_))
    }

    /// Apply to a `[C,n,n]` image (bilinear, edge clamped) and its mask
    /// (nearest).
    pub fn apply(self, image: &Tensor<f32>, mask: &LabelMask) -> (Tensor<f32>, LabelMask) {
        let n = mask.width();
        assert_eq!(mask.height(), n, "augmentation expects square samples");
        let channels = image.shape()[0];
        let src = image.data();
        let mut out = vec![0f32; src.len()];
        let mut out_mask = mask.clone();
        let last = (n - 1) as f64;
        for r in 0..n {
            for c in 0..n {
                let (sy, sx) = self.source(r, c, n);
                let (sy, sx) = (sy.clamp(0.0, last), sx.clamp(0.0, last));
                if self.is_exact() {
                    let (y, x) = (sy as usize, sx as usize);
                    for ch in 0..channels {
                        out[(ch * n + r) * n + c] = src[(ch * n + y) * n + x];
                    }
                    out_mask.set(r, c, mask.get(y, x));
                    continue;
                }
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
                let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                for ch in 0..channels {
                    let p = |y: usize, x: usize| src[(ch * n + y) * n + x];
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out[(ch * n + r) * n + c] = top * (1.0 - fy) + bot * fy;
                }
                out_mask.set(r, c, mask.get(sy.round() as usize, sx.round() as usize));
            }
        }
        let image = Tensor::new(image.shape(), out).expect("same shape");
        (image, out_mask)
    }
}

/// Apply a randomly drawn transform to a sample.
pub fn augment(sample: &Sample, rng: &mut RngStream) -> Sample {
    let (image, mask) = Transform::random(rng).apply(&sample.image, &sample.mask);
    Sample { image, mask }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Sample {
        let mut rng = RngStream::new(5, 0);
        let n = 9;
        let image = Tensor::from_fn(&[3, n, n], |_| rng.uniform() as f32);
        let labels = (0..n * n).map(|_| rng.below(3) as u8).collect();
        Sample {
            image,
            mask: LabelMask::new(n, n, labels).unwrap(),
        }
    }

    #[test]
    fn flip_twice_and_zero_rotation_are_identity() {
        let s = sample();
        for t in [Transform::HorizontalFlip, Transform::VerticalFlip] {
            let (i1, m1) = t.apply(&s.image, &s.mask);
            let (i2, m2) = t.apply(&i1, &m1);
            assert_eq!((i2, m2), (s.image.clone(), s.mask.clone()));
        }
        let (i, m) = Transform::Rotate(0.0).apply(&s.image, &s.mask);
        assert_eq!((i, m), (s.image.clone(), s.mask.clone()));
        let mut img = s.image.clone();
        let mut msk = s.mask.clone();
        for _ in 0..4 {
            (img, msk) = Transform::Rot90(1).apply(&img, &msk);
        }
        assert_eq!((img, msk), (s.image, s.mask));
    }

    #[test]
    fn random_transforms_cover_all_kinds() {
        let mut rng = RngStream::new(0, 0);
        let mut kinds = [false; 5];
        for _ in 0..200 {
            let k = match Transform::random(&mut rng) {
                Transform::Identity => 0,
                Transform::HorizontalFlip => 1,
                Transform::VerticalFlip => 2,
                Transform::Rot90(k) => {
                    assert!((1..=3).contains(&k));
                    3
                }
                Transform::Rotate(a) => {
                    assert!(a.abs() <= MAX_ROTATION_DEG.to_radians());
                    4
                }
            };
            kinds[k] = true;
        }
        assert!(kinds.iter().all(|&k| k));
    }
}

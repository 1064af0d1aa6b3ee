use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Parameters of the synthetic multi-scale segmentation task.
///
/// Class 1 objects are small discs, class 2 objects large rotated ellipses;
/// further classes alternate between the two shapes. Every class has its own
/// intensity, the background is dark, and Gaussian noise is added.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: (usize, usize),
    pub radius_small: (f64, f64),
    pub radius_large: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 3,
            objects_per_image: (2, 3),
            radius_small: (9.0, 13.0),
            radius_large: (22.0, 30.0),
            noise_sigma: 0.05,
            seed: 1,
        }
    }
}

/// One image `[3,S,S]` with values in `[0,1]` and its label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMask,
}

const BACKGROUND: f64 = 0.15;
const SUPERSAMPLE: usize = 4;

/// Intensity of an object of class `c ≥ 1`.
pub fn class_intensity(c: usize, num_classes: usize) -> f64 {
    0.4 + 0.55 * (c as f64 - 1.0) / ((num_classes - 1).max(2) as f64 - 1.0)
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: usize,
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Shape {
    fn extent(&self) -> f64 {
        self.a.max(self.b)
    }

    fn inside(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad("synthetic class count must be in 2..=255");
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad("objects per image must be a non-empty positive range");
        }
        for (lo, hi) in [self.radius_small, self.radius_large] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad("radius ranges must be positive and ordered");
            }
        }
        // largest shape must fit the canvas
        if 2.0 * self.radius_large.1 + 4.0 > self.image_size as f64 {
            return bad("large radius does not fit the image");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be finite and non-negative");
        }
        Ok(())
    }

    /// The `index`-th sample of the dataset defined by this spec.
    pub fn sample(&self, index: u64) -> Result<Sample> {
        generate_sample(self, &mut RngStream::new(self.seed, index))
    }
}

fn draw_shape(spec: &SynthSpec, rng: &mut RngStream, class: usize, placed: &[Shape]) -> Option<Shape> {
    let small = class % 2 == 1;
    let size = spec.image_size as f64;
    for _ in 0..200 {
        let shape = if small {
            // rasterized discs stay within the nominal area bound
            let hi = (spec.radius_small.1 - std::f64::consts::FRAC_1_SQRT_2).max(spec.radius_small.0);
            let r = rng.uniform_range(spec.radius_small.0, hi.max(spec.radius_small.0 + 1e-9));
            Shape { class, cy: 0.0, cx: 0.0, a: r, b: r, theta: 0.0 }
        } else {
            let (lo, hi) = spec.radius_large;
            let a = rng.uniform_range(lo, hi + 1e-9);
            let b = rng.uniform_range(lo, hi + 1e-9);
            let theta = rng.uniform_range(0.0, std::f64::consts::PI);
            Shape { class, cy: 0.0, cx: 0.0, a, b, theta }
        };
        let e = shape.extent() + 1.0;
        let cy = rng.uniform_range(e, size - e);
        let cx = rng.uniform_range(e, size - e);
        let candidate = Shape { cy, cx, ..shape };
        let clear = placed
            .iter()
            .all(|p| ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt() > p.extent() + candidate.extent() + 3.0);
        if clear {
            return Some(candidate);
        }
    }
    None
}

/// Draw one sample. With at least two objects per image the first object is
/// a small disc and the second a large ellipse; the rest pick classes at
/// random. Objects never overlap or touch.
pub fn generate_sample(spec: &SynthSpec, rng: &mut RngStream) -> Result<Sample> {
    spec.validate()?;
    let s = spec.image_size;
    let (lo, hi) = spec.objects_per_image;
    let count = lo + rng.below(hi - lo + 1);
    let large_class = if spec.num_classes > 2 { 2 } else { 1 };
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for k in 0..count {
        let class = match k {
            0 => 1,
            1 => large_class,
            _ => 1 + rng.below(spec.num_classes - 1),
        };
        if let Some(sh) = draw_shape(spec, rng, class, &shapes) {
            shapes.push(sh);
        } else if k < 2 {
            return Err(Error::invalid("could not place the required objects; image too small"));
        }
    }

    let mut mask = LabelMask::filled(s, s, 0);
    let mut gray = vec![BACKGROUND; s * s];
    let step = 1.0 / SUPERSAMPLE as f64;
    for sh in &shapes {
        let intensity = class_intensity(sh.class, spec.num_classes);
        let e = sh.extent() + 1.0;
        let r0 = (sh.cy - e).floor().max(0.0) as usize;
        let r1 = ((sh.cy + e).ceil() as usize).min(s - 1);
        let c0 = (sh.cx - e).floor().max(0.0) as usize;
        let c1 = ((sh.cx + e).ceil() as usize).min(s - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                // pixel centers sit at integer coordinates
                if sh.inside(r as f64, c as f64) {
                    mask.set(r, c, sh.class as u8);
                }
                let mut cover = 0usize;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        let y = r as f64 - 0.5 + (i as f64 + 0.5) * step;
                        let x = c as f64 - 0.5 + (j as f64 + 0.5) * step;
                        cover += sh.inside(y, x) as usize;
                    }
                }
                let f = cover as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                let g = &mut gray[r * s + c];
                *g = *g * (1.0 - f) + intensity * f;
            }
        }
    }
    for g in &mut gray {
        *g = (*g + spec.noise_sigma * rng.normal()).clamp(0.0, 1.0);
    }
    let mut data = Vec::with_capacity(3 * s * s);
    for _ in 0..3 {
        data.extend(gray.iter().map(|&g| g as f32));
    }
    Ok(Sample {
        image: Tensor::new(&[3, s, s], data)?,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let spec = SynthSpec::default();
        let a = spec.sample(3).unwrap();
        let b = spec.sample(3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, spec.sample(4).unwrap());
        a.mask.check_classes(3).unwrap();
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a.image.shape(), &[3, 128, 128]);
    }

    #[test]
    fn both_object_classes_present() {
        let spec = SynthSpec::default();
        for i in 0..10 {
            let m = spec.sample(i).unwrap().mask;
            assert!(m.labels().contains(&1));
            assert!(m.labels().contains(&2));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = SynthSpec::default();
        s.radius_large = (50.0, 70.0);
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.objects_per_image = (3, 2);
        assert!(s.validate().is_err());
    }
}

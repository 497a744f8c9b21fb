//! Weak-perspective (scaled orthographic) camera.
//!
//! Convention used by every stage: `u = s·x + tx`, `v = −s·y + ty` (image y
//! points down), `d = z` unscaled, and a larger `d` is closer to the camera.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub scale: f32,
    pub tx: f32,
    pub ty: f32,
}

impl Default for CameraParams {
    fn default() -> Self {
        CameraParams { scale: 1.0, tx: 0.0, ty: 0.0 }
    }
}

impl CameraParams {
    pub fn new(scale: f32, tx: f32, ty: f32) -> Result<Self> {
        let c = CameraParams { scale, tx, ty };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::param("camera.scale", format!("must be positive, got {}", self.scale)));
        }
        if !self.tx.is_finite() || !self.ty.is_finite() {
            return Err(Error::param("camera", "translation must be finite"));
        }
        Ok(())
    }
}

/// Projected position: NDC `u`, `v` and depth `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected {
    pub u: f32,
    pub v: f32,
    pub d: f32,
}

#[inline]
pub fn project(k: [f32; 3], c: &CameraParams) -> Projected {
    Projected { u: c.scale * k[0] + c.tx, v: -(c.scale * k[1]) + c.ty, d: k[2] }
}

pub fn project_all(vertices: &[[f32; 3]], c: &CameraParams) -> Vec<Projected> {
    vertices.iter().map(|&k| project(k, c)).collect()
}

/// Pixel addressed by NDC `(u, v)` on a `width × height` grid, `None` when culled.
#[inline]
pub fn to_pixel(u: f32, v: f32, width: usize, height: usize) -> Option<(usize, usize)> {
    let px = ((u + 1.0) * 0.5 * width as f32).floor();
    let py = ((v + 1.0) * 0.5 * height as f32).floor();
    // NaN fails both comparisons and is culled.
    if px >= 0.0 && py >= 0.0 && px < width as f32 && py < height as f32 {
        Some((px as usize, py as usize))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn projection_examples() {
        let k = [0.5, -0.25, 0.1];
        let p = project(k, &CameraParams::default());
        assert_eq!((p.u, p.v, p.d), (0.5, 0.25, 0.1));
        let p = project(k, &CameraParams::new(2.0, 0.0, 0.0).unwrap());
        assert_eq!((p.u, p.v, p.d), (1.0, 0.5, 0.1));
        let p = project(k, &CameraParams::new(1.0, 0.1, 0.0).unwrap());
        assert_eq!(p.u, 0.6);
        assert_eq!(p.d, 0.1);
    }

    #[test]
    fn pixel_examples() {
        assert_eq!(to_pixel(-1.0, -1.0, 256, 256), Some((0, 0)));
        assert_eq!(to_pixel(0.0, 0.0, 256, 256), Some((128, 128)));
        assert_eq!(to_pixel(1.0, 0.0, 256, 256), None);
        assert_eq!(to_pixel(0.0, -1.01, 256, 256), None);
        assert_eq!(to_pixel(f32::NAN, 0.0, 4, 4), None);
    }

    #[test]
    fn rejects_nonpositive_scale() {
        assert!(CameraParams::new(0.0, 0.0, 0.0).is_err());
        assert!(CameraParams::new(-1.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn projection_is_affine(a in prop::array::uniform3(-2.0f32..2.0), b in prop::array::uniform3(-2.0f32..2.0),
                                alpha in 0.0f32..1.0, s in 0.1f32..3.0, tx in -1.0f32..1.0, ty in -1.0f32..1.0) {
            let c = CameraParams::new(s, tx, ty).unwrap();
            let mix = [0, 1, 2].map(|i| alpha * a[i] + (1.0 - alpha) * b[i]);
            let p = project(mix, &c);
            let (pa, pb) = (project(a, &c), project(b, &c));
            prop_assert!((p.u - (alpha * pa.u + (1.0 - alpha) * pb.u)).abs() < 1e-5);
            prop_assert!((p.v - (alpha * pa.v + (1.0 - alpha) * pb.v)).abs() < 1e-5);
            prop_assert!((p.d - (alpha * pa.d + (1.0 - alpha) * pb.d)).abs() < 1e-5);
        }

        #[test]
        fn depth_order_ignores_camera(a in prop::array::uniform3(-2.0f32..2.0), b in prop::array::uniform3(-2.0f32..2.0),
                                      s in 0.1f32..3.0, tx in -1.0f32..1.0, ty in -1.0f32..1.0) {
            let c = CameraParams::new(s, tx, ty).unwrap();
            let before = a[2].partial_cmp(&b[2]);
            let after = project(a, &c).d.partial_cmp(&project(b, &c).d);
            prop_assert_eq!(before, after);
        }
    }
}

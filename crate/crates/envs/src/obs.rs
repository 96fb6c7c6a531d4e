//! Observation image convention: 84x84 row-major RGB bytes, with an 8x8
//! map-ID patch at rows 0-7 / cols 0-7 and the 8x8 target-color patch
//! directly to its right at cols 8-15.

pub const IMG_W: usize = 84;
pub const IMG_H: usize = 84;
pub const PATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub pixels: Vec<u8>, // IMG_H * IMG_W * 3
}

impl Observation {
    pub fn blank() -> Self {
        Observation {
            pixels: vec![0; IMG_H * IMG_W * 3],
        }
    }

    #[inline]
    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * IMG_W + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * IMG_W + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Normalized float image in [0, 1], channel-major [3, H, W] — the
    /// layout the convolutional encoder consumes.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let mut out = vec![0f32; 3 * IMG_H * IMG_W];
        for ch in 0..3 {
            for r in 0..IMG_H {
                for c in 0..IMG_W {
                    out[(ch * IMG_H + r) * IMG_W + c] =
                        self.pixels[(r * IMG_W + c) * 3 + ch] as f32 / 255.0;
                }
            }
        }
        out
    }
}

/// Grayscale ramp for the map-ID patch.
pub fn map_id_gray(map_id: usize, n_maps: usize) -> u8 {
    ((map_id + 1) as f64 * (255.0 / (n_maps + 1) as f64)).round() as u8
}

/// Stamp the two top-left indicator patches over a rendered frame.
pub fn apply_overlay(obs: &mut Observation, map_id: usize, n_maps: usize, target_rgb: [u8; 3]) {
    let gray = map_id_gray(map_id, n_maps);
    for r in 0..PATCH {
        for c in 0..PATCH {
            obs.put(r, c, [gray, gray, gray]);
            obs.put(r, c + PATCH, target_rgb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_layout_is_bit_exact() {
        let mut obs = Observation::blank();
        apply_overlay(&mut obs, 2, 5, [10, 20, 30]);
        let gray = map_id_gray(2, 5);
        assert_eq!(gray, 128); // 3 * 255/6 = 127.5 rounds half up
        assert_eq!(obs.get(0, 0), [gray, gray, gray]);
        assert_eq!(obs.get(7, 7), [gray, gray, gray]);
        assert_eq!(obs.get(0, 8), [10, 20, 30]);
        assert_eq!(obs.get(7, 15), [10, 20, 30]);
        assert_eq!(obs.get(0, 16), [0, 0, 0]);
        assert_eq!(obs.get(8, 0), [0, 0, 0]);
    }

    #[test]
    fn chw_conversion_places_channels_planes() {
        let mut obs = Observation::blank();
        obs.put(0, 0, [255, 0, 51]);
        let f = obs.to_chw_f32();
        assert_eq!(f[0], 1.0);
        assert_eq!(f[IMG_H * IMG_W], 0.0);
        assert!((f[2 * IMG_H * IMG_W] - 0.2).abs() < 1e-6);
    }
}

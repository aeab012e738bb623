//! Sinusoidal encodings for spot coordinates and flow time.
//!
//! Both interleave `[sin, cos]` pairs, so the encoding of position 0 is `[0, 1, 0, 1, ...]`.

use crate::error::{ensure, Result};

fn sinusoid_into(out: &mut Vec<f64>, pos: f64, width: usize, base: f64) {
    for i in 0..width / 2 {
        let freq = base.powf(-((2 * i) as f64) / width as f64);
        let a = pos * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Encode a 2-D spot coordinate: the first `dim / 2` channels encode the
/// first axis, the rest the second axis.
pub fn sinusoidal_pe(coord: [f64; 2], dim: usize, base: f64) -> Result<Vec<f64>> {
    ensure!(dim > 0 && dim % 4 == 0, "positional encoding width {dim} must be a positive multiple of 4");
    let mut out = Vec::with_capacity(dim);
    sinusoid_into(&mut out, coord[0], dim / 2, base);
    sinusoid_into(&mut out, coord[1], dim / 2, base);
    Ok(out)
}

/// Encode `t` in `[0, 1]`; `t` is multiplied by `scale` before the sinusoids.
pub fn time_embed(t: f64, dim: usize, base: f64, scale: f64) -> Result<Vec<f64>> {
    ensure!((0.0..=1.0).contains(&t), "time {t} outside [0, 1]");
    ensure!(dim > 0 && dim % 2 == 0, "time embedding width {dim} must be even");
    let mut out = Vec::with_capacity(dim);
    sinusoid_into(&mut out, t * scale, dim, base);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub dim: usize,
    pub base: f64,
    /// Ablation switch; a disabled encoding contributes nothing.
    pub enabled: bool,
}

impl PositionalEncoding {
    pub fn encode(&self, coord: [f64; 2]) -> Result<Vec<f64>> {
        if !self.enabled {
            return Ok(vec![0.0; self.dim]);
        }
        sinusoidal_pe(coord, self.dim, self.base)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub base: f64,
    pub scale: f64,
}

impl TimeEmbedding {
    pub fn new(dim: usize) -> Self {
        TimeEmbedding {
            dim,
            base: 10_000.0,
            scale: 1000.0,
        }
    }

    pub fn encode(&self, t: f64) -> Result<Vec<f64>> {
        time_embed(t, self.dim, self.base, self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_alternates() {
        let v = sinusoidal_pe([0.0, 0.0], 8, 10_000.0).unwrap();
        assert_eq!(v, vec![0., 1., 0., 1., 0., 1., 0., 1.]);
    }

    #[test]
    fn axes_are_independent() {
        let a = sinusoidal_pe([2.0, 5.0], 8, 10_000.0).unwrap();
        let b = sinusoidal_pe([5.0, 2.0], 8, 10_000.0).unwrap();
        assert_ne!(a, b);
        assert_eq!(&a[..4], &b[4..]);
        let c = sinusoidal_pe([3.0, 3.0], 8, 10_000.0).unwrap();
        assert_eq!(&c[..4], &c[4..]);
    }

    #[test]
    fn pe_matches_transcribed_formula() {
        // PE(p, 2i) = sin(p / base^(2i / d)), PE(p, 2i + 1) = cos(...), d = 4 per axis
        let v = sinusoidal_pe([3.0, 7.0], 8, 10_000.0).unwrap();
        let expected = [
            (3.0f64).sin(),
            (3.0f64).cos(),
            (3.0f64 / 100.0).sin(),
            (3.0f64 / 100.0).cos(),
            (7.0f64).sin(),
            (7.0f64).cos(),
            (7.0f64 / 100.0).sin(),
            (7.0f64 / 100.0).cos(),
        ];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pe_width_must_be_multiple_of_four() {
        assert!(sinusoidal_pe([0.0, 0.0], 6, 10_000.0).is_err());
    }

    #[test]
    fn disabled_pe_is_zero() {
        let pe = PositionalEncoding {
            dim: 8,
            base: 10_000.0,
            enabled: false,
        };
        assert_eq!(pe.encode([4.0, 1.0]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn time_zero_alternates_and_differs_from_one() {
        let te = TimeEmbedding::new(16);
        let z = te.encode(0.0).unwrap();
        assert!(z.chunks(2).all(|p| p == [0.0, 1.0]));
        assert_ne!(z, te.encode(1.0).unwrap());
    }

    #[test]
    fn time_half_matches_transcription() {
        let v = time_embed(0.5, 4, 10_000.0, 1000.0).unwrap();
        let p = 500.0f64;
        let expected = [p.sin(), p.cos(), (p / 100.0).sin(), (p / 100.0).cos()];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn time_outside_unit_interval_is_rejected() {
        assert!(time_embed(1.5, 4, 10_000.0, 1000.0).is_err());
        assert!(time_embed(-0.1, 4, 10_000.0, 1000.0).is_err());
    }

    #[test]
    fn time_embedding_is_injective_on_grid() {
        let te = TimeEmbedding::new(16);
        let embs: Vec<Vec<f64>> = (0..1000).map(|i| te.encode(i as f64 / 999.0).unwrap()).collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].iter().zip(&embs[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 1e-9, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn values_in_unit_range() {
        for t in [0.0, 0.3, 1.0] {
            assert!(TimeEmbedding::new(32).encode(t).unwrap().iter().all(|v| v.abs() <= 1.0));
        }
        assert!(sinusoidal_pe([123.0, -40.0], 16, 10_000.0).unwrap().iter().all(|v| v.abs() <= 1.0));
    }
}

//! Fully-connected networks built from tape primitives.

use super::{Tape, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One affine layer; weights are `in x out`, bias is `1 x out`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, scale: f64) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut draw = |_: (usize, usize)| scale * rng.random_range(-bound..bound);
        let w = Array2::from_shape_fn((fan_in, fan_out), &mut draw);
        let b = Array2::from_shape_fn((1, fan_out), &mut draw);
        Self {
            w: Tensor::parameter(w),
            b: Tensor::parameter(b),
        }
    }
}

/// Multi-layer perceptron with ReLU between hidden layers and a linear
/// output. Output nonlinearities (tanh action heads, message normalization)
/// are applied by the caller on slices of the output.
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths input-first; `final_scale` shrinks the last
    /// layer's initialization (small initial outputs stabilize early control).
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize], final_scale: f64) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let scale = if i == dims.len() - 2 { final_scale } else { 1.0 };
                Linear::init(rng, w[0], w[1], scale)
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor, super::AutodiffError> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(&h, &layer.w)?;
            let z = tape.add(&z, &layer.b)?;
            h = if i < last { tape.relu(&z)? } else { z };
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.b.clone()])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let (wi, wo) = l.w.shape();
                let (_, bo) = l.b.shape();
                wi * wo + bo
            })
            .sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.shape().0
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.shape().1
    }

    /// Independent copy with fresh parameter storage.
    pub fn deep_clone(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Linear {
                    w: Tensor::parameter(l.w.value_clone()),
                    b: Tensor::parameter(l.b.value_clone()),
                })
                .collect(),
        }
    }

    /// `self = (1 - tau) * self + tau * other`, element-wise.
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) {
        for (mine, theirs) in self.layers.iter().zip(other.layers.iter()) {
            for (t, o) in [(&mine.w, &theirs.w), (&mine.b, &theirs.b)] {
                let ov = o.value_clone();
                t.map_values(|v| {
                    v.zip_mut_with(&ov, |a, &b| *a = (1.0 - tau) * *a + tau * b);
                });
            }
        }
    }

    pub fn copy_from(&mut self, other: &Mlp) {
        for (mine, theirs) in self.layers.iter().zip(other.layers.iter()) {
            mine.w.set_values(theirs.w.value_clone());
            mine.b.set_values(theirs.b.value_clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&mut rng, &[5, 16, 16, 16, 3], 1.0);
        assert_eq!(mlp.input_dim(), 5);
        assert_eq!(mlp.output_dim(), 3);
        assert_eq!(mlp.param_count(), 5 * 16 + 16 + 16 * 16 + 16 + 16 * 16 + 16 + 16 * 3 + 3);
        let x = Tensor::from_row(&[0.1, -0.2, 0.3, 0.4, -0.5]);
        let mut t1 = Tape::new();
        let y1 = mlp.forward(&mut t1, &x).unwrap();
        let mut t2 = Tape::new();
        let y2 = mlp.forward(&mut t2, &x).unwrap();
        assert_eq!(y1.value_clone(), y2.value_clone());
        assert_eq!(y1.shape(), (1, 3));
    }

    #[test]
    fn final_scale_shrinks_last_layer_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mlp::new(&mut rng, &[4, 8, 8, 8, 2], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Mlp::new(&mut rng, &[4, 8, 8, 8, 2], 0.01);
        assert_eq!(
            a.layers[0].w.value_clone(),
            b.layers[0].w.value_clone()
        );
        let last_a = a.layers.last().unwrap().w.value_clone();
        let last_b = b.layers.last().unwrap().w.value_clone();
        assert_eq!(last_a.mapv(|v| v * 0.01), last_b);
    }

    #[test]
    fn soft_update_blends_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut target = Mlp::new(&mut rng, &[3, 4, 2], 1.0);
        let online = Mlp::new(&mut rng, &[3, 4, 2], 1.0);
        let before = target.layers[0].w.value_clone();
        let ov = online.layers[0].w.value_clone();
        target.soft_update_from(&online, 0.046);
        let after = target.layers[0].w.value_clone();
        for ((b, o), a) in before.iter().zip(ov.iter()).zip(after.iter()) {
            assert!((a - (0.954 * b + 0.046 * o)).abs() < 1e-15);
        }
    }
}

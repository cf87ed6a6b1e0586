//! Attribute head: three conv + max-pool stages over a pooled region block,
//! then a three-layer fully connected stack ending in six logits.

use rand::{Rng, RngCore};

use crate::annotation::NUM_ATTRIBUTES;
use crate::error::{Error, Result};
use crate::nn::layers::{dropout, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward};
use crate::nn::{Conv2d, ConvCache, FeatureMap, Linear, Module, Param};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct AttriHead<T> {
    pub in_channels: usize,
    pub pooled: (usize, usize),
    pub convs: Vec<Conv2d<T>>,
    pub fcs: Vec<Linear<T>>,
    pub dropout: f64,
    pub slope: T,
}

#[derive(Debug, Clone)]
pub struct AttriCache<T> {
    conv: Vec<ConvCache<T>>,
    activations: Vec<FeatureMap<T>>,
    pool_args: Vec<Vec<usize>>,
    flat_dims: (usize, usize, usize),
    fc_inputs: Vec<Vec<T>>,
    fc_outputs: Vec<Vec<T>>,
    dropout_masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AttriHead<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        pooled: (usize, usize),
        conv_channels: [usize; 3],
        fc_units: [usize; 3],
        dropout: f64,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        assert_eq!(fc_units[2], NUM_ATTRIBUTES, "attribute head must end in six units");
        let mut convs = Vec::new();
        let mut c_in = in_channels;
        for (i, &c) in conv_channels.iter().enumerate() {
            convs.push(Conv2d::new(&format!("attri.conv{i}"), c_in, c, 3, 1, slope, rng));
            c_in = c;
        }
        let (mut h, mut w) = pooled;
        for _ in 0..3 {
            h /= 2;
            w /= 2;
        }
        assert!(h > 0 && w > 0, "pooled block too small for three 2x pools");
        let mut fcs = Vec::new();
        let mut d = c_in * h * w;
        for (i, &u) in fc_units.iter().enumerate() {
            fcs.push(Linear::new(&format!("attri.fc{i}"), d, u, slope, rng));
            d = u;
        }
        Self {
            in_channels,
            pooled,
            convs,
            fcs,
            dropout,
            slope: T::lit(slope),
        }
    }

    /// Raw logits; dropout is active only when an RNG is supplied.
    pub fn forward_logits(
        &self,
        block: &FeatureMap<T>,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<([T; NUM_ATTRIBUTES], AttriCache<T>)> {
        if block.channels != self.in_channels || (block.height, block.width) != self.pooled {
            return Err(Error::argument(format!(
                "attribute head expects {}x{}x{}, got {}x{}x{}",
                self.pooled.0, self.pooled.1, self.in_channels, block.height, block.width, block.channels
            )));
        }
        let mut conv = Vec::new();
        let mut activations = Vec::new();
        let mut pool_args = Vec::new();
        let mut x = block.clone();
        for layer in &self.convs {
            let (mut y, cache) = layer.forward(&x);
            leaky_relu(&mut y.data, self.slope);
            let (p, arg) = max_pool2(&y);
            conv.push(cache);
            activations.push(y);
            pool_args.push(arg);
            x = p;
        }
        let flat_dims = x.dims();
        let mut v = x.data;
        let mut fc_inputs = Vec::new();
        let mut fc_outputs = Vec::new();
        let mut dropout_masks = Vec::new();
        let last = self.fcs.len() - 1;
        for (i, layer) in self.fcs.iter().enumerate() {
            let mut y = layer.forward(&v);
            fc_inputs.push(v);
            if i < last {
                leaky_relu(&mut y, self.slope);
                fc_outputs.push(y.clone());
                let mask = match rng.as_deref_mut() {
                    Some(r) if self.dropout > 0.0 => Some(dropout(&mut y, self.dropout, r)),
                    _ => None,
                };
                dropout_masks.push(mask);
            } else {
                fc_outputs.push(y.clone());
                dropout_masks.push(None);
            }
            v = y;
        }
        let mut logits = [T::zero(); NUM_ATTRIBUTES];
        logits.copy_from_slice(&v);
        Ok((
            logits,
            AttriCache {
                conv,
                activations,
                pool_args,
                flat_dims,
                fc_inputs,
                fc_outputs,
                dropout_masks,
            },
        ))
    }

    /// Attribute probabilities in `[0, 1]` (inference mode).
    pub fn forward(&self, block: &FeatureMap<T>) -> Result<[T; NUM_ATTRIBUTES]> {
        let (logits, _) = self.forward_logits(block, None)?;
        Ok(logits.map(sigmoid))
    }

    /// Accumulates parameter gradients and returns the gradient of the block.
    pub fn backward(&mut self, cache: &AttriCache<T>, grad_logits: &[T; NUM_ATTRIBUTES]) -> FeatureMap<T> {
        let mut g = grad_logits.to_vec();
        let last = self.fcs.len() - 1;
        for i in (0..self.fcs.len()).rev() {
            if i < last {
                if let Some(mask) = &cache.dropout_masks[i] {
                    for (gv, &m) in g.iter_mut().zip(mask) {
                        *gv = *gv * m;
                    }
                }
                leaky_relu_backward(&cache.fc_outputs[i], &mut g, self.slope);
            }
            g = self.fcs[i].backward(&cache.fc_inputs[i], &g);
        }
        let (c, h, w) = cache.flat_dims;
        let mut gm = FeatureMap::from_vec(c, h, w, g);
        for i in (0..self.convs.len()).rev() {
            let act = &cache.activations[i];
            let mut ga = max_pool2_backward(act.dims(), &cache.pool_args[i], &gm);
            leaky_relu_backward(&act.data, &mut ga.data, self.slope);
            gm = self.convs[i].backward(&cache.conv[i], &ga);
        }
        gm
    }
}

impl<T: Scalar> Module<T> for AttriHead<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.convs.iter().for_each(|c| c.visit_params(f));
        self.fcs.iter().for_each(|l| l.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.convs.iter_mut().for_each(|c| c.visit_params_mut(f));
        self.fcs.iter_mut().for_each(|l| l.visit_params_mut(f));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(dropout: f64) -> AttriHead<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        AttriHead::new(3, (8, 8), [4, 4, 4], [12, 8, NUM_ATTRIBUTES], dropout, 0.1, &mut rng)
    }

    fn block(seed: u64) -> FeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_vec(3, 8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn probabilities_are_sigmoids_of_logits() {
        let h = head(0.5);
        let b = block(0);
        let (logits, _) = h.forward_logits(&b, None).unwrap();
        let probs = h.forward(&b).unwrap();
        for k in 0..NUM_ATTRIBUTES {
            assert!((probs[k] - sigmoid(logits[k])).abs() < 1e-12);
        }
        assert!(h.forward(&FeatureMap::zeros(3, 9, 8)).is_err());
    }

    #[test]
    fn dropout_only_with_rng() {
        let h = head(0.5);
        let b = block(1);
        let a = h.forward_logits(&b, None).unwrap().0;
        assert_eq!(a, h.forward_logits(&b, None).unwrap().0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = h.forward_logits(&b, Some(&mut rng)).unwrap().0;
        assert_ne!(a, d);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut h = head(0.0);
        let b = block(3);
        let weights = [0.3, -1.0, 0.5, 2.0, -0.7, 1.1];
        let objective = |h: &AttriHead<f64>, b: &FeatureMap<f64>| {
            let (l, _) = h.forward_logits(b, None).unwrap();
            l.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>()
        };
        let (_, cache) = h.forward_logits(&b, None).unwrap();
        let gb = h.backward(&cache, &weights);
        let eps = 1e-6;
        for i in [0, 17, 64, 130, 191] {
            let mut p = b.clone();
            p.data[i] += eps;
            let mut m = b.clone();
            m.data[i] -= eps;
            let num = (objective(&h, &p) - objective(&h, &m)) / (2.0 * eps);
            assert!(
                (num - gb.data[i]).abs() <= 1e-5 * num.abs().max(1.0),
                "input {i}: {num} vs {}",
                gb.data[i]
            );
        }
        let mut probes = Vec::new();
        h.visit_params(&mut |p| probes.push((p.name.clone(), p.len() / 3, p.grad[p.len() / 3])));
        for (name, k, analytic) in probes {
            let shifted = |d: f64| {
                let mut c = h.clone();
                c.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value[k] += d;
                    }
                });
                objective(&c, &b)
            };
            let num = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
            assert!(
                (num - analytic).abs() <= 1e-5 * num.abs().max(1.0),
                "{name}[{k}]: {num} vs {analytic}"
            );
        }
    }
}

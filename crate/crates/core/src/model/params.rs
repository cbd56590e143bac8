use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::Tensor;

pub const INIT_STD: f64 = 0.02;

/// Named parameter tensors in the order given by
/// [`ModelConfig::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2")
}

fn is_norm_gain(name: &str) -> bool {
    name.ends_with(".g")
}

impl Parameters {
    /// Weights ~ N(0, 0.02²), biases and norm shifts zero, norm gains one.
    /// The patch convolutions instead use N(0, 2 / fan_in); at 0.02 the two
    /// stacked convolutions shrink pixel signal by about three orders of
    /// magnitude and image content barely reaches the encoder.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = config
            .param_shapes()
            .iter()
            .map(|(name, shape)| {
                if is_norm_gain(name) {
                    Tensor::full(shape, 1.0)
                } else if is_bias(name) {
                    Tensor::zeros(shape)
                } else {
                    let n = shape.iter().product();
                    let normal = if name.starts_with("patch.conv") {
                        Normal::new(0.0, (2.0 / shape[0] as f64).sqrt()).expect("valid std")
                    } else {
                        normal
                    };
                    let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::new(shape.clone(), data).expect("shape from config")
                }
            })
            .collect();
        Parameters::from_tensors(config, tensors)
    }

    /// Wraps tensors laid out as `config.param_shapes()`; shapes must match.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "config expects {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, got {:?}", t.shape())));
            }
        }
        let names: Vec<String> = shapes.into_iter().map(|s| s.0).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Parameters { config: config.clone(), names, tensors, index })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// The output projection. It is the token embedding itself.
    pub fn output_head(&self) -> &Tensor {
        self.get("embed.tokens").expect("token embedding")
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

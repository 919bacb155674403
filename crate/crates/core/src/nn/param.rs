use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{Real, Tensor};

/// A named parameter or state buffer with its gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
    /// Set whenever a backward pass writes into `grad`; cleared by [`Param::zero_grad`].
    pub touched: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            grad: vec![T::zero(); value.len()],
            value,
            trainable: true,
            touched: false,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Vec<T>) -> Self {
        Param {
            trainable: false,
            ..Param::new(name, shape, value)
        }
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Param::new(name, shape, vec![T::cast(v); shape.iter().product()])
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
        self.touched = false;
    }

    /// Gradient buffer for accumulation; marks the parameter as touched.
    pub fn grad_mut(&mut self) -> &mut [T] {
        self.touched = true;
        &mut self.grad
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Forward-pass mode. Training caches activations for backward and uses
/// batch statistics in batch norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    /// Visits every parameter and buffer in a fixed order.
    fn visit(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit(&mut |p| p.zero_grad());
    }

    fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

/// Single-input layer with a hand-written backward pass.
///
/// `backward` consumes the activations cached by the last `Mode::Train`
/// forward and accumulates parameter gradients.
pub trait Layer<T: Real>: Module<T> + Send {
    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T>;
    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T>;
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Normal samples truncated (by resampling) to ±2 standard deviations.
    pub fn trunc_normal<T: Real>(&mut self, len: usize, std: f64) -> Vec<T> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..len)
            .map(|_| loop {
                let z: f64 = normal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::cast(z * std);
                }
            })
            .collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

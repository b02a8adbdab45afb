//! Layer building blocks: convolution, transposed convolution,
//! modality-specific batch normalization, activations and dropout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Var;
use crate::error::{bail, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::DetRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One of the two imaging modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalityId(u8);

impl ModalityId {
    pub const FIRST: ModalityId = ModalityId(0);
    pub const SECOND: ModalityId = ModalityId(1);
    pub const BOTH: [ModalityId; 2] = [Self::FIRST, Self::SECOND];

    pub fn new(index: usize) -> Result<Self> {
        match index {
            0 | 1 => Ok(Self(index as u8)),
            _ => bail!(Config, "modality index {index} (expected 0 or 1)"),
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn other(self) -> Self {
        Self(1 - self.0)
    }
}

/// Kernel and bias of a convolution site.
///
/// For a convolution the kernel is `[out_ch, in_ch, kh, kw]`; a transposed
/// convolution stores the kernel of the convolution it transposes, i.e.
/// `[in_ch, out_ch, kh, kw]` from its own point of view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

fn kaiming<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut DetRng) -> Result<Tensor<T>> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| crate::error::Error::Config(e.to_string()))?;
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

impl Conv2dParams {
    #[allow(clippy::too_many_arguments)]
    /// Registers a convolution with fan-in scaled normal kernels and zero
    /// bias. Kernel extents must be odd.
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            bail!(Config, "convolution kernel extent {kernel} must be odd");
        }
        let k = kaiming(&[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, rng)?;
        let kernels = store.add(format!("{name}.weight"), k, true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])?, true)?;
        Ok(Self {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    #[allow(clippy::too_many_arguments)]
    /// Registers a transposed convolution mapping `in_ch` to `out_ch`.
    pub fn init_transposed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut DetRng,
    ) -> Result<Self> {
        let per_axis = kernel.div_ceil(stride.max(1));
        let k = kaiming(&[in_ch, out_ch, kernel, kernel], in_ch * per_axis * per_axis, rng)?;
        let kernels = store.add(format!("{name}.weight"), k, true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])?, true)?;
        Ok(Self {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, x: Var<'t, T>, bound: &Bound<'t, T>) -> Result<Var<'t, T>> {
        conv2d(x, bound.var(self.kernels), Some(bound.var(self.bias)), self.stride, self.padding)
    }

    pub fn forward_transposed<'t, T: Scalar>(&self, x: Var<'t, T>, bound: &Bound<'t, T>) -> Result<Var<'t, T>> {
        deconv2d(x, bound.var(self.kernels), Some(bound.var(self.bias)), self.stride, self.padding)
    }
}

pub fn conv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    kernels: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    x.conv2d(kernels, bias, stride, padding)
}

pub fn deconv2d<'t, T: Scalar>(
    x: Var<'t, T>,
    kernels: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    x.deconv2d(kernels, bias, stride, padding)
}

/// Affine parameters and running moments of one batch-norm site for one
/// modality.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub epsilon: f64,
    /// Weight kept on the old running moment at each update.
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        epsilon: f64,
        momentum: f64,
    ) -> Result<Self> {
        if !(epsilon >= 0.0) {
            bail!(Config, "batch norm epsilon {epsilon} must be non-negative");
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            bail!(Config, "batch norm momentum {momentum} must lie in (0,1)");
        }
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])?, true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])?, true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels])?, false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels])?, false)?,
            epsilon,
            momentum,
        })
    }

    /// Train mode normalizes with batch moments and folds them into the
    /// running moments; eval mode uses the running moments untouched.
    pub fn forward<'t, T: Scalar>(
        &self,
        x: Var<'t, T>,
        store: &mut ParamStore<T>,
        bound: &Bound<'t, T>,
        mode: Mode,
    ) -> Result<Var<'t, T>> {
        batchnorm(x, self, store, bound, mode)
    }
}

pub fn batchnorm<'t, T: Scalar>(
    x: Var<'t, T>,
    p: &BatchNormParams,
    store: &mut ParamStore<T>,
    bound: &Bound<'t, T>,
    mode: Mode,
) -> Result<Var<'t, T>> {
    let (gamma, beta) = (bound.var(p.gamma), bound.var(p.beta));
    let eps = T::lit(p.epsilon);
    match mode {
        Mode::Train => {
            let (y, moments) = x.batch_norm_train(gamma, beta, eps)?;
            let keep = T::lit(p.momentum);
            let take = T::one() - keep;
            let rm = store.get_mut(p.running_mean).tensor.data_mut();
            for (r, &m) in rm.iter_mut().zip(&moments.mean) {
                *r = keep * *r + take * m;
            }
            let rv = store.get_mut(p.running_var).tensor.data_mut();
            for (r, &v) in rv.iter_mut().zip(&moments.var) {
                *r = keep * *r + take * v;
            }
            Ok(y)
        }
        Mode::Eval => {
            let mean = store.tensor(p.running_mean).data().to_vec();
            let var = store.tensor(p.running_var).data().to_vec();
            x.batch_norm_eval(gamma, beta, &mean, &var, eps)
        }
    }
}

pub fn relu<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    x.relu()
}

/// Softmax over the channel axis (axis 1) of `[n,C,h,w]`.
pub fn softmax<'t, T: Scalar>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.softmax(1)
}

/// Inverted dropout: in train mode each entry is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; eval mode is identity.
pub fn dropout<'t, T: Scalar>(x: Var<'t, T>, rate: f64, mode: Mode, rng: &mut DetRng) -> Result<Var<'t, T>> {
    if !(0.0..1.0).contains(&rate) {
        bail!(Config, "dropout rate {rate} must lie in [0,1)");
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let scale = T::lit(1.0 / (1.0 - rate));
    let shape = x.shape();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            scale
        }
    })?;
    x.mul_const(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::SeedableRng;

    #[test]
    fn modality_ids() {
        assert_eq!(ModalityId::new(1).unwrap().index(), 1);
        assert!(ModalityId::new(2).is_err());
        assert_eq!(ModalityId::FIRST.other(), ModalityId::SECOND);
    }

    #[test]
    fn relu_clips_negatives() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(relu(x).value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(&[1.0, 2.0, 3.0]).unwrap());
        let mut rng = DetRng::seed_from_u64(1);
        assert_eq!(dropout(x, 0.0, Mode::Train, &mut rng).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        assert_eq!(dropout(x, 0.9, Mode::Eval, &mut rng).unwrap().value().data(), &[1.0, 2.0, 3.0]);
        assert!(dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(dropout(x, -0.1, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1_000_000]).unwrap());
        let mut rng = DetRng::seed_from_u64(11);
        let y = dropout(x, 0.75, Mode::Train, &mut rng).unwrap().value();
        let mean = y.data().iter().sum::<f64>() / 1e6;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn even_conv_kernel_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = DetRng::seed_from_u64(0);
        assert!(Conv2dParams::init(&mut store, "c", 1, 1, 2, 1, 0, &mut rng).is_err());
    }

    #[test]
    fn bn_rejects_bad_momentum() {
        let mut store = ParamStore::<f64>::new();
        assert!(BatchNormParams::init(&mut store, "bn", 2, 1e-5, 1.0).is_err());
        assert!(BatchNormParams::init(&mut store, "bn2", 2, -1.0, 0.9).is_err());
    }

    #[test]
    fn bn_train_updates_running_stats_eval_does_not() {
        let mut store = ParamStore::<f64>::new();
        let p = BatchNormParams::init(&mut store, "bn", 1, 0.0, 0.9).unwrap();
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let xv = tape.constant(x.clone());
            let y = p.forward(xv, &mut store, &bound, Mode::Train).unwrap();
            assert_eq!(y.value().data(), &[-1.0, 1.0]);
        }
        assert!((store.tensor(p.running_mean).data()[0] - 0.1).abs() < 1e-15);
        assert!((store.tensor(p.running_var).data()[0] - (0.9 + 0.1)).abs() < 1e-15);
        let before = store.clone();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let xv = tape.constant(x);
        p.forward(xv, &mut store, &bound, Mode::Eval).unwrap();
        assert_eq!(before, store);
    }
}

mod common;

use common::{conv_oracle, deconv_oracle, rng, uniform};
use csa_core::model::BnSettings;
use csa_core::nn::{self, BatchNormParams, Conv2dParams};
use csa_core::params::ParamStore;
use csa_core::{Error, Mode, Tape64, Tensor, Tensor64};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor64 {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn identity_kernel_conv_and_deconv() {
    let tape = Tape64::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64).unwrap());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
    assert_eq!(nn::conv2d(x, k, None, 1, 0).unwrap().value(), x.value());
    assert_eq!(nn::deconv2d(x, k, None, 1, 0).unwrap().value(), x.value());
}

#[test]
fn constant_input_all_ones_kernel() {
    let tape = Tape64::new();
    let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 2.5).unwrap());
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    let y = x.conv2d(k, None, 1, 1).unwrap().value();
    for r in 1..4 {
        for c in 1..4 {
            assert_eq!(y.get(&[0, 0, r, c]).unwrap(), 22.5);
        }
    }
    assert_eq!(y.get(&[0, 0, 0, 0]).unwrap(), 10.0);
}

#[test]
fn conv_matches_direct_summation() {
    let mut r = rng(1);
    let xd = uniform(2 * 3 * 9 * 9, &mut r);
    let kd = uniform(4 * 3 * 3 * 3, &mut r);
    let bd = uniform(4, &mut r);
    let tape = Tape64::new();
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (3, 0)] {
        let y = tape
            .constant(t(&[2, 3, 9, 9], xd.clone()))
            .conv2d(tape.constant(t(&[4, 3, 3, 3], kd.clone())), Some(tape.constant(t(&[4], bd.clone()))), stride, pad)
            .unwrap()
            .value();
        let (want, oh, ow) = conv_oracle(&xd, (2, 3, 9, 9), &kd, (4, 3, 3), Some(&bd), stride, pad);
        assert_eq!(y.shape(), &[2, 4, oh, ow]);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn conv_shape_errors() {
    let tape = Tape64::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap());
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    assert!(matches!(x.conv2d(k, None, 1, 1), Err(Error::Dimension(_))));
    let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
    assert!(matches!(x.conv2d(k, None, 2, 1), Err(Error::Dimension(_))));
}

#[test]
fn deconv_stride_two_overlap_sums() {
    let tape = Tape64::new();
    let x = tape.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let k = tape.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
    let y = x.deconv2d(k, None, 2, 0).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(y.data(), &want);
    // Kernel 3, stride 2: the middle row and column receive two inputs.
    let k3 = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    let y = x.deconv2d(k3, None, 2, 0).unwrap().value();
    assert_eq!(y.shape(), &[1, 1, 5, 5]);
    assert_eq!(y.get(&[0, 0, 2, 2]).unwrap(), 10.0);
    assert_eq!(y.get(&[0, 0, 0, 2]).unwrap(), 3.0);
}

#[test]
fn deconv_matches_scatter_oracle() {
    let mut r = rng(2);
    let xd = uniform(2 * 3 * 4 * 4, &mut r);
    let kd = uniform(3 * 2 * 4 * 4, &mut r);
    let tape = Tape64::new();
    for (stride, pad) in [(2, 1), (1, 0), (4, 0)] {
        let y = tape
            .constant(t(&[2, 3, 4, 4], xd.clone()))
            .deconv2d(tape.constant(t(&[3, 2, 4, 4], kd.clone())), None, stride, pad)
            .unwrap()
            .value();
        let (want, oh, ow) = deconv_oracle(&xd, (2, 3, 4, 4), &kd, (2, 4, 4), stride, pad);
        assert_eq!(y.shape(), &[2, 2, oh, ow]);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn deconv_is_adjoint_of_conv() {
    let mut r = rng(3);
    let tape = Tape64::new();
    let (stride, pad) = (2, 1);
    let x = t(&[2, 3, 9, 9], uniform(2 * 3 * 81, &mut r));
    let k = t(&[4, 3, 3, 3], uniform(4 * 27, &mut r));
    let cx = tape.constant(x.clone()).conv2d(tape.constant(k.clone()), None, stride, pad).unwrap().value();
    let y = t(cx.shape(), uniform(cx.numel(), &mut r));
    // conv weight [o,c,k,k] read as a deconv weight [in=o, out=c, k, k].
    let dy = tape.constant(y.clone()).deconv2d(tape.constant(k), None, stride, pad).unwrap().value();
    assert_eq!(dy.shape(), x.shape());
    let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
}

fn bn_site(eps: f64) -> (ParamStore<f64>, BatchNormParams) {
    let mut store = ParamStore::new();
    let p = BatchNormParams::init(&mut store, "bn", 1, eps, BnSettings::default().momentum).unwrap();
    (store, p)
}

#[test]
fn batchnorm_hand_examples() {
    let (mut store, p) = bn_site(0.0);
    let tape = Tape64::new();
    let bound = store.bind(&tape);
    let x = tape.constant(t(&[2, 1, 1, 1], vec![0.0, 2.0]));
    let y = p.forward(x, &mut store, &bound, Mode::Train).unwrap().value();
    assert_eq!(y.data(), &[-1.0, 1.0]);

    store.get_mut(p.gamma).tensor = t(&[1], vec![2.0]);
    store.get_mut(p.beta).tensor = t(&[1], vec![3.0]);
    let tape = Tape64::new();
    let bound = store.bind(&tape);
    let x = tape.constant(t(&[2, 1, 1, 1], vec![0.0, 2.0]));
    let y = p.forward(x, &mut store, &bound, Mode::Train).unwrap().value();
    assert_eq!(y.data(), &[1.0, 5.0]);

    let (mut store, p) = bn_site(1e-5);
    let tape = Tape64::new();
    let bound = store.bind(&tape);
    let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 4.0).unwrap());
    let y = p.forward(x, &mut store, &bound, Mode::Train).unwrap().value();
    assert!(y.data().iter().all(|&v| v == 0.0));

    let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 4.0).unwrap());
    assert!(matches!(p.forward(x, &mut store, &bound, Mode::Train), Err(Error::Contract(_))));
    assert!(p.forward(x, &mut store, &bound, Mode::Eval).is_ok());
}

#[test]
fn relu_and_softmax_examples() {
    let tape = Tape64::new();
    let r = nn::relu(tape.constant(Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap())).value();
    assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    let mut g = rng(4);
    let x = tape.constant(t(&[2, 3, 4, 4], uniform(96, &mut g).iter().map(|v| v * 20.0).collect()));
    let p = nn::softmax(x).unwrap().value();
    for n in 0..2 {
        for px in 0..16 {
            let s: f64 = (0..3).map(|c| p.data()[(n * 3 + c) * 16 + px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_params_shapes_and_init_scale() {
    let mut store = ParamStore::<f64>::new();
    let mut r = csa_core::SeedTree::new(9).stream("init", 0);
    let c = Conv2dParams::init(&mut store, "c", 16, 32, 3, 1, 1, &mut r).unwrap();
    let k = store.tensor(c.kernels);
    assert_eq!(k.shape(), &[32, 16, 3, 3]);
    let var = k.data().iter().map(|v| v * v).sum::<f64>() / k.numel() as f64;
    let want = 2.0 / (16.0 * 9.0);
    assert!((var / want - 1.0).abs() < 0.15, "{var} vs {want}");
    assert!(store.tensor(c.bias).data().iter().all(|&b| b == 0.0));
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::inference();
    let i = g.input(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = g.input(Tensor::new([2, 2], vec![1.5, -2.0, 3.0, 0.25]).unwrap());
    let out = g.matmul(i, a).unwrap();
    assert_eq!(g.value(out), g.value(a));
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut r = rng(1);
    let mut g = Graph::<f64>::inference();
    let x = g.input(randn(&[2, 1, 5, 6], &mut r));
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let w = g.input(Tensor::new([1, 1, 3, 3], k).unwrap());
    let out = g.conv2d(x, w, None, 1).unwrap();
    assert_eq!(g.value(out), g.value(x));
}

#[test]
fn softmax_uniform() {
    let mut g = Graph::<f64>::inference();
    let x = g.input(Tensor::zeros([3]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
}

#[test]
fn linear_map_gradient_is_column_sums() {
    let a = Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.5]).unwrap();
    let mut g = Graph::<f64>::new();
    let av = g.input(a);
    let x = g.leaf(Tensor::new([3, 1], vec![0.3, -0.1, 2.0]).unwrap(), true);
    let y = g.matmul(av, x).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).data(), &[-3.0, 7.0, 9.5]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros([2]), true);
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn untouched_tracked_tensor_gets_zero_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::full([2], 3.0), true);
    let unused = g.leaf(Tensor::full([4], 1.0), true);
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(unused).data(), &[0.0; 4]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f32>::inference();
    let a = g.input(Tensor::zeros([2, 3]));
    let b = g.input(Tensor::zeros([2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let x = g.input(Tensor::zeros([1, 2, 4, 4]));
    let w = g.input(Tensor::zeros([3, 5, 3, 3]));
    assert!(g.conv2d(x, w, None, 1).unwrap_err().to_string().contains("conv2d"));
}

#[test]
fn group_norm_normalizes_each_group() {
    let mut r = rng(7);
    let x = Tensor::<f64>::from_fn([3, 8, 4, 4], |i| (i % 13) as f64 * 0.7 - 2.0).zip_map(
        &randn(&[3, 8, 4, 4], &mut r),
        "t",
        |a, b| a + b,
    )
    .unwrap();
    let mut g = Graph::<f64>::inference();
    let xv = g.input(x);
    let gamma = g.input(Tensor::full([8], 1.0));
    let beta = g.input(Tensor::zeros([8]));
    let y = g.group_norm(xv, gamma, beta, 4).unwrap();
    for grp in g.value(y).data().chunks(2 * 16) {
        let n = grp.len() as f64;
        let mean = grp.iter().sum::<f64>() / n;
        let var = grp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "var {var}");
    }
}

fn assert_grad<F>(seed: u64, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| randn(s, &mut r)).collect();
    let res = gradcheck::check(&inputs, &mut r, H, &f).unwrap();
    assert!(res.rel_error <= TOL, "seed {seed}: rel error {}", res.rel_error);
}

#[test]
fn gradcheck_elementwise() {
    for seed in 0..20 {
        assert_grad(seed, &[&[3, 4], &[3, 4]], |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[0])?;
            let s = g.sub(m, v[1])?;
            let k = g.scale(s, 0.7)?;
            g.silu(k)
        });
    }
}

#[test]
fn gradcheck_matmul_and_bias() {
    for seed in 0..20 {
        assert_grad(seed, &[&[4, 3], &[3, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])));
    }
}

#[test]
fn gradcheck_conv2d_both_strides() {
    for seed in 0..20 {
        let stride = 1 + (seed as usize % 2);
        assert_grad(seed, &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), stride)
        });
    }
}

#[test]
fn gradcheck_temporal_conv() {
    for seed in 0..20 {
        assert_grad(seed, &[&[6, 2, 2, 3], &[3, 2, 3], &[3]], |g, v| {
            g.temporal_conv(v[0], v[1], Some(v[2]), 3)
        });
    }
}

#[test]
fn gradcheck_group_norm() {
    for seed in 0..20 {
        assert_grad(seed, &[&[2, 4, 3, 3], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], 2));
    }
}

#[test]
fn gradcheck_softmax() {
    for seed in 0..20 {
        let axis = seed as usize % 3;
        assert_grad(seed, &[&[2, 3, 4]], move |g, v| g.softmax(v[0], axis));
    }
}

#[test]
fn gradcheck_attention() {
    for seed in 0..20 {
        assert_grad(seed, &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 3]], |g, v| g.attention(v[0], v[1], v[2]));
    }
}

#[test]
fn gradcheck_layout_ops() {
    for seed in 0..20 {
        assert_grad(seed, &[&[2, 3, 2, 2], &[2, 1, 2, 2], &[2, 4]], |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let e = g.add_channel(c, v[2])?;
            let u = g.upsample2x(e)?;
            let p = g.permute(u, &[2, 0, 3, 1])?;
            g.reshape(p, &[4, 32])
        });
    }
}

#[test]
fn gradcheck_reductions() {
    for seed in 0..20 {
        assert_grad(seed, &[&[3, 3], &[3, 3]], |g, v| {
            let m = g.mse(v[0], v[1])?;
            let s = g.sum(v[0])?;
            let t = g.mul(m, s)?;
            g.mean(t)
        });
    }
}

#[test]
fn random_three_layer_net_matches_finite_differences() {
    // 4 -> 8 -> 8 -> 2 with SiLU: 40 + 72 + 18 = 130 parameters.
    for seed in 0..5 {
        assert_grad(
            100 + seed,
            &[&[5, 4], &[4, 8], &[8], &[8, 8], &[8], &[8, 2], &[2]],
            |g, v| {
                let h = g.linear(v[0], v[1], Some(v[2]))?;
                let h = g.silu(h)?;
                let h = g.linear(h, v[3], Some(v[4]))?;
                let h = g.silu(h)?;
                let o = g.linear(h, v[5], Some(v[6]))?;
                g.mean(o)
            },
        );
    }
}

#[test]
fn identical_inputs_give_bit_identical_grads() {
    let run = || {
        let mut r = rng(42);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::randn([2, 3, 6, 6], 1.0, &mut r), true);
        let w = g.leaf(Tensor::randn([4, 3, 3, 3], 0.3, &mut r), true);
        let y = g.conv2d(x, w, None, 2).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.mean(y).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(x), grads.get(w))
    };
    assert_eq!(run(), run());
}

#[test]
fn inference_graph_tracks_nothing() {
    let mut g = Graph::<f32>::inference();
    let x = g.leaf(Tensor::full([2], 1.0), true);
    let y = g.silu(x).unwrap();
    assert!(!g.requires_grad(y));
}

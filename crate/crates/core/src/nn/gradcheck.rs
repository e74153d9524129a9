//! Central finite-difference checks of every graph op, in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Padding, Tensor, Var};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn projected(build: &Build, inputs: &[Tensor<f64>], seed: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).data().iter().zip(seed.data()).map(|(a, b)| a * b).sum()
}

/// Compare analytic input gradients to central differences of
/// `<build(inputs), seed>` for a random seed.
fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let seed = rand_tensor(&mut rng, g.shape(out), -1.0, 1.0);
    let grads = g.backward_with(out, seed.clone());
    let h = 1e-6;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap_or_else(|| panic!("{name}: no grad for input {i}"));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (projected(build, &plus, &seed) - projected(build, &minus, &seed)) / (2.0 * h);
            let a = analytic.data()[j];
            let tol = 1e-3 * a.abs().max(numeric.abs()) + 1e-7;
            assert!((a - numeric).abs() <= tol, "{name}: input {i} elem {j}: analytic {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn conv_dense_and_depthwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pad in [Padding::Reflect, Padding::Zero] {
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
        check("conv3x3", &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), pad), vec![x.clone(), w, b]);
        let w1 = rand_tensor(&mut rng, &[4, 3, 1, 1], -1.0, 1.0);
        check("conv1x1", &move |g, v| g.conv2d(v[0], v[1], None, pad), vec![x.clone(), w1]);
        let wd = rand_tensor(&mut rng, &[3, 1, 3, 3], -1.0, 1.0);
        check("depthwise", &move |g, v| g.conv2d(v[0], v[1], None, pad), vec![x, wd]);
    }
}

#[test]
fn deformable_sampling_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6], -1.0, 1.0);
    // Offsets large enough to leave the frame so the reflection path is hit.
    let off = rand_tensor(&mut rng, &[1, 18, 6, 6], -2.7, 2.7);
    let mask = rand_tensor(&mut rng, &[1, 9, 6, 6], 0.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    check("deform", &|g, v| g.deform_conv(v[0], v[1], Some(v[2]), v[3], Some(v[4])), vec![x.clone(), off.clone(), mask, w.clone(), b]);
    check("deform-nomask", &|g, v| g.deform_conv(v[0], v[1], None, v[2], None), vec![x, off, w]);
}

#[test]
fn pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[1, 2, 3, 3], -2.0, 2.0);
    let b = rand_tensor(&mut rng, &[1, 2, 3, 3], -2.0, 2.0);
    check("add", &|g, v| g.add(v[0], v[1]), vec![a.clone(), b.clone()]);
    check("mul", &|g, v| g.mul(v[0], v[1]), vec![a.clone(), b.clone()]);
    check("scale", &|g, v| g.scale(v[0], -1.7), vec![a.clone()]);
    check("gelu", &|g, v| g.gelu(v[0]), vec![a.clone()]);
    check("tanh", &|g, v| g.tanh(v[0]), vec![a.clone()]);
    check("sigmoid", &|g, v| g.sigmoid(v[0]), vec![a.clone()]);
    check("charbonnier", &|g, v| g.charbonnier(v[0], v[1], 1e-3), vec![a, b]);
}

#[test]
fn normalization_and_attention_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 4, 3, 2], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    check("layernorm", &|g, v| g.channel_layer_norm(v[0], v[1], v[2]), vec![x, w, b]);

    let r = rand_tensor(&mut rng, &[3, 2, 5], -1.0, 1.0);
    check("l2norm", &|g, v| g.l2_normalize_rows(v[0]), vec![r.clone()]);
    check("softmax", &|g, v| g.softmax_rows(v[0]), vec![r.clone()]);

    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let bn = rand_tensor(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let bt = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    check("matmul", &|g, v| g.matmul(v[0], v[1], false), vec![a.clone(), bn]);
    check("matmul_nt", &|g, v| g.matmul(v[0], v[1], true), vec![a, bt]);

    let s = rand_tensor(&mut rng, &[2], 0.5, 2.0);
    let xg = rand_tensor(&mut rng, &[3, 2, 4], -1.0, 1.0);
    check("scale_groups", &|g, v| g.scale_groups(v[0], v[1]), vec![xg, s]);
}

#[test]
fn layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 4, 4, 6], -1.0, 1.0);
    let y = rand_tensor(&mut rng, &[2, 1, 4, 6], -1.0, 1.0);
    check("concat", &|g, v| g.concat_channels(&[v[0], v[1]]), vec![x.clone(), y]);
    check("slice", &|g, v| g.slice_channels(v[0], 1, 2), vec![x.clone()]);
    check("reshape", &|g, v| g.reshape(v[0], &[2, 4, 24]), vec![x.clone()]);
    check("shuffle", &|g, v| g.pixel_shuffle(v[0], 2), vec![x.clone()]);
    check("unshuffle", &|g, v| g.pixel_unshuffle(v[0], 2), vec![x.clone()]);
    check("reflect_pad", &|g, v| g.reflect_pad(v[0], 3, 2), vec![x.clone()]);
    check("crop", &|g, v| g.crop(v[0], 3, 5), vec![x]);
}

#[test]
fn shuffle_round_trip_and_layout() {
    let x = Tensor::from_vec(&[1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]);
    let mut g = Graph::<f64>::inference();
    let v = g.input(x.clone());
    let s = g.pixel_shuffle(v, 2);
    assert_eq!(g.shape(s), &[1, 1, 2, 2]);
    assert_eq!(g.value(s).data(), &[0.0, 1.0, 2.0, 3.0]);
    let u = g.pixel_unshuffle(s, 2);
    assert_eq!(g.value(u), &x);
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_and_oracle() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let a = g.input(t2(2, 2, &[1., 2., 3., 4.])).unwrap();
    let eye = g.input(t2(2, 2, &[1., 0., 0., 1.])).unwrap();
    let y = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(y), &[1., 2., 3., 4.]);

    let bdata = [5., 6., 7., 8.];
    let b = g.input(t2(2, 2, &bdata)).unwrap();
    let y = g.matmul(a, b).unwrap();
    // naive triple loop
    let adata = [1., 2., 3., 4.];
    let mut expect = [0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                expect[i * 2 + j] += adata[i * 2 + k] * bdata[k * 2 + j];
            }
        }
    }
    assert_eq!(expect, [19., 22., 43., 50.]);
    assert_eq!(g.value(y), &expect);

    let p = g.input(Tensor::zeros(vec![2, 3])).unwrap();
    let q = g.input(Tensor::zeros(vec![2, 3])).unwrap();
    assert!(matches!(g.matmul(p, q), Err(Error::Shape(_))));
}

fn ln_input(g: &mut Graph<'_, f64>, x: &[f64], gamma: f64, beta: f64, eps: f64) -> Vec<f64> {
    let d = x.len();
    let xv = g.input(Tensor::new(vec![d], x.to_vec()).unwrap()).unwrap();
    let gv = g.input(Tensor::full(vec![d], gamma)).unwrap();
    let bv = g.input(Tensor::full(vec![d], beta)).unwrap();
    let y = g.layer_norm(xv, gv, bv, eps).unwrap();
    g.value(y).to_vec()
}

#[test]
fn layer_norm_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    assert_eq!(ln_input(&mut g, &[2.5; 5], 1.0, 0.0, 1e-5), vec![0.0; 5]);
    assert!(close(&ln_input(&mut g, &[1.0, 3.0], 1.0, 0.0, 1e-12), &[-1.0, 1.0], 1e-9));
    assert_eq!(ln_input(&mut g, &[0.3, -7.0, 2.0], 0.0, 1.5, 1e-5), vec![1.5; 3]);
}

#[test]
fn layer_norm_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = ParamStore::<f32>::new();
    let mut g = Graph::new(&store);
    let (rows, d) = (16, 48);
    let x: Vec<f32> = (0..rows * d).map(|_| rng.random_range(-5.0..5.0)).collect();
    let xv = g.input(Tensor::new(vec![rows, d], x).unwrap()).unwrap();
    let gv = g.input(Tensor::full(vec![d], 1.0)).unwrap();
    let bv = g.input(Tensor::zeros(vec![d])).unwrap();
    let y = g.layer_norm(xv, gv, bv, 1e-6).unwrap();
    for row in g.value(y).chunks(d) {
        let mean = row.iter().map(|v| *v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

fn softmax_of(x: &[f64]) -> Vec<f64> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let v = g.input(Tensor::new(vec![x.len()], x.to_vec()).unwrap()).unwrap();
    let y = g.softmax(v).unwrap();
    g.value(y).to_vec()
}

#[test]
fn softmax_examples() {
    assert!(close(&softmax_of(&[0., 0., 0.]), &[1. / 3.; 3], 1e-12));
    assert_eq!(softmax_of(&[1000., 0.]), vec![1.0, 0.0]);
    let y = softmax_of(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
    // direct formula: e^{ln i} / sum = i / 6
    assert!(close(&y, &[1. / 6., 2. / 6., 3. / 6.], 1e-12));
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(1..20);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let y = softmax_of(&x);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(y.iter().all(|v| *v >= 0.0));
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        assert!(close(&softmax_of(&shifted), &y, 1e-9));
    }
}

/// Direct evaluation of softmax(QKᵀ/√d)V for one head.
fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], sq: usize, sk: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; sq * d];
    for i in 0..sq {
        let scores: Vec<f64> = (0..sk)
            .map(|j| (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..sk {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    out
}

#[test]
fn attention_examples() {
    let store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };

    // identical keys -> uniform weights -> mean of V rows
    let mut g = Graph::new(&store);
    let qd = rand(3 * 4);
    let krow = rand(4);
    let kd: Vec<f64> = krow.iter().cycle().take(5 * 4).copied().collect();
    let vd = rand(5 * 4);
    let q = g.input(t2(3, 4, &qd)).unwrap();
    let k = g.input(t2(5, 4, &kd)).unwrap();
    let v = g.input(t2(5, 4, &vd)).unwrap();
    let y = g.attention(q, k, v, 1).unwrap();
    let mean: Vec<f64> = (0..4).map(|c| (0..5).map(|r| vd[r * 4 + c]).sum::<f64>() / 5.0).collect();
    for row in g.value(y).chunks(4) {
        assert!(close(row, &mean, 1e-12));
    }

    // one dominant key saturates the attention
    let q = g.input(t2(1, 2, &[1.0, 0.0])).unwrap();
    let k = g.input(t2(3, 2, &[1000.0, 0.0, 0.0, 1.0, 0.0, -1.0])).unwrap();
    let v = g.input(t2(3, 2, &[7.0, -2.0, 1.0, 1.0, 3.0, 3.0])).unwrap();
    let y = g.attention(q, k, v, 1).unwrap();
    assert!(close(g.value(y), &[7.0, -2.0], 1e-9));

    // random 3x4 against the direct formula
    let (qd, kd, vd) = (rand(12), rand(12), rand(12));
    let q = g.input(t2(3, 4, &qd)).unwrap();
    let k = g.input(t2(3, 4, &kd)).unwrap();
    let v = g.input(t2(3, 4, &vd)).unwrap();
    let y = g.attention(q, k, v, 1).unwrap();
    assert!(close(g.value(y), &attention_oracle(&qd, &kd, &vd, 3, 3, 4), 1e-12));

    // two heads equal two independent single-head evaluations
    let y = g.attention(q, k, v, 2).unwrap();
    let split = |m: &[f64], h: usize| -> Vec<f64> { m.chunks(4).flat_map(|r| r[h * 2..h * 2 + 2].to_vec()).collect() };
    for h in 0..2 {
        let o = attention_oracle(&split(&qd, h), &split(&kd, h), &split(&vd, h), 3, 3, 2);
        assert!(close(&split(g.value(y), h), &o, 1e-12));
    }
}

#[test]
fn relu_and_batch_norm_examples() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::new(vec![3], vec![-1., 0., 2.]).unwrap()).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y), &[0., 0., 2.]);

    let x = g.input(t2(2, 1, &[0., 2.])).unwrap();
    let gamma = g.input(Tensor::full(vec![1], 1.0)).unwrap();
    let beta = g.input(Tensor::zeros(vec![1])).unwrap();
    let (y, stats) = g.batch_norm(x, gamma, beta, 1e-12, NormMode::Train).unwrap();
    assert!(close(g.value(y), &[-1.0, 1.0], 1e-9));
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![1.0]);
    assert_eq!(stats.var, vec![2.0]);

    let x = g.input(t2(2, 2, &[0.5, -3.0, 4.0, 1.0])).unwrap();
    let gamma = g.input(Tensor::full(vec![2], 1.0)).unwrap();
    let beta = g.input(Tensor::zeros(vec![2])).unwrap();
    let (mean, var) = ([0.0, 0.0], [1.0, 1.0]);
    let (y, stats) = g
        .batch_norm(x, gamma, beta, 0.0, NormMode::Eval { mean: &mean, var: &var })
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(g.value(y), &[0.5, -3.0, 4.0, 1.0]);

    let one = g.input(t2(1, 2, &[1.0, 2.0])).unwrap();
    assert!(g.batch_norm(one, gamma, beta, 1e-5, NormMode::Train).is_err());
}

#[test]
fn backward_simple_cases() {
    let mut store = ParamStore::<f64>::new();
    let xd = vec![0.5, -1.5, 2.0, 3.0];
    let id = store.add("x", Tensor::new(vec![4], xd.clone()).unwrap()).unwrap();
    let unused = store.add("unused", Tensor::zeros(vec![2])).unwrap();

    let mut g = Graph::new(&store);
    let x = g.param(id);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.param(id).unwrap(), &[1.0; 4]);
    assert!(grads.param(unused).is_none());
    assert_eq!(grads.param_or_zero(unused, 2), vec![0.0; 2]);

    let mut g = Graph::new(&store);
    let x = g.param(id);
    let d = g.dot(x, x).unwrap();
    let grads = g.backward(d).unwrap();
    let two_x: Vec<f64> = xd.iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.param(id).unwrap(), two_x.as_slice());

    assert!(matches!(g.backward(x), Err(Error::Shape(_))));
}

/// Builds an op under test and reduces it to a scalar.
trait OpCase {
    fn shapes(&self) -> Vec<Vec<usize>>;
    fn build<T: Real>(&self, g: &mut Graph<'_, T>, xs: &[Var]) -> Result<Var>;
    /// Post-processing of random inputs (keeps away from kinks and domains).
    fn adjust(&self, _input: usize, v: f64) -> f64 {
        v
    }
}

fn weighted_sum<T: Real>(g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let w: Vec<T> = (0..n).map(|i| T::from_f64_lossy(((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)).collect();
    let p = g.mul_const(y, &w)?;
    g.sum(p)
}

fn loss_value<T: Real>(case: &dyn Fn(&mut Graph<'_, T>, &[Var]) -> Result<Var>, store: &ParamStore<T>) -> T {
    let mut g = Graph::new(store);
    let xs: Vec<Var> = store.ids().map(|id| g.param(id)).collect();
    let y = case(&mut g, &xs).unwrap();
    let l = weighted_sum(&mut g, y).unwrap();
    g.scalar(l)
}

fn random_store<C: OpCase>(case: &C, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, shape) in case.shapes().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| case.adjust(i, rng.random_range(-1.0..1.0))).collect();
        store.add(format!("in{i}"), Tensor::new(shape, data).unwrap()).unwrap();
    }
    store
}

/// Max relative error of analytic gradients in precision `T` against central
/// differences evaluated in f64.
fn grad_check<C: OpCase, T: Real>(case: &C, seed: u64, h: f64) -> f64 {
    let store64 = random_store(case, seed);
    let store_t: ParamStore<T> = store64.cast();
    let mut g = Graph::new(&store_t);
    let xs: Vec<Var> = store_t.ids().map(|id| g.param(id)).collect();
    let y = case.build(&mut g, &xs).unwrap();
    let l = weighted_sum(&mut g, y).unwrap();
    let grads = g.backward(l).unwrap();

    let f = |g: &mut Graph<'_, f64>, xs: &[Var]| case.build(g, xs);
    let mut worst = 0.0f64;
    for id in store64.ids() {
        let analytic = grads.param_or_zero(id, store64.value(id).len());
        for j in 0..store64.value(id).len() {
            let mut plus = store64.clone();
            plus.value_mut(id).data_mut()[j] += h;
            let mut minus = store64.clone();
            minus.value_mut(id).data_mut()[j] -= h;
            let numeric = (loss_value(&f, &plus) - loss_value(&f, &minus)) / (2.0 * h);
            let a = analytic[j].to_f64_lossy();
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    worst
}

macro_rules! op_case {
    ($name:ident, [$($shape:expr),*], |$g:ident, $x:ident| $body:expr $(, adjust |$i:ident, $v:ident| $adj:expr)?) => {
        struct $name;
        impl OpCase for $name {
            fn shapes(&self) -> Vec<Vec<usize>> {
                vec![$($shape.to_vec()),*]
            }
            fn build<T: Real>(&self, $g: &mut Graph<'_, T>, $x: &[Var]) -> Result<Var> {
                $body
            }
            $(fn adjust(&self, $i: usize, $v: f64) -> f64 { $adj })?
        }
    };
}

op_case!(MatMulCase, [[3, 4], [4, 2]], |g, x| g.matmul(x[0], x[1]));
op_case!(LinearCase, [[5, 3], [3, 4], [4]], |g, x| g.linear(x[0], x[1], Some(x[2])));
op_case!(AddBiasCase, [[3, 4], [4]], |g, x| g.add_bias(x[0], x[1]));
op_case!(MulCase, [[6], [6]], |g, x| g.mul(x[0], x[1]));
op_case!(SubCase, [[6], [6]], |g, x| g.sub(x[0], x[1]));
op_case!(AffineCase, [[6]], |g, x| g.affine(x[0], T::from_f64_lossy(-1.5), T::one()));
op_case!(ReluCase, [[8]], |g, x| g.relu(x[0]), adjust |_i, v| if v.abs() < 0.05 { v + 0.1 } else { v });
op_case!(GeluCase, [[8]], |g, x| g.gelu(x[0]));
op_case!(LogCase, [[6]], |g, x| g.log(x[0]), adjust |_i, v| v.abs() + 0.2);
op_case!(ClampCase, [[8]], |g, x| g.clamp(x[0], T::from_f64_lossy(-0.5), T::from_f64_lossy(0.5)),
    adjust |_i, v| if (v.abs() - 0.5).abs() < 0.05 { v * 0.8 } else { v });
op_case!(SoftmaxCase, [[3, 5]], |g, x| g.softmax(x[0]));
op_case!(LayerNormCase, [[4, 6], [6], [6]], |g, x| g.layer_norm(x[0], x[1], x[2], T::from_f64_lossy(1e-5)));
op_case!(BatchNormCase, [[5, 3], [3], [3]], |g, x| Ok(g.batch_norm(x[0], x[1], x[2], T::from_f64_lossy(1e-5), NormMode::Train)?.0));
op_case!(AttentionCase, [[3, 4], [5, 4], [5, 4]], |g, x| g.attention(x[0], x[1], x[2], 2));
op_case!(MeanRowsCase, [[4, 3]], |g, x| g.mean_rows(x[0]));
op_case!(MeanCase, [[4, 3]], |g, x| g.mean(x[0]));
op_case!(DotCase, [[5], [5]], |g, x| g.dot(x[0], x[1]));
op_case!(CosineCase, [[6], [6]], |g, x| g.cosine(x[0], x[1], T::from_f64_lossy(1e-8)));
op_case!(StackCase, [[3], [3]], |g, x| g.stack(&[x[0], x[1], x[0]]));
op_case!(GatherCase, [[3, 2]], |g, x| g.gather(x[0], &[1, 0, 1]));

fn check_all_seeds<C: OpCase>(case: C, name: &str) {
    for seed in 0..100 {
        let err32 = grad_check::<C, f32>(&case, seed, 1e-4);
        assert!(err32 < 1e-3, "{name} seed {seed}: f32 relative error {err32}");
    }
    let err64 = grad_check::<C, f64>(&case, 1000, 1e-5);
    assert!(err64 < 1e-6, "{name}: f64 relative error {err64}");
}

#[test]
fn primitive_gradients_match_finite_differences() {
    check_all_seeds(MatMulCase, "matmul");
    check_all_seeds(LinearCase, "linear");
    check_all_seeds(AddBiasCase, "add_bias");
    check_all_seeds(MulCase, "mul");
    check_all_seeds(SubCase, "sub");
    check_all_seeds(AffineCase, "affine");
    check_all_seeds(ReluCase, "relu");
    check_all_seeds(GeluCase, "gelu");
    check_all_seeds(LogCase, "log");
    check_all_seeds(ClampCase, "clamp");
    check_all_seeds(SoftmaxCase, "softmax");
    check_all_seeds(LayerNormCase, "layer_norm");
    check_all_seeds(BatchNormCase, "batch_norm");
    check_all_seeds(AttentionCase, "attention");
    check_all_seeds(MeanRowsCase, "mean_rows");
    check_all_seeds(MeanCase, "mean");
    check_all_seeds(DotCase, "dot");
    check_all_seeds(CosineCase, "cosine");
    check_all_seeds(StackCase, "stack");
    check_all_seeds(GatherCase, "gather");
}

op_case!(
    MlpCase,
    [[4, 5], [5, 6], [6], [6, 6], [6], [6, 2], [2]],
    |g, x| {
        let h = g.linear(x[0], x[1], Some(x[2]))?;
        let h = g.gelu(h)?;
        let h = g.linear(h, x[3], Some(x[4]))?;
        let h = g.relu(h)?;
        let h = g.linear(h, x[5], Some(x[6]))?;
        let p = g.softmax(h)?;
        let p = g.clamp(p, T::from_f64_lossy(1e-12), T::one())?;
        let lp = g.log(p)?;
        let picked = g.gather(lp, &[0, 1, 1, 0])?;
        g.mean(picked)
    }
);

#[test]
fn three_layer_mlp_gradients() {
    let err64 = grad_check::<_, f64>(&MlpCase, 7, 1e-5);
    assert!(err64 < 1e-5, "f64 {err64}");
    let err32 = grad_check::<_, f32>(&MlpCase, 7, 1e-3);
    assert!(err32 < 1e-3, "f32 {err32}");
}

#[test]
fn cosine_zero_vector_is_guarded() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let z = g.input(Tensor::zeros(vec![3])).unwrap();
    let a = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
    let c = g.cosine(z, a, 1e-8).unwrap();
    assert_eq!(g.scalar(c), 0.0);
}

#[test]
fn non_finite_forward_is_an_error() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap()).unwrap();
    assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let store: ParamStore<f32> = random_store(&AttentionCase, 42).cast();
        let mut g = Graph::new(&store);
        let xs: Vec<Var> = store.ids().map(|id| g.param(id)).collect();
        let y = AttentionCase.build(&mut g, &xs).unwrap();
        let l = weighted_sum(&mut g, y).unwrap();
        let grads = g.backward(l).unwrap();
        store
            .ids()
            .flat_map(|id| grads.param(id).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_examples() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::scalar(2.0)).unwrap();
    let q = store.add("q", Tensor::scalar(-1.0)).unwrap();

    let mut grads = Gradients::empty(store.len());
    let mut g = Graph::new(&store);
    let pv = g.param(p);
    let qv = g.param(q);
    let s = g.scale(pv, 0.0).unwrap();
    let t = g.add(s, qv).unwrap();
    grads.accumulate(&g.backward(t).unwrap());

    // zero gradient on p leaves it unchanged
    let mut adam = Adam::new(&store, [p], AdamConfig::default());
    adam.step(&mut store, &grads, 1e-3).unwrap();
    assert_eq!(store.value(p).data(), &[2.0]);

    // closed form first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
    let lr = 1e-4;
    let mut adam = Adam::new(&store, [q], AdamConfig::default());
    adam.step(&mut store, &grads, lr).unwrap();
    let expect = -1.0 - lr * 1.0 / (1.0 + 1e-8);
    assert!((store.value(q).data()[0] - expect).abs() < 1e-15);

    let before = store.value(q).data()[0];
    adam.step(&mut store, &grads, 0.0).unwrap();
    assert_eq!(store.value(q).data()[0], before);

    let empty = Gradients::empty(store.len());
    assert!(matches!(adam.step(&mut store, &empty, lr), Err(Error::MissingGrad(_))));
}

#[test]
fn gradients_clip_and_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let pv = g.param(p);
    let d = g.dot(pv, pv).unwrap();
    let once = g.backward(d).unwrap();
    let mut total = Gradients::empty(store.len());
    total.accumulate(&once);
    total.accumulate(&once);
    assert_eq!(total.param(p).unwrap(), &[12.0, 16.0]);
    let norm = total.clip_global_norm(5.0);
    assert_eq!(norm, 20.0);
    assert!(close(total.param(p).unwrap(), &[3.0, 4.0], 1e-12));
}

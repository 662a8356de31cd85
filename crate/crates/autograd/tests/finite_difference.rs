//! Every tape operation checked against central finite differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stmask_autograd::{Graph, Matrix, Var};

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks `d/dx sum(w ⊙ f(x))` for fixed random weights `w`.
fn check(name: &str, inputs: Vec<Matrix>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |xs: &[Matrix], weights: Option<&Matrix>| -> (f64, Matrix, Vec<Option<Matrix>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.shape(out);
        let w = weights.cloned().unwrap_or_else(|| Matrix::filled(shape.0, shape.1, 1.0));
        let wv = g.constant(w.clone());
        let prod = g.mul(out, wv);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let gs = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        (g.value(loss).get(0, 0), w, gs)
    };
    let (_, shape_probe, _) = eval(&inputs, None);
    let weights = random(&mut rng, shape_probe.rows(), shape_probe.cols());
    let (_, _, analytic) = eval(&inputs, Some(&weights));
    let h = 1e-6;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * h);
            let a = analytic[k].as_ref().map(|g| g.data()[i]).unwrap_or(0.0);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(
                err < 1e-5 || (a - fd).abs() < 1e-9,
                "{name}: input {k} entry {i}: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_and_transposed_matmul() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, 3, 4), random(&mut r, 4, 2)], |g, v| g.matmul(v[0], v[1]));
    check("matmul_nt", vec![random(&mut r, 3, 4), random(&mut r, 5, 4)], |g, v| g.matmul_nt(v[0], v[1]));
    check("transpose", vec![random(&mut r, 3, 4)], |g, v| g.transpose(v[0]));
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng();
    let (a, b) = (random(&mut r, 2, 3), random(&mut r, 2, 3));
    check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("add_row", vec![a.clone(), random(&mut r, 1, 3)], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", vec![a.clone(), random(&mut r, 1, 3)], |g, v| g.mul_row(v[0], v[1]));
    check("mul_scalar", vec![a.clone(), random(&mut r, 1, 1)], |g, v| g.mul_scalar(v[0], v[1]));
    check("scale", vec![a.clone()], |g, v| g.scale(v[0], -2.5));
    check("add_const", vec![a], |g, v| g.add_const(v[0], 0.3));
}

#[test]
fn elementwise_unary_ops() {
    let mut r = rng();
    let a = random(&mut r, 3, 3);
    let pos = a.map(|x| x.abs() + 0.2);
    check("tanh", vec![a.clone()], |g, v| g.tanh(v[0]));
    check("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check("silu", vec![a.clone()], |g, v| g.silu(v[0]));
    check("softplus", vec![a.clone()], |g, v| g.softplus(v[0]));
    check("exp", vec![a.clone()], |g, v| g.exp(v[0]));
    check("square", vec![a.clone()], |g, v| g.square(v[0]));
    check("ln", vec![pos.clone()], |g, v| g.ln(v[0]));
    check("sqrt", vec![pos.clone()], |g, v| g.sqrt(v[0]));
    check("recip", vec![pos], |g, v| g.recip(v[0]));
    // keep entries away from the kinks
    let away = a.map(|x| if x.abs() < 0.05 { 0.3 } else { x });
    check("relu", vec![away.clone()], |g, v| g.relu(v[0]));
    check("clamp_min", vec![away], |g, v| g.clamp_min(v[0], 0.0));
}

#[test]
fn reductions_and_normalizations() {
    let mut r = rng();
    let a = random(&mut r, 3, 5);
    check("sum", vec![a.clone()], |g, v| g.sum(v[0]));
    check("mean", vec![a.clone()], |g, v| g.mean(v[0]));
    check("sum_rows", vec![a.clone()], |g, v| g.sum_rows(v[0]));
    check("mean_cols", vec![a.clone()], |g, v| g.mean_cols(v[0]));
    check("softmax_rows", vec![a.clone()], |g, v| g.softmax_rows(v[0]));
    check("log_softmax_rows", vec![a.clone()], |g, v| g.log_softmax_rows(v[0]));
    check("layer_norm_rows", vec![a.clone()], |g, v| g.layer_norm_rows(v[0], 1e-5));
    check("l2_normalize_rows", vec![a], |g, v| g.l2_normalize_rows(v[0]));
}

#[test]
fn structural_ops() {
    let mut r = rng();
    let a = random(&mut r, 2, 3);
    let b = random(&mut r, 2, 2);
    check("concat_cols", vec![a.clone(), b.clone()], |g, v| g.concat_cols(&[v[0], v[1]]));
    check("concat_rows", vec![a.clone(), random(&mut r, 1, 3)], |g, v| g.concat_rows(&[v[0], v[1]]));
    check("slice_cols", vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 2));
    check("slice_rows", vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 1));
    check("reshape", vec![a.clone()], |g, v| g.reshape(v[0], 3, 2));
    let idx: Arc<[usize]> = Arc::from(vec![5usize, 0, 0, 3, 2, 2, 1, 4]);
    check("gather", vec![a], move |g, v| g.gather(v[0], Arc::clone(&idx), 2, 4));
}

#[test]
fn composite_attention_block() {
    let mut r = rng();
    let x = random(&mut r, 4, 6);
    let wq = random(&mut r, 6, 6);
    let wk = random(&mut r, 6, 6);
    let wv = random(&mut r, 6, 6);
    check("attention", vec![x, wq, wk, wv], |g, v| {
        let n = g.layer_norm_rows(v[0], 1e-6);
        let q = g.matmul(n, v[1]);
        let k = g.matmul(n, v[2]);
        let val = g.matmul(n, v[3]);
        let s = g.matmul_nt(q, k);
        let s = g.scale(s, 0.4);
        let p = g.softmax_rows(s);
        let o = g.matmul(p, val);
        let o = g.silu(o);
        g.add(o, v[0])
    });
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Matrix::scalar(2.0));
    let p = g.param(Matrix::scalar(3.0));
    let y = g.mul(c, p);
    let grads = g.backward(y);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().get(0, 0), 2.0);
}

#[test]
fn zero_rows_normalize_to_zero() {
    let mut g = Graph::new();
    let a = g.param(Matrix::from_vec(2, 2, vec![0.0, 0.0, 3.0, 4.0]));
    let y = g.l2_normalize_rows(a);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    let s = g.sum(y);
    let grads = g.backward(s);
    assert_eq!(&grads.get(a).unwrap().data()[..2], &[0.0, 0.0]);
}

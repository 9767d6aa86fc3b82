//! Finite-difference checks for every differentiable primitive, plus the
//! HVP identities on quadratics where H·v is known in closed form.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{NodeId, Tape};
use super::{AdError, Layout, LossGraph, ParamVector, Tensor};

type BuildFn = fn(&mut Tape, &[NodeId]) -> Result<NodeId, AdError>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], f: impl Fn(f32) -> f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| f(rng.gen_range(-2.0..2.0))).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Scalarizes `build`'s output through a fixed random probe vector, then
/// compares each analytic input adjoint against a central finite difference
/// of the forward pass.
fn gradcheck(name: &str, shapes: &[&[usize]], sanitize: fn(f32) -> f32, build: BuildFn) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, sanitize)).collect();

    let eval = |inputs: &[Tensor]| -> (f32, Vec<Vec<f32>>) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &ids).expect(name);
        let out_n = tape.value(out).numel();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(7);
        let w: Vec<f32> = (0..out_n).map(|_| probe_rng.gen_range(-1.0..1.0)).collect();
        let wn = tape.leaf(Tensor::new(tape.value(out).shape().to_vec(), w));
        let s = tape.dot(out, wn).expect(name);
        let adj = tape.backward(s, &ids).expect(name);
        let grads = ids
            .iter()
            .zip(&adj)
            .map(|(id, a)| match a {
                Some(g) => tape.value(*g).data().to_vec(),
                None => vec![0.0; tape.value(*id).numel()],
            })
            .collect();
        (tape.value(s).item(), grads)
    };

    let (_, analytic) = eval(&inputs);
    let eps = 3e-3f32;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            let mut data = t.data().to_vec();
            data[j] += eps;
            plus[i] = Tensor::new(t.shape().to_vec(), data.clone());
            let (sp, _) = eval(&plus);
            data[j] -= 2.0 * eps;
            let mut minus = inputs.clone();
            minus[i] = Tensor::new(t.shape().to_vec(), data);
            let (sm, _) = eval(&minus);
            let fd = (sp - sm) / (2.0 * eps);
            let a = analytic[i][j];
            let tol = 2e-3 * 1.0f32.max(a.abs().max(fd.abs()));
            assert!(
                (fd - a).abs() <= tol,
                "{name}: input {i} coord {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn away_from_kinks(x: f32) -> f32 {
    // Keep ReLU/Huber/|1| boundaries at least 0.1 away so central
    // differences stay on one branch.
    let mut v = x;
    if v.abs() < 0.1 {
        v += 0.3 * v.signum().max(0.0) * 2.0 - 0.3;
    }
    if (v.abs() - 1.0).abs() < 0.1 {
        v += if v > 0.0 { 0.2 } else { -0.2 };
    }
    v
}

fn positive(x: f32) -> f32 {
    x.abs() + 0.5
}

fn identity(x: f32) -> f32 {
    x
}

#[test]
fn gradcheck_elementwise() {
    gradcheck("neg", &[&[2, 3]], identity, |t, ids| Ok(t.neg(ids[0])));
    gradcheck("add", &[&[4], &[4]], identity, |t, ids| t.add(ids[0], ids[1]));
    gradcheck("sub", &[&[4], &[4]], identity, |t, ids| t.sub(ids[0], ids[1]));
    gradcheck("mul", &[&[5], &[5]], identity, |t, ids| t.mul(ids[0], ids[1]));
    gradcheck("scalar_mul", &[&[4]], identity, |t, ids| Ok(t.scalar_mul(ids[0], -1.7)));
    gradcheck("add_scalar", &[&[4]], identity, |t, ids| Ok(t.add_scalar(ids[0], 0.9)));
    gradcheck("recip", &[&[4]], positive, |t, ids| Ok(t.recip(ids[0])));
    gradcheck("log", &[&[4]], positive, |t, ids| Ok(t.log(ids[0])));
    gradcheck("relu", &[&[6]], away_from_kinks, |t, ids| Ok(t.relu(ids[0])));
    gradcheck("huber", &[&[6]], away_from_kinks, |t, ids| Ok(t.huber(ids[0])));
    gradcheck("huber_deriv", &[&[6]], away_from_kinks, |t, ids| Ok(t.huber_deriv(ids[0])));
}

#[test]
fn gradcheck_linear_algebra() {
    gradcheck("matmul", &[&[3, 4], &[4, 2]], identity, |t, ids| t.matmul(ids[0], ids[1]));
    gradcheck("transpose", &[&[3, 5]], identity, |t, ids| t.transpose(ids[0]));
    gradcheck("dot", &[&[6], &[6]], identity, |t, ids| t.dot(ids[0], ids[1]));
    gradcheck("scale_by_node", &[&[1], &[5]], identity, |t, ids| t.scale_by_node(ids[0], ids[1]));
    gradcheck("reshape", &[&[2, 6]], identity, |t, ids| t.reshape(ids[0], vec![3, 4]));
}

#[test]
fn gradcheck_conv_family() {
    gradcheck("corr2d", &[&[2, 4, 4, 2], &[3, 3, 2, 2]], identity, |t, ids| {
        t.corr2d(ids[0], ids[1])
    });
    gradcheck("zero_pad2d", &[&[1, 3, 3, 2]], identity, |t, ids| t.zero_pad2d(ids[0], 2, 1));
    gradcheck("crop2d", &[&[1, 5, 5, 2]], identity, |t, ids| t.crop2d(ids[0], 1, 2));
    gradcheck("flip_kernel", &[&[2, 2, 2, 3]], identity, |t, ids| t.flip_kernel(ids[0]));
    gradcheck("kernel_grad", &[&[1, 4, 4, 2], &[1, 3, 3, 3]], identity, |t, ids| {
        t.kernel_grad(ids[0], ids[1], 2, 2)
    });
}

#[test]
fn gradcheck_fused_ops() {
    gradcheck("relu_back", &[&[6], &[6]], away_from_kinks, |t, ids| t.relu_back(ids[0], ids[1]));
    gradcheck("matmul_atb", &[&[4, 3], &[4, 2]], identity, |t, ids| t.matmul_atb(ids[0], ids[1]));
    gradcheck("add_row_vec", &[&[3, 4], &[4]], identity, |t, ids| t.add_row_vec(ids[0], ids[1]));
    gradcheck("add_chan_bias", &[&[2, 2, 2, 3], &[3]], identity, |t, ids| {
        t.add_chan_bias(ids[0], ids[1])
    });
}

#[test]
fn gradcheck_broadcast_reduce() {
    gradcheck("repeat_rows", &[&[3]], identity, |t, ids| t.repeat_rows(ids[0], 4));
    gradcheck("col_sum", &[&[4, 3]], identity, |t, ids| t.col_sum(ids[0]));
    gradcheck("chan_broadcast", &[&[3]], identity, |t, ids| t.chan_broadcast(ids[0], 2, 2, 2));
    gradcheck("chan_sum", &[&[2, 2, 2, 3]], identity, |t, ids| t.chan_sum(ids[0]));
    gradcheck("row_sum", &[&[3, 4]], identity, |t, ids| t.row_sum(ids[0]));
    gradcheck("row_broadcast", &[&[3]], identity, |t, ids| t.row_broadcast(ids[0], 4));
    gradcheck("sum_all", &[&[2, 3]], identity, |t, ids| Ok(t.sum_all(ids[0])));
    gradcheck("broadcast_scalar", &[&[1]], identity, |t, ids| {
        t.broadcast_scalar(ids[0], vec![2, 3])
    });
}

#[test]
fn gradcheck_softmax_family() {
    gradcheck("softmax", &[&[3, 5]], identity, |t, ids| t.softmax(ids[0]));
    gradcheck("logsumexp", &[&[3, 5]], identity, |t, ids| t.logsumexp(ids[0]));
    gradcheck("max_row", &[&[3, 5]], identity, |t, ids| t.max_row(ids[0]));
}

#[test]
fn gradcheck_gather_scatter() {
    let idx = Arc::new(vec![1u32, 0, 2]);
    let idx2 = Arc::clone(&idx);
    gradcheck("gather_rows", &[&[3, 6]], identity, move |t, ids| {
        t.gather_rows(ids[0], Arc::new(vec![1u32, 0, 2]), 2)
    });
    let _ = (idx, idx2);
    gradcheck("scatter_rows", &[&[3, 2]], identity, |t, ids| {
        t.scatter_rows(ids[0], Arc::new(vec![1u32, 0, 2]), 3)
    });
}

#[test]
fn stop_grad_and_masks_block_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]));
    let s = tape.stop_grad(x);
    let m = tape.relu_mask(x);
    let q = tape.quad_mask(x);
    let sum1 = tape.sum_all(s);
    let sum2 = tape.sum_all(m);
    let sum3 = tape.sum_all(q);
    let a = tape.add(sum1, sum2).unwrap();
    let out = tape.add(a, sum3).unwrap();
    let adj = tape.backward(out, &[x]).unwrap();
    assert!(adj[0].is_none(), "no gradient should flow through stop-grad or masks");
}

fn quad_layout(n: usize) -> Arc<Layout> {
    Arc::new(Layout::new(&[("theta", vec![n])]))
}

/// ½ θᵀAθ as a loss graph; for symmetric A the Hessian is exactly A.
fn quad_loss(a: Tensor) -> impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AdError> {
    move |tape, params| {
        let n = tape.value(params[0]).numel();
        let a_node = tape.leaf(a.clone());
        let row = tape.reshape(params[0], vec![1, n])?;
        let ath = tape.matmul(row, a_node)?;
        let flat = tape.reshape(ath, vec![n])?;
        let q = tape.dot(flat, params[0])?;
        Ok(tape.scalar_mul(q, 0.5))
    }
}

#[test]
fn scalar_quadratic_value_and_grad() {
    // f = ½·λ·θ² with λ=3, θ=2 → value 6, gradient 6.
    let layout = Arc::new(Layout::new(&[("theta", vec![1])]));
    let p = ParamVector::new(layout, vec![2.0]).unwrap();
    let mut lg = LossGraph::build(&p, |tape, params| {
        let sq = tape.mul(params[0], params[0])?;
        let half = tape.scalar_mul(sq, 0.5 * 3.0);
        Ok(tape.sum_all(half))
    })
    .unwrap();
    assert_eq!(lg.loss_value(), 6.0);
    assert_eq!(lg.gradient().unwrap().values(), &[6.0]);
}

#[test]
fn sum_relu_program() {
    // sum(relu(x)) on x = [-1, 2, 3] → 5, two op nodes on the tape.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 2.0, 3.0]));
    let r = tape.relu(x);
    let s = tape.sum_all(r);
    assert_eq!(tape.value(s).item(), 5.0);
    assert_eq!(tape.len() - 1, 2);
}

#[test]
fn huber_gradient_linear_branch() {
    let layout = Arc::new(Layout::new(&[("theta", vec![1])]));
    let p = ParamVector::new(layout, vec![2.0]).unwrap();
    let mut lg = LossGraph::build(&p, |tape, params| {
        let h = tape.huber(params[0]);
        Ok(tape.sum_all(h))
    })
    .unwrap();
    assert_eq!(lg.loss_value(), 1.5);
    assert_eq!(lg.gradient().unwrap().values(), &[1.0]);
}

#[test]
fn hvp_quadratic_exact() {
    // f = ½θᵀAθ with A=[[2,1],[1,2]]: H·v = A·v.
    let layout = quad_layout(2);
    let p = ParamVector::new(Arc::clone(&layout), vec![0.3, -0.7]).unwrap();
    let a = Tensor::new(vec![2, 2], vec![2.0, 1.0, 1.0, 2.0]);
    let mut lg = LossGraph::build(&p, quad_loss(a)).unwrap();
    let v = ParamVector::new(layout, vec![1.0, 0.0]).unwrap();
    let hv = lg.hvp(&v).unwrap();
    assert_eq!(hv.values(), &[2.0, 1.0]);
}

#[test]
fn hvp_huber_quadratic_branch_is_identity() {
    // Huber at residual 0.5 sits on the quadratic branch: H = I.
    let layout = quad_layout(3);
    let p = ParamVector::new(Arc::clone(&layout), vec![0.5, -0.5, 0.2]).unwrap();
    let mut lg = LossGraph::build(&p, |tape, params| {
        let h = tape.huber(params[0]);
        Ok(tape.sum_all(h))
    })
    .unwrap();
    let v = ParamVector::new(layout, vec![0.4, -1.2, 2.0]).unwrap();
    let hv = lg.hvp(&v).unwrap();
    assert_eq!(hv.values(), v.values());
}

#[test]
fn hvp_repeated_calls_reuse_grad_graph() {
    let layout = quad_layout(2);
    let p = ParamVector::new(Arc::clone(&layout), vec![1.0, 1.0]).unwrap();
    let a = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 1.0]);
    let mut lg = LossGraph::build(&p, quad_loss(a)).unwrap();
    let len_before = {
        let _ = lg.gradient().unwrap();
        lg.tape().len()
    };
    for _ in 0..4 {
        let v = ParamVector::new(Arc::clone(&layout), vec![1.0, 2.0]).unwrap();
        let hv = lg.hvp(&v).unwrap();
        assert_eq!(hv.values(), &[3.0, 2.0]);
    }
    // Truncation keeps the tape from growing across HVPs.
    assert_eq!(lg.tape().len(), len_before);
}

#[test]
fn hvp_linearity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 6;
    let layout = quad_layout(n);
    // Random symmetric A.
    let mut a = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = rng.gen_range(-1.0..1.0);
            a[i * n + j] = v;
            a[j * n + i] = v;
        }
    }
    let theta: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = ParamVector::new(Arc::clone(&layout), theta).unwrap();
    let mut lg = LossGraph::build(&p, quad_loss(Tensor::new(vec![n, n], a))).unwrap();

    let rv = |rng: &mut ChaCha8Rng| {
        ParamVector::new(Arc::clone(&layout), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    };
    let v1 = rv(&mut rng);
    let v2 = rv(&mut rng);

    // Linearity: hvp(2v₁ - 3v₂) == 2·hvp(v₁) - 3·hvp(v₂) to f32 rounding.
    let mut combo = ParamVector::zeros(Arc::clone(&layout));
    combo.axpy(2.0, &v1);
    combo.axpy(-3.0, &v2);
    let h_combo = lg.hvp(&combo).unwrap();
    let h1 = lg.hvp(&v1).unwrap();
    let h2 = lg.hvp(&v2).unwrap();
    for i in 0..n {
        let lin = 2.0 * h1.values()[i] - 3.0 * h2.values()[i];
        assert!((h_combo.values()[i] - lin).abs() < 1e-5);
    }

    // Symmetry: vᵀ·hvp(u) == uᵀ·hvp(v).
    let lhs = v2.dot(&h1);
    let rhs = v1.dot(&h2);
    assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()).max(1e-6));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]));
    let y = tape.neg(x);
    assert!(matches!(tape.backward(y, &[x]), Err(AdError::NonScalarOutput { .. })));
}

#[test]
fn shape_mismatch_names_offending_op() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::new(vec![2, 3], vec![0.0; 6]));
    let b = tape.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]));
    match tape.matmul(a, b) {
        Err(AdError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn tape_replay_is_bit_exact() {
    let layout = quad_layout(4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ParamVector::new(
        Arc::clone(&layout),
        (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let a: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut lg = LossGraph::build(&p, quad_loss(Tensor::new(vec![4, 4], a))).unwrap();
    let _ = lg.gradient().unwrap();
    assert!(lg.tape().verify_replay());
}

#[test]
fn identical_builds_are_bit_identical() {
    let layout = quad_layout(5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let theta: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let a: Vec<f32> = (0..25).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let run = || {
        let p = ParamVector::new(Arc::clone(&layout), theta.clone()).unwrap();
        let mut lg =
            LossGraph::build(&p, quad_loss(Tensor::new(vec![5, 5], a.clone()))).unwrap();
        let loss = lg.loss_value();
        let g = lg.gradient().unwrap().values().to_vec();
        let v = ParamVector::new(Arc::clone(&layout), vec![0.3; 5]).unwrap();
        let hv = lg.hvp(&v).unwrap().values().to_vec();
        (loss, g, hv)
    };
    let (l1, g1, h1) = run();
    let (l2, g2, h2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(h1.iter().zip(&h2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

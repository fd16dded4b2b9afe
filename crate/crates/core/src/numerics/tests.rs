use std::rc::Rc;

use super::gradcheck::check_inputs;
use super::*;

fn rand_tensor(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

fn positive_tensor(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| 0.5 + rng.uniform() * 2.0).collect()).unwrap()
}

/// Relu inputs kept away from the kink so central differences are valid.
fn off_kink(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let x = rng.normal();
                if x.abs() < 0.05 {
                    x.signum() * 0.05 + x
                } else {
                    x
                }
            })
            .collect(),
    )
    .unwrap()
}

const TOL: f64 = 1e-6;

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> crate::Result<Var>,
{
    let r = check_inputs(inputs, f).unwrap();
    assert!(r.max_rel_error < TOL, "{} rel err {:e}", r.worst, r.max_rel_error);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::row(vec![1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 3]"), "{err}");
    assert!(g.add(a, b).is_err());
}

#[test]
fn elementary_ops_pass_fd_checks_over_seeds() {
    for seed in 0..20 {
        let mut rng = seeded_rng(seed, 99);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let c = rand_tensor(&mut rng, 3, 4);
        let p = positive_tensor(&mut rng, 3, 4);
        let bias = rand_tensor(&mut rng, 1, 4);
        let col = rand_tensor(&mut rng, 3, 1);
        let k = off_kink(&mut rng, 3, 4);

        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let m = g.matmul(v[0], v[1])?;
            let t = g.tanh(m);
            Ok(g.sum(t))
        });
        assert_grad(&[a.clone(), c.clone()], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            Ok(g.mean(m))
        });
        assert_grad(&[k.clone()], |g, v| {
            let r = g.relu(v[0]);
            let w = g.mul(r, r)?;
            Ok(g.sum(w))
        });
        assert_grad(&[a.clone()], |g, v| {
            let e = g.exp(v[0]);
            let s = g.scale(e, 0.3);
            Ok(g.sum(s))
        });
        assert_grad(&[p.clone()], |g, v| {
            let l = g.log(v[0]);
            let sq = g.mul(l, l)?;
            Ok(g.sum(sq))
        });
        assert_grad(&[a.clone(), c.clone()], |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]])?;
            let sl = g.slice_cols(cat, 2..6)?;
            let t = g.tanh(sl);
            let cr = g.concat_rows(&[t, v[0]])?;
            let sr = g.slice_rows(cr, 1..5)?;
            let sq = g.mul(sr, sr)?;
            Ok(g.sum(sq))
        });
        assert_grad(&[a.clone()], |g, v| {
            let m = g.masked_mean(v[0], &[true, false, true])?;
            let t = g.tanh(m);
            Ok(g.sum(t))
        });
        assert_grad(&[a.clone(), c.clone()], |g, v| {
            let n = g.l2_normalize(v[0]);
            let w = g.mul(n, v[1])?;
            Ok(g.sum(w))
        });
        assert_grad(&[a.clone(), bias.clone(), col.clone()], |g, v| {
            let x = g.add_row(v[0], v[1])?;
            let y = g.mul_row(x, v[1])?;
            let z = g.mul_col(y, v[2])?;
            let t = g.tanh(z);
            Ok(g.sum(t))
        });
        assert_grad(&[a.clone(), c.clone()], |g, v| {
            let t = g.transpose(v[0]);
            let m = g.matmul(v[1], t)?;
            let sc = g.sum_cols(m);
            let sq = g.mul(sc, sc)?;
            Ok(g.sum(sq))
        });
        assert_grad(&[a.clone(), c.clone()], |g, v| {
            let idx = Rc::new(vec![Some(2), None, Some(0), Some(2)]);
            let r = g.gather_rows(v[0], idx)?;
            let grp = g.group_mean(v[1], Rc::new(vec![vec![0, 1], vec![], vec![2, 2, 1]]))?;
            let m = g.concat_rows(&[r, grp])?;
            let t = g.tanh(m);
            Ok(g.sum(t))
        });
        assert_grad(&[a.clone(), c.clone()], |g, v| {
            let ln = g.layer_norm(v[0]);
            let s = g.softmax_rows(v[1]);
            let m = g.mul(ln, s)?;
            Ok(g.sum(m))
        });
        assert_grad(&[p.clone(), c.clone()], |g, v| {
            let rn = g.row_normalize(v[0]);
            let m = g.mul(rn, v[1])?;
            Ok(g.sum(m))
        });
        assert_grad(&[a.clone()], |g, v| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
            let l = g.masked_logsumexp(v[0], Rc::new(mask))?;
            let s = g.add_scalar(l, 0.5);
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        });
    }
}

#[test]
fn segment_attention_passes_fd_check() {
    for seed in 0..20 {
        let mut rng = seeded_rng(seed, 7);
        let q = rand_tensor(&mut rng, 7, 8);
        let k = rand_tensor(&mut rng, 7, 8);
        let v = rand_tensor(&mut rng, 7, 8);
        let w = rand_tensor(&mut rng, 7, 8);
        assert_grad(&[q, k, v, w], |g, x| {
            let segs = Rc::new(vec![0..3, 3..4, 4..7]);
            let o = g.segment_attention(x[0], x[1], x[2], segs, 2)?;
            let m = g.mul(o, x[3])?;
            Ok(g.sum(m))
        });
    }
}

#[test]
fn attention_never_crosses_segments() {
    let mut rng = seeded_rng(3, 3);
    let q = rand_tensor(&mut rng, 5, 4);
    let k = rand_tensor(&mut rng, 5, 4);
    let v = rand_tensor(&mut rng, 5, 4);
    let mut v2 = v.clone();
    for x in v2.row_slice_mut(4) {
        *x += 10.0;
    }
    let run = |vv: Tensor| {
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(vv));
        let o = g.segment_attention(a, b, c, Rc::new(vec![0..3, 3..5]), 2).unwrap();
        g.value(o).clone()
    };
    let (o1, o2) = (run(v), run(v2));
    assert_eq!(&o1.data()[..12], &o2.data()[..12]);
}

#[test]
fn l2_normalize_unit_norm() {
    let mut rng = seeded_rng(5, 5);
    for _ in 0..200 {
        let scale = 10f64.powf(rng.uniform_range(-9.0, 6.0));
        let x = rand_tensor(&mut rng, 1, 16).map(|v| v * scale);
        if x.norm() < 1e-9 {
            continue;
        }
        let mut g = Graph::new();
        let v = g.constant(x);
        let n = g.l2_normalize(v);
        assert!((g.value(n).norm() - 1.0).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let z = g.variable(Tensor::zeros(&[1, 4]));
    let n = g.l2_normalize(z);
    assert_eq!(g.value(n).norm(), 0.0);
    let s = g.sum(n);
    let grads = g.backward(s);
    assert!(grads.get(z).unwrap().all_finite());
}

#[test]
fn constants_carry_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.insert("w", Tensor::row(vec![1.0, 2.0]));
    let f = store.insert("frozen", Tensor::row(vec![3.0, 4.0]));
    store.set_trainable(f, false);
    let mut g = Graph::new();
    let a = g.param(&store, w);
    let b = g.param(&store, f);
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s);
    let pg = grads.param_grads();
    assert_eq!(pg.len(), 1);
    assert_eq!(pg[0].0, w);
    assert_eq!(pg[0].1.data(), &[3.0, 4.0]);
    assert!(grads.get(b).is_none());
}

#[test]
fn training_loop_bit_reproducible() {
    let run = || {
        let mut rng = seeded_rng(42, 0);
        let mut store = ParamStore::new();
        let w = store.insert_glorot("w", 4, 3, &mut rng);
        let x = rand_tensor(&mut rng, 6, 4);
        let mut adam = AdamState::new(0.01);
        for _ in 0..50 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.param(&store, w);
            let y = g.matmul(xv, wv).unwrap();
            let t = g.tanh(y);
            let sq = g.mul(t, t).unwrap();
            let loss = g.mean(sq);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads.param_grads());
        }
        store.get(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

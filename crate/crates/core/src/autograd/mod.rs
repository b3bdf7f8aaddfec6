//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(Σ r·f(x))/dx for every input element.
    fn check<F>(inputs: Vec<Tensor>, f: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |ins: &[Tensor], r: Option<&Tensor>| -> (f64, Tensor, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&mut g, &vars);
            let shape = g.shape(out).to_vec();
            let r = r.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
            let rv = g.constant(r.clone());
            let prod = g.mul(out, rv);
            let s = g.sum(prod);
            let grads = g.backward(s);
            let gs = vars.iter().map(|&v| grads.get(v).cloned()).collect();
            (g.value(s).item(), g.value(out).clone(), gs)
        };
        let (_, out, _) = eval(&inputs, None);
        let r = rand_tensor(&mut rng, out.shape());
        let (_, _, analytic) = eval(&inputs, Some(&r));
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus, Some(&r)).0 - eval(&minus, Some(&r)).0) / (2.0 * h);
                let an = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                assert!(err < 1e-5, "input {i} elem {j}: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 3, 4, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let out = kernels::conv3d(&x, &w, &b);
        let (nz, ny, nx) = (3i64, 4i64, 5i64);
        for co in 0..3 {
            for z in 0..nz {
                for y in 0..ny {
                    for xx in 0..nx {
                        let mut s = b.data()[co];
                        for ci in 0..2 {
                            for dz in -1..=1i64 {
                                for dy in -1..=1i64 {
                                    for dx in -1..=1i64 {
                                        let (zz, yy, xq) = (z + dz, y + dy, xx + dx);
                                        if zz < 0 || yy < 0 || xq < 0 || zz >= nz || yy >= ny || xq >= nx {
                                            continue;
                                        }
                                        let wi = (((co * 2 + ci) * 3 + (dz + 1) as usize) * 3 + (dy + 1) as usize) * 3 + (dx + 1) as usize;
                                        let xi = ((ci as i64 * nz + zz) * ny + yy) * nx + xq;
                                        s += w.data()[wi] * x.data()[xi as usize];
                                    }
                                }
                            }
                        }
                        let oi = ((co as i64 * nz + z) * ny + y) * nx + xx;
                        assert!((out.data()[oi as usize] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![rand_tensor(&mut rng, &[2, 2, 3, 4]), rand_tensor(&mut rng, &[3, 2, 3, 3, 3]), rand_tensor(&mut rng, &[3])],
            |g, v| g.conv3d(v[0], v[1], v[2]),
        );
        check(
            vec![rand_tensor(&mut rng, &[3, 2, 2, 2]), rand_tensor(&mut rng, &[2, 3, 1, 1, 1]), rand_tensor(&mut rng, &[2])],
            |g, v| g.conv3d(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn norm_pool_and_gate_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![rand_tensor(&mut rng, &[4, 2, 2, 2]), rand_tensor(&mut rng, &[4]), rand_tensor(&mut rng, &[4])],
            |g, v| g.group_norm(v[0], v[1], v[2], 2),
        );
        check(vec![rand_tensor(&mut rng, &[2, 2, 4, 2])], |g, v| g.avg_pool2(v[0]));
        check(vec![rand_tensor(&mut rng, &[2, 1, 2, 2])], |g, v| g.upsample2(v[0]));
        check(vec![rand_tensor(&mut rng, &[3, 1, 2, 2])], |g, v| g.global_avg_pool(v[0]));
        check(vec![rand_tensor(&mut rng, &[3, 1, 2, 2]), rand_tensor(&mut rng, &[3])], |g, v| g.mul_channel(v[0], v[1]));
        check(vec![rand_tensor(&mut rng, &[3, 1, 2, 2]), rand_tensor(&mut rng, &[1, 1, 2, 2])], |g, v| g.mul_spatial(v[0], v[1]));
        check(vec![rand_tensor(&mut rng, &[3, 1, 2, 2]), rand_tensor(&mut rng, &[3])], |g, v| g.add_channel(v[0], v[1]));
        check(vec![rand_tensor(&mut rng, &[3, 5])], |g, v| g.softmax_channels(v[0]));
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pos = Tensor::from_vec(&[5], vec![0.3, 0.7, 1.2, 2.0, 0.9]);
        check(vec![rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5])], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.silu(b);
            let d = g.tanh(c);
            let e = g.sigmoid(d);
            g.add(e, v[0])
        });
        check(vec![pos.clone(), pos.map(|x| x + 1.0)], |g, v| {
            let q = g.div(v[0], v[1]);
            let l = g.ln(q);
            let p = g.powf(v[0], 4.0 / 3.0);
            let m = g.mul(l, p);
            let s = g.scale(m, 2.5);
            g.offset(s, 1.0)
        });
        check(vec![rand_tensor(&mut rng, &[2, 3])], |g, v| {
            let a = g.abs(v[0]);
            let m = g.mean(a);
            let c = g.clamp(v[0], -0.5, 0.5);
            let s = g.sum(c);
            g.add(m, s)
        });
    }

    #[test]
    fn shape_and_matrix_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_tensor(&mut rng, &[3, 2]) } else { rand_tensor(&mut rng, &[2, 3]) };
            let b = if tb { rand_tensor(&mut rng, &[4, 3]) } else { rand_tensor(&mut rng, &[3, 4]) };
            check(vec![a, b], move |g, v| g.matmul(v[0], v[1], ta, tb));
        }
        check(vec![rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2])], |g, v| {
            g.linear(v[0], v[1], v[2])
        });
        check(vec![rand_tensor(&mut rng, &[2, 2, 2, 1]), rand_tensor(&mut rng, &[1, 2, 2, 1])], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let n = g.narrow(c, 1, 2);
            g.reshape(n, &[8])
        });
    }

    #[test]
    fn ssm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for reverse in [false, true] {
            check(
                vec![
                    rand_tensor(&mut rng, &[2, 7]),
                    rand_tensor(&mut rng, &[2, 3]).map(|a| 0.9 * a),
                    rand_tensor(&mut rng, &[2, 3]),
                    rand_tensor(&mut rng, &[2, 3]),
                    rand_tensor(&mut rng, &[2]),
                ],
                move |g, v| g.ssm_scan(v[0], v[1], v[2], v[3], v[4], reverse),
            );
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let d = g.detach(x);
        let y = g.mul(d, x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}

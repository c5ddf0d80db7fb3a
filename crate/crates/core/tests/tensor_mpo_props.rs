use mpo_adapt::mpo::{budget, contract, decompose, error_bound, load_chain, plan_shapes, save_chain};
use mpo_adapt::tensor::{matmul, read_mpot_bytes, svd_truncated, write_mpot_bytes, DenseTensor};
use proptest::prelude::*;

fn matrix(max: usize) -> impl Strategy<Value = DenseTensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| DenseTensor::new(vec![r, c], d).unwrap())
    })
}

fn factors() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (1usize..=4).prop_flat_map(|m| (prop::collection::vec(1usize..=4, m), prop::collection::vec(1usize..=4, m)))
}

fn naive_matmul(a: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
    let (n, k, m) = (a.dims()[0], a.dims()[1], b.dims()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mpot_bytes_round_trip(t in matrix(9)) {
        let bytes = write_mpot_bytes(&t);
        prop_assert_eq!(bytes.len(), 4 + 4 + 4 + 2 * 8 + t.len() * 8);
        prop_assert_eq!(&bytes[..4], b"MPOT");
        let back = read_mpot_bytes(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn permute_then_inverse_is_identity(t in matrix(6)) {
        let (r, c) = t.shape2().unwrap();
        let back = t.permute(&[1, 0]).unwrap().permute(&[1, 0]).unwrap();
        prop_assert_eq!(&back, &t);
        let tt = t.transpose().unwrap();
        for i in 0..r {
            for j in 0..c {
                prop_assert_eq!(tt.at2(j, i), t.at2(i, j));
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop(a in matrix(7), cols in 1usize..6, seed in any::<u64>()) {
        let k = a.dims()[1];
        let b = DenseTensor::from_fn(&[k, cols], |e| ((e as u64).wrapping_mul(seed | 1) % 13) as f64 - 6.0).unwrap();
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal(t in matrix(8)) {
        let (r, c) = t.shape2().unwrap();
        let k = r.min(c);
        let s = svd_truncated(&t, k).unwrap();
        let back = s.reconstruct().unwrap();
        let scale = t.frobenius_norm().max(1.0);
        prop_assert!(back.sub(&t).unwrap().frobenius_norm() <= 1e-10 * scale);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        // columns of U with a nonzero singular value are orthonormal
        let live = s.sigma.iter().filter(|&&x| x > 1e-10 * scale).count();
        for a in 0..live {
            for b in 0..live {
                let dot: f64 = (0..r).map(|i| s.u.at2(i, a) * s.u.at2(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn truncated_svd_energy(t in matrix(8), keep in 1usize..8) {
        let (r, c) = t.shape2().unwrap();
        let keep = keep.min(r.min(c));
        let s = svd_truncated(&t, keep).unwrap();
        let err = s.reconstruct().unwrap().sub(&t).unwrap().frobenius_norm();
        prop_assert!((err * err - s.discarded_energy).abs() <= 1e-9 * (1.0 + t.frobenius_norm().powi(2)));
    }

    #[test]
    fn mpo_round_trip_and_budget((ins, outs) in factors(), seed in any::<u64>()) {
        let rows: usize = ins.iter().product();
        let cols: usize = outs.iter().product();
        let w = DenseTensor::from_fn(&[rows, cols], |e| (((e as u64 + 1).wrapping_mul(seed | 1) >> 7) % 1000) as f64 / 500.0 - 1.0).unwrap();
        let plan = plan_shapes(rows, cols, &ins, &outs, None).unwrap();
        let chain = decompose(&w, &plan).unwrap();
        let back = contract(&chain).unwrap();
        prop_assert!(back.sub(&w).unwrap().frobenius_norm() <= 1e-10 * w.frobenius_norm().max(1.0));
        let stored: usize = chain.factors().iter().map(DenseTensor::len).sum();
        prop_assert_eq!(stored, budget(&plan).n_params_chain);
        prop_assert_eq!(chain.stored_len(), stored);
    }

    #[test]
    fn truncated_chain_within_bound((ins, outs) in factors(), cap in 1usize..4, seed in any::<u64>()) {
        let rows: usize = ins.iter().product();
        let cols: usize = outs.iter().product();
        let w = DenseTensor::from_fn(&[rows, cols], |e| (((e as u64 + 3).wrapping_mul(seed | 1) >> 9) % 997) as f64 / 498.0 - 1.0).unwrap();
        let plan = plan_shapes(rows, cols, &ins, &outs, Some(&[cap])).unwrap();
        let chain = decompose(&w, &plan).unwrap();
        let measured = contract(&chain).unwrap().sub(&w).unwrap().frobenius_norm();
        prop_assert!(measured <= error_bound(&chain) * (1.0 + 1e-8) + 1e-12 * w.frobenius_norm());
    }
}

#[test]
fn chain_directory_round_trip() {
    let w = DenseTensor::from_fn(&[6, 8], |e| (e as f64 * 0.37).sin()).unwrap();
    let plan = plan_shapes(6, 8, &[2, 3], &[4, 2], Some(&[3])).unwrap();
    let chain = decompose(&w, &plan).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    save_chain(tmp.path().join("c"), &chain).unwrap();
    assert!(tmp.path().join("c/plan.json").exists());
    assert!(tmp.path().join("c/factor_1.mpot").exists());
    assert!(tmp.path().join("c/factor_2.mpot").exists());
    let back = load_chain(tmp.path().join("c")).unwrap();
    assert_eq!(back.factors(), chain.factors());
    assert_eq!(back.truncation_errors(), chain.truncation_errors());
    assert_eq!(back.plan(), chain.plan());
}

#[test]
fn mpot_rejects_garbage() {
    let p = std::path::Path::new("x.mpot");
    assert!(read_mpot_bytes(b"NOPE\x01\x00\x00\x00", p).is_err());
    let mut bytes = write_mpot_bytes(&DenseTensor::zeros(&[2, 2]).unwrap());
    bytes.pop();
    assert!(read_mpot_bytes(&bytes, p).is_err());
}

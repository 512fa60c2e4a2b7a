use proptest::prelude::*;

use vqt::compressed::{apply_per_location, binary_elementwise, compress, decompress, gc_codebook, BinaryOp};
use vqt::nn::PerLocationOp;
use vqt::positions::{align_offline, Allocation, PositionMap};
use vqt::{vq_quantize, FlopCounter, VqCodebook, PAD_TOKEN};

fn codebook_and_input() -> impl Strategy<Value = (VqCodebook<f64>, Vec<f64>)> {
    (1usize..=3, 1usize..=12, 1usize..=4).prop_flat_map(|(h, m, chunk)| {
        (
            prop::collection::vec(-2.0f64..2.0, h * m * chunk),
            prop::collection::vec(-2.0f64..2.0, h * chunk),
        )
            .prop_map(move |(codes, x)| (VqCodebook::new(h, m, chunk, codes).unwrap(), x))
    })
}

/// Tensor entries drawn from a few values so that repeats are common.
fn tensor() -> impl Strategy<Value = (Vec<f64>, usize, usize, usize)> {
    (1usize..=4, 1usize..=8, 1usize..=4)
        .prop_flat_map(|(b, n, d)| (prop::collection::vec(-2i8..=2, b * n * d), Just(b), Just(n), Just(d)))
        .prop_map(|(v, b, n, d)| (v.into_iter().map(f64::from).collect(), b, n, d))
}

fn tokens(max: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..4, 1..=max)
}

/// Length of the longest common subsequence by forward prefix DP.
fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn vq_score_argmax_is_distance_argmin((cb, x) in codebook_and_input()) {
        let (idx, q) = vq_quantize(&x, &cb).unwrap();
        let chunk = x.len() / idx.len();
        for (head, &j) in idx.iter().enumerate() {
            let part = &x[head * chunk..(head + 1) * chunk];
            let dist = |e: usize| -> f64 { part.iter().zip(cb.code(head, e)).map(|(a, b)| (a - b).powi(2)).sum() };
            let best = dist(j as usize);
            for e in 0..cb.entries() {
                prop_assert!(best <= dist(e) + 1e-12, "head {head}: entry {e} closer than {j}");
            }
            prop_assert_eq!(&q[head * chunk..(head + 1) * chunk], cb.code(head, j as usize));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn compression_round_trips((v, b, n, d) in tensor()) {
        let ct = compress(&v, b, n, d).unwrap();
        prop_assert!(ct.is_canonical());
        prop_assert_eq!(decompress(&ct), v);
        prop_assert!(ct.rows() <= b * n);
        prop_assert!(ct.overrides().len() <= (b - 1) * n);
    }

    #[test]
    fn per_location_commutes_with_decompression((v, b, n, d) in tensor(), scale in -3.0f64..3.0) {
        let ct = compress(&v, b, n, d).unwrap();
        let op = PerLocationOp::Chain(vec![PerLocationOp::Scale(scale, d), PerLocationOp::Gelu(d)]);
        let counter = FlopCounter::new();
        let out = apply_per_location(&op, &ct, &counter).unwrap();
        let mut want = vec![0.0; v.len()];
        for (x, y) in v.chunks(d).zip(want.chunks_mut(d)) {
            op.apply(x, y);
        }
        prop_assert_eq!(decompress(&out), want);
        prop_assert_eq!(counter.tally().arithmetic(), ct.rows() as u64 * op.cost());
    }

    #[test]
    fn binary_ops_commute_with_decompression((v, b, n, d) in tensor(), seed in any::<u64>()) {
        let w: Vec<f64> = v.iter().enumerate().map(|(i, x)| ((i as u64 ^ seed) % 3) as f64 - x).collect();
        let (x, y) = (compress(&v, b, n, d).unwrap(), compress(&w, b, n, d).unwrap());
        for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul] {
            let out = binary_elementwise(op, &x, &y, &FlopCounter::new()).unwrap();
            let want: Vec<f64> = v.iter().zip(&w).map(|(a, c)| op.apply(*a, *c)).collect();
            prop_assert!(vqt::scalar::bitwise_eq(&decompress(&out), &want));
            let same = binary_elementwise(op, &x, &x, &FlopCounter::new()).unwrap();
            let want: Vec<f64> = v.iter().map(|a| op.apply(*a, *a)).collect();
            prop_assert!(vqt::scalar::bitwise_eq(&decompress(&same), &want));
        }
    }

    #[test]
    fn gc_preserves_values((v, b, n, d) in tensor()) {
        let x = compress(&v, b, n, d).unwrap();
        let sum = binary_elementwise(BinaryOp::Add, &x, &x, &FlopCounter::new()).unwrap();
        let prod = binary_elementwise(BinaryOp::Mul, &sum, &x, &FlopCounter::new()).unwrap();
        let gc = gc_codebook(&prod, &FlopCounter::new());
        prop_assert_eq!(decompress(&gc), decompress(&prod));
        prop_assert!(gc.rows() <= prod.rows());
        prop_assert!(gc.is_canonical());
    }

    #[test]
    fn positions_stay_strictly_increasing(ops in prop::collection::vec((0usize..100, 0u8..3), 1..80)) {
        let mut pm = PositionMap::init(4, 8, 256).unwrap();
        for (s, kind) in ops {
            let before = pm.positions().to_vec();
            match kind {
                0 if pm.len() > 1 => {
                    pm.delete(s % pm.len()).unwrap();
                }
                1 if pm.len() < 32 => {
                    let slot = s % (pm.len() + 1);
                    if pm.insert(slot).unwrap() == Allocation::ReindexNeeded {
                        let _ = pm.insert_reindexed(slot).unwrap();
                    }
                }
                _ => prop_assert_eq!(pm.positions(), &before[..]),
            }
            pm.check().unwrap();
            prop_assert!(pm.positions().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(pm.positions().iter().all(|&p| p < pm.pool()));
        }
    }

    #[test]
    fn alignment_is_an_lcs_layout(a in tokens(24), b in tokens(24)) {
        let al = align_offline(&a, &b, 1, 1000).unwrap();
        prop_assert_eq!(al.strip(0), a.clone());
        prop_assert_eq!(al.strip(1), b.clone());
        prop_assert_eq!(al.lcs, lcs_len(&a, &b));
        let pads = al.rows.iter().flatten().filter(|&&t| t == PAD_TOKEN).count();
        prop_assert_eq!(pads, a.len() + b.len() - 2 * al.lcs);
        for c in 0..al.len() {
            prop_assert!(!(al.pads[0][c] && al.pads[1][c]));
            if !al.pads[0][c] && !al.pads[1][c] {
                prop_assert_eq!(al.rows[0][c], al.rows[1][c]);
            }
        }
    }
}

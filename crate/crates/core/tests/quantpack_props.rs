use pacq_core::matrix::Matrix;
use pacq_core::quantpack::format::{read_weights, write_weights};
use pacq_core::quantpack::{
    dequantize, pack, rtn_quantize, unpack, BitWidth, GroupSpec, PackDim, PackSpec, PackedWeights, PackedWord,
    WeightMatrix,
};
use proptest::prelude::*;

#[test]
fn every_container_round_trips() {
    for bits in [BitWidth::Int4, BitWidth::Int2] {
        for dim in [PackDim::K, PackDim::N] {
            let spec = PackSpec::new(bits, dim);
            for raw in 0..=u16::MAX {
                let w = PackedWord {
                    raw,
                    origin: (0, 0),
                    spec,
                };
                let vals = unpack(w);
                assert_eq!(vals.len(), bits.lanes());
                assert!(vals.iter().all(|&v| bits.contains(v as i32)));
                assert_eq!(PackedWord::from_values(&vals, spec, (0, 0)).unwrap().raw, raw);
            }
        }
    }
}

#[test]
fn group_grid_shapes() {
    let w = WeightMatrix::new(Matrix::from_fn(128, 128, |i, j| ((i ^ j) % 13) as f32 - 6.0)).unwrap();
    let g = rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(32, 4)).unwrap();
    assert_eq!(g.scales.shape(), (4, 32));
    let g128 = rtn_quantize(&w, BitWidth::Int4, GroupSpec::new(128, 1)).unwrap();
    assert_eq!(g128.scales.shape(), (1, 128));
    assert_eq!(g.values.shape(), g128.values.shape());
}

fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..=4, 1usize..=4).prop_flat_map(|(kb, nb)| {
        let (k, n) = (kb * 8, nb * 8);
        (Just(k), Just(n), prop::collection::vec(-4.0f32..4.0, k * n))
    })
}

fn bits_strategy() -> impl Strategy<Value = BitWidth> {
    prop_oneof![Just(BitWidth::Int4), Just(BitWidth::Int2)]
}

fn group_strategy() -> impl Strategy<Value = GroupSpec> {
    prop_oneof![
        Just(GroupSpec::new(8, 8)),
        Just(GroupSpec::new(8, 1)),
        Just(GroupSpec::new(4, 4)),
        Just(GroupSpec::new(2, 8)),
    ]
}

proptest! {
    #[test]
    fn rtn_error_within_half_step((k, n, data) in matrix_strategy(), bits in bits_strategy(), group in group_strategy()) {
        let w = WeightMatrix::new(Matrix::from_vec(k, n, data)).unwrap();
        let q = rtn_quantize(&w, bits, group).unwrap();
        let deq = dequantize(&q);
        for i in 0..k {
            for j in 0..n {
                let s = q.scale_at(i, j).to_f64();
                let d = deq[(i, j)];
                let ulp = d.lsb_exp().map_or(0.0, |e| 2f64.powi(e));
                let err = (w.get(i, j) as f64 - d.to_f64()).abs();
                prop_assert!(err <= s / 2.0 + ulp, "({i},{j}) err {err} scale {s}");
            }
        }
    }

    #[test]
    fn quantize_is_idempotent_on_grid((k, n, data) in matrix_strategy(), bits in bits_strategy()) {
        let group = GroupSpec::new(8, 8);
        let w = WeightMatrix::new(Matrix::from_vec(k, n, data)).unwrap();
        let q = rtn_quantize(&w, bits, group).unwrap();
        let again = rtn_quantize(&pacq_core::quantpack::dequantize_as::<f64>(&q), bits, group).unwrap();
        // values on the grid come back unchanged; at most a scale ulp apart
        for (a, b) in q.values.as_slice().iter().zip(again.values.as_slice()) {
            prop_assert!((a - b).abs() <= 1);
        }
    }

    #[test]
    fn pack_preserves_values((k, n, data) in matrix_strategy(), bits in bits_strategy(), dim_k: bool) {
        let q = rtn_quantize(&WeightMatrix::new(Matrix::from_vec(k, n, data)).unwrap(), bits, GroupSpec::new(8, 8)).unwrap();
        let dim = if dim_k { PackDim::K } else { PackDim::N };
        let extent = if dim_k { k } else { n };
        let packed = pack(&q, PackSpec::new(bits, dim));
        if extent % bits.lanes() != 0 {
            prop_assert!(packed.is_err());
            return Ok(());
        }
        let packed = packed.unwrap();
        prop_assert_eq!(packed.to_values(), q.values.clone());
        for i in 0..k {
            for j in 0..n {
                let (word, lane) = packed.locate(i, j);
                prop_assert_eq!(word.position(lane), (i, j));
                prop_assert_eq!(word.value(lane), q.values[(i, j)]);
            }
        }
    }

    #[test]
    fn weight_file_round_trips((k, n, data) in matrix_strategy(), bits in bits_strategy(), dim_k: bool) {
        let q = rtn_quantize(&WeightMatrix::new(Matrix::from_vec(k, n, data)).unwrap(), bits, GroupSpec::new(8, 8)).unwrap();
        let dim = if dim_k { PackDim::K } else { PackDim::N };
        prop_assume!((if dim_k { k } else { n }) % bits.lanes() == 0);
        let p = PackedWeights::from_quantized(&q, dim).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &p).unwrap();
        let back = read_weights(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &p);
        let other = if dim_k { PackDim::N } else { PackDim::K };
        if let Ok(r) = p.repack(other) {
            prop_assert_eq!(r.to_quantized().unwrap(), q);
        }
    }
}

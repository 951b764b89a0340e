use gossip_sinkhorn::ot::{
    barycenter_map, hilbert_distance, softmax_normalize, CostMatrix, Histogram, ProblemInstance,
};
use gossip_sinkhorn::protocol::{quantize, Bits, CommsConfig, Packet, Quantizer};
use proptest::prelude::*;

fn simplex(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, d).prop_map(|w| {
        let t: f64 = w.iter().sum();
        w.into_iter().map(|x| x / t).collect()
    })
}

proptest! {
    #[test]
    fn quantizer_error_and_idempotence(bits in 1u8..=24, lo in -40.0f64..0.0, width in 0.1f64..80.0, x in 0.0f64..1.0) {
        let q = Quantizer::new(bits, lo, lo + width);
        let v = lo + x * width;
        let y = q.quantize(v);
        let dq = width / (2.0 * (2f64.powi(bits as i32) - 1.0));
        prop_assert!((y - v).abs() <= dq * (1.0 + 1e-9));
        prop_assert_eq!(q.quantize(y), y);
        prop_assert!(y >= lo && y <= lo + width);
    }

    #[test]
    fn packets_survive_the_wire(bits in prop::sample::select(vec![4u8, 8, 12, 16, 32]),
                                payload in prop::collection::vec(-30.0f64..30.0, 1..40),
                                sender in 0usize..1000, outer in 0u32..500, inner in 0u32..200) {
        let cfg = CommsConfig { bits: Bits::Quantized(bits), ..CommsConfig::default() };
        let p = Packet { sender, outer_iter: outer, inner_step: inner, payload: quantize(&payload, &cfg) };
        let back = Packet::decode(&p.encode(&cfg), cfg.s_min, cfg.s_max).unwrap();
        prop_assert_eq!(back.sender, sender);
        prop_assert_eq!(back.send_time(), (outer, inner));
        for (a, b) in back.payload.iter().zip(&p.payload) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn unquantized_packets_are_exact(payload in prop::collection::vec(-1e3f64..1e3, 1..20)) {
        let cfg = CommsConfig { bits: Bits::Unquantized, s_min: -1e4, s_max: 1e4, ..CommsConfig::default() };
        let p = Packet { sender: 3, outer_iter: 1, inner_step: 2, payload: payload.clone() };
        let back = Packet::decode(&p.encode(&cfg), cfg.s_min, cfg.s_max).unwrap();
        prop_assert_eq!(back.payload, payload);
    }

    #[test]
    fn softmax_is_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 2..30), c in -100.0f64..100.0) {
        let a = softmax_normalize(&z);
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let b = softmax_normalize(&shifted);
        prop_assert!(a.l1_distance(&b) <= 1e-12);
        prop_assert!((a.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn barycenter_map_contracts_in_hilbert_metric(b in simplex(8), c in simplex(8), h1 in simplex(8), h2 in simplex(8), eps in 0.2f64..2.0) {
        let inst = ProblemInstance::new(
            CostMatrix::squared_grid(8),
            eps,
            1e-16,
            vec![Histogram::new(h1).unwrap(), Histogram::new(h2).unwrap()],
        ).unwrap();
        let before = hilbert_distance(&b, &c).unwrap();
        let fb = barycenter_map(&inst, &b).unwrap();
        let fc = barycenter_map(&inst, &c).unwrap();
        let after = hilbert_distance(fb.weights(), fc.weights()).unwrap();
        let bound = (1.0 / (2.0 * eps)).tanh().powi(2);
        prop_assert!(after <= bound * before + 1e-9, "{after} > {bound} * {before}");
    }
}

//! Randomized invariants over tensors, gates, bounds, and serialization.

use proptest::prelude::*;
use snl::capacity::{bound_pruned, bound_snl};
use snl::network::{build_network, ArchSpec};
use snl::tape::GateMode;
use snl::tensor::Tensor;

proptest! {
    #[test]
    fn tensor_rejects_mismatched_shapes(
        dims in prop::collection::vec(1usize..6, 1..4),
        extra in 1usize..5,
    ) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn binarize_is_idempotent(
        values in prop::collection::vec(-2.0f64..2.0, 1..40),
        eps in 0.0f64..0.5,
    ) {
        let mut net = build_network(
            &ArchSpec::mlp(&[2, values.len(), 2], GateMode::Identity), 0).unwrap();
        net.gates_mut()[0].values = values;
        net.binarize_gates(eps).unwrap();
        let once = net.gate_values();
        prop_assert!(once.iter().all(|&v| v == 0.0 || v == 1.0));
        net.binarize_gates(eps).unwrap();
        prop_assert_eq!(once, net.gate_values());
    }

    #[test]
    fn relu_count_monotone_in_epsilon(
        values in prop::collection::vec(-1.0f64..2.0, 1..40),
        e1 in 0.0f64..1.0,
        e2 in 0.0f64..1.0,
    ) {
        let mut net = build_network(
            &ArchSpec::mlp(&[2, values.len(), 2], GateMode::Identity), 0).unwrap();
        net.gates_mut()[0].values = values;
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(net.relu_count(hi) <= net.relu_count(lo));
    }

    #[test]
    fn snl_bound_dominates_pruned_bound(
        d1 in 1usize..100,
        d2 in 1usize..100,
        p in 2usize..5,
        a1 in 0.0f64..1.0,
        a2 in 0.0f64..1.0,
    ) {
        // The retained-linear cross terms can only add capacity.
        prop_assert!(bound_snl(d1, d2, p, a1, a2) >= bound_pruned(d1, d2, p, a1, a2) - 1e-12);
    }

    #[test]
    fn forward_is_deterministic(
        seed in 0u64..1000,
        x0 in -2.0f64..2.0,
        x1 in -2.0f64..2.0,
    ) {
        let net = build_network(&ArchSpec::mlp(&[2, 6, 2], GateMode::Identity), seed).unwrap();
        let x = Tensor::new(vec![1, 2], vec![x0, x1]).unwrap();
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

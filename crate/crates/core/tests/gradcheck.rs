mod support;

use std::collections::BTreeMap;

use adaptlab_core::tape::{Graph, Var};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};
use support::gradcheck::{check, Scenario};
use support::scenarios::{Op, OpCase, TinyModel, OPS};

fn assert_op(op: Op, dims: [usize; 4], seed: u64) {
    let case = OpCase::new(op, dims, seed);
    let report = check(&case, 1);
    assert!(
        report.passed(),
        "{op:?} dims {dims:?} seed {seed}: {:?}",
        &report.failures[..report.failures.len().min(4)]
    );
}

#[test]
fn every_op_on_fixed_shapes() {
    for (i, op) in OPS.iter().enumerate() {
        assert_op(*op, [3, 4, 2, 2], 100 + i as u64);
    }
}

proptest! {
    #![proptest_config(Config {
        cases: 96,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    })]

    #[test]
    fn analytic_gradients_match_central_differences(
        op in 0..OPS.len(),
        a in 1usize..=8,
        b in 1usize..=8,
        c in 1usize..=4,
        d in 1usize..=2,
        seed in any::<u64>(),
    ) {
        assert_op(OPS[op], [a, b, c, d], seed);
    }
}

#[test]
fn tiny_encoder_with_adapters_and_heads() {
    let model = TinyModel::new(3);
    let report = check(&model, 1);
    assert!(report.checked > 500, "checked {}", report.checked);
    assert!(
        report.passed(),
        "max rel {:.2e}, max abs {:.2e}, failures {:?}",
        report.max_rel,
        report.max_abs_small,
        &report.failures[..report.failures.len().min(6)]
    );
}

#[test]
fn frozen_adapter_params_receive_no_gradient_when_constant() {
    let model = TinyModel::new(5);
    let mut g: Graph = Graph::new();
    let v: BTreeMap<String, Var> = model
        .inputs
        .iter()
        .map(|(n, t)| {
            let var = if n.starts_with("lang/") {
                g.constant(t.clone())
            } else {
                g.param(t.clone())
            };
            (n.clone(), var)
        })
        .collect();
    let loss = model.loss(&mut g, &v).unwrap();
    let grads = g.backward(loss).unwrap();
    for (n, var) in &v {
        assert_eq!(grads.get(*var).is_some(), !n.starts_with("lang/"), "{n}");
    }
}

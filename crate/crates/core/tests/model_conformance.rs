use chaselev::deque::new_deque;
use chaselev::explorer::{explore, Limits, ModelState, Program};
use chaselev::lincheck::{Op, Outcome};
use proptest::prelude::*;

fn arb_ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(prop_oneof![Just(Op::Pop), Just(Op::Steal), (1u64..100).prop_map(Op::Push)], 0..24)
}

/// Runs the owner's ops alone on the step model.
fn model_outcomes(capacity: usize, ops: &[Op]) -> (Vec<Outcome>, Vec<u64>) {
    let program = Program::new(capacity, ops.to_vec(), vec![]);
    let mut state = ModelState::new(&program);
    while state.can_step(0) {
        state.step(0).unwrap();
    }
    (state.results(0).to_vec(), state.contents())
}

fn real_outcomes(capacity: usize, ops: &[Op]) -> (Vec<Outcome>, Vec<u64>) {
    let (mut owner, stealer) = new_deque(capacity).unwrap();
    let outcomes = ops
        .iter()
        .map(|op| match *op {
            Op::Push(v) => {
                owner.push(v);
                Outcome::Unit
            }
            Op::Pop => owner.pop().into(),
            Op::Steal => stealer.steal().into(),
        })
        .collect();
    let mut rest = Vec::new();
    while let Some(v) = stealer.steal() {
        rest.push(v);
    }
    (outcomes, rest)
}

proptest! {
    #[test]
    fn model_matches_real_deque(capacity in 1usize..5, ops in arb_ops()) {
        prop_assert_eq!(model_outcomes(capacity, &ops), real_outcomes(capacity, &ops));
    }

    #[test]
    fn single_thread_programs_have_one_schedule(capacity in 1usize..3, ops in arb_ops()) {
        let owner_ops: Vec<Op> = ops.into_iter().filter(|o| *o != Op::Steal).take(10).collect();
        let report = explore(&Program::new(capacity, owner_ops, vec![]), Limits::default());
        prop_assert!(report.all_pass);
        prop_assert_eq!(report.interleavings, 1);
    }
}

#[test]
fn one_element_race_always_has_one_winner() {
    let program = Program::new(2, vec![Op::Pop], vec![vec![Op::Steal], vec![Op::Steal]]).with_preload(vec![9]);
    let report = explore(&program, Limits::default());
    assert!(report.all_pass && report.complete);
    for outcome in report.outcomes.keys() {
        assert_eq!(outcome.matches("9").count(), 1, "{outcome}");
    }
    assert_eq!(report.outcomes.len(), 3);
}

use accept_core::taskbench::{
    fewshot_report, fewshot_sample, gen_task, load_jsonl, save_jsonl, DatasetSchema, FewShotSpec, Label, TaskKind,
};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = TaskKind> {
    proptest::sample::select(TaskKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_agree_with_relabeler(kind in kind(), half_len in 1usize..8, half_n in 1usize..40, seed in any::<u64>()) {
        let len = 2 * half_len + 1;
        let ds = gen_task(kind, 20, len, 2 * half_n, seed).unwrap();
        for ex in &ds.examples {
            prop_assert_eq!(ex.tokens.len(), len);
            prop_assert_eq!(kind.label_of(&ex.tokens), ex.label);
        }
        if kind.num_classes() == 2 {
            let ones = ds.examples.iter().filter(|e| e.label == Label::Class(1)).count();
            prop_assert_eq!(ones, half_n);
        }
        ds.validate(20).unwrap();
    }

    #[test]
    fn fewshot_subsets_are_seeded_subsets(gamma in 1usize..40, base_seed in any::<u64>(), index in 0u64..5) {
        let ds = gen_task(TaskKind::Parity, 16, 5, 40, 1).unwrap();
        let spec = FewShotSpec::new(gamma, 3, base_seed);
        let a = fewshot_sample(&ds, &spec, index).unwrap();
        let b = fewshot_sample(&ds, &spec, index).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), gamma);
        for ex in &a.examples {
            prop_assert!(ds.examples.contains(ex));
        }
    }

    #[test]
    fn report_uses_population_std(values in proptest::collection::vec(-100.0f64..100.0, 1..6)) {
        let r = fewshot_report(&values).unwrap();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((r.mean - mean).abs() < 1e-9);
        prop_assert!((r.std - var.sqrt()).abs() < 1e-9);
    }
}

#[test]
fn oversized_fewshot_request_fails() {
    let ds = gen_task(TaskKind::Parity, 16, 5, 10, 1).unwrap();
    assert!(fewshot_sample(&ds, &FewShotSpec::new(11, 3, 0), 0).is_err());
}

#[test]
fn jsonl_round_trip_preserves_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    for kind in TaskKind::ALL {
        let ds = gen_task(kind, 16, 7, 30, 4).unwrap();
        save_jsonl(&ds, &path).unwrap();
        let schema = DatasetSchema { vocab_size: 16, num_classes: kind.num_classes() };
        let back = load_jsonl(&path, &schema).unwrap();
        assert_eq!(back.examples, ds.examples);
    }
}

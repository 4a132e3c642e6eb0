// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashSet;

use arithlens::dataset::{Dataset, DatasetSpec, Operator, SizeClass};
use Operator::{Add, Sub};

use super::gpt2_tokenizer;

/// Independent revalidation: prompt layout, single-token numbers and
/// left-to-right arithmetic, recomputed without the generator's helpers.
pub fn revalidate(ds: &Dataset) {
    let tok = gpt2_tokenizer();
    let bound = match ds.spec.size_class {
        SizeClass::Small => 99i64,
        SizeClass::Large => 520i64,
    };
    let mut seen = HashSet::new();
    assert_eq!(ds.queries.len(), ds.spec.count);
    for (i, q) in ds.queries.iter().enumerate() {
        assert_eq!(q.id, i);
        assert_eq!(q.operands.len(), ds.spec.n_operands);
        assert_eq!(q.operators, ds.spec.operators);
        assert!(
            seen.insert((q.operands.clone(), q.operators.clone())),
            "duplicate {q:?}"
        );

        let mut acc = q.operands[0] as i64;
        let mut text = format!("Please calculate {}", q.operands[0]);
        for (op, &x) in q.operators.iter().zip(&q.operands[1..]) {
            acc = if *op == Add {
                acc + x as i64
            } else {
                acc - x as i64
            };
            text += &format!(" {} {}", if *op == Add { '+' } else { '-' }, x);
        }
        text += " =";
        assert_eq!(q.prompt, text);
        assert_eq!(acc, q.gold_result as i64);
        assert!((0..=bound).contains(&acc));
        assert!(q.operands.iter().all(|&x| x as i64 <= bound));

        let ids = tok.encode(&q.prompt).unwrap();
        assert_eq!(ids.len(), 2 + 2 * q.operands.len(), "{}", q.prompt);
        for (j, &x) in q.operands.iter().enumerate() {
            assert_eq!(tok.decode(&[ids[2 + 2 * j]]).unwrap(), format!(" {x}"));
        }
        let gold = tok.encode(&format!(" {}", q.gold_result)).unwrap();
        assert_eq!(gold, vec![q.gold_token]);
    }
}

pub fn ten_thousand_specs() -> Vec<DatasetSpec> {
    let mut specs = Vec::new();
    for (i, op) in [Add, Sub].into_iter().enumerate() {
        specs.push(DatasetSpec::new(
            vec![op],
            SizeClass::Small,
            2000,
            100 + i as u64,
        ));
        specs.push(DatasetSpec::new(
            vec![op],
            SizeClass::Large,
            2000,
            200 + i as u64,
        ));
    }
    for (i, ops) in [[Add, Add], [Add, Sub], [Sub, Add], [Sub, Sub]]
        .into_iter()
        .enumerate()
    {
        specs.push(DatasetSpec::new(
            ops.to_vec(),
            SizeClass::Large,
            500,
            300 + i as u64,
        ));
    }
    specs
}

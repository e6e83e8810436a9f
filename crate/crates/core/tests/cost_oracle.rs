//! Exhaustive check of the analytic cost model against an op-counting
//! simulator that walks every loop of the forward pass.

mod common;

use adavit::cost::{policy_flops, static_flops};
use adavit::policy::{HeadSelectionMode, Policy};
use common::{micro, policy_from_bits, simulate};

#[test]
fn exhaustive_patterns_match_simulator() {
    let c = micro();
    let gates = c.num_blocks * (c.num_patches() + c.num_heads + 2);
    assert_eq!(gates, 16);
    for bits in 0..1u32 << gates {
        let p = policy_from_bits(&c, bits);
        let mut totals = [0u64; 2];
        for (i, mode) in [HeadSelectionMode::Partial, HeadSelectionMode::Full].into_iter().enumerate() {
            let report = policy_flops(&c, &p, mode).unwrap();
            assert_eq!(report.total, simulate(&c, &p, mode), "pattern {bits:#06x} {mode:?}");
            let parts: u64 = report.blocks.iter().map(|b| b.total()).sum();
            assert_eq!(report.total, report.embed + report.classifier + parts);
            totals[i] = report.total;
        }
        // A closed head only matters inside an MSA sublayer that runs.
        let head_off_in_running_msa = p
            .blocks
            .iter()
            .any(|b| b.msa && b.heads.iter().any(|&h| !h));
        if head_off_in_running_msa {
            assert!(totals[0] > totals[1], "pattern {bits:#06x}");
        } else {
            assert_eq!(totals[0], totals[1], "pattern {bits:#06x}");
        }
    }
}

#[test]
fn dropping_a_gate_never_increases_cost() {
    let c = micro();
    for mode in [HeadSelectionMode::Partial, HeadSelectionMode::Full] {
        let totals: Vec<u64> = (0..1u32 << 16)
            .map(|bits| policy_flops(&c, &policy_from_bits(&c, bits), mode).unwrap().total)
            .collect();
        for bits in 0..1u32 << 16 {
            for g in 0..16 {
                if bits >> g & 1 == 1 {
                    assert!(totals[(bits & !(1 << g)) as usize] <= totals[bits as usize]);
                }
            }
        }
    }
}

#[test]
fn open_policy_is_static_plus_decision() {
    let c = micro();
    let open = policy_flops(&c, &Policy::open(&c), HeadSelectionMode::Full).unwrap();
    let decision: u64 = open.blocks.iter().map(|b| b.decision_net).sum();
    assert_eq!(open.total, static_flops(&c).total + decision);
    assert_eq!(simulate(&c, &Policy::open(&c), HeadSelectionMode::Full), open.total);
}

use std::collections::{BTreeSet, HashMap};

use eraser_core::oracle::{Oracle, OracleConfig};
use eraser_core::scheduler::{CertificationMode, Request, Variant, VariantConfig};
use eraser_core::simulator::{
    mean_wait, replay_privacy_check, run, run_with, RunOutput, SimParams, Verdict,
};
use eraser_core::workload::{generate, WorkloadSpec};

fn workload(seed: u64) -> Vec<Request> {
    generate(&WorkloadSpec::uniform(100, 900, 1000.0, 10, seed)).unwrap()
}

fn oracle_cfg(seed: u64) -> OracleConfig {
    OracleConfig::synthetic(10, 10, 0.9, seed)
}

fn simulate(reqs: &[Request], cfg: &VariantConfig, seed: u64) -> RunOutput {
    run(reqs, cfg, &oracle_cfg(seed), &SimParams::new(10.0, 1000.0)).unwrap()
}

#[test]
fn conservation_and_time_order() {
    for seed in 1..=3 {
        let reqs = workload(seed);
        let inference: BTreeSet<u64> = reqs.iter().filter(|r| r.is_inference()).map(|r| r.id).collect();
        let unlearning: HashMap<u64, f64> = reqs
            .iter()
            .filter(|r| !r.is_inference())
            .map(|r| (r.id, r.arrival))
            .collect();
        for v in Variant::ALL {
            let out = simulate(&reqs, &VariantConfig::new(v), seed);
            let answered: Vec<u64> = out.log.requests.iter().map(|r| r.request_id).collect();
            assert_eq!(answered.len(), inference.len(), "{v}");
            assert_eq!(answered.iter().copied().collect::<BTreeSet<_>>(), inference, "{v}");

            let mut cleared: Vec<u64> = out.log.jobs.iter().flat_map(|j| j.covers.clone()).collect();
            cleared.sort();
            let mut expected: Vec<u64> = unlearning.keys().copied().collect();
            expected.sort();
            assert_eq!(cleared, expected, "{v}");

            for r in &out.log.requests {
                assert!(r.response >= r.arrival, "{v}");
                assert!(r.response_event >= r.arrival_event, "{v}");
            }
            for j in &out.log.jobs {
                assert!(j.completion >= j.start);
                for id in &j.covers {
                    assert!(j.start >= unlearning[id], "{v}: job {} starts before request {id}", j.job);
                }
            }
        }
    }
}

#[test]
fn awt_recomputes_exactly() {
    let reqs = workload(4);
    for v in Variant::ALL {
        let out = simulate(&reqs, &VariantConfig::new(v), 4);
        assert_eq!(mean_wait(&out.log.requests).to_bits(), out.metrics.awt.to_bits(), "{v}");
        let waits: Vec<f64> = out.log.requests.iter().map(|r| r.wait()).collect();
        let direct = waits.iter().sum::<f64>() / waits.len() as f64;
        assert_eq!(direct.to_bits(), out.metrics.awt.to_bits(), "{v}");
        assert!(out.metrics.awt >= 0.0);
    }
}

#[test]
fn identical_inputs_identical_logs() {
    let reqs = workload(9);
    for v in Variant::ALL {
        let a = simulate(&reqs, &VariantConfig::new(v), 9);
        let b = simulate(&reqs, &VariantConfig::new(v), 9);
        assert_eq!(a, b, "{v}");
    }
}

#[test]
fn parallel_capacity_is_respected() {
    let reqs = workload(2);
    for v in Variant::ALL {
        let out = simulate(&reqs, &VariantConfig::new(v).with_capacity(3), 2);
        // completions at the same instant free their slot before a start
        let mut edges: Vec<(f64, i32)> = out
            .log
            .jobs
            .iter()
            .flat_map(|j| [(j.start, 1), (j.completion, -1)])
            .collect();
        edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut running = 0;
        for (_, d) in edges {
            running += d;
            assert!(running <= 3, "{v}");
        }
    }
}

#[test]
fn nor_accounting_and_twins() {
    for seed in 1..=4 {
        let reqs = workload(seed);
        let nor: HashMap<Variant, u64> = Variant::ALL
            .iter()
            .map(|&v| (v, simulate(&reqs, &VariantConfig::new(v), seed).metrics.nor))
            .collect();
        assert_eq!(nor[&Variant::Sisa], 100);
        assert_eq!(nor[&Variant::Dimp], 100);
        for v in Variant::ALL {
            assert!(nor[&v] <= 100);
            if let Some(t) = v.twin() {
                assert_eq!(nor[&v], nor[&t], "{v} vs {t}");
            }
        }
    }
}

#[test]
fn uncertified_answers_only_from_respond_variants() {
    let reqs = workload(6);
    for v in Variant::ALL {
        let out = simulate(&reqs, &VariantConfig::new(v), 6);
        let n = out.log.requests.iter().filter(|r| r.verdict == Verdict::Uncertified).count();
        if matches!(v, Variant::Sttu | Variant::Dttu) {
            assert!(n > 0, "{v}");
            // theta bounds the answered fraction up to one per window
            assert!(n as f64 <= 0.05 * 900.0 + out.metrics.updates as f64, "{v}: {n}");
        } else {
            assert_eq!(n, 0, "{v}");
        }
    }
}

#[test]
fn certified_answers_survive_replay() {
    for seed in 1..=3 {
        let reqs = workload(seed);
        let oracle = Oracle::synthetic(oracle_cfg(seed)).unwrap();
        for v in Variant::ALL {
            let out = run_with(&reqs, &VariantConfig::new(v), &oracle, &SimParams::new(10.0, 1000.0)).unwrap();
            let rep = replay_privacy_check(&out.log, &reqs, &oracle).unwrap();
            assert_eq!(rep.violations(), 0, "{v} seed {seed}: {rep:?}");
            if matches!(v, Variant::Sttu | Variant::Dttu) {
                assert!(rep.uncertified_skipped > 0);
                assert!(rep.certified_checked > 0);
            }
        }
    }
}

#[test]
fn skipping_certification_leaks() {
    // few shards, weak models and frequent unlearning
    let reqs = generate(&WorkloadSpec::uniform(300, 700, 1000.0, 3, 8)).unwrap();
    let oracle = Oracle::synthetic(OracleConfig::synthetic(2, 3, 0.6, 8)).unwrap();
    let mut cfg = VariantConfig::new(Variant::Dimp);
    cfg.certification = CertificationMode::Disabled;
    let out = run_with(&reqs, &cfg, &oracle, &SimParams::new(10.0, 1000.0)).unwrap();
    assert!(out.log.requests.iter().all(|r| r.verdict == Verdict::Unchecked));
    let rep = replay_privacy_check(&out.log, &reqs, &oracle).unwrap();
    assert!(rep.unchecked_violations > 0, "{rep:?}");

    let out = run_with(&reqs, &VariantConfig::new(Variant::Dimp), &oracle, &SimParams::new(10.0, 1000.0)).unwrap();
    assert_eq!(replay_privacy_check(&out.log, &reqs, &oracle).unwrap().violations(), 0);
}

#[test]
fn unlearning_only_and_inference_only_streams() {
    let only_u: Vec<Request> = workload(1).into_iter().filter(|r| !r.is_inference()).collect();
    let only_i: Vec<Request> = workload(1).into_iter().filter(|r| r.is_inference()).collect();
    for v in Variant::ALL {
        let out = simulate(&only_u, &VariantConfig::new(v), 1);
        assert!(out.log.requests.is_empty());
        assert_eq!(out.log.jobs.iter().map(|j| j.covers.len()).sum::<usize>(), 100);
        let out = simulate(&only_i, &VariantConfig::new(v), 1);
        assert_eq!(out.metrics.nor, 0);
        assert_eq!(out.metrics.awt, 0.0);
        assert!(out.log.requests.iter().all(|r| matches!(
            r.verdict,
            Verdict::Certified | Verdict::Unchecked
        )));
    }
}

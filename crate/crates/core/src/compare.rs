//! Baseline versus transformed: modeled step time, memory and numerics.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::Result;
use crate::ir::Module;
use crate::profitability::{decide, horizon, CostModel, ProfitOptions, ShardingDecision};
use crate::simulator::cost::cost_with_update;
use crate::simulator::inputs::random_inputs;
use crate::simulator::{peak_memory, MemoryReport, RunOptions, RunResult, Value};
use crate::transform::{apply, batch_collectives, demote_allgather_precision, memory_plan, run_steps, run_transformed};

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub cost_model: CostModel,
    pub profit: ProfitOptions,
    /// Batch independent all-reduces in both programs.
    pub batch: bool,
    /// Gather in reduced precision where every consumer converts anyway.
    pub demote: bool,
    /// Simulate this many program runs of both sides and diff the results.
    pub simulate_runs: Option<usize>,
    pub seed: u64,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            cost_model: CostModel::default(),
            profit: ProfitOptions::default(),
            batch: true,
            demote: true,
            simulate_runs: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepCost {
    pub step_time: f64,
    pub compute_time: f64,
    pub collective_time: f64,
    /// Weight-update compute per step, excluding the gradient all-reduce.
    pub update_time: f64,
    pub update_share: f64,
    pub collective_rounds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Numerics {
    pub runs: usize,
    pub bitwise_equal: bool,
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub clusters: usize,
    pub sharded: usize,
    pub baseline: StepCost,
    pub transformed: StepCost,
    pub speedup: f64,
    pub baseline_memory: MemoryReport,
    pub transformed_memory: MemoryReport,
    /// Fraction of baseline peak memory saved.
    pub memory_saving: f64,
    pub numerics: Option<Numerics>,
}

fn update_region(decisions: &[ShardingDecision]) -> HashSet<String> {
    decisions
        .iter()
        .flat_map(|d| d.cluster.members.iter().filter(|n| **n != d.cluster.anchor).cloned())
        .collect()
}

fn step_cost(m: &Module, extra: &[&Module], cm: &CostModel, update: &HashSet<String>) -> StepCost {
    let r = cost_with_update(m, cm, update);
    let steps = r.steps as f64;
    let amortize = horizon(m) as f64;
    let (mut compute, mut coll, mut rounds) =
        (r.compute_time / steps, r.collective_time / steps, r.collective_rounds_per_run() / steps);
    for e in extra {
        let x = cost_with_update(e, cm, &HashSet::new());
        compute += x.compute_time / amortize;
        coll += x.collective_time / amortize;
        rounds += x.collective_rounds_per_run() / amortize;
    }
    let step_time = compute + coll;
    let update_time = r.update_time / steps;
    StepCost {
        step_time,
        compute_time: compute,
        collective_time: coll,
        update_time,
        update_share: if step_time > 0.0 { update_time / step_time } else { 0.0 },
        collective_rounds: rounds,
    }
}

/// Largest absolute difference, and largest difference relative to the
/// magnitude of its tensor (max |a - b| / max |a|, per output tensor).
/// Any difference in an integer or predicate tensor is infinitely relative.
pub fn max_diff(a: &RunResult, b: &RunResult) -> (f64, f64) {
    let mut pairs: Vec<(&Value, &Value)> = a.outputs.iter().zip(&b.outputs).collect();
    for (x, y) in a.outfeeds.iter().zip(&b.outfeeds) {
        pairs.extend(x.iter().zip(y).map(|(p, q)| (&p.1, &q.1)));
    }
    let (mut abs, mut rel) = (0.0f64, 0.0f64);
    for (x, y) in pairs {
        for (s, t) in x.leaves().into_iter().zip(y.leaves()) {
            let mut d = 0.0f64;
            let mut scale = 0.0f64;
            for (&p, &q) in s.data.iter().zip(t.data.iter()) {
                scale = scale.max(p.abs()).max(q.abs());
                if p.to_bits() == q.to_bits() {
                    continue;
                }
                let e = (p - q).abs();
                if e.is_nan() {
                    return (f64::NAN, f64::NAN);
                }
                d = d.max(e);
            }
            abs = abs.max(d);
            if d > 0.0 && !s.shape.etype.is_float() {
                rel = f64::INFINITY;
            } else if d > 0.0 {
                rel = rel.max(d / scale.max(f64::MIN_POSITIVE));
            }
        }
    }
    (abs, rel)
}

pub fn compare(m: &Module, opts: &CompareOptions) -> Result<Comparison> {
    let cm = &opts.cost_model;
    let decisions = decide(m, cm, &opts.profit);
    let update = update_region(&decisions);

    let base = if opts.batch { batch_collectives(m) } else { m.clone() };
    let baseline = step_cost(&base, &[], cm, &update);

    let mut t = apply(m, &decisions)?;
    let transformed_memory = memory_plan(&t);
    if opts.demote {
        t.main = demote_allgather_precision(&t.main);
    }
    if opts.batch {
        t.main = batch_collectives(&t.main);
    }
    // rewritten members keep their names
    let transformed = step_cost(&t.main, &[&t.shard_program, &t.unshard_program], cm, &update);

    let baseline_memory = peak_memory(m);
    let memory_saving = if baseline_memory.peak > 0 {
        1.0 - transformed_memory.peak as f64 / baseline_memory.peak as f64
    } else {
        0.0
    };

    let numerics = match opts.simulate_runs {
        Some(k) => {
            let ins = random_inputs(m, opts.seed);
            let o = RunOptions::default();
            let a = run_steps(m, &ins, k, &o)?;
            let b = run_transformed(&t, &ins, k, &o)?;
            let (max_abs_diff, max_rel_diff) = max_diff(&a, &b);
            Some(Numerics { runs: k, bitwise_equal: a.bitwise_eq(&b), max_abs_diff, max_rel_diff })
        }
        None => None,
    };

    Ok(Comparison {
        clusters: decisions.len(),
        sharded: decisions.iter().filter(|d| d.shard).count(),
        speedup: if transformed.step_time > 0.0 { baseline.step_time / transformed.step_time } else { 1.0 },
        baseline,
        transformed,
        baseline_memory,
        transformed_memory,
        memory_saving,
        numerics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{generate, GenConfig, Model, Optimizer, WeightSpec};

    fn tiny(n: usize) -> Module {
        let mut cfg = GenConfig::new(Model::Mlp, n);
        cfg.optimizer = Optimizer::Sgd;
        cfg.loop_steps = Some(2);
        cfg.weights = Some(vec![WeightSpec { shape: vec![8, 128], rows: 8 }]);
        generate(&cfg).unwrap()
    }

    #[test]
    fn tiny_sgd_is_about_even() {
        let opts = CompareOptions { simulate_runs: Some(2), ..Default::default() };
        let c = compare(&tiny(2), &opts).unwrap();
        assert!((c.speedup - 1.0).abs() < 0.05, "{}", c.speedup);
        let n = c.numerics.unwrap();
        assert!(n.bitwise_equal);
        assert_eq!((n.max_abs_diff, n.max_rel_diff), (0.0, 0.0));
    }

    #[test]
    fn single_replica_is_identity() {
        let c = compare(&tiny(1), &CompareOptions { simulate_runs: Some(1), ..Default::default() }).unwrap();
        assert_eq!(c.sharded, 0);
        assert_eq!(c.speedup, 1.0);
        assert_eq!(c.memory_saving, 0.0);
        assert!(c.numerics.unwrap().bitwise_equal);
    }

    #[test]
    fn adam_loop_saves_time_and_memory() {
        let mut cfg = GenConfig::new(Model::Mlp, 8);
        cfg.weights = Some(vec![WeightSpec { shape: vec![512, 1024], rows: 8 }]);
        let c = compare(&generate(&cfg).unwrap(), &CompareOptions::default()).unwrap();
        assert_eq!(c.sharded, 1);
        assert!(c.speedup > 1.0);
        assert!(c.memory_saving > 0.0);
        assert!(c.transformed.update_time < c.baseline.update_time / 7.0);
    }

    #[test]
    fn max_diff_reports_relative_error() {
        use crate::ir::{ElementType, Shape};
        use crate::simulator::Tensor;
        let t = |v: Vec<f64>| Value::Array(Tensor::new(Shape::new(ElementType::F32, vec![2]), v));
        let r = |v| RunResult { outputs: vec![t(v)], outfeeds: vec![vec![]], ..Default::default() };
        assert_eq!(max_diff(&r(vec![2.0, 4.0]), &r(vec![2.5, 4.0])), (0.5, 0.125));
        // near-zero elements are measured against the tensor's scale
        assert_eq!(max_diff(&r(vec![1e-9, 8.0]), &r(vec![-1e-9, 8.0])), (2e-9, 2e-9 / 8.0));
        assert_eq!(max_diff(&r(vec![2.0, 0.0]), &r(vec![2.0, 0.0])), (0.0, 0.0));
        let i = |v: Vec<f64>| RunResult {
            outputs: vec![Value::Array(Tensor::new(Shape::new(ElementType::S32, vec![2]), v))],
            ..Default::default()
        };
        assert_eq!(max_diff(&i(vec![1e6, 1.0]), &i(vec![1e6, 2.0])), (1.0, f64::INFINITY));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn transformed_peak_never_exceeds_baseline(cfg in crate::gen::strategies::arb_config(), force in proptest::bool::ANY) {
            let m = generate(&cfg).unwrap();
            let opts = CompareOptions {
                profit: ProfitOptions { force: force.then_some(true), ..Default::default() },
                ..Default::default()
            };
            let c = compare(&m, &opts).unwrap();
            proptest::prop_assert!(c.transformed_memory.peak <= c.baseline_memory.peak);
        }
    }
}

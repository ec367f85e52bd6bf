use super::*;
use crate::ir::{parse_module, print_module, ElementType, FusionKind, Instruction, ReplicaGroups};
use crate::profitability::{decide, CostModel, ProfitOptions};
use crate::simulator::inputs::random_inputs;
use crate::simulator::{run, RunOptions};

/// Loop of `steps` ADAM-like updates on one weight, optionally outfeeding
/// the weight every other step.
fn adam_loop(n: usize, topo: &str, steps: usize, outfeed: bool) -> Module {
    let t = "f32[8,128]";
    let st = format!("(s32[], {t}, {t}, {t}, {t})");
    let (branches, cond) = if outfeed {
        (
            format!(
                "computation emit ({t}) -> () {{
  %ep = {t} parameter(0)
  %eo = () outfeed(%ep)
  return (%eo)
}}
computation skip ({t}) -> () {{
  %sp = {t} parameter(0)
  %se = () tuple()
  return (%se)
}}
"
            ),
            "  %two = s32[] constant(2)
  %r = s32[] rem(%bi, %two)
  %zero = s32[] constant(0)
  %q = pred[] compare(%r, %zero), dir=eq
  %sel = () conditional(%q, %nw, %nw), branches={emit, skip}
"
            .to_string(),
        )
    } else {
        (String::new(), String::new())
    };
    parse_module(&format!(
        "module N={n} topology={topo} {{
{branches}computation c ({st}) -> pred[] {{
  %cp = {st} parameter(0)
  %ci = s32[] get-tuple-element(%cp), index=0
  %lim = s32[] constant({steps})
  %lt = pred[] compare(%ci, %lim), dir=lt
  return (%lt)
}}
computation b ({st}) -> {st} {{
  %bp = {st} parameter(0)
  %bi = s32[] get-tuple-element(%bp), index=0
  %w = {t} get-tuple-element(%bp), index=1
  %m = {t} get-tuple-element(%bp), index=2
  %v = {t} get-tuple-element(%bp), index=3
  %x = {t} get-tuple-element(%bp), index=4
  %gl = {t} mul(%x, %w)
  %g = {t} all-reduce(%gl), op=add
  %b1 = f32[] constant(0.9)
  %b1b = {t} broadcast(%b1), dims={{}}
  %t1 = {t} mul(%b1b, %m)
  %nm = {t} add(%t1, %g)
  %gg = {t} mul(%g, %g)
  %t3 = {t} mul(%b1b, %v)
  %nv = {t} add(%t3, %gg)
  %eps = f32[] constant(0.001)
  %epsb = {t} broadcast(%eps), dims={{}}
  %nve = {t} add(%nv, %epsb)
  %sq = {t} sqrt(%nve)
  %r0 = {t} div(%nm, %sq)
  %nw = {t} sub(%w, %r0)
{cond}  %one = s32[] constant(1)
  %ni = s32[] add(%bi, %one)
  %nt = {st} tuple(%ni, %nw, %nm, %nv, %x)
  return (%nt)
}}
entry computation e ({t}, {t}, {t}, {t}) -> {st} {{
  %w0 = {t} parameter(0) {{replica_equal}}
  %m0 = {t} parameter(1) {{replica_equal}}
  %v0 = {t} parameter(2) {{replica_equal}}
  %x0 = {t} parameter(3)
  %i0 = s32[] constant(0)
  %init = {st} tuple(%i0, %w0, %m0, %v0, %x0)
  %loop = {st} while(%init), condition=c, body=b
  return (%loop)
}}
}}"
    ))
    .unwrap()
}

fn forced(m: &Module) -> Vec<ShardingDecision> {
    decide(m, &CostModel::default(), &ProfitOptions { force: Some(true), ..ProfitOptions::default() })
}

fn count(c: &Computation, f: impl Fn(&Op) -> bool) -> usize {
    c.instructions.iter().filter(|i| f(&i.op)).count()
}

fn is_rs(op: &Op) -> bool {
    matches!(op, Op::Fusion(FusionKind::ReduceScatter { .. }))
}

fn is_ag(op: &Op) -> bool {
    matches!(op, Op::Fusion(FusionKind::Unshard { .. }))
}

fn equivalent(m: &Module, r: &TransformResult, k: usize, seed: u64) {
    let ins = random_inputs(m, seed);
    let opts = RunOptions::default();
    let base = run_steps(m, &ins, k, &opts).unwrap();
    let got = run_transformed(r, &ins, k, &opts).unwrap();
    assert!(base.bitwise_eq(&got), "transformed run differs\n{}", print_module(&r.main));
}

#[test]
fn loop_update_keeps_state_sharded() {
    let m = adam_loop(4, "ring", 3, false);
    let r = apply(&m, &forced(&m)).unwrap();
    let body = r.main.computation("b").unwrap();
    assert_eq!(count(body, is_rs), 1);
    assert_eq!(count(body, |o| matches!(o, Op::AllReduce { .. })), 0);
    // only the weight is gathered in the loop, right before the gradient
    assert_eq!(count(body, is_ag), 1);
    let ag = body.instructions.iter().position(|i| is_ag(&i.op)).unwrap();
    assert_eq!(body.instructions[ag + 1].name, "gl");
    assert_eq!(count(r.main.entry_computation(), is_ag), 0);
    assert_eq!(count(r.unshard_program.entry_computation(), is_ag), 3);
    assert_eq!(count(r.shard_program.entry_computation(), |o| matches!(o, Op::Fusion(FusionKind::Shard { .. }))), 3);

    let roles: Vec<Role> = r.manifest.variables.iter().map(|v| v.role).collect();
    assert_eq!(roles, [Role::Replicated, Role::Weight, Role::Auxiliary, Role::Auxiliary, Role::Replicated]);
    assert_eq!(r.manifest.variables[1].parameter, Some(0));
    equivalent(&m, &r, 1, 3);
}

#[test]
fn loop_equivalence_across_replica_counts() {
    for (n, topo) in [(2, "ring"), (8, "ring"), (10, "ring"), (16, "mesh 4x4")] {
        let m = adam_loop(n, topo, 2, false);
        let r = apply(&m, &forced(&m)).unwrap();
        equivalent(&m, &r, 1, n as u64);
    }
}

#[test]
fn outfeed_in_infrequent_branch_gathers_inside_it() {
    let m = adam_loop(4, "ring", 4, true);
    let ds = decide(&m, &CostModel::default(), &ProfitOptions::default());
    let placements: Vec<Placement> = ds[0].cluster.frontier.iter().map(|f| f.placement).collect();
    assert!(placements.contains(&Placement::InsideInfrequentBranch), "{placements:?}");
    let r = apply(&m, &forced(&m)).unwrap();
    // the branch has a single caller, so it is rewritten in place
    assert_eq!(count(r.main.computation("emit").unwrap(), is_ag), 1);
    assert_eq!(count(r.main.computation("b").unwrap(), is_ag), 1);
    equivalent(&m, &r, 1, 5);
}

#[test]
fn no_decisions_is_identity() {
    let m = adam_loop(4, "ring", 2, false);
    let mut ds = forced(&m);
    for d in &mut ds {
        d.shard = false;
    }
    let r = apply(&m, &ds).unwrap();
    assert_eq!(print_module(&r.main), print_module(&m));
    equivalent(&m, &r, 1, 1);
}

#[test]
fn stale_decision_is_rejected() {
    let m = adam_loop(4, "ring", 2, false);
    let mut ds = forced(&m);
    ds[0].cluster.anchor = "gone".into();
    assert!(matches!(apply(&m, &ds), Err(Error::Transform(_))));
    let mut ds = forced(&m);
    ds[0].cluster.members.insert("nope".into());
    assert!(matches!(apply(&m, &ds), Err(Error::Transform(_))));
}

const STEP: &str = "module N=8 topology=ring {
entry computation e (f32[64,128], f32[64,128], f32[64,128], f32[64,128]) -> (f32[64,128], f32[64,128], f32[64,128]) {
  %w = f32[64,128] parameter(0) {replica_equal}
  %m = f32[64,128] parameter(1) {replica_equal}
  %v = f32[64,128] parameter(2) {replica_equal}
  %x = f32[64,128] parameter(3)
  %gl = f32[64,128] mul(%x, %w)
  %g = f32[64,128] all-reduce(%gl), op=add
  %nm = f32[64,128] add(%m, %g)
  %gg = f32[64,128] mul(%g, %g)
  %nv = f32[64,128] add(%v, %gg)
  %r = f32[64,128] mul(%nm, %nv)
  %nw = f32[64,128] sub(%w, %r)
  %t = (f32[64,128], f32[64,128], f32[64,128]) tuple(%nw, %nm, %nv)
  return (%t)
}
}";

#[test]
fn step_program_split_and_memory_formula() {
    let m = parse_module(STEP).unwrap();
    let r = apply(&m, &forced(&m)).unwrap();
    let e = r.main.entry_computation();
    assert_eq!(count(e, is_rs), 1);
    assert_eq!(count(e, is_ag), 1);
    equivalent(&m, &r, 3, 9);

    let base = peak_memory(&m);
    let (w, v, p) = (base.weight_bytes, base.aux_bytes, base.transient_peak);
    assert_eq!((w, v), (32768, 65536));
    assert_eq!(base.peak, w + v + p);
    let t = memory_plan(&r);
    assert_eq!(t.peak, (w + v / 8 + p).max(w + v));
    assert_eq!((t.weight_bytes, t.aux_bytes, t.transient_peak), (w, v / 8, p));
}

#[test]
fn partial_sharding_on_mesh_matches() {
    let m = adam_loop(16, "mesh 4x4", 2, false);
    let rows = m.topology.rows();
    let r = apply_partial_sharding(&m, &rows).unwrap();
    let body = r.main.computation("b").unwrap();
    let cross: Vec<&Instruction> = body.instructions.iter().filter(|i| matches!(i.op, Op::AllReduce { .. })).collect();
    assert_eq!(cross.len(), 1);
    match &cross[0].op {
        Op::AllReduce { groups, .. } => assert_eq!(groups.resolve(16), m.topology.columns().resolve(16)),
        _ => unreachable!(),
    }
    equivalent(&m, &r, 1, 11);

    let all = apply_partial_sharding(&m, &ReplicaGroups::All).unwrap();
    assert_eq!(count(all.main.computation("b").unwrap(), |o| matches!(o, Op::AllReduce { .. })), 0);
    let bad = ReplicaGroups::Groups((0..8).map(|g| vec![2 * g, 2 * g + 1]).collect());
    assert!(apply_partial_sharding(&m, &bad).is_err());
}

#[test]
fn single_row_mesh_elides_cross_group_reduce() {
    let m = adam_loop(4, "mesh 1x4", 2, false);
    let r = apply_partial_sharding(&m, &m.topology.rows()).unwrap();
    assert_eq!(count(r.main.computation("b").unwrap(), |o| matches!(o, Op::AllReduce { .. })), 0);
    equivalent(&m, &r, 1, 2);
}

#[test]
fn batching_merges_independent_reduces_only() {
    let m = parse_module(
        "module N=4 topology=mesh 2x2 {
entry computation e (f32[4], f32[4], f32[4]) -> (f32[4], f32[4], f32[4], f32[4]) {
  %a = f32[4] parameter(0)
  %b = f32[4] parameter(1)
  %c = f32[4] parameter(2)
  %ra = f32[4] all-reduce(%a), op=add, groups={{0,2},{1,3}}
  %rb = f32[4] all-reduce(%b), op=add, groups={{0,2},{1,3}}
  %rc = f32[4] all-reduce(%c), op=add, groups={{0,2},{1,3}}
  %rd = f32[4] all-reduce(%ra), op=add, groups={{0,2},{1,3}}
  %re = f32[4] all-reduce(%c), op=add
  %t = (f32[4], f32[4], f32[4], f32[4]) tuple(%rb, %rc, %rd, %re)
  return (%t)
}
}",
    )
    .unwrap();
    let out = batch_collectives(&m);
    verify(&out).unwrap();
    let e = out.entry_computation();
    let variadic: Vec<&Instruction> = e
        .instructions
        .iter()
        .filter(|i| matches!(i.op, Op::AllReduce { .. }) && i.operands.len() > 1)
        .collect();
    assert_eq!(variadic.len(), 1);
    assert_eq!(variadic[0].operands, ["a", "b", "c"]);
    assert_eq!(count(e, |o| matches!(o, Op::AllReduce { .. })), 3);
    let ins = random_inputs(&m, 4);
    let o = RunOptions::default();
    assert!(run(&m, &ins, &o).unwrap().bitwise_eq(&run(&out, &ins, &o).unwrap()));
}

const DEMOTE: &str = "module N=4 topology=ring {
entry computation e (f32[2,128], f16r[8,128], f32[8,128]) -> (f32[8,8], f32[8,128]) {
  %ws = f32[2,128] parameter(0)
  %x = f16r[8,128] parameter(1)
  %y = f32[8,128] parameter(2)
  %wf = f32[8,128] fusion(%ws), kind=unshard, spec=\"[8,128] slice0/4\"
  %wb = f16r[8,128] convert(%wf)
  %d = f16r[8,8] dot(%x, %wb), lhs_contract=1, rhs_contract=1
  %df = f32[8,8] convert(%d)
  %t = (f32[8,8], f32[8,128]) tuple(%df, %y)
  return (%t)
}
}";

fn demote_module(extra_use: bool) -> Module {
    let mut m = parse_module(DEMOTE).unwrap();
    if extra_use {
        let e = m.entry_computation_mut();
        e.get_mut("t").unwrap().operands[1] = "wf".into();
    }
    m
}

#[test]
fn demotion_halves_gathered_bytes_and_keeps_outputs() {
    let m = demote_module(false);
    verify(&m).unwrap();
    let d = demote_allgather_precision(&m);
    verify(&d).unwrap();
    let e = d.entry_computation();
    let ag = e.instructions.iter().find(|i| is_ag(&i.op)).unwrap();
    assert_eq!(ag.ty.as_array().unwrap().etype, ElementType::F16R);
    let tiling = m.tiling;
    let before = m.entry_computation().get("wf").unwrap().ty.physical_bytes(tiling);
    assert_eq!(ag.ty.physical_bytes(tiling) * 2, before);
    let ins = random_inputs(&m, 8);
    let o = RunOptions::default();
    assert!(run(&m, &ins, &o).unwrap().bitwise_eq(&run(&d, &ins, &o).unwrap()));
}

#[test]
fn demotion_skips_mixed_consumers() {
    let m = demote_module(true);
    verify(&m).unwrap();
    assert_eq!(print_module(&demote_allgather_precision(&m)), print_module(&m));
}

#[test]
fn loop_outputs_feed_back_through_the_initial_tuple() {
    let m = adam_loop(4, "ring", 2, false);
    assert_eq!(feedback_slots(&m), [None, Some(0), Some(1), Some(2), Some(3)]);
    let step = parse_module(STEP).unwrap();
    assert_eq!(feedback_slots(&step), [Some(0), Some(1), Some(2)]);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
    #[test]
    fn transformed_programs_verify_and_save_memory(cfg in crate::gen::strategies::arb_config(), seed in 0u64..100) {
        let m = crate::gen::generate(&cfg).unwrap();
        let r = apply(&m, &forced(&m)).unwrap();
        for p in [&r.main, &r.shard_program, &r.unshard_program] {
            verify(p).unwrap();
        }
        proptest::prop_assert!(memory_plan(&r).peak <= peak_memory(&m).peak);

        // reduced-precision gathers never change what f32 consumers see
        let mut d = r.clone();
        d.main = demote_allgather_precision(&r.main);
        verify(&d.main).unwrap();
        let ins = random_inputs(&m, seed);
        let o = RunOptions::default();
        proptest::prop_assert!(run_transformed(&r, &ins, 1, &o).unwrap().bitwise_eq(&run_transformed(&d, &ins, 1, &o).unwrap()));
    }
}

//! Synthetic data-parallel training modules.
//!
//! Every weight gets a forward matmul against per-replica activations, an
//! outer-product gradient, a gradient all-reduce and an optimizer update.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::{
    BinaryOp, Builder, CompareDir, Computation, ElementType, Module, Op, ReduceKind, ReplicaGroups, Shape,
    Topology, Type,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Model {
    Mlp,
    TransformerLike,
    ResnetLike,
    NcfLike,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::Mlp, Model::TransformerLike, Model::ResnetLike, Model::NcfLike];

    pub fn name(self) -> &'static str {
        match self {
            Model::Mlp => "mlp",
            Model::TransformerLike => "transformer-like",
            Model::ResnetLike => "resnet-like",
            Model::NcfLike => "ncf-like",
        }
    }

    pub fn default_optimizer(self) -> Optimizer {
        match self {
            Model::Mlp | Model::TransformerLike | Model::NcfLike => Optimizer::Adam,
            Model::ResnetLike => Optimizer::Lars,
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown model `{s}` (mlp, transformer-like, resnet-like, ncf-like)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
    Lars,
}

impl Optimizer {
    pub const ALL: [Optimizer; 3] = [Optimizer::Sgd, Optimizer::Adam, Optimizer::Lars];

    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
            Optimizer::Lars => "lars",
        }
    }

    /// Auxiliary tensors per weight.
    pub fn aux_count(self) -> usize {
        match self {
            Optimizer::Sgd => 0,
            Optimizer::Adam => 2,
            Optimizer::Lars => 1,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Optimizer::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown optimizer `{s}` (sgd, adam, lars)")))
    }
}

/// A weight and the number of activation rows multiplied against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WeightSpec {
    pub shape: Vec<usize>,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub model: Model,
    pub replicas: usize,
    pub topology: Topology,
    pub optimizer: Optimizer,
    /// Training loop trip count; `None` emits a single-step program.
    pub loop_steps: Option<u64>,
    /// Examples per replica.
    pub batch: usize,
    /// Model-specific depth: dense layers, transformer layers or bottleneck
    /// blocks. `None` uses the model default.
    pub layers: Option<usize>,
    /// Forward and backward matmuls in bf16.
    pub bf16_forward: bool,
    /// Outfeed the first weight every k steps (loops only).
    pub outfeed_every: Option<u64>,
    /// Replaces the model's weight layout.
    pub weights: Option<Vec<WeightSpec>>,
}

impl GenConfig {
    pub fn new(model: Model, replicas: usize) -> Self {
        GenConfig {
            model,
            replicas,
            topology: Topology::Ring(replicas),
            optimizer: model.default_optimizer(),
            loop_steps: Some(10),
            batch: 1,
            layers: None,
            bf16_forward: false,
            outfeed_every: None,
            weights: None,
        }
    }

    pub fn weight_specs(&self) -> Vec<WeightSpec> {
        if let Some(w) = &self.weights {
            return w.clone();
        }
        let b = self.batch.max(1);
        let w = |shape: &[usize], rows: usize| WeightSpec { shape: shape.to_vec(), rows };
        let mut out = Vec::new();
        match self.model {
            Model::Mlp => {
                for k in 0..self.layers.unwrap_or(2) {
                    out.push(if k % 2 == 0 { w(&[256, 512], b) } else { w(&[512, 256], b) });
                }
            }
            Model::TransformerLike => {
                let (d, ffn) = (1024, 4096);
                for _ in 0..self.layers.unwrap_or(2) {
                    for _ in 0..4 {
                        out.push(w(&[d, d], b));
                    }
                    out.push(w(&[d, ffn], b));
                    out.push(w(&[ffn, d], b));
                }
            }
            Model::ResnetLike => {
                // stem, bottleneck stages (width, resolution, blocks), classifier
                out.push(w(&[7, 7, 3, 64], b * 112 * 112));
                let mut left = self.layers.unwrap_or(16);
                let mut cin = 64;
                for (c, hw, blocks) in [(64, 56, 3), (128, 28, 4), (256, 14, 6), (512, 7, 3)] {
                    for _ in 0..blocks.min(left) {
                        let rows = b * hw * hw;
                        out.push(w(&[1, 1, cin, c], rows));
                        out.push(w(&[3, 3, c, c], rows));
                        out.push(w(&[1, 1, c, 4 * c], rows));
                        cin = 4 * c;
                        left -= 1;
                    }
                }
                out.push(w(&[cin, 1000], b));
            }
            Model::NcfLike => {
                out.push(w(&[8192, 64], b));
                out.push(w(&[8192, 64], b));
                for _ in 0..self.layers.unwrap_or(1) {
                    out.push(w(&[128, 256], b));
                    out.push(w(&[256, 128], b));
                }
            }
        }
        out
    }
}

fn f32s(dims: &[usize]) -> Shape {
    Shape::new(ElementType::F32, dims.to_vec())
}

fn arr(s: &Shape) -> Type {
    Type::Array(s.clone())
}

/// The weight viewed as a matrix: all leading dims by the last one.
fn matrix(shape: &[usize]) -> (usize, usize) {
    let m = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / m.max(1), m)
}

struct Gen<'c> {
    cfg: &'c GenConfig,
    b: Builder,
}

impl Gen<'_> {
    /// Local gradient of weight `w` against activations `x`.
    fn gradient(&mut self, k: usize, ws: &WeightSpec, w: &str, x: &str) -> String {
        let (kk, mm) = matrix(&ws.shape);
        let et = if self.cfg.bf16_forward { ElementType::F16R } else { ElementType::F32 };
        let full = f32s(&ws.shape);
        let mut wv = w.to_string();
        if self.cfg.bf16_forward {
            wv = self.b.convert(&format!("w{k}.bf16"), &full.with_etype(et), &wv);
        }
        if ws.shape.len() != 2 {
            wv = self.b.reshape(&format!("w{k}.mat"), &Shape::new(et, vec![kk, mm]), &wv);
        }
        let y = self.b.dot(&format!("y{k}"), &Shape::new(et, vec![ws.rows, mm]), x, &wv, 1, 0);
        let mut g = self.b.dot(&format!("gl{k}.mat"), &Shape::new(et, vec![kk, mm]), x, &y, 0, 0);
        if self.cfg.bf16_forward {
            g = self.b.convert(&format!("gl{k}.f32"), &f32s(&[kk, mm]), &g);
        }
        if ws.shape.len() != 2 {
            g = self.b.reshape(&format!("gl{k}"), &full, &g);
        }
        g
    }

    /// Optimizer update; returns the new weight and auxiliaries.
    fn update(&mut self, k: usize, shape: &[usize], w: &str, g: &str, aux: &[String]) -> (String, Vec<String>) {
        let s = f32s(shape);
        let sc = Shape::scalar(ElementType::F32);
        let b = &mut self.b;
        match self.cfg.optimizer {
            Optimizer::Sgd => {
                let lr = b.splat(&format!("lr{k}"), &s, 0.01);
                let st = b.binary(&format!("step{k}"), BinaryOp::Mul, &s, &lr, g);
                (b.binary(&format!("nw{k}"), BinaryOp::Sub, &s, w, &st), vec![])
            }
            Optimizer::Adam => {
                let (m, v) = (&aux[0], &aux[1]);
                let b1 = b.splat(&format!("beta1.{k}"), &s, 0.9);
                let m1 = b.binary(&format!("m{k}.decay"), BinaryOp::Mul, &s, &b1, m);
                let c1 = b.splat(&format!("one_minus_beta1.{k}"), &s, 0.1);
                let g1 = b.binary(&format!("g{k}.scaled"), BinaryOp::Mul, &s, &c1, g);
                let nm = b.binary(&format!("nm{k}"), BinaryOp::Add, &s, &m1, &g1);
                let gg = b.binary(&format!("g{k}.sq"), BinaryOp::Mul, &s, g, g);
                let b2 = b.splat(&format!("beta2.{k}"), &s, 0.999);
                let v1 = b.binary(&format!("v{k}.decay"), BinaryOp::Mul, &s, &b2, v);
                let c2 = b.splat(&format!("one_minus_beta2.{k}"), &s, 0.001);
                let g2 = b.binary(&format!("g{k}.sq.scaled"), BinaryOp::Mul, &s, &c2, &gg);
                let nv = b.binary(&format!("nv{k}"), BinaryOp::Add, &s, &v1, &g2);
                let bc1 = b.splat(&format!("bias1.{k}"), &s, 10.0);
                let mh = b.binary(&format!("m{k}.hat"), BinaryOp::Mul, &s, &nm, &bc1);
                let bc2 = b.splat(&format!("bias2.{k}"), &s, 1000.0);
                let vh = b.binary(&format!("v{k}.hat"), BinaryOp::Mul, &s, &nv, &bc2);
                let sq = b.sqrt(&format!("v{k}.sqrt"), &s, &vh);
                let eps = b.splat(&format!("eps{k}"), &s, 1e-6);
                let den = b.binary(&format!("den{k}"), BinaryOp::Add, &s, &sq, &eps);
                let u = b.binary(&format!("u{k}"), BinaryOp::Div, &s, &mh, &den);
                let wd = b.splat(&format!("wd{k}"), &s, 0.01);
                let wdw = b.binary(&format!("w{k}.decay"), BinaryOp::Mul, &s, &wd, w);
                let u2 = b.binary(&format!("u{k}.decayed"), BinaryOp::Add, &s, &u, &wdw);
                let lr = b.splat(&format!("lr{k}"), &s, 0.001);
                let st = b.binary(&format!("step{k}"), BinaryOp::Mul, &s, &lr, &u2);
                (b.binary(&format!("nw{k}"), BinaryOp::Sub, &s, w, &st), vec![nm, nv])
            }
            Optimizer::Lars => {
                let m = &aux[0];
                let wsq = b.binary(&format!("w{k}.sq"), BinaryOp::Mul, &s, w, w);
                let wn2 = b.reduce_all(&format!("w{k}.norm2"), ReduceKind::Add, &s, &wsq);
                let wn = b.sqrt(&format!("w{k}.norm"), &sc, &wn2);
                let gsq = b.binary(&format!("g{k}.sq"), BinaryOp::Mul, &s, g, g);
                let gn2 = b.reduce_all(&format!("g{k}.norm2"), ReduceKind::Add, &s, &gsq);
                let gn = b.sqrt(&format!("g{k}.norm"), &sc, &gn2);
                let wdc = b.constant(&format!("wd{k}.c"), sc.clone(), 1e-4);
                let wdn = b.binary(&format!("w{k}.norm.decay"), BinaryOp::Mul, &sc, &wdc, &wn);
                let epsc = b.constant(&format!("eps{k}"), sc.clone(), 1e-9);
                let d0 = b.binary(&format!("den{k}.0"), BinaryOp::Add, &sc, &gn, &wdn);
                let den = b.binary(&format!("den{k}"), BinaryOp::Add, &sc, &d0, &epsc);
                let trust = b.binary(&format!("trust{k}"), BinaryOp::Div, &sc, &wn, &den);
                let tb = b.broadcast(&format!("trust{k}.b"), &s, &trust, vec![]);
                let wd = b.splat(&format!("wd{k}"), &s, 1e-4);
                let wdw = b.binary(&format!("w{k}.decay"), BinaryOp::Mul, &s, &wd, w);
                let u = b.binary(&format!("u{k}"), BinaryOp::Add, &s, g, &wdw);
                let lr = b.splat(&format!("lr{k}"), &s, 0.01);
                let lu = b.binary(&format!("u{k}.lr"), BinaryOp::Mul, &s, &lr, &u);
                let tu = b.binary(&format!("u{k}.trust"), BinaryOp::Mul, &s, &tb, &lu);
                let mu = b.splat(&format!("mu{k}"), &s, 0.9);
                let m1 = b.binary(&format!("m{k}.decay"), BinaryOp::Mul, &s, &mu, m);
                let nm = b.binary(&format!("nm{k}"), BinaryOp::Add, &s, &m1, &tu);
                (b.binary(&format!("nw{k}"), BinaryOp::Sub, &s, w, &nm), vec![nm])
            }
        }
    }

    /// One training step over the given state; returns the new weights and
    /// auxiliaries in state order.
    fn step(&mut self, specs: &[WeightSpec], ws: &[String], aux: &[String], xs: &[String]) -> Vec<String> {
        let na = self.cfg.optimizer.aux_count();
        let mut new_w = Vec::new();
        let mut new_aux = Vec::new();
        for (k, spec) in specs.iter().enumerate() {
            let gl = self.gradient(k, spec, &ws[k], &xs[k]);
            let g = self.b.all_reduce(&format!("g{k}"), arr(&f32s(&spec.shape)), ReduceKind::Add, ReplicaGroups::All, &[&gl]);
            let a: Vec<String> = (0..na).map(|j| aux[k * na + j].clone()).collect();
            let (nw, na2) = self.update(k, &spec.shape, &ws[k], &g, &a);
            new_w.push(nw);
            new_aux.extend(na2);
        }
        new_w.extend(new_aux);
        new_w
    }
}

fn state_types(cfg: &GenConfig, specs: &[WeightSpec]) -> (Vec<Type>, Vec<Type>, Vec<Type>) {
    let xe = if cfg.bf16_forward { ElementType::F16R } else { ElementType::F32 };
    let ws: Vec<Type> = specs.iter().map(|s| arr(&f32s(&s.shape))).collect();
    let aux: Vec<Type> =
        specs.iter().flat_map(|s| vec![arr(&f32s(&s.shape)); cfg.optimizer.aux_count()]).collect();
    let xs: Vec<Type> = specs.iter().map(|s| Type::array(xe, vec![s.rows, matrix(&s.shape).0])).collect();
    (ws, aux, xs)
}

/// Builds the training module described by `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Module> {
    if cfg.replicas == 0 || cfg.topology.replica_count() != cfg.replicas {
        return Err(Error::Invalid(format!("topology {} does not hold {} replicas", cfg.topology, cfg.replicas)));
    }
    let specs = cfg.weight_specs();
    if specs.is_empty() || specs.iter().any(|s| s.shape.is_empty() || s.rows == 0) {
        return Err(Error::Invalid("every weight needs a non-empty shape and at least one row".into()));
    }
    let (wt, at, xt) = state_types(cfg, &specs);
    let mut g = Gen { cfg, b: Builder::new() };
    let mut m = Module::new(cfg.replicas, cfg.topology.clone());
    let mut comps = Vec::new();

    match cfg.loop_steps {
        None => {
            let mut idx = 0;
            let mut param = |g: &mut Gen, base: String, t: &Type, eq: bool| {
                idx += 1;
                g.b.parameter(&base, t.clone(), idx - 1, eq)
            };
            let ws: Vec<String> = wt.iter().enumerate().map(|(k, t)| param(&mut g, format!("w{k}"), t, true)).collect();
            let aux: Vec<String> = at.iter().enumerate().map(|(k, t)| param(&mut g, format!("a{k}"), t, true)).collect();
            let xs: Vec<String> = xt.iter().enumerate().map(|(k, t)| param(&mut g, format!("x{k}"), t, false)).collect();
            let outs = g.step(&specs, &ws, &aux, &xs);
            let tys: Vec<Type> = wt.iter().chain(&at).cloned().collect();
            let elems: Vec<(&str, Type)> = outs.iter().map(String::as_str).zip(tys).collect();
            let root = g.b.tuple("state", &elems);
            comps.push(Computation { name: "step".into(), instructions: g.b.take(), root });
            m.entry = "step".into();
        }
        Some(steps) => {
            let s32 = Type::array(ElementType::S32, vec![]);
            let mut st: Vec<Type> = vec![s32.clone()];
            st.extend(wt.iter().chain(&at).chain(&xt).cloned());
            let st_ty = Type::Tuple(st.clone());
            let (nw, na, nx) = (wt.len(), at.len(), xt.len());

            // condition
            let p = g.b.parameter("cond.state", st_ty.clone(), 0, false);
            let i = g.b.gte("cond.i", s32.clone(), &p, 0);
            let lim = g.b.constant("steps", Shape::scalar(ElementType::S32), steps as f64);
            let lt = g.b.compare("more", CompareDir::Lt, &[], &i, &lim);
            comps.push(Computation { name: "cond".into(), instructions: g.b.take(), root: lt });

            let outfeed = cfg.outfeed_every.filter(|&k| k > 0);
            if outfeed.is_some() {
                let p = g.b.parameter("emit.w", wt[0].clone(), 0, false);
                let o = g.b.add("emit.outfeed", Type::unit(), Op::Outfeed, &[&p]);
                comps.push(Computation { name: "emit".into(), instructions: g.b.take(), root: o });
                g.b.parameter("skip.w", wt[0].clone(), 0, false);
                let t = g.b.tuple("skip.none", &[]);
                comps.push(Computation { name: "skip".into(), instructions: g.b.take(), root: t });
            }

            // body
            let p = g.b.parameter("state", st_ty.clone(), 0, false);
            let read = |g: &mut Gen, base: String, k: usize| g.b.gte(&base, st[k].clone(), &p, k);
            let i = read(&mut g, "i".into(), 0);
            let ws: Vec<String> = (0..nw).map(|k| read(&mut g, format!("w{k}"), 1 + k)).collect();
            let aux: Vec<String> = (0..na).map(|k| read(&mut g, format!("a{k}"), 1 + nw + k)).collect();
            let xs: Vec<String> = (0..nx).map(|k| read(&mut g, format!("x{k}"), 1 + nw + na + k)).collect();
            let outs = g.step(&specs, &ws, &aux, &xs);
            if let Some(every) = outfeed {
                let kc = g.b.constant("every", Shape::scalar(ElementType::S32), every as f64);
                let r = g.b.binary("phase", BinaryOp::Rem, &Shape::scalar(ElementType::S32), &i, &kc);
                let z = g.b.constant("zero", Shape::scalar(ElementType::S32), 0.0);
                let q = g.b.compare("report", CompareDir::Eq, &[], &r, &z);
                g.b.add(
                    "maybe_outfeed",
                    Type::unit(),
                    Op::Conditional { branches: vec!["emit".into(), "skip".into()] },
                    &[&q, &outs[0], &outs[0]],
                );
            }
            let one = g.b.constant("one", Shape::scalar(ElementType::S32), 1.0);
            let ni = g.b.binary("next_i", BinaryOp::Add, &Shape::scalar(ElementType::S32), &i, &one);
            let mut elems: Vec<(&str, Type)> = vec![(ni.as_str(), s32.clone())];
            for (k, o) in outs.iter().enumerate() {
                elems.push((o.as_str(), st[1 + k].clone()));
            }
            for (k, x) in xs.iter().enumerate() {
                elems.push((x.as_str(), st[1 + nw + na + k].clone()));
            }
            let root = g.b.tuple("next_state", &elems);
            comps.push(Computation { name: "body".into(), instructions: g.b.take(), root });

            // entry
            let mut idx = 0;
            let mut names = vec![g.b.constant("i0", Shape::scalar(ElementType::S32), 0.0)];
            for (k, t) in wt.iter().enumerate() {
                names.push(g.b.parameter(&format!("w{k}.init"), t.clone(), idx, true));
                idx += 1;
            }
            for (k, t) in at.iter().enumerate() {
                names.push(g.b.parameter(&format!("a{k}.init"), t.clone(), idx, true));
                idx += 1;
            }
            for (k, t) in xt.iter().enumerate() {
                names.push(g.b.parameter(&format!("x{k}.data"), t.clone(), idx, false));
                idx += 1;
            }
            let elems: Vec<(&str, Type)> = names.iter().map(String::as_str).zip(st.iter().cloned()).collect();
            let init = g.b.tuple("init", &elems);
            let w = g.b.add(
                "train",
                st_ty,
                Op::While { condition: "cond".into(), body: "body".into() },
                &[&init],
            );
            comps.push(Computation { name: "main".into(), instructions: g.b.take(), root: w });
            m.entry = "main".into();
        }
    }
    m.computations = comps;
    crate::ir::verify(&m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, print_module};

    #[test]
    fn every_model_verifies_and_round_trips() {
        for model in Model::ALL {
            for steps in [None, Some(3)] {
                let mut cfg = GenConfig::new(model, 4);
                cfg.loop_steps = steps;
                cfg.bf16_forward = steps.is_some();
                cfg.outfeed_every = Some(2);
                let m = generate(&cfg).unwrap();
                let text = print_module(&m);
                assert_eq!(print_module(&parse_module(&text).unwrap()), text, "{model}");
            }
        }
    }

    #[test]
    fn resnet_like_has_the_conv_weight() {
        let m = generate(&GenConfig::new(Model::ResnetLike, 2)).unwrap();
        let text = print_module(&m);
        assert!(text.contains("f32[3,3,256,256]"));
        assert!(text.contains("reduce("), "LARS norms");
    }

    #[test]
    fn topology_must_match() {
        let mut cfg = GenConfig::new(Model::Mlp, 4);
        cfg.topology = Topology::Mesh { rows: 2, cols: 3 };
        assert!(generate(&cfg).is_err());
    }
}


#[cfg(test)]
pub(crate) mod strategies {
    use super::*;
    use proptest::prelude::*;

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(prop::sample::select(vec![1usize, 2, 3, 5, 8, 16, 24]), 1..=3)
    }

    /// Small generated training modules on rings.
    pub(crate) fn arb_config() -> impl Strategy<Value = GenConfig> {
        (
            prop::sample::select(vec![1usize, 2, 4, 8, 10]),
            prop::sample::select(vec![Optimizer::Sgd, Optimizer::Adam, Optimizer::Lars]),
            prop::option::of(1u64..=4),
            any::<bool>(),
            prop::option::of(1u64..=3),
            prop::collection::vec((arb_shape(), 1usize..=3), 1..=3),
        )
            .prop_map(|(n, optimizer, loop_steps, bf16, outfeed, ws)| {
                let mut cfg = GenConfig::new(Model::Mlp, n);
                cfg.optimizer = optimizer;
                cfg.loop_steps = loop_steps;
                cfg.bf16_forward = bf16;
                cfg.outfeed_every = outfeed.filter(|_| loop_steps.is_some());
                cfg.weights = Some(ws.into_iter().map(|(shape, rows)| WeightSpec { shape, rows }).collect());
                cfg
            })
    }
}

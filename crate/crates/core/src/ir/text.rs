//! Text form of modules.
//!
//! ```text
//! module N=4 topology=mesh 2x2 steps=100 {
//! computation body ((s32[], f32[8])) -> (s32[], f32[8]) {
//!   %p = (s32[], f32[8]) parameter(0)
//!   ...
//!   return (%next)
//! }
//! entry computation main (f32[8]) -> f32[8] {
//!   %w = f32[8] parameter(0) {replica_equal}
//!   %g = f32[8] all-reduce(%w), op=add
//!   return (%g)
//! }
//! }
//! ```
//!
//! One instruction per line: `%id = type opcode(%operands) {annotations}, key=value, ...`.
//! `#` starts a comment. Parsing does not run the verifier.

use std::collections::{HashMap, HashSet};
use std::fmt::Write;

use super::instr::{BinaryOp, CompareDir, FusionKind, Instruction, Literal, Op, ReduceKind};
use super::module::{Computation, Module};
use super::shape::{ElementType, Shape, Tiling, Type};
use super::topology::{ReplicaGroups, Topology};
use crate::error::{Error, Result};
use crate::sharding_spec::ShardingSpec;

// ---------------------------------------------------------------- printing

pub fn print_module(m: &Module) -> String {
    let mut out = String::new();
    write!(out, "module N={} topology={}", m.replica_count, m.topology).unwrap();
    if let Some(steps) = m.steps {
        write!(out, " steps={steps}").unwrap();
    }
    if m.tiling != Tiling::default() {
        write!(out, " tile={}x{}", m.tiling.rows, m.tiling.cols).unwrap();
    }
    out.push_str(" {\n");
    for c in &m.computations {
        print_computation(&mut out, c, c.name == m.entry);
    }
    out.push_str("}\n");
    out
}

fn print_computation(out: &mut String, c: &Computation, entry: bool) {
    if entry {
        out.push_str("entry ");
    }
    let params: Vec<String> = c.parameter_types().iter().map(|t| t.to_string()).collect();
    let result = c.result_type().map_or_else(|| "()".to_string(), |t| t.to_string());
    writeln!(out, "computation {} ({}) -> {} {{", c.name, params.join(", "), result).unwrap();
    for inst in &c.instructions {
        out.push_str("  ");
        out.push_str(&print_instruction(inst));
        out.push('\n');
    }
    writeln!(out, "  return (%{})", c.root).unwrap();
    out.push_str("}\n");
}

fn fmt_list(xs: &[usize]) -> String {
    format!("{{{}}}", xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
}

fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

pub fn print_instruction(inst: &Instruction) -> String {
    let mut s = format!("%{} = {} {}(", inst.name, inst.ty, inst.op.opcode());
    match &inst.op {
        Op::Parameter { index, .. } => write!(s, "{index}").unwrap(),
        Op::Constant(Literal::Splat(v)) => s.push_str(&fmt_num(*v)),
        Op::Constant(Literal::Dense(vs)) => {
            let items: Vec<String> = vs.iter().map(|v| fmt_num(*v)).collect();
            write!(s, "{{{}}}", items.join(",")).unwrap();
        }
        _ => {
            let ops: Vec<String> = inst.operands.iter().map(|o| format!("%{o}")).collect();
            s.push_str(&ops.join(", "));
        }
    }
    s.push(')');
    let mut attrs: Vec<String> = Vec::new();
    match &inst.op {
        Op::Parameter { replica_equal: true, .. } => s.push_str(" {replica_equal}"),
        Op::Iota { dim } => attrs.push(format!("dim={dim}")),
        Op::Compare(d) => attrs.push(format!("dir={}", d.name())),
        Op::Broadcast { dims } => attrs.push(format!("dims={}", fmt_list(dims))),
        Op::Dot { lhs_contract, rhs_contract } => {
            attrs.push(format!("lhs_contract={lhs_contract}"));
            attrs.push(format!("rhs_contract={rhs_contract}"));
        }
        Op::Reduce { dims, op } => {
            attrs.push(format!("dims={}", fmt_list(dims)));
            attrs.push(format!("op={}", op.name()));
        }
        Op::Pad { high, value } => {
            attrs.push(format!("high={}", fmt_list(high)));
            attrs.push(format!("value={}", fmt_num(*value)));
        }
        Op::DynamicSlice { sizes } => attrs.push(format!("sizes={}", fmt_list(sizes))),
        Op::GetTupleElement { index } => attrs.push(format!("index={index}")),
        Op::AllReduce { op, groups } => {
            attrs.push(format!("op={}", op.name()));
            if !groups.is_all() {
                attrs.push(format!("groups={groups}"));
            }
        }
        Op::While { condition, body } => {
            attrs.push(format!("condition={condition}"));
            attrs.push(format!("body={body}"));
        }
        Op::Conditional { branches } => attrs.push(format!("branches={{{}}}", branches.join(", "))),
        Op::Fusion(kind) => {
            attrs.push(format!("kind={}", kind.name()));
            match kind {
                FusionKind::Loop { calls } => attrs.push(format!("calls={calls}")),
                FusionKind::Shard { spec } => attrs.push(format!("spec=\"{spec}\"")),
                FusionKind::ReduceScatter { op, specs } => {
                    attrs.push(format!("op={}", op.name()));
                    attrs.push(format!("spec=\"{}\"", join_specs(specs)));
                }
                FusionKind::Unshard { specs } => attrs.push(format!("spec=\"{}\"", join_specs(specs))),
            }
        }
        _ => {}
    }
    for a in attrs {
        s.push_str(", ");
        s.push_str(&a);
    }
    s
}

fn join_specs(specs: &[ShardingSpec]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("; ")
}

// ---------------------------------------------------------------- parsing

pub fn parse_module(text: &str) -> Result<Module> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, line: 1, col: 1 };
    p.module()
}

/// Parses `{{0,1},{2,3}}` or `all`.
pub fn parse_groups(s: &str) -> Result<ReplicaGroups, String> {
    let mut p = Parser { src: s.as_bytes(), pos: 0, line: 1, col: 1 };
    let g = p.groups().map_err(|e| e.to_string())?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(format!("trailing input in groups `{s}`"));
    }
    Ok(g)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
}

#[derive(Debug, Clone)]
enum AttrValue {
    Word(String),
    Str(String),
    List(Vec<AttrValue>),
}

impl AttrValue {
    fn word(&self) -> Option<&str> {
        match self {
            AttrValue::Word(w) => Some(w),
            _ => None,
        }
    }
}

fn is_ident(c: u8) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, b'_' | b'.' | b'-' | b'+')
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Syntax { line: self.line, column: self.col, message: msg.into() })
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.peek()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c == b'#' {
                while let Some(c) = self.peek() {
                    if c == b'\n' {
                        break;
                    }
                    self.bump();
                }
            } else if c.is_ascii_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(s.as_bytes()) {
            for _ in 0..s.len() {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            let found = self.peek().map_or("end of input".to_string(), |c| format!("`{}`", c as char));
            self.err(format!("expected `{s}`, found {found}"))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(is_ident) {
            self.bump();
        }
        if start == self.pos {
            return self.err("expected identifier");
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let (l, c) = (self.line, self.col);
        let id = self.ident()?;
        if id != kw {
            return Err(Error::Syntax { line: l, column: c, message: format!("expected `{kw}`, found `{id}`") });
        }
        Ok(())
    }

    fn usize(&mut self) -> Result<usize> {
        let (l, c) = (self.line, self.col);
        let id = self.ident()?;
        id.parse().map_err(|_| Error::Syntax { line: l, column: c, message: format!("expected integer, found `{id}`") })
    }

    fn number(&mut self) -> Result<f64> {
        let (l, c) = (self.line, self.col);
        let id = self.ident()?;
        parse_number(&id).ok_or(Error::Syntax { line: l, column: c, message: format!("expected number, found `{id}`") })
    }

    fn name_ref(&mut self) -> Result<String> {
        self.expect("%")?;
        self.ident()
    }

    fn module(&mut self) -> Result<Module> {
        self.keyword("module")?;
        let mut n = None;
        let mut topology = None;
        let mut steps = None;
        let mut tiling = Tiling::default();
        loop {
            self.skip_ws();
            if self.peek() == Some(b'{') {
                break;
            }
            let key = self.ident()?;
            self.expect("=")?;
            match key.as_str() {
                "N" => n = Some(self.usize()?),
                "topology" => {
                    let kind = self.ident()?;
                    topology = Some(match kind.as_str() {
                        "ring" => None,
                        "mesh" => {
                            let (r, c) = self.dims_pair()?;
                            Some((r, c))
                        }
                        other => return self.err(format!("unknown topology `{other}`")),
                    });
                }
                "steps" => steps = Some(self.usize()? as u64),
                "tile" => {
                    let (r, c) = self.dims_pair()?;
                    tiling = Tiling { rows: r, cols: c };
                }
                other => return self.err(format!("unknown module attribute `{other}`")),
            }
        }
        let Some(n) = n else { return self.err("module header needs N=<replicas>") };
        if n == 0 {
            return self.err("replica count must be at least 1");
        }
        let topology = match topology.flatten() {
            Some((rows, cols)) => {
                if rows * cols != n {
                    return self.err(format!("mesh {rows}x{cols} does not hold {n} replicas"));
                }
                Topology::Mesh { rows, cols }
            }
            None => Topology::Ring(n),
        };
        let mut m = Module::new(n, topology);
        m.steps = steps;
        m.tiling = tiling;
        self.expect("{")?;
        let mut names: HashSet<String> = HashSet::new();
        loop {
            self.skip_ws();
            if self.eat("}") {
                break;
            }
            let entry = self.eat("entry ");
            let c = self.computation(&mut names)?;
            if entry {
                if !m.entry.is_empty() {
                    return self.err("more than one entry computation");
                }
                m.entry = c.name.clone();
            }
            m.computations.push(c);
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.err("trailing input after module");
        }
        if m.entry.is_empty() {
            return self.err("module has no entry computation");
        }
        for c in &m.computations {
            for i in &c.instructions {
                for callee in i.op.called_computations() {
                    if m.computation(callee).is_none() {
                        return Err(Error::UndefinedReference {
                            name: callee.to_string(),
                            context: format!("instruction %{}", i.name),
                        });
                    }
                }
            }
        }
        Ok(m)
    }

    fn dims_pair(&mut self) -> Result<(usize, usize)> {
        let (l, c) = (self.line, self.col);
        let id = self.ident()?;
        let bad = || Error::Syntax { line: l, column: c, message: format!("expected RxC, found `{id}`") };
        let (a, b) = id.split_once('x').ok_or_else(bad)?;
        Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
    }

    fn ty(&mut self) -> Result<Type> {
        self.skip_ws();
        if self.eat("(") {
            let mut elems = Vec::new();
            if !self.eat(")") {
                loop {
                    elems.push(self.ty()?);
                    if self.eat(")") {
                        break;
                    }
                    self.expect(",")?;
                }
            }
            return Ok(Type::Tuple(elems));
        }
        let (l, c) = (self.line, self.col);
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric()) {
            self.bump();
        }
        let et = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
        let Some(etype) = ElementType::from_name(&et) else {
            return Err(Error::Syntax { line: l, column: c, message: format!("unknown element type `{et}`") });
        };
        self.expect("[")?;
        let mut dims = Vec::new();
        if !self.eat("]") {
            loop {
                dims.push(self.usize()?);
                if self.eat("]") {
                    break;
                }
                self.expect(",")?;
            }
        }
        Ok(Type::Array(Shape::new(etype, dims)))
    }

    fn computation(&mut self, names: &mut HashSet<String>) -> Result<Computation> {
        self.keyword("computation")?;
        let name = self.ident()?;
        if !names.insert(name.clone()) {
            return Err(Error::DuplicateId(name));
        }
        self.expect("(")?;
        let mut params = Vec::new();
        if !self.eat(")") {
            loop {
                params.push(self.ty()?);
                if self.eat(")") {
                    break;
                }
                self.expect(",")?;
            }
        }
        self.expect("->")?;
        let result = self.ty()?;
        self.expect("{")?;
        let mut c = Computation::new(name);
        let mut local: HashSet<String> = HashSet::new();
        loop {
            self.skip_ws();
            if self.eat("return") {
                self.expect("(")?;
                c.root = self.name_ref()?;
                self.expect(")")?;
                self.expect("}")?;
                break;
            }
            let (l, col) = (self.line, self.col);
            let inst = self.instruction()?;
            for o in &inst.operands {
                if !local.contains(o) {
                    return Err(Error::UndefinedReference {
                        name: o.clone(),
                        context: format!("instruction %{} at {l}:{col}", inst.name),
                    });
                }
            }
            if !names.insert(inst.name.clone()) {
                return Err(Error::DuplicateId(inst.name));
            }
            local.insert(inst.name.clone());
            c.instructions.push(inst);
        }
        if !local.contains(&c.root) {
            return Err(Error::UndefinedReference { name: c.root.clone(), context: format!("return of {}", c.name) });
        }
        if c.parameter_types() != params {
            return self.err(format!("computation {} header parameters do not match its parameter instructions", c.name));
        }
        if c.result_type() != Some(&result) {
            return self.err(format!("computation {} header result does not match its root", c.name));
        }
        Ok(c)
    }

    fn instruction(&mut self) -> Result<Instruction> {
        let name = self.name_ref()?;
        self.expect("=")?;
        let ty = self.ty()?;
        let (l, c) = (self.line, self.col);
        let opcode = self.ident()?;
        self.expect("(")?;
        let mut operands = Vec::new();
        let mut literal = None;
        let mut index = None;
        match opcode.as_str() {
            "parameter" => {
                index = Some(self.usize()?);
                self.expect(")")?;
            }
            "constant" => {
                if self.eat("{") {
                    let mut vs = Vec::new();
                    if !self.eat("}") {
                        loop {
                            vs.push(self.number()?);
                            if self.eat("}") {
                                break;
                            }
                            self.expect(",")?;
                        }
                    }
                    literal = Some(Literal::Dense(vs));
                } else {
                    literal = Some(Literal::Splat(self.number()?));
                }
                self.expect(")")?;
            }
            _ => {
                if !self.eat(")") {
                    loop {
                        operands.push(self.name_ref()?);
                        if self.eat(")") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
            }
        }
        let mut replica_equal = false;
        if self.eat("{") {
            self.keyword("replica_equal")?;
            self.expect("}")?;
            replica_equal = true;
        }
        let mut attrs: HashMap<String, AttrValue> = HashMap::new();
        while self.eat(",") {
            let key = self.ident()?;
            self.expect("=")?;
            let v = self.attr_value()?;
            attrs.insert(key, v);
        }
        let syntax = |message: String| Error::Syntax { line: l, column: c, message };
        let op = build_op(&opcode, index, literal, replica_equal, &mut attrs, &ty).map_err(syntax)?;
        if let Some(k) = attrs.keys().next() {
            return Err(syntax(format!("unexpected attribute `{k}` on {opcode}")));
        }
        if let Some(arity) = fixed_arity(&op) {
            if operands.len() != arity {
                return Err(syntax(format!(
                    "`{opcode}` expects {arity} operand(s), got {}",
                    operands.len()
                )));
            }
        }
        if replica_equal && !matches!(op, Op::Parameter { .. }) {
            return Err(syntax("replica_equal annotation is only valid on parameters".into()));
        }
        Ok(Instruction { name, ty, op, operands })
    }

    fn attr_value(&mut self) -> Result<AttrValue> {
        self.skip_ws();
        match self.peek() {
            Some(b'"') => {
                self.bump();
                let start = self.pos;
                while self.peek().is_some_and(|c| c != b'"') {
                    self.bump();
                }
                let s = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                self.expect("\"")?;
                Ok(AttrValue::Str(s))
            }
            Some(b'{') => {
                self.bump();
                let mut items = Vec::new();
                if !self.eat("}") {
                    loop {
                        items.push(self.attr_value()?);
                        if self.eat("}") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
                Ok(AttrValue::List(items))
            }
            _ => Ok(AttrValue::Word(self.ident()?)),
        }
    }

    fn groups(&mut self) -> Result<ReplicaGroups> {
        let v = self.attr_value()?;
        groups_from_attr(&v).map_err(|m| Error::Syntax { line: self.line, column: self.col, message: m })
    }
}

fn parse_number(s: &str) -> Option<f64> {
    match s {
        "true" => Some(1.0),
        "false" => Some(0.0),
        _ => s.parse().ok(),
    }
}

fn groups_from_attr(v: &AttrValue) -> Result<ReplicaGroups, String> {
    match v {
        AttrValue::Word(w) if w == "all" => Ok(ReplicaGroups::All),
        AttrValue::List(gs) => {
            let mut out = Vec::new();
            for g in gs {
                let AttrValue::List(items) = g else { return Err("groups must be a list of lists".into()) };
                let mut ids = Vec::new();
                for it in items {
                    let id = it.word().and_then(|w| w.parse().ok()).ok_or("group member must be an integer")?;
                    ids.push(id);
                }
                out.push(ids);
            }
            Ok(ReplicaGroups::Groups(out))
        }
        _ => Err("expected replica groups".into()),
    }
}

fn fixed_arity(op: &Op) -> Option<usize> {
    Some(match op {
        Op::Parameter { .. } | Op::Constant(_) | Op::Iota { .. } | Op::ReplicaId | Op::Rng => 0,
        Op::Binary(_) | Op::Compare(_) | Op::Dot { .. } => 2,
        Op::Sqrt
        | Op::Convert
        | Op::Broadcast { .. }
        | Op::Reduce { .. }
        | Op::Reshape
        | Op::Bitcast
        | Op::Pad { .. }
        | Op::GetTupleElement { .. }
        | Op::While { .. }
        | Op::Outfeed => 1,
        Op::Select => 3,
        Op::Fusion(FusionKind::Shard { .. }) => 2,
        Op::Conditional { branches } => branches.len() + 1,
        _ => return None,
    })
}

fn take_word(attrs: &mut HashMap<String, AttrValue>, key: &str, opcode: &str) -> Result<String, String> {
    match attrs.remove(key) {
        Some(AttrValue::Word(w)) => Ok(w),
        Some(_) => Err(format!("attribute `{key}` of {opcode} must be a word")),
        None => Err(format!("{opcode} requires attribute `{key}`")),
    }
}

fn take_usize(attrs: &mut HashMap<String, AttrValue>, key: &str, opcode: &str) -> Result<usize, String> {
    let w = take_word(attrs, key, opcode)?;
    w.parse().map_err(|_| format!("attribute `{key}` of {opcode} must be an integer"))
}

fn take_list(attrs: &mut HashMap<String, AttrValue>, key: &str, opcode: &str) -> Result<Vec<usize>, String> {
    match attrs.remove(key) {
        Some(AttrValue::List(items)) => items
            .iter()
            .map(|i| i.word().and_then(|w| w.parse().ok()).ok_or(format!("`{key}` must list integers")))
            .collect(),
        Some(_) => Err(format!("attribute `{key}` of {opcode} must be a list")),
        None => Err(format!("{opcode} requires attribute `{key}`")),
    }
}

fn take_reduce(attrs: &mut HashMap<String, AttrValue>, opcode: &str) -> Result<ReduceKind, String> {
    let w = take_word(attrs, "op", opcode)?;
    ReduceKind::from_name(&w).ok_or(format!("unknown reduction `{w}`"))
}

fn build_op(
    opcode: &str,
    index: Option<usize>,
    literal: Option<Literal>,
    replica_equal: bool,
    attrs: &mut HashMap<String, AttrValue>,
    ty: &Type,
) -> Result<Op, String> {
    if let Some(b) = BinaryOp::ALL.iter().find(|b| b.name() == opcode) {
        return Ok(Op::Binary(*b));
    }
    Ok(match opcode {
        "parameter" => Op::Parameter { index: index.unwrap(), replica_equal },
        "constant" => Op::Constant(literal.unwrap()),
        "iota" => Op::Iota { dim: take_usize(attrs, "dim", opcode)? },
        "replica-id" => Op::ReplicaId,
        "rng" => Op::Rng,
        "sqrt" => Op::Sqrt,
        "compare" => {
            let w = take_word(attrs, "dir", opcode)?;
            Op::Compare(CompareDir::from_name(&w).ok_or(format!("unknown compare direction `{w}`"))?)
        }
        "select" => Op::Select,
        "convert" => Op::Convert,
        "broadcast" => Op::Broadcast { dims: take_list(attrs, "dims", opcode)? },
        "dot" => Op::Dot {
            lhs_contract: take_usize(attrs, "lhs_contract", opcode)?,
            rhs_contract: take_usize(attrs, "rhs_contract", opcode)?,
        },
        "reduce" => {
            let dims = take_list(attrs, "dims", opcode)?;
            Op::Reduce { dims, op: take_reduce(attrs, opcode)? }
        }
        "reshape" => Op::Reshape,
        "bitcast" => Op::Bitcast,
        "pad" => {
            let high = take_list(attrs, "high", opcode)?;
            let w = take_word(attrs, "value", opcode)?;
            Op::Pad { high, value: parse_number(&w).ok_or("pad value must be a number")? }
        }
        "dynamic-slice" => Op::DynamicSlice { sizes: take_list(attrs, "sizes", opcode)? },
        "tuple" => Op::Tuple,
        "get-tuple-element" => Op::GetTupleElement { index: take_usize(attrs, "index", opcode)? },
        "all-reduce" => {
            let op = take_reduce(attrs, opcode)?;
            let groups = match attrs.remove("groups") {
                Some(v) => groups_from_attr(&v)?,
                None => ReplicaGroups::All,
            };
            Op::AllReduce { op, groups }
        }
        "while" => Op::While {
            condition: take_word(attrs, "condition", opcode)?,
            body: take_word(attrs, "body", opcode)?,
        },
        "conditional" => match attrs.remove("branches") {
            Some(AttrValue::List(items)) => Op::Conditional {
                branches: items
                    .iter()
                    .map(|i| i.word().map(str::to_string).ok_or("branch must be a computation name".to_string()))
                    .collect::<Result<_, _>>()?,
            },
            _ => return Err("conditional requires attribute `branches`".into()),
        },
        "fusion" => {
            let kind = take_word(attrs, "kind", opcode)?;
            let spec_text = match attrs.remove("spec") {
                Some(AttrValue::Str(s)) => Some(s),
                Some(_) => return Err("fusion spec must be a quoted string".into()),
                None => None,
            };
            let etype_of = |t: &Type| -> ElementType {
                match t {
                    Type::Array(s) => s.etype,
                    Type::Tuple(ts) => ts.first().and_then(|t| t.as_array()).map_or(ElementType::F32, |s| s.etype),
                }
            };
            let specs = |text: Option<String>, types: Vec<ElementType>| -> Result<Vec<ShardingSpec>, String> {
                let text = text.ok_or("fusion requires attribute `spec`")?;
                text.split(';')
                    .enumerate()
                    .map(|(i, s)| ShardingSpec::parse(s.trim(), types.get(i).copied().unwrap_or(types[0])))
                    .collect()
            };
            let leaf_types: Vec<ElementType> = match ty {
                Type::Tuple(ts) => ts.iter().map(etype_of).collect(),
                t => vec![etype_of(t)],
            };
            Op::Fusion(match kind.as_str() {
                "loop" => FusionKind::Loop { calls: take_word(attrs, "calls", opcode)? },
                "shard" => FusionKind::Shard { spec: specs(spec_text, leaf_types)?.remove(0) },
                "reduce-scatter" => {
                    let op = take_reduce(attrs, opcode)?;
                    FusionKind::ReduceScatter { op, specs: specs(spec_text, leaf_types)? }
                }
                "unshard" => FusionKind::Unshard { specs: specs(spec_text, leaf_types)? },
                other => return Err(format!("unknown fusion kind `{other}`")),
            })
        }
        "outfeed" => Op::Outfeed,
        other => return Err(format!("unknown opcode `{other}`")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
module N=2 topology=ring {
computation cond ((s32[], f32[4])) -> pred[] {
  %cp = (s32[], f32[4]) parameter(0)
  %ci = s32[] get-tuple-element(%cp), index=0
  %lim = s32[] constant(5)
  %lt = pred[] compare(%ci, %lim), dir=lt
  return (%lt)
}
computation body ((s32[], f32[4])) -> (s32[], f32[4]) {
  %bp = (s32[], f32[4]) parameter(0)
  %bi = s32[] get-tuple-element(%bp), index=0
  %bx = f32[4] get-tuple-element(%bp), index=1
  %one = s32[] constant(1)
  %ni = s32[] add(%bi, %one)
  %sum = f32[4] all-reduce(%bx), op=add
  %nt = (s32[], f32[4]) tuple(%ni, %sum)
  return (%nt)
}
entry computation main (f32[4]) -> (s32[], f32[4]) {
  %p = f32[4] parameter(0) {replica_equal}   # weights
  %z = s32[] constant(0)
  %t = (s32[], f32[4]) tuple(%z, %p)
  %w = (s32[], f32[4]) while(%t), condition=cond, body=body
  return (%w)
}
}
";

    #[test]
    fn parses_and_round_trips() {
        let m = parse_module(SAMPLE).unwrap();
        assert_eq!(m.replica_count, 2);
        assert_eq!(m.computations.len(), 3);
        let printed = print_module(&m);
        assert_eq!(parse_module(&printed).unwrap(), m);
        assert_eq!(print_module(&parse_module(&printed).unwrap()), printed);
        // body and condition appear once each
        assert_eq!(printed.matches("computation body").count(), 1);
        assert_eq!(printed.matches("computation cond").count(), 1);
    }

    #[test]
    fn constant_and_annotation() {
        let m = parse_module(
            "module N=1 topology=ring {\nentry computation e (f32[512,512]) -> f32[] {\n  %p = f32[512,512] parameter(0) {replica_equal}\n  %c = f32[] constant(0.01)\n  return (%c)\n}\n}\n",
        )
        .unwrap();
        let e = m.entry_computation();
        assert_eq!(e.get("c").unwrap().op, Op::Constant(Literal::Splat(0.01)));
        assert_eq!(e.get("p").unwrap().op, Op::Parameter { index: 0, replica_equal: true });
        assert_eq!(m.replica_equal_parameters(), vec!["p"]);
    }

    #[test]
    fn empty_module_prints_header_and_entry() {
        let mut m = Module::new(1, Topology::Ring(1));
        let mut c = Computation::new("main");
        c.instructions.push(Instruction::new("t", Type::unit(), Op::Tuple, vec![]));
        c.root = "t".into();
        m.computations.push(c);
        m.entry = "main".into();
        let text = print_module(&m);
        assert!(text.starts_with("module N=1 topology=ring {\nentry computation main () -> () {"));
        assert_eq!(parse_module(&text).unwrap(), m);
    }

    #[test]
    fn arity_error_names_opcode() {
        let err = parse_module(
            "module N=1 topology=ring {\nentry computation e (f32[]) -> f32[] {\n  %y = f32[] parameter(0)\n  %x = f32[] add(%y)\n  return (%x)\n}\n}\n",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("`add`") && msg.contains("4:"), "{msg}");
    }

    #[test]
    fn duplicate_and_undefined() {
        let dup = "module N=1 topology=ring {\nentry computation e () -> f32[] {\n  %a = f32[] constant(1)\n  %a = f32[] constant(2)\n  return (%a)\n}\n}\n";
        assert!(matches!(parse_module(dup), Err(Error::DuplicateId(n)) if n == "a"));
        let undef = "module N=1 topology=ring {\nentry computation e () -> f32[] {\n  %a = f32[] negate(%b)\n  return (%a)\n}\n}\n";
        assert!(parse_module(undef).is_err());
        let undef = "module N=1 topology=ring {\nentry computation e () -> f32[] {\n  %a = f32[] sqrt(%b)\n  return (%a)\n}\n}\n";
        assert!(matches!(parse_module(undef), Err(Error::UndefinedReference { .. })));
    }

    #[test]
    fn mesh_header_and_fusion_spec() {
        let text = "module N=4 topology=mesh 2x2 steps=10 {\nentry computation e (f32[3,3,256,256], s32[]) -> f32[1,256,256] {\n  %w = f32[3,3,256,256] parameter(0) {replica_equal}\n  %r = s32[] parameter(1)\n  %s = f32[1,256,256] fusion(%w, %r), kind=shard, spec=\"[3,3,256,256] reshape[9,256,256] pad0+1 slice0/10\"\n  return (%s)\n}\n}\n";
        let m = parse_module(text).unwrap();
        assert_eq!(m.topology, Topology::Mesh { rows: 2, cols: 2 });
        assert_eq!(m.steps, Some(10));
        assert_eq!(print_module(&m), text);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn generated_modules_round_trip(cfg in crate::gen::strategies::arb_config()) {
            let m = crate::gen::generate(&cfg).unwrap();
            let text = print_module(&m);
            let back = parse_module(&text).unwrap();
            proptest::prop_assert_eq!(&back, &m);
            proptest::prop_assert_eq!(print_module(&back), text);
        }
    }
}

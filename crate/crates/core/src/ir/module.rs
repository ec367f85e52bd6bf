//! Computations and modules.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::instr::{Instruction, Op};
use super::shape::{Tiling, Type};
use super::topology::Topology;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Computation {
    pub name: String,
    /// Def-before-use order.
    pub instructions: Vec<Instruction>,
    pub root: String,
}

impl Computation {
    pub fn new(name: impl Into<String>) -> Self {
        Computation { name: name.into(), instructions: Vec::new(), root: String::new() }
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.instructions.iter().enumerate().map(|(i, x)| (x.name.as_str(), i)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Instruction> {
        self.instructions.iter().find(|i| i.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Instruction> {
        self.instructions.iter_mut().find(|i| i.name == name)
    }

    pub fn root_instruction(&self) -> Option<&Instruction> {
        self.get(&self.root)
    }

    /// Parameter instructions ordered by parameter index.
    pub fn parameters(&self) -> Vec<&Instruction> {
        let mut ps: Vec<&Instruction> = self
            .instructions
            .iter()
            .filter(|i| matches!(i.op, Op::Parameter { .. }))
            .collect();
        ps.sort_by_key(|i| match i.op {
            Op::Parameter { index, .. } => index,
            _ => unreachable!(),
        });
        ps
    }

    pub fn parameter_types(&self) -> Vec<Type> {
        self.parameters().iter().map(|p| p.ty.clone()).collect()
    }

    pub fn result_type(&self) -> Option<&Type> {
        self.root_instruction().map(|r| &r.ty)
    }

    /// Users of every instruction, in instruction order.
    pub fn users(&self) -> HashMap<&str, Vec<&str>> {
        let mut users: HashMap<&str, Vec<&str>> = HashMap::new();
        for inst in &self.instructions {
            users.entry(inst.name.as_str()).or_default();
            for op in &inst.operands {
                let list = users.entry(op.as_str()).or_default();
                if !list.contains(&inst.name.as_str()) {
                    list.push(inst.name.as_str());
                }
            }
        }
        users
    }

    /// Topological order: every operand precedes its users. Ties are broken by
    /// position in the instruction list, so a list that is already in
    /// def-before-use order comes back unchanged.
    pub fn topo_order(&self) -> Result<Vec<&Instruction>> {
        let idx = self.index();
        let n = self.instructions.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, inst) in self.instructions.iter().enumerate() {
            for op in &inst.operands {
                let Some(&j) = idx.get(op.as_str()) else {
                    return Err(Error::UndefinedReference {
                        name: op.clone(),
                        context: format!("computation {}", self.name),
                    });
                };
                indegree[i] += 1;
                succ[j].push(i);
            }
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(&self.instructions[i]);
            for &s in &succ[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Cycle(self.name.clone()));
        }
        Ok(order)
    }

    /// Reorders the instruction list into topological order in place.
    pub fn sort(&mut self) -> Result<()> {
        let order: Vec<Instruction> = self.topo_order()?.into_iter().cloned().collect();
        self.instructions = order;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Module {
    /// All computations; printing and parsing preserve this order.
    pub computations: Vec<Computation>,
    pub entry: String,
    pub replica_count: usize,
    pub topology: Topology,
    /// Training-loop horizon used to amortize loop-boundary work.
    pub steps: Option<u64>,
    pub tiling: Tiling,
}

impl Module {
    pub fn new(replica_count: usize, topology: Topology) -> Self {
        Module {
            computations: Vec::new(),
            entry: String::new(),
            replica_count,
            topology,
            steps: None,
            tiling: Tiling::default(),
        }
    }

    /// The same program on a different replica set. Fails if explicit
    /// replica groups no longer fit.
    pub fn retargeted(&self, topology: Topology) -> crate::Result<Module> {
        let mut m = self.clone();
        m.replica_count = topology.replica_count();
        m.topology = topology;
        crate::ir::verify(&m)?;
        Ok(m)
    }

    pub fn computation(&self, name: &str) -> Option<&Computation> {
        self.computations.iter().find(|c| c.name == name)
    }

    pub fn computation_mut(&mut self, name: &str) -> Option<&mut Computation> {
        self.computations.iter_mut().find(|c| c.name == name)
    }

    pub fn entry_computation(&self) -> &Computation {
        self.computation(&self.entry).expect("module has no entry computation")
    }

    pub fn entry_computation_mut(&mut self) -> &mut Computation {
        let entry = self.entry.clone();
        self.computation_mut(&entry).expect("module has no entry computation")
    }

    /// Finds an instruction anywhere in the module.
    pub fn find(&self, name: &str) -> Option<(&Computation, &Instruction)> {
        self.computations.iter().find_map(|c| c.get(name).map(|i| (c, i)))
    }

    pub fn instruction_count(&self) -> usize {
        self.computations.iter().map(|c| c.instructions.len()).sum()
    }

    /// Names of entry parameters carrying the replica_equal annotation.
    pub fn replica_equal_parameters(&self) -> Vec<&str> {
        self.entry_computation()
            .parameters()
            .into_iter()
            .filter(|p| matches!(p.op, Op::Parameter { replica_equal: true, .. }))
            .map(|p| p.name.as_str())
            .collect()
    }

    /// A name not yet used by any instruction or computation.
    pub fn fresh_name(&self, base: &str) -> String {
        let taken = |n: &str| {
            self.computations.iter().any(|c| c.name == n || c.get(n).is_some())
        };
        if !taken(base) {
            return base.to_string();
        }
        (1..).map(|i| format!("{base}.{i}")).find(|n| !taken(n)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::shape::ElementType;

    fn inst(name: &str, ops: &[&str]) -> Instruction {
        Instruction::new(
            name,
            Type::array(ElementType::F32, vec![]),
            if ops.is_empty() {
                Op::Constant(crate::ir::Literal::Splat(1.0))
            } else {
                Op::Tuple
            },
            ops.iter().map(|s| s.to_string()).collect(),
        )
    }

    #[test]
    fn chain_and_diamond_orders() {
        let mut c = Computation::new("c");
        c.instructions = vec![inst("c", &["b"]), inst("b", &["a"]), inst("a", &[])];
        let names: Vec<_> = c.topo_order().unwrap().iter().map(|i| i.name.clone()).collect();
        assert_eq!(names, ["a", "b", "c"]);

        c.instructions =
            vec![inst("a", &[]), inst("c", &["a"]), inst("b", &["a"]), inst("d", &["b", "c"])];
        let first: Vec<_> = c.topo_order().unwrap().iter().map(|i| i.name.clone()).collect();
        assert_eq!(first.first().unwrap(), "a");
        assert_eq!(first.last().unwrap(), "d");
        let second: Vec<_> = c.topo_order().unwrap().iter().map(|i| i.name.clone()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn cycle_is_reported() {
        let mut c = Computation::new("c");
        c.instructions = vec![inst("a", &["b"]), inst("b", &["a"])];
        assert!(matches!(c.topo_order(), Err(Error::Cycle(_))));
    }
}

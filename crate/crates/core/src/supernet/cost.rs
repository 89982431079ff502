use crate::autodiff::Graph;
use crate::error::Result;
use crate::tensor::Tensor;

use super::{conv_param_cost, Classifier, OperationKind, ReductionBlock, SupernetConfig};

/// Per-stage parameter costs of every searchable choice.
///
/// Cell batch norm has no affine terms, so a searchable conv costs exactly
/// `k²·C·C + C`. Depth `d` costs the first `d` cells of its stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCostTable {
    /// `op_costs[s][o]` for every operation; `ConvKxK` holds the `k_max` cost.
    pub op_costs: Vec<[usize; OperationKind::COUNT]>,
    /// `kernel_costs[s][i]` for `kernel_sizes[i]`.
    pub kernel_costs: Vec<Vec<usize>>,
    pub depths: Vec<usize>,
    pub cells_per_stage: usize,
    pub edges_per_cell: usize,
    /// Stem, reductions and classifier.
    pub fixed: usize,
}

impl ParamCostTable {
    pub fn new(config: &SupernetConfig) -> Self {
        let mut op_costs = Vec::new();
        let mut kernel_costs = Vec::new();
        for s in 0..config.stages {
            let c = config.stage_channels(s);
            let ks: Vec<usize> = config.kernel_sizes.iter().map(|&k| conv_param_cost(k, c, c)).collect();
            let mut ops = [0; OperationKind::COUNT];
            ops[OperationKind::Conv1x1.index()] = conv_param_cost(1, c, c);
            ops[OperationKind::ConvKxK.index()] = *ks.last().expect("validated");
            op_costs.push(ops);
            kernel_costs.push(ks);
        }
        let c0 = config.base_channels;
        let mut fixed = conv_param_cost(3, config.input_channels, c0) + 2 * c0;
        for s in 0..config.stages - 1 {
            fixed += ReductionBlock::param_count(config.stage_channels(s));
        }
        fixed += Classifier::param_count(config.stage_channels(config.stages - 1), config.num_classes);
        Self {
            op_costs,
            kernel_costs,
            depths: config.depths.clone(),
            cells_per_stage: config.cells_per_stage,
            edges_per_cell: config.edge_count(),
            fixed,
        }
    }

    /// Cost of one edge with a chosen operation and, for `ConvKxK`, a kernel index.
    pub fn edge_cost(&self, stage: usize, op: OperationKind, kernel: usize) -> usize {
        match op {
            OperationKind::ConvKxK => self.kernel_costs[stage][kernel],
            _ => self.op_costs[stage][op.index()],
        }
    }

    /// Expected cost of one stage. `kernels` is `None` before the
    /// size-variable phase (largest kernel only) and `depth` is `None` when
    /// every cell runs.
    pub(crate) fn stage_expectation<G: Graph>(
        &self,
        g: &mut G,
        stage: usize,
        ops: &[G::Value],
        kernels: Option<&[G::Value]>,
        depth: Option<&G::Value>,
    ) -> Result<G::Value> {
        let c1 = self.op_costs[stage][OperationKind::Conv1x1.index()] as f64;
        let ck: Vec<f64> = self.kernel_costs[stage].iter().map(|&c| c as f64).collect();
        let mut cell: Option<G::Value> = None;
        for (e, p) in ops.iter().enumerate() {
            let kv = match kernels {
                Some(q) => g.dot_const(&q[e], &ck)?,
                None => g.constant(Tensor::scalar(*ck.last().expect("non-empty"))),
            };
            let conv1 = g.constant(Tensor::scalar(c1));
            let edge = g.weighted_sum(
                &[(conv1, OperationKind::Conv1x1.index()), (kv, OperationKind::ConvKxK.index())],
                p,
            )?;
            cell = Some(match cell {
                None => edge,
                Some(c) => g.add(&c, &edge)?,
            });
        }
        let cell = cell.expect("cells have edges");
        match depth {
            None => Ok(g.scale(&cell, self.cells_per_stage as f64)),
            Some(r) => {
                let terms: Vec<(G::Value, usize)> = self
                    .depths
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| (g.scale(&cell, d as f64), i))
                    .collect();
                g.weighted_sum(&terms, r)
            }
        }
    }
}

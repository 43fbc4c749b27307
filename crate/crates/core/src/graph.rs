//! Per-round directed communication graph.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{max_element, SelectionMask};

/// `masks[i][j]` is the selection for link `i -> j`; diagonal entries are ignored.
pub type MaskTable = Vec<Vec<Option<SelectionMask>>>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CommGraph {
    pub round: usize,
    pub agents: usize,
    adjacency: Vec<bool>,
}

impl CommGraph {
    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        from != to && self.adjacency[from * self.agents + to]
    }

    /// Directed edges in `(from, to)` lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.agents;
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn in_degree(&self, to: usize) -> usize {
        (0..self.agents).filter(|&i| self.has_edge(i, to)).count()
    }
}

/// Round 0 is fully connected; later rounds keep `i -> j` only when its
/// selection mask has at least one cell.
pub fn build_graph(round: usize, agents: usize, masks: Option<&MaskTable>) -> Result<CommGraph> {
    let mut adjacency = vec![false; agents * agents];
    match (round, masks) {
        (0, _) => {
            for i in 0..agents {
                for j in 0..agents {
                    adjacency[i * agents + j] = i != j;
                }
            }
        }
        (_, None) => {
            return Err(Error::protocol(format!(
                "round {round} graph needs the selection masks"
            )))
        }
        (_, Some(table)) => {
            if table.len() != agents || table.iter().any(|row| row.len() != agents) {
                return Err(Error::dim(format!("mask table is not {agents}x{agents}")));
            }
            for (i, row) in table.iter().enumerate() {
                for (j, mask) in row.iter().enumerate() {
                    adjacency[i * agents + j] = i != j && mask.as_ref().is_some_and(max_element);
                }
            }
        }
    }
    Ok(CommGraph {
        round,
        agents,
        adjacency,
    })
}

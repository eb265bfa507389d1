use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Position among the nodes of the same depth.
    pub class_index: usize,
    pub children: Vec<usize>,
}

/// Rooted tree whose leaves all sit at depth `levels`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    nodes: Vec<TaxonNode>,
    levels: usize,
    /// Node ids per depth, `by_depth[d][class_index] = id`.
    by_depth: Vec<Vec<usize>>,
}

impl Taxonomy {
    /// Complete `branching`-ary tree of depth `levels`, ids assigned breadth-first.
    pub fn complete(branching: usize, levels: usize) -> Result<Self> {
        if branching < 1 || levels < 1 {
            return Err(invalid("taxonomy needs branching ≥ 1 and depth ≥ 1"));
        }
        let mut parents = vec![None];
        let mut frontier = vec![0usize];
        for _ in 0..levels {
            let mut next = Vec::with_capacity(frontier.len() * branching);
            for &p in &frontier {
                for _ in 0..branching {
                    next.push(parents.len());
                    parents.push(Some(p));
                }
            }
            frontier = next;
        }
        Self::from_parents(&parents)
    }

    /// Builds a tree from a parent table; node 0 must be the only root.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        if parents.first() != Some(&None) || parents.iter().skip(1).any(Option::is_none) {
            return Err(invalid("taxonomy must have exactly one root, at id 0"));
        }
        let mut nodes: Vec<TaxonNode> = Vec::with_capacity(parents.len());
        for (id, &parent) in parents.iter().enumerate() {
            let depth = match parent {
                None => 0,
                Some(p) if p < id => nodes[p].depth + 1,
                Some(p) => {
                    return Err(invalid(format!("node {id} has parent {p} listed after it")))
                }
            };
            nodes.push(TaxonNode {
                id,
                parent,
                depth,
                class_index: 0,
                children: Vec::new(),
            });
            if let Some(p) = parent {
                nodes[p].children.push(id);
            }
        }
        let levels = nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        if levels == 0 {
            return Err(invalid("taxonomy has no levels below the root"));
        }
        if nodes
            .iter()
            .any(|n| n.children.is_empty() && n.depth != levels)
        {
            return Err(invalid("every leaf must sit at the deepest level"));
        }
        let mut by_depth = vec![Vec::new(); levels + 1];
        for n in &mut nodes {
            n.class_index = by_depth[n.depth].len();
            by_depth[n.depth].push(n.id);
        }
        Ok(Self {
            nodes,
            levels,
            by_depth,
        })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> Result<&TaxonNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| invalid(format!("unknown taxonomy node {id}")))
    }

    pub fn nodes(&self) -> &[TaxonNode] {
        &self.nodes
    }

    pub fn leaves(&self) -> &[usize] {
        &self.by_depth[self.levels]
    }

    /// Node ids at `depth` (0 is the root).
    pub fn level_nodes(&self, depth: usize) -> &[usize] {
        &self.by_depth[depth]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes.get(id).is_some_and(|n| n.depth == self.levels)
    }

    /// Ancestor of `id` at `depth`, which must not exceed the node's own depth.
    pub fn ancestor_at(&self, id: usize, depth: usize) -> Result<usize> {
        let mut n = self.node(id)?;
        if depth > n.depth {
            return Err(invalid(format!(
                "node {id} has no ancestor at depth {depth}"
            )));
        }
        while n.depth > depth {
            n = &self.nodes[n.parent.expect("non-root has a parent")];
        }
        Ok(n.id)
    }

    /// Ancestors of a leaf at depths `1..=levels` (the last entry is the leaf).
    pub fn path(&self, leaf: usize) -> Result<Vec<usize>> {
        if !self.is_leaf(leaf) {
            return Err(invalid(format!("node {leaf} is not a leaf")));
        }
        (1..=self.levels)
            .map(|d| self.ancestor_at(leaf, d))
            .collect()
    }

    pub fn siblings(&self, id: usize) -> Result<&[usize]> {
        match self.node(id)?.parent {
            Some(p) => Ok(&self.nodes[p].children),
            None => Ok(std::slice::from_ref(&self.by_depth[0][0])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_tree_counts() {
        let t = Taxonomy::complete(3, 3).unwrap();
        assert_eq!(t.leaves().len(), 27);
        assert_eq!(t.len() - 1, 39);
        let t = Taxonomy::complete(2, 1).unwrap();
        assert_eq!(t.leaves().len(), 2);
    }

    #[test]
    fn paths_and_ancestors() {
        let t = Taxonomy::complete(2, 2).unwrap();
        // ids: 0 | 1 2 | 3 4 5 6
        assert_eq!(t.path(5).unwrap(), vec![2, 5]);
        assert_eq!(t.ancestor_at(6, 0).unwrap(), 0);
        assert_eq!(t.siblings(3).unwrap(), &[3, 4]);
        assert_eq!(t.node(6).unwrap().class_index, 3);
        assert!(t.path(1).is_err());
        assert!(t.ancestor_at(1, 2).is_err());
    }

    #[test]
    fn rejects_malformed_parent_tables() {
        assert!(Taxonomy::from_parents(&[None, None]).is_err());
        assert!(Taxonomy::from_parents(&[None, Some(2), Some(0)]).is_err());
        // leaf 1 at depth 1 while 3 sits at depth 2
        assert!(Taxonomy::from_parents(&[None, Some(0), Some(0), Some(2)]).is_err());
    }
}

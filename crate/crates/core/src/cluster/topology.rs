use super::config::{Arch, TreeSpec};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Root,
    /// A parameter server below the root; `leaf` servers have learner
    /// children.
    Relay { leaf: bool },
    Learner(usize),
    Stats,
}

/// Node roles and the two trees connecting them: the push tree (gradients
/// flow up, pulls are served down) and, for `AdvStar`, the learner
/// broadcast tree that carries weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub roles: Vec<Role>,
    pub parent: Vec<Option<NodeId>>,
    pub children: Vec<Vec<NodeId>>,
    /// Weight broadcast targets of each node.
    pub broadcast: Vec<Vec<NodeId>>,
    pub learners: Vec<NodeId>,
    pub root: NodeId,
    pub stats: NodeId,
}

impl Topology {
    /// Node 0 is the root, relays follow level by level from the top,
    /// then the learners in order, then the statistics node.
    pub fn build(arch: Arch, learners: usize, tree: TreeSpec, broadcast_fanout: usize) -> Result<Self> {
        if learners == 0 {
            return Err(Error::Config("at least one learner is required".into()));
        }
        let levels = match arch {
            Arch::Base => Vec::new(),
            Arch::Adv | Arch::AdvStar => relay_levels(learners, tree)?,
        };
        let relay_count: usize = levels.iter().map(|l: &Vec<Vec<usize>>| l.len()).sum();
        let n = 1 + relay_count + learners + 1;
        let mut roles = vec![Role::Root; n];
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let learner_base = 1 + relay_count;
        let learner_ids: Vec<NodeId> = (0..learners).map(|l| learner_base + l).collect();
        for (l, &id) in learner_ids.iter().enumerate() {
            roles[id] = Role::Learner(l);
        }
        let stats = n - 1;
        roles[stats] = Role::Stats;

        if levels.is_empty() {
            for &id in &learner_ids {
                parent[id] = Some(0);
                children[0].push(id);
            }
        } else {
            // levels[0] is the top level; each entry lists the indices of its
            // children in the level below (or learner indices for leaves).
            let mut next_id = 1;
            let mut level_ids: Vec<Vec<NodeId>> = Vec::new();
            for level in &levels {
                let ids: Vec<NodeId> = (next_id..next_id + level.len()).collect();
                next_id += level.len();
                level_ids.push(ids);
            }
            for &id in &level_ids[0] {
                parent[id] = Some(0);
                children[0].push(id);
            }
            let depth = levels.len();
            for d in 0..depth {
                let leaf = d + 1 == depth;
                for (k, group) in levels[d].iter().enumerate() {
                    let id = level_ids[d][k];
                    roles[id] = Role::Relay { leaf };
                    for &c in group {
                        let cid = if leaf { learner_ids[c] } else { level_ids[d + 1][c] };
                        parent[cid] = Some(id);
                        children[id].push(cid);
                    }
                }
            }
        }

        let mut broadcast = vec![Vec::new(); n];
        match arch {
            Arch::Base => {}
            Arch::Adv => {
                for id in 0..=relay_count {
                    if !matches!(roles[id], Role::Relay { leaf: true }) {
                        broadcast[id] = children[id].clone();
                    }
                }
            }
            Arch::AdvStar => {
                // heap layout: position 0 is the root, learner l sits at l+1
                let f = broadcast_fanout;
                for p in 0..=learners {
                    let from = if p == 0 { 0 } else { learner_ids[p - 1] };
                    for q in p * f + 1..=p * f + f {
                        if q <= learners {
                            broadcast[from].push(learner_ids[q - 1]);
                        }
                    }
                }
            }
        }

        Ok(Self {
            roles,
            parent,
            children,
            broadcast,
            learners: learner_ids,
            root: 0,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Number of learners beneath each node of the push tree.
    pub fn learners_below(&self, id: NodeId) -> usize {
        match self.roles[id] {
            Role::Learner(_) => 1,
            Role::Stats => 0,
            _ => self.children[id].iter().map(|&c| self.learners_below(c)).sum(),
        }
    }

    /// Leaf relays, in id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.len())
            .filter(|&i| matches!(self.roles[i], Role::Relay { leaf: true }))
            .collect()
    }
}

/// Relay levels from the top down. Each level lists, per relay, the
/// indices of its children in the next level down (learner indices for the
/// bottom level).
fn relay_levels(learners: usize, tree: TreeSpec) -> Result<Vec<Vec<Vec<usize>>>> {
    if tree.learners_per_leaf == 0 || tree.fanout == 0 {
        return Err(Error::Config("tree learners_per_leaf and fanout must be >= 1".into()));
    }
    let chunk = |count: usize, size: usize| -> Vec<Vec<usize>> {
        (0..count)
            .step_by(size)
            .map(|s| (s..(s + size).min(count)).collect())
            .collect()
    };
    let mut bottom_up = vec![chunk(learners, tree.learners_per_leaf)];
    loop {
        let width = bottom_up.last().map(|l| l.len()).unwrap_or(0);
        let depth = bottom_up.len();
        if width <= tree.fanout && depth >= tree.min_depth.max(1) {
            break;
        }
        if depth > 64 {
            return Err(Error::Config("parameter-server tree too deep".into()));
        }
        bottom_up.push(chunk(width, tree.fanout));
    }
    bottom_up.reverse();
    Ok(bottom_up)
}

/// Largest divisor of `c` that is at most `limit` (at least 1).
pub fn window_size(c: usize, limit: usize) -> usize {
    (1..=limit.min(c).max(1)).rev().find(|w| c.is_multiple_of(*w)).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_is_a_star() {
        let t = Topology::build(Arch::Base, 3, TreeSpec::default(), 2).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.children[0], vec![1, 2, 3]);
        assert_eq!(t.learners, vec![1, 2, 3]);
        assert_eq!(t.stats, 4);
        assert!(t.broadcast.iter().all(Vec::is_empty));
    }

    #[test]
    fn two_level_tree_of_four() {
        let spec = TreeSpec {
            learners_per_leaf: 2,
            fanout: 2,
            min_depth: 1,
        };
        let t = Topology::build(Arch::Adv, 4, spec, 2).unwrap();
        assert_eq!(t.children[0], vec![1, 2]);
        assert_eq!(t.children[1], vec![3, 4]);
        assert_eq!(t.children[2], vec![5, 6]);
        assert_eq!(t.leaves(), vec![1, 2]);
        assert_eq!(t.broadcast[0], vec![1, 2]);
        assert_eq!(t.learners_below(0), 4);
    }

    #[test]
    fn chain_of_depth_three() {
        let spec = TreeSpec {
            learners_per_leaf: 1,
            fanout: 1,
            min_depth: 3,
        };
        let t = Topology::build(Arch::Adv, 1, spec, 2).unwrap();
        assert_eq!(t.roles[1], Role::Relay { leaf: false });
        assert_eq!(t.roles[3], Role::Relay { leaf: true });
        assert_eq!(t.parent[4], Some(3));
        assert_eq!(t.parent[3], Some(2));
        assert_eq!(t.parent[2], Some(1));
        assert_eq!(t.parent[1], Some(0));
    }

    #[test]
    fn broadcast_heap() {
        let t = Topology::build(Arch::AdvStar, 5, TreeSpec::default(), 2).unwrap();
        let l = &t.learners;
        assert_eq!(t.broadcast[0], vec![l[0], l[1]]);
        assert_eq!(t.broadcast[l[0]], vec![l[2], l[3]]);
        assert_eq!(t.broadcast[l[1]], vec![l[4]]);
        assert!(t.broadcast[l[2]].is_empty());
    }

    #[test]
    fn windows() {
        assert_eq!(window_size(16, 4), 4);
        assert_eq!(window_size(15, 4), 3);
        assert_eq!(window_size(7, 4), 1);
        assert_eq!(window_size(1, 4), 1);
        assert_eq!(window_size(2, 4), 2);
    }
}

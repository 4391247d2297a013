//! Peer-group planning and the stage-2 cross-testing target set.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::model::{GroupId, PeerGroup, SubmissionId, UserId};

pub const DEFAULT_GROUP_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub user_id: UserId,
    pub campus: Option<String>,
}

impl Candidate {
    pub fn new(user_id: impl Into<UserId>, campus: Option<&str>) -> Self {
        Self {
            user_id: user_id.into(),
            campus: campus.map(str::to_owned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingPlan {
    pub group_size_target: usize,
    pub groups: Vec<PeerGroup>,
}

impl GroupingPlan {
    pub fn group_of(&self, user: &UserId) -> Option<&PeerGroup> {
        self.groups.iter().find(|g| g.members.contains(user))
    }

    /// True when both users are distinct members of the same group.
    pub fn same_group(&self, a: &UserId, b: &UserId) -> bool {
        a != b && self.group_of(a).is_some_and(|g| g.members.contains(b))
    }

    pub fn members(&self) -> BTreeSet<UserId> {
        self.groups
            .iter()
            .flat_map(|g| g.members.iter().cloned())
            .collect()
    }

    pub fn undersized(&self) -> Vec<GroupId> {
        self.groups
            .iter()
            .filter(|g| g.undersized())
            .map(|g| g.group_id.clone())
            .collect()
    }

    /// One group per line, members as comma-separated labels.
    pub fn to_table(&self, label: impl Fn(&UserId) -> String) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let mut names: Vec<String> = g.members.iter().map(&label).collect();
            names.sort();
            out.push_str(&names.join(", "));
            out.push('\n');
        }
        out
    }

    /// Parses the table format written by [`GroupingPlan::to_table`].
    pub fn from_table(
        text: &str,
        group_size_target: usize,
        resolve: impl Fn(&str) -> Option<UserId>,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut groups = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let mut members = BTreeSet::new();
            for label in line.split(',').map(str::trim).filter(|l| !l.is_empty()) {
                let id =
                    resolve(label).ok_or_else(|| CoreError::UnknownStudent(label.to_owned()))?;
                if !seen.insert(id.clone()) {
                    return Err(CoreError::Invalid(format!(
                        "`{label}` appears in more than one group"
                    )));
                }
                members.insert(id);
            }
            groups.push(PeerGroup {
                group_id: GroupId(format!("g{}", groups.len() + 1)),
                members,
            });
        }
        Ok(Self {
            group_size_target,
            groups,
        })
    }

    /// Union of groups equals `enrolled` and groups are pairwise disjoint.
    pub fn is_partition_of(&self, enrolled: &BTreeSet<UserId>) -> bool {
        let total: usize = self.groups.iter().map(|g| g.members.len()).sum();
        total == enrolled.len() && &self.members() == enrolled
    }
}

fn sizes_for(n: usize, k: usize) -> (usize, usize) {
    (n / k, n.div_ceil(k))
}

/// Group sizes for `n` students around `target`, largest first.
///
/// Prefers a group count whose sizes all lie within one of the target and
/// never below two, choosing the mean closest to the target. When no such
/// count exists (a handful of students and a large target) it falls back to
/// the count with the smallest worst-case deviation.
pub fn group_sizes(n: usize, target: usize) -> Vec<usize> {
    assert!(n >= 2 && target >= 2);
    let lo = (target - 1).max(2);
    let hi = target + 1;
    let max_k = n / 2;
    // |n/k - t| compared exactly as |n - k t| / k.
    let distance = |k: usize| ((n as i64 - (k * target) as i64).unsigned_abs() as f64) / k as f64;
    let valid = (1..=max_k).filter(|&k| {
        let (small, large) = sizes_for(n, k);
        small >= lo && large <= hi
    });
    let k = valid
        .min_by(|&a, &b| distance(a).total_cmp(&distance(b)).then(b.cmp(&a)))
        .unwrap_or_else(|| {
            (1..=max_k)
                .min_by_key(|&k| {
                    let (small, large) = sizes_for(n, k);
                    let worst = small.abs_diff(target).max(large.abs_diff(target));
                    (worst, std::cmp::Reverse(k))
                })
                .unwrap_or(1)
        });
    let (small, _) = sizes_for(n, k);
    let extra = n % k;
    (0..k)
        .map(|i| if i < extra { small + 1 } else { small })
        .collect()
}

/// Shuffles students by `seed` and chunks them into groups, then runs a
/// best-effort swap pass mixing campuses.
pub fn form_groups(
    candidates: &[Candidate],
    group_size_target: usize,
    seed: u64,
) -> Result<GroupingPlan> {
    if group_size_target < 2 {
        return Err(CoreError::Invalid(
            "group size target must be at least 2".into(),
        ));
    }
    let mut pool: Vec<Candidate> = candidates.to_vec();
    pool.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    pool.dedup_by(|a, b| a.user_id == b.user_id);
    if pool.len() < 2 {
        return Err(CoreError::TooFewStudents(pool.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let mut chunks: Vec<Vec<Candidate>> = Vec::new();
    let mut rest = pool.as_slice();
    for size in group_sizes(pool.len(), group_size_target) {
        let (head, tail) = rest.split_at(size);
        chunks.push(head.to_vec());
        rest = tail;
    }
    mix_campuses(&mut chunks);

    let groups = chunks
        .into_iter()
        .enumerate()
        .map(|(i, members)| PeerGroup {
            group_id: GroupId(format!("g{}", i + 1)),
            members: members.into_iter().map(|c| c.user_id).collect(),
        })
        .collect();
    Ok(GroupingPlan {
        group_size_target,
        groups,
    })
}

fn distinct_campuses(group: &[Candidate]) -> usize {
    group
        .iter()
        .filter_map(|c| c.campus.as_deref())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Greedy pairwise swaps that strictly increase the total number of distinct
/// campuses per group. Sizes never change.
fn mix_campuses(groups: &mut [Vec<Candidate>]) {
    let campuses: BTreeSet<&str> = groups
        .iter()
        .flatten()
        .filter_map(|c| c.campus.as_deref())
        .collect();
    if campuses.len() < 2 {
        return;
    }
    const MAX_PASSES: usize = 8;
    for _ in 0..MAX_PASSES {
        let mut improved = false;
        for i in 0..groups.len() {
            if distinct_campuses(&groups[i]) > 1 {
                continue;
            }
            'search: for j in 0..groups.len() {
                if i == j {
                    continue;
                }
                for a in 0..groups[i].len() {
                    for b in 0..groups[j].len() {
                        if groups[i][a].campus == groups[j][b].campus {
                            continue;
                        }
                        let before = distinct_campuses(&groups[i]) + distinct_campuses(&groups[j]);
                        swap_members(groups, (i, a), (j, b));
                        let after = distinct_campuses(&groups[i]) + distinct_campuses(&groups[j]);
                        if after > before {
                            improved = true;
                            break 'search;
                        }
                        swap_members(groups, (i, a), (j, b));
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}

fn swap_members(groups: &mut [Vec<Candidate>], (i, a): (usize, usize), (j, b): (usize, usize)) {
    let tmp = groups[i][a].clone();
    groups[i][a] = std::mem::replace(&mut groups[j][b], tmp);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Amendment {
    pub plan: GroupingPlan,
    /// Groups left with fewer than two members, needing teacher action.
    pub undersized: Vec<GroupId>,
    pub changed: bool,
}

/// Moves `student` into `destination`. Students not yet in any group (late
/// enrollments) are simply added.
pub fn amend_group(
    plan: &GroupingPlan,
    student: &UserId,
    destination: &GroupId,
    enrolled: &BTreeSet<UserId>,
) -> Result<Amendment> {
    if !enrolled.contains(student) {
        return Err(CoreError::UnknownStudent(student.to_string()));
    }
    let dest_idx = plan
        .groups
        .iter()
        .position(|g| &g.group_id == destination)
        .ok_or_else(|| CoreError::UnknownGroup(destination.to_string()))?;
    if plan.groups[dest_idx].members.contains(student) {
        return Ok(Amendment {
            plan: plan.clone(),
            undersized: plan.undersized(),
            changed: false,
        });
    }
    let mut next = plan.clone();
    for g in &mut next.groups {
        g.members.remove(student);
    }
    next.groups[dest_idx].members.insert(student.clone());
    next.groups.retain(|g| !g.members.is_empty());
    let undersized = next.undersized();
    Ok(Amendment {
        plan: next,
        undersized,
        changed: true,
    })
}

/// Latest solutions of every other member of `student`'s group. Oracles are
/// never in `latest_solutions`, and neither is the student's own entry used.
pub fn peer_targets(
    student: &UserId,
    plan: &GroupingPlan,
    latest_solutions: &BTreeMap<UserId, SubmissionId>,
) -> Vec<SubmissionId> {
    let Some(group) = plan.group_of(student) else {
        return Vec::new();
    };
    group
        .members
        .iter()
        .filter(|m| *m != student)
        .filter_map(|m| latest_solutions.get(m).cloned())
        .collect()
}

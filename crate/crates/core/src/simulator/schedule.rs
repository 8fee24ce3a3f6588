//! Non-preemptive list scheduling of a task DAG over the three resources.
//!
//! A free lane takes the ready task with the smallest
//! `(ready time, class, layer, expert, id)`. Fast tasks are chained in
//! program order by the builder, so only the interconnect and slow lanes
//! ever choose between several ready tasks.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::cost::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resource {
    Fast,
    Interconnect,
    Slow,
}

impl Resource {
    pub const ALL: [Resource; 3] = [Resource::Fast, Resource::Interconnect, Resource::Slow];

    pub fn name(self) -> &'static str {
        match self {
            Resource::Fast => "fast",
            Resource::Interconnect => "interconnect",
            Resource::Slow => "slow",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NonMoe,
    Gate,
    PredictGate,
    Expert,
    Migrate,
    Prefetch,
    XferOut,
    SlowExpert,
    Precalc,
    XferBack,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::NonMoe => "nonmoe",
            TaskKind::Gate => "gate",
            TaskKind::PredictGate => "predict_gate",
            TaskKind::Expert => "expert",
            TaskKind::Migrate => "migrate",
            TaskKind::Prefetch => "prefetch",
            TaskKind::XferOut => "xfer_out",
            TaskKind::SlowExpert => "slow_expert",
            TaskKind::Precalc => "precalc",
            TaskKind::XferBack => "xfer_back",
        }
    }

    pub fn resource(self) -> Resource {
        match self {
            TaskKind::NonMoe | TaskKind::Gate | TaskKind::PredictGate | TaskKind::Expert => {
                Resource::Fast
            }
            TaskKind::Migrate | TaskKind::Prefetch | TaskKind::XferOut | TaskKind::XferBack => {
                Resource::Interconnect
            }
            TaskKind::SlowExpert | TaskKind::Precalc => Resource::Slow,
        }
    }

    /// Activation transfers win interconnect ties against weight migrations.
    fn class(self) -> u8 {
        match self {
            TaskKind::Migrate | TaskKind::Prefetch => 1,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub kind: TaskKind,
    pub duration: SimTime,
    pub layer: usize,
    pub expert: Option<usize>,
    pub deps: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub start: SimTime,
    pub end: SimTime,
    pub lane: usize,
}

/// Builds a task graph in topological order.
#[derive(Debug, Default)]
pub(crate) struct DagBuilder {
    pub tasks: Vec<Task>,
    last_fast: Option<usize>,
}

impl DagBuilder {
    pub fn push(
        &mut self,
        kind: TaskKind,
        duration: SimTime,
        layer: usize,
        expert: Option<usize>,
        deps: &[usize],
    ) -> usize {
        let id = self.tasks.len();
        let mut deps = deps.to_vec();
        if kind.resource() == Resource::Fast {
            deps.extend(self.last_fast);
            self.last_fast = Some(id);
        }
        deps.sort_unstable();
        deps.dedup();
        self.tasks.push(Task {
            kind,
            duration,
            layer,
            expert,
            deps,
        });
        id
    }

    pub fn last_fast(&self) -> Option<usize> {
        self.last_fast
    }
}

type Key = Reverse<(SimTime, u8, usize, usize, usize)>;

pub(crate) fn schedule(tasks: &[Task], slow_lanes: usize, origin: SimTime) -> Vec<Slot> {
    let n = tasks.len();
    let mut dependents = vec![Vec::new(); n];
    let mut waiting = vec![0usize; n];
    for (id, t) in tasks.iter().enumerate() {
        debug_assert!(t.deps.iter().all(|&d| d < id), "tasks must be topologically ordered");
        waiting[id] = t.deps.len();
        for &d in &t.deps {
            dependents[d].push(id);
        }
    }
    let key = |id: usize, ready: SimTime| -> Key {
        let t = &tasks[id];
        Reverse((
            ready,
            t.kind.class(),
            t.layer,
            t.expert.unwrap_or(usize::MAX),
            id,
        ))
    };

    let mut ready_at = vec![origin; n];
    let mut heaps: [BinaryHeap<Key>; 3] = Default::default();
    let mut lanes: [Vec<SimTime>; 3] = [
        vec![origin],
        vec![origin],
        vec![origin; slow_lanes.max(1)],
    ];
    for id in (0..n).filter(|&id| waiting[id] == 0) {
        heaps[tasks[id].kind.resource().index()].push(key(id, origin));
    }

    let mut slots = vec![
        Slot {
            start: origin,
            end: origin,
            lane: 0,
        };
        n
    ];
    for _ in 0..n {
        let (r, lane, start) = Resource::ALL
            .iter()
            .filter_map(|&r| {
                let Reverse((ready, ..)) = heaps[r.index()].peek()?;
                let (lane, free) = lanes[r.index()]
                    .iter()
                    .copied()
                    .enumerate()
                    .min_by_key(|&(i, free)| (free, i))
                    .expect("every resource has a lane");
                Some((r.index(), lane, (*ready).max(free)))
            })
            .min_by_key(|&(r, _, start)| (start, r))
            .expect("dependency graph is acyclic");
        let Reverse((.., id)) = heaps[r].pop().expect("peeked");
        let end = start + tasks[id].duration;
        lanes[r][lane] = end;
        slots[id] = Slot { start, end, lane };
        for &d in &dependents[id] {
            ready_at[d] = ready_at[d].max(end);
            waiting[d] -= 1;
            if waiting[d] == 0 {
                heaps[tasks[d].kind.resource().index()].push(key(d, ready_at[d]));
            }
        }
    }
    slots
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: f64) -> SimTime {
        SimTime::from_ms(v)
    }

    #[test]
    fn fast_tasks_follow_program_order() {
        let mut b = DagBuilder::default();
        b.push(TaskKind::NonMoe, ms(1.0), 0, None, &[]);
        b.push(TaskKind::Expert, ms(2.0), 0, Some(0), &[]);
        let slots = schedule(&b.tasks, 1, SimTime::ZERO);
        assert_eq!(slots[1].start, ms(1.0));
        assert_eq!(slots[1].end, ms(3.0));
    }

    #[test]
    fn interconnect_prefers_earlier_ready_then_transfers() {
        let mut b = DagBuilder::default();
        let g = b.push(TaskKind::Gate, ms(1.0), 0, None, &[]);
        let m = b.push(TaskKind::Migrate, ms(5.0), 0, Some(3), &[g]);
        let x = b.push(TaskKind::XferOut, ms(0.5), 0, Some(4), &[g]);
        let slots = schedule(&b.tasks, 1, SimTime::ZERO);
        assert_eq!(slots[x].start, ms(1.0));
        assert_eq!(slots[m].start, ms(1.5));
    }

    #[test]
    fn slow_lanes_run_in_parallel() {
        let mut b = DagBuilder::default();
        let a = b.push(TaskKind::SlowExpert, ms(3.0), 0, Some(0), &[]);
        let c = b.push(TaskKind::SlowExpert, ms(3.0), 0, Some(1), &[]);
        let one = schedule(&b.tasks, 1, SimTime::ZERO);
        assert_eq!(one[c].start, ms(3.0));
        let two = schedule(&b.tasks, 2, SimTime::ZERO);
        assert_eq!(two[c].start, SimTime::ZERO);
        assert_ne!(two[a].lane, two[c].lane);
    }

    #[test]
    fn origin_offsets_everything() {
        let mut b = DagBuilder::default();
        b.push(TaskKind::NonMoe, ms(1.0), 0, None, &[]);
        let slots = schedule(&b.tasks, 1, ms(10.0));
        assert_eq!(slots[0].start, ms(10.0));
        assert_eq!(slots[0].end, ms(11.0));
    }
}

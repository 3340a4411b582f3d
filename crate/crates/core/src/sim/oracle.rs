//! Event-queue reference simulation.
//!
//! An independent implementation of the timing rules in [`super::simulate`]
//! used to cross-check the critical-path traversal. Per rank, the CPU actor
//! is replayed first into an instruction tape (CPU time never waits on
//! streams or other ranks, so kernel launch floors are known up front);
//! the tapes are then executed against per-rank compute/communication
//! stream actors, with a barrier event joining every rank's communication
//! stream at each collective. Arithmetic matches [`super::simulate`]
//! operation for operation, so agreement is exact, not approximate.

use std::collections::BTreeMap;

use crate::kernels::LatencyModel;
use crate::trace::{depends_on, ExecutionTrace, Stream, WorldError};

use super::{collective_kind_name, ranks_in_order, OverheadStats, SimError, KERNEL_GAP_US};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr {
    /// Pull both stream fronts up to their maximum.
    SyncStreams,
    /// Execute a kernel on one stream no earlier than `floor_us` past the
    /// stream front.
    Launch {
        comm_stream: bool,
        floor_us: f64,
        duration_us: f64,
    },
    /// Join the all-rank barrier for collective `seq`.
    Barrier { seq: u32, kind_tag: u8 },
}

struct Tape {
    instrs: Vec<Instr>,
    cpu_final_us: f64,
}

fn kind_tag(name: &str) -> u8 {
    match name {
        "all_to_all" => 0,
        _ => 1,
    }
}

fn compile<M: LatencyModel + ?Sized>(
    trace: &ExecutionTrace,
    model: &M,
    overheads: &OverheadStats,
) -> Result<Tape, SimError> {
    let mut instrs = Vec::new();
    let mut cpu = 0.0f64;
    let mut last_comm: Option<usize> = None;

    for (pos, op) in trace.ops.iter().enumerate() {
        let ov = *overheads.for_op(&op.name);
        let is_comm = op.is_comm();
        let dependent = last_comm
            .map(|i| depends_on(op, &trace.ops[i]))
            .unwrap_or(false);
        if dependent || is_comm {
            last_comm = None;
            instrs.push(Instr::SyncStreams);
        }
        cpu += ov.op_call_us;
        if !op.kernels.is_empty() {
            cpu += ov.pre_kernel_us;
            for (ki, kernel) in op.kernels.iter().enumerate() {
                let duration_us = model.kernel_latency(kernel)?;
                instrs.push(Instr::Launch {
                    comm_stream: op.stream == Stream::Communication,
                    floor_us: cpu + ov.launch_us / 2.0,
                    duration_us,
                });
                cpu += ov.launch_us;
                if ki + 1 < op.kernels.len() {
                    cpu += ov.gap_us;
                }
            }
            if is_comm {
                instrs.push(Instr::Barrier {
                    seq: op.collective_seq.expect("comm op has a seq"),
                    kind_tag: kind_tag(collective_kind_name(op)),
                });
            }
            cpu += ov.post_kernel_us;
        } else {
            cpu += ov.gap_us;
        }
        if is_comm {
            last_comm = Some(pos);
        }
    }

    Ok(Tape { instrs, cpu_final_us: cpu })
}

struct StreamActor {
    compute_front: f64,
    comm_front: f64,
    next_instr: usize,
}

/// Independent reference prediction of the per-iteration time. Agrees with
/// [`super::simulate`] exactly on any valid world.
pub fn oracle_simulate<M: LatencyModel + ?Sized>(
    traces: &[ExecutionTrace],
    model: &M,
    overheads: &OverheadStats,
) -> Result<f64, SimError> {
    let ordered = ranks_in_order(traces)?;
    let tapes: Vec<Tape> = ordered
        .iter()
        .map(|t| compile(t, model, overheads))
        .collect::<Result<_, _>>()?;

    let n = tapes.len();
    let mut actors: Vec<StreamActor> = (0..n)
        .map(|_| StreamActor {
            compute_front: 0.0,
            comm_front: 0.0,
            next_instr: 0,
        })
        .collect();

    // barrier arrival events, grouped by collective seq
    let mut arrivals: BTreeMap<u32, Vec<(usize, u8, f64)>> = BTreeMap::new();
    let mut blocked: Vec<Option<u32>> = vec![None; n];

    loop {
        let mut progressed = false;
        for (rank, actor) in actors.iter_mut().enumerate() {
            if blocked[rank].is_some() {
                continue;
            }
            while actor.next_instr < tapes[rank].instrs.len() {
                match tapes[rank].instrs[actor.next_instr] {
                    Instr::SyncStreams => {
                        let front = f64::max(actor.comm_front, actor.compute_front);
                        actor.comm_front = front;
                        actor.compute_front = front;
                    }
                    Instr::Launch { comm_stream, floor_us, duration_us } => {
                        let front = if comm_stream {
                            &mut actor.comm_front
                        } else {
                            &mut actor.compute_front
                        };
                        *front = f64::max(*front + KERNEL_GAP_US, floor_us) + duration_us;
                    }
                    Instr::Barrier { seq, kind_tag } => {
                        arrivals
                            .entry(seq)
                            .or_default()
                            .push((rank, kind_tag, actor.comm_front));
                        blocked[rank] = Some(seq);
                        actor.next_instr += 1;
                        break;
                    }
                }
                actor.next_instr += 1;
                progressed = true;
            }
        }

        // fire every barrier that all ranks have reached, lowest seq first
        let ready: Vec<u32> = arrivals
            .iter()
            .filter(|(_, v)| v.len() == n)
            .map(|(&seq, _)| seq)
            .collect();
        for seq in ready {
            let group = arrivals.remove(&seq).expect("just observed");
            let tag = group[0].1;
            if group.iter().any(|&(_, t, _)| t != tag) {
                return Err(WorldError::CollectiveMismatch(format!(
                    "ranks disagree on the collective kind at seq {seq}"
                ))
                .into());
            }
            let synced = group
                .iter()
                .map(|&(_, _, arrival)| arrival)
                .fold(f64::NEG_INFINITY, f64::max);
            for &(rank, _, _) in &group {
                actors[rank].comm_front = synced;
                blocked[rank] = None;
            }
            progressed = true;
        }

        let done = actors
            .iter()
            .enumerate()
            .filter(|(r, a)| blocked[*r].is_none() && a.next_instr >= tapes[*r].instrs.len())
            .count();
        if done == n {
            break;
        }
        if !progressed {
            return Err(WorldError::CollectiveMismatch(
                "deadlock: ranks wait at collectives that can never complete".into(),
            )
            .into());
        }
    }

    let mut total = 0.0f64;
    for (rank, actor) in actors.iter().enumerate() {
        let local = f64::max(
            actor.comm_front,
            f64::max(actor.compute_front, tapes[rank].cpu_final_us),
        );
        total = f64::max(total, local);
    }
    Ok(total)
}

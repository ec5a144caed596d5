//! Offline trace comparison for tuning the exemption list.
//!
//! Run the same workload twice — once on the host, once inside a VM — and
//! diff the traces. Object operations that succeeded on the host but, inside
//! the VM, were renamed and then failed (or were renamed into a private copy
//! of something the host ecosystem shares) point at names that belong on the
//! exemption list. The proposals can then be merged into a list and the
//! workload re-run until the diff is clean.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use crate::namespace::{ExemptionList, ExemptionPattern};
use crate::trace::{Op, Trace, TraceEvent};

/// How strongly the evidence points at a missing exemption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Confidence {
    /// The renamed operation failed inside the VM while the host succeeded.
    Likely,
    /// Both succeeded, but the VM worked on a renamed (private) object.
    Possible,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Confidence::Likely => "likely",
            Confidence::Possible => "possible",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemptionProposal {
    /// The original (pre-rename) object name, in the host trace's casing.
    pub name: String,
    /// The operation that evidenced the proposal.
    pub op: Op,
    pub confidence: Confidence,
    pub host_step: u64,
    pub vm_step: u64,
}

impl fmt::Display for ExemptionProposal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} op={} host-step={} vm-step={}",
            self.confidence, self.name, self.op, self.host_step, self.vm_step
        )
    }
}

/// Pairs host and VM object operations (create/open/delete) by operation and
/// original argument, in order of occurrence, and proposes exemptions where
/// the host succeeded but the VM's renamed counterpart failed (`Likely`) or
/// silently went to a private name (`Possible`). One proposal per name; the
/// strongest evidence wins.
pub fn diff_traces(host: &Trace, vm: &Trace) -> Vec<ExemptionProposal> {
    let object_events = |t: &Trace| -> Vec<TraceEvent> {
        t.events()
            .iter()
            .filter(|e| e.op.is_object_op())
            .cloned()
            .collect()
    };
    let host_events = object_events(host);
    let vm_events = object_events(vm);

    // Per (op, case-folded arg) queues of VM events, consumed front-first so
    // repeated uses of one name pair up in order.
    let mut vm_queues: BTreeMap<(Op, String), VecDeque<&TraceEvent>> = BTreeMap::new();
    for ev in &vm_events {
        vm_queues
            .entry((ev.op, ev.arg.to_lowercase()))
            .or_default()
            .push_back(ev);
    }

    let mut proposals: Vec<ExemptionProposal> = Vec::new();
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
    for h in &host_events {
        let Some(queue) = vm_queues.get_mut(&(h.op, h.arg.to_lowercase())) else {
            continue;
        };
        let Some(v) = queue.pop_front() else { continue };
        if !h.ok() || !v.renamed() {
            continue;
        }
        let confidence = if !v.ok() {
            Confidence::Likely
        } else {
            Confidence::Possible
        };
        let proposal = ExemptionProposal {
            name: h.arg.clone(),
            op: h.op,
            confidence,
            host_step: h.step,
            vm_step: v.step,
        };
        match by_name.get(&h.arg.to_lowercase()) {
            Some(&i) => {
                if confidence < proposals[i].confidence {
                    proposals[i] = proposal;
                }
            }
            None => {
                by_name.insert(h.arg.to_lowercase(), proposals.len());
                proposals.push(proposal);
            }
        }
    }

    proposals.sort_by(|a, b| {
        (a.confidence, a.host_step, a.name.to_lowercase())
            .cmp(&(b.confidence, b.host_step, b.name.to_lowercase()))
    });
    proposals
}

/// The result of folding proposals into an exemption list.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub list: ExemptionList,
    /// Display forms of the patterns this merge actually added.
    pub added: Vec<String>,
}

/// Merges proposals into a copy of `base`. Proposed names that differ only
/// in a trailing digit run are collapsed into one numeric wildcard when at
/// least two distinct suffixes were seen; everything else is added verbatim.
/// Patterns already present are not duplicated.
pub fn merge_proposals(base: &ExemptionList, proposals: &[ExemptionProposal]) -> MergeOutcome {
    // stem key -> (stem display, distinct digit suffixes, full display names)
    let mut stems: BTreeMap<String, (String, Vec<String>, Vec<String>)> = BTreeMap::new();
    let mut singles: Vec<String> = Vec::new();
    for p in proposals {
        let (stem, digits) = split_digit_tail(&p.name);
        if digits.is_empty() || stem.is_empty() {
            singles.push(p.name.clone());
            continue;
        }
        let entry = stems
            .entry(stem.to_lowercase())
            .or_insert_with(|| (stem.to_string(), Vec::new(), Vec::new()));
        if !entry.1.contains(&digits.to_string()) {
            entry.1.push(digits.to_string());
        }
        entry.2.push(p.name.clone());
    }

    let mut patterns: Vec<ExemptionPattern> = Vec::new();
    for p in &singles {
        patterns.push(ExemptionPattern::literal(p));
    }
    for (_, (stem, suffixes, names)) in stems {
        if suffixes.len() >= 2 {
            patterns.push(ExemptionPattern::numeric_wildcard(&stem));
        } else {
            for name in names {
                patterns.push(ExemptionPattern::literal(&name));
            }
        }
    }

    let mut list = base.clone();
    let mut added = Vec::new();
    for pattern in patterns {
        let canon = pattern.canonical();
        if list.patterns().iter().any(|p| p.canonical() == canon) {
            continue;
        }
        added.push(pattern.to_string());
        list.add(pattern);
    }
    added.sort_by_key(|s| s.to_lowercase());
    added.dedup_by_key(|s| s.to_lowercase());
    MergeOutcome { list, added }
}

/// Splits off the longest trailing ASCII digit run.
fn split_digit_tail(s: &str) -> (&str, &str) {
    let digits = s.chars().rev().take_while(|c| c.is_ascii_digit()).count();
    s.split_at(s.len() - digits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::RESULT_OK;
    use crate::types::{Pid, Placement, VmId};

    fn host_ev(step: u64, op: Op, arg: &str, result: &str) -> TraceEvent {
        TraceEvent {
            step,
            pid: Pid(3),
            vm: Placement::Host,
            op,
            arg: arg.to_string(),
            xarg: arg.to_string(),
            result: result.to_string(),
        }
    }

    fn vm_ev(step: u64, op: Op, arg: &str, xarg: &str, result: &str) -> TraceEvent {
        TraceEvent {
            step,
            pid: Pid(7),
            vm: Placement::Vm(VmId::new(1).unwrap()),
            op,
            arg: arg.to_string(),
            xarg: xarg.to_string(),
            result: result.to_string(),
        }
    }

    fn trace(events: Vec<TraceEvent>) -> Trace {
        let mut t = Trace::new();
        for e in events {
            t.push(e);
        }
        t
    }

    #[test]
    fn renamed_vm_failure_with_host_success_is_likely() {
        let host = trace(vec![host_ev(4, Op::Open, r"\BaseNamedObjects\ScmCreatedEvent", RESULT_OK)]);
        let vm = trace(vec![vm_ev(
            9,
            Op::Open,
            r"\BaseNamedObjects\ScmCreatedEvent",
            r"\BaseNamedObjects\ScmCreatedEvent-vm1",
            "not-found",
        )]);
        let proposals = diff_traces(&host, &vm);
        assert_eq!(proposals.len(), 1);
        let p = &proposals[0];
        assert_eq!(p.confidence, Confidence::Likely);
        assert_eq!(p.name, r"\BaseNamedObjects\ScmCreatedEvent");
        assert_eq!((p.host_step, p.vm_step), (4, 9));
    }

    #[test]
    fn renamed_vm_success_is_only_possible() {
        let host = trace(vec![host_ev(1, Op::Create, r"\RPC Control\DNSResolver", RESULT_OK)]);
        let vm = trace(vec![vm_ev(
            2,
            Op::Create,
            r"\RPC Control\DNSResolver",
            r"\RPC Control\DNSResolver-vm1",
            RESULT_OK,
        )]);
        let proposals = diff_traces(&host, &vm);
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].confidence, Confidence::Possible);
    }

    #[test]
    fn non_candidates_produce_nothing() {
        // Host failure, un-renamed VM op, unmatched events, non-object ops.
        let host = trace(vec![
            host_ev(1, Op::Open, r"\A\HostFailed", "not-found"),
            host_ev(2, Op::Open, r"\A\NotRenamed", RESULT_OK),
            host_ev(3, Op::Open, r"\A\HostOnly", RESULT_OK),
            host_ev(4, Op::OpenService, "RpcSs", RESULT_OK),
        ]);
        let vm = trace(vec![
            vm_ev(1, Op::Open, r"\A\HostFailed", r"\A\HostFailed-vm1", "not-found"),
            vm_ev(2, Op::Open, r"\A\NotRenamed", r"\A\NotRenamed", "not-found"),
            vm_ev(3, Op::Open, r"\A\VmOnly", r"\A\VmOnly-vm1", "not-found"),
            vm_ev(4, Op::OpenService, "RpcSs", "RpcSs-vm1", "not-found"),
        ]);
        assert!(diff_traces(&host, &vm).is_empty());
    }

    #[test]
    fn repeated_evidence_is_deduplicated_and_upgraded() {
        let name = r"\BaseNamedObjects\Shared";
        let host = trace(vec![
            host_ev(1, Op::Create, name, RESULT_OK),
            host_ev(2, Op::Open, name, RESULT_OK),
        ]);
        let vm = trace(vec![
            vm_ev(5, Op::Create, name, &format!("{name}-vm1"), RESULT_OK),
            vm_ev(6, Op::Open, name, &format!("{name}-vm1"), "not-found"),
        ]);
        let proposals = diff_traces(&host, &vm);
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].confidence, Confidence::Likely);
        assert_eq!(proposals[0].vm_step, 6);
    }

    #[test]
    fn matching_pairs_by_occurrence_order() {
        // Two creates of the same name (host recreates after delete); the
        // second VM create failed. They must pair first-first/second-second.
        let name = r"\BaseNamedObjects\Cycle";
        let host = trace(vec![
            host_ev(1, Op::Create, name, RESULT_OK),
            host_ev(2, Op::Create, name, RESULT_OK),
        ]);
        let vm = trace(vec![
            vm_ev(1, Op::Create, name, &format!("{name}-vm1"), RESULT_OK),
            vm_ev(2, Op::Create, name, &format!("{name}-vm1"), "already-exists"),
        ]);
        let proposals = diff_traces(&host, &vm);
        assert_eq!(proposals.len(), 1);
        assert_eq!(proposals[0].confidence, Confidence::Likely);
        assert_eq!(proposals[0].host_step, 2);
    }

    fn proposal(name: &str) -> ExemptionProposal {
        ExemptionProposal {
            name: name.to_string(),
            op: Op::Open,
            confidence: Confidence::Likely,
            host_step: 1,
            vm_step: 1,
        }
    }

    #[test]
    fn numeric_siblings_collapse_into_one_wildcard() {
        let proposals = vec![
            proposal(r"\Device\NamedPipe\net\NtControlPipe1"),
            proposal(r"\Device\NamedPipe\net\NtControlPipe3"),
            proposal(r"\BaseNamedObjects\JustOne7"),
            proposal(r"\RPC Control\ntsvcs"),
        ];
        let outcome = merge_proposals(&ExemptionList::empty(), &proposals);
        assert_eq!(
            outcome.added,
            vec![
                r"\BaseNamedObjects\JustOne7".to_string(),
                r"\Device\NamedPipe\net\NtControlPipe*".to_string(),
                r"\RPC Control\ntsvcs".to_string(),
            ]
        );
        let list = outcome.list;
        assert!(list.is_exempt(&crate::types::ObjectName::new(r"\Device\NamedPipe\net\NtControlPipe42").unwrap()));
        assert!(!list.is_exempt(&crate::types::ObjectName::new(r"\BaseNamedObjects\JustOne9").unwrap()));
    }

    #[test]
    fn merging_into_a_list_that_already_covers_adds_nothing() {
        let base = ExemptionList::shipped();
        let proposals = vec![
            proposal(r"\Device\NamedPipe\net\NtControlPipe2"),
            proposal(r"\Device\NamedPipe\net\NtControlPipe5"),
            proposal(r"\RPC Control\ntsvcs"),
        ];
        let outcome = merge_proposals(&base, &proposals);
        assert!(outcome.added.is_empty(), "added: {:?}", outcome.added);
        assert_eq!(outcome.list.len(), base.len());
    }
}

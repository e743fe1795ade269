//! Simulated coordination contract: an in-process, deterministic stand-in
//! for the on-chain component of a swarm-learning deployment.
//!
//! The contract is a ledgered state machine. Clients register when local
//! training finishes, one aggregator per stream subset is elected by
//! seeded hash, parameter payloads flow through per-client mailboxes, and
//! every transfer lands in an append-only ledger as a payload digest.
//! Raw records never enter the contract; only model parameters do.
//!
//! The ledger plus the payload archive suffice to re-derive every
//! aggregate independently; [`replay_ledger`] does exactly that and is
//! the integrity check for the whole exchange.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::aggregate::{fed_average_with, AggregationRule, WeightedParams};
use crate::hashing::{digest64, election_hash};
use crate::nn::{params_bytes, ModelParams};
use crate::streams::StreamSubset;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("invalid address {0:?}")]
    InvalidAddress(String),
    #[error("{0} is already registered this round")]
    DuplicateRegistration(Address),
    #[error("{0} is not registered this round")]
    NotRegistered(Address),
    #[error("registration for round {0} has closed")]
    RegistrationClosed(u64),
    #[error("no clients registered")]
    NoRegistrants,
    #[error("subset {0} already has an aggregator this round")]
    AlreadyElected(StreamSubset),
    #[error("no aggregator elected for subset {0}")]
    NoAggregator(StreamSubset),
    #[error("{addr} is not the aggregator for {subset}")]
    NotAggregator { addr: Address, subset: StreamSubset },
    #[error("{addr} already submitted parameters for {subset} this round")]
    DuplicateSubmission { addr: Address, subset: StreamSubset },
    #[error("aggregate for {0} was already broadcast this round")]
    DuplicateBroadcast(StreamSubset),
    #[error("ledger line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("ledger invariant violated at seq {seq}: {message}")]
    InvariantViolation { seq: u64, message: String },
    #[error("digest {0:016x} missing from the payload archive")]
    UnknownDigest(u64),
    #[error("archived payload {0:016x} does not hash to its digest")]
    ArchiveCorrupt(u64),
    #[error("replayed aggregate for round {round} subset {subset} hashes to {got:016x}, ledger says {expected:016x}")]
    ReplayMismatch { round: u64, subset: StreamSubset, expected: u64, got: u64 },
}

/// Client identity on the contract. Lexicographic order of addresses is
/// the canonical fold order for aggregation.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(String);

impl Address {
    pub fn new(addr: impl Into<String>) -> Result<Self, ChainError> {
        let addr = addr.into();
        if addr.is_empty() || addr.chars().any(|c| c.is_whitespace()) || addr == "-" {
            return Err(ChainError::InvalidAddress(addr));
        }
        Ok(Address(addr))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// What a ledger entry records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum LedgerKind {
    /// A client finished local training for the round.
    Registered,
    /// A subset got its aggregator.
    Elected,
    /// A subset had no eligible candidates this round.
    NoCandidates,
    /// A client handed parameters to the contract.
    ParamsSubmitted,
    /// The contract delivered those parameters to the aggregator.
    ParamsDelivered,
    /// The aggregator published the averaged parameters.
    AggregateBroadcast,
}

impl LedgerKind {
    /// Parameter-bearing kinds carry a payload digest; the rest must not.
    pub fn carries_digest(self) -> bool {
        matches!(
            self,
            LedgerKind::ParamsSubmitted | LedgerKind::ParamsDelivered | LedgerKind::AggregateBroadcast
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LedgerKind::Registered => "Registered",
            LedgerKind::Elected => "Elected",
            LedgerKind::NoCandidates => "NoCandidates",
            LedgerKind::ParamsSubmitted => "ParamsSubmitted",
            LedgerKind::ParamsDelivered => "ParamsDelivered",
            LedgerKind::AggregateBroadcast => "AggregateBroadcast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "Registered" => LedgerKind::Registered,
            "Elected" => LedgerKind::Elected,
            "NoCandidates" => LedgerKind::NoCandidates,
            "ParamsSubmitted" => LedgerKind::ParamsSubmitted,
            "ParamsDelivered" => LedgerKind::ParamsDelivered,
            "AggregateBroadcast" => LedgerKind::AggregateBroadcast,
            _ => return None,
        })
    }
}

/// One append-only ledger record. Sequence numbers start at 1 and
/// increase by 1; the text form is one tab-separated line with `-` for
/// absent fields and digests as 16 hex digits.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerEntry {
    pub seq: u64,
    pub round: u64,
    pub kind: LedgerKind,
    pub subset: Option<StreamSubset>,
    pub from: Option<Address>,
    pub to: Option<Address>,
    pub digest: Option<u64>,
}

impl LedgerEntry {
    pub fn to_line(&self) -> String {
        let opt = |s: Option<String>| s.unwrap_or_else(|| "-".to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.seq,
            self.round,
            self.kind.as_str(),
            opt(self.subset.as_ref().map(|s| s.key())),
            opt(self.from.as_ref().map(|a| a.0.clone())),
            opt(self.to.as_ref().map(|a| a.0.clone())),
            opt(self.digest.map(|d| format!("{d:016x}"))),
        )
    }

    pub fn parse_line(lineno: usize, line: &str) -> Result<Self, ChainError> {
        let err = |message: String| ChainError::ParseError { line: lineno, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 fields, got {}", fields.len())));
        }
        let seq = fields[0].parse().map_err(|_| err(format!("bad seq {:?}", fields[0])))?;
        let round = fields[1].parse().map_err(|_| err(format!("bad round {:?}", fields[1])))?;
        let kind = LedgerKind::parse(fields[2]).ok_or_else(|| err(format!("unknown kind {:?}", fields[2])))?;
        let subset = match fields[3] {
            "-" => None,
            key => Some(StreamSubset::parse_key(key).map_err(|e| err(e.to_string()))?),
        };
        let addr = |f: &str| -> Result<Option<Address>, ChainError> {
            match f {
                "-" => Ok(None),
                a => Ok(Some(Address::new(a).map_err(|e| err(e.to_string()))?)),
            }
        };
        let from = addr(fields[4])?;
        let to = addr(fields[5])?;
        let digest = match fields[6] {
            "-" => None,
            d if d.len() == 16 => {
                Some(u64::from_str_radix(d, 16).map_err(|_| err(format!("bad digest {d:?}")))?)
            }
            d => return Err(err(format!("bad digest {d:?}"))),
        };
        Ok(LedgerEntry { seq, round, kind, subset, from, to, digest })
    }
}

/// How aggregators are picked among candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ElectionPolicy {
    /// `election_hash(seed, round, subset) % candidates`; deterministic
    /// and uniform across rounds.
    #[default]
    Hashed,
    /// `round % candidates`; handy in tests.
    RoundRobin,
}

/// Result of one subset's election. `elected` is `None` when nobody
/// qualified.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractEvent {
    pub round: u64,
    pub subset: StreamSubset,
    pub elected: Option<Address>,
}

/// A payload handed to a client when it polls its mailbox.
#[derive(Clone, Debug, PartialEq)]
pub enum Delivery {
    /// A cohort member's parameters, delivered to the aggregator.
    Contribution { subset: StreamSubset, from: Address, contribution: WeightedParams },
    /// An aggregator's broadcast, delivered to every cohort member.
    Aggregate { subset: StreamSubset, params: ModelParams },
}

/// Everything the contract archived about one payload digest. The
/// archive is the simulation-side record that lets [`replay_ledger`]
/// re-derive aggregates; a real deployment would fetch payloads from its
/// peers instead.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchivedPayload {
    pub subset: StreamSubset,
    pub params: ModelParams,
    pub n_samples: u64,
}

/// Observable contract state.
#[derive(Clone, Debug, Default)]
pub struct ContractState {
    pub round: u64,
    /// Clients registered as finished this round.
    pub finished: BTreeSet<Address>,
    /// Subsets each registrant trained this round.
    pub trained: BTreeMap<Address, BTreeSet<StreamSubset>>,
    /// Elected aggregator per subset, current round.
    pub aggregator_storage: BTreeMap<StreamSubset, Address>,
    /// Clients that crashed; excluded from elections and deliveries.
    pub dropped: BTreeSet<Address>,
}

/// The simulated contract.
pub struct Contract {
    state: ContractState,
    rng_seed: u64,
    policy: ElectionPolicy,
    ledger: Vec<LedgerEntry>,
    next_seq: u64,
    election_done: bool,
    pending_broadcast: BTreeSet<StreamSubset>,
    submitted: BTreeSet<(Address, StreamSubset)>,
    mailboxes: BTreeMap<Address, Vec<Delivery>>,
    archive: BTreeMap<u64, ArchivedPayload>,
}

impl Contract {
    pub fn new(rng_seed: u64, policy: ElectionPolicy) -> Self {
        Contract {
            state: ContractState::default(),
            rng_seed,
            policy,
            ledger: Vec::new(),
            next_seq: 1,
            election_done: false,
            pending_broadcast: BTreeSet::new(),
            submitted: BTreeSet::new(),
            mailboxes: BTreeMap::new(),
            archive: BTreeMap::new(),
        }
    }

    pub fn round(&self) -> u64 {
        self.state.round
    }

    pub fn state(&self) -> &ContractState {
        &self.state
    }

    pub fn ledger(&self) -> &[LedgerEntry] {
        &self.ledger
    }

    pub fn archive(&self) -> &BTreeMap<u64, ArchivedPayload> {
        &self.archive
    }

    /// True once this round's election has run.
    pub fn election_done(&self) -> bool {
        self.election_done
    }

    pub fn aggregator_for(&self, subset: &StreamSubset) -> Option<&Address> {
        self.state.aggregator_storage.get(subset)
    }

    /// Subsets `addr` must aggregate this round.
    pub fn assignments_for(&self, addr: &Address) -> Vec<StreamSubset> {
        self.state
            .aggregator_storage
            .iter()
            .filter(|(_, a)| *a == addr)
            .map(|(s, _)| s.clone())
            .collect()
    }

    /// Registered, non-dropped clients that trained `subset` this round,
    /// in address order. This is both the expected contributor set and
    /// the broadcast recipient list.
    pub fn expected_contributors(&self, subset: &StreamSubset) -> Vec<Address> {
        self.state
            .trained
            .iter()
            .filter(|(addr, subs)| !self.state.dropped.contains(addr) && subs.contains(subset))
            .map(|(addr, _)| addr.clone())
            .collect()
    }

    fn append(
        &mut self,
        kind: LedgerKind,
        subset: Option<StreamSubset>,
        from: Option<Address>,
        to: Option<Address>,
        digest: Option<u64>,
    ) {
        debug_assert_eq!(kind.carries_digest(), digest.is_some());
        let entry = LedgerEntry {
            seq: self.next_seq,
            round: self.state.round,
            kind,
            subset,
            from,
            to,
            digest,
        };
        self.next_seq += 1;
        self.ledger.push(entry);
    }

    /// Marks a client as finished with local training for this round and
    /// records which subsets it trained. Rejected once the round's
    /// election has run, and on repeat registration; the ledger is
    /// untouched by rejections.
    pub fn register_finished(
        &mut self,
        client: &Address,
        trained: &[StreamSubset],
    ) -> Result<(), ChainError> {
        if self.election_done {
            return Err(ChainError::RegistrationClosed(self.state.round));
        }
        if self.state.finished.contains(client) {
            return Err(ChainError::DuplicateRegistration(client.clone()));
        }
        self.state.finished.insert(client.clone());
        self.state
            .trained
            .insert(client.clone(), trained.iter().cloned().collect());
        self.append(LedgerKind::Registered, None, Some(client.clone()), None, None);
        Ok(())
    }

    /// Runs the election for the given subsets. For each subset the
    /// candidates are the registered, non-dropped clients that trained
    /// it; the winner is picked by the configured policy. Subsets
    /// without candidates get a `NoCandidates` ledger entry and no
    /// aggregator. Closes registration for the round.
    pub fn elect_aggregators(
        &mut self,
        subsets: &[StreamSubset],
    ) -> Result<Vec<ContractEvent>, ChainError> {
        if self.state.finished.is_empty() {
            return Err(ChainError::NoRegistrants);
        }
        for subset in subsets {
            if self.state.aggregator_storage.contains_key(subset) {
                return Err(ChainError::AlreadyElected(subset.clone()));
            }
        }
        self.election_done = true;
        let mut events = Vec::with_capacity(subsets.len());
        for subset in subsets {
            let candidates = self.expected_contributors(subset);
            if candidates.is_empty() {
                self.append(LedgerKind::NoCandidates, Some(subset.clone()), None, None, None);
                events.push(ContractEvent {
                    round: self.state.round,
                    subset: subset.clone(),
                    elected: None,
                });
                continue;
            }
            let idx = match self.policy {
                ElectionPolicy::Hashed => {
                    election_hash(self.rng_seed, self.state.round, &subset.key())
                        % candidates.len() as u64
                }
                ElectionPolicy::RoundRobin => self.state.round % candidates.len() as u64,
            } as usize;
            let winner = candidates[idx].clone();
            self.state.aggregator_storage.insert(subset.clone(), winner.clone());
            self.pending_broadcast.insert(subset.clone());
            self.append(LedgerKind::Elected, Some(subset.clone()), None, Some(winner.clone()), None);
            events.push(ContractEvent {
                round: self.state.round,
                subset: subset.clone(),
                elected: Some(winner),
            });
        }
        Ok(events)
    }

    /// Accepts one client's parameters for one subset and delivers them
    /// to the subset's aggregator. Appends matching `ParamsSubmitted`
    /// and `ParamsDelivered` entries; rejections leave no trace.
    pub fn submit_params(
        &mut self,
        from: &Address,
        subset: &StreamSubset,
        params: ModelParams,
        n_samples: u64,
    ) -> Result<(), ChainError> {
        if !self.state.finished.contains(from) {
            return Err(ChainError::NotRegistered(from.clone()));
        }
        let aggregator = self
            .state
            .aggregator_storage
            .get(subset)
            .cloned()
            .ok_or_else(|| ChainError::NoAggregator(subset.clone()))?;
        let slot = (from.clone(), subset.clone());
        if self.submitted.contains(&slot) {
            return Err(ChainError::DuplicateSubmission {
                addr: from.clone(),
                subset: subset.clone(),
            });
        }
        let digest = digest64(&params_bytes(&subset.key(), &params));
        self.submitted.insert(slot);
        self.archive.insert(
            digest,
            ArchivedPayload { subset: subset.clone(), params: params.clone(), n_samples },
        );
        self.append(
            LedgerKind::ParamsSubmitted,
            Some(subset.clone()),
            Some(from.clone()),
            Some(aggregator.clone()),
            Some(digest),
        );
        self.append(
            LedgerKind::ParamsDelivered,
            Some(subset.clone()),
            Some(from.clone()),
            Some(aggregator.clone()),
            Some(digest),
        );
        self.mailboxes.entry(aggregator).or_default().push(Delivery::Contribution {
            subset: subset.clone(),
            from: from.clone(),
            contribution: WeightedParams { params, n_samples },
        });
        Ok(())
    }

    /// Publishes a subset's aggregate. Only the elected aggregator may
    /// call this, once per round; the payload is delivered to every
    /// non-dropped client that trained the subset (the aggregator
    /// included). When every elected subset has broadcast, the round
    /// closes and the next one opens.
    pub fn broadcast_aggregate(
        &mut self,
        from: &Address,
        subset: &StreamSubset,
        params: ModelParams,
    ) -> Result<(), ChainError> {
        match self.state.aggregator_storage.get(subset) {
            Some(a) if a == from => {}
            _ => {
                return Err(ChainError::NotAggregator {
                    addr: from.clone(),
                    subset: subset.clone(),
                })
            }
        }
        if !self.pending_broadcast.contains(subset) {
            return Err(ChainError::DuplicateBroadcast(subset.clone()));
        }
        let digest = digest64(&params_bytes(&subset.key(), &params));
        let total: u64 = self
            .ledger
            .iter()
            .filter(|e| {
                e.kind == LedgerKind::ParamsSubmitted
                    && e.round == self.state.round
                    && e.subset.as_ref() == Some(subset)
            })
            .filter_map(|e| e.digest)
            .filter_map(|d| self.archive.get(&d))
            .map(|p| p.n_samples)
            .sum();
        self.archive.insert(
            digest,
            ArchivedPayload { subset: subset.clone(), params: params.clone(), n_samples: total },
        );
        self.append(
            LedgerKind::AggregateBroadcast,
            Some(subset.clone()),
            Some(from.clone()),
            None,
            Some(digest),
        );
        for recipient in self.expected_contributors(subset) {
            self.mailboxes.entry(recipient).or_default().push(Delivery::Aggregate {
                subset: subset.clone(),
                params: params.clone(),
            });
        }
        self.pending_broadcast.remove(subset);
        if self.pending_broadcast.is_empty() {
            self.advance_round();
        }
        Ok(())
    }

    fn advance_round(&mut self) {
        self.state.round += 1;
        self.state.finished.clear();
        self.state.trained.clear();
        self.state.aggregator_storage.clear();
        self.submitted.clear();
        self.election_done = false;
    }

    /// Drains a client's mailbox. Delivery order is submission order.
    pub fn fetch_deliveries(&mut self, addr: &Address) -> Vec<Delivery> {
        self.mailboxes.remove(addr).unwrap_or_default()
    }

    /// Marks a client as crashed. It stops receiving deliveries and is
    /// excluded from candidate sets and expected-contributor lists from
    /// now on. Dropping an already-elected aggregator is the caller's
    /// responsibility to avoid; the contract cannot re-elect mid-round.
    pub fn mark_dropout(&mut self, addr: &Address) {
        self.state.dropped.insert(addr.clone());
    }

    pub fn is_dropped(&self, addr: &Address) -> bool {
        self.state.dropped.contains(addr)
    }

    /// The full ledger as text, one entry per line.
    pub fn export_ledger(&self) -> String {
        let mut out = String::new();
        for e in &self.ledger {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }
}

/// Parses a ledger exported by [`Contract::export_ledger`].
pub fn parse_ledger(text: &str) -> Result<Vec<LedgerEntry>, ChainError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| LedgerEntry::parse_line(i + 1, l))
        .collect()
}

/// Per-kind entry counts plus basic shape facts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LedgerStats {
    pub entries: usize,
    pub rounds: u64,
    pub counts: BTreeMap<&'static str, usize>,
}

/// Structural ledger verification: consecutive sequence numbers from 1,
/// nondecreasing rounds, digests exactly on parameter-bearing kinds, at
/// most one election per (round, subset), elected clients registered in
/// the same round, and submissions matched 1:1 by deliveries.
pub fn verify_ledger(entries: &[LedgerEntry]) -> Result<LedgerStats, ChainError> {
    let mut stats = LedgerStats::default();
    let mut last_round = 0u64;
    let mut registered: BTreeSet<(u64, &Address)> = BTreeSet::new();
    let mut elected: BTreeSet<(u64, &StreamSubset)> = BTreeSet::new();
    let mut submissions: BTreeMap<(u64, &StreamSubset, &Address, u64), i64> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let fail = |message: String| ChainError::InvariantViolation { seq: e.seq, message };
        if e.seq != i as u64 + 1 {
            return Err(fail(format!("expected seq {}, found {}", i + 1, e.seq)));
        }
        if e.round < last_round {
            return Err(fail(format!("round {} after round {last_round}", e.round)));
        }
        last_round = e.round;
        if e.digest.is_some() != e.kind.carries_digest() {
            return Err(fail(format!("digest presence wrong for {}", e.kind.as_str())));
        }
        *stats.counts.entry(e.kind.as_str()).or_default() += 1;
        match e.kind {
            LedgerKind::Registered => {
                let from = e.from.as_ref().ok_or_else(|| fail("Registered without from".into()))?;
                if !registered.insert((e.round, from)) {
                    return Err(fail(format!("{from} registered twice in round {}", e.round)));
                }
            }
            LedgerKind::Elected => {
                let subset = e.subset.as_ref().ok_or_else(|| fail("Elected without subset".into()))?;
                let to = e.to.as_ref().ok_or_else(|| fail("Elected without to".into()))?;
                if !elected.insert((e.round, subset)) {
                    return Err(fail(format!("subset {subset} elected twice in round {}", e.round)));
                }
                if !registered.contains(&(e.round, to)) {
                    return Err(fail(format!("elected {to} never registered in round {}", e.round)));
                }
            }
            LedgerKind::NoCandidates => {
                if e.subset.is_none() {
                    return Err(fail("NoCandidates without subset".into()));
                }
            }
            LedgerKind::ParamsSubmitted | LedgerKind::ParamsDelivered => {
                let subset = e.subset.as_ref().ok_or_else(|| fail("submission without subset".into()))?;
                let from = e.from.as_ref().ok_or_else(|| fail("submission without from".into()))?;
                if !elected.contains(&(e.round, subset)) {
                    return Err(fail(format!("submission for unelected subset {subset}")));
                }
                let key = (e.round, subset, from, e.digest.expect("checked above"));
                let delta = if e.kind == LedgerKind::ParamsSubmitted { 1 } else { -1 };
                *submissions.entry(key).or_default() += delta;
                if submissions[&key] < 0 {
                    return Err(fail("delivery without matching submission".into()));
                }
            }
            LedgerKind::AggregateBroadcast => {
                let subset = e.subset.as_ref().ok_or_else(|| fail("broadcast without subset".into()))?;
                if !elected.contains(&(e.round, subset)) {
                    return Err(fail(format!("broadcast for unelected subset {subset}")));
                }
                let from = e.from.as_ref().ok_or_else(|| fail("broadcast without from".into()))?;
                if !registered.contains(&(e.round, from)) {
                    return Err(fail(format!("broadcaster {from} never registered in round {}", e.round)));
                }
            }
        }
    }
    if let Some((key, n)) = submissions.iter().find(|(_, n)| **n != 0) {
        return Err(ChainError::InvariantViolation {
            seq: entries.last().map_or(0, |e| e.seq),
            message: format!("submission {key:?} has {n} unmatched entries"),
        });
    }
    stats.entries = entries.len();
    stats.rounds = entries.last().map_or(0, |e| e.round + 1);
    Ok(stats)
}

/// Replay outcome: every broadcast digest re-derived from submitted
/// payloads, keyed by (round, subset key).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayOutcome {
    pub aggregates_checked: usize,
    pub digests: BTreeMap<(u64, String), u64>,
}

/// Re-derives every aggregate in the ledger from the archived payloads
/// and checks it hashes to the broadcast digest. The fold order is
/// contributor address order, matching what honest aggregators compute,
/// so any divergence flags a bad aggregate (or a tampered ledger).
pub fn replay_ledger(
    entries: &[LedgerEntry],
    archive: &BTreeMap<u64, ArchivedPayload>,
    rule: AggregationRule,
) -> Result<ReplayOutcome, ChainError> {
    verify_ledger(entries)?;
    let mut outcome = ReplayOutcome::default();
    let mut pending: BTreeMap<(u64, StreamSubset), Vec<(Address, u64)>> = BTreeMap::new();
    for e in entries {
        match e.kind {
            LedgerKind::ParamsSubmitted => {
                let subset = e.subset.clone().expect("verified");
                let from = e.from.clone().expect("verified");
                let digest = e.digest.expect("verified");
                pending.entry((e.round, subset)).or_default().push((from, digest));
            }
            LedgerKind::AggregateBroadcast => {
                let subset = e.subset.clone().expect("verified");
                let expected = e.digest.expect("verified");
                let mut contribs = pending.remove(&(e.round, subset.clone())).unwrap_or_default();
                contribs.sort_by(|a, b| a.0.cmp(&b.0));
                let mut weighted = Vec::with_capacity(contribs.len());
                for (_, digest) in &contribs {
                    let payload =
                        archive.get(digest).ok_or(ChainError::UnknownDigest(*digest))?;
                    let check = digest64(&params_bytes(&payload.subset.key(), &payload.params));
                    if check != *digest {
                        return Err(ChainError::ArchiveCorrupt(*digest));
                    }
                    weighted.push(WeightedParams {
                        params: payload.params.clone(),
                        n_samples: payload.n_samples,
                    });
                }
                let agg = fed_average_with(rule, &weighted).map_err(|_| {
                    ChainError::ReplayMismatch {
                        round: e.round,
                        subset: subset.clone(),
                        expected,
                        got: 0,
                    }
                })?;
                let got = digest64(&params_bytes(&subset.key(), &agg));
                if got != expected {
                    return Err(ChainError::ReplayMismatch { round: e.round, subset, expected, got });
                }
                outcome.aggregates_checked += 1;
                outcome.digests.insert((e.round, subset.key()), got);
            }
            _ => {}
        }
    }
    Ok(outcome)
}

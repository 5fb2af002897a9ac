//! Wire messages and timers exchanged through the simulator.

use serde::{Deserialize, Serialize};

use crate::hash::Hash160;
use crate::sim::Tag;
use crate::types::{ExecResult, Micros, ReplicaId, ShardId, Timestamp, Txn, TxnId, ViewRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Normal,
    ViewChange,
    Recovering,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyKind {
    Fast,
    Slow,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub kind: ReplyKind,
    pub g_view: u64,
    pub l_view: u64,
    pub shard: ShardId,
    pub replica: ReplicaId,
    pub id: TxnId,
    pub t: Timestamp,
    /// Log state before the transaction (fast replies only).
    pub hash: Hash160,
    /// Present on leader fast replies.
    pub result: Option<ExecResult>,
    /// Synced prefix length (slow replies only).
    pub sync_point: u64,
    /// Leader-assigned log position, once known.
    pub log_pos: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Msg {
    /// Coordinator multicast of a transaction with its proposed timestamp.
    Submit { txn: Txn },
    Reply(Reply),
    /// Inter-leader timestamp notification for agreement. `settled` marks an
    /// answer from a leader that already appended the transaction.
    Notice { g_view: u64, id: TxnId, shard: ShardId, t: Timestamp, settled: bool },
    FetchTxn { id: TxnId },
    TxnBody { txn: Txn },
    LogSync { g_view: u64, l_view: u64, pos: u64, id: TxnId, t: Timestamp },
    SyncFetch { g_view: u64, from: u64, upto: u64 },
    SyncFill { g_view: u64, entries: Vec<(u64, Txn)> },
    SyncReport { g_view: u64, sync_point: u64 },
    CommitPoint { g_view: u64, commit_point: u64, log_len: u64 },
    SyncInquiry,
    SyncInquiryReply { g_view: u64, l_view: u64, shard: ShardId, replica: ReplicaId, sync_point: u64 },
    Probe { send_local: Micros },
    ProbeAck { send_local: Micros, recv_local: Micros },
    Heartbeat { g_view: u64, status: Status },
    CmPrepare { record: ViewRecord },
    CmPrepareReply { g_view: u64 },
    CmCommit { record: ViewRecord },
    ViewChangeReq { record: ViewRecord },
    ViewChange { g_view: u64, lnv: u64, log: Vec<Txn>, sync_point: u64 },
    TsVerify { g_view: u64, shard: ShardId, entries: Vec<Txn> },
    StartView { record: ViewRecord, log: Vec<Txn> },
    InquireView,
    ViewReply { record: ViewRecord },
    ViewNotice { record: ViewRecord },
    StateTransferReq { g_view: u64 },
    StateTransferRep { record: ViewRecord, log: Vec<Txn>, commit_point: u64 },
    /// Leader asks the recovery coordinator to finish a transaction whose
    /// coordinator went silent.
    Takeover { txn: Txn },
}

impl Tag for Msg {
    fn tag(&self) -> &'static str {
        match self {
            Msg::Submit { .. } => "submit",
            Msg::Reply(r) if r.kind == ReplyKind::Fast => "fast-reply",
            Msg::Reply(_) => "slow-reply",
            Msg::Notice { .. } => "notice",
            Msg::FetchTxn { .. } => "fetch-txn",
            Msg::TxnBody { .. } => "txn-body",
            Msg::LogSync { .. } => "log-sync",
            Msg::SyncFetch { .. } => "sync-fetch",
            Msg::SyncFill { .. } => "sync-fill",
            Msg::SyncReport { .. } => "sync-report",
            Msg::CommitPoint { .. } => "commit-point",
            Msg::SyncInquiry => "sync-inquiry",
            Msg::SyncInquiryReply { .. } => "sync-inquiry-reply",
            Msg::Probe { .. } => "probe",
            Msg::ProbeAck { .. } => "probe-ack",
            Msg::Heartbeat { .. } => "heartbeat",
            Msg::CmPrepare { .. } => "cm-prepare",
            Msg::CmPrepareReply { .. } => "cm-prepare-reply",
            Msg::CmCommit { .. } => "cm-commit",
            Msg::ViewChangeReq { .. } => "view-change-req",
            Msg::ViewChange { .. } => "view-change",
            Msg::TsVerify { .. } => "ts-verify",
            Msg::StartView { .. } => "start-view",
            Msg::InquireView => "inquire-view",
            Msg::ViewReply { .. } => "view-reply",
            Msg::ViewNotice { .. } => "view-notice",
            Msg::StateTransferReq { .. } => "state-transfer-req",
            Msg::StateTransferRep { .. } => "state-transfer-rep",
            Msg::Takeover { .. } => "takeover",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Timer {
    // Server.
    Tick,
    SyncReport,
    Heartbeat,
    FetchCheck(TxnId),
    NoticeRetry(TxnId),
    CoordCheck,
    ViewChangeRetry,
    RejoinRetry,
    // Coordinator.
    Probe,
    Arrival,
    Retry(TxnId, u32),
    Inquiry,
    Script(usize),
    // View manager.
    VmCheck,
    PrepareRetry(u64),
}

impl Tag for Timer {
    fn tag(&self) -> &'static str {
        match self {
            Timer::Tick => "tick",
            Timer::SyncReport => "sync-report-timer",
            Timer::Heartbeat => "heartbeat-timer",
            Timer::FetchCheck(_) => "fetch-check",
            Timer::NoticeRetry(_) => "notice-retry",
            Timer::CoordCheck => "coord-check",
            Timer::ViewChangeRetry => "view-change-retry",
            Timer::RejoinRetry => "rejoin-retry",
            Timer::Probe => "probe-timer",
            Timer::Arrival => "arrival",
            Timer::Retry(..) => "retry",
            Timer::Inquiry => "inquiry-timer",
            Timer::Script(_) => "script",
            Timer::VmCheck => "vm-check",
            Timer::PrepareRetry(_) => "prepare-retry",
        }
    }
}

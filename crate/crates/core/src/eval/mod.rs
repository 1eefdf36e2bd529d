pub mod nameshame;
pub mod protocol;
pub mod report;
pub mod roc;

pub use nameshame::{name_and_shame_sim, NameShameReports};
pub use protocol::{
    audit_fleet, membership_mode_check, prepare, run_leave_one_out, train_fleet, AttackId,
    AttackParams, AuditRun, ExperimentSpec, LeaveOneOut, MembershipMode, PreparedAudit,
};
pub use report::{
    per_sample_report, population_report, sample_level_report, AuditReport, Protocol, ReportMeta,
    SampleMode, TprAt,
};
pub use roc::{roc_curve, tpr_at_fpr, RocCurve, RocPoint};

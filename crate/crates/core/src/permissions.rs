//! Capability matrix and visibility rules.
//!
//! Students get exactly the stage-by-stage grid below; teachers manage the
//! coursework and read everything at every stage.
//!
//! | stage | upload solution | upload tests | self-test | peer-test |
//! |-------|-----------------|--------------|-----------|-----------|
//! | 0     | no              | no           | no        | no        |
//! | 1     | yes             | yes          | yes       | no        |
//! | 2     | no              | yes          | yes       | yes       |
//! | 3     | no              | no           | no        | no        |
//!
//! Running tests on the oracle is open in stages 1 and 2, the reflective
//! report only in stage 3.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Role, Stage, SubmissionKind, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    UploadSolution,
    UploadTest,
    RunSelfTest,
    RunOracleTest,
    RunPeerTest,
    ViewPeerSource,
    PostFeedback,
    SubmitReport,
    /// Stage advancement, enrollment and group management.
    ManageCoursework,
}

impl Capability {
    pub const ALL: [Capability; 9] = [
        Capability::UploadSolution,
        Capability::UploadTest,
        Capability::RunSelfTest,
        Capability::RunOracleTest,
        Capability::RunPeerTest,
        Capability::ViewPeerSource,
        Capability::PostFeedback,
        Capability::SubmitReport,
        Capability::ManageCoursework,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::UploadSolution => "upload_solution",
            Capability::UploadTest => "upload_test",
            Capability::RunSelfTest => "run_self_test",
            Capability::RunOracleTest => "run_oracle_test",
            Capability::RunPeerTest => "run_peer_test",
            Capability::ViewPeerSource => "view_peer_source",
            Capability::PostFeedback => "post_feedback",
            Capability::SubmitReport => "submit_report",
            Capability::ManageCoursework => "manage_coursework",
        }
    }

    /// The capability an upload of `kind` requires.
    pub fn for_upload(kind: SubmissionKind) -> Capability {
        match kind {
            SubmissionKind::Solution | SubmissionKind::OracleSolution => Capability::UploadSolution,
            SubmissionKind::TestSuite
            | SubmissionKind::SignatureTest
            | SubmissionKind::TeacherTest => Capability::UploadTest,
            SubmissionKind::ReflectiveReport => Capability::SubmitReport,
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyCode {
    StageForbids,
    RoleForbids,
    NotEnrolled,
    NotInGroup,
    NotParticipant,
}

impl DenyCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyCode::StageForbids => "stage_forbids",
            DenyCode::RoleForbids => "role_forbids",
            DenyCode::NotEnrolled => "not_enrolled",
            DenyCode::NotInGroup => "not_in_group",
            DenyCode::NotParticipant => "not_participant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denial {
    pub code: DenyCode,
    pub capability: Capability,
    pub stage: Stage,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(Denial),
}

impl Decision {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Decision::Allow)
    }

    pub fn into_result(self) -> Result<(), Denial> {
        match self {
            Decision::Allow => Ok(()),
            Decision::Deny(d) => Err(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Actor {
    pub user_id: UserId,
    pub role: Role,
    /// Whether the actor holds an enrollment in the coursework in question.
    pub enrolled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessContext {
    pub actor: Actor,
    pub stage: Stage,
    pub target_owner: Option<UserId>,
    /// Actor and target owner share a peer group. Always false when the
    /// target is the actor's own.
    pub same_group: bool,
    pub target_kind: Option<SubmissionKind>,
    /// Actor is the tester or developer of the run a feedback thread hangs off.
    pub thread_participant: bool,
}

impl AccessContext {
    pub fn new(actor: Actor, stage: Stage) -> Self {
        Self {
            actor,
            stage,
            target_owner: None,
            same_group: false,
            target_kind: None,
            thread_participant: false,
        }
    }

    pub fn with_target(mut self, owner: UserId, kind: SubmissionKind, same_group: bool) -> Self {
        self.same_group = same_group && owner != self.actor.user_id;
        self.target_owner = Some(owner);
        self.target_kind = Some(kind);
        self
    }

    pub fn with_kind(mut self, kind: SubmissionKind) -> Self {
        self.target_kind = Some(kind);
        self
    }

    pub fn with_participant(mut self, participant: bool) -> Self {
        self.thread_participant = participant;
        self
    }
}

/// Student stages in which a capability is open, ignoring group and
/// participant scoping.
fn student_stages(cap: Capability) -> &'static [Stage] {
    use Stage::*;
    match cap {
        Capability::UploadSolution => &[SelfTesting],
        Capability::UploadTest => &[SelfTesting, PeerTesting],
        Capability::RunSelfTest => &[SelfTesting, PeerTesting],
        Capability::RunOracleTest => &[SelfTesting, PeerTesting],
        Capability::RunPeerTest => &[PeerTesting],
        Capability::ViewPeerSource => &[PeerTesting],
        Capability::PostFeedback => &[PeerTesting],
        Capability::SubmitReport => &[TeacherFeedback],
        Capability::ManageCoursework => &[],
    }
}

fn deny(code: DenyCode, cap: Capability, stage: Stage, message: String) -> Decision {
    Decision::Deny(Denial {
        code,
        capability: cap,
        stage,
        message,
    })
}

/// Decides whether the actor in `ctx` may exercise `cap`. Pure and total.
pub fn permitted(cap: Capability, ctx: &AccessContext) -> Decision {
    let stage = ctx.stage;
    match ctx.actor.role {
        Role::Teacher => teacher_decision(cap, ctx),
        Role::Student => {
            if cap == Capability::ManageCoursework {
                return deny(
                    DenyCode::RoleForbids,
                    cap,
                    stage,
                    "only teachers can manage a coursework".into(),
                );
            }
            if !ctx.actor.enrolled {
                return deny(
                    DenyCode::NotEnrolled,
                    cap,
                    stage,
                    "you are not enrolled in this coursework".into(),
                );
            }
            if let Some(kind) = ctx.target_kind {
                if let Some(d) = student_kind_check(cap, kind, stage) {
                    return d;
                }
            }
            if !student_stages(cap).contains(&stage) {
                return deny(
                    DenyCode::StageForbids,
                    cap,
                    stage,
                    format!("{} is not available to students in {}", cap, stage),
                );
            }
            match cap {
                Capability::RunPeerTest | Capability::ViewPeerSource if !ctx.same_group => deny(
                    DenyCode::NotInGroup,
                    cap,
                    stage,
                    format!(
                        "{} is limited to members of your peer group in {}",
                        cap, stage
                    ),
                ),
                Capability::PostFeedback if !ctx.thread_participant => deny(
                    DenyCode::NotParticipant,
                    cap,
                    stage,
                    format!(
                        "only the tester and the developer of a run can discuss it in {}",
                        stage
                    ),
                ),
                _ => Decision::Allow,
            }
        }
    }
}

fn student_kind_check(cap: Capability, kind: SubmissionKind, stage: Stage) -> Option<Decision> {
    let allowed = match cap {
        Capability::UploadSolution => kind == SubmissionKind::Solution,
        Capability::UploadTest => kind == SubmissionKind::TestSuite,
        Capability::SubmitReport => kind == SubmissionKind::ReflectiveReport,
        _ => true,
    };
    (!allowed).then(|| {
        deny(
            DenyCode::RoleForbids,
            cap,
            stage,
            format!("students cannot upload a {kind}"),
        )
    })
}

fn teacher_decision(cap: Capability, ctx: &AccessContext) -> Decision {
    let stage = ctx.stage;
    match cap {
        Capability::ManageCoursework
        | Capability::RunSelfTest
        | Capability::RunOracleTest
        | Capability::RunPeerTest
        | Capability::ViewPeerSource => Decision::Allow,
        Capability::UploadSolution | Capability::UploadTest => {
            if let Some(kind) = ctx.target_kind {
                if kind == SubmissionKind::ReflectiveReport || Capability::for_upload(kind) != cap {
                    return deny(
                        DenyCode::RoleForbids,
                        cap,
                        stage,
                        format!("teachers cannot upload a {kind} this way"),
                    );
                }
            }
            if stage <= Stage::SelfTesting {
                Decision::Allow
            } else {
                deny(
                    DenyCode::StageForbids,
                    cap,
                    stage,
                    format!("teacher uploads are closed in {}", stage),
                )
            }
        }
        Capability::PostFeedback => deny(
            DenyCode::RoleForbids,
            cap,
            stage,
            "feedback threads are between the tester and the developer".into(),
        ),
        Capability::SubmitReport => deny(
            DenyCode::RoleForbids,
            cap,
            stage,
            "reflective reports are written by students".into(),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    FullSource,
    MetadataOnly,
    Hidden,
}

/// What a viewer may see of a submission. `owner_role` is the role of the
/// submission owner; `same_group` whether viewer and owner share a peer group.
pub fn visible_fields(
    viewer: &Actor,
    owner: &UserId,
    owner_role: Role,
    kind: SubmissionKind,
    stage: Stage,
    same_group: bool,
) -> View {
    if viewer.role == Role::Teacher {
        return View::FullSource;
    }
    if kind == SubmissionKind::OracleSolution {
        return View::MetadataOnly;
    }
    if owner == &viewer.user_id {
        return View::FullSource;
    }
    if !viewer.enrolled {
        return View::Hidden;
    }
    match owner_role {
        // Signature tests, teacher tests and templates are provided material.
        Role::Teacher if stage >= Stage::SelfTesting => View::FullSource,
        Role::Teacher => View::Hidden,
        Role::Student => match kind {
            SubmissionKind::Solution | SubmissionKind::TestSuite
                if stage == Stage::PeerTesting && same_group =>
            {
                View::FullSource
            }
            _ => View::Hidden,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn student(id: &str) -> Actor {
        Actor {
            user_id: id.into(),
            role: Role::Student,
            enrolled: true,
        }
    }

    fn teacher() -> Actor {
        Actor {
            user_id: "t".into(),
            role: Role::Teacher,
            enrolled: false,
        }
    }

    fn ctx(stage: Stage) -> AccessContext {
        AccessContext::new(student("s1"), stage)
    }

    #[test]
    fn upload_solution_examples() {
        assert!(permitted(Capability::UploadSolution, &ctx(Stage::SelfTesting)).is_allowed());
        let d = permitted(Capability::UploadSolution, &ctx(Stage::PeerTesting));
        match d {
            Decision::Deny(d) => {
                assert_eq!(d.code, DenyCode::StageForbids);
                assert_eq!(d.stage, Stage::PeerTesting);
                assert!(d.message.contains("stage 2"));
            }
            Decision::Allow => panic!("solutions are frozen in stage 2"),
        }
    }

    #[test]
    fn peer_test_scoped_to_group() {
        let in_group =
            ctx(Stage::PeerTesting).with_target("s2".into(), SubmissionKind::Solution, true);
        let out_group =
            ctx(Stage::PeerTesting).with_target("s3".into(), SubmissionKind::Solution, false);
        assert!(permitted(Capability::RunPeerTest, &in_group).is_allowed());
        match permitted(Capability::RunPeerTest, &out_group) {
            Decision::Deny(d) => assert_eq!(d.code, DenyCode::NotInGroup),
            Decision::Allow => panic!(),
        }
    }

    #[test]
    fn same_group_false_for_self() {
        let c = ctx(Stage::PeerTesting).with_target("s1".into(), SubmissionKind::Solution, true);
        assert!(!c.same_group);
    }

    #[test]
    fn oracle_runs_open_in_stages_one_and_two() {
        for stage in Stage::ALL {
            let ok = permitted(Capability::RunOracleTest, &ctx(stage)).is_allowed();
            assert_eq!(
                ok,
                matches!(stage, Stage::SelfTesting | Stage::PeerTesting),
                "{stage}"
            );
        }
    }

    #[test]
    fn report_only_in_stage_three() {
        for stage in Stage::ALL {
            let c = ctx(stage).with_kind(SubmissionKind::ReflectiveReport);
            assert_eq!(
                permitted(Capability::SubmitReport, &c).is_allowed(),
                stage == Stage::TeacherFeedback
            );
        }
    }

    #[test]
    fn students_cannot_upload_teacher_kinds() {
        for kind in [
            SubmissionKind::OracleSolution,
            SubmissionKind::SignatureTest,
            SubmissionKind::TeacherTest,
        ] {
            let c = ctx(Stage::SelfTesting).with_kind(kind);
            match permitted(Capability::for_upload(kind), &c) {
                Decision::Deny(d) => assert_eq!(d.code, DenyCode::RoleForbids),
                Decision::Allow => panic!("{kind}"),
            }
        }
    }

    #[test]
    fn unenrolled_student_denied_everything() {
        let mut a = student("x");
        a.enrolled = false;
        for cap in Capability::ALL {
            assert!(
                !permitted(cap, &AccessContext::new(a.clone(), Stage::SelfTesting)).is_allowed()
            );
        }
    }

    #[test]
    fn teacher_uploads_close_after_stage_one() {
        for stage in Stage::ALL {
            let c = AccessContext::new(teacher(), stage).with_kind(SubmissionKind::TeacherTest);
            assert_eq!(
                permitted(Capability::UploadTest, &c).is_allowed(),
                stage <= Stage::SelfTesting
            );
        }
        let c =
            AccessContext::new(teacher(), Stage::Setup).with_kind(SubmissionKind::OracleSolution);
        assert!(permitted(Capability::UploadSolution, &c).is_allowed());
        assert!(!permitted(Capability::UploadTest, &c).is_allowed());
    }

    #[test]
    fn feedback_requires_participant() {
        let c = ctx(Stage::PeerTesting);
        assert!(!permitted(Capability::PostFeedback, &c).is_allowed());
        assert!(
            permitted(Capability::PostFeedback, &c.clone().with_participant(true)).is_allowed()
        );
        let teacher_ctx = AccessContext::new(teacher(), Stage::PeerTesting).with_participant(true);
        assert!(!permitted(Capability::PostFeedback, &teacher_ctx).is_allowed());
    }

    #[test]
    fn visibility_examples() {
        let me = student("s1");
        let t: UserId = "t".into();
        for stage in Stage::ALL {
            assert_eq!(
                visible_fields(
                    &me,
                    &t,
                    Role::Teacher,
                    SubmissionKind::OracleSolution,
                    stage,
                    false
                ),
                View::MetadataOnly
            );
        }
        assert_eq!(
            visible_fields(
                &me,
                &"s1".into(),
                Role::Student,
                SubmissionKind::Solution,
                Stage::SelfTesting,
                false
            ),
            View::FullSource
        );
        assert_eq!(
            visible_fields(
                &me,
                &"s2".into(),
                Role::Student,
                SubmissionKind::Solution,
                Stage::SelfTesting,
                true
            ),
            View::Hidden
        );
        assert_eq!(
            visible_fields(
                &me,
                &"s2".into(),
                Role::Student,
                SubmissionKind::Solution,
                Stage::PeerTesting,
                true
            ),
            View::FullSource
        );
        assert_eq!(
            visible_fields(
                &me,
                &"s2".into(),
                Role::Student,
                SubmissionKind::Solution,
                Stage::PeerTesting,
                false
            ),
            View::Hidden
        );
        assert_eq!(
            visible_fields(
                &me,
                &t,
                Role::Teacher,
                SubmissionKind::SignatureTest,
                Stage::Setup,
                false
            ),
            View::Hidden
        );
        assert_eq!(
            visible_fields(
                &me,
                &t,
                Role::Teacher,
                SubmissionKind::SignatureTest,
                Stage::SelfTesting,
                false
            ),
            View::FullSource
        );
        assert_eq!(
            visible_fields(
                &teacher(),
                &t,
                Role::Teacher,
                SubmissionKind::OracleSolution,
                Stage::PeerTesting,
                false
            ),
            View::FullSource
        );
    }
}

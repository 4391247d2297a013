//! Stage machine and the preconditions of the coursework-level operations.

use crate::error::{CoreError, Result};
use crate::model::{normalize_rel_path, Role, Stage, SubmissionKind};
use crate::permissions::{permitted, AccessContext, Actor, Capability, Decision};

/// Default per-submission upload limit.
pub const DEFAULT_UPLOAD_LIMIT: u64 = 1024 * 1024;

/// Teacher-provided artifacts that must exist before students are let in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SetupInventory {
    pub oracle_solutions: usize,
    pub signature_tests: usize,
}

/// Returns the stage a coursework moves to when `actor_role` advances it.
pub fn advance(current: Stage, actor_role: Role, inventory: SetupInventory) -> Result<Stage> {
    if actor_role != Role::Teacher {
        return Err(CoreError::NotTeacher);
    }
    let next = current.next().ok_or(CoreError::AlreadyFinal)?;
    if current == Stage::Setup {
        let mut missing = Vec::new();
        if inventory.oracle_solutions == 0 {
            missing.push("oracle solution");
        }
        if inventory.signature_tests == 0 {
            missing.push("signature test");
        }
        if !missing.is_empty() {
            return Err(CoreError::SetupIncomplete { missing });
        }
    }
    Ok(next)
}

/// Students can join while the coursework is being set up or developed.
pub fn check_enroll(stage: Stage, user_role: Role) -> Result<()> {
    if user_role != Role::Student {
        return Err(CoreError::Invalid("only students can be enrolled".into()));
    }
    if stage >= Stage::PeerTesting {
        return Err(CoreError::StageTooLate(stage));
    }
    Ok(())
}

/// Validates an upload against the permission matrix and size limit and
/// returns the normalised file paths, in input order.
pub fn check_upload(
    actor: &Actor,
    stage: Stage,
    kind: SubmissionKind,
    files: &[(String, usize)],
    limit: u64,
) -> Result<Vec<String>> {
    let ctx = AccessContext::new(actor.clone(), stage).with_kind(kind);
    if let Decision::Deny(d) = permitted(Capability::for_upload(kind), &ctx) {
        return Err(CoreError::PermissionDenied(d));
    }
    if files.is_empty() {
        return Err(CoreError::EmptyUpload);
    }
    let size: u64 = files.iter().map(|(_, n)| *n as u64).sum();
    if size > limit {
        return Err(CoreError::TooLarge { size, limit });
    }
    let mut paths = Vec::with_capacity(files.len());
    for (p, _) in files {
        let p = normalize_rel_path(p)?;
        if paths.contains(&p) {
            return Err(CoreError::Invalid(format!("duplicate file path `{p}`")));
        }
        paths.push(p);
    }
    Ok(paths)
}

/// Checks a stage sequence read from a coursework's history: it must be a
/// prefix of 0, 1, 2, 3.
pub fn is_valid_stage_history(stages: &[Stage]) -> bool {
    stages.len() <= 4
        && stages
            .iter()
            .enumerate()
            .all(|(i, s)| s.number() as usize == i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full() -> SetupInventory {
        SetupInventory {
            oracle_solutions: 1,
            signature_tests: 1,
        }
    }

    fn student() -> Actor {
        Actor {
            user_id: "s1".into(),
            role: Role::Student,
            enrolled: true,
        }
    }

    #[test]
    fn advance_from_setup() {
        assert_eq!(
            advance(Stage::Setup, Role::Teacher, full()),
            Ok(Stage::SelfTesting)
        );
    }

    #[test]
    fn advance_final_stage() {
        assert_eq!(
            advance(Stage::TeacherFeedback, Role::Teacher, full()),
            Err(CoreError::AlreadyFinal)
        );
    }

    #[test]
    fn advance_by_student() {
        assert_eq!(
            advance(Stage::SelfTesting, Role::Student, full()),
            Err(CoreError::NotTeacher)
        );
    }

    #[test]
    fn advance_without_oracle() {
        let err = advance(
            Stage::Setup,
            Role::Teacher,
            SetupInventory {
                oracle_solutions: 0,
                signature_tests: 1,
            },
        )
        .unwrap_err();
        assert_eq!(
            err,
            CoreError::SetupIncomplete {
                missing: vec!["oracle solution"]
            }
        );
        // Only leaving stage 0 needs the inventory.
        assert_eq!(
            advance(Stage::SelfTesting, Role::Teacher, SetupInventory::default()),
            Ok(Stage::PeerTesting)
        );
    }

    #[test]
    fn enroll_window() {
        assert!(check_enroll(Stage::Setup, Role::Student).is_ok());
        assert!(check_enroll(Stage::SelfTesting, Role::Student).is_ok());
        assert_eq!(
            check_enroll(Stage::PeerTesting, Role::Student),
            Err(CoreError::StageTooLate(Stage::PeerTesting))
        );
        assert!(check_enroll(Stage::TeacherFeedback, Role::Student).is_err());
    }

    #[test]
    fn upload_examples() {
        let files = vec![("sort.sh".to_string(), 10)];
        assert!(check_upload(
            &student(),
            Stage::SelfTesting,
            SubmissionKind::Solution,
            &files,
            100
        )
        .is_ok());
        assert!(matches!(
            check_upload(
                &student(),
                Stage::PeerTesting,
                SubmissionKind::Solution,
                &files,
                100
            ),
            Err(CoreError::PermissionDenied(_))
        ));
        assert!(check_upload(
            &student(),
            Stage::PeerTesting,
            SubmissionKind::TestSuite,
            &files,
            100
        )
        .is_ok());
        assert_eq!(
            check_upload(
                &student(),
                Stage::SelfTesting,
                SubmissionKind::Solution,
                &[],
                100
            ),
            Err(CoreError::EmptyUpload)
        );
        assert_eq!(
            check_upload(
                &student(),
                Stage::SelfTesting,
                SubmissionKind::Solution,
                &files,
                5
            ),
            Err(CoreError::TooLarge { size: 10, limit: 5 })
        );
        let dup = vec![("a".to_string(), 1), ("a/".to_string(), 1)];
        assert!(check_upload(
            &student(),
            Stage::SelfTesting,
            SubmissionKind::Solution,
            &dup,
            100
        )
        .is_err());
    }

    #[test]
    fn stage_history_prefixes() {
        use Stage::*;
        assert!(is_valid_stage_history(&[]));
        assert!(is_valid_stage_history(&[Setup, SelfTesting, PeerTesting]));
        assert!(!is_valid_stage_history(&[Setup, PeerTesting]));
        assert!(!is_valid_stage_history(&[Setup, SelfTesting, SelfTesting]));
    }
}

use hrc_core::domain::{Action, PlanLibrary};
use hrc_core::plans::{correct_action, ObservedActionLog, PlanRecognizer};
use proptest::prelude::*;

fn library() -> PlanLibrary {
    PlanLibrary::desktop()
}

#[test]
fn bundled_library_file_matches_builtin() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/data/desktop.json");
    let loaded = PlanLibrary::load(path).unwrap();
    let builtin = library();
    assert_eq!(loaded.plans().len(), 6);
    for (a, b) in loaded.plans().iter().zip(builtin.plans()) {
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.robot_steps, b.robot_steps);
    }
    let back = PlanLibrary::from_json(&loaded.to_json()).unwrap();
    assert_eq!(back.plans().len(), 6);
    assert_eq!(back.prior(), loaded.prior());
}

#[test]
fn file_saved_library_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lib.json");
    library().save(&path).unwrap();
    let again = PlanLibrary::load(&path).unwrap();
    assert!(again.identifiable());
    assert_eq!(again.human_actions(), library().human_actions());
}

#[test]
fn streaming_reference_recovers_every_plan() {
    let lib = library();
    let recognizer = PlanRecognizer::default();
    for plan in lib.plans() {
        let mut log = ObservedActionLog::new();
        for (k, &a) in plan.reference.iter().enumerate() {
            // Repeated samples of one action merge into a single entry.
            for s in 0..5 {
                log.append(&lib, a.motion, a.object, (10 * k + s) as f64 * 0.1).unwrap();
            }
            assert_eq!(log.len(), k + 1);
            let belief = recognizer.infer(&log, &lib).unwrap();
            assert_eq!(correct_action(&belief, &lib), a);
            let sum: f64 = belief.posterior.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            if lib.plans_with_prefix(&plan.reference[..=k]).len() == 1 {
                assert_eq!(belief.top(), plan.id);
                assert!(!belief.ambiguous);
            }
        }
    }
}

#[test]
fn infeasible_observation_is_rejected() {
    let lib = library();
    let mut log = ObservedActionLog::new();
    let infeasible = (0..lib.n_motions())
        .flat_map(|m| (0..lib.n_objects()).map(move |o| Action::new(m, o)))
        .find(|&a| !lib.is_feasible(a))
        .unwrap();
    assert!(log.append(&lib, infeasible.motion, infeasible.object, 0.0).is_err());
    assert!(log.is_empty());
    assert!(PlanRecognizer::default().infer(&log, &lib).is_err());
}

proptest! {
    #[test]
    fn posterior_is_a_distribution(picks in proptest::collection::vec(0usize..64, 1..12)) {
        let lib = library();
        let actions = lib.human_actions();
        let observed: Vec<Action> = picks.iter().map(|&i| actions[i % actions.len()]).collect();
        let belief = PlanRecognizer::default().infer_sequence(&observed, &lib).unwrap();
        let sum: f64 = belief.posterior.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(belief.posterior.iter().all(|p| p.is_finite() && *p >= 0.0));
        let top = belief.top();
        prop_assert!(belief.posterior.iter().all(|&p| p <= belief.probability(top)));
        let corrected = correct_action(&belief, &lib);
        prop_assert!(lib.plan(top).reference.contains(&corrected));
    }
}

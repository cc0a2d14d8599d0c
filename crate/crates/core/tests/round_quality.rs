//! Precision of each distill round's gate-accepted set on synthetic worlds,
//! with an oracle annotator answering every queue between rounds.

use std::sync::Arc;

use cornercase_core::distill::Outcome;
use cornercase_core::io::read_jsonl;
use cornercase_core::model::Stage;
use cornercase_core::pipeline::{run_round, PredictionRecord, RunOptions, PREDICTIONS};
use cornercase_core::project::Project;
use cornercase_core::simulate::{answer_pending, ingest_world};
use cornercase_core::synth::{Oracle, SyntheticSidecar, SyntheticWorld, WorldParams};

fn accepted_precision(project: &Project, world: &SyntheticWorld, round: u32) -> (f64, usize) {
    let preds: Vec<PredictionRecord> = read_jsonl(&project.round_file(round, PREDICTIONS)).unwrap();
    let accepted: Vec<&PredictionRecord> = preds.iter().filter(|p| p.outcome == Outcome::Accepted).collect();
    let correct = accepted.iter().filter(|p| world.sample(&p.sample_id).unwrap().class == p.label).count();
    (if accepted.is_empty() { 1.0 } else { correct as f64 / accepted.len() as f64 }, accepted.len())
}

fn precision_by_round(params: &WorldParams) -> Vec<(f64, usize)> {
    let dir = tempfile::tempdir().unwrap();
    let world = Arc::new(SyntheticWorld::generate(params).unwrap());
    let project = ingest_world(dir.path(), &world).unwrap();
    let sidecar = SyntheticSidecar::new(world.clone());
    let oracle = Oracle::new(world.clone());
    run_round(&project, &sidecar, Stage::Filter, &RunOptions::default()).unwrap();
    answer_pending(&project, &oracle).unwrap();
    let mut out = Vec::new();
    for finalize in [false, false, true] {
        let state = run_round(&project, &sidecar, Stage::Distill, &RunOptions { finalize, ..RunOptions::default() }).unwrap();
        out.push(accepted_precision(&project, &world, state.state().unwrap().round));
        answer_pending(&project, &oracle).unwrap();
    }
    out
}

#[test]
fn accepted_precision_does_not_drop_across_distill_rounds() {
    let mut violations = Vec::new();
    for seed in 0..10u64 {
        let rounds = precision_by_round(&WorldParams { seed, ..WorldParams::default() });
        assert!(rounds.iter().all(|(_, n)| *n > 0), "seed {seed}: empty accepted set {rounds:?}");
        for w in rounds.windows(2) {
            if w[1].0 + 1e-12 < w[0].0 {
                violations.push((seed, w[0].0, w[1].0));
            }
        }
    }
    assert!(violations.len() <= 1, "precision dropped: {violations:?}");
}

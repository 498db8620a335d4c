//! Regenerates the checked-in fixture trace and its reference sidecar:
//!
//!     cargo run -p htdc-core --example make_fixture -- crates/core/tests/fixtures

use std::path::PathBuf;

use htdc_core::sidecar::sidecar_path;
use htdc_core::{
    default_sampled_layers, Backend, BranchKind, CandidateSet, DecodeState, Sidecar, StepLogits, StoredTokenPolicy,
    SyntheticBackend, SyntheticScenario, TraceHeader, TraceWriter,
};

const STEPS: usize = 6;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "crates/core/tests/fixtures".into()),
    );
    let backend = SyntheticBackend::new(SyntheticScenario::procedural(11, 48, 12, 8), 0.8)?;
    let layers = default_sampled_layers(Backend::<f64>::num_layers(&backend));
    let policy = StoredTokenPolicy::TopNUnionCandidates { n: 16 };
    let set = CandidateSet::yes_no([3, 4], [10, 11]);

    let mut writer = TraceWriter::new(TraceHeader::new(48, layers.clone(), policy), set.all_token_ids())?;
    let mut sidecar = Sidecar::new(set);
    let mut state = DecodeState::new("fixture", "Is there a dog in the image?", Vec::new());
    for _ in 0..STEPS {
        let rows: Vec<StepLogits<f64>> = BranchKind::ALL
            .iter()
            .map(|&b| backend.forward(&state, b, &layers))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&StepLogits<f64>> = rows.iter().collect();
        writer.push_step(&refs)?;
        sidecar.push_step(policy, &refs)?;
        state = state.advance(sidecar.steps.last().unwrap().full_argmax);
    }

    let trace = dir.join("small.trace.jsonl");
    std::fs::write(&trace, writer.finish())?;
    std::fs::write(sidecar_path(&trace), sidecar.to_json() + "\n")?;
    println!("wrote {}", trace.display());
    Ok(())
}

use proptest::prelude::*;
use spatialcomm::confidence::generate_confidence;
use spatialcomm::experiment::{sweep_bandwidth, sweep_noise, Budget, ExperimentConfig, Method};
use spatialcomm::protocol::{
    dense_budget, run_experiment, run_experiment_logged, run_round, AgentState, ProtocolConfig, RoundContext,
    RunConfig, RunEvent,
};
use spatialcomm::scenarios::Template;
use spatialcomm::world::{encode, EncoderConfig, Scenario};

fn full(s: &Scenario, rounds: usize) -> RunConfig {
    RunConfig {
        protocol: ProtocolConfig {
            rounds,
            total_budget: dense_budget(&s.grid, s.agents.len()),
            ..ProtocolConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn noiseless_full_budget_never_lowers_occluded_evidence() {
    for seed in 0..10 {
        let s = Template::Random.generate(seed).unwrap();
        let cfg = full(&s, 1);
        let model = cfg.fusion.build(8).unwrap();
        let mut states = AgentState::initial(&s, &cfg).unwrap();
        let own: Vec<_> = states.iter().map(|st| st.features.clone()).collect();
        let conf: Vec<_> = own.iter().map(|f| generate_confidence(f, &cfg.generator).unwrap()).collect();
        let ctx = RoundContext { cfg: &cfg, model: &model, budget_bytes: cfg.protocol.total_budget };
        run_round(&mut states, &ctx, 0).unwrap();
        for (i, st) in states.iter().enumerate() {
            for flat in 0..s.grid.cells() {
                let helped = (0..states.len()).any(|j| j != i && conf[j].values()[flat] == 1.0);
                if helped && own[i].cell(flat)[0] == 0.0 {
                    assert!(st.features.cell(flat)[0] > 0.0, "seed {seed} agent {i} cell {flat}");
                }
            }
        }
    }
}

#[test]
fn zero_noise_rows_match_full_budget_bandwidth_rows() {
    let base = ExperimentConfig { seeds: (0..6).collect(), ..ExperimentConfig::default() };
    let bw = sweep_bandwidth(&ExperimentConfig { budgets: vec![Budget::Percent(100.0)], ..base.clone() }).unwrap();
    let noise = sweep_noise(&ExperimentConfig { sigmas: vec![0.0], ..base }).unwrap();
    let collab: Vec<_> = noise.iter().filter(|r| r.method == Method::SpatialConfidence).collect();
    assert_eq!(collab.len(), bw.len());
    for (n, b) in collab.iter().zip(&bw) {
        assert_eq!(n.run, b.run);
    }
}

#[test]
fn collaboration_needs_budget_but_not_rounds_to_be_valid() {
    let s = Template::Occlusion.generate(3).unwrap();
    let alone = run_experiment(&s, &RunConfig { protocol: ProtocolConfig { rounds: 0, ..Default::default() }, ..Default::default() }).unwrap();
    let helped = run_experiment(&s, &full(&s, 1)).unwrap();
    assert!(alone.ap50 < helped.ap50);
    assert_eq!(helped.agent_ap50, vec![1.0, 1.0]);
    assert_eq!(helped.round_ap50[0], alone.ap50);
}

#[test]
fn scenario_file_round_trip_preserves_results() {
    let dir = tempfile::tempdir().unwrap();
    let s = Template::Random.generate(11).unwrap();
    let path = dir.path().join("s.json");
    s.save(&path).unwrap();
    let back = Scenario::load(&path).unwrap();
    assert_eq!(back, s);
    for i in 0..s.agents.len() {
        assert_eq!(encode(i, &back, &EncoderConfig::default()).unwrap(), encode(i, &s, &EncoderConfig::default()).unwrap());
    }
    assert_eq!(run_experiment(&back, &full(&back, 2)).unwrap(), run_experiment(&s, &full(&s, 2)).unwrap());
}

#[test]
fn later_rounds_only_carry_requested_cells() {
    let s = Template::RequestBenefit.generate(2).unwrap();
    let cfg = RunConfig {
        protocol: ProtocolConfig { rounds: 2, total_budget: 640, ..ProtocolConfig::default() },
        ..RunConfig::default()
    };
    let (point, events) = run_experiment_logged(&s, &cfg).unwrap();
    let RunEvent::Round { record, .. } = &events[2] else { panic!("expected round 1") };
    // Agent 1 already sees everything agent 0 could offer it except the hidden group.
    assert_eq!(record.edges, vec![(0, 1)]);
    assert_eq!(point.agent_ap50, vec![1.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn hard_budget_holds_for_any_allocation(
        seed in 0u64..500,
        budget in 0u64..300_000,
        split in proptest::collection::vec(0.0f64..1.0, 1..4),
        sigma in 0.0f64..3.0,
    ) {
        let total: f64 = split.iter().sum::<f64>().max(1.0);
        let allocation: Vec<f64> = split.iter().map(|f| f / total).collect();
        let s = Template::Random.generate(seed).unwrap();
        let cfg = RunConfig {
            protocol: ProtocolConfig {
                rounds: allocation.len(),
                total_budget: budget,
                allocation: Some(allocation),
                noise_sigma: sigma,
                ..ProtocolConfig::default()
            },
            ..RunConfig::default()
        };
        let (point, events) = run_experiment_logged(&s, &cfg).unwrap();
        prop_assert!(point.feature_bytes <= budget);
        for e in &events {
            if let RunEvent::Round { record, .. } = e {
                prop_assert!(record.feature_bytes() <= record.budget_bytes);
            }
        }
    }
}

//! End-to-end campaigns with each real surrogate on small pools: the loop
//! contracts (partition, no reselection, monotone incumbents, exact
//! tabulated observations) must hold for every configuration, and equal
//! seeds must reproduce traces exactly.

use molbo::bo_loop::{
    AcquisitionSpec, CampaignConfig, CampaignTrace, DEFAULT_JOINT_CAP, LaplaceMlpSpec,
    Representation, SurrogateSpec, run_campaign, scalarize,
};
use molbo::pool::{CandidatePool, Direction, FeatureMatrix, PoolEntry};
use molbo::surrogate::curvature::{CurvatureStructure, MargLikConfig};
use molbo::surrogate::gp::{GpConfig, KernelKind};
use molbo::surrogate::laplace::TrainConfig;
use molbo::surrogate::lora::PeftConfig;
use molbo::surrogate::mlp::Activation;
use molbo::surrogate::transformer::{ToyTransformer, TransformerConfig};

const SMILES: [&str; 18] = [
    "CCO",
    "CCN",
    "CCC",
    "CC(C)O",
    "CC(=O)O",
    "c1ccccc1",
    "Cc1ccccc1",
    "CCOC",
    "CC#N",
    "C1CCCCC1",
    "C1CCOC1",
    "CCCCO",
    "CC(C)C",
    "CCOCC",
    "O=CC=O",
    "C1CC1",
    "N#CC#N",
    "OCCO",
];

fn smiles_pool() -> CandidatePool {
    let entries: Vec<PoolEntry> = SMILES
        .iter()
        .enumerate()
        .map(|(i, s)| PoolEntry {
            id: format!("mol{i}"),
            smiles: s.to_string(),
            objectives: vec![(i as f64 * 0.7).sin() + 0.05 * i as f64],
        })
        .collect();
    CandidatePool::from_entries(entries, vec![Direction::Maximize]).unwrap()
}

fn feature_pool(n: usize, d: usize) -> CandidatePool {
    let entries: Vec<PoolEntry> = (0..n)
        .map(|i| PoolEntry {
            id: format!("x{i}"),
            smiles: "C".to_string(),
            objectives: vec![((i as f64) * 0.37).sin() + ((i as f64) * 0.11).cos()],
        })
        .collect();
    let data: Vec<f64> = (0..n)
        .flat_map(|i| (0..d).map(move |j| ((i * d + j) as f64 * 0.13).sin()))
        .collect();
    let mut pool = CandidatePool::from_entries(entries, vec![Direction::Maximize]).unwrap();
    pool.attach_features(FeatureMatrix::new(n, d, data)).unwrap();
    pool
}

fn string_pool(n: usize) -> CandidatePool {
    let alphabet = b"CNOclnos=#()123";
    let entries: Vec<PoolEntry> = (0..n)
        .map(|i| {
            let len = 5 + (i * 7) % 8;
            let s: String = (0..len)
                .map(|k| alphabet[(i * 13 + k * 5) % alphabet.len()] as char)
                .collect();
            let score = s.bytes().filter(|&b| b == b'C' || b == b'c').count() as f64
                / s.len() as f64;
            PoolEntry {
                id: format!("s{i}"),
                smiles: s,
                objectives: vec![score],
            }
        })
        .collect();
    CandidatePool::from_entries(entries, vec![Direction::Maximize]).unwrap()
}

fn check_contracts(pool: &CandidatePool, trace: &CampaignTrace, m: usize, t: usize) {
    assert!(trace.failure.is_none(), "failure: {:?}", trace.failure);
    assert_eq!(trace.initial.len(), m);
    assert_eq!(trace.iterations.len(), t);
    let selected = trace.selected_indices();
    let unique: std::collections::BTreeSet<_> = selected.iter().collect();
    assert_eq!(unique.len(), selected.len(), "an index was selected twice");
    let mut replay = pool.clone();
    for &idx in &selected {
        assert!(replay.is_remaining(idx));
        replay.mark_selected(idx).unwrap();
    }
    assert_eq!(replay.remaining_count(), pool.len() - selected.len());
    let series = trace.incumbent_series(pool);
    assert!(series.windows(2).all(|w| w[1] >= w[0]), "incumbent dipped");
    for rec in &trace.iterations {
        assert_eq!(rec.objectives, pool.entry(rec.index).objectives);
        assert!(rec.id == pool.entry(rec.index).id);
    }
    // The reported best matches the best scalarized internal value.
    let best = selected
        .iter()
        .map(|&i| scalarize(&pool.internal_objectives(i)))
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(scalarize(&pool.internal_objectives(trace.best_index)), best);
}

fn run_twice(pool: &CandidatePool, cfg: &CampaignConfig) -> (CampaignTrace, CampaignTrace) {
    let a = run_campaign(pool.clone(), cfg).unwrap();
    let b = run_campaign(pool.clone(), cfg).unwrap();
    (a, b)
}

#[test]
fn gp_tanimoto_campaign_obeys_the_loop_contracts() {
    let pool = smiles_pool();
    let cfg = CampaignConfig {
        surrogate: SurrogateSpec::Gp(GpConfig::new(KernelKind::Tanimoto)),
        representation: Representation::Fingerprints {
            radius: 2,
            bits: 512,
        },
        acquisition: AcquisitionSpec::Thompson,
        t_budget: 6,
        m_init: 4,
        seed: 31,
        joint_cap: DEFAULT_JOINT_CAP,
    };
    let (a, b) = run_twice(&pool, &cfg);
    check_contracts(&pool, &a, 4, 6);
    assert_eq!(a.selected_indices(), b.selected_indices());
    assert!(a.iterations.iter().all(|r| r.joint), "tiny pool draws jointly");
}

#[test]
fn gp_matern_campaign_obeys_the_loop_contracts() {
    let pool = feature_pool(24, 4);
    let cfg = CampaignConfig {
        surrogate: SurrogateSpec::Gp(GpConfig::new(KernelKind::Matern52)),
        representation: Representation::Features,
        acquisition: AcquisitionSpec::ExpectedImprovement,
        t_budget: 6,
        m_init: 5,
        seed: 7,
        joint_cap: DEFAULT_JOINT_CAP,
    };
    let (a, b) = run_twice(&pool, &cfg);
    check_contracts(&pool, &a, 5, 6);
    assert_eq!(a.selected_indices(), b.selected_indices());
}

#[test]
fn laplace_mlp_campaign_obeys_the_loop_contracts() {
    let pool = feature_pool(26, 4);
    let mut spec = LaplaceMlpSpec::new(vec![16], Activation::Tanh);
    spec.base.train = TrainConfig {
        epochs: 80,
        ..TrainConfig::default()
    };
    spec.base.structure = CurvatureStructure::Kfac;
    spec.base.marglik = MargLikConfig {
        iterations: 30,
        ..MargLikConfig::default()
    };
    let cfg = CampaignConfig {
        surrogate: SurrogateSpec::LaplaceMlp(spec),
        representation: Representation::Features,
        acquisition: AcquisitionSpec::Thompson,
        t_budget: 5,
        m_init: 6,
        seed: 13,
        joint_cap: DEFAULT_JOINT_CAP,
    };
    let (a, b) = run_twice(&pool, &cfg);
    check_contracts(&pool, &a, 6, 5);
    assert_eq!(a.selected_indices(), b.selected_indices());
}

#[test]
fn lora_campaign_obeys_the_loop_contracts_and_freezes_the_base() {
    let pool = string_pool(20);
    let base = ToyTransformer::init(
        TransformerConfig {
            vocab_size: 41,
            embed_dim: 8,
            heads: 2,
            head_dim: 4,
            layers: 2,
        },
        1234,
    )
    .unwrap();
    let base_hash = base.content_hash();
    let peft = PeftConfig {
        joint_epochs: 3,
        head_epochs: 10,
        marglik: MargLikConfig {
            iterations: 20,
            ..MargLikConfig::default()
        },
        ..PeftConfig::default()
    };
    let cfg = CampaignConfig {
        surrogate: SurrogateSpec::LoraTransformer {
            base: Box::new(base),
            peft,
        },
        representation: Representation::Tokens { max_len: 16 },
        acquisition: AcquisitionSpec::Thompson,
        t_budget: 4,
        m_init: 5,
        seed: 3,
        joint_cap: DEFAULT_JOINT_CAP,
    };
    let (a, b) = run_twice(&pool, &cfg);
    check_contracts(&pool, &a, 5, 4);
    assert_eq!(a.selected_indices(), b.selected_indices());
    // The spec still holds the untouched base encoder.
    if let SurrogateSpec::LoraTransformer { base, .. } = &cfg.surrogate {
        assert_eq!(base.content_hash(), base_hash);
    }
}

#[test]
fn mismatched_surrogate_and_representation_are_rejected() {
    let pool = feature_pool(12, 3);
    let cfg = CampaignConfig {
        surrogate: SurrogateSpec::Gp(GpConfig::new(KernelKind::Tanimoto)),
        representation: Representation::Features,
        acquisition: AcquisitionSpec::Thompson,
        t_budget: 2,
        m_init: 3,
        seed: 1,
        joint_cap: DEFAULT_JOINT_CAP,
    };
    assert!(run_campaign(pool.clone(), &cfg).is_err());

    let cfg2 = CampaignConfig {
        surrogate: SurrogateSpec::Gp(GpConfig::new(KernelKind::Matern52)),
        representation: Representation::Fingerprints {
            radius: 2,
            bits: 256,
        },
        ..cfg
    };
    assert!(run_campaign(pool, &cfg2).is_err());
}

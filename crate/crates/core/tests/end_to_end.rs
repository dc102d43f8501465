//! Train a small defended model on synthetic digits and attack it through
//! the public API.

use blindguard_core::attacks::{bpda_attack, AttackConfig, AttackKind, AttackMode, Surrogate};
use blindguard_core::blind::{BlindGate, BlindKey, TrainingAlgorithm};
use blindguard_core::checkpoint::Checkpoint;
use blindguard_core::data::Dataset;
use blindguard_core::evaluation::{run_attack, Defender};
use blindguard_core::model::{Architecture, Model};
use blindguard_core::preprocess::Pipeline;
use blindguard_core::train::{accuracy, train, TrainConfig};
use blindguard_core::Tensor;

const KEY: [u8; 16] = [9, 8, 7, 6, 5, 4, 3, 2, 1, 0, 1, 2, 3, 4, 5, 6];

/// Class `c` is a horizontal bar at rows `2c+4, 2c+5` over faint noise.
fn bars(n: usize, offset: usize) -> Dataset {
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in offset..offset + n {
        let c = (i * 7) % 10;
        labels.push(c);
        for r in 0..28 {
            for col in 0..28 {
                let on = r / 2 == c + 2 && (4..24).contains(&col);
                let noise = ((i * 31 + r * 17 + col * 13) % 23) as f64 / 255.0;
                pixels.push(if on { 0.9 } else { noise });
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 1, 28, 28], pixels).unwrap(), labels, "bars").unwrap()
}

fn trained() -> (Model, Pipeline) {
    let p = Pipeline::canonical(15).unwrap();
    let mut model = Model::build(Architecture::mnist(15), 5).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 50,
        lr: 0.05,
        ..TrainConfig::default()
    };
    train(&mut model, &bars(300, 0), Some(&p), &cfg).unwrap();
    (model, p)
}

fn attack(epsilon: f64, mode: AttackMode) -> AttackConfig {
    AttackConfig {
        epsilon,
        steps: 5,
        mode,
        seed: 3,
        ..AttackConfig::default()
    }
}

#[test]
fn defended_model_end_to_end() {
    let (model, p) = trained();
    let key = BlindKey::from_bytes(KEY);
    let gate = BlindGate::with_salt(p.clone(), &key, [2; 16]);
    let def = Defender::gated(&model, TrainingAlgorithm::Clean, &gate, &key);
    let test = bars(60, 1000);
    let clean = def.clean_accuracy(&test, 20).unwrap();
    assert!(clean >= 90.0, "clean accuracy {clean}");

    let blind = run_attack(&def, &test, AttackKind::Lspga, &attack(0.3, AttackMode::Blind), 20).unwrap();
    assert_eq!(blind.pipeline_calls, 0);
    assert_eq!(blind.examples, 60);
    assert!(blind.attack_acc <= clean);
    // Knowing the pipeline can only help the attacker.
    let full = run_attack(
        &def,
        &test,
        AttackKind::Lspga,
        &attack(0.3, AttackMode::FullWhiteBox),
        20,
    )
    .unwrap();
    assert!(
        full.attack_acc <= blind.attack_acc + 5.0,
        "full {} blind {}",
        full.attack_acc,
        blind.attack_acc
    );
    // No budget, no change.
    let none = run_attack(&def, &test, AttackKind::Lspga, &attack(0.0, AttackMode::Blind), 20).unwrap();
    assert_eq!(none.attack_acc, clean);

    // The checkpoint reproduces the defender's predictions exactly.
    let ckpt = Checkpoint {
        model: model.clone(),
        pipeline: Some(p.clone()),
        training: TrainingAlgorithm::Clean,
        train_config: None,
        key_check: Some(gate.key_check().clone()),
    };
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let regate = BlindGate::from_key_check(back.pipeline.unwrap(), back.key_check.unwrap());
    let again = Defender::gated(&back.model, back.training, &regate, &key);
    assert_eq!(
        again.predict(&test.images, 20).unwrap(),
        def.predict(&test.images, 20).unwrap()
    );
}

#[test]
fn bpda_with_the_true_pipeline_is_at_least_as_strong() {
    let (model, p) = trained();
    let key = BlindKey::from_bytes(KEY);
    let gate = BlindGate::with_salt(p.clone(), &key, [2; 16]);
    let def = Defender::gated(&model, TrainingAlgorithm::Clean, &gate, &key);
    let test = bars(60, 2000);
    let view = def.attacker_view(&test, 20).unwrap();
    let cfg = AttackConfig {
        epsilon: 0.3,
        steps: 10,
        step_size: 0.05,
        mode: AttackMode::Bpda,
        seed: 4,
        ..AttackConfig::default()
    };
    let score = |s: Surrogate<'_>| {
        let adv = bpda_attack(&view, s, &cfg, 20).unwrap();
        let raw = adv.raw.expect("bpda returns pixels");
        // Perturbations stay inside the budget and the pixel range.
        let moved = raw.data().iter().zip(test.images.data()).map(|(a, b)| (a - b).abs());
        assert!(moved.fold(0.0, f64::max) <= 0.3 + 1e-12);
        assert!(raw.data().iter().all(|v| (0.0..=1.0).contains(v)));
        accuracy(&def.predict(&raw, 20).unwrap(), &test.labels)
    };
    let identity = score(Surrogate::Identity);
    let oracle = score(Surrogate::Oracle(&p));
    assert!(oracle <= identity + 5.0, "oracle {oracle} identity {identity}");
}

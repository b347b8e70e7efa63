use starlite_core::image::Image;
use starlite_core::rope::PosEncoding;
use starlite_core::toyworld::gen_dataset;
use starlite_core::train::{fit_tokenizer, train, Checkpoint, Stage, TrainConfig, TrainedModel};
use starlite_core::Error;

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        seed: 7,
        stages: vec![Stage::new(16, 4, 3e-3, steps).unwrap()],
        depth: 1,
        d_model: 32,
        heads: 2,
        vocab: 16,
        feat_dim: 8,
        mask_steps: 3,
        mask_batch: 2,
        codebook_images: 32,
        ..TrainConfig::default()
    }
}

fn data(n: usize, res: usize) -> (Vec<Image>, Vec<String>) {
    let s = gen_dataset(11, n, res);
    (
        s.iter().map(|x| x.image.clone()).collect(),
        s.iter().map(|x| x.caption.clone()).collect(),
    )
}

#[test]
fn zero_steps_leaves_initial_parameters() {
    let (imgs, caps) = data(32, 16);
    let cfg = TrainConfig {
        mask_steps: 0,
        ..tiny_config(0)
    };
    let tok = fit_tokenizer(&cfg, &imgs).unwrap();
    let fresh = TrainedModel::init(cfg.clone(), tok).unwrap();
    let run = train(cfg, &imgs, &caps).unwrap().trained;
    assert_eq!(run.model.params, fresh.model.params);
    assert!(run.history.is_empty());
    assert!(run.mask_head.is_none());
}

#[test]
fn runs_are_deterministic_and_checkpoints_round_trip() {
    let (imgs, caps) = data(32, 16);
    let a = train(tiny_config(4), &imgs, &caps).unwrap().trained;
    let b = train(tiny_config(4), &imgs, &caps).unwrap().trained;
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history.len(), 4);
    assert_eq!(a.mask_history.len(), 3);

    let bytes = a.to_checkpoint().to_bytes().unwrap();
    let back = TrainedModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_checkpoint().to_bytes().unwrap(), bytes);
}

#[test]
fn short_run_reduces_loss() {
    let (imgs, caps) = data(64, 16);
    let run = train(
        TrainConfig {
            mask_steps: 0,
            ..tiny_config(60)
        },
        &imgs,
        &caps,
    )
    .unwrap()
    .trained;
    let mean = |r: &[starlite_core::train::StepLog]| {
        r.iter().map(|l| l.loss).sum::<f32>() / r.len() as f32
    };
    let (first, last) = (mean(&run.history[..10]), mean(&run.history[50..]));
    assert!(last < first - 0.1, "loss {first} -> {last}");
}

#[test]
fn absolute_positions_cannot_finetune_to_a_new_resolution() {
    let (imgs, caps) = data(32, 32);
    let cfg = TrainConfig {
        pos_encoding: PosEncoding::Absolute,
        mask_steps: 0,
        ..tiny_config(1)
    };
    let mut tm = train(cfg, &imgs, &caps).unwrap().trained;
    let stage = Stage::new(32, 2, 1e-3, 1).unwrap();
    let enc = tm.encode(&imgs, &caps, &stage).unwrap();
    assert!(matches!(
        tm.finetune_resolution(stage, &enc),
        Err(Error::Config(_))
    ));
}

#[test]
fn normalized_positions_finetune_to_a_longer_schedule() {
    let (imgs, caps) = data(32, 32);
    let mut tm = train(
        TrainConfig {
            mask_steps: 0,
            ..tiny_config(1)
        },
        &imgs,
        &caps,
    )
    .unwrap()
    .trained;
    let stage = Stage::new(32, 2, 1e-3, 2).unwrap();
    let enc = tm.encode(&imgs, &caps, &stage).unwrap();
    tm.finetune_resolution(stage.clone(), &enc).unwrap();
    assert_eq!(tm.model.config.schedule, stage.schedule);
    assert_eq!(tm.history.len(), 3);
    let eval = tm.evaluate(&enc, 8).unwrap();
    assert!(eval.loss.is_finite() && (0.0..=1.0).contains(&eval.accuracy));
    let back = TrainedModel::from_checkpoint(&tm.to_checkpoint()).unwrap();
    assert_eq!(back.model.config.schedule, stage.schedule);
}

#[test]
fn windowed_training_runs() {
    let (imgs, caps) = data(16, 16);
    let cfg = TrainConfig {
        window_side: 2,
        mask_steps: 0,
        ..tiny_config(2)
    };
    let run = train(cfg, &imgs, &caps).unwrap();
    assert!(run.trained.history.iter().all(|l| l.loss.is_finite()));
    assert!(run.timings[0].tokens_per_sec > 0.0);
}

#[test]
fn mask_head_recovers_half_masked_tokens() {
    let (imgs, caps) = data(160, 16);
    let cfg = TrainConfig {
        mask_steps: 200,
        mask_batch: 8,
        ..tiny_config(80)
    };
    let tm = train(cfg.clone(), &imgs, &caps).unwrap().trained;
    let held = gen_dataset(12, 64, 16);
    let (hi, hc): (Vec<Image>, Vec<String>) =
        held.into_iter().map(|x| (x.image, x.caption)).unzip();
    let enc = tm.encode(&hi, &hc, &cfg.stages[0]).unwrap();
    let acc = tm.mask_head_accuracy(&enc, 64, 0.5, 5).unwrap();
    let chance = 1.0 / cfg.vocab as f64;
    assert!(
        acc >= 5.0 * chance,
        "masked accuracy {acc} vs chance {chance}"
    );
}

mod common;

use maskctl_core::conditioning::{
    assemble_condition, controlnet_forward, init_controlnet_from_backbone, text_encode, ConditionStack, MaskMode,
    ADAPTER_PREFIX, CONTROL_PREFIX,
};
use maskctl_core::diffusion_core::{denoise_predict, is_encoder_tensor, Sampler};
use maskctl_core::generation::{generate, Request};
use maskctl_core::optimize::Checkpoint;
use maskctl_core::raster::apply_mask;
use maskctl_core::seeding::{rng_for, stream};
use maskctl_core::synthetic_data::caption_from_metadata;
use maskctl_core::training::{
    control_checkpoint, draw_noise, load_control, run_training_with_minimum, ModelState, Partition, TrainConfig,
    Trainer, TrainingData,
};
use maskctl_tensor::Tensor;

#[test]
fn stack_channels_follow_mask_mode() {
    let r = &common::tiny_records(1, 2)[0];
    let with = ConditionStack::build(&[(&r.image, &r.mask)], MaskMode::WithMask).unwrap().0;
    let dup = ConditionStack::build(&[(&r.image, &r.mask)], MaskMode::DuplicateReference).unwrap().0;
    let n = r.image.data().len();
    assert_eq!(&with.data()[..n], apply_mask(&r.image, &r.mask).unwrap().data());
    assert_eq!(&with.data()[n..], r.image.data());
    assert_eq!(&dup.data()[..n], r.image.data());
    assert_eq!(&dup.data()[n..], r.image.data());
}

#[test]
fn fresh_branch_copies_encoder_and_zeroes_outputs() {
    let backbone = common::tiny_backbone(5);
    let control = init_controlnet_from_backbone(&backbone.unet, MaskMode::WithMask, 5);
    for (name, t) in backbone.unet.store.iter().filter(|(n, _)| is_encoder_tensor(n)) {
        assert_eq!(control.store.get(&format!("{CONTROL_PREFIX}{name}")).unwrap(), t, "{name}");
    }
    let zero_convs: Vec<_> = control.store.iter().filter(|(n, _)| n.contains("zero.")).collect();
    assert_eq!(zero_convs.len(), 2 * backbone.unet.config.injection_points());
    assert!(zero_convs.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn fresh_branch_is_transparent() {
    let backbone = common::tiny_backbone(6);
    let control = init_controlnet_from_backbone(&backbone.unet, MaskMode::WithMask, 6);
    let r = &common::tiny_records(1, 6)[0];
    let cond = assemble_condition(&r.image, &r.mask, &control, &backbone.vae).unwrap();
    let text = text_encode(&caption_from_metadata(&r.metadata), &backbone.text).unwrap();
    let text = text.reshape(&[1, backbone.text.out_dim()]).unwrap();
    let shape = backbone.latent_shape(common::TINY_SIZE);
    let z = Tensor::<f32>::randn(&[1, shape[0], shape[1], shape[2]], &mut rng_for(6, stream::SAMPLER, 0));
    let cfg = &backbone.unet.config;
    let residuals = controlnet_forward(&z, &[17], &text, &cond, &control, cfg).unwrap();
    assert_eq!(residuals.len(), cfg.injection_points());
    assert!(residuals.iter().all(|r| r.data().iter().all(|&v| v == 0.0)));
    let plain = denoise_predict(&z, &[17], &text, None, &backbone.unet).unwrap();
    let injected = denoise_predict(&z, &[17], &text, Some(&residuals), &backbone.unet).unwrap();
    assert_eq!(plain, injected);

    let caption = caption_from_metadata(&r.metadata);
    let req = [Request {
        reference: &r.image,
        mask: &r.mask,
        caption: &caption,
        seed: 3,
    }];
    let sampler = Sampler::Ddim { steps: 5, eta: 0.0 };
    assert_eq!(
        generate(&backbone, None, &req, sampler).unwrap(),
        generate(&backbone, Some(&control), &req, sampler).unwrap()
    );
}

#[test]
fn partition_is_complete_and_disjoint() {
    let state = ModelState::new(common::tiny_backbone(1), MaskMode::WithMask, 1);
    let m = state.partition_manifest();
    let frozen = state.backbone.frozen_store();
    assert_eq!(m.len(), frozen.len() + state.control.store.len());
    assert!(frozen.names().all(|n| m[n] == Partition::Frozen));
    assert!(state.control.store.names().all(|n| m[n] == Partition::Trainable));
    assert!(state.control.store.names().all(|n| n.starts_with(ADAPTER_PREFIX) || n.starts_with(CONTROL_PREFIX)));
}

#[test]
fn training_step_moves_only_the_branch() {
    let mut state = ModelState::new(common::tiny_backbone(2), MaskMode::WithMask, 2);
    let records = common::tiny_records(4, 2);
    let data = TrainingData::prepare(&records, &state.backbone).unwrap();
    let shape = state.backbone.latent_shape(common::TINY_SIZE);
    let mut rng = rng_for(2, stream::BATCH, 0);
    let frozen_before = state.backbone.frozen_store().digests();
    let control_before = state.control.store.digests();
    let mut trainer = Trainer::new(TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    })
    .unwrap();
    for _ in 0..2 {
        let (ts, eps) = draw_noise(&mut rng, 4, &shape, state.backbone.schedule.steps());
        let batch = data.batch(&[0, 1, 2, 3], MaskMode::WithMask, ts, eps).unwrap();
        assert!(trainer.train_step(&batch, &mut state).unwrap().is_finite());
    }
    assert_eq!(state.backbone.frozen_store().digests(), frozen_before);
    let after = state.control.store.digests();
    let zero_moved = after.iter().any(|(n, d)| n.contains("zero.") && control_before[n] != *d);
    assert!(zero_moved, "zero convolutions did not receive updates");
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        steps,
        checkpoint_every: 3,
        seed: 21,
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let records = common::tiny_records(12, 21);
    let dir = tempfile::tempdir().unwrap();
    let fresh = || ModelState::new(common::tiny_backbone(21), MaskMode::WithMask, 21);

    let mut straight = fresh();
    let full_log = run_training_with_minimum(&records, &mut straight, &tiny_config(6), None, 1).unwrap();

    let path = dir.path().join("control.ckpt");
    let mut first = fresh();
    run_training_with_minimum(&records, &mut first, &tiny_config(3), Some(&path), 1).unwrap();
    let mut resumed = fresh();
    let log = run_training_with_minimum(&records, &mut resumed, &tiny_config(6), Some(&path), 1).unwrap();

    assert_eq!(resumed.control.store.digest(), straight.control.store.digest());
    assert_eq!(log.losses(), full_log.losses());

    let mut again = fresh();
    run_training_with_minimum(&records, &mut again, &tiny_config(6), None, 1).unwrap();
    assert_eq!(again.control.store.digest(), straight.control.store.digest());
}

#[test]
fn control_checkpoint_roundtrip_and_mode_guard() {
    let dir = tempfile::tempdir().unwrap();
    let state = ModelState::new(common::tiny_backbone(8), MaskMode::DuplicateReference, 8);
    let path = dir.path().join("c.ckpt");
    control_checkpoint(&state.control.store, state.control.mask_mode, &tiny_config(1), None, &Default::default())
        .save(&path)
        .unwrap();
    let back = load_control(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back, state.control);

    let records = common::tiny_records(4, 8);
    let mut other = ModelState::new(common::tiny_backbone(8), MaskMode::WithMask, 8);
    assert!(run_training_with_minimum(&records, &mut other, &tiny_config(2), Some(&path), 1).is_err());
}

#[test]
fn too_few_scenes_is_rejected() {
    let records = common::tiny_records(3, 1);
    let mut state = ModelState::new(common::tiny_backbone(1), MaskMode::WithMask, 1);
    assert!(run_training_with_minimum(&records, &mut state, &tiny_config(1), None, 4).is_err());
}

#[test]
fn zero_residuals_are_transparent_over_random_probes() {
    let backbone = common::tiny_backbone(13);
    let control = init_controlnet_from_backbone(&backbone.unet, MaskMode::WithMask, 13);
    let shape = backbone.latent_shape(common::TINY_SIZE);
    let cfg = &backbone.unet.config;
    let mut rng = rng_for(13, stream::SAMPLER, 1);
    let dim = backbone.text.out_dim();
    for probe in 0..100 {
        let z = Tensor::<f32>::randn(&[2, shape[0], shape[1], shape[2]], &mut rng);
        let text = Tensor::<f32>::randn(&[2, dim], &mut rng);
        let cond = Tensor::<f32>::randn(z.shape(), &mut rng);
        let t = (probe * 7) % backbone.schedule.steps();
        let ts = [t, backbone.schedule.steps() - 1 - t];
        let residuals = controlnet_forward(&z, &ts, &text, &cond, &control, cfg).unwrap();
        let zeros: Vec<Tensor<f32>> = residuals.iter().map(|r| Tensor::zeros(r.shape())).collect();
        assert_eq!(residuals, zeros, "probe {probe}");
        assert_eq!(
            denoise_predict(&z, &ts, &text, None, &backbone.unet).unwrap(),
            denoise_predict(&z, &ts, &text, Some(&zeros), &backbone.unet).unwrap(),
            "probe {probe}"
        );
    }
}

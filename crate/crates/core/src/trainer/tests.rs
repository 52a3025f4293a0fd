use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::{finite_diff_check, random_coords, Tensor};
use crate::encoder::EncoderConfig;
use crate::field::FieldConfig;
use crate::rendering::SamplingConfig;
use crate::synthdata::{generate_dataset, DatasetConfig};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: vec![4, 4],
            strides: vec![2, 1],
            rgb_skip: true,
        },
        human_encoder: EncoderConfig {
            channels: vec![3],
            strides: vec![1],
            rgb_skip: true,
        },
        field: FieldConfig {
            hidden: 8,
            pe_bands: 1,
            dir_bands: 1,
            depth_bands: 1,
            ..FieldConfig::default()
        },
        sampling: SamplingConfig {
            n_coarse: 6,
            n_fine: 3,
            ..SamplingConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn fixture(resolution: u32, frames: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        subjects: 1,
        held_out_subjects: 0,
        frames,
        cameras_on_ring: 6,
        held_out_cameras: 1,
        resolution,
        ..DatasetConfig::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

fn tiny_train(steps: u64) -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        source_views: 2,
        rays: 24,
        patch_size: 2,
        patches: 1,
        steps,
        lr_halving_period: 4,
        ..TrainConfig::default()
    }
}

fn scalar(tape: &mut Tape<f64>, values: &[f64], cols: usize) -> Var {
    tape.leaf(Tensor::new(vec![values.len() / cols, cols], values.to_vec()).unwrap())
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let mut tape = Tape::<f64>::new();
    let color = [0.2, 0.4, 0.6, 0.1, 0.1, 0.9];
    let heat = [0.5, 0.0, 1.0, 0.25];
    let patch: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
    let pred = Prediction {
        color: scalar(&mut tape, &color, 3),
        coarse_color: Some(scalar(&mut tape, &color, 3)),
        heat: Some(scalar(&mut tape, &heat, 2)),
        patch: Some(scalar(&mut tape, &patch, 3)),
        coord: Some((scalar(&mut tape, &[0.5, 0.5], 2), scalar(&mut tape, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3))),
    };
    let gt = Targets {
        color: &color[..],
        heat: Some(&heat[..]),
        patch: Some(&patch[..]),
        coord: Some(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6][..]),
    };
    let l = compute_losses(&mut tape, &pred, &gt, &LossWeights::default(), 2).unwrap();
    let v = l.values(&tape);
    assert_eq!([v.total, v.l_col, v.l_perc, v.l_heat, v.l_coord], [0.0; 5]);
}

fn fixture_losses(w: LossWeights) -> LossValues {
    let mut tape = Tape::<f64>::new();
    let color = [0.2, 0.4, 0.6, 0.1, 0.1, 0.9, 0.0, 0.3, 0.3, 0.7, 0.7, 0.7];
    let color_gt = [0.3, 0.4, 0.5, 0.1, 0.2, 0.9, 0.1, 0.3, 0.3, 0.7, 0.6, 0.5];
    let heat = [0.5, 0.1];
    let heat_gt = [0.3, 0.4];
    let coord = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    let coord_gt = [0.0, 0.2, 0.4, 0.4, 0.4, 0.4];
    let pred = Prediction {
        color: scalar(&mut tape, &color, 3),
        coarse_color: None,
        heat: Some(scalar(&mut tape, &heat, 2)),
        patch: Some(scalar(&mut tape, &color, 3)),
        coord: Some((scalar(&mut tape, &[0.25, 0.75], 2), scalar(&mut tape, &coord, 3))),
    };
    let gt = Targets {
        color: &color_gt[..],
        heat: Some(&heat_gt[..]),
        patch: Some(&color_gt[..]),
        coord: Some(&coord_gt[..]),
    };
    let l = compute_losses(&mut tape, &pred, &gt, &w, 2).unwrap();
    l.values(&tape)
}

#[test]
fn fixture_batch_matches_hand_computed_sum() {
    let v = fixture_losses(LossWeights::default());
    // color: squared errors 0.01+0+0.01+0+0.01+0+0.01+0+0+0+0.01+0.04 = 0.09 over 12
    assert!((v.l_col - 0.09 / 12.0).abs() < 1e-12);
    // heat: 0.04 + 0.09 over 2
    assert!((v.l_heat - 0.065).abs() < 1e-12);
    // coord: (0.25·(0.01+0+0.01) + 0.75·(0+0.01+0.04)) / 3 over one ray
    assert!((v.l_coord - (0.25 * 0.02 + 0.75 * 0.05) / 3.0).abs() < 1e-12);
    // one 2x2 patch: horizontal pairs (0,1), (2,3); vertical (0,2), (1,3)
    let p = [[0.2, 0.4, 0.6], [0.1, 0.1, 0.9], [0.0, 0.3, 0.3], [0.7, 0.7, 0.7]];
    let g = [[0.3, 0.4, 0.5], [0.1, 0.2, 0.9], [0.1, 0.3, 0.3], [0.7, 0.6, 0.5]];
    let mut s = 0.0;
    for (a, b) in [(0, 1), (2, 3), (0, 2), (1, 3)] {
        for c in 0..3 {
            let e: f64 = (p[b][c] - p[a][c]) - (g[b][c] - g[a][c]);
            s += e * e;
        }
    }
    assert!((v.l_perc - s / 12.0).abs() < 1e-12);
    let expect = v.l_col + 0.01 * v.l_perc + 0.5 * v.l_heat + 0.01 * v.l_coord;
    assert!((v.total - expect).abs() < 1e-12);
}

#[test]
fn doubling_lambda_h_doubles_its_contribution() {
    let a = fixture_losses(LossWeights::default());
    let b = fixture_losses(LossWeights {
        lambda_h: 1.0,
        ..LossWeights::default()
    });
    assert!(((b.total - a.total) - 0.5 * a.l_heat).abs() < 1e-12);
}

#[test]
fn loss_shape_mismatches_are_errors() {
    let mut tape = Tape::<f64>::new();
    let c = scalar(&mut tape, &[0.0; 6], 3);
    let pred = Prediction {
        color: c,
        coarse_color: None,
        heat: Some(c),
        patch: None,
        coord: None,
    };
    let gt = Targets {
        color: &[0.0; 6][..],
        heat: None,
        patch: None,
        coord: None,
    };
    assert!(matches!(compute_losses(&mut tape, &pred, &gt, &LossWeights::default(), 2), Err(Error::Shape(_))));
    let pred = Prediction { heat: None, ..pred };
    let gt = Targets {
        color: &[0.0; 4][..],
        ..gt
    };
    assert!(compute_losses(&mut tape, &pred, &gt, &LossWeights::default(), 2).is_err());
    let bad = LossWeights {
        lambda_p: -1.0,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn patch_origins_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(3..12), rng.gen_range(3..12));
        let data: Vec<u8> = (0..w * h).map(|_| if rng.gen_bool(0.8) { 255 } else { 0 }).collect();
        let m = Mask::new(w, h, data).unwrap();
        let p = rng.gen_range(1..4);
        let mut brute = Vec::new();
        for y in 0..=h - p {
            for x in 0..=w - p {
                if (0..p).all(|dy| (0..p).all(|dx| m.get(x + dx, y + dy))) {
                    brute.push((x, y));
                }
            }
        }
        assert_eq!(patch_origins(&m, p), brute);
    }
}

#[test]
fn foreground_sampling_stays_in_mask_and_covers_it() {
    let (_dir, ds) = fixture(64, 1);
    let frame = &ds.frames[0];
    let view = &frame.views[0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_ray_batch(frame, view, 100_000, 3, 4, RaySampling::Foreground, false, &mut rng).unwrap();
    let mut hit = vec![false; 64 * 64];
    for &(x, y) in &b.pixels {
        assert!(view.mask.get(x, y));
        hit[y * 64 + x] = true;
    }
    for i in 0..hit.len() {
        if view.mask.data[i] == 255 {
            assert!(hit[i], "mask pixel {i} never drawn");
        }
    }
    assert_eq!(b.singles, 100_000);
    assert_eq!(b.patches(), 3);
    for window in b.pixels[b.singles..].chunks(16) {
        let (x0, y0) = window[0];
        for (k, &(x, y)) in window.iter().enumerate() {
            assert_eq!((x, y), (x0 + k % 4, y0 + k / 4));
            assert!(view.mask.get(x, y));
        }
    }
    assert_eq!(b.colors.len(), b.rays.len() * 3);
    assert_eq!(b.heat.len(), b.rays.len() * ds.num_joints());
}

#[test]
fn box_sampling_rays_cross_the_subject_box() {
    let (_dir, ds) = fixture(32, 1);
    let frame = &ds.frames[0];
    let view = &frame.views[1];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = sample_ray_batch(
        frame,
        view,
        400,
        0,
        8,
        RaySampling::Box {
            foreground_fraction: 0.25,
        },
        false,
        &mut rng,
    )
    .unwrap();
    let region = box_mask(&view.camera, &frame.bounds).unwrap();
    assert_eq!(b.rays.len(), 400);
    assert!(b.pixels.iter().all(|&(x, y)| region.get(x, y)));
    assert!(b.pixels[..100].iter().all(|&(x, y)| view.mask.get(x, y)));
    assert!(b.pixels.iter().any(|&(x, y)| !view.mask.get(x, y)));
    for r in &b.rays {
        assert!(frame.bounds.padded(1e-9).contains(r.point_at(r.t_near)));
        assert!(frame.bounds.padded(1e-9).contains(r.point_at(r.t_far)));
    }
}

#[test]
fn empty_mask_is_rejected() {
    let (_dir, ds) = fixture(16, 1);
    let mut frame = ds.frames[0].clone();
    frame.views[0].mask = Mask::filled(16, 16, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_ray_batch(&frame, &frame.views[0], 4, 0, 2, RaySampling::Foreground, false, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn training_is_deterministic_and_halves_the_rate() {
    let (_dir, ds) = fixture(24, 2);
    let cfg = tiny_train(10);
    let a = train_on(&cfg, &ds, None, |_| {}).unwrap();
    let b = train_on(&cfg, &ds, None, |_| {}).unwrap();
    assert_eq!(a.log.len(), 10);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.l_heat.to_bits(), y.l_heat.to_bits());
    }
    assert_eq!(a.log[0].lr, cfg.lr);
    assert_eq!(a.log[4].lr, cfg.lr / 2.0);
    assert_eq!(a.log[8].lr, cfg.lr / 4.0);
    for (id, _, t) in a.checkpoint.store.iter() {
        assert_eq!(t.data(), b.checkpoint.store.get(id).data());
    }
    assert!(a.log.iter().all(|l| l.l_perc >= 0.0 && l.l_coord == 0.0));
}

#[test]
fn resumed_run_replays_the_same_trace() {
    let (_dir, ds) = fixture(24, 2);
    let cfg = tiny_train(6);
    let full = train_on(&cfg, &ds, None, |_| {}).unwrap();
    let head = train_on(&TrainConfig { steps: 3, ..cfg.clone() }, &ds, None, |_| {}).unwrap();
    let mut t = Trainer::resume(&cfg, &ds, &head.checkpoint).unwrap();
    for k in 3..6 {
        let entry = t.step().unwrap();
        assert_eq!(entry, full.log[k]);
    }
}

#[test]
fn run_writes_log_and_loadable_checkpoint() {
    let (_dir, ds) = fixture(24, 1);
    let out = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        coord_loss: true,
        ..tiny_train(3)
    };
    let run = train_on(&cfg, &ds, Some(out.path()), |_| {}).unwrap();
    let text = std::fs::read_to_string(out.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<StepLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, run.log);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "l_col", "l_perc", "l_heat", "l_coord", "total"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert!(run.log.iter().all(|l| l.l_coord > 0.0));
    let ck = load_checkpoint(&out.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(ck.config, run.checkpoint.config);
}

#[test]
fn checkpoint_round_trip_renders_bit_exactly() {
    let (_dir, ds) = fixture(24, 1);
    let run = train_on(&tiny_train(2), &ds, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ghtf");
    save_checkpoint(&run.checkpoint, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let frame = &ds.frames[0];
    let target = ds.cameras[ds.held_out_cameras()[0]];
    let a = render_frame_view(&run.checkpoint.model().unwrap(), &ds, frame, &target, None, 2, SamplingMode::Guided).unwrap();
    let b = render_frame_view(&back.model().unwrap(), &ds, frame, &target, None, 2, SamplingMode::Guided).unwrap();
    assert_eq!(a, b);
    let (x, y) = (run.checkpoint.optimizer.clone().unwrap(), back.optimizer.clone().unwrap());
    assert_eq!((x.step, x.lr.to_bits()), (y.step, y.lr.to_bits()));
    assert_eq!(x.second, y.second);

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ghtf");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format(_))));
    let mut bumped = bytes.clone();
    bumped[4] = 2;
    let ver = dir.path().join("ver.ghtf");
    std::fs::write(&ver, &bumped).unwrap();
    assert!(matches!(load_checkpoint(&ver), Err(Error::Version { .. })));

    let mut other = back.config.clone();
    other.field.hidden += 1;
    assert!(matches!(back.ensure_compatible(&other), Err(Error::Incompatible(_))));
}

#[test]
fn tampered_checkpoint_config_is_incompatible() {
    let (_dir, ds) = fixture(16, 1);
    let run = train_on(&tiny_train(1), &ds, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ghtf");
    save_checkpoint(&run.checkpoint, &path).unwrap();
    let records = ghtf::load_records(&path).unwrap();
    let rewritten: Vec<(Option<String>, TensorData)> = records
        .into_iter()
        .map(|r| {
            if r.name.as_deref() == Some(META) {
                let TensorData::U8 { data, .. } = r.data else { unreachable!() };
                let mut meta: serde_json::Value = serde_json::from_slice(&data).unwrap();
                meta["config"]["field"]["hidden"] = serde_json::json!(9);
                let data = serde_json::to_vec(&meta).unwrap();
                (r.name, TensorData::U8 { shape: vec![data.len()], data })
            } else {
                (r.name, r.data)
            }
        })
        .collect();
    ghtf::save_records(&path, rewritten.iter().map(|(n, d)| (n.as_deref(), d))).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Incompatible(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let (_dir, ds) = fixture(16, 1);
    for cfg in [
        TrainConfig { source_views: 6, ..tiny_train(1) },
        TrainConfig { rays: 0, ..tiny_train(1) },
        TrainConfig { lr: f64::NAN, ..tiny_train(1) },
        TrainConfig {
            sampling: RaySampling::Box { foreground_fraction: 1.5 },
            ..tiny_train(1)
        },
    ] {
        assert!(matches!(Trainer::new(&cfg, &ds), Err(Error::Argument(_))));
    }
}

fn gradient_setup(ds: &Dataset, coord: bool) -> (TrainConfig, ModelConfig, RayBatch, Vec<usize>) {
    let cfg = TrainConfig {
        coord_loss: coord,
        ..tiny_train(1)
    };
    let model_cfg = cfg.resolved_model(ds);
    let frame = &ds.frames[0];
    let view = frame.view(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = sample_ray_batch(frame, view, 4, 1, 2, RaySampling::Foreground, false, &mut rng).unwrap();
    assert_eq!(batch.rays.len(), 8, "fixture needs a 2x2 patch inside the mask");
    let sources = choose_sources(ds, &view.camera, 2);
    (cfg, model_cfg, batch, sources)
}

#[test]
fn full_pipeline_gradients_match_finite_differences() {
    let (_dir, ds) = fixture(24, 1);
    let (cfg, model_cfg, batch, sources) = gradient_setup(&ds, true);
    let frame = &ds.frames[0];
    let views = source_views(frame, &sources).unwrap();
    let model = Model::<f64>::new(&model_cfg, 11).unwrap();
    let mut store = model.store.clone();
    // zero conv biases put every black background pixel exactly on a
    // ReLU kink; move them off it
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let biases: Vec<_> = store.iter().filter(|(_, n, _)| n.ends_with("bias")).map(|(id, _, _)| id).collect();
    for id in biases {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let objective = |s: &ParamStore<f64>| {
        let m = Model::from_store(&model_cfg, s.clone())?;
        let mut tape = Tape::new();
        let l = batch_loss(&m, &mut tape, &views, &batch, &cfg, SamplingMode::Uniform(5), &mut Jitter::Off)?;
        let v = l.values(&tape);
        assert!(v.l_col > 0.0 && v.l_perc > 0.0 && v.l_heat > 0.0 && v.l_coord > 0.0);
        let value = tape.value(l.total).data()[0];
        Ok((value, tape.backward(l.total, None)?))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let coords = random_coords(&store, 24, &["img_encoder", "human_encoder", "field"], &mut rng);
    let err = finite_diff_check(objective, &mut store, Some(&coords), 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn zero_lambda_h_isolates_the_heat_head() {
    let (_dir, ds) = fixture(24, 1);
    let (mut cfg, model_cfg, batch, sources) = gradient_setup(&ds, false);
    cfg.loss.lambda_h = 0.0;
    let views = source_views(&ds.frames[0], &sources).unwrap();
    let model = Model::<f64>::new(&model_cfg, 3).unwrap();
    let mut tape = Tape::new();
    let l = batch_loss(&model, &mut tape, &views, &batch, &cfg, SamplingMode::Guided, &mut Jitter::Off).unwrap();
    assert!(l.values(&tape).l_heat > 0.0);
    let grads = tape.backward(l.total, None).unwrap();
    let mut touched = 0;
    for (id, name, _) in model.store.iter() {
        let g = grads.get(id).map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum::<f64>());
        if name.starts_with("field.g_h") || name.starts_with("human_encoder") {
            assert_eq!(g, 0.0, "{name}");
        } else if name.starts_with("field.g_c") {
            touched += usize::from(g > 0.0);
        }
    }
    assert!(touched > 0);
}


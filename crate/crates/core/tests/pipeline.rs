use bilagrid::grid4d::{Grid4Dims, FAMILY_COEFF};
use bilagrid::losses::render_loss;
use bilagrid::pipeline::edits::affine_edit;
use bilagrid::pipeline::synthetic::{geometry_only, synthetic_setup, SyntheticConfig, SyntheticSetup};
use bilagrid::pipeline::*;
use bilagrid::{Adam, AdamConfig, AffineTransform, BilateralGrid3D, Error, GuidanceFn, LowRank4DGrid, RenderOptions, Rgb};

const FAST: RenderOptions = RenderOptions {
    samples: 40,
    jitter_seed: None,
};

fn small_setup() -> SyntheticSetup {
    synthetic_setup(&SyntheticConfig {
        resolution: 12,
        image_size: 12,
        train_views: 4,
        test_views: 2,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn small_dataset(isp: &IspConfig) -> (SyntheticSetup, Vec<ViewRecord>) {
    let s = small_setup();
    let recs = synthesize_dataset(&s.scene, &s.train_cameras, isp, &FAST, 11).unwrap();
    (s, recs)
}

fn stage_one_cfg(steps: usize) -> StageOneConfig {
    StageOneConfig {
        steps,
        render: FAST,
        grid_dims: [4, 4, 2],
        grid_warmup: steps / 5,
        ..StageOneConfig::default()
    }
}

#[test]
fn frozen_fit_without_tv_is_the_plain_scene_fit() {
    let (s, recs) = small_dataset(&IspConfig::varied());
    let init = geometry_only(&s.scene, 0.5);
    let cfg = StageOneConfig {
        freeze_grids: true,
        lambda_tv: 0.0,
        ..stage_one_cfg(25)
    };
    let fitted = fit_stage_one(&fit_views(&recs), &init, &cfg).unwrap();

    let cams: Vec<_> = recs.iter().map(|r| r.camera.clone()).collect();
    let targets: Vec<Rgb> = recs.iter().flat_map(|r| r.processed.pixels()).collect();
    let op = FootprintOperator::build(&init, &cams, &FAST, cfg.min_weight);
    let mut colors = init.colors().to_vec();
    let mut adam = Adam::new(AdamConfig::default());
    adam.add_block("colors", colors.len(), cfg.lr_color);
    let mut pred = vec![[0.0; 3]; targets.len()];
    let mut dpix = vec![[0.0; 3]; targets.len()];
    let mut grad = vec![0.0; colors.len()];
    for _ in 0..cfg.steps {
        op.forward(&colors, &mut pred);
        render_loss(&pred, &targets, Some(&mut dpix)).unwrap();
        op.backward(&dpix, &mut grad);
        adam.step(&mut [&mut colors], &[&grad]).unwrap();
    }
    assert_eq!(fitted.scene.colors(), colors.as_slice());
    assert!(fitted.grids.iter().all(|g| g.max_identity_deviation() == 0.0));
    op.forward(&colors, &mut pred);
    let plain = render_loss(&pred, &targets, None).unwrap();
    assert!((fitted.report.data_term - plain).abs() <= 1e-9 * plain);
    assert_eq!(fitted.report.total, fitted.report.data_term);
}

#[test]
fn identity_grid_reapply_is_plain_render() {
    let s = small_setup();
    let grid = BilateralGrid3D::new(8, 8, 4).unwrap();
    for cam in &s.train_cameras {
        assert_eq!(reapply_processing(&s.scene, &grid, cam, &FAST), s.scene.render_view(cam, &FAST));
    }
}

#[test]
fn grid_transfer_to_another_view_is_allowed() {
    let s = small_setup();
    let grid = BilateralGrid3D::filled(4, 4, 2, AffineTransform::diagonal([1.1, 1.0, 0.9], [0.0; 3])).unwrap();
    let img = reapply_processing(&s.scene, &grid, &s.test_cameras[0], &FAST);
    assert_eq!(img.width(), 12);
}

#[test]
fn no_grid_baseline_has_higher_data_loss() {
    let (s, recs) = small_dataset(&IspConfig::varied());
    let init = geometry_only(&s.scene, 0.5);
    let views = fit_views(&recs);
    let with = fit_stage_one(&views, &init, &stage_one_cfg(300)).unwrap();
    let without = fit_stage_one(
        &views,
        &init,
        &StageOneConfig {
            freeze_grids: true,
            ..stage_one_cfg(300)
        },
    )
    .unwrap();
    assert!(without.report.data_term > with.report.data_term, "{:?} vs {:?}", without.report, with.report);
}

#[test]
fn loss_history_covers_every_step() {
    let (s, recs) = small_dataset(&IspConfig::varied());
    let res = fit_stage_one(&fit_views(&recs), &geometry_only(&s.scene, 0.5), &stage_one_cfg(40)).unwrap();
    assert_eq!(res.history.len(), 41);
    assert_eq!(res.history.last().unwrap().total, res.report.total);
    assert!(res.history[40].total < res.history[0].total);
    let mut buf = Vec::new();
    write_history_csv(&mut buf, &res.history).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 42);
}

#[test]
fn stage_one_is_deterministic() {
    let (s, recs) = small_dataset(&IspConfig::varied());
    let init = geometry_only(&s.scene, 0.5);
    let cfg = StageOneConfig {
        batch_size: Some(100),
        ..stage_one_cfg(30)
    };
    let a = fit_stage_one(&fit_views(&recs), &init, &cfg).unwrap();
    let b = fit_stage_one(&fit_views(&recs), &init, &cfg).unwrap();
    assert_eq!(a.scene, b.scene);
    assert_eq!(a.grids, b.grids);
    assert_eq!(a.history, b.history);
}

#[test]
fn minibatches_reduce_the_loss() {
    let (s, recs) = small_dataset(&IspConfig::varied());
    let cfg = StageOneConfig {
        batch_size: Some(150),
        ..stage_one_cfg(200)
    };
    let res = fit_stage_one(&fit_views(&recs), &geometry_only(&s.scene, 0.5), &cfg).unwrap();
    assert!(res.report.data_term < 0.5 * res.history[0].data_term);
}

#[test]
fn huge_learning_rate_diverges() {
    let (s, recs) = small_dataset(&IspConfig::varied());
    let cfg = StageOneConfig {
        lr_color: 1e3,
        lr_grid: 1e3,
        ..stage_one_cfg(50)
    };
    let err = fit_stage_one(&fit_views(&recs), &geometry_only(&s.scene, 0.5), &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
}

#[test]
fn mismatched_image_is_rejected() {
    let (s, recs) = small_dataset(&IspConfig::default());
    let mut views = fit_views(&recs);
    views[1].image = bilagrid::Image::new(5, 5);
    assert!(matches!(fit_stage_one(&views, &s.scene, &stage_one_cfg(5)), Err(Error::ShapeMismatch(_))));
}

fn lift_cfg(steps: usize) -> LiftConfig {
    LiftConfig {
        dims: Grid4Dims::new(6, 6, 6, 4),
        rank: 3,
        steps,
        render: FAST,
        ..LiftConfig::default()
    }
}

#[test]
fn identity_4d_grid_renders_plain() {
    let s = small_setup();
    let grid = LowRank4DGrid::identity(Grid4Dims::new(4, 4, 4, 2), 2).unwrap();
    for cam in &s.test_cameras {
        assert_eq!(render_finished(&s.scene, &grid, &GuidanceFn::Luminance, cam, &FAST), s.scene.render_view(cam, &FAST));
    }
}

#[test]
fn constant_grid_on_opaque_surfaces_equals_2d_transform() {
    let s = small_setup();
    let t = AffineTransform::from_parts([[1.1, 0.05, 0.0], [0.0, 0.9, 0.1], [0.02, 0.0, 0.8]], [0.03, -0.02, 0.05]);
    let mut grid = LowRank4DGrid::identity(Grid4Dims::new(3, 3, 3, 2), 1).unwrap();
    grid.factor_mut(FAMILY_COEFF, 0).copy_from_slice(&t.0);
    for cam in &s.test_cameras {
        let finished = render_finished(&s.scene, &grid, &GuidanceFn::Luminance, cam, &FAST);
        let expected = affine_edit(&s.scene.render_view(cam, &FAST), &t);
        for (a, b) in finished.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn lifting_leaves_the_scene_untouched_and_is_deterministic() {
    let s = small_setup();
    let cam = &s.train_cameras[0];
    let edited = affine_edit(&s.scene.render_view(cam, &FAST), &AffineTransform::diagonal([1.2, 1.0, 0.8], [0.05; 3]));
    let before = s.scene.checksum();
    let a = lift_edit(&s.scene, &edited, cam, &lift_cfg(60)).unwrap();
    assert_eq!(s.scene.checksum(), before);
    let b = lift_edit(&s.scene, &edited, cam, &lift_cfg(60)).unwrap();
    assert_eq!(a.grid, b.grid);
    assert_eq!(a.history, b.history);
    assert!(a.report.data_term < 0.1 * a.history[0].data_term);
}

#[test]
fn lifting_rejects_resolution_mismatch() {
    let s = small_setup();
    let err = lift_edit(&s.scene, &bilagrid::Image::new(7, 12), &s.train_cameras[0], &lift_cfg(5)).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)));
}

#[test]
fn lifting_with_mlp_guidance_and_minibatches() {
    let s = small_setup();
    let cam = &s.train_cameras[1];
    let edited = affine_edit(&s.scene.render_view(cam, &FAST), &AffineTransform::diagonal([0.8, 1.0, 1.2], [0.0; 3]));
    let cfg = LiftConfig {
        mlp_guidance: true,
        batch_size: Some(64),
        ..lift_cfg(80)
    };
    let res = lift_edit(&s.scene, &edited, cam, &cfg).unwrap();
    assert!(res.mlp().is_some());
    assert!(res.report.data_term < 0.2 * res.history[0].data_term, "{:?}", res.report);
}

#[test]
fn lifting_divergence_is_reported() {
    let s = small_setup();
    let cam = &s.train_cameras[0];
    let edited = s.scene.render_view(cam, &FAST).map(|_, _, c| c.map(|v| 3.0 * v));
    let cfg = LiftConfig {
        lr_factors: 1e3,
        ..lift_cfg(40)
    };
    assert!(matches!(lift_edit(&s.scene, &edited, cam, &cfg), Err(Error::Divergence { .. })));
}

use std::path::Path;

use candle_core::Device;
use slotphys::experiments::{
    merge_tables, run_experiment, CellStatus, ExperimentBundle, ExperimentSpec, Preset, RowSpec,
};
use slotphys::rollout::Variant;
use slotphys::Error;

fn config(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    std::fs::read_to_string(p).unwrap()
}

fn smoke() -> ExperimentSpec {
    ExperimentSpec::from_toml(&config("smoke.toml")).unwrap()
}

fn labels(spec: &ExperimentSpec) -> Vec<String> {
    spec.resolve().unwrap().rows.into_iter().map(|r| r.label).collect()
}

#[test]
fn shipped_table_configs_match_the_builtin_rosters() {
    for (file, name) in [
        ("table1_baseline.toml", "baseline"),
        ("table2_inaccurate.toml", "inaccurate"),
        ("table3_data_efficiency.toml", "data_efficiency"),
        ("table4_joint_latent.toml", "joint_latent"),
    ] {
        let from_file = ExperimentSpec::from_toml(&config(file)).unwrap();
        let builtin = ExperimentSpec::builtin(name, Preset::Desk).unwrap();
        assert_eq!(labels(&from_file), labels(&builtin), "{file}");
        assert_eq!(from_file.upper_bound, builtin.upper_bound, "{file}");
        assert_eq!(from_file.seeds, vec![0, 1, 2]);
        let a = from_file.resolve().unwrap();
        let b = builtin.resolve().unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.rollout, y.rollout, "{file} {}", x.label);
            assert_eq!(x.train_size, y.train_size);
        }
    }
    assert_eq!(
        labels(&ExperimentSpec::baseline(Preset::Desk)),
        ["Ours", "Ours-Pure", "SlotFormer"]
    );
    let eff = ExperimentSpec::data_efficiency(Preset::Desk).resolve().unwrap();
    assert_eq!(eff.rows[0].train_size, Some(300));
    assert_eq!(eff.rows[0].label, "Ours-300");
    assert_eq!(eff.rows[1].label, "SlotFormer-300");
    let inacc = ExperimentSpec::inaccurate(Preset::Desk).resolve().unwrap();
    assert_eq!(inacc.rows[0].rollout.engine.dt_factor, 2.0);
    assert_eq!(inacc.rows[1].rollout.engine.dt_factor, 1.0);
}

#[test]
fn presets_select_dataset_size() {
    let desk = ExperimentSpec::baseline(Preset::Desk).resolve().unwrap();
    let paper = ExperimentSpec::baseline(Preset::Paper).resolve().unwrap();
    assert_eq!(desk.generator.num_samples, 500);
    assert_eq!(paper.generator.num_samples, 10_000);
    assert_eq!(desk.train.batch_size, 64);
    assert_eq!(paper.encoder.slot_dim, 128);
    assert_eq!(paper.rows[0].rollout.slot_dim, 128);
}

fn param_key(err: Error) -> String {
    match err {
        Error::InvalidParam { key, .. } => key,
        other => panic!("expected a parameter error, got {other}"),
    }
}

#[test]
fn validation_errors_name_the_key() {
    let mut spec = smoke();
    spec.rows.push(RowSpec {
        variant: "ours_turbo".into(),
        label: None,
        train_size: None,
        dt_factor: None,
    });
    assert_eq!(param_key(spec.resolve().unwrap_err()), "variant");

    let mut spec = smoke();
    spec.seeds.clear();
    assert_eq!(param_key(spec.resolve().unwrap_err()), "seeds");

    let spec = ExperimentSpec::from_toml(&format!("{}\n", config("smoke.toml").replace("k_max = 3", "k_max = 3\nk_maxx = 2")))
        .unwrap();
    assert_eq!(param_key(spec.resolve().unwrap_err()), "data");

    let mut spec = smoke();
    spec.rows[0].dt_factor = Some(2.0);
    assert_eq!(param_key(spec.resolve().unwrap_err()), "rollout.engine.dt_factor");

    let mut spec = smoke();
    spec.rows.push(RowSpec::new(Variant::Ours));
    assert_eq!(param_key(spec.resolve().unwrap_err()), "rows");

    assert!(ExperimentSpec::from_toml("seeds = [0]\nbogus = 1").is_err());
}

fn metrics_json(b: &ExperimentBundle) -> String {
    serde_json::to_string(&b.report.rows).unwrap()
}

#[test]
fn smoke_run_caches_records_provenance_and_is_deterministic() {
    let cache = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let mut spec = smoke();
    // A row that cannot be trained leaves a gap without sinking the table.
    spec.rows.push(RowSpec {
        label: Some("Ours-1000".into()),
        ..RowSpec::new(Variant::Ours).with_train_size(1000)
    });
    let first = run_experiment(&spec, cache.path(), out.path(), &Device::Cpu).unwrap();
    assert_eq!(first.count(CellStatus::Trained), 8);
    assert_eq!(first.count(CellStatus::Failed), 2);
    assert!(first.cells.iter().filter(|c| c.status == CellStatus::Failed).all(|c| c.label == "Ours-1000"));
    assert_eq!(
        first.row_order,
        ["Ours", "Ours-Pure", "SlotFormer", "SlotFormer-6", "Ours-1000", "SAVi"]
    );

    // Provenance: every seed of every reported row points at a checkpoint.
    for row in &first.report.rows {
        assert_eq!(row.provenance.len(), row.seeds.len());
        for p in &row.provenance {
            assert!(Path::new(&p.checkpoint).exists(), "{}", p.checkpoint);
            assert_eq!(p.config_hash.len(), 64);
        }
        assert_eq!(row.per_frame_miou.len(), 4);
        // Overall mIoU equals the mean of the per-frame curve.
        let curve_mean = row.per_frame_miou.iter().sum::<f64>() / 4.0;
        assert!((row.miou.mean - curve_mean).abs() < 1e-12, "{}", row.name);
    }
    let ours = first.report.row("Ours").unwrap();
    assert_eq!(ours.miou.per_seed.len(), 2);
    assert!(first.report.row("Ours-Pure").unwrap().state_mae.is_some());
    assert!(first.report.row("SlotFormer").unwrap().state_mae.is_none());

    let md = std::fs::read_to_string(out.path().join("table.md")).unwrap();
    assert!(md.contains("| Ours-1000 | gap | gap | gap | gap |"), "{md}");
    assert!(md.contains("| SAVi |"));
    let csv = std::fs::read_to_string(out.path().join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    let curves = std::fs::read_to_string(out.path().join("figures/per_frame_miou.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 4 * 5);
    assert!(out.path().join("figures/examples.png").exists());
    assert_eq!(ExperimentBundle::read(out.path()).unwrap(), first);

    // Same config, same cache: nothing is retrained.
    let out2 = tempfile::tempdir().unwrap();
    let second = run_experiment(&spec, cache.path(), out2.path(), &Device::Cpu).unwrap();
    assert_eq!(second.count(CellStatus::Trained), 0);
    assert_eq!(second.count(CellStatus::Failed), 2, "failed cells are retried");
    assert_eq!(second.count(CellStatus::Cached), 8);
    assert_eq!(metrics_json(&first), metrics_json(&second));

    // Fresh cache: identical metrics from scratch.
    let cache3 = tempfile::tempdir().unwrap();
    let third = run_experiment(&spec, cache3.path(), out2.path(), &Device::Cpu).unwrap();
    assert_eq!(third.count(CellStatus::Cached), 0);
    let strip = |s: String| s.replace(cache3.path().to_str().unwrap(), "").replace(cache.path().to_str().unwrap(), "");
    assert_eq!(strip(metrics_json(&first)), strip(metrics_json(&third)));

    // Joined comparison over the union of rows.
    let mut other = first.clone();
    other.name = "other".into();
    other.row_order.push("Extra".into());
    let merged = merge_tables(&first, &other);
    assert!(merged.contains("### smoke vs other"));
    assert!(merged.lines().any(|l| l.starts_with("| Extra | gap | gap")));
    assert_eq!(merged.lines().filter(|l| l.starts_with("| ")).count(), 1 + 7);
}

#[test]
fn concurrent_runners_share_cells() {
    let cache = tempfile::tempdir().unwrap();
    let mut spec = smoke();
    spec.rows.truncate(1);
    spec.seeds = vec![0];
    spec.upper_bound = false;
    let outs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let bundles: Vec<ExperimentBundle> = std::thread::scope(|s| {
        let handles: Vec<_> = outs
            .iter()
            .map(|o| {
                let spec = spec.clone();
                let cache = cache.path();
                s.spawn(move || run_experiment(&spec, cache, o.path(), &Device::Cpu).unwrap())
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let trained: usize = bundles.iter().map(|b| b.count(CellStatus::Trained)).sum();
    let cached: usize = bundles.iter().map(|b| b.count(CellStatus::Cached)).sum();
    assert_eq!((trained, cached), (1, 1));
    assert_eq!(metrics_json(&bundles[0]), metrics_json(&bundles[1]));
}

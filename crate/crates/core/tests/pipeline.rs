use dctev::checkpoint::Checkpoint;
use dctev::config::RunConfig;
use dctev::dataio::{group_records, parse_meter_csv, write_meter_csv};
use dctev::model::{ModelKind, Network};
use dctev::pipeline::{evaluate_model, fit_model, split_data};
use dctev::synthgen::generate;

fn small(model: ModelKind) -> RunConfig {
    RunConfig {
        n_homes: 2,
        days: 3,
        history_len: 60,
        patch_len: 20,
        patch_stride: 10,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        n_layers: 1,
        horizon: 4,
        mlp_hidden: 16,
        epochs: 2,
        model,
        ..RunConfig::default()
    }
}

#[test]
fn csv_round_trip_preserves_the_split() {
    let c = small(ModelKind::Dctev);
    let records = generate(&c.synth()).unwrap();
    let mut text = Vec::new();
    write_meter_csv(&records, &c.header_lines(), &mut text).unwrap();
    assert_eq!(RunConfig::from_header(std::str::from_utf8(&text).unwrap()).unwrap(), c);
    let reread = parse_meter_csv(text.as_slice()).unwrap();
    let direct = group_records(records).unwrap();
    let a = split_data(&direct, &c).unwrap();
    let b = split_data(&reread, &c).unwrap();
    assert_eq!(a.cuts, b.cuts);
    assert_eq!(a.series.iter().map(|s| &s.labels).collect::<Vec<_>>(), b.series.iter().map(|s| &s.labels).collect::<Vec<_>>());
}

#[test]
fn both_models_train_evaluate_and_checkpoint() {
    for kind in [ModelKind::Dctev, ModelKind::Mlp] {
        let c = small(kind);
        let homes = group_records(generate(&c.synth()).unwrap()).unwrap();
        let data = split_data(&homes, &c).unwrap();
        let (model, history) = fit_model(&c, &data).unwrap();
        assert_eq!(model.kind(), kind);
        assert_eq!(history.train_loss.len(), 2);
        assert!(history.train_loss.iter().all(|l| l.is_finite()));
        assert!(history.train_loss[1] < history.initial_loss.unwrap());

        let (report, preds) = evaluate_model(&model, &c, &data).unwrap();
        assert_eq!(preds.len() as u64, report.n);
        assert_eq!(report.per_horizon.len(), c.horizon);
        assert!((0.0..=1.0).contains(&report.acc));

        let ckpt = Checkpoint {
            config: c.clone(),
            model: model.clone(),
            scaler: data.scaler.clone(),
        };
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();
        let back = Checkpoint::parse(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let (again, _) = evaluate_model(&back.model, &c, &data).unwrap();
        assert_eq!(again, report);
        assert_eq!(back.model.history_len(), 60);
    }
}

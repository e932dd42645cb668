use std::time::Duration;

use reqwest::StatusCode;
use sarad_client::{Client, ClientError};
use sarad_core::api::*;
use sarad_core::harness::{read_metrics, RunConfig, Variant};
use sarad_core::safety::{FallbackTier, GateThresholds, PredictorKind, RiskVariant};
use sarad_core::sim::{reset, Action, SimConfig};

async fn spawn(root: &std::path::Path) -> Client {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let root = root.to_path_buf();
    tokio::spawn(async move { sarad_server::serve(listener, root).await.unwrap() });
    Client::new(format!("http://{addr}/"))
}

fn api_status(e: ClientError) -> StatusCode {
    match e {
        ClientError::Api { status, .. } => status,
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let client = spawn(dir.path()).await;
    assert_eq!(client.health().await.unwrap().status, "ok");
    assert_eq!(api_status(client.run_status(99).await.unwrap_err()), StatusCode::NOT_FOUND);
    assert_eq!(api_status(client.cancel_run(99).await.unwrap_err()), StatusCode::NOT_FOUND);

    let mut bad = RunConfig::new(Variant::VanillaDqn, 100, 0);
    bad.agent.decay_fraction = 0.0;
    let err = client.start_training(&TrainRequest { config: bad, out_dir: "runs".into() }).await.unwrap_err();
    assert_eq!(api_status(err), StatusCode::BAD_REQUEST);

    let none = CompareRequest { logs: vec![], log_dir: None, window: 10 };
    assert_eq!(api_status(client.compare(&none).await.unwrap_err()), StatusCode::BAD_REQUEST);
    let missing = TrainRiskRequest { dataset: "nope.jsonl".into(), variant: RiskVariant::Lr, seed: 0, out: "m.json".into() };
    assert_eq!(api_status(client.train_risk_model(&missing).await.unwrap_err()), StatusCode::NOT_FOUND);
    let collect = CollectRequest { sim: SimConfig::default(), episodes: 0, per_class: 10, seed: 0, out: "d.jsonl".into() };
    assert_eq!(api_status(client.collect_risk_data(&collect).await.unwrap_err()), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn risk_pipeline_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let client = spawn(dir.path()).await;
    let collected = client
        .collect_risk_data(&CollectRequest {
            sim: SimConfig::default(),
            episodes: 200,
            per_class: 300,
            seed: 4,
            out: "risk/data.jsonl".into(),
        })
        .await
        .unwrap();
    assert_eq!(collected.dataset, dir.path().join("risk/data.jsonl"));
    assert_eq!((collected.negatives, collected.positives), (300, 300));
    assert!(collected.collision_episodes > 0 && collected.episodes == 200);

    let trained = client
        .train_risk_model(&TrainRiskRequest {
            dataset: "risk/data.jsonl".into(),
            variant: RiskVariant::Lr,
            seed: 4,
            out: "risk/model.json".into(),
        })
        .await
        .unwrap();
    assert!(trained.model.exists());
    assert!(trained.report.held_out_auc > 0.6);

    let (_, obs) = reset(&SimConfig::default(), 3).unwrap();
    let lenient = GateThresholds { emergency: 0.999_999, caution: 0.999_998 };
    let req = GateRequest {
        model: "risk/model.json".into(),
        observation: obs.values().to_vec(),
        action: Action::Idle,
        thresholds: lenient,
        predictor: PredictorKind::Local,
        sim: SimConfig::default(),
    };
    let gated = client.gate(&req).await.unwrap();
    assert!((0.0..=1.0).contains(&gated.risk));
    if gated.risk < lenient.caution {
        assert_eq!((gated.action, gated.tier), (Action::Idle, FallbackTier::None));
    }
    let strict = GateRequest { thresholds: GateThresholds { emergency: 1e-9, caution: 1e-9 }, ..req.clone() };
    let braked = client.gate(&strict).await.unwrap();
    assert_eq!((braked.action, braked.tier), (Action::Slower, FallbackTier::Emergency));
    let short = GateRequest { observation: vec![0.0; 3], ..req };
    assert_eq!(api_status(client.gate(&short).await.unwrap_err()), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn training_jobs_plots_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let client = spawn(dir.path()).await;
    let mut cfg = RunConfig::new(Variant::VanillaDqn, 1500, 2);
    cfg.agent.warmup = 200;
    let job = client.start_training(&TrainRequest { config: cfg, out_dir: "runs".into() }).await.unwrap();
    let mut polls = 0;
    let done = client.wait_for_run(job.id, Duration::from_millis(50), |_| polls += 1).await.unwrap();
    assert_eq!(done.state, JobState::Succeeded, "{:?}", done.error);
    let out = done.output.unwrap();
    assert_eq!(out.log_path, dir.path().join("runs/vanilla_dqn_seed2.csv"));
    assert_eq!(read_metrics(&out.log_path).unwrap().len() as u64, out.summary.episodes);
    assert_eq!(done.progress.unwrap().global_step, 1500);
    assert!(polls >= 1);
    assert_eq!(client.runs().await.unwrap().len(), 1);

    let plots = client
        .plot(&PlotRequest { logs: vec![], log_dir: Some("runs".into()), out_dir: "runs/plots".into(), window: 50 })
        .await
        .unwrap();
    assert_eq!(plots.files.len(), 3);
    assert!(plots.files.iter().all(|f| f.exists()));
    let cmp = client
        .compare(&CompareRequest { logs: vec!["runs/vanilla_dqn_seed2.csv".into()], log_dir: None, window: 500 })
        .await
        .unwrap();
    assert_eq!(cmp.rows.len(), 1);
    assert!(cmp.table.contains("vanilla_dqn"));
}

#[tokio::test(flavor = "multi_thread")]
async fn cancel_stops_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let client = spawn(dir.path()).await;
    let job = client
        .start_training(&TrainRequest { config: RunConfig::new(Variant::VanillaDqn, 1_000_000, 0), out_dir: "runs".into() })
        .await
        .unwrap();
    client.cancel_run(job.id).await.unwrap();
    let done = client.wait_for_run(job.id, Duration::from_millis(50), |_| {}).await.unwrap();
    assert_eq!(done.state, JobState::Cancelled);
    let log = std::fs::read_to_string(dir.path().join("runs/vanilla_dqn_seed0.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("# aborted: run cancelled"));
}

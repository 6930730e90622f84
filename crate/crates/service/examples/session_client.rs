//! Headless session client. Starts the service in-process on a free port
//! (or connects to `ws://...` given as the first argument), replays a few
//! generated trials over the session channel and prints each prediction.
//!
//! cargo run --example session_client -- [ws://127.0.0.1:8080/session]

use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use magnet::datagen::{build_dataset, DatasetConfig};
use magnet::experts::ExpertRegistry;
use magnet::model::{MagnetModel, ModelConfig};
use magnet_service::server::{router, AppState};
use magnet_service::session::{ClientMessage, MotionFrame, ServerMessage};
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn send(ws: &mut Ws, m: ClientMessage) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    ws.send(Message::text(serde_json::to_string(&m).expect("client messages serialize"))).await
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let url = match std::env::args().nth(1) {
        Some(url) => url,
        None => {
            let reg = ExpertRegistry::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/experts_2d.json"))?;
            let model = MagnetModel::new(ModelConfig::for_dim(2), reg, 0)?;
            let state = Arc::new(AppState::new(model, None)?);
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
            let addr = listener.local_addr()?;
            tokio::spawn(async move { axum::serve(listener, router(state)).await });
            format!("ws://{addr}/session")
        }
    };
    let (mut ws, _) = tokio_tungstenite::connect_async(url.as_str()).await?;
    let mut cfg = DatasetConfig::mts2d(10.0)?;
    cfg.users = 1;
    cfg.females = 1;
    cfg.reps = 1;
    let ds = build_dataset(&cfg, 5)?;

    let first = &ds.trials[0];
    send(&mut ws, ClientMessage::SessionStart {
        profile: first.user.profile.clone(),
        scenario: first.scenario_id.clone(),
        rate_hz: Some(10.0),
        user_id: Some(first.user.id),
    })
    .await?;
    for trial in ds.trials.iter().filter(|t| t.scenario_id == first.scenario_id).take(5) {
        let env = trial.env.as_ref().expect("generated trials carry motion");
        // half a window of motion on the first trial shows the padding flag
        let take = if trial.trial_id == first.trial_id { env.len() / 2 } else { env.len() };
        let frames = env.acc.iter().zip(&env.vib).skip(env.len() - take).map(|(a, v)| MotionFrame { acc: *a, vib: Some(*v) }).collect();
        send(&mut ws, ClientMessage::Motion { frames }).await?;
        send(&mut ws, ClientMessage::TrialStart { targets: trial.targets.clone(), trial_id: Some(trial.trial_id) }).await?;
        send(&mut ws, ClientMessage::Touch { point: trial.endpoint.clone(), t: 0.0, targets: None }).await?;
    }
    send(&mut ws, ClientMessage::ExportLog).await?;

    while let Some(msg) = ws.next().await {
        let Message::Text(text) = msg? else { continue };
        match serde_json::from_str::<ServerMessage>(&text)? {
            ServerMessage::Ready { session_id, window, .. } => println!("session {session_id} ready, window {window} frames"),
            ServerMessage::Prediction { trial_id, ranked, motion_padded, per_target_logp, .. } => {
                let best = per_target_logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                println!("trial {trial_id}: top-3 {:?}, best log p {best:.2}, padded {motion_padded}", &ranked[..3.min(ranked.len())]);
            }
            ServerMessage::Log { records } => {
                println!("session log: {} records", records.len());
                break;
            }
            ServerMessage::Error { code, msg } => println!("error {code}: {msg}"),
        }
    }
    Ok(())
}

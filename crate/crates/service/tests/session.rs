mod common;

use std::sync::Arc;

use futures::{SinkExt, StreamExt};
use magnet::datagen::TrialRecord;
use magnet::encoders::{Gender, Gesture, UserProfile};
use magnet::eval::{error_at_k, Outcome};
use magnet_service::server::{router, AppState};
use magnet_service::session::{ClientMessage, MotionFrame, ServerMessage, Session};
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn start(state: Arc<AppState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("ws://{addr}/session")
}

async fn connect(url: &str) -> Ws {
    tokio_tungstenite::connect_async(url).await.unwrap().0
}

async fn send(ws: &mut Ws, msg: &ClientMessage) {
    ws.send(Message::text(serde_json::to_string(msg).unwrap())).await.unwrap();
}

async fn recv_text(ws: &mut Ws) -> String {
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return t.to_string(),
            Message::Close(_) => panic!("closed"),
            _ => continue,
        }
    }
}

async fn recv(ws: &mut Ws) -> ServerMessage {
    serde_json::from_str(&recv_text(ws).await).unwrap()
}

fn start_msg(trial: &TrialRecord) -> ClientMessage {
    ClientMessage::SessionStart {
        profile: trial.user.profile.clone(),
        scenario: trial.scenario_id.clone(),
        rate_hz: Some(trial.env.as_ref().unwrap().rate_hz),
        user_id: Some(trial.user.id),
    }
}

fn frames_of(trial: &TrialRecord) -> Vec<MotionFrame> {
    let env = trial.env.as_ref().unwrap();
    env.acc.iter().zip(&env.vib).map(|(a, v)| MotionFrame { acc: *a, vib: Some(*v) }).collect()
}

/// Replays one dataset trial: motion, trial start, touch at its endpoint.
async fn replay(ws: &mut Ws, trial: &TrialRecord) -> String {
    send(ws, &ClientMessage::Motion { frames: frames_of(trial) }).await;
    send(ws, &ClientMessage::TrialStart { targets: trial.targets.clone(), trial_id: Some(trial.trial_id) }).await;
    send(ws, &ClientMessage::Touch { point: trial.endpoint.clone(), t: 0.0, targets: None }).await;
    recv_text(ws).await
}

#[tokio::test]
async fn scripted_client_matches_in_process_predictions() {
    let state = common::state();
    let url = start(state.clone()).await;
    let ds = common::dataset(21);
    let mut ws = connect(&url).await;
    let mut current_user = None;
    for trial in ds.trials.iter().take(50) {
        if current_user != Some((trial.user.id, trial.scenario_id.clone())) {
            send(&mut ws, &start_msg(trial)).await;
            assert!(matches!(recv(&mut ws).await, ServerMessage::Ready { window: 30, .. }));
            current_user = Some((trial.user.id, trial.scenario_id.clone()));
        }
        let got = replay(&mut ws, trial).await;
        let want = ServerMessage::from_prediction(&state.model.predict(trial).unwrap(), false, 30);
        assert_eq!(got, serde_json::to_string(&want).unwrap(), "trial {}", trial.trial_id);
    }
}

#[tokio::test]
async fn exported_log_is_a_scoreable_dataset() {
    let state = common::state();
    let url = start(state.clone()).await;
    let ds = common::dataset(22);
    let mut ws = connect(&url).await;
    send(&mut ws, &start_msg(&ds.trials[0])).await;
    recv(&mut ws).await;
    let trials: Vec<&TrialRecord> = ds.trials.iter().filter(|t| t.user.id == ds.trials[0].user.id && t.scenario_id == ds.trials[0].scenario_id).take(8).collect();
    for t in &trials {
        replay(&mut ws, t).await;
    }
    send(&mut ws, &ClientMessage::ExportLog).await;
    let ServerMessage::Log { records } = recv(&mut ws).await else { panic!("expected log") };
    assert_eq!(records.len(), trials.len());
    let mut outcomes = Vec::new();
    for (rec, orig) in records.iter().zip(&trials) {
        rec.validate().unwrap();
        // through the dataset line format and back
        let line = serde_json::to_string(rec).unwrap();
        let back: TrialRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(&back, rec);
        assert_eq!(rec.env, orig.env);
        assert_eq!(rec.endpoint, orig.endpoint);
        let p = state.model.predict(&back).unwrap();
        outcomes.push(Outcome::from_prediction(&back, &p).unwrap());
    }
    let e1 = error_at_k(&outcomes, 1).unwrap().unwrap();
    assert!((0.0..=1.0).contains(&e1));
}

#[tokio::test]
async fn concurrent_sessions_do_not_share_state() {
    let state = common::state();
    let url = start(state.clone()).await;
    let ds = common::dataset(23);
    let trial = ds.trials[0].clone();
    let mut a = connect(&url).await;
    let mut b = connect(&url).await;
    let mut other = trial.clone();
    other.user.profile = UserProfile { gesture: Gesture::Controller, age: 58.0, gender: match trial.user.profile.gender {
        Gender::Female => Gender::Male,
        Gender::Male => Gender::Female,
    } };
    send(&mut a, &start_msg(&trial)).await;
    send(&mut b, &start_msg(&other)).await;
    let (ServerMessage::Ready { session_id: ia, .. }, ServerMessage::Ready { session_id: ib, .. }) = (recv(&mut a).await, recv(&mut b).await) else {
        panic!("expected ready")
    };
    assert_ne!(ia, ib);
    // interleave: b streams motion while a has its trial open
    send(&mut a, &ClientMessage::Motion { frames: frames_of(&trial) }).await;
    send(&mut a, &ClientMessage::TrialStart { targets: trial.targets.clone(), trial_id: Some(trial.trial_id) }).await;
    send(&mut b, &ClientMessage::Motion { frames: frames_of(&ds.trials[5]) }).await;
    send(&mut a, &ClientMessage::Touch { point: trial.endpoint.clone(), t: 0.0, targets: None }).await;
    let got_a = recv_text(&mut a).await;
    let got_b = replay(&mut b, &{
        let mut t = other.clone();
        t.env = ds.trials[5].env.clone();
        t
    }).await;
    let want_a = ServerMessage::from_prediction(&state.model.predict(&trial).unwrap(), false, 30);
    assert_eq!(got_a, serde_json::to_string(&want_a).unwrap());
    // b's buffer holds trial 5's window followed by its replayed copy, capped at 30 frames
    let mut tb = other.clone();
    tb.env = ds.trials[5].env.clone();
    let want_b = ServerMessage::from_prediction(&state.model.predict(&tb).unwrap(), false, 30);
    assert_eq!(got_b, serde_json::to_string(&want_b).unwrap());
    assert_ne!(got_a, got_b);
}

#[tokio::test]
async fn malformed_messages_get_errors_and_keep_the_session() {
    let state = common::state();
    let url = start(state).await;
    let ds = common::dataset(24);
    let mut ws = connect(&url).await;
    send(&mut ws, &ClientMessage::Motion { frames: vec![] }).await;
    assert!(matches!(recv(&mut ws).await, ServerMessage::Error { code, .. } if code == "no_session"));
    send(&mut ws, &start_msg(&ds.trials[0])).await;
    recv(&mut ws).await;
    ws.send(Message::text("{\"type\":\"warp\"}")).await.unwrap();
    assert!(matches!(recv(&mut ws).await, ServerMessage::Error { code, .. } if code == "malformed"));
    ws.send(Message::text("not json")).await.unwrap();
    assert!(matches!(recv(&mut ws).await, ServerMessage::Error { code, .. } if code == "malformed"));
    send(&mut ws, &ClientMessage::Touch { point: vec![1.0, 1.0], t: 0.0, targets: None }).await;
    assert!(matches!(recv(&mut ws).await, ServerMessage::Error { code, .. } if code == "no_trial"));
    // the session survived all of the above
    let got = replay(&mut ws, &ds.trials[0]).await;
    assert!(got.contains("\"type\":\"prediction\""));
}

#[test]
fn underfull_buffer_is_zero_padded_and_flagged() {
    let model = common::model();
    let ds = common::dataset(25);
    let trial = &ds.trials[0];
    let mut s = Session::new(1);
    s.handle(start_msg(trial), &model);
    let frames = frames_of(trial);
    s.handle(ClientMessage::Motion { frames: frames[20..].to_vec() }, &model);
    s.handle(ClientMessage::TrialStart { targets: trial.targets.clone(), trial_id: None }, &model);
    let reply = s.handle(ClientMessage::Touch { point: trial.endpoint.clone(), t: 0.0, targets: None }, &model);
    let Some(ServerMessage::Prediction { motion_padded, motion_frames, .. }) = reply else { panic!("{reply:?}") };
    assert!(motion_padded);
    assert_eq!(motion_frames, 10);
    let logged = &s.log()[0];
    let env = logged.env.as_ref().unwrap();
    assert_eq!(env.acc.len(), 30);
    assert!(env.acc[..20].iter().all(|a| *a == [0.0; 3]));
    assert_eq!(env.acc[20..], trial.env.as_ref().unwrap().acc[20..]);
}

#[test]
fn motion_buffer_keeps_the_latest_window() {
    let model = common::model();
    let ds = common::dataset(26);
    let mut s = Session::new(1);
    s.handle(start_msg(&ds.trials[0]), &model);
    let mut all = frames_of(&ds.trials[0]);
    all.extend(frames_of(&ds.trials[1]));
    for chunk in all.chunks(7) {
        s.handle(ClientMessage::Motion { frames: chunk.to_vec() }, &model);
        assert!(s.motion_len() <= 30);
    }
    assert_eq!(s.motion_len(), 30);
    // the buffered window is exactly trial 1's, so the prediction matches it
    let mut t = ds.trials[1].clone();
    t.user = ds.trials[0].user.clone();
    t.scenario_id = ds.trials[0].scenario_id.clone();
    s.handle(ClientMessage::TrialStart { targets: t.targets.clone(), trial_id: Some(t.trial_id) }, &model);
    let reply = s.handle(ClientMessage::Touch { point: t.endpoint.clone(), t: 0.0, targets: None }, &model).unwrap();
    assert_eq!(reply, ServerMessage::from_prediction(&model.predict(&t).unwrap(), false, 30));
}

#[test]
fn acceleration_only_frames_get_derived_vibration() {
    let model = common::model();
    let ds = common::dataset(27);
    let trial = &ds.trials[0];
    let mut s = Session::new(1);
    s.handle(start_msg(trial), &model);
    let frames: Vec<MotionFrame> = frames_of(trial).into_iter().map(|f| MotionFrame { acc: f.acc, vib: None }).collect();
    s.handle(ClientMessage::Motion { frames }, &model);
    s.handle(ClientMessage::TrialStart { targets: trial.targets.clone(), trial_id: None }, &model);
    let reply = s.handle(ClientMessage::Touch { point: trial.endpoint.clone(), t: 0.0, targets: None }, &model);
    assert!(matches!(reply, Some(ServerMessage::Prediction { motion_padded: false, .. })));
    let env = s.log()[0].env.clone().unwrap();
    let want = magnet::datagen::vibration_channels(&env.acc, env.rate_hz);
    assert_eq!(env.vib, want);
}

#[test]
fn touch_time_advances_targets_along_their_motion() {
    let model = common::model();
    let ds = common::dataset(28);
    let trial = &ds.trials[0];
    let mut s = Session::new(1);
    s.handle(start_msg(trial), &model);
    s.handle(ClientMessage::Motion { frames: frames_of(trial) }, &model);
    s.handle(ClientMessage::TrialStart { targets: trial.targets.clone(), trial_id: None }, &model);
    s.handle(ClientMessage::Touch { point: trial.endpoint.clone(), t: 0.5, targets: None }, &model);
    let moved = &s.log()[0].targets;
    for (m, o) in moved.iter().zip(&trial.targets) {
        for d in 0..2 {
            let want = o.state.center[d] + 0.5 * o.state.speed * o.state.dir[d];
            assert!((m.state.center[d] - want).abs() < 1e-9);
        }
    }
}

#[test]
fn invalid_targets_and_rates_are_rejected() {
    let model = common::model();
    let ds = common::dataset(29);
    let mut s = Session::new(1);
    let mut bad = start_msg(&ds.trials[0]);
    if let ClientMessage::SessionStart { rate_hz, .. } = &mut bad {
        *rate_hz = Some(0.0);
    }
    assert!(matches!(s.handle(bad, &model), Some(ServerMessage::Error { .. })));
    s.handle(start_msg(&ds.trials[0]), &model);
    let mut targets = ds.trials[0].targets.clone();
    targets[0].state.center = vec![1.0, 2.0, 3.0];
    assert!(matches!(s.handle(ClientMessage::TrialStart { targets, trial_id: None }, &model), Some(ServerMessage::Error { .. })));
    assert!(matches!(s.handle(ClientMessage::TrialStart { targets: vec![], trial_id: None }, &model), Some(ServerMessage::Error { .. })));
}

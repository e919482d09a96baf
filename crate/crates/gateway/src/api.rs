use std::sync::atomic::Ordering;

use atms_core::fare::{ReservationState, SeatReservation, TapEvent, TapOutcome};
use atms_core::sim::decode_fix;
use atms_core::{now_ms, GeoPoint, TopicFilter};
use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast::error::RecvError;
use tracing::debug;

use crate::error::{tap_rejection, ApiError, Body};
use crate::state::{Metrics, Shared, TrainSnapshot, UserProfile};
use crate::users::UserStoreError;

/// WebSocket close code for a rejected subscription filter.
const POLICY_VIOLATION: u16 = 1008;

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/users", post(register))
        .route("/users/{id}", get(get_user))
        .route("/users/{id}/epass", post(link_epass))
        .route("/trains", get(list_trains))
        .route("/trains/{id}/position", get(train_position))
        .route("/alarms", post(arm_alarm).get(list_alarms))
        .route("/alarms/{id}", delete(cancel_alarm))
        .route("/accounts/{id}", get(get_account))
        .route("/accounts/{id}/topup", post(top_up))
        .route("/taps", post(tap))
        .route("/reservations", post(reserve).get(list_reservations))
        .route("/reservations/{id}", delete(release))
        .route("/occupancy/{vehicle}", get(occupancy))
        .route("/metrics", get(metrics))
        .route("/ingest/fix", post(ingest_fix))
        .route("/ws", get(ws))
        .with_state(state)
}

fn caller(state: &Shared, headers: &HeaderMap) -> ApiResult<UserProfile> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(ApiError::unauthorized)?;
    state
        .user_for_token(token.trim())
        .ok_or_else(ApiError::unauthorized)
}

fn linked_account(user: &UserProfile) -> ApiResult<String> {
    user.account_id
        .clone()
        .ok_or_else(|| ApiError::forbidden("e-ticketing requires a linked account"))
}

// Users

#[derive(Deserialize)]
struct RegisterBody {
    display_name: String,
    user_id: Option<String>,
}

#[derive(Serialize)]
struct Registered {
    #[serde(flatten)]
    profile: UserProfile,
    token: String,
}

async fn register(
    State(state): State<Shared>,
    Body(body): Body<RegisterBody>,
) -> ApiResult<Response> {
    if body.display_name.trim().is_empty() {
        return Err(ApiError::bad_request("display_name must not be empty"));
    }
    if body
        .user_id
        .as_deref()
        .is_some_and(|id| id.trim().is_empty())
    {
        return Err(ApiError::bad_request("user_id must not be empty"));
    }
    let result = state.users.write().unwrap().register(
        body.user_id.as_deref(),
        body.display_name.trim(),
        now_ms(),
    );
    let (profile, token) = result.map_err(user_store_error)?;
    Ok((StatusCode::CREATED, Json(Registered { profile, token })).into_response())
}

async fn get_user(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<UserProfile>> {
    let user = caller(&state, &headers)?;
    if user.user_id != id {
        return Err(ApiError::forbidden("token belongs to another user"));
    }
    Ok(Json(user))
}

fn user_store_error(e: UserStoreError) -> ApiError {
    match e {
        UserStoreError::Duplicate => ApiError::new(
            StatusCode::CONFLICT,
            "duplicate_user",
            "user_id already registered",
        ),
        UserStoreError::Unknown => ApiError::not_found("unknown user"),
        UserStoreError::AlreadyLinked => ApiError::new(
            StatusCode::CONFLICT,
            "already_linked",
            "user already has an e-ticketing account",
        ),
        UserStoreError::Io(m) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "user_store", m),
    }
}

async fn link_epass(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    if !state.is_registered(&id) {
        return Err(ApiError::not_found(format!("unknown user {id}")));
    }
    let user = caller(&state, &headers)?;
    if user.user_id != id {
        return Err(ApiError::forbidden("token belongs to another user"));
    }
    if user.account_id.is_some() {
        return Err(user_store_error(UserStoreError::AlreadyLinked));
    }
    let account = state.fare.open_account(None, now_ms())?;
    let profile = state
        .users
        .write()
        .unwrap()
        .link(&id, &account.account_id)
        .map_err(user_store_error)?;
    Ok((
        StatusCode::CREATED,
        Json(json!({"user": profile, "account": account})),
    )
        .into_response())
}

// Trains

fn train_json(state: &Shared, s: &TrainSnapshot, now: u64) -> Value {
    let occupancy: Vec<_> = state
        .occupancy
        .read()
        .unwrap()
        .get(&s.fix.vehicle_id)
        .map(|m| m.values().cloned().collect())
        .unwrap_or_default();
    json!({
        "vehicle_id": s.fix.vehicle_id,
        "region": s.address.region.as_str(),
        "travel_service": s.address.travel_service.as_str(),
        "line_id": s.address.line_id.as_str(),
        "lat_deg": s.fix.point.lat_deg(),
        "lon_deg": s.fix.point.lon_deg(),
        "seq": s.fix.seq,
        "ts_ms": s.fix.timestamp_ms,
        "received_ms": s.received_ms,
        "status": state.status_of(s, now),
        "occupancy": occupancy,
    })
}

async fn list_trains(State(state): State<Shared>) -> Json<Vec<Value>> {
    let now = now_ms();
    let snapshots: Vec<TrainSnapshot> = state.trains.read().unwrap().values().cloned().collect();
    Json(
        snapshots
            .iter()
            .map(|s| train_json(&state, s, now))
            .collect(),
    )
}

async fn train_position(
    State(state): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let snapshot = state.trains.read().unwrap().get(&id).cloned();
    let snapshot =
        snapshot.ok_or_else(|| ApiError::not_found(format!("no fixes seen for {id}")))?;
    Ok(Json(train_json(&state, &snapshot, now_ms())))
}

// Alarms

#[derive(Deserialize)]
struct ArmBody {
    vehicle: String,
    lat: f64,
    lon: f64,
    threshold_m: f64,
}

async fn arm_alarm(
    State(state): State<Shared>,
    headers: HeaderMap,
    Body(body): Body<ArmBody>,
) -> ApiResult<Response> {
    let user = caller(&state, &headers)?;
    let destination =
        GeoPoint::new(body.lat, body.lon).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if body.vehicle.is_empty() {
        return Err(ApiError::bad_request("vehicle must not be empty"));
    }
    let directory = |id: &str| state.is_registered(id);
    let alarm = state.alarms.lock().unwrap().arm(
        &directory,
        &user.user_id,
        &body.vehicle,
        destination,
        body.threshold_m,
    )?;
    Ok((StatusCode::CREATED, Json(alarm)).into_response())
}

async fn list_alarms(State(state): State<Shared>, headers: HeaderMap) -> ApiResult<Json<Value>> {
    let user = caller(&state, &headers)?;
    Ok(Json(json!(state
        .alarms
        .lock()
        .unwrap()
        .for_user(&user.user_id))))
}

async fn cancel_alarm(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let user = caller(&state, &headers)?;
    let mut alarms = state.alarms.lock().unwrap();
    let owner = alarms
        .get(&id)
        .map(|a| a.user_id.clone())
        .ok_or_else(|| ApiError::not_found(format!("unknown alarm {id}")))?;
    if owner != user.user_id {
        return Err(ApiError::forbidden("alarm belongs to another user"));
    }
    Ok(Json(json!(alarms.cancel(&id)?)))
}

// Ticketing

fn own_account(state: &Shared, headers: &HeaderMap, id: &str) -> ApiResult<()> {
    let user = caller(state, headers)?;
    if linked_account(&user)? != id {
        return Err(ApiError::forbidden("account belongs to another user"));
    }
    Ok(())
}

async fn get_account(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    own_account(&state, &headers, &id)?;
    let account = state
        .fare
        .account(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown account {id}")))?;
    Ok(Json(json!(account)))
}

#[derive(Deserialize)]
struct TopUpBody {
    amount_cents: i64,
}

async fn top_up(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Body(body): Body<TopUpBody>,
) -> ApiResult<Json<Value>> {
    own_account(&state, &headers, &id)?;
    let balance = state.fare.top_up(&id, body.amount_cents, now_ms())?;
    Ok(Json(json!({"account_id": id, "balance_cents": balance})))
}

async fn tap(State(state): State<Shared>, Body(event): Body<TapEvent>) -> ApiResult<Json<Value>> {
    let outcome = state.fare.tap(&event)?;
    if let TapOutcome::Rejected { reason } = outcome {
        return Err(tap_rejection(reason));
    }
    let balance = state
        .fare
        .account(&event.account_id)
        .map(|a| a.balance_cents);
    let mut body = json!(outcome);
    body["balance_cents"] = json!(balance);
    Ok(Json(body))
}

#[derive(Deserialize)]
struct ReserveBody {
    vehicle: String,
    departure_date: String,
    compartment: String,
    seat: u32,
}

async fn reserve(
    State(state): State<Shared>,
    headers: HeaderMap,
    Body(body): Body<ReserveBody>,
) -> ApiResult<Response> {
    let user = caller(&state, &headers)?;
    let account = linked_account(&user)?;
    let reservation = state.fare.reserve_seat(
        &account,
        &body.vehicle,
        &body.departure_date,
        &body.compartment,
        body.seat,
    )?;
    Ok((StatusCode::CREATED, Json(reservation)).into_response())
}

#[derive(Deserialize)]
struct ReservationQuery {
    vehicle: Option<String>,
    departure_date: Option<String>,
}

/// Live reservations for a seat grid; the holder is not exposed.
async fn list_reservations(
    State(state): State<Shared>,
    Query(q): Query<ReservationQuery>,
) -> Json<Vec<Value>> {
    let matches = |r: &SeatReservation| {
        r.state != ReservationState::Released
            && q.vehicle.as_ref().is_none_or(|v| *v == r.vehicle_id)
            && q.departure_date
                .as_ref()
                .is_none_or(|d| *d == r.departure_date)
    };
    Json(
        state
            .fare
            .reservations()
            .into_iter()
            .filter(matches)
            .map(|r| {
                json!({
                    "vehicle_id": r.vehicle_id,
                    "departure_date": r.departure_date,
                    "compartment_id": r.compartment_id,
                    "seat_number": r.seat_number,
                })
            })
            .collect(),
    )
}

async fn release(
    State(state): State<Shared>,
    headers: HeaderMap,
    Path(id): Path<String>,
) -> ApiResult<Json<SeatReservation>> {
    let user = caller(&state, &headers)?;
    let account = linked_account(&user)?;
    let held = state
        .fare
        .reservations()
        .into_iter()
        .find(|r| r.reservation_id == id)
        .ok_or_else(|| ApiError::not_found(format!("unknown reservation {id}")))?;
    if held.account_id != account {
        return Err(ApiError::forbidden(
            "reservation belongs to another account",
        ));
    }
    Ok(Json(state.fare.release_seat(&id, now_ms())?))
}

// Occupancy, metrics, ingest

async fn occupancy(
    State(state): State<Shared>,
    Path(vehicle): Path<String>,
) -> ApiResult<Json<Value>> {
    let compartments: Vec<_> = state
        .occupancy
        .read()
        .unwrap()
        .get(&vehicle)
        .map(|m| m.values().cloned().collect())
        .ok_or_else(|| ApiError::not_found(format!("no occupancy for {vehicle}")))?;
    let total: u64 = compartments.iter().map(|c| c.lambda_t).sum();
    Ok(Json(json!({
        "vehicle_id": vehicle,
        "lambda_t": total,
        "compartments": compartments,
    })))
}

async fn metrics(State(state): State<Shared>) -> Json<Value> {
    let mut body = state.metrics.snapshot();
    body["trains"] = json!(state.trains.read().unwrap().len());
    body["audit_conserved"] = json!(state.fare.audit().conserved());
    Json(body)
}

/// HTTP counterpart of a telemetry publish, used by the transport benchmark.
/// The fix is validated but does not touch train snapshots.
async fn ingest_fix(State(state): State<Shared>, body: Bytes) -> ApiResult<StatusCode> {
    decode_fix(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Metrics::inc(&state.metrics.http_ingested);
    Ok(StatusCode::OK)
}

// WebSocket

#[derive(Deserialize)]
struct WsQuery {
    filter: Option<String>,
}

async fn ws(
    State(state): State<Shared>,
    Query(q): Query<WsQuery>,
    upgrade: WebSocketUpgrade,
) -> Response {
    let raw = q.filter.unwrap_or_else(|| "pts/#".to_string());
    let filter = TopicFilter::parse(&raw).map_err(|e| format!("invalid filter {raw:?}: {e}"));
    // Subscribe before the handshake completes so nothing published after
    // the client sees the upgrade is missed.
    let events = state.events.subscribe();
    upgrade.on_upgrade(move |socket| async move {
        match filter {
            Ok(filter) => stream_events(state, socket, filter, events).await,
            Err(reason) => reject(socket, reason).await,
        }
    })
}

async fn reject(mut socket: WebSocket, reason: String) {
    let frame = CloseFrame {
        code: POLICY_VIOLATION,
        reason: reason.into(),
    };
    let _ = socket.send(WsMessage::Close(Some(frame))).await;
}

async fn stream_events(
    state: Shared,
    mut socket: WebSocket,
    filter: TopicFilter,
    mut events: tokio::sync::broadcast::Receiver<crate::state::BusEvent>,
) {
    state.metrics.ws_clients.fetch_add(1, Ordering::Relaxed);
    loop {
        tokio::select! {
            event = events.recv() => match event {
                Ok(event) if filter.matches(&event.topic) => {
                    let text = serde_json::to_string(&event).expect("serializable");
                    if socket.send(WsMessage::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                Ok(_) => {}
                Err(RecvError::Lagged(n)) => {
                    state.metrics.ws_lagged.fetch_add(n, Ordering::Relaxed);
                    debug!(skipped = n, "websocket client lagging");
                }
                Err(RecvError::Closed) => break,
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    state.metrics.ws_clients.fetch_sub(1, Ordering::Relaxed);
}

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::de::DeserializeOwned;
use serde_json::json;

use atms_core::alarm::AlarmError;
use atms_core::fare::{FareError, TapRejection};

/// An error response: `{"error": code, "message": text}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn unauthorized() -> Self {
        ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or unknown bearer token",
        )
    }

    pub fn forbidden(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::FORBIDDEN, "forbidden", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.code, "message": self.message})),
        )
            .into_response()
    }
}

impl From<FareError> for ApiError {
    fn from(e: FareError) -> Self {
        let message = e.to_string();
        match e {
            FareError::UnknownAccount(_)
            | FareError::UnknownReservation(_)
            | FareError::UnknownStation(_) => ApiError::not_found(message),
            FareError::UnknownSeat { .. } => {
                ApiError::new(StatusCode::NOT_FOUND, "unknown_seat", message)
            }
            FareError::DuplicateAccount(_) => {
                ApiError::new(StatusCode::CONFLICT, "duplicate_account", message)
            }
            FareError::AccountBlocked(_) => {
                ApiError::new(StatusCode::FORBIDDEN, "account_blocked", message)
            }
            FareError::SeatTaken => ApiError::new(StatusCode::CONFLICT, "seat_taken", message),
            FareError::NonPositiveAmount | FareError::InvalidDate(_) => {
                ApiError::bad_request(message)
            }
            FareError::NotConnected(..) => {
                ApiError::new(StatusCode::CONFLICT, "not_connected", message)
            }
            FareError::Corrupt { .. } | FareError::Io(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "ledger", message)
            }
        }
    }
}

impl From<AlarmError> for ApiError {
    fn from(e: AlarmError) -> Self {
        let message = e.to_string();
        match e {
            AlarmError::UnknownUser(_) => ApiError::unauthorized(),
            AlarmError::Threshold(_) | AlarmError::VehicleMismatch { .. } => {
                ApiError::bad_request(message)
            }
            AlarmError::UnknownAlarm(_) => ApiError::not_found(message),
            AlarmError::NotArmed(_) => ApiError::new(StatusCode::CONFLICT, "not_armed", message),
        }
    }
}

pub fn tap_rejection(reason: TapRejection) -> ApiError {
    let (status, code) = match reason {
        TapRejection::UnknownAccount => (StatusCode::NOT_FOUND, "unknown_account"),
        TapRejection::UnknownStation => (StatusCode::NOT_FOUND, "unknown_station"),
        TapRejection::AccountBlocked => (StatusCode::FORBIDDEN, "account_blocked"),
        TapRejection::InsufficientBalance => (StatusCode::PAYMENT_REQUIRED, "insufficient_balance"),
        TapRejection::NoOpenJourney => (StatusCode::CONFLICT, "no_open_journey"),
        TapRejection::JourneyAlreadyOpen => (StatusCode::CONFLICT, "journey_already_open"),
        TapRejection::OutOfOrder => (StatusCode::CONFLICT, "out_of_order"),
    };
    ApiError::new(status, code, format!("tap rejected: {code}"))
}

/// `Json` whose rejections are reported as 400 in the API error shape.
pub struct Body<T>(pub T);

impl<S, T> FromRequest<S> for Body<T>
where
    S: Send + Sync,
    T: DeserializeOwned,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|e: JsonRejection| ApiError::bad_request(e.body_text()))
    }
}

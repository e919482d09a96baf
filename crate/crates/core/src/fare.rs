//! Stored-value e-ticketing: accounts, gate taps with distance-based fares,
//! top-ups and seat reservations.
//!
//! Money is integer cents. Every balance change is an append-only
//! [`LedgerEntry`]; the full event log (entries plus journey and seat events)
//! can be persisted as JSON lines and replayed on startup.
//!
//! Locking: each account has its own mutex, seats share one. The ledger log
//! is appended while the owning resource's lock is held, so per-account and
//! per-seat order in the log matches the order the operations took effect.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::geo::{project_along_route, EarthModel, Route};

pub const DAY_MS: u64 = 24 * 60 * 60 * 1000;

#[derive(Debug, Error)]
pub enum FareError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("account {0} already exists")]
    DuplicateAccount(String),
    #[error("account {0} is blocked")]
    AccountBlocked(String),
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("stations {0} and {1} share no route")]
    NotConnected(String, String),
    #[error("unknown station {0}")]
    UnknownStation(String),
    #[error("seat already reserved")]
    SeatTaken,
    #[error("no seat {seat} in compartment {compartment}")]
    UnknownSeat { compartment: String, seat: u32 },
    #[error("invalid departure date {0}, expected YYYY-MM-DD")]
    InvalidDate(String),
    #[error("unknown reservation {0}")]
    UnknownReservation(String),
    #[error("ledger line {line}: {source}")]
    Corrupt {
        line: usize,
        source: serde_json::Error,
    },
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountStatus {
    Active,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub balance_cents: u64,
    pub status: AccountStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

/// A card tap at a gate. Serialized as the taps channel payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapEvent {
    #[serde(rename = "account")]
    pub account_id: String,
    #[serde(rename = "station")]
    pub station_id: String,
    pub direction: Direction,
    pub ts_ms: u64,
    #[serde(rename = "gate")]
    pub gate_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    TopUp,
    Fare,
    Refund,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Journey {
    pub from_station: String,
    /// `None` for journeys closed by expiry.
    pub to_station: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub entry_id: u64,
    pub account_id: String,
    pub kind: EntryKind,
    /// Positive for credits, negative for fares.
    pub amount_cents: i64,
    pub ts_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub journey: Option<Journey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReservationState {
    Held,
    Confirmed,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeatReservation {
    pub reservation_id: String,
    pub account_id: String,
    pub vehicle_id: String,
    pub departure_date: String,
    pub compartment_id: String,
    pub seat_number: u32,
    pub state: ReservationState,
}

/// One line of the persisted ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LedgerRecord {
    AccountOpened {
        account_id: String,
        ts_ms: u64,
    },
    AccountStatus {
        account_id: String,
        status: AccountStatus,
        ts_ms: u64,
    },
    Entry(LedgerEntry),
    JourneyOpened {
        account_id: String,
        station_id: String,
        gate_id: String,
        ts_ms: u64,
    },
    SeatReserved(SeatReservation),
    SeatReleased {
        reservation_id: String,
        ts_ms: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FareRule {
    pub base_cents: u64,
    pub rate_cents_per_km: u64,
}

impl Default for FareRule {
    fn default() -> Self {
        FareRule {
            base_cents: 100,
            rate_cents_per_km: 50,
        }
    }
}

impl FareRule {
    /// `base + ceil(km) * rate`. Distances within a micrometre of a whole
    /// kilometre are not rounded up past it.
    pub fn fare_for_distance(&self, distance_m: f64) -> u64 {
        let km = (distance_m / 1000.0 - 1e-9).ceil().max(0.0) as u64;
        self.base_cents + km * self.rate_cents_per_km
    }
}

/// The set of routes fares are computed over.
#[derive(Debug, Clone, Default)]
pub struct RouteNetwork {
    routes: Vec<Route>,
    earth: EarthModel,
}

impl RouteNetwork {
    pub fn new(routes: Vec<Route>, earth: EarthModel) -> Self {
        RouteNetwork { routes, earth }
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    pub fn has_station(&self, station_id: &str) -> bool {
        self.routes.iter().any(|r| r.station(station_id).is_some())
    }

    /// Shortest along-track distance over any route serving both stations.
    pub fn distance_m(&self, from: &str, to: &str) -> Result<f64, FareError> {
        self.routes
            .iter()
            .filter(|r| r.station(from).is_some() && r.station(to).is_some())
            .filter_map(|r| project_along_route(r, from, to, self.earth).ok())
            .min_by(f64::total_cmp)
            .ok_or_else(|| FareError::NotConnected(from.to_string(), to.to_string()))
    }

    /// Largest fare payable from `from` to any station sharing a route.
    pub fn max_fare_from(&self, from: &str, rule: &FareRule) -> u64 {
        self.routes
            .iter()
            .filter(|r| r.station(from).is_some())
            .flat_map(|r| r.stations().iter().map(|s| s.station_id.as_str()))
            .filter_map(|to| compute_fare(self, from, to, rule).ok())
            .max()
            .unwrap_or(rule.base_cents)
    }
}

pub fn compute_fare(
    network: &RouteNetwork,
    from: &str,
    to: &str,
    rule: &FareRule,
) -> Result<u64, FareError> {
    Ok(rule.fare_for_distance(network.distance_m(from, to)?))
}

/// Compartments and seat counts; seats are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeatLayout {
    pub compartments: BTreeMap<String, u32>,
}

impl Default for SeatLayout {
    fn default() -> Self {
        SeatLayout {
            compartments: (1..=4).map(|i| (format!("c{i}"), 60)).collect(),
        }
    }
}

impl SeatLayout {
    pub fn contains(&self, compartment: &str, seat: u32) -> bool {
        self.compartments
            .get(compartment)
            .is_some_and(|&n| (1..=n).contains(&seat))
    }
}

#[derive(Debug, Clone)]
pub struct FareConfig {
    pub rule: FareRule,
    pub journey_ttl_ms: u64,
    pub seats: SeatLayout,
}

impl Default for FareConfig {
    fn default() -> Self {
        FareConfig {
            rule: FareRule::default(),
            journey_ttl_ms: DAY_MS,
            seats: SeatLayout::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapRejection {
    UnknownAccount,
    AccountBlocked,
    InsufficientBalance,
    NoOpenJourney,
    JourneyAlreadyOpen,
    UnknownStation,
    /// Timestamp earlier than the gate's previous tap.
    OutOfOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum TapOutcome {
    EntryGranted,
    /// `charged_cents` is below `fare_cents` only when the balance could not
    /// cover the fare.
    ExitSettled {
        fare_cents: u64,
        charged_cents: u64,
    },
    Rejected {
        reason: TapRejection,
    },
}

#[derive(Debug, Clone)]
struct OpenJourney {
    station_id: String,
    ts_ms: u64,
}

#[derive(Debug)]
struct AccountState {
    account: Account,
    open: Option<OpenJourney>,
}

#[derive(Debug, Default)]
struct Log {
    records: Vec<LedgerRecord>,
    next_entry: u64,
    sink: Option<File>,
}

impl Log {
    fn append(&mut self, record: LedgerRecord) -> Result<(), FareError> {
        if let Some(sink) = self.sink.as_mut() {
            let mut line = serde_json::to_vec(&record).expect("serializable");
            line.push(b'\n');
            sink.write_all(&line)?;
        }
        self.records.push(record);
        Ok(())
    }

    fn entry(
        &mut self,
        account_id: &str,
        kind: EntryKind,
        amount_cents: i64,
        ts_ms: u64,
        journey: Option<Journey>,
    ) -> Result<(), FareError> {
        self.next_entry += 1;
        self.append(LedgerRecord::Entry(LedgerEntry {
            entry_id: self.next_entry,
            account_id: account_id.to_string(),
            kind,
            amount_cents,
            ts_ms,
            journey,
        }))
    }
}

#[derive(Debug, Default)]
struct Seats {
    by_seat: HashMap<(String, String, String, u32), String>,
    reservations: HashMap<String, SeatReservation>,
    next_id: u64,
}

/// Totals used to check money conservation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Audit {
    pub balances: u64,
    pub top_ups: u64,
    pub fares: u64,
    pub refunds: u64,
}

impl Audit {
    pub fn conserved(&self) -> bool {
        self.balances as i128 + self.fares as i128 - self.refunds as i128 == self.top_ups as i128
    }
}

#[derive(Debug)]
pub struct FareGate {
    config: FareConfig,
    network: RouteNetwork,
    accounts: RwLock<HashMap<String, Arc<Mutex<AccountState>>>>,
    gates: Mutex<HashMap<String, u64>>,
    seats: Mutex<Seats>,
    log: Mutex<Log>,
    next_account: Mutex<u64>,
}

impl FareGate {
    pub fn new(config: FareConfig, network: RouteNetwork) -> Self {
        FareGate {
            config,
            network,
            accounts: RwLock::new(HashMap::new()),
            gates: Mutex::new(HashMap::new()),
            seats: Mutex::new(Seats::default()),
            log: Mutex::new(Log::default()),
            next_account: Mutex::new(0),
        }
    }

    /// Replays `path` (if it exists) and appends all further records to it.
    pub fn open(config: FareConfig, network: RouteNetwork, path: &Path) -> Result<Self, FareError> {
        let gate = FareGate::new(config, network);
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: LedgerRecord =
                    serde_json::from_str(&line).map_err(|source| FareError::Corrupt {
                        line: i + 1,
                        source,
                    })?;
                gate.apply(record);
            }
        }
        let sink = OpenOptions::new().create(true).append(true).open(path)?;
        gate.log.lock().unwrap().sink = Some(sink);
        Ok(gate)
    }

    fn apply(&self, record: LedgerRecord) {
        match &record {
            LedgerRecord::AccountOpened { account_id, .. } => {
                self.insert_account(account_id);
                let mut n = self.next_account.lock().unwrap();
                if let Some(k) = account_id
                    .strip_prefix("a-")
                    .and_then(|s| s.parse::<u64>().ok())
                {
                    *n = (*n).max(k);
                }
            }
            LedgerRecord::AccountStatus {
                account_id, status, ..
            } => {
                if let Some(a) = self.account_state(account_id) {
                    a.lock().unwrap().account.status = *status;
                }
            }
            LedgerRecord::Entry(e) => {
                if let Some(a) = self.account_state(&e.account_id) {
                    let mut a = a.lock().unwrap();
                    a.account.balance_cents =
                        (a.account.balance_cents as i64 + e.amount_cents) as u64;
                    if e.kind == EntryKind::Fare && e.journey.is_some() {
                        a.open = None;
                    }
                }
                let mut log = self.log.lock().unwrap();
                log.next_entry = log.next_entry.max(e.entry_id);
            }
            LedgerRecord::JourneyOpened {
                account_id,
                station_id,
                ts_ms,
                ..
            } => {
                if let Some(a) = self.account_state(account_id) {
                    a.lock().unwrap().open = Some(OpenJourney {
                        station_id: station_id.clone(),
                        ts_ms: *ts_ms,
                    });
                }
            }
            LedgerRecord::SeatReserved(r) => {
                let mut seats = self.seats.lock().unwrap();
                seats.by_seat.insert(seat_key(r), r.reservation_id.clone());
                seats
                    .reservations
                    .insert(r.reservation_id.clone(), r.clone());
                if let Some(k) = r
                    .reservation_id
                    .strip_prefix("rsv-")
                    .and_then(|s| s.parse::<u64>().ok())
                {
                    seats.next_id = seats.next_id.max(k);
                }
            }
            LedgerRecord::SeatReleased { reservation_id, .. } => {
                let mut seats = self.seats.lock().unwrap();
                if let Some(r) = seats.reservations.get_mut(reservation_id) {
                    r.state = ReservationState::Released;
                    let key = seat_key(r);
                    seats.by_seat.remove(&key);
                }
            }
        }
        self.log.lock().unwrap().records.push(record);
    }

    fn insert_account(&self, account_id: &str) -> Arc<Mutex<AccountState>> {
        let state = Arc::new(Mutex::new(AccountState {
            account: Account {
                account_id: account_id.to_string(),
                balance_cents: 0,
                status: AccountStatus::Active,
            },
            open: None,
        }));
        self.accounts
            .write()
            .unwrap()
            .insert(account_id.to_string(), state.clone());
        state
    }

    fn account_state(&self, account_id: &str) -> Option<Arc<Mutex<AccountState>>> {
        self.accounts.read().unwrap().get(account_id).cloned()
    }

    pub fn config(&self) -> &FareConfig {
        &self.config
    }

    pub fn network(&self) -> &RouteNetwork {
        &self.network
    }

    /// Opens an account with a zero balance. Without an id, a fresh
    /// `a-NNNN` number is assigned.
    pub fn open_account(&self, account_id: Option<&str>, ts_ms: u64) -> Result<Account, FareError> {
        let id = match account_id {
            Some(id) => id.to_string(),
            None => {
                let mut n = self.next_account.lock().unwrap();
                loop {
                    *n += 1;
                    let candidate = format!("a-{:04}", *n);
                    if self.account_state(&candidate).is_none() {
                        break candidate;
                    }
                }
            }
        };
        // Hold the write lock across check and insert.
        let mut accounts = self.accounts.write().unwrap();
        if accounts.contains_key(&id) {
            return Err(FareError::DuplicateAccount(id));
        }
        let account = Account {
            account_id: id.clone(),
            balance_cents: 0,
            status: AccountStatus::Active,
        };
        accounts.insert(
            id.clone(),
            Arc::new(Mutex::new(AccountState {
                account: account.clone(),
                open: None,
            })),
        );
        self.log
            .lock()
            .unwrap()
            .append(LedgerRecord::AccountOpened {
                account_id: id,
                ts_ms,
            })?;
        Ok(account)
    }

    pub fn account(&self, account_id: &str) -> Option<Account> {
        self.account_state(account_id)
            .map(|a| a.lock().unwrap().account.clone())
    }

    pub fn set_status(
        &self,
        account_id: &str,
        status: AccountStatus,
        ts_ms: u64,
    ) -> Result<Account, FareError> {
        let state = self
            .account_state(account_id)
            .ok_or_else(|| FareError::UnknownAccount(account_id.to_string()))?;
        let mut a = state.lock().unwrap();
        a.account.status = status;
        self.log
            .lock()
            .unwrap()
            .append(LedgerRecord::AccountStatus {
                account_id: account_id.to_string(),
                status,
                ts_ms,
            })?;
        Ok(a.account.clone())
    }

    pub fn top_up(
        &self,
        account_id: &str,
        amount_cents: i64,
        ts_ms: u64,
    ) -> Result<u64, FareError> {
        if amount_cents <= 0 {
            return Err(FareError::NonPositiveAmount);
        }
        let state = self
            .account_state(account_id)
            .ok_or_else(|| FareError::UnknownAccount(account_id.to_string()))?;
        let mut a = state.lock().unwrap();
        if a.account.status == AccountStatus::Blocked {
            return Err(FareError::AccountBlocked(account_id.to_string()));
        }
        self.log
            .lock()
            .unwrap()
            .entry(account_id, EntryKind::TopUp, amount_cents, ts_ms, None)?;
        a.account.balance_cents += amount_cents as u64;
        Ok(a.account.balance_cents)
    }

    pub fn refund(
        &self,
        account_id: &str,
        amount_cents: i64,
        ts_ms: u64,
    ) -> Result<u64, FareError> {
        if amount_cents <= 0 {
            return Err(FareError::NonPositiveAmount);
        }
        let state = self
            .account_state(account_id)
            .ok_or_else(|| FareError::UnknownAccount(account_id.to_string()))?;
        let mut a = state.lock().unwrap();
        self.log
            .lock()
            .unwrap()
            .entry(account_id, EntryKind::Refund, amount_cents, ts_ms, None)?;
        a.account.balance_cents += amount_cents as u64;
        Ok(a.account.balance_cents)
    }

    /// Charges `fare` (or whatever the balance allows) and closes the journey.
    fn settle(
        &self,
        a: &mut AccountState,
        fare: u64,
        to_station: Option<String>,
        ts_ms: u64,
    ) -> Result<u64, FareError> {
        let from = a.open.take().expect("settle requires an open journey");
        let charged = fare.min(a.account.balance_cents);
        if charged < fare {
            warn!(
                account = a.account.account_id,
                fare, charged, "balance short of fare"
            );
        }
        self.log.lock().unwrap().entry(
            &a.account.account_id,
            EntryKind::Fare,
            -(charged as i64),
            ts_ms,
            Some(Journey {
                from_station: from.station_id,
                to_station,
            }),
        )?;
        a.account.balance_cents -= charged;
        Ok(charged)
    }

    fn expire_if_stale(&self, a: &mut AccountState, now_ms: u64) -> Result<(), FareError> {
        let Some(open) = &a.open else { return Ok(()) };
        if now_ms.saturating_sub(open.ts_ms) <= self.config.journey_ttl_ms {
            return Ok(());
        }
        let fare = self
            .network
            .max_fare_from(&open.station_id, &self.config.rule);
        self.settle(a, fare, None, now_ms)?;
        Ok(())
    }

    /// Charges the maximum fare for every journey open longer than the
    /// configured lifetime. Returns how many were closed.
    pub fn expire_journeys(&self, now_ms: u64) -> Result<usize, FareError> {
        let accounts: Vec<_> = self.accounts.read().unwrap().values().cloned().collect();
        let mut closed = 0;
        for state in accounts {
            let mut a = state.lock().unwrap();
            let was_open = a.open.is_some();
            self.expire_if_stale(&mut a, now_ms)?;
            if was_open && a.open.is_none() {
                closed += 1;
            }
        }
        Ok(closed)
    }

    pub fn tap(&self, event: &TapEvent) -> Result<TapOutcome, FareError> {
        let reject = |reason| Ok(TapOutcome::Rejected { reason });
        {
            let mut gates = self.gates.lock().unwrap();
            let last = gates.entry(event.gate_id.clone()).or_insert(0);
            if event.ts_ms < *last {
                return reject(TapRejection::OutOfOrder);
            }
            *last = event.ts_ms;
        }
        let Some(state) = self.account_state(&event.account_id) else {
            return reject(TapRejection::UnknownAccount);
        };
        let mut a = state.lock().unwrap();
        if a.account.status == AccountStatus::Blocked {
            return reject(TapRejection::AccountBlocked);
        }
        if !self.network.has_station(&event.station_id) {
            return reject(TapRejection::UnknownStation);
        }
        self.expire_if_stale(&mut a, event.ts_ms)?;

        match event.direction {
            Direction::In => {
                if a.open.is_some() {
                    return reject(TapRejection::JourneyAlreadyOpen);
                }
                if a.account.balance_cents < self.config.rule.base_cents {
                    return reject(TapRejection::InsufficientBalance);
                }
                self.log
                    .lock()
                    .unwrap()
                    .append(LedgerRecord::JourneyOpened {
                        account_id: event.account_id.clone(),
                        station_id: event.station_id.clone(),
                        gate_id: event.gate_id.clone(),
                        ts_ms: event.ts_ms,
                    })?;
                a.open = Some(OpenJourney {
                    station_id: event.station_id.clone(),
                    ts_ms: event.ts_ms,
                });
                Ok(TapOutcome::EntryGranted)
            }
            Direction::Out => {
                let Some(open) = &a.open else {
                    warn!(
                        account = event.account_id,
                        gate = event.gate_id,
                        "tap out without open journey"
                    );
                    return reject(TapRejection::NoOpenJourney);
                };
                let fare = compute_fare(
                    &self.network,
                    &open.station_id,
                    &event.station_id,
                    &self.config.rule,
                )
                .unwrap_or_else(|_| {
                    self.network
                        .max_fare_from(&open.station_id, &self.config.rule)
                });
                let charged =
                    self.settle(&mut a, fare, Some(event.station_id.clone()), event.ts_ms)?;
                Ok(TapOutcome::ExitSettled {
                    fare_cents: fare,
                    charged_cents: charged,
                })
            }
        }
    }

    pub fn reserve_seat(
        &self,
        account_id: &str,
        vehicle_id: &str,
        departure_date: &str,
        compartment_id: &str,
        seat_number: u32,
    ) -> Result<SeatReservation, FareError> {
        if !valid_date(departure_date) {
            return Err(FareError::InvalidDate(departure_date.to_string()));
        }
        if !self.config.seats.contains(compartment_id, seat_number) {
            return Err(FareError::UnknownSeat {
                compartment: compartment_id.to_string(),
                seat: seat_number,
            });
        }
        let account = self
            .account(account_id)
            .ok_or_else(|| FareError::UnknownAccount(account_id.to_string()))?;
        if account.status == AccountStatus::Blocked {
            return Err(FareError::AccountBlocked(account_id.to_string()));
        }
        let mut seats = self.seats.lock().unwrap();
        let key = (
            vehicle_id.to_string(),
            departure_date.to_string(),
            compartment_id.to_string(),
            seat_number,
        );
        if seats.by_seat.contains_key(&key) {
            return Err(FareError::SeatTaken);
        }
        seats.next_id += 1;
        let reservation = SeatReservation {
            reservation_id: format!("rsv-{:06}", seats.next_id),
            account_id: account_id.to_string(),
            vehicle_id: vehicle_id.to_string(),
            departure_date: departure_date.to_string(),
            compartment_id: compartment_id.to_string(),
            seat_number,
            state: ReservationState::Confirmed,
        };
        self.log
            .lock()
            .unwrap()
            .append(LedgerRecord::SeatReserved(reservation.clone()))?;
        seats
            .by_seat
            .insert(key, reservation.reservation_id.clone());
        seats
            .reservations
            .insert(reservation.reservation_id.clone(), reservation.clone());
        Ok(reservation)
    }

    pub fn release_seat(
        &self,
        reservation_id: &str,
        ts_ms: u64,
    ) -> Result<SeatReservation, FareError> {
        let mut seats = self.seats.lock().unwrap();
        let r = seats
            .reservations
            .get(reservation_id)
            .filter(|r| r.state != ReservationState::Released)
            .cloned()
            .ok_or_else(|| FareError::UnknownReservation(reservation_id.to_string()))?;
        self.log
            .lock()
            .unwrap()
            .append(LedgerRecord::SeatReleased {
                reservation_id: reservation_id.to_string(),
                ts_ms,
            })?;
        seats.by_seat.remove(&seat_key(&r));
        let stored = seats.reservations.get_mut(reservation_id).expect("present");
        stored.state = ReservationState::Released;
        Ok(stored.clone())
    }

    pub fn reservations(&self) -> Vec<SeatReservation> {
        let mut v: Vec<_> = self
            .seats
            .lock()
            .unwrap()
            .reservations
            .values()
            .cloned()
            .collect();
        v.sort_by(|a, b| a.reservation_id.cmp(&b.reservation_id));
        v
    }

    pub fn accounts(&self) -> Vec<Account> {
        let mut v: Vec<_> = self
            .accounts
            .read()
            .unwrap()
            .values()
            .map(|a| a.lock().unwrap().account.clone())
            .collect();
        v.sort_by(|a, b| a.account_id.cmp(&b.account_id));
        v
    }

    pub fn records(&self) -> Vec<LedgerRecord> {
        self.log.lock().unwrap().records.clone()
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        entries_of(&self.log.lock().unwrap().records)
    }

    /// Only meaningful at a quiescent point.
    pub fn audit(&self) -> Audit {
        let mut audit = Audit {
            balances: self.accounts().iter().map(|a| a.balance_cents).sum(),
            ..Default::default()
        };
        for e in self.entries() {
            let amount = e.amount_cents.unsigned_abs();
            match e.kind {
                EntryKind::TopUp => audit.top_ups += amount,
                EntryKind::Fare => audit.fares += amount,
                EntryKind::Refund => audit.refunds += amount,
            }
        }
        audit
    }
}

fn entries_of(records: &[LedgerRecord]) -> Vec<LedgerEntry> {
    records
        .iter()
        .filter_map(|r| match r {
            LedgerRecord::Entry(e) => Some(e.clone()),
            _ => None,
        })
        .collect()
}

/// Balances rebuilt purely from ledger entries.
pub fn replay_balances(records: &[LedgerRecord]) -> BTreeMap<String, i64> {
    let mut balances = BTreeMap::new();
    for r in records {
        match r {
            LedgerRecord::AccountOpened { account_id, .. } => {
                balances.entry(account_id.clone()).or_insert(0);
            }
            LedgerRecord::Entry(e) => {
                *balances.entry(e.account_id.clone()).or_insert(0) += e.amount_cents
            }
            _ => {}
        }
    }
    balances
}

fn seat_key(r: &SeatReservation) -> (String, String, String, u32) {
    (
        r.vehicle_id.clone(),
        r.departure_date.clone(),
        r.compartment_id.clone(),
        r.seat_number,
    )
}

fn valid_date(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() == 10
        && b.iter().enumerate().all(|(i, c)| match i {
            4 | 7 => *c == b'-',
            _ => c.is_ascii_digit(),
        })
}

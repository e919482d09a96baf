//! Money conservation and seat exclusivity under concurrent use.

use std::collections::HashMap;
use std::sync::{Arc, Barrier};
use std::thread;

use atms_core::fare::{
    replay_balances, Direction, EntryKind, FareConfig, FareError, FareGate, LedgerRecord,
    RouteNetwork, TapEvent, TapOutcome,
};
use atms_core::{EarthModel, GeoPoint, Route, Station};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn network() -> RouteNetwork {
    let polyline: Vec<GeoPoint> = (0..6)
        .map(|i| GeoPoint::new(7.0 + i as f64 * 0.03, 80.0 + i as f64 * 0.02).unwrap())
        .collect();
    let stations = (0..6)
        .map(|i| Station {
            station_id: format!("s{i}"),
            index: i,
        })
        .collect();
    RouteNetwork::new(
        vec![Route::new("r", polyline, stations).unwrap()],
        EarthModel::default(),
    )
}

#[test]
fn conservation_under_random_interleavings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ledger.jsonl");
    let gate = Arc::new(FareGate::open(FareConfig::default(), network(), &path).unwrap());
    for i in 0..100 {
        gate.open_account(Some(&format!("a-{i:04}")), 0).unwrap();
    }
    let threads = 8;
    let per_thread = 10_000 / threads;
    let handles: Vec<_> = (0..threads)
        .map(|t| {
            let gate = gate.clone();
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
                let mut outcomes = HashMap::new();
                for k in 0..per_thread {
                    let account = format!("a-{:04}", rng.random_range(0..100));
                    let ts_ms = (k as u64) * 10;
                    let label = match rng.random_range(0..10) {
                        0..=2 => {
                            let amount = rng.random_range(1..800);
                            gate.top_up(&account, amount, ts_ms)
                                .map(|_| "top_up")
                                .unwrap()
                        }
                        3 => gate
                            .refund(&account, rng.random_range(1..50), ts_ms)
                            .map(|_| "refund")
                            .unwrap(),
                        n => {
                            let tap = TapEvent {
                                account_id: account,
                                station_id: format!("s{}", rng.random_range(0..6)),
                                direction: if n % 2 == 0 {
                                    Direction::In
                                } else {
                                    Direction::Out
                                },
                                ts_ms,
                                // One gate per thread keeps gate clocks monotone.
                                gate_id: format!("g-{t}"),
                            };
                            match gate.tap(&tap).unwrap() {
                                TapOutcome::EntryGranted => "entry",
                                TapOutcome::ExitSettled { .. } => "exit",
                                TapOutcome::Rejected { .. } => "rejected",
                            }
                        }
                    };
                    *outcomes.entry(label).or_insert(0u32) += 1;
                }
                outcomes
            })
        })
        .collect();
    let mut totals: HashMap<&str, u32> = HashMap::new();
    for h in handles {
        for (k, v) in h.join().unwrap() {
            *totals.entry(k).or_default() += v;
        }
    }
    assert!(totals["exit"] > 500 && totals["entry"] > 500, "{totals:?}");

    let audit = gate.audit();
    assert!(audit.conserved(), "{audit:?}");

    // Replaying entries in log order never takes a balance below zero.
    let mut running: HashMap<String, i64> = HashMap::new();
    for record in gate.records() {
        if let LedgerRecord::Entry(e) = record {
            let b = running.entry(e.account_id.clone()).or_default();
            *b += e.amount_cents;
            assert!(*b >= 0, "entry {} overdraws {}", e.entry_id, e.account_id);
            assert_eq!(e.kind == EntryKind::Fare, e.amount_cents <= 0);
        }
    }
    let replayed = replay_balances(&gate.records());
    for account in gate.accounts() {
        assert_eq!(replayed[&account.account_id], account.balance_cents as i64);
    }

    // The persisted file rebuilds identical balances.
    let reopened = FareGate::open(FareConfig::default(), network(), &path).unwrap();
    assert_eq!(reopened.accounts(), gate.accounts());
    assert_eq!(reopened.audit(), audit);
}

#[test]
fn fifty_way_seat_race_has_one_winner() {
    for round in 0..20 {
        let gate = Arc::new(FareGate::new(FareConfig::default(), network()));
        for i in 0..50 {
            gate.open_account(Some(&format!("a-{i}")), 0).unwrap();
        }
        let barrier = Arc::new(Barrier::new(50));
        let handles: Vec<_> = (0..50)
            .map(|i| {
                let gate = gate.clone();
                let barrier = barrier.clone();
                thread::spawn(move || {
                    barrier.wait();
                    gate.reserve_seat(&format!("a-{i}"), "t1015", "2026-03-01", "c2", 17)
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let wins = results.iter().filter(|r| r.is_ok()).count();
        let taken = results
            .iter()
            .filter(|r| matches!(r, Err(FareError::SeatTaken)))
            .count();
        assert_eq!((wins, taken), (1, 49), "round {round}");
        assert_eq!(gate.reservations().len(), 1);
    }
}

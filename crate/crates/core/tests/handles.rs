use std::sync::Arc;
use std::time::Duration;

use proptest::prelude::*;

use pubsub_core::arena::ArenaError;
use pubsub_core::broker::{BrokerConfig, UpdateCounters};
use pubsub_core::client::ClientError;
use pubsub_core::domain::Domain;
use pubsub_core::handle::{HandleError, Role};
use pubsub_core::types::{EntryId, Qos};

fn domain() -> Arc<Domain> {
    Domain::new(BrokerConfig::default())
}

#[test]
fn fresh_loan_has_one_local_reference() {
    let d = domain();
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let h = publisher.loan(16).unwrap();
    assert_eq!(h.local_count(), 1);
    assert!(h.is_valid());
    assert_eq!(h.role(), Role::PublisherLoan);
    assert_eq!(h.entry_id(), None);
}

#[test]
fn cloning_a_loan_does_not_reach_the_broker() {
    let d = domain();
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let before = d.broker().counters();
    let h = publisher.loan(16).unwrap();
    let c = h.try_clone().unwrap();
    assert_eq!(c.local_count(), 2);
    assert_eq!(d.broker().counters(), before);
}

#[test]
fn loan_fails_once_held_entries_fill_the_arena() {
    let capacity = 256;
    let d = Domain::with_arena_capacity(BrokerConfig::default(), capacity);
    let p = d.spawn();
    let s = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    let mut held = Vec::new();
    let mut published = 0;
    let err = loop {
        match publisher.loan(32) {
            Ok(h) => {
                h.publish().unwrap();
                published += 1;
                held.extend(subscriber.receive().unwrap());
            }
            Err(e) => break e,
        }
        assert!(published <= 8, "arena never filled");
    };
    assert!(matches!(err, ClientError::Arena(ArenaError::ArenaExhausted { .. })));
    assert_eq!(published, capacity / 32);
    assert_eq!(held.len() as u64, capacity / 32);
    assert_eq!(p.arena().stats().free_bytes, 0);
}

#[test]
fn subscriber_clones_are_local() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    publisher.loan_with(b"x").unwrap().publish().unwrap();
    let mut got = subscriber.receive().unwrap();
    let h = got.pop().unwrap();
    let before = d.broker().counters();
    let c = h.try_clone().unwrap();
    assert_eq!(h.local_count(), 2);
    let more: Vec<_> = (0..9).map(|_| h.try_clone().unwrap()).collect();
    assert_eq!(h.local_count(), 11);
    assert_eq!(d.broker().counters(), before);
    drop(more);
    drop(c);
    assert_eq!(h.local_count(), 1);
    assert_eq!(d.broker().counters(), before);
}

#[test]
fn clone_and_access_after_publish_fail() {
    let d = domain();
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let h = publisher.loan_with(b"abc").unwrap();
    let early = h.try_clone().unwrap();
    let receipt = h.publish().unwrap();
    assert_eq!(receipt.entry_id, EntryId(1));
    assert!(matches!(h.try_clone(), Err(HandleError::InvalidHandle)));
    assert!(matches!(early.payload(), Err(HandleError::InvalidHandle)));
    assert!(matches!(h.payload(), Err(HandleError::InvalidHandle)));
    assert!(!early.is_valid());
    assert_eq!(h.publish(), Err(HandleError::InvalidHandle));
    assert_eq!(early.entry_id(), Some(EntryId(1)));
}

#[test]
fn last_drop_releases_exactly_once() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    publisher.loan_with(b"x").unwrap().publish().unwrap();
    let h = subscriber.receive().unwrap().pop().unwrap();
    let c = h.try_clone().unwrap();
    drop(h);
    let snap = d.broker().snapshot(Some("t")).unwrap();
    assert_eq!(snap.topics[0].entries[0].holders.len(), 1);
    assert_eq!(snap.totals.release_bit_clears, 0);
    drop(c);
    let snap = d.broker().snapshot(Some("t")).unwrap();
    assert!(snap.topics[0].entries[0].holders.is_empty());
    assert_eq!(snap.totals.release_bit_clears, 1);
}

#[test]
fn unpublished_loan_drop_frees_the_slot() {
    let d = domain();
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let free = p.arena().stats().free_bytes;
    let h = publisher.loan(100).unwrap();
    let c = h.try_clone().unwrap();
    assert!(p.arena().stats().free_bytes < free);
    drop(h);
    assert!(p.arena().stats().free_bytes < free);
    drop(c);
    assert_eq!(p.arena().stats().free_bytes, free);
    assert_eq!(p.arena().stats().live_slots, 0);
    assert!(d.broker().snapshot(Some("t")).unwrap().topics[0].entries.is_empty());
}

#[test]
fn publish_receipt_without_subscribers() {
    let d = domain();
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let r = publisher.loan(8).unwrap().publish().unwrap();
    assert_eq!((r.entry_id, r.notified_subscriber_count, r.evicted_count), (EntryId(1), 0, 0));
    let r = publisher.loan(8).unwrap().publish().unwrap();
    assert_eq!((r.entry_id, r.notified_subscriber_count, r.evicted_count), (EntryId(2), 0, 1));
}

#[test]
fn views_follow_roles() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    let mut h = publisher.loan(5).unwrap();
    h.payload_mut().unwrap().copy_from_slice(b"hello");
    let c = h.try_clone().unwrap();
    assert_eq!(h.payload_mut().err(), Some(HandleError::Shared(2)));
    drop(c);
    h.publish().unwrap();
    let mut got = subscriber.receive().unwrap().pop().unwrap();
    assert_eq!(got.role(), Role::SubscriberRef);
    assert_eq!(&*got.payload().unwrap(), b"hello");
    assert_eq!(got.payload_mut().err(), Some(HandleError::ReadOnly));
    assert_eq!(got.topic(), "t");
}

#[test]
fn force_reclaimed_slot_reads_as_poisoned() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    publisher.loan_with(b"data").unwrap().publish().unwrap();
    let h = subscriber.receive().unwrap().pop().unwrap();
    d.force_reclaim(&h.payload_ref()).unwrap();
    let err = h.payload().unwrap_err();
    assert!(err.is_poisoned());
    let stats = d.arena_stats();
    assert_eq!(stats.reclaimed_while_pinned, 1);
    assert_eq!(stats.poisoned_observations, 1);
}

#[test]
fn global_updates_do_not_depend_on_clone_count() {
    for subs in [1usize, 2, 4, 8] {
        for k in [0usize, 1, 10, 100] {
            let d = domain();
            let p = d.spawn();
            let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
            let procs: Vec<_> = (0..subs).map(|_| d.spawn()).collect();
            let subscribers: Vec<_> = procs
                .iter()
                .map(|q| q.create_subscriber("t", Qos::volatile(1)).unwrap())
                .collect();
            let base = d.broker().counters();
            publisher.loan_with(b"m").unwrap().publish().unwrap();
            for s in &subscribers {
                let h = s.receive().unwrap().pop().unwrap();
                let clones: Vec<_> = (0..k).map(|_| h.try_clone().unwrap()).collect();
                drop(h);
                drop(clones);
            }
            let c = d.broker().counters();
            let delta = UpdateCounters {
                publish_ops: c.publish_ops - base.publish_ops,
                receive_bit_sets: c.receive_bit_sets - base.receive_bit_sets,
                release_bit_clears: c.release_bit_clears - base.release_bit_clears,
                membership_ops: c.membership_ops - base.membership_ops,
            };
            assert_eq!(delta.message_updates(), 1 + 2 * subs as u64, "S={subs} k={k}");
            assert_eq!((delta.receive_bit_sets, delta.release_bit_clears), (subs as u64, subs as u64));
        }
    }
}

#[test]
fn crashed_participant_handles_go_quiet() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    publisher.loan_with(b"x").unwrap().publish().unwrap();
    let h = subscriber.receive().unwrap().pop().unwrap();
    s.crash();
    let snap = d.broker().snapshot(Some("t")).unwrap();
    assert!(snap.topics[0].subscribers.is_empty());
    assert_eq!(snap.topics[0].entries.len(), 1);
    let releases = snap.totals.release_bit_clears;
    drop(h);
    drop(subscriber);
    assert_eq!(d.broker().counters().release_bit_clears, releases);
    assert!(matches!(s.create_subscriber("t", Qos::volatile(1)), Err(ClientError::ProcessGone)));
}

#[test]
fn handles_discarded_by_a_crash_are_not_pinned_during_cleanup() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
    let mut held = Vec::new();
    for payload in [b"x", b"y"] {
        publisher.loan_with(payload).unwrap().publish().unwrap();
        held.extend(subscriber.receive().unwrap());
    }
    assert_eq!(held.len(), 2);
    let releases = d.broker().counters().release_bit_clears;
    s.crash_discarding(held);
    assert_eq!(d.broker().counters().release_bit_clears, releases);
    let stats = d.arena_stats();
    assert_eq!(stats.reclaimed_while_pinned, 0);
    assert_eq!(stats.live_slots, 1);
}

#[test]
fn coalesced_wakeups_drain_in_one_receive() {
    let d = domain();
    let (p, s) = (d.spawn(), d.spawn());
    let publisher = p.create_publisher("t", Qos::volatile(4)).unwrap();
    let subscriber = s.create_subscriber("t", Qos::volatile(4)).unwrap();
    publisher.loan_with(b"1").unwrap().publish().unwrap();
    publisher.loan_with(b"2").unwrap().publish().unwrap();
    let stats = d.notify_stats();
    assert_eq!((stats.delivered, stats.coalesced), (1, 1));
    subscriber.wait(Duration::from_millis(100)).unwrap();
    let got = subscriber.receive().unwrap();
    let ids: Vec<_> = got.iter().map(|h| h.entry_id().unwrap()).collect();
    assert_eq!(ids, vec![EntryId(1), EntryId(2)]);
    assert!(subscriber.wait(Duration::from_millis(1)).is_err());
}

#[test]
fn clone_racing_publish_never_yields_a_valid_copy() {
    let d = domain();
    let p = d.spawn();
    let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
    for _ in 0..200 {
        let h = publisher.loan(8).unwrap();
        let copies = std::thread::scope(|scope| {
            let cloner = scope.spawn(|| {
                let mut got = Vec::new();
                for _ in 0..50 {
                    if let Ok(c) = h.try_clone() {
                        got.push(c);
                    }
                }
                got
            });
            h.publish().unwrap();
            cloner.join().unwrap()
        });
        assert!(copies.iter().all(|c| c.payload().is_err() && !c.is_valid()));
        assert!(h.try_clone().is_err());
    }
}

#[derive(Debug, Clone)]
enum CopyOp {
    Clone(usize),
    Drop(usize),
}

proptest! {
    #[test]
    fn exactly_one_release_per_received_block(ops in prop::collection::vec(
        prop_oneof![(0usize..8).prop_map(CopyOp::Clone), (0usize..8).prop_map(CopyOp::Drop)], 0..60)) {
        let d = domain();
        let (p, s) = (d.spawn(), d.spawn());
        let publisher = p.create_publisher("t", Qos::volatile(1)).unwrap();
        let subscriber = s.create_subscriber("t", Qos::volatile(1)).unwrap();
        publisher.loan_with(b"x").unwrap().publish().unwrap();
        let mut live = subscriber.receive().unwrap();
        for op in ops {
            match op {
                CopyOp::Clone(i) if !live.is_empty() => {
                    let c = live[i % live.len()].try_clone().unwrap();
                    live.push(c);
                }
                CopyOp::Drop(i) if live.len() > 1 => {
                    live.swap_remove(i % live.len());
                }
                _ => {}
            }
            prop_assert_eq!(live[0].local_count(), live.len() as u64);
            prop_assert_eq!(d.broker().counters().release_bit_clears, 0);
        }
        drop(live);
        prop_assert_eq!(d.broker().counters().release_bit_clears, 1);
    }
}

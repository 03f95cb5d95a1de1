use super::*;

const P: Pid = Pid(100);
const S1: Pid = Pid(201);
const S2: Pid = Pid(202);

fn payload(n: u64) -> ArenaRef {
    ArenaRef {
        arena_id: P.0 as u64,
        offset: n * 64,
        length: 16,
    }
}

fn ids(b: &Broker, topic: &str) -> Vec<u64> {
    b.snapshot(Some(topic))
        .unwrap()
        .topics[0]
        .entry_ids()
        .into_iter()
        .map(|e| e.0)
        .collect()
}

fn publish_n(b: &Broker, topic: &str, p: PublisherId, range: std::ops::RangeInclusive<u64>) {
    for n in range {
        b.publish_entry(topic, p, payload(n)).unwrap();
    }
}

#[test]
fn first_registration_creates_topic() {
    let b = Broker::default();
    assert!(b.snapshot(None).unwrap().topics.is_empty());
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    assert_eq!(p, PublisherId(0));
    assert_eq!(b.snapshot(Some("t")).unwrap().topics[0].publishers.len(), 1);
}

#[test]
fn subscriber_id_space_is_bounded_by_width() {
    let b = Broker::default();
    for i in 0..64 {
        let r = b.register_subscriber("t", Qos::volatile(1), Pid(i)).unwrap();
        assert_eq!(r.id, SubscriberId(i));
    }
    assert!(matches!(
        b.register_subscriber("t", Qos::volatile(1), Pid(999)),
        Err(BrokerError::IdSpaceExhausted { width: 64, .. })
    ));
}

#[test]
fn subscriber_ids_are_not_reused() {
    let b = Broker::default();
    b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let a = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    b.unregister_subscriber("t", a).unwrap();
    let c = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    assert_ne!(a, c);
}

#[test]
fn invalid_registrations() {
    let b = Broker::default();
    assert_eq!(b.register_publisher("", Qos::volatile(1), P), Err(BrokerError::InvalidTopicName));
    assert_eq!(b.register_publisher("t", Qos::volatile(0), P), Err(BrokerError::InvalidQos));
    let long = "x".repeat(256);
    assert_eq!(
        b.register_subscriber(&long, Qos::volatile(1), P).err(),
        Some(BrokerError::InvalidTopicName)
    );
}

#[test]
fn two_publishers_share_one_entry_sequence() {
    let b = Broker::default();
    let p0 = b.register_publisher("t", Qos::volatile(10), P).unwrap();
    let p1 = b.register_publisher("t", Qos::volatile(10), Pid(101)).unwrap();
    assert_ne!(p0, p1);
    let mut log = Vec::new();
    for i in 0..6 {
        let p = if i % 3 == 0 { p1 } else { p0 };
        log.push((p, b.publish_entry("t", p, payload(i)).unwrap().entry_id));
    }
    // replay of the publish log: ids are 1..=6 in publish order
    let expected: Vec<_> = (1..=6).map(EntryId).collect();
    assert_eq!(log.iter().map(|(_, e)| *e).collect::<Vec<_>>(), expected);
    let snap = b.snapshot(Some("t")).unwrap();
    for (p, e) in log {
        assert_eq!(snap.topics[0].entry(e).unwrap().publisher, p);
    }
}

#[test]
fn volatile_join_sees_only_future_entries() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::transient_local(5), P).unwrap();
    publish_n(&b, "t", p, 1..=3);
    let r = b.register_subscriber("t", Qos::volatile(5), S1).unwrap();
    assert_eq!(r.initial_watermark, EntryId(3));
    assert!(b.receive_entries("t", r.id).unwrap().is_empty());
}

#[test]
fn transient_local_join_gets_all_retained_when_depth_allows() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::transient_local(5), P).unwrap();
    publish_n(&b, "t", p, 1..=2);
    let r = b.register_subscriber("t", Qos::transient_local(5), S1).unwrap();
    let got: Vec<_> = b.receive_entries("t", r.id).unwrap().iter().map(|d| d.entry_id.0).collect();
    assert_eq!(got, vec![1, 2]);
}

#[test]
fn transient_local_join_depth_one_gets_newest() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::transient_local(2), P).unwrap();
    publish_n(&b, "t", p, 1..=5);
    assert_eq!(ids(&b, "t"), vec![4, 5]);
    let r = b.register_subscriber("t", Qos::transient_local(1), S1).unwrap();
    let got: Vec<_> = b.receive_entries("t", r.id).unwrap().iter().map(|d| d.entry_id.0).collect();
    assert_eq!(got, vec![5]);
}

#[test]
fn graceful_leave_evicts_released_entries_beyond_depth() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    publish_n(&b, "t", p, 1..=7);
    // hold entry 7 only
    let got = b.receive_entries("t", s).unwrap();
    assert_eq!(got.iter().map(|d| d.entry_id.0).collect::<Vec<_>>(), vec![7]);
    b.publish_entry("t", p, payload(8)).unwrap();
    assert_eq!(ids(&b, "t"), vec![7, 8]);
    let evicted = b.unregister_subscriber("t", s).unwrap();
    assert_eq!(evicted, vec![payload(7)]);
    assert_eq!(ids(&b, "t"), vec![8]);
}

#[test]
fn leave_without_bits_evicts_nothing() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(2), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    publish_n(&b, "t", p, 1..=3);
    assert!(b.unregister_subscriber("t", s).unwrap().is_empty());
    assert_eq!(ids(&b, "t"), vec![2, 3]);
}

#[test]
fn leave_while_other_subscriber_holds_entry() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s1 = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    let s2 = b.register_subscriber("t", Qos::volatile(1), S2).unwrap().id;
    b.publish_entry("t", p, payload(1)).unwrap();
    b.receive_entries("t", s1).unwrap();
    b.receive_entries("t", s2).unwrap();
    b.publish_entry("t", p, payload(2)).unwrap();
    assert!(b.unregister_subscriber("t", s1).unwrap().is_empty());
    assert_eq!(ids(&b, "t"), vec![1, 2]);
}

#[test]
fn transient_local_publisher_leave_keeps_history() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::transient_local(3), P).unwrap();
    publish_n(&b, "t", p, 1..=3);
    assert!(b.unregister_publisher("t", p).unwrap().is_empty());
    let snap = b.snapshot(Some("t")).unwrap();
    assert!(snap.topics[0].publishers[0].departed);
    let r = b.register_subscriber("t", Qos::transient_local(3), S1).unwrap();
    assert_eq!(b.receive_entries("t", r.id).unwrap().len(), 3);
}

#[test]
fn volatile_publisher_leave_evicts_unreferenced() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(3), P).unwrap();
    publish_n(&b, "t", p, 1..=3);
    let evicted = b.unregister_publisher("t", p).unwrap();
    assert_eq!(evicted, vec![payload(1), payload(2), payload(3)]);
    // topic emptied entirely
    assert!(matches!(b.snapshot(Some("t")), Err(BrokerError::UnknownTopic(_))));
}

#[test]
fn publisher_leave_while_entry_held() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    b.publish_entry("t", p, payload(1)).unwrap();
    b.receive_entries("t", s).unwrap();
    assert!(b.unregister_publisher("t", p).unwrap().is_empty());
    assert_eq!(ids(&b, "t"), vec![1]);
    b.release_reference("t", s, EntryId(1)).unwrap();
    // evicted at the next membership change
    assert_eq!(b.unregister_subscriber("t", s).unwrap(), vec![payload(1)]);
}

#[test]
fn depth_one_eviction_on_publish() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    b.publish_entry("t", p, payload(1)).unwrap();
    let out = b.publish_entry("t", p, payload(2)).unwrap();
    assert_eq!(out.evicted, vec![payload(1)]);
    assert_eq!(ids(&b, "t"), vec![2]);
}

#[test]
fn held_entry_survives_publish() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    b.publish_entry("t", p, payload(1)).unwrap();
    b.receive_entries("t", s).unwrap();
    let out = b.publish_entry("t", p, payload(2)).unwrap();
    assert!(out.evicted.is_empty());
    assert_eq!(ids(&b, "t"), vec![1, 2]);
}

#[test]
fn depth_three_keeps_newest_three() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::transient_local(3), P).unwrap();
    publish_n(&b, "t", p, 1..=5);
    assert_eq!(ids(&b, "t"), vec![3, 4, 5]);
}

#[test]
fn first_publish_on_empty_topic() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let out = b.publish_entry("t", p, payload(1)).unwrap();
    assert_eq!(out.entry_id, EntryId(1));
    assert!(out.subscribers.is_empty());
    assert!(out.evicted.is_empty());
}

#[test]
fn publish_errors() {
    let b = Broker::default();
    assert!(matches!(
        b.publish_entry("nope", PublisherId(0), payload(1)),
        Err(BrokerError::TopicGone(_))
    ));
    b.register_subscriber("t", Qos::volatile(1), S1).unwrap();
    assert!(matches!(
        b.publish_entry("t", PublisherId(3), payload(1)),
        Err(BrokerError::UnknownEndpoint(_))
    ));
}

#[test]
fn receive_advances_watermark() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(5), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(5), S1).unwrap().id;
    publish_n(&b, "t", p, 1..=3);
    let got = b.receive_entries("t", s).unwrap();
    assert_eq!(got.iter().map(|d| d.entry_id.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    let snap = b.snapshot(Some("t")).unwrap();
    assert_eq!(snap.topics[0].subscriber(s).unwrap().watermark, EntryId(3));
    assert!(snap.topics[0].entries.iter().all(|e| e.holders == vec![s]));
    assert!(b.receive_entries("t", s).unwrap().is_empty());
}

#[test]
fn release_clears_bit_without_eviction() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    b.publish_entry("t", p, payload(1)).unwrap();
    b.receive_entries("t", s).unwrap();
    b.publish_entry("t", p, payload(2)).unwrap();
    b.release_reference("t", s, EntryId(1)).unwrap();
    // no deallocation at release
    let snap = b.snapshot(Some("t")).unwrap();
    assert_eq!(snap.topics[0].entry_ids(), vec![EntryId(1), EntryId(2)]);
    assert!(snap.topics[0].entry(EntryId(1)).unwrap().holders.is_empty());
    assert_eq!(
        b.release_reference("t", s, EntryId(1)),
        Err(BrokerError::BitNotSet {
            subscriber: s,
            entry: EntryId(1)
        })
    );
    // the next publish by the same publisher evicts it
    let out = b.publish_entry("t", p, payload(3)).unwrap();
    assert_eq!(out.evicted, vec![payload(1), payload(2)]);
    assert!(matches!(
        b.release_reference("t", s, EntryId(1)),
        Err(BrokerError::UnknownEntry { .. })
    ));
}

#[test]
fn subscriber_crash_across_topics() {
    let b = Broker::default();
    let pa = b.register_publisher("a", Qos::volatile(1), P).unwrap();
    let pb = b.register_publisher("b", Qos::volatile(1), P).unwrap();
    let sa = b.register_subscriber("a", Qos::volatile(8), S1).unwrap().id;
    let sb = b.register_subscriber("b", Qos::volatile(8), S1).unwrap().id;
    let keep = b.register_subscriber("b", Qos::volatile(8), S2).unwrap().id;
    for n in 1..=3 {
        b.publish_entry("a", pa, payload(n)).unwrap();
        assert_eq!(b.receive_entries("a", sa).unwrap().len(), 1);
    }
    for n in 11..=12 {
        b.publish_entry("b", pb, payload(n)).unwrap();
        assert_eq!(b.receive_entries("b", sb).unwrap().len(), 1);
        assert_eq!(b.receive_entries("b", keep).unwrap().len(), 1);
    }
    // S2 still holds entry 1 on topic b
    b.release_reference("b", keep, EntryId(2)).unwrap();
    let mut evicted = b.handle_process_exit(S1);
    evicted.sort();
    // a: entries 1,2 beyond depth 1 evicted; 3 retained by depth
    // b: entry 1 held by S2; entry 2 within depth
    assert_eq!(evicted, vec![payload(1), payload(2)]);
    assert_eq!(ids(&b, "a"), vec![3]);
    assert_eq!(ids(&b, "b"), vec![1, 2]);
    let snap = b.snapshot(None).unwrap();
    assert!(snap.topics.iter().all(|t| t.subscribers.iter().all(|s| s.pid != S1)));
    assert_eq!(snap.topic("b").unwrap().entry(EntryId(1)).unwrap().holders, vec![keep]);
}

#[test]
fn unknown_pid_exit_is_noop() {
    let b = Broker::default();
    b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let before = b.snapshot(None).unwrap();
    assert!(b.handle_process_exit(Pid(4242)).is_empty());
    assert_eq!(b.snapshot(None).unwrap(), before);
}

#[test]
fn crashed_transient_local_publisher_history_survives() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::transient_local(2), P).unwrap();
    publish_n(&b, "t", p, 1..=4);
    assert!(b.handle_process_exit(P).is_empty());
    let r = b.register_subscriber("t", Qos::transient_local(10), S1).unwrap();
    let got: Vec<_> = b.receive_entries("t", r.id).unwrap().iter().map(|d| d.entry_id.0).collect();
    assert_eq!(got, vec![3, 4]);
}

#[test]
fn snapshot_counts_holders() {
    let b = Broker::default();
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s1 = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    let s2 = b.register_subscriber("t", Qos::volatile(1), S2).unwrap().id;
    let out = b.publish_entry("t", p, payload(1)).unwrap();
    assert_eq!(out.subscribers, vec![s1, s2]);
    b.receive_entries("t", s1).unwrap();
    b.receive_entries("t", s2).unwrap();
    let snap = b.snapshot(Some("t")).unwrap();
    assert_eq!(snap.topics[0].entries[0].holders.len(), 2);
    assert_eq!(
        snap.totals,
        UpdateCounters {
            publish_ops: 1,
            receive_bit_sets: 2,
            release_bit_clears: 0,
            membership_ops: 3
        }
    );
    assert!(matches!(b.snapshot(Some("x")), Err(BrokerError::UnknownTopic(_))));
}

#[test]
fn lock_modes_are_recorded() {
    let b = Broker::new(BrokerConfig {
        record_lock_modes: true,
        ..BrokerConfig::default()
    });
    let p = b.register_publisher("t", Qos::volatile(1), P).unwrap();
    let s = b.register_subscriber("t", Qos::volatile(1), S1).unwrap().id;
    b.publish_entry("t", p, payload(1)).unwrap();
    b.receive_entries("t", s).unwrap();
    b.release_reference("t", s, EntryId(1)).unwrap();
    let log = b.lock_acquisitions();
    let expect = |op, global, topic| log.get(&LockAcquisition { op, global, topic }).copied();
    assert_eq!(expect(OpClass::Membership, LockMode::Write, None), Some(2));
    assert_eq!(expect(OpClass::Publish, LockMode::Read, Some(LockMode::Write)), Some(1));
    assert_eq!(expect(OpClass::Receive, LockMode::Read, Some(LockMode::Read)), Some(1));
    assert_eq!(expect(OpClass::Release, LockMode::Read, Some(LockMode::Read)), Some(1));
    assert_eq!(log.len(), 4);
}

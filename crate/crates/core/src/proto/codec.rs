use std::io::{self, Read, Write};

use super::{Opcode, ProtoError, Reply, Request, RequestFrame, ResponseFrame, MAX_FRAME_LEN};
use crate::arena::ArenaRef;
use crate::broker::{
    BrokerError, Delivery, EntrySnapshot, PublishOutcome, PublisherSnapshot, Snapshot, SubscriberRegistration,
    SubscriberSnapshot, TopicSnapshot, UpdateCounters,
};
use crate::types::{Durability, EntryId, Pid, PublisherId, Qos, SubscriberId};

const HEADER_LEN: usize = 4 + 8 + 1;
const MAX_TOPIC_LEN: usize = 255;

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn frame(request_id: u64, opcode: u8) -> Self {
        let mut buf = Vec::with_capacity(64);
        buf.extend_from_slice(&[0; 4]);
        buf.extend_from_slice(&request_id.to_le_bytes());
        buf.push(opcode);
        Self { buf }
    }

    fn finish(mut self) -> Result<Vec<u8>, ProtoError> {
        let len = u32::try_from(self.buf.len() - 4)
            .ok()
            .filter(|l| *l <= MAX_FRAME_LEN)
            .ok_or_else(|| ProtoError::MalformedFrame("frame too large".into()))?;
        self.buf[..4].copy_from_slice(&len.to_le_bytes());
        Ok(self.buf)
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) -> Result<(), ProtoError> {
        let len = u16::try_from(s.len()).map_err(|_| ProtoError::MalformedFrame("string too long".into()))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    fn topic(&mut self, s: &str) -> Result<(), ProtoError> {
        if s.len() > MAX_TOPIC_LEN {
            return Err(ProtoError::MalformedFrame(format!("topic of {} bytes", s.len())));
        }
        self.str(s)
    }

    fn count(&mut self, n: usize) -> Result<(), ProtoError> {
        let n = u32::try_from(n).map_err(|_| ProtoError::MalformedFrame("list too long".into()))?;
        self.u32(n);
        Ok(())
    }

    fn qos(&mut self, q: Qos) {
        self.u8(q.durability.as_u8());
        self.u32(q.depth);
    }

    fn aref(&mut self, r: &ArenaRef) {
        self.u64(r.arena_id);
        self.u64(r.offset);
        self.u64(r.length);
    }

    fn arefs(&mut self, refs: &[ArenaRef]) -> Result<(), ProtoError> {
        self.count(refs.len())?;
        refs.iter().for_each(|r| self.aref(r));
        Ok(())
    }

    fn counters(&mut self, c: &UpdateCounters) {
        self.u64(c.publish_ops);
        self.u64(c.receive_bit_sets);
        self.u64(c.release_bit_clears);
        self.u64(c.membership_ops);
    }

    fn error(&mut self, e: &BrokerError) -> Result<(), ProtoError> {
        match e {
            BrokerError::IdSpaceExhausted { topic, width } => {
                self.u8(1);
                self.str(topic)?;
                self.u64(*width as u64);
            }
            BrokerError::UnknownEndpoint(t) => {
                self.u8(2);
                self.str(t)?;
            }
            BrokerError::TopicGone(t) => {
                self.u8(3);
                self.str(t)?;
            }
            BrokerError::UnknownTopic(t) => {
                self.u8(4);
                self.str(t)?;
            }
            BrokerError::UnknownEntry { topic, entry } => {
                self.u8(5);
                self.str(topic)?;
                self.u64(entry.0);
            }
            BrokerError::BitNotSet { subscriber, entry } => {
                self.u8(6);
                self.u64(subscriber.0 as u64);
                self.u64(entry.0);
            }
            BrokerError::InvalidTopicName => self.u8(7),
            BrokerError::InvalidQos => self.u8(8),
            BrokerError::Transport(m) => {
                self.u8(9);
                self.str(m)?;
            }
            BrokerError::Remote(m) => {
                self.u8(10);
                self.str(m)?;
            }
        }
        Ok(())
    }

    fn snapshot(&mut self, s: &Snapshot) -> Result<(), ProtoError> {
        self.count(s.topics.len())?;
        for t in &s.topics {
            self.topic(&t.name)?;
            self.u64(t.next_entry_id.0);
            self.u64(t.next_publisher_id as u64);
            self.u64(t.next_subscriber_id as u64);
            self.count(t.publishers.len())?;
            for p in &t.publishers {
                self.u64(p.id.0 as u64);
                self.u64(p.pid.0 as u64);
                self.qos(p.qos);
                self.u8(p.departed as u8);
            }
            self.count(t.subscribers.len())?;
            for s in &t.subscribers {
                self.u64(s.id.0 as u64);
                self.u64(s.pid.0 as u64);
                self.qos(s.qos);
                self.u64(s.watermark.0);
            }
            self.count(t.entries.len())?;
            for e in &t.entries {
                self.u64(e.entry_id.0);
                self.u64(e.publisher.0 as u64);
                self.aref(&e.payload);
                self.count(e.holders.len())?;
                e.holders.iter().for_each(|h| self.u64(h.0 as u64));
            }
            self.counters(&t.counters);
        }
        self.counters(&s.totals);
        Ok(())
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn malformed(msg: impl Into<String>) -> ProtoError {
    ProtoError::MalformedFrame(msg.into())
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| malformed("truncated body"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtoError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8, ProtoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ProtoError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, ProtoError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, ProtoError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn id32(&mut self) -> Result<u32, ProtoError> {
        let v = self.u64()?;
        u32::try_from(v).map_err(|_| malformed(format!("id {v} out of range")))
    }

    fn bool(&mut self) -> Result<bool, ProtoError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(malformed(format!("bad flag {v}"))),
        }
    }

    fn str(&mut self) -> Result<String, ProtoError> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| malformed("invalid UTF-8"))
    }

    fn topic(&mut self) -> Result<String, ProtoError> {
        let s = self.str()?;
        if s.len() > MAX_TOPIC_LEN {
            return Err(malformed(format!("topic of {} bytes", s.len())));
        }
        Ok(s)
    }

    fn count(&mut self, item_len: usize) -> Result<usize, ProtoError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_len) > self.buf.len() - self.pos {
            return Err(malformed("list longer than frame"));
        }
        Ok(n)
    }

    fn pid(&mut self) -> Result<Pid, ProtoError> {
        self.id32().map(Pid)
    }

    fn qos(&mut self) -> Result<Qos, ProtoError> {
        let d = self.u8()?;
        let durability = Durability::from_u8(d).ok_or_else(|| malformed(format!("bad durability {d}")))?;
        Ok(Qos {
            durability,
            depth: self.u32()?,
        })
    }

    fn aref(&mut self) -> Result<ArenaRef, ProtoError> {
        Ok(ArenaRef {
            arena_id: self.u64()?,
            offset: self.u64()?,
            length: self.u64()?,
        })
    }

    fn arefs(&mut self) -> Result<Vec<ArenaRef>, ProtoError> {
        let n = self.count(24)?;
        (0..n).map(|_| self.aref()).collect()
    }

    fn counters(&mut self) -> Result<UpdateCounters, ProtoError> {
        Ok(UpdateCounters {
            publish_ops: self.u64()?,
            receive_bit_sets: self.u64()?,
            release_bit_clears: self.u64()?,
            membership_ops: self.u64()?,
        })
    }

    fn error(&mut self) -> Result<BrokerError, ProtoError> {
        Ok(match self.u8()? {
            1 => BrokerError::IdSpaceExhausted {
                topic: self.str()?,
                width: self.u64()? as usize,
            },
            2 => BrokerError::UnknownEndpoint(self.str()?),
            3 => BrokerError::TopicGone(self.str()?),
            4 => BrokerError::UnknownTopic(self.str()?),
            5 => BrokerError::UnknownEntry {
                topic: self.str()?,
                entry: EntryId(self.u64()?),
            },
            6 => BrokerError::BitNotSet {
                subscriber: SubscriberId(self.id32()?),
                entry: EntryId(self.u64()?),
            },
            7 => BrokerError::InvalidTopicName,
            8 => BrokerError::InvalidQos,
            9 => BrokerError::Transport(self.str()?),
            10 => BrokerError::Remote(self.str()?),
            c => return Err(malformed(format!("unknown error code {c}"))),
        })
    }

    fn snapshot(&mut self) -> Result<Snapshot, ProtoError> {
        let n = self.count(1)?;
        let mut topics = Vec::with_capacity(n);
        for _ in 0..n {
            let name = self.topic()?;
            let next_entry_id = EntryId(self.u64()?);
            let next_publisher_id = self.id32()?;
            let next_subscriber_id = self.id32()?;
            let np = self.count(22)?;
            let publishers = (0..np)
                .map(|_| {
                    Ok(PublisherSnapshot {
                        id: PublisherId(self.id32()?),
                        pid: self.pid()?,
                        qos: self.qos()?,
                        departed: self.bool()?,
                    })
                })
                .collect::<Result<_, ProtoError>>()?;
            let ns = self.count(29)?;
            let subscribers = (0..ns)
                .map(|_| {
                    Ok(SubscriberSnapshot {
                        id: SubscriberId(self.id32()?),
                        pid: self.pid()?,
                        qos: self.qos()?,
                        watermark: EntryId(self.u64()?),
                    })
                })
                .collect::<Result<_, ProtoError>>()?;
            let ne = self.count(44)?;
            let mut entries = Vec::with_capacity(ne);
            for _ in 0..ne {
                let entry_id = EntryId(self.u64()?);
                let publisher = PublisherId(self.id32()?);
                let payload = self.aref()?;
                let nh = self.count(8)?;
                let holders = (0..nh)
                    .map(|_| self.id32().map(SubscriberId))
                    .collect::<Result<_, _>>()?;
                entries.push(EntrySnapshot {
                    entry_id,
                    publisher,
                    payload,
                    holders,
                });
            }
            topics.push(TopicSnapshot {
                name,
                next_entry_id,
                next_publisher_id,
                next_subscriber_id,
                publishers,
                subscribers,
                entries,
                counters: self.counters()?,
            });
        }
        Ok(Snapshot {
            topics,
            totals: self.counters()?,
        })
    }

    fn end(&self) -> Result<(), ProtoError> {
        if self.pos != self.buf.len() {
            return Err(malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Splits a full frame into (request_id, opcode, body), checking the length.
pub(crate) fn split_frame(frame: &[u8]) -> Result<(u64, u8, &[u8]), ProtoError> {
    if frame.len() < HEADER_LEN {
        return Err(malformed("truncated header"));
    }
    let len = u32::from_le_bytes(frame[..4].try_into().expect("4 bytes")) as usize;
    if len != frame.len() - 4 {
        return Err(malformed(format!("length field {len}, frame carries {}", frame.len() - 4)));
    }
    let request_id = u64::from_le_bytes(frame[4..12].try_into().expect("8 bytes"));
    Ok((request_id, frame[12], &frame[HEADER_LEN..]))
}

pub fn encode_request(f: &RequestFrame) -> Result<Vec<u8>, ProtoError> {
    let mut e = Enc::frame(f.request_id, f.request.opcode() as u8);
    match &f.request {
        Request::Hello { version, pid } => {
            e.u8(*version);
            e.u64(pid.0 as u64);
        }
        Request::RegisterPub { topic, qos, pid } | Request::RegisterSub { topic, qos, pid } => {
            e.topic(topic)?;
            e.qos(*qos);
            e.u64(pid.0 as u64);
        }
        Request::UnregisterPub { topic, id } => {
            e.topic(topic)?;
            e.u64(id.0 as u64);
        }
        Request::UnregisterSub { topic, id } => {
            e.topic(topic)?;
            e.u64(id.0 as u64);
        }
        Request::Publish {
            topic,
            publisher,
            payload,
        } => {
            e.topic(topic)?;
            e.u64(publisher.0 as u64);
            e.aref(payload);
        }
        Request::Receive { topic, subscriber } => {
            e.topic(topic)?;
            e.u64(subscriber.0 as u64);
        }
        Request::Release {
            topic,
            subscriber,
            entry,
        } => {
            e.topic(topic)?;
            e.u64(subscriber.0 as u64);
            e.u64(entry.0);
        }
        Request::Snapshot { topic } => match topic {
            Some(t) => {
                e.u8(1);
                e.topic(t)?;
            }
            None => e.u8(0),
        },
    }
    e.finish()
}

pub fn decode_request(frame: &[u8]) -> Result<RequestFrame, ProtoError> {
    let (request_id, op, body) = split_frame(frame)?;
    let opcode = Opcode::from_u8(op).ok_or_else(|| malformed(format!("unknown opcode {op}")))?;
    let mut d = Dec { buf: body, pos: 0 };
    let request = match opcode {
        Opcode::Hello => Request::Hello {
            version: d.u8()?,
            pid: d.pid()?,
        },
        Opcode::RegisterPub => Request::RegisterPub {
            topic: d.topic()?,
            qos: d.qos()?,
            pid: d.pid()?,
        },
        Opcode::RegisterSub => Request::RegisterSub {
            topic: d.topic()?,
            qos: d.qos()?,
            pid: d.pid()?,
        },
        Opcode::UnregisterPub => Request::UnregisterPub {
            topic: d.topic()?,
            id: PublisherId(d.id32()?),
        },
        Opcode::UnregisterSub => Request::UnregisterSub {
            topic: d.topic()?,
            id: SubscriberId(d.id32()?),
        },
        Opcode::Publish => Request::Publish {
            topic: d.topic()?,
            publisher: PublisherId(d.id32()?),
            payload: d.aref()?,
        },
        Opcode::Receive => Request::Receive {
            topic: d.topic()?,
            subscriber: SubscriberId(d.id32()?),
        },
        Opcode::Release => Request::Release {
            topic: d.topic()?,
            subscriber: SubscriberId(d.id32()?),
            entry: EntryId(d.u64()?),
        },
        Opcode::Snapshot => Request::Snapshot {
            topic: if d.bool()? { Some(d.topic()?) } else { None },
        },
    };
    d.end()?;
    Ok(RequestFrame { request_id, request })
}

pub fn encode_response(f: &ResponseFrame) -> Result<Vec<u8>, ProtoError> {
    let mut e = Enc::frame(f.request_id, f.opcode);
    let reply = match &f.result {
        Err(err) => {
            e.u8(1);
            e.error(err)?;
            return e.finish();
        }
        Ok(r) => r,
    };
    e.u8(0);
    let op = Opcode::from_u8(f.opcode);
    match (op, reply) {
        (Some(Opcode::Hello), Reply::Hello { version }) => e.u8(*version),
        (Some(Opcode::RegisterPub), Reply::Publisher(id)) => e.u64(id.0 as u64),
        (Some(Opcode::RegisterSub), Reply::Subscriber(reg)) => {
            e.u64(reg.id.0 as u64);
            e.u64(reg.initial_watermark.0);
        }
        (Some(Opcode::UnregisterPub | Opcode::UnregisterSub), Reply::Evicted(refs)) => e.arefs(refs)?,
        (Some(Opcode::Publish), Reply::Published { outcome, deferred }) => {
            e.u64(outcome.entry_id.0);
            e.count(outcome.subscribers.len())?;
            outcome.subscribers.iter().for_each(|s| e.u64(s.0 as u64));
            e.arefs(&outcome.evicted)?;
            e.arefs(deferred)?;
        }
        (Some(Opcode::Receive), Reply::Deliveries(ds)) => {
            e.count(ds.len())?;
            for d in ds {
                e.u64(d.entry_id.0);
                e.aref(&d.payload);
            }
        }
        (Some(Opcode::Release), Reply::Released) => {}
        (Some(Opcode::Snapshot), Reply::Snapshot(s)) => e.snapshot(s)?,
        _ => return Err(malformed(format!("reply does not match opcode {}", f.opcode))),
    }
    e.finish()
}

pub fn decode_response(frame: &[u8]) -> Result<ResponseFrame, ProtoError> {
    let (request_id, op, body) = split_frame(frame)?;
    let mut d = Dec { buf: body, pos: 0 };
    let result = if d.bool()? {
        Err(d.error()?)
    } else {
        let opcode = Opcode::from_u8(op).ok_or_else(|| malformed(format!("unknown opcode {op}")))?;
        Ok(match opcode {
            Opcode::Hello => Reply::Hello { version: d.u8()? },
            Opcode::RegisterPub => Reply::Publisher(PublisherId(d.id32()?)),
            Opcode::RegisterSub => Reply::Subscriber(SubscriberRegistration {
                id: SubscriberId(d.id32()?),
                initial_watermark: EntryId(d.u64()?),
            }),
            Opcode::UnregisterPub | Opcode::UnregisterSub => Reply::Evicted(d.arefs()?),
            Opcode::Publish => {
                let entry_id = EntryId(d.u64()?);
                let n = d.count(8)?;
                let subscribers = (0..n).map(|_| d.id32().map(SubscriberId)).collect::<Result<_, _>>()?;
                let evicted = d.arefs()?;
                let deferred = d.arefs()?;
                Reply::Published {
                    outcome: PublishOutcome {
                        entry_id,
                        subscribers,
                        evicted,
                    },
                    deferred,
                }
            }
            Opcode::Receive => {
                let n = d.count(32)?;
                let ds = (0..n)
                    .map(|_| {
                        Ok(Delivery {
                            entry_id: EntryId(d.u64()?),
                            payload: d.aref()?,
                        })
                    })
                    .collect::<Result<_, ProtoError>>()?;
                Reply::Deliveries(ds)
            }
            Opcode::Release => Reply::Released,
            Opcode::Snapshot => Reply::Snapshot(d.snapshot()?),
        })
    };
    d.end()?;
    Ok(ResponseFrame {
        request_id,
        opcode: op,
        result,
    })
}

/// Canonical byte encoding of a snapshot (the body of a Snapshot reply).
pub fn encode_snapshot(s: &Snapshot) -> Result<Vec<u8>, ProtoError> {
    let mut e = Enc { buf: Vec::new() };
    e.snapshot(s)?;
    Ok(e.buf)
}

/// Reads one whole frame (length field included). `Ok(None)` on a clean EOF
/// before the first byte.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, ProtoError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(malformed("truncated length field")),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let n = u32::from_le_bytes(len);
    if n > MAX_FRAME_LEN {
        return Err(malformed(format!("frame length {n} over limit")));
    }
    let mut frame = vec![0u8; 4 + n as usize];
    frame[..4].copy_from_slice(&len);
    r.read_exact(&mut frame[4..]).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => malformed("truncated frame"),
        _ => e.into(),
    })?;
    Ok(Some(frame))
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> Result<(), ProtoError> {
    w.write_all(frame)?;
    w.flush()?;
    Ok(())
}

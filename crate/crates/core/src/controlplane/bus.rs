//! Topic-based publish/subscribe channel between agents and the controller.
//!
//! Delivery is at-least-once; subscribers deduplicate with [`SeqTracker`].

use std::collections::{BTreeMap, VecDeque};

use super::messages::Notification;

/// Topic filter: an exact topic, or a prefix followed by `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicPattern(String);

impl TopicPattern {
    pub fn new(pattern: impl Into<String>) -> Self {
        Self(pattern.into())
    }

    pub fn matches(&self, topic: &str) -> bool {
        match self.0.strip_suffix('*') {
            Some(prefix) => topic.starts_with(prefix),
            None => self.0 == topic,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NotificationBus {
    subscriptions: Vec<(TopicPattern, String)>,
    queues: BTreeMap<String, VecDeque<Notification>>,
    published: u64,
}

impl NotificationBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe(&mut self, subscriber: &str, pattern: &str) {
        self.subscriptions
            .push((TopicPattern::new(pattern), subscriber.to_string()));
        self.queues.entry(subscriber.to_string()).or_default();
    }

    /// Queues the notification once for every subscriber with a matching
    /// pattern.
    pub fn publish(&mut self, notification: Notification) {
        self.published += 1;
        let mut targets: Vec<&str> = self
            .subscriptions
            .iter()
            .filter(|(p, _)| p.matches(&notification.topic))
            .map(|(_, s)| s.as_str())
            .collect();
        targets.dedup();
        let targets: Vec<String> = targets.into_iter().map(str::to_string).collect();
        for t in targets {
            self.queues.entry(t).or_default().push_back(notification.clone());
        }
    }

    pub fn poll(&mut self, subscriber: &str) -> Option<Notification> {
        self.queues.get_mut(subscriber)?.pop_front()
    }

    pub fn is_idle(&self) -> bool {
        self.queues.values().all(VecDeque::is_empty)
    }

    pub fn published(&self) -> u64 {
        self.published
    }
}

/// Per-emitter sequence tracking for duplicate suppression.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeqTracker {
    last: BTreeMap<String, u64>,
}

impl SeqTracker {
    /// True when `seq` is new for `emitter`; stale and repeated numbers are
    /// rejected.
    pub fn accept(&mut self, emitter: &str, seq: u64) -> bool {
        let last = self.last.entry(emitter.to_string()).or_insert(0);
        if seq > *last {
            *last = seq;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controlplane::messages::NotificationKind;

    fn note(kind: NotificationKind, seq: u64) -> Notification {
        Notification {
            topic: kind.topic().to_string(),
            emitter: "n".into(),
            kind,
            payload: serde_json::Value::Null,
            seq,
        }
    }

    #[test]
    fn wildcard_routing() {
        let mut bus = NotificationBus::new();
        bus.subscribe("ctl", "qkd.app.*");
        bus.subscribe("mon", "qkd.link.status");
        bus.publish(note(NotificationKind::AppConnected, 1));
        bus.publish(note(NotificationKind::LinkStatus, 2));
        bus.publish(note(NotificationKind::KeyLowWatermark, 3));
        assert_eq!(bus.poll("ctl").unwrap().seq, 1);
        assert!(bus.poll("ctl").is_none());
        assert_eq!(bus.poll("mon").unwrap().seq, 2);
        assert!(bus.is_idle());
    }

    #[test]
    fn duplicates_are_dropped() {
        let mut t = SeqTracker::default();
        assert!(t.accept("a", 1));
        assert!(!t.accept("a", 1));
        assert!(t.accept("b", 1));
        assert!(t.accept("a", 2));
        assert!(!t.accept("a", 1));
    }
}

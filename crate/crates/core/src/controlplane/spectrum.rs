//! DWDM grid assignment for links carrying a quantum channel next to
//! classical traffic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ControlError;

pub const DEFAULT_GRID_SLOTS: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotAssignment {
    /// Classical channel, numbered from 1 in grid order.
    Classical(u32),
    Quantum,
    Pilot,
    Empty,
}

/// Slot occupancy of one fiber. Slots are numbered from 1; unlisted slots
/// are empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumMap {
    pub grid_slots: u32,
    pub assignments: BTreeMap<u32, SlotAssignment>,
}

impl SpectrumMap {
    pub fn slot(&self, index: u32) -> SlotAssignment {
        self.assignments.get(&index).copied().unwrap_or(SlotAssignment::Empty)
    }

    pub fn classical_count(&self) -> usize {
        self.assignments
            .values()
            .filter(|a| matches!(a, SlotAssignment::Classical(_)))
            .count()
    }

    pub fn slot_of(&self, wanted: SlotAssignment) -> Option<u32> {
        self.assignments
            .iter()
            .find(|(_, a)| **a == wanted)
            .map(|(slot, _)| *slot)
    }

    /// Classical channels adjacent to the pilot as `(below, above)`.
    pub fn pilot_neighbours(&self) -> (Option<u32>, Option<u32>) {
        let Some(pilot) = self.slot_of(SlotAssignment::Pilot) else {
            return (None, None);
        };
        let below = self
            .assignments
            .range(..pilot)
            .rev()
            .find_map(|(_, a)| match a {
                SlotAssignment::Classical(c) => Some(*c),
                _ => None,
            });
        let above = self
            .assignments
            .range(pilot + 1..)
            .find_map(|(_, a)| match a {
                SlotAssignment::Classical(c) => Some(*c),
                _ => None,
            });
        (below, above)
    }

    /// Checks the map is collision free and marks a quantum channel.
    pub fn validate(&self) -> Result<(), String> {
        let mut quantum = 0;
        let mut pilot = 0;
        let mut channels = BTreeSet::new();
        for (slot, a) in &self.assignments {
            if *slot == 0 || *slot > self.grid_slots {
                return Err(format!("slot {slot} outside grid of {}", self.grid_slots));
            }
            match a {
                SlotAssignment::Quantum => quantum += 1,
                SlotAssignment::Pilot => pilot += 1,
                SlotAssignment::Classical(c) => {
                    if !channels.insert(*c) {
                        return Err(format!("classical channel {c} assigned twice"));
                    }
                }
                SlotAssignment::Empty => {}
            }
        }
        if quantum != 1 || pilot != 1 {
            return Err(format!("expected one quantum and one pilot slot, got {quantum} and {pilot}"));
        }
        let q = self.slot_of(SlotAssignment::Quantum).unwrap_or(0);
        let p = self.slot_of(SlotAssignment::Pilot).unwrap_or(0);
        if q.abs_diff(p) != 1 {
            return Err(format!("pilot slot {p} not adjacent to quantum slot {q}"));
        }
        Ok(())
    }
}

/// Lays classical channels out in grid order with the pilot tone and the
/// quantum channel inserted after classical channel `pilot_after`.
///
/// `pilot_after` defaults to `ceil(n / 2)`. The resulting order is
/// `C1 .. Ck, pilot, quantum, Ck+1 .. Cn` starting at slot 1.
pub fn assign_spectrum(
    n_classical: u32,
    grid_slots: u32,
    pilot_after: Option<u32>,
) -> Result<SpectrumMap, ControlError> {
    let needed = n_classical as u64 + 2;
    if needed > grid_slots as u64 {
        return Err(ControlError::GridOverflow {
            needed: needed as u32,
            grid_slots,
        });
    }
    let k = pilot_after.unwrap_or(n_classical.div_ceil(2));
    if k > n_classical {
        return Err(ControlError::InvalidRequest(format!(
            "pilot placement after channel {k} but only {n_classical} classical channels"
        )));
    }
    let mut assignments = BTreeMap::new();
    let mut slot = 1;
    for c in 1..=k {
        assignments.insert(slot, SlotAssignment::Classical(c));
        slot += 1;
    }
    assignments.insert(slot, SlotAssignment::Pilot);
    assignments.insert(slot + 1, SlotAssignment::Quantum);
    slot += 2;
    for c in k + 1..=n_classical {
        assignments.insert(slot, SlotAssignment::Classical(c));
        slot += 1;
    }
    Ok(SpectrumMap { grid_slots, assignments })
}

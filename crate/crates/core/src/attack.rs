//! Adversary actions, the one-bus-per-window action mask, and window labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Bus index in `0..N`, or [`NO_ATTACK`].
pub type Label = i32;

pub const NO_ATTACK: Label = -1;

/// Classifier output index for a label: `-1 -> 0`, bus `i -> i + 1`.
#[inline]
pub fn label_to_class(label: Label) -> usize {
    debug_assert!(label >= NO_ATTACK);
    (label + 1) as usize
}

#[inline]
pub fn class_to_label(class: usize) -> Label {
    class as Label - 1
}

/// Value written over the attacked droop gain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DroopSetting {
    #[serde(rename = "-1")]
    Minus,
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "1")]
    Plus,
}

impl DroopSetting {
    pub const ALL: [DroopSetting; 3] = [DroopSetting::Minus, DroopSetting::Zero, DroopSetting::Plus];

    /// Position in the categorical head: `-1 -> 0`, `0 -> 1`, `1 -> 2`.
    pub fn index(self) -> usize {
        match self {
            DroopSetting::Minus => 0,
            DroopSetting::Zero => 1,
            DroopSetting::Plus => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_i8(self) -> i8 {
        self.index() as i8 - 1
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(DroopSetting::Minus),
            0 => Some(DroopSetting::Zero),
            1 => Some(DroopSetting::Plus),
            _ => None,
        }
    }

    pub fn value<T: Scalar>(self) -> T {
        T::lit(self.as_i8() as f64)
    }
}

/// Raw adversary output `(g^A, c, m)` before masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryAction {
    pub bus: Label,
    pub setting: DroopSetting,
    pub mute: bool,
}

impl AdversaryAction {
    pub fn new(bus: Label, setting: DroopSetting, mute: bool, n_buses: usize) -> Result<Self> {
        if bus < NO_ATTACK || bus >= n_buses as Label {
            return Err(Error::contract(format!("bus {bus} outside -1..{n_buses}")));
        }
        Ok(Self { bus, setting, mute })
    }

    pub fn idle() -> Self {
        Self { bus: NO_ATTACK, setting: DroopSetting::Zero, mute: false }
    }
}

/// Attack bookkeeping over the current detection window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRecord {
    /// Bus committed this window, `-1` until one is named.
    pub recorded: Label,
    /// Whether any step of this window carried an effective attack.
    pub attacked_any_step: bool,
    pub window_start: usize,
}

impl WindowRecord {
    pub fn fresh(window_start: usize) -> Self {
        Self { recorded: NO_ATTACK, attacked_any_step: false, window_start }
    }
}

/// Post-processing mask: at most one bus may be attacked per window.
///
/// * no bus recorded yet: the requested bus is attacked and, if it is a real
///   bus, committed for the rest of the window (the mute flag is ignored);
/// * a bus is recorded and `mute` is clear: the recorded bus is attacked,
///   whatever bus was requested;
/// * a bus is recorded and `mute` is set: nothing is attacked this step.
pub fn apply_mask(record: &WindowRecord, action: &AdversaryAction) -> (Label, WindowRecord) {
    let mut next = *record;
    let effective = if record.recorded == NO_ATTACK {
        next.recorded = action.bus;
        action.bus
    } else if !action.mute {
        record.recorded
    } else {
        NO_ATTACK
    };
    next.attacked_any_step |= effective != NO_ATTACK;
    (effective, next)
}

/// Reference gains with the effective bus overwritten by `setting`.
pub fn effective_droop<T: Scalar>(k_ref: &[T], effective: Label, setting: DroopSetting) -> Vec<T> {
    let mut k = k_ref.to_vec();
    if effective != NO_ATTACK {
        k[effective as usize] = setting.value();
    }
    k
}

/// Detection times `{d, 2d, ...} ∩ [0, T-1]`.
pub fn detection_times(steps: usize, d: usize) -> Vec<usize> {
    assert!(d >= 1, "window length must be positive");
    (1..)
        .map(|j| j * d)
        .take_while(|&t| t < steps)
        .collect()
}

#[inline]
pub fn is_detection_time(t: usize, steps: usize, d: usize) -> bool {
    t > 0 && t < steps && t % d == 0
}

/// Ground-truth label of a window: the recorded bus if it was attacked at
/// least once, otherwise [`NO_ATTACK`]. Only defined at detection times.
pub fn window_label(record: &WindowRecord, t: usize, steps: usize, d: usize) -> Result<Label> {
    if !is_detection_time(t, steps, d) {
        return Err(Error::contract(format!("window label requested at non-detection step {t}")));
    }
    Ok(if record.attacked_any_step { record.recorded } else { NO_ATTACK })
}
